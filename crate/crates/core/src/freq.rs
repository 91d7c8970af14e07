//! Orthonormal single-level Haar DWT, radix-2 FFT, DCT-II and the band-mask
//! geometry used to split spectra into frequency bands.
//!
//! All transforms act on the last two axes of a tensor of rank ≥ 2. Each has
//! a plain slice kernel and a differentiable graph op. Multi-part results
//! (sub-bands, real/imaginary planes) are packed along a new leading axis and
//! exposed through small handle structs.

use std::f64::consts::PI;

use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{invalid, shape_err, Result, TensorError};
use crate::{Float, Tensor};

// ----- plain kernels ---------------------------------------------------------

/// Haar analysis of `p` planes of `h x w`. Output is `[4][p][h/2][w/2]` in
/// LL, LH, HL, HH order, where the first letter is the filter along a row.
pub fn haar_analysis<T: Float>(x: &[T], p: usize, h: usize, w: usize) -> Vec<T> {
    let (hh, hw) = (h / 2, w / 2);
    let band = p * hh * hw;
    let half = T::from_f64(0.5);
    let mut out = vec![T::zero(); 4 * band];
    for pi in 0..p {
        let src = &x[pi * h * w..(pi + 1) * h * w];
        for i in 0..hh {
            for j in 0..hw {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                let o = pi * hh * hw + i * hw + j;
                out[o] = (a + b + c + d) * half;
                out[band + o] = (a + b - c - d) * half;
                out[2 * band + o] = (a - b + c - d) * half;
                out[3 * band + o] = (a - b - c + d) * half;
            }
        }
    }
    out
}

/// Exact inverse (and adjoint) of [`haar_analysis`]; `h, w` are the output
/// extents.
pub fn haar_synthesis<T: Float>(bands: &[T], p: usize, h: usize, w: usize) -> Vec<T> {
    let (hh, hw) = (h / 2, w / 2);
    let band = p * hh * hw;
    let half = T::from_f64(0.5);
    let mut out = vec![T::zero(); p * h * w];
    for pi in 0..p {
        let dst = &mut out[pi * h * w..(pi + 1) * h * w];
        for i in 0..hh {
            for j in 0..hw {
                let o = pi * hh * hw + i * hw + j;
                let (ll, lh, hl, hhv) = (bands[o], bands[band + o], bands[2 * band + o], bands[3 * band + o]);
                dst[2 * i * w + 2 * j] = (ll + lh + hl + hhv) * half;
                dst[2 * i * w + 2 * j + 1] = (ll + lh - hl - hhv) * half;
                dst[(2 * i + 1) * w + 2 * j] = (ll - lh + hl - hhv) * half;
                dst[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hhv) * half;
            }
        }
    }
    out
}

/// In-place radix-2 FFT of one complex sequence. `sign` is -1 for the forward
/// transform and +1 for the (unscaled) inverse.
fn fft1d<T: Float>(re: &mut [T], im: &mut [T], sign: f64) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = sign * 2.0 * PI / len as f64;
        for k in 0..len / 2 {
            let (wr, wi) = (T::from_f64((step * k as f64).cos()), T::from_f64((step * k as f64).sin()));
            for s in (0..n).step_by(len) {
                let (a, b) = (s + k, s + k + len / 2);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// 2D FFT over `p` planes of `m x n`, in place. The inverse carries the
/// `1/(mn)` factor.
pub fn fft_planes<T: Float>(re: &mut [T], im: &mut [T], p: usize, m: usize, n: usize, inverse: bool) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let (mut cr, mut ci) = (vec![T::zero(); m], vec![T::zero(); m]);
    for pi in 0..p {
        let base = pi * m * n;
        for r in 0..m {
            let s = base + r * n;
            fft1d(&mut re[s..s + n], &mut im[s..s + n], sign);
        }
        for col in 0..n {
            for r in 0..m {
                cr[r] = re[base + r * n + col];
                ci[r] = im[base + r * n + col];
            }
            fft1d(&mut cr, &mut ci, sign);
            for r in 0..m {
                re[base + r * n + col] = cr[r];
                im[base + r * n + col] = ci[r];
            }
        }
    }
    if inverse {
        let s = T::from_f64(1.0 / (m * n) as f64);
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= s);
    }
}

/// Orthonormal DCT-II matrix `D[k][i] = a_k cos(pi (2i+1) k / 2n)`.
pub fn dct_matrix<T: Float>(n: usize) -> Vec<T> {
    let mut d = vec![T::zero(); n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            d[k * n + i] = T::from_f64(a * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos());
        }
    }
    d
}

/// Separable orthonormal DCT-II (`inverse = false`) or DCT-III over `p`
/// planes of `m x n`: `Y = Dm X Dn^T`, inverse `X = Dm^T Y Dn`.
pub fn dct_planes<T: Float>(x: &[T], p: usize, m: usize, n: usize, inverse: bool) -> Vec<T> {
    let dm = dct_matrix::<T>(m);
    let dn = dct_matrix::<T>(n);
    let mut tmp = vec![T::zero(); m * n];
    let mut out = vec![T::zero(); p * m * n];
    let (m_i, n_i) = (m as isize, n as isize);
    for pi in 0..p {
        let src = &x[pi * m * n..(pi + 1) * m * n];
        let dst = &mut out[pi * m * n..(pi + 1) * m * n];
        if inverse {
            // tmp = Dm^T X ; out = tmp Dn
            T::gemm(m, m, n, T::one(), &dm, 1, m_i, src, n_i, 1, T::zero(), &mut tmp, n_i, 1);
            T::gemm(m, n, n, T::one(), &tmp, n_i, 1, &dn, n_i, 1, T::zero(), dst, n_i, 1);
        } else {
            // tmp = Dm X ; out = tmp Dn^T
            T::gemm(m, m, n, T::one(), &dm, m_i, 1, src, n_i, 1, T::zero(), &mut tmp, n_i, 1);
            T::gemm(m, n, n, T::one(), &tmp, n_i, 1, &dn, 1, n_i, T::zero(), dst, n_i, 1);
        }
    }
    out
}

// ----- graph ops ---------------------------------------------------------------

/// The four Haar sub-bands, each shaped like the input with the last two
/// extents halved.
#[derive(Clone, Copy, Debug)]
pub struct SubbandSet {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `F(0,0)` at index `(0,0)`.
    Natural,
    /// `F(0,0)` at `(H/2, W/2)`.
    Centered,
}

/// Complex spectrum stored as a `[2, ..]` tensor of real and imaginary planes.
#[derive(Clone, Copy, Debug)]
pub struct Spectrum {
    pub packed: Var,
    pub layout: Layout,
}

impl Spectrum {
    pub fn re<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        unpack(g, self.packed, 2, 0)
    }

    pub fn im<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        unpack(g, self.packed, 2, 1)
    }
}

/// Real DCT-II coefficients, same shape as the input.
#[derive(Clone, Copy, Debug)]
pub struct DctSpectrum {
    pub coef: Var,
}

fn plane_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("need rank >= 2, got {shape:?}")));
    }
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    Ok((shape[..r - 2].iter().product(), h, w))
}

fn unpack<T: Float>(g: &mut Graph<T>, packed: Var, parts: usize, i: usize) -> Result<Var> {
    let shape = g.shape(packed).to_vec();
    if shape.first() != Some(&parts) {
        return Err(shape_err("unpack", format!("expected leading extent {parts}, got {shape:?}")));
    }
    let v = g.narrow(packed, 0, i, 1)?;
    g.reshape(v, &shape[1..])
}

fn pack<T: Float>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    let shape = g.shape(parts[0]).to_vec();
    let mut lifted = Vec::with_capacity(parts.len());
    for &p in parts {
        if g.shape(p) != shape.as_slice() {
            return Err(shape_err("pack", format!("{:?} vs {:?}", g.shape(p), shape)));
        }
        let s: Vec<usize> = std::iter::once(1).chain(shape.iter().copied()).collect();
        lifted.push(g.reshape(p, &s)?);
    }
    g.concat(&lifted, 0)
}

/// Single-level orthonormal Haar analysis of the last two axes.
pub fn dwt2<T: Float>(g: &mut Graph<T>, x: Var) -> Result<SubbandSet> {
    let xs = g.shape(x).to_vec();
    let (p, h, w) = plane_dims("dwt2", &xs)?;
    let r = xs.len();
    for (axis, extent) in [(r - 2, h), (r - 1, w)] {
        if extent % 2 != 0 {
            return Err(TensorError::OddExtent { op: "dwt2", axis, extent });
        }
    }
    let mut out_shape = vec![4];
    out_shape.extend_from_slice(&xs[..r - 2]);
    out_shape.extend_from_slice(&[h / 2, w / 2]);
    let v = haar_analysis(g.value(x).data(), p, h, w);
    let packed = g.push(
        Tensor::new(out_shape, v)?,
        &[x],
        Box::new(move |c: &BackwardCtx<T>| {
            vec![Some(Tensor::new(xs.clone(), haar_synthesis(c.grad.data(), p, h, w)).expect("shape"))]
        }),
    );
    Ok(SubbandSet {
        ll: unpack(g, packed, 4, 0)?,
        lh: unpack(g, packed, 4, 1)?,
        hl: unpack(g, packed, 4, 2)?,
        hh: unpack(g, packed, 4, 3)?,
    })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2<T: Float>(g: &mut Graph<T>, s: &SubbandSet) -> Result<Var> {
    let packed = pack(g, &[s.ll, s.lh, s.hl, s.hh])?;
    let ps = g.shape(packed).to_vec();
    let (p, hh, hw) = plane_dims("idwt2", &ps[1..])?;
    let (h, w) = (2 * hh, 2 * hw);
    let mut out_shape = ps[1..ps.len() - 2].to_vec();
    out_shape.extend_from_slice(&[h, w]);
    let v = haar_synthesis(g.value(packed).data(), p, h, w);
    Ok(g.push(
        Tensor::new(out_shape, v)?,
        &[packed],
        Box::new(move |c: &BackwardCtx<T>| {
            vec![Some(Tensor::new(ps.clone(), haar_analysis(c.grad.data(), p, h, w)).expect("shape"))]
        }),
    ))
}

fn check_pow2(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (p, h, w) = plane_dims(op, shape)?;
    let r = shape.len();
    for (axis, extent) in [(r - 2, h), (r - 1, w)] {
        if !extent.is_power_of_two() {
            return Err(TensorError::NotPowerOfTwo { op, axis, extent });
        }
    }
    Ok((p, h, w))
}

/// Unnormalized forward DFT of a real tensor over its last two axes.
pub fn fft2<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Spectrum> {
    let xs = g.shape(x).to_vec();
    let (p, h, w) = check_pow2("fft2", &xs)?;
    let n = p * h * w;
    let mut re = g.value(x).data().to_vec();
    let mut im = vec![T::zero(); n];
    fft_planes(&mut re, &mut im, p, h, w, false);
    re.extend_from_slice(&im);
    let out_shape: Vec<usize> = std::iter::once(2).chain(xs.iter().copied()).collect();
    let packed = g.push(
        Tensor::new(out_shape, re)?,
        &[x],
        Box::new(move |c: &BackwardCtx<T>| {
            // dL/dx = Re(MN * ifft(G))
            let gd = c.grad.data();
            let (mut gr, mut gi) = (gd[..n].to_vec(), gd[n..].to_vec());
            fft_planes(&mut gr, &mut gi, p, h, w, true);
            let s = T::from_usize(h * w);
            gr.iter_mut().for_each(|v| *v *= s);
            vec![Some(Tensor::new(xs.clone(), gr).expect("shape"))]
        }),
    );
    Ok(Spectrum {
        packed,
        layout: Layout::Natural,
    })
}

/// Real part of the inverse DFT (with the `1/(MN)` factor). Exact for the
/// conjugate-symmetric spectra of real signals and their symmetric masks.
/// A centered spectrum is shifted back first.
pub fn ifft2<T: Float>(g: &mut Graph<T>, s: &Spectrum) -> Result<Var> {
    let s = match s.layout {
        Layout::Natural => *s,
        Layout::Centered => ifftshift(g, s)?,
    };
    let ps = g.shape(s.packed).to_vec();
    if ps.first() != Some(&2) {
        return Err(shape_err("ifft2", format!("packed spectrum must lead with 2, got {ps:?}")));
    }
    let (p, h, w) = check_pow2("ifft2", &ps[1..])?;
    let n = p * h * w;
    let d = g.value(s.packed).data();
    let (mut re, mut im) = (d[..n].to_vec(), d[n..].to_vec());
    fft_planes(&mut re, &mut im, p, h, w, true);
    Ok(g.push(
        Tensor::new(ps[1..].to_vec(), re)?,
        &[s.packed],
        Box::new(move |c: &BackwardCtx<T>| {
            let mut gr = c.grad.data().to_vec();
            let mut gi = vec![T::zero(); n];
            fft_planes(&mut gr, &mut gi, p, h, w, false);
            let s = T::from_f64(1.0 / (h * w) as f64);
            gr.extend_from_slice(&gi);
            gr.iter_mut().for_each(|v| *v *= s);
            vec![Some(Tensor::new(ps.clone(), gr).expect("shape"))]
        }),
    ))
}

fn shift<T: Float>(g: &mut Graph<T>, s: &Spectrum, forward: bool, layout: Layout) -> Result<Spectrum> {
    let shape = g.shape(s.packed).to_vec();
    let r = shape.len();
    let (h, w) = (shape[r - 2] as isize, shape[r - 1] as isize);
    let (sh, sw) = if forward { (h / 2, w / 2) } else { (-(h / 2), -(w / 2)) };
    let a = g.roll(s.packed, r - 2, sh)?;
    let packed = g.roll(a, r - 1, sw)?;
    Ok(Spectrum { packed, layout })
}

/// Moves `F(0,0)` to the centre.
pub fn fftshift<T: Float>(g: &mut Graph<T>, s: &Spectrum) -> Result<Spectrum> {
    if s.layout == Layout::Centered {
        return Err(invalid("fftshift", "spectrum is already centered"));
    }
    shift(g, s, true, Layout::Centered)
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Float>(g: &mut Graph<T>, s: &Spectrum) -> Result<Spectrum> {
    if s.layout == Layout::Natural {
        return Err(invalid("ifftshift", "spectrum is not centered"));
    }
    shift(g, s, false, Layout::Natural)
}

/// Orthonormal 2D DCT-II over the last two axes.
pub fn dct2<T: Float>(g: &mut Graph<T>, x: Var) -> Result<DctSpectrum> {
    Ok(DctSpectrum {
        coef: dct_op(g, x, false)?,
    })
}

/// Orthonormal 2D DCT-III, the inverse of [`dct2`].
pub fn idct2<T: Float>(g: &mut Graph<T>, s: &DctSpectrum) -> Result<Var> {
    dct_op(g, s.coef, true)
}

fn dct_op<T: Float>(g: &mut Graph<T>, x: Var, inverse: bool) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let (p, h, w) = plane_dims(if inverse { "idct2" } else { "dct2" }, &xs)?;
    let v = dct_planes(g.value(x).data(), p, h, w, inverse);
    Ok(g.push(
        Tensor::new(xs.clone(), v)?,
        &[x],
        Box::new(move |c: &BackwardCtx<T>| {
            vec![Some(Tensor::new(xs.clone(), dct_planes(c.grad.data(), p, h, w, !inverse)).expect("shape"))]
        }),
    ))
}

// ----- band masks ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Concentric rings around the centre of a centered spectrum.
    Ring,
    /// Anti-diagonal wedges `u + v` from the upper-left corner of a DCT.
    Wedge,
}

/// A partition of an `h x w` coefficient grid into `k` bands, innermost
/// (lowest frequency) first.
#[derive(Clone, Debug, PartialEq)]
pub struct BandMaskSet {
    pub kind: MaskKind,
    pub h: usize,
    pub w: usize,
    /// Band index of every coefficient, row-major.
    pub assignment: Vec<usize>,
    pub count: usize,
}

impl BandMaskSet {
    /// Binary mask of band `b` (0-based) as an `[h, w]` tensor.
    pub fn mask<T: Float>(&self, b: usize) -> Tensor<T> {
        let d = self
            .assignment
            .iter()
            .map(|&a| if a == b { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.h, self.w], d).expect("mask shape")
    }

    pub fn band_size(&self, b: usize) -> usize {
        self.assignment.iter().filter(|&&a| a == b).count()
    }
}

/// Builds `k` disjoint, exhaustive band masks.
///
/// Ring: `r = |(u,v) - (h/2, w/2)|`, thresholds `r_j = (j/k) r_max` with
/// `r_max` the half-diagonal; band `j` keeps `r_{j-1} <= r < r_j`, the last
/// band also keeps `r = r_max`. Wedge: thresholds `t_j = ceil(j (h+w-1) / k)`
/// on `u + v`.
pub fn make_band_masks(kind: MaskKind, h: usize, w: usize, k: usize) -> Result<BandMaskSet> {
    if k == 0 {
        return Err(invalid("make_band_masks", "band count must be at least 1"));
    }
    if h < 2 || w < 2 {
        return Err(invalid("make_band_masks", format!("grid {h}x{w} is smaller than 2x2")));
    }
    let mut assignment = Vec::with_capacity(h * w);
    match kind {
        MaskKind::Ring => {
            let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
            let r_max = (ch * ch + cw * cw).sqrt();
            let thresholds: Vec<f64> = (1..k).map(|j| j as f64 / k as f64 * r_max).collect();
            for u in 0..h {
                for v in 0..w {
                    let r = ((u as f64 - ch).powi(2) + (v as f64 - cw).powi(2)).sqrt();
                    assignment.push(thresholds.iter().filter(|&&t| r >= t).count());
                }
            }
        }
        MaskKind::Wedge => {
            let span = h + w - 1;
            let thresholds: Vec<usize> = (1..k).map(|j| (j * span).div_ceil(k)).collect();
            for u in 0..h {
                for v in 0..w {
                    assignment.push(thresholds.iter().filter(|&&t| u + v >= t).count());
                }
            }
        }
    }
    let set = BandMaskSet {
        kind,
        h,
        w,
        assignment,
        count: k,
    };
    if let Some(empty) = (0..k).find(|&b| set.band_size(b) == 0) {
        return Err(invalid(
            "make_band_masks",
            format!("{k} {kind:?} bands do not fit a {h}x{w} grid (band {} is empty)", empty + 1),
        ));
    }
    Ok(set)
}

/// Multiplies the last two axes of `x` by an `[h, w]` mask.
fn mask_var<T: Float>(g: &mut Graph<T>, x: Var, mask: &Tensor<T>) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let r = xs.len();
    if r < 2 || xs[r - 2..] != *mask.shape() {
        return Err(shape_err("apply_mask", format!("mask {:?} vs spectrum {xs:?}", mask.shape())));
    }
    let reps: usize = xs[..r - 2].iter().product();
    let mut d = Vec::with_capacity(reps * mask.numel());
    for _ in 0..reps {
        d.extend_from_slice(mask.data());
    }
    let m = g.constant(Tensor::new(xs, d)?);
    g.mul(x, m)
}

/// A spectrum that can be band-limited by [`apply_mask`].
pub trait Maskable: Sized {
    fn apply_mask<T: Float>(&self, g: &mut Graph<T>, mask: &Tensor<T>) -> Result<Self>;
}

impl Maskable for Spectrum {
    fn apply_mask<T: Float>(&self, g: &mut Graph<T>, mask: &Tensor<T>) -> Result<Self> {
        Ok(Spectrum {
            packed: mask_var(g, self.packed, mask)?,
            layout: self.layout,
        })
    }
}

impl Maskable for DctSpectrum {
    fn apply_mask<T: Float>(&self, g: &mut Graph<T>, mask: &Tensor<T>) -> Result<Self> {
        Ok(DctSpectrum {
            coef: mask_var(g, self.coef, mask)?,
        })
    }
}

/// Zeroes every coefficient outside `mask`.
pub fn apply_mask<T: Float, S: Maskable>(g: &mut Graph<T>, spec: &S, mask: &Tensor<T>) -> Result<S> {
    spec.apply_mask(g, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(g: &mut Graph<f64>, shape: &[usize], f: impl Fn(usize) -> f64) -> Var {
        let n = shape.iter().product();
        g.constant(Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap())
    }

    #[test]
    fn dwt_constant_image() {
        let mut g = Graph::new();
        let x = input(&mut g, &[1, 1, 4, 4], |_| 1.0);
        let s = dwt2(&mut g, x).unwrap();
        assert!(g.value(s.ll).data().iter().all(|&v| v == 2.0));
        for b in [s.lh, s.hl, s.hh] {
            assert!(g.value(b).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dwt_odd_extent_errors() {
        let mut g = Graph::new();
        let x = input(&mut g, &[1, 1, 3, 4], |_| 1.0);
        assert!(matches!(dwt2(&mut g, x), Err(TensorError::OddExtent { extent: 3, .. })));
    }

    #[test]
    fn fft_impulse_is_flat() {
        let mut g = Graph::new();
        let x = input(&mut g, &[4, 4], |i| if i == 0 { 1.0 } else { 0.0 });
        let s = fft2(&mut g, x).unwrap();
        let (re, im) = (s.re(&mut g).unwrap(), s.im(&mut g).unwrap());
        assert!(g.value(re).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(g.value(im).data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn fft_constant_is_dc_only() {
        let mut g = Graph::new();
        let x = input(&mut g, &[4, 8], |_| 0.5);
        let s = fft2(&mut g, x).unwrap();
        let re = s.re(&mut g).unwrap();
        let d = g.value(re).data();
        assert!((d[0] - 0.5 * 32.0).abs() < 1e-12);
        assert!(d[1..].iter().all(|v| v.abs() < 1e-12));
        let c = fftshift(&mut g, &s).unwrap();
        let re = c.re(&mut g).unwrap();
        assert!((g.value(re).at(&[2, 4]) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        let mut g = Graph::new();
        let x = input(&mut g, &[6, 4], |_| 0.0);
        assert!(matches!(fft2(&mut g, x), Err(TensorError::NotPowerOfTwo { extent: 6, .. })));
    }

    #[test]
    fn dct_constant_compacts_to_dc() {
        let mut g = Graph::new();
        let x = input(&mut g, &[4, 4], |_| 3.0);
        let s = dct2(&mut g, x).unwrap();
        let d = g.value(s.coef).data();
        assert!((d[0] - 12.0).abs() < 1e-12);
        assert!(d[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_band_is_all_ones() {
        for kind in [MaskKind::Ring, MaskKind::Wedge] {
            let m = make_band_masks(kind, 8, 8, 1).unwrap();
            assert!(m.mask::<f64>(0).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn wedge_4x4_corners() {
        let m = make_band_masks(MaskKind::Wedge, 4, 4, 4).unwrap();
        assert_eq!(m.assignment[0], 0);
        assert_eq!(m.assignment[15], 3);
    }

    #[test]
    fn too_many_bands_errors() {
        assert!(make_band_masks(MaskKind::Ring, 2, 2, 6).is_err());
        assert!(make_band_masks(MaskKind::Wedge, 2, 2, 0).is_err());
    }

    #[test]
    fn zero_mask_gives_zero_image() {
        let mut g = Graph::new();
        let x = input(&mut g, &[1, 8, 8], |i| (i as f64).sin());
        let s = fft2(&mut g, x).unwrap();
        let z = apply_mask(&mut g, &s, &Tensor::zeros(vec![8, 8])).unwrap();
        let y = ifft2(&mut g, &z).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
