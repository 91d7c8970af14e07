//! Convolution, pooling, resampling and normalization layers on the tape.

use super::ops::split_at_axis;
use super::{BackwardCtx, Graph, Var};
use crate::error::{invalid, shape_err, Result, TensorError};
use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups: channels,
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c / self.groups
    }
    fn og(&self) -> usize {
        self.o / self.groups
    }
}

/// Fills `cols` ([cg*k*k, ho*wo]) from channels `c0..c0+cg` of one sample.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, c0: usize, cols: &mut [T]) {
    let (k, hw) = (g.k, g.ho * g.wo);
    for c in 0..g.cg() {
        let plane = &x[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * hw..((c * k + ki) * k + kj + 1) * hw];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` into channels `c0..` of `gx`.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, c0: usize, gx: &mut [T]) {
    let (k, hw) = (g.k, g.ho * g.wo);
    for c in 0..g.cg() {
        let plane = &mut gx[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * hw..((c * k + ki) * k + kj + 1) * hw];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += row[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Float>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (cg, og, kk, hw) = (g.cg(), g.og(), g.k * g.k, g.ho * g.wo);
    let mut out = vec![T::zero(); g.b * g.o * hw];
    let mut cols = vec![T::zero(); cg * kk * hw];
    for b in 0..g.b {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        for gi in 0..g.groups {
            im2col(xb, g, gi * cg, &mut cols);
            let o0 = (b * g.o + gi * og) * hw;
            T::gemm(
                og, cg * kk, hw, T::one(),
                &w[gi * og * cg * kk..], (cg * kk) as isize, 1,
                &cols, hw as isize, 1,
                T::zero(), &mut out[o0..], hw as isize, 1,
            );
        }
    }
    out
}

impl<T: Float> Graph<T> {
    /// 2D cross-correlation. `x [B,C,H,W]`, `w [O, C/groups, k, k]`,
    /// `bias [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?} must be rank 4")));
        }
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, cgw, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        let Conv2dSpec { stride, padding, groups } = spec;
        if k != k2 {
            return Err(shape_err("conv2d", format!("kernel must be square, got {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 || groups == 0 || c % groups != 0 || o % groups != 0 || cgw != c / groups {
            return Err(shape_err(
                "conv2d",
                format!("input channels {c}, weight {ws:?}, groups {groups}, stride {stride}"),
            ));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(shape_err("conv2d", format!("input {h}x{wd} smaller than kernel {k} with padding {padding}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(shape_err("conv2d", format!("bias {:?} for {o} outputs", self.shape(bv))));
            }
        }
        let geom = ConvGeom {
            b,
            c,
            h,
            w: wd,
            o,
            k,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (wd + 2 * padding - k) / stride + 1,
            stride,
            pad: padding,
            groups,
        };
        let mut out = if groups == c && o == c {
            depthwise_forward(self.value(x).data(), self.value(w).data(), &geom)
        } else {
            conv_forward(self.value(x).data(), self.value(w).data(), &geom)
        };
        let hw = geom.ho * geom.wo;
        if let Some(bv) = bias {
            let bv = self.value(bv).data();
            for (i, plane) in out.chunks_exact_mut(hw).enumerate() {
                let bj = bv[i % o];
                for v in plane {
                    *v += bj;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            Tensor::from_parts(vec![b, o, geom.ho, geom.wo], out),
            &parents,
            Box::new(move |ctx: &BackwardCtx<T>| {
                let g = &geom;
                let gout = ctx.grad.data();
                let (gx, gw) = if g.groups == g.c && g.o == g.c {
                    depthwise_backward(ctx.inputs[0].data(), ctx.inputs[1].data(), gout, g, ctx.needs[0], ctx.needs[1])
                } else {
                    conv_backward(ctx.inputs[0].data(), ctx.inputs[1].data(), gout, g, ctx.needs[0], ctx.needs[1])
                };
                let mut res = vec![
                    gx.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                    gw.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
                ];
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut gb = vec![T::zero(); g.o];
                        for (i, plane) in gout.chunks_exact(hw).enumerate() {
                            gb[i % g.o] += plane.iter().copied().sum::<T>();
                        }
                        Tensor::from_parts(vec![g.o], gb)
                    }));
                }
                res
            }),
        ))
    }

    /// Non-overlapping `k x k` average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (lead, h, w) = pool_dims("avg_pool2d", self.shape(x), k)?;
        let xs = self.shape(x).to_vec();
        let (ho, wo) = (h / k, w / k);
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); lead * ho * wo];
        for p in 0..lead {
            for i in 0..h {
                for j in 0..w {
                    out[(p * ho + i / k) * wo + j / k] += d[(p * h + i) * w + j];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let mut gx = vec![T::zero(); lead * h * w];
                for p in 0..lead {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(p * h + i) * w + j] = g[(p * ho + i / k) * wo + j / k] * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            }),
        ))
    }

    /// Non-overlapping `k x k` max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (lead, h, w) = pool_dims("max_pool2d", self.shape(x), k)?;
        let xs = self.shape(x).to_vec();
        let (ho, wo) = (h / k, w / k);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); lead * ho * wo];
        let mut arg = vec![0usize; lead * ho * wo];
        for p in 0..lead {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best_i = (p * h + oi * k) * w + oj * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = (p * h + oi * k + di) * w + oj * k + dj;
                            if d[idx] > d[best_i] {
                                best_i = idx;
                            }
                        }
                    }
                    out[(p * ho + oi) * wo + oj] = d[best_i];
                    arg[(p * ho + oi) * wo + oj] = best_i;
                }
            }
        }
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let mut gx = vec![T::zero(); lead * h * w];
                for (&a, &g) in arg.iter().zip(c.grad.data()) {
                    gx[a] += g;
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of the last two axes by `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || factor == 0 {
            return Err(shape_err("upsample_nearest", format!("{xs:?} by {factor}")));
        }
        if factor == 1 {
            return Ok(x);
        }
        let r = xs.len();
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let lead: usize = xs[..r - 2].iter().product();
        let (ho, wo) = (h * factor, w * factor);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(lead * ho * wo);
        for p in 0..lead {
            for i in 0..ho {
                let row = &d[(p * h + i / factor) * w..(p * h + i / factor + 1) * w];
                for j in 0..wo {
                    out.push(row[j / factor]);
                }
            }
        }
        let mut shape = xs.clone();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let mut gx = vec![T::zero(); lead * h * w];
                for p in 0..lead {
                    for i in 0..ho {
                        for j in 0..wo {
                            gx[(p * h + i / factor) * w + j / factor] += g[(p * ho + i) * wo + j];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            }),
        ))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// `gamma` and `beta` (both `[D]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for last extent {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_usize(d);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(xs.clone(), out),
            &[x, gamma, beta],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let gv = c.inputs[1].data();
                let mut gx = c.needs[0].then(|| vec![T::zero(); g.len()]);
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                        let gxh = gr[j] * gv[j];
                        s1 += gxh;
                        s2 += gxh * xr[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let scale = rstd[r] / dn;
                        for j in 0..d {
                            let gxh = gr[j] * gv[j];
                            gx[r * d + j] = scale * (dn * gxh - s1 - xr[j] * s2);
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_parts(xs.clone(), v)),
                    Some(Tensor::from_parts(vec![d], gg)),
                    Some(Tensor::from_parts(vec![d], gb)),
                ]
            }),
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (y, dims) = self.softmax_value(x, axis, false)?;
        Ok(self.push(
            y,
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let (outer, n, inner) = dims;
                let g = c.grad.data();
                let y = c.output.data();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(c.grad.shape().to_vec(), gx))]
            }),
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (y, dims) = self.softmax_value(x, axis, true)?;
        Ok(self.push(
            y,
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let (outer, n, inner) = dims;
                let g = c.grad.data();
                let y = c.output.data();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let gs: T = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gs;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(c.grad.shape().to_vec(), gx))]
            }),
        ))
    }

    fn softmax_value(&self, x: Var, axis: usize, log: bool) -> Result<(Tensor<T>, (usize, usize, usize))> {
        let xs = self.shape(x);
        if axis >= xs.len() {
            return Err(TensorError::Axis {
                op: if log { "log_softmax" } else { "softmax" },
                axis,
                rank: xs.len(),
            });
        }
        let dims = split_at_axis(xs, axis);
        let (outer, n, inner) = dims;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| d[idx(j)]).fold(d[idx(0)], |a, b| a.max(b));
                let z: T = (0..n).map(|j| (d[idx(j)] - m).exp()).sum();
                let lz = z.ln();
                for j in 0..n {
                    out[idx(j)] = if log {
                        d[idx(j)] - m - lz
                    } else {
                        (d[idx(j)] - m).exp() / z
                    };
                }
            }
        }
        Ok((Tensor::from_parts(xs.to_vec(), out), dims))
    }
}

fn pool_dims(op: &'static str, shape: &[usize], k: usize) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 || k == 0 || shape[r - 2] % k != 0 || shape[r - 1] % k != 0 {
        return Err(shape_err(op, format!("{shape:?} not divisible by window {k}")));
    }
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

fn conv_backward<T: Float>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (cg, og, kk, hw) = (g.cg(), g.og(), g.k * g.k, g.ho * g.wo);
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); cg * kk * hw];
    for b in 0..g.b {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        for gi in 0..g.groups {
            let go = &gout[(b * g.o + gi * og) * hw..];
            if let Some(gw) = gw.as_mut() {
                im2col(xb, g, gi * cg, &mut cols);
                // gW [og, cg*kk] += gout [og, hw] x cols^T [hw, cg*kk]
                T::gemm(
                    og, hw, cg * kk, T::one(),
                    go, hw as isize, 1,
                    &cols, 1, hw as isize,
                    T::one(), &mut gw[gi * og * cg * kk..], (cg * kk) as isize, 1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                // gcols [cg*kk, hw] = W^T [cg*kk, og] x gout [og, hw]
                T::gemm(
                    cg * kk, og, hw, T::one(),
                    &w[gi * og * cg * kk..], 1, (cg * kk) as isize,
                    go, hw as isize, 1,
                    T::zero(), &mut cols, hw as isize, 1,
                );
                col2im(&cols, g, gi * cg, &mut gx[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w]);
            }
        }
    }
    (gx, gw)
}

fn depthwise_forward<T: Float>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, hw) = (g.k, g.ho * g.wo);
    let mut out = vec![T::zero(); g.b * g.c * hw];
    for b in 0..g.b {
        for c in 0..g.c {
            let plane = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
            let ker = &w[c * k * k..(c + 1) * k * k];
            let o = &mut out[(b * g.c + c) * hw..(b * g.c + c + 1) * hw];
            for oh in 0..g.ho {
                for ki in 0..k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for kj in 0..k {
                        let wv = ker[ki * k + kj];
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                o[oh * g.wo + ow] += wv * row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Float>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, hw) = (g.k, g.ho * g.wo);
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for b in 0..g.b {
        for c in 0..g.c {
            let pbase = (b * g.c + c) * g.h * g.w;
            let plane = &x[pbase..pbase + g.h * g.w];
            let go = &gout[(b * g.c + c) * hw..(b * g.c + c + 1) * hw];
            for oh in 0..g.ho {
                for ki in 0..k {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for kj in 0..k {
                        let wv = w[c * k * k + ki * k + kj];
                        let mut acc = T::zero();
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                let gv = go[oh * g.wo + ow];
                                acc += gv * plane[ih * g.w + iw as usize];
                                if let Some(gx) = gx.as_mut() {
                                    gx[pbase + ih * g.w + iw as usize] += gv * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[c * k * k + ki * k + kj] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn box_sum_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, Conv2dSpec::same(3)).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.at(&[0, 0, 1, 1]), 9.0);
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(yv.at(&[0, 0, i, j]), 4.0);
        }
        assert_eq!(yv.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 4 * 5).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[1, 2, 4, 5], &data));
        let mut k = vec![0.0; 2 * 9];
        k[4] = 1.0;
        k[9 + 4] = 1.0;
        let w = g.constant(t(&[2, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, Conv2dSpec::depthwise(3, 2)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w_bad_c = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(g.conv2d(x, w_bad_c, None, Conv2dSpec::same(3)).is_err());
        let w_even = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        assert!(g.conv2d(x, w_even, None, Conv2dSpec::default()).is_err());
        let w_big = g.constant(Tensor::zeros(vec![1, 2, 5, 5]));
        assert!(g.conv2d(x, w_big, None, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn strided_output_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 7, 7]));
        let w = g.constant(Tensor::ones(vec![2, 1, 3, 3]));
        let spec = Conv2dSpec { stride: 2, padding: 1, groups: 1 };
        let y = g.conv2d(x, w, None, spec).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 4]);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[3.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        assert!(matches!(g.softmax(x, 1), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1., 2., 3., 10., -5., 0., 2., 7.]));
        let gm = g.constant(Tensor::ones(vec![4]));
        let bt = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gm, bt, 1e-12).unwrap();
        for row in g.value(y).data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_upsample_blocks() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }
}
