//! Slow, obviously-correct reference computations used to check the fast
//! paths: nested-loop convolution and matrix products, direct DFT / DCT
//! summations, a scalar selective-scan loop, and a central finite-difference
//! gradient checker.
//!
//! Nothing here shares code with the implementations it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::Tensor;

/// 6-loop cross-correlation.
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let og = o / groups;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(vec![b, o, ho, wo]);
    for bi in 0..b {
        for oc in 0..o {
            let grp = oc / og;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv.data()[oc]);
                    for ci in 0..cg {
                        let ic = grp * cg + ci;
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (i * stride + ki) as isize - pad as isize;
                                let iw = (j * stride + kj) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    acc += x.at(&[bi, ic, ih as usize, iw as usize])
                                        * w.at(&[oc, ci, ki, kj]);
                                }
                            }
                        }
                    }
                    out.set(&[bi, oc, i, j], acc);
                }
            }
        }
    }
    let _ = c;
    out
}

/// Dot-product matrix multiply of `[m,k] x [k,n]`.
pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let s: f64 = (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
            out.set(&[i, j], s);
        }
    }
    out
}

/// Direct evaluation of `F(u,v) = sum_x sum_y f(x,y) e^{-j2pi(ux/M + vy/N)}`
/// for one `M x N` plane. Returns `(re, im)`.
pub fn dft2(plane: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; m * n];
    let mut im = vec![0.0; m * n];
    for u in 0..m {
        for v in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for x in 0..m {
                for y in 0..n {
                    let ang = -2.0
                        * std::f64::consts::PI
                        * ((u * x) as f64 / m as f64 + (v * y) as f64 / n as f64);
                    sr += plane[x * n + y] * ang.cos();
                    si += plane[x * n + y] * ang.sin();
                }
            }
            re[u * n + v] = sr;
            im[u * n + v] = si;
        }
    }
    (re, im)
}

/// Orthonormal 2D DCT-II by direct double sum.
pub fn dct2(plane: &[f64], m: usize, n: usize) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    let alpha = |k: usize, len: usize| {
        if k == 0 {
            (1.0 / len as f64).sqrt()
        } else {
            (2.0 / len as f64).sqrt()
        }
    };
    let mut out = vec![0.0; m * n];
    for u in 0..m {
        for v in 0..n {
            let mut s = 0.0;
            for x in 0..m {
                for y in 0..n {
                    s += plane[x * n + y]
                        * (pi * (2 * x + 1) as f64 * u as f64 / (2 * m) as f64).cos()
                        * (pi * (2 * y + 1) as f64 * v as f64 / (2 * n) as f64).cos();
                }
            }
            out[u * n + v] = alpha(u, m) * alpha(v, n) * s;
        }
    }
    out
}

/// One orthonormal Haar analysis step by explicit 2x2 block formulas.
/// Returns `(ll, lh, hl, hh)` planes of size `m/2 x n/2`; the first letter is
/// the filter applied along a row (horizontal), the second along a column.
pub fn haar2(plane: &[f64], m: usize, n: usize) -> [Vec<f64>; 4] {
    let (hm, hn) = (m / 2, n / 2);
    let mut bands = [vec![0.0; hm * hn], vec![0.0; hm * hn], vec![0.0; hm * hn], vec![0.0; hm * hn]];
    for i in 0..hm {
        for j in 0..hn {
            let a = plane[2 * i * n + 2 * j];
            let b = plane[2 * i * n + 2 * j + 1];
            let c = plane[(2 * i + 1) * n + 2 * j];
            let d = plane[(2 * i + 1) * n + 2 * j + 1];
            bands[0][i * hn + j] = (a + b + c + d) / 2.0;
            bands[1][i * hn + j] = (a + b - c - d) / 2.0;
            bands[2][i * hn + j] = (a - b + c - d) / 2.0;
            bands[3][i * hn + j] = (a - b - c + d) / 2.0;
        }
    }
    bands
}

/// Scalar per-step selective-scan recurrence for one sequence.
///
/// `u, delta: [L, E]`, `a: [E, N]` (already negative), `b, c: [L, N]`,
/// `d: [E]`. Returns `y: [L, E]`.
pub fn selective_scan(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    l: usize,
    e: usize,
    n: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; l * e];
    for ch in 0..e {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let dt = delta[t * e + ch];
            let ut = u[t * e + ch];
            let mut acc = 0.0;
            for s in 0..n {
                h[s] = (dt * a[ch * n + s]).exp() * h[s] + dt * b[t * n + s] * ut;
                acc += c[t * n + s] * h[s];
            }
            y[t * e + ch] = acc + d[ch] * ut;
        }
    }
    y
}

/// Report of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor of the relative error; below it the error is effectively
/// absolute.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// Compares analytic gradients of the scalar `f(inputs)` with central
/// differences of step `h`. Every input is treated as trainable.
///
/// `max_elems` caps how many elements per input are probed (a deterministic
/// stride through the tensor), keeping large checks affordable.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, max_elems: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (ii, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape().to_vec());
        let analytic = grads.get(vars[ii]).unwrap_or(&zero);
        let n = input.numel();
        let step = n.div_ceil(max_elems.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[j] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ii, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces `y` to a scalar with fixed pseudo-random weights, so a gradient
/// check exercises every output element with a distinct cotangent.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(g.shape(y).to_vec(), -1.0, 1.0, &mut rng);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

/// Deterministic random tensor for tests.
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}
