//! Element-wise, reduction, shape and matrix operations.

use super::{BackwardCtx, Graph, Var};
use crate::error::{invalid, shape_err, Result, TensorError};
use crate::tensor::{numel, strides};
use crate::{Float, Tensor};

/// `(outer, n, inner)` view of `shape` around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Permutes `data` laid out as `shape` so that output axis `i` is input axis
/// `axes[i]`.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        return (data.to_vec(), out_shape);
    }
    // Innermost output axis is iterated in a tight loop.
    let last = rank - 1;
    let inner_n = out_shape[last];
    let inner_s = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut o = base;
        for _ in 0..inner_n {
            out.push(data[o]);
            o += inner_s;
        }
        // increment the outer multi-index
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn reduce_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

impl<T: Float> Graph<T> {
    // ----- element-wise binary -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c: &BackwardCtx<T>| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c: &BackwardCtx<T>| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c: &BackwardCtx<T>| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(
            v,
            &[a, b],
            Box::new(|c: &BackwardCtx<T>| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g / y)),
                    c.needs[1].then(|| {
                        // d(a/b)/db = -out / b
                        let t = c.grad.zip_map(c.output, |g, o| -g * o);
                        t.zip_map(c.inputs[1], |t, y| t / y)
                    }),
                ]
            }),
        ))
    }

    /// Adds a vector `b` of length `x.shape[axis]` along `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis("add_bias", &xs, axis)?;
        let bs = self.shape(b);
        if bs != [xs[axis]] {
            return Err(shape_err("add_bias", format!("bias {bs:?} for axis {axis} of {xs:?}")));
        }
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for (j, &bj) in bv.iter().enumerate() {
                let base = (o * n + j) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bj;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(xs.clone(), out),
            &[x, b],
            Box::new(move |c: &BackwardCtx<T>| {
                let gb = c.needs[1].then(|| {
                    let mut gb = vec![T::zero(); n];
                    let g = c.grad.data();
                    for o in 0..outer {
                        for (j, acc) in gb.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *acc += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_parts(vec![n], gb)
                });
                vec![Some(c.grad.clone()), gb]
            }),
        ))
    }

    /// Expands size-1 axes of `x` to `shape` (same rank). The only general
    /// broadcast; everything else requires matching shapes.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != shape.len()
            || xs.iter().zip(shape).any(|(&a, &b)| a != b && a != 1)
        {
            return Err(shape_err("broadcast_to", format!("{xs:?} -> {shape:?}")));
        }
        let out_shape = shape.to_vec();
        let xst = strides(&xs);
        // source stride per output axis (0 on broadcast axes)
        let src: Vec<usize> = xs
            .iter()
            .zip(&xst)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let n = numel(shape);
        let ost = strides(shape);
        let map_index = move |i: usize| -> usize {
            let mut rem = i;
            let mut o = 0;
            for (ax, &st) in ost.iter().enumerate() {
                let q = rem / st;
                rem %= st;
                o += q * src[ax];
            }
            o
        };
        let xv = self.value(x).data();
        let data: Vec<T> = (0..n).map(|i| xv[map_index(i)]).collect();
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let mut gx = vec![T::zero(); numel(&xs)];
                for (i, &g) in c.grad.data().iter().enumerate() {
                    gx[map_index(i)] += g;
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            }),
        ))
    }

    // ----- scalar ---------------------------------------------------------

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let v = self.value(x).map(|a| a + s);
        self.push(v, &[x], Box::new(|c: &BackwardCtx<T>| vec![Some(c.grad.clone())]))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let v = self.value(x).scale(s);
        self.push(
            v,
            &[x],
            Box::new(move |c: &BackwardCtx<T>| vec![Some(c.grad.scale(s))]),
        )
    }

    // ----- unary ----------------------------------------------------------

    /// Generic unary op; `df(x, y)` is the local derivative given input and
    /// output.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let v = self.value(x).map(f);
        self.push(
            v,
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let xs = c.inputs[0].data();
                let ys = c.output.data();
                let data = (0..g.len()).map(|i| g[i] * df(xs[i], ys[i])).collect();
                vec![Some(Tensor::from_parts(c.grad.shape().to_vec(), data))]
            }),
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.ln(), |a, _| T::one() / a)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.sqrt(), |_, y| T::from_f64(0.5) / y)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.abs(), |a, _| a.signum())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * a, |a, _| a + a)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |a| a * sigmoid(a),
            |a, _| {
                let s = sigmoid(a);
                s * (T::one() + a * (T::one() - s))
            },
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |a, _| sigmoid(a))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |a| a.max(T::zero()),
            |a, _| if a > T::zero() { T::one() } else { T::zero() },
        )
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| vec![Some(Tensor::full(shape.clone(), c.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis("sum_axis", &xs, axis)?;
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(reduce_shape(&xs, axis), out),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            }),
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", self.shape(x), axis)?;
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    /// Max over `axis`, keeping it with extent 1. Ties route the gradient to
    /// the first maximum.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis("max_axis", &xs, axis)?;
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * n * inner + i];
                let mut bj = 0;
                for j in 1..n {
                    let v = d[(o * n + j) * inner + i];
                    if v > best {
                        best = v;
                        bj = j;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = bj;
            }
        }
        Ok(self.push(
            Tensor::from_parts(reduce_shape(&xs, axis), out),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        gx[(o * n + arg[o * inner + i]) * inner + i] = g[o * inner + i];
                    }
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            }),
        ))
    }

    // ----- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let v = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(
            v,
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                vec![Some(Tensor::from_parts(xs.clone(), c.grad.data().to_vec()))]
            }),
        ))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("axes {axes:?} for rank {}", xs.len())));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &xs, axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let (g, s) = permute_data(c.grad.data(), c.grad.shape(), &inv);
                vec![Some(Tensor::from_parts(s, g))]
            }),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        check_axis("concat", &s0, axis)?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", format!("{s:?} vs {s0:?} along axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_at_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &n) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            xs,
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(sizes.len());
                for (k, &n) in sizes.iter().enumerate() {
                    if !c.needs[k] {
                        res.push(None);
                        offset += n;
                        continue;
                    }
                    let mut gk = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gk.extend_from_slice(&g[start..start + n * inner]);
                    }
                    res.push(Some(Tensor::from_parts(c.inputs[k].shape().to_vec(), gk)));
                    offset += n;
                }
                res
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis("narrow", &xs, axis)?;
        if len == 0 || start + len > xs[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) of extent {}", start + len, xs[axis])));
        }
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            }),
        ))
    }

    /// Splits along `axis` into chunks of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        check_axis("split", self.shape(x), axis)?;
        if sizes.iter().sum::<usize>() != self.shape(x)[axis] {
            return Err(shape_err("split", format!("sizes {sizes:?} vs extent {}", self.shape(x)[axis])));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.narrow(x, axis, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Reverses `x` along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis("flip", &xs, axis)?;
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let f = move |d: &[T]| {
            let mut out = Vec::with_capacity(d.len());
            for o in 0..outer {
                for j in (0..n).rev() {
                    let s = (o * n + j) * inner;
                    out.extend_from_slice(&d[s..s + inner]);
                }
            }
            out
        };
        let v = f(self.value(x).data());
        Ok(self.push(
            Tensor::from_parts(xs.clone(), v),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| vec![Some(Tensor::from_parts(xs.clone(), f(c.grad.data())))]),
        ))
    }

    /// Cyclic shift along `axis`: `out[i] = x[(i - shift) mod n]`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis("roll", &xs, axis)?;
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let roll = move |d: &[T], shift: isize| {
            let s = shift.rem_euclid(n as isize) as usize;
            let mut out = vec![T::zero(); d.len()];
            for o in 0..outer {
                for j in 0..n {
                    let dst = (o * n + (j + s) % n) * inner;
                    let src = (o * n + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
                }
            }
            out
        };
        let v = roll(self.value(x).data(), shift);
        Ok(self.push(
            Tensor::from_parts(xs.clone(), v),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                vec![Some(Tensor::from_parts(xs.clone(), roll(c.grad.data(), -shift)))]
            }),
        ))
    }

    /// Zero-pads `before`/`after` entries along `axis`.
    pub fn pad_axis(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_axis("pad_axis", &xs, axis)?;
        if before == 0 && after == 0 {
            return Ok(x);
        }
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let m = n + before + after;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            out[dst..dst + n * inner].copy_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = m;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let s = (o * m + before) * inner;
                    gx.extend_from_slice(&g[s..s + n * inner]);
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            }),
        ))
    }

    // ----- matrix ---------------------------------------------------------

    /// `[.., M, K] x [.., K, N] -> [.., M, N]`; leading (batch) axes must match.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let asz = self.shape(a).to_vec();
        let bsz = self.shape(b).to_vec();
        let ra = asz.len();
        if ra < 2 || ra != bsz.len() || asz[..ra - 2] != bsz[..ra - 2] || asz[ra - 1] != bsz[ra - 2] {
            return Err(shape_err("matmul", format!("{asz:?} x {bsz:?}")));
        }
        let (m, k, n) = (asz[ra - 2], asz[ra - 1], bsz[ra - 1]);
        let batch: usize = asz[..ra - 2].iter().product();
        let mut out_shape = asz[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    m, k, n, T::one(),
                    &av[i * m * k..], k as isize, 1,
                    &bv[i * k * n..], n as isize, 1,
                    T::zero(), &mut out[i * m * n..], n as isize, 1,
                );
            }
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            &[a, b],
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let av = c.inputs[0].data();
                let bv = c.inputs[1].data();
                let ga = c.needs[0].then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // g [m,n] x b^T [n,k]
                        T::gemm(
                            m, n, k, T::one(),
                            &g[i * m * n..], n as isize, 1,
                            &bv[i * k * n..], 1, n as isize,
                            T::zero(), &mut ga[i * m * k..], k as isize, 1,
                        );
                    }
                    Tensor::from_parts(c.inputs[0].shape().to_vec(), ga)
                });
                let gb = c.needs[1].then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        // a^T [k,m] x g [m,n]
                        T::gemm(
                            k, m, n, T::one(),
                            &av[i * m * k..], 1, k as isize,
                            &g[i * m * n..], n as isize, 1,
                            T::zero(), &mut gb[i * k * n..], n as isize, 1,
                        );
                    }
                    Tensor::from_parts(c.inputs[1].shape().to_vec(), gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map over the last axis: `x [.., D] · w [D, E] + bias [E]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d = *xs.last().ok_or_else(|| shape_err("linear", "rank-0 input"))?;
        if ws.len() != 2 || ws[0] != d {
            return Err(shape_err("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let e = ws[1];
        if let Some(b) = bias {
            if self.shape(b) != [e] {
                return Err(shape_err("linear", format!("bias {:?} for out dim {e}", self.shape(b))));
            }
        }
        let m = numel(&xs) / d;
        let mut out = vec![T::zero(); m * e];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(e) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            m, d, e, T::one(),
            self.value(x).data(), d as isize, 1,
            self.value(w).data(), e as isize, 1,
            T::one(), &mut out, e as isize, 1,
        );
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = e;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            &parents,
            Box::new(move |c: &BackwardCtx<T>| {
                let g = c.grad.data();
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![T::zero(); m * d];
                    T::gemm(
                        m, e, d, T::one(),
                        g, e as isize, 1,
                        c.inputs[1].data(), 1, e as isize,
                        T::zero(), &mut gx, d as isize, 1,
                    );
                    Tensor::from_parts(c.inputs[0].shape().to_vec(), gx)
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![T::zero(); d * e];
                    T::gemm(
                        d, m, e, T::one(),
                        c.inputs[0].data(), 1, d as isize,
                        g, e as isize, 1,
                        T::zero(), &mut gw, e as isize, 1,
                    );
                    Tensor::from_parts(vec![d, e], gw)
                });
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut gb = vec![T::zero(); e];
                        for row in g.chunks_exact(e) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::from_parts(vec![e], gb)
                    }));
                }
                res
            }),
        ))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Float>(a: T) -> T {
    // log(1 + e^a) = max(a, 0) + log1p(e^-|a|)
    a.max(T::zero()) + (-a.abs()).exp().ln_1p()
}
