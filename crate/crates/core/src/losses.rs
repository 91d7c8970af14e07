//! Segmentation and reconstruction losses, the reconstruction-weight
//! schedule and the DSC / MIoU metrics.

use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::{Float, Tensor};

pub const DICE_EPS: f64 = 1e-5;

/// `λ_dice · (1 − mean-class soft Dice) + λ_ce · mean cross-entropy`.
///
/// `logits: [B,K,H,W]`, `labels: [B·H·W]` class indices. Dice statistics are
/// pooled over the whole batch.
pub fn seg_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    lambda_dice: f64,
    lambda_ce: f64,
) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 4 {
        return Err(shape_err("seg_loss", format!("logits must be [B,K,H,W], got {s:?}")));
    }
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    if labels.len() != b * hw {
        return Err(shape_err("seg_loss", format!("{} labels for logits {s:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid("seg_loss", format!("label {bad} outside [0, {k})")));
    }
    let mut onehot = vec![T::zero(); b * k * hw];
    for bi in 0..b {
        for px in 0..hw {
            onehot[(bi * k + labels[bi * hw + px]) * hw + px] = T::one();
        }
    }
    let y = g.constant(Tensor::new(s.clone(), onehot)?);

    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, y)?;
    let ce = g.sum(picked);
    let ce = g.mul_scalar(ce, -1.0 / (b * hw) as f64);

    let prob = g.softmax(logits, 1)?;
    let per_class = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let t = g.permute(v, &[1, 0, 2, 3])?;
        let t = g.reshape(t, &[k, b * hw])?;
        g.sum_axis(t, 1)
    };
    let py = g.mul(prob, y)?;
    let inter = per_class(g, py)?;
    let psum = per_class(g, prob)?;
    let ysum = per_class(g, y)?;
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let den = g.add(psum, ysum)?;
    let den = g.add_scalar(den, DICE_EPS);
    let dice = g.div(num, den)?;
    let mean_dice = g.mean(dice);
    let dice_loss = g.neg(mean_dice);
    let dice_loss = g.add_scalar(dice_loss, 1.0);

    let a = g.mul_scalar(dice_loss, lambda_dice);
    let c = g.mul_scalar(ce, lambda_ce);
    g.add(a, c)
}

/// Mean over `(b, h, w)` of `1 − cos(p[b,:,h,w], t[b,:,h,w])`. A zero-norm
/// vector on either side counts as similarity 1 and passes no gradient.
pub fn channel_cosine_loss<T: Float>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() != 4 || g.shape(target) != s.as_slice() {
        return Err(shape_err("channel_cosine", format!("{s:?} vs {:?}", g.shape(target))));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = b * hw;
    // per position: (|p|, |t|, cos), zero norms flagged by cos = None
    let stats = move |p: &[T], t: &[T]| -> Vec<Option<(T, T, T)>> {
        let mut out = Vec::with_capacity(m);
        for bi in 0..b {
            for px in 0..hw {
                let (mut pp, mut tt) = (T::zero(), T::zero());
                for ch in 0..c {
                    let i = (bi * c + ch) * hw + px;
                    pp += p[i] * p[i];
                    tt += t[i] * t[i];
                }
                out.push(if pp > T::zero() && tt > T::zero() {
                    let (np, nt) = (pp.sqrt(), tt.sqrt());
                    // 1 - cos as half the squared distance of the unit vectors:
                    // exactly 0 for identical inputs
                    let mut gap = T::zero();
                    for ch in 0..c {
                        let i = (bi * c + ch) * hw + px;
                        let d = p[i] / np - t[i] / nt;
                        gap += d * d;
                    }
                    let half = T::from_f64(0.5);
                    Some((np, nt, T::one() - half * gap))
                } else {
                    None
                });
            }
        }
        out
    };
    let st = stats(g.value(pred).data(), g.value(target).data());
    let total: T = st.iter().map(|s| s.map_or(T::zero(), |(_, _, cos)| T::one() - cos)).sum();
    let value = Tensor::scalar(total / T::from_usize(m));
    Ok(g.push(
        value,
        &[pred, target],
        Box::new(move |cx: &BackwardCtx<T>| {
            let (p, t) = (cx.inputs[0].data(), cx.inputs[1].data());
            let st = stats(p, t);
            let scale = cx.grad.item() / T::from_usize(m);
            let mut gp = vec![T::zero(); p.len()];
            let mut gt = vec![T::zero(); t.len()];
            for bi in 0..b {
                for px in 0..hw {
                    let Some((np, nt, cos)) = st[bi * hw + px] else { continue };
                    for ch in 0..c {
                        let i = (bi * c + ch) * hw + px;
                        // d(1 - cos)/dp = -(t/(|p||t|) - cos p/|p|²)
                        gp[i] = -scale * (t[i] / (np * nt) - cos * p[i] / (np * np));
                        gt[i] = -scale * (p[i] / (np * nt) - cos * t[i] / (nt * nt));
                    }
                }
            }
            vec![
                cx.needs[0].then(|| Tensor::new(cx.inputs[0].shape().to_vec(), gp).expect("shape")),
                cx.needs[1].then(|| Tensor::new(cx.inputs[1].shape().to_vec(), gt).expect("shape")),
            ]
        }),
    ))
}

/// Mean absolute difference of forward differences along `axis`.
fn gradient_l1<T: Float>(g: &mut Graph<T>, p: Var, t: Var, axis: usize) -> Result<Option<Var>> {
    let n = g.shape(p)[axis];
    if n < 2 {
        return Ok(None);
    }
    let mut diff = |v: Var| -> Result<Var> {
        let hi = g.narrow(v, axis, 1, n - 1)?;
        let lo = g.narrow(v, axis, 0, n - 1)?;
        g.sub(hi, lo)
    };
    let dp = diff(p)?;
    let dt = diff(t)?;
    let d = g.sub(dp, dt)?;
    let a = g.abs(d);
    Ok(Some(g.mean(a)))
}

/// `λ1 · mean|p − t| + λcos · channel-cosine + λgrad · (x and y forward-difference L1)`
/// on `[B,C,H,W]` feature maps.
pub fn recon_loss<T: Float>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    lambda_l1: f64,
    lambda_cos: f64,
    lambda_grad: f64,
) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    let l1 = g.mean(a);
    let mut total = g.mul_scalar(l1, lambda_l1);
    let cos = channel_cosine_loss(g, pred, target)?;
    let cos = g.mul_scalar(cos, lambda_cos);
    total = g.add(total, cos)?;
    for axis in [3, 2] {
        if let Some(gl) = gradient_l1(g, pred, target, axis)? {
            let gl = g.mul_scalar(gl, lambda_grad);
            total = g.add(total, gl)?;
        }
    }
    Ok(total)
}

/// Per-epoch reconstruction weight: zero during warmup, a linear ramp to
/// `w_max`, then a linear decay to `w_min` at the final epoch, smoothed by an
/// exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSchedule {
    pub warmup: usize,
    pub ramp: usize,
    pub w_max: f64,
    pub w_min: f64,
    pub ema_beta: f64,
    pub total_epochs: usize,
    pub ema_state: f64,
    /// Epochs consumed so far.
    pub epoch: usize,
}

impl LossSchedule {
    pub fn new(warmup: usize, ramp: usize, w_max: f64, w_min: f64, ema_beta: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_beta) {
            return Err(invalid("LossSchedule", format!("ema_beta {ema_beta} outside [0, 1)")));
        }
        if w_min < 0.0 || w_max < w_min {
            return Err(invalid("LossSchedule", format!("need 0 <= w_min <= w_max, got {w_min}, {w_max}")));
        }
        Ok(Self {
            warmup,
            ramp,
            w_max,
            w_min,
            ema_beta,
            total_epochs,
            ema_state: 0.0,
            epoch: 0,
        })
    }

    /// The unsmoothed weight at `epoch`.
    pub fn raw(&self, epoch: usize) -> f64 {
        let e = epoch as f64;
        let (w0, r) = (self.warmup as f64, self.ramp as f64);
        if epoch < self.warmup {
            return 0.0;
        }
        if epoch < self.warmup + self.ramp {
            return self.w_max * (e - w0) / r;
        }
        let peak = self.warmup + self.ramp;
        let last = self.total_epochs.saturating_sub(1);
        if last <= peak {
            return self.w_max;
        }
        let frac = ((e - peak as f64) / (last - peak) as f64).min(1.0);
        self.w_max + (self.w_min - self.w_max) * frac
    }

    /// Advances the EMA with `raw(epoch)` and returns the smoothed weight.
    pub fn joint_weight(&mut self, epoch: usize) -> f64 {
        self.ema_state = self.ema_beta * self.ema_state + (1.0 - self.ema_beta) * self.raw(epoch);
        self.epoch = epoch + 1;
        self.ema_state
    }
}

/// Confusion counts accumulated over any number of label maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        let k = self.tp.len();
        if pred.len() != gt.len() {
            return Err(shape_err("metrics", format!("{} predictions vs {} labels", pred.len(), gt.len())));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if p >= k || t >= k {
                return Err(invalid("metrics", format!("class {} outside [0, {k})", p.max(t))));
            }
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let k = self.tp.len();
        let mut dice = vec![None; k];
        let mut iou = vec![None; k];
        for c in 0..k {
            let (tp, fp, fn_) = (self.tp[c] as f64, self.fp[c] as f64, self.fn_[c] as f64);
            if tp + fp + fn_ > 0.0 {
                dice[c] = Some(2.0 * tp / (2.0 * tp + fp + fn_));
                iou[c] = Some(tp / (tp + fp + fn_));
            }
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        MetricReport {
            dsc: mean(&dice),
            miou: mean(&iou),
            dice,
            iou,
            pixels: self.tp.iter().sum::<u64>() + self.fp.iter().sum::<u64>(),
            confusion: self.clone(),
        }
    }
}

/// Per-class and mean Dice / IoU. Classes absent from both prediction and
/// ground truth are `None` and left out of the means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub dice: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub dsc: f64,
    pub miou: f64,
    pub pixels: u64,
    pub confusion: Confusion,
}

pub fn metrics(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<MetricReport> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, gt)?;
    Ok(c.report())
}

/// Per-pixel argmax over the class axis of `[B,K,H,W]` logits.
pub fn argmax_classes<T: Float>(logits: &Tensor<T>) -> Vec<usize> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for px in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * hw + px] > d[(bi * k + best) * hw + px] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_ce_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 2, 2]));
        let labels = [0, 1, 0, 1];
        let l = seg_loss(&mut g, x, &labels, 0.0, 1.0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 1, 2]));
        assert!(seg_loss(&mut g, x, &[0, 2], 1.0, 1.0).is_err());
    }

    #[test]
    fn hand_counted_confusion() {
        // class 1: TP 4, FP 2, FN 2 -> 8/12 and 4/8
        let gt = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let pr = [1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        let r = metrics(&pr, &gt, 2).unwrap();
        assert_eq!((r.confusion.tp[1], r.confusion.fp[1], r.confusion.fn_[1]), (4, 2, 2));
        assert_eq!(r.dice[1], Some(2.0 / 3.0));
        assert_eq!(r.iou[1], Some(0.5));
        // class 1: TP 2, FP 2, FN 2 -> 1/2 and 1/3
        let gt = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let pr = [1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let r = metrics(&pr, &gt, 2).unwrap();
        assert_eq!(r.dice[1], Some(0.5));
        assert_eq!(r.iou[1], Some(1.0 / 3.0));
    }

    #[test]
    fn absent_class_is_excluded() {
        let r = metrics(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(r.dice[2], None);
        assert_eq!(r.dsc, 1.0);
    }

    #[test]
    fn warmup_weight_is_zero() {
        let mut s = LossSchedule::new(10, 10, 1.0, 0.1, 0.9, 100).unwrap();
        for e in 0..10 {
            assert_eq!(s.joint_weight(e), 0.0);
        }
        assert!(s.joint_weight(11) > 0.0);
    }
}
