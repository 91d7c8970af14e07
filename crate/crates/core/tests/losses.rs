use farmamba_core::autodiff::Graph;
use farmamba_core::losses::{metrics, recon_loss, seg_loss, Confusion, LossSchedule, DICE_EPS};
use farmamba_core::oracle::rand_tensor;
use farmamba_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seg_oracle(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (b, k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]);
    let mut ce = 0.0;
    let (mut inter, mut psum, mut ysum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let z: Vec<f64> = (0..k).map(|c| logits.at(&[bi, c, i, j])).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let y = labels[(bi * h + i) * w + j];
                ce -= z[y] - lse;
                for c in 0..k {
                    let p = (z[c] - lse).exp();
                    psum[c] += p;
                    if c == y {
                        inter[c] += p;
                        ysum[c] += 1.0;
                    }
                }
            }
        }
    }
    let n = (b * h * w) as f64;
    let dice: f64 = (0..k).map(|c| (2.0 * inter[c] + DICE_EPS) / (psum[c] + ysum[c] + DICE_EPS)).sum::<f64>() / k as f64;
    (1.0 - dice) + ce / n
}

fn eval_seg(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = seg_loss(&mut g, l, labels, 1.0, 1.0).unwrap();
    g.value(v).item()
}

#[test]
fn seg_loss_matches_pixel_sum() {
    let logits = rand_tensor(&[2, 3, 4, 4], 1).scale(3.0);
    let labels: Vec<usize> = (0..32).map(|i| (i * 5 + i / 3) % 3).collect();
    assert!((eval_seg(&logits, &labels) - seg_oracle(&logits, &labels)).abs() <= 1e-10);
}

#[test]
fn confident_correct_logits_drive_seg_loss_to_zero() {
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let mut logits = Tensor::zeros(vec![1, 2, 4, 4]);
    for (px, &y) in labels.iter().enumerate() {
        logits.set(&[0, y, px / 4, px % 4], 40.0);
    }
    let v = eval_seg(&logits, &labels);
    assert!((0.0..1e-6).contains(&v), "{v}");
}

fn recon_oracle(p: &Tensor<f64>, t: &Tensor<f64>, l1: f64, lc: f64, lg: f64) -> f64 {
    let (b, c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]);
    let mut abs = 0.0;
    for (a, bb) in p.data().iter().zip(t.data()) {
        abs += (a - bb).abs();
    }
    abs /= p.numel() as f64;
    let mut cos = 0.0;
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let (mut pp, mut tt, mut pt) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let (x, y) = (p.at(&[bi, ch, i, j]), t.at(&[bi, ch, i, j]));
                    pp += x * x;
                    tt += y * y;
                    pt += x * y;
                }
                cos += 1.0 - pt / (pp.sqrt() * tt.sqrt());
            }
        }
    }
    cos /= (b * h * w) as f64;
    let (mut gx, mut gy) = (0.0, 0.0);
    for bi in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let d = |ii: usize, jj: usize| p.at(&[bi, ch, ii, jj]) - t.at(&[bi, ch, ii, jj]);
                    if j + 1 < w {
                        gx += (d(i, j + 1) - d(i, j)).abs();
                    }
                    if i + 1 < h {
                        gy += (d(i + 1, j) - d(i, j)).abs();
                    }
                }
            }
        }
    }
    gx /= (b * c * h * (w - 1)) as f64;
    gy /= (b * c * (h - 1) * w) as f64;
    l1 * abs + lc * cos + lg * (gx + gy)
}

fn eval_recon(p: &Tensor<f64>, t: &Tensor<f64>, l1: f64, lc: f64, lg: f64) -> f64 {
    let mut g = Graph::new();
    let (pv, tv) = (g.constant(p.clone()), g.constant(t.clone()));
    let v = recon_loss(&mut g, pv, tv, l1, lc, lg).unwrap();
    g.value(v).item()
}

#[test]
fn recon_loss_matches_direct_formula() {
    let p = rand_tensor(&[2, 3, 5, 4], 2);
    let t = rand_tensor(&[2, 3, 5, 4], 3);
    assert!((eval_recon(&p, &t, 1.0, 0.5, 0.5) - recon_oracle(&p, &t, 1.0, 0.5, 0.5)).abs() <= 1e-10);
    assert_eq!(eval_recon(&p, &p, 1.0, 0.5, 0.5), 0.0);
}

#[test]
fn cosine_term_ignores_positive_scale() {
    let t = rand_tensor(&[1, 4, 3, 3], 4);
    let p = t.scale(2.0);
    assert!(eval_recon(&p, &t, 0.0, 1.0, 0.0).abs() <= 1e-12);
    assert!(eval_recon(&p, &t, 1.0, 0.0, 0.0) > 0.0);
    assert!(eval_recon(&p, &t, 0.0, 0.0, 1.0) > 0.0);
}

#[test]
fn zero_norm_channel_vectors_count_as_aligned() {
    let t = rand_tensor(&[1, 2, 2, 2], 5);
    let z = Tensor::zeros(vec![1, 2, 2, 2]);
    assert_eq!(eval_recon(&z, &t, 0.0, 1.0, 0.0), 0.0);
}

#[test]
fn schedule_matches_scalar_recurrence() {
    let mut s = LossSchedule::new(10, 10, 1.0, 0.1, 0.9, 100).unwrap();
    let mut ema = 0.0f64;
    for e in 0..100 {
        let raw = if e < 10 {
            0.0
        } else if e < 20 {
            (e - 10) as f64 / 10.0
        } else {
            1.0 + (0.1 - 1.0) * (e - 20) as f64 / 79.0
        };
        ema = 0.9 * ema + 0.1 * raw;
        let got = s.joint_weight(e);
        assert!((got - ema).abs() <= 1e-15, "epoch {e}: {got} vs {ema}");
        if e < 10 {
            assert_eq!(got, 0.0);
        }
    }
    assert!((s.raw(99) - 0.1).abs() <= 1e-15);
}

#[test]
fn raw_weight_is_continuous() {
    let s = LossSchedule::new(10, 10, 1.0, 0.1, 0.9, 100).unwrap();
    // piecewise linear with slopes at most w_max / ramp
    for e in 0..200 {
        assert!((s.raw(e + 1) - s.raw(e)).abs() <= 0.1 + 1e-12);
    }
    assert_eq!(s.raw(10), 0.0);
    assert_eq!(s.raw(20), 1.0);
}

#[test]
fn constant_raw_converges_geometrically() {
    let mut s = LossSchedule::new(0, 0, 0.7, 0.7, 0.8, 50).unwrap();
    for k in 1..=30 {
        let w = s.joint_weight(k);
        assert!(((0.7 - w) - 0.7 * 0.8f64.powi(k as i32)).abs() <= 1e-12);
    }
}

#[test]
fn schedule_rejects_bad_parameters() {
    assert!(LossSchedule::new(1, 1, 1.0, 0.1, 1.0, 10).is_err());
    assert!(LossSchedule::new(1, 1, 0.1, 1.0, 0.5, 10).is_err());
}

#[test]
fn perfect_and_complement_predictions() {
    let gt: Vec<usize> = (0..16).map(|i| (i / 3) % 2).collect();
    let r = metrics(&gt, &gt, 2).unwrap();
    assert_eq!((r.dsc, r.miou), (1.0, 1.0));
    let inv: Vec<usize> = gt.iter().map(|v| 1 - v).collect();
    assert_eq!(metrics(&inv, &gt, 2).unwrap().dsc, 0.0);
}

#[test]
fn hand_counted_confusion_counts() {
    // class 1: TP=4, FP=2, FN=2 on a 4x4 map
    let gt = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    let pr = [1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0];
    let r = metrics(&pr, &gt, 2).unwrap();
    let c = &r.confusion;
    assert_eq!((c.tp[1], c.fp[1], c.fn_[1]), (4, 2, 2));
    assert_eq!(r.dice[1], Some(2.0 / 3.0));
    assert_eq!(r.iou[1], Some(0.5));

    let gt = [1, 1, 1, 1, 0, 0, 0, 0, 0];
    let pr = [1, 1, 0, 0, 1, 1, 0, 0, 0];
    let r = metrics(&pr, &gt, 2).unwrap();
    assert_eq!(r.dice[1], Some(0.5));
    assert_eq!(r.iou[1], Some(1.0 / 3.0));
}

#[test]
fn dice_dominates_iou_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let k = rng.random_range(2..5);
        let n = rng.random_range(1..65);
        let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pr: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let r = metrics(&pr, &gt, k).unwrap();
        for (d, i) in r.dice.iter().zip(&r.iou) {
            if let (Some(d), Some(i)) = (d, i) {
                assert!(d >= i && (0.0..=1.0).contains(d) && (0.0..=1.0).contains(i));
            }
        }
        let max_iou = r.iou.iter().flatten().cloned().fold(0.0, f64::max);
        assert!(r.miou <= max_iou + 1e-15);
    }
}

#[test]
fn metric_errors() {
    assert!(metrics(&[0, 1], &[0], 2).is_err());
    assert!(metrics(&[0, 2], &[0, 1], 2).is_err());
    let mut c = Confusion::new(3);
    c.add(&[0, 0], &[0, 0]).unwrap();
    let r = c.report();
    assert_eq!(r.dice, vec![Some(1.0), None, None]);
    assert_eq!(r.dsc, 1.0);
}
