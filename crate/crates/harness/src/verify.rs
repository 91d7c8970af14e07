//! Property suites runnable outside `cargo test`: each check computes its
//! error measures against an independent oracle and compares them with a
//! fixed tolerance.

use std::fmt;
use std::time::Instant;

use farmamba_core::autodiff::{Conv2dSpec, Graph};
use farmamba_core::encoder::{selective_scan, ss2d_scan, Direction, Ss2d, SsmParams, VssBlock};
use farmamba_core::freq::{self, MaskKind, Maskable};
use farmamba_core::layers::{Binding, Init};
use farmamba_core::losses::{metrics, recon_loss, seg_loss, LossSchedule};
use farmamba_core::msfm::{Msfm, MsfmConfig, Variant};
use farmamba_core::oracle::{self, gradcheck, rand_tensor, weighted_sum};
use farmamba_core::ssrae::{area_downscale, binomial_blur, degrade, DegradeConfig, RegionAttention, RegionMask};
use farmamba_core::{ParamTree, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ablation::{ablation_suite, AblationTable};
use crate::config::{AblationFlags, Precision, RunConfig, Stages};
use crate::data::Dataset;
use crate::model::{AUX, ENC};
use crate::trainer::{EpochRow, StepRow, Trainer};
use crate::Result;

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} ({}): {} [{}; {:.1}s]",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

fn run(id: u8, name: &'static str, budget_s: Option<f64>, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (mut passed, mut detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let seconds = t.elapsed().as_secs_f64();
    if let Some(b) = budget_s {
        if seconds > b {
            passed = false;
            detail.push_str(&format!("; exceeded {b}s budget"));
        }
    }
    Check {
        id,
        name,
        passed,
        detail,
        seconds,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Criterion 1: DWT / FFT / DCT against direct sums, reconstruction, energy.
pub fn transforms() -> Check {
    run(1, "transform correctness", Some(10.0), || {
        let (mut oracle_err, mut recon_err, mut energy_err) = (0.0f64, 0.0f64, 0.0f64);
        for seed in 0..8u64 {
            let x = rand_tensor(&[1, 1, 8, 8], 100 + seed);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());

            let s = freq::dwt2(&mut g, xv)?;
            let want = oracle::haar2(x.data(), 8, 8);
            for (band, w) in [s.ll, s.lh, s.hl, s.hh].iter().zip(&want) {
                oracle_err = oracle_err.max(max_diff(g.value(*band).data(), w));
            }
            let e: f64 = [s.ll, s.lh, s.hl, s.hh].iter().map(|&b| g.value(b).sum_sq()).sum();
            energy_err = energy_err.max((e - x.sum_sq()).abs());
            let back = freq::idwt2(&mut g, &s)?;
            recon_err = recon_err.max(g.value(back).max_abs_diff(&x));

            let xp = g.constant(x.reshape(vec![1, 8, 8])?);
            let f = freq::fft2(&mut g, xp)?;
            let (re, im) = (f.re(&mut g)?, f.im(&mut g)?);
            let (wr, wi) = oracle::dft2(x.data(), 8, 8);
            oracle_err = oracle_err.max(max_diff(g.value(re).data(), &wr)).max(max_diff(g.value(im).data(), &wi));
            let e = (g.value(re).sum_sq() + g.value(im).sum_sq()) / 64.0;
            energy_err = energy_err.max((e - x.sum_sq()).abs());
            let back = freq::ifft2(&mut g, &f)?;
            recon_err = recon_err.max(max_diff(g.value(back).data(), x.data()));

            let d = freq::dct2(&mut g, xp)?;
            oracle_err = oracle_err.max(max_diff(g.value(d.coef).data(), &oracle::dct2(x.data(), 8, 8)));
            energy_err = energy_err.max((g.value(d.coef).sum_sq() - x.sum_sq()).abs());
            let back = freq::idct2(&mut g, &d)?;
            recon_err = recon_err.max(max_diff(g.value(back).data(), x.data()));
        }
        let ok = oracle_err <= 1e-9 && recon_err <= 1e-10 && energy_err <= 1e-8;
        Ok((
            ok,
            format!("oracle {oracle_err:.1e} <= 1e-9, reconstruction {recon_err:.1e} <= 1e-10, energy {energy_err:.1e} <= 1e-8"),
        ))
    })
}

/// Criterion 2: band masks partition every grid and band sums rebuild the input.
pub fn masks() -> Check {
    run(2, "mask partition", None, || {
        let mut bad = Vec::new();
        let mut worst = 0.0f64;
        for (kind, name) in [(MaskKind::Ring, "ring"), (MaskKind::Wedge, "wedge")] {
            for h in [8, 16, 32] {
                for w in [8, 16, 32] {
                    let x = rand_tensor(&[1, h, w], (h * 100 + w) as u64);
                    for k in 1..=4 {
                        let set = freq::make_band_masks(kind, h, w, k)?;
                        let mut cover = vec![0.0f64; h * w];
                        for b in 0..k {
                            for (c, v) in cover.iter_mut().zip(set.mask::<f64>(b).data()) {
                                *c += v;
                            }
                        }
                        if cover.iter().any(|&c| c != 1.0) {
                            bad.push(format!("{name} {h}x{w} K={k}"));
                        }
                        let mut g = Graph::<f64>::new();
                        let xv = g.constant(x.clone());
                        let mut acc = Tensor::zeros(vec![1, h, w]);
                        match kind {
                            MaskKind::Ring => {
                                let s = freq::fft2(&mut g, xv)?;
                                let s = freq::fftshift(&mut g, &s)?;
                                for b in 0..k {
                                    let band = s.apply_mask(&mut g, &set.mask(b))?;
                                    let y = freq::ifft2(&mut g, &band)?;
                                    acc.add_assign(g.value(y));
                                }
                            }
                            MaskKind::Wedge => {
                                let s = freq::dct2(&mut g, xv)?;
                                for b in 0..k {
                                    let band = s.apply_mask(&mut g, &set.mask(b))?;
                                    let y = freq::idct2(&mut g, &band)?;
                                    acc.add_assign(g.value(y));
                                }
                            }
                        }
                        worst = worst.max(acc.max_abs_diff(&x));
                    }
                }
            }
        }
        Ok((
            bad.is_empty() && worst <= 1e-8,
            format!("108 mask sets, {} not a partition; band-sum error {worst:.1e} <= 1e-8", bad.len()),
        ))
    })
}

fn randomize(tree: &ParamTree<f64>, seed: u64, scale: f64) -> ParamTree<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamTree::new();
    for (k, v) in tree.iter() {
        out.set(k.clone(), Tensor::uniform(v.shape().to_vec(), -scale, scale, &mut rng));
    }
    out
}

fn check_params<F>(tree: &ParamTree<f64>, extra: &[Tensor<f64>], max_elems: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Binding, &[Var]) -> farmamba_core::Result<Var>,
{
    let names: Vec<String> = tree.names().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = tree.iter().map(|(_, v)| v.clone()).collect();
    inputs.extend_from_slice(extra);
    let n = names.len();
    let r = gradcheck(&inputs, 1e-4, max_elems, |g, vars| {
        let p = Binding::from_vars(names.iter().cloned().zip(vars[..n].iter().copied()));
        let y = f(g, &p, &vars[n..])?;
        weighted_sum(g, y, 7)
    })?;
    Ok(r.max_rel_err)
}

fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> farmamba_core::Result<Var>,
{
    let r = gradcheck(inputs, 1e-4, 64, |g, v| {
        let y = f(g, v)?;
        if g.value(y).is_scalar() {
            Ok(y)
        } else {
            weighted_sum(g, y, 99)
        }
    })?;
    Ok(r.max_rel_err)
}

fn tree_of(f: impl FnOnce(&mut ParamTree<f64>) -> farmamba_core::Result<()>) -> Result<ParamTree<f64>> {
    let mut t = ParamTree::new();
    f(&mut t)?;
    Ok(t)
}

/// Criterion 3: central differences for every parameterized operation.
pub fn gradients() -> Check {
    run(3, "gradient suite", Some(300.0), || {
        let mut errs: Vec<(String, f64)> = Vec::new();
        let x = rand_tensor(&[2, 4, 6, 6], 31);
        for (k, stride, groups) in [(3, 1, 1), (3, 2, 1), (5, 1, 2), (3, 1, 4)] {
            let w = rand_tensor(&[4, 4 / groups, k, k], 32 + k as u64);
            let b = rand_tensor(&[4], 33);
            let spec = Conv2dSpec {
                stride,
                padding: k / 2,
                groups,
            };
            errs.push((
                format!("conv2d k{k} s{stride} g{groups}"),
                check_inputs(&[x.clone(), w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec))?,
            ));
        }
        errs.push((
            "linear".into(),
            check_inputs(&[rand_tensor(&[2, 3, 4], 23), rand_tensor(&[4, 5], 24), rand_tensor(&[5], 25)], |g, v| {
                g.linear(v[0], v[1], Some(v[2]))
            })?,
        ));

        let (b, l, e, n) = (2, 6, 3, 2);
        let delta = rand_tensor(&[b, l, e], 52).map(|v| 0.2 + 0.5 * v.abs());
        let a = rand_tensor(&[e, n], 53).map(|v| -0.3 - v.abs());
        let ins = [
            rand_tensor(&[b, l, e], 51),
            delta,
            a,
            rand_tensor(&[b, l, n], 54),
            rand_tensor(&[b, l, n], 55),
            rand_tensor(&[e], 56),
        ];
        errs.push((
            "selective_scan".into(),
            check_inputs(&ins, |g, v| selective_scan(g, v[0], v[1], v[2], v[3], v[4], v[5]))?,
        ));

        let ss = Ss2d::new("ss", 4, 2);
        let tree = randomize(&tree_of(|t| ss.init_params(t, &Init::new(1)))?, 61, 0.5);
        errs.push((
            "ss2d".into(),
            check_params(&tree, &[rand_tensor(&[1, 3, 3, 4], 62)], 6, |g, p, v| ss.forward(g, p, v[0]))?,
        ));
        let blk = VssBlock::new("blk", 4, 2);
        let tree = randomize(&tree_of(|t| blk.init_params(t, &Init::new(2)))?, 63, 0.5);
        errs.push((
            "vss_block".into(),
            check_params(&tree, &[rand_tensor(&[1, 4, 4, 4], 64)], 6, |g, p, v| blk.forward(g, p, v[0]))?,
        ));
        for variant in Variant::ALL {
            let mut cfg = MsfmConfig::new(variant, 4);
            cfg.cbam_reduction = 2;
            let m = Msfm::new("m", cfg)?;
            let tree = randomize(&tree_of(|t| m.init_params(t, &Init::new(4)))?, 81, 0.3);
            errs.push((
                format!("msfm_{variant}"),
                check_params(&tree, &[rand_tensor(&[1, 4, 6, 6], 82)], 6, |g, p, v| m.forward(g, p, v[0]))?,
            ));
        }
        let att = RegionAttention::new("att", 4, 2)?;
        let tree = randomize(&tree_of(|t| att.init_params(t, &Init::new(5)))?, 91, 0.5);
        let mask = RegionMask::from_labels(&[0, 0, 1, 1, 2, 2, 0, 0, 1], 1, 3, 3, 3, 3)?;
        errs.push((
            "region_attention".into(),
            check_params(&tree, &[rand_tensor(&[1, 9, 4], 92)], 12, |g, p, v| {
                Ok(att.forward(g, p, v[0], &mask)?.0)
            })?,
        ));
        let labels = [0, 1, 2, 1, 0, 0, 2, 2, 1, 1, 0, 2, 1, 0, 2, 1, 0, 1];
        errs.push((
            "seg_loss".into(),
            check_inputs(&[rand_tensor(&[2, 3, 3, 3], 101)], |g, v| seg_loss(g, v[0], &labels, 1.0, 1.0))?,
        ));
        errs.push((
            "recon_loss".into(),
            check_inputs(&[rand_tensor(&[2, 3, 4, 4], 102), rand_tensor(&[2, 3, 4, 4], 103)], |g, v| {
                recon_loss(g, v[0], v[1], 1.0, 0.5, 0.5)
            })?,
        ));
        let (worst_name, worst) = errs
            .iter()
            .cloned()
            .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
        Ok((
            worst <= 1e-4,
            format!("{} ops, worst relative error {worst:.1e} ({worst_name}) <= 1e-4", errs.len()),
        ))
    })
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn scan_order(dir: Direction, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = match dir {
        Direction::RowMajor | Direction::RowMajorReversed => (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect(),
        Direction::ColMajor | Direction::ColMajorReversed => (0..w).flat_map(|j| (0..h).map(move |i| (i, j))).collect(),
    };
    if matches!(dir, Direction::RowMajorReversed | Direction::ColMajorReversed) {
        v.reverse();
    }
    v
}

/// Four explicit serializations, dot-product projections and the scalar
/// recurrence, scattered back and summed.
fn ss2d_oracle(dirs: &[SsmParams; 4], tree: &ParamTree<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (b, h, w, e) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let l = h * w;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for (dir, ssm) in Direction::ALL.into_iter().zip(dirs) {
        let (r, n) = (ssm.rank, ssm.state);
        let get = |s: &str| tree.get(&format!("{}.{s}", ssm.prefix)).cloned();
        let (xw, dw, db) = (get("x_proj.w")?, get("dt_proj.w")?, get("dt_proj.b")?);
        let a: Vec<f64> = get("A_log")?.data().iter().map(|v| -v.exp()).collect();
        let d = get("D")?;
        let pos = scan_order(dir, h, w);
        for bi in 0..b {
            let mut u = vec![0.0; l * e];
            for (t, &(i, j)) in pos.iter().enumerate() {
                for c in 0..e {
                    u[t * e + c] = x.at(&[bi, i, j, c]);
                }
            }
            let (mut delta, mut bm, mut cm) = (vec![0.0; l * e], vec![0.0; l * n], vec![0.0; l * n]);
            for t in 0..l {
                let proj: Vec<f64> = (0..r + 2 * n)
                    .map(|o| (0..e).map(|c| u[t * e + c] * xw.at(&[c, o])).sum())
                    .collect();
                for c in 0..e {
                    let z: f64 = (0..r).map(|k| proj[k] * dw.at(&[k, c])).sum::<f64>() + db.data()[c];
                    delta[t * e + c] = softplus(z);
                }
                bm[t * n..(t + 1) * n].copy_from_slice(&proj[r..r + n]);
                cm[t * n..(t + 1) * n].copy_from_slice(&proj[r + n..]);
            }
            let y = oracle::selective_scan(&u, &delta, &a, &bm, &cm, d.data(), l, e, n);
            for (t, &(i, j)) in pos.iter().enumerate() {
                for c in 0..e {
                    let cur = out.at(&[bi, i, j, c]);
                    out.set(&[bi, i, j, c], cur + y[t * e + c]);
                }
            }
        }
    }
    Ok(out)
}

/// Criterion 4: fused scans against per-step recurrence loops.
pub fn scan_oracles() -> Check {
    run(4, "selective-scan oracle", None, || {
        let mut worst = 0.0f64;
        for (l, n) in [(16, 4), (9, 1), (4, 3)] {
            let (b, e) = (2, 3);
            let u = rand_tensor(&[b, l, e], 1);
            let delta = rand_tensor(&[b, l, e], 2).map(|v| 0.05 + v.abs());
            let a = rand_tensor(&[e, n], 3).map(|v| -0.1 - v.abs());
            let bm = rand_tensor(&[b, l, n], 4);
            let cm = rand_tensor(&[b, l, n], 5);
            let d = rand_tensor(&[e], 6);
            let mut g = Graph::new();
            let v = [&u, &delta, &a, &bm, &cm, &d].map(|t| g.constant(t.clone()));
            let y = selective_scan(&mut g, v[0], v[1], v[2], v[3], v[4], v[5])?;
            for bi in 0..b {
                let s = |t: &Tensor<f64>, w: usize| t.data()[bi * l * w..(bi + 1) * l * w].to_vec();
                let want = oracle::selective_scan(&s(&u, e), &s(&delta, e), a.data(), &s(&bm, n), &s(&cm, n), d.data(), l, e, n);
                worst = worst.max(max_diff(&g.value(y).data()[bi * l * e..(bi + 1) * l * e], &want));
            }
        }
        for (h, w, n) in [(4, 4, 4), (2, 3, 2), (3, 1, 3), (1, 1, 1)] {
            let dirs = [0, 1, 2, 3].map(|k| SsmParams::new(format!("dir{k}"), 3, n));
            let mut tree = ParamTree::new();
            for d in &dirs {
                d.init_params(&mut tree, &Init::new(21))?;
            }
            let x = rand_tensor(&[2, h, w, 3], 22 + h as u64);
            let mut g = Graph::new();
            let p = Binding::frozen(&mut g, &tree);
            let xv = g.constant(x.clone());
            let y = ss2d_scan(&mut g, &dirs, &p, xv)?;
            worst = worst.max(g.value(y).max_abs_diff(&ss2d_oracle(&dirs, &tree, &x)?));
        }
        Ok((worst <= 1e-10, format!("max deviation {worst:.1e} <= 1e-10")))
    })
}

/// Criterion 5: degrade shape and noise statistics, region isolation, and the
/// gradient barrier between the reconstruction loss and the main encoder.
pub fn ssrae_contracts() -> Check {
    run(5, "SSRAE contracts", None, || {
        let cfg = DegradeConfig::default();
        let x = rand_tensor(&[1, 1, 4000, 4000], 3);
        let out = degrade(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(4))?;
        let shape_ok = out.shape() == [1, 1, 1000, 1000];
        let clean = binomial_blur(&area_downscale(&x, 4)?);
        let noise: Vec<f64> = out.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
        let n = noise.len() as f64;
        let mean = noise.iter().sum::<f64>() / n;
        let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let std_rel = (std / cfg.sigma_noise - 1.0).abs();
        let mean_ok = mean.abs() <= 3.0 * cfg.sigma_noise / n.sqrt();

        let att = RegionAttention::new("att", 8, 2)?;
        let mut tree = ParamTree::new();
        att.init_params(&mut tree, &Init::new(10))?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut leak = 0.0f64;
        for _ in 0..5 {
            let labels: Vec<usize> = (0..2 * 36).map(|_| rng.random_range(0..3)).collect();
            let mask = RegionMask::from_labels(&labels, 2, 6, 6, 6, 6)?;
            let mut g = Graph::new();
            let p = Binding::frozen(&mut g, &tree);
            let xv = g.constant(rand_tensor(&[2, 36, 8], 12).scale(20.0));
            let (_, a) = att.forward(&mut g, &p, xv, &mask)?;
            let a = g.value(a);
            for b in 0..2 {
                for h in 0..2 {
                    for i in 0..36 {
                        for j in 0..36 {
                            if mask.labels[b * 36 + i] != mask.labels[b * 36 + j] {
                                leak = leak.max(a.at(&[b, h, i, j]));
                            }
                        }
                    }
                }
            }
        }

        let mut rc = small_run_config();
        rc.train.precision = Precision::F64;
        let model = crate::model::Model::new(&rc)?;
        let aux = model.ssrae.as_ref().expect("full flags");
        let tree = model.init_params::<f64>(1)?;
        let (train, _) = rc.data.synthetic.generate()?;
        let (img, labels) = train.batch::<f64>(&[0, 1]);
        let degraded = degrade(&img, &aux.cfg.degrade, &mut ChaCha8Rng::seed_from_u64(5))?;
        let mut g = Graph::new();
        let p = Binding::trainable(&mut g, &tree);
        let xv = g.constant(img);
        let (_, feats) = model.segment(&mut g, &p, xv)?;
        let target = g.detach(feats.stages[aux.cfg.target_stage - 1]);
        let dv = g.constant(degraded);
        let pred = aux.reconstruct_features(&mut g, &p, dv, &labels, (train.height, train.width))?;
        let loss = recon_loss(&mut g, pred, target, 1.0, 0.5, 0.5)?;
        let grads = p.grads(&g.backward(loss)?, &tree);
        let main_touched = grads
            .iter()
            .filter(|(n, gr)| n.starts_with(&format!("{ENC}.")) && gr.max_abs() != 0.0)
            .count();
        let aux_touched = grads
            .iter()
            .filter(|(n, gr)| n.starts_with(&format!("{AUX}.")) && gr.max_abs() != 0.0)
            .count();

        let ok = shape_ok && std_rel <= 0.02 && mean_ok && leak < 1e-8 && main_touched == 0 && aux_touched > 0;
        Ok((
            ok,
            format!(
                "degrade shape {:?}; noise std off by {:.2}% (<= 2%), mean {mean:.1e}; max cross-region weight {leak:.1e} < 1e-8; \
                 main-encoder tensors with gradient {main_touched}, auxiliary {aux_touched}",
                out.shape(),
                100.0 * std_rel
            ),
        ))
    })
}

/// Criterion 6: warmup zero, continuity and the scalar recurrence.
pub fn schedule() -> Check {
    run(6, "schedule", None, || {
        let mut s = LossSchedule::new(10, 10, 1.0, 0.1, 0.9, 100)?;
        let mut ema = 0.0f64;
        let (mut mismatches, mut warm_nonzero) = (0, 0);
        for e in 0..100 {
            let raw = if e < 10 {
                0.0
            } else if e < 20 {
                (e - 10) as f64 / 10.0
            } else {
                let frac = (e - 20) as f64 / 79.0;
                1.0 + (0.1 - 1.0) * frac
            };
            let beta = 0.9;
            ema = beta * ema + (1.0 - beta) * raw;
            let got = s.joint_weight(e);
            if got != ema {
                mismatches += 1;
            }
            if e < 10 && got != 0.0 {
                warm_nonzero += 1;
            }
        }
        // largest slope of the trapezoid is w_max / ramp
        let jump = (0..200).map(|e| (s.raw(e + 1) - s.raw(e)).abs()).fold(0.0, f64::max);
        let ok = mismatches == 0 && warm_nonzero == 0 && jump <= 0.1 + 1e-12;
        Ok((
            ok,
            format!("{mismatches} of 100 epochs differ from the recurrence; {warm_nonzero} nonzero warmup weights; max raw step {jump:.3}"),
        ))
    })
}

/// Small full-model configuration for fast 64-bit training checks.
pub fn small_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 3;
    c.encoder.base_channels = 8;
    c.encoder.depths = vec![1, 1];
    c.encoder.state_dim = 2;
    c.msfm.insert_stage = Stages::One(1);
    c.msfm.cbam_reduction = 2;
    c.schedule.warmup = 1;
    c.schedule.ramp = 1;
    c.optim.batch = 4;
    c.optim.lr = 2e-3;
    c.train.epochs = 4;
    c.train.eval_every = 2;
    c.train.precision = Precision::F64;
    c.ablation = AblationFlags::FULL;
    c.data.synthetic.size = 32;
    c.data.synthetic.n_train = 8;
    c.data.synthetic.n_val = 4;
    c
}

fn csv_bytes<R: serde::Serialize>(rows: &[R]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn logs(t: &Trainer<f64>) -> (Vec<u8>, Vec<u8>) {
    (csv_bytes::<EpochRow>(&t.rows), csv_bytes::<StepRow>(&t.steps))
}

/// Criterion 8: reproducible logs, byte-stable checkpoints, exact resume.
pub fn determinism() -> Check {
    run(8, "determinism and persistence", None, || {
        let cfg = small_run_config();
        let (train, val) = cfg.data.synthetic.generate()?;
        let full = |cfg: &RunConfig| -> Result<Trainer<f64>> {
            let mut t = Trainer::<f64>::new(cfg)?;
            t.run(&train, &val)?;
            Ok(t)
        };
        let a = full(&cfg)?;
        let b = full(&cfg)?;
        let same_logs = logs(&a) == logs(&b);

        let bytes = a.checkpoint().to_bytes();
        let reloaded = ParamTree::<f64>::read_from(&mut bytes.as_slice())?;
        let stable = reloaded.to_bytes() == bytes;

        let mut first = Trainer::<f64>::new(&cfg)?;
        for _ in 0..2 {
            first.run_epoch(&train, &val)?;
        }
        let ck = ParamTree::<f64>::read_from(&mut first.checkpoint().to_bytes().as_slice())?;
        let mut resumed = Trainer::<f64>::resume(&cfg, &ck)?;
        resumed.run(&train, &val)?;
        let tail_rows: Vec<EpochRow> = a.rows.iter().filter(|r| r.epoch >= 2).cloned().collect();
        let tail_steps: Vec<StepRow> = a.steps.iter().filter(|r| r.epoch >= 2).cloned().collect();
        let exact_resume = resumed.rows == tail_rows
            && resumed.steps == tail_steps
            && resumed.checkpoint().to_bytes() == a.checkpoint().to_bytes();

        Ok((
            same_logs && stable && exact_resume,
            format!(
                "repeat-run logs identical: {same_logs}; save/load/save byte-identical: {stable}; \
                 resume after epoch 2 bit-exact: {exact_resume}"
            ),
        ))
    })
}

/// Criterion 9: Dice dominates IoU; hand-counted confusion examples.
pub fn metric_identities() -> Check {
    run(9, "metric identities", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut violations = 0;
        for _ in 0..1000 {
            let k = rng.random_range(2..5);
            let n = rng.random_range(1..65);
            let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let pr: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let r = metrics(&pr, &gt, k)?;
            for (d, i) in r.dice.iter().zip(&r.iou) {
                if let (Some(d), Some(i)) = (d, i) {
                    if d < i {
                        violations += 1;
                    }
                }
            }
        }
        // TP=4, FP=2, FN=2 on a 4x4 map
        let gt = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let pr = [1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        let r = metrics(&pr, &gt, 2)?;
        let c = &r.confusion;
        let counts_442 = (c.tp[1], c.fp[1], c.fn_[1]) == (4, 2, 2)
            && r.dice[1] == Some(2.0 / 3.0)
            && r.iou[1] == Some(0.5);
        // TP=2, FP=2, FN=2 gives Dice 1/2 and IoU 1/3
        let gt = [1, 1, 1, 1, 0, 0, 0, 0, 0];
        let pr = [1, 1, 0, 0, 1, 1, 0, 0, 0];
        let r = metrics(&pr, &gt, 2)?;
        let counts_222 = r.dice[1] == Some(0.5) && r.iou[1] == Some(1.0 / 3.0);
        Ok((
            violations == 0 && counts_442 && counts_222,
            format!(
                "{violations} Dice < IoU cases in 1000 maps; TP/FP/FN 4/2/2 gives 2/3 and 1/2: {counts_442}; \
                 2/2/2 gives 1/2 and 1/3: {counts_222}"
            ),
        ))
    })
}

/// Settings for the desk-scale ablation: 64x64, 3 classes, 300/60 images,
/// 30 epochs, a small network at 32 bits.
pub fn ablation_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.base_channels = 8;
    c.encoder.depths = vec![1, 1, 1, 1];
    c.encoder.state_dim = 4;
    c.msfm.insert_stage = Stages::One(1);
    c.msfm.cbam_reduction = 2;
    c.train.epochs = 30;
    c.train.eval_every = 10;
    c.train.precision = Precision::F32;
    c
}

/// Criterion 7: mean final val DSC over seeds; full must beat Base by half a
/// DSC point and Base+MSFM must not trail Base.
pub fn ablation_trend(base: &RunConfig, seeds: &[u64], train: &Dataset, val: &Dataset) -> (Check, AblationTable) {
    let mut table = AblationTable::default();
    let check = run(7, "desk-scale ablation trend", Some(1800.0), || {
        let v = base.msfm.variant;
        table = ablation_suite(base, &["Base", "Base+MSFM", "Full"], &[v], seeds, train, val)?;
        let mean = |row: &str| table.mean(row, v).map(|m| m.0).unwrap_or(f64::NAN);
        let (b, m, f) = (mean("Base"), mean("Base+MSFM"), mean("Full"));
        let ok = f >= b + 0.005 && m >= b;
        Ok((
            ok,
            format!(
                "mean val DSC over {} seeds ({v}): Base {:.2}, Base+MSFM {:.2}, Full {:.2}; need Full >= Base + 0.50 and Base+MSFM >= Base",
                seeds.len(),
                100.0 * b,
                100.0 * m,
                100.0 * f
            ),
        ))
    });
    (check, table)
}

/// Criteria 1-6, 8 and 9.
pub fn fast_checks() -> Vec<Check> {
    vec![
        transforms(),
        masks(),
        gradients(),
        scan_oracles(),
        ssrae_contracts(),
        schedule(),
        determinism(),
        metric_identities(),
    ]
}
