//! Training and evaluation loops.
//!
//! Every random draw is keyed by `(seed, epoch, step)` rather than taken from
//! a long-lived generator, so a run resumed from a checkpoint replays exactly
//! the same shuffles and degradations as an uninterrupted one.

use std::path::{Path, PathBuf};

use farmamba_core::layers::Binding;
use farmamba_core::losses::{argmax_classes, recon_loss, seg_loss, Confusion, LossSchedule, MetricReport};
use farmamba_core::ssrae::degrade;
use farmamba_core::{Float, Graph, ParamTree, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::data::Dataset;
use crate::model::Model;
use crate::optim::Adam;
use crate::{mix_seed, HarnessError, Result};

const SHUFFLE: u64 = 1;
const DEGRADE: u64 = 2;

pub const METRICS_CSV: &str = "metrics.csv";
pub const LOSS_CSV: &str = "loss_curve.csv";
pub const LAST_CKPT: &str = "last.farm";
pub const BEST_CKPT: &str = "best.farm";
pub const CONFIG_JSON: &str = "config.json";

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    #[serde(rename = "DSC")]
    pub dsc: f64,
    #[serde(rename = "MIoU")]
    pub miou: f64,
    pub seg_loss: f64,
    /// Mean over the steps where the reconstruction term was active; 0 when
    /// it never was.
    pub recon_loss: f64,
    pub joint_weight: f64,
}

/// One optimizer step of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    pub seg_loss: f64,
    pub recon_loss: f64,
    pub joint_weight: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub report: MetricReport,
    pub seg_loss: f64,
}

/// Precision-independent summary of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub steps: Vec<StepRow>,
    pub best_val_dsc: f64,
    pub final_val: Option<EpochRow>,
}

impl TrainOutcome {
    pub fn val_rows(&self) -> impl Iterator<Item = &EpochRow> {
        self.rows.iter().filter(|r| r.split == "val")
    }
}

/// Runs inference with the main branch only and aggregates metrics.
pub fn evaluate<T: Float>(
    model: &Model,
    params: &ParamTree<T>,
    data: &Dataset,
    batch: usize,
    cfg: &RunConfig,
) -> Result<EvalResult> {
    let k = model.encoder.cfg.num_classes;
    if data.num_classes != k {
        return Err(HarnessError::Data(format!(
            "dataset has {} classes, model expects {k}",
            data.num_classes
        )));
    }
    check_extent(model, data)?;
    if data.is_empty() {
        return Err(HarnessError::Data("cannot evaluate an empty dataset".into()));
    }
    let mut conf = Confusion::new(k);
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk);
        let mut g = Graph::new();
        let p = Binding::frozen(&mut g, params);
        let xv = g.constant(x);
        let (logits, _) = model.segment(&mut g, &p, xv)?;
        let l = seg_loss(&mut g, logits, &labels, cfg.loss.lambda_dice, cfg.loss.lambda_ce)?;
        loss_sum += g.value(l).item().to_f64() * chunk.len() as f64;
        conf.add(&argmax_classes(g.value(logits)), &labels)?;
    }
    Ok(EvalResult {
        report: conf.report(),
        seg_loss: loss_sum / data.len() as f64,
    })
}

fn check_extent(model: &Model, data: &Dataset) -> Result<()> {
    let m = model.input_multiple();
    if data.height % m != 0 || data.width % m != 0 {
        return Err(HarnessError::Data(format!(
            "images are {}x{}; this model needs extents divisible by {m}",
            data.height, data.width
        )));
    }
    Ok(())
}

/// Exact encoding of a `u64` in four 16-bit pieces, representable at 32 bits.
fn pack_u64<T: Float>(x: u64) -> Tensor<T> {
    let parts: Vec<f64> = (0..4).map(|i| ((x >> (48 - 16 * i)) & 0xffff) as f64).collect();
    Tensor::from_f64(vec![4], &parts).expect("4 values")
}

fn unpack_u64<T: Float>(t: &Tensor<T>) -> u64 {
    t.to_f64_vec().iter().fold(0u64, |acc, &p| (acc << 16) | p as u64)
}

pub struct Trainer<T: Float> {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ParamTree<T>,
    pub adam: Adam<T>,
    pub schedule: LossSchedule,
    pub next_epoch: usize,
    pub best_val_dsc: f64,
    pub best_params: Option<ParamTree<T>>,
    pub rows: Vec<EpochRow>,
    pub steps: Vec<StepRow>,
}

impl<T: Float> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg)?;
        let params = model.init_params(cfg.seed)?;
        let o = &cfg.optim;
        let s = &cfg.schedule;
        Ok(Self {
            model,
            params,
            adam: Adam::new(o.lr, o.beta1, o.beta2, o.eps),
            schedule: LossSchedule::new(s.warmup, s.ramp, s.w_max, s.w_min, s.ema_beta, cfg.train.epochs)?,
            next_epoch: 0,
            best_val_dsc: f64::NEG_INFINITY,
            best_params: None,
            rows: Vec::new(),
            steps: Vec::new(),
            cfg: cfg.clone(),
        })
    }

    /// Model parameters plus optimizer, schedule and progress state.
    pub fn checkpoint(&self) -> ParamTree<T> {
        let mut tree = self.params.clone();
        self.adam.export(&mut tree);
        tree.set("__sched.ema", pack_u64(self.schedule.ema_state.to_bits()));
        tree.set("__sched.epoch", pack_u64(self.schedule.epoch as u64));
        tree.set("__train.next_epoch", pack_u64(self.next_epoch as u64));
        tree.set("__train.best_dsc", pack_u64(self.best_val_dsc.to_bits()));
        tree
    }

    pub fn resume(cfg: &RunConfig, ckpt: &ParamTree<T>) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let state = |name: &str| {
            ckpt.get(name)
                .map(unpack_u64)
                .map_err(|_| HarnessError::Checkpoint(format!("missing {name}")))
        };
        t.adam.import(ckpt)?;
        t.schedule.ema_state = f64::from_bits(state("__sched.ema")?);
        t.schedule.epoch = state("__sched.epoch")? as usize;
        t.next_epoch = state("__train.next_epoch")? as usize;
        t.best_val_dsc = f64::from_bits(state("__train.best_dsc")?);
        t.params = model_params(ckpt);
        let expected: Vec<String> = t.model.init_params::<T>(0)?.names().cloned().collect();
        let got: Vec<String> = t.params.names().cloned().collect();
        if expected != got {
            return Err(HarnessError::Checkpoint(
                "checkpoint parameters do not match the configured model".into(),
            ));
        }
        Ok(t)
    }

    fn degrade_rng(&self, epoch: usize, step: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, DEGRADE, epoch as u64, step as u64]))
    }

    /// One pass over `train`, then validation when due.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<()> {
        let epoch = self.next_epoch;
        let cfg = self.cfg.clone();
        let weight = self.schedule.joint_weight(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, SHUFFLE, epoch as u64])));

        let k = self.model.encoder.cfg.num_classes;
        let mut conf = Confusion::new(k);
        let (mut seg_sum, mut rec_sum, mut rec_n, mut n) = (0.0, 0.0, 0usize, 0usize);
        for (step, chunk) in order.chunks(cfg.optim.batch).enumerate() {
            let (x, labels) = train.batch::<T>(chunk);
            let mut g = Graph::new();
            let p = Binding::trainable(&mut g, &self.params);
            let xv = g.constant(x.clone());
            let (logits, feats) = self.model.segment(&mut g, &p, xv)?;
            let seg = seg_loss(&mut g, logits, &labels, cfg.loss.lambda_dice, cfg.loss.lambda_ce)?;
            let seg_v = g.value(seg).item().to_f64();
            let mut total = seg;
            let mut rec_v = 0.0;
            if let Some(aux) = self.model.ssrae.as_ref().filter(|_| weight > 0.0) {
                let degraded = degrade(&x, &aux.cfg.degrade, &mut self.degrade_rng(epoch, step))?;
                let dv = g.constant(degraded);
                let pred = aux.reconstruct_features(&mut g, &p, dv, &labels, (train.height, train.width))?;
                let target = g.detach(feats.stages[aux.cfg.target_stage - 1]);
                let l = &cfg.loss;
                let rec = recon_loss(&mut g, pred, target, l.lambda_l1, l.lambda_cos, l.lambda_grad)?;
                rec_v = g.value(rec).item().to_f64();
                let weighted = g.mul_scalar(rec, weight);
                total = g.add(total, weighted)?;
                rec_sum += rec_v;
                rec_n += 1;
            }
            let total_v = g.value(total).item().to_f64();
            if !total_v.is_finite() {
                return Err(self.non_finite(epoch, step, chunk, &x, seg_v, rec_v));
            }
            conf.add(&argmax_classes(g.value(logits)), &labels)?;
            let grads = p.grads(&g.backward(total)?, &self.params);
            drop(g);
            self.adam.step(&mut self.params, &grads)?;
            seg_sum += seg_v * chunk.len() as f64;
            n += chunk.len();
            self.steps.push(StepRow {
                epoch,
                step,
                seg_loss: seg_v,
                recon_loss: rec_v,
                joint_weight: weight,
                total: total_v,
            });
        }
        let r = conf.report();
        let row = EpochRow {
            epoch,
            split: "train".into(),
            dsc: r.dsc,
            miou: r.miou,
            seg_loss: seg_sum / n.max(1) as f64,
            recon_loss: if rec_n > 0 { rec_sum / rec_n as f64 } else { 0.0 },
            joint_weight: weight,
        };
        info!(
            "epoch {epoch}: train DSC {:.4} seg {:.4} recon {:.4} w {:.3}",
            row.dsc, row.seg_loss, row.recon_loss, weight
        );
        self.rows.push(row);

        self.next_epoch += 1;
        let due = self.next_epoch % cfg.train.eval_every == 0 || self.next_epoch == cfg.train.epochs;
        if due && !val.is_empty() {
            let ev = evaluate(&self.model, &self.params, val, cfg.optim.batch, &cfg)?;
            info!("epoch {epoch}: val DSC {:.4} MIoU {:.4}", ev.report.dsc, ev.report.miou);
            self.rows.push(EpochRow {
                epoch,
                split: "val".into(),
                dsc: ev.report.dsc,
                miou: ev.report.miou,
                seg_loss: ev.seg_loss,
                recon_loss: 0.0,
                joint_weight: weight,
            });
            if ev.report.dsc > self.best_val_dsc {
                self.best_val_dsc = ev.report.dsc;
                self.best_params = Some(self.params.clone());
            }
        }
        Ok(())
    }

    fn non_finite(&self, epoch: usize, step: usize, idx: &[usize], x: &Tensor<T>, seg: f64, rec: f64) -> HarnessError {
        let v = x.to_f64_vec();
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let worst = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.max_abs().to_f64()))
            .fold((String::new(), 0.0f64), |a, b| if !(b.1 <= a.1) { b } else { a });
        HarnessError::NonFinite {
            epoch,
            step,
            detail: format!(
                "batch {idx:?}; input min {lo:.4} max {hi:.4} mean {mean:.4}; seg_loss {seg}; recon_loss {rec}; \
                 largest parameter {} = {}",
                worst.0, worst.1
            ),
        }
    }

    /// Trains until the configured epoch count, writing artifacts when an
    /// output directory is set.
    pub fn run(&mut self, train: &Dataset, val: &Dataset) -> Result<()> {
        check_extent(&self.model, train)?;
        if train.is_empty() {
            return Err(HarnessError::Data("training set is empty".into()));
        }
        if let Some(dir) = self.cfg.output_dir.clone() {
            std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            let p = dir.join(CONFIG_JSON);
            std::fs::write(&p, self.cfg.to_json()).map_err(|e| HarnessError::io(&p, e))?;
        }
        while self.next_epoch < self.cfg.train.epochs {
            let best_before = self.best_val_dsc;
            self.run_epoch(train, val)?;
            if let Some(dir) = self.cfg.output_dir.clone() {
                self.write_artifacts(&dir, self.best_val_dsc > best_before)?;
            }
        }
        Ok(())
    }

    fn write_artifacts(&self, dir: &Path, improved: bool) -> Result<()> {
        write_csv(&dir.join(METRICS_CSV), &self.rows)?;
        write_csv(&dir.join(LOSS_CSV), &self.steps)?;
        let p = dir.join(LAST_CKPT);
        self.checkpoint().save(&p).map_err(|e| HarnessError::io(&p, e))?;
        if improved {
            let p = dir.join(BEST_CKPT);
            self.checkpoint_of(self.best_params.as_ref().unwrap_or(&self.params))
                .save(&p)
                .map_err(|e| HarnessError::io(&p, e))?;
        }
        Ok(())
    }

    fn checkpoint_of(&self, params: &ParamTree<T>) -> ParamTree<T> {
        let mut tree = self.checkpoint();
        for (n, t) in params.iter() {
            tree.set(n.clone(), t.clone());
        }
        tree
    }

    pub fn outcome(&self) -> TrainOutcome {
        TrainOutcome {
            rows: self.rows.clone(),
            steps: self.steps.clone(),
            best_val_dsc: self.best_val_dsc,
            final_val: self.rows.iter().rev().find(|r| r.split == "val").cloned(),
        }
    }
}

/// Drops the reserved `__*` state entries.
pub fn model_params<T: Float>(ckpt: &ParamTree<T>) -> ParamTree<T> {
    let mut out = ParamTree::new();
    for (n, t) in ckpt.iter().filter(|(n, _)| !n.starts_with("__")) {
        out.set(n.clone(), t.clone());
    }
    out
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::io(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| HarnessError::io(path, e))
}

/// Train and validation sets described by the config.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, val) = match &cfg.data.dir {
        Some(dir) => (
            Dataset::load(&dir.join("train"), Some(cfg.data.size))?,
            Dataset::load(&dir.join("val"), Some(cfg.data.size))?,
        ),
        None => cfg.data.synthetic.generate()?,
    };
    for d in [&train, &val] {
        if d.num_classes != cfg.encoder.num_classes {
            return Err(HarnessError::Data(format!(
                "data has {} classes but encoder.num_classes is {}",
                d.num_classes, cfg.encoder.num_classes
            )));
        }
    }
    Ok((train, val))
}

fn run_typed<T: Float>(cfg: &RunConfig, train: &Dataset, val: &Dataset, resume: bool) -> Result<TrainOutcome> {
    let mut trainer = match (&cfg.output_dir, resume) {
        (Some(dir), true) if dir.join(LAST_CKPT).exists() => {
            let p = dir.join(LAST_CKPT);
            let ckpt = ParamTree::<T>::load(&p).map_err(|e| HarnessError::io(&p, e))?;
            let mut t = Trainer::<T>::resume(cfg, &ckpt)?;
            let next = t.next_epoch;
            if dir.join(METRICS_CSV).exists() {
                t.rows = read_csv::<EpochRow>(&dir.join(METRICS_CSV))?;
                t.rows.retain(|r| r.epoch < next);
            }
            if dir.join(LOSS_CSV).exists() {
                t.steps = read_csv::<StepRow>(&dir.join(LOSS_CSV))?;
                t.steps.retain(|r| r.epoch < next);
            }
            info!("resuming at epoch {next}");
            t
        }
        (_, true) => {
            warn!("nothing to resume from; starting fresh");
            Trainer::<T>::new(cfg)?
        }
        _ => Trainer::<T>::new(cfg)?,
    };
    trainer.run(train, val)?;
    Ok(trainer.outcome())
}

/// Full run on explicit data at the configured precision.
pub fn train_on(cfg: &RunConfig, train: &Dataset, val: &Dataset, resume: bool) -> Result<TrainOutcome> {
    match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(cfg, train, val, resume),
        Precision::F64 => run_typed::<f64>(cfg, train, val, resume),
    }
}

/// Loads the configured data and trains. With `train.folds > 1` the train and
/// val sets are pooled and split round-robin into folds, one run per fold
/// (artifacts under `fold{i}/`).
pub fn train(cfg: &RunConfig, resume: bool) -> Result<Vec<TrainOutcome>> {
    let (train, val) = load_data(cfg)?;
    if cfg.train.folds == 1 {
        return Ok(vec![train_on(cfg, &train, &val, resume)?]);
    }
    let all = train.concat(&val)?;
    let k = cfg.train.folds;
    if all.len() < k {
        return Err(HarnessError::Data(format!("{} samples cannot fill {k} folds", all.len())));
    }
    (0..k)
        .map(|f| {
            let (vi, ti): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % k == f);
            let mut c = cfg.clone();
            c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(format!("fold{f}")));
            train_on(&c, &all.subset(&ti), &all.subset(&vi), resume)
        })
        .collect()
}

/// Loads a checkpoint with the `config.json` stored next to it (or `cfg`).
pub fn load_for_eval(ckpt: &Path, cfg: Option<&RunConfig>) -> Result<(RunConfig, Model, CheckpointParams)> {
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => {
            let p: PathBuf = ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_JSON);
            RunConfig::load(&p)?
        }
    };
    let model = Model::new(&cfg)?;
    let params = match cfg.train.precision {
        Precision::F32 => CheckpointParams::F32(model_params(&ParamTree::load(ckpt).map_err(|e| HarnessError::io(ckpt, e))?)),
        Precision::F64 => CheckpointParams::F64(model_params(&ParamTree::load(ckpt).map_err(|e| HarnessError::io(ckpt, e))?)),
    };
    Ok((cfg, model, params))
}

pub enum CheckpointParams {
    F32(ParamTree<f32>),
    F64(ParamTree<f64>),
}

impl CheckpointParams {
    pub fn evaluate(&self, model: &Model, data: &Dataset, cfg: &RunConfig) -> Result<EvalResult> {
        match self {
            CheckpointParams::F32(p) => evaluate(model, p, data, cfg.optim.batch, cfg),
            CheckpointParams::F64(p) => evaluate(model, p, data, cfg.optim.batch, cfg),
        }
    }
}
