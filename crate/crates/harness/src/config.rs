//! Run configuration. Every section and key is optional in JSON; missing keys
//! take the desk-scale defaults below.

use std::path::{Path, PathBuf};

use farmamba_core::encoder::EncoderConfig;
use farmamba_core::msfm::{MsfmConfig, Variant};
use farmamba_core::ssrae::{DegradeConfig, SsraeConfig};
use serde::{Deserialize, Serialize};

use crate::synthetic::SyntheticSpec;
use crate::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderSection,
    pub msfm: MsfmSection,
    pub ssrae: SsraeSection,
    pub loss: LossSection,
    pub schedule: ScheduleSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub ablation: AblationFlags,
    pub data: DataSection,
    /// Where checkpoints and logs go; `None` keeps everything in memory.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderSection::default(),
            msfm: MsfmSection::default(),
            ssrae: SsraeSection::default(),
            loss: LossSection::default(),
            schedule: ScheduleSection::default(),
            optim: OptimSection::default(),
            train: TrainSection::default(),
            ablation: AblationFlags::FULL,
            data: DataSection::default(),
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub base_channels: usize,
    pub depths: Vec<usize>,
    pub state_dim: usize,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depths: vec![2, 2, 2, 2],
            state_dim: 8,
            num_classes: 3,
            in_channels: 3,
        }
    }
}

/// A single stage or a list of stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Stages {
    One(usize),
    Many(Vec<usize>),
}

impl Stages {
    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            Stages::One(s) => vec![*s],
            Stages::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsfmSection {
    #[serde(with = "variant_serde")]
    pub variant: Variant,
    pub bands: usize,
    pub kernel_scales: Vec<usize>,
    pub residual: bool,
    pub cbam: bool,
    pub cbam_reduction: usize,
    pub insert_stage: Stages,
}

impl Default for MsfmSection {
    fn default() -> Self {
        let m = MsfmConfig::new(Variant::Dwt, 1);
        Self {
            variant: m.variant,
            bands: m.bands,
            kernel_scales: m.kernel_scales,
            residual: m.residual,
            cbam: m.cbam,
            cbam_reduction: m.cbam_reduction,
            insert_stage: Stages::One(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsraeSection {
    pub sigma_noise: f64,
    pub downscale: usize,
    pub target_stage: usize,
    pub tie_weights: bool,
    pub heads: usize,
}

impl Default for SsraeSection {
    fn default() -> Self {
        let s = SsraeConfig::default();
        Self {
            sigma_noise: s.degrade.sigma_noise,
            downscale: s.degrade.downscale,
            target_stage: s.target_stage,
            tie_weights: s.tie_weights,
            heads: s.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    pub lambda_l1: f64,
    pub lambda_cos: f64,
    pub lambda_grad: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lambda_dice: 1.0,
            lambda_ce: 1.0,
            lambda_l1: 1.0,
            lambda_cos: 0.5,
            lambda_grad: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub warmup: usize,
    pub ramp: usize,
    pub w_max: f64,
    pub w_min: f64,
    pub ema_beta: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            warmup: 10,
            ramp: 10,
            w_max: 1.0,
            w_min: 0.1,
            ema_beta: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub eval_every: usize,
    pub precision: Precision,
    /// Cross-validation folds over train+val; 1 keeps the fixed split.
    pub folds: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            eval_every: 10,
            precision: Precision::F32,
            folds: 1,
        }
    }
}

/// Which optional branches are active. Each ablation row is one setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// MSFM inside the main encoder.
    pub msfm_main: bool,
    pub ssrae: bool,
    /// MSFM inside the reconstruction encoder.
    pub msfm_recon: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const BASE: Self = Self::new(false, false, false);
    pub const FULL: Self = Self::new(true, true, true);

    pub const fn new(msfm_main: bool, ssrae: bool, msfm_recon: bool) -> Self {
        Self {
            msfm_main,
            ssrae,
            msfm_recon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Folder with `train/` and `val/` sub-folders; overrides `synthetic`.
    pub dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Side length images are resized to when loading a folder.
    pub size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            synthetic: SyntheticSpec::default(),
            size: 64,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn msfm_template(&self) -> MsfmConfig {
        MsfmConfig {
            variant: self.msfm.variant,
            bands: self.msfm.bands,
            channels: self.encoder.base_channels,
            kernel_scales: self.msfm.kernel_scales.clone(),
            residual: self.msfm.residual,
            cbam: self.msfm.cbam,
            cbam_reduction: self.msfm.cbam_reduction,
        }
    }

    /// Main encoder configuration with the ablation flags applied.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.encoder.in_channels,
            base_channels: self.encoder.base_channels,
            depths: self.encoder.depths.clone(),
            state_dim: self.encoder.state_dim,
            num_classes: self.encoder.num_classes,
            msfm: self.ablation.msfm_main.then(|| self.msfm_template()),
            msfm_stages: self.msfm.insert_stage.to_vec(),
        }
    }

    pub fn ssrae_config(&self) -> SsraeConfig {
        SsraeConfig {
            enabled: self.ablation.ssrae,
            degrade: DegradeConfig {
                downscale: self.ssrae.downscale,
                sigma_noise: self.ssrae.sigma_noise,
            },
            target_stage: self.ssrae.target_stage,
            msfm: self.ablation.msfm_recon,
            tie_weights: self.ssrae.tie_weights,
            heads: self.ssrae.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.encoder_config().validate()?;
        self.msfm_template().validate()?;
        if self.optim.batch == 0 || !(self.optim.lr > 0.0) {
            return bad(format!("optim.batch must be >= 1 and optim.lr > 0, got {} and {}", self.optim.batch, self.optim.lr));
        }
        if self.train.epochs == 0 || self.train.eval_every == 0 || self.train.folds == 0 {
            return bad("train.epochs, train.eval_every and train.folds must be >= 1".into());
        }
        if self.ssrae.sigma_noise < 0.0 {
            return bad(format!("ssrae.sigma_noise {} is negative", self.ssrae.sigma_noise));
        }
        if self.encoder.num_classes != self.data.synthetic.num_classes && self.data.dir.is_none() {
            return bad(format!(
                "encoder.num_classes {} differs from data.synthetic.num_classes {}",
                self.encoder.num_classes, self.data.synthetic.num_classes
            ));
        }
        farmamba_core::losses::LossSchedule::new(
            self.schedule.warmup,
            self.schedule.ramp,
            self.schedule.w_max,
            self.schedule.w_min,
            self.schedule.ema_beta,
            self.train.epochs,
        )?;
        Ok(())
    }
}

mod variant_serde {
    use farmamba_core::msfm::Variant;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Variant, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Variant, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}
