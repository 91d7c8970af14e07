//! Self-supervised reconstruction auxiliary branch: input degradation,
//! label-guided region attention and reconstruction of main-encoder features
//! from the degraded image.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::encoder::{depth_to_space, Encoder, EncoderConfig, PATCH};
use crate::error::{invalid, shape_err, Result};
use crate::layers::{join, Binding, Init, LayerNorm, Linear, WeightInit};
use crate::msfm::MsfmConfig;
use crate::{Float, ParamTree, Tensor};

/// Logit bias separating regions. Its softmax weight underflows to exactly 0
/// at both precisions.
pub const REGION_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct DegradeConfig {
    pub downscale: usize,
    pub sigma_noise: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            downscale: 4,
            sigma_noise: 0.01,
        }
    }
}

/// Mean over non-overlapping `f x f` blocks of a `[B,C,H,W]` tensor.
pub fn area_downscale<T: Float>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || f == 0 || s[2] % f != 0 || s[3] % f != 0 {
        return Err(shape_err("degrade", format!("{s:?} is not divisible by {f}")));
    }
    let (p, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / f, w / f);
    let inv = T::from_f64(1.0 / (f * f) as f64);
    let d = x.data();
    let mut out = vec![T::zero(); p * oh * ow];
    for pi in 0..p {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = T::zero();
                for a in 0..f {
                    for b in 0..f {
                        acc += d[pi * h * w + (i * f + a) * w + j * f + b];
                    }
                }
                out[pi * oh * ow + i * ow + j] = acc * inv;
            }
        }
    }
    Tensor::new(vec![s[0], s[1], oh, ow], out)
}

/// Depthwise `[1,2,1] ⊗ [1,2,1] / 16` blur with replicated borders.
pub fn binomial_blur<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (p, h, w) = (s[0] * s[1], s[2], s[3]);
    let k = [1.0, 2.0, 1.0].map(T::from_f64);
    let norm = T::from_f64(1.0 / 16.0);
    let d = x.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![T::zero(); d.len()];
    for pi in 0..p {
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for (a, ka) in k.iter().enumerate() {
                    for (b, kb) in k.iter().enumerate() {
                        let ii = clamp(i as isize + a as isize - 1, h);
                        let jj = clamp(j as isize + b as isize - 1, w);
                        acc += *ka * *kb * d[pi * h * w + ii * w + jj];
                    }
                }
                out[pi * h * w + i * w + j] = acc * norm;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Area downscale, blur, then additive `N(0, σ²)` noise from `rng`.
pub fn degrade<T: Float>(x: &Tensor<T>, cfg: &DegradeConfig, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if !(cfg.sigma_noise >= 0.0) {
        return Err(invalid("degrade", format!("sigma_noise {} must be >= 0", cfg.sigma_noise)));
    }
    let mut y = binomial_blur(&area_downscale(x, cfg.downscale)?);
    if cfg.sigma_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.sigma_noise).expect("finite sigma");
        for v in y.data_mut() {
            *v += T::from_f64(normal.sample(rng));
        }
    }
    Ok(y)
}

/// Region labels resized to one feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    /// `[B, h·w]` region id per token.
    pub labels: Vec<usize>,
}

impl RegionMask {
    /// Nearest (centre) sampling of `[B,H,W]` labels onto an `h x w` grid.
    pub fn from_labels(labels: &[usize], batch: usize, big_h: usize, big_w: usize, h: usize, w: usize) -> Result<Self> {
        if labels.len() != batch * big_h * big_w || h == 0 || w == 0 || h > big_h || w > big_w {
            return Err(shape_err(
                "RegionMask",
                format!("{} labels for [{batch},{big_h},{big_w}] resized to {h}x{w}", labels.len()),
            ));
        }
        let mut out = Vec::with_capacity(batch * h * w);
        for b in 0..batch {
            for i in 0..h {
                let si = (2 * i + 1) * big_h / (2 * h);
                for j in 0..w {
                    let sj = (2 * j + 1) * big_w / (2 * w);
                    out.push(labels[b * big_h * big_w + si * big_w + sj]);
                }
            }
        }
        Ok(Self {
            batch,
            h,
            w,
            labels: out,
        })
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[L, L]` bias for sample `b`: 0 within a region, [`REGION_BIAS`] across.
    pub fn bias<T: Float>(&self, b: usize) -> Tensor<T> {
        let l = self.len();
        let ids = &self.labels[b * l..(b + 1) * l];
        let big = T::from_f64(REGION_BIAS);
        let d = (0..l * l)
            .map(|k| if ids[k / l] == ids[k % l] { T::zero() } else { big })
            .collect();
        Tensor::new(vec![l, l], d).expect("square")
    }
}

/// Multi-head self-attention with a region bias on the logits.
#[derive(Clone, Debug)]
pub struct RegionAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
}

impl RegionAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid("RegionAttention", format!("{dim} channels over {heads} heads")));
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            heads,
        })
    }

    pub fn proj(&self, which: &str) -> Linear {
        let l = Linear::new(join(&self.prefix, which), self.dim, self.dim);
        if which == "out" {
            l.with_init(WeightInit::Zeros)
        } else {
            l
        }
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        for w in ["q", "k", "v", "out"] {
            self.proj(w).init_params(tree, init)?;
        }
        Ok(())
    }

    /// `feat: [B,L,D]` → (`[B,L,D]` output, `[B,heads,L,L]` attention weights).
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        feat: Var,
        mask: &RegionMask,
    ) -> Result<(Var, Var)> {
        let s = g.shape(feat).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(shape_err("region_attention", format!("expected [B,L,{}], got {s:?}", self.dim)));
        }
        let (b, l) = (s[0], s[1]);
        if mask.batch != b || mask.len() != l {
            return Err(shape_err(
                "region_attention",
                format!("mask covers [{}, {}] tokens, features [{b}, {l}]", mask.batch, mask.len()),
            ));
        }
        let (nh, dh) = (self.heads, self.dim / self.heads);
        let heads = |g: &mut Graph<T>, which: &str, perm: &[usize]| -> Result<Var> {
            let y = self.proj(which).forward(g, p, feat)?;
            let y = g.reshape(y, &[b, l, nh, dh])?;
            g.permute(y, perm)
        };
        let q = heads(g, "q", &[0, 2, 1, 3])?;
        let kt = heads(g, "k", &[0, 2, 3, 1])?;
        let v = heads(g, "v", &[0, 2, 1, 3])?;
        let logits = g.matmul(q, kt)?;
        let logits = g.mul_scalar(logits, 1.0 / (dh as f64).sqrt());
        let mut bias = Vec::with_capacity(b * nh * l * l);
        for bi in 0..b {
            let t = mask.bias::<T>(bi);
            for _ in 0..nh {
                bias.extend_from_slice(t.data());
            }
        }
        let bias = g.constant(Tensor::new(vec![b, nh, l, l], bias)?);
        let logits = g.add(logits, bias)?;
        let attn = g.softmax(logits, 3)?;
        let y = g.matmul(attn, v)?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, l, self.dim])?;
        Ok((self.proj("out").forward(g, p, y)?, attn))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsraeConfig {
    pub enabled: bool,
    pub degrade: DegradeConfig,
    /// 1-based main-encoder stage whose features are reconstructed.
    pub target_stage: usize,
    /// Whether the auxiliary encoder carries MSFM modules.
    pub msfm: bool,
    /// Reuse the main encoder's parameters instead of separate ones.
    pub tie_weights: bool,
    pub heads: usize,
}

impl Default for SsraeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            degrade: DegradeConfig::default(),
            target_stage: 1,
            msfm: true,
            tie_weights: false,
            heads: 2,
        }
    }
}

/// The auxiliary branch. `main` is the main encoder configuration.
#[derive(Clone, Debug)]
pub struct Ssrae {
    pub cfg: SsraeConfig,
    pub encoder: Encoder,
    pub attention: RegionAttention,
    pub prefix: String,
}

impl Ssrae {
    pub fn new(prefix: impl Into<String>, cfg: SsraeConfig, main: &Encoder) -> Result<Self> {
        Self::with_msfm(prefix, cfg, main, main.cfg.msfm.clone())
    }

    /// Like [`Ssrae::new`], with the MSFM template for the auxiliary encoder
    /// given explicitly, so the branch can carry MSFM when the main encoder
    /// does not. `cfg.msfm = false` still removes it.
    pub fn with_msfm(
        prefix: impl Into<String>,
        cfg: SsraeConfig,
        main: &Encoder,
        msfm: Option<MsfmConfig>,
    ) -> Result<Self> {
        let prefix = prefix.into();
        let s = cfg.target_stage;
        if s == 0 || s > main.cfg.stages() {
            return Err(invalid("ssrae", format!("target_stage {s} outside 1..={}", main.cfg.stages())));
        }
        if cfg.degrade.downscale == 0 {
            return Err(invalid("ssrae", "downscale must be positive"));
        }
        let mut enc_cfg: EncoderConfig = main.cfg.clone();
        enc_cfg.msfm = if cfg.msfm { msfm } else { None };
        if cfg.msfm && enc_cfg.msfm.is_none() {
            return Err(invalid("ssrae", "ssrae.msfm is set but no MSFM configuration was given"));
        }
        if cfg.tie_weights && enc_cfg.msfm.is_some() != main.cfg.msfm.is_some() {
            return Err(invalid("ssrae", "tied weights need the same MSFM layout in both encoders"));
        }
        let enc_prefix = if cfg.tie_weights {
            main.prefix.clone()
        } else {
            join(&prefix, "enc")
        };
        let dim = main.cfg.channels(s);
        Ok(Self {
            attention: RegionAttention::new(join(&prefix, "attn"), dim, cfg.heads)?,
            encoder: Encoder::new(enc_prefix, enc_cfg)?,
            cfg,
            prefix,
        })
    }

    fn norm(&self) -> LayerNorm {
        LayerNorm::new(join(&self.prefix, "attn_norm"), self.attention.dim)
    }

    fn head(&self) -> Linear {
        let f = self.cfg.degrade.downscale;
        let c = self.attention.dim;
        Linear::new(join(&self.prefix, "head"), c, c * f * f)
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        if !self.cfg.tie_weights {
            self.encoder.init_params(tree, init, self.cfg.target_stage)?;
        }
        self.norm().init_params(tree)?;
        self.attention.init_params(tree, init)?;
        self.head().init_params(tree, init)
    }

    /// Encodes the degraded image, applies region attention at the target
    /// stage and maps the result to the main target resolution (NCHW).
    pub fn reconstruct_features<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        degraded: Var,
        labels: &[usize],
        label_hw: (usize, usize),
    ) -> Result<Var> {
        let s = self.cfg.target_stage;
        let out = self.encoder.encode(g, p, degraded, s)?;
        let feat = *out.stages.last().expect("at least one stage");
        let fs = g.shape(feat).to_vec();
        let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let mask = RegionMask::from_labels(labels, b, label_hw.0, label_hw.1, h, w)?;
        let tokens = g.permute(feat, &[0, 2, 3, 1])?;
        let tokens = g.reshape(tokens, &[b, h * w, c])?;
        let normed = self.norm().forward(g, p, tokens)?;
        let (att, _) = self.attention.forward(g, p, normed, &mask)?;
        let tokens = g.add(tokens, att)?;
        let y = self.head().forward(g, p, tokens)?;
        let f = self.cfg.degrade.downscale;
        let y = g.reshape(y, &[b, h, w, c * f * f])?;
        let y = if f == 1 { y } else { depth_to_space(g, y, f)? };
        g.permute(y, &[0, 3, 1, 2])
    }

    /// Extent divisibility the full-resolution input must satisfy.
    pub fn input_multiple(&self) -> usize {
        self.cfg.degrade.downscale * PATCH * (1 << (self.cfg.target_stage - 1))
    }
}

/// Copies every main-encoder tensor onto the matching auxiliary name, so the
/// two branches start identical.
pub fn tie_weights<T: Float>(tree: &mut ParamTree<T>, main_prefix: &str, aux: &Ssrae) -> usize {
    let from = format!("{main_prefix}.");
    let to = format!("{}.", aux.encoder.prefix);
    if from == to {
        return 0;
    }
    let pairs: Vec<(String, Tensor<T>)> = tree
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&from).map(|rest| (format!("{to}{rest}"), v.clone())))
        .collect();
    let mut copied = 0;
    for (k, v) in pairs {
        if tree.contains(&k) {
            tree.set(k, v);
            copied += 1;
        }
    }
    copied
}
