//! Multi-scale frequency transform module.
//!
//! Three interchangeable variants project a feature map to a frequency
//! representation, process the bands separately and fuse the result back into
//! the spatial stream:
//!
//! * DWT: Haar sub-bands, CBAM on each, multi-kernel enhancement of the three
//!   detail bands, inverse DWT.
//! * FFT: centered spectrum split by ring masks, per-band inverse FFT and a
//!   band-specific convolution.
//! * DCT: as FFT with wedge masks on DCT-II coefficients.
//!
//! Every variant ends in a zero-initialized 1×1 fusion convolution added to the
//! input, so a freshly inserted module is an exact identity.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::freq::{self, MaskKind, Maskable};
use crate::layers::{join, Binding, Conv2d, Init, Linear, WeightInit};
use crate::{Float, ParamTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Dwt,
    Fft,
    Dct,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dwt, Variant::Fft, Variant::Dct];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dwt => "dwt",
            Variant::Fft => "fft",
            Variant::Dct => "dct",
        })
    }
}

impl FromStr for Variant {
    type Err = crate::TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dwt" => Ok(Variant::Dwt),
            "fft" => Ok(Variant::Fft),
            "dct" => Ok(Variant::Dct),
            other => Err(invalid("msfm variant", format!("`{other}` (expected dwt, fft or dct)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsfmConfig {
    pub variant: Variant,
    /// Number of FFT/DCT bands; ignored by the DWT variant.
    pub bands: usize,
    pub channels: usize,
    /// Odd kernel sizes. FFT/DCT use one per band (lowest band first); DWT
    /// sums one convolution per entry over the detail bands.
    pub kernel_scales: Vec<usize>,
    pub residual: bool,
    /// CBAM gating on the DWT sub-bands.
    pub cbam: bool,
    pub cbam_reduction: usize,
}

impl MsfmConfig {
    pub fn new(variant: Variant, channels: usize) -> Self {
        Self {
            variant,
            bands: 3,
            channels,
            kernel_scales: vec![1, 3, 5],
            residual: true,
            cbam: true,
            cbam_reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "MsfmConfig";
        if self.bands == 0 {
            return Err(invalid(op, "bands must be at least 1"));
        }
        if self.kernel_scales.is_empty() || self.kernel_scales.iter().any(|k| k % 2 == 0) {
            return Err(invalid(op, format!("kernel_scales {:?} must be nonempty and odd", self.kernel_scales)));
        }
        if self.variant != Variant::Dwt && self.kernel_scales.len() != self.bands {
            return Err(invalid(
                op,
                format!("{} bands need {} kernel scales, got {:?}", self.bands, self.bands, self.kernel_scales),
            ));
        }
        if self.variant == Variant::Dwt && self.cbam {
            CbamParams::new("", self.channels, self.cbam_reduction)?;
        }
        Ok(())
    }
}

/// Channel-then-spatial attention gate.
#[derive(Clone, Debug)]
pub struct CbamParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

pub const CBAM_SPATIAL_KERNEL: usize = 7;

impl CbamParams {
    pub fn new(prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction || channels % reduction != 0 {
            return Err(invalid(
                "cbam",
                format!("{channels} channels not divisible by reduction ratio {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(join(prefix, "fc1"), channels, hidden),
            fc2: Linear::new(join(prefix, "fc2"), hidden, channels),
            spatial: Conv2d::new(join(prefix, "spatial"), 2, 1, CBAM_SPATIAL_KERNEL),
        })
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        self.fc1.init_params(tree, init)?;
        self.fc2.init_params(tree, init)?;
        self.spatial.init_params(tree, init)
    }
}

/// `x · σ(MLP(avg) + MLP(max)) · σ(conv7([mean_c; max_c]))`, where the spatial
/// descriptor is taken from the channel-gated map.
pub fn cbam<T: Float>(g: &mut Graph<T>, c: &CbamParams, p: &Binding, x: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(shape_err("cbam", format!("expected [B,C,H,W], got {xs:?}")));
    }
    let (b, ch) = (xs[0], xs[1]);
    let flat = g.reshape(x, &[b, ch, xs[2] * xs[3]])?;
    let avg = g.mean_axis(flat, 2)?;
    let avg = g.reshape(avg, &[b, ch])?;
    let mx = g.max_axis(flat, 2)?;
    let mx = g.reshape(mx, &[b, ch])?;
    let mut logits = None;
    for d in [avg, mx] {
        let h = c.fc1.forward(g, p, d)?;
        let h = g.relu(h);
        let o = c.fc2.forward(g, p, h)?;
        logits = Some(match logits {
            None => o,
            Some(acc) => g.add(acc, o)?,
        });
    }
    let gate = g.sigmoid(logits.expect("two paths"));
    let gate = g.reshape(gate, &[b, ch, 1, 1])?;
    let gate = g.broadcast_to(gate, &xs)?;
    let xc = g.mul(x, gate)?;

    let mean_c = g.mean_axis(xc, 1)?;
    let max_c = g.max_axis(xc, 1)?;
    let desc = g.concat(&[mean_c, max_c], 1)?;
    let s = c.spatial.forward(g, p, desc)?;
    let s = g.sigmoid(s);
    let s = g.broadcast_to(s, &xs)?;
    g.mul(xc, s)
}

/// An MSFM instance: configuration plus its parameter-name prefix.
#[derive(Clone, Debug)]
pub struct Msfm {
    pub cfg: MsfmConfig,
    pub prefix: String,
}

const SUBBANDS: [&str; 4] = ["ll", "lh", "hl", "hh"];

impl Msfm {
    pub fn new(prefix: impl Into<String>, cfg: MsfmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, child: &str) -> String {
        join(&self.prefix, child)
    }

    pub fn cbam_params(&self, band: &str) -> Result<CbamParams> {
        CbamParams::new(&self.name(&format!("cbam_{band}")), self.cfg.channels, self.cfg.cbam_reduction)
    }

    /// Multi-kernel enhancement convolutions over the concatenated detail
    /// bands (DWT variant).
    pub fn detail_convs(&self) -> Vec<Conv2d> {
        let c3 = 3 * self.cfg.channels;
        let gain = 1.0 / (self.cfg.kernel_scales.len() as f64).sqrt();
        self.cfg
            .kernel_scales
            .iter()
            .map(|&k| {
                Conv2d::new(self.name(&format!("detail_k{k}")), c3, c3, k)
                    .no_bias()
                    .with_init(WeightInit::Scaled(gain))
            })
            .collect()
    }

    /// 1×1 projection of the enhanced detail tensor back to three sub-band slots.
    pub fn detail_proj(&self) -> Conv2d {
        let c3 = 3 * self.cfg.channels;
        Conv2d::new(self.name("detail_proj"), c3, c3, 1)
    }

    /// Per-band convolutions (FFT/DCT variants), lowest band first.
    pub fn band_convs(&self) -> Vec<Conv2d> {
        let c = self.cfg.channels;
        self.cfg
            .kernel_scales
            .iter()
            .enumerate()
            .map(|(b, &k)| Conv2d::new(self.name(&format!("band{b}")), c, c, k).no_bias())
            .collect()
    }

    pub fn fusion(&self) -> Conv2d {
        let c = self.cfg.channels;
        Conv2d::new(self.name("fuse"), c, c, 1).with_init(WeightInit::Zeros)
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        match self.cfg.variant {
            Variant::Dwt => {
                if self.cfg.cbam {
                    for band in SUBBANDS {
                        self.cbam_params(band)?.init_params(tree, init)?;
                    }
                }
                for conv in self.detail_convs() {
                    conv.init_params(tree, init)?;
                }
                self.detail_proj().init_params(tree, init)?;
            }
            Variant::Fft | Variant::Dct => {
                for conv in self.band_convs() {
                    conv.init_params(tree, init)?;
                }
            }
        }
        self.fusion().init_params(tree, init)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1] != self.cfg.channels {
            return Err(shape_err(
                "msfm",
                format!("expected [B,{},H,W], got {xs:?}", self.cfg.channels),
            ));
        }
        match self.cfg.variant {
            Variant::Dwt => msfm_dwt(g, self, p, x),
            Variant::Fft => msfm_fft(g, self, p, x),
            Variant::Dct => msfm_dct(g, self, p, x),
        }
    }

    fn finish<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var, y: Var) -> Result<Var> {
        let f = self.fusion().forward(g, p, y)?;
        if self.cfg.residual {
            g.add(x, f)
        } else {
            Ok(f)
        }
    }
}

/// DWT variant. Requires even spatial extents.
pub fn msfm_dwt<T: Float>(g: &mut Graph<T>, m: &Msfm, p: &Binding, x: Var) -> Result<Var> {
    let s = freq::dwt2(g, x)?;
    let mut bands = [s.ll, s.lh, s.hl, s.hh];
    if m.cfg.cbam {
        for (band, v) in SUBBANDS.iter().zip(bands.iter_mut()) {
            *v = cbam(g, &m.cbam_params(band)?, p, *v)?;
        }
    }
    let detail = g.concat(&bands[1..], 1)?;
    let mut enhanced = None;
    for conv in m.detail_convs() {
        let y = conv.forward(g, p, detail)?;
        enhanced = Some(match enhanced {
            None => y,
            Some(acc) => g.add(acc, y)?,
        });
    }
    let proj = m.detail_proj().forward(g, p, enhanced.expect("nonempty kernel_scales"))?;
    let c = m.cfg.channels;
    let parts = g.split(proj, 1, &[c, c, c])?;
    let y = freq::idwt2(
        g,
        &freq::SubbandSet {
            ll: bands[0],
            lh: parts[0],
            hl: parts[1],
            hh: parts[2],
        },
    )?;
    m.finish(g, p, x, y)
}

/// Splits `x` into `k` spatial maps, one per ring band of its centered
/// spectrum. The maps sum to `x`. Extents are zero-padded to powers of two
/// internally and cropped back.
pub fn fft_bands<T: Float>(g: &mut Graph<T>, x: Var, k: usize) -> Result<Vec<Var>> {
    let xs = g.shape(x).to_vec();
    let r = xs.len();
    if r < 2 {
        return Err(shape_err("fft_bands", format!("rank {r}")));
    }
    let (h, w) = (xs[r - 2], xs[r - 1]);
    let (ph, pw) = (h.next_power_of_two().max(2), w.next_power_of_two().max(2));
    let padded = g.pad_axis(x, r - 2, 0, ph - h)?;
    let padded = g.pad_axis(padded, r - 1, 0, pw - w)?;
    let spec = freq::fft2(g, padded)?;
    let centered = freq::fftshift(g, &spec)?;
    let masks = freq::make_band_masks(MaskKind::Ring, ph, pw, k)?;
    let mut out = Vec::with_capacity(k);
    for b in 0..k {
        let band = centered.apply_mask(g, &masks.mask(b))?;
        let y = freq::ifft2(g, &band)?;
        let y = g.narrow(y, r - 2, 0, h)?;
        out.push(g.narrow(y, r - 1, 0, w)?);
    }
    Ok(out)
}

/// Splits `x` into `k` spatial maps, one per wedge band of its DCT.
pub fn dct_bands<T: Float>(g: &mut Graph<T>, x: Var, k: usize) -> Result<Vec<Var>> {
    let xs = g.shape(x).to_vec();
    let r = xs.len();
    if r < 2 {
        return Err(shape_err("dct_bands", format!("rank {r}")));
    }
    let spec = freq::dct2(g, x)?;
    let masks = freq::make_band_masks(MaskKind::Wedge, xs[r - 2], xs[r - 1], k)?;
    (0..k)
        .map(|b| {
            let band = spec.apply_mask(g, &masks.mask(b))?;
            freq::idct2(g, &band)
        })
        .collect()
}

fn banded<T: Float>(g: &mut Graph<T>, m: &Msfm, p: &Binding, x: Var, bands: Vec<Var>) -> Result<Var> {
    let mut acc = None;
    for (band, conv) in bands.into_iter().zip(m.band_convs()) {
        let y = conv.forward(g, p, band)?;
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y)?,
        });
    }
    m.finish(g, p, x, acc.expect("at least one band"))
}

/// FFT variant.
pub fn msfm_fft<T: Float>(g: &mut Graph<T>, m: &Msfm, p: &Binding, x: Var) -> Result<Var> {
    let bands = fft_bands(g, x, m.cfg.bands)?;
    banded(g, m, p, x, bands)
}

/// DCT variant.
pub fn msfm_dct<T: Float>(g: &mut Graph<T>, m: &Msfm, p: &Binding, x: Var) -> Result<Var> {
    let bands = dct_bands(g, x, m.cfg.bands)?;
    banded(g, m, p, x, bands)
}
