//! Selective-scan encoder and U-shaped decoder.
//!
//! Layout conventions: stage features handed to callers are NCHW; inside a
//! stage the blocks work on NHWC so projections and layer norms act on the
//! last axis.

use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::layers::{join, Binding, Conv2d, Init, LayerNorm, Linear, WeightInit};
use crate::msfm::{Msfm, MsfmConfig};
use crate::{Float, ParamTree, Tensor};

pub const PATCH: usize = 4;
pub const MERGE: usize = 2;
pub const EXPAND: usize = 2;
pub const MLP_RATIO: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depths: Vec<usize>,
    pub state_dim: usize,
    pub num_classes: usize,
    /// Template for inserted MSFM modules; `channels` is set per stage.
    pub msfm: Option<MsfmConfig>,
    /// 1-based stages followed by an MSFM.
    pub msfm_stages: Vec<usize>,
}

impl EncoderConfig {
    pub fn new(base_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            base_channels,
            depths: vec![2, 2, 2, 2],
            state_dim: 8,
            num_classes,
            msfm: None,
            msfm_stages: vec![1],
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Channels of 1-based stage `s`.
    pub fn channels(&self, s: usize) -> usize {
        self.base_channels << (s - 1)
    }

    pub fn stem_channels(&self) -> usize {
        self.base_channels / 2
    }

    /// Total spatial reduction at the last stage.
    pub fn reduction(&self) -> usize {
        PATCH * MERGE.pow(self.stages().saturating_sub(1) as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let op = "EncoderConfig";
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(invalid(op, format!("base_channels {} must be even and >= 2", self.base_channels)));
        }
        if self.depths.is_empty() {
            return Err(invalid(op, "depths must list at least one stage"));
        }
        if self.state_dim == 0 || self.num_classes < 2 || self.in_channels == 0 {
            return Err(invalid(op, "state_dim, in_channels must be positive and num_classes >= 2"));
        }
        if let Some(m) = &self.msfm {
            for &s in &self.msfm_stages {
                if s == 0 || s > self.stages() {
                    return Err(invalid(op, format!("msfm stage {s} outside 1..={}", self.stages())));
                }
                MsfmConfig {
                    channels: self.channels(s),
                    ..m.clone()
                }
                .validate()?;
            }
        }
        Ok(())
    }
}

// ----- selective scan -------------------------------------------------------------

struct ScanDims {
    b: usize,
    l: usize,
    e: usize,
    n: usize,
}

/// Runs the recurrence for one `(batch, channel)` pair. Every state lands in
/// `hs` (`[L, N]`); outputs go to `y` when given.
#[allow(clippy::too_many_arguments)]
fn scan_channel<T: Float>(
    dims: &ScanDims,
    bi: usize,
    ch: usize,
    u: &[T],
    delta: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    d: &[T],
    hs: &mut [T],
    y: Option<&mut [T]>,
) {
    let ScanDims { l, e, n, .. } = *dims;
    let mut y = y;
    for t in 0..l {
        let ix = (bi * l + t) * e + ch;
        let (dt, ut) = (delta[ix], u[ix]);
        let row = (bi * l + t) * n;
        let mut acc = T::zero();
        for s in 0..n {
            let prev = if t == 0 { T::zero() } else { hs[(t - 1) * n + s] };
            let h = (dt * a[ch * n + s]).exp() * prev + dt * bm[row + s] * ut;
            hs[t * n + s] = h;
            acc += cm[row + s] * h;
        }
        if let Some(y) = y.as_deref_mut() {
            y[ix] = acc + d[ch] * ut;
        }
    }
}

/// Fused selective scan with a hand-written backward pass.
///
/// Shapes: `u, delta: [B,L,E]`, `a: [E,N]`, `b, c: [B,L,N]`, `d: [E]`.
/// Per channel and state: `h_t = exp(Δ_t a) h_{t-1} + Δ_t b_t u_t`, `h_0 = 0`,
/// `y_t = c_t · h_t + d u_t`.
pub fn selective_scan<T: Float>(
    g: &mut Graph<T>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
) -> Result<Var> {
    let us = g.shape(u).to_vec();
    if us.len() != 3 {
        return Err(shape_err("selective_scan", format!("u must be [B,L,E], got {us:?}")));
    }
    let (bs, l, e) = (us[0], us[1], us[2]);
    let n = g.shape(a).get(1).copied().unwrap_or(0);
    let checks: [(&str, Var, Vec<usize>); 5] = [
        ("delta", delta, us.clone()),
        ("a", a, vec![e, n]),
        ("b", b, vec![bs, l, n]),
        ("c", c, vec![bs, l, n]),
        ("d", d, vec![e]),
    ];
    for (name, v, want) in checks {
        if g.shape(v) != want.as_slice() || n == 0 {
            return Err(shape_err(
                "selective_scan",
                format!("{name} has shape {:?}, expected {want:?}", g.shape(v)),
            ));
        }
    }
    let dims = ScanDims { b: bs, l, e, n };
    let mut y = vec![T::zero(); bs * l * e];
    let mut hs = vec![T::zero(); l * n];
    {
        let (uv, dv, av, bv, cv, ddv) = (
            g.value(u).data(),
            g.value(delta).data(),
            g.value(a).data(),
            g.value(b).data(),
            g.value(c).data(),
            g.value(d).data(),
        );
        for bi in 0..bs {
            for ch in 0..e {
                scan_channel(&dims, bi, ch, uv, dv, av, bv, cv, ddv, &mut hs, Some(&mut y));
            }
        }
    }
    Ok(g.push(
        Tensor::new(us.clone(), y)?,
        &[u, delta, a, b, c, d],
        Box::new(move |cx: &BackwardCtx<T>| {
            let ScanDims { b: bs, l, e, n } = dims;
            let [uv, dv, av, bv, cv, ddv] = [0, 1, 2, 3, 4, 5].map(|i| cx.inputs[i].data());
            let gy = cx.grad.data();
            let mut gu = vec![T::zero(); uv.len()];
            let mut gdelta = vec![T::zero(); dv.len()];
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            let mut gc = vec![T::zero(); cv.len()];
            let mut gd = vec![T::zero(); ddv.len()];
            let mut hs = vec![T::zero(); l * n];
            let mut gh = vec![T::zero(); n];
            for bi in 0..bs {
                for ch in 0..e {
                    scan_channel(&dims, bi, ch, uv, dv, av, bv, cv, ddv, &mut hs, None);
                    gh.iter_mut().for_each(|v| *v = T::zero());
                    for t in (0..l).rev() {
                        let ix = (bi * l + t) * e + ch;
                        let row = (bi * l + t) * n;
                        let (dt, ut, gyt) = (dv[ix], uv[ix], gy[ix]);
                        gd[ch] += gyt * ut;
                        let mut gut = gyt * ddv[ch];
                        let mut gdt = T::zero();
                        for s in 0..n {
                            let h = hs[t * n + s];
                            gc[row + s] += gyt * h;
                            let ghs = gh[s] + gyt * cv[row + s];
                            let prev = if t == 0 { T::zero() } else { hs[(t - 1) * n + s] };
                            let av_s = av[ch * n + s];
                            let da = (dt * av_s).exp();
                            let bu = bv[row + s] * ut;
                            gdt += ghs * (av_s * da * prev + bu);
                            ga[ch * n + s] += ghs * dt * da * prev;
                            gb[row + s] += ghs * dt * ut;
                            gut += ghs * dt * bv[row + s];
                            gh[s] = ghs * da;
                        }
                        gu[ix] += gut;
                        gdelta[ix] += gdt;
                    }
                }
            }
            let shape = |i: usize| cx.inputs[i].shape().to_vec();
            vec![
                Some(Tensor::new(shape(0), gu).expect("shape")),
                Some(Tensor::new(shape(1), gdelta).expect("shape")),
                Some(Tensor::new(shape(2), ga).expect("shape")),
                Some(Tensor::new(shape(3), gb).expect("shape")),
                Some(Tensor::new(shape(4), gc).expect("shape")),
                Some(Tensor::new(shape(5), gd).expect("shape")),
            ]
        }),
    ))
}

/// Parameters of one scan direction: input-dependent `Δ, B, C` projections,
/// `A = -exp(A_log)` and the skip `D`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub prefix: String,
    pub inner: usize,
    pub state: usize,
    pub rank: usize,
}

impl SsmParams {
    pub fn new(prefix: impl Into<String>, inner: usize, state: usize) -> Self {
        Self {
            prefix: prefix.into(),
            inner,
            state,
            rank: inner.div_ceil(16).max(1),
        }
    }

    fn x_proj(&self) -> Linear {
        Linear::new(join(&self.prefix, "x_proj"), self.inner, self.rank + 2 * self.state).no_bias()
    }

    fn dt_proj(&self) -> Linear {
        Linear::new(join(&self.prefix, "dt_proj"), self.rank, self.inner)
    }

    pub fn a_log(&self) -> String {
        join(&self.prefix, "A_log")
    }

    pub fn d(&self) -> String {
        join(&self.prefix, "D")
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        self.x_proj().init_params(tree, init)?;
        let dt = self.dt_proj();
        tree.insert(dt.w(), init.normal(&dt.w(), &[self.rank, self.inner], (self.rank as f64).powf(-0.5)))?;
        // Δ starts log-uniform in [1e-3, 1e-1]; the bias is its inverse softplus.
        let raw: Tensor<f64> = init.uniform(&dt.b(), &[self.inner], (1e-3f64).ln(), (1e-1f64).ln());
        let bias = raw.map(|v| {
            let dt = v.exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        tree.insert(dt.b(), bias.cast())?;
        let a: Vec<f64> = (0..self.inner)
            .flat_map(|_| (1..=self.state).map(|s| (s as f64).ln()))
            .collect();
        tree.insert(self.a_log(), Tensor::from_f64(vec![self.inner, self.state], &a)?)?;
        tree.insert(self.d(), Tensor::ones(vec![self.inner]))
    }

    /// Scans a `[B,L,E]` sequence.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, u: Var) -> Result<Var> {
        let proj = self.x_proj().forward(g, p, u)?;
        let last = g.shape(proj).len() - 1;
        let parts = g.split(proj, last, &[self.rank, self.state, self.state])?;
        let dt = self.dt_proj().forward(g, p, parts[0])?;
        let delta = g.softplus(dt);
        let a = g.exp(p.get(&self.a_log())?);
        let a = g.neg(a);
        selective_scan(g, u, delta, a, parts[1], parts[2], p.get(&self.d())?)
    }
}

// ----- four-direction scanning -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    RowMajor,
    RowMajorReversed,
    ColMajor,
    ColMajorReversed,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowMajor,
        Direction::RowMajorReversed,
        Direction::ColMajor,
        Direction::ColMajorReversed,
    ];

    fn reversed(self) -> bool {
        matches!(self, Direction::RowMajorReversed | Direction::ColMajorReversed)
    }

    fn column(self) -> bool {
        matches!(self, Direction::ColMajor | Direction::ColMajorReversed)
    }
}

/// `[B,H,W,E]` → `[B,H·W,E]` in the given scan order.
pub fn serialize<T: Float>(g: &mut Graph<T>, x: Var, dir: Direction) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err("serialize", format!("expected [B,H,W,E], got {s:?}")));
    }
    let src = if dir.column() { g.permute(x, &[0, 2, 1, 3])? } else { x };
    let seq = g.reshape(src, &[s[0], s[1] * s[2], s[3]])?;
    if dir.reversed() {
        g.flip(seq, 1)
    } else {
        Ok(seq)
    }
}

/// Inverse of [`serialize`] for an `h x w` grid.
pub fn deserialize<T: Float>(g: &mut Graph<T>, seq: Var, dir: Direction, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(seq).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err("deserialize", format!("{s:?} for a {h}x{w} grid")));
    }
    let seq = if dir.reversed() { g.flip(seq, 1)? } else { seq };
    if dir.column() {
        let t = g.reshape(seq, &[s[0], w, h, s[2]])?;
        g.permute(t, &[0, 2, 1, 3])
    } else {
        g.reshape(seq, &[s[0], h, w, s[2]])
    }
}

/// Sum over the four directions of scan-then-restore, `[B,H,W,E]` in and out.
pub fn ss2d_scan<T: Float>(g: &mut Graph<T>, dirs: &[SsmParams; 4], p: &Binding, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let mut acc = None;
    for (dir, ssm) in Direction::ALL.into_iter().zip(dirs) {
        let seq = serialize(g, x, dir)?;
        let y = ssm.forward(g, p, seq)?;
        let y = deserialize(g, y, dir, s[1], s[2])?;
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y)?,
        });
    }
    Ok(acc.expect("four directions"))
}

/// SS2D layer on NHWC features.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub prefix: String,
    pub channels: usize,
    pub state: usize,
}

impl Ss2d {
    pub fn new(prefix: impl Into<String>, channels: usize, state: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            state,
        }
    }

    fn inner(&self) -> usize {
        EXPAND * self.channels
    }

    fn in_proj(&self) -> Linear {
        Linear::new(join(&self.prefix, "in_proj"), self.channels, 2 * self.inner()).no_bias()
    }

    fn dwconv(&self) -> Conv2d {
        Conv2d::depthwise(join(&self.prefix, "dwconv"), self.inner(), 3)
    }

    pub fn directions(&self) -> [SsmParams; 4] {
        [0, 1, 2, 3].map(|k| SsmParams::new(join(&self.prefix, &format!("dir{k}")), self.inner(), self.state))
    }

    fn out_norm(&self) -> LayerNorm {
        LayerNorm::new(join(&self.prefix, "out_norm"), self.inner())
    }

    pub fn out_proj(&self) -> Linear {
        Linear::new(join(&self.prefix, "out_proj"), self.inner(), self.channels)
            .no_bias()
            .with_init(WeightInit::Scaled(0.5))
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        self.in_proj().init_params(tree, init)?;
        self.dwconv().init_params(tree, init)?;
        for d in self.directions() {
            d.init_params(tree, init)?;
        }
        self.out_norm().init_params(tree)?;
        self.out_proj().init_params(tree, init)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let e = self.inner();
        let xz = self.in_proj().forward(g, p, x)?;
        let parts = g.split(xz, 3, &[e, e])?;
        let xi = g.permute(parts[0], &[0, 3, 1, 2])?;
        let xi = self.dwconv().forward(g, p, xi)?;
        let xi = g.silu(xi);
        let u = g.permute(xi, &[0, 2, 3, 1])?;
        let y = ss2d_scan(g, &self.directions(), p, u)?;
        let y = self.out_norm().forward(g, p, y)?;
        let gate = g.silu(parts[1]);
        let y = g.mul(y, gate)?;
        self.out_proj().forward(g, p, y)
    }
}

/// `x + ss2d(ln(x))`, then `x + mlp(ln(x))`, on NHWC.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub prefix: String,
    pub channels: usize,
    pub state: usize,
}

impl VssBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, state: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            state,
        }
    }

    fn ln1(&self) -> LayerNorm {
        LayerNorm::new(join(&self.prefix, "ln1"), self.channels)
    }

    fn ln2(&self) -> LayerNorm {
        LayerNorm::new(join(&self.prefix, "ln2"), self.channels)
    }

    pub fn ss2d(&self) -> Ss2d {
        Ss2d::new(join(&self.prefix, "ss2d"), self.channels, self.state)
    }

    fn fc1(&self) -> Linear {
        Linear::new(join(&self.prefix, "mlp.fc1"), self.channels, MLP_RATIO * self.channels)
    }

    pub fn fc2(&self) -> Linear {
        Linear::new(join(&self.prefix, "mlp.fc2"), MLP_RATIO * self.channels, self.channels)
            .with_init(WeightInit::Scaled(0.5))
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        self.ln1().init_params(tree)?;
        self.ss2d().init_params(tree, init)?;
        self.ln2().init_params(tree)?;
        self.fc1().init_params(tree, init)?;
        self.fc2().init_params(tree, init)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.ln1().forward(g, p, x)?;
        let h = self.ss2d().forward(g, p, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2().forward(g, p, x)?;
        let h = self.fc1().forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.fc2().forward(g, p, h)?;
        g.add(x, h)
    }
}

/// `[B,H,W,C]` → `[B,H/f,W/f,f·f·C]`.
pub fn space_to_depth<T: Float>(g: &mut Graph<T>, x: Var, f: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] % f != 0 || s[2] % f != 0 {
        return Err(shape_err("space_to_depth", format!("{s:?} by factor {f}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let t = g.reshape(x, &[b, h / f, f, w / f, f, c])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[b, h / f, w / f, f * f * c])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Float>(g: &mut Graph<T>, x: Var, f: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[3] % (f * f) != 0 {
        return Err(shape_err("depth_to_space", format!("{s:?} by factor {f}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3] / (f * f));
    let t = g.reshape(x, &[b, h, w, f, f, c])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[b, h * f, w * f, c])
}

// ----- encoder / decoder -----------------------------------------------------------

/// Stem output at full resolution plus one NCHW feature per stage.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub stem: Var,
    pub stages: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(prefix: impl Into<String>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, child: &str) -> String {
        join(&self.prefix, child)
    }

    fn stem(&self) -> [Conv2d; 2] {
        let c = self.cfg.stem_channels();
        [
            Conv2d::new(self.name("stem.conv1"), self.cfg.in_channels, c, 3),
            Conv2d::new(self.name("stem.conv2"), c, c, 3),
        ]
    }

    fn embed(&self) -> (Linear, LayerNorm) {
        let c = self.cfg.base_channels;
        (
            Linear::new(self.name("embed.proj"), PATCH * PATCH * self.cfg.stem_channels(), c),
            LayerNorm::new(self.name("embed.norm"), c),
        )
    }

    /// Merge into 1-based stage `s` (s ≥ 2).
    fn merge(&self, s: usize) -> (LayerNorm, Linear) {
        let c = self.cfg.channels(s - 1);
        (
            LayerNorm::new(self.name(&format!("merge{s}.norm")), MERGE * MERGE * c),
            Linear::new(self.name(&format!("merge{s}.proj")), MERGE * MERGE * c, 2 * c).no_bias(),
        )
    }

    pub fn block(&self, s: usize, i: usize) -> VssBlock {
        VssBlock::new(self.name(&format!("stage{s}.block{i}")), self.cfg.channels(s), self.cfg.state_dim)
    }

    pub fn msfm(&self, s: usize) -> Option<Msfm> {
        let template = self.cfg.msfm.as_ref()?;
        if !self.cfg.msfm_stages.contains(&s) {
            return None;
        }
        let cfg = MsfmConfig {
            channels: self.cfg.channels(s),
            ..template.clone()
        };
        Some(Msfm::new(self.name(&format!("msfm{s}")), cfg).expect("validated with the encoder config"))
    }

    /// Initializes parameters for stages `1..=upto`.
    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init, upto: usize) -> Result<()> {
        for c in self.stem() {
            c.init_params(tree, init)?;
        }
        let (proj, norm) = self.embed();
        proj.init_params(tree, init)?;
        norm.init_params(tree)?;
        for s in 1..=upto.min(self.cfg.stages()) {
            if s > 1 {
                let (norm, proj) = self.merge(s);
                norm.init_params(tree)?;
                proj.init_params(tree, init)?;
            }
            for i in 0..self.cfg.depths[s - 1] {
                self.block(s, i).init_params(tree, init)?;
            }
            if let Some(m) = self.msfm(s) {
                m.init_params(tree, init)?;
            }
        }
        Ok(())
    }

    /// Encodes `[B,Cin,H,W]` through stages `1..=upto`.
    pub fn encode<T: Float>(&self, g: &mut Graph<T>, p: &Binding, image: Var, upto: usize) -> Result<EncoderOutput> {
        let s = g.shape(image).to_vec();
        let upto = upto.min(self.cfg.stages());
        let need = PATCH * MERGE.pow(upto.saturating_sub(1) as u32);
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] % need != 0 || s[3] % need != 0 {
            return Err(shape_err(
                "encode",
                format!("input {s:?} must be [B,{},H,W] with H, W divisible by {need}", self.cfg.in_channels),
            ));
        }
        let mut x = image;
        for conv in self.stem() {
            x = conv.forward(g, p, x)?;
            x = g.silu(x);
        }
        let stem = x;
        let nhwc = g.permute(stem, &[0, 2, 3, 1])?;
        let t = space_to_depth(g, nhwc, PATCH)?;
        let (proj, norm) = self.embed();
        let t = proj.forward(g, p, t)?;
        let mut x = norm.forward(g, p, t)?;
        let mut stages = Vec::with_capacity(upto);
        for st in 1..=upto {
            if st > 1 {
                let (norm, proj) = self.merge(st);
                let t = space_to_depth(g, x, MERGE)?;
                let t = norm.forward(g, p, t)?;
                x = proj.forward(g, p, t)?;
            }
            for i in 0..self.cfg.depths[st - 1] {
                x = self.block(st, i).forward(g, p, x)?;
            }
            let mut feat = g.permute(x, &[0, 3, 1, 2])?;
            if let Some(m) = self.msfm(st) {
                feat = m.forward(g, p, feat)?;
                x = g.permute(feat, &[0, 2, 3, 1])?;
            }
            stages.push(feat);
        }
        Ok(EncoderOutput { stem, stages })
    }

    pub fn param_count(&self) -> Result<usize> {
        let mut tree = ParamTree::<f32>::new();
        self.init_params(&mut tree, &Init::new(0), self.cfg.stages())?;
        Ok(tree.num_scalars())
    }
}

/// U-shaped convolutional decoder with skip connections.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Decoder {
    pub fn new(prefix: impl Into<String>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, child: &str) -> String {
        join(&self.prefix, child)
    }

    /// Two convs fusing the upsampled stage `s+1` path with the stage `s` skip.
    fn level(&self, s: usize) -> [Conv2d; 2] {
        let (cs, cin) = (self.cfg.channels(s), self.cfg.channels(s) + self.cfg.channels(s + 1));
        [
            Conv2d::new(self.name(&format!("up{s}.conv1")), cin, cs, 3),
            Conv2d::new(self.name(&format!("up{s}.conv2")), cs, cs, 3),
        ]
    }

    fn last(&self) -> (Conv2d, Conv2d) {
        let (c1, cs) = (self.cfg.channels(1), self.cfg.stem_channels());
        (
            Conv2d::new(self.name("full.conv"), c1 + cs, cs, 3),
            Conv2d::new(self.name("head"), cs, self.cfg.num_classes, 1),
        )
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        for s in (1..self.cfg.stages()).rev() {
            for c in self.level(s) {
                c.init_params(tree, init)?;
            }
        }
        let (conv, head) = self.last();
        conv.init_params(tree, init)?;
        head.init_params(tree, init)
    }

    /// Logits `[B, num_classes, H, W]`.
    pub fn decode<T: Float>(&self, g: &mut Graph<T>, p: &Binding, enc: &EncoderOutput) -> Result<Var> {
        let n = self.cfg.stages();
        if enc.stages.len() != n {
            return Err(shape_err(
                "decode",
                format!("expected {n} stage features, got {} (missing skip)", enc.stages.len()),
            ));
        }
        let mut x = enc.stages[n - 1];
        for s in (1..n).rev() {
            let up = g.upsample_nearest(x, MERGE)?;
            x = g.concat(&[up, enc.stages[s - 1]], 1)?;
            for c in self.level(s) {
                x = c.forward(g, p, x)?;
                x = g.silu(x);
            }
        }
        let up = g.upsample_nearest(x, PATCH)?;
        let x = g.concat(&[up, enc.stem], 1)?;
        let (conv, head) = self.last();
        let x = conv.forward(g, p, x)?;
        let x = g.silu(x);
        head.forward(g, p, x)
    }
}
