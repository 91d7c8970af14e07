//! Parameterised building blocks and the glue between a [`ParamTree`] and a
//! [`Graph`].
//!
//! Layers only store their dotted name prefix and hyperparameters. `init`
//! writes fresh tensors into a tree; `forward` looks the tensors up in a
//! [`Binding`] (the tree placed on a graph).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dSpec, Gradients, Graph, Var};
use crate::error::{Result, TensorError};
use crate::{Float, ParamTree, Tensor};

/// Parameters of a tree placed on a graph.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Places every tensor as a trainable leaf.
    pub fn trainable<T: Float>(g: &mut Graph<T>, tree: &ParamTree<T>) -> Self {
        Self {
            vars: tree.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone()))).collect(),
        }
    }

    /// Places every tensor as a constant (no gradients).
    pub fn frozen<T: Float>(g: &mut Graph<T>, tree: &ParamTree<T>) -> Self {
        Self {
            vars: tree
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }

    /// Binds already-placed nodes by name.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Gradient tree aligned with `tree`; parameters the loss did not reach get
    /// zeros.
    pub fn grads<T: Float>(&self, grads: &Gradients<T>, tree: &ParamTree<T>) -> ParamTree<T> {
        let mut out = ParamTree::new();
        for (name, t) in tree.iter() {
            let g = self
                .vars
                .get(name)
                .and_then(|&v| grads.get(v))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            out.set(name.clone(), g);
        }
        out
    }
}

/// Seeded initializer. Each parameter draws from its own stream derived from
/// the run seed and the parameter name, so adding a module never perturbs the
/// initial values of the others.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(fnv1a(self.seed, name))
    }

    pub fn normal<T: Float>(&self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::randn(shape.to_vec(), std, &mut self.rng(name))
    }

    pub fn uniform<T: Float>(&self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::uniform(shape.to_vec(), lo, hi, &mut self.rng(name))
    }
}

fn fnv1a(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// How a weight tensor starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zeros,
    /// Identity map (square linear / centre-tap conv).
    Identity,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
    pub init: WeightInit,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            bias: true,
            init: WeightInit::Scaled(1.0),
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    pub fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        let shape = [self.d_in, self.d_out];
        let w = match self.init {
            WeightInit::Scaled(gain) => init.normal(&self.w(), &shape, gain / (self.d_in as f64).sqrt()),
            WeightInit::Zeros => Tensor::zeros(shape.to_vec()),
            WeightInit::Identity => {
                let mut t = Tensor::zeros(shape.to_vec());
                for i in 0..self.d_in.min(self.d_out) {
                    t.set(&[i, i], T::one());
                }
                t
            }
        };
        tree.insert(self.w(), w)?;
        if self.bias {
            tree.insert(self.b(), Tensor::zeros(vec![self.d_out]))?;
        }
        Ok(())
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let b = if self.bias { Some(p.get(&self.b())?) } else { None };
        g.linear(x, p.get(&self.w())?, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub bias: bool,
    pub init: WeightInit,
}

impl Conv2d {
    /// Stride-1 "same" convolution.
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            k,
            groups: 1,
            bias: true,
            init: WeightInit::Scaled(1.0),
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, k: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(name, channels, channels, k)
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    pub fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>, init: &Init) -> Result<()> {
        let cg = self.c_in / self.groups;
        let shape = [self.c_out, cg, self.k, self.k];
        let w = match self.init {
            WeightInit::Scaled(gain) => {
                init.normal(&self.w(), &shape, gain / ((cg * self.k * self.k) as f64).sqrt())
            }
            WeightInit::Zeros => Tensor::zeros(shape.to_vec()),
            WeightInit::Identity => identity_kernel(self.c_out, cg, self.k, self.groups),
        };
        tree.insert(self.w(), w)?;
        if self.bias {
            tree.insert(self.b(), Tensor::zeros(vec![self.c_out]))?;
        }
        Ok(())
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let b = if self.bias { Some(p.get(&self.b())?) } else { None };
        let spec = Conv2dSpec {
            stride: 1,
            padding: self.k / 2,
            groups: self.groups,
        };
        g.conv2d(x, p.get(&self.w())?, b, spec)
    }
}

/// Centre-tap kernel mapping channel `i` to output `i`.
pub fn identity_kernel<T: Float>(c_out: usize, cg: usize, k: usize, groups: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![c_out, cg, k, k]);
    let og = c_out / groups;
    for o in 0..c_out {
        let within = if groups == 1 { o } else { o % og };
        if within < cg {
            t.set(&[o, within, k / 2, k / 2], T::one());
        }
    }
    t
}

/// Layer norm over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub d: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        Self { name: name.into(), d }
    }

    pub fn init_params<T: Float>(&self, tree: &mut ParamTree<T>) -> Result<()> {
        tree.insert(format!("{}.gamma", self.name), Tensor::ones(vec![self.d]))?;
        tree.insert(format!("{}.beta", self.name), Tensor::zeros(vec![self.d]))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{}.gamma", self.name))?;
        let beta = p.get(&format!("{}.beta", self.name))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Layer norm applied to the channel axis of an NCHW tensor.
pub fn channel_norm<T: Float>(g: &mut Graph<T>, ln: &LayerNorm, p: &Binding, x: Var) -> Result<Var> {
    let nhwc = g.permute(x, &[0, 2, 3, 1])?;
    let y = ln.forward(g, p, nhwc)?;
    g.permute(y, &[0, 3, 1, 2])
}

/// Joins a prefix and a child name with a dot.
pub fn join(prefix: &str, child: &str) -> String {
    if prefix.is_empty() {
        child.to_string()
    } else {
        format!("{prefix}.{child}")
    }
}
