#![allow(dead_code)]

use farmamba_core::autodiff::Graph;
use farmamba_core::layers::Binding;
use farmamba_core::oracle::{self, GradCheck};
use farmamba_core::{ParamTree, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-4;

/// Replaces every parameter with uniform noise in `[-scale, scale]`, so
/// zero-initialized layers do not hide gradients of their inputs.
pub fn randomize(tree: &ParamTree<f64>, seed: u64, scale: f64) -> ParamTree<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamTree::new();
    for (k, v) in tree.iter() {
        out.set(k.clone(), Tensor::uniform(v.shape().to_vec(), -scale, scale, &mut rng));
    }
    out
}

/// Gradient check over every parameter of `tree` plus `extra` inputs.
pub fn check_params<F>(tree: &ParamTree<f64>, extra: &[Tensor<f64>], max_elems: usize, f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &Binding, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = tree.names().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = tree.iter().map(|(_, v)| v.clone()).collect();
    inputs.extend_from_slice(extra);
    let n = names.len();
    oracle::gradcheck(&inputs, STEP, max_elems, |g, vars| {
        let p = Binding::from_vars(names.iter().cloned().zip(vars[..n].iter().copied()));
        f(g, &p, &vars[n..])
    })
    .expect("gradcheck evaluation")
}

pub fn assert_grad(name: &str, r: &GradCheck) {
    assert!(
        r.max_rel_err <= GRAD_TOL,
        "{name}: max rel err {:.3e} at {:?} over {} probes",
        r.max_rel_err,
        r.worst,
        r.checked
    );
}
