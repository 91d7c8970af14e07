//! Adam over a parameter tree.

use farmamba_core::{Float, ParamTree, Tensor};

use crate::{HarnessError, Result};

const M: &str = "__optim.m.";
const V: &str = "__optim.v.";
const T_KEY: &str = "__optim.t";

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: ParamTree<T>,
    v: ParamTree<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: ParamTree::new(),
            v: ParamTree::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamTree<T>, grads: &ParamTree<T>) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(HarnessError::Checkpoint(format!("gradient shape mismatch for {name}")));
            }
            if !self.m.contains(name) {
                self.m.set(name.clone(), Tensor::zeros(p.shape().to_vec()));
                self.v.set(name.clone(), Tensor::zeros(p.shape().to_vec()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.to_f64();
                let mn = b1 * mi.to_f64() + (1.0 - b1) * gi;
                let vn = b2 * vi.to_f64() + (1.0 - b2) * gi * gi;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                let upd = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *pi = T::from_f64(pi.to_f64() - upd);
            }
        }
        Ok(())
    }

    /// Moments and step count under reserved names.
    pub fn export(&self, out: &mut ParamTree<T>) {
        for (n, t) in self.m.iter() {
            out.set(format!("{M}{n}"), t.clone());
        }
        for (n, t) in self.v.iter() {
            out.set(format!("{V}{n}"), t.clone());
        }
        // split so that step counts beyond 2^24 survive a 32-bit payload
        let (hi, lo) = ((self.t >> 20) as f64, (self.t & 0xfffff) as f64);
        out.set(T_KEY, Tensor::from_f64(vec![2], &[hi, lo]).expect("2 values"));
    }

    pub fn import(&mut self, tree: &ParamTree<T>) -> Result<()> {
        self.m = ParamTree::new();
        self.v = ParamTree::new();
        for (n, t) in tree.iter() {
            if let Some(rest) = n.strip_prefix(M) {
                self.m.set(rest, t.clone());
            } else if let Some(rest) = n.strip_prefix(V) {
                self.v.set(rest, t.clone());
            }
        }
        let t = tree
            .get(T_KEY)
            .map_err(|_| HarnessError::Checkpoint(format!("missing {T_KEY}")))?
            .to_f64_vec();
        self.t = ((t[0] as u64) << 20) | t[1] as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = ParamTree::<f64>::new();
        p.set("w", Tensor::from_f64(vec![3], &[1.0, 1.0, 1.0]).unwrap());
        let mut g = ParamTree::<f64>::new();
        g.set("w", Tensor::from_f64(vec![3], &[2.0, -0.5, 0.0]).unwrap());
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamTree::<f64>::new();
        p.set("x", Tensor::from_f64(vec![2], &[3.0, -2.0]).unwrap());
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let mut g = ParamTree::new();
            g.set("x", p.get("x").unwrap().scale(2.0));
            adam.step(&mut p, &g).unwrap();
        }
        assert!(p.get("x").unwrap().max_abs() < 1e-3);
    }

    #[test]
    fn export_import_roundtrip() {
        let mut p = ParamTree::<f32>::new();
        p.set("a", Tensor::from_f64(vec![2], &[0.5, 0.25]).unwrap());
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let g = p.clone();
        adam.step(&mut p, &g).unwrap();
        adam.t = (1 << 30) + 7;
        let mut tree = ParamTree::new();
        adam.export(&mut tree);
        let mut back = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        back.import(&tree).unwrap();
        assert_eq!(back, adam);
    }
}
