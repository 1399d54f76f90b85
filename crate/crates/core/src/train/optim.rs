use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::{Real, Tensor};

/// Learning rate and weight decay for one parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Adam with per-parameter moments keyed by parameter path.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay weights directly (`θ ← θ − lr·wd·θ`) rather than adding `wd·θ`
    /// to the gradient.
    pub decoupled: bool,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, decoupled: bool) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            decoupled,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates one parameter tensor in place.
    fn update(&mut self, path: &str, p: &mut Param<T>, hyper: GroupHyper) {
        let n = p.value.numel();
        let m = self
            .m
            .entry(path.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let v = self
            .v
            .entry(path.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(hyper.lr);
        let wd = T::lit(hyper.weight_decay);
        let eps = T::lit(self.eps);
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..n {
            let mut g = grad[i];
            if !self.decoupled {
                g += wd * value[i];
            }
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            let mut delta = mhat / (vhat.sqrt() + eps);
            if self.decoupled {
                delta += wd * value[i];
            }
            value[i] -= lr * delta;
        }
    }

    /// One optimizer step over every trainable parameter; `hyper` maps a
    /// parameter path to its group settings.
    pub fn step(&mut self, model: &mut dyn Module<T>, hyper: &dyn Fn(&str) -> GroupHyper) {
        self.step += 1;
        model.visit_mut("", &mut |path, p| {
            if p.trainable {
                self.update(path, p, hyper(path));
            }
        });
    }

    /// Moments as `m.<path>` / `v.<path>` plus the step counter.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor<f32>>) {
        let mut out = BTreeMap::new();
        for (prefix, map) in [("m.", &self.m), ("v.", &self.v)] {
            for (k, v) in map {
                let data = v.iter().map(|x| x.as_f64() as f32).collect();
                out.insert(
                    format!("{prefix}{k}"),
                    Tensor::from_vec(&[v.len()], data).expect("flat"),
                );
            }
        }
        (self.step, out)
    }

    pub fn load_state(&mut self, step: u64, state: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, t) in state {
            let data = t.data().iter().map(|&x| T::lit(x as f64)).collect();
            if let Some(p) = k.strip_prefix("m.") {
                m.insert(p.to_string(), data);
            } else if let Some(p) = k.strip_prefix("v.") {
                v.insert(p.to_string(), data);
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer entry {k}")));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
