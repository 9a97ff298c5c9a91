//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-7;

    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every parameter. Gradients are checked for finiteness
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "`{name}`: parameter {:?} vs gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: name.clone(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape()))
                .collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, (_, p))| m.shape() != p.shape())
        {
            return Err(Error::shape(
                "adam_step",
                "optimizer state does not match parameters",
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(t)) as f32;
        let c2 = (1.0 - self.beta2.powi(t)) as f32;
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &g), (m, v)) in iter {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state_tensors(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f32))];
        for (n, m) in names.iter().zip(&self.m) {
            out.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.v) {
            out.push((format!("adam.v.{n}"), v.clone()));
        }
        out
    }

    /// Restores state written by [`Adam::state_tensors`].
    pub fn restore(&mut self, names: &[String], tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |key: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer tensor `{key}`")))
        };
        let step = find("adam.step".into())?.item();
        let m = names
            .iter()
            .map(|n| find(format!("adam.m.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let v = names
            .iter()
            .map(|n| find(format!("adam.v.{n}")))
            .collect::<Result<Vec<_>>>()?;
        self.step = step as u64;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
