use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamMap};

/// Adaptive-moment optimizer with per-parameter step counts, so parameters
/// that sit out a step keep their moments and bias correction untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamMap,
    v: ParamMap,
    t: BTreeMap<String, i32>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: ParamMap::new(), v: ParamMap::new(), t: BTreeMap::new() }
    }

    /// Updates exactly the parameters named in `grads`.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            p.expect_shape(g.shape())?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t);
            let c2 = 1.0 - self.beta2.powi(*t);
            for (((pi, mi), vi), gi) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
