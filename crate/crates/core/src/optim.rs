//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments, one flat buffer per registered parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

/// Matrices decay; biases, norm gains and the mask token do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(params: &[(String, &[f64])]) -> Self {
        Self {
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// One update of `params` (same order as registration) from `grads`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[(String, &[f64])], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer registered {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (p, (_, g))) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Contract(format!("tensor {} changed size", self.names[i])));
            }
            let wd = if decays(&self.names[i]) { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                p[j] -= lr * (update + wd * p[j]);
            }
        }
        Ok(())
    }
}
