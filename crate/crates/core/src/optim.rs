//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the gradient when its global norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(10.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Overrides the step size for subsequent updates (for schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update. `grads` is aligned with the store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for ((id, name, p), g) in store.iter().zip(grads) {
            if p.dims() != g.dims() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter {name} ({:?}, #{})",
                    g.dims(),
                    p.dims(),
                    id.index()
                )));
            }
        }
        let clip = match self.cfg.max_grad_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let c = &self.cfg;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[k].data();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                let gi = g[i] * clip;
                p[i] -= c.lr * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut store = store_with(&[1.0, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Tensor::zeros(&[2]).unwrap()]).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()).data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn quadratic_descends() {
        let mut store = store_with(&[1.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 1e-2,
                ..Default::default()
            },
            &store,
        );
        let id = store.id("w").unwrap();
        let w = store.get(id).data()[0];
        opt.step(&mut store, &[Tensor::new(&[1], vec![2.0 * w]).unwrap()]).unwrap();
        let after = store.get(id).data()[0];
        assert!(after < w && after > 0.0);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut store = store_with(&[1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, &[Tensor::zeros(&[3]).unwrap()]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    // Independently transcribed update rule, three steps on f(x, y) = x² + 3y².
    #[test]
    fn three_steps_match_transcript() {
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.05);
        let mut x = [1.0f64, -0.5];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let grad = |x: &[f64; 2]| [2.0 * x[0], 6.0 * x[1]];
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = grad(&x);
            for i in 0..2 {
                x[i] *= 1.0 - lr * wd;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
            expected.push(x);
        }

        let mut store = store_with(&[1.0, -0.5]);
        let id = store.id("w").unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
                weight_decay: wd,
                max_grad_norm: None,
            },
            &store,
        );
        for want in expected {
            let p = store.get(id).data().to_vec();
            let g = Tensor::new(&[2], vec![2.0 * p[0], 6.0 * p[1]]).unwrap();
            opt.step(&mut store, &[g]).unwrap();
            let got = store.get(id).data();
            assert!((got[0] - want[0]).abs() < 1e-15 && (got[1] - want[1]).abs() < 1e-15);
        }
    }
}
