use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor, TensorMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Weight decay is kept out of the moment
/// estimates and added to the step: `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: TensorMap,
    v: TensorMap,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: TensorMap::new(),
            v: TensorMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap) -> Result<(), NumericsError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumericsError::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFinite {
                    op: format!("adam_step gradient `{name}`"),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = c.beta1 * md[k] + (1.0 - c.beta1) * gk;
                vd[k] = c.beta2 * vd[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[k]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(name: &str, t: Tensor) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(name.into(), t);
        m
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut st = AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let p0 = Tensor::vector(vec![0.3, -1.2]).unwrap();
        let mut params = map("w", p0.clone());
        st.step(&mut params, &map("w", Tensor::zeros(&[2]))).unwrap();
        assert_eq!(params["w"], p0);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) + lr·wd·θ.
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(cfg);
        let theta = [0.5, -2.0, 1.0];
        let g = [0.2, -3.0, 0.0];
        let mut params = map("w", Tensor::vector(theta.to_vec()).unwrap());
        st.step(&mut params, &map("w", Tensor::vector(g.to_vec()).unwrap()))
            .unwrap();
        for k in 0..3 {
            let expect = theta[k] - cfg.lr * (g[k] / (g[k].abs() + cfg.eps) + cfg.weight_decay * theta[k]);
            assert!((params["w"].data()[k] - expect).abs() < 1e-15);
        }
        // magnitude ≈ lr for non-zero gradients
        assert!((params["w"].data()[0] - theta[0] + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut params = map("w", Tensor::zeros(&[2]));
        assert!(st.step(&mut params, &map("w", Tensor::zeros(&[3]))).is_err());
        assert!(st.step(&mut params, &map("x", Tensor::zeros(&[2]))).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
