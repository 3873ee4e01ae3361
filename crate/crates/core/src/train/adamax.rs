use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamaxConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            alpha: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamaxConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.alpha.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..=1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "invalid Adamax settings {self:?}"
            )))
        }
    }
}

/// First moments `m`, infinity-norm accumulators `u` and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub config: AdamaxConfig,
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
}

impl AdamaxState {
    pub fn new(params: &ModelParams, config: AdamaxConfig) -> Self {
        Self {
            config,
            m: vec![0.0; params.values().len()],
            u: vec![0.0; params.values().len()],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.u.iter_mut().for_each(|v| *v = 0.0);
        self.t = 0;
    }
}

/// One Adamax update. Rejects non-finite gradients before touching any
/// state, naming the offending tensor.
pub fn adamax_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamaxState,
) -> Result<()> {
    let n = params.values().len();
    if grads.values().len() != n || state.m.len() != n {
        return Err(TrainError::Length(format!(
            "{n} parameters, {} gradients, {} optimizer slots",
            grads.values().len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.values().iter().position(|g| !g.is_finite()) {
        let tensor = grads.layout().tensor_at(i).map_or("?", |t| t.name.as_str());
        return Err(TrainError::NonFiniteGradient {
            tensor: tensor.to_string(),
            index: i,
        });
    }
    let c = state.config;
    state.t += 1;
    let rate = c.alpha / (1.0 - c.beta1.powi(state.t.min(i32::MAX as u64) as i32));
    for (((theta, &g), m), u) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(&mut state.m)
        .zip(&mut state.u)
    {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *u = (c.beta2 * *u).max(g.abs());
        *theta -= rate * *m / (*u + c.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Architecture};
    use proptest::prelude::*;

    fn scalar_params(values: Vec<f64>) -> ModelParams {
        // One order, one slot, d=1, T=1, m=1, n=1: F1 B1 H w(2) = 5 parameters.
        let arch = Architecture {
            num_slots: 1,
            rows: 1,
            window: 1,
            filter_sizes: vec![1],
            pool_sizes: vec![1],
            maps: vec![1],
            dense_dim: 1,
            dropout: 0.0,
            activation: Activation::Relu,
        };
        ModelParams::from_values(&arch, values).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_params(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let before = p.clone();
        let mut s = AdamaxState::new(&p, AdamaxConfig::default());
        adamax_step(&mut p, &before.zeros_like(), &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_alpha() {
        let mut p = scalar_params(vec![0.0; 5]);
        let g = scalar_params(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut s = AdamaxState::new(&p, AdamaxConfig::default());
        adamax_step(&mut p, &g, &mut s).unwrap();
        // m = 0.1, u = 1, bias correction 1 - 0.9 = 0.1.
        let expected = -0.002 * 0.1 / 0.1 / (1.0 + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-15);
        assert!((p.values()[0] + 0.002).abs() < 1e-10);
    }

    #[test]
    fn persistent_positive_gradient_decreases() {
        let mut p = scalar_params(vec![0.0; 5]);
        let g = scalar_params(vec![0.3, 0.0, 0.0, 0.0, 0.0]);
        let mut s = AdamaxState::new(&p, AdamaxConfig::default());
        let mut last = p.values()[0];
        for _ in 0..10 {
            adamax_step(&mut p, &g, &mut s).unwrap();
            assert!(p.values()[0] < last);
            last = p.values()[0];
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = scalar_params(vec![0.0; 5]);
        let g = scalar_params(vec![0.0, 0.0, f64::NAN, 0.0, 0.0]);
        let mut s = AdamaxState::new(&p, AdamaxConfig::default());
        let err = adamax_step(&mut p, &g, &mut s).unwrap_err();
        assert!(matches!(&err, TrainError::NonFiniteGradient { tensor, .. } if tensor == "H"));
        assert_eq!(s.t, 0);
    }

    proptest! {
        #[test]
        fn accumulator_and_step_bounds(grads in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 5), 1..20)) {
            let mut p = scalar_params(vec![0.0; 5]);
            let mut s = AdamaxState::new(&p, AdamaxConfig::default());
            for g in grads {
                let prev_u = s.u.clone();
                let prev_p = p.values().to_vec();
                adamax_step(&mut p, &scalar_params(g.clone()), &mut s).unwrap();
                // |m| / u is at most (1-β₁)·Σ (β₁/β₂)^k, slightly above 1-β₁ᵗ.
                let r = 0.9f64 / 0.999;
                let t = s.t as i32;
                let bound = 0.002 / (1.0 - 0.9f64.powi(t)) * 0.1 * (1.0 - r.powi(t)) / (1.0 - r);
                for i in 0..5 {
                    prop_assert!(s.u[i] >= 0.999 * prev_u[i]);
                    prop_assert!(s.u[i] >= g[i].abs());
                    prop_assert!((p.values()[i] - prev_p[i]).abs() <= bound * (1.0 + 1e-12));
                }
            }
        }
    }
}
