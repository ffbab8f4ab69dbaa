use crate::error::{invalid, Error, Result};
use crate::networks::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Named optimizer and schedule settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: u64,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "desk",
        adam: AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        },
        batch_size: 16,
        epochs: 0,
    },
    Preset {
        name: "paper-s33",
        adam: AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        },
        batch_size: 16,
        epochs: 9000,
    },
    Preset {
        name: "paper-s41",
        adam: AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        },
        batch_size: 640,
        epochs: 5000,
    },
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
}

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(invalid(format!(
                "Adam got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(invalid(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Rounds the moment estimates to `f32`, matching what a checkpoint keeps.
    pub fn round_to_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_params(1.5);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.tensors()[0].item(), 1.5);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn first_unit_gradient_moves_by_learning_rate() {
        let mut p = scalar_params(0.0);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        // m_hat = v_hat = 1 after correction.
        let expect = -cfg.learning_rate / (1.0 + cfg.epsilon);
        assert!((p.tensors()[0].item() - expect).abs() < 1e-18);
    }

    #[test]
    fn second_step_matches_hand_evaluation() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 0.0 + 1e-12,
        };
        let mut p = scalar_params(0.0);
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        opt.step(&mut p, &[Tensor::scalar(-2.0)]).unwrap();
        let m: f64 = 0.5 * 0.5 + 0.5 * -2.0;
        let v: f64 = 0.9 * 0.1 + 0.1 * 4.0;
        let step2 = 0.1 * (m / 0.75) / ((v / 0.19).sqrt() + 1e-12);
        let expect = -0.1 / (1.0 + 1e-12) - step2;
        assert!((p.tensors()[0].item() - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = scalar_params(0.3);
            let mut opt = Adam::new(AdamConfig::default(), &p);
            for i in 0..50 {
                let g = (i as f64 * 0.37).sin();
                opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            }
            p.tensors()[0].item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn validation_and_presets() {
        assert!(AdamConfig { beta2: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { learning_rate: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert_eq!(preset("paper-s33").unwrap().adam.learning_rate, 1e-3);
        assert_eq!(preset("paper-s41").unwrap().batch_size, 640);
        assert!(preset("nope").is_err());
        for p in PRESETS {
            assert!(p.adam.validate().is_ok());
            assert_eq!(p.adam.beta1, 0.5);
        }
    }
}
