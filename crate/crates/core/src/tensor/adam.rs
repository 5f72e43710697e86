use super::array::Array;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moments mirror the parameter list given at
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Array>,
    second_moment: Vec<Array>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Array>) -> Self {
        let first_moment: Vec<Array> = params.into_iter().map(|p| Array::zeros(p.shape())).collect();
        let second_moment = first_moment.clone();
        Self {
            config,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Array] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Array] {
        &self.second_moment
    }

    /// Apply one update in place.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim(format!(
                    "adam: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar textbook Adam, written independently of the array version.
    fn scalar_adam(mut p: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Array::vector(vec![1.5, -2.0, 0.25]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        adam.step(&mut [&mut p], &[Array::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02, 1e-3, -250.0] {
            let mut p = Array::scalar(0.5);
            let mut adam = AdamState::new(AdamConfig::default(), [&p]);
            adam.step(&mut [&mut p], &[Array::scalar(g)]).unwrap();
            let expected = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p.item() - expected).abs() < 1e-15);
            assert!((p.item() - (0.5 - 1e-3 * g.signum())).abs() < 1e-8);
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let grads = [0.7, 0.7];
        let mut p = Array::scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        for g in grads {
            adam.step(&mut [&mut p], &[Array::scalar(g)]).unwrap();
        }
        assert!((p.item() - scalar_adam(1.0, &grads, 1e-3)).abs() < 1e-15);

        let grads = [0.3, -1.2, 4.0, 0.0, 2.5];
        let mut p = Array::scalar(-0.4);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), [&p]);
        for g in grads {
            adam.step(&mut [&mut p], &[Array::scalar(g)]).unwrap();
        }
        assert!((p.item() - scalar_adam(-0.4, &grads, 0.01)).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Array::vector(vec![1.0, 2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        let err = adam.step(&mut [&mut p], &[Array::zeros(&[3])]);
        assert!(matches!(err, Err(Error::Dimension(_))));
        assert_eq!(adam.step_count(), 0);
    }
}
