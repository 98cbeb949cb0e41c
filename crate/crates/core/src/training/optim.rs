//! Adam with bias correction and the warmup-plus-step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One Adam update. `lrs[k]` is the learning rate of parameter `k`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lrs: &[f64],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || lrs.len() != n || state.m.len() != n {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{n} params, {} grads, {} lrs, {} moments",
                grads.len(),
                lrs.len(),
                state.m.len()
            ),
        ));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::dim(
                "adam_step",
                format!("param {k}: shape {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = lrs[k];
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gv;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gv * gv;
            let (mh, vh) = (m[i] / c1, v[i] / c2);
            *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Epochs (0-based) at whose start the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.base_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "decay epochs must be strictly increasing, got {:?}",
                self.decay_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate for a step: a linear ramp from `base/warmup` to `base`
/// over the warmup steps, then `base·factor^(decays passed)`.
pub fn lr_at(
    schedule: &LrSchedule,
    epoch: usize,
    step_in_epoch: usize,
    steps_per_epoch: usize,
) -> f64 {
    let step = epoch * steps_per_epoch + step_in_epoch;
    if step < schedule.warmup_steps {
        return schedule.base_lr * (step + 1) as f64 / schedule.warmup_steps as f64;
    }
    let passed = schedule
        .decay_epochs
        .iter()
        .filter(|&&e| epoch >= e)
        .count();
    schedule.base_lr * schedule.decay_factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_update() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &[0.1]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = Tensor::vector(vec![0.5, 0.5, 0.5]);
        let mut st = AdamState::new([&p]);
        let g = Tensor::vector(vec![3.0, -0.2, 1e-3]);
        adam_step(&mut [&mut p], &[g.clone()], &mut st, &[0.01]).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            assert!((pv - (0.5 - 0.01 * gv.signum())).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_and_shape_errors() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::vector(vec![5.0])], &mut st, &[0.0]).unwrap();
        assert_eq!(p.data(), &[1.0]);
        let err = adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &[0.1]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn schedule_examples() {
        let paper = LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 10,
            decay_epochs: vec![30, 40, 50],
            decay_factor: 0.1,
        };
        assert!((lr_at(&paper, 35, 0, 10) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&paper, 0, 0, 10) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(&paper, 0, 9, 10), 1e-3);
        assert!((lr_at(&paper, 55, 3, 10) - 1e-6).abs() < 1e-18);

        let flat = LrSchedule {
            warmup_steps: 0,
            ..paper.clone()
        };
        assert_eq!(lr_at(&flat, 0, 0, 10), 1e-3);

        let mut prev = f64::INFINITY;
        for e in 1..60 {
            for s in 0..10 {
                let lr = lr_at(&paper, e, s, 10);
                assert!(lr <= prev);
                prev = lr;
            }
        }
    }

    #[test]
    fn schedule_validation() {
        let bad = LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 0,
            decay_epochs: vec![5, 5],
            decay_factor: 0.1,
        };
        assert!(bad.validate().is_err());
        assert!(LrSchedule {
            decay_epochs: vec![],
            decay_factor: 0.0,
            ..bad
        }
        .validate()
        .is_err());
    }
}
