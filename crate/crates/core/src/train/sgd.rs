use crate::error::{Error, Result};
use crate::nn::{Module, Slot};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub power: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 80,
            batch_size: 64,
            power: 0.99,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 * (1 - e / E)^power` for epochs `0 <= e < E`.
pub fn lr_at_epoch(lr0: f64, epoch: usize, epochs: usize, power: f64) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} is outside the schedule of {epochs} epochs"
        )));
    }
    Ok(lr0 * (1.0 - epoch as f64 / epochs as f64).powf(power))
}

/// One momentum update of a single tensor:
/// `v <- m v + (g + wd p)`, `p <- p - lr v`.
pub fn sgd_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("param {}, grad {}, velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient("tensor".into()));
    }
    let (lr, m, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = m * *v + (g + wd * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every parameter of a module, in visit order.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter of `model`. Gradients are checked first, so a
    /// non-finite entry leaves the model untouched.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut bad = None;
        model.visit_mut("", &mut |name, slot| {
            if let Slot::Param { grad, .. } = slot {
                if bad.is_none() && !grad.all_finite() {
                    bad = Some(name.to_string());
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        let mut i = 0;
        let mut result = Ok(());
        let (momentum, weight_decay) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, slot| {
            if let Slot::Param { value, grad, decay } = slot {
                if i == velocity.len() {
                    velocity.push((name.to_string(), vec![T::zero(); value.len()]));
                }
                let (vname, v) = &mut velocity[i];
                i += 1;
                if result.is_err() {
                    return;
                }
                if vname != name || v.len() != value.len() {
                    result = Err(Error::InvalidArgument(format!(
                        "optimizer state for `{vname}` does not match parameter `{name}`"
                    )));
                    return;
                }
                let wd = if decay { weight_decay } else { 0.0 };
                result = sgd_step(value.data_mut(), grad.data(), v, lr, momentum, wd);
            }
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_grad, Linear};
    use crate::tensor::{Rng, Tensor};

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at_epoch(0.005, 0, 80, 0.99).unwrap(), 0.005);
        assert!((lr_at_epoch(0.005, 40, 80, 0.99).unwrap() - 0.005 * 0.5f64.powf(0.99)).abs() < 1e-15);
        assert!((lr_at_epoch(0.005, 40, 80, 0.99).unwrap() - 2.517e-3).abs() < 1e-6);
        let last = lr_at_epoch(0.0005, 79, 80, 0.99).unwrap();
        assert!((last - 0.0005 * (1.0f64 / 80.0).powf(0.99)).abs() < 1e-18);
        assert!((last / 6.51e-6 - 1.0).abs() < 5e-3);
        assert!(lr_at_epoch(0.005, 80, 80, 0.99).is_err());
        let lrs: Vec<f64> = (0..80).map(|e| lr_at_epoch(1.0, e, 80, 0.99).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn plain_sgd_and_geometric_decay() {
        let mut p = [1.0f64, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, [0.95, -2.1]);

        let mut p = [1.0f64];
        let mut v = [2.0];
        for k in 1..5 {
            sgd_step(&mut p, &[0.0], &mut v, 0.0, 0.5, 0.0).unwrap();
            assert_eq!(v[0], 2.0 * 0.5f64.powi(k));
        }
        assert_eq!(p, [1.0]);
    }

    #[test]
    fn two_momentum_steps() {
        let (lr, g) = (0.01f64, 0.25);
        let mut p = [0.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        assert!((p[0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_norm_monotonically() {
        let mut rng = Rng::new(1);
        let mut fc = Linear::<f64>::new(4, 3, &mut rng);
        let mut opt = Sgd::new(0.9, 5e-2);
        let norm = |fc: &Linear<f64>| fc.weight.data().iter().map(|v| v * v).sum::<f64>();
        let mut last = norm(&fc);
        for _ in 0..20 {
            zero_grad(&mut fc);
            opt.step(&mut fc, 0.1).unwrap();
            let now = norm(&fc);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_whole_step() {
        let mut rng = Rng::new(2);
        let mut fc = Linear::<f32>::new(2, 2, &mut rng);
        let before = fc.clone();
        fc.grad_weight = Tensor::ones([2, 2]);
        fc.grad_bias.data_mut()[1] = f32::NAN;
        let err = Sgd::new(0.9, 0.0).step(&mut fc, 0.1).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
        assert_eq!(fc.weight, before.weight);
    }
}
