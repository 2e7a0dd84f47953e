//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward map, so it stays
//! independent of the hand-written backward passes it validates.

use super::{Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Acceptance threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms; central
/// differences carry roughly `1e-10` of round-off at `h = 1e-5`.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.tensors.iter().map(|t| t.entries).sum()
    }

    pub fn merge(&mut self, other: GradReport) {
        self.tensors.extend(other.tensors);
    }
}

fn set_entry<M: Module<f64>>(model: &mut M, target: &str, index: usize, value: f64) {
    model.visit_mut("", &mut |name, slot| {
        if name == target {
            if let Slot::Param { value: v, .. } = slot {
                v.data_mut()[index] = value;
            }
        }
    });
}

/// Compares analytic parameter gradients against central differences.
///
/// `analytic` runs a forward and backward pass that accumulates gradients
/// (they are zeroed first). `loss` evaluates the scalar objective from the
/// current parameters; parameters are restored bit-exactly afterwards.
pub fn check_module<M: Module<f64>>(
    model: &mut M,
    mut loss: impl FnMut(&mut M) -> Result<f64>,
    mut analytic: impl FnMut(&mut M) -> Result<()>,
) -> Result<GradReport> {
    super::zero_grad(model);
    analytic(model)?;
    let mut params: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    model.visit_mut("", &mut |name, slot| {
        if let Slot::Param { value, grad, .. } = slot {
            params.push((name.to_string(), value.data().to_vec(), grad.data().to_vec()));
        }
    });
    let mut report = GradReport::default();
    for (name, values, grads) in params {
        let mut worst = 0.0f64;
        for (i, (&orig, &g)) in values.iter().zip(&grads).enumerate() {
            set_entry(model, &name, i, orig + STEP);
            let plus = loss(model)?;
            set_entry(model, &name, i, orig - STEP);
            let minus = loss(model)?;
            set_entry(model, &name, i, orig);
            let numeric = (plus - minus) / (2.0 * STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("gradcheck"));
            }
            worst = worst.max(rel_error(g, numeric));
        }
        report.tensors.push(TensorCheck {
            name,
            entries: values.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Worst relative error between `analytic` (gradient w.r.t. `x`) and central
/// differences of `loss` around `x`.
pub fn check_input_gradient(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut loss: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<f64> {
    if x.shape() != analytic.shape() {
        return Err(Error::shape(
            "check_input_gradient",
            format!("{:?} vs {:?}", x.shape(), analytic.shape()),
        ));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = loss(&probe)?;
        probe.data_mut()[i] = orig - STEP;
        let minus = loss(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Largest disagreement tolerated between central differences at `STEP`
/// and `STEP / 2` before a point counts as non-smooth.
pub const SMOOTH_TOL: f64 = 1e-5;

fn band_agrees(mut at: impl FnMut(f64) -> Result<f64>) -> Result<bool> {
    let d = |h: f64, at: &mut dyn FnMut(f64) -> Result<f64>| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
    let full = d(STEP, &mut at)?;
    let half = d(0.5 * STEP, &mut at)?;
    Ok(rel_error(full, half) < SMOOTH_TOL)
}

/// Whether the loss is smooth within `±STEP` of every parameter entry, so
/// that central differences are a valid oracle there. A kink of a
/// piecewise-linear activation inside the band shows up as disagreement
/// between the `STEP` and `STEP / 2` estimates. Only the forward map is used.
pub fn smooth_in_band<M: Module<f64>>(model: &mut M, mut loss: impl FnMut(&mut M) -> Result<f64>) -> Result<bool> {
    let mut params: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_mut("", &mut |name, slot| {
        if let Slot::Param { value, .. } = slot {
            params.push((name.to_string(), value.data().to_vec()));
        }
    });
    for (name, values) in params {
        for (i, &orig) in values.iter().enumerate() {
            let ok = band_agrees(|h| {
                set_entry(model, &name, i, orig + h);
                let l = loss(model);
                set_entry(model, &name, i, orig);
                l
            })?;
            if !ok {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// [`smooth_in_band`] for the entries of an input tensor.
pub fn input_smooth_in_band(x: &Tensor<f64>, mut loss: impl FnMut(&Tensor<f64>) -> Result<f64>) -> Result<bool> {
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let ok = band_agrees(|h| {
            probe.data_mut()[i] = orig + h;
            let l = loss(&probe);
            probe.data_mut()[i] = orig;
            l
        })?;
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_check_finds_kinks() {
        let x = Tensor::new(vec![3], vec![0.5, 3e-6, -2.0]).unwrap();
        let relu_sum = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v.max(0.0)).sum());
        assert!(!input_smooth_in_band(&x, relu_sum).unwrap());
        let away = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        assert!(input_smooth_in_band(&away, relu_sum).unwrap());
        let cubic = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v * v * v).sum());
        assert!(input_smooth_in_band(&x, cubic).unwrap());
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(2.0, 2.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(rel_error(0.0, 1e-11) < 1e-6);
    }

    #[test]
    fn input_gradient_of_square() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = x.mul_scalar(2.0).unwrap();
        let worst = check_input_gradient(&x, &g, |t| Ok(t.data().iter().map(|v| v * v).sum())).unwrap();
        assert!(worst < 1e-8);
        let wrong = x.mul_scalar(3.0).unwrap();
        let worst = check_input_gradient(&x, &wrong, |t| Ok(t.data().iter().map(|v| v * v).sum())).unwrap();
        assert!(worst > 0.1);
    }
}
