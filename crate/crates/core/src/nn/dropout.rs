use super::{bcn, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Channel-wise (spatial) inverted dropout.
///
/// In training mode each `(sample, channel)` row is zeroed across all time
/// steps with probability `p`; survivors are scaled by `1 / (1 - p)`. On a
/// `[B, C]` input this is ordinary dropout.
#[derive(Debug, Clone)]
pub struct SpatialDropout<T: Scalar = f32> {
    p: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> SpatialDropout<T> {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        Ok(Self { p, mask: None })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Per-`(sample, channel)` multipliers of the last training forward.
    pub fn mask(&self) -> Option<&[T]> {
        self.mask.as_deref()
    }

    /// The rng is only consulted in training mode with `p > 0`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let (b, c, n) = bcn(x, "spatial_dropout_forward")?;
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let rng = rng.ok_or_else(|| {
            Error::InvalidArgument("training-mode dropout needs an rng".into())
        })?;
        let scale = T::one() / T::from_f64(1.0 - self.p);
        let mask: Vec<T> = (0..b * c)
            .map(|_| if rng.next_f64() < self.p { T::zero() } else { scale })
            .collect();
        let mut out = x.data().to_vec();
        for (row, &m) in out.chunks_exact_mut(n).zip(&mask) {
            for v in row {
                *v *= m;
            }
        }
        self.mask = Some(mask);
        Tensor::new(x.shape().to_vec(), out)
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, n) = bcn(grad_out, "spatial_dropout_backward")?;
        let Some(mask) = &self.mask else {
            return Ok(grad_out.clone());
        };
        if mask.len() != b * c {
            return Err(Error::shape(
                "spatial_dropout_backward",
                format!("mask has {} rows, grad has {}", mask.len(), b * c),
            ));
        }
        let mut g = grad_out.data().to_vec();
        for (row, &m) in g.chunks_exact_mut(n).zip(mask) {
            for v in row {
                *v *= m;
            }
        }
        Tensor::new(grad_out.shape().to_vec(), g)
    }
}
