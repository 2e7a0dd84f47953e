use super::{bcn, join, Mode, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel batch normalization over `[B, C, N]` (or `[B, C]`) inputs.
///
/// Training mode normalizes with statistics pooled over the batch and time
/// axes and updates the running estimates; eval mode uses the running
/// estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    shape: Vec<usize>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            grad_gamma: Tensor::zeros([channels]),
            grad_beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn dims(&self, x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
        let (b, c, n) = bcn(x, op)?;
        if c != self.channels() {
            return Err(Error::shape(
                op,
                format!("expected {} channels, got {:?}", self.channels(), x.shape()),
            ));
        }
        Ok((b, c, n))
    }

    /// Eval-mode forward without caching.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, n) = self.dims(x, "batchnorm_forward")?;
        let eps = T::from_f64(self.eps);
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let inv = T::one() / (self.running_var.data()[ch] + eps).sqrt();
            let (mean, g, be) = (
                self.running_mean.data()[ch],
                self.gamma.data()[ch],
                self.beta.data()[ch],
            );
            for bi in 0..b {
                for v in &mut out[(bi * c + ch) * n..(bi * c + ch + 1) * n] {
                    *v = g * ((*v - mean) * inv) + be;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)?.finite("batchnorm_forward")
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (b, c, n) = self.dims(x, "batchnorm_forward")?;
        let count = b * n;
        let eps = T::from_f64(self.eps);
        let xd = x.data();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let rows = (0..b).map(|bi| (bi * c + ch) * n..(bi * c + ch + 1) * n);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = T::zero();
                    for r in rows.clone() {
                        for &v in &xd[r] {
                            s += v;
                        }
                    }
                    let mean = s / T::from_usize(count);
                    let mut sq = T::zero();
                    for r in rows.clone() {
                        for &v in &xd[r] {
                            sq += (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / T::from_usize(count);
                    let unbiased = if count > 1 {
                        sq / T::from_usize(count - 1)
                    } else {
                        var
                    };
                    let m = T::from_f64(self.momentum);
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - m) * *rm + m * mean;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - m) * *rv + m * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.data()[ch], self.running_var.data()[ch]),
            };
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for r in rows {
                for j in r {
                    let h = (xd[j] - mean) * inv;
                    x_hat[j] = h;
                    out[j] = g * h + be;
                }
            }
        }
        self.cache = Some(Cache {
            shape: x.shape().to_vec(),
            x_hat,
            inv_std,
            mode,
        });
        Tensor::new(x.shape().to_vec(), out)?.finite("batchnorm_forward")
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache("batchnorm"))?;
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(Error::shape(
                "batchnorm_backward",
                format!("grad {:?} vs forward {:?}", grad_out.shape(), cache.shape),
            ));
        }
        let (b, c, n) = bcn(grad_out, "batchnorm_backward")?;
        let count = T::from_usize(b * n);
        let g = grad_out.data();
        let mut grad_x = vec![T::zero(); g.len()];
        for ch in 0..c {
            let rows = (0..b).map(|bi| (bi * c + ch) * n..(bi * c + ch + 1) * n);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for r in rows.clone() {
                for j in r {
                    sum_dy += g[j];
                    sum_dy_xhat += g[j] * cache.x_hat[j];
                }
            }
            self.grad_gamma.data_mut()[ch] += sum_dy_xhat;
            self.grad_beta.data_mut()[ch] += sum_dy;
            let gamma = self.gamma.data()[ch];
            let inv = cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let scale = gamma * inv / count;
                    for r in rows {
                        for j in r {
                            grad_x[j] =
                                scale * (count * g[j] - sum_dy - cache.x_hat[j] * sum_dy_xhat);
                        }
                    }
                }
                Mode::Eval => {
                    for r in rows {
                        for j in r {
                            grad_x[j] = gamma * inv * g[j];
                        }
                    }
                }
            }
        }
        Tensor::new(grad_out.shape().to_vec(), grad_x)
    }
}

impl<T: Scalar> Module<T> for BatchNorm1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(
            &join(prefix, "gamma"),
            Slot::Param {
                value: &mut self.gamma,
                grad: &mut self.grad_gamma,
                decay: false,
            },
        );
        f(
            &join(prefix, "beta"),
            Slot::Param {
                value: &mut self.beta,
                grad: &mut self.grad_beta,
                decay: false,
            },
        );
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_gradient, check_module, GRADCHECK_TOL};
    use crate::tensor::Rng;

    #[test]
    fn train_output_is_standardized() {
        let mut rng = Rng::new(4);
        let mut bn = BatchNorm1d::<f64>::new(5);
        let x = Tensor::normal(&mut rng, 3.0, 2.0, [4, 5, 7]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..5 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 5 + ch) * 7..(b * 5 + ch + 1) * 7].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut bn = BatchNorm1d::<f64>::new(2);
        let x = Tensor::full([1, 2, 3], 4.5);
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.max_abs() == 0.0);
    }

    #[test]
    fn running_stats_only_move_in_train_mode() {
        let mut rng = Rng::new(8);
        let mut bn = BatchNorm1d::<f64>::new(3);
        let x = Tensor::normal(&mut rng, 1.0, 1.0, [2, 3, 4]).unwrap();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(bn.running_mean.data(), &[0.0; 3]);
        bn.forward(&x, Mode::Train).unwrap();
        assert!(bn.running_mean.max_abs() > 0.0);
        let eval = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(eval.data(), bn.apply(&x).unwrap().data());
    }

    #[test]
    fn gradcheck_both_modes() {
        for (seed, mode) in [(1u64, Mode::Train), (2, Mode::Eval)] {
            let mut rng = Rng::new(seed);
            let mut bn = BatchNorm1d::<f64>::new(3);
            bn.gamma = Tensor::normal(&mut rng, 1.0, 0.5, [3]).unwrap();
            bn.beta = Tensor::normal(&mut rng, 0.0, 0.5, [3]).unwrap();
            bn.running_var = Tensor::uniform(&mut rng, 0.5, 2.0, [3]).unwrap();
            let x = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 4]).unwrap();
            let probe = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 4]).unwrap();
            let loss = |m: &mut BatchNorm1d<f64>, x: &Tensor<f64>| -> Result<f64> {
                let y = m.clone().forward(x, mode)?;
                Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b * a).sum())
            };
            let upstream = |m: &mut BatchNorm1d<f64>, x: &Tensor<f64>| -> Result<Tensor<f64>> {
                let y = m.forward(x, mode)?;
                let g: Vec<f64> = y.data().iter().zip(probe.data()).map(|(a, b)| 2.0 * a * b).collect();
                m.backward(&Tensor::new(y.shape().to_vec(), g)?)
            };
            let report = check_module(&mut bn, |m| loss(m, &x), |m| upstream(m, &x).map(|_| ())).unwrap();
            assert!(report.max_rel_error() < GRADCHECK_TOL, "{mode:?}: {report:?}");
            let gx = upstream(&mut bn.clone(), &x).unwrap();
            let worst = check_input_gradient(&x, &gx, |xi| loss(&mut bn.clone(), xi)).unwrap();
            assert!(worst < GRADCHECK_TOL, "{mode:?} input {worst}");
        }
    }
}
