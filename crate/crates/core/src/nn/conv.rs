use super::{join, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Dilated 1-D convolution over `[B, C_in, N]` inputs, valid (unpadded),
/// cross-correlation convention:
///
/// `out[b, o, t] = bias[o] + sum_{i,k} weight[o, i, k] * x[b, i, t + k * dilation]`
#[derive(Debug, Clone)]
pub struct Conv1d<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    dilation: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv1d<T> {
    /// Fan-in uniform init in `±sqrt(1 / (C_in * K))`.
    pub fn new(c_in: usize, c_out: usize, kernel: usize, dilation: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / (c_in * kernel) as f64).sqrt();
        let weight = Tensor::uniform(rng, -bound, bound, [c_out, c_in, kernel]).expect("conv shape");
        let bias = Tensor::uniform(rng, -bound, bound, [c_out]).expect("conv shape");
        Self::from_parts(weight, bias, dilation).expect("consistent parts")
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, dilation: usize) -> Result<Self> {
        if weight.rank() != 3 || bias.shape() != [weight.dim(0)] {
            return Err(Error::shape(
                "Conv1d",
                format!("weight {:?} / bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        Ok(Self {
            grad_weight: Tensor::zeros(weight.shape().to_vec()),
            grad_bias: Tensor::zeros(bias.shape().to_vec()),
            weight,
            bias,
            dilation,
            input: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Temporal span covered by one output position.
    pub fn span(&self) -> usize {
        (self.kernel() - 1) * self.dilation + 1
    }

    pub fn output_len(&self, n_in: usize) -> Result<usize> {
        if n_in < self.span() {
            return Err(Error::SequenceTooShort {
                got: n_in,
                required: self.span(),
            });
        }
        Ok(n_in - (self.kernel() - 1) * self.dilation)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        match x.shape() {
            &[b, c, n] if c == self.in_channels() => Ok((b, n, self.output_len(n)?)),
            s => Err(Error::shape(
                "conv1d_forward",
                format!("expected [B, {}, N], got {s:?}", self.in_channels()),
            )),
        }
    }

    /// Unrolls sample `b` into `col[t, i * K + k] = x[b, i, t + k * dilation]`.
    fn im2col(&self, xd: &[T], b: usize, n_in: usize, n_out: usize, col: &mut [T]) {
        let (c_in, kernel) = (self.in_channels(), self.kernel());
        let width = c_in * kernel;
        for i in 0..c_in {
            let src = &xd[(b * c_in + i) * n_in..(b * c_in + i + 1) * n_in];
            for k in 0..kernel {
                let shift = k * self.dilation;
                for t in 0..n_out {
                    col[t * width + i * kernel + k] = src[t + shift];
                }
            }
        }
    }

    /// Forward pass without caching.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, n_in, n_out) = self.check_input(x)?;
        let c_out = self.out_channels();
        let width = self.in_channels() * self.kernel();
        let w = self.weight.data();
        let mut col = vec![T::zero(); n_out * width];
        let mut out = vec![T::zero(); batch * c_out * n_out];
        for b in 0..batch {
            self.im2col(x.data(), b, n_in, n_out, &mut col);
            for o in 0..c_out {
                let wo = &w[o * width..(o + 1) * width];
                let dst = &mut out[(b * c_out + o) * n_out..(b * c_out + o + 1) * n_out];
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = self.bias.data()[o] + T::dot(wo, &col[t * width..(t + 1) * width]);
                }
            }
        }
        Tensor::new(vec![batch, c_out, n_out], out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(out)
    }

    /// Returns the input gradient and accumulates into `grad_weight`/`grad_bias`.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(Error::MissingCache("conv1d"))?;
        let result = self.backward_with(&x, grad_out);
        self.input = Some(x);
        result
    }

    fn backward_with(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, n_in, n_out) = self.check_input(x)?;
        let (c_out, c_in, kernel) = (self.out_channels(), self.in_channels(), self.kernel());
        if grad_out.shape() != [batch, c_out, n_out] {
            return Err(Error::shape(
                "conv1d_backward",
                format!(
                    "grad_out {:?} does not match cached forward output [{batch}, {c_out}, {n_out}]",
                    grad_out.shape()
                ),
            ));
        }
        let width = c_in * kernel;
        let g = grad_out.data();
        let mut col = vec![T::zero(); n_out * width];
        let mut gcol = vec![T::zero(); n_out * width];
        let mut grad_x = vec![T::zero(); x.len()];
        for b in 0..batch {
            self.im2col(x.data(), b, n_in, n_out, &mut col);
            gcol.fill(T::zero());
            for o in 0..c_out {
                let wo = &self.weight.data()[o * width..(o + 1) * width];
                let gwo = &mut self.grad_weight.data_mut()[o * width..(o + 1) * width];
                let grow = &g[(b * c_out + o) * n_out..(b * c_out + o + 1) * n_out];
                for (t, &go) in grow.iter().enumerate() {
                    T::axpy(go, &col[t * width..(t + 1) * width], gwo);
                    T::axpy(go, wo, &mut gcol[t * width..(t + 1) * width]);
                }
                let gb = &mut self.grad_bias.data_mut()[o];
                *gb = grow.iter().fold(*gb, |a, &v| a + v);
            }
            for i in 0..c_in {
                let dst = &mut grad_x[(b * c_in + i) * n_in..(b * c_in + i + 1) * n_in];
                for k in 0..kernel {
                    let shift = k * self.dilation;
                    for t in 0..n_out {
                        dst[t + shift] += gcol[t * width + i * kernel + k];
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), grad_x)
    }
}

impl<T: Scalar> Module<T> for Conv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(
            &join(prefix, "weight"),
            Slot::Param {
                value: &mut self.weight,
                grad: &mut self.grad_weight,
                decay: true,
            },
        );
        f(
            &join(prefix, "bias"),
            Slot::Param {
                value: &mut self.bias,
                grad: &mut self.grad_bias,
                decay: true,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_gradient, check_module, GRADCHECK_TOL};

    fn single(w: &[f64], dilation: usize) -> Conv1d<f64> {
        Conv1d::from_parts(
            Tensor::new(vec![1, 1, w.len()], w.to_vec()).unwrap(),
            Tensor::zeros([1]),
            dilation,
        )
        .unwrap()
    }

    fn seq(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_expanded_examples() {
        let x = seq(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(single(&[1.0, 0.0, -1.0], 1).apply(&x).unwrap().data(), &[-2.0, -2.0, -2.0]);
        assert_eq!(single(&[1.0, 0.0, -1.0], 2).apply(&x).unwrap().data(), &[-4.0]);
        assert_eq!(single(&[1.0], 1).apply(&x).unwrap().data(), x.data());
    }

    #[test]
    fn too_short_input_rejected() {
        let conv = single(&[1.0, 0.0, -1.0], 3);
        assert!(matches!(
            conv.apply(&seq(&[1.0; 6])),
            Err(Error::SequenceTooShort { got: 6, required: 7 })
        ));
    }

    #[test]
    fn bias_grad_is_sum_and_zero_grad_out_gives_zero() {
        let mut rng = Rng::new(3);
        let mut conv = Conv1d::<f64>::new(3, 2, 3, 2, &mut rng);
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 9]).unwrap();
        let y = conv.forward(&x).unwrap();
        let g = Tensor::normal(&mut rng, 0.0, 1.0, y.shape().to_vec()).unwrap();
        conv.backward(&g).unwrap();
        for o in 0..2 {
            let mut s = 0.0;
            for b in 0..2 {
                for t in 0..5 {
                    s += g.data()[(b * 2 + o) * 5 + t];
                }
            }
            assert!((conv.grad_bias.data()[o] - s).abs() < 1e-12);
        }

        let mut conv = Conv1d::<f64>::new(3, 2, 3, 2, &mut rng);
        conv.forward(&x).unwrap();
        let gx = conv.backward(&Tensor::zeros([2, 2, 5])).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert_eq!(conv.grad_weight.max_abs(), 0.0);
        assert_eq!(conv.grad_bias.max_abs(), 0.0);
    }

    #[test]
    fn backward_requires_matching_forward() {
        let mut conv = single(&[1.0, 1.0], 1);
        assert!(matches!(conv.backward(&seq(&[1.0])), Err(Error::MissingCache(_))));
        conv.forward(&seq(&[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(conv.backward(&seq(&[1.0])), Err(Error::Shape { .. })));
    }

    #[test]
    fn length_arithmetic_composes() {
        let mut rng = Rng::new(0);
        for k in [1usize, 3, 5] {
            for d in 1..=8usize {
                let conv = Conv1d::<f32>::new(1, 1, k, d, &mut rng);
                let n = 3 * (k - 1) * d + 2;
                let n1 = conv.output_len(n).unwrap();
                let n2 = conv.output_len(n1).unwrap();
                assert_eq!(n1, n - (k - 1) * d);
                assert_eq!(n2, n - 2 * (k - 1) * d);
                let x = Tensor::<f32>::zeros([1, 1, n]);
                let y = conv.apply(&conv.apply(&x).unwrap()).unwrap();
                assert_eq!(y.dim(2), n2);
            }
        }
    }

    #[test]
    fn gradcheck_spec_instance() {
        let mut rng = Rng::new(17);
        let mut conv = Conv1d::<f64>::new(3, 3, 3, 2, &mut rng);
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 9]).unwrap();
        let probe = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 5]).unwrap();
        let loss = |c: &mut Conv1d<f64>, x: &Tensor<f64>| -> Result<f64> {
            let y = c.apply(x)?;
            Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        };
        let report = check_module(
            &mut conv,
            |c| loss(c, &x),
            |c| {
                c.forward(&x)?;
                c.backward(&probe).map(|_| ())
            },
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");

        conv.forward(&x).unwrap();
        let gx = conv.backward(&probe).unwrap();
        let worst = check_input_gradient(&x, &gx, |xi| loss(&mut conv.clone(), xi)).unwrap();
        assert!(worst < GRADCHECK_TOL, "input grad {worst}");
    }
}
