use super::{join, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Fully-connected layer: `out[b] = weight · x[b] + bias`, with
/// `weight: [D_out, D_in]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Fan-in uniform init in `±sqrt(1 / D_in)`.
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let weight = Tensor::uniform(rng, -bound, bound, [d_out, d_in]).expect("linear shape");
        let bias = Tensor::uniform(rng, -bound, bound, [d_out]).expect("linear shape");
        Self::from_parts(weight, bias).expect("consistent parts")
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self::from_parts(Tensor::zeros([d_out, d_in]), Tensor::zeros([d_out])).expect("shape")
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::shape(
                "Linear",
                format!("weight {:?} / bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self {
            grad_weight: Tensor::zeros(weight.shape().to_vec()),
            grad_bias: Tensor::zeros(bias.shape().to_vec()),
            weight,
            bias,
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (d_in, d_out) = (self.in_features(), self.out_features());
        let batch = match x.shape() {
            &[b, d] if d == d_in => b,
            s => {
                return Err(Error::shape(
                    "linear_forward",
                    format!("expected [B, {d_in}], got {s:?}"),
                ))
            }
        };
        let w = self.weight.data();
        let mut out = Vec::with_capacity(batch * d_out);
        for row in x.data().chunks_exact(d_in) {
            for o in 0..d_out {
                out.push(self.bias.data()[o] + T::dot(&w[o * d_in..(o + 1) * d_in], row));
            }
        }
        Tensor::new(vec![batch, d_out], out)?.finite("linear_forward")
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::MissingCache("linear"))?;
        let (d_in, d_out) = (self.in_features(), self.out_features());
        let batch = x.dim(0);
        if grad_out.shape() != [batch, d_out] {
            return Err(Error::shape(
                "linear_backward",
                format!("grad {:?} vs output [{batch}, {d_out}]", grad_out.shape()),
            ));
        }
        let (xd, g, w) = (x.data(), grad_out.data(), self.weight.data());
        let mut grad_x = vec![T::zero(); x.len()];
        let gw = self.grad_weight.data_mut();
        let gb = self.grad_bias.data_mut();
        for b in 0..batch {
            let xrow = &xd[b * d_in..(b + 1) * d_in];
            let gxrow = &mut grad_x[b * d_in..(b + 1) * d_in];
            for o in 0..d_out {
                let go = g[b * d_out + o];
                gb[o] += go;
                T::axpy(go, xrow, &mut gw[o * d_in..(o + 1) * d_in]);
                T::axpy(go, &w[o * d_in..(o + 1) * d_in], gxrow);
            }
        }
        Tensor::new(x.shape().to_vec(), grad_x)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
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

    #[test]
    fn affine_map() {
        let lin = Linear::from_parts(
            Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap(),
            Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert_eq!(lin.apply(&x).unwrap().data(), &[7.5, -1.5]);
        assert!(lin.apply(&Tensor::zeros([1, 2])).is_err());
    }

    #[test]
    fn gradcheck_random() {
        let mut rng = Rng::new(12);
        let mut lin = Linear::<f64>::new(5, 4, &mut rng);
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [3, 5]).unwrap();
        let probe = Tensor::normal(&mut rng, 0.0, 1.0, [3, 4]).unwrap();
        let loss = |l: &Linear<f64>, x: &Tensor<f64>| -> Result<f64> {
            let y = l.apply(x)?;
            Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * a * b).sum())
        };
        let upstream = |l: &mut Linear<f64>| -> Result<Tensor<f64>> {
            let y = l.forward(&x)?;
            let g: Vec<f64> = y.data().iter().zip(probe.data()).map(|(a, b)| 2.0 * a * b).collect();
            l.backward(&Tensor::new(y.shape().to_vec(), g)?)
        };
        let report = check_module(&mut lin, |l| loss(l, &x), |l| upstream(l).map(|_| ())).unwrap();
        assert!(report.max_rel_error() < GRADCHECK_TOL, "{report:?}");
        let gx = upstream(&mut lin.clone()).unwrap();
        assert!(check_input_gradient(&x, &gx, |xi| loss(&lin, xi)).unwrap() < GRADCHECK_TOL);
    }
}
