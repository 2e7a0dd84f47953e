use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.relu()
}

/// Gradient of ReLU given its forward *output*: passes `grad` where the
/// output is positive.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", output.shape(), grad.shape()),
        ));
    }
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(grad.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_gradient, GRADCHECK_TOL};
    use crate::tensor::Rng;

    #[test]
    fn gradcheck_away_from_kink() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::normal(&mut rng, 0.0, 1.0, [4, 6]).unwrap();
        // keep every input at least 1e-2 from the kink
        let x = Tensor::new(
            vec![4, 6],
            x.data().iter().map(|v| if v.abs() < 1e-2 { 0.5 } else { *v }).collect(),
        )
        .unwrap();
        let probe = Tensor::<f64>::normal(&mut rng, 0.0, 1.0, [4, 6]).unwrap();
        let y = relu_forward(&x).unwrap();
        let gx = relu_backward(&y, &probe).unwrap();
        let worst = check_input_gradient(&x, &gx, |xi| {
            let y = relu_forward(xi)?;
            Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        })
        .unwrap();
        assert!(worst < GRADCHECK_TOL);
    }
}
