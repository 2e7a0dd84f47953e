//! Layers with hand-written forward and backward passes.
//!
//! Every layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients in `backward`; callers zero gradients
//! between optimizer steps with [`zero_grad`].

mod activation;
mod batchnorm;
mod conv;
mod dropout;
pub mod gradcheck;
mod linear;
mod loss;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::BatchNorm1d;
pub use conv::Conv1d;
pub use dropout::SpatialDropout;
pub use linear::Linear;
pub use loss::{cross_entropy, SoftmaxCrossEntropy};

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A persistent tensor exposed by a module.
pub enum Slot<'a, T: Scalar> {
    /// Trainable parameter with its gradient accumulator. `decay` is false for
    /// tensors excluded from weight decay.
    Param {
        value: &'a mut Tensor<T>,
        grad: &'a mut Tensor<T>,
        decay: bool,
    },
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut Tensor<T>),
}

/// Named access to every persistent tensor of a model.
///
/// `visit` and `visit_mut` must enumerate the same names in the same order.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grad<T: Scalar, M: Module<T> + ?Sized>(model: &mut M) {
    model.visit_mut("", &mut |_, slot| {
        if let Slot::Param { grad, .. } = slot {
            grad.fill(T::zero());
        }
    });
}

/// Number of trainable scalars.
pub fn param_count<T: Scalar, M: Module<T> + ?Sized>(model: &mut M) -> usize {
    let mut n = 0;
    model.visit_mut("", &mut |_, slot| {
        if let Slot::Param { value, .. } = slot {
            n += value.len();
        }
    });
    n
}

/// 64-bit FNV-1a over names, shapes and raw element bits of every tensor.
///
/// Used to assert that frozen modules are left untouched.
pub fn state_hash<T: Scalar, M: Module<T> + ?Sized>(model: &M) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    model.visit("", &mut |name, t| {
        eat(name.as_bytes());
        for &d in t.shape() {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            eat(&v.to_f64().to_bits().to_le_bytes());
        }
    });
    h
}

/// Channel-first view helpers shared by the sequence layers: a rank-2
/// `[B, C]` tensor is treated as `[B, C, 1]`.
pub(crate) fn bcn(x: &Tensor<impl Scalar>, op: &'static str) -> crate::Result<(usize, usize, usize)> {
    match x.shape() {
        &[b, c] => Ok((b, c, 1)),
        &[b, c, n] => Ok((b, c, n)),
        s => Err(crate::Error::shape(
            op,
            format!("expected [B, C] or [B, C, N], got {s:?}"),
        )),
    }
}
