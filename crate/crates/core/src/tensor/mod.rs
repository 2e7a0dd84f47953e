//! Dense row-major tensors and the handful of operations the network needs.

mod counted;
mod rng;
mod scalar;

pub use counted::Counted;
pub use rng::Rng;
pub use scalar::{DType, Element, Scalar};

use crate::error::{Error, Result};
use rand_distr::{Distribution, StandardNormal};

/// Contiguous row-major N-dimensional array.
///
/// Every dimension is positive and `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            op,
            format!("dimensions must be positive, got {shape:?}"),
        ));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape("Tensor::new", &shape)?;
        if len != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = check_shape("Tensor::full", &shape).expect("invalid shape");
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len = check_shape("Tensor::from_fn", &shape).expect("invalid shape");
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Samples `U[lo, hi)` element-wise.
    pub fn uniform(rng: &mut Rng, lo: f64, hi: f64, shape: impl Into<Vec<usize>>) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "uniform range requires lo < hi, got [{lo}, {hi})"
            )));
        }
        let shape = shape.into();
        check_shape("uniform", &shape)?;
        Ok(Self::from_fn(shape, |_| {
            T::from_f64(lo + (hi - lo) * rng.next_f64())
        }))
    }

    /// Samples `N(mean, std^2)` element-wise.
    pub fn normal(rng: &mut Rng, mean: f64, std: f64, shape: impl Into<Vec<usize>>) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "normal requires finite mean and std >= 0, got ({mean}, {std})"
            )));
        }
        let shape = shape.into();
        check_shape("normal", &shape)?;
        Ok(Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(mean + std * z)
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false: tensors have at least one element.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape("reshape", &shape)?;
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `self` unchanged, or an error naming `op` if any element is NaN/Inf.
    pub fn finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Largest absolute element.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| m.max(if v < T::zero() { -v } else { v }))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .finite(op)
    }

    fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .finite(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul_scalar(&self, s: T) -> Result<Self> {
        self.map("mul_scalar", |v| v * s)
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Result<Self> {
        self.map("exp", |v| v.exp())
    }

    /// Natural logarithm; non-positive inputs yield a non-finite error.
    pub fn ln(&self) -> Result<Self> {
        self.map("ln", |v| v.ln())
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sums out `axis`; the result drops that dimension (rank-1 inputs give a
    /// single-element tensor of shape `[1]`).
    pub fn sum_over_axis(&self, axis: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor { shape, data: out }.finite("sum_over_axis")
    }

    /// `[m×k] · [k×n] -> [m×n]`.
    ///
    /// Each output element accumulates its `k` products in index order, so
    /// the result equals a naive triple loop bit for bit.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                T::axpy(self.data[i * k + p], &other.data[p * n..(p + 1) * n], row);
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
        .finite("matmul")
    }

    /// Stable descending argsort of a rank-1 tensor.
    pub fn argsort_desc(&self) -> Result<Vec<usize>> {
        if self.rank() != 1 {
            return Err(Error::shape(
                "argsort_desc",
                format!("expected rank 1, got {:?}", self.shape),
            ));
        }
        Ok(argsort_desc(&self.data))
    }
}

/// Indices ordered by descending value; ties keep ascending index order.
pub fn argsort_desc<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Row-wise softmax of a `[rows × cols]` buffer, max-shifted.
pub fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(cols) {
        let m = row.iter().copied().fold(row[0], T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(id.matmul(&b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Rng::new(5);
        let a = Tensor::<f64>::normal(&mut rng, 0.0, 1.0, [5, 7]).unwrap();
        let b = Tensor::<f64>::normal(&mut rng, 0.0, 1.0, [7, 3]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), triple_loop(&a, &b).as_slice());
    }

    #[test]
    fn matmul_rejects_bad_shapes_and_overflow() {
        let a = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
        let big = t(&[1, 1], &[f64::MAX]);
        assert!(matches!(
            big.matmul(&t(&[1, 1], &[2.0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_std_normal_is_mean() {
        let mut rng = Rng::new(1);
        let z = Tensor::<f64>::normal(&mut rng, 0.0, 0.0, [4]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut rng = Rng::new(7);
        let u = Tensor::<f64>::uniform(&mut rng, 0.0, 1.0, [1_000_000]).unwrap();
        let mean = u.sum() / 1e6;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");

        let mut rng = Rng::new(11);
        let n = Tensor::<f64>::normal(&mut rng, 2.0, 3.0, [1_000_000]).unwrap();
        let m = n.sum() / 1e6;
        let var = n.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 1e6;
        assert!((m - 2.0).abs() < 0.02, "mean {m}");
        assert!((var.sqrt() - 3.0).abs() < 0.03, "std {}", var.sqrt());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = Tensor::<f32>::normal(&mut Rng::new(42), 0.0, 1.0, [64]).unwrap();
        let b = Tensor::<f32>::normal(&mut Rng::new(42), 0.0, 1.0, [64]).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut rng = Rng::new(0);
        assert!(Tensor::<f64>::uniform(&mut rng, 1.0, 1.0, [2]).is_err());
        assert!(Tensor::<f64>::normal(&mut rng, 0.0, -1.0, [2]).is_err());
    }

    #[test]
    fn elementwise_suite() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(
            t(&[3], &[0.3, 0.9, 0.3]).argsort_desc().unwrap(),
            vec![1, 0, 2]
        );
        let ones = Tensor::<f64>::ones([3, 4]);
        let s = ones.sum_over_axis(0).unwrap();
        assert_eq!(s.shape(), &[4]);
        assert_eq!(s.data(), &[3.0; 4]);
        assert!(matches!(
            ones.sum_over_axis(2),
            Err(Error::Axis { axis: 2, rank: 2 })
        ));
        assert_eq!(x.add(&x).unwrap().data(), &[-2.0, 0.0, 4.0]);
        assert_eq!(x.sub(&x).unwrap().data(), &[0.0; 3]);
        assert_eq!(x.mul_scalar(0.5).unwrap().data(), &[-0.5, 0.0, 1.0]);
        assert!((x.exp().unwrap().data()[2] - 2f64.exp()).abs() < 1e-15);
        assert!(matches!(x.ln(), Err(Error::NonFinite("ln"))));
        assert!(x.add(&ones).is_err());
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::zeros([2, 3]).reshape([3, 2]).is_ok());
        assert!(Tensor::<f32>::zeros([2, 3]).reshape([4, 2]).is_err());
    }

    #[test]
    fn softmax_rows_normalized() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, 1000.0, 1000.0, 1000.0], 3);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matmul_oracle_random_shapes(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = Tensor::<f64>::normal(&mut rng, 0.0, 1.0, [m, k]).unwrap();
            let b = Tensor::<f64>::normal(&mut rng, 0.0, 1.0, [k, n]).unwrap();
            let (got, want) = (a.matmul(&b).unwrap(), triple_loop(&a, &b));
            prop_assert_eq!(got.data(), want.as_slice());

            let af = a.cast::<f32>();
            let bf = b.cast::<f32>();
            let got = af.matmul(&bf).unwrap();
            let want = triple_loop(&af.cast(), &bf.cast());
            let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (g, w) in got.data().iter().zip(&want) {
                prop_assert!(((*g as f64) - w).abs() <= 1e-6 * scale * k as f64);
            }
        }

        #[test]
        fn sum_over_axis_oracle(d0 in 1usize..=16, d1 in 1usize..=16, d2 in 1usize..=16, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let x = Tensor::<f64>::normal(&mut rng, 0.0, 1.0, [d0, d1, d2]).unwrap();
            let s = x.sum_over_axis(1).unwrap();
            for a in 0..d0 {
                for c in 0..d2 {
                    let mut acc = 0.0;
                    for b in 0..d1 {
                        acc += x.data()[(a * d1 + b) * d2 + c];
                    }
                    prop_assert_eq!(s.data()[a * d2 + c], acc);
                }
            }
        }

        #[test]
        fn argsort_desc_is_stable_descending(v in proptest::collection::vec(0u8..4, 1..32)) {
            let x: Vec<f64> = v.iter().map(|&b| b as f64).collect();
            let idx = argsort_desc(&x);
            for w in idx.windows(2) {
                prop_assert!(x[w[0]] > x[w[1]] || (x[w[0]] == x[w[1]] && w[0] < w[1]));
            }
        }
    }
}
