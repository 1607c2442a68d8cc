//! Dense row-major tensors of `f64` and the handful of ops the network needs:
//! matmul, 2-D transpose, axis mean, and elementwise arithmetic.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("reduce_mean: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("tensor: shape {shape:?} expects {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("tensor: extent 0 in shape {shape:?}")]
    ZeroExtent { shape: Vec<usize> },
}

/// Elementwise binary operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

/// Dense n-dimensional array of `f64`, row-major, contiguous.
///
/// Immutable in practice: every op returns a fresh tensor, so values are safe
/// to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking `data.len() == product(shape)` and rejecting
    /// zero extents. Rank-0 (scalar) tensors have shape `[]` and one element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![1.0; n],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Rank-2 constructor from nested rows; rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if m == 0 || n == 0 {
            return Err(TensorError::ZeroExtent { shape: vec![m, n] });
        }
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(TensorError::DataLength {
                    shape: vec![m, n],
                    expected: n,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row count / column count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Rank-2 element access.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Rank-2 row slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    fn expect_rank(&self, op: &'static str, expected: usize) -> Result<(), TensorError> {
        if self.rank() != expected {
            return Err(TensorError::RankMismatch {
                op,
                expected,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Matrix product of two rank-2 tensors, `[m×k] · [k×n] -> [m×n]`.
    ///
    /// Loop order is i-k-j over contiguous rows; each output element
    /// accumulates its k terms in ascending order, so results are
    /// bit-identical run to run (and to the naive triple loop).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_rank("matmul", 2)?;
        other.expect_rank("matmul", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                    *o += a_ip * b_pj;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Tensor, TensorError> {
        self.expect_rank("transpose2d", 2)?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn reduce_mean(&self, axis: usize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let extent = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let scale = 1.0 / extent as f64;
        for v in &mut out {
            *v *= scale;
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Pointwise add/sub/mul of two tensors of identical shape.
    pub fn elementwise(&self, other: &Tensor, op: ElemOp) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: match op {
                    ElemOp::Add => "add",
                    ElemOp::Sub => "sub",
                    ElemOp::Mul => "mul",
                },
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| match op {
                ElemOp::Add => a + b,
                ElemOp::Sub => a - b,
                ElemOp::Mul => a * b,
            })
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(other, ElemOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(other, ElemOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(other, ElemOp::Mul)
    }

    /// Scales every element by `s`.
    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// In-place `self += other * s`; shapes must match.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent triple-loop matmul used as the oracle.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
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
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    // Tiny deterministic value stream for test fixtures.
    fn lcg_vals(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn new_rejects_bad_length_and_zero_extent() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroExtent { .. })
        ));
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let a = Tensor::new(vec![3, 2], lcg_vals(1, 6)).unwrap();
        let c = identity(3).matmul(&a).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Tensor::new(vec![3, 2], lcg_vals(2, 6)).unwrap();
        let z = Tensor::zeros(vec![2, 3]);
        let c = z.matmul(&a).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.shape(), &[2, 2]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = Tensor::new(vec![2, 3], lcg_vals(3, 6)).unwrap();
        let b = Tensor::new(vec![3, 2], lcg_vals(4, 6)).unwrap();
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert_eq!(got.shape(), want.shape());
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12, "got {g}, want {w}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transpose_is_involution() {
        let a = Tensor::new(vec![3, 4], lcg_vals(5, 12)).unwrap();
        assert_eq!(a.transpose2d().unwrap().transpose2d().unwrap(), a);
    }

    #[test]
    fn transpose_symmetric_is_identity_map() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 5.0, 5.0, 3.0]).unwrap();
        assert_eq!(a.transpose2d().unwrap(), a);
    }

    #[test]
    fn transpose_row_to_column() {
        let a = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let t = a.transpose2d().unwrap();
        assert_eq!(t.shape(), &[3, 1]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn transpose_rejects_non_rank2() {
        let a = Tensor::zeros(vec![2, 2, 2]);
        assert!(matches!(
            a.transpose2d(),
            Err(TensorError::RankMismatch { .. })
        ));
    }

    #[test]
    fn reduce_mean_constant_tensor() {
        let a = Tensor::new(vec![4, 3], vec![2.5; 12]).unwrap();
        let m = a.reduce_mean(0).unwrap();
        assert_eq!(m.shape(), &[3]);
        assert!(m.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn reduce_mean_of_ones_is_one() {
        let a = Tensor::ones(vec![7]);
        let m = a.reduce_mean(0).unwrap();
        assert_eq!(m.shape(), &[] as &[usize]);
        assert_eq!(m.data(), &[1.0]);
    }

    #[test]
    fn reduce_mean_axis0_small_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = a.reduce_mean(0).unwrap();
        assert_eq!(m.data(), &[2.0, 3.0]);
        let m1 = a.reduce_mean(1).unwrap();
        assert_eq!(m1.data(), &[1.5, 3.5]);
    }

    #[test]
    fn reduce_mean_axis_out_of_range() {
        let a = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            a.reduce_mean(2),
            Err(TensorError::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn elementwise_identities() {
        let a = Tensor::new(vec![2, 3], lcg_vals(6, 6)).unwrap();
        assert_eq!(a.add(&a.zeros_like()).unwrap(), a);
        assert!(a.sub(&a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.mul(&Tensor::ones(vec![2, 3])).unwrap(), a);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 2]);
        assert!(matches!(
            a.add(&b),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn small_matrix(m: usize, n: usize) -> impl Strategy<Value = Tensor> {
            proptest::collection::vec(-1.0f64..1.0, m * n)
                .prop_map(move |v| Tensor::new(vec![m, n], v).unwrap())
        }

        proptest! {
            #[test]
            fn matmul_associative(
                a in small_matrix(3, 4),
                b in small_matrix(4, 2),
                c in small_matrix(2, 5),
            ) {
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                for (l, r) in left.data().iter().zip(right.data()) {
                    let denom = l.abs().max(r.abs()).max(1.0);
                    prop_assert!((l - r).abs() / denom <= 1e-9);
                }
            }

            #[test]
            fn matmul_equals_oracle(a in small_matrix(4, 3), b in small_matrix(3, 5)) {
                let got = a.matmul(&b).unwrap();
                let want = matmul_oracle(&a, &b);
                prop_assert_eq!(got.shape(), want.shape());
                for (g, w) in got.data().iter().zip(want.data()) {
                    prop_assert!((g - w).abs() <= 1e-12);
                }
            }

            #[test]
            fn reduce_mean_of_concat_is_weighted_mean(
                a in small_matrix(3, 4),
                b in small_matrix(5, 4),
            ) {
                let mut data = a.data().to_vec();
                data.extend_from_slice(b.data());
                let cat = Tensor::new(vec![8, 4], data).unwrap();
                let got = cat.reduce_mean(0).unwrap();
                let ma = a.reduce_mean(0).unwrap();
                let mb = b.reduce_mean(0).unwrap();
                for ((g, x), y) in got.data().iter().zip(ma.data()).zip(mb.data()) {
                    let want = (3.0 * x + 5.0 * y) / 8.0;
                    prop_assert!((g - want).abs() <= 1e-12);
                }
            }
        }
    }
}
