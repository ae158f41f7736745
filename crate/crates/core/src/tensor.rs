//! Dense row-major `f64` arrays.
//!
//! Sequence tensors put time on the leading axis (`T x channels`). Tensors are
//! values: every operation allocates its result and leaves its inputs alone.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: range {from}..{to} invalid for axis of length {len}")]
    Bounds {
        op: &'static str,
        from: usize,
        to: usize,
        len: usize,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    Layout { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Max,
    Sum,
    Mean,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.contains(&0) || len != data.len() {
            return Err(TensorError::Layout {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.contains(&0), "zero-sized dimension in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("empty vector")
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Contract {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// In-place `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add_assign", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.rank() != 2 {
            return Err(TensorError::Contract {
                op,
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        Ok(())
    }

    /// Standard matrix product of an `M x K` and a `K x N` matrix.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(shape_err("matmul", self, rhs));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self^T x rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[0] != rhs.shape[0] {
            return Err(shape_err("matmul_tn", self, rhs));
        }
        let (k, m, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &rhs.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self x rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[1] {
            return Err(shape_err("matmul_nt", self, rhs));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a_row, b_row);
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Pointwise `op` on identical shapes, or an `M x N` matrix against a
    /// `1 x N` (or length-`N`) row bias.
    pub fn elementwise(&self, rhs: &Tensor, op: ElementwiseOp) -> Result<Tensor> {
        let f = match op {
            ElementwiseOp::Add => |a: f64, b: f64| a + b,
            ElementwiseOp::Sub => |a: f64, b: f64| a - b,
            ElementwiseOp::Mul => |a: f64, b: f64| a * b,
        };
        if self.shape == rhs.shape {
            let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if is_row_bias_for(self, rhs) {
            let n = self.shape[1];
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, rhs.data[i % n]))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        Err(shape_err(
            match op {
                ElementwiseOp::Add => "add",
                ElementwiseOp::Sub => "sub",
                ElementwiseOp::Mul => "mul",
            },
            self,
            rhs,
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, ElementwiseOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, ElementwiseOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, ElementwiseOp::Mul)
    }

    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&self, axis: usize, op: ReduceOp) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                op: "reduce",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| self.data[(o * len + k) * inner + i];
                let v = match op {
                    ReduceOp::Max => (1..len).fold(at(0), |m, k| m.max(at(k))),
                    ReduceOp::Sum => (0..len).fold(0.0, |s, k| s + at(k)),
                    ReduceOp::Mean => (0..len).fold(0.0, |s, k| s + at(k)) / len as f64,
                };
                out.push(v);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Joins two tensors along `axis`; all other dimensions must agree.
    pub fn concat(&self, rhs: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: self.rank(),
            });
        }
        let compatible = self.rank() == rhs.rank()
            && self
                .shape
                .iter()
                .zip(&rhs.shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(shape_err("concat", self, rhs));
        }
        let (outer, la, inner) = self.split_at_axis(axis);
        let lb = rhs.shape[axis];
        let mut data = Vec::with_capacity(self.len() + rhs.len());
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&rhs.data[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = la + lb;
        Ok(Tensor { shape, data })
    }

    /// Keeps indices `from..to` of `axis`.
    pub fn slice(&self, axis: usize, from: usize, to: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = self.split_at_axis(axis);
        if from >= to || to > len {
            return Err(TensorError::Bounds {
                op: "slice",
                from,
                to,
                len,
            });
        }
        let mut data = Vec::with_capacity(outer * (to - from) * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * len + from) * inner..(o * len + to) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = to - from;
        Ok(Tensor { shape, data })
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Reverses the order of rows (time reversal for `T x C` sequences).
    pub fn reverse_rows(&self) -> Tensor {
        let c: usize = self.shape[1..].iter().product();
        let data = self.data.chunks(c).rev().flatten().copied().collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }
}

fn is_row_bias_for(m: &Tensor, bias: &Tensor) -> bool {
    if m.rank() != 2 {
        return false;
    }
    match bias.shape.as_slice() {
        [n] => *n == m.shape[1],
        [1, n] => *n == m.shape[1],
        _ => false,
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
        let z = Tensor::zeros(&[2, 3]).matmul(&Tensor::ones(&[3, 2])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]));
        let p = m(&[&[1.0, 2.0]]).matmul(&m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(p, m(&[&[11.0]]));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] and [2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = m(&[&[1.0, -2.0, 3.0], &[0.5, 4.0, -1.0]]);
        let b = m(&[&[2.0, 1.0], &[0.0, -3.0]]);
        assert_eq!(a.matmul_tn(&b).unwrap(), a.transpose().unwrap().matmul(&b).unwrap());
        let c = m(&[&[1.0, 1.0, 2.0]]);
        assert_eq!(a.matmul_nt(&c).unwrap(), a.matmul(&c.transpose().unwrap()).unwrap());
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.mul(&Tensor::zeros(&[2])).unwrap(), Tensor::zeros(&[2]));
        let mat = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let bias = m(&[&[10.0, 20.0, 30.0]]);
        assert_eq!(mat.add(&bias).unwrap(), m(&[&[11.0, 22.0, 33.0], &[14.0, 25.0, 36.0]]));
        assert!(matches!(mat.add(&Tensor::zeros(&[2])), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn reduce_examples() {
        let v = Tensor::vector(vec![1.0, 5.0, 3.0]);
        assert_eq!(v.reduce(0, ReduceOp::Max).unwrap().item(), 5.0);
        let s = m(&[&[1.0, 2.0], &[3.0, 4.0]]).reduce(0, ReduceOp::Sum).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
        let r = m(&[&[1.0, 2.0], &[3.0, 4.0]]).reduce(1, ReduceOp::Sum).unwrap();
        assert_eq!(r.data(), &[3.0, 7.0]);
        let mean = Tensor::vector(vec![2.0, 4.0]).reduce(0, ReduceOp::Mean).unwrap();
        assert_eq!(mean.item(), 3.0);
        assert!(matches!(v.reduce(1, ReduceOp::Sum), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn concat_slice_transpose_examples() {
        let c = Tensor::vector(vec![1.0]).concat(&Tensor::vector(vec![2.0]), 0).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0]);
        let s = Tensor::vector(vec![1.0, 2.0, 3.0]).slice(0, 1, 3).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0]);
        let x = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(x.transpose().unwrap().transpose().unwrap(), x);
        assert!(matches!(x.slice(0, 1, 3), Err(TensorError::Bounds { .. })));
        assert!(matches!(
            x.concat(&Tensor::zeros(&[1, 2]), 0),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
    }

    fn chain() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
        (1usize..5, 1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(a, b, c, d)| (matrix(a, b), matrix(b, c), matrix(c, d)))
    }

    proptest! {
        #[test]
        fn matmul_is_associative((a, b, c) in chain()) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn concat_then_slice_round_trips(
            rows_a in 1usize..5, rows_b in 1usize..5, cols in 1usize..5, axis in 0usize..2,
            seed in prop::collection::vec(-10.0f64..10.0, 64),
        ) {
            let (sa, sb) = if axis == 0 {
                ([rows_a, cols], [rows_b, cols])
            } else {
                ([cols, rows_a], [cols, rows_b])
            };
            let a = Tensor::new(&sa, seed[..rows_a * cols].to_vec()).unwrap();
            let b = Tensor::new(&sb, seed[32..32 + rows_b * cols].to_vec()).unwrap();
            let joined = a.concat(&b, axis).unwrap();
            prop_assert_eq!(joined.slice(axis, 0, rows_a).unwrap(), a);
            prop_assert_eq!(joined.slice(axis, rows_a, rows_a + rows_b).unwrap(), b);
        }

        #[test]
        fn reduce_sum_matches_sequential_slices(
            rows in 1usize..6, cols in 1usize..6,
            ints in prop::collection::vec(-(1i64 << 45)..(1i64 << 45), 36),
        ) {
            let data: Vec<f64> = ints[..rows * cols].iter().map(|&v| v as f64).collect();
            let t = Tensor::new(&[rows, cols], data).unwrap();
            let reduced = t.reduce(0, ReduceOp::Sum).unwrap();
            let mut acc = t.slice(0, 0, 1).unwrap().reshape(&[cols]).unwrap();
            for r in 1..rows {
                acc = acc.add(&t.slice(0, r, r + 1).unwrap().reshape(&[cols]).unwrap()).unwrap();
            }
            prop_assert_eq!(reduced, acc);
        }
    }
}
