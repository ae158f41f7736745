//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every value produced during a forward pass together with
//! the rule that maps the output gradient back onto its parents. Calling
//! [`Tape::backward`] consumes the tape and returns a [`Gradients`] map keyed by
//! node id. Nodes are replayed strictly in reverse id order and each rule
//! scatters into its parents in argument order, so repeated runs produce
//! bit-identical gradients.

use thiserror::Error;

use crate::tensor::{ReduceOp, Result, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward() needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("finite_diff_check: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Maps the gradient of a node's output to one gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a custom operation. `backward` receives the gradient of the
    /// output and must return one gradient per parent, shaped like that parent.
    pub fn record(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: Some(Box::new(backward)),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let sb = self.value(b).shape().to_vec();
        Ok(self.record(out, &[a, b], move |g| vec![g.clone(), unbroadcast(g, &sb)]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let sb = self.value(b).shape().to_vec();
        Ok(self.record(out, &[a, b], move |g| vec![g.clone(), unbroadcast(g, &sb).scale(-1.0)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.mul(&vb)?;
        Ok(self.record(out, &[a, b], move |g| {
            let ga = g.mul(&vb).expect("shape checked in forward");
            let gb = unbroadcast(&g.mul(&va).unwrap(), vb.shape());
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.record(out, &[a], move |g| vec![g.scale(k)])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.matmul(&vb)?;
        Ok(self.record(out, &[a, b], move |g| {
            vec![g.matmul_nt(&vb).unwrap(), va.matmul_tn(g).unwrap()]
        }))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out = Tensor::scalar(self.value(a).sum_all());
        self.record(out, &[a], move |g| vec![Tensor::filled(&shape, g.item())])
    }

    pub fn reduce(&mut self, a: Var, axis: usize, op: ReduceOp) -> Result<Var> {
        let va = self.value(a).clone();
        let out = va.reduce(axis, op)?;
        Ok(self.record(out, &[a], move |g| vec![reduce_backward(&va, axis, op, g)]))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).concat(self.value(b), axis)?;
        let split = self.value(a).shape()[axis];
        let total = out.shape()[axis];
        Ok(self.record(out, &[a, b], move |g| {
            vec![g.slice(axis, 0, split).unwrap(), g.slice(axis, split, total).unwrap()]
        }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, from: usize, to: usize) -> Result<Var> {
        let va = self.value(a);
        let out = va.slice(axis, from, to)?;
        let shape = va.shape().to_vec();
        Ok(self.record(out, &[a], move |g| {
            let mut full = Tensor::zeros(&shape);
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let (len, width) = (shape[axis], to - from);
            let dst = full.data_mut();
            for o in 0..outer {
                let src = &g.data()[o * width * inner..(o + 1) * width * inner];
                dst[(o * len + from) * inner..(o * len + to) * inner].copy_from_slice(src);
            }
            vec![full]
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.record(out, &[a], |g| vec![g.transpose().unwrap()]))
    }

    /// Time reversal of a `T x C` sequence.
    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).reverse_rows();
        self.record(out, &[a], |g| vec![g.reverse_rows()])
    }

    /// Runs reverse accumulation from the scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> std::result::Result<Gradients, AutodiffError> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&shapes[loss.0], 1.0));

        let mut nodes = self.nodes;
        nodes.truncate(loss.0 + 1);
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(backward) = node.backward else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(pg.shape(), shapes[p.0].as_slice(), "gradient shape for node {}", p.0);
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of the loss with respect to every node that was on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Sums a gradient back down to a row-bias shape when the forward broadcast.
fn unbroadcast(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    g.reduce(0, ReduceOp::Sum)
        .and_then(|r| r.reshape(target))
        .expect("row-bias broadcast")
}

fn reduce_backward(input: &Tensor, axis: usize, op: ReduceOp, g: &Tensor) -> Tensor {
    let shape = input.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(shape);
    let x = input.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let gi = g.data()[o * inner + i];
            let idx = |k: usize| (o * len + k) * inner + i;
            match op {
                ReduceOp::Sum => (0..len).for_each(|k| dst[idx(k)] = gi),
                ReduceOp::Mean => (0..len).for_each(|k| dst[idx(k)] = gi / len as f64),
                ReduceOp::Max => {
                    // earliest maximal index receives the gradient
                    let best = (1..len).fold(0, |b, k| if x[idx(k)] > x[idx(b)] { k } else { b });
                    dst[idx(best)] = gi;
                }
            }
        }
    }
    out
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// and returns the maximum relative error over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> std::result::Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(AutodiffError::Contract(format!("eps must be positive, got {eps}")));
    }
    let eval = |point: Tensor| -> std::result::Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(point);
        let y = f(&mut tape, xv)?;
        let out = tape.value(y);
        if out.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.get(xv);

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[3, 2], 1));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x), Tensor::ones(&[3, 2]));
        assert_eq!(g.get(loss).item(), 1.0);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss).unwrap().get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let y = tape.leaf(random(&[4], 2));
        let a = tape.sum(y);
        let b = tape.sum(y);
        let loss = tape.add(a, b).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(y), Tensor::filled(&[4], 2.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn disconnected_variable_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[2], 3));
        let unused = tape.leaf(random(&[3], 4));
        let loss = tape.sum(x);
        assert_eq!(tape.backward(loss).unwrap().get(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn finite_diff_linear_is_exact() {
        let err = finite_diff_check(|t, x| Ok(t.sum(x)), &random(&[5], 5), 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn finite_diff_cubic() {
        let f = |t: &mut Tape, x: Var| {
            let sq = t.mul(x, x)?;
            let cube = t.mul(sq, x)?;
            Ok(t.sum(cube))
        };
        let err = finite_diff_check(f, &random(&[6], 6), 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn finite_diff_rejects_bad_inputs() {
        let x = random(&[3], 7);
        assert!(matches!(
            finite_diff_check(|t, x| Ok(t.sum(x)), &x, 0.0),
            Err(AutodiffError::Contract(_))
        ));
        assert!(matches!(
            finite_diff_check(|_, x| Ok(x), &x, 1e-5),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn primitive_ops_match_finite_differences() {
        let w = random(&[3, 4], 8);
        let bias = random(&[4], 9);
        let other = random(&[2, 3], 10);
        let f = move |t: &mut Tape, x: Var| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(bias.clone());
            let ov = t.leaf(other.clone());
            let h = t.matmul(x, wv)?; // 2x4
            let h = t.add(h, bv)?;
            let h = t.mul(h, h)?;
            let joined = t.concat(h, x, 1)?; // 2x7
            let part = t.slice(joined, 1, 1, 6)?;
            let tr = t.transpose(part)?; // 5x2
            let rev = t.reverse_rows(tr);
            let mx = t.reduce(rev, 1, ReduceOp::Max)?;
            let mean = t.reduce(ov, 1, ReduceOp::Mean)?;
            let xs = t.reduce(x, 1, ReduceOp::Sum)?;
            let d = t.sub(xs, mean)?;
            let d = t.mul(d, d)?;
            let a = t.sum(mx);
            let b = t.sum(d);
            let b = t.scale(b, 0.5);
            t.add(a, b)
        };
        let err = finite_diff_check(f, &random(&[2, 3], 11), 1e-6).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn bias_broadcast_gradients() {
        let x = random(&[3, 2], 12);
        let f = move |t: &mut Tape, b: Var| {
            let xv = t.leaf(x.clone());
            let y = t.add(xv, b)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        };
        let err = finite_diff_check(f, &random(&[2], 13), 1e-6).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(random(&[4, 4], 14));
            let y = tape.matmul(x, x).unwrap();
            let z = tape.mul(y, x).unwrap();
            let a = tape.sum(z);
            let b = tape.sum(y);
            let loss = tape.add(a, b).unwrap();
            tape.backward(loss).unwrap().get(x)
        };
        assert_eq!(run().data(), run().data());
    }
}
