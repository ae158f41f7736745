//! Network building blocks recorded on a [`Tape`].
//!
//! Each layer is a single fused tape node with a hand-written backward rule;
//! the finite-difference tests at the bottom of this file are what keep those
//! rules honest. Sequences are `T x channels` with time on the leading axis.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Stabilizer added to the layer maximum in [`norm_relu`].
pub const NORM_RELU_EPS: f64 = 1e-5;

/// Temporal convolution filters: `kernels` is `F x C_in x L`, `bias` is `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1DParams<P = Tensor> {
    pub kernels: P,
    pub bias: P,
}

/// The twelve weight blocks of one LSTM direction. Input weights are
/// `H x d_in`, recurrent weights `H x H`, biases `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<P = Tensor> {
    pub w_xi: P,
    pub w_xf: P,
    pub w_xo: P,
    pub w_xc: P,
    pub w_hi: P,
    pub w_hf: P,
    pub w_ho: P,
    pub w_hc: P,
    pub b_i: P,
    pub b_f: P,
    pub b_o: P,
    pub b_c: P,
}

/// Output projection: `w` is `c x d_in`, `b` is `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<P = Tensor> {
    pub w: P,
    pub b: P,
}

impl<P> LstmParams<P> {
    pub const BLOCK_NAMES: [&'static str; 12] = [
        "w_xi", "w_xf", "w_xo", "w_xc", "w_hi", "w_hf", "w_ho", "w_hc", "b_i", "b_f", "b_o", "b_c",
    ];

    /// Blocks in [`Self::BLOCK_NAMES`] order.
    pub fn blocks(&self) -> [&P; 12] {
        [
            &self.w_xi, &self.w_xf, &self.w_xo, &self.w_xc, &self.w_hi, &self.w_hf, &self.w_ho, &self.w_hc, &self.b_i,
            &self.b_f, &self.b_o, &self.b_c,
        ]
    }

    pub fn from_blocks(blocks: [P; 12]) -> Self {
        let [w_xi, w_xf, w_xo, w_xc, w_hi, w_hf, w_ho, w_hc, b_i, b_f, b_o, b_c] = blocks;
        Self {
            w_xi,
            w_xf,
            w_xo,
            w_xc,
            w_hi,
            w_hf,
            w_ho,
            w_hc,
            b_i,
            b_f,
            b_o,
            b_c,
        }
    }
}

impl LstmParams<Tensor> {
    pub fn hidden(&self) -> usize {
        self.w_hi.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_xi.cols()
    }

    /// All-zero parameters.
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self::from_blocks(std::array::from_fn(|k| match k {
            0..=3 => Tensor::zeros(&[hidden, input_dim]),
            4..=7 => Tensor::zeros(&[hidden, hidden]),
            _ => Tensor::zeros(&[hidden]),
        }))
    }

    fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden(), self.input_dim());
        for (k, block) in self.blocks().iter().enumerate() {
            let want: &[usize] = match k {
                0..=3 => &[h, d],
                4..=7 => &[h, h],
                _ => &[h],
            };
            if block.shape() != want {
                return Err(TensorError::Contract {
                    op: "lstm",
                    msg: format!(
                        "block {} has shape {:?}, expected {:?}",
                        Self::BLOCK_NAMES[k],
                        block.shape(),
                        want
                    ),
                });
            }
        }
        Ok(())
    }
}

fn contract(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Contract { op, msg: msg.into() }
}

fn require_matrix(t: &Tensor, op: &'static str) -> Result<()> {
    if t.rank() != 2 {
        return Err(contract(
            op,
            format!("expected a T x C sequence, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Stride-1 convolution along time with zero "same" padding: `floor(L/2)`
/// frames on the left and `L - 1 - floor(L/2)` on the right, so the output
/// keeps the input length.
pub fn conv1d_same(tape: &mut Tape, x: Var, p: &Conv1DParams<Var>) -> Result<Var> {
    let xv = tape.value(x).clone();
    let kernels = tape.value(p.kernels).clone();
    let bias = tape.value(p.bias).clone();
    require_matrix(&xv, "conv1d_same")?;
    if kernels.rank() != 3 || kernels.shape()[1] != xv.cols() {
        return Err(TensorError::Shape {
            op: "conv1d_same",
            lhs: xv.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    let (filters, channels, len) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    if bias.shape() != [filters] {
        return Err(TensorError::Shape {
            op: "conv1d_same",
            lhs: kernels.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let steps = xv.rows();
    let pad_left = len / 2;

    // weights as F x (L*C), column index tau*C + ch
    let mut wm = Tensor::zeros(&[filters, len * channels]);
    for j in 0..filters {
        for ch in 0..channels {
            for tau in 0..len {
                wm.data_mut()[j * len * channels + tau * channels + ch] =
                    kernels.data()[(j * channels + ch) * len + tau];
            }
        }
    }
    let cols = im2col(&xv, len, pad_left);
    let out = cols.matmul_nt(&wm)?.add(&bias)?;

    Ok(tape.record(out, &[x, p.kernels, p.bias], move |g| {
        let dwm = g.matmul_tn(&cols).unwrap();
        let mut dk = Tensor::zeros(&[filters, channels, len]);
        for j in 0..filters {
            for ch in 0..channels {
                for tau in 0..len {
                    dk.data_mut()[(j * channels + ch) * len + tau] =
                        dwm.data()[j * len * channels + tau * channels + ch];
                }
            }
        }
        let db = column_sums(g);
        let dcols = g.matmul(&wm).unwrap();
        let dx = col2im(&dcols, steps, channels, len, pad_left);
        vec![dx, dk, db]
    }))
}

fn im2col(x: &Tensor, len: usize, pad_left: usize) -> Tensor {
    let (steps, channels) = (x.rows(), x.cols());
    let mut cols = Tensor::zeros(&[steps, len * channels]);
    let dst = cols.data_mut();
    for t in 0..steps {
        for tau in 0..len {
            let Some(src) = (t + tau).checked_sub(pad_left).filter(|&s| s < steps) else {
                continue;
            };
            let at = t * len * channels + tau * channels;
            dst[at..at + channels].copy_from_slice(x.row(src));
        }
    }
    cols
}

fn col2im(dcols: &Tensor, steps: usize, channels: usize, len: usize, pad_left: usize) -> Tensor {
    let mut dx = Tensor::zeros(&[steps, channels]);
    let dst = dx.data_mut();
    for t in 0..steps {
        for tau in 0..len {
            let Some(src) = (t + tau).checked_sub(pad_left).filter(|&s| s < steps) else {
                continue;
            };
            let at = t * len * channels + tau * channels;
            for ch in 0..channels {
                dst[src * channels + ch] += dcols.data()[at + ch];
            }
        }
    }
    dx
}

fn column_sums(m: &Tensor) -> Tensor {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// ReLU divided by the largest activation of the whole layer plus
/// [`NORM_RELU_EPS`]. Outputs lie in `[0, 1)`.
pub fn norm_relu(tape: &mut Tape, x: Var) -> Var {
    let xv = tape.value(x);
    let shape = xv.shape().to_vec();
    let relu: Vec<f64> = xv.data().iter().map(|&v| v.max(0.0)).collect();
    let mut argmax = 0;
    for (k, &r) in relu.iter().enumerate() {
        if r > relu[argmax] {
            argmax = k;
        }
    }
    let peak = relu[argmax];
    let denom = peak + NORM_RELU_EPS;
    let out = Tensor::new(&shape, relu.iter().map(|r| r / denom).collect()).unwrap();
    tape.record(out, &[x], move |g| {
        let mut dx: Vec<f64> = relu
            .iter()
            .zip(g.data())
            .map(|(&r, &gi)| if r > 0.0 { gi / denom } else { 0.0 })
            .collect();
        if peak > 0.0 {
            let through_max: f64 = relu.iter().zip(g.data()).map(|(r, gi)| gi * r).sum();
            dx[argmax] -= through_max / (denom * denom);
        }
        vec![Tensor::new(&shape, dx).unwrap()]
    })
}

/// Width-2 max pooling along time. Odd lengths are rejected; padding is the
/// caller's job.
pub fn max_pool_time(tape: &mut Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    require_matrix(xv, "max_pool_time")?;
    let (steps, channels) = (xv.rows(), xv.cols());
    if steps % 2 != 0 {
        return Err(contract("max_pool_time", format!("time length {steps} is odd")));
    }
    let half = steps / 2;
    let mut out = Tensor::zeros(&[half, channels]);
    // source row of each output entry; ties go to the earlier frame
    let mut picks = vec![0usize; half * channels];
    for t in 0..half {
        for ch in 0..channels {
            let (a, b) = (xv.get2(2 * t, ch), xv.get2(2 * t + 1, ch));
            let k = t * channels + ch;
            if b > a {
                out.data_mut()[k] = b;
                picks[k] = 2 * t + 1;
            } else {
                out.data_mut()[k] = a;
                picks[k] = 2 * t;
            }
        }
    }
    Ok(tape.record(out, &[x], move |g| {
        let mut dx = Tensor::zeros(&[steps, channels]);
        for (k, &src) in picks.iter().enumerate() {
            dx.data_mut()[src * channels + k % channels] += g.data()[k];
        }
        vec![dx]
    }))
}

/// Doubles the time resolution by repeating every frame twice.
pub fn upsample_repeat(tape: &mut Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    require_matrix(xv, "upsample_repeat")?;
    let (steps, channels) = (xv.rows(), xv.cols());
    let mut data = Vec::with_capacity(2 * xv.len());
    for t in 0..steps {
        data.extend_from_slice(xv.row(t));
        data.extend_from_slice(xv.row(t));
    }
    let out = Tensor::new(&[2 * steps, channels], data)?;
    Ok(tape.record(out, &[x], move |g| {
        let mut dx = Tensor::zeros(&[steps, channels]);
        for t in 0..steps {
            for ch in 0..channels {
                dx.data_mut()[t * channels + ch] = g.get2(2 * t, ch) + g.get2(2 * t + 1, ch);
            }
        }
        vec![dx]
    }))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-step values kept for backpropagation through time.
struct LstmStep {
    t: usize,
    gates: Vec<f64>, // i, f, o, g activations, each H long
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
}

/// One LSTM direction over a `T x d_in` sequence. With `reverse` the sequence
/// is consumed from the last frame to the first and each hidden state is
/// written back at its own frame index, so the output is in forward time
/// order either way. `initial` supplies `(h0, c0)`; zeros otherwise.
pub fn lstm(
    tape: &mut Tape,
    x: Var,
    p: &LstmParams<Var>,
    reverse: bool,
    initial: Option<(&Tensor, &Tensor)>,
) -> Result<Var> {
    let xv = tape.value(x).clone();
    let params = LstmParams::from_blocks(p.blocks().map(|v| tape.value(*v).clone()));
    params.validate()?;
    require_matrix(&xv, "lstm")?;
    let (hidden, input_dim) = (params.hidden(), params.input_dim());
    if xv.cols() != input_dim {
        return Err(TensorError::Shape {
            op: "lstm",
            lhs: xv.shape().to_vec(),
            rhs: params.w_xi.shape().to_vec(),
        });
    }
    let (h0, c0) = match initial {
        Some((h0, c0)) => {
            if h0.shape() != [hidden] || c0.shape() != [hidden] {
                return Err(contract("lstm", "initial state must have length H"));
            }
            (h0.data().to_vec(), c0.data().to_vec())
        }
        None => (vec![0.0; hidden], vec![0.0; hidden]),
    };

    let w_x = stack_rows(&params.blocks()[0..4]);
    let w_h = stack_rows(&params.blocks()[4..8]);
    let bias = Tensor::vector(params.blocks()[8..12].iter().flat_map(|b| b.data().to_vec()).collect());
    let pre = xv.matmul_nt(&w_x)?.add(&bias)?; // T x 4H

    let steps = xv.rows();
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    let mut out = Tensor::zeros(&[steps, hidden]);
    let mut cache = Vec::with_capacity(steps);
    let (mut h, mut c) = (h0, c0);
    for &t in &order {
        let mut z = pre.row(t).to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            *zr += crate::tensor::dot(&w_h.data()[r * hidden..(r + 1) * hidden], &h);
        }
        let mut gates = z;
        for (k, v) in gates.iter_mut().enumerate() {
            *v = if k < 3 * hidden { sigmoid(*v) } else { v.tanh() };
        }
        let (i, f, o, g) = (
            &gates[..hidden],
            &gates[hidden..2 * hidden],
            &gates[2 * hidden..3 * hidden],
            &gates[3 * hidden..],
        );
        let c_new: Vec<f64> = (0..hidden).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<f64> = (0..hidden).map(|k| o[k] * tanh_c[k]).collect();
        out.data_mut()[t * hidden..(t + 1) * hidden].copy_from_slice(&h_new);
        cache.push(LstmStep {
            t,
            gates,
            c: c_new.clone(),
            tanh_c,
            h_prev: std::mem::replace(&mut h, h_new),
            c_prev: std::mem::replace(&mut c, c_new),
        });
    }

    let mut parents = vec![x];
    parents.extend(p.blocks().iter().map(|v| **v));
    Ok(tape.record(out, &parents, move |g_out| {
        let mut dz_all = Tensor::zeros(&[steps, 4 * hidden]);
        let mut dw_h = Tensor::zeros(&[4 * hidden, hidden]);
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        for step in cache.iter().rev() {
            let gates = &step.gates;
            let dz = &mut dz_all.data_mut()[step.t * 4 * hidden..(step.t + 1) * 4 * hidden];
            for k in 0..hidden {
                let (i, f, o, g) = (
                    gates[k],
                    gates[hidden + k],
                    gates[2 * hidden + k],
                    gates[3 * hidden + k],
                );
                let dh = g_out.get2(step.t, k) + dh_next[k];
                let dc = dh * o * (1.0 - step.tanh_c[k] * step.tanh_c[k]) + dc_next[k];
                dz[k] = dc * g * i * (1.0 - i);
                dz[hidden + k] = dc * step.c_prev[k] * f * (1.0 - f);
                dz[2 * hidden + k] = dh * step.tanh_c[k] * o * (1.0 - o);
                dz[3 * hidden + k] = dc * i * (1.0 - g * g);
                dc_next[k] = dc * f;
                debug_assert!(step.c[k].is_finite());
            }
            for (row, &dzr) in dw_h.data_mut().chunks_exact_mut(hidden).zip(dz.iter()) {
                for (w, hp) in row.iter_mut().zip(&step.h_prev) {
                    *w += dzr * hp;
                }
            }
            for (k, d) in dh_next.iter_mut().enumerate() {
                *d = (0..4 * hidden).map(|r| dz[r] * w_h.data()[r * hidden + k]).sum();
            }
        }
        let dx = dz_all.matmul(&w_x).unwrap();
        let dw_x = dz_all.matmul_tn(&xv).unwrap();
        let db = column_sums(&dz_all);

        let mut grads = vec![dx];
        grads.extend(split_rows(&dw_x, hidden));
        grads.extend(split_rows(&dw_h, hidden));
        grads.extend(split_rows(&db, hidden));
        grads
    }))
}

fn stack_rows(blocks: &[&Tensor]) -> Tensor {
    let cols = blocks[0].cols();
    let rows = blocks.iter().map(|b| b.rows()).sum();
    let data = blocks.iter().flat_map(|b| b.data().iter().copied()).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

/// Splits a `4H x n` matrix (or a `4H` vector) into four gate blocks.
fn split_rows(t: &Tensor, hidden: usize) -> Vec<Tensor> {
    let width = t.len() / (4 * hidden);
    (0..4)
        .map(|k| {
            let data = t.data()[k * hidden * width..(k + 1) * hidden * width].to_vec();
            if t.rank() == 1 {
                Tensor::vector(data)
            } else {
                Tensor::new(&[hidden, width], data).unwrap()
            }
        })
        .collect()
}

/// Bidirectional LSTM: per-frame concatenation `[h_fwd[t], h_bwd[t]]`, width 2H.
pub fn bilstm(tape: &mut Tape, x: Var, fwd: &LstmParams<Var>, bwd: &LstmParams<Var>) -> Result<Var> {
    let (hf, hb) = (tape.value(fwd.w_hi).rows(), tape.value(bwd.w_hi).rows());
    if hf != hb {
        return Err(TensorError::Shape {
            op: "bilstm",
            lhs: tape.value(fwd.w_hi).shape().to_vec(),
            rhs: tape.value(bwd.w_hi).shape().to_vec(),
        });
    }
    let forward = lstm(tape, x, fwd, false, None)?;
    let backward = lstm(tape, x, bwd, true, None)?;
    tape.concat(forward, backward, 1)
}

/// Affine map applied to every frame: `x W^T + b`.
pub fn dense(tape: &mut Tape, x: Var, p: &DenseParams<Var>) -> Result<Var> {
    let w = tape.value(p.w);
    let b = tape.value(p.b);
    if b.shape() != [w.rows()] {
        return Err(TensorError::Shape {
            op: "dense",
            lhs: w.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let wt = tape.transpose(p.w)?;
    let z = tape.matmul(x, wt)?;
    tape.add(z, p.b)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(tape: &mut Tape, z: Var) -> Result<Var> {
    let zv = tape.value(z);
    require_matrix(zv, "softmax")?;
    let classes = zv.cols();
    let mut out = zv.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let peak = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - peak).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let probs = out.clone();
    Ok(tape.record(out, &[z], move |g| {
        let mut dz = probs.clone();
        for (r, row) in dz.data_mut().chunks_mut(classes).enumerate() {
            let g_row = &g.data()[r * classes..(r + 1) * classes];
            let inner: f64 = row.iter().zip(g_row).map(|(p, gi)| p * gi).sum();
            for (v, gi) in row.iter_mut().zip(g_row) {
                *v *= gi - inner;
            }
        }
        vec![dz]
    }))
}

/// Per-frame class probabilities `softmax(W_d D_t + b_d)`.
pub fn time_softmax_dense(tape: &mut Tape, d: Var, p: &DenseParams<Var>) -> Result<Var> {
    let logits = dense(tape, d, p)?;
    softmax_rows(tape, logits)
}

fn check_rate(rate: f64, op: &'static str) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(contract(op, format!("rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

fn apply_mask(tape: &mut Tape, x: Var, mask: Tensor) -> Var {
    let out = tape.value(x).mul(&mask).unwrap();
    tape.record(out, &[x], move |g| vec![g.mul(&mask).unwrap()])
}

/// Drops whole channels (one mask shared by every frame) and rescales the
/// survivors by `1 / (1 - rate)`. Identity outside training.
pub fn spatial_dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    check_rate(rate, "spatial_dropout")?;
    let xv = tape.value(x);
    require_matrix(xv, "spatial_dropout")?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let channel_mask: Vec<f64> = (0..xv.cols())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = Tensor::vector(channel_mask);
    Ok(apply_mask(tape, x, mask))
}

/// Element-wise dropout with `1 / (1 - rate)` rescaling. Identity outside
/// training.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
    check_rate(rate, "dropout")?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(apply_mask(tape, x, Tensor::new(&shape, mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GRAD_TOL: f64 = 1e-4;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
    }

    fn run(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    fn conv(x: &Tensor, kernels: Tensor, bias: Tensor) -> Result<Tensor> {
        run(x, |t, xv| {
            let p = Conv1DParams {
                kernels: t.leaf(kernels),
                bias: t.leaf(bias),
            };
            conv1d_same(t, xv, &p)
        })
    }

    fn lstm_params_leaves(tape: &mut Tape, p: &LstmParams) -> LstmParams<Var> {
        LstmParams::from_blocks(p.blocks().map(|b| tape.leaf(b.clone())))
    }

    fn random_lstm(d: usize, h: usize, rng: &mut ChaCha8Rng) -> LstmParams {
        LstmParams::from_blocks(std::array::from_fn(|k| match k {
            0..=3 => random(&[h, d], rng),
            4..=7 => random(&[h, h], rng),
            _ => random(&[h], rng),
        }))
    }

    /// Weighted sum of `y` so every output coordinate affects the scalar.
    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.value(y).shape().to_vec();
        let w = tape.leaf(random(&shape, &mut rng));
        let prod = tape.mul(y, w)?;
        Ok(tape.sum(prod))
    }

    #[test]
    fn conv_examples() {
        let x = col(&[1.0, 2.0, 3.0]);
        let y = conv(&x, Tensor::ones(&[1, 1, 1]), Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
        let y = conv(&x, Tensor::zeros(&[1, 1, 4]), Tensor::vector(vec![5.0])).unwrap();
        assert_eq!(y, col(&[5.0, 5.0, 5.0]));
        let y = conv(
            &col(&[1.0, 2.0, 3.0, 4.0]),
            Tensor::ones(&[1, 1, 3]),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        assert_eq!(y, col(&[3.0, 6.0, 9.0, 7.0]));
    }

    #[test]
    fn conv_even_kernel_pads_asymmetrically() {
        // L = 2: one zero on the left, none on the right
        let kernels = Tensor::new(&[1, 1, 2], vec![1.0, 10.0]).unwrap();
        let y = conv(&col(&[1.0, 2.0, 3.0]), kernels, Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, col(&[10.0, 21.0, 32.0]));
    }

    #[test]
    fn conv_channel_mismatch() {
        let err = conv(&Tensor::zeros(&[4, 2]), Tensor::zeros(&[1, 3, 3]), Tensor::zeros(&[1])).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn norm_relu_examples() {
        let y = run(&Tensor::vector(vec![-1.0, 0.0, 2.0]), |t, x| Ok(norm_relu(t, x))).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0 / (2.0 + 1e-5)]);
        let y = run(&Tensor::vector(vec![-3.0, -0.5]), |t, x| Ok(norm_relu(t, x))).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = run(&Tensor::vector(vec![4.0]), |t, x| Ok(norm_relu(t, x))).unwrap();
        assert!((y.item() - 0.9999975).abs() < 1e-9);
    }

    #[test]
    fn pooling_examples() {
        let pool = |x: Tensor| run(&x, max_pool_time);
        assert_eq!(pool(col(&[1.0, 3.0, 2.0, 5.0])).unwrap(), col(&[3.0, 5.0]));
        let x = Tensor::from_rows(&[vec![0.0, 9.0], vec![7.0, 1.0]]).unwrap();
        assert_eq!(pool(x).unwrap().data(), &[7.0, 9.0]);
        assert_eq!(pool(col(&[-3.0, -1.0])).unwrap(), col(&[-1.0]));
        assert!(matches!(pool(col(&[1.0, 2.0, 3.0])), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn max_pool_tie_routes_to_earliest() {
        let mut tape = Tape::new();
        let x = tape.leaf(col(&[2.0, 2.0]));
        let y = max_pool_time(&mut tape, x).unwrap();
        let loss = tape.sum(y);
        assert_eq!(tape.backward(loss).unwrap().get(x).data(), &[1.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let y = run(&col(&[1.5, -2.0]), upsample_repeat).unwrap();
        assert_eq!(y, col(&[1.5, 1.5, -2.0, -2.0]));
        let y = run(&col(&[7.0]), upsample_repeat).unwrap();
        assert_eq!(y, col(&[7.0, 7.0]));
        let mut tape = Tape::new();
        let x = tape.leaf(col(&[1.0, 2.0]));
        let y = upsample_repeat(&mut tape, x).unwrap();
        let w = tape.leaf(col(&[1.0, 2.0, 3.0, 4.0]));
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum(prod);
        assert_eq!(tape.backward(loss).unwrap().get(x), col(&[3.0, 7.0]));
    }

    #[test]
    fn lstm_zero_weights_give_zero_output() {
        let p = LstmParams::zeros(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[5, 3], &mut rng);
        let y = run(&x, |t, xv| {
            let pv = lstm_params_leaves(t, &p);
            lstm(t, xv, &pv, false, None)
        })
        .unwrap();
        assert_eq!(y, Tensor::zeros(&[5, 2]));
    }

    #[test]
    fn lstm_saturated_gates_hold_cell() {
        let mut p = LstmParams::zeros(1, 1);
        p.b_f = Tensor::vector(vec![20.0]);
        p.b_i = Tensor::vector(vec![-20.0]);
        p.b_o = Tensor::vector(vec![20.0]);
        let x = col(&[0.3, -1.0, 2.0, 0.0]);
        let h0 = Tensor::vector(vec![0.0]);
        let c0 = Tensor::vector(vec![1.0]);
        let y = run(&x, |t, xv| {
            let pv = lstm_params_leaves(t, &p);
            lstm(t, xv, &pv, false, Some((&h0, &c0)))
        })
        .unwrap();
        for &h in y.data() {
            assert!((h - 0.7616).abs() < 1e-4, "{h}");
        }
    }

    #[test]
    fn lstm_single_step_by_hand() {
        let p = LstmParams::from_blocks(std::array::from_fn(|k| {
            if k < 8 {
                Tensor::filled(&[1, 1], 0.5)
            } else {
                Tensor::zeros(&[1])
            }
        }));
        let y = run(&col(&[1.0]), |t, xv| {
            let pv = lstm_params_leaves(t, &p);
            lstm(t, xv, &pv, false, None)
        })
        .unwrap();
        // i = f = o = sigmoid(0.5), g = tanh(0.5), c = i g, h = o tanh(c)
        let s = 1.0 / (1.0 + (-0.5f64).exp());
        let c = s * 0.5f64.tanh();
        let h = s * c.tanh();
        assert!((y.item() - h).abs() < 1e-15);
        assert!((y.item() - 0.174_269_72).abs() < 1e-6);
        assert!((c - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn bilstm_width_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 3], &mut rng);
        let z = LstmParams::zeros(3, 64);
        let y = run(&x, |t, xv| {
            let f = lstm_params_leaves(t, &z);
            let b = lstm_params_leaves(t, &z);
            bilstm(t, xv, &f, &b)
        })
        .unwrap();
        assert_eq!(y, Tensor::zeros(&[4, 128]));
    }

    #[test]
    fn bilstm_hidden_mismatch() {
        let x = Tensor::zeros(&[4, 3]);
        let err = run(&x, |t, xv| {
            let f = lstm_params_leaves(t, &LstmParams::zeros(3, 2));
            let b = lstm_params_leaves(t, &LstmParams::zeros(3, 4));
            bilstm(t, xv, &f, &b)
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    fn swap_halves(t: &Tensor) -> Tensor {
        let h = t.cols() / 2;
        t.slice(1, h, 2 * h)
            .unwrap()
            .concat(&t.slice(1, 0, h).unwrap(), 1)
            .unwrap()
    }

    #[test]
    fn softmax_examples() {
        let probs = |logits: Tensor| run(&logits, softmax_rows).unwrap();
        let p = probs(Tensor::zeros(&[3, 4]));
        assert!(p.data().iter().all(|&v| v == 0.25));
        let p = probs(Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap());
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(&[5, 6], &mut rng);
        let shifted = probs(z.map(|v| v + 123.0));
        for (a, b) in probs(z).data().iter().zip(shifted.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn time_softmax_dense_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random(&[6, 5], &mut rng);
        let w = random(&[3, 5], &mut rng);
        let b = random(&[3], &mut rng);
        let y = run(&d, |t, dv| {
            let p = DenseParams {
                w: t.leaf(w.clone()),
                b: t.leaf(b.clone()),
            };
            time_softmax_dense(t, dv, &p)
        })
        .unwrap();
        let logits = d.matmul(&w.transpose().unwrap()).unwrap().add(&b).unwrap();
        for r in 0..6 {
            let sum: f64 = y.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            let am = |row: &[f64]| (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            assert_eq!(am(y.row(r)), am(logits.row(r)));
        }
        let err = run(&d, |t, dv| {
            let p = DenseParams {
                w: t.leaf(Tensor::zeros(&[3, 4])),
                b: t.leaf(Tensor::zeros(&[3])),
            };
            time_softmax_dense(t, dv, &p)
        });
        assert!(err.is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[6, 4], &mut rng);
        for training in [false, true] {
            let y = run(&x, |t, v| dropout(t, v, 0.0, &mut rng, training)).unwrap();
            assert_eq!(y, x);
            let y = run(&x, |t, v| spatial_dropout(t, v, 0.0, &mut rng, training)).unwrap();
            assert_eq!(y, x);
        }
        let y = run(&x, |t, v| dropout(t, v, 0.7, &mut rng, false)).unwrap();
        assert_eq!(y, x);
        let y = run(&x, |t, v| spatial_dropout(t, v, 0.7, &mut rng, false)).unwrap();
        assert_eq!(y, x);
        assert!(run(&x, |t, v| dropout(t, v, 1.0, &mut rng, true)).is_err());
        assert!(run(&x, |t, v| spatial_dropout(t, v, 1.5, &mut rng, false)).is_err());
    }

    #[test]
    fn spatial_dropout_zeroes_whole_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::ones(&[8, 16]);
        let y = run(&x, |t, v| spatial_dropout(t, v, 0.5, &mut rng, true)).unwrap();
        for ch in 0..16 {
            let first = y.get2(0, ch);
            assert!(first == 0.0 || first == 2.0);
            assert!((0..8).all(|t| y.get2(t, ch) == first));
        }
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]).unwrap();
        let trials = 10_000;
        let mut plain = Tensor::zeros(&[2, 3]);
        let mut spatial = Tensor::zeros(&[2, 3]);
        for _ in 0..trials {
            plain
                .add_assign(&run(&x, |t, v| dropout(t, v, 0.5, &mut rng, true)).unwrap())
                .unwrap();
            spatial
                .add_assign(&run(&x, |t, v| spatial_dropout(t, v, 0.5, &mut rng, true)).unwrap())
                .unwrap();
        }
        for acc in [plain, spatial] {
            for (m, v) in acc.scale(1.0 / trials as f64).data().iter().zip(x.data()) {
                assert!((m - v).abs() <= 0.02 * v.abs(), "mean {m} vs {v}");
            }
        }
    }

    // Gradient checks: each layer against central differences.

    fn check_param(build: impl Fn(&mut Tape, Var) -> Result<Var>, at: &Tensor) -> f64 {
        finite_diff_check(build, at, 1e-6).unwrap()
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (steps, c_in, filters, len) in [(7, 2, 3, 3), (5, 3, 2, 4), (4, 1, 2, 6), (3, 2, 1, 1)] {
            let x = random(&[steps, c_in], &mut rng);
            let k = random(&[filters, c_in, len], &mut rng);
            let b = random(&[filters], &mut rng);
            let (k1, b1) = (k.clone(), b.clone());
            let err_x = check_param(
                move |t, xv| {
                    let p = Conv1DParams {
                        kernels: t.leaf(k1.clone()),
                        bias: t.leaf(b1.clone()),
                    };
                    let y = conv1d_same(t, xv, &p)?;
                    weighted_sum(t, y, 1)
                },
                &x,
            );
            let (x1, b1) = (x.clone(), b.clone());
            let err_k = check_param(
                move |t, kv| {
                    let xv = t.leaf(x1.clone());
                    let p = Conv1DParams {
                        kernels: kv,
                        bias: t.leaf(b1.clone()),
                    };
                    let y = conv1d_same(t, xv, &p)?;
                    weighted_sum(t, y, 1)
                },
                &k,
            );
            let (x1, k1) = (x.clone(), k.clone());
            let err_b = check_param(
                move |t, bv| {
                    let xv = t.leaf(x1.clone());
                    let p = Conv1DParams {
                        kernels: t.leaf(k1.clone()),
                        bias: bv,
                    };
                    let y = conv1d_same(t, xv, &p)?;
                    weighted_sum(t, y, 1)
                },
                &b,
            );
            for err in [err_x, err_k, err_b] {
                assert!(err <= GRAD_TOL, "conv grad error {err}");
            }
        }
    }

    #[test]
    fn norm_relu_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x = random(&[6, 3], &mut rng);
            let err = check_param(
                |t, xv| {
                    let y = norm_relu(t, xv);
                    weighted_sum(t, y, 2)
                },
                &x,
            );
            assert!(err <= GRAD_TOL, "norm_relu {err}");
            let err = check_param(
                |t, xv| {
                    let y = max_pool_time(t, xv)?;
                    weighted_sum(t, y, 3)
                },
                &x,
            );
            assert!(err <= GRAD_TOL, "pool {err}");
            let err = check_param(
                |t, xv| {
                    let y = upsample_repeat(t, xv)?;
                    weighted_sum(t, y, 4)
                },
                &x,
            );
            assert!(err <= GRAD_TOL, "upsample {err}");
        }
    }

    #[test]
    fn lstm_gradients_every_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (steps, d, h) = (6, 3, 4);
        let x = random(&[steps, d], &mut rng);
        let p = random_lstm(d, h, &mut rng);
        let h0 = random(&[h], &mut rng);
        let c0 = random(&[h], &mut rng);
        for reverse in [false, true] {
            let (p1, h01, c01) = (p.clone(), h0.clone(), c0.clone());
            let err = check_param(
                move |t, xv| {
                    let pv = lstm_params_leaves(t, &p1);
                    let y = lstm(t, xv, &pv, reverse, Some((&h01, &c01)))?;
                    weighted_sum(t, y, 5)
                },
                &x,
            );
            assert!(err <= GRAD_TOL, "lstm dx {err}");
            for block in 0..12 {
                let (p1, x1) = (p.clone(), x.clone());
                let err = check_param(
                    move |t, bv| {
                        let xv = t.leaf(x1.clone());
                        let vars: [Var; 12] =
                            std::array::from_fn(|k| if k == block { bv } else { t.leaf(p1.blocks()[k].clone()) });
                        let pv = LstmParams::from_blocks(vars);
                        let y = lstm(t, xv, &pv, reverse, None)?;
                        weighted_sum(t, y, 6)
                    },
                    p.blocks()[block],
                );
                assert!(
                    err <= GRAD_TOL,
                    "lstm block {} {err}",
                    LstmParams::<Tensor>::BLOCK_NAMES[block]
                );
            }
        }
    }

    #[test]
    fn bilstm_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[5, 2], &mut rng);
        let f = random_lstm(2, 3, &mut rng);
        let b = random_lstm(2, 3, &mut rng);
        let w = random(&[4, 6], &mut rng);
        let bias = random(&[4], &mut rng);
        let err = check_param(
            move |t, xv| {
                let fv = lstm_params_leaves(t, &f);
                let bv = lstm_params_leaves(t, &b);
                let y = bilstm(t, xv, &fv, &bv)?;
                let p = DenseParams {
                    w: t.leaf(w.clone()),
                    b: t.leaf(bias.clone()),
                };
                let probs = time_softmax_dense(t, y, &p)?;
                weighted_sum(t, probs, 7)
            },
            &x,
        );
        assert!(err <= GRAD_TOL, "{err}");
    }

    #[test]
    fn dropout_gradients_use_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&[5, 4], &mut rng);
        let err = check_param(
            |t, xv| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                let y = dropout(t, xv, 0.4, &mut r, true)?;
                let y = spatial_dropout(t, y, 0.4, &mut r, true)?;
                weighted_sum(t, y, 8)
            },
            &x,
        );
        assert!(err <= GRAD_TOL, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conv_preserves_length(steps in 1usize..12, len in 1usize..14, seed in any::<u64>()) {
            prop_assume!(len <= steps + 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[steps, 2], &mut rng);
            let y = conv(&x, random(&[3, 2, len], &mut rng), random(&[3], &mut rng)).unwrap();
            prop_assert_eq!(y.shape(), &[steps, 3]);
        }

        #[test]
        fn norm_relu_range(data in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let n = data.len();
            let x = Tensor::new(&[n, 1], data.clone()).unwrap();
            let y = run(&x, |t, v| Ok(norm_relu(t, v))).unwrap();
            prop_assert!(y.data().iter().all(|&v| (0.0..1.0).contains(&v)));
            let m = data.iter().fold(0.0f64, |a, &b| a.max(b));
            let top = y.data().iter().fold(0.0f64, |a, &b| a.max(b));
            let expect = if m > 0.0 { m / (m + NORM_RELU_EPS) } else { 0.0 };
            prop_assert!((top - expect).abs() <= 1e-12);
        }

        #[test]
        fn upsample_then_pool_is_identity(rows in 1usize..10, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[rows, cols], &mut rng);
            let y = run(&x, |t, v| {
                let up = upsample_repeat(t, v)?;
                max_pool_time(t, up)
            }).unwrap();
            prop_assert_eq!(y, x);
        }

        #[test]
        fn bilstm_time_reversal_symmetry(steps in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[steps, 2], &mut rng);
            let p = random_lstm(2, 3, &mut rng);
            let q = random_lstm(2, 3, &mut rng);
            let lhs = run(&x.reverse_rows(), |t, v| {
                let (pv, qv) = (lstm_params_leaves(t, &p), lstm_params_leaves(t, &q));
                bilstm(t, v, &pv, &qv)
            }).unwrap();
            let rhs = run(&x, |t, v| {
                let (qv, pv) = (lstm_params_leaves(t, &q), lstm_params_leaves(t, &p));
                bilstm(t, v, &qv, &pv)
            }).unwrap();
            prop_assert_eq!(lhs, swap_halves(&rhs).reverse_rows());
        }

        #[test]
        fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
            let z = Tensor::new(&[3, 4], data).unwrap();
            let y = run(&z, softmax_rows).unwrap();
            for r in 0..3 {
                let s: f64 = y.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
