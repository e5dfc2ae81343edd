//! Batched forward and backward passes over packed variable-length windows.
//!
//! A window holds several sequences sorted by length, longest first, so the
//! rows alive at step `t` are always a prefix `0..step_rows[t]`. Rows are
//! stored step-major: all live rows of step 0, then of step 1, and so on.
//! Padding never reaches the arithmetic.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{gemm, sigmoid, softplus};
use super::params::ModelParams;
use crate::error::{EosError, Result};
use crate::features::FeatureFrame;

/// Inverted dropout on the LSTM output and both dense outputs. Active only
/// when a seed is present and `p > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub seed: Option<u64>,
}

impl Dropout {
    pub const NONE: Dropout = Dropout { p: 0.0, seed: None };

    pub fn new(p: f64, seed: Option<u64>) -> Self {
        Dropout { p, seed }
    }

    pub fn is_active(&self) -> bool {
        self.seed.is_some() && self.p > 0.0
    }
}

/// One sequence's slice of a window. Empty `labels`/`weights` mean zero.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub frames: &'a [FeatureFrame],
    pub reset: &'a [bool],
    pub labels: &'a [f64],
    pub weights: &'a [f64],
}

impl<'a> SeqInput<'a> {
    pub fn unlabeled(frames: &'a [FeatureFrame], reset: &'a [bool]) -> Self {
        SeqInput {
            frames,
            reset,
            labels: &[],
            weights: &[],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedWindow {
    step_rows: Vec<usize>,
    offsets: Vec<usize>,
    pub x: Array2<f64>,
    pub reset: Vec<bool>,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PackedWindow {
    /// Packs sequences given longest first.
    pub fn pack(seqs: &[SeqInput<'_>]) -> Result<Self> {
        for (i, s) in seqs.iter().enumerate() {
            if s.reset.len() != s.len()
                || (!s.labels.is_empty() && s.labels.len() != s.len())
                || (!s.weights.is_empty() && s.weights.len() != s.len())
            {
                return Err(EosError::Invalid(format!(
                    "sequence {i}: frames, reset mask, labels and weights differ in length"
                )));
            }
        }
        if seqs.windows(2).any(|w| w[0].len() < w[1].len()) {
            return Err(EosError::Invalid("window members must be ordered longest first".into()));
        }
        let steps = seqs.first().map_or(0, SeqInput::len);
        let step_rows: Vec<usize> = (0..steps)
            .map(|t| seqs.iter().take_while(|s| s.len() > t).count())
            .collect();
        let n: usize = step_rows.iter().sum();
        let input = seqs.first().map_or(0, |s| s.frames.first().map_or(0, |f| f.len()));
        let mut x = Array2::zeros((n, input));
        let mut reset = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut row = 0;
        for (t, &k) in step_rows.iter().enumerate() {
            for s in &seqs[..k] {
                x.row_mut(row)
                    .as_slice_mut()
                    .expect("row-major")
                    .copy_from_slice(&s.frames[t]);
                reset.push(s.reset[t]);
                labels.push(s.labels.get(t).copied().unwrap_or(0.0));
                weights.push(s.weights.get(t).copied().unwrap_or(0.0));
                row += 1;
            }
        }
        Ok(Self::from_parts(step_rows, x, reset, labels, weights))
    }

    pub(crate) fn from_parts(
        step_rows: Vec<usize>,
        x: Array2<f64>,
        reset: Vec<bool>,
        labels: Vec<f64>,
        weights: Vec<f64>,
    ) -> Self {
        let mut offsets = Vec::with_capacity(step_rows.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &k in &step_rows {
            acc += k;
            offsets.push(acc);
        }
        debug_assert_eq!(acc, x.nrows());
        PackedWindow {
            step_rows,
            offsets,
            x,
            reset,
            labels,
            weights,
        }
    }

    /// Number of sequences (rows live at step 0).
    pub fn rows(&self) -> usize {
        self.step_rows.first().copied().unwrap_or(0)
    }

    pub fn steps(&self) -> usize {
        self.step_rows.len()
    }

    /// Total valid steps over all rows.
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn step_rows(&self) -> &[usize] {
        &self.step_rows
    }

    /// Packed index of `(step, row)`.
    pub fn index(&self, step: usize, row: usize) -> usize {
        debug_assert!(row < self.step_rows[step]);
        self.offsets[step] + row
    }

    fn step_of(&self, packed: usize) -> usize {
        self.offsets.partition_point(|&o| o <= packed) - 1
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Per-row recurrent state of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
}

impl BatchState {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        BatchState {
            h: Array2::zeros((rows, hidden)),
            c: Array2::zeros((rows, hidden)),
        }
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates i, f, g, o.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
    a0: Array2<f64>,
    r1: Array2<f64>,
    a1: Array2<f64>,
    r2: Array2<f64>,
    a2: Array2<f64>,
    masks: Option<[Array2<f64>; 3]>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn dense_relu(input: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let shape = (input.nrows(), w.nrows());
    let mut z = Array2::zeros(shape);
    z.assign(&b.broadcast(shape).expect("bias broadcast"));
    gemm(1.0, &input.view(), &w.t(), 1.0, &mut z.view_mut());
    z.mapv_inplace(|v| v.max(0.0));
    z
}

/// Runs one window. `state` enters as the carried state of each row and
/// leaves as the state after each row's last step in the window.
pub fn forward_window(
    params: &ModelParams,
    win: &PackedWindow,
    state: &mut BatchState,
    dropout: Dropout,
) -> Result<Trace> {
    let d = params.dims();
    let hid = d.hidden;
    let n = win.len();
    if win.x.ncols() != d.input && n > 0 {
        return Err(EosError::Invalid(format!(
            "frames have {} features, model expects {}",
            win.x.ncols(),
            d.input
        )));
    }
    if state.rows() < win.rows() || state.h.ncols() != hid {
        return Err(EosError::Invalid("state does not match window".into()));
    }

    let wx = params.lstm_w.slice(s![.., ..d.input]);
    let wh = params.lstm_w.slice(s![.., d.input..]);
    let mut gates = Array2::zeros((n, d.gates()));
    gates.assign(&params.lstm_b.broadcast((n, d.gates())).expect("bias broadcast"));
    gemm(1.0, &win.x.view(), &wx.t(), 1.0, &mut gates.view_mut());

    let mut h_prev = Array2::zeros((n, hid));
    let mut c_prev = Array2::zeros((n, hid));
    let mut tanh_c = Array2::zeros((n, hid));
    let mut hs = Array2::zeros((n, hid));

    for (t, &k) in win.step_rows.iter().enumerate() {
        let o = win.offsets[t];
        for r in 0..k {
            if win.reset[o + r] {
                state.h.row_mut(r).fill(0.0);
                state.c.row_mut(r).fill(0.0);
            }
        }
        h_prev.slice_mut(s![o..o + k, ..]).assign(&state.h.slice(s![..k, ..]));
        c_prev.slice_mut(s![o..o + k, ..]).assign(&state.c.slice(s![..k, ..]));
        gemm(
            1.0,
            &state.h.slice(s![..k, ..]),
            &wh.t(),
            1.0,
            &mut gates.slice_mut(s![o..o + k, ..]),
        );
        for r in 0..k {
            let p = o + r;
            let g = gates.row_mut(p).into_slice().expect("row-major");
            let cp = c_prev.row(p);
            let cp = cp.as_slice().expect("row-major");
            let mut c_row = state.c.row_mut(r);
            let c_row = c_row.as_slice_mut().expect("row-major");
            let mut h_row = state.h.row_mut(r);
            let h_row = h_row.as_slice_mut().expect("row-major");
            let mut tc_row = tanh_c.row_mut(p);
            let tc_row = tc_row.as_slice_mut().expect("row-major");
            let mut hs_row = hs.row_mut(p);
            let hs_row = hs_row.as_slice_mut().expect("row-major");
            for j in 0..hid {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[hid + j]);
                let cand = g[2 * hid + j].tanh();
                let out = sigmoid(g[3 * hid + j]);
                g[j] = i;
                g[hid + j] = f;
                g[2 * hid + j] = cand;
                g[3 * hid + j] = out;
                let c = f * cp[j] + i * cand;
                let tc = c.tanh();
                c_row[j] = c;
                tc_row[j] = tc;
                let h = out * tc;
                h_row[j] = h;
                hs_row[j] = h;
            }
        }
    }

    let mut masks = None;
    let (a0, r1, a1, r2, a2);
    if dropout.is_active() {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout.seed.expect("active dropout has a seed"));
        let m0 = dropout_mask(&mut rng, (n, hid), dropout.p);
        a0 = &hs * &m0;
        r1 = dense_relu(&a0, &params.dense1_w, &params.dense1_b);
        let m1 = dropout_mask(&mut rng, r1.dim(), dropout.p);
        a1 = &r1 * &m1;
        r2 = dense_relu(&a1, &params.dense2_w, &params.dense2_b);
        let m2 = dropout_mask(&mut rng, r2.dim(), dropout.p);
        a2 = &r2 * &m2;
        masks = Some([m0, m1, m2]);
    } else {
        a0 = hs;
        r1 = dense_relu(&a0, &params.dense1_w, &params.dense1_b);
        a1 = r1.clone();
        r2 = dense_relu(&a1, &params.dense2_w, &params.dense2_b);
        a2 = r2.clone();
    }

    let mut logits2 = Array2::from_elem((n, 1), params.out_b);
    gemm(1.0, &a2.view(), &params.out_w.t(), 1.0, &mut logits2.view_mut());
    let logits = logits2.remove_axis(Axis(1));
    if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
        return Err(EosError::NonFinite {
            step: win.step_of(bad),
            what: "forward activation",
        });
    }
    let probs = logits.mapv(sigmoid);

    Ok(Trace {
        h_prev,
        c_prev,
        gates,
        tanh_c,
        a0,
        r1,
        a1,
        r2,
        a2,
        masks,
        logits,
        probs,
    })
}

/// Weighted cross entropy of a window divided by `weight_norm`, with its
/// gradient accumulated into `grads`. Gradients stop at the window start.
pub fn backward_window(
    params: &ModelParams,
    win: &PackedWindow,
    trace: &Trace,
    weight_norm: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let d = params.dims();
    let hid = d.hidden;
    let n = win.len();
    if n == 0 || weight_norm == 0.0 {
        return Ok(0.0);
    }

    let mut loss = 0.0;
    let mut dz = Array1::zeros(n);
    for p in 0..n {
        let (z, y, w) = (trace.logits[p], win.labels[p], win.weights[p]);
        loss += w * (softplus(z) - y * z);
        dz[p] = w * (trace.probs[p] - y) / weight_norm;
    }
    loss /= weight_norm;

    // Output unit.
    grads.out_b += dz.sum();
    let dz_row = dz.view().insert_axis(Axis(0));
    gemm(1.0, &dz_row, &trace.a2.view(), 1.0, &mut grads.out_w.view_mut());
    let out_w = params.out_w.row(0);
    let mut dz2 = Array2::from_shape_fn((n, d.dense2), |(p, j)| dz[p] * out_w[j]);
    mask_relu_grad(&mut dz2, &trace.r2, trace.masks.as_ref().map(|m| &m[2]));

    // Second dense layer.
    gemm(1.0, &dz2.t(), &trace.a1.view(), 1.0, &mut grads.dense2_w.view_mut());
    grads.dense2_b += &dz2.sum_axis(Axis(0));
    let mut dz1 = Array2::zeros((n, d.dense1));
    gemm(1.0, &dz2.view(), &params.dense2_w.view(), 0.0, &mut dz1.view_mut());
    mask_relu_grad(&mut dz1, &trace.r1, trace.masks.as_ref().map(|m| &m[1]));

    // First dense layer.
    gemm(1.0, &dz1.t(), &trace.a0.view(), 1.0, &mut grads.dense1_w.view_mut());
    grads.dense1_b += &dz1.sum_axis(Axis(0));
    let mut dhs = Array2::zeros((n, hid));
    gemm(1.0, &dz1.view(), &params.dense1_w.view(), 0.0, &mut dhs.view_mut());
    if let Some(m) = &trace.masks {
        dhs *= &m[0];
    }

    // Through time, last step first.
    let wh = params.lstm_w.slice(s![.., d.input..]);
    let rows = win.rows();
    let mut dh_next = Array2::<f64>::zeros((rows, hid));
    let mut dc_next = Array2::<f64>::zeros((rows, hid));
    let mut dpre = Array2::<f64>::zeros((n, d.gates()));
    for (t, &k) in win.step_rows.iter().enumerate().rev() {
        let o = win.offsets[t];
        for r in 0..k {
            let p = o + r;
            let g = trace.gates.row(p);
            let g = g.as_slice().expect("row-major");
            let tc = trace.tanh_c.row(p);
            let tc = tc.as_slice().expect("row-major");
            let cp = trace.c_prev.row(p);
            let cp = cp.as_slice().expect("row-major");
            let dh_out = dhs.row(p);
            let dh_out = dh_out.as_slice().expect("row-major");
            let mut dpre_row = dpre.row_mut(p);
            let dg = dpre_row.as_slice_mut().expect("row-major");
            let mut dh_row = dh_next.row_mut(r);
            let dh_row = dh_row.as_slice_mut().expect("row-major");
            let mut dc_row = dc_next.row_mut(r);
            let dc_row = dc_row.as_slice_mut().expect("row-major");
            for j in 0..hid {
                let (i, f, cand, out) = (g[j], g[hid + j], g[2 * hid + j], g[3 * hid + j]);
                let dh = dh_out[j] + dh_row[j];
                let dc = dc_row[j] + dh * out * (1.0 - tc[j] * tc[j]);
                dg[j] = dc * cand * i * (1.0 - i);
                dg[hid + j] = dc * cp[j] * f * (1.0 - f);
                dg[2 * hid + j] = dc * i * (1.0 - cand * cand);
                dg[3 * hid + j] = dh * tc[j] * out * (1.0 - out);
                dc_row[j] = dc * f;
            }
        }
        gemm(
            1.0,
            &dpre.slice(s![o..o + k, ..]),
            &wh,
            0.0,
            &mut dh_next.slice_mut(s![..k, ..]),
        );
        for r in 0..k {
            if win.reset[o + r] {
                dh_next.row_mut(r).fill(0.0);
                dc_next.row_mut(r).fill(0.0);
            }
        }
    }

    gemm(
        1.0,
        &dpre.t(),
        &win.x.view(),
        1.0,
        &mut grads.lstm_w.slice_mut(s![.., ..d.input]),
    );
    gemm(
        1.0,
        &dpre.t(),
        &trace.h_prev.view(),
        1.0,
        &mut grads.lstm_w.slice_mut(s![.., d.input..]),
    );
    grads.lstm_b += &dpre.sum_axis(Axis(0));

    if !loss.is_finite() {
        return Err(EosError::NonFinite { step: 0, what: "loss" });
    }
    if let Some(bad) = dpre.iter().position(|v| !v.is_finite()) {
        return Err(EosError::NonFinite {
            step: win.step_of(bad / d.gates()),
            what: "gradient",
        });
    }
    Ok(loss)
}

/// Multiplies by the dropout mask and zeroes entries where the ReLU was inactive.
fn mask_relu_grad(grad: &mut Array2<f64>, relu_out: &Array2<f64>, mask: Option<&Array2<f64>>) {
    match mask {
        Some(m) => ndarray::Zip::from(grad)
            .and(relu_out)
            .and(m)
            .for_each(|g, &r, &m| *g = if r > 0.0 { *g * m } else { 0.0 }),
        None => ndarray::Zip::from(grad).and(relu_out).for_each(|g, &r| {
            if r <= 0.0 {
                *g = 0.0
            }
        }),
    }
}
