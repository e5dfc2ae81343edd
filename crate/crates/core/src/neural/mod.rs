//! LSTM → dense(ReLU) → dense(ReLU) → sigmoid network with hand-derived
//! backpropagation through time.

mod checkpoint;
mod engine;
mod linalg;
mod loss;
mod optim;
mod params;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, write_atomic, MAGIC};
pub use engine::{backward_window, forward_window, BatchState, Dropout, PackedWindow, SeqInput, Trace};
pub use linalg::{gemm, gemm_blocked, sigmoid};
pub use loss::loss_weighted_bce;
pub use optim::{rmsprop_update, OptState, DEFAULT_LEARNING_RATE};
pub use params::{init_params, Dims, LstmState, ModelParams};

use ndarray::{Array1, Array2};

use crate::error::{EosError, Result};
use crate::features::FeatureFrame;

/// One LSTM step for a single sequence.
pub fn lstm_step(params: &ModelParams, x: &[f64], state: &LstmState) -> LstmState {
    let hidden = params.dims().hidden;
    let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("one row");
    let win = PackedWindow::from_parts(vec![1], x, vec![false], vec![0.0], vec![0.0]);
    let mut batch = BatchState {
        h: state.h.clone().into_shape_with_order((1, hidden)).expect("row"),
        c: state.c.clone().into_shape_with_order((1, hidden)).expect("row"),
    };
    // Only the recurrent part matters here; the dense head cannot fail on finite input.
    let _ = forward_window(params, &win, &mut batch, Dropout::NONE);
    LstmState {
        h: batch.h.row(0).to_owned(),
        c: batch.c.row(0).to_owned(),
    }
}

/// Runs one sequence from a zero state. `reset_mask[t]` zeroes the state
/// before step `t`. Dropout applies only when `rng_seed` is given.
pub fn forward(
    params: &ModelParams,
    frames: &[FeatureFrame],
    reset_mask: &[bool],
    dropout_p: f64,
    rng_seed: Option<u64>,
) -> Result<(Vec<f64>, LstmState)> {
    let hidden = params.dims().hidden;
    if frames.is_empty() {
        return Ok((Vec::new(), LstmState::zeros(hidden)));
    }
    let win = PackedWindow::pack(&[SeqInput::unlabeled(frames, reset_mask)])?;
    let mut state = BatchState::zeros(1, hidden);
    let trace = forward_window(params, &win, &mut state, Dropout::new(dropout_p, rng_seed))?;
    Ok((
        trace.probs.to_vec(),
        LstmState {
            h: state.h.row(0).to_owned(),
            c: state.c.row(0).to_owned(),
        },
    ))
}

/// Loss and exact gradient for one sequence, without truncation.
pub fn backward(
    params: &ModelParams,
    frames: &[FeatureFrame],
    reset_mask: &[bool],
    labels: &[f64],
    weights: &[f64],
    dropout: Dropout,
) -> Result<(f64, ModelParams)> {
    let dims = params.dims();
    let mut grads = ModelParams::zeros(dims);
    if frames.is_empty() {
        return Ok((0.0, grads));
    }
    if labels.len() != frames.len() || weights.len() != frames.len() {
        return Err(EosError::Invalid("labels/weights length differs from frames".into()));
    }
    let win = PackedWindow::pack(&[SeqInput {
        frames,
        reset: reset_mask,
        labels,
        weights,
    }])?;
    let mut state = BatchState::zeros(1, dims.hidden);
    let trace = forward_window(params, &win, &mut state, dropout)?;
    let loss = backward_window(params, &win, &trace, win.weight_sum(), &mut grads)?;
    Ok((loss, grads))
}

/// Inference over many sequences, batched and windowed. Results come back
/// in input order; state carries across windows of a sequence.
pub fn predict_many(
    params: &ModelParams,
    seqs: &[SeqInput<'_>],
    batch_size: usize,
    window: usize,
) -> Result<Vec<Vec<f64>>> {
    let batch_size = batch_size.max(1);
    let window = window.max(1);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(seqs[i].len()));
    let groups: Vec<&[usize]> = order.chunks(batch_size).collect();
    let hidden = params.dims().hidden;

    let scored = crate::par::map(&groups, |group| -> Result<Vec<(usize, Vec<f64>)>> {
        let mut state = BatchState::zeros(group.len(), hidden);
        let mut out: Vec<Vec<f64>> = group.iter().map(|&i| Vec::with_capacity(seqs[i].len())).collect();
        let longest = seqs[group[0]].len();
        let mut start = 0;
        while start < longest {
            let members: Vec<SeqInput<'_>> = group
                .iter()
                .map(|&i| &seqs[i])
                .take_while(|s| s.len() > start)
                .map(|s| {
                    let end = (start + window).min(s.len());
                    SeqInput::unlabeled(&s.frames[start..end], &s.reset[start..end])
                })
                .collect();
            let win = PackedWindow::pack(&members)?;
            let trace = forward_window(params, &win, &mut state, Dropout::NONE)?;
            for (t, &k) in win.step_rows().iter().enumerate() {
                for (r, dst) in out.iter_mut().take(k).enumerate() {
                    dst.push(trace.probs[win.index(t, r)]);
                }
            }
            start += window;
        }
        Ok(group.iter().copied().zip(out).collect())
    });

    let mut result = vec![Vec::new(); seqs.len()];
    for group in scored {
        for (i, probs) in group? {
            result[i] = probs;
        }
    }
    Ok(result)
}

/// Final-state helper for streaming use: runs `frames` from `state`.
pub fn forward_from(
    params: &ModelParams,
    frames: &[FeatureFrame],
    reset_mask: &[bool],
    state: &LstmState,
) -> Result<(Vec<f64>, LstmState)> {
    let hidden = params.dims().hidden;
    if frames.is_empty() {
        return Ok((Vec::new(), state.clone()));
    }
    let win = PackedWindow::pack(&[SeqInput::unlabeled(frames, reset_mask)])?;
    let mut batch = BatchState {
        h: state
            .h
            .clone()
            .into_shape_with_order((1, hidden))
            .map_err(|_| dim_error())?,
        c: state
            .c
            .clone()
            .into_shape_with_order((1, hidden))
            .map_err(|_| dim_error())?,
    };
    let trace = forward_window(params, &win, &mut batch, Dropout::NONE)?;
    Ok((
        trace.probs.to_vec(),
        LstmState {
            h: Array1::from(batch.h.row(0).to_vec()),
            c: Array1::from(batch.c.row(0).to_vec()),
        },
    ))
}

fn dim_error() -> EosError {
    EosError::Invalid("state width does not match the model".into())
}
