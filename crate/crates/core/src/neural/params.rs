use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::FRAME_DIM;

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub dense1: usize,
    pub dense2: usize,
}

impl Dims {
    /// Each layer half the width of the one before it.
    pub fn fan_in(input: usize, hidden: usize) -> Self {
        Dims {
            input,
            hidden,
            dense1: (hidden / 2).max(1),
            dense2: (hidden / 4).max(1),
        }
    }

    /// LSTM 400 → 200 → 100 → 1 over 13 input features.
    pub fn standard() -> Self {
        Self::fan_in(FRAME_DIM, 400)
    }

    pub fn gates(&self) -> usize {
        4 * self.hidden
    }

    /// Scalar counts for the LSTM, the two dense layers and the output unit.
    pub fn layer_counts(&self) -> [usize; 4] {
        [
            self.gates() * (self.input + self.hidden) + self.gates(),
            self.dense1 * self.hidden + self.dense1,
            self.dense2 * self.dense1 + self.dense2,
            self.dense2 + 1,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_counts().iter().sum()
    }
}

/// All trainable weights. The LSTM matrix stacks the input, forget,
/// candidate and output gate blocks (in that order) over the concatenated
/// `[x; h]` input. Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub lstm_w: Array2<f64>,
    pub lstm_b: Array1<f64>,
    pub dense1_w: Array2<f64>,
    pub dense1_b: Array1<f64>,
    pub dense2_w: Array2<f64>,
    pub dense2_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: f64,
}

/// Glorot-uniform weights, zero biases, forget-gate bias 1. Deterministic in `seed`.
pub fn init_params(dims: Dims, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(dims);
    for w in [&mut p.lstm_w, &mut p.dense1_w, &mut p.dense2_w, &mut p.out_w] {
        let (rows, cols) = w.dim();
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        w.mapv_inplace(|_| rng.random_range(-limit..limit));
    }
    p.lstm_b.slice_mut(ndarray::s![dims.hidden..2 * dims.hidden]).fill(1.0);
    p
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        ModelParams {
            lstm_w: Array2::zeros((dims.gates(), dims.input + dims.hidden)),
            lstm_b: Array1::zeros(dims.gates()),
            dense1_w: Array2::zeros((dims.dense1, dims.hidden)),
            dense1_b: Array1::zeros(dims.dense1),
            dense2_w: Array2::zeros((dims.dense2, dims.dense1)),
            dense2_b: Array1::zeros(dims.dense2),
            out_w: Array2::zeros((1, dims.dense2)),
            out_b: 0.0,
        }
    }

    pub fn dims(&self) -> Dims {
        let gates = self.lstm_b.len();
        let hidden = gates / 4;
        Dims {
            input: self.lstm_w.ncols() - hidden,
            hidden,
            dense1: self.dense1_b.len(),
            dense2: self.dense2_b.len(),
        }
    }

    /// Tensors in storage order, each as a row-major slice.
    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            self.lstm_w.as_slice().expect("standard layout"),
            self.lstm_b.as_slice().expect("standard layout"),
            self.dense1_w.as_slice().expect("standard layout"),
            self.dense1_b.as_slice().expect("standard layout"),
            self.dense2_w.as_slice().expect("standard layout"),
            self.dense2_b.as_slice().expect("standard layout"),
            self.out_w.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.out_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.lstm_w.as_slice_mut().expect("standard layout"),
            self.lstm_b.as_slice_mut().expect("standard layout"),
            self.dense1_w.as_slice_mut().expect("standard layout"),
            self.dense1_b.as_slice_mut().expect("standard layout"),
            self.dense2_w.as_slice_mut().expect("standard layout"),
            self.dense2_b.as_slice_mut().expect("standard layout"),
            self.out_w.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.out_b),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Recurrent state for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(self.c.iter()).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_shapes() {
        let d = Dims::standard();
        let p = ModelParams::zeros(d);
        assert_eq!(p.lstm_w.dim(), (1600, 413));
        assert_eq!(p.dense1_w.dim(), (200, 400));
        assert_eq!(p.dense2_w.dim(), (100, 200));
        assert_eq!(p.out_w.dim(), (1, 100));
        assert_eq!(p.dims(), d);
        let total: usize = p.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, d.param_count());
    }

    #[test]
    fn init_is_deterministic() {
        let d = Dims::fan_in(13, 16);
        assert_eq!(init_params(d, 3), init_params(d, 3));
        assert_ne!(init_params(d, 3), init_params(d, 4));
    }

    #[test]
    fn forget_bias_block_is_one() {
        let d = Dims::fan_in(13, 8);
        let p = init_params(d, 1);
        for (i, &b) in p.lstm_b.iter().enumerate() {
            let expected = if (8..16).contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(b, expected, "bias {i}");
        }
        assert_eq!(p.out_b, 0.0);
    }

    #[test]
    fn glorot_sampler_is_centred_and_bounded() {
        let p = init_params(Dims::standard(), 11);
        let w = &p.lstm_w;
        let limit = (6.0 / (1600.0 + 413.0f64)).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
        let n = w.len() as f64;
        let mean = w.sum() / n;
        // Uniform(-a, a) has standard deviation a / sqrt(3).
        let std_err = limit / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * std_err, "mean {mean} vs {std_err}");
        let var = w.mapv(|v| v * v).sum() / n;
        assert!((var - limit * limit / 3.0).abs() < 0.01 * limit * limit);
    }
}
