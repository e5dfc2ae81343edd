use super::params::{Dims, ModelParams};

/// RMSprop running averages of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub sq_avg: ModelParams,
    pub rho: f64,
    pub epsilon: f64,
}

impl OptState {
    pub fn new(dims: Dims) -> Self {
        Self::with_hyper(dims, 0.9, 1e-8)
    }

    pub fn with_hyper(dims: Dims, rho: f64, epsilon: f64) -> Self {
        OptState {
            sq_avg: ModelParams::zeros(dims),
            rho,
            epsilon,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

/// `s ← ρs + (1−ρ)g²; θ ← θ − lr·g/(√s + ε)`, elementwise.
pub fn rmsprop_update(params: &mut ModelParams, grads: &ModelParams, opt: &mut OptState, lr: f64) {
    let (rho, eps) = (opt.rho, opt.epsilon);
    for ((theta, g), s) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.sq_avg.tensors_mut())
    {
        for ((t, &g), s) in theta.iter_mut().zip(g).zip(s.iter_mut()) {
            *s = rho * *s + (1.0 - rho) * g * g;
            *t -= lr * g / (s.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(Dims::fan_in(1, 1));
        p.out_b = v;
        p
    }

    #[test]
    fn zero_gradient_only_decays() {
        let dims = Dims::fan_in(2, 4);
        let mut p = crate::neural::init_params(dims, 1);
        let before = p.clone();
        let mut opt = OptState::new(dims);
        opt.sq_avg.lstm_w.fill(2.0);
        rmsprop_update(&mut p, &ModelParams::zeros(dims), &mut opt, 0.001);
        assert_eq!(p, before);
        assert!(opt.sq_avg.lstm_w.iter().all(|&s| (s - 1.8).abs() < 1e-15));
    }

    #[test]
    fn first_step_formula() {
        let mut p = scalar_model(0.5);
        let mut opt = OptState::new(p.dims());
        let g = 0.3;
        rmsprop_update(&mut p, &scalar_model(g), &mut opt, 0.001);
        let expected = 0.5 - 0.001 * g / ((0.1 * g * g).sqrt() + 1e-8);
        assert_eq!(p.out_b, expected);
    }

    #[test]
    fn five_step_trajectory() {
        // Minimizing θ² from θ = 1 with lr 0.01, values from an independent scalar recurrence.
        let oracle = [
            0.968_377_223_898_316_2,
            0.945_788_025_488_101_3,
            0.927_053_098_721_725_5,
            0.910_543_456_597_569_6,
            0.895_506_711_010_378_3,
        ];
        let mut p = scalar_model(1.0);
        let mut opt = OptState::new(p.dims());
        for expected in oracle {
            let g = scalar_model(2.0 * p.out_b);
            rmsprop_update(&mut p, &g, &mut opt, 0.01);
            assert!((p.out_b - expected).abs() <= 1e-12 * expected);
        }
        assert!(opt.sq_avg.out_b >= 0.0);
    }
}
