//! Matrix products for the network, optionally split across threads.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Below this many multiply-adds a product runs on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 18;

/// `c = alpha * a * b + beta * c`.
///
/// The parallel build splits `b` and `c` into column blocks; each output
/// element is still produced by one sequential kernel call, so results do
/// not depend on the thread count.
pub fn gemm(alpha: f64, a: &ArrayView2<f64>, b: &ArrayView2<f64>, beta: f64, c: &mut ArrayViewMut2<f64>) {
    #[cfg(feature = "parallel")]
    {
        let threads = rayon::current_num_threads();
        let work = a.nrows() * a.ncols() * b.ncols();
        if threads > 1 && work >= PAR_MIN_WORK && b.ncols() >= BLOCK_ALIGN * threads {
            gemm_blocked(alpha, a, b, beta, c, threads);
            return;
        }
    }
    general_mat_mul(alpha, a, b, beta, c);
}

const BLOCK_ALIGN: usize = 64;

/// Column-blocked product, one block per task.
pub fn gemm_blocked(
    alpha: f64,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    beta: f64,
    c: &mut ArrayViewMut2<f64>,
    blocks: usize,
) {
    use ndarray::Axis;
    // Block edges on kernel tile boundaries: partial tiles take a different
    // rounding path, which would make results depend on the block count.
    let width = b.ncols().div_ceil(blocks.max(1)).next_multiple_of(BLOCK_ALIGN);
    let b_blocks: Vec<_> = b.axis_chunks_iter(Axis(1), width).collect();
    let c_blocks: Vec<_> = c.axis_chunks_iter_mut(Axis(1), width).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        c_blocks
            .into_par_iter()
            .zip(b_blocks)
            .for_each(|(mut cb, bb)| general_mat_mul(alpha, a, &bb, beta, &mut cb));
    }
    #[cfg(not(feature = "parallel"))]
    for (mut cb, bb) in c_blocks.into_iter().zip(b_blocks) {
        general_mat_mul(alpha, a, &bb, beta, &mut cb);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
