//! Seeded random streams.
//!
//! Every run owns one seed. Independent sub-streams are addressed by an
//! index (training step, evaluation pass) and a purpose tag, so changing how
//! often evaluation interleaves with training never shifts the draws that
//! training sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Batch = 0,
    LayerNoise = 1,
    InducingNoise = 2,
    Init = 3,
    Eval = 4,
    Data = 5,
}

const PURPOSES: u64 = 8;

/// Sub-stream `index` of `seed` for the given purpose.
pub fn stream(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(PURPOSES).wrapping_add(purpose as u64));
    rng
}

pub fn standard_normal<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<T> {
    use rand::Rng;
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(lo..hi)))
}
