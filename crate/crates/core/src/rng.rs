//! Seed derivation and random sampling helpers.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a 64-bit
//! value obtained by mixing a master seed with a path of integers (trial
//! index, restart index, purpose tag). The mixing is a fixed SplitMix64
//! finalizer so streams are stable across platforms and releases.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type WsRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a string, used to turn purpose labels into stream tags.
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_from(seed: u64) -> WsRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, path: &[u64]) -> WsRng {
    rng_from(derive_seed(master, path))
}

pub fn gaussian_vec(rng: &mut WsRng, len: usize, std: f64) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)))
}

/// Gaussian matrix filled column by column.
pub fn gaussian_matrix(rng: &mut WsRng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DMatrix::from_vec(rows, cols, data)
}

/// Uniform direction on the unit sphere in `dim` dimensions.
pub fn unit_vector(rng: &mut WsRng, dim: usize) -> DVector<f64> {
    loop {
        let g = gaussian_vec(rng, dim, 1.0);
        let norm = g.norm();
        if norm > 1e-300 {
            return g / norm;
        }
    }
}

pub fn rademacher(rng: &mut WsRng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}
