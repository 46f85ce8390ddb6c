//! Seeded, splittable randomness.
//!
//! Every stream is a ChaCha8 generator (counter-based) keyed from a root
//! seed and a path of labels, so independent consumers never share state
//! and adding a consumer does not shift the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    key: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix(seed) }
    }

    /// Child keyed by a label.
    pub fn split(&self, label: &str) -> Self {
        // FNV-1a over the label, folded into the parent key.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self {
            key: splitmix(self.key ^ h),
        }
    }

    /// Child keyed by an index.
    pub fn index(&self, i: u64) -> Self {
        Self {
            key: splitmix(self.key.wrapping_add(splitmix(i ^ 0xa076_1d64_78bd_642f))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
