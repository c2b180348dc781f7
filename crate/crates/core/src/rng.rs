//! Seed bookkeeping.
//!
//! All randomness descends from one master seed through named substreams
//! (`model-init`, `fbsde`, `fixedpoint`, `nagent`, ...). A particle owns its
//! own ChaCha stream keyed by `(substream, particle)`, and draws for knot `k`
//! are the `k`-th block of that stream, so results never depend on how work
//! is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self(splitmix64(master))
    }

    /// Child stream addressed by a label.
    pub fn named(self, label: &str) -> Self {
        Self(splitmix64(self.0 ^ fnv1a(label)))
    }

    /// Child stream addressed by an index.
    pub fn index(self, i: u64) -> Self {
        Self(splitmix64(self.0.wrapping_add(splitmix64(i ^ 0x5851_f42d_4c95_7f2d))))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Brownian increments for `n_particles` independent paths, laid out as
/// `[particle][step][coordinate]` and scaled by `sqrt(dt)`.
pub fn brownian_increments(
    stream: SeedStream,
    n_particles: usize,
    n_steps: usize,
    dim: usize,
    dt: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_particles * n_steps * dim);
    for p in 0..n_particles {
        out.extend(brownian_path(stream.index(p as u64), n_steps, dim, dt));
    }
    out
}

/// Increments of a single path, `[step][coordinate]`; particle `p` of
/// [`brownian_increments`] is `brownian_path(stream.index(p), ..)`.
pub fn brownian_path(stream: SeedStream, n_steps: usize, dim: usize, dt: f64) -> Vec<f64> {
    let scale = dt.sqrt();
    let mut rng = stream.rng();
    (0..n_steps * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_distinct_and_stable() {
        let root = SeedStream::new(7);
        assert_eq!(root.named("fbsde"), SeedStream::new(7).named("fbsde"));
        assert_ne!(root.named("fbsde"), root.named("nagent"));
        assert_ne!(root.index(0), root.index(1));
        assert_ne!(root.named("a").index(1), root.index(1).named("a"));
    }

    #[test]
    fn increments_do_not_depend_on_particle_count() {
        let s = SeedStream::new(3).named("w");
        let small = brownian_increments(s, 2, 5, 1, 0.1);
        let large = brownian_increments(s, 4, 5, 1, 0.1);
        assert_eq!(&small[..], &large[..10]);
    }
}
