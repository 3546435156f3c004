use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Name of the only generator used anywhere in the crate.
pub const RNG_ALGORITHM: &str = "chacha8/splitmix64-split";

/// Serializable generator identity. Identical seeds give identical streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Independent child stream keyed by `tag`; depends only on
    /// `(seed, tag)`, never on how much of the parent stream was consumed.
    pub fn split(&self, tag: u64) -> RngState {
        RngState {
            seed: splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x6a09_e667_f3bc_c909))),
        }
    }

    pub fn rng(&self) -> Rng {
        Rng {
            state: *self,
            gen: ChaCha8Rng::seed_from_u64(self.seed),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator stream.
pub struct Rng {
    state: RngState,
    gen: ChaCha8Rng,
}

impl Rng {
    pub fn state(&self) -> RngState {
        self.state
    }

    /// Child stream; see [`RngState::split`].
    pub fn fork(&self, tag: u64) -> Rng {
        self.state.split(tag).rng()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.gen.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.gen.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.gen)
    }

    /// Uniform integer in `[0, n)` (multiply-shift; platform independent).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.gen.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.normal()).collect()
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform_range(lo, hi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(7).rng();
        let mut b = RngState::new(7).rng();
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_ignores_consumption() {
        let mut a = RngState::new(3).rng();
        let b = RngState::new(3).rng();
        a.uniform();
        assert_eq!(a.fork(5).next_u64(), b.fork(5).next_u64());
        assert_ne!(b.fork(5).next_u64(), b.fork(6).next_u64());
    }

    #[test]
    fn below_and_uniform_stay_in_range() {
        let mut r = RngState::new(11).rng();
        for _ in 0..10_000 {
            assert!(r.below(13) < 13);
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = RngState::new(1).rng();
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
