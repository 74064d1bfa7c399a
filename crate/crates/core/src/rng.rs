//! Seeding and counter-based randomness.
//!
//! Every random quantity in the crate is derived from one 64-bit root seed.
//! [`derive_seed`] maps `(root, module, trial)` to an independent 64-bit seed:
//! the module name is hashed with FNV-1a, then root, module hash and trial are
//! folded through the SplitMix64 finaliser.
//!
//! Retention marks use ChaCha8 as a keyed counter-based generator: the key is
//! the sample seed, the stream is the parent box's canonical code and the word
//! position is the child index, so any single mark can be regenerated without
//! touching its siblings.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxlattice::BoxAddress;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for `trial` of `module`, derived from the experiment's root seed.
pub fn derive_seed(root: u64, module: &str, trial: u64) -> u64 {
    splitmix64(
        splitmix64(root ^ fnv1a(module)) ^ splitmix64(trial.wrapping_add(0x632B_E59B_D9B4_E019)),
    )
}

/// Fresh ChaCha8 stream for general-purpose sampling.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bernoulli(p) marks `σ_B` keyed by `(seed, BoxAddress)`.
#[derive(Clone, Debug)]
pub struct MarkSource {
    base: ChaCha8Rng,
    threshold: u64,
}

impl MarkSource {
    pub fn new(seed: u64, p: f64) -> Self {
        // σ = 1 iff a uniform u32 falls below round(p·2³²); p = 1 keeps everything.
        let threshold = (p.clamp(0.0, 1.0) * 4_294_967_296.0).round() as u64;
        MarkSource {
            base: ChaCha8Rng::seed_from_u64(seed),
            threshold,
        }
    }

    fn stream_for(&self, parent: &BoxAddress) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        let code = parent
            .canonical_code()
            .expect("parent address must have a 64-bit canonical code");
        rng.set_stream(code);
        rng.set_word_pos(0);
        rng
    }

    /// Mark of a single non-root box.
    pub fn mark(&self, addr: &BoxAddress) -> bool {
        let parent = addr.parent().expect("the root carries no mark");
        let mut rng = self.stream_for(&parent);
        rng.set_word_pos(addr.child_index() as u128);
        (rng.next_u32() as u64) < self.threshold
    }

    /// Marks of all `N²` children of `parent`, in row-major child order.
    pub fn child_marks(&self, parent: &BoxAddress, out: &mut Vec<bool>) {
        let n2 = (parent.base * parent.base) as usize;
        let mut rng = self.stream_for(parent);
        out.clear();
        out.extend((0..n2).map(|_| (rng.next_u32() as u64) < self.threshold));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_module_and_trial() {
        let a = derive_seed(7, "percolation", 0);
        assert_eq!(a, derive_seed(7, "percolation", 0));
        assert_ne!(a, derive_seed(7, "percolation", 1));
        assert_ne!(a, derive_seed(7, "gff", 0));
        assert_ne!(a, derive_seed(8, "percolation", 0));
    }

    #[test]
    fn single_marks_match_batched_marks() {
        let src = MarkSource::new(99, 0.6);
        let parent = BoxAddress::new(3, 2, 4, 7).unwrap();
        let mut batch = vec![];
        src.child_marks(&parent, &mut batch);
        for (k, child) in parent.subdivide().iter().enumerate() {
            assert_eq!(src.mark(child), batch[k]);
        }
    }

    #[test]
    fn degenerate_probabilities() {
        let all = MarkSource::new(1, 1.0);
        let none = MarkSource::new(1, 0.0);
        let mut v = vec![];
        all.child_marks(&BoxAddress::root(4), &mut v);
        assert!(v.iter().all(|&b| b));
        none.child_marks(&BoxAddress::root(4), &mut v);
        assert!(v.iter().all(|&b| !b));
    }

    #[test]
    fn mark_frequency_is_close_to_p() {
        let src = MarkSource::new(5, 0.3);
        let mut hits = 0usize;
        let mut total = 0usize;
        let mut v = vec![];
        for i in 0..200 {
            for j in 0..200 {
                src.child_marks(&BoxAddress::new(2, 8, i, j).unwrap(), &mut v);
                hits += v.iter().filter(|&&b| b).count();
                total += v.len();
            }
        }
        let f = hits as f64 / total as f64;
        let se = (0.3f64 * 0.7 / total as f64).sqrt();
        assert!((f - 0.3).abs() < 5.0 * se, "frequency {f}");
    }
}
