//! 64-bit bitstring tags and the streak-based match metric.
//!
//! Tags label program modules, jump destinations, and messages. Match
//! quality between two tags is scored by a dual-streak rarity metric:
//! the longest contiguous run of agreeing bits is weighed against the
//! longest contiguous run of disagreeing bits. Lookup thresholds are
//! calibrated empirically as percentiles of the distance distribution
//! over uniformly random tag pairs.

use std::fmt;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const TAG_BITS: u32 = 64;

/// A 64-bit bitstring tag.
///
/// Rendered as 16 hex digits, most significant bit first. The "first 32
/// bits" used by configurable operations are the high half; the "final
/// bit" that gates exposed-table membership is the least significant.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tag(pub u64);

impl Tag {
    pub fn bits(self) -> u64 {
        self.0
    }

    /// High 32 bits, used as the data payload of configurable ops.
    pub fn high32(self) -> u32 {
        (self.0 >> 32) as u32
    }

    /// Modules whose tag ends in 0 are reachable from other cells.
    pub fn ends_in_zero(self) -> bool {
        self.0 & 1 == 0
    }

    pub fn random<R: Rng>(rng: &mut R) -> Tag {
        Tag(rng.gen())
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Tag> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(Tag)
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tag({:016x})", self.0)
    }
}

/// Longest run of set bits in `x`.
fn longest_one_run(mut x: u64) -> u32 {
    let mut len = 0;
    while x != 0 {
        x &= x << 1;
        len += 1;
    }
    len
}

/// Approximate rarity of a length-`k` streak in a random 64-bit string.
fn streak_rarity(k: u32) -> f64 {
    (TAG_BITS - k + 1) as f64 * (2f64).powi(-(k as i32))
}

/// Match distance between two tags, in [0, 1]; 0 is a perfect match.
///
/// Computed from the longest matching streak `m` and longest mismatching
/// streak `n` of `a XOR b` as `p(m) / (p(m) + p(n))` where
/// `p(k) = (64 - k + 1) / 2^k`: a rare (long) matching streak drives the
/// distance toward 0, a rare mismatching streak toward 1.
pub fn match_distance(a: Tag, b: Tag) -> f64 {
    let x = a.0 ^ b.0;
    let m = longest_one_run(!x); // agreeing bits
    let n = longest_one_run(x); // disagreeing bits
    let pm = streak_rarity(m);
    let pn = streak_rarity(n);
    (pm / (pm + pn)).clamp(0.0, 1.0)
}

/// Lookup thresholds expressed as distance quantiles over random pairs.
///
/// Module activation requires match quality at the 80th-or-better
/// percentile (the 0.2 distance quantile); jumps require the 50th.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub module_threshold: f64,
    pub jump_threshold: f64,
}

pub const CALIBRATION_SEED: u64 = 0x7a67_ca1b;
pub const CALIBRATION_SAMPLES: usize = 100_000;

/// Empirical distance quantiles over `n_samples` uniform random pairs.
pub fn calibrate_thresholds(rng_seed: u64, n_samples: usize) -> MatchThresholds {
    assert!(n_samples >= 1, "calibration needs at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut distances: Vec<f64> = (0..n_samples)
        .map(|_| match_distance(Tag::random(&mut rng), Tag::random(&mut rng)))
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| {
        let rank = ((q * n_samples as f64).ceil() as usize).max(1) - 1;
        distances[rank.min(n_samples - 1)]
    };
    MatchThresholds {
        module_threshold: quantile(0.2),
        jump_threshold: quantile(0.5),
    }
}

/// Process-wide thresholds at the default seed and sample count.
pub fn default_thresholds() -> MatchThresholds {
    static CACHE: OnceLock<MatchThresholds> = OnceLock::new();
    *CACHE.get_or_init(|| calibrate_thresholds(CALIBRATION_SEED, CALIBRATION_SAMPLES))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_tags_match_perfectly() {
        let t = Tag(0xdead_beef_cafe_f00d);
        assert!(match_distance(t, t) < 1e-12);
    }

    #[test]
    fn complementary_tags_are_worst_match() {
        let t = Tag(0x0123_4567_89ab_cdef);
        let not_t = Tag(!t.0);
        assert!(match_distance(t, not_t) > 1.0 - 1e-12);
    }

    #[test]
    fn distance_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = Tag::random(&mut rng);
            let b = Tag::random(&mut rng);
            let d = match_distance(a, b);
            assert_eq!(d, match_distance(b, a));
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn empirical_distance_distribution_is_wide() {
        // Monte Carlo oracle: the distance CDF over random pairs must be
        // spread out enough that the 20th and 50th percentiles separate.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ds: Vec<f64> = (0..100_000)
            .map(|_| match_distance(Tag::random(&mut rng), Tag::random(&mut rng)))
            .collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p20 = ds[20_000];
        let p50 = ds[50_000];
        assert!(p20 < p50, "p20={p20} p50={p50}");
        // the metric is a function of integer run lengths, so the CDF
        // has steps; require a rich value set with no dominant atom
        let mut run = 1usize;
        let mut max_run = 1usize;
        let mut distinct = 1usize;
        for w in ds.windows(2) {
            if w[0] == w[1] {
                run += 1;
                max_run = max_run.max(run);
            } else {
                run = 1;
                distinct += 1;
            }
        }
        assert!(distinct >= 100, "only {distinct} distinct distances");
        assert!(max_run < 25_000, "point mass of {max_run} samples");
    }

    #[test]
    fn calibration_is_deterministic() {
        let a = calibrate_thresholds(42, 100_000);
        let b = calibrate_thresholds(42, 100_000);
        assert_eq!(a, b);
    }

    #[test]
    fn module_threshold_below_jump_threshold() {
        let t = calibrate_thresholds(42, 100_000);
        assert!(t.module_threshold < t.jump_threshold);
    }

    #[test]
    fn calibration_converges_with_sample_count() {
        let small = calibrate_thresholds(42, 100_000);
        let large = calibrate_thresholds(43, 1_000_000);
        assert!((small.module_threshold - large.module_threshold).abs() < 0.01);
        assert!((small.jump_threshold - large.jump_threshold).abs() < 0.01);
    }

    #[test]
    fn hex_round_trip() {
        let t = Tag(0x0012_3456_789a_bcde);
        assert_eq!(Tag::from_hex(&t.to_hex()), Some(t));
        assert_eq!(Tag::from_hex("xyz"), None);
        assert_eq!(Tag::from_hex("00"), None);
    }
}
