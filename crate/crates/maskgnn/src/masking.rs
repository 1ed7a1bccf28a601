//! Bernoulli select function sampling and the masking function.
//!
//! A mask is one realization of per-node keep/drop flags over a masking
//! domain (the train nodes). Masks are reproducible from (seed, epoch) and
//! never serialized. Outside training the effective mask is all-ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Derive an independent RNG stream from a base seed and a stream index.
/// SplitMix64 finalizer over the combined words.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// One Bernoulli select realization over the nodes of a graph. Nodes outside
/// the sampled domain keep flag 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector {
    delta: Vec<bool>,
    pub p: f64,
    pub epoch: u64,
    pub seed: u64,
}

impl MaskVector {
    pub fn all_ones(num_nodes: usize) -> MaskVector {
        MaskVector {
            delta: vec![true; num_nodes],
            p: 1.0,
            epoch: 0,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn keep(&self, v: usize) -> bool {
        self.delta[v]
    }

    pub fn flags(&self) -> &[bool] {
        &self.delta
    }

    pub fn num_masked(&self) -> usize {
        self.delta.iter().filter(|&&d| !d).count()
    }

    /// Force one node's flag; used to build specific mask realizations for
    /// oracle checks.
    pub fn set_flag(&mut self, v: usize, keep: bool) {
        self.delta[v] = keep;
    }
}

/// Sample a Bernoulli select function over `domain` (indices into a node set
/// of size `num_nodes`). Each domain node independently keeps flag 1 with
/// probability `p`; the draw stream is fixed by (seed, epoch). With p = 1 no
/// randomness is consumed and every flag is 1.
pub fn sample_select(
    domain: &[usize],
    num_nodes: usize,
    p: f64,
    seed: u64,
    epoch: u64,
) -> Result<MaskVector> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!(
            "masking rate p = {p} outside (0, 1]: every node would be masked"
        )));
    }
    let mut delta = vec![true; num_nodes];
    if p < 1.0 {
        let mut rng = stream_rng(seed, epoch);
        for &v in domain {
            delta[v] = rng.random::<f64>() < p;
        }
    }
    Ok(MaskVector {
        delta,
        p,
        epoch,
        seed,
    })
}

/// The masking function: keeps exactly the elements whose flag is 1.
/// Elements outside the mask's range are kept (they are outside the domain).
pub fn apply_mask(s: &[usize], delta: &MaskVector) -> Vec<usize> {
    s.iter()
        .copied()
        .filter(|&e| e >= delta.len() || delta.keep(e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_one_keeps_everything() {
        let m = sample_select(&[0, 1, 2, 3], 4, 1.0, 9, 3).unwrap();
        assert!(m.flags().iter().all(|&d| d));
    }

    #[test]
    fn p_zero_rejected() {
        assert!(sample_select(&[0], 1, 0.0, 1, 1).is_err());
        assert!(sample_select(&[0], 1, -0.5, 1, 1).is_err());
    }

    #[test]
    fn deterministic_per_seed_epoch() {
        let domain: Vec<usize> = (0..100).collect();
        let a = sample_select(&domain, 100, 0.5, 7, 12).unwrap();
        let b = sample_select(&domain, 100, 0.5, 7, 12).unwrap();
        assert_eq!(a, b);
        let c = sample_select(&domain, 100, 0.5, 7, 13).unwrap();
        assert_ne!(a.flags(), c.flags());
    }

    #[test]
    fn keep_fraction_near_p() {
        let n = 10_000;
        let domain: Vec<usize> = (0..n).collect();
        let m = sample_select(&domain, n, 0.5, 123, 0).unwrap();
        let kept = m.flags().iter().filter(|&&d| d).count() as f64 / n as f64;
        assert!((0.47..=0.53).contains(&kept), "kept fraction {kept}");
    }

    #[test]
    fn outside_domain_unmasked() {
        // Only nodes 0 and 1 are in the domain; others must keep flag 1.
        let m = sample_select(&[0, 1], 50, 0.01, 99, 4).unwrap();
        assert!(m.flags()[2..].iter().all(|&d| d));
    }

    #[test]
    fn apply_mask_direct_cases() {
        let mut m = MaskVector::all_ones(3);
        assert_eq!(apply_mask(&[0, 1, 2], &m), vec![0, 1, 2]);
        m.set_flag(1, false);
        assert_eq!(apply_mask(&[0, 1, 2], &m), vec![0, 2]);
        for v in 0..3 { m.set_flag(v, false); }
        assert!(apply_mask(&[0, 1, 2], &m).is_empty());
    }
}
