//! Block missingness patterns: spatially random (SR-TC) and spatially
//! clustered (SC-TC), both temporally contiguous.
//!
//! Masks are drawn from `ChaCha8Rng::seed_from_u64(seed)`, a counter-based
//! generator whose stream is identical on every platform. Draw order is
//! fixed: SR-TC visits nodes in order and patches within a node; SC-TC
//! visits communities in order and patches within a community. One uniform
//! `u` is drawn per unit and the unit is masked when `u < alpha`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::kmeans;
use crate::error::{invalid, Error, Result};
use crate::grid::{GraphSpec, MaskMatrix};

/// Which block pattern to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPattern {
    SrTc,
    ScTc,
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPattern::SrTc => "sr-tc",
            MaskPattern::ScTc => "sc-tc",
        })
    }
}

impl FromStr for MaskPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sr-tc" | "srtc" => Ok(MaskPattern::SrTc),
            "sc-tc" | "sctc" => Ok(MaskPattern::ScTc),
            other => Err(invalid(format!("unknown mask pattern `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPatternConfig {
    pub pattern: MaskPattern,
    /// Probability that a block is missing.
    pub missing_rate: f64,
    /// Temporal patch length.
    pub patch_length: usize,
    /// Community count (SC-TC only).
    pub n_communities: usize,
    pub seed: u64,
}

impl Default for MaskPatternConfig {
    fn default() -> Self {
        Self {
            pattern: MaskPattern::SrTc,
            missing_rate: 0.8,
            patch_length: 12,
            n_communities: 1,
            seed: 0,
        }
    }
}

impl MaskPatternConfig {
    fn validate(&self, length: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(invalid(format!(
                "missing rate {} outside [0, 1]",
                self.missing_rate
            )));
        }
        if self.patch_length == 0 {
            return Err(invalid("patch length must be positive"));
        }
        if length < self.patch_length {
            return Err(invalid(format!(
                "series length {length} shorter than patch length {}",
                self.patch_length
            )));
        }
        Ok(())
    }
}

/// Number of patches covering `length` columns; a shorter final patch
/// counts as one unit.
pub fn patch_count(length: usize, patch_length: usize) -> usize {
    length.div_ceil(patch_length)
}

fn patch_range(p: usize, patch_length: usize, length: usize) -> std::ops::Range<usize> {
    p * patch_length..((p + 1) * patch_length).min(length)
}

/// Each (node, patch) pair is missing independently with probability
/// `missing_rate`.
pub fn mask_sr_tc(n_nodes: usize, length: usize, cfg: &MaskPatternConfig) -> Result<MaskMatrix> {
    cfg.validate(length)?;
    if n_nodes == 0 {
        return Err(invalid("mask needs at least one node"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask = MaskMatrix::all_observed(n_nodes, length);
    let patches = patch_count(length, cfg.patch_length);
    for i in 0..n_nodes {
        for p in 0..patches {
            if rng.random::<f64>() < cfg.missing_rate {
                for t in patch_range(p, cfg.patch_length, length) {
                    mask.set(i, t, false);
                }
            }
        }
    }
    Ok(mask)
}

/// Each (community, patch) block is missing independently with probability
/// `missing_rate`; all members of a community share the block.
///
/// Communities come from `graph` when present; otherwise they are built by
/// seeded k-means over adjacency rows with `n_communities` centers.
pub fn mask_sc_tc(graph: &GraphSpec, length: usize, cfg: &MaskPatternConfig) -> Result<MaskMatrix> {
    cfg.validate(length)?;
    let n = graph.n_nodes();
    let communities = match graph.communities() {
        Some(c) => c.to_vec(),
        None => derive_communities(graph, cfg.n_communities, cfg.seed)?,
    };
    if communities.len() > n {
        return Err(invalid(format!(
            "{} communities exceed {n} nodes",
            communities.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask = MaskMatrix::all_observed(n, length);
    let patches = patch_count(length, cfg.patch_length);
    for group in &communities {
        for p in 0..patches {
            if rng.random::<f64>() < cfg.missing_rate {
                for &i in group {
                    for t in patch_range(p, cfg.patch_length, length) {
                        mask.set(i, t, false);
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Seeded k-means over adjacency rows; groups are ordered by smallest
/// member so the result does not depend on label numbering.
pub fn derive_communities(graph: &GraphSpec, n_communities: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = graph.n_nodes();
    if n_communities == 0 || n_communities > n {
        return Err(invalid(format!(
            "community count {n_communities} must lie in 1..={n}"
        )));
    }
    let features: Vec<Vec<f64>> = (0..n).map(|i| graph.adjacency_row(i).to_vec()).collect();
    let assignment = kmeans(&features, n_communities, seed, crate::clustering::DEFAULT_MAX_ITER)?;
    let mut groups: Vec<Vec<usize>> = (0..n_communities).map(|j| assignment.members(j)).collect();
    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}

/// Dispatches on `cfg.pattern`. SR-TC ignores the graph's communities.
pub fn generate_mask(graph: &GraphSpec, length: usize, cfg: &MaskPatternConfig) -> Result<MaskMatrix> {
    match cfg.pattern {
        MaskPattern::SrTc => mask_sr_tc(graph.n_nodes(), length, cfg),
        MaskPattern::ScTc => mask_sc_tc(graph, length, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alpha: f64, patch: usize, seed: u64) -> MaskPatternConfig {
        MaskPatternConfig {
            pattern: MaskPattern::SrTc,
            missing_rate: alpha,
            patch_length: patch,
            n_communities: 1,
            seed,
        }
    }

    #[test]
    fn extreme_rates() {
        let m = mask_sr_tc(5, 36, &cfg(0.0, 12, 1)).unwrap();
        assert_eq!(m.observed_count(), 5 * 36);
        let m = mask_sr_tc(5, 36, &cfg(1.0, 12, 1)).unwrap();
        assert_eq!(m.observed_count(), 0);
        assert!(mask_sr_tc(5, 36, &cfg(1.5, 12, 1)).is_err());
        assert!(mask_sr_tc(5, 36, &cfg(-0.1, 12, 1)).is_err());
        assert!(mask_sr_tc(5, 6, &cfg(0.5, 12, 1)).is_err());
    }

    #[test]
    fn runs_are_whole_patches_including_ragged_tail() {
        let length = 30;
        let m = mask_sr_tc(40, length, &cfg(0.5, 12, 9)).unwrap();
        for i in 0..40 {
            for p in 0..patch_count(length, 12) {
                let r = patch_range(p, 12, length);
                let first = m.is_observed(i, r.start);
                assert!(r.clone().all(|t| m.is_observed(i, t) == first));
            }
        }
        assert_eq!(patch_range(2, 12, 30), 24..30);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = mask_sr_tc(20, 120, &cfg(0.8, 12, 42)).unwrap();
        let b = mask_sr_tc(20, 120, &cfg(0.8, 12, 42)).unwrap();
        let c = mask_sr_tc(20, 120, &cfg(0.8, 12, 43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_community_shares_every_patch() {
        let g = GraphSpec::ring(7).unwrap();
        let c = MaskPatternConfig {
            pattern: MaskPattern::ScTc,
            n_communities: 1,
            ..cfg(0.5, 4, 5)
        };
        let m = mask_sc_tc(&g, 40, &c).unwrap();
        for t in 0..40 {
            assert!((0..7).all(|i| m.is_observed(i, t) == m.is_observed(0, t)));
        }
    }

    #[test]
    fn too_many_communities_rejected() {
        let g = GraphSpec::ring(3).unwrap();
        let c = MaskPatternConfig {
            pattern: MaskPattern::ScTc,
            n_communities: 4,
            ..cfg(0.5, 4, 5)
        };
        assert!(mask_sc_tc(&g, 12, &c).is_err());
    }

    #[test]
    fn singleton_communities_follow_sr_tc_law() {
        let n = 60;
        let g = GraphSpec::ring(n).unwrap();
        let c = MaskPatternConfig {
            pattern: MaskPattern::ScTc,
            n_communities: n,
            ..cfg(0.3, 12, 8)
        };
        let m = mask_sc_tc(&g, 1200, &c).unwrap();
        let trials = (n * 100) as f64;
        let sd = (0.3 * 0.7 / trials).sqrt();
        assert!((m.missing_rate() - 0.3).abs() < 3.0 * sd);
    }

    #[test]
    fn pattern_parses() {
        assert_eq!("SR-TC".parse::<MaskPattern>().unwrap(), MaskPattern::SrTc);
        assert_eq!("sc-tc".parse::<MaskPattern>().unwrap(), MaskPattern::ScTc);
        assert!("mcar".parse::<MaskPattern>().is_err());
    }
}
