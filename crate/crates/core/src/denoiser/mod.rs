//! Noise predictors queried by the reverse sampler.

pub mod checkpoint;
pub mod neural;
pub mod oracle;
pub mod train;

use crate::error::{invalid, Result};
use crate::grid::{MaskMatrix, TrafficGrid};

pub use neural::{NetConfig, NeuralDenoiser, Param};
pub use oracle::{OracleDenoiser, OracleKind};
pub use train::{finetune_conditional, train_unconditional, TrainConfig, TrainReport};

/// Observations fed to the conditioning path.
///
/// The unconditional context carries all-zero observations and mask; the
/// network still sees its node and time embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningContext {
    observed: TrafficGrid,
    mask: MaskMatrix,
    unconditional: bool,
}

impl ConditioningContext {
    /// Stores `observed * mask`.
    pub fn conditional(observed: &TrafficGrid, mask: &MaskMatrix) -> Result<Self> {
        Ok(Self {
            observed: observed.masked(mask)?,
            mask: mask.clone(),
            unconditional: false,
        })
    }

    pub fn unconditional(n_nodes: usize, n_steps: usize) -> Self {
        Self {
            observed: TrafficGrid::zeros(n_nodes, n_steps),
            mask: MaskMatrix::all_missing(n_nodes, n_steps),
            unconditional: true,
        }
    }

    pub fn observed(&self) -> &TrafficGrid {
        &self.observed
    }

    pub fn mask(&self) -> &MaskMatrix {
        &self.mask
    }

    pub fn is_unconditional(&self) -> bool {
        self.unconditional
    }

    pub fn shape(&self) -> (usize, usize) {
        self.observed.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eps: TrafficGrid,
    /// Row-stochastic `N x N` node affinity, row-major.
    pub attention: Option<Vec<f64>>,
}

/// Predicts the noise in `x_k` at step `k`.
pub trait Denoiser: Send + Sync {
    fn predict(&self, x_k: &TrafficGrid, k: usize, ctx: &ConditioningContext) -> Result<Prediction>;
}

pub(crate) fn check_input(x_k: &TrafficGrid, ctx: &ConditioningContext) -> Result<()> {
    if x_k.shape() != ctx.shape() {
        return Err(crate::error::shape_mismatch(ctx.shape(), x_k.shape()));
    }
    if !x_k.is_finite() {
        return Err(invalid("non-finite denoiser input"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconditional_context_is_empty() {
        let c = ConditioningContext::unconditional(3, 4);
        assert!(c.is_unconditional());
        assert_eq!(c.observed(), &TrafficGrid::zeros(3, 4));
        assert_eq!(c.mask().observed_count(), 0);
    }

    #[test]
    fn conditional_context_zeroes_hidden_entries() {
        let g = TrafficGrid::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let m = MaskMatrix::new(1, 3, vec![true, false, true]).unwrap();
        let c = ConditioningContext::conditional(&g, &m).unwrap();
        assert_eq!(c.observed().values(), &[1.0, 0.0, 3.0]);
    }
}
