//! Exact noise predictor for a Gaussian world.
//!
//! The optimal noise prediction at step `k` is
//! `-sqrt(1 - abar_k) * score_k(x_k)`. Conditioning is fixed when the
//! oracle is built from the world's observation set; the context passed
//! to `predict` only selects the unconditional path.

use nalgebra::DVector;

use super::{check_input, ConditioningContext, Denoiser, Prediction};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::grid::TrafficGrid;
use crate::oracle_world::{ContaminatedScores, GaussianDensity, GaussianOracleWorld};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleKind {
    /// Prior score for every context.
    Prior,
    /// Exact conditional score for conditional contexts.
    Conditional,
    /// Mixture `(1 - pi_true) prior + pi_true conditional` for conditional
    /// contexts: a deliberately imperfect conditional model.
    Contaminated { pi_true: f64 },
}

#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    n_nodes: usize,
    n_steps: usize,
    kind: OracleKind,
    sched: NoiseSchedule,
    prior: Vec<GaussianDensity>,
    cond: Vec<ContaminatedScores>,
    attention: Vec<Vec<f64>>,
}

impl OracleDenoiser {
    /// Factorizes every noised marginal up front.
    pub fn new(world: &GaussianOracleWorld, sched: &NoiseSchedule, kind: OracleKind) -> Result<Self> {
        let pi = match kind {
            OracleKind::Contaminated { pi_true } => {
                if !(pi_true > 0.0 && pi_true <= 1.0) {
                    return Err(invalid(format!("pi_true {pi_true} outside (0, 1]")));
                }
                pi_true
            }
            _ => 1.0,
        };
        let k_max = sched.n_steps();
        let mut prior = Vec::with_capacity(k_max);
        let mut cond = Vec::with_capacity(k_max);
        let mut attention = Vec::with_capacity(k_max);
        for k in 1..=k_max {
            let p = world.prior_marginal(k, sched)?;
            let c = world.conditional_marginal(k, sched)?;
            cond.push(ContaminatedScores::new(p.clone(), c, pi)?);
            prior.push(p);
            attention.push(world.attention_proxy(k, sched)?);
        }
        Ok(Self {
            n_nodes: world.n_nodes(),
            n_steps: world.n_steps(),
            kind,
            sched: sched.clone(),
            prior,
            cond,
            attention,
        })
    }

    pub fn kind(&self) -> OracleKind {
        self.kind
    }

    /// Exact score at step `k` for the given context.
    pub fn score(&self, x: &DVector<f64>, k: usize, ctx: &ConditioningContext) -> Result<DVector<f64>> {
        self.sched.check_step(k)?;
        Ok(match (self.kind, ctx.is_unconditional()) {
            (OracleKind::Prior, _) | (_, true) => self.prior[k - 1].score(x),
            (OracleKind::Conditional, false) => self.cond[k - 1].conditional_score(x),
            (OracleKind::Contaminated { .. }, false) => self.cond[k - 1].contaminated_score(x),
        })
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, x_k: &TrafficGrid, k: usize, ctx: &ConditioningContext) -> Result<Prediction> {
        check_input(x_k, ctx)?;
        if x_k.shape() != (self.n_nodes, self.n_steps) {
            return Err(crate::error::shape_mismatch((self.n_nodes, self.n_steps), x_k.shape()));
        }
        let x = DVector::from_column_slice(x_k.values());
        let s = self.score(&x, k, ctx)?;
        let f = -(1.0 - self.sched.alpha_bar(k)).sqrt();
        let eps = TrafficGrid::new(self.n_nodes, self.n_steps, s.iter().map(|v| f * v).collect())?;
        Ok(Prediction {
            eps,
            attention: Some(self.attention[k - 1].clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{quadratic_schedule, VarianceMode};
    use crate::oracle_world::{make_gaussian_world, oracle_cond_score, oracle_uncond_score};

    #[test]
    fn predictions_match_scores() {
        let sched = quadratic_schedule(20, 1e-4, 0.5, VarianceMode::BetaTilde).unwrap();
        let w = make_gaussian_world(2, 3, 0.5, 0.5, 0.0, 0)
            .unwrap()
            .with_observations(vec![(0, 1.0), (1, 0.5)])
            .unwrap();
        let o = OracleDenoiser::new(&w, &sched, OracleKind::Conditional).unwrap();
        let x = TrafficGrid::new(2, 3, vec![0.1, -0.2, 0.3, 0.9, -1.0, 0.0]).unwrap();
        let xv = DVector::from_column_slice(x.values());
        let k = 7;
        let f = -(1.0 - sched.alpha_bar(k)).sqrt();

        let ctx_c = ConditioningContext::conditional(&x, &crate::MaskMatrix::all_observed(2, 3)).unwrap();
        let p = o.predict(&x, k, &ctx_c).unwrap();
        let s = oracle_cond_score(&w, &xv, k, &sched).unwrap();
        for (a, b) in p.eps.values().iter().zip(s.iter()) {
            assert!((a - f * b).abs() < 1e-12);
        }

        let ctx_u = ConditioningContext::unconditional(2, 3);
        let p = o.predict(&x, k, &ctx_u).unwrap();
        let s = oracle_uncond_score(&w, &xv, k, &sched).unwrap();
        for (a, b) in p.eps.values().iter().zip(s.iter()) {
            assert!((a - f * b).abs() < 1e-12);
        }
        let att = p.attention.unwrap();
        assert_eq!(att.len(), 4);
        assert!(o.predict(&x, 0, &ctx_u).is_err());
    }
}
