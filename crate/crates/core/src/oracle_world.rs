//! Jointly Gaussian spatiotemporal worlds with closed-form scores.
//!
//! A world is `x ~ N(m, Sigma)` over the flattened grid (index
//! `node * T + t`). Forward noising keeps it Gaussian, so the score of the
//! noised marginal at every step, with or without conditioning on observed
//! coordinates, is available exactly.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Error, Result};
use crate::grid::{GraphSpec, MaskMatrix, TrafficGrid};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameters of a ring-graph Kronecker world; the on-disk oracle spec.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub nodes: usize,
    pub steps: usize,
    pub rho_s: f64,
    pub rho_t: f64,
    pub mean: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            nodes: 6,
            steps: 12,
            rho_s: 0.6,
            rho_t: 0.8,
            mean: 0.0,
            seed: 0,
        }
    }
}

impl fmt::Display for WorldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes = {}", self.nodes)?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "rho_s = {}", self.rho_s)?;
        writeln!(f, "rho_t = {}", self.rho_t)?;
        writeln!(f, "mean = {}", self.mean)?;
        writeln!(f, "seed = {}", self.seed)
    }
}

impl FromStr for WorldSpec {
    type Err = Error;

    /// `key = value` lines; `#` starts a comment. Missing keys keep their
    /// defaults, unknown keys are errors.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = WorldSpec::default();
        for (lineno, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("line {}", lineno + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: loc.clone(),
                reason: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |_| Error::Parse {
                location: loc.clone(),
                reason: format!("bad value `{value}` for `{key}`"),
            };
            match key {
                "nodes" => spec.nodes = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "steps" => spec.steps = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "rho_s" => spec.rho_s = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "rho_t" => spec.rho_t = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "mean" => spec.mean = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "seed" => spec.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                other => {
                    return Err(Error::Parse {
                        location: loc,
                        reason: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(spec)
    }
}

impl WorldSpec {
    pub fn build(&self) -> Result<GaussianOracleWorld> {
        make_gaussian_world(self.nodes, self.steps, self.rho_s, self.rho_t, self.mean, self.seed)
    }
}

/// A Gaussian `N(mean, L L^T)` held through its Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(invalid("covariance does not match mean length"));
        }
        let chol = Cholesky::new(cov).ok_or_else(|| invalid("covariance is not positive definite"))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { mean, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `-C^{-1} (x - mean)`.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(&(x - &self.mean))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let z = self.chol.l_dirty().solve_lower_triangular(&d).expect("nonsingular factor");
        -0.5 * (z.norm_squared() + self.log_det + self.dim() as f64 * LN_2PI)
    }

    /// `mean + L z` for standard normal `z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + self.chol.l() * z
    }
}

/// Mixture `(1 - pi) p_u + pi p_c` of a prior and a conditional density.
///
/// The mixture plays the part of an imperfect conditional model; its
/// score, the prior score, and the exact ratio `p_mix(x) / p_u(x)` are
/// what the guidance-scale derivation consumes.
#[derive(Debug, Clone)]
pub struct ContaminatedScores {
    prior: GaussianDensity,
    conditional: GaussianDensity,
    pi: f64,
}

impl ContaminatedScores {
    pub fn new(prior: GaussianDensity, conditional: GaussianDensity, pi: f64) -> Result<Self> {
        if !(pi > 0.0 && pi <= 1.0) {
            return Err(invalid(format!("mixture weight {pi} outside (0, 1]")));
        }
        if prior.dim() != conditional.dim() {
            return Err(invalid("prior and conditional dimensions differ"));
        }
        Ok(Self { prior, conditional, pi })
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    /// Posterior weight of the conditional component at `x`.
    pub fn responsibility(&self, x: &DVector<f64>) -> f64 {
        let lu = (1.0 - self.pi).ln() + self.prior.log_density(x);
        let lc = self.pi.ln() + self.conditional.log_density(x);
        if lu == f64::NEG_INFINITY {
            return 1.0;
        }
        1.0 / (1.0 + (lu - lc).exp())
    }

    pub fn prior_score(&self, x: &DVector<f64>) -> DVector<f64> {
        self.prior.score(x)
    }

    pub fn conditional_score(&self, x: &DVector<f64>) -> DVector<f64> {
        self.conditional.score(x)
    }

    /// Score of the mixture, the responsibility-weighted component scores.
    pub fn contaminated_score(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = self.responsibility(x);
        self.prior.score(x) * (1.0 - r) + self.conditional.score(x) * r
    }

    /// `p_mix(x) / p_u(x) = (1 - pi) + pi p_c(x) / p_u(x)`.
    pub fn posterior_ratio(&self, x: &DVector<f64>) -> f64 {
        let log_q = self.conditional.log_density(x) - self.prior.log_density(x);
        (1.0 - self.pi) + self.pi * log_q.exp()
    }
}

/// Gaussian world over an `N x T` grid with optional observed coordinates.
#[derive(Debug, Clone)]
pub struct GaussianOracleWorld {
    n_nodes: usize,
    n_steps: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Flat index and value, sorted by index.
    observations: Vec<(usize, f64)>,
    seed: u64,
    spatial: Option<DMatrix<f64>>,
    temporal: Option<DMatrix<f64>>,
    cond: (DVector<f64>, DMatrix<f64>),
}

impl GaussianOracleWorld {
    /// Validates symmetry and positive definiteness of `cov`.
    pub fn new(n_nodes: usize, n_steps: usize, mean: Vec<f64>, cov: DMatrix<f64>, seed: u64) -> Result<Self> {
        let d = n_nodes * n_steps;
        if d == 0 {
            return Err(invalid("world needs at least one coordinate"));
        }
        if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
            return Err(invalid(format!("world of {n_nodes}x{n_steps} needs {d} coordinates")));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite world parameter"));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(invalid("covariance is not symmetric"));
                }
            }
        }
        if Cholesky::new(cov.clone()).is_none() {
            return Err(invalid("covariance is not positive definite"));
        }
        let mean = DVector::from_vec(mean);
        let cond = (mean.clone(), cov.clone());
        Ok(Self {
            n_nodes,
            n_steps,
            mean,
            cov,
            observations: Vec::new(),
            seed,
            spatial: None,
            temporal: None,
            cond,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.n_nodes * self.n_steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn observations(&self) -> &[(usize, f64)] {
        &self.observations
    }

    /// Kronecker factors, when the world was built from them.
    pub fn factors(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        Some((self.spatial.as_ref()?, self.temporal.as_ref()?))
    }

    /// Replaces the observation set and recomputes the conditional moments.
    pub fn with_observations(mut self, mut observations: Vec<(usize, f64)>) -> Result<Self> {
        observations.sort_by_key(|o| o.0);
        if observations.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(invalid("duplicate observed coordinate"));
        }
        if let Some(&(i, _)) = observations.iter().find(|o| o.0 >= self.dim()) {
            return Err(invalid(format!("observed index {i} out of range")));
        }
        if observations.iter().any(|o| !o.1.is_finite()) {
            return Err(invalid("non-finite observed value"));
        }
        self.cond = condition(&self.mean, &self.cov, &observations)?;
        self.observations = observations;
        Ok(self)
    }

    /// Observes every entry of `grid` where `mask` is set.
    pub fn observe(self, grid: &TrafficGrid, mask: &MaskMatrix) -> Result<Self> {
        if grid.shape() != (self.n_nodes, self.n_steps) {
            return Err(crate::error::shape_mismatch((self.n_nodes, self.n_steps), grid.shape()));
        }
        mask.ensure_shape(grid.shape())?;
        let obs = (0..self.dim())
            .filter(|&i| mask.entries()[i])
            .map(|i| (i, grid.values()[i]))
            .collect();
        self.with_observations(obs)
    }

    /// Conditional mean and covariance over all coordinates; observed
    /// coordinates have their value as mean and zero variance.
    pub fn conditional_moments(&self) -> (&DVector<f64>, &DMatrix<f64>) {
        (&self.cond.0, &self.cond.1)
    }

    /// `N(sqrt(abar) m, abar Sigma + (1 - abar) I)` at step `k`.
    pub fn prior_marginal(&self, k: usize, sched: &NoiseSchedule) -> Result<GaussianDensity> {
        noised(&self.mean, &self.cov, k, sched)
    }

    /// The same with the conditional moments.
    pub fn conditional_marginal(&self, k: usize, sched: &NoiseSchedule) -> Result<GaussianDensity> {
        noised(&self.cond.0, &self.cond.1, k, sched)
    }

    /// Node-by-node affinity for clustering: the time-averaged node
    /// covariance of the noised conditional marginal, turned into absolute
    /// correlations and normalized so each row sums to one.
    pub fn attention_proxy(&self, k: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        sched.check_step(k)?;
        let ab = sched.alpha_bar(k);
        let (n, t) = (self.n_nodes, self.n_steps);
        let c = &self.cond.1;
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for step in 0..t {
                    let v = ab * c[(i * t + step, j * t + step)];
                    acc += if i == j { v + 1.0 - ab } else { v };
                }
                s[i * n + j] = acc / t as f64;
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                let r = (s[i * n + j] / (s[i * n + i] * s[j * n + j]).sqrt()).abs();
                out[i * n + j] = r;
                row_sum += r;
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= row_sum;
            }
        }
        Ok(out)
    }

    /// One draw of the clean grid from `N(m, Sigma)`, seeded by the world
    /// seed.
    pub fn sample_grid(&self) -> TrafficGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let g = GaussianDensity::new(self.mean.clone(), self.cov.clone()).expect("validated at construction");
        TrafficGrid::from_raw(self.n_nodes, self.n_steps, g.sample(&mut rng).as_slice().to_vec())
    }
}

/// Schur-complement conditioning on the observed coordinates.
fn condition(mean: &DVector<f64>, cov: &DMatrix<f64>, obs: &[(usize, f64)]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = mean.len();
    if obs.is_empty() {
        return Ok((mean.clone(), cov.clone()));
    }
    let o: Vec<usize> = obs.iter().map(|p| p.0).collect();
    let mut is_obs = vec![false; d];
    for &i in &o {
        is_obs[i] = true;
    }
    let h: Vec<usize> = (0..d).filter(|&i| !is_obs[i]).collect();
    let s_oo = DMatrix::from_fn(o.len(), o.len(), |a, b| cov[(o[a], o[b])]);
    let s_ho = DMatrix::from_fn(h.len(), o.len(), |a, b| cov[(h[a], o[b])]);
    let s_hh = DMatrix::from_fn(h.len(), h.len(), |a, b| cov[(h[a], h[b])]);
    let chol = Cholesky::new(s_oo).ok_or_else(|| Error::Numerical("observed covariance block is singular".into()))?;
    let resid = DVector::from_iterator(o.len(), obs.iter().map(|&(i, v)| v - mean[i]));
    let w = chol.solve(&resid);
    let gain_t = chol.solve(&s_ho.transpose());
    let mean_h = DVector::from_iterator(h.len(), h.iter().map(|&i| mean[i])) + &s_ho * w;
    let mut cov_h = s_hh - &s_ho * gain_t;
    cov_h = (&cov_h + cov_h.transpose()) * 0.5;

    let mut m = DVector::zeros(d);
    let mut c = DMatrix::zeros(d, d);
    for &(i, v) in obs {
        m[i] = v;
    }
    for (a, &i) in h.iter().enumerate() {
        m[i] = mean_h[a];
        for (b, &j) in h.iter().enumerate() {
            c[(i, j)] = cov_h[(a, b)];
        }
    }
    Ok((m, c))
}

fn noised(mean: &DVector<f64>, cov: &DMatrix<f64>, k: usize, sched: &NoiseSchedule) -> Result<GaussianDensity> {
    sched.check_step(k)?;
    let ab = sched.alpha_bar(k);
    let mut c = cov * ab;
    for i in 0..c.nrows() {
        c[(i, i)] += 1.0 - ab;
    }
    GaussianDensity::new(mean * ab.sqrt(), c)
}

/// Ring-graph Kronecker world: spatial kernel `rho_s^hops`, temporal
/// kernel `rho_t^|dt|`, constant mean.
pub fn make_gaussian_world(
    n_nodes: usize,
    n_steps: usize,
    rho_s: f64,
    rho_t: f64,
    mean: f64,
    seed: u64,
) -> Result<GaussianOracleWorld> {
    if n_nodes == 0 || n_steps == 0 {
        return Err(invalid("world needs positive node and step counts"));
    }
    make_gaussian_world_on(&GraphSpec::ring(n_nodes)?, n_steps, rho_s, rho_t, mean, seed)
}

/// As [`make_gaussian_world`] over an arbitrary graph; unreachable node
/// pairs are uncorrelated.
pub fn make_gaussian_world_on(
    graph: &GraphSpec,
    n_steps: usize,
    rho_s: f64,
    rho_t: f64,
    mean: f64,
    seed: u64,
) -> Result<GaussianOracleWorld> {
    for (name, r) in [("rho_s", rho_s), ("rho_t", rho_t)] {
        if !(r.abs() < 1.0) {
            return Err(invalid(format!("{name} = {r} must satisfy |rho| < 1")));
        }
    }
    if !mean.is_finite() {
        return Err(invalid("world mean must be finite"));
    }
    let n = graph.n_nodes();
    let hops = graph.hop_distances();
    let spatial = DMatrix::from_fn(n, n, |i, j| match hops[i][j] {
        Some(h) => rho_s.powi(h as i32),
        None => 0.0,
    });
    let temporal = DMatrix::from_fn(n_steps, n_steps, |a, b| rho_t.powi(a.abs_diff(b) as i32));
    let cov = spatial.kronecker(&temporal);
    let mut world = GaussianOracleWorld::new(n, n_steps, vec![mean; n * n_steps], cov, seed)?;
    world.spatial = Some(spatial);
    world.temporal = Some(temporal);
    Ok(world)
}

/// Contaminated conditional score at step `k`: the noised conditional
/// marginal mixed with weight `pi_true` against the noised prior.
pub fn make_contaminated_scores(
    world: &GaussianOracleWorld,
    pi_true: f64,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<ContaminatedScores> {
    ContaminatedScores::new(world.prior_marginal(k, sched)?, world.conditional_marginal(k, sched)?, pi_true)
}

/// `-(abar Sigma + (1 - abar) I)^{-1} (x_k - sqrt(abar) m)`.
pub fn oracle_uncond_score(
    world: &GaussianOracleWorld,
    x_k: &DVector<f64>,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<DVector<f64>> {
    check_dim(world, x_k)?;
    Ok(world.prior_marginal(k, sched)?.score(x_k))
}

/// Score of the noised marginal of the world conditioned on its
/// observations.
pub fn oracle_cond_score(
    world: &GaussianOracleWorld,
    x_k: &DVector<f64>,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<DVector<f64>> {
    check_dim(world, x_k)?;
    Ok(world.conditional_marginal(k, sched)?.score(x_k))
}

fn check_dim(world: &GaussianOracleWorld, x: &DVector<f64>) -> Result<()> {
    if x.len() != world.dim() {
        return Err(crate::error::shape_mismatch((world.dim(), 1), (x.len(), 1)));
    }
    Ok(())
}

/// A long series with the world's Kronecker law over any `T` consecutive
/// columns: AR(1) in time with spatially correlated innovations.
///
/// Requires a world built from Kronecker factors.
pub fn synthesize_series(world: &GaussianOracleWorld, length: usize, seed: u64) -> Result<TrafficGrid> {
    let (spatial, temporal) = world
        .factors()
        .ok_or_else(|| invalid("series synthesis needs a Kronecker world"))?;
    if length == 0 {
        return Err(invalid("series length must be positive"));
    }
    let n = world.n_nodes();
    let rho_t = if temporal.nrows() > 1 { temporal[(0, 1)] } else { 0.0 };
    let chol = Cholesky::new(spatial.clone()).ok_or_else(|| invalid("spatial kernel is not positive definite"))?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let innov = (1.0 - rho_t * rho_t).sqrt();
    let mut values = vec![0.0; n * length];
    let mut state = &l * draw();
    for t in 0..length {
        if t > 0 {
            state = &state * rho_t + (&l * draw()) * innov;
        }
        for i in 0..n {
            values[i * length + t] = state[i] + world.mean()[i * world.n_steps()];
        }
    }
    Ok(TrafficGrid::from_raw(n, length, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{quadratic_schedule, VarianceMode};

    fn sched() -> NoiseSchedule {
        quadratic_schedule(50, 1e-4, 0.5, VarianceMode::BetaTilde).unwrap()
    }

    #[test]
    fn independence_gives_identity() {
        let w = make_gaussian_world(3, 4, 0.0, 0.0, 0.0, 0).unwrap();
        assert_eq!(w.cov(), &DMatrix::<f64>::identity(12, 12));
    }

    #[test]
    fn two_point_temporal_kernel() {
        let w = make_gaussian_world(1, 2, 0.0, 0.5, 0.0, 0).unwrap();
        assert_eq!(w.cov(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));
    }

    #[test]
    fn kronecker_hand_expansion() {
        let w = make_gaussian_world(2, 2, 0.5, 0.5, 0.0, 0).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0,  0.5,  0.5,  0.25,
            0.5,  1.0,  0.25, 0.5,
            0.5,  0.25, 1.0,  0.5,
            0.25, 0.5,  0.5,  1.0,
        ];
        assert_eq!(w.cov(), &DMatrix::from_row_slice(4, 4, &expect));
    }

    #[test]
    fn kronecker_eigenvalues_are_products() {
        let w = make_gaussian_world(4, 3, 0.4, 0.7, 0.0, 0).unwrap();
        let (s, t) = w.factors().unwrap();
        let es = s.clone().symmetric_eigen().eigenvalues;
        let et = t.clone().symmetric_eigen().eigenvalues;
        let mut prod: Vec<f64> = es.iter().flat_map(|a| et.iter().map(move |b| a * b)).collect();
        let mut full: Vec<f64> = w.cov().clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        prod.sort_by(f64::total_cmp);
        full.sort_by(f64::total_cmp);
        for (a, b) in prod.iter().zip(&full) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_correlation_and_non_spd() {
        assert!(make_gaussian_world(3, 3, 1.0, 0.0, 0.0, 0).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianOracleWorld::new(1, 2, vec![0.0; 2], bad, 0).is_err());
    }

    #[test]
    fn isotropic_score_is_negative_input() {
        let w = make_gaussian_world(2, 2, 0.0, 0.0, 0.0, 0).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let s = oracle_uncond_score(&w, &x, 17, &sched()).unwrap();
        assert!((s + &x).amax() < 1e-12);
    }

    #[test]
    fn score_vanishes_at_mode() {
        let w = make_gaussian_world(2, 3, 0.5, 0.3, 1.5, 0).unwrap();
        let sc = sched();
        let x = w.mean() * sc.alpha_bar(9).sqrt();
        assert!(oracle_uncond_score(&w, &x, 9, &sc).unwrap().amax() < 1e-12);
    }

    #[test]
    fn two_by_two_score_against_dense_solve() {
        let w = make_gaussian_world(1, 2, 0.0, 0.5, 0.0, 0).unwrap();
        let sc = sched();
        let k = 20;
        let ab = sc.alpha_bar(k);
        let x = DVector::from_vec(vec![0.7, -0.4]);
        // Closed-form 2x2 inverse [[a, b], [b, a]]^{-1} = [[a, -b], [-b, a]] / (a^2 - b^2).
        let a = ab + 1.0 - ab;
        let b = 0.5 * ab;
        let det = a * a - b * b;
        let expect = [-(a * x[0] - b * x[1]) / det, -(-b * x[0] + a * x[1]) / det];
        let s = oracle_uncond_score(&w, &x, k, &sc).unwrap();
        assert!((s[0] - expect[0]).abs() < 1e-12);
        assert!((s[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn schur_complement_example() {
        let w = make_gaussian_world(1, 2, 0.0, 0.5, 0.0, 0)
            .unwrap()
            .with_observations(vec![(1, 2.0)])
            .unwrap();
        let (m, c) = w.conditional_moments();
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((c[(0, 0)] - 0.75).abs() < 1e-12);
        assert_eq!(m[1], 2.0);
        assert_eq!(c[(1, 1)], 0.0);
    }

    #[test]
    fn empty_observations_match_prior() {
        let w = make_gaussian_world(2, 3, 0.5, 0.3, 0.2, 0).unwrap();
        let sc = sched();
        let x = DVector::from_fn(6, |i, _| i as f64 * 0.1 - 0.2);
        let a = oracle_uncond_score(&w, &x, 30, &sc).unwrap();
        let b = oracle_cond_score(&w, &x, 30, &sc).unwrap();
        assert!((a - b).amax() < 1e-14);
    }

    #[test]
    fn block_independence_leaves_other_block() {
        let mut cov = DMatrix::identity(4, 4);
        cov[(0, 1)] = 0.3;
        cov[(1, 0)] = 0.3;
        cov[(2, 3)] = 0.6;
        cov[(3, 2)] = 0.6;
        let w = GaussianOracleWorld::new(2, 2, vec![1.0, -1.0, 0.0, 0.0], cov, 0)
            .unwrap()
            .with_observations(vec![(3, 5.0)])
            .unwrap();
        let (m, _) = w.conditional_moments();
        assert_eq!((m[0], m[1]), (1.0, -1.0));
        assert!((m[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn score_matches_log_density_gradient() {
        let w = make_gaussian_world(2, 3, 0.6, 0.8, 0.5, 0)
            .unwrap()
            .with_observations(vec![(0, 1.0), (4, -0.5)])
            .unwrap();
        let sc = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for trial in 0..100 {
            let k = 1 + trial % 50;
            let x = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            for g in [w.prior_marginal(k, &sc).unwrap(), w.conditional_marginal(k, &sc).unwrap()] {
                let s = g.score(&x);
                for i in 0..6 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (g.log_density(&xp) - g.log_density(&xm)) / (2.0 * h);
                    let rel = (fd - s[i]).abs() / s[i].abs().max(1.0);
                    assert!(rel < 1e-6, "k={k} i={i} fd={fd} s={}", s[i]);
                }
            }
        }
    }

    fn scalar_density(m: f64) -> GaussianDensity {
        GaussianDensity::new(DVector::from_element(1, m), DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn one_dimensional_mixture_by_hand() {
        let cs = ContaminatedScores::new(scalar_density(0.0), scalar_density(2.0), 0.5).unwrap();
        let x = DVector::from_element(1, 1.0);
        // Both densities equal exp(-1/2)/sqrt(2 pi) at x = 1.
        assert!((cs.responsibility(&x) - 0.5).abs() < 1e-15);
        // Component scores -1 and +1 average to 0.
        assert!(cs.contaminated_score(&x)[0].abs() < 1e-15);
        assert!((cs.posterior_ratio(&x) - 1.0).abs() < 1e-15);
        let x = DVector::from_element(1, 0.0);
        let pu = (-0.0f64).exp();
        let pc = (-2.0f64).exp();
        let r = 0.5 * pc / (0.5 * pu + 0.5 * pc);
        assert!((cs.responsibility(&x) - r).abs() < 1e-15);
        assert!((cs.contaminated_score(&x)[0] - (r * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn contamination_limits() {
        let w = make_gaussian_world(2, 2, 0.5, 0.5, 0.0, 0)
            .unwrap()
            .with_observations(vec![(0, 1.5)])
            .unwrap();
        let sc = sched();
        let x = DVector::from_vec(vec![0.2, -0.3, 0.9, 0.1]);
        let full = make_contaminated_scores(&w, 1.0, 5, &sc).unwrap();
        let exact = oracle_cond_score(&w, &x, 5, &sc).unwrap();
        assert!((full.contaminated_score(&x) - exact).amax() < 1e-12);
        let tiny = make_contaminated_scores(&w, 1e-6, 5, &sc).unwrap();
        let prior = oracle_uncond_score(&w, &x, 5, &sc).unwrap();
        assert!((tiny.contaminated_score(&x) - prior).amax() < 1e-4);
        assert!(make_contaminated_scores(&w, 0.0, 5, &sc).is_err());
    }

    #[test]
    fn attention_proxy_rows_are_stochastic() {
        let w = make_gaussian_world(5, 4, 0.6, 0.8, 0.0, 0)
            .unwrap()
            .with_observations(vec![(0, 1.0), (7, 0.0)])
            .unwrap();
        let a = w.attention_proxy(10, &sched()).unwrap();
        for i in 0..5 {
            let row = &a[i * 5..(i + 1) * 5];
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesized_series_has_kronecker_moments() {
        let w = make_gaussian_world(3, 4, 0.5, 0.7, 2.0, 0).unwrap();
        let s = synthesize_series(&w, 200_000, 4).unwrap();
        let n = s.n_steps() as f64;
        let mean0 = s.row(0).iter().sum::<f64>() / n;
        assert!((mean0 - 2.0).abs() < 0.05);
        let lag = |i: usize, j: usize, h: usize| {
            let (a, b) = (s.row(i), s.row(j));
            (0..a.len() - h).map(|t| (a[t] - 2.0) * (b[t + h] - 2.0)).sum::<f64>() / (a.len() - h) as f64
        };
        assert!((lag(0, 0, 0) - 1.0).abs() < 0.05);
        assert!((lag(0, 1, 0) - 0.5).abs() < 0.05);
        assert!((lag(0, 1, 2) - 0.5 * 0.49).abs() < 0.05);
    }

    #[test]
    fn spec_file_round_trip() {
        let spec: WorldSpec = "nodes = 4\nsteps = 6 # comment\nrho_s=0.3\nrho_t = 0.2\nmean = 1.5\nseed = 9\n"
            .parse()
            .unwrap();
        assert_eq!(spec.nodes, 4);
        assert_eq!(spec.to_string().parse::<WorldSpec>().unwrap(), spec);
        assert!("colour = 3".parse::<WorldSpec>().is_err());
        assert!("nodes = x".parse::<WorldSpec>().is_err());
    }
}
