//! Point metrics on evaluated entries and the quantile-loss CRPS.

use crate::error::{invalid, Result};
use crate::grid::{MaskMatrix, TrafficGrid};

/// Entries with `|truth|` below this are left out of MAPE.
pub const MAPE_MIN_TRUTH: f64 = 1.0;

/// Quantile levels `0.05, 0.10, ..., 0.95`.
pub const CRPS_LEVELS: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// NaN when no evaluated entry passes the MAPE truth guard.
    pub mape: f64,
    pub count: usize,
}

#[derive(Default)]
struct Accum {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_pct: usize,
}

impl Accum {
    fn push(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if truth.abs() >= MAPE_MIN_TRUTH {
            self.pct += (e / truth).abs();
            self.n_pct += 1;
        }
    }

    fn finish(&self) -> PointMetrics {
        let n = self.n as f64;
        PointMetrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.n_pct == 0 {
                f64::NAN
            } else {
                self.pct / self.n_pct as f64
            },
            count: self.n,
        }
    }
}

/// MAE, RMSE and MAPE over entries where `eval_mask` is set.
pub fn point_metrics(pred: &TrafficGrid, truth: &TrafficGrid, eval_mask: &MaskMatrix) -> Result<PointMetrics> {
    pred.ensure_same_shape(truth)?;
    eval_mask.ensure_shape(truth.shape())?;
    let mut acc = Accum::default();
    for (idx, (&p, &t)) in pred.values().iter().zip(truth.values()).enumerate() {
        if eval_mask.entries()[idx] {
            acc.push(p, t);
        }
    }
    if acc.n == 0 {
        return Err(invalid("no evaluated entries"));
    }
    Ok(acc.finish())
}

/// Point metrics restricted to each node's row. Nodes with no evaluated
/// entry get `None`.
pub fn per_node_metrics(
    pred: &TrafficGrid,
    truth: &TrafficGrid,
    eval_mask: &MaskMatrix,
) -> Result<Vec<Option<PointMetrics>>> {
    pred.ensure_same_shape(truth)?;
    eval_mask.ensure_shape(truth.shape())?;
    Ok((0..truth.n_nodes())
        .map(|i| {
            let mut acc = Accum::default();
            for t in 0..truth.n_steps() {
                if eval_mask.is_observed(i, t) {
                    acc.push(pred.get(i, t), truth.get(i, t));
                }
            }
            (acc.n > 0).then(|| acc.finish())
        })
        .collect())
}

/// Linear-interpolation quantile of an ascending sample.
pub fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pinball loss `(level - 1{x < q}) (x - q)`.
pub fn quantile_loss(q: f64, x: f64, level: f64) -> f64 {
    let ind = if x < q { 1.0 } else { 0.0 };
    (level - ind) * (x - q)
}

/// CRPS of one entry: mean of twice the pinball loss over 19 empirical
/// quantiles of `samples`.
pub fn crps(samples: &[f64], truth: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("CRPS needs at least one sample"));
    }
    if samples.iter().any(|v| !v.is_finite()) || !truth.is_finite() {
        return Err(invalid("non-finite value in CRPS input"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(crps_sorted(&sorted, truth))
}

fn crps_sorted(sorted: &[f64], truth: f64) -> f64 {
    let mut total = 0.0;
    for i in 1..=CRPS_LEVELS {
        let level = i as f64 * 0.05;
        total += 2.0 * quantile_loss(empirical_quantile(sorted, level), truth, level);
    }
    total / CRPS_LEVELS as f64
}

/// Mean CRPS over entries where `eval_mask` is set, the sample ensemble
/// supplying one draw per grid.
pub fn crps_dataset(samples: &[TrafficGrid], truth: &TrafficGrid, eval_mask: &MaskMatrix) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("CRPS needs at least one sample grid"));
    }
    for s in samples {
        s.ensure_same_shape(truth)?;
    }
    eval_mask.ensure_shape(truth.shape())?;
    let mut total = 0.0;
    let mut n = 0usize;
    let mut column = vec![0.0; samples.len()];
    for idx in 0..truth.values().len() {
        if !eval_mask.entries()[idx] {
            continue;
        }
        for (c, s) in column.iter_mut().zip(samples) {
            *c = s.values()[idx];
        }
        total += crps(&column, truth.values()[idx])?;
        n += 1;
    }
    if n == 0 {
        return Err(invalid("no evaluated entries"));
    }
    Ok(total / n as f64)
}
