//! Dense node-by-time grids, observation masks and the sensor graph.
//!
//! Every grid is stored row-major: row `i` is node `i`, column `t` is time
//! slice `t`, and the flat index of `(i, t)` is `i * n_steps + t`. The same
//! ordering is used whenever a grid is viewed as a vector of length `N*T`.

use std::collections::VecDeque;

use crate::error::{invalid, shape_mismatch, Result};

/// Real-valued `N x T` matrix of traffic readings (or normalized scores).
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficGrid {
    n_nodes: usize,
    n_steps: usize,
    values: Vec<f64>,
}

impl TrafficGrid {
    /// Builds a grid from row-major values, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(n_nodes: usize, n_steps: usize, values: Vec<f64>) -> Result<Self> {
        if n_nodes == 0 || n_steps == 0 {
            return Err(invalid("grid needs at least one node and one time slice"));
        }
        if values.len() != n_nodes * n_steps {
            return Err(invalid(format!(
                "grid {}x{} needs {} values, got {}",
                n_nodes,
                n_steps,
                n_nodes * n_steps,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite value at node {}, step {}",
                pos / n_steps,
                pos % n_steps
            )));
        }
        Ok(Self {
            n_nodes,
            n_steps,
            values,
        })
    }

    pub fn zeros(n_nodes: usize, n_steps: usize) -> Self {
        Self::filled(n_nodes, n_steps, 0.0)
    }

    pub fn filled(n_nodes: usize, n_steps: usize, value: f64) -> Self {
        assert!(n_nodes > 0 && n_steps > 0, "empty grid");
        Self {
            n_nodes,
            n_steps,
            values: vec![value; n_nodes * n_steps],
        }
    }

    /// Builds a grid without the finiteness check. Used on hot paths where
    /// the caller validates separately (the sampler's divergence guard).
    pub(crate) fn from_raw(n_nodes: usize, n_steps: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n_nodes * n_steps);
        Self {
            n_nodes,
            n_steps,
            values,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_nodes, self.n_steps)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, node: usize, step: usize) -> f64 {
        self.values[node * self.n_steps + step]
    }

    pub fn set(&mut self, node: usize, step: usize, value: f64) {
        self.values[node * self.n_steps + step] = value;
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.n_steps..(node + 1) * self.n_steps]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &TrafficGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_mismatch(self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Applies `f` entrywise.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> TrafficGrid {
        Self::from_raw(
            self.n_nodes,
            self.n_steps,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Combines two grids of equal shape entrywise.
    pub fn zip_map(&self, other: &TrafficGrid, f: impl Fn(f64, f64) -> f64) -> Result<TrafficGrid> {
        self.ensure_same_shape(other)?;
        Ok(Self::from_raw(
            self.n_nodes,
            self.n_steps,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// `x ⊙ M`: keeps observed entries and zeroes the rest.
    pub fn masked(&self, mask: &MaskMatrix) -> Result<TrafficGrid> {
        mask.ensure_shape(self.shape())?;
        Ok(Self::from_raw(
            self.n_nodes,
            self.n_steps,
            self.values
                .iter()
                .zip(mask.entries())
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect(),
        ))
    }

    /// Columns `[start, start + len)` as a new grid.
    pub fn columns(&self, start: usize, len: usize) -> Result<TrafficGrid> {
        if len == 0 || start + len > self.n_steps {
            return Err(invalid(format!(
                "column range [{start}, {}) outside 0..{}",
                start + len,
                self.n_steps
            )));
        }
        let mut values = Vec::with_capacity(self.n_nodes * len);
        for i in 0..self.n_nodes {
            values.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Self::from_raw(self.n_nodes, len, values))
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_columns(&mut self, start: usize, block: &TrafficGrid) -> Result<()> {
        if block.n_nodes != self.n_nodes || start + block.n_steps > self.n_steps {
            return Err(shape_mismatch(
                (self.n_nodes, self.n_steps - start.min(self.n_steps)),
                block.shape(),
            ));
        }
        for i in 0..self.n_nodes {
            let dst = i * self.n_steps + start;
            self.values[dst..dst + block.n_steps].copy_from_slice(block.row(i));
        }
        Ok(())
    }
}

/// Binary observation mask: `true` (1) = observed, `false` (0) = missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskMatrix {
    n_nodes: usize,
    n_steps: usize,
    entries: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(n_nodes: usize, n_steps: usize, entries: Vec<bool>) -> Result<Self> {
        if n_nodes == 0 || n_steps == 0 {
            return Err(invalid("mask needs at least one node and one time slice"));
        }
        if entries.len() != n_nodes * n_steps {
            return Err(invalid(format!(
                "mask {}x{} needs {} entries, got {}",
                n_nodes,
                n_steps,
                n_nodes * n_steps,
                entries.len()
            )));
        }
        Ok(Self {
            n_nodes,
            n_steps,
            entries,
        })
    }

    pub fn all_observed(n_nodes: usize, n_steps: usize) -> Self {
        Self {
            n_nodes,
            n_steps,
            entries: vec![true; n_nodes * n_steps],
        }
    }

    pub fn all_missing(n_nodes: usize, n_steps: usize) -> Self {
        Self {
            n_nodes,
            n_steps,
            entries: vec![false; n_nodes * n_steps],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_nodes, self.n_steps)
    }

    pub fn entries(&self) -> &[bool] {
        &self.entries
    }

    pub fn is_observed(&self, node: usize, step: usize) -> bool {
        self.entries[node * self.n_steps + step]
    }

    pub fn set(&mut self, node: usize, step: usize, observed: bool) {
        self.entries[node * self.n_steps + step] = observed;
    }

    pub fn observed_count(&self) -> usize {
        self.entries.iter().filter(|&&m| m).count()
    }

    /// Fraction of entries marked missing.
    pub fn missing_rate(&self) -> f64 {
        1.0 - self.observed_count() as f64 / self.entries.len() as f64
    }

    /// Entrywise AND.
    pub fn and(&self, other: &MaskMatrix) -> Result<MaskMatrix> {
        other.ensure_shape(self.shape())?;
        Ok(Self {
            n_nodes: self.n_nodes,
            n_steps: self.n_steps,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    /// Entrywise NOT.
    pub fn complement(&self) -> MaskMatrix {
        Self {
            n_nodes: self.n_nodes,
            n_steps: self.n_steps,
            entries: self.entries.iter().map(|&m| !m).collect(),
        }
    }

    pub fn as_grid(&self) -> TrafficGrid {
        TrafficGrid::from_raw(
            self.n_nodes,
            self.n_steps,
            self.entries
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn columns(&self, start: usize, len: usize) -> Result<MaskMatrix> {
        if len == 0 || start + len > self.n_steps {
            return Err(invalid(format!(
                "column range [{start}, {}) outside 0..{}",
                start + len,
                self.n_steps
            )));
        }
        let mut entries = Vec::with_capacity(self.n_nodes * len);
        for i in 0..self.n_nodes {
            let base = i * self.n_steps + start;
            entries.extend_from_slice(&self.entries[base..base + len]);
        }
        Ok(Self {
            n_nodes: self.n_nodes,
            n_steps: len,
            entries,
        })
    }

    pub fn ensure_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(shape_mismatch(shape, self.shape()));
        }
        Ok(())
    }
}

/// Sensor graph: adjacency plus an optional partition into communities.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    n_nodes: usize,
    adjacency: Vec<f64>,
    communities: Option<Vec<Vec<usize>>>,
}

impl GraphSpec {
    pub fn new(n_nodes: usize, adjacency: Vec<f64>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(invalid("graph needs at least one node"));
        }
        if adjacency.len() != n_nodes * n_nodes {
            return Err(invalid(format!(
                "adjacency for {n_nodes} nodes needs {} entries, got {}",
                n_nodes * n_nodes,
                adjacency.len()
            )));
        }
        if adjacency.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(invalid("adjacency entries must be finite and nonnegative"));
        }
        Ok(Self {
            n_nodes,
            adjacency,
            communities: None,
        })
    }

    /// Undirected cycle `0 - 1 - ... - (N-1) - 0` with unit weights.
    pub fn ring(n_nodes: usize) -> Result<Self> {
        let mut adjacency = vec![0.0; n_nodes * n_nodes];
        if n_nodes > 1 {
            for i in 0..n_nodes {
                let j = (i + 1) % n_nodes;
                if i != j {
                    adjacency[i * n_nodes + j] = 1.0;
                    adjacency[j * n_nodes + i] = 1.0;
                }
            }
        }
        Self::new(n_nodes, adjacency)
    }

    /// Attaches a partition; groups must be disjoint, nonempty and cover
    /// every node.
    pub fn with_communities(mut self, communities: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; self.n_nodes];
        for group in &communities {
            if group.is_empty() {
                return Err(invalid("empty community"));
            }
            for &v in group {
                if v >= self.n_nodes {
                    return Err(invalid(format!("community node {v} out of range")));
                }
                if seen[v] {
                    return Err(invalid(format!("node {v} appears in two communities")));
                }
                seen[v] = true;
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("node {v} belongs to no community")));
        }
        self.communities = Some(communities);
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn adjacency_row(&self, node: usize) -> &[f64] {
        &self.adjacency[node * self.n_nodes..(node + 1) * self.n_nodes]
    }

    pub fn communities(&self) -> Option<&[Vec<usize>]> {
        self.communities.as_deref()
    }

    /// Unweighted shortest-path hop counts from BFS over edges with
    /// positive weight. Unreachable pairs are `None`.
    pub fn hop_distances(&self) -> Vec<Vec<Option<usize>>> {
        let n = self.n_nodes;
        (0..n)
            .map(|src| {
                let mut dist = vec![None; n];
                dist[src] = Some(0);
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    let du = dist[u].unwrap_or(0);
                    for v in 0..n {
                        if self.adjacency[u * n + v] > 0.0 && dist[v].is_none() {
                            dist[v] = Some(du + 1);
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_values() {
        assert!(TrafficGrid::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(TrafficGrid::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(TrafficGrid::new(0, 2, vec![]).is_err());
        assert!(TrafficGrid::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn masking_zeroes_missing_entries() {
        let g = TrafficGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = MaskMatrix::new(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(g.masked(&m).unwrap().values(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(m.missing_rate(), 0.5);
    }

    #[test]
    fn column_slices_round_trip() {
        let g = TrafficGrid::new(2, 4, (0..8).map(f64::from).collect()).unwrap();
        let c = g.columns(1, 2).unwrap();
        assert_eq!(c.values(), &[1.0, 2.0, 5.0, 6.0]);
        let mut z = TrafficGrid::zeros(2, 4);
        z.set_columns(1, &c).unwrap();
        assert_eq!(z.values(), &[0.0, 1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0]);
        assert!(g.columns(3, 2).is_err());
    }

    #[test]
    fn ring_hops() {
        let g = GraphSpec::ring(6).unwrap();
        let d = g.hop_distances();
        assert_eq!(d[0][3], Some(3));
        assert_eq!(d[0][5], Some(1));
        assert_eq!(d[1][4], Some(3));
        assert_eq!(d[2][2], Some(0));
    }

    #[test]
    fn communities_must_partition() {
        let g = GraphSpec::ring(4).unwrap();
        assert!(g.clone().with_communities(vec![vec![0, 1], vec![2, 3]]).is_ok());
        assert!(g.clone().with_communities(vec![vec![0, 1], vec![1, 2, 3]]).is_err());
        assert!(g.clone().with_communities(vec![vec![0, 1], vec![2]]).is_err());
        assert!(g.with_communities(vec![vec![0, 1, 2, 3], vec![]]).is_err());
    }

    #[test]
    fn rejects_negative_adjacency() {
        assert!(GraphSpec::new(2, vec![0.0, -1.0, 1.0, 0.0]).is_err());
    }
}
