//! Routing statistics.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::router::{ChunkRouting, Route};

/// Softmax-routed chunk counts per (layer, group), aggregated over sequences.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoutingStats {
    /// `[layer][group]` softmax-routed chunks.
    pub softmax: Vec<Vec<usize>>,
    /// `[layer][group]` chunks seen.
    pub total: Vec<Vec<usize>>,
}

impl RoutingStats {
    /// Adds one sequence's per-layer routing.
    pub fn add<T: Real>(&mut self, routings: &[ChunkRouting<T>]) {
        if self.softmax.len() < routings.len() {
            self.softmax.resize(routings.len(), Vec::new());
            self.total.resize(routings.len(), Vec::new());
        }
        for (l, r) in routings.iter().enumerate() {
            let groups = r.n_groups();
            if self.softmax[l].len() < groups {
                self.softmax[l].resize(groups, 0);
                self.total[l].resize(groups, 0);
            }
            for g in 0..groups {
                for t in 0..r.n_chunks() {
                    self.total[l][g] += 1;
                    if r.get(g, t) == Route::Softmax {
                        self.softmax[l][g] += 1;
                    }
                }
            }
        }
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        for l in 0..other.softmax.len() {
            if self.softmax.len() <= l {
                self.softmax.push(vec![0; other.softmax[l].len()]);
                self.total.push(vec![0; other.total[l].len()]);
            }
            for g in 0..other.softmax[l].len() {
                if self.softmax[l].len() <= g {
                    self.softmax[l].push(0);
                    self.total[l].push(0);
                }
                self.softmax[l][g] += other.softmax[l][g];
                self.total[l][g] += other.total[l][g];
            }
        }
    }

    /// `[layer][group]` fraction of softmax-routed chunks.
    pub fn fractions(&self) -> Vec<Vec<f64>> {
        self.softmax
            .iter()
            .zip(&self.total)
            .map(|(s, t)| s.iter().zip(t).map(|(&s, &t)| ratio(s, t)).collect())
            .collect()
    }

    /// Per-layer fraction over all groups.
    pub fn layer_fractions(&self) -> Vec<f64> {
        self.softmax
            .iter()
            .zip(&self.total)
            .map(|(s, t)| ratio(s.iter().sum(), t.iter().sum()))
            .collect()
    }

    /// Fraction over every layer and group.
    pub fn overall(&self) -> f64 {
        let s: usize = self.softmax.iter().flatten().sum();
        let t: usize = self.total.iter().flatten().sum();
        ratio(s, t)
    }
}

fn ratio(s: usize, t: usize) -> f64 {
    if t == 0 {
        0.0
    } else {
        s as f64 / t as f64
    }
}

/// Statistics over a batch of per-sequence, per-layer routings.
pub fn routing_stats<T: Real>(routings: &[Vec<ChunkRouting<T>>]) -> RoutingStats {
    let mut s = RoutingStats::default();
    for r in routings {
        s.add(r);
    }
    s
}
