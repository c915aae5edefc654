//! Multiply-add accounting and the analytic attention cost model.
//!
//! The model predicts attention cost as `a·Σ_g L_nla,g·L + b·Σ_g L_la,g·C`,
//! where `L_nla,g` and `L_la,g` count the tokens group `g` routes to softmax
//! and to the linear path. `a` and `b` are fitted by least squares.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::router::{ChunkRouting, Route};

/// Counted multiply-adds of one forward, by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MacCounts {
    pub attn_softmax: u64,
    pub attn_linear: u64,
    pub projections: u64,
    pub mlp: u64,
    pub logits: u64,
}

impl MacCounts {
    pub fn attention(&self) -> u64 {
        self.attn_softmax + self.attn_linear
    }

    pub fn total(&self) -> u64 {
        self.attention() + self.projections + self.mlp + self.logits
    }

    pub fn add(&mut self, o: &MacCounts) {
        self.attn_softmax += o.attn_softmax;
        self.attn_linear += o.attn_linear;
        self.projections += o.projections;
        self.mlp += o.mlp;
        self.logits += o.logits;
    }
}

/// Regressors of the cost model for one routing of a length-`len` sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostFeatures {
    /// `Σ_g L_nla,g · L`
    pub softmax: f64,
    /// `Σ_g L_la,g · C`
    pub linear: f64,
}

impl CostFeatures {
    pub fn from_routing<T: Real>(routing: &ChunkRouting<T>, chunk: usize) -> Self {
        let len = (routing.n_chunks() * chunk) as f64;
        let nla = (routing.count(Route::Softmax) * chunk) as f64;
        let la = (routing.count(Route::Linear) * chunk) as f64;
        CostFeatures {
            softmax: nla * len,
            linear: la * chunk as f64,
        }
    }

    pub fn add(&mut self, o: &CostFeatures) {
        self.softmax += o.softmax;
        self.linear += o.linear;
    }
}

/// Fitted constants of the cost model.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostModel {
    pub a: f64,
    pub b: f64,
}

impl CostModel {
    pub fn predict(&self, f: &CostFeatures) -> f64 {
        self.a * f.softmax + self.b * f.linear
    }

    /// Least squares over `(features, counted)` points, minimizing relative
    /// error so short and long sequences weigh alike.
    pub fn fit(points: &[(CostFeatures, f64)]) -> Result<Self> {
        let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (f, y) in points {
            if *y <= 0.0 {
                return Err(Error::invalid("cost_fit", "counted cost must be positive"));
            }
            let (x1, x2) = (f.softmax / y, f.linear / y);
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            r1 += x1;
            r2 += x2;
        }
        if points.is_empty() {
            return Err(Error::invalid("cost_fit", "no points"));
        }
        let det = s11 * s22 - s12 * s12;
        if num_traits::Float::abs(det) <= 1e-12 * (s11 * s22).max(1e-300) {
            // only one regressor varies; fit it alone
            return Ok(if s11 >= s22 {
                CostModel {
                    a: r1 / s11,
                    b: 0.0,
                }
            } else {
                CostModel {
                    a: 0.0,
                    b: r2 / s22,
                }
            });
        }
        Ok(CostModel {
            a: (r1 * s22 - r2 * s12) / det,
            b: (r2 * s11 - r1 * s12) / det,
        })
    }
}

/// Counted and predicted attention cost for one configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopReport {
    pub len: usize,
    pub counted: MacCounts,
    pub features: CostFeatures,
    pub predicted_attention: f64,
}

impl FlopReport {
    pub fn relative_error(&self) -> f64 {
        let c = self.counted.attention() as f64;
        num_traits::Float::abs(self.predicted_attention - c) / c
    }
}

/// Fits the cost model over `(len, counted, features)` runs and attaches
/// predictions.
pub fn fit_reports(
    runs: Vec<(usize, MacCounts, CostFeatures)>,
) -> Result<(CostModel, Vec<FlopReport>)> {
    let points: Vec<(CostFeatures, f64)> = runs
        .iter()
        .map(|(_, m, f)| (*f, m.attention() as f64))
        .collect();
    let model = CostModel::fit(&points)?;
    let reports = runs
        .into_iter()
        .map(|(len, counted, features)| FlopReport {
            len,
            counted,
            features,
            predicted_attention: model.predict(&features),
        })
        .collect();
    Ok((model, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_constants() {
        let pts: Vec<(CostFeatures, f64)> = [(1.0, 5.0), (4.0, 1.0), (9.0, 3.0), (2.0, 2.0)]
            .iter()
            .map(|&(s, l)| {
                (
                    CostFeatures {
                        softmax: s,
                        linear: l,
                    },
                    3.0 * s + 7.0 * l,
                )
            })
            .collect();
        let m = CostModel::fit(&pts).unwrap();
        assert!((m.a - 3.0).abs() < 1e-9 && (m.b - 7.0).abs() < 1e-9);
    }

    #[test]
    fn single_regressor_fit() {
        let pts = [
            (
                CostFeatures {
                    softmax: 0.0,
                    linear: 2.0,
                },
                4.0,
            ),
            (
                CostFeatures {
                    softmax: 0.0,
                    linear: 4.0,
                },
                8.0,
            ),
        ];
        let m = CostModel::fit(&pts).unwrap();
        assert_eq!((m.a, m.b), (0.0, 2.0));
    }

    #[test]
    fn features_from_routing() {
        let r: ChunkRouting<f64> = ChunkRouting::with_fraction(2, 4, 0.5);
        let f = CostFeatures::from_routing(&r, 8);
        assert_eq!(f.softmax, (2.0 * 2.0 * 8.0) * 32.0);
        assert_eq!(f.linear, (2.0 * 2.0 * 8.0) * 8.0);
    }
}
