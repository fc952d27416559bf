//! Correlation estimator for ΣWᵢ and the flat-decomposition diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;

use crate::oracle::{map_blocks, ExampleOracle, BLOCK};
use crate::rng::{Rng, SeedTree};
use crate::serial::{matrix_to_hex, HexMatrix};

/// Estimate of ΣWᵢ with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SumEstimate {
    pub w_hat: DMatrix<f64>,
    pub samples_used: u64,
    pub empirical_std: DMatrix<f64>,
}

#[derive(Serialize)]
struct SumEstimateJson {
    w_hat: HexMatrix,
    empirical_std: HexMatrix,
    samples_used: u64,
    seed: u64,
}

impl SumEstimate {
    pub fn to_json(&self, seed: u64) -> String {
        serde_json::to_string_pretty(&SumEstimateJson {
            w_hat: matrix_to_hex(&self.w_hat),
            empirical_std: matrix_to_hex(&self.empirical_std),
            samples_used: self.samples_used,
            seed,
        })
        .expect("estimate serializes")
    }
}

/// Per-example statistic XᵀJY/k, computed as an outer product of column sums.
pub fn example_statistic(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let k = x.nrows() as f64;
    let sx = x.row_sum();
    let sy = y.row_sum();
    sx.transpose() * sy / k
}

/// Ŵ = (1/(kN)) Σ XᵀJY over N fresh examples drawn from stream `name`.
pub fn estimate_projection_sum(oracle: &dyn ExampleOracle, n: usize, seeds: &SeedTree, name: &str) -> SumEstimate {
    let d = oracle.d();
    let parts = map_blocks(seeds, name, n, BLOCK, |rng, len| {
        let mut s = DMatrix::zeros(d, d);
        let mut q = DMatrix::zeros(d, d);
        for _ in 0..len {
            let ex = oracle.draw(rng);
            let st = example_statistic(ex.x.matrix(), &ex.y);
            q += st.component_mul(&st);
            s += st;
        }
        (s, q)
    });
    let mut s = DMatrix::zeros(d, d);
    let mut q = DMatrix::zeros(d, d);
    for (ps, pq) in parts {
        s += ps;
        q += pq;
    }
    let nf = n.max(1) as f64;
    let mean = s / nf;
    let var = (q / nf - mean.component_mul(&mean)).map(|v| v.max(0.0));
    let empirical_std = var.map(|v| (v / nf).sqrt());
    SumEstimate { w_hat: mean, samples_used: n as u64, empirical_std }
}

/// Flat decomposition of a vector: pieces w₁..wₙ and the leftover residual.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatDecomposition {
    pub pieces: Vec<DVector<f64>>,
    pub residual: DVector<f64>,
    /// Number of constant blocks in each piece.
    pub blocks: Vec<usize>,
}

/// Greedy flat decomposition.
///
/// Entries below eps/(2√d) are left in the residual. The others are bucketed by
/// sign and by dyadic level relative to the current maximum; each bucket is
/// replaced by its mean. Every round at least halves each bucketed entry, so the
/// piece norms decay geometrically.
pub fn flat_decompose(v: &DVector<f64>, eps: f64) -> FlatDecomposition {
    let d = v.len();
    let floor = eps / (2.0 * (d as f64).sqrt());
    let mut r = v.clone();
    let mut pieces = Vec::new();
    let mut blocks = Vec::new();
    while r.norm() > eps {
        let mx = r.amax();
        if mx < floor {
            break;
        }
        let mut buckets: std::collections::BTreeMap<(bool, i32), Vec<usize>> = Default::default();
        for (i, &x) in r.iter().enumerate() {
            if x.abs() >= floor {
                let level = (mx / x.abs()).log2().floor() as i32;
                buckets.entry((x > 0.0, level)).or_default().push(i);
            }
        }
        let mut w = DVector::zeros(d);
        for idx in buckets.values() {
            let mean = idx.iter().map(|&i| r[i]).sum::<f64>() / idx.len() as f64;
            for &i in idx {
                w[i] = mean;
            }
        }
        r -= &w;
        blocks.push(buckets.len());
        pieces.push(w);
    }
    FlatDecomposition { pieces, residual: r, blocks }
}

/// Upper bound on the number of pieces used by the termination property.
pub fn flat_piece_bound(d: usize, eps: f64) -> usize {
    let l = (d as f64 / eps).ln().max(1.0);
    ((l.sqrt() / eps).ln() / (1.0f64 / 0.9).ln()).ceil() as usize
}

/// Sampled max of |1_Sᵀ M 1_T|/√(|S||T|) over equal or disjoint S, T.
pub fn boolean_test_norm(m: &DMatrix<f64>, trials: usize, rng: &mut Rng) -> f64 {
    let d = m.nrows();
    let mut best: f64 = 0.0;
    for t in 0..trials {
        let density: f64 = rng.random_range(0.05..0.95);
        let mut s: Vec<usize> = (0..d).filter(|_| rng.random::<f64>() < density).collect();
        if s.is_empty() {
            s.push(rng.random_range(0..d));
        }
        let equal = t % 2 == 0 || s.len() == d;
        let tset: Vec<usize> = if equal {
            s.clone()
        } else {
            let rest: Vec<usize> = (0..d).filter(|i| !s.contains(i)).collect();
            let mut pick: Vec<usize> = rest.iter().cloned().filter(|_| rng.random::<f64>() < density).collect();
            if pick.is_empty() {
                pick.push(rest[rng.random_range(0..rest.len())]);
            }
            pick
        };
        let mut acc = 0.0;
        for &i in &s {
            for &j in &tset {
                acc += m[(i, j)];
            }
        }
        best = best.max(acc.abs() / ((s.len() * tset.len()) as f64).sqrt());
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn flat_indicator_is_one_piece() {
        let mut v = DVector::zeros(10);
        for i in [1, 4, 7, 8] {
            v[i] = 0.5;
        }
        let f = flat_decompose(&v, 1e-3);
        assert_eq!(f.pieces.len(), 1);
        assert_eq!(f.residual.norm(), 0.0);
        assert!(flat_decompose(&DVector::zeros(5), 0.1).pieces.is_empty());
    }

    #[test]
    fn random_unit_vector_decomposes() {
        let mut rng = seeded(11);
        let d = 100;
        let mut v = DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
        v /= v.norm();
        let f = flat_decompose(&v, 0.01);
        assert!(f.residual.norm() <= 0.01);
        for (j, w) in f.pieces.iter().enumerate() {
            assert!(w.norm() <= 0.9f64.powi(j as i32) + 1e-12);
        }
        let sum = f.pieces.iter().fold(DVector::zeros(d), |a, w| a + w);
        assert!(((sum + &f.residual) - &v).norm() < 1e-12);
        assert!(f.pieces.len() <= flat_piece_bound(d, 0.01) + 2);
    }

    #[test]
    fn test_norm_examples() {
        let mut rng = seeded(2);
        assert!((boolean_test_norm(&DMatrix::identity(8, 8), 20, &mut rng) - 1.0).abs() < 1e-12);
        assert_eq!(boolean_test_norm(&DMatrix::zeros(8, 8), 20, &mut rng), 0.0);
    }
}
