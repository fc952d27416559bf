//! Value-matrix regression over the attention design, loss estimation and
//! hypothesis selection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{forward_matrix, pattern, AttentionLayer, Head};
use crate::error::{Error, Result};
use crate::oracle::{map_blocks, Example, ExampleOracle, BLOCK};
use crate::rng::SeedTree;

/// k×(m·d) design: block i of row r is softmax(X_r:Θ̂ᵢXᵀ)·X.
pub fn build_design(x: &DMatrix<f64>, thetas: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let (k, d) = x.shape();
    let m = thetas.len();
    let mut z = DMatrix::zeros(k, m * d);
    for (i, t) in thetas.iter().enumerate() {
        if t.shape() != (d, d) {
            return Err(Error::Dimension(format!("theta {i} is {:?}, expected {d}x{d}", t.shape())));
        }
        let block = pattern(t, x).0 * x;
        z.view_mut((0, i * d), (k, d)).copy_from(&block);
    }
    Ok(z)
}

/// Shared eigendecomposition of the design Gram matrix.
#[derive(Debug, Clone)]
pub struct GramFactor {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
    cutoff: f64,
}

impl GramFactor {
    pub fn new(gram: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        Self { values: eig.eigenvalues, vectors: eig.eigenvectors, cutoff: 1e-12 * max.max(f64::MIN_POSITIVE) }
    }

    fn solve_rotated(&self, bt: &DVector<f64>, mu: f64) -> DVector<f64> {
        let scaled = DVector::from_iterator(bt.len(), bt.iter().zip(self.values.iter()).map(|(b, &l)| if l > self.cutoff { b / (l + mu) } else { 0.0 }));
        &self.vectors * scaled
    }

    /// argmin ‖Zw − y‖ over ‖w‖ ≤ radius given b = Zᵀy. Returns (w, μ).
    pub fn constrained(&self, b: &DVector<f64>, radius: f64) -> (DVector<f64>, f64) {
        let bt = self.vectors.transpose() * b;
        let norm_at = |mu: f64| -> f64 {
            bt.iter().zip(self.values.iter()).map(|(b, &l)| if l > self.cutoff { (b / (l + mu)).powi(2) } else { 0.0 }).sum::<f64>().sqrt()
        };
        if norm_at(0.0) <= radius {
            return (self.solve_rotated(&bt, 0.0), 0.0);
        }
        let mut lo = 0.0;
        let mut hi = b.norm() / radius;
        while norm_at(hi) > radius {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if norm_at(mid) > radius {
                lo = mid;
            } else {
                hi = mid;
            }
            if (norm_at(hi) - radius).abs() <= 1e-10 * radius || hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        (self.solve_rotated(&bt, hi), hi)
    }
}

/// Norm-constrained least squares for every column of `rhs = Zᵀ Y`.
pub fn solve_constrained_ls(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, radius: f64) -> Result<DMatrix<f64>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParam("radius must be positive".into()));
    }
    let f = GramFactor::new(gram);
    let mut w = DMatrix::zeros(gram.nrows(), rhs.ncols());
    for c in 0..rhs.ncols() {
        let (col, _) = f.constrained(&rhs.column(c).into_owned(), radius);
        w.set_column(c, &col);
    }
    Ok(w)
}

/// Fitted value matrices with per-column training RMS residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFit {
    pub ws: Vec<DMatrix<f64>>,
    pub train_residual: Vec<f64>,
}

/// Regression of every output column over a fixed sample.
pub fn fit_value_matrices(examples: &[Example], thetas: &[DMatrix<f64>], radius: f64) -> Result<ValueFit> {
    let first = examples.first().ok_or_else(|| Error::InvalidParam("no examples".into()))?;
    let d = first.x.d();
    let dout = first.y.ncols();
    let m = thetas.len();
    let designs: Vec<DMatrix<f64>> = examples.iter().map(|e| build_design(e.x.matrix(), thetas)).collect::<Result<_>>()?;
    let mut gram = DMatrix::zeros(m * d, m * d);
    let mut rhs = DMatrix::zeros(m * d, dout);
    for (z, e) in designs.iter().zip(examples) {
        gram += z.transpose() * z;
        rhs += z.transpose() * &e.y;
    }
    let w = solve_constrained_ls(&gram, &rhs, radius)?;
    let mut sq = vec![0.0; dout];
    let mut rows = 0usize;
    for (z, e) in designs.iter().zip(examples) {
        let r = z * &w - &e.y;
        for c in 0..dout {
            sq[c] += r.column(c).norm_squared();
        }
        rows += z.nrows();
    }
    let train_residual = sq.iter().map(|s| (s / rows as f64).sqrt()).collect();
    let ws = (0..m).map(|i| w.rows(i * d, d).into_owned()).collect();
    Ok(ValueFit { ws, train_residual })
}

/// Draws `n` examples and fits the value matrices.
pub fn estimate_value_matrices(
    oracle: &dyn ExampleOracle,
    thetas: &[DMatrix<f64>],
    n: usize,
    radius: f64,
    seeds: &SeedTree,
    name: &str,
) -> Result<ValueFit> {
    let examples = draw_examples(oracle, n, seeds, name);
    fit_value_matrices(&examples, thetas, radius)
}

/// `n` examples from stream `name`, in block order.
pub fn draw_examples(oracle: &dyn ExampleOracle, n: usize, seeds: &SeedTree, name: &str) -> Vec<Example> {
    map_blocks(seeds, name, n, BLOCK, |rng, len| (0..len).map(|_| oracle.draw(rng)).collect::<Vec<_>>()).into_iter().flatten().collect()
}

pub fn layer_from(thetas: &[DMatrix<f64>], ws: &[DMatrix<f64>]) -> Result<AttentionLayer> {
    AttentionLayer::new(thetas.iter().zip(ws).map(|(t, w)| Head { theta: t.clone(), w: w.clone() }).collect())
}

/// Monte-Carlo mean of ‖F(X) − F̂(X)‖²_F with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

pub fn loss_on(examples: &[Example], layer_hat: &AttentionLayer) -> LossEstimate {
    let vals: Vec<f64> = examples.iter().map(|e| (forward_matrix(layer_hat, e.x.matrix()) - &e.y).norm_squared()).collect();
    summarize(&vals)
}

/// E‖F(X)‖²_F on the sample, the loss of the zero predictor.
pub fn zero_loss(examples: &[Example]) -> LossEstimate {
    let vals: Vec<f64> = examples.iter().map(|e| e.y.norm_squared()).collect();
    summarize(&vals)
}

fn summarize(vals: &[f64]) -> LossEstimate {
    let n = vals.len();
    if n == 0 {
        return LossEstimate { mean: 0.0, se: 0.0, n };
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    LossEstimate { mean, se: (var / n as f64).sqrt(), n }
}

pub fn test_loss(oracle: &dyn ExampleOracle, layer_hat: &AttentionLayer, n: usize, seeds: &SeedTree, name: &str) -> LossEstimate {
    loss_on(&draw_examples(oracle, n, seeds, name), layer_hat)
}

/// Winner of [`select_best`] with every validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub losses: Vec<LossEstimate>,
}

/// Argmin of the validation loss; ties go to the first candidate.
pub fn select_best(candidates: &[AttentionLayer], validation: &[Example]) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidParam("no candidates".into()));
    }
    let losses: Vec<LossEstimate> = candidates.par_iter().map(|c| loss_on(validation, c)).collect();
    let mut index = 0;
    for (i, l) in losses.iter().enumerate() {
        if l.mean < losses[index].mean {
            index = i;
        }
    }
    Ok(Selection { index, losses })
}

/// Validation size max(10³, 10·candidates).
pub fn validation_size(candidates: usize) -> usize {
    1000usize.max(10 * candidates)
}
