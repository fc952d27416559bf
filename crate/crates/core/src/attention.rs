//! Multi-head attention on Boolean sequences and softmax utilities.
//!
//! A layer computes F(X) = Σᵢ softmax(XΘᵢXᵀ)·X·Wᵢ with the softmax taken over
//! each row.

use nalgebra::DMatrix;

use crate::boolean_model::BooleanSequence;
use crate::error::{Error, Result};

/// One attention head: attention matrix Θ and projection matrix W.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub theta: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

/// A list of heads over a shared token dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    heads: Vec<Head>,
    d: usize,
}

impl AttentionLayer {
    pub fn new(heads: Vec<Head>) -> Result<Self> {
        let d = heads.first().map(|h| h.theta.nrows()).ok_or_else(|| Error::InvalidParam("layer needs at least one head".into()))?;
        for (i, h) in heads.iter().enumerate() {
            if h.theta.shape() != (d, d) || h.w.shape() != (d, d) {
                return Err(Error::Dimension(format!("head {i} is not {d}x{d}")));
            }
            if h.theta.iter().chain(h.w.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParam(format!("head {i} has non-finite entries")));
            }
        }
        Ok(Self { heads, d })
    }

    pub fn from_pairs(pairs: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(theta, w)| Head { theta, w }).collect())
    }

    pub fn zero(m: usize, d: usize) -> Self {
        let heads = (0..m).map(|_| Head { theta: DMatrix::zeros(d, d), w: DMatrix::zeros(d, d) }).collect();
        Self { heads, d }
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn m(&self) -> usize {
        self.heads.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn thetas(&self) -> Vec<DMatrix<f64>> {
        self.heads.iter().map(|h| h.theta.clone()).collect()
    }

    /// Σᵢ Wᵢ.
    pub fn w_sum(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.d, self.d);
        for h in &self.heads {
            s += &h.w;
        }
        s
    }
}

/// Row-stochastic k×k matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPattern(pub DMatrix<f64>);

impl AttentionPattern {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Stable softmax of a slice, renormalized so it sums to one.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn softmax_rows(m: &DMatrix<f64>) -> AttentionPattern {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    AttentionPattern(out)
}

/// Attention pattern softmax(XΘXᵀ) of a single head.
pub fn pattern(theta: &DMatrix<f64>, x: &DMatrix<f64>) -> AttentionPattern {
    let xt = x * theta;
    softmax_rows(&(xt * x.transpose()))
}

/// Evaluates the layer on a sequence.
pub fn forward(layer: &AttentionLayer, x: &BooleanSequence) -> Result<DMatrix<f64>> {
    if x.d() != layer.d() {
        return Err(Error::Dimension(format!("layer has d = {}, sequence has d = {}", layer.d(), x.d())));
    }
    Ok(forward_matrix(layer, x.matrix()))
}

/// Forward pass on a raw real matrix of tokens (no ±1 check).
pub fn forward_matrix(layer: &AttentionLayer, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), layer.d());
    for h in layer.heads() {
        let p = pattern(&h.theta, x);
        out += (p.0 * x) * &h.w;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Output of [`one_sparse_margin_residual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginResidual {
    pub a_star: usize,
    pub tau: f64,
    pub l1_residual: f64,
    /// softmax(v)_{a*}
    pub top_mass: f64,
}

impl MarginResidual {
    /// Lower bound on the top mass implied by the margin: 1 − (k−1)/(e^τ+k−1).
    pub fn mass_bound(k: usize, tau: f64) -> f64 {
        let km1 = (k - 1) as f64;
        1.0 - km1 / (tau.exp() + km1)
    }
}

pub fn one_sparse_margin_residual(v: &[f64]) -> MarginResidual {
    assert!(v.len() >= 2, "need k >= 2");
    let a_star = argmax(v);
    let runner = v.iter().enumerate().filter(|(i, _)| *i != a_star).map(|(_, &x)| x).fold(f64::NEG_INFINITY, f64::max);
    let p = softmax(v);
    let l1_residual = 2.0 * p.iter().enumerate().filter(|(i, _)| *i != a_star).map(|(_, &pi)| pi).sum::<f64>();
    MarginResidual { a_star, tau: v[a_star] - runner, l1_residual, top_mass: p[a_star] }
}

/// Output of [`two_sparse_approx`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoSparse {
    pub a1: usize,
    pub a2: usize,
    pub beta: f64,
    pub l1_error: f64,
    /// Whether v_{a1} − v_{a'} ≥ log(2k/eps) holds for every other index.
    pub hypothesis_holds: bool,
}

pub fn two_sparse_approx(v: &[f64], eps: f64) -> TwoSparse {
    let k = v.len();
    assert!(k >= 3, "need k >= 3");
    let a1 = argmax(v);
    let mut a2 = if a1 == 0 { 1 } else { 0 };
    for i in 0..k {
        if i != a1 && v[i] > v[a2] {
            a2 = i;
        }
    }
    let beta = v[a1] - v[a2];
    let p = softmax(v);
    // (e^β e_{a1} + e_{a2})/(e^β + 1) written with a logistic to avoid overflow
    let q1 = 1.0 / (1.0 + (-beta).exp());
    let q2 = 1.0 - q1;
    let mut l1 = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        let qi = if i == a1 {
            q1
        } else if i == a2 {
            q2
        } else {
            0.0
        };
        l1 += (pi - qi).abs();
    }
    let thr = (2.0 * k as f64 / eps).ln();
    let hypothesis_holds = (0..k).filter(|&i| i != a1 && i != a2).all(|i| v[a1] - v[i] >= thr);
    TwoSparse { a1, a2, beta, l1_error: l1, hypothesis_holds }
}

/// |log(vᵢ/vⱼ) − log(v′ᵢ/v′ⱼ)|.
pub fn log_ratio_gap(v: &[f64], v_prime: &[f64], i: usize, j: usize) -> Result<f64> {
    for (name, x) in [("v", v), ("v_prime", v_prime)] {
        if x[i] <= 0.0 || x[j] <= 0.0 {
            return Err(Error::InvalidParam(format!("{name} has a nonpositive entry at index {i} or {j}")));
        }
    }
    Ok(((v[i] / v[j]).ln() - (v_prime[i] / v_prime[j]).ln()).abs())
}

/// k²·η·log(1/η)/C, the shape of the multiplicative-stability bound.
pub fn stability_envelope(k: usize, eta: f64, c: f64) -> f64 {
    (k * k) as f64 * eta * (1.0 / eta).ln() / c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boolean_model::sample_uniform;
    use crate::rng::seeded;

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&DMatrix::zeros(3, 3));
        assert!(p.0.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[9f64.ln(), 0.0]);
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 0.1).abs() < 1e-15);
        let p = softmax(&[1e4, 0.0, 0.0]);
        assert!(p[0] >= 1.0 - 1e-12 && p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn forward_examples() {
        let mut rng = seeded(1);
        let d = 5;
        let x = sample_uniform(4, d, &mut rng);
        let layer = AttentionLayer::from_pairs(vec![(DMatrix::zeros(d, d), DMatrix::identity(d, d))]).unwrap();
        let f = forward(&layer, &x).unwrap();
        let j = DMatrix::from_element(4, 4, 0.25);
        assert!((f - j * x.matrix()).abs().max() < 1e-15);

        let th = DMatrix::from_fn(d, d, |i, j| (i as f64 - j as f64) * 0.3);
        let w = DMatrix::from_fn(d, d, |i, j| (i * j) as f64 * 0.1);
        let layer = AttentionLayer::from_pairs(vec![(th.clone(), w.clone()), (th, -w)]).unwrap();
        assert!(forward(&layer, &x).unwrap().abs().max() < 1e-14);
    }

    #[test]
    fn forward_matches_straight_line_evaluator() {
        // k = 2, d = 2, values chosen by hand
        let th = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.25]);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let x = BooleanSequence::from_rows(&[vec![1, -1], vec![-1, -1]]).unwrap();
        let layer = AttentionLayer::from_pairs(vec![(th.clone(), w.clone())]).unwrap();
        let f = forward(&layer, &x).unwrap();

        let t = [[1.0f64, -1.0], [-1.0, -1.0]];
        let mut expect = [[0.0f64; 2]; 2];
        for r in 0..2 {
            let mut logits = [0.0f64; 2];
            for c in 0..2 {
                let mut s = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        s += t[r][a] * th[(a, b)] * t[c][b];
                    }
                }
                logits[c] = s;
            }
            let z = logits[0].exp() + logits[1].exp();
            let p = [logits[0].exp() / z, logits[1].exp() / z];
            for col in 0..2 {
                let mut s = 0.0;
                for c in 0..2 {
                    for a in 0..2 {
                        s += p[c] * t[c][a] * w[(a, col)];
                    }
                }
                expect[r][col] = s;
            }
        }
        for r in 0..2 {
            for c in 0..2 {
                assert!((f[(r, c)] - expect[r][c]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let layer = AttentionLayer::zero(1, 3);
        let x = sample_uniform(2, 4, &mut seeded(0));
        assert!(matches!(forward(&layer, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn margin_examples() {
        let r = one_sparse_margin_residual(&[9f64.ln(), 0.0]);
        assert_eq!(r.a_star, 0);
        assert!((r.tau - 9f64.ln()).abs() < 1e-15);
        assert!((r.l1_residual - 0.2).abs() < 1e-14);

        let r = one_sparse_margin_residual(&[1.5; 5]);
        assert_eq!(r.a_star, 0);
        assert_eq!(r.tau, 0.0);
        assert!((r.l1_residual - 2.0 * 4.0 / 5.0).abs() < 1e-14);

        let mut v = vec![0.0; 8];
        v[3] = 20.0;
        let r = one_sparse_margin_residual(&v);
        assert!(r.l1_residual <= 1e-7);
        assert!((r.l1_residual / (14.0 / (20f64.exp() + 7.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sparse_examples() {
        let t = two_sparse_approx(&[5.0, 5.0, -50.0, -50.0], 0.1);
        assert_eq!((t.a1, t.a2), (0, 1));
        assert_eq!(t.beta, 0.0);
        assert!(t.l1_error <= 1e-20);

        let eps = 6.0 * (-42f64).exp();
        let t = two_sparse_approx(&[3.0, 2.0, -40.0], eps);
        assert!(t.hypothesis_holds);
        assert!(t.l1_error <= eps);

        let t = two_sparse_approx(&[1.0; 6], 0.1);
        assert!(!t.hypothesis_holds);
        assert!(t.l1_error.is_finite() && t.l1_error <= 2.0);
    }

    #[test]
    fn log_ratio_examples() {
        assert_eq!(log_ratio_gap(&[0.5, 0.5], &[0.5, 0.5], 0, 1).unwrap(), 0.0);
        let g = log_ratio_gap(&[0.5, 0.5], &[0.45, 0.55], 0, 1).unwrap();
        assert!((g - (11.0f64 / 9.0).ln()).abs() < 1e-15);
        assert!((g - 0.2007).abs() < 1e-4 && g <= 0.3);
        assert!(log_ratio_gap(&[0.0, 1.0], &[0.5, 0.5], 0, 1).is_err());
    }
}
