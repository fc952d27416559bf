//! Ground-truth layer generation, the non-degeneracy audit, and the shared
//! instance file format.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionLayer, Head};
use crate::error::{Error, Result};
use crate::linalg::{frob, frob_dot, op_norm_with};
use crate::rng::{seeded, Rng};
use crate::serial::{matrix_from_hex, matrix_to_hex, HexMatrix};

/// Knobs for [`generate_instance_with`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InstanceParams {
    pub m: usize,
    pub d: usize,
    /// Frobenius norm of every Θᵢ.
    pub theta_norm: f64,
    /// Lower bound on ‖Wᵢ‖_F² for i ≥ 2; ‖W₁‖_F = 1.
    #[serde(default = "default_lambda_prime")]
    pub lambda_prime: f64,
}

fn default_lambda_prime() -> f64 {
    0.5
}

pub fn gaussian_matrix(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Smoothed Gaussian instance with ‖Θᵢ‖_F = theta_norm and ‖W₁‖_F = 1.
pub fn generate_instance(m: usize, d: usize, theta_norm: f64, rng: &mut Rng) -> AttentionLayer {
    generate_instance_with(&InstanceParams { m, d, theta_norm, lambda_prime: default_lambda_prime() }, rng)
}

pub fn generate_instance_with(p: &InstanceParams, rng: &mut Rng) -> AttentionLayer {
    assert!(p.m >= 1 && p.d >= 1, "m and d must be positive");
    let mut heads = Vec::with_capacity(p.m);
    for i in 0..p.m {
        let g = gaussian_matrix(p.d, rng);
        let theta = &g * (p.theta_norm / frob(&g));
        let h = gaussian_matrix(p.d, rng);
        let target = if i == 0 {
            1.0
        } else {
            let lo = p.lambda_prime.clamp(0.0, 1.0).sqrt();
            lo + (1.0 - lo) * rng.random::<f64>()
        };
        let w = &h * (target / frob(&h));
        heads.push(Head { theta, w });
    }
    AttentionLayer::new(heads).expect("generated heads are consistent")
}

/// Values of the non-degeneracy quantities for a layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssumptionAudit {
    /// min ‖Θᵢ‖²_F / ‖Θ₁‖²_F where Θ₁ has the largest norm.
    pub uplambda: f64,
    /// max pairwise |⟨Θᵢ,Θⱼ⟩|/(‖Θᵢ‖‖Θⱼ‖).
    pub kappa: f64,
    /// min ‖Θᵢ‖²_F / ‖Θᵢ‖²_op.
    pub r_sig: f64,
    /// min over heads and sampled coordinate subsets S of ‖ΘᵢΠ⊥_S‖²_F/‖Θᵢ‖²_op.
    pub r_sig_subsets: f64,
    pub subsets_checked: usize,
    /// max √d·‖row or column of Θᵢ‖/‖Θ₁‖_F.
    pub upsilon: f64,
    /// max |Tr Θᵢ|/‖Θᵢ‖_F.
    pub chi: f64,
    pub kappa_prime: f64,
    pub r_w: f64,
    /// min ‖Wᵢ‖²_F / max ‖Wⱼ‖²_F.
    pub uplambda_prime: f64,
    pub theta1_norm: f64,
    pub non_arithmetic: String,
}

fn coherence(mats: &[DMatrix<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..mats.len() {
        for j in (i + 1)..mats.len() {
            let (a, b) = (frob(&mats[i]), frob(&mats[j]));
            if a > 0.0 && b > 0.0 {
                best = best.max(frob_dot(&mats[i], &mats[j]).abs() / (a * b));
            }
        }
    }
    best
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Computes every audit field directly from the matrices.
pub fn audit_assumptions(layer: &AttentionLayer) -> AssumptionAudit {
    let d = layer.d();
    let mut rng = seeded(0x00a0_d170);
    let thetas: Vec<_> = layer.heads().iter().map(|h| h.theta.clone()).collect();
    let ws: Vec<_> = layer.heads().iter().map(|h| h.w.clone()).collect();
    let tn: Vec<f64> = thetas.iter().map(frob).collect();
    let wn: Vec<f64> = ws.iter().map(frob).collect();
    let t1 = tn.iter().cloned().fold(0.0, f64::max);
    let w1 = wn.iter().cloned().fold(0.0, f64::max);

    let uplambda = tn.iter().map(|n| ratio_or_zero(n * n, t1 * t1)).fold(f64::INFINITY, f64::min);
    let uplambda_prime = wn.iter().map(|n| ratio_or_zero(n * n, w1 * w1)).fold(f64::INFINITY, f64::min);

    let mut ops = Vec::new();
    for t in &thetas {
        ops.push(op_norm_with(t, &mut rng, 500, 1e-8));
    }
    let r_sig = thetas.iter().zip(&ops).map(|(t, &op)| ratio_or_zero(frob(t).powi(2), op * op)).fold(f64::INFINITY, f64::min);

    let max_size = d / 20;
    let mut r_sub = r_sig;
    let mut subsets_checked = 1;
    if max_size >= 1 {
        for _ in 0..32 {
            let size = rng.random_range(1..=max_size);
            let s = sample(&mut rng, d, size).into_vec();
            for (t, &op) in thetas.iter().zip(&ops) {
                let mut tp = t.clone();
                for &c in &s {
                    tp.column_mut(c).fill(0.0);
                }
                r_sub = r_sub.min(ratio_or_zero(frob(&tp).powi(2), op * op));
            }
            subsets_checked += 1;
        }
    }

    let mut upsilon: f64 = 0.0;
    for t in &thetas {
        for j in 0..d {
            let c = t.column(j).norm();
            let r = t.row(j).norm();
            upsilon = upsilon.max((d as f64).sqrt() * ratio_or_zero(c.max(r), t1));
        }
    }
    let chi = thetas.iter().map(|t| ratio_or_zero(t.trace().abs(), frob(t))).fold(0.0, f64::max);
    let r_w = ws
        .iter()
        .map(|w| {
            let op = op_norm_with(w, &mut rng, 500, 1e-8);
            ratio_or_zero(frob(w).powi(2), op * op)
        })
        .fold(f64::INFINITY, f64::min);

    AssumptionAudit {
        uplambda,
        kappa: coherence(&thetas),
        r_sig,
        r_sig_subsets: r_sub,
        subsets_checked,
        upsilon,
        chi,
        kappa_prime: coherence(&ws),
        r_w,
        uplambda_prime,
        theta1_norm: t1,
        non_arithmetic: "not checked".into(),
    }
}

/// JSON layout shared by instances and learned hypotheses.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub m: usize,
    pub d: usize,
    pub theta: Vec<HexMatrix>,
    pub w: Vec<HexMatrix>,
    pub seed: u64,
}

impl InstanceFile {
    pub fn from_layer(layer: &AttentionLayer, seed: u64) -> Self {
        Self {
            m: layer.m(),
            d: layer.d(),
            theta: layer.heads().iter().map(|h| matrix_to_hex(&h.theta)).collect(),
            w: layer.heads().iter().map(|h| matrix_to_hex(&h.w)).collect(),
            seed,
        }
    }

    pub fn to_layer(&self) -> Result<AttentionLayer> {
        if self.theta.len() != self.m || self.w.len() != self.m {
            return Err(Error::Format(format!("expected {} theta and w matrices", self.m)));
        }
        let mut heads = Vec::with_capacity(self.m);
        for (t, w) in self.theta.iter().zip(&self.w) {
            let theta = matrix_from_hex(t)?;
            let w = matrix_from_hex(w)?;
            if theta.shape() != (self.d, self.d) || w.shape() != (self.d, self.d) {
                return Err(Error::Format(format!("matrices must be {0}x{0}", self.d)));
            }
            heads.push(Head { theta, w });
        }
        AttentionLayer::new(heads)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
