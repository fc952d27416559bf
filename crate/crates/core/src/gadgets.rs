//! Lower-bound constructions: the φ gadget, Hamming-weight interpolation,
//! the path-graph distance inverse, parity layers and LWR encodings.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{forward_matrix, AttentionLayer, Head};
use crate::error::{Error, Result};
use crate::linalg::{frob, sigma_min};
use crate::rng::Rng;

/// φ(z) = z·tanh(z/2).
pub fn phi(z: f64) -> f64 {
    z * (z / 2.0).tanh()
}

/// The four heads of G^s_{τ,v} on (d+1)-dimensional tokens, with the value
/// matrices scaled by `scale`.
pub fn gadget_heads(tau: f64, v: &[f64], s: f64, scale: f64) -> Vec<Head> {
    let n = v.len() + 1;
    let mut w = DVector::zeros(n);
    let mut wp = DVector::zeros(n);
    w[0] = tau;
    wp[0] = -tau;
    for (j, &vj) in v.iter().enumerate() {
        w[j + 1] = vj;
        wp[j + 1] = vj;
    }
    let mut e1 = DVector::zeros(n);
    e1[0] = 1.0;
    let theta = &e1 * w.transpose();
    let value = &w * e1.transpose() * scale;
    let theta_p = &e1 * wp.transpose();
    let value_p = &wp * e1.transpose() * (s * scale);
    vec![
        Head { theta: theta.clone(), w: value.clone() },
        Head { theta: -theta, w: -value },
        Head { theta: theta_p.clone(), w: value_p.clone() },
        Head { theta: -theta_p, w: -value_p },
    ]
}

/// Two-token input ((a₁, z₁), (a₂, z₂)).
pub fn gadget_input(a1: f64, a2: f64, z1: &[f64], z2: &[f64]) -> DMatrix<f64> {
    let d = z1.len();
    let mut x = DMatrix::zeros(2, d + 1);
    x[(0, 0)] = a1;
    x[(1, 0)] = a2;
    for j in 0..d {
        x[(0, j + 1)] = z1[j];
        x[(1, j + 1)] = z2[j];
    }
    x
}

/// First output column of the four-head softmax layer.
pub fn gadget_eval(tau: f64, v: &[f64], s: f64, x: &DMatrix<f64>) -> [f64; 2] {
    let layer = AttentionLayer::new(gadget_heads(tau, v, s, 1.0)).expect("gadget heads are square");
    let y = forward_matrix(&layer, x);
    [y[(0, 0)], y[(1, 0)]]
}

/// (a₁,a₂)·{φ((a₁−a₂)τ+⟨v,z₁−z₂⟩) + s·φ((a₂−a₁)τ+⟨v,z₁−z₂⟩)}.
pub fn gadget_closed_form(tau: f64, v: &[f64], s: f64, x: &DMatrix<f64>) -> [f64; 2] {
    let (a1, a2) = (x[(0, 0)], x[(1, 0)]);
    let dz: f64 = v.iter().enumerate().map(|(j, vj)| vj * (x[(0, j + 1)] - x[(1, j + 1)])).sum();
    let core = phi((a1 - a2) * tau + dz) + s * phi((a2 - a1) * tau + dz);
    [a1 * core, a2 * core]
}

/// Inverse of the n×n path distance matrix D_ij = |i − j|.
pub fn path_distance_inverse(n: usize) -> Result<DMatrix<f64>> {
    if n <= 2 {
        return Err(Error::InvalidParam("path distance inverse needs n > 2".into()));
    }
    let nf = n as f64;
    let mut inv = DMatrix::zeros(n, n);
    for i in 0..n {
        inv[(i, i)] = -1.0;
        if i + 1 < n {
            inv[(i, i + 1)] = 0.5;
            inv[(i + 1, i)] = 0.5;
        }
    }
    let corner = (2.0 - nf) / (2.0 * nf - 2.0);
    inv[(0, 0)] = corner;
    inv[(n - 1, n - 1)] = corner;
    inv[(0, n - 1)] += 1.0 / (2.0 * nf - 2.0);
    inv[(n - 1, 0)] += 1.0 / (2.0 * nf - 2.0);
    Ok(inv)
}

pub fn path_distance_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| (i as f64 - j as f64).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn sign(self) -> f64 {
        match self {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        }
    }
}

/// Coefficients of Σλᵢ[φ(τᵢ+⟨v,x⟩) + s·φ(−τᵢ+⟨v,x⟩)] = h(⟨w,x⟩).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSolution {
    pub taus: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub v: Vec<f64>,
    pub parity: Parity,
    pub rho: f64,
    pub residual: f64,
    pub sigma_min: f64,
}

impl InterpolationSolution {
    /// Value of the φ network at x ∈ {−1,0,1}^d.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let u: f64 = self.v.iter().zip(x).map(|(a, b)| a * b).sum();
        let s = self.parity.sign();
        self.taus.iter().zip(&self.lambdas).map(|(&t, &l)| l * (phi(t + u) + s * phi(-t + u))).sum()
    }
}

/// Solves rows ℓ = −L..L of Σλᵢφ(ρ(ℓ + tᵢ)) = h(ℓ)/2 with tᵢ ∈ {−L..L+1},
/// L = d·M, plus Σλᵢ = 0. `h[ℓ + L]` holds h(ℓ).
///
/// ρ = c·ln(L+2) with c doubled from 1 until e^{−ρ/3} ≤ 0.05, σ_min of the
/// system is at least 1e−10 and the residual is at most 1e−8.
pub fn solve_interpolation(w: &[i64], m_bound: i64, h: &[f64], parity: Parity) -> Result<InterpolationSolution> {
    if m_bound < 1 || w.iter().any(|x| x.abs() > m_bound) {
        return Err(Error::InvalidParam("entries of w must lie in [-M, M] with M >= 1".into()));
    }
    let l = w.len() as i64 * m_bound;
    if h.len() as i64 != 2 * l + 1 {
        return Err(Error::Dimension(format!("h needs {} values, got {}", 2 * l + 1, h.len())));
    }
    let s = parity.sign();
    for k in 0..=l {
        let (a, b) = (h[(l + k) as usize], h[(l - k) as usize]);
        if (a - s * b).abs() > 1e-12 * (1.0 + a.abs()) {
            return Err(Error::InvalidParam(format!("h is not {parity:?} at {k}")));
        }
    }
    let n = (2 * l + 2) as usize;
    let ts: Vec<f64> = (-l..=l + 1).map(|t| t as f64).collect();
    let mut rhs = DVector::zeros(n);
    for (r, lv) in (-l..=l).enumerate() {
        rhs[r] = 0.5 * h[(lv + l) as usize];
    }
    let base = ((l + 2) as f64).ln();
    let mut c = 1.0;
    let mut last_err = Error::IllConditioned(0.0);
    for _ in 0..8 {
        let rho = c * base;
        c *= 2.0;
        if (-rho / 3.0).exp() > 0.05 {
            continue;
        }
        let mut a = DMatrix::zeros(n, n);
        for (r, lv) in (-l..=l).enumerate() {
            for (i, &t) in ts.iter().enumerate() {
                a[(r, i)] = phi(rho * (lv as f64 + t));
            }
        }
        for i in 0..n {
            a[(n - 1, i)] = 1.0;
        }
        let smin = sigma_min(&a);
        if smin < 1e-10 {
            last_err = Error::IllConditioned(smin);
            continue;
        }
        let Some(lam) = a.clone().lu().solve(&rhs) else {
            last_err = Error::IllConditioned(smin);
            continue;
        };
        let residual = (&a * &lam - &rhs).amax();
        if residual > 1e-8 {
            last_err = Error::IllConditioned(smin);
            continue;
        }
        return Ok(InterpolationSolution {
            taus: ts.iter().map(|t| rho * t).collect(),
            lambdas: lam.iter().cloned().collect(),
            v: w.iter().map(|&x| rho * x as f64).collect(),
            parity,
            rho,
            residual,
            sigma_min: smin,
        });
    }
    Err(last_err)
}

/// Attention layer realizing an interpolation solution on two tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GadgetLayer {
    pub layer: AttentionLayer,
    pub heads: usize,
    pub max_theta_norm: f64,
    pub max_w_norm: f64,
}

/// One gadget per λᵢ with parameters (τᵢ/2, v/2), so the gadget argument is
/// τᵢ + ⟨v, (z₁ − z₂)/2⟩ on inputs with a₁ = −a₂ = 1.
pub fn build_gadget_layer(sol: &InterpolationSolution) -> GadgetLayer {
    let half_v: Vec<f64> = sol.v.iter().map(|x| x / 2.0).collect();
    let mut heads = Vec::with_capacity(4 * sol.lambdas.len());
    for (&t, &l) in sol.taus.iter().zip(&sol.lambdas) {
        heads.extend(gadget_heads(t / 2.0, &half_v, sol.parity.sign(), l));
    }
    let max_theta_norm = heads.iter().map(|h| frob(&h.theta)).fold(0.0, f64::max);
    let max_w_norm = heads.iter().map(|h| frob(&h.w)).fold(0.0, f64::max);
    let count = heads.len();
    GadgetLayer { layer: AttentionLayer::new(heads).expect("gadget heads are square"), heads: count, max_theta_norm, max_w_norm }
}

/// Layer whose top-left output on ((1,z₁),(−1,z₂)) is Πᵢ∈S z₁ᵢz₂ᵢ.
///
/// Uses w = 1_S, M = 1 and h(ℓ) = (−1)^ℓ over the full token dimension d.
pub fn build_parity_layer(d: usize, subset: &[usize]) -> Result<(GadgetLayer, InterpolationSolution)> {
    if subset.is_empty() || subset.iter().any(|&i| i >= d) {
        return Err(Error::InvalidParam(format!("subset must be nonempty with indices below {d}")));
    }
    let mut w = vec![0i64; d];
    for &i in subset {
        w[i] = 1;
    }
    let l = d as i64;
    let h: Vec<f64> = (-l..=l).map(|x| if x.rem_euclid(2) == 0 { 1.0 } else { -1.0 }).collect();
    let sol = solve_interpolation(&w, 1, &h, Parity::Even)?;
    Ok((build_gadget_layer(&sol), sol))
}

/// Exhaustive comparison of a parity layer against a₁·χ_T·1{a₁ ≠ a₂}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParityReport {
    pub inputs: u64,
    pub max_error: f64,
    /// Largest |output| over inputs with a₁ = a₂.
    pub max_equal_bits_output: f64,
    pub heads: usize,
    pub max_theta_norm: f64,
    pub max_w_norm: f64,
}

pub fn verify_parity_layer(d: usize, subset: &[usize], all_bits: bool) -> Result<ParityReport> {
    let (g, _) = build_parity_layer(d, subset)?;
    let zs = 1u64 << (2 * d);
    let bits: Vec<(f64, f64)> = if all_bits { vec![(1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (-1.0, -1.0)] } else { vec![(1.0, -1.0)] };
    let errs: Vec<(f64, f64)> = (0..zs)
        .into_par_iter()
        .map(|code| {
            let z1: Vec<f64> = (0..d).map(|j| if code >> j & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let z2: Vec<f64> = (0..d).map(|j| if code >> (d + j) & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let chi: f64 = subset.iter().map(|&i| z1[i] * z2[i]).product();
            let mut err: f64 = 0.0;
            let mut eq: f64 = 0.0;
            for &(a1, a2) in &bits {
                let out = forward_matrix(&g.layer, &gadget_input(a1, a2, &z1, &z2))[(0, 0)];
                if a1 == a2 {
                    eq = eq.max(out.abs());
                    err = err.max(out.abs());
                } else {
                    err = err.max((out - a1 * chi).abs());
                }
            }
            (err, eq)
        })
        .collect();
    let max_error = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let max_equal_bits_output = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(ParityReport {
        inputs: zs * bits.len() as u64,
        max_error,
        max_equal_bits_output,
        heads: g.heads,
        max_theta_norm: g.max_theta_norm,
        max_w_norm: g.max_w_norm,
    })
}

/// max over x ∈ {−1,0,1}^d of |network(x) − h(⟨w,x⟩)|.
pub fn interpolation_max_error(sol: &InterpolationSolution, w: &[i64], h: &[f64]) -> f64 {
    let d = w.len();
    let l: i64 = w.iter().map(|x| x.abs()).sum::<i64>().max(h.len() as i64 / 2);
    let total = 3usize.pow(d as u32);
    (0..total)
        .map(|mut code| {
            let x: Vec<f64> = (0..d)
                .map(|_| {
                    let v = (code % 3) as f64 - 1.0;
                    code /= 3;
                    v
                })
                .collect();
            let ip: i64 = w.iter().zip(&x).map(|(&a, &b)| a * b as i64).sum();
            (sol.eval(&x) - h[(ip + l) as usize]).abs()
        })
        .fold(0.0, f64::max)
}

fn log2_exact(q: u64) -> Result<u32> {
    if q < 2 || !q.is_power_of_two() {
        return Err(Error::InvalidParam(format!("q = {q} is not a power of two")));
    }
    Ok(q.trailing_zeros())
}

/// Bits of each xᵢ (least significant first) as ±1, bit 0 ↦ −1.
pub fn lwr_encode(x: &[u64], q: u64) -> Result<Vec<i8>> {
    let b = log2_exact(q)?;
    let mut out = Vec::with_capacity(x.len() * b as usize);
    for &xi in x {
        if xi >= q {
            return Err(Error::InvalidParam(format!("{xi} is not below q = {q}")));
        }
        for k in 0..b {
            out.push(if xi >> k & 1 == 1 { 1 } else { -1 });
        }
    }
    Ok(out)
}

pub fn lwr_decode(z: &[i8], q: u64) -> Result<Vec<u64>> {
    let b = log2_exact(q)? as usize;
    if z.len() % b != 0 {
        return Err(Error::Dimension("encoding length is not a multiple of log2 q".into()));
    }
    Ok(z.chunks(b).map(|c| c.iter().enumerate().map(|(k, &s)| if s > 0 { 1u64 << k } else { 0 }).sum()).collect())
}

/// w′ with w′_{i,k} = w₁ᵢ·2^k for a secret w = (w₁, −w₁).
pub fn lwr_w_prime(w: &[i64], q: u64) -> Result<Vec<i64>> {
    let b = log2_exact(q)?;
    if w.len() % 2 != 0 {
        return Err(Error::Dimension("secret length must be even".into()));
    }
    let d = w.len() / 2;
    if (0..d).any(|i| w[d + i] != -w[i]) {
        return Err(Error::InvalidParam("secret must satisfy w2 = -w1".into()));
    }
    Ok(w[..d].iter().flat_map(|&wi| (0..b).map(move |k| wi << k)).collect())
}

/// (⟨w,x⟩, ⟨½w′, z₁−z₂⟩) over the integers, with z_c the encoding of the
/// c-th half of x.
pub fn lwr_inner_identity(w: &[i64], x: &[u64], q: u64) -> Result<(i128, i128)> {
    if w.len() != x.len() {
        return Err(Error::Dimension("w and x differ in length".into()));
    }
    let d = x.len() / 2;
    let wp = lwr_w_prime(w, q)?;
    let z1 = lwr_encode(&x[..d], q)?;
    let z2 = lwr_encode(&x[d..], q)?;
    let lhs: i128 = w.iter().zip(x).map(|(&a, &b)| a as i128 * b as i128).sum();
    let twice: i128 = wp.iter().zip(z1.iter().zip(&z2)).map(|(&a, (&p, &r))| a as i128 * (p - r) as i128).sum();
    Ok((lhs, twice / 2))
}

/// ⌊(p/q)·(v mod q)⌉ mod p.
pub fn lwr_round(v: i64, q: u64, p: u64) -> u64 {
    let r = v.rem_euclid(q as i64) as u128;
    (((r * p as u128 * 2 + q as u128) / (2 * q as u128)) % p as u128) as u64
}

/// Query-answer gaps between a planted parity and pure noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SqDemoReport {
    pub queries: usize,
    pub tau: f64,
    pub max_gap: f64,
    pub within_tolerance: usize,
}

/// Random character queries q(z, y) = y·χ_U(z) on 2d bits, answered exactly
/// for labels y = χ_T and for independent uniform labels.
pub fn sq_demo(d: usize, subset: &[usize], tau: f64, queries: usize, rng: &mut Rng) -> SqDemoReport {
    let bits = 2 * d;
    let mut target = 0u64;
    for &i in subset {
        target |= 1 << i;
        target |= 1 << (d + i);
    }
    let mut max_gap: f64 = 0.0;
    let mut within = 0;
    for _ in 0..queries {
        let u: u64 = rng.random_range(0..(1u64 << bits));
        // E[χ_T χ_U] over the cube is 1{U = T}; the noise answer is 0
        let gap = if u == target { 1.0 } else { 0.0 };
        max_gap = max_gap.max(gap);
        if gap <= tau {
            within += 1;
        }
    }
    SqDemoReport { queries, tau, max_gap, within_tolerance: within }
}
