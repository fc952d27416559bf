//! Sampling on the Boolean cube, on slices, and the rerandomization coupling.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A k×d sequence of ±1 tokens, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BooleanSequence {
    data: DMatrix<f64>,
}

impl BooleanSequence {
    /// Wraps a matrix after checking that every entry is exactly ±1.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidParam("sequence must have k, d >= 1".into()));
        }
        if data.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidParam("entries must be exactly +1 or -1".into()));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<i8>]) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged token rows".into()));
        }
        Self::new(DMatrix::from_fn(k, d, |i, j| rows[i][j] as f64))
    }

    pub fn k(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[(r, c)] as i8
    }

    /// Token `r` as a ±1 integer vector.
    pub fn token(&self, r: usize) -> Vec<i8> {
        (0..self.d()).map(|c| self.get(r, c)).collect()
    }
}

/// Uniform ±1 sequence.
pub fn sample_uniform(k: usize, d: usize, rng: &mut Rng) -> BooleanSequence {
    assert!(k >= 1 && d >= 1, "k and d must be positive");
    let data = DMatrix::from_fn(k, d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    BooleanSequence { data }
}

/// Uniform ±1 vector of length d.
pub fn sample_cube(d: usize, rng: &mut Rng) -> Vec<i8> {
    (0..d).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
}

/// Product of a cube block and two slice blocks.
///
/// Slice means are stored as the number of +1 entries in each block so that
/// membership is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceProductSpec {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub plus2: usize,
    pub plus3: usize,
}

fn count_from_mean(mean: f64, len: usize, name: &str) -> Result<usize> {
    if !(-1.0..=1.0).contains(&mean) {
        return Err(Error::InvalidParam(format!("{name} = {mean} outside [-1, 1]")));
    }
    let c = (1.0 + mean) * len as f64 / 2.0;
    let r = c.round();
    if (c - r).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "slice with {name} = {mean} over {len} coordinates is empty: (1+{name})*{len}/2 = {c} is not an integer"
        )));
    }
    Ok(r as usize)
}

impl SliceProductSpec {
    /// Builds a spec from block sizes and real means; rejects empty slices.
    pub fn new(d1: usize, d2: usize, d3: usize, mu: f64, nu: f64) -> Result<Self> {
        Ok(Self {
            d1,
            d2,
            d3,
            plus2: count_from_mean(mu, d2, "mu")?,
            plus3: count_from_mean(nu, d3, "nu")?,
        })
    }

    pub fn from_counts(d1: usize, d2: usize, d3: usize, plus2: usize, plus3: usize) -> Result<Self> {
        if plus2 > d2 || plus3 > d3 {
            return Err(Error::InvalidParam("more +1 entries than block coordinates".into()));
        }
        Ok(Self { d1, d2, d3, plus2, plus3 })
    }

    pub fn len(&self) -> usize {
        self.d1 + self.d2 + self.d3
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mu(&self) -> f64 {
        if self.d2 == 0 {
            0.0
        } else {
            (2.0 * self.plus2 as f64 - self.d2 as f64) / self.d2 as f64
        }
    }

    pub fn nu(&self) -> f64 {
        if self.d3 == 0 {
            0.0
        } else {
            (2.0 * self.plus3 as f64 - self.d3 as f64) / self.d3 as f64
        }
    }

    /// Sum of the d2 block on every member of the slice.
    pub fn block2_sum(&self) -> i64 {
        2 * self.plus2 as i64 - self.d2 as i64
    }

    pub fn block3_sum(&self) -> i64 {
        2 * self.plus3 as i64 - self.d3 as i64
    }
}

fn shuffled_block(len: usize, plus: usize, rng: &mut Rng) -> Vec<i8> {
    let mut b: Vec<i8> = (0..len).map(|i| if i < plus { 1 } else { -1 }).collect();
    b.shuffle(rng);
    b
}

/// Draw from the cube ⊗ slice ⊗ slice product distribution.
pub fn sample_slice_product(spec: &SliceProductSpec, rng: &mut Rng) -> Vec<i8> {
    let mut x = sample_cube(spec.d1, rng);
    x.extend(shuffled_block(spec.d2, spec.plus2, rng));
    x.extend(shuffled_block(spec.d3, spec.plus3, rng));
    x
}

/// Two coupled slice-product draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub x: Vec<i8>,
    pub x_prime: Vec<i8>,
    /// Global indices rerandomized in the d2 block.
    pub changed2: Vec<usize>,
    /// Global indices rerandomized in the d3 block.
    pub changed3: Vec<usize>,
}

fn move_block(x: &mut [i8], offset: usize, from: usize, to: usize, rng: &mut Rng) -> Vec<usize> {
    if from == to {
        return Vec::new();
    }
    let (src, dst, n) = if to > from { (-1i8, 1i8, to - from) } else { (1i8, -1i8, from - to) };
    let mut pool: Vec<usize> = x.iter().enumerate().filter(|(_, &v)| v == src).map(|(i, _)| i).collect();
    pool.shuffle(rng);
    let mut chosen: Vec<usize> = pool[..n].to_vec();
    chosen.sort_unstable();
    for &i in &chosen {
        x[i] = dst;
    }
    chosen.into_iter().map(|i| i + offset).collect()
}

/// Samples x from the first spec and moves a uniformly random subset of
/// coordinates so that x′ lies in the second spec's slices.
pub fn sample_coupled(spec: &SliceProductSpec, spec_prime: &SliceProductSpec, rng: &mut Rng) -> Result<CoupledPair> {
    if (spec.d1, spec.d2, spec.d3) != (spec_prime.d1, spec_prime.d2, spec_prime.d3) {
        return Err(Error::Dimension("coupled specs must share block sizes".into()));
    }
    let x = sample_slice_product(spec, rng);
    let mut x_prime = x.clone();
    let (a, b) = (spec.d1, spec.d1 + spec.d2);
    let changed2 = move_block(&mut x_prime[a..b], a, spec.plus2, spec_prime.plus2, rng);
    let changed3 = move_block(&mut x_prime[b..], b, spec.plus3, spec_prime.plus3, rng);
    Ok(CoupledPair { x, x_prime, changed2, changed3 })
}

/// Convenience form taking real means.
#[allow(clippy::too_many_arguments)]
pub fn sample_coupled_means(
    mu: f64,
    nu: f64,
    mu_prime: f64,
    nu_prime: f64,
    d1: usize,
    d2: usize,
    d3: usize,
    rng: &mut Rng,
) -> Result<CoupledPair> {
    let s = SliceProductSpec::new(d1, d2, d3, mu, nu)?;
    let sp = SliceProductSpec::new(d1, d2, d3, mu_prime, nu_prime)?;
    sample_coupled(&s, &sp, rng)
}

/// E[xᵢxⱼ] for distinct coordinates of a slice of length d and mean μ.
pub fn slice_pair_correlation(mu: f64, d: usize) -> f64 {
    (mu * mu * d as f64 - 1.0) / (d as f64 - 1.0)
}

/// xᵀMx for a ±1 vector.
pub fn quad_form(x: &[i8], m: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += m[(i, j)] * x[j] as f64;
        }
        acc += x[i] as f64 * row;
    }
    acc
}

/// Exact variance of xᵀMx for x uniform on the cube and M symmetric:
/// 2·Σ_{i≠j} M_ij².
pub fn quad_form_variance(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    2.0 * s
}

/// Empirical moments of a scalar statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSummary {
    pub n: u64,
    pub mean: f64,
    pub variance: f64,
    /// Standard error of the variance estimate, from the fourth central moment.
    pub variance_se: f64,
}

pub fn summarize(samples: &[f64]) -> MomentSummary {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &s in samples {
        let c = s - mean;
        let c2 = c * c;
        m2 += c2;
        m4 += c2 * c2;
    }
    m2 /= n;
    m4 /= n;
    let variance = m2 * n / (n - 1.0);
    let variance_se = ((m4 - m2 * m2).max(0.0) / n).sqrt();
    MomentSummary { n: samples.len() as u64, mean, variance, variance_se }
}

/// Draws xᵀMx for `draws` uniform cube points.
pub fn quad_form_samples(m: &DMatrix<f64>, draws: usize, rng: &mut Rng) -> Vec<f64> {
    let d = m.nrows();
    let mut x = vec![0i8; d];
    (0..draws)
        .map(|_| {
            for xi in x.iter_mut() {
                *xi = if rng.random::<bool>() { 1 } else { -1 };
            }
            quad_form(&x, m)
        })
        .collect()
}

/// Empirical tail P(|xᵀMx − Tr M| ≥ t) on the uniform cube.
pub fn quad_form_tail(m: &DMatrix<f64>, t: f64, draws: usize, rng: &mut Rng) -> f64 {
    let tr = m.trace();
    let hits = quad_form_samples(m, draws, rng).into_iter().filter(|q| (q - tr).abs() >= t).count();
    hits as f64 / draws as f64
}

/// Hanson–Wright style envelope 2·exp(−c·min(t²/‖M‖_F², t/‖M‖_op)).
pub fn hanson_wright_envelope(fro: f64, op: f64, t: f64, c: f64) -> f64 {
    (2.0 * (-c * (t * t / (fro * fro)).min(t / op)).exp()).min(1.0)
}

/// Empirical tail of a linear statistic ⟨a, x⟩ on a slice-product draw, centred
/// at its exact mean.
pub fn slice_linear_tail(a: &[f64], spec: &SliceProductSpec, t: f64, draws: usize, rng: &mut Rng) -> f64 {
    assert_eq!(a.len(), spec.len());
    let (o2, o3) = (spec.d1, spec.d1 + spec.d2);
    let mean: f64 = a[o2..o3].iter().sum::<f64>() * spec.mu() + a[o3..].iter().sum::<f64>() * spec.nu();
    let mut hits = 0usize;
    for _ in 0..draws {
        let x = sample_slice_product(spec, rng);
        let v: f64 = a.iter().zip(&x).map(|(ai, &xi)| ai * xi as f64).sum();
        if (v - mean).abs() >= t {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}
