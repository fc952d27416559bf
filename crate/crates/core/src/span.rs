//! Growing orthonormal collections near span(Θ₁..Θ_m) from the enclosure and
//! emitting a coefficient net of candidate attention matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bands::{BandSystem, SolveOptions};
use crate::error::{Error, Result};
use crate::linalg::{dot, flatten, frob, norm, unflatten};
use crate::rng::Rng;
use crate::sculptor::{AffineConstraint, ConvexBody};
use crate::serial::{matrix_from_hex, matrix_to_hex, HexF64, HexMatrix};

/// Frobenius-orthonormal list of d×d matrices, stored flattened.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OrthonormalCollection {
    d: usize,
    basis: Vec<Vec<f64>>,
}

impl OrthonormalCollection {
    pub fn new(d: usize) -> Self {
        Self { d, basis: Vec::new() }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn mats(&self) -> Vec<DMatrix<f64>> {
        self.basis.iter().map(|b| unflatten(b, self.d, self.d)).collect()
    }

    pub fn flat(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// Removes the span component from a flattened matrix (two passes).
    pub fn project_out_flat(&self, v: &mut [f64]) {
        for _ in 0..2 {
            for b in &self.basis {
                let c = dot(b, v);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
    }

    pub fn project_out(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut v = flatten(m);
        self.project_out_flat(&mut v);
        unflatten(&v, self.d, self.d)
    }

    pub fn coords(&self, m: &DMatrix<f64>) -> Vec<f64> {
        let v = flatten(m);
        self.basis.iter().map(|b| dot(b, &v)).collect()
    }

    pub fn combine(&self, coeffs: &[f64]) -> DMatrix<f64> {
        let mut v = vec![0.0; self.d * self.d];
        for (c, b) in coeffs.iter().zip(&self.basis) {
            for (x, y) in v.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        unflatten(&v, self.d, self.d)
    }

    /// Appends the normalized orthocomplement part of `m`. Returns false when
    /// that part is numerically zero.
    pub fn push(&mut self, m: &DMatrix<f64>) -> bool {
        let mut v = flatten(m);
        let scale = norm(&v);
        self.project_out_flat(&mut v);
        let n = norm(&v);
        if n <= 1e-8 * scale.max(f64::MIN_POSITIVE) || n == 0.0 {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= n);
        self.basis.push(v);
        let (ortho, unit) = self.orthonormality_error();
        assert!(ortho <= 1e-8 && unit <= 1e-10, "collection lost orthonormality");
        true
    }

    /// (max |⟨Mᵃ,Mᵇ⟩| for a≠b, max |‖Mᵃ‖ − 1|).
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let mut ortho: f64 = 0.0;
        let mut unit: f64 = 0.0;
        for (a, x) in self.basis.iter().enumerate() {
            unit = unit.max((norm(x) - 1.0).abs());
            for y in &self.basis[a + 1..] {
                ortho = ortho.max(dot(x, y).abs());
            }
        }
        (ortho, unit)
    }

    fn distance(&self, other: &Self) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        self.basis.iter().zip(&other.basis).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Options for slab feasibility queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabOptions {
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    /// Violation accepted for a returned point.
    #[serde(default = "default_slab_tol")]
    pub tol: f64,
    /// Full solves per (collection, shift) for entries not covered by the
    /// cached feasible points.
    #[serde(default = "default_max_slab_solves")]
    pub max_slab_solves: usize,
    /// Extra feasible points obtained by projecting random far-away starts.
    #[serde(default = "default_probes")]
    pub probes: usize,
}

fn default_max_sweeps() -> usize {
    3000
}
fn default_slab_tol() -> f64 {
    1e-6
}
fn default_max_slab_solves() -> usize {
    4
}
fn default_probes() -> usize {
    2
}

impl Default for SlabOptions {
    fn default() -> Self {
        Self { max_sweeps: default_max_sweeps(), tol: default_slab_tol(), max_slab_solves: default_max_slab_solves(), probes: default_probes() }
    }
}

impl SlabOptions {
    fn solve(&self) -> SolveOptions {
        SolveOptions { max_sweeps: self.max_sweeps, tol: self.tol, polish_every: 25 }
    }
}

/// (K − A) ∩ span⊥ written as bands in d² coordinates.
#[derive(Debug, Clone)]
pub struct SlabContext {
    d: usize,
    system: BandSystem,
    collection: OrthonormalCollection,
}

impl SlabContext {
    /// `None` when the shifted ball is empty (‖A‖ > radius).
    pub fn new(constraints: &[AffineConstraint], d: usize, norm_budget: f64, collection: &OrthonormalCollection, shift: &DMatrix<f64>) -> Option<Self> {
        let a2 = frob(shift).powi(2);
        let r2 = norm_budget * norm_budget - a2;
        if r2 < 0.0 {
            return None;
        }
        let shift_flat = flatten(shift);
        let mut system = BandSystem::new(d * d, Some(r2.sqrt()));
        for c in constraints {
            let mut row = c.dense();
            let off = dot(&row, &shift_flat);
            collection.project_out_flat(&mut row);
            system.push(&row, c.s - c.half_width - off, c.s + c.half_width - off);
        }
        Some(Self { d, system, collection: collection.clone() })
    }

    /// Minimum-norm point of the slice, if the solver finds one.
    pub fn min_norm(&self, opts: &SlabOptions) -> Option<Vec<f64>> {
        self.project_from(&vec![0.0; self.d * self.d], opts)
    }

    /// Projection of `start` onto the slice.
    pub fn project_from(&self, start: &[f64], opts: &SlabOptions) -> Option<Vec<f64>> {
        let p = self.system.project(start, &opts.solve());
        (p.violation <= opts.tol).then_some(p.x)
    }

    /// A point of the slice with sign·M_ij ≥ floor.
    pub fn query(&self, i: usize, j: usize, sign: f64, floor: f64, opts: &SlabOptions) -> Option<Vec<f64>> {
        let d = self.d;
        let mut e = vec![0.0; d * d];
        e[i * d + j] = sign;
        self.collection.project_out_flat(&mut e);
        let mut sys = self.system.clone();
        sys.push(&e, floor, f64::INFINITY);
        let p = sys.project(&vec![0.0; d * d], &opts.solve());
        (p.violation <= opts.tol).then_some(p.x)
    }
}

/// One membership query of the span search.
#[allow(clippy::too_many_arguments)]
pub fn feasible_point_in_slab(
    body: &ConvexBody,
    collection: &OrthonormalCollection,
    shift: &DMatrix<f64>,
    i: usize,
    j: usize,
    sign: f64,
    floor: f64,
    opts: &SlabOptions,
) -> Option<DMatrix<f64>> {
    let d = body.d;
    let ctx = SlabContext::new(&body.constraints, d, body.norm_budget, collection, shift)?;
    let p0 = ctx.min_norm(opts)?;
    if sign * p0[i * d + j] >= floor {
        return Some(unflatten(&p0, d, d));
    }
    ctx.query(i, j, sign, floor, opts).map(|x| unflatten(&x, d, d))
}

/// Floor ρ/d with ρ = √(λ/2m)·(norm_budget/2).
pub fn entry_floor(lambda: f64, m: usize, norm_budget: f64, d: usize) -> f64 {
    (lambda / (2.0 * m as f64)).sqrt() * (norm_budget / 2.0) / d as f64
}

/// Knobs for [`accumulate_matrices`] and [`net_from_enclosure`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccumulateParams {
    /// Net step over shifts in the span.
    pub zeta: f64,
    /// Entry threshold; `None` uses [`entry_floor`].
    #[serde(default)]
    pub floor: Option<f64>,
    /// λ used by the default floor.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Collections kept per round.
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Fraction of constraints held out to rank collections.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default)]
    pub slab: SlabOptions,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_cap() -> usize {
    64
}
fn default_holdout() -> f64 {
    0.2
}

impl AccumulateParams {
    pub fn with_zeta(zeta: f64) -> Self {
        Self { zeta, floor: None, lambda: default_lambda(), cap: default_cap(), holdout: default_holdout(), slab: SlabOptions::default() }
    }
}

/// Counters from one accumulation round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AccumulateStats {
    pub shifts: usize,
    pub empty_slices: usize,
    pub covered_queries: usize,
    pub full_solves: usize,
    pub found: usize,
    pub kept: usize,
}

/// Integer points k with ‖step·k‖ ≤ radius, in lexicographic order.
fn lattice_points(dim: usize, step: f64, radius: f64) -> Vec<Vec<f64>> {
    fn rec(dim: usize, step: f64, left: f64, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == dim {
            out.push(cur.clone());
            return;
        }
        let kmax = (left.max(0.0).sqrt() / step + 1e-12).floor() as i64;
        for k in -kmax..=kmax {
            let v = k as f64 * step;
            cur.push(v);
            rec(dim, step, left - v * v, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, step, radius * radius, &mut Vec::with_capacity(dim), &mut out);
    out
}

/// Number of lattice points, stopping early once `cap` is exceeded.
fn lattice_count(dim: usize, step: f64, radius: f64, cap: u128) -> u128 {
    fn rec(dim: usize, step: f64, left: f64, cap: u128) -> u128 {
        if dim == 0 {
            return 1;
        }
        let kmax = (left.max(0.0).sqrt() / step + 1e-12).floor() as i64;
        let mut total = 0u128;
        for k in -kmax..=kmax {
            let v = k as f64 * step;
            total += rec(dim - 1, step, left - v * v, cap);
            if total > cap {
                return total;
            }
        }
        total
    }
    rec(dim, step, radius * radius, cap)
}

/// RMS residual of the held-out bands centres fitted inside span(collection).
pub fn probe_drift(probe: &[AffineConstraint], collection: &OrthonormalCollection) -> f64 {
    if probe.is_empty() {
        return 0.0;
    }
    let l = collection.len();
    let s = DVector::from_iterator(probe.len(), probe.iter().map(|c| c.s));
    if l == 0 {
        return s.norm() / (probe.len() as f64).sqrt();
    }
    let a = DMatrix::from_fn(probe.len(), l, |r, c| dot(&probe[r].dense(), &collection.flat()[c]));
    let lam = crate::linalg::pinv_solve(&a, &s, 1e-12);
    (a * lam - s).norm() / (probe.len() as f64).sqrt()
}

/// Splits constraints into the solver body and the held-out probe.
pub fn split_holdout(constraints: &[AffineConstraint], holdout: f64) -> (Vec<AffineConstraint>, Vec<AffineConstraint>) {
    if holdout <= 0.0 || constraints.len() < 5 {
        return (constraints.to_vec(), Vec::new());
    }
    let every = (1.0 / holdout).round().max(2.0) as usize;
    let mut body = Vec::new();
    let mut probe = Vec::new();
    for (idx, c) in constraints.iter().enumerate() {
        if idx % every == every - 1 {
            probe.push(c.clone());
        } else {
            body.push(c.clone());
        }
    }
    (body, probe)
}

/// One round: extends every collection by every feasible point found over the
/// shift net and all (i, j, sign) queries.
pub fn accumulate_matrices(
    constraints: &[AffineConstraint],
    probe: &[AffineConstraint],
    d: usize,
    norm_budget: f64,
    collections: &[OrthonormalCollection],
    floor: f64,
    params: &AccumulateParams,
    rng: &mut Rng,
) -> (Vec<OrthonormalCollection>, AccumulateStats) {
    let mut stats = AccumulateStats::default();
    let mut out: Vec<OrthonormalCollection> = Vec::new();
    let opts = params.slab;
    for coll in collections {
        let shifts = lattice_points(coll.len(), params.zeta, norm_budget / 2.0);
        for coeffs in shifts {
            stats.shifts += 1;
            let shift = if coll.is_empty() { DMatrix::zeros(d, d) } else { coll.combine(&coeffs) };
            let Some(ctx) = SlabContext::new(constraints, d, norm_budget, coll, &shift) else {
                stats.empty_slices += 1;
                continue;
            };
            let Some(p0) = ctx.min_norm(&opts) else {
                stats.empty_slices += 1;
                continue;
            };
            let mut points = vec![p0];
            let radius = (norm_budget * norm_budget - frob(&shift).powi(2)).max(0.0).sqrt();
            for _ in 0..opts.probes {
                let mut g: Vec<f64> = (0..d * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                coll.project_out_flat(&mut g);
                let gn = norm(&g).max(f64::MIN_POSITIVE);
                g.iter_mut().for_each(|x| *x *= 2.0 * radius / gn);
                if let Some(p) = ctx.project_from(&g, &opts) {
                    points.push(p);
                }
            }
            let mut used = vec![false; points.len()];
            let mut uncovered: Vec<(f64, usize, usize, f64)> = Vec::new();
            for i in 0..d {
                for j in 0..d {
                    for sign in [1.0, -1.0] {
                        let mut best = f64::NEG_INFINITY;
                        let mut hit = None;
                        for (pi, p) in points.iter().enumerate() {
                            let v = sign * p[i * d + j];
                            if v >= floor {
                                hit = Some(pi);
                                break;
                            }
                            best = best.max(v);
                        }
                        match hit {
                            Some(pi) => {
                                used[pi] = true;
                                stats.covered_queries += 1;
                            }
                            None => uncovered.push((best, i, j, sign)),
                        }
                    }
                }
            }
            uncovered.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then((a.1, a.2).cmp(&(b.1, b.2))));
            for &(_, i, j, sign) in uncovered.iter().take(opts.max_slab_solves) {
                stats.full_solves += 1;
                if let Some(p) = ctx.query(i, j, sign, floor, &opts) {
                    points.push(p);
                    used.push(true);
                }
            }
            for (p, u) in points.iter().zip(&used) {
                if !u {
                    continue;
                }
                let mut next = coll.clone();
                if next.push(&unflatten(p, d, d)) {
                    stats.found += 1;
                    if !out.iter().any(|c| c.distance(&next) <= 1e-8) {
                        out.push(next);
                    }
                }
            }
        }
    }
    if out.len() > params.cap {
        let mut ranked: Vec<(f64, usize)> = out.iter().enumerate().map(|(i, c)| (probe_drift(probe, c), i)).collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = ranked.into_iter().take(params.cap).map(|(_, i)| i).collect();
        keep.sort_unstable();
        out = keep.into_iter().map(|i| out[i].clone()).collect();
    }
    stats.kept = out.len();
    (out, stats)
}

/// Candidate attention matrices from the coefficient net.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateNet {
    pub matrices: Vec<DMatrix<f64>>,
    pub granularity: f64,
    pub coeff_radius: f64,
    pub collections: Vec<OrthonormalCollection>,
    pub rounds: Vec<AccumulateStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateNetJson {
    granularity: HexF64,
    coeff_radius: HexF64,
    matrices: Vec<HexMatrix>,
}

impl CandidateNet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CandidateNetJson {
            granularity: HexF64(self.granularity),
            coeff_radius: HexF64(self.coeff_radius),
            matrices: self.matrices.iter().map(matrix_to_hex).collect(),
        })
        .expect("net serializes")
    }

    /// Restores the candidate list; collections and round stats are not stored.
    pub fn from_json(s: &str) -> Result<Self> {
        let j: CandidateNetJson = serde_json::from_str(s)?;
        let matrices = j.matrices.iter().map(matrix_from_hex).collect::<Result<Vec<_>>>()?;
        Ok(Self { matrices, granularity: j.granularity.0, coeff_radius: j.coeff_radius.0, collections: Vec::new(), rounds: Vec::new() })
    }
}

/// Knobs for [`net_from_enclosure`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetParams {
    pub eps_star: f64,
    #[serde(flatten)]
    pub accumulate: AccumulateParams,
    /// Coefficient radius; defaults to half the norm budget.
    #[serde(default)]
    pub coeff_radius: Option<f64>,
    #[serde(default = "default_candidate_cap")]
    pub candidate_cap: usize,
}

fn default_candidate_cap() -> usize {
    1_000_000
}

impl NetParams {
    pub fn new(eps_star: f64, zeta: f64) -> Self {
        Self { eps_star, accumulate: AccumulateParams::with_zeta(zeta), coeff_radius: None, candidate_cap: default_candidate_cap() }
    }
}

/// m accumulation rounds followed by the ε*/√m coefficient net over every
/// final collection.
pub fn net_from_enclosure(body: &ConvexBody, m: usize, params: &NetParams, rng: &mut Rng) -> Result<CandidateNet> {
    if !(params.eps_star > 0.0 && params.accumulate.zeta > 0.0) {
        return Err(Error::InvalidParam("eps_star and zeta must be positive".into()));
    }
    let d = body.d;
    let (solve_set, probe) = split_holdout(&body.constraints, params.accumulate.holdout);
    let floor = params.accumulate.floor.unwrap_or_else(|| entry_floor(params.accumulate.lambda, m, body.norm_budget, d));
    let mut collections = vec![OrthonormalCollection::new(d)];
    let mut rounds = Vec::new();
    for _ in 0..m {
        let (next, stats) = accumulate_matrices(&solve_set, &probe, d, body.norm_budget, &collections, floor, &params.accumulate, rng);
        rounds.push(stats);
        if next.is_empty() {
            break;
        }
        collections = next;
    }
    let step = params.eps_star / (m as f64).sqrt();
    let coeff_radius = params.coeff_radius.unwrap_or(body.norm_budget / 2.0);
    let mut total: u128 = 0;
    for c in &collections {
        total += lattice_count(c.len(), step, coeff_radius, params.candidate_cap as u128);
        if total > params.candidate_cap as u128 {
            return Err(Error::CombinatorialBudget { count: total, cap: params.candidate_cap });
        }
    }
    let mut matrices = Vec::new();
    for c in &collections {
        if c.is_empty() {
            continue;
        }
        for lam in lattice_points(c.len(), step, coeff_radius) {
            if lam.iter().all(|&v| v == 0.0) {
                continue;
            }
            matrices.push(c.combine(&lam));
        }
    }
    Ok(CandidateNet { matrices, granularity: step, coeff_radius, collections, rounds })
}

/// Whether some vᵢ keeps orthocomplement mass ≥ √(λ/2m)·max‖vⱼ‖ against an
/// orthonormal basis.
pub fn interesting_direction_check(vectors: &[DVector<f64>], basis: &[DVector<f64>], lam: f64) -> bool {
    let m = vectors.len();
    let v1 = vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let bound = (lam / (2.0 * m as f64)).sqrt() * v1;
    vectors.iter().any(|v| {
        let mut r = v.clone();
        for b in basis {
            r -= b * b.dot(v);
        }
        r.norm() >= bound
    })
}

/// Drift bounds υ₁..υ_rounds from υ_{ℓ+1} = 2d√(2m/λ)(Σ_{a≤ℓ} υ_a + ε).
pub fn drift_recurrence(eps: f64, d: usize, m: usize, lambda: f64, rounds: usize) -> Vec<f64> {
    let c = 2.0 * d as f64 * (2.0 * m as f64 / lambda).sqrt();
    let mut out = Vec::with_capacity(rounds);
    let mut sum = 0.0;
    for _ in 0..rounds {
        let next = c * (sum + eps);
        out.push(next);
        sum += next;
    }
    out
}

/// Coordinates of each Θᵢ in the collection's basis.
pub fn net_combo_coefficients(thetas: &[DMatrix<f64>], collection: &OrthonormalCollection) -> Vec<Vec<f64>> {
    thetas.iter().map(|t| collection.coords(t)).collect()
}
