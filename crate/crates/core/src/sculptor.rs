//! Certification of two-sparse examples, the resulting convex body of
//! attention matrices, and queries against it.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bands::{BandSystem, SolveOptions};
use crate::error::{Error, Result};
use crate::linalg::{flatten, frob, unflatten};
use crate::oracle::{map_blocks, ExampleOracle, BLOCK};
use crate::rng::{Rng, SeedTree};
use crate::serial::HexF64;

/// Band half width in units of eps.
pub const BAND_FACTOR: f64 = 7.0;

/// |uᵀΘw − s| ≤ half_width with u = X₁: and w = X₂: − X₃:.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub u: Vec<i8>,
    pub w: Vec<i8>,
    pub s: f64,
    pub half_width: f64,
}

impl AffineConstraint {
    pub fn eval(&self, theta: &DMatrix<f64>) -> f64 {
        let d = self.u.len();
        let mut acc = 0.0;
        for i in 0..d {
            let ui = self.u[i] as f64;
            for j in 0..d {
                if self.w[j] != 0 {
                    acc += ui * theta[(i, j)] * self.w[j] as f64;
                }
            }
        }
        acc
    }

    /// Amount by which Θ leaves the band (0 when inside).
    pub fn excess(&self, theta: &DMatrix<f64>) -> f64 {
        ((self.eval(theta) - self.s).abs() - self.half_width).max(0.0)
    }

    /// Row-major flattening of u wᵀ.
    pub fn dense(&self) -> Vec<f64> {
        let d = self.u.len();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (self.u[i] * self.w[j]) as f64;
            }
        }
        out
    }

    /// (u, w) up to a joint sign flip, which leaves uwᵀ unchanged.
    fn direction_key(&self) -> (Vec<i8>, Vec<i8>) {
        let flip = self.u.iter().find(|&&v| v != 0).is_some_and(|&v| v < 0);
        if flip {
            (self.u.iter().map(|v| -v).collect(), self.w.iter().map(|v| -v).collect())
        } else {
            (self.u.clone(), self.w.clone())
        }
    }
}

/// Frobenius ball of radius `norm_budget` intersected with certified bands.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexBody {
    pub d: usize,
    pub norm_budget: f64,
    pub constraints: Vec<AffineConstraint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintJson {
    u: Vec<i8>,
    w: Vec<i8>,
    s: HexF64,
    half_width: HexF64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BodyJson {
    d: usize,
    norm_budget: HexF64,
    constraints: Vec<ConstraintJson>,
}

/// Membership answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub inside: bool,
    pub violation: f64,
}

impl ConvexBody {
    pub fn new(d: usize, norm_budget: f64) -> Self {
        Self { d, norm_budget, constraints: Vec::new() }
    }

    /// Sorts constraints canonically and drops repeated directions, keeping the
    /// first occurrence in canonical order.
    ///
    /// For ±1 and {−2,0,2} vectors of moderate length, a cosine similarity of
    /// u⊗w above 1 − 1e−6 only happens for identical directions up to a joint
    /// sign, so the check is done on that canonical key.
    pub fn canonicalize(&mut self) {
        self.constraints.sort_by(|a, b| {
            (&a.u, &a.w, a.s.to_bits(), a.half_width.to_bits()).cmp(&(&b.u, &b.w, b.s.to_bits(), b.half_width.to_bits()))
        });
        let mut seen = HashSet::new();
        self.constraints.retain(|c| seen.insert(c.direction_key()));
    }

    /// Band system over row-major flattened Θ (dimension d²).
    pub fn band_system(&self) -> BandSystem {
        let mut b = BandSystem::new(self.d * self.d, Some(self.norm_budget));
        for c in &self.constraints {
            b.push(&c.dense(), c.s - c.half_width, c.s + c.half_width);
        }
        b
    }

    pub fn to_json(&self) -> String {
        let j = BodyJson {
            d: self.d,
            norm_budget: HexF64(self.norm_budget),
            constraints: self
                .constraints
                .iter()
                .map(|c| ConstraintJson { u: c.u.clone(), w: c.w.clone(), s: HexF64(c.s), half_width: HexF64(c.half_width) })
                .collect(),
        };
        serde_json::to_string_pretty(&j).expect("body serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: BodyJson = serde_json::from_str(s)?;
        let mut constraints = Vec::with_capacity(j.constraints.len());
        for c in j.constraints {
            if c.u.len() != j.d || c.w.len() != j.d {
                return Err(Error::Format("constraint length differs from d".into()));
            }
            if c.half_width.0 <= 0.0 {
                return Err(Error::Format("half_width must be positive".into()));
            }
            constraints.push(AffineConstraint { u: c.u, w: c.w, s: c.s.0, half_width: c.half_width.0 });
        }
        Ok(Self { d: j.d, norm_budget: j.norm_budget.0, constraints })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Tolerances and budget of one certification pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyParams {
    pub eps: f64,
    pub lambda_prime: f64,
    #[serde(default = "default_mass_floor")]
    pub mass_floor: f64,
    /// Number of examples to inspect.
    pub t: usize,
}

fn default_mass_floor() -> f64 {
    1.0 / 3.0
}

impl CertifyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParam("eps must be positive".into()));
        }
        if !(self.mass_floor > 0.0 && self.mass_floor <= 0.5) {
            return Err(Error::InvalidParam("mass_floor must lie in (0, 1/2]".into()));
        }
        if !(self.lambda_prime > 0.0) {
            return Err(Error::InvalidParam("lambda_prime must be positive".into()));
        }
        Ok(())
    }

    pub fn residual_threshold(&self) -> f64 {
        self.eps * self.lambda_prime.sqrt() / 2.0
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Solution of min over the simplex of ‖αA − y‖.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexFit {
    pub alpha: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Accelerated projected gradient on the k-dimensional Gram form.
pub fn simplex_regress(a: &DMatrix<f64>, y: &DVector<f64>) -> SimplexFit {
    let k = a.nrows();
    assert!(k >= 1 && a.ncols() == y.len());
    let g = a * a.transpose();
    let b = a * y;
    let lip = g.diagonal().sum().max(f64::MIN_POSITIVE);
    let lip = lip.min(g.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)).max(f64::MIN_POSITIVE);
    let grad = |x: &[f64]| -> Vec<f64> { (0..k).map(|i| (0..k).map(|j| g[(i, j)] * x[j]).sum::<f64>() - b[i]).collect() };
    let mut x = vec![1.0 / k as f64; k];
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;
    for it in 1..=10_000 {
        iterations = it;
        let gz = grad(&z);
        let step: Vec<f64> = z.iter().zip(&gz).map(|(zi, gi)| zi - gi / lip).collect();
        let xn = project_simplex(&step);
        // gradient mapping at x
        let gx = grad(&xn);
        let probe: Vec<f64> = xn.iter().zip(&gx).map(|(xi, gi)| xi - gi / lip).collect();
        let px = project_simplex(&probe);
        let gm = xn.iter().zip(&px).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() * lip;
        let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = xn.iter().zip(&x).map(|(a, b)| a + (t - 1.0) / tn * (a - b)).collect();
        x = xn;
        t = tn;
        if gm <= 1e-10 * (1.0 + y.norm()) {
            break;
        }
    }
    let fit = a.transpose() * DVector::from_column_slice(&x) - y;
    SimplexFit { alpha: x, residual: fit.norm(), iterations }
}

/// Diagnostics of one certification attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOutcome {
    pub fit: SimplexFit,
    pub residual_ok: bool,
    pub mass_ok: bool,
    pub constraint: Option<AffineConstraint>,
}

/// Simplex regression of the first output row on the rows of XŴ, then the
/// band test on tokens 2 and 3.
pub fn certify_detail(x: &DMatrix<f64>, y: &DMatrix<f64>, w_hat: &DMatrix<f64>, params: &CertifyParams) -> CertifyOutcome {
    assert!(x.nrows() >= 3, "certification needs k >= 3");
    let a = x * w_hat;
    let target = y.row(0).transpose();
    let fit = simplex_regress(&a, &target);
    let residual_ok = fit.residual < params.residual_threshold();
    let mass_ok = fit.alpha[1] >= params.mass_floor && fit.alpha[2] >= params.mass_floor;
    let constraint = (residual_ok && mass_ok).then(|| {
        let d = x.ncols();
        AffineConstraint {
            u: (0..d).map(|j| x[(0, j)] as i8).collect(),
            w: (0..d).map(|j| (x[(1, j)] - x[(2, j)]) as i8).collect(),
            s: (fit.alpha[1] / fit.alpha[2]).ln(),
            half_width: BAND_FACTOR * params.eps,
        }
    });
    CertifyOutcome { fit, residual_ok, mass_ok, constraint }
}

pub fn certify_and_extract(x: &DMatrix<f64>, y: &DMatrix<f64>, w_hat: &DMatrix<f64>, params: &CertifyParams) -> Option<AffineConstraint> {
    certify_detail(x, y, w_hat, params).constraint
}

/// Counters from one certification pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CertifyStats {
    pub examples: u64,
    pub residual_ok: u64,
    pub mass_ok: u64,
    pub emitted: u64,
    pub unique: u64,
}

/// Runs certification over `params.t` fresh examples.
pub fn lp_certify(
    oracle: &dyn ExampleOracle,
    w_hat: &DMatrix<f64>,
    params: &CertifyParams,
    norm_budget: f64,
    seeds: &SeedTree,
    name: &str,
) -> Result<(ConvexBody, CertifyStats)> {
    params.validate()?;
    let d = oracle.d();
    let parts = map_blocks(seeds, name, params.t, BLOCK, |rng, len| {
        let mut out = Vec::new();
        let mut st = CertifyStats::default();
        for _ in 0..len {
            let ex = oracle.draw(rng);
            let o = certify_detail(ex.x.matrix(), &ex.y, w_hat, params);
            st.examples += 1;
            st.residual_ok += o.residual_ok as u64;
            st.mass_ok += o.mass_ok as u64;
            if let Some(c) = o.constraint {
                st.emitted += 1;
                out.push(c);
            }
        }
        (out, st)
    });
    let mut body = ConvexBody::new(d, norm_budget);
    let mut stats = CertifyStats::default();
    for (cs, st) in parts {
        body.constraints.extend(cs);
        stats.examples += st.examples;
        stats.residual_ok += st.residual_ok;
        stats.mass_ok += st.mass_ok;
        stats.emitted += st.emitted;
    }
    body.canonicalize();
    stats.unique = body.constraints.len() as u64;
    Ok((body, stats))
}

/// Ball and band membership with tolerance 1e−9.
pub fn membership(body: &ConvexBody, theta: &DMatrix<f64>) -> Membership {
    let mut violation = (frob(theta) - body.norm_budget).max(0.0);
    for c in &body.constraints {
        violation = violation.max(c.excess(theta));
    }
    Membership { inside: violation <= 1e-9, violation }
}

/// Fraction of constraints satisfied by Θ (bands only).
pub fn satisfied_fraction(body: &ConvexBody, theta: &DMatrix<f64>) -> f64 {
    if body.constraints.is_empty() {
        return 1.0;
    }
    let ok = body.constraints.iter().filter(|c| c.excess(theta) <= 1e-9).count();
    ok as f64 / body.constraints.len() as f64
}

/// Result of the minimum-norm solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MinNormPoint {
    pub theta: DMatrix<f64>,
    pub violation: f64,
    pub sweeps: usize,
    pub polished: bool,
}

/// Minimum-Frobenius-norm point of the body.
pub fn min_norm_point(body: &ConvexBody, tol: f64) -> Result<MinNormPoint> {
    min_norm_point_with(body, &SolveOptions { tol, ..SolveOptions::default() })
}

pub fn min_norm_point_with(body: &ConvexBody, opts: &SolveOptions) -> Result<MinNormPoint> {
    let d = body.d;
    let sys = body.band_system();
    let p = sys.project(&vec![0.0; d * d], opts);
    if p.violation > opts.tol {
        return Err(Error::Infeasible(format!("no point with violation <= {:.1e} after {} sweeps (best {:.3e})", opts.tol, p.sweeps, p.violation)));
    }
    Ok(MinNormPoint { theta: unflatten(&p.x, d, d), violation: p.violation, sweeps: p.sweeps, polished: p.polished })
}

/// Ridge least-squares fit of the band centres, min Σ(uᵀΘw − s)² + ridge‖Θ‖².
///
/// Used as the direction proxy when the bands are too wide to exclude the
/// origin.
pub fn band_center_fit(body: &ConvexBody, ridge: f64) -> DMatrix<f64> {
    let d = body.d;
    let n = d * d;
    if body.constraints.is_empty() {
        return DMatrix::zeros(d, d);
    }
    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for c in &body.constraints {
        let a = c.dense();
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            r[i] += a[i] * c.s;
            for j in 0..n {
                g[(i, j)] += a[i] * a[j];
            }
        }
    }
    for i in 0..n {
        g[(i, i)] += ridge;
    }
    let sol = g.clone().cholesky().map(|ch| ch.solve(&r)).unwrap_or_else(|| g.lu().solve(&r).unwrap_or_else(|| DVector::zeros(n)));
    unflatten(sol.as_slice(), d, d)
}

/// The weighted average (1/Z)Σ vᵢ/‖vᵢ‖² with Z = Σ 1/‖vᵢ‖².
pub fn weighted_average(vectors: &[DVector<f64>]) -> DVector<f64> {
    let z: f64 = vectors.iter().map(|v| 1.0 / v.norm_squared()).sum();
    let mut out = DVector::zeros(vectors[0].len());
    for v in vectors {
        out += v / (v.norm_squared() * z);
    }
    out
}

/// Outcome of [`affine_hull_norm_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineHullCheck {
    pub holds: bool,
    /// Largest observed (‖v−v*‖²/‖v₁‖² − η)/(κ√m/α^{3/2}); 0 when never positive.
    pub fitted_constant: f64,
    pub trials: usize,
}

/// Samples affine combinations v with ‖v‖² ≤ (1+η)‖v*‖² for random η ∈ (0,1)
/// and checks ‖v − v*‖² ≤ (η + C·κ√m/α^{3/2})·‖v₁‖² with C = `constant`.
pub fn affine_hull_norm_check(
    vectors: &[DVector<f64>],
    kappa: f64,
    alpha: f64,
    constant: f64,
    trials: usize,
    rng: &mut Rng,
) -> AffineHullCheck {
    let m = vectors.len();
    let vstar = weighted_average(vectors);
    let v1 = vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let slack_unit = kappa * (m as f64).sqrt() / alpha.powf(1.5);
    let z: f64 = vectors.iter().map(|v| 1.0 / v.norm_squared()).sum();
    let lam_star: Vec<f64> = vectors.iter().map(|v| 1.0 / (v.norm_squared() * z)).collect();
    let mut fitted: f64 = 0.0;
    let mut holds = true;
    for _ in 0..trials {
        let eta: f64 = rng.random_range(1e-6..1.0);
        let v = if m == 1 {
            vstar.clone()
        } else {
            let mut delta: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mean = delta.iter().sum::<f64>() / m as f64;
            delta.iter_mut().for_each(|x| *x -= mean);
            let dir = vectors.iter().zip(&delta).fold(DVector::zeros(vstar.len()), |acc, (v, dl)| acc + v * *dl);
            // ‖v* + t·dir‖² = (1+η)‖v*‖²
            let (qa, qb, qc) = (dir.norm_squared(), 2.0 * vstar.dot(&dir), -eta * vstar.norm_squared());
            if qa <= 0.0 {
                vstar.clone()
            } else {
                let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
                let (lo, hi) = ((-qb - disc) / (2.0 * qa), (-qb + disc) / (2.0 * qa));
                let t = lo + (hi - lo) * rng.random::<f64>();
                let lam: Vec<f64> = lam_star.iter().zip(&delta).map(|(l, dl)| l + t * dl).collect();
                vectors.iter().zip(&lam).fold(DVector::zeros(vstar.len()), |acc, (v, l)| acc + v * *l)
            }
        };
        let excess = (v.clone() - &vstar).norm_squared() / (v1 * v1) - eta;
        if excess > 1e-12 {
            if slack_unit > 0.0 {
                fitted = fitted.max(excess / slack_unit);
            } else {
                holds = false;
            }
        }
    }
    if fitted > constant {
        holds = false;
    }
    AffineHullCheck { holds, fitted_constant: fitted, trials }
}

/// Load a body from disk.
pub fn load_body(path: &Path) -> Result<ConvexBody> {
    ConvexBody::from_json(&std::fs::read_to_string(path)?)
}

/// Θ flattened in the coordinates used by [`ConvexBody::band_system`].
pub fn theta_coords(theta: &DMatrix<f64>) -> Vec<f64> {
    flatten(theta)
}
