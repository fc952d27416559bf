//! Projection onto an intersection of slabs and a Euclidean ball.
//!
//! A primal-dual interior-point solve is tried first. Dykstra's alternating
//! projections with scalar correction terms per slab, followed by an
//! active-set polish, serve as the fallback.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{axpy, dot, norm};

/// Slabs lo ≤ ⟨a_j, x⟩ ≤ hi plus an optional ball ‖x‖ ≤ radius.
#[derive(Debug, Clone)]
pub struct BandSystem {
    dim: usize,
    rows: Vec<f64>,
    norms2: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    radius: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_sweeps: usize,
    pub tol: f64,
    /// Attempt an active-set polish every this many sweeps.
    pub polish_every: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_sweeps: 20_000, tol: 1e-9, polish_every: 25 }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub x: Vec<f64>,
    pub violation: f64,
    pub sweeps: usize,
    /// True when the exact active-set solution was accepted.
    pub polished: bool,
}

impl BandSystem {
    pub fn new(dim: usize, radius: Option<f64>) -> Self {
        Self { dim, rows: Vec::new(), norms2: Vec::new(), lo: Vec::new(), hi: Vec::new(), radius }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn radius(&self) -> Option<f64> {
        self.radius
    }

    /// Adds a slab. Rows with zero norm are kept only as a feasibility check on
    /// the interval (they cannot be satisfied by moving x).
    pub fn push(&mut self, a: &[f64], lo: f64, hi: f64) {
        assert_eq!(a.len(), self.dim);
        self.rows.extend_from_slice(a);
        self.norms2.push(dot(a, a));
        self.lo.push(lo);
        self.hi.push(hi);
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.dim..(j + 1) * self.dim]
    }

    pub fn bounds(&self, j: usize) -> (f64, f64) {
        (self.lo[j], self.hi[j])
    }

    /// Largest amount by which x leaves a slab or the ball.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.len() {
            let v = dot(self.row(j), x);
            worst = worst.max(self.lo[j] - v).max(v - self.hi[j]);
        }
        if let Some(r) = self.radius {
            worst = worst.max(norm(x) - r);
        }
        worst
    }

    /// Trivially empty when some slab has lo > hi or a zero row excludes 0.
    fn trivially_empty(&self, tol: f64) -> bool {
        (0..self.len()).any(|j| self.lo[j] > self.hi[j] + tol || (self.norms2[j] == 0.0 && (self.lo[j] > tol || self.hi[j] < -tol)))
    }

    /// Euclidean projection of `start` onto the intersection.
    pub fn project(&self, start: &[f64], opts: &SolveOptions) -> Projection {
        if self.trivially_empty(opts.tol) {
            let x = start.to_vec();
            let violation = self.violation(&x);
            return Projection { x, violation, sweeps: 0, polished: false };
        }
        if let Some(p) = self.project_interior(start, opts.tol) {
            return p;
        }
        self.project_dykstra(start, opts)
    }

    /// Interior-point projection; `None` when it does not reach `tol`.
    pub fn project_interior(&self, start: &[f64], tol: f64) -> Option<Projection> {
        let (x, mult, iters) = self.interior_point(start, None)?;
        let inside = self.radius.is_none_or(|r| norm(&x) <= r);
        if inside {
            if let Some(p) = self.polish(start, &mult, tol) {
                return Some(Projection { sweeps: iters, ..p });
            }
        }
        let x = if inside { x } else { self.interior_point(start, self.radius)?.0 };
        let violation = self.violation(&x);
        (violation <= tol).then_some(Projection { x, violation, sweeps: iters, polished: true })
    }

    /// Mehrotra predictor-corrector for min ½‖x − x₀‖² over the slabs and,
    /// when `ball` is set, (‖x‖² − r²)/(2r) ≤ 0.
    fn interior_point(&self, x0: &[f64], ball: Option<f64>) -> Option<(Vec<f64>, Vec<f64>, usize)> {
        let (m, n) = (self.len(), self.dim);
        let a = DMatrix::from_row_slice(m, n, &self.rows);
        let x0v = DVector::from_column_slice(x0);
        // slots 0..m are upper faces ⟨a,x⟩ ≤ hi, m..2m lower faces −⟨a,x⟩ ≤ −lo
        let live: Vec<bool> = (0..2 * m).map(|k| if k < m { self.hi[k].is_finite() && self.norms2[k] > 0.0 } else { self.lo[k - m].is_finite() && self.norms2[k - m] > 0.0 }).collect();
        let h: Vec<f64> = (0..2 * m).map(|k| if !live[k] { 0.0 } else if k < m { self.hi[k] } else { -self.lo[k - m] }).collect();
        let nlive = live.iter().filter(|&&l| l).count() + ball.is_some() as usize;
        if nlive == 0 {
            return Some((x0.to_vec(), vec![0.0; m], 0));
        }
        let scale = 1.0 + x0v.amax() + h.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let mut x = x0v.clone();
        let ax = &a * &x;
        let mut s: Vec<f64> = (0..2 * m).map(|k| if !live[k] { 1.0 } else { (h[k] - gval(&ax, k, m)).max(1.0) }).collect();
        let mut z: Vec<f64> = live.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let (mut sb, mut zb) = match ball {
            Some(r) => ((-(x.norm_squared() - r * r) / (2.0 * r)).max(1.0), 1.0),
            None => (1.0, 0.0),
        };
        for iter in 1..=100 {
            let ax = &a * &x;
            // residuals
            let mut zdiff = DVector::zeros(m);
            for j in 0..m {
                zdiff[j] = z[j] - z[j + m];
            }
            let rd = (&x - &x0v) + a.transpose() * &zdiff + &x * (zb / ball.unwrap_or(1.0));
            let rp: Vec<f64> = (0..2 * m).map(|k| if live[k] { gval(&ax, k, m) + s[k] - h[k] } else { 0.0 }).collect();
            let rpb = ball.map(|r| (x.norm_squared() - r * r) / (2.0 * r) + sb).unwrap_or(0.0);
            let gap: f64 = (0..2 * m).filter(|&k| live[k]).map(|k| s[k] * z[k]).sum::<f64>() + if ball.is_some() { sb * zb } else { 0.0 };
            let mu = gap / nlive as f64;
            let rp_max = rp.iter().fold(rpb.abs(), |acc, v| acc.max(v.abs()));
            if rd.amax() <= 1e-8 * scale && rp_max <= 1e-11 * scale && mu <= 1e-12 * scale {
                let act = |k: usize| if live[k] && z[k] > s[k] { z[k] } else { 0.0 };
                return Some((x.as_slice().to_vec(), (0..m).map(|j| act(j) - act(j + m)).collect(), iter));
            }
            // Newton matrix
            let w: Vec<f64> = (0..2 * m).map(|k| if live[k] { z[k] / s[k] } else { 0.0 }).collect();
            let wb = if ball.is_some() { zb / sb } else { 0.0 };
            let r_ball = ball.unwrap_or(1.0);
            let mut aw = a.clone();
            for j in 0..m {
                let dj = w[j] + w[j + m];
                aw.row_mut(j).scale_mut(dj);
            }
            let mut hm = a.transpose() * aw;
            let grad_b = &x / r_ball;
            for i in 0..n {
                hm[(i, i)] += 1.0 + zb / r_ball;
            }
            if ball.is_some() {
                hm += &grad_b * grad_b.transpose() * wb;
            }
            let chol = hm.cholesky()?;
            let solve = |rc: &[f64], rcb: f64| -> (DVector<f64>, Vec<f64>, Vec<f64>, f64, f64) {
                // v = W(r_p − r_c/z)
                let v: Vec<f64> = (0..2 * m).map(|k| if live[k] { w[k] * (rp[k] - rc[k] / z[k]) } else { 0.0 }).collect();
                let mut gtv = DVector::zeros(m);
                for j in 0..m {
                    gtv[j] = v[j] - v[j + m];
                }
                let vb = if ball.is_some() { wb * (rpb - rcb / zb) } else { 0.0 };
                let rhs = -&rd - a.transpose() * gtv - &grad_b * vb;
                let dx = chol.solve(&rhs);
                let adx = &a * &dx;
                let mut dz = vec![0.0; 2 * m];
                let mut ds = vec![0.0; 2 * m];
                for k in 0..2 * m {
                    if live[k] {
                        dz[k] = w[k] * (gval(&adx, k, m) + rp[k] - rc[k] / z[k]);
                        ds[k] = -(rc[k] + s[k] * dz[k]) / z[k];
                    }
                }
                let (mut dzb, mut dsb) = (0.0, 0.0);
                if ball.is_some() {
                    dzb = wb * (grad_b.dot(&dx) + rpb - rcb / zb);
                    dsb = -(rcb + sb * dzb) / zb;
                }
                (dx, dz, ds, dzb, dsb)
            };
            let max_step = |dz: &[f64], ds: &[f64], dzb: f64, dsb: f64| -> f64 {
                let mut alpha: f64 = 1.0;
                for k in 0..2 * m {
                    if live[k] {
                        if ds[k] < 0.0 {
                            alpha = alpha.min(-s[k] / ds[k]);
                        }
                        if dz[k] < 0.0 {
                            alpha = alpha.min(-z[k] / dz[k]);
                        }
                    }
                }
                if ball.is_some() {
                    if dsb < 0.0 {
                        alpha = alpha.min(-sb / dsb);
                    }
                    if dzb < 0.0 {
                        alpha = alpha.min(-zb / dzb);
                    }
                }
                alpha
            };
            let rc_aff: Vec<f64> = (0..2 * m).map(|k| s[k] * z[k]).collect();
            let (_, dz_a, ds_a, dzb_a, dsb_a) = solve(&rc_aff, sb * zb);
            let alpha_aff = max_step(&dz_a, &ds_a, dzb_a, dsb_a);
            let mut gap_aff: f64 = (0..2 * m).filter(|&k| live[k]).map(|k| (s[k] + alpha_aff * ds_a[k]) * (z[k] + alpha_aff * dz_a[k])).sum();
            if ball.is_some() {
                gap_aff += (sb + alpha_aff * dsb_a) * (zb + alpha_aff * dzb_a);
            }
            let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);
            let rc: Vec<f64> = (0..2 * m).map(|k| s[k] * z[k] + ds_a[k] * dz_a[k] - sigma * mu).collect();
            let rcb = sb * zb + dsb_a * dzb_a - sigma * mu;
            let (dx, dz, ds, dzb, dsb) = solve(&rc, rcb);
            let alpha = (0.99 * max_step(&dz, &ds, dzb, dsb)).min(1.0);
            if !alpha.is_finite() || alpha < 1e-12 {
                return None;
            }
            x += dx * alpha;
            for k in 0..2 * m {
                if live[k] {
                    s[k] += alpha * ds[k];
                    z[k] += alpha * dz[k];
                }
            }
            if ball.is_some() {
                sb += alpha * dsb;
                zb += alpha * dzb;
            }
        }
        None
    }

    fn project_dykstra(&self, start: &[f64], opts: &SolveOptions) -> Projection {
        let n = self.len();
        let mut x = start.to_vec();
        let mut c = vec![0.0; n];
        let mut pball = vec![0.0; self.dim];
        let mut prev = x.clone();
        let mut best: Option<Projection> = None;
        for sweep in 1..=opts.max_sweeps {
            for j in 0..n {
                let nj = self.norms2[j];
                if nj == 0.0 {
                    continue;
                }
                let a = self.row(j);
                let val = dot(a, &x) + c[j] * nj;
                let t = val.clamp(self.lo[j], self.hi[j]);
                let new_c = (val - t) / nj;
                let step = c[j] - new_c;
                if step != 0.0 {
                    axpy(step, a, &mut x);
                }
                c[j] = new_c;
            }
            if let Some(r) = self.radius {
                let y: Vec<f64> = x.iter().zip(&pball).map(|(a, b)| a + b).collect();
                let ny = norm(&y);
                let scale = if ny > r { r / ny } else { 1.0 };
                for i in 0..self.dim {
                    x[i] = y[i] * scale;
                    pball[i] = y[i] - x[i];
                }
            }
            let change = x.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prev.copy_from_slice(&x);
            if sweep % opts.polish_every == 0 || sweep == opts.max_sweeps {
                let ball_active = norm(&pball) > 0.0;
                if !ball_active {
                    if let Some(p) = self.polish(start, &c, opts.tol) {
                        return Projection { sweeps: sweep, ..p };
                    }
                }
                let violation = self.violation(&x);
                if violation <= opts.tol && change <= opts.tol * (1.0 + norm(&x)) {
                    return Projection { x, violation, sweeps: sweep, polished: false };
                }
                if best.as_ref().is_none_or(|b| violation < b.violation) {
                    best = Some(Projection { x: x.clone(), violation, sweeps: sweep, polished: false });
                }
            }
        }
        let mut out = best.unwrap_or_else(|| Projection { violation: self.violation(&x), x, sweeps: opts.max_sweeps, polished: false });
        out.sweeps = opts.max_sweeps;
        out
    }

    /// Exact projection onto the affine set of active slab faces suggested by
    /// the multipliers `c`; `None` unless it satisfies KKT and feasibility.
    fn polish(&self, start: &[f64], c: &[f64], tol: f64) -> Option<Projection> {
        let scale = c.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            let violation = self.violation(start);
            return (violation <= tol).then(|| Projection { x: start.to_vec(), violation, sweeps: 0, polished: true });
        }
        let active: Vec<usize> = (0..self.len()).filter(|&j| c[j].abs() > 1e-14 * scale).collect();
        if active.len() > self.dim {
            return None;
        }
        let na = active.len();
        let mut g = DMatrix::zeros(na, na);
        let mut rhs = DVector::zeros(na);
        for (p, &j) in active.iter().enumerate() {
            let bound = if c[j] > 0.0 { self.hi[j] } else { self.lo[j] };
            rhs[p] = bound - dot(self.row(j), start);
            for (q, &l) in active.iter().enumerate().skip(p) {
                let v = dot(self.row(j), self.row(l));
                g[(p, q)] = v;
                g[(q, p)] = v;
            }
        }
        let mu = g.clone().cholesky().map(|ch| ch.solve(&rhs)).or_else(|| g.lu().solve(&rhs))?;
        // moving from start along +a_j lowers nothing: an upper face needs mu ≤ 0
        for (p, &j) in active.iter().enumerate() {
            let wrong = if c[j] > 0.0 { mu[p] > 0.0 } else { mu[p] < 0.0 };
            if wrong && mu[p].abs() > 1e-9 * (1.0 + mu.amax()) {
                return None;
            }
        }
        let mut x = start.to_vec();
        for (p, &j) in active.iter().enumerate() {
            axpy(mu[p], self.row(j), &mut x);
        }
        let violation = self.violation(&x);
        (violation <= tol).then_some(Projection { x, violation, sweeps: 0, polished: true })
    }
}

fn gval(ax: &DVector<f64>, k: usize, m: usize) -> f64 {
    if k < m {
        ax[k]
    } else {
        -ax[k - m]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_equality_has_closed_form() {
        let mut b = BandSystem::new(3, None);
        let a = [1.0, 2.0, -2.0];
        b.push(&a, 10.0, 10.0);
        let p = b.project(&[0.0; 3], &SolveOptions::default());
        for i in 0..3 {
            assert!((p.x[i] - 10.0 * a[i] / 9.0).abs() < 1e-10);
        }
    }

    #[test]
    fn box_projection() {
        let mut b = BandSystem::new(2, None);
        b.push(&[1.0, 0.0], -1.0, 1.0);
        b.push(&[0.0, 1.0], -1.0, 1.0);
        let p = b.project(&[3.0, 0.5], &SolveOptions::default());
        assert!((p.x[0] - 1.0).abs() < 1e-10 && (p.x[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn ball_and_halfspace() {
        let mut b = BandSystem::new(2, Some(1.0));
        b.push(&[1.0, 1.0], 1.0, f64::INFINITY);
        let p = b.project(&[0.0, 0.0], &SolveOptions::default());
        assert!((p.x[0] - 0.5).abs() < 1e-8 && (p.x[1] - 0.5).abs() < 1e-8);
        let mut b = BandSystem::new(2, Some(1.0));
        b.push(&[1.0, 0.0], 2.0, f64::INFINITY);
        let p = b.project(&[0.0, 0.0], &SolveOptions { max_sweeps: 500, ..Default::default() });
        assert!(p.violation > 0.5);
    }

    #[test]
    fn interior_and_dykstra_agree() {
        let mut b = BandSystem::new(3, Some(3.0));
        b.push(&[1.0, 1.0, 0.0], 2.0, 2.5);
        b.push(&[0.0, 1.0, -1.0], -1.0, 1.0);
        b.push(&[1.0, 0.0, 0.0], f64::NEG_INFINITY, 0.5);
        for start in [[0.0, 0.0, 0.0], [10.0, -4.0, 7.0]] {
            let ip = b.project_interior(&start, 1e-9).unwrap();
            let dy = b.project_dykstra(&start, &SolveOptions { polish_every: usize::MAX, ..Default::default() });
            for i in 0..3 {
                assert!((ip.x[i] - dy.x[i]).abs() < 1e-6, "{:?} {:?}", ip.x, dy.x);
            }
        }
    }
}
