//! End-to-end learner: configuration, the six phases, per-phase reports and
//! metric emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionLayer;
use crate::error::{Error, Result};
use crate::instance::{generate_instance_with, InstanceFile, InstanceParams};
use crate::linalg::frob;
use crate::moment::{estimate_projection_sum, SumEstimate};
use crate::oracle::{ExampleOracle, LayerOracle};
use crate::refiner::{collect_margin_events, refine_sum, MarginEventConfig};
use crate::regress::{draw_examples, fit_value_matrices, layer_from, loss_on, select_best, validation_size, zero_loss};
use crate::rng::SeedTree;
use crate::sculptor::{band_center_fit, lp_certify, min_norm_point_with, satisfied_fraction, CertifyParams, ConvexBody};
use crate::bands::SolveOptions;
use crate::span::{net_from_enclosure, NetParams};

/// Phase-1 budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentConfig {
    pub n: usize,
}

/// Phase-6 budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub n: usize,
    /// Bound on each stacked column ‖w‖; defaults to √m.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Validation size; defaults to max(10³, 10·candidates).
    #[serde(default)]
    pub n_val: Option<usize>,
    /// Cap on candidate tuples.
    #[serde(default = "default_tuple_cap")]
    pub tuple_cap: usize,
}

fn default_tuple_cap() -> usize {
    100_000
}

/// Tolerances of the minimum-norm solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl SolverConfig {
    fn options(&self) -> SolveOptions {
        SolveOptions { max_sweeps: self.max_sweeps, tol: self.tol, ..SolveOptions::default() }
    }
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub instance: InstanceParams,
    pub k: usize,
    /// Replace the generated layer by the all-zero layer.
    #[serde(default)]
    pub zero_instance: bool,
    pub phase1: MomentConfig,
    pub crude: CertifyParams,
    pub refine: MarginEventConfig,
    pub tight: CertifyParams,
    /// Ball radius of the enclosure; `None` tries 2^j ≥ 2.5‖Θ̂*‖ and the next power.
    #[serde(default)]
    pub norm_budget: Option<f64>,
    pub net: NetParams,
    pub regression: RegressionConfig,
    pub n_test: usize,
    pub solver: SolverConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Desk-scale defaults for m = 1.
    pub fn desk(m: usize, d: usize, k: usize, theta_norm: f64) -> Self {
        let lambda_prime = 1.0;
        Self {
            seed: 0,
            instance: InstanceParams { m, d, theta_norm, lambda_prime: 0.5 },
            k,
            zero_instance: false,
            phase1: MomentConfig { n: 100_000 },
            crude: CertifyParams { eps: 0.5, lambda_prime, mass_floor: 1.0 / 3.0, t: 100_000 },
            refine: MarginEventConfig { c: None, proxy_norm: None, n: 1000, max_draws: 1_000_000, pilot: 20_000 },
            tight: CertifyParams { eps: 0.03, lambda_prime, mass_floor: 1.0 / 3.0, t: 300_000 },
            norm_budget: None,
            net: NetParams::new(1.0, 0.5),
            regression: RegressionConfig { n: 2000, radius: None, n_val: None, tuple_cap: default_tuple_cap() },
            n_test: 2000,
            solver: SolverConfig { tol: 1e-9, max_sweeps: 20_000 },
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.instance;
        if p.m == 0 || p.d == 0 {
            return Err(Error::InvalidParam("m and d must be positive".into()));
        }
        if self.k < 3 {
            return Err(Error::InvalidParam("k must be at least 3".into()));
        }
        if !(p.theta_norm >= 0.0) {
            return Err(Error::InvalidParam("theta_norm must be nonnegative".into()));
        }
        self.crude.validate()?;
        self.tight.validate()?;
        if let Some(b) = self.norm_budget {
            if !(b > 0.0) {
                return Err(Error::InvalidParam("norm_budget must be positive".into()));
            }
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::InvalidParam("solver tol must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One phase's bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub phase: String,
    pub wall_ms: f64,
    pub samples: u64,
    pub metrics: BTreeMap<String, f64>,
}

/// Column order of the metrics CSV.
pub const CSV_HEADER: &str = "seed,phase,samples,metrics";

/// One row per phase; metrics as `key=value` pairs sorted by key. Wall time
/// is left out so that repeated runs give identical files.
pub fn reports_to_csv(seed: u64, reports: &[PhaseReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
        out.push_str(&format!("{seed},{},{},{}\n", r.phase, r.samples, metrics.join(";")));
    }
    out
}

/// Result of [`run_learn`].
#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub hypothesis: AttentionLayer,
    pub truth: AttentionLayer,
    pub reports: Vec<PhaseReport>,
    pub phase1: SumEstimate,
    pub refined_w: DMatrix<f64>,
    pub tight_body: ConvexBody,
    pub min_norm: Option<DMatrix<f64>>,
    pub candidates: Vec<DMatrix<f64>>,
    pub test_loss: f64,
    pub baseline_loss: f64,
}

impl LearnOutcome {
    pub fn metric(&self, phase: &str, key: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.phase == phase).and_then(|r| r.metrics.get(key).copied())
    }

    pub fn csv(&self, seed: u64) -> String {
        reports_to_csv(seed, &self.reports)
    }
}

/// ‖A/‖A‖ − B/‖B‖‖_F, or 2 when either is zero.
pub fn direction_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (na, nb) = (frob(a), frob(b));
    if na == 0.0 || nb == 0.0 {
        return 2.0;
    }
    frob(&(a / na - b / nb))
}

fn relative_error(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let n = frob(truth);
    if n == 0.0 {
        frob(est)
    } else {
        frob(&(est - truth)) / n
    }
}

struct Tracker<'a> {
    oracle: &'a LayerOracle,
    last_draws: u64,
    reports: &'a mut Vec<PhaseReport>,
}

impl<'a> Tracker<'a> {
    fn phase(&mut self, name: &str, start: Instant, metrics: BTreeMap<String, f64>) {
        let now = self.oracle.draws();
        self.reports.push(PhaseReport { phase: name.into(), wall_ms: start.elapsed().as_secs_f64() * 1e3, samples: now - self.last_draws, metrics });
        self.last_draws = now;
    }
}

macro_rules! metrics {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut m = BTreeMap::new();
        $(m.insert($k.to_string(), $v as f64);)*
        m
    }};
}

/// Generates the instance from `config.seed` and learns it.
pub fn run_learn(config: &RunConfig) -> Result<LearnOutcome> {
    config.validate()?;
    run_learn_on(instance_for(config), config)
}

/// Ground-truth layer drawn from the "instance" stream of the root seed.
pub fn instance_for(config: &RunConfig) -> AttentionLayer {
    if config.zero_instance {
        AttentionLayer::zero(config.instance.m, config.instance.d)
    } else {
        generate_instance_with(&config.instance, &mut SeedTree::new(config.seed).stream("instance"))
    }
}

/// Candidate budgets for the enclosure ball.
fn budget_grid(config: &RunConfig, min_norm: f64) -> Vec<f64> {
    if let Some(b) = config.norm_budget {
        return vec![b];
    }
    let base = (2.5 * min_norm).max(1.0);
    let r0 = 2f64.powi(base.log2().ceil() as i32);
    vec![r0, 2.0 * r0]
}

/// All multisets of size m from n items, in lexicographic order.
fn tuples(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, m: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(n, m, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, m, 0, &mut Vec::new(), &mut out);
    out
}

fn multiset_count(n: usize, m: usize) -> u128 {
    // C(n + m − 1, m)
    let mut c: u128 = 1;
    for i in 0..m as u128 {
        c = c * (n as u128 + i) / (i + 1);
    }
    c
}

/// Learns from a given ground-truth layer (used for labels and diagnostics).
pub fn run_learn_on(truth: AttentionLayer, config: &RunConfig) -> Result<LearnOutcome> {
    let mut reports = Vec::new();
    run_learn_tracked(truth, config, &mut reports)
}

/// As [`run_learn_on`], appending each phase report to `reports` as soon as
/// the phase finishes, so that a failing run leaves the completed phases.
pub fn run_learn_tracked(truth: AttentionLayer, config: &RunConfig, reports: &mut Vec<PhaseReport>) -> Result<LearnOutcome> {
    config.validate()?;
    let d = truth.d();
    let m = config.instance.m;
    if truth.m() != m || d != config.instance.d {
        return Err(Error::Dimension("instance does not match the configured m and d".into()));
    }
    let seeds = SeedTree::new(config.seed);
    let oracle = LayerOracle::new(truth.clone(), config.k);
    let mut tr = Tracker { oracle: &oracle, last_draws: 0, reports };
    let w_sum = truth.w_sum();
    let thetas = truth.thetas();
    let theta1 = thetas.iter().cloned().max_by(|a, b| frob(a).partial_cmp(&frob(b)).expect("finite")).expect("m >= 1");
    let opts = config.solver.options();

    // phase 1
    let t = Instant::now();
    let est = estimate_projection_sum(&oracle, config.phase1.n, &seeds, "phase1");
    let err1 = relative_error(&est.w_hat, &w_sum);
    tr.phase("phase1", t, metrics! { "w_error" => frob(&(&est.w_hat - &w_sum)), "w_rel_error" => err1 });

    // phase 2
    let t = Instant::now();
    let crude_budget = config.norm_budget.unwrap_or(1e6);
    let (crude, st) = lp_certify(&oracle, &est.w_hat, &config.crude, crude_budget, &seeds, "phase2")?;
    let crude_min = if crude.constraints.is_empty() { Some(DMatrix::zeros(d, d)) } else { min_norm_point_with(&crude, &opts).ok().map(|p| p.theta) };
    let (proxy, proxy_kind) = match &crude_min {
        Some(p) if frob(p) > 1e-9 => (p.clone(), 0.0),
        _ => (band_center_fit(&crude, 1e-6), 1.0),
    };
    tr.phase(
        "phase2",
        t,
        metrics! {
            "constraints" => st.unique, "emitted" => st.emitted, "residual_ok" => st.residual_ok,
            "proxy_band_center" => proxy_kind, "proxy_norm" => frob(&proxy),
            "proxy_direction_error" => direction_distance(&proxy, &theta1),
            "theta1_satisfied" => satisfied_fraction(&crude, &theta1),
        },
    );

    // phase 3
    let t = Instant::now();
    let (refined, refine_metrics) = if frob(&proxy) > 0.0 {
        match collect_margin_events(&oracle, &proxy, &config.refine, &seeds, "phase3").and_then(|ev| refine_sum(&ev.events).map(|r| (ev, r))) {
            Ok((ev, r)) => {
                let e = relative_error(&r.w_hat, &w_sum);
                let purity = crate::refiner::pattern_purity_diagnostic(&ev.events, &truth, 0.1);
                (
                    r.w_hat.clone(),
                    metrics! {
                        "fallback" => 0, "c" => ev.c, "rate" => ev.rate, "events" => ev.events.len(),
                        "sigma_min" => r.sigma_min, "rank_warning" => r.rank_warning as u8,
                        "w_error" => frob(&(&r.w_hat - &w_sum)), "w_rel_error" => e, "purity" => purity,
                    },
                )
            }
            Err(_) => (est.w_hat.clone(), metrics! { "fallback" => 1, "w_error" => frob(&(&est.w_hat - &w_sum)), "w_rel_error" => err1 }),
        }
    } else {
        (est.w_hat.clone(), metrics! { "fallback" => 1, "w_error" => frob(&(&est.w_hat - &w_sum)), "w_rel_error" => err1 })
    };
    tr.phase("phase3", t, refine_metrics);

    // phase 4
    let t = Instant::now();
    let (mut tight, st) = lp_certify(&oracle, &refined, &config.tight, crude_budget, &seeds, "phase4")?;
    let tight_min = if tight.constraints.is_empty() { None } else { min_norm_point_with(&tight, &opts).ok() };
    let min_norm = tight_min.as_ref().map(|p| p.theta.clone());
    let mn_norm = min_norm.as_ref().map(frob).unwrap_or(0.0);
    tr.phase(
        "phase4",
        t,
        metrics! {
            "constraints" => st.unique, "emitted" => st.emitted,
            "theta1_satisfied" => satisfied_fraction(&tight, &theta1),
            "min_norm_found" => min_norm.is_some() as u8, "min_norm_norm" => mn_norm,
            "min_norm_direction_error" => min_norm.as_ref().map(|p| direction_distance(p, &theta1)).unwrap_or(2.0),
            "min_norm_sweeps" => tight_min.as_ref().map(|p| p.sweeps).unwrap_or(0),
        },
    );

    // phase 5
    let t = Instant::now();
    let mut candidates: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, d)];
    let mut rounds_found = 0usize;
    let budgets = budget_grid(config, mn_norm);
    if !tight.constraints.is_empty() {
        for (bi, &budget) in budgets.iter().enumerate() {
            tight.norm_budget = budget;
            let mut rng = seeds.substream("phase5", bi as u64);
            let net = net_from_enclosure(&tight, m, &config.net, &mut rng)?;
            rounds_found += net.rounds.iter().map(|r| r.found).sum::<usize>();
            for c in net.matrices {
                if !candidates.iter().any(|x| frob(&(x - &c)) <= 1e-12) {
                    candidates.push(c);
                }
            }
        }
        tight.norm_budget = budgets[0];
    }
    let best_dist: Vec<f64> =
        thetas.iter().map(|th| candidates.iter().map(|c| frob(&(c - th))).fold(f64::INFINITY, f64::min) / frob(th).max(f64::MIN_POSITIVE)).collect();
    tr.phase(
        "phase5",
        t,
        metrics! {
            "candidates" => candidates.len(), "budgets" => budgets.len(), "budget0" => budgets[0],
            "found" => rounds_found, "best_rel_distance_max" => best_dist.iter().cloned().fold(0.0, f64::max),
        },
    );

    // phase 6
    let t = Instant::now();
    let count = multiset_count(candidates.len(), m);
    if count > config.regression.tuple_cap as u128 {
        return Err(Error::CombinatorialBudget { count, cap: config.regression.tuple_cap });
    }
    let tuple_idx = tuples(candidates.len(), m);
    let train = draw_examples(&oracle, config.regression.n, &seeds, "phase6/train");
    let radius = config.regression.radius.unwrap_or((m as f64).sqrt());
    let hyps: Vec<AttentionLayer> = {
        use rayon::prelude::*;
        tuple_idx
            .par_iter()
            .map(|idx| {
                let th: Vec<DMatrix<f64>> = idx.iter().map(|&i| candidates[i].clone()).collect();
                let fit = fit_value_matrices(&train, &th, radius)?;
                layer_from(&th, &fit.ws)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let n_val = config.regression.n_val.unwrap_or_else(|| validation_size(hyps.len()));
    let val = draw_examples(&oracle, n_val, &seeds, "phase6/val");
    let sel = select_best(&hyps, &val)?;
    let hypothesis = hyps[sel.index].clone();
    let train_loss = loss_on(&train, &hypothesis);
    tr.phase(
        "phase6",
        t,
        metrics! {
            "tuples" => hyps.len(), "winner" => sel.index, "val_loss" => sel.losses[sel.index].mean,
            "val_se" => sel.losses[sel.index].se, "train_loss" => train_loss.mean,
        },
    );

    // held-out test
    let t = Instant::now();
    let test = draw_examples(&oracle, config.n_test, &seeds, "test");
    let loss = loss_on(&test, &hypothesis);
    let base = zero_loss(&test);
    let ratio = if base.mean > 0.0 { loss.mean / base.mean } else { 0.0 };
    tr.phase("test", t, metrics! { "loss" => loss.mean, "loss_se" => loss.se, "baseline" => base.mean, "ratio" => ratio });

    let total: u64 = tr.reports.iter().map(|r| r.samples).sum();
    debug_assert_eq!(total, oracle.draws());
    let reports = tr.reports.clone();

    Ok(LearnOutcome {
        hypothesis,
        truth,
        reports,
        phase1: est,
        refined_w: refined,
        tight_body: tight,
        min_norm,
        candidates,
        test_loss: loss.mean,
        baseline_loss: base.mean,
    })
}

/// Writes config, reports, metrics, body and hypothesis into `dir`.
pub fn write_outputs(dir: &Path, config: &RunConfig, outcome: &LearnOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), config.to_json())?;
    std::fs::write(dir.join("metrics.csv"), outcome.csv(config.seed))?;
    std::fs::write(dir.join("reports.json"), serde_json::to_string_pretty(&outcome.reports)?)?;
    std::fs::write(dir.join("estimate.json"), outcome.phase1.to_json(config.seed))?;
    outcome.tight_body.save(&dir.join("body.json"))?;
    InstanceFile::from_layer(&outcome.hypothesis, config.seed).save(&dir.join("hypothesis.json"))?;
    InstanceFile::from_layer(&outcome.truth, config.seed).save(&dir.join("instance.json"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk(1, 6, 3, 6.0);
        c.phase1.n = 5000;
        c.crude.t = 5000;
        c.refine = MarginEventConfig { c: None, proxy_norm: None, n: 100, max_draws: 50_000, pilot: 2000 };
        c.tight.t = 5000;
        c.tight.eps = 0.1;
        c.regression.n = 300;
        c.n_test = 300;
        c
    }

    #[test]
    fn config_round_trip() {
        let c = tiny();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::from_json(&c.to_json().replacen("\"seed\"", "\"sede\"", 1)).is_err());
    }

    #[test]
    fn zero_instance_is_learned_exactly() {
        let mut c = tiny();
        c.zero_instance = true;
        let out = run_learn(&c).unwrap();
        assert!(out.test_loss <= 1e-10);
        let total: u64 = out.reports.iter().map(|r| r.samples).sum();
        assert!(total > 0);
    }

    #[test]
    fn tuples_are_multisets() {
        assert_eq!(tuples(3, 2).len() as u128, multiset_count(3, 2));
        assert_eq!(tuples(4, 1).len(), 4);
        assert_eq!(multiset_count(10, 3), 220);
    }
}
