//! Margin-event rejection sampling and the least-squares refinement of ΣWᵢ.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::{pattern, AttentionLayer};
use crate::error::{Error, Result};
use crate::linalg::{frob, pinv_solve, sigma_min, spd_solve};
use crate::oracle::{map_blocks, Example, ExampleOracle, BLOCK};
use crate::rng::{Rng, SeedTree};

/// Threshold and budgets for collecting margin events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginEventConfig {
    /// Threshold multiplier; `None` selects it from a pilot sample.
    #[serde(default)]
    pub c: Option<f64>,
    /// Stand-in for 1/√Z; defaults to ‖Θ̃‖_F.
    #[serde(default)]
    pub proxy_norm: Option<f64>,
    /// Events to collect.
    pub n: usize,
    pub max_draws: u64,
    #[serde(default = "default_pilot")]
    pub pilot: usize,
}

fn default_pilot() -> usize {
    20_000
}

impl MarginEventConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if let Some(c) = self.c {
            if !c.is_finite() {
                return Err(Error::InvalidParam("C must be finite".into()));
            }
        }
        if self.n < d {
            return Err(Error::InvalidParam(format!("need at least d = {d} events, got {}", self.n)));
        }
        Ok(())
    }
}

/// X₁:Θ̃X₂:ᵀ for a sequence.
pub fn margin_statistic(x: &DMatrix<f64>, theta_tilde: &DMatrix<f64>) -> f64 {
    let d = x.ncols();
    let mut acc = 0.0;
    for i in 0..d {
        let xi = x[(0, i)];
        let mut row = 0.0;
        for j in 0..d {
            row += theta_tilde[(i, j)] * x[(1, j)];
        }
        acc += xi * row;
    }
    acc
}

/// Draws until X₁:Θ̃X₂:ᵀ > threshold. Returns the event and the number of draws.
pub fn wait_for_margin_event(
    oracle: &dyn ExampleOracle,
    theta_tilde: &DMatrix<f64>,
    threshold: f64,
    max_draws: u64,
    rng: &mut Rng,
) -> Result<(Example, u64)> {
    for t in 1..=max_draws {
        let ex = oracle.draw(rng);
        if margin_statistic(ex.x.matrix(), theta_tilde) > threshold {
            return Ok((ex, t));
        }
    }
    Err(Error::BudgetExhausted { draws: max_draws, accepted: 0, rate: 0.0 })
}

/// Collected events with their acceptance statistics.
#[derive(Debug, Clone)]
pub struct MarginEvents {
    pub events: Vec<Example>,
    pub c: f64,
    pub threshold: f64,
    pub draws: u64,
    pub pilot_draws: u64,
    pub rate: f64,
}

/// Picks C so that the pilot acceptance rate is about `target`.
fn pilot_threshold(
    oracle: &dyn ExampleOracle,
    theta_tilde: &DMatrix<f64>,
    scale: f64,
    pilot: usize,
    target: f64,
    seeds: &SeedTree,
    name: &str,
) -> f64 {
    let mut stats: Vec<f64> = map_blocks(seeds, name, pilot, BLOCK, |rng, len| {
        (0..len).map(|_| margin_statistic(oracle.draw(rng).x.matrix(), theta_tilde) / scale).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    if stats.is_empty() {
        return 0.0;
    }
    stats.sort_by(|a, b| b.partial_cmp(a).expect("finite statistic"));
    let idx = ((target * stats.len() as f64).floor() as usize).min(stats.len() - 1);
    stats[idx]
}

/// Collects `config.n` margin events in block order.
///
/// With `config.c = None`, C is chosen from a pilot sample so that the
/// acceptance rate is about 1.5·n/max_draws, clamped to [1e−4, 1e−2].
pub fn collect_margin_events(
    oracle: &dyn ExampleOracle,
    theta_tilde: &DMatrix<f64>,
    config: &MarginEventConfig,
    seeds: &SeedTree,
    name: &str,
) -> Result<MarginEvents> {
    config.validate(oracle.d())?;
    let scale = config.proxy_norm.unwrap_or_else(|| frob(theta_tilde));
    let (c, pilot_draws) = match config.c {
        Some(c) => (c, 0),
        None => {
            let target = (1.5 * config.n as f64 / config.max_draws.max(1) as f64).clamp(1e-4, 1e-2);
            let pilot_name = format!("{name}/pilot");
            (pilot_threshold(oracle, theta_tilde, scale.max(f64::MIN_POSITIVE), config.pilot, target, seeds, &pilot_name), config.pilot as u64)
        }
    };
    let threshold = c * scale;
    let mut events = Vec::with_capacity(config.n);
    let mut draws = 0u64;
    let mut next_block = 0u64;
    // fixed batch size keeps draw counts independent of the thread count
    let batch = 4u64;
    while events.len() < config.n && draws < config.max_draws {
        let remaining = config.max_draws - draws;
        let nblocks = batch.min(remaining.div_ceil(BLOCK as u64));
        let found: Vec<(Vec<Example>, u64)> = {
            use rayon::prelude::*;
            (next_block..next_block + nblocks)
                .into_par_iter()
                .map(|b| {
                    let mut rng = seeds.substream(name, b);
                    let len = (BLOCK as u64).min(config.max_draws - b * BLOCK as u64);
                    let mut out = Vec::new();
                    for _ in 0..len {
                        let ex = oracle.draw(&mut rng);
                        if margin_statistic(ex.x.matrix(), theta_tilde) > threshold {
                            out.push(ex);
                        }
                    }
                    (out, len)
                })
                .collect()
        };
        for (evs, len) in found {
            draws += len;
            events.extend(evs);
        }
        next_block += nblocks;
    }
    let rate = events.len() as f64 / draws.max(1) as f64;
    if events.len() < config.n {
        return Err(Error::BudgetExhausted { draws, accepted: events.len(), rate });
    }
    events.truncate(config.n);
    for ev in &events {
        assert!(margin_statistic(ev.x.matrix(), theta_tilde) > threshold);
    }
    Ok(MarginEvents { events, c, threshold, draws, pilot_draws, rate })
}

/// Refined estimate with its design diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub w_hat: DMatrix<f64>,
    pub sigma_min: f64,
    pub rank_warning: bool,
}

/// Least squares of the stacked rows Y₁: on X₂:.
pub fn refine_sum(events: &[Example]) -> Result<RefineResult> {
    let first = events.first().ok_or_else(|| Error::InvalidParam("no events".into()))?;
    let d = first.x.d();
    let n = events.len();
    let b = DMatrix::from_fn(n, d, |r, c| events[r].x.matrix()[(1, c)]);
    let y = DMatrix::from_fn(n, first.y.ncols(), |r, c| events[r].y[(0, c)]);
    let smin = if n >= d { sigma_min(&b) } else { 0.0 };
    let rank_warning = smin < 1e-6 * (n as f64).sqrt();
    let w_hat = if rank_warning {
        let mut w = DMatrix::zeros(d, y.ncols());
        for c in 0..y.ncols() {
            let col = pinv_solve(&b, &DVector::from_iterator(n, y.column(c).iter().cloned()), 1e-10);
            w.set_column(c, &col);
        }
        w
    } else {
        let g = b.transpose() * &b;
        let rhs = b.transpose() * &y;
        spd_solve(&g, &rhs, 1e-10).ok_or(Error::IllConditioned(smin))?
    };
    Ok(RefineResult { w_hat, sigma_min: smin, rank_warning })
}

/// Fraction of events whose first-row pattern is within `tol` (ℓ₂) of e₂ in
/// every head of the true layer.
pub fn pattern_purity_diagnostic(events: &[Example], layer: &AttentionLayer, tol: f64) -> f64 {
    if events.is_empty() {
        return 0.0;
    }
    let pure = events
        .iter()
        .filter(|ev| {
            layer.heads().iter().all(|h| {
                let p = pattern(&h.theta, ev.x.matrix());
                let row = p.0.row(0);
                let dist2: f64 = row.iter().enumerate().map(|(j, &v)| if j == 1 { (1.0 - v).powi(2) } else { v * v }).sum();
                dist2.sqrt() <= tol
            })
        })
        .count();
    pure as f64 / events.len() as f64
}
