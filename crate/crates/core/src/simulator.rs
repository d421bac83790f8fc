//! Euler–Maruyama simulation of the filter and both wealth dynamics.
//!
//! In the *sampled* regime the leader draws one action per grid interval and
//! holds it, while the follower re-evaluates the response at every SDE step.
//! In the *exploratory* regime the leader's randomisation enters as a second,
//! independent Brownian motion scaled by the policy's standard deviation.
//! Both regimes are driven by the same observable Brownian motion for a given
//! seed and path index.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_model::{Investor, ModelParams};
use crate::rng::{Channel, NormalStream};
use crate::strategies::GaussianPolicy;

/// Finest SDE resolution per horizon used when substeps are chosen automatically.
pub const AUTO_STEPS_PER_HORIZON: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sampled,
    Exploratory,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Sampled => "sampled",
            Regime::Exploratory => "exploratory",
        }
    }
}

/// Partition of `[0, T]` on which the leader samples, plus the number of SDE
/// steps taken inside each interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    substeps: usize,
}

impl TimeGrid {
    /// `n_intervals` equal intervals. `None` picks substeps so that the SDE
    /// step does not exceed `T / 2048`.
    pub fn uniform(horizon: f64, n_intervals: usize, substeps: Option<usize>) -> Result<Self> {
        if n_intervals == 0 {
            return Err(invalid("n_intervals", "need at least one interval"));
        }
        let nodes = (0..=n_intervals)
            .map(|i| {
                if i == n_intervals {
                    horizon
                } else {
                    horizon * i as f64 / n_intervals as f64
                }
            })
            .collect();
        Self::from_nodes(nodes, substeps)
    }

    pub fn from_nodes(nodes: Vec<f64>, substeps: Option<usize>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(invalid("nodes", "need at least two nodes"));
        }
        if nodes[0] != 0.0 {
            return Err(invalid("nodes", "first node must be 0"));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("nodes", "nodes must be finite and strictly increasing"));
        }
        let mut grid = TimeGrid { nodes, substeps: 1 };
        grid.substeps = match substeps {
            Some(0) => return Err(invalid("substeps", "must be at least 1")),
            Some(s) => s,
            None => {
                let ratio = grid.mesh() / grid.horizon() * AUTO_STEPS_PER_HORIZON as f64;
                (ratio - 1e-9).ceil().max(1.0) as usize
            }
        };
        Ok(grid)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().expect("grid has nodes")
    }

    pub fn n_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn n_steps(&self) -> usize {
        self.n_intervals() * self.substeps
    }

    /// Largest interval length.
    pub fn mesh(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// The sampling clock: the last node not after `t`.
    pub fn clock(&self, t: f64) -> f64 {
        self.nodes[self.interval_of(t)]
    }

    /// Index of the interval containing `t` (the last one for `t >= T`).
    pub fn interval_of(&self, t: f64) -> usize {
        let last = self.n_intervals() - 1;
        self.nodes.partition_point(|&s| s <= t).saturating_sub(1).min(last)
    }

    /// Index of the node equal to `t` up to rounding, if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.horizon().max(1.0);
        self.nodes.iter().position(|&s| (s - t).abs() <= tol)
    }

    /// All SDE step times, nodes included.
    pub fn step_times(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_steps() + 1);
        for w in self.nodes.windows(2) {
            let dt = (w[1] - w[0]) / self.substeps as f64;
            for k in 0..self.substeps {
                out.push(w[0] + k as f64 * dt);
            }
        }
        out.push(self.horizon());
        out
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

/// Wealth of both investors and the filter at time zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub x1: f64,
    pub x2: f64,
    pub p: f64,
}

impl InitialState {
    pub fn validate(&self) -> Result<()> {
        if !(self.x1.is_finite() && self.x2.is_finite()) {
            return Err(invalid("x1_0/x2_0", "initial wealth must be finite"));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(invalid("p0", format!("must lie in (0, 1), got {}", self.p)));
        }
        Ok(())
    }
}

/// Replacement of the leader's policy on `[0, until)` by a Gaussian with
/// shifted mean and scaled variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyDeviation {
    pub until: f64,
    pub mean_offset: f64,
    pub variance_scale: f64,
}

/// Constant follower action on `[0, until)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerOverride {
    pub until: f64,
    pub action: f64,
}

/// Departures from equilibrium play applied to a simulation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    pub leader_deviation: Option<PolicyDeviation>,
    pub follower_override: Option<FollowerOverride>,
    /// Fixed leader actions, one per grid interval (sampled regime only).
    pub frozen_actions: Option<Vec<f64>>,
}

impl Scenario {
    pub fn equilibrium() -> Self {
        Scenario::default()
    }

    fn validate(&self, grid: &TimeGrid, regime: Regime) -> Result<()> {
        if let Some(d) = &self.leader_deviation {
            if !(d.variance_scale > 0.0 && d.variance_scale.is_finite()) {
                return Err(invalid("variance_scale", "must be positive and finite"));
            }
            if !d.mean_offset.is_finite() {
                return Err(invalid("mean_offset", "must be finite"));
            }
        }
        if let Some(f) = &self.follower_override {
            if !f.action.is_finite() {
                return Err(invalid("follower action", "must be finite"));
            }
        }
        if let Some(frozen) = &self.frozen_actions {
            if regime != Regime::Sampled {
                return Err(invalid("frozen_actions", "only the sampled regime draws discrete actions"));
            }
            if frozen.len() != grid.n_intervals() {
                return Err(invalid(
                    "frozen_actions",
                    format!("need {} actions, got {}", grid.n_intervals(), frozen.len()),
                ));
            }
            if self.leader_deviation.is_some() {
                return Err(invalid("frozen_actions", "cannot combine frozen actions with a policy deviation"));
            }
        }
        Ok(())
    }
}

/// State of a path at a grid node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checkpoint {
    pub node: usize,
    pub x1: f64,
    pub x2: f64,
    pub p: f64,
    /// Observable Brownian motion accumulated since time zero.
    pub w_hat: f64,
    /// Exploration Brownian motion accumulated since time zero.
    pub w_bar: f64,
}

/// Final state of one path plus requested intermediate checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub path: u64,
    pub regime: Regime,
    pub end: Checkpoint,
    pub checkpoints: Vec<Checkpoint>,
    /// Standard normal behind the first sampled action (zero when exploratory).
    pub first_draw: f64,
}

/// One fully recorded path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub regime: Regime,
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub w_hat: Vec<f64>,
    /// Empty in the sampled regime.
    pub w_bar: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// One entry per grid interval in the sampled regime; empty otherwise.
    pub u1_actions: Vec<f64>,
    /// Leader action (sampled) or policy mean (exploratory) in force from
    /// each stored time; the last entry repeats its predecessor.
    pub u1_active: Vec<f64>,
}

impl PathBundle {
    fn with_capacity(regime: Regime, steps: usize) -> Self {
        let v = || Vec::with_capacity(steps + 1);
        PathBundle {
            regime,
            times: v(),
            p: v(),
            w_hat: Vec::with_capacity(steps),
            w_bar: Vec::new(),
            x1: v(),
            x2: v(),
            u1_actions: Vec::new(),
            u1_active: v(),
        }
    }

    /// Writes columns `t, P, X1, X2, u1_active`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "t,P,X1,X2,u1_active")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                crate::fmt_f64(self.times[i]),
                crate::fmt_f64(self.p[i]),
                crate::fmt_f64(self.x1[i]),
                crate::fmt_f64(self.x2[i]),
                crate::fmt_f64(self.u1_active[i]),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Relative wealth `(1 - lambda/2) x_own - (lambda/2) x_other` of `who`.
#[inline]
pub fn relative_wealth(who: Investor, x1: f64, x2: f64, params: &ModelParams) -> f64 {
    let lambda = params.lambda_of(who);
    match who {
        Investor::Leader => (1.0 - lambda / 2.0) * x1 - lambda / 2.0 * x2,
        Investor::Follower => (1.0 - lambda / 2.0) * x2 - lambda / 2.0 * x1,
    }
}

/// Relative-wealth path of `who` along a recorded bundle.
pub fn z_transform(bundle: &PathBundle, who: Investor, params: &ModelParams) -> Vec<f64> {
    bundle
        .x1
        .iter()
        .zip(&bundle.x2)
        .map(|(&a, &b)| relative_wealth(who, a, b, params))
        .collect()
}

/// One Euler step of the filter, projected onto `[0, 1]`.
#[inline]
pub fn step_filter(p: f64, dw: f64, params: &ModelParams) -> f64 {
    (p + params.beta_at(p) * dw).clamp(0.0, 1.0)
}

struct Noise {
    market: NormalStream,
    exploration: NormalStream,
    sampling: NormalStream,
}

impl Noise {
    fn for_path(seed: u64, path: u64) -> Self {
        Noise {
            market: NormalStream::new(seed, Channel::Market, path),
            exploration: NormalStream::new(seed, Channel::Exploration, path),
            sampling: NormalStream::new(seed, Channel::Sampling, path),
        }
    }

    /// Noise of reference path `r`, disjoint from every ordinary path.
    fn reference(seed: u64, r: u64) -> Self {
        Noise {
            market: NormalStream::new(seed, Channel::Reference, 3 * r),
            exploration: NormalStream::new(seed, Channel::Reference, 3 * r + 1),
            sampling: NormalStream::new(seed, Channel::Reference, 3 * r + 2),
        }
    }
}

/// Which part of a path to simulate and what to keep.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop at this node instead of the horizon.
    pub stop_node: Option<usize>,
    /// Nodes whose state is reported in [`PathOutcome::checkpoints`].
    pub checkpoints: Vec<usize>,
}

/// A configured simulation: policy, grid, initial state, seed and regime.
#[derive(Debug, Clone)]
pub struct Simulation<'p, 'a> {
    policy: &'p GaussianPolicy<'a>,
    grid: &'p TimeGrid,
    init: InitialState,
    seed: u64,
    regime: Regime,
}

impl<'p, 'a> Simulation<'p, 'a> {
    pub fn new(
        policy: &'p GaussianPolicy<'a>,
        grid: &'p TimeGrid,
        init: InitialState,
        seed: u64,
        regime: Regime,
    ) -> Result<Self> {
        init.validate()?;
        let horizon = policy.params().horizon;
        if (grid.horizon() - horizon).abs() > 1e-12 * horizon {
            return Err(invalid(
                "nodes",
                format!("grid ends at {} but the horizon is {horizon}", grid.horizon()),
            ));
        }
        Ok(Simulation {
            policy,
            grid,
            init,
            seed,
            regime,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.grid
    }

    pub fn policy(&self) -> &GaussianPolicy<'a> {
        self.policy
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init(&self) -> InitialState {
        self.init
    }

    /// Simulates one path and returns its outcome.
    pub fn run_path(&self, scenario: &Scenario, path: u64, opts: &RunOptions) -> Result<PathOutcome> {
        scenario.validate(self.grid, self.regime)?;
        let mut noise = Noise::for_path(self.seed, path);
        self.kernel(scenario, path, &mut noise, opts, None)
    }

    /// Simulates and records one path over the whole horizon.
    pub fn record_path(&self, scenario: &Scenario, path: u64) -> Result<PathBundle> {
        scenario.validate(self.grid, self.regime)?;
        let mut noise = Noise::for_path(self.seed, path);
        let mut bundle = PathBundle::with_capacity(self.regime, self.grid.n_steps());
        self.kernel(scenario, path, &mut noise, &RunOptions::default(), Some(&mut bundle))?;
        Ok(bundle)
    }

    /// Simulates paths `0..n_paths` in parallel; results are in path order.
    pub fn run_paths(&self, scenario: &Scenario, n_paths: usize, opts: &RunOptions) -> Result<Vec<PathOutcome>> {
        scenario.validate(self.grid, self.regime)?;
        (0..n_paths as u64)
            .into_par_iter()
            .map(|path| {
                let mut noise = Noise::for_path(self.seed, path);
                self.kernel(scenario, path, &mut noise, opts, None)
            })
            .collect()
    }

    /// Leader actions along reference path `realization`, for conditioning
    /// the follower's objective on one realised action sequence.
    pub fn frozen_actions(&self, realization: u64) -> Result<Vec<f64>> {
        let sampled = Simulation {
            regime: Regime::Sampled,
            ..self.clone()
        };
        let mut noise = Noise::reference(self.seed, realization);
        let mut bundle = PathBundle::with_capacity(Regime::Sampled, self.grid.n_steps());
        sampled.kernel(
            &Scenario::equilibrium(),
            u64::MAX,
            &mut noise,
            &RunOptions::default(),
            Some(&mut bundle),
        )?;
        Ok(bundle.u1_actions)
    }

    fn kernel(
        &self,
        scenario: &Scenario,
        path: u64,
        noise: &mut Noise,
        opts: &RunOptions,
        mut record: Option<&mut PathBundle>,
    ) -> Result<PathOutcome> {
        let m = self.policy.params();
        let kappa = self.policy.kappa();
        let sd = self.policy.std_dev();
        let sampled = self.regime == Regime::Sampled;
        let stop = opts.stop_node.unwrap_or(self.grid.n_intervals()).min(self.grid.n_intervals());
        let substeps = self.grid.substeps;

        let (mut x1, mut x2, mut p) = (self.init.x1, self.init.x2, self.init.p);
        let (mut w_hat, mut w_bar) = (0.0, 0.0);
        let mut checkpoints = Vec::with_capacity(opts.checkpoints.len());
        let mut first_draw = 0.0;
        let snapshot = |node: usize, x1, x2, p, w_hat, w_bar, out: &mut Vec<Checkpoint>| {
            if opts.checkpoints.contains(&node) {
                out.push(Checkpoint {
                    node,
                    x1,
                    x2,
                    p,
                    w_hat,
                    w_bar,
                });
            }
        };
        snapshot(0, x1, x2, p, w_hat, w_bar, &mut checkpoints);

        for i in 0..stop {
            let t0 = self.grid.nodes[i];
            let dt = (self.grid.nodes[i + 1] - t0) / substeps as f64;
            let sqrt_dt = dt.sqrt();
            let deviation = scenario.leader_deviation.filter(|d| t0 < d.until);

            let u1_held = if sampled {
                let xi = noise.sampling.next_normal();
                if i == 0 {
                    first_draw = xi;
                }
                let u1 = match &scenario.frozen_actions {
                    Some(frozen) => frozen[i],
                    None => {
                        let c = self.policy.controls_at(&self.policy.locate(t0, p), p);
                        let (offset, scale) = deviation.map_or((0.0, 1.0), |d| (d.mean_offset, d.variance_scale));
                        c.leader_mean + offset + sd * scale.sqrt() * xi
                    }
                };
                if let Some(b) = record.as_deref_mut() {
                    b.u1_actions.push(u1);
                }
                u1
            } else {
                0.0
            };

            for k in 0..substeps {
                let t = t0 + k as f64 * dt;
                let loc = self.policy.locate(t, p);
                let dw = sqrt_dt * noise.market.next_normal();
                let gain = (m.theta_at(p) - m.r) * dt + m.sigma * dw;
                let follower = scenario.follower_override.filter(|f| t < f.until);
                if let Some(bd) = record.as_deref_mut() {
                    bd.times.push(t);
                    bd.p.push(p);
                    bd.x1.push(x1);
                    bd.x2.push(x2);
                    bd.w_hat.push(dw);
                }

                if sampled {
                    let u2 = match follower {
                        Some(f) => f.action,
                        None => self.policy.follower_base_at(&loc, p) + kappa * u1_held,
                    };
                    x1 += u1_held * gain;
                    x2 += u2 * gain;
                    if let Some(bd) = record.as_deref_mut() {
                        bd.u1_active.push(u1_held);
                    }
                } else {
                    let c = self.policy.controls_at(&loc, p);
                    let dwb = sqrt_dt * noise.exploration.next_normal();
                    let dev = scenario.leader_deviation.filter(|d| t < d.until);
                    let (offset, scale) = dev.map_or((0.0, 1.0), |d| (d.mean_offset, d.variance_scale));
                    let b = c.leader_mean + offset;
                    let s = sd * scale.sqrt();
                    x1 += b * gain + m.sigma * s * dwb;
                    match follower {
                        Some(f) => x2 += f.action * gain,
                        None => x2 += (c.follower_base + kappa * b) * gain + m.sigma * kappa * s * dwb,
                    }
                    w_bar += dwb;
                    if let Some(bd) = record.as_deref_mut() {
                        bd.w_bar.push(dwb);
                        bd.u1_active.push(b);
                    }
                }
                p = step_filter(p, dw, m);
                w_hat += dw;
            }
            if !(x1.is_finite() && x2.is_finite()) {
                return Err(Error::PathDiverged {
                    path,
                    t: self.grid.nodes[i + 1],
                    detail: format!("wealth ({x1}, {x2})"),
                });
            }
            snapshot(i + 1, x1, x2, p, w_hat, w_bar, &mut checkpoints);
        }

        if let Some(bd) = record {
            bd.times.push(self.grid.nodes[stop]);
            bd.p.push(p);
            bd.x1.push(x1);
            bd.x2.push(x2);
            let last = bd.u1_active.last().copied().unwrap_or(0.0);
            bd.u1_active.push(last);
        }

        Ok(PathOutcome {
            path,
            regime: self.regime,
            end: Checkpoint {
                node: stop,
                x1,
                x2,
                p,
                w_hat,
                w_bar,
            },
            checkpoints,
            first_draw,
        })
    }
}

/// Draws one sampled-regime path; convenience wrapper around [`Simulation`].
pub fn simulate_sampled(
    grid: &TimeGrid,
    policy: &GaussianPolicy<'_>,
    init: InitialState,
    seed: u64,
    path: u64,
) -> Result<PathBundle> {
    Simulation::new(policy, grid, init, seed, Regime::Sampled)?.record_path(&Scenario::equilibrium(), path)
}

/// Draws one exploratory-regime path; convenience wrapper around [`Simulation`].
pub fn simulate_exploratory(
    grid: &TimeGrid,
    policy: &GaussianPolicy<'_>,
    init: InitialState,
    seed: u64,
    path: u64,
) -> Result<PathBundle> {
    Simulation::new(policy, grid, init, seed, Regime::Exploratory)?.record_path(&Scenario::equilibrium(), path)
}

/// Filter values at the requested nodes for one path, driven by the same
/// market noise as [`Simulation`] with equal seed and path index.
pub fn filter_at_nodes(
    params: &ModelParams,
    grid: &TimeGrid,
    p0: f64,
    seed: u64,
    path: u64,
    nodes: &[usize],
) -> Vec<f64> {
    let mut market = NormalStream::new(seed, Channel::Market, path);
    let mut out = Vec::with_capacity(nodes.len());
    let mut p = p0;
    if nodes.contains(&0) {
        out.push(p);
    }
    for i in 0..grid.n_intervals() {
        let sqrt_dt = ((grid.nodes[i + 1] - grid.nodes[i]) / grid.substeps as f64).sqrt();
        for _ in 0..grid.substeps {
            p = step_filter(p, sqrt_dt * market.next_normal(), params);
        }
        if nodes.contains(&(i + 1)) {
            out.push(p);
        }
    }
    out
}

/// Counts of unprojected filter steps leaving `[-eps, 1 + eps]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterDiagnostics {
    pub steps: u64,
    pub excursions: u64,
    pub threshold: f64,
    /// Smallest and largest stored (projected) values.
    pub min_stored: f64,
    pub max_stored: f64,
}

impl FilterDiagnostics {
    pub fn excursion_rate(&self) -> f64 {
        self.excursions as f64 / self.steps.max(1) as f64
    }
}

/// Runs the filter alone and records how often the raw Euler step would
/// leave the unit interval by more than `10 sqrt(dt) max beta`.
pub fn filter_diagnostics(params: &ModelParams, grid: &TimeGrid, p0: f64, seed: u64, n_paths: usize) -> FilterDiagnostics {
    let dt_max = grid.mesh() / grid.substeps as f64;
    let threshold = 10.0 * dt_max.sqrt() * params.beta_max();
    let per_path: Vec<(u64, u64, f64, f64)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut market = NormalStream::new(seed, Channel::Market, path);
            let (mut steps, mut excursions) = (0u64, 0u64);
            let (mut lo, mut hi) = (p0, p0);
            let mut p = p0;
            for i in 0..grid.n_intervals() {
                let sqrt_dt = ((grid.nodes[i + 1] - grid.nodes[i]) / grid.substeps as f64).sqrt();
                for _ in 0..grid.substeps {
                    let dw = sqrt_dt * market.next_normal();
                    let raw = p + params.beta_at(p) * dw;
                    if raw < -threshold || raw > 1.0 + threshold {
                        excursions += 1;
                    }
                    steps += 1;
                    p = step_filter(p, dw, params);
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
            }
            (steps, excursions, lo, hi)
        })
        .collect();
    per_path.into_iter().fold(
        FilterDiagnostics {
            steps: 0,
            excursions: 0,
            threshold,
            min_stored: p0,
            max_stored: p0,
        },
        |acc, (s, e, lo, hi)| FilterDiagnostics {
            steps: acc.steps + s,
            excursions: acc.excursions + e,
            threshold,
            min_stored: acc.min_stored.min(lo),
            max_stored: acc.max_stored.max(hi),
        },
    )
}

#[cfg(test)]
mod tests;
