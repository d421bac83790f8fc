//! Perturbation slopes `[J(perturbed) - J(equilibrium)] / h`.
//!
//! A perturbation only changes play on `[0, h)`. Afterwards both arms use
//! controls that depend on `(t, P)` alone and the filter does not see wealth,
//! so with shared noise the perturbed terminal relative wealth is
//! `Z_base(T) - Z_base(h) + Z_pert(h)`. Only the window is simulated twice.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{fit_line, window_node, PerturbationKind, PerturbationSpec, VerifyContext};
use crate::error::{Error, Result};
use crate::market_model::{Investor, ModelParams};
use crate::objectives::{influence, mean_variance, mean_with_controls};
use crate::simulator::{
    relative_wealth, FollowerOverride, PathOutcome, PolicyDeviation, Regime, RunOptions, Scenario, Simulation, TimeGrid,
};
use crate::strategies::gaussian_entropy;

/// Fewest paths for which a slope test is attempted.
pub const MIN_PATHS: usize = 100;

/// Monte Carlo settings shared by the slope tests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeSettings {
    pub n_paths: usize,
    pub seed: u64,
    /// Each spec is run at `window / 2^k` for `k = 0..=halvings`.
    pub halvings: u32,
    /// Uniform simulation grid; every window must end on one of its nodes.
    pub intervals: usize,
    pub substeps: usize,
    /// Intervals on which the frozen leader actions are held in the
    /// follower test; must divide `intervals`.
    pub sampling_intervals: usize,
}

impl SlopeSettings {
    /// `T/256` intervals with 8 Euler steps each, leader actions held on
    /// `T/64`, three windows per spec.
    pub fn new(n_paths: usize, seed: u64) -> Self {
        SlopeSettings {
            n_paths,
            seed,
            halvings: 2,
            intervals: 256,
            substeps: 8,
            sampling_intervals: 64,
        }
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        TimeGrid::uniform(horizon, self.intervals, Some(self.substeps))
    }

    fn check(&self) -> Result<()> {
        if self.sampling_intervals == 0 || self.intervals % self.sampling_intervals != 0 {
            return Err(Error::InvalidParameter {
                field: "sampling_intervals",
                reason: format!("{} must divide {}", self.sampling_intervals, self.intervals),
            });
        }
        if self.n_paths < MIN_PATHS {
            return Err(Error::InsufficientPaths {
                needed: MIN_PATHS,
                got: self.n_paths,
            });
        }
        Ok(())
    }

    fn windows(&self, spec: &PerturbationSpec) -> Vec<f64> {
        (0..=self.halvings).map(|k| spec.window / f64::from(1u32 << k)).collect()
    }
}

/// Slope estimate for one window length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowSlope {
    pub window: f64,
    pub slope: f64,
    pub std_error: f64,
    /// Standard error had the two arms used independent noise.
    pub unpaired_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeReport {
    pub spec: PerturbationSpec,
    /// Reference path behind the frozen leader actions (follower tests only).
    pub realization: Option<u64>,
    pub n_paths: usize,
    pub windows: Vec<WindowSlope>,
    /// Least-squares extrapolation of the window slopes to `h = 0`.
    pub extrapolated: f64,
    pub extrapolated_std_error: f64,
    pub predicted: f64,
    pub pass: bool,
}

impl SlopeReport {
    pub const CSV_HEADER: &'static str =
        "kind,magnitude,window,realization,n_paths,h,slope,std_error,unpaired_std_error,predicted,pass";

    /// One row per window plus a final row with `h = 0` for the extrapolation.
    pub fn csv_rows(&self) -> Vec<String> {
        let f = crate::fmt_f64;
        let realization = self.realization.map_or(String::new(), |r| r.to_string());
        let row = |h: f64, slope: f64, se: f64, unpaired: f64| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.spec.kind.label(),
                f(self.spec.magnitude),
                f(self.spec.window),
                realization,
                self.n_paths,
                f(h),
                f(slope),
                f(se),
                f(unpaired),
                f(self.predicted),
                self.pass
            )
        };
        let mut rows: Vec<String> = self
            .windows
            .iter()
            .map(|w| row(w.window, w.slope, w.std_error, w.unpaired_std_error))
            .collect();
        rows.push(row(0.0, self.extrapolated, self.extrapolated_std_error, f64::NAN));
        rows
    }
}

pub fn write_slope_csv(path: &std::path::Path, reports: &[SlopeReport]) -> Result<()> {
    let mut out = String::from(SlopeReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        for row in r.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One perturbed arm over the common base paths.
struct Arm {
    z: Vec<f64>,
    /// Deterministic addition to the perturbed objective.
    shift: f64,
    weight: f64,
}

/// `sum_k weight_k [MV(z_k) + shift_k - MV(z_base)]` with its standard
/// error from the per-path influence differences after control variates.
fn weighted_difference(arms: &[Arm], z_base: &[f64], gamma: f64, controls: &[Vec<f64>]) -> Result<(f64, f64)> {
    let base = mean_variance(z_base, gamma)?;
    let ib = influence(z_base, gamma)?;
    let mut series = vec![0.0; z_base.len()];
    let mut plug_in = 0.0;
    for arm in arms {
        let mv = mean_variance(&arm.z, gamma)?;
        plug_in += arm.weight * (mv.value + arm.shift - base.value);
        for ((s, a), b) in series.iter_mut().zip(influence(&arm.z, gamma)?).zip(&ib) {
            *s += arm.weight * (a - b);
        }
    }
    let raw = series.iter().sum::<f64>() / series.len() as f64;
    let (adjusted, se) = mean_with_controls(&series, controls)?;
    Ok((plug_in + adjusted - raw, se))
}

fn checkpoint_z(outcome: &PathOutcome, node: usize, who: Investor, params: &ModelParams) -> f64 {
    let c = outcome
        .checkpoints
        .iter()
        .find(|c| c.node == node)
        .expect("base runs record every window node");
    relative_wealth(who, c.x1, c.x2, params)
}

fn end_z(outcome: &PathOutcome, who: Investor, params: &ModelParams) -> f64 {
    relative_wealth(who, outcome.end.x1, outcome.end.x2, params)
}

fn w_hat_at(outcome: &PathOutcome, node: usize) -> f64 {
    outcome.checkpoints.iter().find(|c| c.node == node).map_or(0.0, |c| c.w_hat)
}

fn w_bar_at(outcome: &PathOutcome, node: usize) -> f64 {
    outcome.checkpoints.iter().find(|c| c.node == node).map_or(0.0, |c| c.w_bar)
}

/// Zero-mean controls built from the observable noise over `[0, h)`.
fn market_controls(base: &[PathOutcome], node: usize, h: f64, sigma: f64) -> [Vec<f64>; 2] {
    let dw: Vec<f64> = base.iter().map(|o| w_hat_at(o, node)).collect();
    [
        dw.iter().map(|w| sigma * w).collect(),
        dw.iter().map(|w| sigma * sigma * (w * w - h)).collect(),
    ]
}

fn exploration_controls(base: &[PathOutcome], node: usize, h: f64, sigma: f64) -> [Vec<f64>; 3] {
    let s2 = sigma * sigma;
    let pairs: Vec<(f64, f64)> = base.iter().map(|o| (w_hat_at(o, node), w_bar_at(o, node))).collect();
    [
        pairs.iter().map(|(_, b)| sigma * b).collect(),
        pairs.iter().map(|(_, b)| s2 * (b * b - h)).collect(),
        pairs.iter().map(|(w, b)| s2 * w * b).collect(),
    ]
}

struct Window {
    h: f64,
    node: usize,
}

/// Runs the perturbed arms of one spec and turns them into a report.
fn assemble(
    spec: &PerturbationSpec,
    windows: &[Window],
    z_pert_window: &[Vec<f64>],
    shift_rate: f64,
    base: &[PathOutcome],
    who: Investor,
    params: &ModelParams,
    controls: &[Vec<Vec<f64>>],
    realization: Option<u64>,
) -> Result<SlopeReport> {
    let gamma = params.gamma_of(who);
    let z_base: Vec<f64> = base.iter().map(|o| end_z(o, who, params)).collect();
    let arms: Vec<Arm> = windows
        .iter()
        .zip(z_pert_window)
        .map(|(w, zw)| Arm {
            z: base
                .iter()
                .zip(zw)
                .zip(&z_base)
                .map(|((o, zp), zb)| zb - checkpoint_z(o, w.node, who, params) + zp)
                .collect(),
            shift: shift_rate * w.h,
            weight: 1.0 / w.h,
        })
        .collect();

    let mut slopes = Vec::with_capacity(arms.len());
    for (arm, ctl) in arms.iter().zip(controls) {
        let single = Arm {
            z: arm.z.clone(),
            shift: arm.shift,
            weight: arm.weight,
        };
        let (slope, std_error) = weighted_difference(std::slice::from_ref(&single), &z_base, gamma, ctl)?;
        let a = mean_variance(&arm.z, gamma)?;
        let b = mean_variance(&z_base, gamma)?;
        slopes.push(WindowSlope {
            window: 1.0 / arm.weight,
            slope,
            std_error,
            unpaired_std_error: arm.weight * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt(),
        });
    }

    let hs: Vec<f64> = windows.iter().map(|w| w.h).collect();
    let ys: Vec<f64> = slopes.iter().map(|s| s.slope).collect();
    let (_, _, fit_weights) = fit_line(&hs, &ys);
    let combined: Vec<Arm> = arms
        .into_iter()
        .zip(&fit_weights)
        .map(|(arm, fw)| Arm {
            weight: arm.weight * fw,
            ..arm
        })
        .collect();
    let all_controls: Vec<Vec<f64>> = controls.iter().flatten().cloned().collect();
    let (extrapolated, extrapolated_std_error) = weighted_difference(&combined, &z_base, gamma, &all_controls)?;

    let pass = if spec.is_null() {
        extrapolated.abs() <= 3.0 * extrapolated_std_error
    } else {
        slopes.iter().all(|s| s.slope <= 3.0 * s.std_error) && extrapolated <= 3.0 * extrapolated_std_error
    };
    Ok(SlopeReport {
        spec: *spec,
        realization,
        n_paths: base.len(),
        windows: slopes,
        extrapolated,
        extrapolated_std_error,
        predicted: spec.leading_order_slope(params),
        pass,
    })
}

fn windows_for(spec: &PerturbationSpec, settings: &SlopeSettings, grid: &TimeGrid) -> Result<Vec<Window>> {
    settings
        .windows(spec)
        .into_iter()
        .map(|h| Ok(Window { h, node: window_node(grid, h)? }))
        .collect()
}

fn all_window_nodes(specs: &[PerturbationSpec], settings: &SlopeSettings, grid: &TimeGrid) -> Result<Vec<usize>> {
    let mut nodes = Vec::new();
    for spec in specs {
        for w in windows_for(spec, settings, grid)? {
            if !nodes.contains(&w.node) {
                nodes.push(w.node);
            }
        }
    }
    nodes.sort_unstable();
    Ok(nodes)
}

fn expect_kinds(specs: &[PerturbationSpec], allowed: &[PerturbationKind], horizon: f64) -> Result<()> {
    for spec in specs {
        spec.validate(horizon)?;
        if !allowed.contains(&spec.kind) {
            return Err(Error::InvalidParameter {
                field: "kind",
                reason: format!("{} is not valid for this test", spec.kind.label()),
            });
        }
    }
    Ok(())
}

/// Follower slopes under the sampled dynamics, conditional on the leader's
/// actions along reference path `realization`. The actions are held on
/// `settings.sampling_intervals` intervals, so windows inside the first one
/// see a single leader action.
///
/// The perturbed follower holds `u2*(0, p0) + magnitude` on `[0, h)`, where
/// `u2*` is the best response to the first frozen leader action.
pub fn follower_slope_test(
    ctx: &VerifyContext<'_>,
    specs: &[PerturbationSpec],
    settings: &SlopeSettings,
    realization: u64,
) -> Result<Vec<SlopeReport>> {
    let m = &ctx.params;
    settings.check()?;
    expect_kinds(specs, &[PerturbationKind::FollowerConstant], m.horizon)?;
    let policy = ctx.policy()?;
    let grid = settings.grid(m.horizon)?;
    let sim = Simulation::new(&policy, &grid, ctx.init, settings.seed, Regime::Sampled)?;
    // Draw the reference actions on the sampling mesh, then hold each one
    // over the simulation intervals it covers.
    let per_sample = settings.intervals / settings.sampling_intervals;
    let sampling_grid = TimeGrid::uniform(m.horizon, settings.sampling_intervals, Some(per_sample * settings.substeps))?;
    let reference = Simulation::new(&policy, &sampling_grid, ctx.init, settings.seed, Regime::Sampled)?;
    let frozen: Vec<f64> = reference
        .frozen_actions(realization)?
        .iter()
        .flat_map(|&u| std::iter::repeat(u).take(per_sample))
        .collect();
    let u2_star = policy.follower_response(0.0, ctx.init.p)?.action(frozen[0]);

    let base_scenario = Scenario {
        frozen_actions: Some(frozen),
        ..Scenario::default()
    };
    let nodes = all_window_nodes(specs, settings, &grid)?;
    let base = sim.run_paths(
        &base_scenario,
        settings.n_paths,
        &RunOptions {
            stop_node: None,
            checkpoints: nodes,
        },
    )?;

    let mut reports = Vec::with_capacity(specs.len());
    for spec in specs {
        let windows = windows_for(spec, settings, &grid)?;
        let mut z_window = Vec::with_capacity(windows.len());
        let mut controls = Vec::with_capacity(windows.len());
        for w in &windows {
            let scenario = Scenario {
                follower_override: Some(FollowerOverride {
                    until: w.h,
                    action: u2_star + spec.magnitude,
                }),
                ..base_scenario.clone()
            };
            let opts = RunOptions {
                stop_node: Some(w.node),
                checkpoints: Vec::new(),
            };
            let pert = sim.run_paths(&scenario, settings.n_paths, &opts)?;
            z_window.push(pert.iter().map(|o| end_z(o, Investor::Follower, m)).collect());
            controls.push(market_controls(&base, w.node, w.h, m.sigma).to_vec());
        }
        reports.push(assemble(
            spec,
            &windows,
            &z_window,
            0.0,
            &base,
            Investor::Follower,
            m,
            &controls,
            Some(realization),
        )?);
    }
    Ok(reports)
}

/// Leader slopes under the exploratory dynamics, including the change in
/// the entropy bonus.
pub fn leader_slope_test(
    ctx: &VerifyContext<'_>,
    specs: &[PerturbationSpec],
    settings: &SlopeSettings,
) -> Result<Vec<SlopeReport>> {
    let m = &ctx.params;
    settings.check()?;
    expect_kinds(
        specs,
        &[PerturbationKind::LeaderMeanShift, PerturbationKind::LeaderVarianceScale],
        m.horizon,
    )?;
    let policy = ctx.policy()?;
    let grid = settings.grid(m.horizon)?;
    let sim = Simulation::new(&policy, &grid, ctx.init, settings.seed, Regime::Exploratory)?;
    let nodes = all_window_nodes(specs, settings, &grid)?;
    let base = sim.run_paths(
        &Scenario::equilibrium(),
        settings.n_paths,
        &RunOptions {
            stop_node: None,
            checkpoints: nodes,
        },
    )?;

    let mut reports = Vec::with_capacity(specs.len());
    for spec in specs {
        let (mean_offset, variance_scale) = match spec.kind {
            PerturbationKind::LeaderMeanShift => (spec.magnitude, 1.0),
            _ => (0.0, spec.magnitude),
        };
        let entropy_rate = if variance_scale == 1.0 {
            0.0
        } else {
            m.lambda0 * (gaussian_entropy(policy.variance() * variance_scale)? - policy.entropy()?)
        };
        let windows = windows_for(spec, settings, &grid)?;
        let mut z_window = Vec::with_capacity(windows.len());
        let mut controls = Vec::with_capacity(windows.len());
        for w in &windows {
            let scenario = Scenario {
                leader_deviation: Some(PolicyDeviation {
                    until: w.h,
                    mean_offset,
                    variance_scale,
                }),
                ..Scenario::default()
            };
            let opts = RunOptions {
                stop_node: Some(w.node),
                checkpoints: Vec::new(),
            };
            let pert = sim.run_paths(&scenario, settings.n_paths, &opts)?;
            z_window.push(pert.iter().map(|o| end_z(o, Investor::Leader, m)).collect());
            let mut ctl = market_controls(&base, w.node, w.h, m.sigma).to_vec();
            ctl.extend(exploration_controls(&base, w.node, w.h, m.sigma));
            controls.push(ctl);
        }
        reports.push(assemble(
            spec,
            &windows,
            &z_window,
            entropy_rate,
            &base,
            Investor::Leader,
            m,
            &controls,
            None,
        )?);
    }
    Ok(reports)
}

/// Least-squares coefficients `[a, b, c]` of `y = a + b x + c x^2`.
pub fn fit_quadratic(x: &[f64], y: &[f64]) -> Result<[f64; 3]> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidParameter {
            field: "points",
            reason: "a quadratic fit needs at least three paired points".into(),
        });
    }
    let design = DMatrix::from_fn(x.len(), 3, |i, j| x[i].powi(j as i32));
    let rhs = DVector::from_column_slice(y);
    let svd = design.svd(true, true);
    let c = svd.solve(&rhs, 1e-12).map_err(|e| Error::InvalidParameter {
        field: "points",
        reason: e.to_string(),
    })?;
    Ok([c[0], c[1], c[2]])
}

/// Magnitude with the largest extrapolated slope among `reports` of `kind`.
pub fn argmax_magnitude(reports: &[SlopeReport], kind: PerturbationKind) -> Option<f64> {
    reports
        .iter()
        .filter(|r| r.spec.kind == kind)
        .max_by(|a, b| a.extrapolated.total_cmp(&b.extrapolated))
        .map(|r| r.spec.magnitude)
}
