//! Configuration-driven experiment runner.
//!
//! A run reads a TOML [`ExperimentConfig`], executes one experiment and
//! writes CSV artifacts, a `summary.txt` of pass flags, the effective
//! configuration and a `manifest.txt` into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::market_model::{Investor, ModelParams};
use crate::objectives::{estimate_follower_objective, estimate_leader_objective, value_function, write_estimates_csv};
use crate::pde_solver::{EquilibriumSurfaces, PdeGridSpec, Quantity, ValueSurface};
use crate::simulator::{InitialState, Regime, RunOptions, Scenario, Simulation, TimeGrid};
use crate::strategies::{leader_policy, single_investor_strategy};
use crate::verify::certificate::{default_deviations, CertificateSettings, Deviation};
use crate::verify::checks::write_checks_csv;
use crate::verify::convergence::DEFAULT_FINE_STEPS;
use crate::verify::slopes::write_slope_csv;
use crate::verify::{
    convergence_study, default_follower_specs, default_leader_specs, filter_checks, follower_slope_test,
    leader_slope_test, reduction_checks, stackelberg_certificate, u1_cancellation_check, ConvergenceReport,
    SlopeSettings, VerifyContext,
};
use crate::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SolveSurfaces,
    Simulate,
    VerifyFollower,
    VerifyLeader,
    Convergence,
    Certificate,
    ReduceChecks,
}

impl Experiment {
    pub fn label(self) -> &'static str {
        match self {
            Experiment::SolveSurfaces => "solve_surfaces",
            Experiment::Simulate => "simulate",
            Experiment::VerifyFollower => "verify_follower",
            Experiment::VerifyLeader => "verify_leader",
            Experiment::Convergence => "convergence",
            Experiment::Certificate => "certificate",
            Experiment::ReduceChecks => "reduce_checks",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Uniform grid with this many intervals; ignored when `nodes` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    pub n_paths: usize,
    pub x1_0: f64,
    pub x2_0: f64,
    pub p0: f64,
    pub seed: u64,
    /// Regime for `simulate`; both when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
}

impl SimulationConfig {
    pub fn init(&self) -> InitialState {
        InitialState {
            x1: self.x1_0,
            x2: self.x2_0,
            p: self.p0,
        }
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        match &self.nodes {
            Some(nodes) => TimeGrid::from_nodes(nodes.clone(), self.substeps),
            None => TimeGrid::uniform(horizon, self.intervals.unwrap_or(64), self.substeps),
        }
    }
}

fn default_halvings() -> u32 {
    2
}
fn default_realizations() -> u64 {
    8
}
fn default_slope_intervals() -> usize {
    256
}
fn default_slope_substeps() -> usize {
    8
}
fn default_sampling_intervals() -> usize {
    64
}
fn default_meshes() -> Vec<usize> {
    vec![8, 16, 32, 64]
}
fn default_fine_steps() -> usize {
    DEFAULT_FINE_STEPS
}
fn default_certificate_intervals() -> usize {
    64
}
fn default_check_samples() -> usize {
    10_000
}

/// Settings of the verification experiments; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Longest perturbation window; `T/64` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    #[serde(default = "default_halvings")]
    pub halvings: u32,
    /// Frozen leader action sequences in the follower test.
    #[serde(default = "default_realizations")]
    pub realizations: u64,
    #[serde(default = "default_slope_intervals")]
    pub slope_intervals: usize,
    #[serde(default = "default_slope_substeps")]
    pub slope_substeps: usize,
    #[serde(default = "default_sampling_intervals")]
    pub sampling_intervals: usize,
    /// Interval counts `n` of the meshes `T/n` in the convergence study.
    #[serde(default = "default_meshes")]
    pub meshes: Vec<usize>,
    #[serde(default = "default_fine_steps")]
    pub fine_steps: usize,
    #[serde(default = "default_certificate_intervals")]
    pub certificate_intervals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviations: Option<Vec<Deviation>>,
    /// Random triples in the cancellation check.
    #[serde(default = "default_check_samples")]
    pub check_samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            window: None,
            halvings: default_halvings(),
            realizations: default_realizations(),
            slope_intervals: default_slope_intervals(),
            slope_substeps: default_slope_substeps(),
            sampling_intervals: default_sampling_intervals(),
            meshes: default_meshes(),
            fine_steps: default_fine_steps(),
            certificate_intervals: default_certificate_intervals(),
            deviations: None,
            check_samples: default_check_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub output_dir: PathBuf,
    pub model: ModelParams,
    #[serde(default)]
    pub pde: PdeGridSpec,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            msg: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let config = |path: &str, msg: String| Error::Config {
            path: path.to_string(),
            msg,
        };
        self.model.validate().map_err(|e| config("model", e.to_string()))?;
        self.pde.validate().map_err(|e| config("pde", e.to_string()))?;
        let sim = &self.simulation;
        if !(sim.p0 > 0.0 && sim.p0 < 1.0) {
            return Err(config("simulation.p0", format!("must lie in (0, 1), got {}", sim.p0)));
        }
        sim.init().validate().map_err(|e| config("simulation", e.to_string()))?;
        if sim.n_paths < 2 {
            return Err(config("simulation.n_paths", "need at least 2 paths".into()));
        }
        let grid = sim
            .grid(self.model.horizon)
            .map_err(|e| config("simulation.nodes", e.to_string()))?;
        if (grid.horizon() - self.model.horizon).abs() > 1e-12 * self.model.horizon {
            return Err(config(
                "simulation.nodes",
                format!("grid ends at {} but T = {}", grid.horizon(), self.model.horizon),
            ));
        }
        let v = &self.verify;
        if let Some(w) = v.window {
            if !(w > 0.0 && w <= self.model.horizon) {
                return Err(config("verify.window", format!("must lie in (0, T], got {w}")));
            }
        }
        if v.meshes.is_empty() || v.meshes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config("verify.meshes", "interval counts must be strictly increasing".into()));
        }
        if v.realizations == 0 {
            return Err(config("verify.realizations", "need at least one realization".into()));
        }
        Ok(())
    }
}

/// One point of a long-format plot table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

/// Writes `x,y,series` rows.
pub fn emit_plot_data(points: &[PlotPoint], out_path: &Path) -> Result<()> {
    let mut out = String::from("x,y,series\n");
    for p in points {
        writeln!(out, "{},{},{}", fmt_f64(p.x), fmt_f64(p.y), p.series).unwrap();
    }
    fs::write(out_path, out)?;
    Ok(())
}

/// `t`-slices of a surface at `p = 0.1, ..., 0.9`, one series per `p`.
pub fn surface_slices(surface: &ValueSurface) -> Result<Vec<PlotPoint>> {
    let g = surface.grid();
    let mut out = Vec::new();
    for k in 1..=9 {
        let p = k as f64 / 10.0;
        for level in 0..g.n_time {
            let t = surface.time(level);
            out.push(PlotPoint {
                x: t,
                y: surface.interpolate(t, p, Quantity::Value)?,
                series: format!("p={p:.1}"),
            });
        }
    }
    Ok(out)
}

/// Log-log gap table with a first-order reference line through the
/// coarsest gap.
pub fn convergence_plot(report: &ConvergenceReport) -> Vec<PlotPoint> {
    let mut out = Vec::new();
    let Some((&h0, &g0)) = report.meshes.first().zip(report.objective_gaps.first()) else {
        return out;
    };
    for (&h, &g) in report.meshes.iter().zip(&report.objective_gaps) {
        out.push(PlotPoint {
            x: h.ln(),
            y: g.ln(),
            series: "gap".into(),
        });
        out.push(PlotPoint {
            x: h.ln(),
            y: (g0 * h / h0).ln(),
            series: "first_order".into(),
        });
    }
    out
}

/// Leader's policy mean at `t = 0` over the p-nodes, next to the
/// single-investor demand with both relative-concern weights set to zero.
pub fn leader_mean_overlay(params: &ModelParams, surfaces: &EquilibriumSurfaces) -> Result<Vec<PlotPoint>> {
    let policy = leader_policy(params, &surfaces.a1, &surfaces.a2)?;
    let alone = ModelParams {
        lambda1: 0.0,
        lambda2: 0.0,
        ..*params
    };
    let a1_alone = crate::pde_solver::solve_a(&alone, Investor::Leader, surfaces.a1.grid())?;
    let g = surfaces.a1.grid();
    let mut out = Vec::new();
    for j in 0..g.n_nodes() {
        let p = g.p_node(j);
        out.push(PlotPoint {
            x: p,
            y: policy.mean(0.0, p)?,
            series: "leader_mean".into(),
        });
        out.push(PlotPoint {
            x: p,
            y: single_investor_strategy(0.0, p, &a1_alone, &alone)?,
            series: "single_investor".into(),
        });
    }
    Ok(out)
}

/// Result of a run: overall verdict and `key=value` summary lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub summary: Vec<(String, String)>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            pass: true,
            summary: Vec::new(),
        }
    }

    fn put(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    fn claim(&mut self, key: &str, ok: bool) {
        self.put(key, if ok { "pass" } else { "fail" });
        self.pass &= ok;
    }
}

/// Runs `cfg`, writing every artifact into its output directory.
pub fn run_config(cfg: &ExperimentConfig, dump_paths: bool) -> Result<Outcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let m = cfg.model;
    let surfaces = EquilibriumSurfaces::solve(&m, &cfg.pde)?;
    let ctx = VerifyContext::new(m, &surfaces, cfg.simulation.init())?;
    let sim = &cfg.simulation;
    let v = &cfg.verify;
    let mut out = Outcome::new();
    out.put("experiment", cfg.experiment.label());

    match cfg.experiment {
        Experiment::SolveSurfaces => {
            for s in surfaces.all() {
                s.write_csv(dir)?;
                let finite = s.values().iter().all(|x| x.is_finite());
                out.claim(&format!("{}_finite", s.kind().label()), finite);
                let (lo, hi) = s
                    .values()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                out.put(&format!("{}_min", s.kind().label()), fmt_f64(lo));
                out.put(&format!("{}_max", s.kind().label()), fmt_f64(hi));
            }
            emit_plot_data(&surface_slices(&surfaces.big_a2)?, &dir.join("plot_big_a2_slices.csv"))?;
            emit_plot_data(&leader_mean_overlay(&m, &surfaces)?, &dir.join("plot_leader_mean.csv"))?;
        }
        Experiment::Simulate => {
            let grid = sim.grid(m.horizon)?;
            let policy = ctx.policy()?;
            let regimes = match sim.regime {
                Some(r) => vec![r],
                None => vec![Regime::Sampled, Regime::Exploratory],
            };
            let mut estimates = Vec::new();
            for regime in regimes {
                let s = Simulation::new(&policy, &grid, ctx.init, sim.seed, regime)?;
                let paths = s.run_paths(&Scenario::equilibrium(), sim.n_paths, &RunOptions::default())?;
                let follower = estimate_follower_objective(&paths, &m)?;
                let leader = estimate_leader_objective(&paths, &policy, &m, regime)?;
                let closed = |who, surface| value_function(who, 0.0, ctx.init.x1, ctx.init.x2, ctx.init.p, surface, &m);
                match regime {
                    Regime::Exploratory => {
                        let target = closed(Investor::Leader, &surfaces.big_a1)?;
                        out.put("leader_value_function", fmt_f64(target));
                        out.claim(
                            "leader_value_closure",
                            (leader.value - target).abs() <= 4.0 * leader.std_error,
                        );
                    }
                    Regime::Sampled => {
                        // Conditional on one frozen leader action sequence.
                        let frozen = Scenario {
                            frozen_actions: Some(s.frozen_actions(0)?),
                            ..Scenario::default()
                        };
                        let cond = s.run_paths(&frozen, sim.n_paths, &RunOptions::default())?;
                        let est = estimate_follower_objective(&cond, &m)?;
                        let target = closed(Investor::Follower, &surfaces.big_a2)?;
                        out.put("follower_value_function", fmt_f64(target));
                        out.put("follower_frozen_value", fmt_f64(est.value));
                        out.claim("follower_value_closure", (est.value - target).abs() <= 4.0 * est.std_error);
                    }
                }
                estimates.push(leader);
                estimates.push(follower);
                if dump_paths {
                    for path in 0..sim.n_paths.min(10) as u64 {
                        let bundle = s.record_path(&Scenario::equilibrium(), path)?;
                        bundle.write_csv(&dir.join(format!("path_{}_{path:03}.csv", regime.label())))?;
                    }
                }
            }
            write_estimates_csv(&dir.join("estimates.csv"), &estimates)?;
        }
        Experiment::VerifyFollower => {
            let settings = slope_settings(sim, v);
            let specs = default_follower_specs(v.window.unwrap_or(m.horizon / 64.0));
            let mut reports = Vec::new();
            for r in 0..v.realizations {
                reports.extend(follower_slope_test(&ctx, &specs, &settings, r)?);
            }
            write_slope_csv(&dir.join("follower_slopes.csv"), &reports)?;
            out.put("reports", reports.len());
            out.claim("follower_slopes", reports.iter().all(|r| r.pass));
        }
        Experiment::VerifyLeader => {
            let settings = slope_settings(sim, v);
            let specs = default_leader_specs(v.window.unwrap_or(m.horizon / 64.0));
            let reports = leader_slope_test(&ctx, &specs, &settings)?;
            write_slope_csv(&dir.join("leader_slopes.csv"), &reports)?;
            out.put("reports", reports.len());
            out.claim("leader_slopes", reports.iter().all(|r| r.pass));
        }
        Experiment::Convergence => {
            let rep = convergence_study(&ctx, &v.meshes, sim.n_paths, sim.seed, v.fine_steps)?;
            rep.write_csv(&dir.join("convergence.csv"))?;
            emit_plot_data(&convergence_plot(&rep), &dir.join("plot_convergence.csv"))?;
            out.put("fitted_order", fmt_f64(rep.fitted_order));
            out.put("epsilon", fmt_f64(rep.epsilon));
            out.put("monotone", rep.monotone);
            out.put("noise_limited", rep.noise_limited);
            if let Some(n) = rep.recommended_paths {
                out.put("recommended_paths", n);
            }
            out.claim("convergence", rep.pass);
        }
        Experiment::Certificate => {
            let mut settings = CertificateSettings::new(v.certificate_intervals, sim.n_paths, sim.seed);
            settings.substeps = (v.fine_steps / v.certificate_intervals).max(1);
            let deviations = v.deviations.clone().unwrap_or_else(default_deviations);
            let rep = stackelberg_certificate(&ctx, &settings, &deviations)?;
            rep.write_csv(&dir.join("certificate.csv"))?;
            out.put("max_improvement", fmt_f64(rep.max_improvement));
            out.put("max_std_error", fmt_f64(rep.max_std_error));
            out.put("epsilon", fmt_f64(rep.epsilon));
            if let Some(n) = rep.recommended_intervals {
                out.put("recommended_intervals", n);
            }
            out.claim("certificate", rep.pass);
        }
        Experiment::ReduceChecks => {
            let mut checks = reduction_checks(&m, &cfg.pde)?.checks;
            checks.push(u1_cancellation_check(&m, &surfaces.a2, v.check_samples, sim.seed)?);
            let grid = sim.grid(m.horizon)?;
            let filter = filter_checks(&m, &grid, sim.p0, sim.seed, sim.n_paths)?;
            write_checks_csv(&dir.join("checks.csv"), &checks)?;
            for c in &checks {
                out.claim(&c.name, c.pass);
            }
            for (k, c) in filter.martingale.iter().enumerate() {
                out.put(&format!("filter_mean_{k}"), fmt_f64(c.mean));
                out.claim(&format!("filter_martingale_{k}"), c.pass);
            }
            out.put("filter_excursion_rate", fmt_f64(filter.excursion_rate));
            out.claim("filter_confined", filter.confined);
        }
    }

    out.put("status", if out.pass { "pass" } else { "fail" });
    let mut text = String::new();
    for (k, val) in &out.summary {
        writeln!(text, "{k}={val}").unwrap();
    }
    fs::write(dir.join("summary.txt"), text)?;
    Ok(out)
}

fn slope_settings(sim: &SimulationConfig, v: &VerifyConfig) -> SlopeSettings {
    SlopeSettings {
        n_paths: sim.n_paths,
        seed: sim.seed,
        halvings: v.halvings,
        intervals: v.slope_intervals,
        substeps: v.slope_substeps,
        sampling_intervals: v.sampling_intervals,
    }
}

/// `key=value` manifest of a run.
pub fn manifest(cfg_text: &str, cfg: &ExperimentConfig, threads: usize, status: &str) -> String {
    let hash = Sha256::digest(cfg_text.as_bytes());
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!(
        "tool_version={}\nexperiment={}\nseed={}\nconfig=config.toml\nconfig_sha256={hex}\nthreads={threads}\nstatus={status}\ntimestamp={timestamp}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.experiment.label(),
        cfg.simulation.seed,
    )
}

#[derive(Debug, Parser)]
#[command(name = "stackelberg-mv", version, about = "Solve and verify the leader-follower mean-variance equilibrium")]
pub struct Args {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed, overriding `simulation.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Write the first recorded paths of `simulate` runs.
    #[arg(long)]
    pub dump_paths: bool,
}

/// Exit status of a CLI invocation.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CLAIM_FAILED: i32 = 2;

/// Loads the configuration, applies flag overrides, runs and writes the
/// manifest. Returns the process exit code.
pub fn run(args: &Args) -> Result<i32> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.simulation.seed = seed;
    }
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    // A second initialisation in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let effective = cfg.to_toml();
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), &effective)?;
    let outcome = run_config(&cfg, args.dump_paths);
    let (status, code) = match &outcome {
        Ok(o) if o.pass => ("pass", EXIT_PASS),
        Ok(_) => ("fail", EXIT_CLAIM_FAILED),
        Err(_) => ("error", EXIT_ERROR),
    };
    fs::write(cfg.output_dir.join("manifest.txt"), manifest(&effective, &cfg, threads, status))?;
    outcome.map(|_| code)
}
