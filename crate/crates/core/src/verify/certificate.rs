//! Approximate no-deviation check for the leader under sampled dynamics.
//!
//! Each deviation replaces the leader's policy on the first grid interval by
//! a Gaussian with shifted mean and scaled variance. Its effect on the
//! sampled objective is estimated with shared noise and compared with the
//! measured sampled-versus-exploratory gap at the same mesh.

use serde::Serialize;

use super::convergence::{convergence_study, ConvergenceReport, DEFAULT_FINE_STEPS};
use super::VerifyContext;
use crate::error::{Error, Result};
use crate::market_model::Investor;
use crate::objectives::{entropy_integral, influence, mean_variance, mean_with_controls};
use crate::simulator::{relative_wealth, PolicyDeviation, Regime, RunOptions, Scenario, Simulation, TimeGrid};

/// One policy replacement on the first interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Deviation {
    pub mean_offset: f64,
    pub variance_scale: f64,
}

impl Deviation {
    pub fn is_null(&self) -> bool {
        self.mean_offset == 0.0 && self.variance_scale == 1.0
    }
}

/// Offsets `{-1, -0.5, 0.5, 1}` at unit scale and scales `{0.5, 2}` at zero
/// offset.
pub fn default_deviations() -> Vec<Deviation> {
    let mut out: Vec<Deviation> = [-1.0, -0.5, 0.5, 1.0]
        .iter()
        .map(|&mean_offset| Deviation {
            mean_offset,
            variance_scale: 1.0,
        })
        .collect();
    out.extend([0.5, 2.0].iter().map(|&variance_scale| Deviation {
        mean_offset: 0.0,
        variance_scale,
    }));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationResult {
    pub deviation: Deviation,
    /// `J(deviating) - J(equilibrium)`, sampled dynamics, entropy included.
    pub improvement: f64,
    pub std_error: f64,
    pub unpaired_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub intervals: usize,
    pub mesh: f64,
    pub n_paths: usize,
    pub results: Vec<DeviationResult>,
    pub max_improvement: f64,
    /// Standard error of the maximising deviation.
    pub max_std_error: f64,
    pub epsilon: f64,
    pub epsilon_std_error: f64,
    pub pass: bool,
    /// Finer interval count to try when the certificate fails.
    pub recommended_intervals: Option<usize>,
}

impl CertificateReport {
    pub const CSV_HEADER: &'static str =
        "mean_offset,variance_scale,improvement,std_error,unpaired_std_error,epsilon,mesh";

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let f = crate::fmt_f64;
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f(r.deviation.mean_offset),
                f(r.deviation.variance_scale),
                f(r.improvement),
                f(r.std_error),
                f(r.unpaired_std_error),
                f(self.epsilon),
                f(self.mesh)
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateSettings {
    /// Sampling grid is `T / intervals`.
    pub intervals: usize,
    /// Euler steps per interval.
    pub substeps: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Paths for the gap measurement that supplies epsilon.
    pub convergence_paths: usize,
}

impl CertificateSettings {
    pub fn new(intervals: usize, n_paths: usize, seed: u64) -> Self {
        CertificateSettings {
            intervals,
            substeps: (DEFAULT_FINE_STEPS / intervals.max(1)).max(1),
            n_paths,
            seed,
            convergence_paths: n_paths,
        }
    }
}

pub fn stackelberg_certificate(
    ctx: &VerifyContext<'_>,
    settings: &CertificateSettings,
    deviations: &[Deviation],
) -> Result<CertificateReport> {
    let m = &ctx.params;
    if deviations.is_empty() {
        return Err(Error::InvalidParameter {
            field: "deviation_grid",
            reason: "needs at least one deviation".into(),
        });
    }
    if let Some(d) = deviations.iter().find(|d| !(d.variance_scale > 0.0) || !d.mean_offset.is_finite()) {
        return Err(Error::InvalidParameter {
            field: "deviation_grid",
            reason: format!("invalid deviation {d:?}"),
        });
    }
    if settings.n_paths < 2 {
        return Err(Error::InsufficientPaths {
            needed: 2,
            got: settings.n_paths,
        });
    }
    let policy = ctx.policy()?;
    let grid = TimeGrid::uniform(m.horizon, settings.intervals, Some(settings.substeps))?;
    let sim = Simulation::new(&policy, &grid, ctx.init, settings.seed, Regime::Sampled)?;
    let h = grid.nodes()[1];
    let base = sim.run_paths(
        &Scenario::equilibrium(),
        settings.n_paths,
        &RunOptions {
            stop_node: None,
            checkpoints: vec![1],
        },
    )?;
    let z = |x1: f64, x2: f64| relative_wealth(Investor::Leader, x1, x2, m);
    let z_base: Vec<f64> = base.iter().map(|o| z(o.end.x1, o.end.x2)).collect();
    let z_base_h: Vec<f64> = base.iter().map(|o| z(o.checkpoints[0].x1, o.checkpoints[0].x2)).collect();

    // Zero-mean functions of the first action draw and the first market
    // increment; both arms share them.
    let s2 = m.sigma * m.sigma;
    let xi: Vec<f64> = base.iter().map(|o| o.first_draw).collect();
    let dw: Vec<f64> = base.iter().map(|o| o.checkpoints[0].w_hat).collect();
    let controls = vec![
        xi.clone(),
        xi.iter().map(|x| x * x - 1.0).collect(),
        xi.iter().zip(&dw).map(|(x, w)| x * m.sigma * w).collect(),
        xi.iter().zip(&dw).map(|(x, w)| s2 * (x * x * w * w - h)).collect(),
    ];

    let base_mv = mean_variance(&z_base, m.gamma1)?;
    let ib = influence(&z_base, m.gamma1)?;
    let entropy_base = entropy_integral(&policy, &grid, None)?;
    let opts = RunOptions {
        stop_node: Some(1),
        checkpoints: Vec::new(),
    };
    let mut results = Vec::with_capacity(deviations.len());
    for d in deviations {
        let dev = PolicyDeviation {
            until: h,
            mean_offset: d.mean_offset,
            variance_scale: d.variance_scale,
        };
        let scenario = Scenario {
            leader_deviation: Some(dev),
            ..Scenario::default()
        };
        let pert = sim.run_paths(&scenario, settings.n_paths, &opts)?;
        let z_pert: Vec<f64> = pert
            .iter()
            .zip(&z_base)
            .zip(&z_base_h)
            .map(|((o, zb), zh)| zb - zh + z(o.end.x1, o.end.x2))
            .collect();
        let entropy_gain = m.lambda0 * (entropy_integral(&policy, &grid, Some(&dev))? - entropy_base);
        let pert_mv = mean_variance(&z_pert, m.gamma1)?;
        let ip = influence(&z_pert, m.gamma1)?;
        let diff: Vec<f64> = ip.iter().zip(&ib).map(|(a, b)| a - b).collect();
        let raw = diff.iter().sum::<f64>() / diff.len() as f64;
        let (adjusted, std_error) = mean_with_controls(&diff, &controls)?;
        results.push(DeviationResult {
            deviation: *d,
            improvement: pert_mv.value - base_mv.value + entropy_gain + adjusted - raw,
            std_error,
            unpaired_std_error: (pert_mv.std_error.powi(2) + base_mv.std_error.powi(2)).sqrt(),
        });
    }

    let top = results
        .iter()
        .max_by(|a, b| a.improvement.total_cmp(&b.improvement))
        .copied()
        .expect("non-empty deviation grid");
    let gap: ConvergenceReport = convergence_study(
        ctx,
        &[settings.intervals],
        settings.convergence_paths,
        settings.seed ^ 0x5eed_c0de,
        settings.intervals * settings.substeps,
    )?;
    let epsilon = gap.epsilon;
    let pass = top.improvement <= epsilon + 3.0 * top.std_error;
    Ok(CertificateReport {
        intervals: settings.intervals,
        mesh: grid.mesh(),
        n_paths: settings.n_paths,
        results,
        max_improvement: top.improvement,
        max_std_error: top.std_error,
        epsilon,
        epsilon_std_error: gap.rows[0].std_error,
        pass,
        recommended_intervals: (!pass).then_some(settings.intervals * 2),
    })
}
