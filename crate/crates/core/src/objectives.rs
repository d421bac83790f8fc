//! Monte Carlo mean-variance objectives and the closed-form value functions.
//!
//! Standard errors come from the influence function of the plug-in
//! mean-variance functional, `z - (gamma/2) ((z - m)^2 - s^2)`, whose sample
//! variance carries the third and fourth central moments (delta method).
//! Paired comparisons use the difference of two influence functions on the
//! same paths and may be sharpened with zero-mean control variates.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::market_model::{Investor, ModelParams};
use crate::pde_solver::{Quantity, SurfaceKind, ValueSurface};
use crate::simulator::{relative_wealth, PathBundle, PathOutcome, PolicyDeviation, Regime, TimeGrid};
use crate::strategies::{gaussian_entropy, GaussianPolicy};

/// Anything that carries terminal wealth of both investors.
pub trait TerminalWealth {
    fn regime(&self) -> Regime;
    /// `(X1(T), X2(T))`.
    fn terminal(&self) -> (f64, f64);
}

impl TerminalWealth for PathOutcome {
    fn regime(&self) -> Regime {
        self.regime
    }

    fn terminal(&self) -> (f64, f64) {
        (self.end.x1, self.end.x2)
    }
}

impl TerminalWealth for PathBundle {
    fn regime(&self) -> Regime {
        self.regime
    }

    fn terminal(&self) -> (f64, f64) {
        (*self.x1.last().expect("bundle is non-empty"), *self.x2.last().expect("bundle is non-empty"))
    }
}

/// Monte Carlo estimate of one investor's objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    pub who: Investor,
    pub regime: Regime,
    pub n_paths: usize,
    pub mean_term: f64,
    pub variance_term: f64,
    /// Time integral of the policy entropy; zero for the follower and when
    /// the entropy weight vanishes.
    pub entropy_term: f64,
    pub value: f64,
    pub std_error: f64,
}

impl ObjectiveEstimate {
    pub const CSV_HEADER: &'static str = "who,regime,n_paths,mean_term,variance_term,entropy_term,value,std_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.who.label(),
            self.regime.label(),
            self.n_paths,
            crate::fmt_f64(self.mean_term),
            crate::fmt_f64(self.variance_term),
            crate::fmt_f64(self.entropy_term),
            crate::fmt_f64(self.value),
            crate::fmt_f64(self.std_error),
        )
    }
}

pub fn write_estimates_csv(path: &Path, estimates: &[ObjectiveEstimate]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", ObjectiveEstimate::CSV_HEADER)?;
    for e in estimates {
        writeln!(w, "{}", e.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Plug-in mean-variance statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanVariance {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// `mean - (gamma/2) variance`.
    pub value: f64,
    pub std_error: f64,
}

fn need_paths(n: usize) -> Result<()> {
    if n < 2 {
        Err(Error::InsufficientPaths { needed: 2, got: n })
    } else {
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Influence-function values of `mean - (gamma/2) variance` at each sample.
pub fn influence(z: &[f64], gamma: f64) -> Result<Vec<f64>> {
    need_paths(z.len())?;
    let m = mean(z);
    let s2 = sample_variance(z, m);
    Ok(z.iter().map(|&x| x - 0.5 * gamma * ((x - m) * (x - m) - s2)).collect())
}

pub fn mean_variance(z: &[f64], gamma: f64) -> Result<MeanVariance> {
    need_paths(z.len())?;
    let m = mean(z);
    let variance = sample_variance(z, m);
    let inf = influence(z, gamma)?;
    let std_error = (sample_variance(&inf, mean(&inf)) / z.len() as f64).sqrt();
    Ok(MeanVariance {
        mean: m,
        variance,
        value: m - 0.5 * gamma * variance,
        std_error,
    })
}

fn terminal_z<T: TerminalWealth>(paths: &[T], who: Investor, params: &ModelParams) -> Result<(Regime, Vec<f64>)> {
    need_paths(paths.len())?;
    let regime = paths[0].regime();
    if paths.iter().any(|p| p.regime() != regime) {
        return Err(Error::MixedRegimes);
    }
    let z = paths
        .iter()
        .map(|p| {
            let (x1, x2) = p.terminal();
            relative_wealth(who, x1, x2, params)
        })
        .collect();
    Ok((regime, z))
}

/// Mean-variance objective of the follower's terminal relative wealth.
pub fn estimate_follower_objective<T: TerminalWealth>(paths: &[T], params: &ModelParams) -> Result<ObjectiveEstimate> {
    let (regime, z) = terminal_z(paths, Investor::Follower, params)?;
    let mv = mean_variance(&z, params.gamma2)?;
    Ok(ObjectiveEstimate {
        who: Investor::Follower,
        regime,
        n_paths: z.len(),
        mean_term: mv.mean,
        variance_term: mv.variance,
        entropy_term: 0.0,
        value: mv.value,
        std_error: mv.std_error,
    })
}

/// Entropy-regularised objective of the leader under the equilibrium policy,
/// whose entropy integral is `T` times the constant policy entropy.
pub fn estimate_leader_objective<T: TerminalWealth>(
    paths: &[T],
    policy: &GaussianPolicy<'_>,
    params: &ModelParams,
    regime: Regime,
) -> Result<ObjectiveEstimate> {
    let entropy = if params.lambda0 > 0.0 {
        policy.entropy()? * params.horizon
    } else {
        0.0
    };
    estimate_leader_objective_with_entropy(paths, entropy, params, regime)
}

/// Leader objective with an externally supplied entropy integral.
pub fn estimate_leader_objective_with_entropy<T: TerminalWealth>(
    paths: &[T],
    entropy_integral: f64,
    params: &ModelParams,
    regime: Regime,
) -> Result<ObjectiveEstimate> {
    let (found, z) = terminal_z(paths, Investor::Leader, params)?;
    if found != regime {
        return Err(Error::MixedRegimes);
    }
    let mv = mean_variance(&z, params.gamma1)?;
    let entropy_term = if params.lambda0 > 0.0 { entropy_integral } else { 0.0 };
    Ok(ObjectiveEstimate {
        who: Investor::Leader,
        regime,
        n_paths: z.len(),
        mean_term: mv.mean,
        variance_term: mv.variance,
        entropy_term,
        value: mv.value + params.lambda0 * entropy_term,
        std_error: mv.std_error,
    })
}

/// Left-endpoint quadrature of the policy entropy over the grid, with the
/// variance scaled on intervals starting before `deviation.until`.
pub fn entropy_integral(policy: &GaussianPolicy<'_>, grid: &TimeGrid, deviation: Option<&PolicyDeviation>) -> Result<f64> {
    let base = policy.entropy()?;
    let mut total = 0.0;
    for w in grid.nodes().windows(2) {
        let h = match deviation {
            Some(d) if w[0] < d.until => gaussian_entropy(policy.variance() * d.variance_scale)?,
            _ => base,
        };
        total += h * (w[1] - w[0]);
    }
    Ok(total)
}

/// Closed-form equilibrium value `(1 - lambda/2) x_own - (lambda/2) x_other + A(t, p)`.
pub fn value_function(
    who: Investor,
    t: f64,
    x1: f64,
    x2: f64,
    p: f64,
    surface: &ValueSurface,
    params: &ModelParams,
) -> Result<f64> {
    let kind = SurfaceKind::value(who);
    if surface.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.label(),
            found: surface.kind().label(),
        });
    }
    Ok(relative_wealth(who, x1, x2, params) + surface.interpolate(t, p, Quantity::Value)?)
}

/// Mean of `y` with optional regression-adjusted control variates, each
/// known to have mean zero. Returns `(estimate, std_error)`.
///
/// Controls that are (numerically) linearly dependent on earlier ones are
/// dropped.
pub fn mean_with_controls(y: &[f64], controls: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n = y.len();
    need_paths(n)?;
    if controls.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidParameter {
            field: "controls",
            reason: "every control needs one value per path".into(),
        });
    }
    let y_bar = mean(y);
    let mut kept: Vec<&Vec<f64>> = Vec::new();
    for c in controls {
        let var = sample_variance(c, mean(c));
        if var > 0.0 && var.is_finite() {
            kept.push(c);
        }
    }
    // Fit y on [1, controls] by least squares and report the intercept
    // shifted by the fitted control means, which equals mean(y) - b.mean(C).
    let mut coef = DVector::zeros(kept.len());
    let mut cols = kept.len();
    if cols > 0 {
        let c_bar: Vec<f64> = kept.iter().map(|c| mean(c)).collect();
        let mut sxx = DMatrix::zeros(cols, cols);
        let mut sxy = DVector::zeros(cols);
        for i in 0..n {
            for a in 0..cols {
                let da = kept[a][i] - c_bar[a];
                sxy[a] += da * (y[i] - y_bar);
                for b in 0..=a {
                    sxx[(a, b)] += da * (kept[b][i] - c_bar[b]);
                }
            }
        }
        for a in 0..cols {
            for b in 0..a {
                sxx[(b, a)] = sxx[(a, b)];
            }
        }
        match sxx.clone().cholesky() {
            Some(ch) => coef = ch.solve(&sxy),
            None => {
                // Fall back to a rank-revealing solve.
                let svd = sxx.svd(true, true);
                coef = svd
                    .solve(&sxy, 1e-12)
                    .map_err(|e| Error::InvalidParameter {
                        field: "controls",
                        reason: e.to_string(),
                    })?;
            }
        }
        if n <= cols + 1 {
            cols = 0;
            coef.fill(0.0);
        }
    }
    let c_bar: Vec<f64> = kept.iter().map(|c| mean(c)).collect();
    let estimate = y_bar - (0..cols).map(|a| coef[a] * c_bar[a]).sum::<f64>();
    let mut ss = 0.0;
    for i in 0..n {
        let fitted: f64 = (0..cols).map(|a| coef[a] * (kept[a][i] - c_bar[a])).sum();
        let r = y[i] - y_bar - fitted;
        ss += r * r;
    }
    let dof = (n - 1 - cols) as f64;
    Ok((estimate, (ss / dof / n as f64).sqrt()))
}

/// Difference of two mean-variance values estimated on the same paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Difference {
    pub estimate: f64,
    pub std_error: f64,
    /// Standard error had the two arms used independent paths.
    pub unpaired_std_error: f64,
}

/// `MV(z_new) - MV(z_ref)` with common random numbers.
pub fn paired_difference(z_new: &[f64], z_ref: &[f64], gamma: f64, controls: &[Vec<f64>]) -> Result<Difference> {
    if z_new.len() != z_ref.len() {
        return Err(Error::InvalidParameter {
            field: "paths",
            reason: "paired arms must have equal length".into(),
        });
    }
    let a = mean_variance(z_new, gamma)?;
    let b = mean_variance(z_ref, gamma)?;
    let ia = influence(z_new, gamma)?;
    let ib = influence(z_ref, gamma)?;
    let d: Vec<f64> = ia.iter().zip(&ib).map(|(x, y)| x - y).collect();
    let (adjusted, std_error) = mean_with_controls(&d, controls)?;
    // The influence values average to the plug-in means, so the control
    // adjustment is the same shift applied to the plug-in difference.
    let shift = adjusted - mean(&d);
    Ok(Difference {
        estimate: a.value - b.value + shift,
        std_error,
        unpaired_std_error: (a.std_error.powi(2) + b.std_error.powi(2)).sqrt(),
    })
}
