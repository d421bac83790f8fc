//! Numerical checks of the equilibrium and convergence properties.
//!
//! * [`slopes`]: one-sided perturbation slopes for the follower (sampled
//!   dynamics) and the leader (exploratory dynamics).
//! * [`convergence`]: gap between sampled and exploratory leader objectives
//!   as the sampling mesh shrinks.
//! * [`certificate`]: approximate no-deviation check for the leader under
//!   sampling.
//! * [`checks`]: parameter reductions, filter properties and the
//!   cancellation of the leader's action in the follower's exposure.

pub mod certificate;
pub mod checks;
pub mod convergence;
pub mod slopes;

pub use certificate::{stackelberg_certificate, CertificateReport, Deviation, DeviationResult};
pub use checks::{filter_checks, reduction_checks, u1_cancellation_check, CheckResult, FilterReport, ReductionReport};
pub use convergence::{convergence_study, ConvergenceReport, MeshGap};
pub use slopes::{follower_slope_test, leader_slope_test, SlopeReport, SlopeSettings, WindowSlope};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_model::ModelParams;
use crate::pde_solver::EquilibriumSurfaces;
use crate::simulator::{InitialState, TimeGrid};
use crate::strategies::{leader_policy, GaussianPolicy};

/// Model, solved surfaces and the initial state shared by all checks.
#[derive(Debug, Clone, Copy)]
pub struct VerifyContext<'a> {
    pub params: ModelParams,
    pub surfaces: &'a EquilibriumSurfaces,
    pub init: InitialState,
}

impl<'a> VerifyContext<'a> {
    pub fn new(params: ModelParams, surfaces: &'a EquilibriumSurfaces, init: InitialState) -> Result<Self> {
        init.validate()?;
        Ok(VerifyContext { params, surfaces, init })
    }

    pub fn policy(&self) -> Result<GaussianPolicy<'a>> {
        leader_policy(&self.params, &self.surfaces.a1, &self.surfaces.a2)
    }

    /// Relative wealth of `who` at time zero.
    pub fn initial_relative_wealth(&self, who: crate::market_model::Investor) -> f64 {
        crate::simulator::relative_wealth(who, self.init.x1, self.init.x2, &self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Follower plays a constant action; magnitude is its offset from the
    /// equilibrium action at the start of the window.
    FollowerConstant,
    /// Leader's policy mean is shifted by the magnitude.
    LeaderMeanShift,
    /// Leader's policy variance is multiplied by the magnitude.
    LeaderVarianceScale,
}

impl PerturbationKind {
    pub fn label(self) -> &'static str {
        match self {
            PerturbationKind::FollowerConstant => "follower_constant",
            PerturbationKind::LeaderMeanShift => "leader_mean_shift",
            PerturbationKind::LeaderVarianceScale => "leader_variance_scale",
        }
    }
}

/// A deviation from equilibrium play on `[0, window)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub window: f64,
}

impl PerturbationSpec {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.window > 0.0 && self.window <= horizon) {
            return Err(Error::InvalidParameter {
                field: "window",
                reason: format!("must lie in (0, T], got {}", self.window),
            });
        }
        if !self.magnitude.is_finite() {
            return Err(Error::InvalidParameter {
                field: "magnitude",
                reason: "must be finite".into(),
            });
        }
        if self.kind == PerturbationKind::LeaderVarianceScale && self.magnitude <= 0.0 {
            return Err(Error::InvalidParameter {
                field: "magnitude",
                reason: format!("variance scale must be positive, got {}", self.magnitude),
            });
        }
        Ok(())
    }

    /// Whether the perturbed strategy coincides with equilibrium play
    /// (up to the follower's within-window freeze).
    pub fn is_null(&self) -> bool {
        match self.kind {
            PerturbationKind::LeaderVarianceScale => self.magnitude == 1.0,
            _ => self.magnitude == 0.0,
        }
    }

    /// Leading-order slope implied by the concavity of the local objective
    /// in the deviation.
    pub fn leading_order_slope(&self, params: &ModelParams) -> f64 {
        let s2 = params.sigma * params.sigma;
        let d = self.magnitude;
        match self.kind {
            PerturbationKind::FollowerConstant => {
                let c = 1.0 - params.lambda2 / 2.0;
                -0.5 * params.gamma2 * s2 * c * c * d * d
            }
            PerturbationKind::LeaderMeanShift => {
                let chi = params.derived().chi;
                -0.5 * params.gamma1 * s2 * chi * chi * d * d
            }
            PerturbationKind::LeaderVarianceScale => 0.5 * params.lambda0 * (d.ln() - d + 1.0),
        }
    }
}

/// Offsets of the default follower deviation grid.
pub const FOLLOWER_OFFSETS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
/// Mean shifts of the default leader deviation grid.
pub const LEADER_MEAN_SHIFTS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
/// Variance scales of the default leader deviation grid.
pub const LEADER_VARIANCE_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

pub fn default_follower_specs(window: f64) -> Vec<PerturbationSpec> {
    FOLLOWER_OFFSETS
        .iter()
        .map(|&magnitude| PerturbationSpec {
            kind: PerturbationKind::FollowerConstant,
            magnitude,
            window,
        })
        .collect()
}

pub fn default_leader_specs(window: f64) -> Vec<PerturbationSpec> {
    let shifts = LEADER_MEAN_SHIFTS.iter().map(|&magnitude| PerturbationSpec {
        kind: PerturbationKind::LeaderMeanShift,
        magnitude,
        window,
    });
    let scales = LEADER_VARIANCE_SCALES.iter().map(|&magnitude| PerturbationSpec {
        kind: PerturbationKind::LeaderVarianceScale,
        magnitude,
        window,
    });
    shifts.chain(scales).collect()
}

/// Five parameter sets around `base`: `base` itself, each risk aversion set
/// to 1, and each relative-concern weight set to 0.
pub fn parameter_sweep(base: &ModelParams) -> Vec<ModelParams> {
    vec![
        *base,
        ModelParams { gamma1: 1.0, ..*base },
        ModelParams { gamma2: 1.0, ..*base },
        ModelParams { lambda1: 0.0, ..*base },
        ModelParams { lambda2: 0.0, ..*base },
    ]
}

/// Least-squares line through `(x, y)`: returns `(intercept, slope)` and the
/// weights that produce the intercept as a linear combination of the `y`.
pub(crate) fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let weights = x
        .iter()
        .map(|v| if sxx > 0.0 { 1.0 / n - xm * (v - xm) / sxx } else { 1.0 / n })
        .collect();
    (ym - slope * xm, slope, weights)
}

/// Grid node at which a window starting at zero ends.
pub(crate) fn window_node(grid: &TimeGrid, window: f64) -> Result<usize> {
    grid.node_index(window).ok_or_else(|| Error::InvalidParameter {
        field: "window",
        reason: format!("window {window} must end on a node of the sampling grid"),
    })
}
