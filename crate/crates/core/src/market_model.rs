//! Market, preference and filter coefficients.
//!
//! The drift of the stock is one of two values `mu1 > mu2`; the uninformed
//! investor tracks the posterior probability `p` that the drift is `mu1`.
//! Everything here is expressed in discounted units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Market, preference and regularisation constants.
///
/// Deserialisation validates eagerly. Constructing the struct literally skips
/// validation, which test harnesses use for degenerate cases such as
/// `mu1 == mu2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelParams")]
pub struct ModelParams {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma: f64,
    pub r: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda0: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelParams {
    mu1: f64,
    mu2: f64,
    sigma: f64,
    r: f64,
    #[serde(rename = "T")]
    horizon: f64,
    gamma1: f64,
    gamma2: f64,
    lambda1: f64,
    lambda2: f64,
    lambda0: f64,
}

impl TryFrom<RawModelParams> for ModelParams {
    type Error = Error;

    fn try_from(raw: RawModelParams) -> Result<Self> {
        ModelParams {
            mu1: raw.mu1,
            mu2: raw.mu2,
            sigma: raw.sigma,
            r: raw.r,
            horizon: raw.horizon,
            gamma1: raw.gamma1,
            gamma2: raw.gamma2,
            lambda1: raw.lambda1,
            lambda2: raw.lambda2,
            lambda0: raw.lambda0,
        }
        .validated()
    }
}

/// One of the two players.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Investor {
    /// Informed investor who randomises trades.
    Leader,
    /// Uninformed investor who filters the drift from prices.
    Follower,
}

impl Investor {
    pub fn label(self) -> &'static str {
        match self {
            Investor::Leader => "leader",
            Investor::Follower => "follower",
        }
    }
}

/// Constants of the leader's equilibrium policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConstants {
    /// Follower's sensitivity to the leader's action, `lambda2 / (2 - lambda2)`.
    pub kappa: f64,
    /// Leader's effective exposure share, `(2 - lambda2 - lambda1) / (2 - lambda2)`.
    pub chi: f64,
    /// Leader's effective risk tolerance.
    pub l: f64,
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}

impl ModelParams {
    /// Harness parameter set used throughout the test-suite and as the CLI default.
    pub fn benchmark() -> Self {
        ModelParams {
            mu1: 0.10,
            mu2: 0.02,
            sigma: 0.2,
            r: 0.03,
            horizon: 1.0,
            gamma1: 2.0,
            gamma2: 2.0,
            lambda1: 0.5,
            lambda2: 0.5,
            lambda0: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("sigma", self.sigma),
            ("r", self.r),
            ("T", self.horizon),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda0", self.lambda0),
        ];
        for (name, v) in all {
            if !v.is_finite() {
                return Err(invalid(name, format!("{v} is not finite")));
            }
        }
        if self.mu1 <= self.mu2 {
            return Err(invalid("mu1", format!("must exceed mu2 = {}", self.mu2)));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("T", self.horizon),
            ("r", self.r),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ] {
            if v <= 0.0 {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if self.lambda0 < 0.0 {
            return Err(invalid(
                "lambda0",
                format!("must be nonnegative, got {}", self.lambda0),
            ));
        }
        Ok(())
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    fn check_probability(p: f64) -> Result<()> {
        if (0.0..=1.0).contains(&p) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "p",
                value: p,
                domain: "[0, 1]",
            })
        }
    }

    /// Filtered drift `(mu1 - mu2) p + mu2`.
    pub fn theta(&self, p: f64) -> Result<f64> {
        Self::check_probability(p)?;
        Ok(self.theta_at(p))
    }

    /// Filter volatility `(mu1 - mu2) / sigma * p (1 - p)`.
    pub fn beta(&self, p: f64) -> Result<f64> {
        Self::check_probability(p)?;
        Ok(self.beta_at(p))
    }

    /// [`theta`](Self::theta) without the domain check, for callers that have
    /// already projected `p` onto `[0, 1]`.
    #[inline]
    pub fn theta_at(&self, p: f64) -> f64 {
        (self.mu1 - self.mu2) * p + self.mu2
    }

    #[inline]
    pub fn beta_at(&self, p: f64) -> f64 {
        (self.mu1 - self.mu2) / self.sigma * p * (1.0 - p)
    }

    /// Largest filter volatility over `[0, 1]`, attained at `p = 1/2`.
    pub fn beta_max(&self) -> f64 {
        (self.mu1 - self.mu2).abs() / (4.0 * self.sigma)
    }

    pub fn derived(&self) -> DerivedConstants {
        let (l1, l2) = (self.lambda1, self.lambda2);
        let kappa = l2 / (2.0 - l2);
        let chi = (2.0 - l2 - l1) / (2.0 - l2);
        // Same value as ((2 - l2) g2 + l1 g1) / ((2 - l2 - l1) g1 g2), split so
        // that lambda1 = 0 gives exactly 1 / gamma1.
        let l = 1.0 / (chi * self.gamma1) + l1 / ((2.0 - l2 - l1) * self.gamma2);
        DerivedConstants { kappa, chi, l }
    }

    pub fn gamma_of(&self, who: Investor) -> f64 {
        match who {
            Investor::Leader => self.gamma1,
            Investor::Follower => self.gamma2,
        }
    }

    pub fn lambda_of(&self, who: Investor) -> f64 {
        match who {
            Investor::Leader => self.lambda1,
            Investor::Follower => self.lambda2,
        }
    }

    /// Part of the follower's response that does not depend on the leader's
    /// action. `da2` is the p-derivative of `a2` at `(t, p)`.
    #[inline]
    pub fn gamma_term(&self, p: f64, da2: f64) -> f64 {
        let scale = 1.0 - self.lambda2 / 2.0;
        (self.theta_at(p) - self.r) / (self.sigma * self.sigma * self.gamma2 * scale)
            - self.beta_at(p) * da2 / (self.sigma * scale)
    }

    /// Myopic-plus-hedging demand of a lone mean-variance investor with risk
    /// aversion `gamma` and anticipated-gain slope `da`.
    #[inline]
    pub fn single_investor_demand(&self, gamma: f64, p: f64, da: f64) -> f64 {
        (self.theta_at(p) - self.r) / (self.sigma * self.sigma * gamma)
            - self.beta_at(p) * da / self.sigma
    }
}
