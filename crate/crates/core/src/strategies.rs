//! Closed-form equilibrium strategies.
//!
//! Both strategies depend on the state only through `(t, p)`. The follower
//! reacts linearly to the leader's realised action; the leader randomises
//! with a Gaussian whose mean is a surface over `(t, p)` and whose variance is
//! constant.

use crate::error::{Error, Result};
use crate::market_model::{Investor, ModelParams};
use crate::pde_solver::{Locator, Quantity, SurfaceKind, ValueSurface};
use crate::rng::NormalStream;

/// The follower's action as an affine function of the leader's action `u1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerResponse {
    /// Part of the action that does not depend on `u1`.
    pub base: f64,
    /// Coefficient of `u1`.
    pub slope: f64,
}

impl FollowerResponse {
    #[inline]
    pub fn action(&self, u1: f64) -> f64 {
        self.base + self.slope * u1
    }
}

fn expect_kind(surface: &ValueSurface, kind: SurfaceKind) -> Result<()> {
    if surface.kind() == kind {
        Ok(())
    } else {
        Err(Error::KindMismatch {
            expected: kind.label(),
            found: surface.kind().label(),
        })
    }
}

/// Best response of the follower at `(t, p)`.
pub fn follower_response(t: f64, p: f64, a2: &ValueSurface, params: &ModelParams) -> Result<FollowerResponse> {
    expect_kind(a2, SurfaceKind::FollowerGain)?;
    let da2 = a2.interpolate(t, p, Quantity::Dp)?;
    Ok(FollowerResponse {
        base: params.gamma_term(p, da2),
        slope: params.derived().kappa,
    })
}

/// Relative-wealth exposure of the follower, `(1 - lambda2/2) u2 - (lambda2/2) u1`,
/// under the best response. It carries no `u1` argument because the leader's
/// action cancels.
pub fn aggregate_control(t: f64, p: f64, a2: &ValueSurface, params: &ModelParams) -> Result<f64> {
    expect_kind(a2, SurfaceKind::FollowerGain)?;
    let da2 = a2.interpolate(t, p, Quantity::Dp)?;
    Ok(params.single_investor_demand(params.gamma2, p, da2))
}

/// Leader and follower quantities at one `(t, p)` query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controls {
    /// Mean of the leader's policy.
    pub leader_mean: f64,
    /// `u1`-independent part of the follower's response.
    pub follower_base: f64,
}

/// The leader's Gaussian randomised policy, together with the follower
/// surface needed to evaluate the response to each sampled action.
#[derive(Debug, Clone)]
pub struct GaussianPolicy<'a> {
    params: ModelParams,
    a1: &'a ValueSurface,
    a2: &'a ValueSurface,
    kappa: f64,
    chi: f64,
    l: f64,
    variance: f64,
}

fn check_gains(params: &ModelParams, a1: &ValueSurface, a2: &ValueSurface) -> Result<()> {
    expect_kind(a1, SurfaceKind::LeaderGain)?;
    expect_kind(a2, SurfaceKind::FollowerGain)?;
    if a1.grid() != a2.grid() || a1.params() != params || a2.params() != params {
        return Err(Error::GridMismatch(
            "leader and follower gains must share the grid and parameters of the policy".into(),
        ));
    }
    Ok(())
}

/// Equilibrium policy of the leader. Requires `lambda0 > 0`.
pub fn leader_policy<'a>(params: &ModelParams, a1: &'a ValueSurface, a2: &'a ValueSurface) -> Result<GaussianPolicy<'a>> {
    if params.lambda0 <= 0.0 {
        return Err(Error::InvalidParameter {
            field: "lambda0",
            reason: "the randomised policy needs a positive entropy weight".into(),
        });
    }
    build(params, a1, a2, true)
}

impl<'a> GaussianPolicy<'a> {
    /// The `lambda0 -> 0` limit: same mean, zero variance.
    ///
    /// Only meant for degenerate-limit harnesses; its entropy is undefined.
    pub fn deterministic_limit(params: &ModelParams, a1: &'a ValueSurface, a2: &'a ValueSurface) -> Result<Self> {
        build(params, a1, a2, false)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn leader_gain(&self) -> &ValueSurface {
        self.a1
    }

    pub fn follower_gain(&self) -> &ValueSurface {
        self.a2
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Coefficient of the leader's action in the follower's response.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    #[inline]
    pub fn locate(&self, t: f64, p: f64) -> Locator {
        self.a1.locate(t, p)
    }

    /// Policy mean and follower base from one shared interpolation stencil.
    /// `p` must lie in `[0, 1]`; no checks are made.
    #[inline]
    pub fn controls_at(&self, loc: &Locator, p: f64) -> Controls {
        let m = &self.params;
        let da1 = self.a1.dp_at(loc);
        let da2 = self.a2.dp_at(loc);
        let excess = m.theta_at(p) - m.r;
        let beta = m.beta_at(p);
        let leader_mean = excess * self.l / (m.sigma * m.sigma)
            - beta / (self.chi * m.sigma) * (da1 + (1.0 - self.chi) * da2);
        Controls {
            leader_mean,
            follower_base: m.gamma_term(p, da2),
        }
    }

    /// Follower base alone, skipping the leader's surface.
    #[inline]
    pub fn follower_base_at(&self, loc: &Locator, p: f64) -> f64 {
        self.params.gamma_term(p, self.a2.dp_at(loc))
    }

    /// Checked evaluation of the policy mean.
    pub fn mean(&self, t: f64, p: f64) -> Result<f64> {
        self.a1.interpolate(t, p, Quantity::Value)?;
        Ok(self.controls_at(&self.locate(t, p), p).leader_mean)
    }

    /// Checked evaluation of the follower's response at `(t, p)`.
    pub fn follower_response(&self, t: f64, p: f64) -> Result<FollowerResponse> {
        follower_response(t, p, self.a2, &self.params)
    }

    /// Differential entropy of the policy in nats.
    pub fn entropy(&self) -> Result<f64> {
        gaussian_entropy(self.variance)
    }
}

fn build<'a>(params: &ModelParams, a1: &'a ValueSurface, a2: &'a ValueSurface, randomised: bool) -> Result<GaussianPolicy<'a>> {
    check_gains(params, a1, a2)?;
    let d = params.derived();
    let variance = if randomised {
        params.lambda0 / (params.gamma1 * params.sigma * params.sigma * d.chi * d.chi)
    } else {
        0.0
    };
    Ok(GaussianPolicy {
        params: *params,
        a1,
        a2,
        kappa: d.kappa,
        chi: d.chi,
        l: d.l,
        variance,
    })
}

/// Draws one leader action at `(t, p)`, consuming one normal from `rng`.
pub fn sample_action(policy: &GaussianPolicy<'_>, t: f64, p: f64, rng: &mut NormalStream) -> Result<f64> {
    let mean = policy.mean(t, p)?;
    Ok(mean + policy.std_dev() * rng.next_normal())
}

/// Entropy of the policy, `0.5 * ln(2 pi e variance)`.
pub fn policy_entropy(policy: &GaussianPolicy<'_>) -> Result<f64> {
    policy.entropy()
}

/// Differential entropy of a normal law with the given variance.
pub fn gaussian_entropy(variance: f64) -> Result<f64> {
    if variance > 0.0 && variance.is_finite() {
        Ok(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * variance).ln())
    } else {
        Err(Error::InvalidParameter {
            field: "variance",
            reason: format!("entropy needs a positive finite variance, got {variance}"),
        })
    }
}

/// Demand of the investor `who` when acting alone: no relative concern and
/// no opponent. Used as the reference in the reduction checks.
pub fn single_investor_strategy(t: f64, p: f64, gain: &ValueSurface, params: &ModelParams) -> Result<f64> {
    let who = match gain.kind() {
        SurfaceKind::LeaderGain => Investor::Leader,
        SurfaceKind::FollowerGain => Investor::Follower,
        other => {
            return Err(Error::KindMismatch {
                expected: "a1 or a2",
                found: other.label(),
            })
        }
    };
    let da = gain.interpolate(t, p, Quantity::Dp)?;
    Ok(params.single_investor_demand(params.gamma_of(who), p, da))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_solver::{solve_a, PdeGridSpec, Scheme};
    use crate::rng::Channel;
    use approx::assert_relative_eq;

    fn grid() -> PdeGridSpec {
        PdeGridSpec::new(65, 31, Scheme::CrankNicolson)
    }

    fn gains(m: &ModelParams) -> (ValueSurface, ValueSurface) {
        (
            solve_a(m, Investor::Leader, &grid()).unwrap(),
            solve_a(m, Investor::Follower, &grid()).unwrap(),
        )
    }

    #[test]
    fn follower_slope_is_kappa() {
        let m = ModelParams::benchmark();
        let (_, a2) = gains(&m);
        let r = follower_response(0.3, 0.4, &a2, &m).unwrap();
        assert_relative_eq!(r.slope, 1.0 / 3.0, max_relative = 1e-15);
        assert_eq!(r.action(0.0), r.base);
    }

    #[test]
    fn terminal_response_is_myopic() {
        let m = ModelParams::benchmark();
        let (_, a2) = gains(&m);
        for p in [0.0, 0.3, 1.0] {
            let r = follower_response(1.0, p, &a2, &m).unwrap();
            let myopic = (m.theta_at(p) - m.r) / (m.sigma * m.sigma * m.gamma2 * (1.0 - m.lambda2 / 2.0));
            assert_relative_eq!(r.base, myopic, max_relative = 1e-14);
        }
    }

    #[test]
    fn endpoint_response_has_no_hedge() {
        let m = ModelParams::benchmark();
        let (_, a2) = gains(&m);
        for p in [0.0, 1.0] {
            let r = follower_response(0.2, p, &a2, &m).unwrap();
            let myopic = (m.theta_at(p) - m.r) / (m.sigma * m.sigma * m.gamma2 * (1.0 - m.lambda2 / 2.0));
            assert_relative_eq!(r.base, myopic, max_relative = 1e-14);
        }
    }

    #[test]
    fn aggregate_vanishes_without_premium_at_horizon() {
        let m = ModelParams::benchmark();
        let (_, a2) = gains(&m);
        let p_star = (m.r - m.mu2) / (m.mu1 - m.mu2);
        assert!(aggregate_control(1.0, p_star, &a2, &m).unwrap().abs() < 1e-15);
    }

    #[test]
    fn response_checks_surface_kind() {
        let m = ModelParams::benchmark();
        let (a1, a2) = gains(&m);
        assert!(matches!(follower_response(0.0, 0.5, &a1, &m), Err(Error::KindMismatch { .. })));
        assert!(matches!(leader_policy(&m, &a2, &a1), Err(Error::KindMismatch { .. })));
        assert!(follower_response(0.0, 1.5, &a2, &m).is_err());
    }

    #[test]
    fn policy_variance_and_entropy() {
        let m = ModelParams {
            lambda0: 0.04,
            lambda1: 0.0,
            lambda2: 0.0,
            ..ModelParams::benchmark()
        };
        let (a1, a2) = gains(&m);
        let pol = leader_policy(&m, &a1, &a2).unwrap();
        assert_relative_eq!(pol.variance(), 0.5, max_relative = 1e-15);
        let expect = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 0.04 / (2.0 * 0.04)).ln();
        assert_relative_eq!(policy_entropy(&pol).unwrap(), expect, max_relative = 1e-14);
    }

    #[test]
    fn gaussian_entropy_examples() {
        let v0 = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
        assert!(gaussian_entropy(v0).unwrap().abs() < 1e-15);
        assert_relative_eq!(gaussian_entropy(1.0).unwrap(), 1.4189385332046727, max_relative = 1e-15);
        assert!(gaussian_entropy(0.0).is_err());
        assert!(gaussian_entropy(-1.0).is_err());
    }

    #[test]
    fn policy_rejects_zero_lambda0() {
        let m = ModelParams {
            lambda0: 0.0,
            ..ModelParams::benchmark()
        };
        let (a1, a2) = gains(&m);
        assert!(leader_policy(&m, &a1, &a2).is_err());
        let lim = GaussianPolicy::deterministic_limit(&m, &a1, &a2).unwrap();
        assert_eq!(lim.variance(), 0.0);
        assert!(lim.entropy().is_err());
        let mut rng = NormalStream::new(1, Channel::Sampling, 0);
        assert_eq!(sample_action(&lim, 0.5, 0.5, &mut rng).unwrap(), lim.mean(0.5, 0.5).unwrap());
    }

    #[test]
    fn mean_is_independent_of_lambda0() {
        let m = ModelParams::benchmark();
        let m2 = ModelParams { lambda0: 0.7, ..m };
        let (a1, a2) = gains(&m);
        let (b1, b2) = gains(&m2);
        let p1 = leader_policy(&m, &a1, &a2).unwrap();
        let p2 = leader_policy(&m2, &b1, &b2).unwrap();
        for (t, p) in [(0.0, 0.5), (0.37, 0.81), (0.9, 0.05)] {
            assert_eq!(p1.mean(t, p).unwrap(), p2.mean(t, p).unwrap());
        }
        assert!(p2.variance() > p1.variance());
    }

    #[test]
    fn terminal_mean_is_myopic() {
        let m = ModelParams::benchmark();
        let (a1, a2) = gains(&m);
        let pol = leader_policy(&m, &a1, &a2).unwrap();
        let l = m.derived().l;
        for p in [0.0, 0.25, 0.6, 1.0] {
            let expect = (m.theta_at(p) - m.r) * l / (m.sigma * m.sigma);
            assert_relative_eq!(pol.mean(1.0, p).unwrap(), expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_well_scaled() {
        let m = ModelParams::benchmark();
        let (a1, a2) = gains(&m);
        let pol = leader_policy(&m, &a1, &a2).unwrap();
        let (t, p) = (0.25, 0.4);
        let draw = |stream| {
            let mut rng = NormalStream::new(5, Channel::Sampling, stream);
            sample_action(&pol, t, p, &mut rng).unwrap()
        };
        assert_eq!(draw(3).to_bits(), draw(3).to_bits());

        let n = 100_000;
        let mut rng = NormalStream::new(9, Channel::Sampling, 0);
        let xs: Vec<f64> = (0..n).map(|_| sample_action(&pol, t, p, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = pol.mean(t, p).unwrap();
        assert!((mean - target).abs() < 4.0 * (pol.variance() / n as f64).sqrt());
        assert!((var / pol.variance() - 1.0).abs() < 0.05);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let m = ModelParams::benchmark();
        let a1 = solve_a(&m, Investor::Leader, &grid()).unwrap();
        let a2 = solve_a(&m, Investor::Follower, &PdeGridSpec::new(33, 31, Scheme::CrankNicolson)).unwrap();
        assert!(matches!(leader_policy(&m, &a1, &a2), Err(Error::GridMismatch(_))));
    }
}
