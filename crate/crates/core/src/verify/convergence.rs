//! Gap between the leader's objective under sampled and exploratory dynamics
//! as the sampling mesh shrinks.
//!
//! Both objectives are computed conditionally on the observable Brownian
//! path. Given that path the leader's terminal relative wealth is Gaussian in
//! either regime. The exploratory conditional mean integrates the policy mean
//! along the path and the conditional variance is `c^2 sigma^2 s^2 T`. The
//! sampled conditional mean holds the policy mean from the last grid node.
//! Its conditional variance is `c^2 s^2 sum_i L_i^2`, where `L_i` is the
//! excess stock gain over interval `i`. Here `c` is the leader's net exposure
//! per unit of own action after the follower's reaction and `s` is the policy
//! standard deviation. Integrating out the sampling and exploration noise
//! exactly leaves only the observable noise, and every mesh is evaluated on
//! the same fine path.

use rayon::prelude::*;
use serde::Serialize;

use super::{fit_line, VerifyContext};
use crate::error::{Error, Result};
use crate::market_model::ModelParams;
use crate::objectives::mean_with_controls;
use crate::rng::{Channel, NormalStream};
use crate::simulator::{step_filter, InitialState};
use crate::strategies::GaussianPolicy;

/// Fine Euler steps per horizon used when none are given.
pub const DEFAULT_FINE_STEPS: usize = 2048;

/// Gap at one sampling mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeshGap {
    pub intervals: usize,
    pub mesh: f64,
    /// `J_sampled - J_exploratory`.
    pub signed_gap: f64,
    pub std_error: f64,
}

impl MeshGap {
    pub fn gap(&self) -> f64 {
        self.signed_gap.abs()
    }

    pub fn resolved(&self) -> bool {
        self.gap() >= 3.0 * self.std_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub n_paths: usize,
    pub fine_steps: usize,
    /// Mesh sizes, strictly decreasing.
    pub meshes: Vec<f64>,
    /// `|J_sampled - J_exploratory|` per mesh.
    pub objective_gaps: Vec<f64>,
    pub rows: Vec<MeshGap>,
    /// Least-squares slope of `ln gap` against `ln mesh` (NaN for one mesh).
    pub fitted_order: f64,
    /// Gap at the finest mesh.
    pub epsilon: f64,
    pub monotone: bool,
    pub noise_limited: bool,
    /// Path count that would resolve every gap at three standard errors.
    pub recommended_paths: Option<usize>,
    pub pass: bool,
}

impl ConvergenceReport {
    pub const CSV_HEADER: &'static str = "intervals,mesh,gap,signed_gap,std_error,resolved";

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let f = crate::fmt_f64;
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.intervals,
                f(r.mesh),
                f(r.gap()),
                f(r.signed_gap),
                f(r.std_error),
                r.resolved()
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Order bracket required for a pass.
pub const ORDER_RANGE: (f64, f64) = (0.7, 1.5);

/// Conditional moments of one observable path.
struct PathMoments {
    exploratory_mean: f64,
    sampled_mean: Vec<f64>,
    /// Sampled conditional variance with its zero-mean Brownian part removed.
    sampled_var: Vec<f64>,
    w_total: f64,
}

fn path_moments(
    policy: &GaussianPolicy<'_>,
    init: InitialState,
    seed: u64,
    path: u64,
    fine_steps: usize,
    strides: &[usize],
) -> PathMoments {
    let m = policy.params();
    let half_l1 = 0.5 * m.lambda1;
    let c_xi = (1.0 - half_l1) - half_l1 * policy.kappa();
    let dt = m.horizon / fine_steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut market = NormalStream::new(seed, Channel::Market, path);

    let mut p = init.p;
    let mut m_e = 0.0;
    let mut w_total = 0.0;
    let k = strides.len();
    let mut m_d = vec![0.0; k];
    let mut held = vec![0.0; k];
    let mut gain_acc = vec![0.0; k];
    let mut noise_acc = vec![0.0; k];
    let mut sum_l2 = vec![0.0; k];
    let mut sum_n2 = vec![0.0; k];

    for step in 0..fine_steps {
        let t = step as f64 * dt;
        let c = policy.controls_at(&policy.locate(t, p), p);
        let dw = sqrt_dt * market.next_normal();
        let noise = m.sigma * dw;
        let gain = (m.theta_at(p) - m.r) * dt + noise;
        let follower_part = half_l1 * c.follower_base;
        m_e += (c_xi * c.leader_mean - follower_part) * gain;
        for j in 0..k {
            if step % strides[j] == 0 {
                if step > 0 {
                    sum_l2[j] += gain_acc[j] * gain_acc[j];
                    sum_n2[j] += noise_acc[j] * noise_acc[j];
                }
                held[j] = c.leader_mean;
                gain_acc[j] = 0.0;
                noise_acc[j] = 0.0;
            }
            m_d[j] += (c_xi * held[j] - follower_part) * gain;
            gain_acc[j] += gain;
            noise_acc[j] += noise;
        }
        p = step_filter(p, dw, m);
        w_total += dw;
    }

    let scale = c_xi * c_xi * policy.variance();
    let quad = m.sigma * m.sigma * m.horizon;
    let sampled_var = (0..k)
        .map(|j| {
            let l2 = sum_l2[j] + gain_acc[j] * gain_acc[j];
            let n2 = sum_n2[j] + noise_acc[j] * noise_acc[j];
            scale * (l2 - n2 + quad)
        })
        .collect();
    PathMoments {
        exploratory_mean: m_e,
        sampled_mean: m_d,
        sampled_var,
        w_total,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Runs the study for an explicit policy, which may be the deterministic
/// limit with zero variance.
pub fn convergence_study_with_policy(
    policy: &GaussianPolicy<'_>,
    init: InitialState,
    intervals: &[usize],
    n_paths: usize,
    seed: u64,
    fine_steps: usize,
) -> Result<ConvergenceReport> {
    let m: &ModelParams = policy.params();
    init.validate()?;
    if n_paths < 2 {
        return Err(Error::InsufficientPaths { needed: 2, got: n_paths });
    }
    if intervals.is_empty() || intervals.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter {
            field: "meshes",
            reason: "interval counts must be non-empty and strictly increasing".into(),
        });
    }
    if intervals.iter().any(|&n| n == 0 || fine_steps % n != 0) {
        return Err(Error::InvalidParameter {
            field: "fine_steps",
            reason: format!("{fine_steps} fine steps must be a multiple of every interval count {intervals:?}"),
        });
    }
    let strides: Vec<usize> = intervals.iter().map(|n| fine_steps / n).collect();
    let moments: Vec<PathMoments> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| path_moments(policy, init, seed, path, fine_steps, &strides))
        .collect();

    let gamma = m.gamma1;
    let d = m.derived();
    let c_xi = (1.0 - 0.5 * m.lambda1) - 0.5 * m.lambda1 * d.kappa;
    let v_e = c_xi * c_xi * m.sigma * m.sigma * policy.variance() * m.horizon;
    let me: Vec<f64> = moments.iter().map(|x| x.exploratory_mean).collect();
    let me_bar = mean(&me);
    let controls = vec![
        moments.iter().map(|x| m.sigma * x.w_total).collect::<Vec<_>>(),
        moments
            .iter()
            .map(|x| m.sigma * m.sigma * (x.w_total * x.w_total - m.horizon))
            .collect(),
    ];

    let mut rows = Vec::with_capacity(intervals.len());
    for (j, &n) in intervals.iter().enumerate() {
        let md: Vec<f64> = moments.iter().map(|x| x.sampled_mean[j]).collect();
        let vd: Vec<f64> = moments.iter().map(|x| x.sampled_var[j]).collect();
        let md_bar = mean(&md);
        let plug_in = (md_bar - me_bar) - 0.5 * gamma * (sample_variance(&md) - sample_variance(&me))
            - 0.5 * gamma * (mean(&vd) - v_e);
        let inf: Vec<f64> = (0..n_paths)
            .map(|i| {
                let a = md[i] - md_bar;
                let b = me[i] - me_bar;
                (md[i] - me[i]) - 0.5 * gamma * (a * a - b * b) - 0.5 * gamma * (vd[i] - v_e)
            })
            .collect();
        let (adjusted, std_error) = mean_with_controls(&inf, &controls)?;
        rows.push(MeshGap {
            intervals: n,
            mesh: m.horizon / n as f64,
            signed_gap: plug_in + adjusted - mean(&inf),
            std_error,
        });
    }
    Ok(summarise(rows, n_paths, fine_steps))
}

fn summarise(rows: Vec<MeshGap>, n_paths: usize, fine_steps: usize) -> ConvergenceReport {
    let meshes: Vec<f64> = rows.iter().map(|r| r.mesh).collect();
    let objective_gaps: Vec<f64> = rows.iter().map(MeshGap::gap).collect();
    let fitted_order = if rows.len() >= 2 && objective_gaps.iter().all(|&g| g > 0.0) {
        let x: Vec<f64> = meshes.iter().map(|h| h.ln()).collect();
        let y: Vec<f64> = objective_gaps.iter().map(|g| g.ln()).collect();
        fit_line(&x, &y).1
    } else {
        f64::NAN
    };
    let monotone = rows.windows(2).all(|w| {
        let tol = 3.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        w[1].gap() <= w[0].gap() + tol
    });
    let noise_limited = rows.iter().any(|r| !r.resolved());
    let recommended_paths = noise_limited.then(|| {
        rows.iter()
            .map(|r| {
                let ratio = if r.gap() > 0.0 { 3.0 * r.std_error / r.gap() } else { 10.0 };
                (1.5 * n_paths as f64 * ratio * ratio).ceil() as usize
            })
            .max()
            .unwrap_or(n_paths)
            .max(2 * n_paths)
    });
    let epsilon = objective_gaps.last().copied().unwrap_or(f64::NAN);
    let pass =
        !noise_limited && monotone && fitted_order >= ORDER_RANGE.0 && fitted_order <= ORDER_RANGE.1;
    ConvergenceReport {
        n_paths,
        fine_steps,
        meshes,
        objective_gaps,
        rows,
        fitted_order,
        epsilon,
        monotone,
        noise_limited,
        recommended_paths,
        pass,
    }
}

/// Sampled-versus-exploratory gap for the equilibrium policy on uniform
/// meshes `T / n` for each `n` in `intervals` (strictly increasing).
pub fn convergence_study(
    ctx: &VerifyContext<'_>,
    intervals: &[usize],
    n_paths: usize,
    seed: u64,
    fine_steps: usize,
) -> Result<ConvergenceReport> {
    let policy = ctx.policy()?;
    convergence_study_with_policy(&policy, ctx.init, intervals, n_paths, seed, fine_steps)
}
