//! Deterministic regressions and filter diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::market_model::{Investor, ModelParams};
use crate::pde_solver::{solve_a, PdeGridSpec, ValueSurface};
use crate::simulator::{filter_at_nodes, filter_diagnostics, TimeGrid};
use crate::strategies::{aggregate_control, follower_response, leader_policy, single_investor_strategy, GaussianPolicy};

/// Outcome of one named check: `value` is compared against `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }

    fn exact(name: &str, ok: bool) -> Self {
        CheckResult {
            name: name.to_string(),
            value: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            pass: ok,
        }
    }
}

pub fn write_checks_csv(path: &std::path::Path, checks: &[CheckResult]) -> Result<()> {
    let mut out = String::from("name,value,tolerance,pass\n");
    for c in checks {
        out.push_str(&format!(
            "{},{},{},{}\n",
            c.name,
            crate::fmt_f64(c.value),
            crate::fmt_f64(c.tolerance),
            c.pass
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    pub checks: Vec<CheckResult>,
}

impl ReductionReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Largest `|f(t, p)|` over every node of `surface`'s grid.
fn max_over_nodes(surface: &ValueSurface, mut f: impl FnMut(f64, f64) -> Result<f64>) -> Result<f64> {
    let g = surface.grid();
    let mut worst = 0.0f64;
    for level in 0..g.n_time {
        let t = surface.time(level);
        for j in 0..g.n_nodes() {
            worst = worst.max(f(t, surface.p_node(j))?.abs());
        }
    }
    Ok(worst)
}

/// Node-for-node comparison of the equilibrium strategies with the
/// single-investor demand in the parameter limits where they coincide, plus
/// the symmetry and entropy-independence properties of the gain surfaces.
pub fn reduction_checks(params: &ModelParams, grid: &PdeGridSpec) -> Result<ReductionReport> {
    let mut checks = Vec::new();

    // Follower without relative concern.
    let m = ModelParams { lambda2: 0.0, ..*params };
    let a2 = solve_a(&m, Investor::Follower, grid)?;
    let gap = max_over_nodes(&a2, |t, p| {
        let resp = follower_response(t, p, &a2, &m)?;
        Ok(resp.base - single_investor_strategy(t, p, &a2, &m)?)
    })?;
    checks.push(CheckResult::at_most("follower_single_investor", gap, 1e-12));
    checks.push(CheckResult::exact("follower_ignores_leader", m.derived().kappa == 0.0));

    // Neither investor with relative concern.
    let m = ModelParams {
        lambda1: 0.0,
        lambda2: 0.0,
        ..*params
    };
    let d = m.derived();
    checks.push(CheckResult::exact("l_equals_inverse_gamma1", d.l == 1.0 / m.gamma1));
    checks.push(CheckResult::exact("chi_one_kappa_zero", d.chi == 1.0 && d.kappa == 0.0));
    let a1 = solve_a(&m, Investor::Leader, grid)?;
    let a2 = solve_a(&m, Investor::Follower, grid)?;
    let policy = leader_policy(&m, &a1, &a2)?;
    let gap = max_over_nodes(&a1, |t, p| Ok(policy.mean(t, p)? - single_investor_strategy(t, p, &a1, &m)?))?;
    checks.push(CheckResult::at_most("leader_single_investor", gap, 1e-12));

    // Equal risk aversions give identical gain surfaces.
    let m = ModelParams {
        gamma2: params.gamma1,
        ..*params
    };
    let a1 = solve_a(&m, Investor::Leader, grid)?;
    let a2 = solve_a(&m, Investor::Follower, grid)?;
    let identical = a1.values().iter().zip(a2.values()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a1.dp_values().unwrap().iter().zip(a2.dp_values().unwrap()).all(|(x, y)| x.to_bits() == y.to_bits());
    checks.push(CheckResult::exact("equal_gamma_identical_gains", identical));

    // The policy mean does not depend on the entropy weight.
    let small = ModelParams { lambda0: 1e-6, ..*params };
    let large = ModelParams { lambda0: 10.0, ..*params };
    let (s1, s2) = (solve_a(&small, Investor::Leader, grid)?, solve_a(&small, Investor::Follower, grid)?);
    let (l1, l2) = (solve_a(&large, Investor::Leader, grid)?, solve_a(&large, Investor::Follower, grid)?);
    let a = leader_policy(&small, &s1, &s2)?;
    let b = leader_policy(&large, &l1, &l2)?;
    let mean_gap = max_over_nodes(&s1, |t, p| Ok(a.mean(t, p)? - b.mean(t, p)?))?;
    checks.push(CheckResult::at_most("mean_independent_of_lambda0", mean_gap, 0.0));

    // Vanishing entropy weight removes the randomisation.
    let (a1, a2) = (solve_a(params, Investor::Leader, grid)?, solve_a(params, Investor::Follower, grid)?);
    let det = GaussianPolicy::deterministic_limit(params, &a1, &a2)?;
    checks.push(CheckResult::exact("deterministic_limit_variance", det.variance() == 0.0));

    Ok(ReductionReport { checks })
}

/// Largest `|aggregate(u1) - aggregate(0)|` over `n` random `(t, p, u1)`
/// triples, where the aggregate is the follower's relative-wealth exposure
/// rebuilt from the best response.
pub fn u1_cancellation_check(params: &ModelParams, a2: &ValueSurface, n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = params.lambda2 / 2.0;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let t = rng.gen_range(0.0..=params.horizon);
        let p = rng.gen_range(0.0..=1.0);
        let u1 = rng.gen_range(-10.0..10.0);
        let resp = follower_response(t, p, a2, params)?;
        let rebuilt = (1.0 - half) * resp.action(u1) - half * u1;
        worst = worst.max((rebuilt - aggregate_control(t, p, a2, params)?).abs());
    }
    Ok(CheckResult::at_most("u1_cancellation", worst, 1e-12))
}

/// Sample mean of the filter at one node against its starting value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingaleCheck {
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub n_paths: usize,
    pub martingale: Vec<MartingaleCheck>,
    pub min_stored: f64,
    pub max_stored: f64,
    pub excursion_rate: f64,
    pub confined: bool,
}

impl FilterReport {
    pub fn pass(&self) -> bool {
        self.confined && self.martingale.iter().all(|c| c.pass)
    }
}

/// Martingale check at `T/4`, `T/2` and `T` (within four standard errors)
/// and confinement of every stored filter value to `[0, 1]`.
pub fn filter_checks(params: &ModelParams, grid: &TimeGrid, p0: f64, seed: u64, n_paths: usize) -> Result<FilterReport> {
    let n = grid.n_intervals();
    let horizon = grid.horizon();
    let nodes: Vec<usize> = [0.25, 0.5, 1.0]
        .iter()
        .map(|f| {
            grid.node_index(f * horizon).ok_or_else(|| crate::Error::InvalidParameter {
                field: "nodes",
                reason: format!("grid with {n} intervals has no node at {f} T"),
            })
        })
        .collect::<Result<_>>()?;
    let values: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| filter_at_nodes(params, grid, p0, seed, path, &nodes))
        .collect();
    let martingale = nodes
        .iter()
        .enumerate()
        .map(|(k, &node)| {
            let xs: Vec<f64> = values.iter().map(|v| v[k]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
            let std_error = (var / xs.len() as f64).sqrt();
            MartingaleCheck {
                t: grid.nodes()[node],
                mean,
                std_error,
                pass: (mean - p0).abs() <= 4.0 * std_error,
            }
        })
        .collect();
    let diag = filter_diagnostics(params, grid, p0, seed, n_paths);
    Ok(FilterReport {
        n_paths,
        martingale,
        min_stored: diag.min_stored,
        max_stored: diag.max_stored,
        excursion_rate: diag.excursion_rate(),
        confined: diag.min_stored >= 0.0 && diag.max_stored <= 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_solver::Scheme;

    #[test]
    fn reductions_hold_on_benchmark() {
        let rep = reduction_checks(&ModelParams::benchmark(), &PdeGridSpec::new(60, 40, Scheme::CrankNicolson)).unwrap();
        for c in &rep.checks {
            assert!(c.pass, "{c:?}");
        }
        assert_eq!(rep.checks.len(), 8);
    }

    #[test]
    fn cancellation_on_benchmark() {
        let m = ModelParams::benchmark();
        let a2 = solve_a(&m, Investor::Follower, &PdeGridSpec::new(60, 40, Scheme::CrankNicolson)).unwrap();
        let c = u1_cancellation_check(&m, &a2, 2000, 9).unwrap();
        assert!(c.pass, "{c:?}");
    }

    #[test]
    fn filter_is_a_confined_martingale() {
        let m = ModelParams::benchmark();
        let grid = TimeGrid::uniform(1.0, 64, Some(4)).unwrap();
        let rep = filter_checks(&m, &grid, 0.5, 2, 4000).unwrap();
        assert!(rep.pass(), "{rep:?}");
        assert_eq!(rep.martingale.len(), 3);
        assert!(filter_checks(&m, &TimeGrid::uniform(1.0, 3, None).unwrap(), 0.5, 2, 10).is_err());
    }
}
