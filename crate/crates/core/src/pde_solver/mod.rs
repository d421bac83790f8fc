//! Finite-difference solvers for the four backward Cauchy problems.
//!
//! The anticipated gains `a_i` solve
//!
//! ```text
//! d_t a + (theta - r)^2 / (sigma^2 gamma) - beta (theta - r) / sigma * d_p a + beta^2 / 2 * d_pp a = 0
//! ```
//!
//! and the value offsets `A_i` solve `d_t A + beta^2 / 2 * d_pp A + R(p, d_p a) (+ entropy) = 0`,
//! all with zero terminal data on `(0, 1)`. Both equations degenerate at
//! `p in {0, 1}` where `beta = 0`; there the PDE collapses to an ODE in `t`
//! whose closed-form solution is imposed as Dirichlet data.

mod tridiag;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_model::{Investor, ModelParams};

pub use tridiag::solve_in_place as solve_tridiagonal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Forward Euler in time with upwinded advection.
    Explicit,
    /// Crank-Nicolson with centred differences.
    #[default]
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeGridSpec {
    /// Number of time levels including `t = 0` and `t = T`.
    pub n_time: usize,
    /// Number of interior p-nodes; the two boundary nodes are stored as well.
    pub n_space: usize,
    pub scheme: Scheme,
}

impl Default for PdeGridSpec {
    fn default() -> Self {
        PdeGridSpec {
            n_time: 512,
            n_space: 256,
            scheme: Scheme::CrankNicolson,
        }
    }
}

impl PdeGridSpec {
    pub fn new(n_time: usize, n_space: usize, scheme: Scheme) -> Self {
        PdeGridSpec {
            n_time,
            n_space,
            scheme,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_time < 2 {
            return Err(Error::InvalidParameter {
                field: "n_time",
                reason: format!("need at least 2 time levels, got {}", self.n_time),
            });
        }
        if self.n_space < 3 {
            return Err(Error::InvalidParameter {
                field: "n_space",
                reason: format!("need at least 3 interior nodes, got {}", self.n_space),
            });
        }
        Ok(())
    }

    /// Total stored p-nodes, boundaries included.
    pub fn n_nodes(&self) -> usize {
        self.n_space + 2
    }

    pub fn dp(&self) -> f64 {
        1.0 / (self.n_space + 1) as f64
    }

    pub fn dt(&self, horizon: f64) -> f64 {
        horizon / (self.n_time - 1) as f64
    }

    pub fn p_node(&self, j: usize) -> f64 {
        j as f64 / (self.n_space + 1) as f64
    }

    pub fn time(&self, horizon: f64, level: usize) -> f64 {
        horizon * level as f64 / (self.n_time - 1) as f64
    }

    /// Grid with every cell split in two, so that all current nodes survive.
    pub fn refined(&self) -> Self {
        PdeGridSpec {
            n_time: 2 * (self.n_time - 1) + 1,
            n_space: 2 * (self.n_space + 1) - 1,
            scheme: self.scheme,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SurfaceKind {
    /// `a1`, the leader's anticipated gain.
    LeaderGain,
    /// `a2`, the follower's anticipated gain.
    FollowerGain,
    /// `A1`, the leader's value offset.
    LeaderValue,
    /// `A2`, the follower's value offset.
    FollowerValue,
}

impl SurfaceKind {
    pub fn label(self) -> &'static str {
        match self {
            SurfaceKind::LeaderGain => "a1",
            SurfaceKind::FollowerGain => "a2",
            SurfaceKind::LeaderValue => "A1",
            SurfaceKind::FollowerValue => "A2",
        }
    }

    pub fn gain(who: Investor) -> Self {
        match who {
            Investor::Leader => SurfaceKind::LeaderGain,
            Investor::Follower => SurfaceKind::FollowerGain,
        }
    }

    pub fn value(who: Investor) -> Self {
        match who {
            Investor::Leader => SurfaceKind::LeaderValue,
            Investor::Follower => SurfaceKind::FollowerValue,
        }
    }

    pub fn is_gain(self) -> bool {
        matches!(self, SurfaceKind::LeaderGain | SurfaceKind::FollowerGain)
    }
}

impl fmt::Display for SurfaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Value,
    Dp,
}

/// Precomputed bilinear interpolation stencil for one `(t, p)` query.
///
/// Surfaces solved on the same grid can share a locator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Locator {
    level: usize,
    wt: f64,
    node: usize,
    wp: f64,
}

/// Cell index and in-cell weight for coordinate `x` measured in grid units.
#[inline]
fn cell(x: f64, cells: usize) -> (usize, f64) {
    let x = x.clamp(0.0, cells as f64);
    let nearest = x.round();
    if (x - nearest).abs() < 1e-10 {
        let k = nearest as usize;
        if k >= cells {
            (cells - 1, 1.0)
        } else {
            (k, 0.0)
        }
    } else {
        let k = (x.floor() as usize).min(cells - 1);
        (k, x - k as f64)
    }
}

impl Locator {
    /// Builds the stencil without domain checks; `t` and `p` are clamped.
    #[inline]
    pub fn new(grid: &PdeGridSpec, horizon: f64, t: f64, p: f64) -> Self {
        let (level, wt) = cell(t / horizon * (grid.n_time - 1) as f64, grid.n_time - 1);
        let (node, wp) = cell(p * (grid.n_space + 1) as f64, grid.n_space + 1);
        Locator {
            level,
            wt,
            node,
            wp,
        }
    }

    #[inline]
    fn apply(&self, table: &Array2<f64>) -> f64 {
        let cols = table.ncols();
        let data = table.as_slice().expect("surface tables are contiguous");
        let k = self.level * cols + self.node;
        let lo = (1.0 - self.wp) * data[k] + self.wp * data[k + 1];
        let hi = (1.0 - self.wp) * data[k + cols] + self.wp * data[k + cols + 1];
        (1.0 - self.wt) * lo + self.wt * hi
    }
}

/// A solved surface on the `(t, p)` grid.
#[derive(Debug, Clone)]
pub struct ValueSurface {
    kind: SurfaceKind,
    values: Array2<f64>,
    dp_values: Option<Array2<f64>>,
    grid: PdeGridSpec,
    params: ModelParams,
    gamma: f64,
}

impl ValueSurface {
    pub fn kind(&self) -> SurfaceKind {
        self.kind
    }

    /// Node values indexed `(time level, p node)`.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Central-difference p-derivatives; only gain surfaces carry them.
    pub fn dp_values(&self) -> Option<&Array2<f64>> {
        self.dp_values.as_ref()
    }

    pub fn grid(&self) -> &PdeGridSpec {
        &self.grid
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Risk aversion the surface was solved with.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn time(&self, level: usize) -> f64 {
        self.grid.time(self.params.horizon, level)
    }

    pub fn p_node(&self, j: usize) -> f64 {
        self.grid.p_node(j)
    }

    #[inline]
    pub fn locate(&self, t: f64, p: f64) -> Locator {
        Locator::new(&self.grid, self.params.horizon, t, p)
    }

    #[inline]
    pub fn value_at(&self, loc: &Locator) -> f64 {
        loc.apply(&self.values)
    }

    /// Interpolated p-derivative. Panics on value surfaces, which store none.
    #[inline]
    pub fn dp_at(&self, loc: &Locator) -> f64 {
        loc.apply(
            self.dp_values
                .as_ref()
                .expect("p-derivatives are stored for gain surfaces only"),
        )
    }

    /// Bilinear interpolation of the stored values or p-derivatives.
    pub fn interpolate(&self, t: f64, p: f64, which: Quantity) -> Result<f64> {
        if !(0.0..=self.params.horizon).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "[0, T]",
            });
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain {
                what: "p",
                value: p,
                domain: "[0, 1]",
            });
        }
        let loc = self.locate(t, p);
        match which {
            Quantity::Value => Ok(self.value_at(&loc)),
            Quantity::Dp => match &self.dp_values {
                Some(table) => Ok(loc.apply(table)),
                None => Err(Error::KindMismatch {
                    expected: "a1 or a2",
                    found: self.kind.label(),
                }),
            },
        }
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}_{}x{}.csv",
            self.kind.label(),
            self.grid.n_time,
            self.grid.n_space
        )
    }

    /// Writes the node values as CSV into `dir`: a header of p-nodes, then one
    /// row per time level with `t` in the first column.
    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(self.file_name());
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..self.grid.n_nodes()).map(|j| crate::fmt_f64(self.p_node(j))));
        w.write_record(&header)?;
        for (level, row) in self.values.outer_iter().enumerate() {
            let mut rec = vec![crate::fmt_f64(self.time(level))];
            rec.extend(row.iter().map(|&v| crate::fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(path)
    }

    fn check_gain(&self, who: Investor) -> Result<()> {
        let expected = SurfaceKind::gain(who);
        if self.kind != expected {
            return Err(Error::KindMismatch {
                expected: expected.label(),
                found: self.kind.label(),
            });
        }
        Ok(())
    }
}

/// Source of the value-offset equation for an investor with risk aversion
/// `gamma` and gain slope `da`: myopic gain minus the variance penalty of the
/// wealth and filter exposures.
#[inline]
pub fn source_r(params: &ModelParams, gamma: f64, p: f64, da: f64) -> f64 {
    let excess = params.theta_at(p) - params.r;
    let beta = params.beta_at(p);
    let s = params.sigma;
    let m = excess / (s * s * gamma) - beta * da / s;
    excess * m - 0.5 * gamma * s * s * m * m - 0.5 * gamma * beta * beta * da * da - gamma * s * beta * da * m
}

/// Constant per-unit-time contribution of the equilibrium policy's entropy
/// bonus net of its exploration risk, `lambda0/2 * ln(2 pi lambda0 / (gamma1 sigma^2 chi^2))`.
pub fn entropy_source(params: &ModelParams) -> Result<f64> {
    if params.lambda0 <= 0.0 {
        return Err(Error::InvalidParameter {
            field: "lambda0",
            reason: "the leader's value offset needs lambda0 > 0".into(),
        });
    }
    let chi = params.derived().chi;
    let s2 = params.sigma * params.sigma;
    Ok(0.5
        * params.lambda0
        * (2.0 * std::f64::consts::PI * params.lambda0 / (params.gamma1 * s2 * chi * chi)).ln())
}

struct Problem<'a> {
    kind: SurfaceKind,
    diffusion: Vec<f64>,
    advection: Vec<f64>,
    /// Source at every `(level, node)`; boundary columns are ignored.
    source: Array2<f64>,
    /// Dirichlet data at `p = 0` and `p = 1` as a function of `t`.
    boundary: &'a dyn Fn(f64) -> (f64, f64),
}

fn march(params: &ModelParams, grid: &PdeGridSpec, problem: Problem<'_>) -> Result<Array2<f64>> {
    let nt = grid.n_time;
    let nodes = grid.n_nodes();
    let m = grid.n_space;
    let dt = grid.dt(params.horizon);
    let dp = grid.dp();
    let inv_dp2 = 1.0 / (dp * dp);
    let inv_2dp = 0.5 / dp;
    let label = problem.kind.label();

    let mut u = Array2::<f64>::zeros((nt, nodes));
    let (g0, g1) = (problem.boundary)(params.horizon);
    u[[nt - 1, 0]] = g0;
    u[[nt - 1, nodes - 1]] = g1;

    match grid.scheme {
        Scheme::CrankNicolson => {
            // L u_j = lo_j u_{j-1} + mid_j u_j + up_j u_{j+1}
            let lo: Vec<f64> = (0..nodes)
                .map(|j| problem.diffusion[j] * inv_dp2 - problem.advection[j] * inv_2dp)
                .collect();
            let mid: Vec<f64> = (0..nodes).map(|j| -2.0 * problem.diffusion[j] * inv_dp2).collect();
            let up: Vec<f64> = (0..nodes)
                .map(|j| problem.diffusion[j] * inv_dp2 + problem.advection[j] * inv_2dp)
                .collect();
            let h = 0.5 * dt;
            let sub: Vec<f64> = (1..=m).map(|j| -h * lo[j]).collect();
            let diag: Vec<f64> = (1..=m).map(|j| 1.0 - h * mid[j]).collect();
            let sup: Vec<f64> = (1..=m).map(|j| -h * up[j]).collect();
            let mut rhs = vec![0.0; m];
            let mut scratch = vec![0.0; m];

            for level in (0..nt - 1).rev() {
                let t = grid.time(params.horizon, level);
                let (b0, b1) = (problem.boundary)(t);
                {
                    let next = u.row(level + 1);
                    for j in 1..=m {
                        let lu = lo[j] * next[j - 1] + mid[j] * next[j] + up[j] * next[j + 1];
                        rhs[j - 1] = next[j]
                            + h * lu
                            + h * (problem.source[[level, j]] + problem.source[[level + 1, j]]);
                    }
                }
                rhs[0] += h * lo[1] * b0;
                rhs[m - 1] += h * up[m] * b1;
                tridiag::solve_in_place(&sub, &diag, &sup, &mut rhs, &mut scratch);
                let mut row = u.row_mut(level);
                row[0] = b0;
                row[nodes - 1] = b1;
                for j in 1..=m {
                    row[j] = rhs[j - 1];
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { kind: label, level });
                }
            }
        }
        Scheme::Explicit => {
            let rate = (1..=m)
                .map(|j| 2.0 * problem.diffusion[j] * inv_dp2 + problem.advection[j].abs() / dp)
                .fold(0.0_f64, f64::max);
            if rate > 0.0 && dt * rate > 1.0 {
                return Err(Error::Stability {
                    dt,
                    bound: 1.0 / rate,
                });
            }
            let mut next = vec![0.0; nodes];
            for level in (0..nt - 1).rev() {
                next.copy_from_slice(u.row(level + 1).as_slice().expect("contiguous row"));
                let t = grid.time(params.horizon, level);
                let (b0, b1) = (problem.boundary)(t);
                let mut row = u.row_mut(level);
                row[0] = b0;
                row[nodes - 1] = b1;
                for j in 1..=m {
                    let d = problem.diffusion[j];
                    let c = problem.advection[j];
                    let diffusion = d * (next[j + 1] - 2.0 * next[j] + next[j - 1]) * inv_dp2;
                    // In reversed time the equation is u_tau = c u_p + ..., so
                    // information arrives from the side c points to.
                    let advection = if c >= 0.0 {
                        c * (next[j + 1] - next[j]) / dp
                    } else {
                        c * (next[j] - next[j - 1]) / dp
                    };
                    row[j] = next[j] + dt * (diffusion + advection + problem.source[[level + 1, j]]);
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { kind: label, level });
                }
            }
        }
    }
    Ok(u)
}

/// Second-order p-derivative table: central in the interior, one-sided at the
/// two boundary nodes.
fn differentiate(values: &Array2<f64>, dp: f64) -> Array2<f64> {
    let (nt, n) = values.dim();
    let mut out = Array2::<f64>::zeros((nt, n));
    let inv = 0.5 / dp;
    for level in 0..nt {
        let v = values.row(level);
        let mut d = out.row_mut(level);
        d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) * inv;
        for j in 1..n - 1 {
            d[j] = (v[j + 1] - v[j - 1]) * inv;
        }
        d[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) * inv;
    }
    out
}

/// Solves for the anticipated gain `a_i` of investor `who`.
pub fn solve_a(params: &ModelParams, who: Investor, grid: &PdeGridSpec) -> Result<ValueSurface> {
    solve_a_with_gamma(params, params.gamma_of(who), who, grid)
}

/// As [`solve_a`] with an arbitrary positive risk aversion.
pub fn solve_a_with_gamma(
    params: &ModelParams,
    gamma: f64,
    who: Investor,
    grid: &PdeGridSpec,
) -> Result<ValueSurface> {
    grid.validate()?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter {
            field: "gamma",
            reason: format!("must be positive, got {gamma}"),
        });
    }
    let kind = SurfaceKind::gain(who);
    let s = params.sigma;
    let nodes = grid.n_nodes();
    let (mut diffusion, mut advection) = (vec![0.0; nodes], vec![0.0; nodes]);
    let mut source_row = vec![0.0; nodes];
    for j in 0..nodes {
        let p = grid.p_node(j);
        let beta = params.beta_at(p);
        let excess = params.theta_at(p) - params.r;
        diffusion[j] = 0.5 * beta * beta;
        advection[j] = -beta * excess / s;
        source_row[j] = excess * excess / (s * s * gamma);
    }
    let source = Array2::from_shape_fn((grid.n_time, nodes), |(_, j)| source_row[j]);
    let rate0 = (params.mu2 - params.r).powi(2) / (s * s * gamma);
    let rate1 = (params.mu1 - params.r).powi(2) / (s * s * gamma);
    let horizon = params.horizon;
    let boundary = move |t: f64| (rate0 * (horizon - t), rate1 * (horizon - t));
    let values = march(
        params,
        grid,
        Problem {
            kind,
            diffusion,
            advection,
            source,
            boundary: &boundary,
        },
    )?;
    let dp_values = Some(differentiate(&values, grid.dp()));
    Ok(ValueSurface {
        kind,
        values,
        dp_values,
        grid: *grid,
        params: *params,
        gamma,
    })
}

fn solve_value(
    params: &ModelParams,
    who: Investor,
    gain: &ValueSurface,
    grid: &PdeGridSpec,
    constant: f64,
) -> Result<ValueSurface> {
    grid.validate()?;
    gain.check_gain(who)?;
    let gamma = gain.gamma;
    let kind = SurfaceKind::value(who);
    let nodes = grid.n_nodes();
    let horizon = params.horizon;
    let same_grid = gain.grid.n_time == grid.n_time && gain.grid.n_space == grid.n_space;
    let source = Array2::from_shape_fn((grid.n_time, nodes), |(level, j)| {
        let p = grid.p_node(j);
        let da = if same_grid {
            gain.dp_values.as_ref().expect("gain surface")[[level, j]]
        } else {
            gain.dp_at(&gain.locate(grid.time(horizon, level), p))
        };
        source_r(params, gamma, p, da) + constant
    });
    let diffusion: Vec<f64> = (0..nodes)
        .map(|j| {
            let b = params.beta_at(grid.p_node(j));
            0.5 * b * b
        })
        .collect();
    let s2 = params.sigma * params.sigma;
    let rate0 = (params.mu2 - params.r).powi(2) / (2.0 * s2 * gamma) + constant;
    let rate1 = (params.mu1 - params.r).powi(2) / (2.0 * s2 * gamma) + constant;
    let boundary = move |t: f64| (rate0 * (horizon - t), rate1 * (horizon - t));
    let values = march(
        params,
        grid,
        Problem {
            kind,
            diffusion,
            advection: vec![0.0; nodes],
            source,
            boundary: &boundary,
        },
    )?;
    Ok(ValueSurface {
        kind,
        values,
        dp_values: None,
        grid: *grid,
        params: *params,
        gamma,
    })
}

/// Solves for the follower's value offset `A2` given the follower gain surface `a2`.
pub fn solve_follower_value(
    params: &ModelParams,
    a2: &ValueSurface,
    grid: &PdeGridSpec,
) -> Result<ValueSurface> {
    solve_value(params, Investor::Follower, a2, grid, 0.0)
}

/// Solves for the leader's value offset `A1` given the leader gain surface `a1`.
///
/// The source carries the constant net entropy bonus of the Gaussian
/// equilibrium policy, so `lambda0 > 0` is required.
pub fn solve_leader_value(
    params: &ModelParams,
    a1: &ValueSurface,
    grid: &PdeGridSpec,
) -> Result<ValueSurface> {
    let constant = entropy_source(params)?;
    solve_value(params, Investor::Leader, a1, grid, constant)
}

/// The four surfaces that define the equilibrium.
#[derive(Debug, Clone)]
pub struct EquilibriumSurfaces {
    pub a1: ValueSurface,
    pub a2: ValueSurface,
    pub big_a1: ValueSurface,
    pub big_a2: ValueSurface,
}

impl EquilibriumSurfaces {
    pub fn solve(params: &ModelParams, grid: &PdeGridSpec) -> Result<Self> {
        let a1 = solve_a(params, Investor::Leader, grid)?;
        let a2 = solve_a(params, Investor::Follower, grid)?;
        let big_a1 = solve_leader_value(params, &a1, grid)?;
        let big_a2 = solve_follower_value(params, &a2, grid)?;
        Ok(EquilibriumSurfaces {
            a1,
            a2,
            big_a1,
            big_a2,
        })
    }

    pub fn all(&self) -> [&ValueSurface; 4] {
        [&self.a1, &self.a2, &self.big_a1, &self.big_a2]
    }
}
