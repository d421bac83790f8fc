use super::*;
use crate::pde_solver::{solve_a, PdeGridSpec, Quantity, Scheme, ValueSurface};
use crate::strategies::leader_policy;
use approx::assert_relative_eq;

fn pde_grid() -> PdeGridSpec {
    PdeGridSpec::new(129, 63, Scheme::CrankNicolson)
}

fn gains(m: &ModelParams) -> (ValueSurface, ValueSurface) {
    (
        solve_a(m, Investor::Leader, &pde_grid()).unwrap(),
        solve_a(m, Investor::Follower, &pde_grid()).unwrap(),
    )
}

fn init() -> InitialState {
    InitialState {
        x1: 1.0,
        x2: 1.0,
        p: 0.5,
    }
}

#[test]
fn uniform_grid_layout() {
    let g = TimeGrid::uniform(1.0, 8, None).unwrap();
    assert_eq!(g.substeps(), 256);
    assert_eq!(g.n_steps(), 2048);
    assert_eq!(g.mesh(), 0.125);
    assert_eq!(TimeGrid::uniform(1.0, 64, None).unwrap().substeps(), 32);
    assert_eq!(TimeGrid::uniform(1.0, 4096, None).unwrap().substeps(), 1);
    assert_eq!(TimeGrid::uniform(2.0, 3, None).unwrap().substeps(), 683);
    let times = g.step_times();
    assert_eq!(times.len(), 2049);
    assert_eq!(times[256], 0.125);
    assert_eq!(*times.last().unwrap(), 1.0);
}

#[test]
fn grid_clock() {
    let g = TimeGrid::from_nodes(vec![0.0, 0.1, 0.5, 1.0], Some(2)).unwrap();
    assert_eq!(g.clock(0.0), 0.0);
    assert_eq!(g.clock(0.09), 0.0);
    assert_eq!(g.clock(0.1), 0.1);
    assert_eq!(g.clock(0.7), 0.5);
    assert_eq!(g.clock(1.0), 0.5);
    assert_eq!(g.mesh(), 0.5);
    assert_eq!(g.node_index(0.5), Some(2));
    assert_eq!(g.node_index(0.3), None);
}

#[test]
fn grid_validation() {
    assert!(TimeGrid::from_nodes(vec![0.0], None).is_err());
    assert!(TimeGrid::from_nodes(vec![0.1, 1.0], None).is_err());
    assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5, 1.0], None).is_err());
    assert!(TimeGrid::uniform(1.0, 0, None).is_err());
    assert!(TimeGrid::uniform(1.0, 4, Some(0)).is_err());
}

#[test]
fn filter_step_examples() {
    let m = ModelParams::benchmark();
    assert_eq!(step_filter(0.0, 0.7, &m), 0.0);
    assert_eq!(step_filter(1.0, -0.7, &m), 1.0);
    assert_eq!(step_filter(0.3, 0.0, &m), 0.3);
    assert_eq!(step_filter(0.5, 100.0, &m), 1.0);
    assert_eq!(step_filter(0.5, -100.0, &m), 0.0);
    assert_relative_eq!(step_filter(0.5, 0.01, &m), 0.5 + 0.1 * 0.01, max_relative = 1e-15);
}

#[test]
fn relative_wealth_examples() {
    let m = ModelParams {
        lambda1: 0.0,
        lambda2: 0.5,
        ..ModelParams::benchmark()
    };
    assert_eq!(relative_wealth(Investor::Leader, 3.0, 5.0, &m), 3.0);
    assert_eq!(relative_wealth(Investor::Follower, 3.0, 5.0, &m), 0.75 * 5.0 - 0.25 * 3.0);
    let b = ModelParams::benchmark();
    assert_relative_eq!(relative_wealth(Investor::Leader, 2.0, 2.0, &b), (1.0 - b.lambda1) * 2.0);
}

#[test]
fn z_transform_matches_arithmetic() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 4, Some(8)).unwrap();
    let b = simulate_sampled(&grid, &pol, init(), 3, 0).unwrap();
    let z2 = z_transform(&b, Investor::Follower, &m);
    for i in 0..b.x1.len() {
        assert_eq!(z2[i], 0.75 * b.x2[i] - 0.25 * b.x1[i]);
    }
}

#[test]
fn recorded_path_layout_and_freeze() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 4, Some(8)).unwrap();
    let b = simulate_sampled(&grid, &pol, init(), 3, 0).unwrap();
    assert_eq!(b.times.len(), 33);
    assert_eq!(b.x1.len(), 33);
    assert_eq!(b.w_hat.len(), 32);
    assert!(b.w_bar.is_empty());
    assert_eq!(b.u1_actions.len(), 4);
    assert_eq!((b.x1[0], b.x2[0], b.p[0]), (1.0, 1.0, 0.5));
    for j in 0..32 {
        let u1 = b.u1_actions[j / 8];
        assert_eq!(b.u1_active[j], u1);
        let gain = (m.theta_at(b.p[j]) - m.r) * (0.25 / 8.0) + m.sigma * b.w_hat[j];
        assert_relative_eq!(b.x1[j + 1] - b.x1[j], u1 * gain, epsilon = 1e-15);
    }
}

#[test]
fn one_interval_matches_hand_recursion() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 1, Some(3)).unwrap();
    let (seed, path) = (17, 5);
    let b = simulate_sampled(&grid, &pol, init(), seed, path).unwrap();

    let mut market = NormalStream::new(seed, Channel::Market, path);
    let mut sampling = NormalStream::new(seed, Channel::Sampling, path);
    let u1 = pol.mean(0.0, 0.5).unwrap() + pol.std_dev() * sampling.next_normal();
    let dt = 1.0 / 3.0;
    let (mut p, mut x1, mut x2) = (0.5, 1.0, 1.0);
    for k in 0..3 {
        let t = k as f64 * dt;
        let dw = dt.sqrt() * market.next_normal();
        let da2 = a2.interpolate(t, p, Quantity::Dp).unwrap();
        let u2 = m.gamma_term(p, da2) + m.derived().kappa * u1;
        let gain = (m.theta(p).unwrap() - m.r) * dt + m.sigma * dw;
        x1 += u1 * gain;
        x2 += u2 * gain;
        p = (p + m.beta(p).unwrap() * dw).clamp(0.0, 1.0);
    }
    assert_eq!(b.u1_actions, vec![u1]);
    assert_relative_eq!(*b.x1.last().unwrap(), x1, max_relative = 1e-14);
    assert_relative_eq!(*b.x2.last().unwrap(), x2, max_relative = 1e-14);
    assert_eq!(*b.p.last().unwrap(), p);
}

#[test]
fn seeds_reproduce_bit_for_bit() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 8, Some(16)).unwrap();
    for regime in [Regime::Sampled, Regime::Exploratory] {
        let sim = Simulation::new(&pol, &grid, init(), 99, regime).unwrap();
        let a = sim.record_path(&Scenario::equilibrium(), 4).unwrap();
        let b = sim.record_path(&Scenario::equilibrium(), 4).unwrap();
        assert_eq!(a, b);
        let c = sim.record_path(&Scenario::equilibrium(), 5).unwrap();
        assert_ne!(a.x1, c.x1);
        let out = sim.run_path(&Scenario::equilibrium(), 4, &RunOptions::default()).unwrap();
        assert_eq!(out.end.x1, *a.x1.last().unwrap());
        assert_eq!(out.end.x2, *a.x2.last().unwrap());
    }
}

#[test]
fn regimes_share_market_noise() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 8, Some(16)).unwrap();
    let s = simulate_sampled(&grid, &pol, init(), 7, 2).unwrap();
    let e = simulate_exploratory(&grid, &pol, init(), 7, 2).unwrap();
    assert_eq!(s.w_hat, e.w_hat);
    assert_eq!(s.p, e.p);
    assert_eq!(e.w_bar.len(), e.w_hat.len());
}

#[test]
fn deterministic_follower_without_relative_concern() {
    let m = ModelParams {
        lambda2: 0.0,
        lambda0: 0.0,
        ..ModelParams::benchmark()
    };
    let (a1, a2) = gains(&m);
    let pol = GaussianPolicy::deterministic_limit(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 4, Some(16)).unwrap();
    let b = simulate_sampled(&grid, &pol, init(), 1, 0).unwrap();
    let e = simulate_exploratory(&grid, &pol, init(), 1, 0).unwrap();
    let mut x2 = 1.0;
    for j in 0..b.w_hat.len() {
        let p = b.p[j];
        let da2 = a2.interpolate(b.times[j], p, Quantity::Dp).unwrap();
        let u = m.single_investor_demand(m.gamma2, p, da2);
        x2 += u * ((m.theta_at(p) - m.r) / 64.0 + m.sigma * b.w_hat[j]);
        assert_relative_eq!(b.x2[j + 1], x2, max_relative = 1e-13);
    }
    // No exposure to the exploration noise when kappa = 0.
    assert_eq!(b.x2, e.x2);
}

#[test]
fn exploratory_without_randomisation_follows_the_mean() {
    let m = ModelParams {
        lambda0: 0.0,
        ..ModelParams::benchmark()
    };
    let (a1, a2) = gains(&m);
    let pol = GaussianPolicy::deterministic_limit(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 2, Some(32)).unwrap();
    let e = simulate_exploratory(&grid, &pol, init(), 4, 1).unwrap();
    let mut x1 = 1.0;
    for j in 0..e.w_hat.len() {
        let p = e.p[j];
        let b = pol.mean(e.times[j], p).unwrap();
        x1 += b * ((m.theta_at(p) - m.r) / 64.0 + m.sigma * e.w_hat[j]);
        assert_relative_eq!(e.x1[j + 1], x1, max_relative = 1e-13);
    }
}

#[test]
fn no_premium_means_no_trading() {
    let mut m = ModelParams::benchmark();
    m.mu1 = m.r;
    m.mu2 = m.r;
    let (a1, a2) = gains(&m);
    let pol = GaussianPolicy::deterministic_limit(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 4, Some(16)).unwrap();
    let sim = Simulation::new(&pol, &grid, init(), 2, Regime::Sampled).unwrap();
    for o in sim.run_paths(&Scenario::equilibrium(), 50, &RunOptions::default()).unwrap() {
        assert_eq!(o.end.x2, 1.0);
        assert_eq!(o.end.x1, 1.0);
    }
}

#[test]
fn exploratory_quadratic_variation() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 1, Some(1024)).unwrap();
    let (mut realised, mut predicted) = (0.0, 0.0);
    for path in 0..400 {
        let e = simulate_exploratory(&grid, &pol, init(), 8, path).unwrap();
        let dt = 1.0 / 1024.0;
        for j in 0..e.w_hat.len() {
            realised += (e.x1[j + 1] - e.x1[j]).powi(2);
            let b = e.u1_active[j];
            predicted += m.sigma * m.sigma * (b * b + pol.variance()) * dt;
        }
    }
    assert!((realised / predicted - 1.0).abs() < 0.01, "{}", realised / predicted);
}

#[test]
fn filter_is_a_confined_martingale() {
    let m = ModelParams::benchmark();
    let grid = TimeGrid::uniform(1.0, 4, Some(128)).unwrap();
    let n = 20_000;
    let vals: Vec<Vec<f64>> = (0..n as u64).map(|k| filter_at_nodes(&m, &grid, 0.5, 3, k, &[1, 2, 4])).collect();
    for h in 0..3 {
        let xs: Vec<f64> = vals.iter().map(|v| v[h]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 0.5).abs() <= 4.0 * sd / (n as f64).sqrt());
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
    }
    let diag = filter_diagnostics(&m, &grid, 0.5, 3, 2_000);
    assert_eq!(diag.steps, 2_000 * 512);
    assert!(diag.excursion_rate() < 1e-3);
    assert!(diag.min_stored >= 0.0 && diag.max_stored <= 1.0);
}

#[test]
fn filter_helper_tracks_simulation() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 4, Some(8)).unwrap();
    let b = simulate_sampled(&grid, &pol, init(), 12, 6).unwrap();
    let ps = filter_at_nodes(&m, &grid, 0.5, 12, 6, &[0, 2, 4]);
    assert_eq!(ps, vec![b.p[0], b.p[16], b.p[32]]);
}

#[test]
fn frozen_actions_drive_the_leader() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 8, Some(4)).unwrap();
    let sim = Simulation::new(&pol, &grid, init(), 5, Regime::Sampled).unwrap();
    let f0 = sim.frozen_actions(0).unwrap();
    let f1 = sim.frozen_actions(1).unwrap();
    assert_eq!(f0.len(), 8);
    assert_eq!(f0, sim.frozen_actions(0).unwrap());
    assert_ne!(f0, f1);
    let scen = Scenario {
        frozen_actions: Some(f0.clone()),
        ..Scenario::default()
    };
    assert_eq!(sim.record_path(&scen, 3).unwrap().u1_actions, f0);
    let bad = Scenario {
        frozen_actions: Some(vec![0.0; 3]),
        ..Scenario::default()
    };
    assert!(sim.run_path(&bad, 0, &RunOptions::default()).is_err());
    let expl = Simulation::new(&pol, &grid, init(), 5, Regime::Exploratory).unwrap();
    assert!(expl.run_path(&scen, 0, &RunOptions::default()).is_err());
}

#[test]
fn window_runs_splice_into_full_runs() {
    // Controls depend on (t, p) only and the filter ignores wealth, so a
    // deviation confined to [0, h) changes wealth increments only there.
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 16, Some(8)).unwrap();
    let k = 2;
    let h = grid.nodes()[k];
    let scen = Scenario {
        leader_deviation: Some(PolicyDeviation {
            until: h,
            mean_offset: 0.7,
            variance_scale: 2.0,
        }),
        follower_override: Some(FollowerOverride { until: h, action: -0.3 }),
        frozen_actions: None,
    };
    for regime in [Regime::Sampled, Regime::Exploratory] {
        let sim = Simulation::new(&pol, &grid, init(), 21, regime).unwrap();
        let opts = RunOptions {
            stop_node: None,
            checkpoints: vec![k],
        };
        let window = RunOptions {
            stop_node: Some(k),
            checkpoints: vec![],
        };
        for path in 0..5 {
            let base = sim.run_path(&Scenario::equilibrium(), path, &opts).unwrap();
            let full = sim.run_path(&scen, path, &RunOptions::default()).unwrap();
            let part = sim.run_path(&scen, path, &window).unwrap();
            assert_eq!(part.end.node, k);
            let cp = base.checkpoints[0];
            assert_eq!(cp.p, part.end.p);
            assert_relative_eq!(base.end.x1 - cp.x1 + part.end.x1, full.end.x1, epsilon = 1e-13);
            assert_relative_eq!(base.end.x2 - cp.x2 + part.end.x2, full.end.x2, epsilon = 1e-13);
            assert!((full.end.x1 - base.end.x1).abs() > 1e-6);
        }
    }
}

#[test]
fn scenario_validation() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 4, Some(4)).unwrap();
    let sim = Simulation::new(&pol, &grid, init(), 1, Regime::Exploratory).unwrap();
    let bad = Scenario {
        leader_deviation: Some(PolicyDeviation {
            until: 0.25,
            mean_offset: 0.0,
            variance_scale: 0.0,
        }),
        ..Scenario::default()
    };
    assert!(sim.run_path(&bad, 0, &RunOptions::default()).is_err());
    let wrong_horizon = TimeGrid::uniform(2.0, 4, Some(4)).unwrap();
    assert!(Simulation::new(&pol, &wrong_horizon, init(), 1, Regime::Sampled).is_err());
    let edge = InitialState { p: 1.0, ..init() };
    assert!(Simulation::new(&pol, &grid, edge, 1, Regime::Sampled).is_err());
}

#[test]
fn csv_dump_columns() {
    let m = ModelParams::benchmark();
    let (a1, a2) = gains(&m);
    let pol = leader_policy(&m, &a1, &a2).unwrap();
    let grid = TimeGrid::uniform(1.0, 2, Some(3)).unwrap();
    let b = simulate_exploratory(&grid, &pol, init(), 1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("path.csv");
    b.write_csv(&file).unwrap();
    let text = std::fs::read_to_string(&file).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,P,X1,X2,u1_active");
    assert_eq!(lines.count(), 7);
}
