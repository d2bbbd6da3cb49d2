use dcgrid_core::{
    certify_monotonicity, integrate, linearize, load_config, presets, simulate_reduced,
    solve_equilibrium, solve_h, write_spectrum_csv, write_trajectory_csv, CertificateSpec,
    EventKind, IntegrateOptions, LyapunovReference, QssSolver, ReducedOptions, Scenario,
    ScenarioEvent, QSS_TOL,
};
use proptest::prelude::*;

#[test]
fn overrides_flow_into_the_model() {
    let cfg = load_config(
        None,
        Some("cs2"),
        &["controller.k=3".into(), "seed=17".into()],
    )
    .unwrap();
    let grid = cfg.microgrid().unwrap();
    assert_eq!(grid.controller.settings.k, 3.0);
    assert_eq!(cfg.seed, 17);
    assert_eq!(grid.electrical.i_rated, vec![18.0, 6.0, 12.0, 12.0]);
}

#[test]
fn equilibrium_to_spectrum_csv() {
    let grid = presets::cs2().microgrid().unwrap();
    let eq = solve_equilibrium(&grid).unwrap();
    let lin = linearize(&grid, &eq).unwrap();
    assert_eq!(lin.eigenvalues.len(), 25);
    assert!(lin.max_real < 0.0);

    let mut buf = Vec::new();
    write_spectrum_csv(&mut buf, &lin.eigenvalues).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let first: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!((first[0], first[1]), lin.eigenvalues[0]);
}

#[test]
fn trajectory_from_equilibrium_stays_put() {
    let grid = presets::cs2().microgrid().unwrap();
    let eq = solve_equilibrium(&grid).unwrap();
    let opts = IntegrateOptions {
        dt: 1e-4,
        t_end: 1.0,
        sample_every: 1000,
        reference: LyapunovReference::SegmentEquilibrium,
    };
    let traj = integrate(&eq.state, &grid, &Scenario::steady(), &opts).unwrap();
    let x0 = eq.state.to_vec();
    let x1 = traj.x.last().unwrap();
    let drift = x0
        .iter()
        .zip(x1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-6, "drift {drift:e}");
    assert!(traj.ws.iter().all(|w| *w < 1e-12));

    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &traj).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap().lines().count(),
        1 + traj.len()
    );
}

#[test]
fn generator_round_trip_stays_finite() {
    let grid = presets::cs2().microgrid().unwrap();
    let eq = solve_equilibrium(&grid).unwrap();
    let scenario = Scenario {
        controller_enabled: true,
        events: vec![
            ScenarioEvent::new(1.0, EventKind::DgDisconnect { dg: 1 }),
            ScenarioEvent::new(3.0, EventKind::DgReconnect { dg: 1 }),
        ],
    };
    let opts = IntegrateOptions {
        dt: 1e-4,
        t_end: 4.0,
        sample_every: 100,
        reference: LyapunovReference::Origin,
    };
    let traj = integrate(&eq.state, &grid, &scenario, &opts).unwrap();
    assert_eq!(traj.event_marks.len(), 2);
    let ig2 = traj.layout.i_g().start + 1;
    let (_, at_off) = traj.event_marks[0];
    // Generator 2 carries no current while it is out.
    assert!(traj.x[at_off + 10][ig2].abs() < 1e-6);
    assert!(traj.x.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn certificate_depends_only_on_seed() {
    let grid = presets::table1().microgrid().unwrap();
    let spec = CertificateSpec {
        n_diag: 3,
        n_random: 4,
        ..CertificateSpec::default()
    };
    let a = certify_monotonicity(&grid, &spec, 5).unwrap();
    let b = certify_monotonicity(&grid, &spec, 5).unwrap();
    let c = certify_monotonicity(&grid, &spec, 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seed, 5);
    assert_ne!(a.samples[3].lambda, c.samples[3].lambda);
    assert_eq!(a.samples[..3], c.samples[..3]);
}

#[test]
fn reduced_run_from_equilibrium_is_flat() {
    let grid = presets::cs2().microgrid().unwrap();
    let eq = solve_equilibrium(&grid).unwrap();
    let ctrl = eq.controller();
    let opts = ReducedOptions {
        dt: 1e-2,
        t_end: 5.0,
        sample_every: 10,
    };
    let red =
        simulate_reduced(&grid, &ctrl.lambda, &ctrl.zeta, &Scenario::steady(), &opts).unwrap();
    let last = red.lambda.last().unwrap();
    for (a, b) in last.iter().zip(&ctrl.lambda) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Quasi-steady states zero the fast vector field, and a warm start
    /// lands on the same point as a cold one.
    #[test]
    fn qss_zeroes_fast_field(l in prop::collection::vec(-0.6f64..0.3, 4)) {
        let grid = presets::cs2().microgrid().unwrap();
        let solver = QssSolver::new(&grid).unwrap();
        let cold = solve_h(&l, &grid, None).unwrap();
        let res = solver.fast_residual(&cold);
        prop_assert!(cold.residual < QSS_TOL);
        prop_assert!(res.iter().all(|r| r.abs() < 1e-8), "{res:?}");
        let warm = solver.solve(&l, Some(&cold)).unwrap();
        let gap = cold.h1.iter().zip(&warm.h1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap < 1e-8);
    }
}
