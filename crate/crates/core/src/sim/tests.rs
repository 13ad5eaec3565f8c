use nalgebra::{dmatrix, dvector};

use super::*;
use crate::model::{
    AffineModel, ConstraintSchedule, Dynamics, Polyhedron, QuadraticCost, StageCostSchedule,
};
use crate::scenarios::{builtin, s2_band};

/// x+ = a x + u with h = x^2 + u^2 and optional `x >= x_min`.
fn scalar_spec(a: f64, x_min: Option<f64>, period: usize, horizon: usize) -> ProblemSpec<f64> {
    let model = AffineModel::new(dmatrix![a], dmatrix![1.0], dvector![0.0]).unwrap();
    ProblemSpec::new(
        period,
        horizon,
        1,
        1,
        Dynamics::Linear {
            models: vec![model; period],
            builtin: None,
        },
        ConstraintSchedule::constant(
            Polyhedron::from_box(&[x_min], &[None]),
            Polyhedron::from_box(&[Some(-1.0)], &[Some(1.0)]),
            period,
        ),
        StageCostSchedule::constant(
            QuadraticCost::new(dmatrix![1.0], dmatrix![1.0], dvector![0.0]).unwrap(),
            period,
            true,
        ),
    )
    .unwrap()
}

fn run(name: &str, cycles: usize) -> (ProblemSpec<f64>, SimLog<f64>) {
    let cfg = builtin::<f64>(name).unwrap();
    let seed = make_seed(&cfg).unwrap();
    let log = run_closed_loop(&cfg.spec, &seed, cycles, &SimSettings::default()).unwrap();
    (cfg.spec, log)
}

#[test]
fn one_cycle_replays_the_seed() {
    let cfg = builtin::<f64>("s4_nonlinear").unwrap();
    let seed = make_seed(&cfg).unwrap();
    let log = run_closed_loop(&cfg.spec, &seed, 1, &SimSettings::default()).unwrap();
    assert_eq!(log.ticks.len(), 100);
    for (t, r) in log.ticks.iter().enumerate() {
        assert_eq!(r.status, "seed");
        assert_eq!(r.x, seed.states[t]);
        assert_eq!(r.u, seed.inputs[t]);
        assert!(r.lmpc_cost.is_none());
    }
    assert_eq!(log.final_state, seed.states[100]);
}

#[test]
fn optimal_seed_is_reproduced() {
    let spec = scalar_spec(0.9, None, 5, 2);
    let seed = SeedTrajectory::rollout(&spec, dvector![0.0], vec![dvector![0.0]; 5]).unwrap();
    let log = run_closed_loop(&spec, &seed, 4, &SimSettings::default()).unwrap();
    for r in &log.ticks {
        assert!(r.x[0].abs() < 1e-8 && r.u[0].abs() < 1e-8);
    }
    assert_eq!(detect_periodic_convergence(&log, 1e-4), Some(1));
    let rep = verify_properties(&log, &spec, &PropertyTolerances::default()).unwrap();
    assert!(rep.passed(), "{:?}", rep.violations());
}

#[test]
fn injected_violation_is_located() {
    let (spec, mut log) = run("s1_tv_dynamics", 2);
    let rep = verify_properties(&log, &spec, &PropertyTolerances::default()).unwrap();
    assert!(rep.passed(), "{:?}", rep.violations());
    log.ticks[150].x[0] = 0.5;
    let rep = verify_properties(&log, &spec, &PropertyTolerances::default()).unwrap();
    assert_eq!(rep.worst_violation_tick, Some(150));
    assert!((rep.max_violation - 0.2).abs() < 1e-12);
    assert!(rep.violations().iter().any(|v| v.contains("t=150")));
    assert!(rep.log_consistency > 1e-3);
}

#[test]
fn cost_increase_is_flagged() {
    let (spec, mut log) = run("s3_tv_cost", 2);
    let j = log.ticks[120].lmpc_cost.unwrap();
    log.ticks[121].lmpc_cost = Some(j + 1e-3);
    let rep = verify_properties(&log, &spec, &PropertyTolerances::default()).unwrap();
    assert_eq!(rep.worst_increase_tick, Some(121));
    assert!(!rep.passed());
}

#[test]
fn warmup_settles_on_a_steady_state() {
    // An integrator that must stay above 0.3: the cheapest periodic motion
    // is to step up once and rest.
    let spec = scalar_spec(1.0, Some(0.3), 10, 3);
    let seed = warmup_mpc(&spec, &WarmupSettings::default()).unwrap();
    for x in &seed.states {
        assert!((x[0] - 0.3).abs() < 1e-8);
    }
    for u in &seed.inputs {
        assert!(u[0].abs() < 1e-8);
    }
}

#[test]
fn warmup_seed_for_s2_respects_the_bands() {
    let cfg = builtin::<f64>("s2_tv_constraints").unwrap();
    let seed = make_seed(&cfg).unwrap();
    validate_seed(&cfg.spec, &seed, 1e-8).unwrap();
    let mut upper = false;
    let mut lower = false;
    for (tau, x) in seed.states[..100].iter().enumerate() {
        let (lo, hi) = s2_band(tau, 100);
        assert!(x[0] >= lo - 1e-8 && x[0] <= hi + 1e-8, "tau={tau}");
        upper |= x[0] >= 0.2 - 1e-8;
        lower |= x[0] <= -0.2 + 1e-8;
    }
    assert!(upper && lower);
}

#[test]
fn analytic_and_resting_seeds() {
    let cfg = builtin::<f64>("s1_tv_dynamics").unwrap();
    let seed = make_seed(&cfg).unwrap();
    assert!((seed.period_cost(&cfg.spec).unwrap() - 4.0).abs() < 1e-12);

    let cfg = builtin::<f64>("s4_nonlinear").unwrap();
    let seed = make_seed(&cfg).unwrap();
    assert_eq!(seed.inputs[0][0], 0.0);
    for x in &seed.states {
        assert!((x - dvector![1.0, 0.0]).amax() < 1e-12);
    }
    assert!((seed.period_cost(&cfg.spec).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn seed_validation_reports_the_tick() {
    let cfg = builtin::<f64>("s1_tv_dynamics").unwrap();
    let mut seed = make_seed(&cfg).unwrap();
    seed.inputs[37][0] = 0.5;
    match validate_seed(&cfg.spec, &seed, 1e-8) {
        Err(Error::SeedValidation { tick, .. }) => assert_eq!(tick, 37),
        other => panic!("{other:?}"),
    }
    let mut seed = make_seed(&cfg).unwrap();
    seed.states[60][0] = 0.31;
    match validate_seed(&cfg.spec, &seed, 1e-8) {
        Err(Error::SeedValidation { tick, .. }) => assert_eq!(tick, 59),
        other => panic!("{other:?}"),
    }
}

#[test]
fn seed_csv_round_trip() {
    let cfg = builtin::<f64>("s4_nonlinear").unwrap();
    let seed = make_seed(&cfg).unwrap();
    let mut buf = Vec::new();
    seed.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,x0,x1,u0\n"));
    let back = SeedTrajectory::read_csv(&cfg.spec, &text).unwrap();
    assert_eq!(back, seed);

    let bad = text.replacen("\n3,", "\n3,oops,", 1);
    match SeedTrajectory::read_csv(&cfg.spec, &bad) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_log_is_deterministic_without_timing() {
    let (_, a) = run("s3_tv_cost", 2);
    let (_, b) = run("s3_tv_cost", 2);
    let mut ba = Vec::new();
    let mut bb = Vec::new();
    a.write_csv(&mut ba, false).unwrap();
    b.write_csv(&mut bb, false).unwrap();
    assert_eq!(ba, bb);
    let text = String::from_utf8(ba).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,cycle,tau,x0,x1,u0,stage_cost,lmpc_cost,status,sqp_iters,solve_ms"
    );
    let first = lines.next().unwrap();
    assert!(first.starts_with("0,0,0,") && first.ends_with(",,seed,,"));
    let lmpc = lines.nth(99).unwrap();
    assert!(lmpc.starts_with("100,1,0,"));
    assert!(lmpc.contains(",solved,") || lmpc.contains(",candidate,"));
    assert!(lmpc.ends_with(','));
}

#[test]
fn period_costs_never_increase() {
    let (_, log) = run("s1_tv_dynamics", 4);
    let costs = log.period_costs();
    assert_eq!(costs.len(), 4);
    assert!((costs[0] - 4.0).abs() < 1e-12);
    for w in costs.windows(2) {
        assert!(w[1] <= w[0] + 1e-9);
    }
}

#[test]
fn zero_cycles_rejected() {
    let cfg = builtin::<f64>("s1_tv_dynamics").unwrap();
    let seed = make_seed(&cfg).unwrap();
    assert!(run_closed_loop(&cfg.spec, &seed, 0, &SimSettings::default()).is_err());
}
