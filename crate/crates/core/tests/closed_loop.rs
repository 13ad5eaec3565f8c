use nalgebra::DVector;
use periodic_lmpc::scenarios::builtin;
use periodic_lmpc::sim::{
    make_seed, run_closed_loop, verify_properties, PropertyTolerances, SimSettings,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn s4_multipliers_reproduce_the_mixed_successor() {
    let cfg = builtin::<f64>("s4_nonlinear").unwrap();
    let seed = make_seed(&cfg).unwrap();
    let log = run_closed_loop(&cfg.spec, &seed, 4, &SimSettings::default()).unwrap();
    let map = cfg.spec.dynamics.nonlinear_map().unwrap().clone();
    let p = cfg.spec.period;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for tau in 0..p {
        let recs: Vec<_> = (0..log.cycles())
            .map(|c| &log.ticks[c * p + tau])
            .filter(|r| r.x[0] > 0.0)
            .collect();
        if recs.is_empty() {
            continue;
        }
        for _ in 0..5 {
            let w: Vec<f64> = recs.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = w.iter().sum();
            let lambda: Vec<f64> = w.iter().map(|v| v / total).collect();
            let states: Vec<DVector<f64>> = recs.iter().map(|r| r.x.clone()).collect();
            let gamma = map.input_multipliers(&states, &lambda).unwrap();
            assert!(gamma.iter().all(|g| *g >= 0.0));
            assert!((gamma.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let mut xm = DVector::zeros(2);
            let mut um = DVector::zeros(1);
            let mut fm = DVector::zeros(2);
            for (j, r) in recs.iter().enumerate() {
                xm += &r.x * lambda[j];
                um += &r.u * gamma[j];
                fm += map.eval(tau, p, &r.x, &r.u) * lambda[j];
            }
            let lhs = map.eval(tau, p, &xm, &um);
            assert!((lhs - &fm).amax() <= 1e-9, "tau {tau}");
            checked += 1;
        }
    }
    assert_eq!(checked, 5 * p);
}

#[test]
fn s1_settles_onto_its_steady_state_over_a_long_run() {
    let cfg = builtin::<f64>("s1_tv_dynamics").unwrap();
    let seed = make_seed(&cfg).unwrap();
    let log = run_closed_loop(&cfg.spec, &seed, 20, &SimSettings::default()).unwrap();
    let rep = verify_properties(&log, &cfg.spec, &PropertyTolerances::default()).unwrap();
    assert!(rep.passed(), "{:?}", rep.violations());
    let c = rep
        .convergence_cycle
        .expect("no convergence within 20 cycles");
    assert!(c < 20);
    assert!(rep.steady_state_checked);
    assert!(rep.period_cost_gap.unwrap() <= 1e-3);
    assert!(rep.open_loop_deviation.unwrap() <= 1e-4);
}
