mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pufwear::chain::{
    build_ampuf_chain, build_reap_nvm_chain, load_chain_str, BuiltinPuf, ChainParams, AMPUF_CALIBRATED_MEAN_PULSES,
};
use pufwear::dist::CountDistribution;
use pufwear::lifetime::{
    cell_dead_prob, default_grid, half_life, puf_dead_prob, total_ops_after_n, LifetimeCurve, LifetimeModel,
    LifetimeParams, Mode,
};
use pufwear::occupancy::{evolve, per_challenge_ops, sample_trajectories, visit_count_distribution, EvolveOptions};

fn opts() -> EvolveOptions {
    EvolveOptions::default()
}

#[test]
fn dead_probability_for_256_cells_matches_exact_rationals() {
    let params = LifetimeParams::default();
    for (num, den) in [(1u64, 10u64), (3, 20), (1, 5)] {
        let exact = common::to_f64(&common::binomial_tail_exact(256, 38, num, den));
        let got = puf_dead_prob(num as f64 / den as f64, &params);
        assert!((got - exact).abs() < 1e-9, "p={num}/{den}: {got} vs {exact}");
    }
}

#[test]
fn dead_probability_at_fifteen_percent() {
    let got = puf_dead_prob(0.15, &LifetimeParams::default());
    assert!((got - 0.48485).abs() < 5e-5, "{got}");
    assert_eq!(puf_dead_prob(0.0, &LifetimeParams::default()), 0.0);
    assert_eq!(puf_dead_prob(1.0, &LifetimeParams::default()), 1.0);
}

#[test]
fn fair_coin_wear_over_2000_challenges() {
    let total = total_ops_after_n(&CountDistribution::bernoulli(0.5), 2000, 1000);
    let got = cell_dead_prob(&total, 1000);
    let exact = common::to_f64(&common::binomial_tail_exact(2000, 1000, 1, 2));
    assert!((got - exact).abs() < 1e-12, "{got} vs {exact}");
    assert!((got - 0.4911).abs() < 5e-5);
}

#[test]
fn endurance_limit_is_strict() {
    assert_eq!(cell_dead_prob(&CountDistribution::point_mass(1000), 1000), 0.0);
    assert_eq!(cell_dead_prob(&CountDistribution::point_mass(1001), 1000), 1.0);
    let capped = total_ops_after_n(&CountDistribution::point_mass(1), 1001, 1000);
    assert_eq!(cell_dead_prob(&capped, 1000), 1.0);
}

#[test]
fn n_fold_total_matches_binomial_skip_monte_carlo() {
    let chain = BuiltinPuf::ReapNvm.build(&ChainParams::default()).unwrap();
    let ops = per_challenge_ops(&chain, &opts()).unwrap();
    let n = 10_000;
    let analytic = total_ops_after_n(&ops.set_dist, n, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let totals = common::binomial_skip_totals(&mut rng, &ops.set_dist, n, 1_000_000);
    let mc = CountDistribution::new(common::empirical(&totals), 0.0, 0.0).unwrap();
    let tv = analytic.tv_distance(&mc);
    assert!(tv < 0.02, "TV {tv}");
}

#[test]
fn geometric_sojourn_closed_form_and_monte_carlo() {
    let c = load_chain_str(
        r#"{"states":[{"id":0,"label":"A","op_tag":"set"},{"id":1,"label":"B","op_tag":"none"}],
            "transition":[[0.5,0.5],[0,1]],"initial":0,"terminal":[1]}"#,
    )
    .unwrap();
    let occ = evolve(&c, &opts()).unwrap();
    let d = visit_count_distribution(&c, &occ, &[0]).unwrap();
    assert_eq!(d.prob(0), 0.0);
    for k in 1..occ.converged_at {
        assert!((d.prob(k) - 0.5f64.powi(k as i32)).abs() < 1e-15, "k={k}");
    }
    let mc = sample_trajectories(&c, 1_000_000, 3).set_dist;
    assert!(d.tv_distance(&mc) < 0.005);
}

#[test]
fn deterministic_double_visit() {
    let c = load_chain_str(
        r#"{"states":[{"id":0,"label":"X","op_tag":"set"},{"id":1,"label":"Y","op_tag":"none"},
                      {"id":2,"label":"X again","op_tag":"set"},{"id":3,"label":"T","op_tag":"none"}],
            "transition":[[0,1,0,0],[0,0,1,0],[0,0,0,1],[0,0,0,1]],"initial":0,"terminal":[3]}"#,
    )
    .unwrap();
    let ops = per_challenge_ops(&c, &opts()).unwrap();
    assert_eq!(ops.set_dist.pmf, vec![0.0, 0.0, 1.0]);
    assert_eq!(ops.reset_dist, CountDistribution::point_mass(0));
    let mc = sample_trajectories(&c, 1000, 0);
    assert_eq!(mc.set_dist.pmf, ops.set_dist.pmf);
}

#[test]
fn reap_expected_set_ops_match_monte_carlo() {
    let chain = build_reap_nvm_chain(&ChainParams::default()).unwrap();
    let ops = per_challenge_ops(&chain, &opts()).unwrap();
    // Evolution stops with up to 1e-5 of mass still in the set loop.
    assert!((ops.set_dist.mean() - 3.5 / 128.0).abs() < 5e-5);
    assert!((ops.set_dist.prob(0) - 127.0 / 128.0).abs() < 1e-12);
    let mc = sample_trajectories(&chain, 1_000_000, 11);
    // Per-challenge set count has variance below 0.1, so 1e6 runs pin the
    // mean to within a few 1e-4.
    assert!((mc.set_dist.mean() - 3.5 / 128.0).abs() < 1.5e-3);
    assert!(ops.set_dist.tv_distance(&mc.set_dist) < 0.01);
    assert!(ops.reset_dist.tv_distance(&mc.reset_dist) < 0.01);
}

#[test]
fn ampuf_single_pulse_costs_one_set() {
    let c = build_ampuf_chain(&ChainParams {
        mean_set_pulses: 1.0,
        ..ChainParams::default()
    })
    .unwrap();
    let ops = per_challenge_ops(&c, &opts()).unwrap();
    assert_eq!(ops.set_dist, CountDistribution::point_mass(1));
    assert_eq!(ops.reset_dist, CountDistribution::point_mass(1));
}

#[test]
fn geometric_ampuf_calibration_reaches_341() {
    let c = build_ampuf_chain(&ChainParams {
        mean_set_pulses: AMPUF_CALIBRATED_MEAN_PULSES,
        ..ChainParams::default()
    })
    .unwrap();
    let model = LifetimeModel::new(&c, LifetimeParams::default(), &opts()).unwrap();
    let hl = model.half_life(10_000_000).unwrap();
    assert!((hl as f64 / 341.0 - 1.0).abs() < 0.01, "{hl}");
}

fn first_reaching(curve: &LifetimeCurve, q: f64) -> u64 {
    let i = curve.p_dead.iter().position(|&p| p >= q).expect("reaches level");
    curve.challenge_grid[i]
}

#[test]
fn reap_outlives_ampuf_at_every_level() {
    let grid = default_grid();
    let curve = |puf: BuiltinPuf| {
        let c = puf.build(&puf.calibrated_params()).unwrap();
        LifetimeModel::new(&c, LifetimeParams::default(), &opts())
            .unwrap()
            .curve(&grid)
            .unwrap()
    };
    let (reap, ampuf) = (curve(BuiltinPuf::ReapNvm), curve(BuiltinPuf::AMpuf));
    for q in [0.01, 0.1, 0.5, 0.9, 0.99] {
        assert!(first_reaching(&reap, q) > first_reaching(&ampuf, q), "level {q}");
    }
    assert!(*reap.p_dead.last().unwrap() > 1.0 - 1e-12);
}

#[test]
fn curve_half_life_interpolates() {
    let curve = LifetimeCurve {
        challenge_grid: vec![1, 2, 3],
        p_dead: vec![0.0, 0.5, 1.0],
        params: LifetimeParams::default(),
    };
    assert_eq!(half_life(&curve).unwrap(), 2);
}

#[test]
fn model_and_curve_half_lives_agree() {
    let c = BuiltinPuf::ReapNvm.build(&ChainParams::default()).unwrap();
    for mode in [Mode::SetOnly, Mode::ResetOnly, Mode::Combined] {
        let model = LifetimeModel::new(&c, LifetimeParams::with_mode(mode), &opts()).unwrap();
        let exact = model.half_life(10_000_000).unwrap();
        let refined = model.refined_curve(&default_grid()).unwrap();
        assert_eq!(half_life(&refined).unwrap(), exact, "{mode:?}");
        assert!(model.p_dead(exact) >= 0.5 && model.p_dead(exact - 1) < 0.5);
    }
}
