use super::*;
use crate::fixtures::victim;
use crate::signal::{simulate_rir, SAMPLE_RATE_HZ};
use proptest::prelude::*;
use rand::Rng;

fn three_token(i: usize) -> &'static crate::victim::Utterance {
    victim().corpus.iter().filter(|u| u.transcript.len() == 3).nth(i).unwrap()
}

fn shifted(t: &Transcript, by: usize) -> Transcript {
    Transcript(t.0.iter().map(|v| (v + by) % 4).collect())
}

fn small_bank() -> RirBank {
    RirBank::simulate(3, (0.1, 0.2), 5, SAMPLE_RATE_HZ).unwrap()
}

fn fd_rel(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..24 {
        let i = rng.gen_range(0..x.len());
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[i] += h;
        m[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        num += (fd - grad[i]).powi(2);
        den += grad[i].powi(2);
    }
    (num / den).sqrt()
}

#[test]
fn targets_differ_and_count() {
    let truths: Vec<Transcript> = victim().corpus.iter().map(|u| u.transcript.clone()).collect();
    let a = assign_targets(&truths, 4, 15, 1, 3).unwrap();
    assert_eq!(a, assign_targets(&truths, 4, 15, 1, 3).unwrap());
    for (truth, ts) in truths.iter().zip(&a) {
        assert_eq!(ts.len(), 15);
        for t in ts {
            assert_ne!(t, truth);
            assert!(t.len() >= 1 && t.len() + 1 >= truth.len() && t.len() <= truth.len() + 1);
            assert!(t.0.iter().all(|v| *v < 4));
        }
    }
    let fixed = assign_targets(&truths, 4, 3, 0, 3).unwrap();
    assert!(fixed.iter().zip(&truths).all(|(ts, tr)| ts.iter().all(|t| t.len() == tr.len())));
    assert!(assign_targets(&truths, 1, 3, 0, 3).is_err());
}

#[test]
fn true_target_is_already_satisfied() {
    let f = victim();
    let u = three_token(0);
    let truth = transcribe(&f.model, &u.waveform).unwrap();
    let ex = cw_attack(&f.model, &u.waveform, &truth, &AttackConfig::default()).unwrap();
    assert!(ex.success);
    assert_eq!(ex.iters_used, 0);
    assert_eq!(ex.l_db, f64::NEG_INFINITY);
    assert_eq!(ex.x_adv, u.waveform);
}

#[test]
fn infeasible_budget_fails() {
    let f = victim();
    let u = three_token(1);
    let cfg = AttackConfig {
        eps_db: -200.0,
        max_iters: 40,
        ..AttackConfig::default()
    };
    let ex = cw_attack(&f.model, &u.waveform, &shifted(&u.transcript, 1), &cfg).unwrap();
    assert!(!ex.success);
    assert!(ex.iters_used <= 40);
}

#[test]
fn target_length_must_match_segments() {
    let f = victim();
    let u = three_token(0);
    let r = cw_attack(&f.model, &u.waveform, &Transcript(vec![0]), &AttackConfig::default());
    assert!(matches!(r, Err(Error::TargetLength { .. })));
}

#[test]
fn cw_succeeds_and_reports_consistently() {
    let f = victim();
    let cfg = AttackConfig {
        max_iters: 1200,
        ..AttackConfig::default()
    };
    let mut wins = 0;
    for i in 0..4 {
        let u = three_token(i);
        let target = shifted(&u.transcript, 1 + i % 3);
        let ex = cw_attack(&f.model, &u.waveform, &target, &cfg).unwrap();
        for ((a, x), d) in ex.x_adv.samples.iter().zip(&u.waveform.samples).zip(&ex.delta.samples) {
            assert_eq!(*a, x + d);
        }
        assert!(ex.iters_used <= cfg.max_iters);
        if ex.success {
            wins += 1;
            assert_eq!(transcribe(&f.model, &ex.x_adv).unwrap(), target);
            assert!(loudness_db(&ex.delta, &u.waveform).unwrap() < cfg.eps_db);
        }
        if i == 0 {
            let again = cw_attack(&f.model, &u.waveform, &target, &cfg).unwrap();
            assert_eq!(again, ex);
        }
    }
    assert!(wins >= 3, "{wins}/4");
}

#[test]
fn degenerate_eot_equals_cw_gradient() {
    let f = victim();
    let u = three_token(2);
    let eot = EotConfig {
        bank: RirBank::from_filters(vec![RirFilter::identity(SAMPLE_RATE_HZ)]).unwrap(),
        noise_sigma: 0.0,
        alpha_k: 1.0,
        n_mc: 3,
        holdout: RirFilter::identity(SAMPLE_RATE_HZ),
    };
    let k = EotKernels::new(&eot, u.waveform.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let delta: Vec<f64> = (0..u.waveform.len()).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let target = shifted(&u.transcript, 2);
    let draws = draw_transforms(&eot, 3, &mut rng);
    let (oe, ge, _) = eot_gradient(&f.model, &u.waveform, &delta, &target, 10.0, &eot, &k, &draws).unwrap();
    let (oc, gc, _) = cw_gradient(&f.model, &u.waveform, &delta, &target, 10.0).unwrap();
    assert!((oe - oc).abs() < 1e-9);
    let err = ge.iter().zip(&gc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

#[test]
fn eot_gradient_is_the_mean_of_single_draws() {
    let f = victim();
    let u = three_token(3);
    let eot = EotConfig {
        bank: small_bank(),
        noise_sigma: 0.01,
        alpha_k: 0.5,
        n_mc: 8,
        holdout: simulate_rir(0.15, 999, SAMPLE_RATE_HZ).unwrap(),
    };
    let k = EotKernels::new(&eot, u.waveform.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let delta: Vec<f64> = (0..u.waveform.len()).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let target = shifted(&u.transcript, 1);
    let draws = draw_transforms(&eot, 8, &mut rng);
    let (_, g8, _) = eot_gradient(&f.model, &u.waveform, &delta, &target, 3.0, &eot, &k, &draws).unwrap();
    let mut mean = vec![0.0; g8.len()];
    for d in &draws {
        let (_, g1, _) = eot_gradient(&f.model, &u.waveform, &delta, &target, 3.0, &eot, &k, &[*d]).unwrap();
        for (m, g) in mean.iter_mut().zip(g1) {
            *m += g / 8.0;
        }
    }
    let err = g8.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn attack_objectives_match_finite_differences() {
    let f = victim();
    let u = three_token(4);
    let target = shifted(&u.transcript, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let delta: Vec<f64> = (0..u.waveform.len()).map(|_| rng.gen_range(-0.02..0.02)).collect();
    let (_, g, _) = cw_gradient(&f.model, &u.waveform, &delta, &target, 2.0).unwrap();
    let rel = fd_rel(|d| cw_gradient(&f.model, &u.waveform, d, &target, 2.0).unwrap().0, &delta, &g, 1);
    assert!(rel < 1e-4, "cw {rel}");

    let eot = EotConfig {
        bank: small_bank(),
        noise_sigma: 0.005,
        alpha_k: 0.7,
        n_mc: 2,
        holdout: simulate_rir(0.15, 999, SAMPLE_RATE_HZ).unwrap(),
    };
    let k = EotKernels::new(&eot, u.waveform.len()).unwrap();
    let draws = draw_transforms(&eot, 2, &mut rng);
    let (_, g, _) = eot_gradient(&f.model, &u.waveform, &delta, &target, 2.0, &eot, &k, &draws).unwrap();
    let rel = fd_rel(
        |d| eot_gradient(&f.model, &u.waveform, d, &target, 2.0, &eot, &k, &draws).unwrap().0,
        &delta,
        &g,
        2,
    );
    assert!(rel < 1e-4, "eot {rel}");
}

#[test]
fn eot_argument_errors() {
    let f = victim();
    let u = three_token(0);
    let empty = EotConfig {
        bank: RirBank {
            filters: vec![],
            power_profile: vec![1.0; 4],
        },
        noise_sigma: 0.0,
        alpha_k: 1.0,
        n_mc: 1,
        holdout: RirFilter::identity(SAMPLE_RATE_HZ),
    };
    let target = shifted(&u.transcript, 1);
    let cfg = AttackConfig::default();
    assert!(matches!(eot_attack(&f.model, &u.waveform, &target, &cfg, &empty), Err(Error::EmptyBank)));
    let no_draws = EotConfig { bank: small_bank(), n_mc: 0, ..empty };
    assert!(eot_attack(&f.model, &u.waveform, &target, &cfg, &no_draws).is_err());
    assert!(AttackConfig { c_schedule: vec![], ..AttackConfig::default() }.validate().is_err());
    assert!(AttackConfig { max_iters: 0, ..AttackConfig::default() }.validate().is_err());
}

#[test]
fn eot_attack_is_deterministic() {
    let f = victim();
    let u = three_token(5);
    let eot = EotConfig {
        bank: small_bank(),
        noise_sigma: 0.001,
        alpha_k: 1.0,
        n_mc: 1,
        holdout: simulate_rir(0.15, 999, SAMPLE_RATE_HZ).unwrap(),
    };
    let cfg = AttackConfig {
        max_iters: 30,
        ..AttackConfig::default()
    };
    let target = shifted(&u.transcript, 2);
    let a = eot_attack(&f.model, &u.waveform, &target, &cfg, &eot).unwrap();
    let b = eot_attack(&f.model, &u.waveform, &target, &cfg, &eot).unwrap();
    assert_eq!(a, b);
    if a.success {
        assert!(succeeds_under(&f.model, &a, &eot.holdout).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn targets_never_equal_truth(truth in proptest::collection::vec(0usize..3, 1..5), seed in 0u64..1000, jitter in 0usize..2) {
        let t = Transcript(truth);
        let out = assign_targets(std::slice::from_ref(&t), 3, 15, jitter, seed).unwrap();
        prop_assert_eq!(out[0].len(), 15);
        for x in &out[0] {
            prop_assert!(x != &t);
            prop_assert!(!x.is_empty());
        }
    }
}
