use attnflow_core::dynamics::{
    integrate, vector_field, AttentionMode, Direction, FlowMap, FlowOptions, ParamSchedule,
    StepRule, TransformerParams,
};
use attnflow_core::{EmpiricalMeasure, UnitVector};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.gen_range(-scale..scale))
}

fn random_params(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> TransformerParams {
    TransformerParams {
        v: random_matrix(rng, d, scale),
        b_att: random_matrix(rng, d, scale),
        w: random_matrix(rng, d, scale),
        u: random_matrix(rng, d, scale),
        b: DVector::from_fn(d, |_, _| rng.gen_range(-scale..scale)),
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, d: usize, n: usize) -> EmpiricalMeasure {
    let pts = (0..n).map(|_| UnitVector::random(rng, d)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let s: f64 = w.iter().sum();
    EmpiricalMeasure::new(pts, w.into_iter().map(|x| x / s).collect()).unwrap()
}

fn random_schedule(rng: &mut ChaCha8Rng, d: usize, segments: usize, scale: f64) -> ParamSchedule {
    let pieces = (0..segments)
        .map(|_| (rng.gen_range(0.2..0.6), random_params(rng, d, scale)))
        .collect();
    ParamSchedule::from_durations(pieces).unwrap()
}

fn max_point_error(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    a.points()
        .iter()
        .zip(b.points())
        .map(|(p, q)| (p.as_vector() - q.as_vector()).norm())
        .fold(0.0, f64::max)
}

#[test]
fn single_particle_matches_tanh_law() {
    let omega = UnitVector::normalize_slice(&[0.2, -0.3, 0.9]).unwrap();
    let x0 = UnitVector::normalize_slice(&[0.9, 0.4, -0.1]).unwrap();
    let c0 = x0.dot(&omega);
    let params = TransformerParams::constant_drift(omega.as_vector(), 1.0);
    let schedule = ParamSchedule::from_durations(vec![(5.0, params)]).unwrap();
    let opts = FlowOptions {
        step: StepRule::fixed(1e-3),
        stride: Some(1),
        ..FlowOptions::default()
    };
    let out = integrate(&[EmpiricalMeasure::dirac(x0)], &schedule, &AttentionMode::Full, &opts).unwrap();
    let tr = out.trajectory.unwrap();
    assert_eq!(tr.samples.len(), 5001);
    let mut worst: f64 = 0.0;
    for s in &tr.samples {
        let c: f64 = s.states[0].iter().zip(omega.as_slice()).map(|(a, b)| a * b).sum();
        let exact = (s.t + c0.atanh()).tanh();
        worst = worst.max((c - exact).abs());
    }
    assert!(worst < 1e-6, "max error {worst}");
}

#[test]
fn zero_schedule_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mu = random_cloud(&mut rng, 4, 10);
    let s = ParamSchedule::identity(4, 3.0);
    let out = integrate(&[mu.clone()], &s, &AttentionMode::Full, &FlowOptions::default()).unwrap();
    assert_eq!(out.measures[0], mu);
}

#[test]
fn forward_then_backward_restores_cloud() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 3;
    let mu = random_cloud(&mut rng, d, 16);
    let s = random_schedule(&mut rng, d, 3, 1.0);
    for mode in [AttentionMode::Full] {
        let fwd = integrate(&[mu.clone()], &s, &mode, &FlowOptions::default()).unwrap();
        let opts = FlowOptions {
            direction: Direction::Backward,
            ..FlowOptions::default()
        };
        let back = integrate(&fwd.measures, &s, &mode, &opts).unwrap();
        let err = max_point_error(&back.measures[0], &mu);
        assert!(err <= 1e-6, "reversal error {err}");
    }
}

#[test]
fn reversed_schedule_undoes_flow_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 3;
    let mut s = random_schedule(&mut rng, d, 3, 1.5);
    for seg in &mut s.segments {
        seg.params.v = DMatrix::zeros(d, d);
        seg.params.b_att = DMatrix::zeros(d, d);
    }
    let round = s.concat(&s.reversed());
    let map = FlowMap::new(round, StepRule::default()).unwrap();
    let pts: Vec<UnitVector> = (0..1000).map(|_| UnitVector::random(&mut rng, d)).collect();
    let out = map.apply_all(&pts).unwrap();
    let err = pts
        .iter()
        .zip(&out)
        .map(|(p, q)| (p.as_vector() - q.as_vector()).norm())
        .fold(0.0, f64::max);
    assert!(err <= 1e-6, "round trip error {err}");
}

#[test]
fn norm_drift_stays_small_over_long_horizon() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let mu = random_cloud(&mut rng, d, 12);
    let pieces = (0..4).map(|_| (5.0, random_params(&mut rng, d, 1.0))).collect();
    let s = ParamSchedule::from_durations(pieces).unwrap();
    let opts = FlowOptions::with_step(StepRule::fixed(1e-3));
    let out = integrate(&[mu], &s, &AttentionMode::Full, &opts).unwrap();
    assert_eq!(out.diagnostics.steps, 20_000);
    assert!(out.diagnostics.max_norm_drift <= 1e-8, "{}", out.diagnostics.max_norm_drift);
    assert!(out.diagnostics.max_tangency <= 1e-12);
}

#[test]
fn mean_mode_tracks_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 3;
    let mu = random_cloud(&mut rng, d, 6);
    let mut p = TransformerParams::zeros(d);
    p.v = random_matrix(&mut rng, d, 1.0);
    let m = attnflow_core::measures::mean(&mu);
    for x in mu.points() {
        let f = vector_field(&mu, &p, &AttentionMode::Mean, x).unwrap();
        let s = &p.v * &m;
        let expected = &s - x.as_vector() * x.as_vector().dot(&s);
        assert!((f - expected).norm() < 1e-14);
    }
}

fn rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, d, 1.0);
    let qr = a.qr();
    qr.q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_atoms_permutes_trajectory(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let n = 8;
        let mu = random_cloud(&mut rng, d, n);
        let s = random_schedule(&mut rng, d, 2, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pts: Vec<UnitVector> = perm.iter().map(|&i| mu.points()[i].clone()).collect();
        let ws: Vec<f64> = perm.iter().map(|&i| mu.weights()[i]).collect();
        let nu = EmpiricalMeasure::new(pts, ws).unwrap();
        let a = integrate(&[mu], &s, &AttentionMode::Full, &FlowOptions::default()).unwrap();
        let b = integrate(&[nu], &s, &AttentionMode::Full, &FlowOptions::default()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b.measures[0].points()[k].as_slice(), a.measures[0].points()[i].as_slice());
        }
    }

    #[test]
    fn rotating_data_and_params_rotates_trajectory(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let mu = random_cloud(&mut rng, d, 8);
        let s = random_schedule(&mut rng, d, 2, 1.0);
        let r = rotation(&mut rng, d);
        let rt = r.transpose();
        let mut rs = s.clone();
        for seg in &mut rs.segments {
            let p = &seg.params;
            seg.params = TransformerParams {
                v: &r * &p.v * &rt,
                b_att: &r * &p.b_att * &rt,
                w: &r * &p.w,
                u: &p.u * &rt,
                b: p.b.clone(),
            };
        }
        let rmu = mu.with_points(mu.points().iter().map(|x| UnitVector::normalize(&r * x.as_vector()).unwrap()).collect()).unwrap();
        let a = integrate(&[mu], &s, &AttentionMode::Full, &FlowOptions::default()).unwrap();
        let b = integrate(&[rmu], &rs, &AttentionMode::Full, &FlowOptions::default()).unwrap();
        for (x, y) in a.measures[0].points().iter().zip(b.measures[0].points()) {
            prop_assert!((&r * x.as_vector() - y.as_vector()).norm() <= 1e-6);
        }
    }

    #[test]
    fn measures_do_not_interact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let mu = random_cloud(&mut rng, d, 6);
        let nu = random_cloud(&mut rng, d, 5);
        let other = random_cloud(&mut rng, d, 9);
        let s = random_schedule(&mut rng, d, 2, 1.0);
        let a = integrate(&[mu.clone(), nu], &s, &AttentionMode::Full, &FlowOptions::default()).unwrap();
        let b = integrate(&[mu, other], &s, &AttentionMode::Full, &FlowOptions::default()).unwrap();
        prop_assert_eq!(&a.measures[0], &b.measures[0]);
    }

    #[test]
    fn field_is_tangent_for_every_mode(seed in any::<u64>(), d in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = random_cloud(&mut rng, d, 7);
        let p = random_params(&mut rng, d, 4.0);
        let x = UnitVector::random(&mut rng, d);
        let f = vector_field(&mu, &p, &AttentionMode::Full, &x).unwrap();
        prop_assert!(f.dot(x.as_vector()).abs() <= 1e-12);
        let mut q = p.clone();
        q.b_att = DMatrix::zeros(d, d);
        let f = vector_field(&mu, &q, &AttentionMode::Mean, &x).unwrap();
        prop_assert!(f.dot(x.as_vector()).abs() <= 1e-12);
    }
}
