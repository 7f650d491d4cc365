use attnflow_core::dynamics::{integrate, AttentionMode, FlowOptions};
use attnflow_core::measures::wasserstein2;
use attnflow_core::pipeline::*;
use attnflow_core::sphere::{angle_between, random_in_cap};
use attnflow_core::synthesis::flow;
use attnflow_core::{EmpiricalMeasure, UnitVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(xs: &[f64]) -> UnitVector {
    UnitVector::normalize_slice(xs).unwrap()
}

fn cloud(seed: u64, center: &[f64], radius: f64, n: usize) -> EmpiricalMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = unit(center);
    EmpiricalMeasure::uniform((0..n).map(|_| random_in_cap(&mut rng, &c, radius)).collect()).unwrap()
}

fn dirac(xs: &[f64]) -> EmpiricalMeasure {
    EmpiricalMeasure::dirac(unit(xs))
}

fn scenario(inputs: Vec<EmpiricalMeasure>, targets: Vec<EmpiricalMeasure>, eps: f64, mode: MatchMode) -> ScenarioSpec {
    ScenarioSpec {
        dimension: inputs[0].dim(),
        inputs,
        targets,
        eps,
        horizon: 3.0,
        mode,
        seed: 11,
    }
}

fn two_caps(eps: f64) -> ScenarioSpec {
    scenario(
        vec![cloud(1, &[1.0, 0.3, 0.2], 0.4, 32), cloud(2, &[1.0, 0.1, 0.3], 0.4, 32)],
        vec![dirac(&[0.0, 1.0, 0.0]), dirac(&[0.0, 0.0, 1.0])],
        eps,
        MatchMode::Points,
    )
}

fn restricted_pair() -> ScenarioSpec {
    let mut s = scenario(
        vec![cloud(1, &[1.0, 0.3, 0.2], 0.4, 96), cloud(2, &[1.0, 0.1, 0.3], 0.4, 96)],
        vec![cloud(10, &[0.0, 1.0, 0.2], 0.6, 3), cloud(11, &[0.1, 0.9, 0.3], 0.6, 3)],
        5e-2,
        MatchMode::Restricted,
    );
    s.horizon = 5.0;
    s
}

fn general_pair() -> ScenarioSpec {
    scenario(
        vec![cloud(1, &[1.0, 0.3, 0.2], 0.4, 4), cloud(2, &[1.0, 0.1, 0.3], 0.4, 4)],
        vec![cloud(10, &[0.0, 1.0, 0.2], 0.5, 4), cloud(11, &[0.1, 0.9, 0.3], 0.5, 4)],
        1e-2,
        MatchMode::General,
    )
}

fn check_tiling(r: &MatchReport) {
    assert_eq!(r.schedule.horizon, r.horizon);
    for w in r.stages.windows(2) {
        assert_eq!(w[0].segments.1, w[1].segments.0);
        assert!((w[0].t_end - w[1].t_start).abs() < 1e-12);
    }
    assert_eq!(r.stages.last().unwrap().segments.1, r.schedule.segments.len());
    assert_eq!(r.switch_count, r.schedule.segments.len() - 1);
}

#[test]
fn atom_already_on_its_target_needs_no_control() {
    let s = scenario(vec![dirac(&[0.3, 0.4, 0.5])], vec![dirac(&[0.3, 0.4, 0.5])], 1e-2, MatchMode::Points);
    let r = match_point_targets(&s).unwrap();
    assert!(r.schedule.is_identity());
    assert!(r.max_error() <= 1e-9);
}

#[test]
fn two_overlapping_caps_reach_their_points() {
    let r = run_pipeline(&two_caps(1e-2)).unwrap();
    check_tiling(&r);
    assert_eq!(r.stages.len(), 4);
    for e in &r.errors {
        assert!(*e <= 1e-2, "{:?}", r.errors);
    }
}

#[test]
fn stages_compose_into_one_schedule() {
    let s = two_caps(1e-2);
    let r = run_pipeline(&s).unwrap();
    let mut staged = s.inputs.clone();
    for k in 0..r.stages.len() {
        staged = flow(&staged, &r.stage_schedule(k).unwrap()).unwrap();
    }
    let whole = flow(&s.inputs, &r.schedule).unwrap();
    for (a, b) in staged.iter().zip(&whole) {
        for (p, q) in a.points().iter().zip(b.points()) {
            assert!((p.as_vector() - q.as_vector()).norm() <= 1e-9);
        }
    }
}

#[test]
fn other_measures_never_influence_a_trajectory() {
    let s = two_caps(1e-2);
    let r = run_pipeline(&s).unwrap();
    let mut moved = s.inputs.clone();
    moved[1] = cloud(99, &[0.2, 1.0, 0.4], 0.3, 32);
    let opts = FlowOptions {
        stride: Some(50),
        ..FlowOptions::default()
    };
    let a = integrate(&s.inputs, &r.schedule, &AttentionMode::Full, &opts).unwrap();
    let b = integrate(&moved, &r.schedule, &AttentionMode::Full, &opts).unwrap();
    let (ta, tb) = (a.trajectory.unwrap(), b.trajectory.unwrap());
    assert_eq!(ta.samples.len(), tb.samples.len());
    for (x, y) in ta.samples.iter().zip(&tb.samples) {
        assert_eq!(x.states[0], y.states[0]);
    }
}

#[test]
fn doubling_the_budget_does_not_hurt() {
    let s = two_caps(1e-2);
    let r1 = run_pipeline(&s).unwrap();
    let mut s2 = s.clone();
    s2.horizon *= 2.0;
    let r2 = run_pipeline(&s2).unwrap();
    for (a, b) in r1.errors.iter().zip(&r2.errors) {
        assert!(*b <= a + 1e-9, "{a} → {b}");
    }
}

#[test]
fn cluster_norm_grows_with_log_accuracy() {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3] {
        let r = run_pipeline(&two_caps(eps)).unwrap();
        assert!(r.max_error() <= eps);
        let cluster = r.stages.iter().find(|s| s.name == "cluster").unwrap();
        xs.push((1.0 / eps as f64).ln());
        ys.push(cluster.param_norm);
    }
    assert!(ys[0] < ys[1] && ys[1] < ys[2], "{ys:?}");
}

#[test]
fn restricted_input_equal_to_target_is_left_alone() {
    let t = EmpiricalMeasure::uniform(vec![unit(&[1.0, 0.2, 0.1]), unit(&[0.2, 1.0, 0.1])]).unwrap();
    let s = scenario(vec![t.clone()], vec![t], 1e-2, MatchMode::Restricted);
    let r = match_restricted(&s).unwrap();
    assert!(r.schedule.is_identity());
    assert!(r.max_error() <= 1e-6);
}

#[test]
fn restricted_pair_is_matched() {
    let s = restricted_pair();
    let r = match_restricted(&s).unwrap();
    check_tiling(&r);
    assert_eq!(r.stages.len(), 5);
    assert!(r.max_error() <= 5e-2, "{:?}", r.errors);
    assert!(r.reversal_error.unwrap() <= 1e-6);
}

#[test]
fn restricted_mode_rejects_mixed_atom_counts() {
    let two = EmpiricalMeasure::uniform(vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])]).unwrap();
    let three = cloud(5, &[0.0, 0.0, 1.0], 0.3, 3);
    let s = scenario(
        vec![cloud(1, &[1.0, 1.0, 1.0], 0.2, 6), cloud(2, &[1.0, 0.5, 1.0], 0.2, 6)],
        vec![two, three],
        1e-2,
        MatchMode::Restricted,
    );
    assert!(s.validate().is_err());
    assert!(match_restricted(&s).is_err());
}

#[test]
fn restricted_mode_rejects_nonuniform_targets() {
    let t = EmpiricalMeasure::new(vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])], vec![0.3, 0.7]).unwrap();
    let s = scenario(vec![cloud(1, &[1.0, 1.0, 1.0], 0.2, 6)], vec![t], 1e-2, MatchMode::Restricted);
    let e = match_restricted(&s).unwrap_err().to_string();
    assert!(e.contains("non-uniform"), "{e}");
}

#[test]
fn single_atoms_reduce_to_point_targets() {
    let s = scenario(vec![dirac(&[1.0, 0.2, 0.1])], vec![dirac(&[0.1, 0.2, 1.0])], 1e-2, MatchMode::General);
    let g = match_general_empirical(&s).unwrap();
    let p = match_point_targets(&s).unwrap();
    assert_eq!(g.errors, p.errors);
    assert_eq!(g.schedule, p.schedule);
}

#[test]
fn general_pairs_matched_within_the_monge_bound() {
    let s = general_pair();
    let r = match_general_empirical(&s).unwrap();
    check_tiling(&r);
    let bounds = r.monge_bounds.clone().unwrap();
    for (e, b) in r.errors.iter().zip(&bounds) {
        assert!(*e <= 1e-2);
        assert!(*e <= b + 1e-9, "{e} > {b}");
    }
}

#[test]
fn general_mode_needs_equal_counts() {
    let s = scenario(
        vec![cloud(1, &[1.0, 0.3, 0.2], 0.4, 4)],
        vec![cloud(2, &[0.0, 1.0, 0.2], 0.4, 5)],
        1e-2,
        MatchMode::General,
    );
    let e = match_general_empirical(&s).unwrap_err().to_string();
    assert!(e.contains("no transport map"), "{e}");
}

#[test]
fn target_reversal_is_exact_when_targets_overlap() {
    // Overlapping targets force a nontrivial target disentanglement.
    let mut s = general_pair();
    s.targets = vec![cloud(10, &[0.2, 1.0, 0.2], 0.3, 4), cloud(11, &[0.25, 1.0, 0.15], 0.3, 4)];
    let r = match_general_empirical(&s).unwrap();
    let rev = r.stages.iter().find(|x| x.name == "reverse targets").unwrap();
    assert!(rev.switch_count > 0);
    assert!(r.reversal_error.unwrap() <= 1e-6);
    assert!(r.max_error() <= 1e-2, "{:?}", r.errors);
}

#[test]
fn generic_clouds_cluster_to_distinct_points() {
    let stats = probe_generic_limits(8, 4, 3, 1.0, 10, 7).unwrap();
    assert_eq!(stats.pairs, 60);
    assert_eq!(stats.coincidences, 0);
    assert_eq!(stats.frequency, Some(0.0));
    assert!(stats.min_separation.unwrap() > 1e-3);
}

#[test]
fn probe_is_reproducible() {
    let a = probe_generic_limits(6, 3, 4, 0.5, 4, 3).unwrap();
    let b = probe_generic_limits(6, 3, 4, 0.5, 4, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn hole_is_off_every_atom() {
    let s = two_caps(1e-2);
    let h = find_hole(&s.inputs, 4).unwrap();
    for m in &s.inputs {
        for p in m.points() {
            assert!(angle_between(p.as_slice(), h.as_slice()) > 0.5);
        }
    }
}

#[test]
fn errors_are_exact_transport_distances() {
    let s = two_caps(1e-2);
    let r = run_pipeline(&s).unwrap();
    let finals = flow(&s.inputs, &r.schedule).unwrap();
    for ((m, t), e) in finals.iter().zip(&s.targets).zip(&r.errors) {
        assert_eq!(wasserstein2(m, t), *e);
    }
}
