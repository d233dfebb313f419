use fairpref::bounds::{
    check_instance, kl_divergence, total_variation, verify_sweep, BoundInstance, InstanceFamily,
    SweepReport,
};
use fairpref::{Exec, FiniteDistribution};
use std::sync::OnceLock;

fn sweep() -> &'static SweepReport {
    static REPORT: OnceLock<SweepReport> = OnceLock::new();
    REPORT.get_or_init(|| verify_sweep(1000, 8, 7, InstanceFamily::Implicit, Exec::Parallel).unwrap())
}

fn assert_no_violations(name: &str) {
    let t = sweep().tally(name).unwrap_or_else(|| panic!("missing link {name}"));
    assert_eq!(t.checked, 1000, "{name}");
    assert!(t.preconditions_met > 0, "{name} never asserted");
    assert_eq!(t.violations, 0, "{name}: {t:?}");
}

#[test]
fn composed_bounds_hold_on_reference_sweep() {
    let agg = &sweep().aggregate;
    assert_eq!(agg.instances, 1000);
    assert_eq!(agg.violations, 0);
    assert_eq!(agg.lower_violations, 0);
    assert_eq!(agg.upper_violations, 0);
    assert!(agg.lower_preconditions_met > 900);
    assert!(agg.upper_preconditions_met > 300);
}

#[test]
fn sound_links_never_fail() {
    for name in [
        "margin_floor_pointwise",
        "margin_floor",
        "ipm",
        "w1_zero_one_identity",
        "transport_entropy",
        "pinsker",
        "ratio",
        "excess_identity",
        "composed_lower",
        "composed_upper",
    ] {
        assert_no_violations(name);
    }
}

#[test]
fn calibration_step_is_violated() {
    let t = sweep().tally("calibration").unwrap();
    assert!(t.preconditions_met > 0);
    assert!(t.violations > t.preconditions_met / 2, "{t:?}");
}

#[test]
fn assumption_links_fail_on_some_instances() {
    // assumptions, not consequences: random instances break them
    for name in ["anchoring", "anchor_plus", "anchor_minus", "mixture_tv"] {
        let t = sweep().tally(name).unwrap();
        assert!(t.violations > 0 && t.holds > 0, "{name}: {t:?}");
    }
    let t = sweep().tally("margin_control").unwrap();
    assert_eq!(t.holds, 0, "{t:?}");
}

#[test]
fn reversed_pinsker_fails_everywhere() {
    let t = sweep().tally("pinsker_as_used").unwrap();
    assert_eq!(t.holds, 0, "{t:?}");
}

#[test]
fn sweep_is_identical_across_exec_modes() {
    let a = verify_sweep(200, 6, 3, InstanceFamily::Implicit, Exec::Sequential).unwrap();
    let b = verify_sweep(200, 6, 3, InstanceFamily::Implicit, Exec::Parallel).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn independent_reward_family_composed_bounds_hold() {
    let r = verify_sweep(1000, 8, 7, InstanceFamily::IndependentReward, Exec::Parallel).unwrap();
    assert_eq!(r.aggregate.violations, 0);
}

#[test]
fn identical_policies_give_zero_divergence_and_trivial_bounds() {
    let p = FiniteDistribution::softmax(&[0.3, -1.0, 0.5, 2.0]).unwrap();
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
    let inst = BoundInstance::implicit(p.clone(), p, 0.5, 0.5).unwrap();
    let report = check_instance(0, &inst).unwrap();
    assert!(report.lower.composed.holds);
    assert!(report.upper.composed.holds);
}

#[test]
fn hand_instance_matches_direct_formulas() {
    let prev = FiniteDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
    let cur = FiniteDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
    let inst = BoundInstance::implicit(prev.clone(), cur.clone(), 1.0, 1.0).unwrap();
    let report = check_instance(0, &inst).unwrap();
    let kl: f64 = [(0.5f64, 0.2f64), (0.3, 0.3), (0.2, 0.5)]
        .iter()
        .map(|(a, b)| a * (a / b).ln())
        .sum();
    assert!((report.quantities.kl_forward - kl).abs() < 1e-12);
    assert!((report.quantities.tv_policies - 0.3).abs() < 1e-12);
    let ratio = report.lower.link("ratio").unwrap();
    assert!(ratio.holds);
}
