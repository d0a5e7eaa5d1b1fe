//! Simulation harness behavior: determinism, counting rules, flat-profile
//! degenerate runs, and report emission.

mod common;

use common::data_path;
use voltvar::sim::report::{emit_report, METRICS_HEADER};
use voltvar::sim::{run_case, CaseId, Scenario};

fn scenario(case: CaseId) -> Scenario {
    let mut sc = Scenario::load(data_path("scenarios/high_cloudy.json")).unwrap();
    sc.case = case;
    sc
}

/// Short scenario on synthesized profiles for cheap runs.
fn short_scenario(case: CaseId) -> Scenario {
    let mut sc = scenario(case);
    sc.profiles = "synth:light_sunny".into();
    sc
}

#[test]
fn flat_zero_profiles_give_zero_everything() {
    let mut sc = scenario(CaseId::Supervisory);
    // constant zero multipliers via a temp profile file
    let dir = std::env::temp_dir().join("voltvar_flat_profile_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("flat.csv");
    let mut text = String::from("time_s,load_mult,pv_mult\n");
    for i in 0..240 {
        text.push_str(&format!("{},0.0,0.0\n", i * 15));
    }
    std::fs::write(&path, text).unwrap();
    sc.profiles = path.to_string_lossy().into_owned();

    let r = run_case(&sc).unwrap();
    assert_eq!(r.n_uv + r.n_ov, 0);
    assert_eq!(r.n_total(), 0);
    // line charging keeps an energized feeder fractionally above zero loss
    assert!(r.loss_kwh.abs() < 1.0, "loss {}", r.loss_kwh);
    // charging current lifts the open feeder a fraction above the source
    assert!((r.v_max - 1.0).abs() < 0.01, "v_max {}", r.v_max);
    assert!((r.v_min - 1.0).abs() < 0.01, "v_min {}", r.v_min);
}

#[test]
fn identical_seeds_give_byte_identical_metrics() {
    let sc = short_scenario(CaseId::Supervisory);
    let out_a = std::env::temp_dir().join("voltvar_det_a");
    let out_b = std::env::temp_dir().join("voltvar_det_b");
    for out in [&out_a, &out_b] {
        let _ = std::fs::remove_dir_all(out);
        let r = run_case(&sc).unwrap();
        emit_report(&r, out).unwrap();
    }
    let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(a, b, "same seed must reproduce metrics byte for byte");

    // a different seed on a synthesized profile changes the numbers
    let mut sc2 = short_scenario(CaseId::Supervisory);
    sc2.profiles = "synth:high_cloudy".into();
    sc2.seed = 99;
    let r2 = run_case(&sc2).unwrap();
    let mut sc3 = sc2.clone();
    sc3.seed = 100;
    let r3 = run_case(&sc3).unwrap();
    assert_ne!(r2.loss_kwh.to_bits(), r3.loss_kwh.to_bits());
}

#[test]
fn metrics_header_and_appending() {
    let sc = short_scenario(CaseId::LocalLegacyOnly);
    let out = std::env::temp_dir().join("voltvar_append_test");
    let _ = std::fs::remove_dir_all(&out);
    let r = run_case(&sc).unwrap();
    emit_report(&r, &out).unwrap();
    emit_report(&r, &out).unwrap();
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0], "case,N_OV,N_UV,loss_kWh,N_LTC,N_VR,N_total,V_max,V_min",
        "metrics header is a documented contract"
    );
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3, "two runs append two rows");
    assert_eq!(lines[1], lines[2]);
}

#[test]
fn violation_counting_is_per_node_per_sample() {
    // case 1 on the bundled high-load day counts many node-samples
    let r = run_case(&scenario(CaseId::LocalLegacyOnly)).unwrap();
    assert!(r.n_uv > 100, "expected sustained undervoltage, got {}", r.n_uv);
    assert!(r.n_uv > 50 * r.n_ov.max(1), "high-load day is undervoltage-dominated");
    // energy bookkeeping: loss equals source + generation - served load
    let residual =
        (r.energy_source_kwh + r.energy_gen_kwh - r.energy_load_kwh - r.loss_kwh).abs();
    assert!(
        residual < 0.5,
        "energy books must close, residual {residual} kWh"
    );
}

#[test]
fn dispatch_cadence_and_message_accounting() {
    let r = run_case(&scenario(CaseId::Supervisory)).unwrap();
    // 24 h at a 5-minute period: 288 interval records per control
    let intervals: std::collections::BTreeSet<_> =
        r.dispatches.iter().map(|d| d.t_s.to_bits()).collect();
    assert_eq!(intervals.len(), 288);
    assert!(r.messages > 0);
    assert_eq!(r.bytes, r.messages * 8);
    // local cases send nothing
    let local = run_case(&scenario(CaseId::LocalWithFixedCurves)).unwrap();
    assert_eq!(local.messages, 0);
}

#[test]
fn scenario_validation_errors() {
    let mut sc = short_scenario(CaseId::Supervisory);
    sc.dispatch_period_s = 250.0; // not a multiple of 15 s
    assert!(sc.validate().is_err());
    let mut sc = short_scenario(CaseId::Supervisory);
    sc.profiles = "synth:nonsense".into();
    assert!(sc.load_profiles().is_err());
}
