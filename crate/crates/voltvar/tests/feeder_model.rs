//! Feeder file loading, validation errors, and admittance identities.

mod common;

use common::data_path;
use num_complex::Complex64;
use voltvar::feeder::parse_feeder;
use voltvar::{build_admittance, load_feeder, NetworkIndex, Phase, TapState};

fn two_bus_json(extra_branch: &str) -> String {
    format!(
        r#"{{
        "base": {{ "mva": 3.0, "source": "src" }},
        "buses": [
            {{ "id": "src", "phases": "A", "base_kv_ln": 1.0 }},
            {{ "id": "load", "phases": "A", "base_kv_ln": 1.0 }}
        ],
        "branches": [
            {{ "from": "src", "to": "load", "phases": "A",
               "z_ohm": [[[0.01, 0.02],[0,0],[0,0]],[[0,0],[0,0],[0,0]],[[0,0],[0,0],[0,0]]] }}{extra_branch}
        ],
        "loads": [
            {{ "bus": "load", "p_kw": [100.0, 0, 0], "q_kvar": [50.0, 0, 0] }}
        ]
    }}"#
    )
}

#[test]
fn minimal_two_bus_file_loads() {
    let model = parse_feeder(&two_bus_json(""), true).unwrap();
    assert_eq!(model.buses.len(), 2);
    assert_eq!(model.branches.len(), 1);
    assert_eq!(model.load_bus_count(), 1);
    assert!(model.buses[model.source].is_source);
}

#[test]
fn cycle_is_rejected_as_non_radial() {
    let cycle = r#",
            { "from": "load", "to": "src", "phases": "A",
              "z_ohm": [[[0.01, 0.02],[0,0],[0,0]],[[0,0],[0,0],[0,0]],[[0,0],[0,0],[0,0]]] }"#;
    let err = parse_feeder(&two_bus_json(cycle), true).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("non-radial"), "got: {msg}");
}

#[test]
fn parse_error_carries_location() {
    let err = parse_feeder("{ not json", true).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("parse error"), "got: {msg}");
    assert!(msg.contains("line"), "got: {msg}");
}

#[test]
fn dangling_reference_is_reported() {
    let text = two_bus_json("").replace(r#""bus": "load""#, r#""bus": "nowhere""#);
    let err = parse_feeder(&text, true).unwrap_err();
    assert!(err.to_string().contains("dangling"), "got: {err}");
}

#[test]
fn phase_mismatch_is_reported() {
    let text = two_bus_json("").replace(
        r#"{ "id": "load", "phases": "A", "base_kv_ln": 1.0 }"#,
        r#"{ "id": "load", "phases": "B", "base_kv_ln": 1.0 }"#,
    );
    let err = parse_feeder(&text, true).unwrap_err();
    assert!(err.to_string().contains("phasing"), "got: {err}");
}

#[test]
fn bundled_feeder_counts_match_study_description() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    assert_eq!(model.load_bus_count(), 20);
    assert_eq!(model.inverter_sites.len(), 10);
    assert_eq!(model.smart_sites().count(), 6);
    // one ganged LTC and one per-phase VR after the overlay
    let ganged = model
        .regulators
        .iter()
        .filter(|r| r.mode == voltvar::RegulatorMode::Ganged)
        .count();
    let per_phase = model
        .regulators
        .iter()
        .filter(|r| r.mode == voltvar::RegulatorMode::PerPhase)
        .count();
    assert_eq!((ganged, per_phase), (1, 1));
    assert!(model.shunt_caps.is_empty());
    // the unmodified variant keeps both VRs, the capacitors, no PV
    let unmod = voltvar::load_feeder_unmodified(data_path("ieee34.json")).unwrap();
    assert_eq!(unmod.regulators.len(), 2);
    assert_eq!(unmod.shunt_caps.len(), 2);
    assert!(unmod.inverter_sites.is_empty());
}

#[test]
fn admittance_of_single_line_is_textbook() {
    let model = parse_feeder(&two_bus_json(""), true).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    let y = build_admittance(&model, &index, &TapState::neutral(0)).unwrap();
    let z = Complex64::new(0.01, 0.02); // ohms == p.u. on this base
    let y_expect = 1.0 / z;
    let (a, b) = (0, 1);
    assert!((y.get(a, a) - y_expect).norm() < 1e-12);
    assert!((y.get(b, b) - y_expect).norm() < 1e-12);
    assert!((y.get(a, b) + y_expect).norm() < 1e-12);
    assert!((y.get(b, a) + y_expect).norm() < 1e-12);
    // zero-shunt rows sum to zero
    for i in 0..y.n {
        let sum: Complex64 = y.row(i).iter().map(|&(_, v)| v).sum();
        assert!(sum.norm() < 1e-9, "row {i} sums to {sum}");
    }
}

#[test]
fn regulator_tap_scales_off_diagonals_by_ratio() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    let ltc = model.regulators.iter().position(|r| r.id == "ltc").unwrap();
    let sub = model.bus_index("sub").unwrap();
    let b800 = model.bus_index("800").unwrap();

    let neutral = TapState::neutral(model.regulators.len());
    let mut plus_one = neutral.clone();
    plus_one.regs[ltc].taps = [1, 1, 1];
    let y0 = build_admittance(&model, &index, &neutral).unwrap();
    let y1 = build_admittance(&model, &index, &plus_one).unwrap();

    for phase in Phase::ALL {
        let i = index.node(sub, phase).unwrap();
        let j = index.node(b800, phase).unwrap();
        let ratio = (y1.get(i, j) / y0.get(i, j)).re;
        assert!(
            (ratio - 1.00625).abs() < 1e-9,
            "phase {phase}: off-diagonal ratio {ratio}"
        );
    }
}

#[test]
fn per_unit_conversion_round_trips() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    // ohms -> p.u. -> ohms is exact to f64 round-off
    for (bi, br) in model.branches.iter().enumerate() {
        let z_base = model.z_base_ohm(br.to);
        for row in &br.z_ohm {
            for &z in row {
                let back = (z / z_base) * z_base;
                assert!(
                    (back - z).norm() <= 1e-12 * z.norm().max(1.0),
                    "branch {bi}"
                );
            }
        }
    }
}

#[test]
fn profile_loading_examples() {
    // bundled high-load cloudy day: 24 h at 15 s with intermittency
    let p = voltvar::load_profiles(data_path("profiles/high_cloudy.csv")).unwrap();
    assert_eq!(p.step_s, 15.0);
    assert_eq!(p.len(), 5760);
    let sunny = voltvar::load_profiles(data_path("profiles/high_sunny.csv")).unwrap();
    let dipped = p
        .pv_mult
        .iter()
        .zip(&sunny.pv_mult)
        .filter(|(a, b)| *a < *b)
        .count();
    assert!(dipped > 100, "cloudy day should dip below the clear sky");
}
