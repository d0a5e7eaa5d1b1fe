//! Feeder-scale solver validation: the sweep solver against an independent
//! admittance-based solution, the committed baseline snapshot, and the
//! physical invariants that must hold on every converged solve.

mod common;

use common::{baseline_taps, data_path, oracle_solve};
use voltvar::powerflow::{power_balance, total_loss};
use voltvar::{
    build_admittance, check_limits, load_feeder, load_feeder_unmodified, solve, InjectionSet,
    NetworkIndex, Phase, SolveOptions, TapState,
};

fn tight() -> SolveOptions {
    SolveOptions {
        tol: 1e-9,
        ..SolveOptions::default()
    }
}

#[test]
fn sweep_matches_independent_solver_on_ieee34() {
    let model = load_feeder_unmodified(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    for (lm, taps) in [
        (1.0, baseline_taps()),
        (0.6, baseline_taps()),
        (1.0, TapState::neutral(2)),
    ] {
        let inj = InjectionSet::snapshot(&model, &index, lm, 0.0);
        let ours = solve(&model, &index, &inj, &taps, &tight()).unwrap();
        let oracle = oracle_solve(&model, &index, &inj, &taps);
        let mut worst = 0.0f64;
        for n in 0..index.n_nodes() {
            worst = worst.max((ours.vm[n] - oracle.vm[n]).abs());
        }
        assert!(
            worst < 1e-6,
            "load {lm}: max |dv| = {worst:.3e} vs independent solver"
        );
    }
}

#[test]
fn sweep_matches_independent_solver_on_modified_feeder_with_pv() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    let mut inj = InjectionSet::snapshot(&model, &index, 0.8, 0.9);
    // sprinkle some inverter Var to exercise q_gen paths
    let limits = inj.control_q_limits_kvar(&model, &index);
    let q: Vec<f64> = limits
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| if i % 2 == 0 { 0.4 * hi } else { 0.3 * lo })
        .collect();
    inj.set_control_q_kvar(&index, &q);
    let taps = TapState::neutral(2);
    let ours = solve(&model, &index, &inj, &taps, &tight()).unwrap();
    let oracle = oracle_solve(&model, &index, &inj, &taps);
    let mut worst = 0.0f64;
    for n in 0..index.n_nodes() {
        worst = worst.max((ours.vm[n] - oracle.vm[n]).abs());
    }
    assert!(worst < 1e-6, "max |dv| = {worst:.3e}");
}

#[test]
fn baseline_snapshot_reproduced() {
    let model = load_feeder_unmodified(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    let inj = InjectionSet::snapshot(&model, &index, 1.0, 0.0);
    let sol = solve(&model, &index, &inj, &baseline_taps(), &tight()).unwrap();

    let text = std::fs::read_to_string(data_path("ieee34_baseline_solution.csv")).unwrap();
    let mut checked = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            continue;
        }
        let bus = model.bus_index(f[0]).expect("baseline bus exists");
        let phase = match f[1] {
            "A" => Phase::A,
            "B" => Phase::B,
            _ => Phase::C,
        };
        let vm: f64 = f[2].parse().unwrap();
        let node = index.node(bus, phase).unwrap();
        assert!(
            (sol.vm[node] - vm).abs() < 1e-3,
            "{}/{}: {} vs baseline {}",
            f[0],
            f[1],
            sol.vm[node],
            vm
        );
        checked += 1;
    }
    assert_eq!(checked, index.n_nodes());
}

#[test]
fn every_solve_satisfies_power_balance() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    let taps = TapState::neutral(2);
    for (lm, pv) in [(1.0, 0.0), (0.7, 0.5), (0.3, 1.0)] {
        let inj = InjectionSet::snapshot(&model, &index, lm, pv);
        let sol = solve(&model, &index, &inj, &taps, &SolveOptions::default()).unwrap();
        assert!(sol.max_mismatch_pu <= 1e-6);
        let (source, gen, load, loss) = power_balance(&model, &index, &inj, &taps, &sol);
        // imbalance is bounded by the per-node mismatch tolerance
        let bound_kw = index.n_nodes() as f64 * 1e-6 * model.s_base_1ph_kva();
        assert!(
            (source + gen - load - loss).abs() < bound_kw,
            "({lm},{pv}): {source} + {gen} - {load} - {loss}"
        );
    }
}

#[test]
fn raising_a_tap_never_lowers_downstream_voltage() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    let inj = InjectionSet::snapshot(&model, &index, 1.0, 0.2);
    let opts = SolveOptions::default();
    let base_taps = TapState::neutral(2);
    let base = solve(&model, &index, &inj, &base_taps, &opts).unwrap();
    // vr1 is regulator 0 in the modified file order
    let vr1 = model
        .regulators
        .iter()
        .position(|r| r.id == "vr1")
        .unwrap();
    for phase in Phase::ALL {
        let mut taps = base_taps.clone();
        taps.regs[vr1].taps[phase.index()] += 1;
        let bumped = solve(&model, &index, &inj, &taps, &opts).unwrap();
        let mask = &index.reg_downstream[vr1];
        for (n, &(bus, ph)) in index.nodes.iter().enumerate() {
            if mask[bus] && ph == phase {
                assert!(
                    bumped.vm[n] >= base.vm[n] - 1e-9,
                    "phase {phase} node {n}: {} -> {}",
                    base.vm[n],
                    bumped.vm[n]
                );
            }
        }
    }
}

#[test]
fn per_unit_round_trip_on_all_branches() {
    let model = load_feeder_unmodified(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    for pb in &index.pu_branches {
        let br = &model.branches[pb.branch];
        if br.kind != voltvar::feeder::BranchKind::Line {
            continue;
        }
        let z_base = model.z_base_ohm(br.to);
        for i in 0..3 {
            for j in 0..3 {
                let back = pb.z_pu[i][j] * z_base;
                let orig = br.z_ohm[i][j];
                let err = (back - orig).norm();
                assert!(
                    err <= 1e-12 * orig.norm().max(1.0),
                    "branch {}: {back} vs {orig}",
                    pb.branch
                );
            }
        }
    }
}

#[test]
fn admittance_symmetry_and_reassembly() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    // symmetric at neutral taps and at a mixed tap state
    let neutral = TapState::neutral(2);
    let y0 = build_admittance(&model, &index, &neutral).unwrap();
    assert!(y0.max_asymmetry() < 1e-12);
    let mut taps = TapState::neutral(2);
    taps.regs[0].taps = [3, -2, 5];
    taps.regs[1].taps = [1, 1, 1];
    let y1 = build_admittance(&model, &index, &taps).unwrap();
    assert!(y1.max_asymmetry() < 1e-12);
    // rebuilding from the same inputs gives identical entries
    let y2 = build_admittance(&model, &index, &taps).unwrap();
    for i in 0..y1.n {
        for &(j, v) in y1.row(i) {
            assert_eq!(v, y2.get(i, j));
        }
    }
}

#[test]
fn single_solve_is_fast() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    let inj = InjectionSet::snapshot(&model, &index, 1.0, 0.5);
    let taps = TapState::neutral(2);
    let opts = SolveOptions::default();
    // warm up
    solve(&model, &index, &inj, &taps, &opts).unwrap();
    let t0 = std::time::Instant::now();
    let n = 20;
    for _ in 0..n {
        solve(&model, &index, &inj, &taps, &opts).unwrap();
    }
    let per_solve = t0.elapsed() / n;
    assert!(
        per_solve < std::time::Duration::from_millis(50),
        "{per_solve:?} per solve"
    );
}

#[test]
fn violation_report_on_stressed_feeder() {
    let model = load_feeder(data_path("ieee34.json")).unwrap();
    let index = NetworkIndex::build(&model).unwrap();
    let inj = InjectionSet::snapshot(&model, &index, 1.0, 0.0);
    let taps = TapState::neutral(2);
    let sol = solve(&model, &index, &inj, &taps, &SolveOptions::default()).unwrap();
    let report = check_limits(&sol, 0.95, 1.05);
    assert!(!report.under.is_empty(), "peak load should sag");
    assert!(report.over.is_empty());
    let loss = total_loss(&model, &index, &taps, &sol);
    assert!(loss > 0.0);
}

