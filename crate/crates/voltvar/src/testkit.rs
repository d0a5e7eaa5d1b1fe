//! Toy feeders for unit tests.

use num_complex::Complex64;

use crate::devices::{RegulatorMode, RegulatorSpec};
use crate::feeder::{
    Branch, BranchKind, Bus, FeederModel, InverterSite, Load, LoadConn, LoadModel, NetworkIndex,
    ZERO_MAT3,
};
use crate::phase::PhaseSet;

/// Single-phase two-bus feeder: 1 kV-LN zone on a 3 MVA base so that ohms
/// equal per-unit and 1000 kW equals 1 p.u. per phase.
pub fn two_bus(z_pu: Complex64, p_load_kw: f64, q_load_kvar: f64) -> FeederModel {
    let a = PhaseSet::parse("A").unwrap();
    let mut z = ZERO_MAT3;
    z[0][0] = z_pu;
    FeederModel {
        name: "two-bus".into(),
        buses: vec![
            Bus {
                id: "src".into(),
                phases: a,
                base_kv_ln: 1.0,
                is_source: true,
            },
            Bus {
                id: "load".into(),
                phases: a,
                base_kv_ln: 1.0,
                is_source: false,
            },
        ],
        branches: vec![Branch {
            from: 0,
            to: 1,
            kind: BranchKind::Line,
            phases: a,
            z_ohm: z,
            b_shunt_s: ZERO_MAT3,
            length: 1.0,
            regulator: None,
        }],
        loads: vec![Load {
            bus: 1,
            conn: LoadConn::Wye,
            model: LoadModel::ConstPq,
            p_kw: [p_load_kw, 0.0, 0.0],
            q_kvar: [q_load_kvar, 0.0, 0.0],
            distributed_fraction: 0.0,
        }],
        inverter_sites: vec![],
        regulators: vec![],
        shunt_caps: vec![],
        base_mva: 3.0,
        source: 0,
        v_source_pu: 1.0,
    }
}

/// Two-bus feeder with a smart inverter at the load bus.
pub fn two_bus_with_inverter(
    z_pu: Complex64,
    p_load_kw: f64,
    q_load_kvar: f64,
    s_rating_kva: f64,
) -> FeederModel {
    let mut m = two_bus(z_pu, p_load_kw, q_load_kvar);
    m.inverter_sites.push(InverterSite {
        bus: 1,
        phases: PhaseSet::parse("A").unwrap(),
        p_rating_kw: 0.0,
        s_rating_kva,
        smart: true,
    });
    m
}

/// Chain feeder `src - n1 - n2 - ... `, single phase A, unit base, with a
/// per-phase regulator inserted after `reg_after` hops when requested.
pub fn chain(
    n_segments: usize,
    z_pu: Complex64,
    load_kw_per_bus: f64,
    regulator_after: Option<usize>,
) -> FeederModel {
    let a = PhaseSet::parse("A").unwrap();
    let mut z = ZERO_MAT3;
    z[0][0] = z_pu;
    let mut buses = vec![Bus {
        id: "src".into(),
        phases: a,
        base_kv_ln: 1.0,
        is_source: true,
    }];
    let mut branches = Vec::new();
    let mut loads = Vec::new();
    let mut regulators = Vec::new();
    for i in 0..n_segments {
        buses.push(Bus {
            id: format!("n{}", i + 1),
            phases: a,
            base_kv_ln: 1.0,
            is_source: false,
        });
        let is_reg = regulator_after == Some(i);
        if is_reg {
            regulators.push(RegulatorSpec {
                id: format!("vr{}", regulators.len() + 1),
                branch: (buses[i].id.clone(), buses[i + 1].id.clone()),
                mode: RegulatorMode::PerPhase,
                tap_min: -16,
                tap_max: 16,
                step_pu: 0.00625,
                v_set: 120.0,
                bandwidth: 2.0,
                time_delay_s: 60.0,
                max_tap_per_action: 1,
            });
        }
        branches.push(Branch {
            from: i,
            to: i + 1,
            kind: if is_reg {
                BranchKind::Regulator
            } else {
                BranchKind::Line
            },
            phases: a,
            z_ohm: if is_reg { ZERO_MAT3 } else { z },
            b_shunt_s: ZERO_MAT3,
            length: 1.0,
            regulator: if is_reg {
                Some(regulators.len() - 1)
            } else {
                None
            },
        });
        if load_kw_per_bus > 0.0 {
            loads.push(Load {
                bus: i + 1,
                conn: LoadConn::Wye,
                model: LoadModel::ConstPq,
                p_kw: [load_kw_per_bus, 0.0, 0.0],
                q_kvar: [load_kw_per_bus * 0.5, 0.0, 0.0],
                distributed_fraction: 0.0,
            });
        }
    }
    FeederModel {
        name: "chain".into(),
        buses,
        branches,
        loads,
        inverter_sites: vec![],
        regulators,
        shunt_caps: vec![],
        base_mva: 3.0,
        source: 0,
        v_source_pu: 1.0,
    }
}

pub fn index_of(model: &FeederModel) -> NetworkIndex {
    NetworkIndex::build(model).expect("toy model indexes")
}

/// Closed-form two-bus solution for a constant-PQ load: the high-voltage
/// root of `u^2 + (2(pr+qx) - v1^2) u + (p^2+q^2)|z|^2 = 0` with
/// `u = |V2|^2`, then `V2 = conj((u + z conj(S)) / V1)`.
pub fn two_bus_oracle(v1: f64, z: Complex64, s: Complex64) -> Complex64 {
    let b = 2.0 * (s.re * z.re + s.im * z.im) - v1 * v1;
    let c = s.norm_sqr() * z.norm_sqr();
    let disc = b * b - 4.0 * c;
    assert!(disc >= 0.0, "load beyond maximum power transfer");
    let u = 0.5 * (-b + disc.sqrt());
    ((Complex64::new(u, 0.0) + z * s.conj()) / Complex64::new(v1, 0.0)).conj()
}
