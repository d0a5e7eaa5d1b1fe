//! Turns an optimization result into device commands.
//!
//! Inverters are not sent Var setpoints. For each one the dispatcher looks
//! up the voltage `v_l` at which the *current* curve would produce the
//! optimal Var `q_g`, and commands a translation of the whole curve by
//! `delta_v = v_g - v_l`. At unchanged loading the local droop dynamics then
//! settle at `(v_g, q_g)` without further communication. Inverters whose
//! optimal Var is below a threshold fraction of their limit keep their old
//! curve, and zero shifts are suppressed outright.

use crate::devices::{InverterState, RegulatorMode, TapState, VoltVarCurve};
use crate::feeder::{FeederModel, NetworkIndex};
use crate::phase::Phase;
use crate::powerflow::{solve, InjectionSet, PhasorSolution, SolveError, SolveOptions};
use crate::vvo::VvoResult;

/// Bytes per transmitted scalar in the accounting model.
pub const SCALAR_BYTES: usize = 8;
/// Scalars needed to describe a full four-point curve (4 x (V, Q)).
pub const FULL_CURVE_SCALARS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TapCommand {
    pub regulator: usize,
    /// Phase slot for per-phase devices; ganged devices use slot 0.
    pub slot: usize,
    pub target: i32,
}

#[derive(Debug, Clone)]
pub struct ShiftCommand {
    pub site: usize,
    pub phase: Phase,
    pub q_g_kvar: f64,
    pub v_g: f64,
    pub v_l: f64,
    pub delta_v: f64,
    /// Absolute anchor so that re-applying the same plan is a no-op.
    pub target_v_ref: f64,
}

#[derive(Debug, Clone)]
pub struct DispatchPlan {
    pub interval_s: f64,
    pub tap_commands: Vec<TapCommand>,
    pub shifts: Vec<ShiftCommand>,
    /// Controls retained on their old curve by the threshold rule.
    pub skipped: Vec<(usize, Phase, f64)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageStats {
    pub messages: usize,
    pub bytes: usize,
    /// What the same dispatch would cost sending whole curves instead.
    pub full_curve_bytes: usize,
}

/// Fleet of smart-inverter states, ordered by site enumeration. `ordinal`
/// maps an inverter-site index to its slot in `states`.
pub fn initial_inverter_states(model: &FeederModel, curve: &VoltVarCurve) -> Vec<InverterState> {
    model
        .smart_sites()
        .map(|(si, site)| {
            let mut c = curve.clone();
            c.q_lim_kvar = site.s_phase_kva();
            InverterState::new(si, &c, site.phases.iter())
        })
        .collect()
}

pub fn smart_ordinal(model: &FeederModel) -> Vec<Option<usize>> {
    let mut out = vec![None; model.inverter_sites.len()];
    for (ord, (si, _)) in model.smart_sites().enumerate() {
        out[si] = Some(ord);
    }
    out
}

/// Build the dispatch plan for one interval.
///
/// `threshold_frac` of the per-phase Var limit gates the shift: below it the
/// inverter keeps its old curve. Tap commands are emitted only for devices
/// whose target differs from the current state.
pub fn make_plan(
    model: &FeederModel,
    index: &NetworkIndex,
    result: &VvoResult,
    current_taps: &TapState,
    states: &[InverterState],
    threshold_frac: f64,
    interval_s: f64,
) -> DispatchPlan {
    let ordinal = smart_ordinal(model);
    let mut plan = DispatchPlan {
        interval_s,
        tap_commands: Vec::new(),
        shifts: Vec::new(),
        skipped: Vec::new(),
        warnings: Vec::new(),
    };

    for (ri, spec) in model.regulators.iter().enumerate() {
        let have = &current_taps.regs[ri];
        let want = &result.taps.regs[ri];
        match spec.mode {
            RegulatorMode::Ganged => {
                if want.taps[0] != have.taps[0] {
                    plan.tap_commands.push(TapCommand {
                        regulator: ri,
                        slot: 0,
                        target: want.taps[0],
                    });
                }
            }
            RegulatorMode::PerPhase => {
                for slot in 0..3 {
                    if want.taps[slot] != have.taps[slot] {
                        plan.tap_commands.push(TapCommand {
                            regulator: ri,
                            slot,
                            target: want.taps[slot],
                        });
                    }
                }
            }
        }
    }

    for (j, ctrl) in index.controls.iter().enumerate() {
        let Some(ord) = ordinal[ctrl.site] else {
            continue;
        };
        let state = &states[ord];
        let Some(curve) = &state.curves[ctrl.phase.index()] else {
            plan.warnings
                .push(format!("control {j}: no curve on phase {}", ctrl.phase));
            continue;
        };
        let mut q_g = result.q_kvar[j];
        let v_g = result.v_g[j];
        // below-threshold commands keep the old curve, provided that curve
        // would also answer the expected voltage with a below-threshold Var;
        // a stale shift that still drives real output gets re-anchored
        let threshold = threshold_frac * curve.q_lim_kvar;
        if q_g.abs() < threshold && curve.eval(v_g).abs() < threshold {
            plan.skipped.push((ctrl.site, ctrl.phase, q_g));
            continue;
        }
        if q_g.abs() > curve.q_lim_kvar {
            plan.warnings.push(format!(
                "control {j}: q_g {q_g} kvar beyond curve limit {}, clamped",
                curve.q_lim_kvar
            ));
            q_g = q_g.clamp(-curve.q_lim_kvar, curve.q_lim_kvar);
        }
        let v_l = curve.inverse(q_g).expect("clamped q is representable");
        let delta_v = v_g - v_l;
        if delta_v.abs() < 1e-12 {
            continue; // nothing to send
        }
        plan.shifts.push(ShiftCommand {
            site: ctrl.site,
            phase: ctrl.phase,
            q_g_kvar: q_g,
            v_g,
            v_l,
            delta_v,
            target_v_ref: curve.v_ref + delta_v,
        });
    }
    plan
}

/// Outcome of applying a plan: tap operations per regulator (one per
/// single-step movement per controlled unit) and rejected commands.
#[derive(Debug, Clone, Default)]
pub struct ApplyOutcome {
    pub tap_ops: Vec<u32>,
    pub rejected: Vec<String>,
}

pub fn apply_plan(
    model: &FeederModel,
    plan: &DispatchPlan,
    taps: &mut TapState,
    states: &mut [InverterState],
) -> ApplyOutcome {
    let ordinal = smart_ordinal(model);
    let mut outcome = ApplyOutcome {
        tap_ops: vec![0; model.regulators.len()],
        rejected: Vec::new(),
    };
    for cmd in &plan.tap_commands {
        let spec = &model.regulators[cmd.regulator];
        if cmd.target < spec.tap_min || cmd.target > spec.tap_max {
            outcome.rejected.push(format!(
                "{}: commanded tap {} outside range",
                spec.id, cmd.target
            ));
            continue;
        }
        let reg = &mut taps.regs[cmd.regulator];
        match spec.mode {
            RegulatorMode::Ganged => {
                outcome.tap_ops[cmd.regulator] += (cmd.target - reg.taps[0]).unsigned_abs();
                reg.taps = [cmd.target; 3];
            }
            RegulatorMode::PerPhase => {
                outcome.tap_ops[cmd.regulator] +=
                    (cmd.target - reg.taps[cmd.slot]).unsigned_abs();
                reg.taps[cmd.slot] = cmd.target;
            }
        }
        reg.timers = [0.0; 3];
        reg.saturated = [false; 3];
    }
    for shift in &plan.shifts {
        let Some(ord) = ordinal[shift.site] else {
            continue;
        };
        if let Some(curve) = &mut states[ord].curves[shift.phase.index()] {
            let delta = shift.target_v_ref - curve.v_ref;
            *curve = curve.shift(delta);
        }
    }
    outcome
}

pub fn message_accounting(plan: &DispatchPlan) -> MessageStats {
    let messages = plan.tap_commands.len() + plan.shifts.len();
    let bytes = messages * SCALAR_BYTES;
    let full_curve_bytes = plan.tap_commands.len() * SCALAR_BYTES
        + plan.shifts.len() * FULL_CURVE_SCALARS * SCALAR_BYTES;
    MessageStats {
        messages,
        bytes,
        full_curve_bytes,
    }
}

/// Iterate damped local Volt-Var steps against repeated power flows until
/// the fleet's Var output stops moving. Returns the settled solution and the
/// iteration count; `Ok(None)` in the count position never occurs — a fleet
/// that fails to settle within `max_iters` is reported via `Err`.
#[allow(clippy::too_many_arguments)]
pub fn settle_inverters(
    model: &FeederModel,
    index: &NetworkIndex,
    base_inj: &InjectionSet,
    taps: &TapState,
    states: &mut [InverterState],
    alpha: f64,
    max_iters: usize,
    q_tol_kvar: f64,
    opts: &SolveOptions,
) -> Result<(PhasorSolution, usize), SolveError> {
    let mut inj = base_inj.clone();
    for iter in 1..=max_iters {
        apply_fleet_q(model, index, &mut inj, states);
        let s = solve(model, index, &inj, taps, opts)?;
        let mut moved: f64 = 0.0;
        for state in states.iter_mut() {
            let site = &model.inverter_sites[state.site];
            let mut v = [None; 3];
            let mut q_lim = [0.0; 3];
            for p in site.phases.iter() {
                let node = index.node(site.bus, p).unwrap();
                v[p.index()] = Some(s.vm[node]);
                q_lim[p.index()] = site.q_limit_kvar(inj.p_gen_kw[node]);
            }
            let next = crate::devices::inverter_local_step(state, v, q_lim, alpha);
            for i in 0..3 {
                moved = moved.max((next.q_kvar[i] - state.q_kvar[i]).abs());
            }
            *state = next;
        }
        if moved < q_tol_kvar {
            return Ok((s, iter));
        }
    }
    Err(SolveError::NonConvergence {
        sweeps: max_iters,
        mismatch_pu: q_tol_kvar,
    })
}

/// Copy the fleet's current Var output into the injection set.
pub fn apply_fleet_q(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &mut InjectionSet,
    states: &[InverterState],
) {
    for state in states {
        let site = &model.inverter_sites[state.site];
        for p in site.phases.iter() {
            let node = index.node(site.bus, p).unwrap();
            inj.q_gen_kvar[node] = state.q_kvar[p.index()];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{chain, index_of, two_bus_with_inverter};
    use crate::vvo::{run_vvo, OptimizerConfig};
    use num_complex::Complex64;

    fn curve100() -> VoltVarCurve {
        VoltVarCurve::default_with_limit(100.0)
    }

    fn toy_result(q: f64, v_g: f64) -> VvoResult {
        VvoResult {
            taps: TapState::neutral(0),
            q_kvar: vec![q],
            v_g: vec![v_g],
            stage1_trace: vec![],
            stage2_trace_kw: vec![],
            feasible: true,
            tap_evaluations: 0,
            solution: PhasorSolution {
                vm: vec![1.0, v_g],
                va: vec![0.0, 0.0],
                iterations: 1,
                max_mismatch_pu: 0.0,
                sweep_trace: vec![],
            },
        }
    }

    fn toy() -> (FeederModel, NetworkIndex, Vec<InverterState>) {
        let model = two_bus_with_inverter(Complex64::new(0.01, 0.02), 100.0, 50.0, 300.0);
        let index = index_of(&model);
        let mut states = initial_inverter_states(&model, &curve100());
        // keep the toy's limit at 100 kvar for hand numbers
        states[0].curves[0].as_mut().unwrap().q_lim_kvar = 100.0;
        (model, index, states)
    }

    #[test]
    fn threshold_skips_small_commands() {
        let (model, index, states) = toy();
        let result = toy_result(5.0, 1.0); // 5% of 100 kvar limit
        let plan = make_plan(
            &model,
            &index,
            &result,
            &TapState::neutral(0),
            &states,
            0.10,
            0.0,
        );
        assert!(plan.shifts.is_empty());
        assert_eq!(plan.skipped.len(), 1);
        assert_eq!(message_accounting(&plan).messages, 0);
    }

    #[test]
    fn zero_delta_suppressed() {
        let (model, index, states) = toy();
        // v_g equals the canonical v_l for q = -50: (1.02 + 1.05)/2
        let result = toy_result(-50.0, 0.5 * (1.02 + 1.05));
        let plan = make_plan(
            &model,
            &index,
            &result,
            &TapState::neutral(0),
            &states,
            0.10,
            0.0,
        );
        assert!(plan.shifts.is_empty());
        assert!(plan.skipped.is_empty());
    }

    #[test]
    fn hand_computed_shift() {
        let (model, index, states) = toy();
        let result = toy_result(-50.0, 1.02);
        let plan = make_plan(
            &model,
            &index,
            &result,
            &TapState::neutral(0),
            &states,
            0.10,
            0.0,
        );
        assert_eq!(plan.shifts.len(), 1);
        let s = &plan.shifts[0];
        assert!((s.v_l - 1.035).abs() < 1e-12);
        assert!((s.delta_v + 0.015).abs() < 1e-12);
        // shifted curve reproduces q_g at v_g
        let mut st = states.clone();
        let mut taps = TapState::neutral(0);
        apply_plan(&model, &plan, &mut taps, &mut st);
        let c = st[0].curves[0].as_ref().unwrap();
        assert!((c.eval(1.02) + 50.0).abs() < 1e-9);
    }

    #[test]
    fn empty_plan_is_noop() {
        let (model, _index, states) = toy();
        let plan = DispatchPlan {
            interval_s: 0.0,
            tap_commands: vec![],
            shifts: vec![],
            skipped: vec![],
            warnings: vec![],
        };
        let mut taps = TapState::neutral(0);
        let mut st = states.clone();
        let outcome = apply_plan(&model, &plan, &mut taps, &mut st);
        assert_eq!(outcome.tap_ops, Vec::<u32>::new());
        assert_eq!(taps, TapState::neutral(0));
        assert_eq!(st, states);
    }

    #[test]
    fn ganged_tap_counts_movement_once_per_step() {
        let model = chain(2, Complex64::new(0.01, 0.02), 50.0, Some(0));
        // make the chain regulator ganged for this test
        let mut model = model;
        model.regulators[0].mode = RegulatorMode::Ganged;
        let plan = DispatchPlan {
            interval_s: 0.0,
            tap_commands: vec![TapCommand {
                regulator: 0,
                slot: 0,
                target: 2,
            }],
            shifts: vec![],
            skipped: vec![],
            warnings: vec![],
        };
        let mut taps = TapState::neutral(1);
        let mut states = vec![];
        let outcome = apply_plan(&model, &plan, &mut taps, &mut states);
        assert_eq!(outcome.tap_ops, vec![2]);
        assert_eq!(taps.regs[0].taps, [2, 2, 2]);
        // out-of-range command is rejected
        let bad = DispatchPlan {
            interval_s: 0.0,
            tap_commands: vec![TapCommand {
                regulator: 0,
                slot: 0,
                target: 99,
            }],
            shifts: vec![],
            skipped: vec![],
            warnings: vec![],
        };
        let outcome = apply_plan(&model, &bad, &mut taps, &mut states);
        assert_eq!(outcome.tap_ops, vec![0]);
        assert_eq!(outcome.rejected.len(), 1);
        assert_eq!(taps.regs[0].taps, [2, 2, 2]);
    }

    #[test]
    fn apply_is_idempotent() {
        let (model, index, states) = toy();
        let result = toy_result(-60.0, 1.025);
        let mut taps = TapState {
            regs: vec![],
        };
        let plan = make_plan(&model, &index, &result, &taps, &states, 0.10, 0.0);
        let mut once = states.clone();
        apply_plan(&model, &plan, &mut taps, &mut once);
        let mut twice = once.clone();
        apply_plan(&model, &plan, &mut taps, &mut twice);
        assert_eq!(once, twice);
    }

    #[test]
    fn accounting_counts_and_ratio() {
        let plan = DispatchPlan {
            interval_s: 0.0,
            tap_commands: vec![TapCommand {
                regulator: 0,
                slot: 0,
                target: 1,
            }],
            shifts: vec![
                ShiftCommand {
                    site: 0,
                    phase: Phase::A,
                    q_g_kvar: 50.0,
                    v_g: 1.0,
                    v_l: 0.99,
                    delta_v: 0.01,
                    target_v_ref: 1.01,
                },
                ShiftCommand {
                    site: 1,
                    phase: Phase::A,
                    q_g_kvar: 40.0,
                    v_g: 1.0,
                    v_l: 0.98,
                    delta_v: 0.02,
                    target_v_ref: 1.02,
                },
                ShiftCommand {
                    site: 2,
                    phase: Phase::A,
                    q_g_kvar: 30.0,
                    v_g: 1.0,
                    v_l: 0.97,
                    delta_v: 0.03,
                    target_v_ref: 1.03,
                },
            ],
            skipped: vec![],
            warnings: vec![],
        };
        let stats = message_accounting(&plan);
        assert_eq!(stats.messages, 4);
        assert_eq!(stats.bytes, 4 * SCALAR_BYTES);
        // per-inverter payload ratio shift vs full curve is 1/8
        let shift_bytes = stats.bytes - SCALAR_BYTES;
        let full_bytes = stats.full_curve_bytes - SCALAR_BYTES;
        assert_eq!(shift_bytes * FULL_CURVE_SCALARS, full_bytes);
    }

    #[test]
    fn settled_fleet_lands_on_dispatched_point() {
        // full pipeline on the toy: optimize, plan, apply, settle
        let model = two_bus_with_inverter(Complex64::new(0.01, 0.02), 300.0, 200.0, 400.0);
        let index = index_of(&model);
        let inj = InjectionSet::snapshot(&model, &index, 1.0, 0.0);
        let taps = TapState::neutral(0);
        let cfg = OptimizerConfig::default();
        let result = run_vvo(&model, &index, &inj, &taps, &cfg).unwrap();
        assert!(result.feasible);
        assert!(result.q_kvar[0].abs() > 40.0, "toy should want real Var");

        let mut states = initial_inverter_states(&model, &curve100());
        let plan = make_plan(&model, &index, &result, &taps, &states, 0.10, 0.0);
        assert_eq!(plan.shifts.len(), 1);
        let mut tap_state = taps.clone();
        apply_plan(&model, &plan, &mut tap_state, &mut states);

        let (settled, iters) = settle_inverters(
            &model,
            &index,
            &inj,
            &tap_state,
            &mut states,
            0.5,
            50,
            1e-4 * model.s_base_1ph_kva(),
            &cfg.solve,
        )
        .unwrap();
        assert!(iters <= 50);
        let node = index.controls[0].node;
        let q_settled = states[0].q_kvar[0];
        assert!(
            (q_settled - result.q_kvar[0]).abs() <= 0.02 * 400.0 / 3.0_f64.max(1.0),
            "settled q {q_settled} vs dispatched {}",
            result.q_kvar[0]
        );
        assert!(
            (settled.vm[node] - result.v_g[0]).abs() <= 0.005,
            "settled v {} vs v_g {}",
            settled.vm[node],
            result.v_g[0]
        );
    }
}
