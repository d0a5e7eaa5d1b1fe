//! Quasi-static 24-hour simulation of the three control cases.
//!
//! Case 1: LTC/VR on local bandwidth control, PV at unity power factor.
//! Case 2: local LTC/VR plus smart inverters following a fixed default
//! Volt-Var curve with damped local steps.
//! Case 3: the supervisory scheme — every dispatch period the two-stage
//! optimizer runs, tap commands and curve shifts are dispatched, regulators
//! hold their commanded taps in between, and inverters ride their (possibly
//! shifted) curves against the intermittent PV.
//!
//! Each simulation step scales loads and PV by the profile multipliers,
//! solves the power flow, accumulates losses, and — at the sampling cadence
//! (default one minute) — counts band violations and records the voltage
//! envelope.

pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::devices::{local_regulator_step, RegulatorMode, TapState, VoltVarCurve};
use crate::dispatch::{
    apply_fleet_q, apply_plan, initial_inverter_states, make_plan, message_accounting,
};
use crate::dispatch::smart_ordinal;
use crate::feeder::profiles::{self, ProfileError, ProfileKind, ProfileSet};
use crate::feeder::{load_feeder, FeederError, FeederModel, NetworkIndex};
use crate::phase::Phase;
use crate::powerflow::{check_limits, solve, total_loss, InjectionSet, SolveError};
use crate::vvo::{run_vvo, OptimizerConfig, VvoError};

#[derive(Debug)]
pub enum SimError {
    Feeder(FeederError),
    Profile(ProfileError),
    Io(std::io::Error),
    BadScenario(String),
    /// Power flow failed at a simulation timestamp.
    Solve { t_s: f64, err: SolveError },
    Vvo { t_s: f64, err: VvoError },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Feeder(e) => write!(f, "feeder: {e}"),
            SimError::Profile(e) => write!(f, "profiles: {e}"),
            SimError::Io(e) => write!(f, "io: {e}"),
            SimError::BadScenario(m) => write!(f, "scenario: {m}"),
            SimError::Solve { t_s, err } => write!(f, "power flow at t={t_s}s: {err}"),
            SimError::Vvo { t_s, err } => write!(f, "optimization at t={t_s}s: {err}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<FeederError> for SimError {
    fn from(e: FeederError) -> Self {
        SimError::Feeder(e)
    }
}
impl From<ProfileError> for SimError {
    fn from(e: ProfileError) -> Self {
        SimError::Profile(e)
    }
}
impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CaseId {
    LocalLegacyOnly,
    LocalWithFixedCurves,
    Supervisory,
}

impl CaseId {
    pub fn number(self) -> u8 {
        match self {
            CaseId::LocalLegacyOnly => 1,
            CaseId::LocalWithFixedCurves => 2,
            CaseId::Supervisory => 3,
        }
    }

    pub const ALL: [CaseId; 3] = [
        CaseId::LocalLegacyOnly,
        CaseId::LocalWithFixedCurves,
        CaseId::Supervisory,
    ];
}

impl TryFrom<u8> for CaseId {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(CaseId::LocalLegacyOnly),
            2 => Ok(CaseId::LocalWithFixedCurves),
            3 => Ok(CaseId::Supervisory),
            other => Err(format!("case must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<CaseId> for u8 {
    fn from(c: CaseId) -> u8 {
        c.number()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveShape {
    pub v: [f64; 4],
    pub v_ref: f64,
}

impl Default for CurveShape {
    fn default() -> Self {
        CurveShape {
            v: [0.95, 0.98, 1.02, 1.05],
            v_ref: 1.0,
        }
    }
}

/// Per-device override of the local-control settings from the feeder file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalControlOverride {
    pub regulator: String,
    #[serde(default)]
    pub v_set: Option<f64>,
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default)]
    pub time_delay_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub feeder: PathBuf,
    /// Profile CSV path, or `synth:<kind>` for an on-the-fly seeded profile.
    pub profiles: String,
    pub case: CaseId,
    pub step_s: f64,
    pub dispatch_period_s: f64,
    pub violation_sample_s: f64,
    pub seed: u64,
    pub curve: CurveShape,
    pub inverter_alpha: f64,
    /// Damping for the fixed-curve local case; raw droop (1.0) by default.
    pub case2_alpha: Option<f64>,
    pub dispatch_threshold_frac: f64,
    pub optimizer: OptimizerConfig,
    pub v_source_override: Option<f64>,
    pub local_control_overrides: Vec<LocalControlOverride>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            feeder: PathBuf::from("ieee34.json"),
            profiles: "synth:high_cloudy".into(),
            case: CaseId::Supervisory,
            step_s: 15.0,
            dispatch_period_s: 300.0,
            violation_sample_s: 60.0,
            seed: 1,
            curve: CurveShape::default(),
            inverter_alpha: 0.5,
            case2_alpha: None,
            dispatch_threshold_frac: 0.10,
            optimizer: OptimizerConfig::default(),
            v_source_override: None,
            local_control_overrides: Vec::new(),
        }
    }
}

impl Scenario {
    /// Load from JSON, resolving relative data paths against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut sc: Scenario = serde_json::from_str(&text)
            .map_err(|e| SimError::BadScenario(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if sc.feeder.is_relative() {
            sc.feeder = dir.join(&sc.feeder);
        }
        if !sc.profiles.starts_with("synth:") {
            let p = PathBuf::from(&sc.profiles);
            if p.is_relative() {
                sc.profiles = dir.join(p).to_string_lossy().into_owned();
            }
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.step_s <= 0.0 {
            return Err(SimError::BadScenario("step must be positive".into()));
        }
        let ratio = self.dispatch_period_s / self.step_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(SimError::BadScenario(format!(
                "dispatch period {}s is not a multiple of step {}s",
                self.dispatch_period_s, self.step_s
            )));
        }
        if !(0.0 < self.inverter_alpha && self.inverter_alpha <= 1.0) {
            return Err(SimError::BadScenario("alpha must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn load_profiles(&self) -> Result<ProfileSet, SimError> {
        if let Some(kind) = self.profiles.strip_prefix("synth:") {
            let kind = ProfileKind::from_name(kind)
                .ok_or_else(|| SimError::BadScenario(format!("unknown profile {kind:?}")))?;
            Ok(profiles::synthesize(kind, self.step_s, self.seed))
        } else {
            let p = profiles::load_profiles(&self.profiles)?;
            if (p.step_s - self.step_s).abs() > 1e-9 {
                return Err(SimError::BadScenario(format!(
                    "profile step {}s does not match scenario step {}s",
                    p.step_s, self.step_s
                )));
            }
            Ok(p)
        }
    }
}

/// One supervisory interval of a case-3 run: the command sent and what the
/// fleet actually settled at by the end of the interval.
#[derive(Debug, Clone)]
pub struct DispatchRecord {
    pub t_s: f64,
    pub site: usize,
    pub phase: Phase,
    pub q_cmd_kvar: f64,
    pub v_cmd_pu: f64,
    pub q_settled_kvar: f64,
    pub v_settled_pu: f64,
    pub q_lim_kvar: f64,
    pub skipped: bool,
    /// No band violation at any sample inside the interval.
    pub interval_clean: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SampleSeries {
    pub t_s: Vec<f64>,
    pub loss_kw: Vec<f64>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    /// Tap position per (sample, regulator, phase-slot).
    pub taps: Vec<Vec<[i32; 3]>>,
    /// Var output per (sample, control).
    pub q_kvar: Vec<Vec<f64>>,
    /// Voltage per (sample, control).
    pub v_ctrl: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub condition: String,
    pub case: CaseId,
    pub n_ov: u64,
    pub n_uv: u64,
    pub loss_kwh: f64,
    pub n_ltc: u64,
    pub n_vr: u64,
    pub v_max: f64,
    pub v_min: f64,
    pub energy_source_kwh: f64,
    pub energy_gen_kwh: f64,
    pub energy_load_kwh: f64,
    pub messages: u64,
    pub bytes: u64,
    pub infeasible_intervals: u64,
    pub series: SampleSeries,
    pub dispatches: Vec<DispatchRecord>,
    /// Wall time of each supervisory invocation, milliseconds.
    pub vvo_wall_ms: Vec<f64>,
    pub vvo_tap_evals: Vec<usize>,
}

impl MetricsReport {
    pub fn n_total(&self) -> u64 {
        self.n_ltc + self.n_vr
    }
}

struct PendingDispatch {
    t_s: f64,
    q_cmd: Vec<f64>,
    v_cmd: Vec<f64>,
    /// Fleet state settled at the dispatch snapshot (unchanged load/PV).
    q_settled: Vec<f64>,
    v_settled: Vec<f64>,
    skipped: Vec<bool>,
    clean: bool,
}

/// Run one scenario case end to end.
pub fn run_case(scenario: &Scenario) -> Result<MetricsReport, SimError> {
    scenario.validate()?;
    let mut model = load_feeder(&scenario.feeder)?;
    if let Some(v) = scenario.v_source_override {
        model.v_source_pu = v;
    }
    for ov in &scenario.local_control_overrides {
        let reg = model
            .regulators
            .iter_mut()
            .find(|r| r.id == ov.regulator)
            .ok_or_else(|| SimError::BadScenario(format!("no regulator {}", ov.regulator)))?;
        if let Some(v) = ov.v_set {
            reg.v_set = v;
        }
        if let Some(v) = ov.bandwidth {
            reg.bandwidth = v;
        }
        if let Some(v) = ov.time_delay_s {
            reg.time_delay_s = v;
        }
    }
    let index = NetworkIndex::build(&model)?;
    let profile = scenario.load_profiles()?;
    let curve = VoltVarCurve::from_knees(scenario.curve.v, scenario.curve.v_ref, 1.0);
    curve
        .validate()
        .map_err(|e| SimError::BadScenario(e.to_string()))?;

    let mut taps = TapState::neutral(model.regulators.len());
    let mut states = initial_inverter_states(&model, &curve);
    let use_inverters = scenario.case != CaseId::LocalLegacyOnly;
    let supervisory = scenario.case == CaseId::Supervisory;
    let alpha = if scenario.case == CaseId::LocalWithFixedCurves {
        scenario.case2_alpha.unwrap_or(scenario.inverter_alpha)
    } else {
        scenario.inverter_alpha
    };

    let mut report = MetricsReport {
        condition: scenario.name.clone(),
        case: scenario.case,
        n_ov: 0,
        n_uv: 0,
        loss_kwh: 0.0,
        n_ltc: 0,
        n_vr: 0,
        v_max: f64::MIN,
        v_min: f64::MAX,
        energy_source_kwh: 0.0,
        energy_gen_kwh: 0.0,
        energy_load_kwh: 0.0,
        messages: 0,
        bytes: 0,
        infeasible_intervals: 0,
        series: SampleSeries::default(),
        dispatches: Vec::new(),
        vvo_wall_ms: Vec::new(),
        vvo_tap_evals: Vec::new(),
    };

    let dispatch_every = (scenario.dispatch_period_s / scenario.step_s).round() as usize;
    let sample_every = (scenario.violation_sample_s / scenario.step_s).round().max(1.0) as usize;
    let hours_per_step = scenario.step_s / 3600.0;

    // steady-state initialization at the first profile point: devices start
    // settled instead of mid-transient, nothing is counted
    if !profile.is_empty() {
        warm_start(
            scenario,
            &model,
            &index,
            &profile,
            &mut taps,
            &mut states,
            use_inverters,
            supervisory,
            alpha,
        )?;
    }

    let mut pending: Option<PendingDispatch> = None;
    let mut prev_sol: Option<crate::powerflow::PhasorSolution> = None;

    for step in 0..profile.len() {
        let t_s = profile.time_s(step);
        let mut inj = InjectionSet::snapshot(&model, &index, profile.load_mult[step], profile.pv_mult[step]);
        if use_inverters {
            apply_fleet_q(&model, &index, &mut inj, &states);
        }

        // supervisory dispatch on period boundaries
        if supervisory && step % dispatch_every == 0 {
            // close out the previous interval against the last solved state
            if let (Some(p), Some(sol)) = (pending.take(), prev_sol.as_ref()) {
                finish_interval(&mut report, &model, &index, p, &states, sol);
            }
            let t0 = std::time::Instant::now();
            let result = run_vvo(&model, &index, &inj, &taps, &scenario.optimizer)
                .map_err(|err| SimError::Vvo { t_s, err })?;
            report.vvo_wall_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            report.vvo_tap_evals.push(result.tap_evaluations);
            if !result.feasible {
                report.infeasible_intervals += 1;
            }
            let plan = make_plan(
                &model,
                &index,
                &result,
                &taps,
                &states,
                scenario.dispatch_threshold_frac,
                t_s,
            );
            let stats = message_accounting(&plan);
            report.messages += stats.messages as u64;
            report.bytes += stats.bytes as u64;
            let outcome = apply_plan(&model, &plan, &mut taps, &mut states);
            for (ri, ops) in outcome.tap_ops.iter().enumerate() {
                match model.regulators[ri].mode {
                    RegulatorMode::Ganged => report.n_ltc += *ops as u64,
                    RegulatorMode::PerPhase => report.n_vr += *ops as u64,
                }
            }
            let skipped: Vec<bool> = index
                .controls
                .iter()
                .map(|c| {
                    plan.skipped
                        .iter()
                        .any(|&(site, ph, _)| site == c.site && ph == c.phase)
                })
                .collect();
            // settle a probe fleet at this snapshot: the equilibrium the
            // shifted curves pin under unchanged load and PV
            let mut probe = states.clone();
            let ordinal = smart_ordinal(&model);
            let (q_settled, v_settled) = match crate::dispatch::settle_inverters(
                &model,
                &index,
                &inj,
                &taps,
                &mut probe,
                alpha,
                100,
                1e-3 * model.s_base_1ph_kva(),
                &scenario.optimizer.solve,
            ) {
                Ok((settled_sol, _)) => (
                    index
                        .controls
                        .iter()
                        .map(|c| probe[ordinal[c.site].unwrap()].q_kvar[c.phase.index()])
                        .collect(),
                    index.controls.iter().map(|c| settled_sol.vm[c.node]).collect(),
                ),
                Err(_) => (result.q_kvar.clone(), result.v_g.clone()),
            };
            pending = Some(PendingDispatch {
                t_s,
                q_cmd: result.q_kvar.clone(),
                v_cmd: result.v_g.clone(),
                q_settled,
                v_settled,
                skipped,
                clean: true,
            });
        }

        let sol = solve(&model, &index, &inj, &taps, &scenario.optimizer.solve)
            .map_err(|err| SimError::Solve { t_s, err })?;

        // energy bookkeeping every step
        let loss_kw = total_loss(&model, &index, &taps, &sol);
        report.loss_kwh += loss_kw * hours_per_step;
        let gen_kw: f64 = inj.p_gen_kw.iter().sum();
        report.energy_gen_kwh += gen_kw * hours_per_step;
        // load power follows from balance: source + gen - loss
        let (source_kw, _, load_kw, _) =
            crate::powerflow::power_balance(&model, &index, &inj, &taps, &sol);
        report.energy_source_kwh += source_kw * hours_per_step;
        report.energy_load_kwh += load_kw * hours_per_step;

        // sampled violation counting and voltage envelope
        if step % sample_every == 0 {
            let rep = check_limits(&sol, 0.95, 1.05);
            if std::env::var("SIM_DEBUG").is_ok() && !rep.is_empty() {
                let worst = rep
                    .under
                    .iter()
                    .chain(rep.over.iter())
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                let (bus, ph) = index.nodes[worst.0];
                eprintln!(
                    "t={:.0}s ({}h): {} violations, worst {}{} = {:.4}",
                    t_s,
                    (t_s / 3600.0) as u32,
                    rep.count(),
                    model.buses[bus].id,
                    ph,
                    worst.1
                );
            }
            report.n_uv += rep.under.len() as u64;
            report.n_ov += rep.over.len() as u64;
            if !rep.is_empty() {
                if let Some(p) = pending.as_mut() {
                    p.clean = false;
                }
            }
            let vmin = sol.vm.iter().cloned().fold(f64::MAX, f64::min);
            let vmax = sol.vm.iter().cloned().fold(f64::MIN, f64::max);
            report.v_min = report.v_min.min(vmin);
            report.v_max = report.v_max.max(vmax);
            report.series.t_s.push(t_s);
            report.series.loss_kw.push(loss_kw);
            report.series.v_min.push(vmin);
            report.series.v_max.push(vmax);
            report
                .series
                .taps
                .push(taps.regs.iter().map(|r| r.taps).collect());
            report
                .series
                .q_kvar
                .push(index.controls.iter().map(|c| inj.q_gen_kvar[c.node]).collect());
            report
                .series
                .v_ctrl
                .push(index.controls.iter().map(|c| sol.vm[c.node]).collect());
        }

        // local control updates, one-step-delayed feedback
        if !supervisory {
            for (ri, spec) in model.regulators.iter().enumerate() {
                let down_bus = index.pu_branches[index.reg_pu_branch[ri]].down_bus;
                let mut measured = [None; 3];
                for p in model.buses[down_bus].phases.iter() {
                    let n = index.node(down_bus, p).unwrap();
                    measured[p.index()] = Some(sol.vm[n] * 120.0);
                }
                let (next, ops) =
                    local_regulator_step(spec, &taps.regs[ri], measured, scenario.step_s);
                taps.regs[ri] = next;
                match spec.mode {
                    RegulatorMode::Ganged => report.n_ltc += ops as u64,
                    RegulatorMode::PerPhase => report.n_vr += ops as u64,
                }
            }
        }
        if use_inverters {
            for state in states.iter_mut() {
                let site = &model.inverter_sites[state.site];
                let mut v = [None; 3];
                let mut q_lim = [0.0; 3];
                for p in site.phases.iter() {
                    let n = index.node(site.bus, p).unwrap();
                    v[p.index()] = Some(sol.vm[n]);
                    q_lim[p.index()] = site.q_limit_kvar(inj.p_gen_kw[n]);
                }
                *state = crate::devices::inverter_local_step(state, v, q_lim, alpha);
            }
        }
        prev_sol = Some(sol);
    }

    if let (Some(p), Some(sol)) = (pending.take(), prev_sol.as_ref()) {
        finish_interval(&mut report, &model, &index, p, &states, sol);
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn warm_start(
    scenario: &Scenario,
    model: &FeederModel,
    index: &NetworkIndex,
    profile: &ProfileSet,
    taps: &mut TapState,
    states: &mut [crate::devices::InverterState],
    use_inverters: bool,
    supervisory: bool,
    alpha: f64,
) -> Result<(), SimError> {
    let t_s = 0.0;
    let mut inj = InjectionSet::snapshot(model, index, profile.load_mult[0], profile.pv_mult[0]);
    if supervisory {
        let result = run_vvo(model, index, &inj, taps, &scenario.optimizer)
            .map_err(|err| SimError::Vvo { t_s, err })?;
        let plan = make_plan(
            model,
            index,
            &result,
            taps,
            states,
            scenario.dispatch_threshold_frac,
            t_s,
        );
        apply_plan(model, &plan, taps, states);
        let _ = crate::dispatch::settle_inverters(
            model,
            index,
            &inj,
            taps,
            states,
            scenario.inverter_alpha,
            100,
            1e-3 * model.s_base_1ph_kva(),
            &scenario.optimizer.solve,
        );
        return Ok(());
    }
    // local control: give every device enough settling rounds
    for _ in 0..80 {
        if use_inverters {
            apply_fleet_q(model, index, &mut inj, states);
        }
        let sol = solve(model, index, &inj, taps, &scenario.optimizer.solve)
            .map_err(|err| SimError::Solve { t_s, err })?;
        let mut moved = 0u32;
        for (ri, spec) in model.regulators.iter().enumerate() {
            let down_bus = index.pu_branches[index.reg_pu_branch[ri]].down_bus;
            let mut measured = [None; 3];
            for p in model.buses[down_bus].phases.iter() {
                let n = index.node(down_bus, p).unwrap();
                measured[p.index()] = Some(sol.vm[n] * 120.0);
            }
            // feed the timer a full delay so each round can act once
            let (next, ops) =
                local_regulator_step(spec, &taps.regs[ri], measured, spec.time_delay_s);
            taps.regs[ri] = next;
            moved += ops;
        }
        let mut q_moved: f64 = 0.0;
        if use_inverters {
            for state in states.iter_mut() {
                let site = &model.inverter_sites[state.site];
                let mut v = [None; 3];
                let mut q_lim = [0.0; 3];
                for p in site.phases.iter() {
                    let n = index.node(site.bus, p).unwrap();
                    v[p.index()] = Some(sol.vm[n]);
                    q_lim[p.index()] = site.q_limit_kvar(inj.p_gen_kw[n]);
                }
                let next = crate::devices::inverter_local_step(state, v, q_lim, alpha);
                for i in 0..3 {
                    q_moved = q_moved.max((next.q_kvar[i] - state.q_kvar[i]).abs());
                }
                *state = next;
            }
        }
        if moved == 0 && q_moved < 1e-3 * model.s_base_1ph_kva() {
            break;
        }
    }
    Ok(())
}

fn finish_interval(
    report: &mut MetricsReport,
    model: &FeederModel,
    index: &NetworkIndex,
    p: PendingDispatch,
    states: &[crate::devices::InverterState],
    _sol: &crate::powerflow::PhasorSolution,
) {
    let ordinal = smart_ordinal(model);
    for (j, ctrl) in index.controls.iter().enumerate() {
        let ord = ordinal[ctrl.site].expect("control sites are smart");
        let q_lim = states[ord].curves[ctrl.phase.index()]
            .as_ref()
            .map(|c| c.q_lim_kvar)
            .unwrap_or(1.0);
        report.dispatches.push(DispatchRecord {
            t_s: p.t_s,
            site: ctrl.site,
            phase: ctrl.phase,
            q_cmd_kvar: p.q_cmd[j],
            v_cmd_pu: p.v_cmd[j],
            q_settled_kvar: p.q_settled[j],
            v_settled_pu: p.v_settled[j],
            q_lim_kvar: q_lim,
            skipped: p.skipped[j],
            interval_clean: p.clean,
        });
    }
}
