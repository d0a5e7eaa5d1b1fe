//! Two-stage supervisory Volt/VAR optimization.
//!
//! Stage 1 restores voltage feasibility: projected gradient descent on the
//! weighted flatness objective `sum_i w_i (v_i - v_ref)^2` over smart
//! inverter Vars (weights are 1 only for out-of-band nodes and are
//! recomputed every iterate), followed, if violations or inverter limits
//! persist, by a pruned discrete search over LTC/VR taps. Stage 2 then
//! descends the series-loss objective over the same Vars while step
//! rejection keeps every iterate inside the voltage band.
//!
//! The tap search enumerates a small window of tap deltas for the most
//! upstream device and, for each, direction-restricted windows for the
//! downstream devices per phase (up taps only under residual undervoltage,
//! down taps only under overvoltage). Feasible candidates are ranked by the
//! voltage-variance criterion.

use std::fmt;

use crate::devices::{RegulatorMode, TapState};
use crate::feeder::{FeederModel, NetworkIndex};
use crate::powerflow::{
    check_limits, loss_partials, loss_quadratic_form, perturbation_scan, solve, FdMode,
    InjectionSet, PhasorSolution, SolveError, SolveOptions,
};

#[derive(Debug)]
pub enum VvoError {
    Solve(SolveError),
    Config(String),
    InfeasibleEntry(String),
}

impl fmt::Display for VvoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VvoError::Solve(e) => write!(f, "power flow failed: {e}"),
            VvoError::Config(m) => write!(f, "bad optimizer config: {m}"),
            VvoError::InfeasibleEntry(m) => write!(f, "infeasible entry point: {m}"),
        }
    }
}

impl std::error::Error for VvoError {}

impl From<SolveError> for VvoError {
    fn from(e: SolveError) -> Self {
        VvoError::Solve(e)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub v_min: f64,
    pub v_max: f64,
    pub v_ref: f64,
    pub max_iters: usize,
    /// Stop when the relative objective improvement falls below this.
    pub obj_tol: f64,
    pub step_init: f64,
    pub max_halvings: u32,
    /// Tap deltas searched around the current position, zero included.
    pub tap_window: Vec<i32>,
    /// Var perturbation for sensitivity columns, p.u. on the system base.
    pub sens_h_pu: f64,
    pub sens_central: bool,
    pub solve: SolveOptions,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            v_min: 0.95,
            v_max: 1.05,
            v_ref: 1.0,
            max_iters: 30,
            obj_tol: 1e-4,
            step_init: 1.0,
            max_halvings: 30,
            tap_window: vec![0, 1, -1, 2, -2, 3, -3],
            sens_h_pu: 1e-4,
            sens_central: true,
            solve: SolveOptions::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), VvoError> {
        if !(self.v_min < self.v_ref && self.v_ref < self.v_max) {
            return Err(VvoError::Config(format!(
                "require v_min < v_ref < v_max, got {} {} {}",
                self.v_min, self.v_ref, self.v_max
            )));
        }
        if !self.tap_window.contains(&0) {
            return Err(VvoError::Config("tap window must include 0".into()));
        }
        for &d in &self.tap_window {
            if !self.tap_window.contains(&-d) {
                return Err(VvoError::Config("tap window must be symmetric".into()));
            }
        }
        Ok(())
    }

    fn fd_mode(&self) -> FdMode {
        if self.sens_central {
            FdMode::Central
        } else {
            FdMode::OneSided
        }
    }
}

/// Voltage variance `sum_i (v_i - v_ref)^2` over all phase-nodes, p.u.^2.
pub fn voltage_variance(solution: &PhasorSolution, v_ref: f64) -> f64 {
    solution.vm.iter().map(|&v| (v - v_ref) * (v - v_ref)).sum()
}

/// Cap on the adaptive gradient step (p.u. Var per unit gradient).
const MAX_STEP: f64 = 1e6;

// ---------------------------------------------------------------------------
// Gradient stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StageResult {
    /// Dispatched Var per control, kvar.
    pub q_kvar: Vec<f64>,
    pub solution: PhasorSolution,
    /// Objective value after entry and after each accepted step.
    pub trace: Vec<f64>,
    /// A control finished pinned at a Var limit with its gradient still
    /// pointing outward.
    pub limits_hit: bool,
}

fn flatness_objective(sol: &PhasorSolution, cfg: &OptimizerConfig) -> f64 {
    sol.vm
        .iter()
        .map(|&v| {
            if v < cfg.v_min || v > cfg.v_max {
                (v - cfg.v_ref) * (v - cfg.v_ref)
            } else {
                0.0
            }
        })
        .sum()
}

fn clamp_box(q: &[f64], limits: &[(f64, f64)]) -> Vec<f64> {
    q.iter()
        .zip(limits)
        .map(|(&x, &(lo, hi))| x.clamp(lo, hi))
        .collect()
}

/// Stage 1, inverter phase: flatten out-of-band voltages with smart-inverter
/// Vars under projected gradient descent. Returns the entry state untouched
/// when everything is already inside the band.
pub fn stage1_inverter_opt(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    taps: &TapState,
    cfg: &OptimizerConfig,
) -> Result<StageResult, VvoError> {
    cfg.validate()?;
    let s_base = model.s_base_1ph_kva();
    let limits_kvar = inj.control_q_limits_kvar(model, index);
    let limits: Vec<(f64, f64)> = limits_kvar
        .iter()
        .map(|&(lo, hi)| (lo / s_base, hi / s_base))
        .collect();

    let mut work = inj.clone();
    let mut q: Vec<f64> = work
        .control_q_kvar(index)
        .iter()
        .map(|&k| k / s_base)
        .collect();
    let mut sol = solve(model, index, &work, taps, &cfg.solve)?;
    let mut obj = flatness_objective(&sol, cfg);
    let entry_obj = obj;
    let mut trace = vec![obj];
    let mut last_grad: Option<Vec<f64>> = None;
    let mut step_scale = cfg.step_init;

    for _ in 0..cfg.max_iters {
        let weights: Vec<f64> = sol
            .vm
            .iter()
            .map(|&v| {
                if v < cfg.v_min || v > cfg.v_max {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            break;
        }
        if q.is_empty() {
            break;
        }
        let scan = perturbation_scan(
            model,
            index,
            &work,
            taps,
            &sol,
            &cfg.solve,
            cfg.sens_h_pu,
            cfg.fd_mode(),
        )?;
        let mut grad = vec![0.0; q.len()];
        for (n, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let coeff = 2.0 * (sol.vm[n] - cfg.v_ref);
            for (j, g) in grad.iter_mut().enumerate() {
                *g += coeff * scan.dv_dq[n][j];
            }
        }
        last_grad = Some(grad.clone());

        let mut accepted = false;
        let mut step = step_scale;
        let mut halved = false;
        for _ in 0..=cfg.max_halvings {
            let q_trial: Vec<f64> = clamp_box(
                &q.iter()
                    .zip(&grad)
                    .map(|(&x, &g)| x - step * g)
                    .collect::<Vec<_>>(),
                &limits,
            );
            if q_trial == q {
                break; // projection pins every coordinate
            }
            let mut trial = work.clone();
            let q_trial_kvar: Vec<f64> = q_trial.iter().map(|&x| x * s_base).collect();
            trial.set_control_q_kvar(index, &q_trial_kvar);
            match solve(model, index, &trial, taps, &cfg.solve) {
                Ok(trial_sol) => {
                    let trial_obj = flatness_objective(&trial_sol, cfg);
                    if trial_obj < obj {
                        let improvement = obj - trial_obj;
                        q = q_trial;
                        work = trial;
                        sol = trial_sol;
                        obj = trial_obj;
                        trace.push(obj);
                        accepted = true;
                        // grow the scale while full steps keep winning
                        step_scale = if halved { step } else { (step * 2.0).min(MAX_STEP) };
                        if improvement < cfg.obj_tol * entry_obj.max(f64::MIN_POSITIVE) {
                            return Ok(finish_stage(
                                q, s_base, sol, trace, &limits, last_grad, true,
                            ));
                        }
                        break;
                    }
                }
                Err(_) => {} // divergence during a trial: halve and retry
            }
            step *= 0.5;
            halved = true;
        }
        if !accepted {
            break;
        }
    }
    Ok(finish_stage(q, s_base, sol, trace, &limits, last_grad, true))
}

fn finish_stage(
    q: Vec<f64>,
    s_base: f64,
    solution: PhasorSolution,
    trace: Vec<f64>,
    limits: &[(f64, f64)],
    last_grad: Option<Vec<f64>>,
    descent_min: bool,
) -> StageResult {
    let limits_hit = match &last_grad {
        Some(grad) => q.iter().zip(limits).zip(grad).any(|((&x, &(lo, hi)), &g)| {
            let outward = if descent_min {
                (x >= hi && g < 0.0) || (x <= lo && g > 0.0)
            } else {
                false
            };
            outward
        }),
        None => false,
    };
    StageResult {
        q_kvar: q.iter().map(|&x| x * s_base).collect(),
        solution,
        trace,
        limits_hit,
    }
}

/// Stage 2: minimize series loss over inverter Vars, holding the voltage
/// band by rejecting any trial step that leaves it.
pub fn stage2_loss_opt(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    taps: &TapState,
    cfg: &OptimizerConfig,
) -> Result<StageResult, VvoError> {
    cfg.validate()?;
    let s_base = model.s_base_1ph_kva();
    let limits_kvar = inj.control_q_limits_kvar(model, index);
    let limits: Vec<(f64, f64)> = limits_kvar
        .iter()
        .map(|&(lo, hi)| (lo / s_base, hi / s_base))
        .collect();
    let y = crate::feeder::build_admittance(model, index, taps)
        .map_err(|e| VvoError::Config(e.to_string()))?;

    let mut work = inj.clone();
    let mut q: Vec<f64> = work
        .control_q_kvar(index)
        .iter()
        .map(|&k| k / s_base)
        .collect();
    let mut sol = solve(model, index, &work, taps, &cfg.solve)?;
    if !check_limits(&sol, cfg.v_min, cfg.v_max).is_empty() {
        return Err(VvoError::InfeasibleEntry(
            "stage 2 requires a voltage-feasible start".into(),
        ));
    }
    let mut obj = loss_quadratic_form(model, &y, &sol) / s_base; // p.u.
    let entry_obj = obj;
    let mut trace = vec![obj * s_base];
    let mut step_scale = cfg.step_init;

    for _ in 0..cfg.max_iters {
        if q.is_empty() {
            break;
        }
        let scan = perturbation_scan(
            model,
            index,
            &work,
            taps,
            &sol,
            &cfg.solve,
            cfg.sens_h_pu,
            cfg.fd_mode(),
        )?;
        let grad = loss_gradient(&y, &sol, &scan.dv_dq, &scan.dtheta_dq);
        // projected-gradient stationarity
        let moved: f64 = q
            .iter()
            .zip(&grad)
            .zip(&limits)
            .map(|((&x, &g), &(lo, hi))| ((x - g).clamp(lo, hi) - x).abs())
            .fold(0.0, f64::max);
        if moved < 1e-9 {
            break;
        }

        let mut accepted = false;
        let mut step = step_scale;
        let mut halved = false;
        for _ in 0..=cfg.max_halvings {
            let q_trial: Vec<f64> = clamp_box(
                &q.iter()
                    .zip(&grad)
                    .map(|(&x, &g)| x - step * g)
                    .collect::<Vec<_>>(),
                &limits,
            );
            if q_trial == q {
                break;
            }
            let mut trial = work.clone();
            let q_trial_kvar: Vec<f64> = q_trial.iter().map(|&x| x * s_base).collect();
            trial.set_control_q_kvar(index, &q_trial_kvar);
            match solve(model, index, &trial, taps, &cfg.solve) {
                Ok(trial_sol) => {
                    // reject steps that leave the voltage band
                    if check_limits(&trial_sol, cfg.v_min, cfg.v_max).is_empty() {
                        let trial_obj = loss_quadratic_form(model, &y, &trial_sol) / s_base;
                        if trial_obj < obj {
                            let improvement = obj - trial_obj;
                            q = q_trial;
                            work = trial;
                            sol = trial_sol;
                            obj = trial_obj;
                            trace.push(obj * s_base);
                            accepted = true;
                            step_scale = if halved { step } else { (step * 2.0).min(MAX_STEP) };
                            if improvement < cfg.obj_tol * entry_obj.abs().max(f64::MIN_POSITIVE) {
                                return Ok(finish_stage(
                                    q, s_base, sol, trace, &limits, None, false,
                                ));
                            }
                            break;
                        }
                    }
                }
                Err(_) => {}
            }
            step *= 0.5;
            halved = true;
        }
        if !accepted {
            break;
        }
    }
    Ok(finish_stage(q, s_base, sol, trace, &limits, None, false))
}

/// Chain rule for the loss objective: analytic partials of the quadratic
/// form against magnitude and angle, composed with the scan columns.
/// Returns the gradient in p.u. loss per p.u. Var.
pub fn loss_gradient(
    y: &crate::feeder::AdmittanceView,
    sol: &PhasorSolution,
    dv_dq: &[Vec<f64>],
    dtheta_dq: &[Vec<f64>],
) -> Vec<f64> {
    let (d_vm, d_va) = loss_partials(y, sol);
    let m = dv_dq.first().map_or(0, |r| r.len());
    let mut grad = vec![0.0; m];
    for n in 0..sol.vm.len() {
        let (gm, ga) = (d_vm[n], d_va[n]);
        if gm == 0.0 && ga == 0.0 {
            continue;
        }
        for j in 0..m {
            grad[j] += gm * dv_dq[n][j] + ga * dtheta_dq[n][j];
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Pruned tap search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TapCandidate {
    pub taps: TapState,
    pub v_var: f64,
    pub solution: PhasorSolution,
    /// Tap operations away from the entry state.
    pub distance: u32,
}

#[derive(Debug, Clone)]
pub struct TapSearchOutcome {
    /// Zero-violation candidates, best voltage variance first.
    pub candidates: Vec<TapCandidate>,
    /// Power-flow evaluations performed.
    pub evaluations: usize,
    /// Smallest worst-violation seen, for diagnostics when no candidate.
    pub closest_violation_pu: f64,
    /// When nothing clears the band: the evaluated state that came closest
    /// (progressive relief across dispatch intervals).
    pub best_effort: Option<TapCandidate>,
}

/// Search tap settings that clear the remaining violations, inverter Vars
/// held fixed at the stage-1 result.
pub fn tap_search(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    entry_taps: &TapState,
    cfg: &OptimizerConfig,
) -> Result<TapSearchOutcome, VvoError> {
    cfg.validate()?;
    struct Search<'a> {
        model: &'a FeederModel,
        index: &'a NetworkIndex,
        inj: &'a InjectionSet,
        entry_taps: &'a TapState,
        cfg: &'a OptimizerConfig,
        evaluations: usize,
        seen: Vec<Vec<i32>>,
        candidates: Vec<TapCandidate>,
        closest: f64,
        best_effort: Option<(f64, TapCandidate)>,
    }

    impl Search<'_> {
        fn try_state(&mut self, taps: &TapState) -> Result<Option<PhasorSolution>, VvoError> {
            let key: Vec<i32> = taps.regs.iter().flat_map(|r| r.taps).collect();
            if self.seen.contains(&key) {
                return Ok(None);
            }
            self.seen.push(key);
            self.evaluations += 1;
            let sol = match solve(self.model, self.index, self.inj, taps, &self.cfg.solve) {
                Ok(s) => s,
                Err(_) => return Ok(None), // divergent candidate: skip
            };
            let report = check_limits(&sol, self.cfg.v_min, self.cfg.v_max);
            let worst = report.worst_pu(self.cfg.v_min, self.cfg.v_max);
            self.closest = self.closest.min(worst);
            let candidate = TapCandidate {
                taps: taps.clone(),
                v_var: voltage_variance(&sol, self.cfg.v_ref),
                distance: taps.distance(self.entry_taps, &self.model.regulators),
                solution: sol.clone(),
            };
            if report.is_empty() {
                self.candidates.push(candidate);
            } else {
                let better = match &self.best_effort {
                    None => true,
                    Some((w, b)) => {
                        worst < *w - 1e-12
                            || (worst < *w + 1e-12 && candidate.distance < b.distance)
                    }
                };
                if better {
                    self.best_effort = Some((worst, candidate));
                }
            }
            Ok(Some(sol))
        }
    }

    let mut search = Search {
        model,
        index,
        inj,
        entry_taps,
        cfg,
        evaluations: 0,
        seen: Vec::new(),
        candidates: Vec::new(),
        closest: f64::INFINITY,
        best_effort: None,
    };

    // entry state
    let entry_sol = search
        .try_state(entry_taps)?
        .ok_or_else(|| VvoError::InfeasibleEntry("entry power flow diverged".into()))?;
    let entry_report = check_limits(&entry_sol, cfg.v_min, cfg.v_max);
    if entry_report.is_empty() {
        return Ok(TapSearchOutcome {
            candidates: rank(search.candidates),
            evaluations: search.evaluations,
            closest_violation_pu: 0.0,
            best_effort: None,
        });
    }
    if model.regulators.is_empty() {
        return Ok(TapSearchOutcome {
            candidates: Vec::new(),
            evaluations: search.evaluations,
            closest_violation_pu: search.closest,
            best_effort: search.best_effort.map(|(_, c)| c),
        });
    }

    let lead = index.regs_by_depth[0];
    let followers: Vec<usize> = index.regs_by_depth[1..].to_vec();

    // lead-device candidate states: zero plus direction-restricted deltas
    let lead_states = unit_states(model, index, lead, entry_taps, &entry_report, cfg);
    for lead_taps in lead_states {
        let sol = match search.try_state(&lead_taps)? {
            Some(s) => s,
            None => continue,
        };
        if followers.is_empty() {
            continue;
        }
        let residual = check_limits(&sol, cfg.v_min, cfg.v_max);
        if residual.is_empty() {
            continue; // already captured as a candidate
        }
        // per-follower, per-phase windows in the violation-implied direction
        let mut axes: Vec<(usize, usize, Vec<i32>)> = Vec::new(); // (reg, phase slot, deltas)
        for &ri in &followers {
            let dirs = phase_directions(model, index, ri, &residual, cfg);
            for (slot, deltas) in dirs {
                if deltas.len() > 1 {
                    axes.push((ri, slot, deltas));
                }
            }
        }
        if axes.is_empty() {
            continue;
        }
        let mut combo = vec![0usize; axes.len()];
        loop {
            let mut taps = lead_taps.clone();
            for (ai, &(ri, slot, ref deltas)) in axes.iter().enumerate() {
                let spec = &model.regulators[ri];
                let d = deltas[combo[ai]];
                match spec.mode {
                    RegulatorMode::Ganged => {
                        let t = spec.clamp_tap(taps.regs[ri].taps[0] + d);
                        taps.regs[ri].taps = [t, t, t];
                    }
                    RegulatorMode::PerPhase => {
                        taps.regs[ri].taps[slot] = spec.clamp_tap(taps.regs[ri].taps[slot] + d);
                    }
                }
            }
            search.try_state(&taps)?;
            // advance the odometer
            let mut ai = 0;
            loop {
                if ai == axes.len() {
                    break;
                }
                combo[ai] += 1;
                if combo[ai] < axes[ai].2.len() {
                    break;
                }
                combo[ai] = 0;
                ai += 1;
            }
            if ai == axes.len() {
                break;
            }
        }
    }

    Ok(TapSearchOutcome {
        candidates: rank(search.candidates),
        evaluations: search.evaluations,
        closest_violation_pu: search.closest,
        best_effort: search.best_effort.map(|(_, c)| c),
    })
}

/// Candidate tap states for one device: current position plus the
/// direction-allowed deltas from the window applied to each controlled unit.
fn unit_states(
    model: &FeederModel,
    index: &NetworkIndex,
    ri: usize,
    entry: &TapState,
    report: &crate::powerflow::ViolationReport,
    cfg: &OptimizerConfig,
) -> Vec<TapState> {
    let spec = &model.regulators[ri];
    let dirs = phase_directions(model, index, ri, report, cfg);
    match spec.mode {
        RegulatorMode::Ganged => {
            // a gang moves on violations anywhere downstream on any phase
            let mut deltas: Vec<i32> = vec![0];
            for (_, d) in &dirs {
                for &x in d {
                    if !deltas.contains(&x) {
                        deltas.push(x);
                    }
                }
            }
            deltas
                .into_iter()
                .map(|d| {
                    let mut taps = entry.clone();
                    let t = spec.clamp_tap(taps.regs[ri].taps[0] + d);
                    taps.regs[ri].taps = [t, t, t];
                    taps
                })
                .collect()
        }
        RegulatorMode::PerPhase => {
            let axes: Vec<(usize, Vec<i32>)> = dirs;
            let mut states = vec![entry.clone()];
            for (slot, deltas) in axes {
                let mut next = Vec::new();
                for st in &states {
                    for &d in &deltas {
                        let mut taps = st.clone();
                        taps.regs[ri].taps[slot] = spec.clamp_tap(taps.regs[ri].taps[slot] + d);
                        next.push(taps);
                    }
                }
                states = next;
            }
            states
        }
    }
}

/// Direction-restricted tap deltas per controlled phase slot of a device,
/// from the violations among nodes at or below its regulated bus: only up
/// taps under undervoltage, only down taps under overvoltage, `{0}` when the
/// phase sees nothing.
fn phase_directions(
    model: &FeederModel,
    index: &NetworkIndex,
    ri: usize,
    report: &crate::powerflow::ViolationReport,
    cfg: &OptimizerConfig,
) -> Vec<(usize, Vec<i32>)> {
    let mask = &index.reg_downstream[ri];
    let spec = &model.regulators[ri];
    let pb = &index.pu_branches[index.reg_pu_branch[ri]];
    let mut out = Vec::new();
    for p in &pb.phases {
        let slot = p.index();
        let mut uv = false;
        let mut ov = false;
        for &(n, _) in &report.under {
            let (bus, ph) = index.nodes[n];
            if mask[bus] && (spec.mode == RegulatorMode::Ganged || ph == *p) {
                uv = true;
            }
        }
        for &(n, _) in &report.over {
            let (bus, ph) = index.nodes[n];
            if mask[bus] && (spec.mode == RegulatorMode::Ganged || ph == *p) {
                ov = true;
            }
        }
        let mut deltas = vec![0];
        for &d in &cfg.tap_window {
            if d == 0 {
                continue;
            }
            if (d > 0 && uv) || (d < 0 && ov) {
                deltas.push(d);
            }
        }
        deltas.sort_unstable();
        deltas.dedup();
        out.push((slot, deltas));
        if spec.mode == RegulatorMode::Ganged {
            break; // one unit for the gang
        }
    }
    out
}

fn rank(mut candidates: Vec<TapCandidate>) -> Vec<TapCandidate> {
    candidates.sort_by(|a, b| {
        a.v_var
            .partial_cmp(&b.v_var)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.distance.cmp(&b.distance))
            .then_with(|| tap_magnitude(a).cmp(&tap_magnitude(b)))
    });
    candidates
}

fn tap_magnitude(c: &TapCandidate) -> u32 {
    c.taps
        .regs
        .iter()
        .flat_map(|r| r.taps.iter())
        .map(|t| t.unsigned_abs())
        .sum()
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VvoResult {
    /// Commanded tap state.
    pub taps: TapState,
    /// Dispatched Var per control, kvar.
    pub q_kvar: Vec<f64>,
    /// Voltage at each control in the final solution, p.u.
    pub v_g: Vec<f64>,
    pub stage1_trace: Vec<f64>,
    pub stage2_trace_kw: Vec<f64>,
    pub feasible: bool,
    pub tap_evaluations: usize,
    pub solution: PhasorSolution,
}

/// Run the full two-stage supervisory optimization for one snapshot.
pub fn run_vvo(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    taps: &TapState,
    cfg: &OptimizerConfig,
) -> Result<VvoResult, VvoError> {
    cfg.validate()?;
    let base_sol = solve(model, index, inj, taps, &cfg.solve)?;
    let base_report = check_limits(&base_sol, cfg.v_min, cfg.v_max);
    let entry_worst = base_report.worst_pu(cfg.v_min, cfg.v_max);

    let mut work = inj.clone();
    let mut out_taps = taps.clone();
    let mut stage1_trace = Vec::new();
    let mut feasible = true;
    let mut tap_evaluations = 0;
    let mut current_sol = base_sol.clone();

    if !base_report.is_empty() {
        let s1 = stage1_inverter_opt(model, index, &work, taps, cfg)?;
        stage1_trace = s1.trace.clone();
        let s1_report = check_limits(&s1.solution, cfg.v_min, cfg.v_max);
        // never worsen the entry point
        if s1_report.worst_pu(cfg.v_min, cfg.v_max) <= entry_worst {
            work.set_control_q_kvar(index, &s1.q_kvar);
            current_sol = s1.solution.clone();
        }
        let report_now = check_limits(&current_sol, cfg.v_min, cfg.v_max);

        if !report_now.is_empty() || s1.limits_hit {
            let search = tap_search(model, index, &work, taps, cfg)?;
            tap_evaluations = search.evaluations;
            match search.candidates.into_iter().next() {
                Some(best) => {
                    out_taps = best.taps;
                    current_sol = best.solution;
                }
                None => {
                    feasible = report_now.is_empty();
                    // nothing clears the band: move toward the closest state
                    // so successive intervals make progress
                    if let Some(best) = search.best_effort {
                        let best_worst = check_limits(&best.solution, cfg.v_min, cfg.v_max)
                            .worst_pu(cfg.v_min, cfg.v_max);
                        if best_worst <= entry_worst {
                            out_taps = best.taps;
                            current_sol = best.solution;
                        }
                    }
                }
            }
        }
    }

    let mut stage2_trace_kw = Vec::new();
    if feasible && check_limits(&current_sol, cfg.v_min, cfg.v_max).is_empty() {
        let s2 = stage2_loss_opt(model, index, &work, &out_taps, cfg)?;
        stage2_trace_kw = s2.trace.clone();
        work.set_control_q_kvar(index, &s2.q_kvar);
        current_sol = s2.solution;
    } else {
        feasible = false;
    }

    let q_kvar = work.control_q_kvar(index);
    let v_g = index
        .controls
        .iter()
        .map(|c| current_sol.vm[c.node])
        .collect();
    Ok(VvoResult {
        taps: out_taps,
        q_kvar,
        v_g,
        stage1_trace,
        stage2_trace_kw,
        feasible,
        tap_evaluations,
        solution: current_sol,
    })
}
