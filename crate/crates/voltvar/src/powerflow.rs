//! Unbalanced three-phase power flow by backward-forward sweep, with the
//! loss, limit-check, and voltage-sensitivity operations the optimizers
//! build on.
//!
//! Convergence is measured as the maximum nodal complex-power mismatch of
//! the iterate against the full admittance model, so a converged solution
//! satisfies the nodal power-flow equations to the solver tolerance by
//! construction.

use std::fmt;

use num_complex::Complex64;

use crate::devices::TapState;
use crate::feeder::{
    build_admittance, AdmittanceView, EffectiveLoad, FeederModel, LoadConn, LoadModel,
    NetworkIndex,
};
use crate::phase::Phase;

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug)]
pub enum SolveError {
    /// Sweeps exhausted; carries the last mismatch for diagnostics.
    NonConvergence { sweeps: usize, mismatch_pu: f64 },
    /// Voltage collapsed to zero or NaN during iteration.
    Diverged { sweep: usize },
    Model(String),
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::NonConvergence { sweeps, mismatch_pu } => write!(
                f,
                "no convergence after {sweeps} sweeps (mismatch {mismatch_pu:.3e} p.u.)"
            ),
            SolveError::Diverged { sweep } => write!(f, "diverged at sweep {sweep}"),
            SolveError::Model(m) => write!(f, "model error: {m}"),
        }
    }
}

impl std::error::Error for SolveError {}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Convergence tolerance on nodal complex-power mismatch, p.u.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Record per-sweep mismatch into the solution (debug trace).
    pub record_trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-6,
            max_sweeps: 100,
            record_trace: false,
        }
    }
}

/// Injections for one instant: PV real output and dispatched inverter Vars
/// per phase-node, plus the scaled load records (kept as records so that
/// constant-I / constant-Z behavior is evaluated at the solved voltage).
#[derive(Debug, Clone)]
pub struct InjectionSet {
    pub p_gen_kw: Vec<f64>,
    pub q_gen_kvar: Vec<f64>,
    pub loads: Vec<EffectiveLoad>,
}

impl InjectionSet {
    /// Zero-generation, zero-load set (toy scenarios and tests).
    pub fn empty(index: &NetworkIndex) -> InjectionSet {
        InjectionSet {
            p_gen_kw: vec![0.0; index.n_nodes()],
            q_gen_kvar: vec![0.0; index.n_nodes()],
            loads: Vec::new(),
        }
    }

    /// Build from profile multipliers: loads scaled by `load_mult`, PV sites
    /// (smart or not) producing `pv_mult` of rating split across served
    /// phases; inverter Vars start at zero.
    pub fn snapshot(
        model: &FeederModel,
        index: &NetworkIndex,
        load_mult: f64,
        pv_mult: f64,
    ) -> InjectionSet {
        let mut inj = InjectionSet::empty(index);
        inj.loads = index
            .eff_loads
            .iter()
            .map(|l| {
                let mut scaled = l.clone();
                for i in 0..3 {
                    scaled.p_kw[i] *= load_mult;
                    scaled.q_kvar[i] *= load_mult;
                }
                scaled
            })
            .collect();
        for site in &model.inverter_sites {
            let p_phase = site.p_phase_rating_kw() * pv_mult;
            for p in site.phases.iter() {
                let n = index.node(site.bus, p).unwrap();
                inj.p_gen_kw[n] += p_phase;
            }
        }
        inj
    }

    /// Dispatched Var per control, in kvar, following the control layout.
    pub fn control_q_kvar(&self, index: &NetworkIndex) -> Vec<f64> {
        index
            .controls
            .iter()
            .map(|c| self.q_gen_kvar[c.node])
            .collect()
    }

    pub fn set_control_q_kvar(&mut self, index: &NetworkIndex, q: &[f64]) {
        assert_eq!(q.len(), index.controls.len());
        for (c, &qk) in index.controls.iter().zip(q) {
            self.q_gen_kvar[c.node] = qk;
        }
    }

    /// Instantaneous per-control Var box `(lo, hi)` in kvar given current
    /// real output at each control's node.
    pub fn control_q_limits_kvar(
        &self,
        model: &FeederModel,
        index: &NetworkIndex,
    ) -> Vec<(f64, f64)> {
        index
            .controls
            .iter()
            .map(|c| {
                let site = &model.inverter_sites[c.site];
                let hi = site.q_limit_kvar(self.p_gen_kw[c.node]);
                (-hi, hi)
            })
            .collect()
    }

    pub fn validate(&self, model: &FeederModel, index: &NetworkIndex) -> Result<(), String> {
        if self.p_gen_kw.len() != index.n_nodes() || self.q_gen_kvar.len() != index.n_nodes() {
            return Err("injection arrays do not match node count".into());
        }
        let limits = self.control_q_limits_kvar(model, index);
        for (c, (lo, hi)) in index.controls.iter().zip(limits) {
            let q = self.q_gen_kvar[c.node];
            if q < lo - 1e-9 || q > hi + 1e-9 {
                return Err(format!(
                    "control at node {} has q = {q} kvar outside [{lo}, {hi}]",
                    c.node
                ));
            }
        }
        Ok(())
    }
}

/// Converged per-node voltage phasors in per-unit.
#[derive(Debug, Clone)]
pub struct PhasorSolution {
    /// Voltage magnitude, p.u.
    pub vm: Vec<f64>,
    /// Voltage angle, radians.
    pub va: Vec<f64>,
    pub iterations: usize,
    /// Final maximum nodal complex-power mismatch, p.u.
    pub max_mismatch_pu: f64,
    /// Per-sweep mismatch when tracing was requested.
    pub sweep_trace: Vec<f64>,
}

impl PhasorSolution {
    pub fn phasor(&self, n: usize) -> Complex64 {
        Complex64::from_polar(self.vm[n], self.va[n])
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        (0..self.vm.len()).map(|n| self.phasor(n)).collect()
    }
}

/// Voltage-band violations of a solution (closed interval: values exactly at
/// a bound are compliant).
#[derive(Debug, Clone, Default)]
pub struct ViolationReport {
    pub under: Vec<(usize, f64)>,
    pub over: Vec<(usize, f64)>,
}

impl ViolationReport {
    pub fn count(&self) -> usize {
        self.under.len() + self.over.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Largest distance outside the band, 0 when compliant.
    pub fn worst_pu(&self, v_min: f64, v_max: f64) -> f64 {
        let u = self
            .under
            .iter()
            .map(|(_, v)| v_min - v)
            .fold(0.0, f64::max);
        let o = self.over.iter().map(|(_, v)| v - v_max).fold(0.0, f64::max);
        u.max(o)
    }
}

pub fn check_limits(solution: &PhasorSolution, v_min: f64, v_max: f64) -> ViolationReport {
    let mut report = ViolationReport::default();
    for (n, &v) in solution.vm.iter().enumerate() {
        if v < v_min {
            report.under.push((n, v));
        } else if v > v_max {
            report.over.push((n, v));
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

struct SolveContext<'a> {
    index: &'a NetworkIndex,
    inj: &'a InjectionSet,
    /// Per-branch downstream-side tap ratios.
    ratios: Vec<[f64; 3]>,
    y: AdmittanceView,
    s_base_kva: f64,
}

impl<'a> SolveContext<'a> {
    fn new(
        model: &'a FeederModel,
        index: &'a NetworkIndex,
        inj: &'a InjectionSet,
        taps: &TapState,
    ) -> Result<Self, SolveError> {
        let y = build_admittance(model, index, taps).map_err(|e| SolveError::Model(e.to_string()))?;
        let ratios = index
            .pu_branches
            .iter()
            .map(|pb| index.branch_ratios(model, pb, taps))
            .collect();
        Ok(SolveContext {
            index,
            inj,
            ratios,
            y,
            s_base_kva: model.s_base_1ph_kva(),
        })
    }

    /// Net drawn current per node at voltage `v` (loads minus generation,
    /// excluding shunts which live in the admittance matrix).
    fn draw_currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.index.n_nodes();
        let mut s_net = vec![Complex64::new(0.0, 0.0); n]; // consumption, p.u.
        let mut current = vec![Complex64::new(0.0, 0.0); n];
        for (node, s) in s_net.iter_mut().enumerate() {
            *s -= Complex64::new(
                self.inj.p_gen_kw[node] / self.s_base_kva,
                self.inj.q_gen_kvar[node] / self.s_base_kva,
            );
        }
        for load in &self.inj.loads {
            self.accumulate_load(load, v, &mut s_net, &mut current);
        }
        for (node, s) in s_net.iter().enumerate() {
            if *s != Complex64::new(0.0, 0.0) {
                let vn = v[node];
                if vn.norm() > 1e-9 {
                    current[node] += (s / vn).conj();
                }
            }
        }
        current
    }

    fn accumulate_load(
        &self,
        load: &EffectiveLoad,
        v: &[Complex64],
        s_net: &mut [Complex64],
        current: &mut [Complex64],
    ) {
        for i in 0..3 {
            let s_nom = Complex64::new(
                load.p_kw[i] / self.s_base_kva,
                load.q_kvar[i] / self.s_base_kva,
            );
            if s_nom == Complex64::new(0.0, 0.0) {
                continue;
            }
            match load.conn {
                LoadConn::Wye => {
                    let node = self.index.node(load.bus, Phase::from_index(i)).unwrap();
                    let vm = v[node].norm();
                    let s = match load.model {
                        LoadModel::ConstPq => s_nom,
                        LoadModel::ConstI => s_nom * vm,
                        LoadModel::ConstZ => s_nom * vm * vm,
                    };
                    s_net[node] += s;
                }
                LoadConn::Delta => {
                    let n1 = self.index.node(load.bus, Phase::from_index(i)).unwrap();
                    let n2 = self
                        .index
                        .node(load.bus, Phase::from_index((i + 1) % 3))
                        .unwrap();
                    let v_ll = v[n1] - v[n2];
                    let vr = v_ll.norm() / SQRT3;
                    let s = match load.model {
                        LoadModel::ConstPq => s_nom,
                        LoadModel::ConstI => s_nom * vr,
                        LoadModel::ConstZ => s_nom * vr * vr,
                    };
                    if v_ll.norm() > 1e-9 {
                        let i_pair = (s / v_ll).conj();
                        current[n1] += i_pair;
                        current[n2] -= i_pair;
                    }
                }
            }
        }
    }

    /// Scheduled net injected power per node at voltage `v` (generation minus
    /// load), the left-hand side the admittance model must match.
    fn scheduled_injection(&self, v: &[Complex64]) -> Vec<Complex64> {
        let draws = self.draw_currents(v);
        let mut s = vec![Complex64::new(0.0, 0.0); self.index.n_nodes()];
        for (node, i_draw) in draws.iter().enumerate() {
            s[node] = -(v[node] * i_draw.conj());
        }
        s
    }

    fn mismatch(&self, v: &[Complex64]) -> f64 {
        let i_y = self.y.mul(v);
        let s_spec = self.scheduled_injection(v);
        let mut worst: f64 = 0.0;
        for node in 0..self.index.n_nodes() {
            if self.index.nodes[node].0 == self.index.source_bus {
                continue;
            }
            let s_calc = v[node] * i_y[node].conj();
            worst = worst.max((s_spec[node] - s_calc).norm());
        }
        worst
    }
}

/// Solve the feeder power flow by backward-forward sweep.
pub fn solve(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    taps: &TapState,
    opts: &SolveOptions,
) -> Result<PhasorSolution, SolveError> {
    let ctx = SolveContext::new(model, index, inj, taps)?;
    let n = index.n_nodes();

    let mut v = vec![Complex64::new(0.0, 0.0); n];
    for (node, &(_, phase)) in index.nodes.iter().enumerate() {
        v[node] = Complex64::from_polar(model.v_source_pu, phase.nominal_angle());
    }

    let mut trace = Vec::new();
    let mut mismatch = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        // backward: accumulate subtree currents into each arriving branch
        let node_current = {
            let mut c = ctx.draw_currents(&v);
            // nodal shunt blocks draw y * v
            for (bus, block) in index.bus_shunt_pu.iter().enumerate() {
                for pi in 0..3 {
                    let Some(ni) = index.node(bus, Phase::from_index(pi)) else {
                        continue;
                    };
                    let mut s = Complex64::new(0.0, 0.0);
                    let mut any = false;
                    for pj in 0..3 {
                        if let Some(nj) = index.node(bus, Phase::from_index(pj)) {
                            if block[pi][pj] != Complex64::new(0.0, 0.0) {
                                s += block[pi][pj] * v[nj];
                                any = true;
                            }
                        }
                    }
                    if any {
                        c[ni] += s;
                    }
                }
            }
            c
        };
        // per bus: current arriving from the parent, per phase slot
        let mut arriving = vec![[Complex64::new(0.0, 0.0); 3]; model.buses.len()];
        for &bus in index.bus_order.iter().rev() {
            let mut sum = [Complex64::new(0.0, 0.0); 3];
            for p in model.buses[bus].phases.iter() {
                let node = index.node(bus, p).unwrap();
                sum[p.index()] = node_current[node];
            }
            // children already processed (reverse BFS order)
            for (child, parent) in index.parent_bus.iter().enumerate() {
                if *parent == Some(bus) {
                    let pb_i = index.parent_pu_branch[child].unwrap();
                    let pb = &index.pu_branches[pb_i];
                    let r = &ctx.ratios[pb_i];
                    for p in &pb.phases {
                        let i = p.index();
                        sum[i] += arriving[child][i] * r[i];
                    }
                }
            }
            arriving[bus] = sum;
        }
        // forward: propagate voltage drops from the source
        for &bus in &index.bus_order {
            let Some(pb_i) = index.parent_pu_branch[bus] else {
                continue; // source
            };
            let pb = &index.pu_branches[pb_i];
            let r = &ctx.ratios[pb_i];
            let up = index.parent_bus[bus].unwrap();
            for p in &pb.phases {
                let i = p.index();
                let v_up = v[index.node(up, *p).unwrap()];
                let mut drop = Complex64::new(0.0, 0.0);
                for pj in &pb.phases {
                    let j = pj.index();
                    drop += pb.z_pu[i][j] * arriving[bus][j];
                }
                v[index.node(bus, *p).unwrap()] = v_up * r[i] - drop;
            }
        }

        if v.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
            return Err(SolveError::Diverged { sweep });
        }
        mismatch = ctx.mismatch(&v);
        if opts.record_trace {
            trace.push(mismatch);
        }
        if mismatch <= opts.tol {
            return Ok(PhasorSolution {
                vm: v.iter().map(|x| x.norm()).collect(),
                va: v.iter().map(|x| x.arg()).collect(),
                iterations: sweep,
                max_mismatch_pu: mismatch,
                sweep_trace: trace,
            });
        }
    }
    Err(SolveError::NonConvergence {
        sweeps: opts.max_sweeps,
        mismatch_pu: mismatch,
    })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Total real loss in kW, computed branch-wise as power in minus power out
/// (plus any resistive shunt dissipation).
pub fn total_loss(
    model: &FeederModel,
    index: &NetworkIndex,
    taps: &TapState,
    solution: &PhasorSolution,
) -> f64 {
    let v = solution.phasors();
    let mut loss_pu = 0.0;
    for pb in &index.pu_branches {
        let r = index.branch_ratios(model, pb, taps);
        // downstream-side series current from the voltage difference
        let mut i_dn = [Complex64::new(0.0, 0.0); 3];
        for pi in &pb.phases {
            let i = pi.index();
            let mut acc = Complex64::new(0.0, 0.0);
            for pj in &pb.phases {
                let j = pj.index();
                let v_up = v[index.node(pb.up_bus, *pj).unwrap()];
                let v_dn = v[index.node(pb.down_bus, *pj).unwrap()];
                acc += pb.y_series[i][j] * (v_up * r[j] - v_dn);
            }
            i_dn[i] = acc;
        }
        for pi in &pb.phases {
            let i = pi.index();
            let v_up = v[index.node(pb.up_bus, *pi).unwrap()];
            let v_dn = v[index.node(pb.down_bus, *pi).unwrap()];
            let p_in = (v_up * (i_dn[i] * r[i]).conj()).re;
            let p_out = (v_dn * i_dn[i].conj()).re;
            loss_pu += p_in - p_out;
        }
    }
    for (bus, block) in index.bus_shunt_pu.iter().enumerate() {
        for pi in 0..3 {
            let Some(ni) = index.node(bus, Phase::from_index(pi)) else {
                continue;
            };
            let mut i_sh = Complex64::new(0.0, 0.0);
            for pj in 0..3 {
                if let Some(nj) = index.node(bus, Phase::from_index(pj)) {
                    i_sh += block[pi][pj] * v[nj];
                }
            }
            loss_pu += (v[ni] * i_sh.conj()).re;
        }
    }
    loss_pu * model.s_base_1ph_kva()
}

/// Series loss from the admittance quadratic form
/// `-1/2 sum_{i != j} G_ij (v_i^2 + v_j^2 - 2 v_i v_j cos th_ij)`,
/// the objective the loss-minimization stage descends. Equals the
/// branch-wise loss when shunts carry no conductance. Returns kW.
pub fn loss_quadratic_form(
    model: &FeederModel,
    y: &AdmittanceView,
    solution: &PhasorSolution,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.n {
        for &(j, yij) in y.row(i) {
            if i == j {
                continue;
            }
            let g = yij.re;
            if g == 0.0 {
                continue;
            }
            let (vi, vj) = (solution.vm[i], solution.vm[j]);
            let th = solution.va[i] - solution.va[j];
            acc += g * (vi * vi + vj * vj - 2.0 * vi * vj * th.cos());
        }
    }
    -0.5 * acc * model.s_base_1ph_kva()
}

/// Analytic partials of the quadratic-form loss (p.u.) with respect to
/// voltage magnitude and angle at every node.
pub fn loss_partials(y: &AdmittanceView, solution: &PhasorSolution) -> (Vec<f64>, Vec<f64>) {
    let n = y.n;
    let mut d_vm = vec![0.0; n];
    let mut d_va = vec![0.0; n];
    for a in 0..n {
        let (va_m, va_a) = (solution.vm[a], solution.va[a]);
        for &(j, yaj) in y.row(a) {
            if j == a {
                continue;
            }
            let g = yaj.re;
            if g == 0.0 {
                continue;
            }
            let (vj_m, vj_a) = (solution.vm[j], solution.va[j]);
            let th = va_a - vj_a;
            d_vm[a] += -2.0 * g * (va_m - vj_m * th.cos());
            d_va[a] += -2.0 * g * va_m * vj_m * th.sin();
        }
    }
    (d_vm, d_va)
}

/// Net power balance of a converged solution, all in kW/kvar:
/// `(source_injection, total_generation, total_load, loss)`.
pub fn power_balance(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    taps: &TapState,
    solution: &PhasorSolution,
) -> (f64, f64, f64, f64) {
    let ctx = SolveContext::new(model, index, inj, taps).expect("valid model");
    let v = solution.phasors();
    let i_y = ctx.y.mul(&v);
    let mut source_kw = 0.0;
    for (node, &(bus, _)) in index.nodes.iter().enumerate() {
        if bus == index.source_bus {
            source_kw += (v[node] * i_y[node].conj()).re * ctx.s_base_kva;
        }
    }
    let gen_kw: f64 = inj.p_gen_kw.iter().sum();
    let s_spec = ctx.scheduled_injection(&v);
    let mut load_kw = 0.0;
    for (node, &(bus, _)) in index.nodes.iter().enumerate() {
        if bus != index.source_bus {
            // scheduled = gen - load, so load = gen - scheduled
            load_kw += inj.p_gen_kw[node] - s_spec[node].re * ctx.s_base_kva;
        }
    }
    let loss_kw = total_loss(model, index, taps, solution);
    (source_kw, gen_kw, load_kw, loss_kw)
}

// ---------------------------------------------------------------------------
// Sensitivities
// ---------------------------------------------------------------------------

/// Response of the network to per-control Var perturbations, from repeated
/// solves at the scan's base point. `dv` and `dtheta` are node x control;
/// q is in per-unit on the system base.
#[derive(Debug, Clone)]
pub struct PerturbationScan {
    pub dv_dq: Vec<Vec<f64>>,
    pub dtheta_dq: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub enum FdMode {
    OneSided,
    Central,
}

/// Scan voltage response to each control's Var injection.
///
/// One-sided mode does one extra solve per control; central mode two. The
/// perturbation `h_pu` is applied on the system per-phase base.
pub fn perturbation_scan(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    taps: &TapState,
    base: &PhasorSolution,
    opts: &SolveOptions,
    h_pu: f64,
    mode: FdMode,
) -> Result<PerturbationScan, SolveError> {
    let n = index.n_nodes();
    let m = index.controls.len();
    let h_kvar = h_pu * model.s_base_1ph_kva();
    let mut dv = vec![vec![0.0; m]; n];
    let mut dth = vec![vec![0.0; m]; n];
    for (ci, ctrl) in index.controls.iter().enumerate() {
        let mut plus = inj.clone();
        plus.q_gen_kvar[ctrl.node] += h_kvar;
        let sol_plus = solve(model, index, &plus, taps, opts)?;
        let (ref_vm, ref_va, denom) = match mode {
            FdMode::OneSided => (&base.vm, &base.va, h_pu),
            FdMode::Central => {
                let mut minus = inj.clone();
                minus.q_gen_kvar[ctrl.node] -= h_kvar;
                let sol_minus = solve(model, index, &minus, taps, opts)?;
                for node in 0..n {
                    dv[node][ci] = (sol_plus.vm[node] - sol_minus.vm[node]) / (2.0 * h_pu);
                    dth[node][ci] =
                        wrap_angle(sol_plus.va[node] - sol_minus.va[node]) / (2.0 * h_pu);
                }
                continue;
            }
        };
        for node in 0..n {
            dv[node][ci] = (sol_plus.vm[node] - ref_vm[node]) / denom;
            dth[node][ci] = wrap_angle(sol_plus.va[node] - ref_va[node]) / denom;
        }
    }
    Ok(PerturbationScan {
        dv_dq: dv,
        dtheta_dq: dth,
    })
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a;
    while x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    while x < -std::f64::consts::PI {
        x += 2.0 * std::f64::consts::PI;
    }
    x
}

/// Voltage-magnitude sensitivity matrix d|v|/dq over (phase-node x control),
/// per-unit on the system base. One-sided perturbation re-solves by default.
pub fn voltage_sensitivity(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    taps: &TapState,
    base: &PhasorSolution,
    h_pu: f64,
) -> Result<Vec<Vec<f64>>, SolveError> {
    let scan = perturbation_scan(
        model,
        index,
        inj,
        taps,
        base,
        &SolveOptions::default(),
        h_pu,
        FdMode::OneSided,
    )?;
    Ok(scan.dv_dq)
}
