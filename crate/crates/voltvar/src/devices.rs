//! Tap-changer hardware, local bandwidth controllers, and smart-inverter
//! Volt-Var curves.
//!
//! A [`VoltVarCurve`] is the four-point piecewise-linear characteristic of
//! IEEE 1547: full injection below `V1`, a falling ramp to the deadband
//! `[V2, V3]`, and a ramp down to full absorption above `V4`. Supervisory
//! dispatch translates the whole curve along the voltage axis
//! ([`VoltVarCurve::shift`]) instead of sending raw Var commands.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::phase::Phase;

/// Per-unit tap step: each tap moves the ratio by 0.625%.
pub const TAP_STEP_PU: f64 = 0.00625;
/// Default tap range, 33 positions including zero.
pub const TAP_RANGE: (i32, i32) = (-16, 16);

// ---------------------------------------------------------------------------
// Volt-Var curves
// ---------------------------------------------------------------------------

/// One knee of a Volt-Var curve: voltage offset from the reference in p.u.,
/// Var as a fraction of the inverter limit (+1 = full injection, -1 = full
/// absorption).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub v: f64,
    pub q: f64,
}

/// Four-point piecewise-linear Volt-Var characteristic `q = f(v - v_ref)`.
///
/// Knees are stored relative to `v_ref`, so translating the curve along the
/// voltage axis only moves `v_ref` and preserves every segment slope
/// bit for bit. Invariants: `V1 < V2 <= V3 < V4`, Q fractions fixed at
/// `+1, 0, 0, -1` (non-increasing). `q_lim_kvar` scales the Q axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltVarCurve {
    pub points: [CurvePoint; 4],
    pub v_ref: f64,
    pub q_lim_kvar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CurveError {
    BadShape(String),
    QOutOfRange { q_kvar: f64, q_lim_kvar: f64 },
}

impl fmt::Display for CurveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurveError::BadShape(msg) => write!(f, "invalid volt-var curve: {msg}"),
            CurveError::QOutOfRange { q_kvar, q_lim_kvar } => {
                write!(f, "q = {q_kvar} kvar outside curve limit {q_lim_kvar} kvar")
            }
        }
    }
}

impl std::error::Error for CurveError {}

impl VoltVarCurve {
    /// Curve with the default knees (0.95, 0.98, 1.02, 1.05) around 1.0 p.u.
    pub fn default_with_limit(q_lim_kvar: f64) -> VoltVarCurve {
        VoltVarCurve::from_knees([0.95, 0.98, 1.02, 1.05], 1.0, q_lim_kvar)
    }

    /// Build from absolute knee voltages and a reference point.
    pub fn from_knees(v: [f64; 4], v_ref: f64, q_lim_kvar: f64) -> VoltVarCurve {
        VoltVarCurve {
            points: [
                CurvePoint { v: v[0] - v_ref, q: 1.0 },
                CurvePoint { v: v[1] - v_ref, q: 0.0 },
                CurvePoint { v: v[2] - v_ref, q: 0.0 },
                CurvePoint { v: v[3] - v_ref, q: -1.0 },
            ],
            v_ref,
            q_lim_kvar,
        }
    }

    /// Absolute knee voltages (`v_ref` plus each stored offset).
    pub fn knees(&self) -> [f64; 4] {
        [
            self.v_ref + self.points[0].v,
            self.v_ref + self.points[1].v,
            self.v_ref + self.points[2].v,
            self.v_ref + self.points[3].v,
        ]
    }

    pub fn validate(&self) -> Result<(), CurveError> {
        let [p1, p2, p3, p4] = self.points;
        if !(p1.v < p2.v && p2.v <= p3.v && p3.v < p4.v) {
            return Err(CurveError::BadShape(format!(
                "require V1 < V2 <= V3 < V4, got {} {} {} {}",
                p1.v, p2.v, p3.v, p4.v
            )));
        }
        if p1.q != 1.0 || p2.q != 0.0 || p3.q != 0.0 || p4.q != -1.0 {
            return Err(CurveError::BadShape(
                "Q fractions must be +1, 0, 0, -1".to_string(),
            ));
        }
        if !(self.q_lim_kvar > 0.0) {
            return Err(CurveError::BadShape(format!(
                "q_lim must be positive, got {}",
                self.q_lim_kvar
            )));
        }
        Ok(())
    }

    /// Var output in kvar at terminal voltage `v` p.u. Saturates outside
    /// `[V1, V4]`, zero inside the deadband `[V2, V3]`.
    pub fn eval(&self, v: f64) -> f64 {
        let x = v - self.v_ref;
        let pts = &self.points;
        if x <= pts[0].v {
            return pts[0].q * self.q_lim_kvar;
        }
        if x >= pts[3].v {
            return pts[3].q * self.q_lim_kvar;
        }
        for i in 0..3 {
            let (a, b) = (pts[i], pts[i + 1]);
            if x >= a.v && x <= b.v {
                if b.v == a.v {
                    continue;
                }
                let t = (x - a.v) / (b.v - a.v);
                return (a.q + t * (b.q - a.q)) * self.q_lim_kvar;
            }
        }
        unreachable!("curve segments cover [V1, V4]")
    }

    /// Voltage at which the curve produces `q_kvar`.
    ///
    /// Flat segments are canonicalized: the deadband maps to its midpoint,
    /// the saturated tails map to the adjacent knee (V1 or V4).
    pub fn inverse(&self, q_kvar: f64) -> Result<f64, CurveError> {
        let qf = q_kvar / self.q_lim_kvar;
        if qf.abs() > 1.0 + 1e-9 {
            return Err(CurveError::QOutOfRange {
                q_kvar,
                q_lim_kvar: self.q_lim_kvar,
            });
        }
        let qf = qf.clamp(-1.0, 1.0);
        let [p1, p2, p3, p4] = self.points;
        let x = if qf >= 1.0 {
            p1.v
        } else if qf <= -1.0 {
            p4.v
        } else if qf == 0.0 {
            0.5 * (p2.v + p3.v)
        } else if qf > 0.0 {
            // falling segment V1 -> V2, q from +1 to 0
            p1.v + (p2.v - p1.v) * (1.0 - qf)
        } else {
            // falling segment V3 -> V4, q from 0 to -1
            p3.v + (p4.v - p3.v) * (-qf)
        };
        Ok(self.v_ref + x)
    }

    /// Translate the curve along the voltage axis so that
    /// `shifted.eval(v) == self.eval(v - delta_v)` for every `v`. Only the
    /// reference moves; knee offsets and slopes are untouched.
    pub fn shift(&self, delta_v: f64) -> VoltVarCurve {
        let mut out = self.clone();
        out.v_ref += delta_v;
        out
    }

    /// Segment slopes in kvar per p.u. volt (three segments).
    pub fn slopes(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for i in 0..3 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            s[i] = if b.v == a.v {
                0.0
            } else {
                (b.q - a.q) * self.q_lim_kvar / (b.v - a.v)
            };
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Regulators
// ---------------------------------------------------------------------------

/// Control mode of a tap device: substation LTCs gang all three phases on a
/// single mechanism, line regulators tap each phase independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegulatorMode {
    Ganged,
    PerPhase,
}

/// A tap-changing device (substation LTC or line voltage regulator) and its
/// local bandwidth-controller settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegulatorSpec {
    pub id: String,
    /// Branch this device sits on, as (from, to) bus ids; `to` is regulated.
    pub branch: (String, String),
    pub mode: RegulatorMode,
    #[serde(default = "default_tap_min")]
    pub tap_min: i32,
    #[serde(default = "default_tap_max")]
    pub tap_max: i32,
    #[serde(default = "default_step_pu")]
    pub step_pu: f64,
    /// Local-control set point in volts on a 120 V base.
    pub v_set: f64,
    /// Total bandwidth in volts; the controller acts outside `v_set +/- bw/2`.
    pub bandwidth: f64,
    /// Seconds the voltage must stay out of band before a tap action.
    pub time_delay_s: f64,
    #[serde(default = "default_max_tap")]
    pub max_tap_per_action: i32,
}

fn default_tap_min() -> i32 {
    TAP_RANGE.0
}
fn default_tap_max() -> i32 {
    TAP_RANGE.1
}
fn default_step_pu() -> f64 {
    TAP_STEP_PU
}
fn default_max_tap() -> i32 {
    1
}

impl RegulatorSpec {
    /// Voltage ratio for a tap position: 1 + tap * step.
    pub fn ratio(&self, tap: i32) -> f64 {
        1.0 + tap as f64 * self.step_pu
    }

    pub fn clamp_tap(&self, tap: i32) -> i32 {
        tap.clamp(self.tap_min, self.tap_max)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tap_min >= self.tap_max {
            return Err(format!("{}: empty tap range", self.id));
        }
        if !(self.step_pu > 0.0) {
            return Err(format!("{}: step must be positive", self.id));
        }
        let lo = self.ratio(self.tap_min);
        let hi = self.ratio(self.tap_max);
        if lo < 0.5 || hi > 1.5 {
            return Err(format!("{}: ratio range [{lo}, {hi}] implausible", self.id));
        }
        Ok(())
    }
}

/// Tap positions and local-controller timers for one regulator.
///
/// `taps` is indexed by phase; a ganged device keeps all entries equal and
/// uses slot 0 for its single timer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorTaps {
    pub taps: [i32; 3],
    pub timers: [f64; 3],
    pub saturated: [bool; 3],
}

impl RegulatorTaps {
    pub fn neutral() -> RegulatorTaps {
        RegulatorTaps {
            taps: [0; 3],
            timers: [0.0; 3],
            saturated: [false; 3],
        }
    }

    pub fn at(taps: [i32; 3]) -> RegulatorTaps {
        RegulatorTaps {
            taps,
            timers: [0.0; 3],
            saturated: [false; 3],
        }
    }
}

/// Tap state for every regulator of a feeder, aligned with the model's
/// regulator ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapState {
    pub regs: Vec<RegulatorTaps>,
}

impl TapState {
    pub fn neutral(n_regs: usize) -> TapState {
        TapState {
            regs: vec![RegulatorTaps::neutral(); n_regs],
        }
    }

    pub fn validate(&self, specs: &[RegulatorSpec]) -> Result<(), String> {
        if self.regs.len() != specs.len() {
            return Err(format!(
                "tap state covers {} regulators, model has {}",
                self.regs.len(),
                specs.len()
            ));
        }
        for (spec, reg) in specs.iter().zip(&self.regs) {
            for &t in &reg.taps {
                if t < spec.tap_min || t > spec.tap_max {
                    return Err(format!("{}: tap {t} outside range", spec.id));
                }
            }
            if spec.mode == RegulatorMode::Ganged
                && !(reg.taps[0] == reg.taps[1] && reg.taps[1] == reg.taps[2])
            {
                return Err(format!("{}: ganged device with unequal taps", spec.id));
            }
        }
        Ok(())
    }

    /// Total tap distance to another state, counting each controlled phase
    /// once for per-phase devices and the gang once for ganged devices.
    pub fn distance(&self, other: &TapState, specs: &[RegulatorSpec]) -> u32 {
        let mut ops = 0u32;
        for ((spec, a), b) in specs.iter().zip(&self.regs).zip(&other.regs) {
            match spec.mode {
                RegulatorMode::Ganged => ops += (a.taps[0] - b.taps[0]).unsigned_abs(),
                RegulatorMode::PerPhase => {
                    for p in 0..3 {
                        ops += (a.taps[p] - b.taps[p]).unsigned_abs();
                    }
                }
            }
        }
        ops
    }
}

/// One step of the local bandwidth controller of a single regulator.
///
/// `measured_v` carries the regulated-bus voltage per phase in volts on a
/// 120 V base (`None` for phases the device does not serve). A ganged device
/// controls on the mean of its measured phases. Returns the number of tap
/// operations performed (one per moved phase, a gang counts once).
pub fn local_regulator_step(
    spec: &RegulatorSpec,
    state: &RegulatorTaps,
    measured_v: [Option<f64>; 3],
    dt_s: f64,
) -> (RegulatorTaps, u32) {
    let mut next = state.clone();
    let mut ops = 0;
    match spec.mode {
        RegulatorMode::Ganged => {
            let (sum, n) = measured_v
                .iter()
                .flatten()
                .fold((0.0, 0u32), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                return (next, 0);
            }
            let moved = bandwidth_update(spec, &mut next, 0, sum / n as f64, dt_s);
            if moved != 0 {
                for p in 0..3 {
                    next.taps[p] = next.taps[0];
                }
                ops += 1;
            }
        }
        RegulatorMode::PerPhase => {
            for p in 0..3 {
                if let Some(v) = measured_v[p] {
                    if bandwidth_update(spec, &mut next, p, v, dt_s) != 0 {
                        ops += 1;
                    }
                }
            }
        }
    }
    (next, ops)
}

/// Integrating timer with reset-on-reentry; returns the tap delta applied.
fn bandwidth_update(
    spec: &RegulatorSpec,
    state: &mut RegulatorTaps,
    slot: usize,
    v: f64,
    dt_s: f64,
) -> i32 {
    let dev = v - spec.v_set;
    if dev.abs() <= spec.bandwidth / 2.0 {
        state.timers[slot] = 0.0;
        state.saturated[slot] = false;
        return 0;
    }
    state.timers[slot] += dt_s;
    if state.timers[slot] < spec.time_delay_s {
        return 0;
    }
    // voltage low -> raise the ratio
    let step = if dev < 0.0 { 1 } else { -1 } * spec.max_tap_per_action;
    let target = spec.clamp_tap(state.taps[slot] + step);
    let delta = target - state.taps[slot];
    if delta == 0 {
        state.saturated[slot] = true;
        return 0;
    }
    state.taps[slot] = target;
    state.timers[slot] = 0.0;
    state.saturated[slot] = false;
    delta
}

// ---------------------------------------------------------------------------
// Inverters
// ---------------------------------------------------------------------------

/// Runtime state of one smart inverter: the curve each served phase follows
/// and its current Var output.
#[derive(Debug, Clone, PartialEq)]
pub struct InverterState {
    /// Index into the feeder's inverter site list.
    pub site: usize,
    pub curves: [Option<VoltVarCurve>; 3],
    pub q_kvar: [f64; 3],
}

impl InverterState {
    pub fn new(site: usize, curve: &VoltVarCurve, phases: impl Iterator<Item = Phase>) -> Self {
        let mut curves: [Option<VoltVarCurve>; 3] = [None, None, None];
        for p in phases {
            curves[p.index()] = Some(curve.clone());
        }
        InverterState {
            site,
            curves,
            q_kvar: [0.0; 3],
        }
    }
}

/// Damped local Volt-Var update for one inverter:
/// `q_next = (1 - alpha) q_now + alpha * clamp(f(v), -q_lim_now, q_lim_now)`.
///
/// `q_limit_kvar` is the instantaneous per-phase Var headroom given the
/// current real-power output.
pub fn inverter_local_step(
    state: &InverterState,
    v_pu: [Option<f64>; 3],
    q_limit_kvar: [f64; 3],
    alpha: f64,
) -> InverterState {
    debug_assert!(alpha > 0.0 && alpha <= 1.0);
    let mut next = state.clone();
    for p in 0..3 {
        if let (Some(curve), Some(v)) = (&state.curves[p], v_pu[p]) {
            let target = curve.eval(v).clamp(-q_limit_kvar[p], q_limit_kvar[p]);
            next.q_kvar[p] = (1.0 - alpha) * state.q_kvar[p] + alpha * target;
        }
    }
    next
}
