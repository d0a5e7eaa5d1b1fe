//! Network data model: buses, three-phase branches, loads, PV/inverter
//! sites, regulator placements, and the feeder file loader.
//!
//! A feeder file is JSON with sections `base`, `buses`, `branches`, `loads`,
//! `inverters`, `regulators`, plus optional `shunts` (capacitors kept for
//! validation against the unmodified source data) and an optional `overlay`
//! describing study modifications. The bundled `ieee34.json` carries the
//! unmodified feeder in the main sections and the study changes in its
//! overlay, so both variants load from one file. See the repository README
//! for the field-by-field schema.

mod admittance;
mod index;
pub mod profiles;
pub mod schema;

use std::fmt;
use std::path::Path;

use num_complex::Complex64;

use crate::devices::RegulatorSpec;
use crate::phase::{Phase, PhaseSet};

pub use admittance::{build_admittance, AdmittanceView};
pub use index::{Control, EffectiveLoad, NetworkIndex, PuBranch};
pub use profiles::{load_profiles, ProfileKind, ProfileSet};
pub use schema::FeederFile;

pub type Mat3 = [[Complex64; 3]; 3];

pub const ZERO_MAT3: Mat3 = [[Complex64::new(0.0, 0.0); 3]; 3];

/// Placeholder series reactance (p.u.) standing in for ideal regulator and
/// closed-switch branches so the admittance view stays finite.
pub const IDEAL_BRANCH_X_PU: f64 = 1e-6;

#[derive(Debug)]
pub enum FeederError {
    Io(std::io::Error),
    /// Syntax error; the message carries line and column from the parser.
    Parse(String),
    Duplicate(String),
    Dangling(String),
    Phasing(String),
    NonRadial(String),
    BadValue(String),
}

impl fmt::Display for FeederError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeederError::Io(e) => write!(f, "io error: {e}"),
            FeederError::Parse(m) => write!(f, "parse error: {m}"),
            FeederError::Duplicate(m) => write!(f, "duplicate id: {m}"),
            FeederError::Dangling(m) => write!(f, "dangling reference: {m}"),
            FeederError::Phasing(m) => write!(f, "inconsistent phasing: {m}"),
            FeederError::NonRadial(m) => write!(f, "non-radial topology: {m}"),
            FeederError::BadValue(m) => write!(f, "invalid value: {m}"),
        }
    }
}

impl std::error::Error for FeederError {}

impl From<std::io::Error> for FeederError {
    fn from(e: std::io::Error) -> Self {
        FeederError::Io(e)
    }
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseSet,
    /// Line-to-neutral voltage base in kV.
    pub base_kv_ln: f64,
    pub is_source: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Line,
    Regulator,
    Switch,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub kind: BranchKind,
    pub phases: PhaseSet,
    /// Total series impedance in ohms, 3x3 over phases (zero off-phase).
    pub z_ohm: Mat3,
    /// Total shunt admittance in siemens, split half per end.
    pub b_shunt_s: Mat3,
    pub length: f64,
    /// Index into `FeederModel::regulators` for regulator branches.
    pub regulator: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadConn {
    Wye,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadModel {
    ConstPq,
    ConstI,
    ConstZ,
}

/// A spot or distributed load. Entries are per phase for wye connections and
/// per phase pair (AB, BC, CA) for delta connections. `distributed_fraction`
/// of the power is treated as spread along the branch arriving at `bus` and
/// is lumped half at each end; the remainder sits at `bus` itself.
#[derive(Debug, Clone)]
pub struct Load {
    pub bus: usize,
    pub conn: LoadConn,
    pub model: LoadModel,
    pub p_kw: [f64; 3],
    pub q_kvar: [f64; 3],
    pub distributed_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct InverterSite {
    pub bus: usize,
    pub phases: PhaseSet,
    pub p_rating_kw: f64,
    pub s_rating_kva: f64,
    pub smart: bool,
}

impl InverterSite {
    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    /// Per-phase apparent rating (equal split across served phases).
    pub fn s_phase_kva(&self) -> f64 {
        self.s_rating_kva / self.phase_count() as f64
    }

    pub fn p_phase_rating_kw(&self) -> f64 {
        self.p_rating_kw / self.phase_count() as f64
    }

    /// Instantaneous per-phase Var headroom for a per-phase real output.
    pub fn q_limit_kvar(&self, p_phase_kw: f64) -> f64 {
        let s = self.s_phase_kva();
        (s * s - p_phase_kw * p_phase_kw).max(0.0).sqrt()
    }
}

/// Fixed shunt capacitor (kvar per phase at nominal voltage, constant
/// impedance). Present only in unmodified validation data.
#[derive(Debug, Clone)]
pub struct ShuntCap {
    pub bus: usize,
    pub kvar: [f64; 3],
}

/// Immutable feeder model. Construction validates all invariants; the model
/// is safe to share across threads for concurrent solves.
#[derive(Debug, Clone)]
pub struct FeederModel {
    pub name: String,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub loads: Vec<Load>,
    pub inverter_sites: Vec<InverterSite>,
    pub regulators: Vec<RegulatorSpec>,
    pub shunt_caps: Vec<ShuntCap>,
    pub base_mva: f64,
    pub source: usize,
    pub v_source_pu: f64,
}

impl FeederModel {
    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Single-phase power base in kVA (three-phase base split per phase).
    pub fn s_base_1ph_kva(&self) -> f64 {
        self.base_mva * 1000.0 / 3.0
    }

    /// Series impedance base in ohms for a bus's voltage zone.
    pub fn z_base_ohm(&self, bus: usize) -> f64 {
        let kv = self.buses[bus].base_kv_ln;
        kv * kv * 1000.0 / self.s_base_1ph_kva()
    }

    /// Count of distinct buses referenced by load records.
    pub fn load_bus_count(&self) -> usize {
        let mut seen: Vec<usize> = self.loads.iter().map(|l| l.bus).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn smart_sites(&self) -> impl Iterator<Item = (usize, &InverterSite)> {
        self.inverter_sites
            .iter()
            .enumerate()
            .filter(|(_, s)| s.smart)
    }

    fn validate(&self) -> Result<(), FeederError> {
        if self.buses.is_empty() {
            return Err(FeederError::BadValue("no buses".into()));
        }
        if !(self.base_mva > 0.0) {
            return Err(FeederError::BadValue("base MVA must be positive".into()));
        }
        for b in &self.buses {
            if b.phases.is_empty() {
                return Err(FeederError::Phasing(format!("bus {} has no phases", b.id)));
            }
            if !(b.base_kv_ln > 0.0) {
                return Err(FeederError::BadValue(format!(
                    "bus {}: base kV must be positive",
                    b.id
                )));
            }
        }
        let n_src = self.buses.iter().filter(|b| b.is_source).count();
        if n_src != 1 {
            return Err(FeederError::BadValue(format!(
                "expected exactly one source bus, found {n_src}"
            )));
        }

        for (bi, br) in self.branches.iter().enumerate() {
            let (f, t) = (&self.buses[br.from], &self.buses[br.to]);
            if br.phases.is_empty() {
                return Err(FeederError::Phasing(format!(
                    "branch {}-{} has no phases",
                    f.id, t.id
                )));
            }
            if !br.phases.is_subset_of(f.phases) || !br.phases.is_subset_of(t.phases) {
                return Err(FeederError::Phasing(format!(
                    "branch {}-{} carries phases {} not present at both ends",
                    f.id, t.id, br.phases
                )));
            }
            for i in 0..3 {
                for j in 0..3 {
                    let present = br.phases.contains(Phase::from_index(i))
                        && br.phases.contains(Phase::from_index(j));
                    if !present && br.z_ohm[i][j] != Complex64::new(0.0, 0.0) {
                        return Err(FeederError::Phasing(format!(
                            "branch {}-{}: impedance entry on absent phase",
                            f.id, t.id
                        )));
                    }
                }
            }
            if br.kind == BranchKind::Line {
                for i in 0..3 {
                    for j in (i + 1)..3 {
                        let d = br.z_ohm[i][j] - br.z_ohm[j][i];
                        if d.norm() > 1e-9 {
                            return Err(FeederError::BadValue(format!(
                                "branch {}-{}: line impedance not symmetric",
                                f.id, t.id
                            )));
                        }
                    }
                }
            }
            match (br.kind, br.regulator) {
                (BranchKind::Regulator, None) => {
                    return Err(FeederError::Dangling(format!(
                        "regulator branch {}-{} has no RegulatorSpec",
                        f.id, t.id
                    )))
                }
                (BranchKind::Regulator, Some(r)) if r >= self.regulators.len() => {
                    return Err(FeederError::Dangling(format!(
                        "branch {bi}: regulator index out of range"
                    )))
                }
                (k, Some(_)) if k != BranchKind::Regulator => {
                    return Err(FeederError::BadValue(format!(
                        "branch {}-{}: only regulator branches reference a spec",
                        f.id, t.id
                    )))
                }
                _ => {}
            }
        }

        for l in &self.loads {
            let bus = &self.buses[l.bus];
            if !(0.0..=1.0).contains(&l.distributed_fraction) {
                return Err(FeederError::BadValue(format!(
                    "load at {}: distributed fraction outside [0, 1]",
                    bus.id
                )));
            }
            if l.distributed_fraction > 0.0 && bus.is_source {
                return Err(FeederError::BadValue(format!(
                    "load at {}: distributed load cannot sit at the source",
                    bus.id
                )));
            }
            for i in 0..3 {
                if l.p_kw[i] < 0.0 || l.q_kvar[i] < 0.0 {
                    return Err(FeederError::BadValue(format!(
                        "load at {}: negative consumption",
                        bus.id
                    )));
                }
                if l.p_kw[i] == 0.0 && l.q_kvar[i] == 0.0 {
                    continue;
                }
                match l.conn {
                    LoadConn::Wye => {
                        if !bus.phases.contains(Phase::from_index(i)) {
                            return Err(FeederError::Phasing(format!(
                                "wye load at {} on absent phase {}",
                                bus.id,
                                Phase::from_index(i)
                            )));
                        }
                    }
                    LoadConn::Delta => {
                        // entry i connects phase i to phase i+1
                        let (p1, p2) = (Phase::from_index(i), Phase::from_index((i + 1) % 3));
                        if !bus.phases.contains(p1) || !bus.phases.contains(p2) {
                            return Err(FeederError::Phasing(format!(
                                "delta load at {} needs phases {p1}{p2}",
                                bus.id
                            )));
                        }
                    }
                }
            }
        }

        for s in &self.inverter_sites {
            let bus = &self.buses[s.bus];
            if !s.phases.is_subset_of(bus.phases) {
                return Err(FeederError::Phasing(format!(
                    "inverter at {}: serves phases {} not present",
                    bus.id, s.phases
                )));
            }
            if s.s_rating_kva < s.p_rating_kw {
                return Err(FeederError::BadValue(format!(
                    "inverter at {}: apparent rating below real rating",
                    bus.id
                )));
            }
        }

        for spec in &self.regulators {
            spec.validate().map_err(FeederError::BadValue)?;
        }
        // regulator <-> branch references must be a bijection
        for (ri, spec) in self.regulators.iter().enumerate() {
            let hit = self
                .branches
                .iter()
                .any(|b| b.kind == BranchKind::Regulator && b.regulator == Some(ri));
            if !hit {
                return Err(FeederError::Dangling(format!(
                    "regulator {}: no branch references it",
                    spec.id
                )));
            }
        }

        for c in &self.shunt_caps {
            let bus = &self.buses[c.bus];
            for i in 0..3 {
                if c.kvar[i] != 0.0 && !bus.phases.contains(Phase::from_index(i)) {
                    return Err(FeederError::Phasing(format!(
                        "capacitor at {} on absent phase",
                        bus.id
                    )));
                }
            }
        }

        self.check_radial()?;
        Ok(())
    }

    /// Radiality: |branches| == |buses| - 1 and the graph is a connected tree.
    fn check_radial(&self) -> Result<(), FeederError> {
        if self.branches.len() + 1 != self.buses.len() {
            return Err(FeederError::NonRadial(format!(
                "{} branches for {} buses",
                self.branches.len(),
                self.buses.len()
            )));
        }
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.buses.len()];
        for (bi, br) in self.branches.iter().enumerate() {
            adj[br.from].push((br.to, bi));
            adj[br.to].push((br.from, bi));
        }
        let mut visited = vec![false; self.buses.len()];
        let mut stack = vec![(self.source, usize::MAX)];
        visited[self.source] = true;
        while let Some((bus, via)) = stack.pop() {
            for &(next, bi) in &adj[bus] {
                if bi == via {
                    continue;
                }
                if visited[next] {
                    return Err(FeederError::NonRadial(format!(
                        "cycle through branch {}-{}",
                        self.buses[self.branches[bi].from].id, self.buses[self.branches[bi].to].id
                    )));
                }
                visited[next] = true;
                stack.push((next, bi));
            }
        }
        if let Some(i) = visited.iter().position(|v| !v) {
            return Err(FeederError::NonRadial(format!(
                "bus {} unreachable from source",
                self.buses[i].id
            )));
        }
        Ok(())
    }
}

/// Load a feeder file, applying its overlay section when present.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, FeederError> {
    load_feeder_with(path, true)
}

/// Load a feeder file, skipping the overlay to obtain the unmodified network.
pub fn load_feeder_unmodified(path: impl AsRef<Path>) -> Result<FeederModel, FeederError> {
    load_feeder_with(path, false)
}

pub fn load_feeder_with(
    path: impl AsRef<Path>,
    apply_overlay: bool,
) -> Result<FeederModel, FeederError> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_feeder(&text, apply_overlay)
}

pub fn parse_feeder(text: &str, apply_overlay: bool) -> Result<FeederModel, FeederError> {
    let file: FeederFile =
        serde_json::from_str(text).map_err(|e| FeederError::Parse(e.to_string()))?;
    let model = file.into_model(apply_overlay)?;
    model.validate()?;
    Ok(model)
}
