//! Serde representation of the feeder file and the overlay transform.
//!
//! Impedances are entered in total ohms as 3x3 nested arrays of `[re, im]`
//! pairs; shunt admittances in total microsiemens. Omitted rows/columns
//! default to zero. The `overlay` section is a declarative patch: branch
//! removals/conversions, bus and device additions, capacitor removal, and a
//! source reassignment, applied in that order.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::devices::RegulatorSpec;
use crate::phase::PhaseSet;

use super::{
    Branch, BranchKind, Bus, FeederError, FeederModel, InverterSite, Load, LoadConn, LoadModel,
    Mat3, ShuntCap, ZERO_MAT3,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeederFile {
    #[serde(default)]
    pub name: String,
    pub base: BaseSection,
    pub buses: Vec<BusEntry>,
    pub branches: Vec<BranchEntry>,
    #[serde(default)]
    pub loads: Vec<LoadEntry>,
    #[serde(default)]
    pub inverters: Vec<InverterEntry>,
    #[serde(default)]
    pub regulators: Vec<RegulatorSpec>,
    #[serde(default)]
    pub shunts: Vec<ShuntEntry>,
    #[serde(default)]
    pub overlay: Option<Overlay>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseSection {
    pub mva: f64,
    pub source: String,
    #[serde(default = "one")]
    pub v_source_pu: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusEntry {
    pub id: String,
    pub phases: PhaseSet,
    pub base_kv_ln: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchEntry {
    pub from: String,
    pub to: String,
    #[serde(default = "line_kind")]
    pub kind: String,
    pub phases: PhaseSet,
    /// 3x3 complex ohms as [re, im] pairs; omitted -> zero (switch/regulator).
    #[serde(default)]
    pub z_ohm: Option<[[[f64; 2]; 3]; 3]>,
    /// 3x3 complex microsiemens as [re, im] pairs.
    #[serde(default)]
    pub b_shunt_us: Option<[[[f64; 2]; 3]; 3]>,
    #[serde(default)]
    pub length: f64,
    #[serde(default)]
    pub regulator_id: Option<String>,
}

fn line_kind() -> String {
    "line".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadEntry {
    pub bus: String,
    #[serde(default = "wye")]
    pub conn: String,
    #[serde(default = "pq")]
    pub model: String,
    pub p_kw: [f64; 3],
    pub q_kvar: [f64; 3],
    #[serde(default)]
    pub distributed_fraction: f64,
}

fn wye() -> String {
    "wye".to_string()
}
fn pq() -> String {
    "pq".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverterEntry {
    pub bus: String,
    pub phases: PhaseSet,
    pub p_rating_kw: f64,
    pub s_rating_kva: f64,
    #[serde(default)]
    pub smart: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShuntEntry {
    pub bus: String,
    pub kvar: [f64; 3],
}

/// Study modifications applied on top of the base sections.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Overlay {
    #[serde(default)]
    pub description: String,
    /// Branches replaced by zero-impedance switches, as [from, to] pairs.
    #[serde(default)]
    pub convert_to_switch: Vec<[String; 2]>,
    /// Regulator specs dropped (their branches must be converted or removed).
    #[serde(default)]
    pub remove_regulators: Vec<String>,
    /// Drop all shunt capacitors.
    #[serde(default)]
    pub remove_shunts: bool,
    #[serde(default)]
    pub add_buses: Vec<BusEntry>,
    /// Move buses to a different voltage zone (kV line-to-neutral).
    #[serde(default)]
    pub set_bus_kv: Vec<(String, f64)>,
    #[serde(default)]
    pub add_branches: Vec<BranchEntry>,
    #[serde(default)]
    pub add_regulators: Vec<RegulatorSpec>,
    #[serde(default)]
    pub add_inverters: Vec<InverterEntry>,
    /// Reassign the source bus (e.g. to a new substation-side node).
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub v_source_pu: Option<f64>,
}

fn to_mat3(raw: &Option<[[[f64; 2]; 3]; 3]>) -> Mat3 {
    match raw {
        None => ZERO_MAT3,
        Some(m) => {
            let mut out = ZERO_MAT3;
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = Complex64::new(m[i][j][0], m[i][j][1]);
                }
            }
            out
        }
    }
}

fn scale_mat3(m: &Mat3, k: f64) -> Mat3 {
    let mut out = ZERO_MAT3;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[i][j] * k;
        }
    }
    out
}

impl FeederFile {
    pub fn into_model(mut self, apply_overlay: bool) -> Result<FeederModel, FeederError> {
        let overlay = self.overlay.take();
        if apply_overlay {
            if let Some(ov) = &overlay {
                self.apply_overlay(ov)?;
            }
        }
        self.build()
    }

    fn apply_overlay(&mut self, ov: &Overlay) -> Result<(), FeederError> {
        for pair in &ov.convert_to_switch {
            let hit = self
                .branches
                .iter_mut()
                .find(|b| b.from == pair[0] && b.to == pair[1]);
            match hit {
                Some(b) => {
                    b.kind = "switch".to_string();
                    b.z_ohm = None;
                    b.b_shunt_us = None;
                    b.regulator_id = None;
                }
                None => {
                    return Err(FeederError::Dangling(format!(
                        "overlay: no branch {}-{} to convert",
                        pair[0], pair[1]
                    )))
                }
            }
        }
        for id in &ov.remove_regulators {
            let before = self.regulators.len();
            self.regulators.retain(|r| &r.id != id);
            if self.regulators.len() == before {
                return Err(FeederError::Dangling(format!(
                    "overlay: no regulator {id} to remove"
                )));
            }
        }
        if ov.remove_shunts {
            self.shunts.clear();
        }
        for (id, kv) in &ov.set_bus_kv {
            let bus = self
                .buses
                .iter_mut()
                .find(|b| &b.id == id)
                .ok_or_else(|| FeederError::Dangling(format!("overlay: no bus {id}")))?;
            bus.base_kv_ln = *kv;
        }
        self.buses.extend(ov.add_buses.iter().cloned());
        self.branches.extend(ov.add_branches.iter().cloned());
        self.regulators.extend(ov.add_regulators.iter().cloned());
        self.inverters.extend(ov.add_inverters.iter().cloned());
        if let Some(src) = &ov.source {
            self.base.source = src.clone();
        }
        if let Some(v) = ov.v_source_pu {
            self.base.v_source_pu = v;
        }
        Ok(())
    }

    fn build(self) -> Result<FeederModel, FeederError> {
        let mut buses = Vec::with_capacity(self.buses.len());
        for b in &self.buses {
            if buses.iter().any(|x: &Bus| x.id == b.id) {
                return Err(FeederError::Duplicate(format!("bus {}", b.id)));
            }
            buses.push(Bus {
                id: b.id.clone(),
                phases: b.phases,
                base_kv_ln: b.base_kv_ln,
                is_source: false,
            });
        }
        let find_bus = |id: &str| -> Result<usize, FeederError> {
            buses
                .iter()
                .position(|b| b.id == id)
                .ok_or_else(|| FeederError::Dangling(format!("bus {id}")))
        };
        let source = find_bus(&self.base.source)?;

        let regulators: Vec<RegulatorSpec> = self.regulators.clone();
        let find_reg = |id: &str| -> Result<usize, FeederError> {
            regulators
                .iter()
                .position(|r| r.id == id)
                .ok_or_else(|| FeederError::Dangling(format!("regulator {id}")))
        };

        let mut branches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let kind = match b.kind.as_str() {
                "line" => BranchKind::Line,
                "regulator" => BranchKind::Regulator,
                "switch" => BranchKind::Switch,
                other => {
                    return Err(FeederError::BadValue(format!(
                        "branch {}-{}: unknown kind {other:?}",
                        b.from, b.to
                    )))
                }
            };
            let regulator = match (&b.regulator_id, kind) {
                (Some(id), BranchKind::Regulator) => Some(find_reg(id)?),
                (None, BranchKind::Regulator) => {
                    return Err(FeederError::Dangling(format!(
                        "regulator branch {}-{} missing regulator_id",
                        b.from, b.to
                    )))
                }
                (Some(_), _) => {
                    return Err(FeederError::BadValue(format!(
                        "branch {}-{}: regulator_id on non-regulator branch",
                        b.from, b.to
                    )))
                }
                (None, _) => None,
            };
            branches.push(Branch {
                from: find_bus(&b.from)?,
                to: find_bus(&b.to)?,
                kind,
                phases: b.phases,
                z_ohm: to_mat3(&b.z_ohm),
                b_shunt_s: scale_mat3(&to_mat3(&b.b_shunt_us), 1e-6),
                length: b.length,
                regulator,
            });
        }

        let mut loads = Vec::with_capacity(self.loads.len());
        for l in &self.loads {
            let conn = match l.conn.as_str() {
                "wye" => LoadConn::Wye,
                "delta" => LoadConn::Delta,
                other => {
                    return Err(FeederError::BadValue(format!(
                        "load at {}: unknown connection {other:?}",
                        l.bus
                    )))
                }
            };
            let model = match l.model.as_str() {
                "pq" => LoadModel::ConstPq,
                "i" => LoadModel::ConstI,
                "z" => LoadModel::ConstZ,
                other => {
                    return Err(FeederError::BadValue(format!(
                        "load at {}: unknown model {other:?}",
                        l.bus
                    )))
                }
            };
            loads.push(Load {
                bus: find_bus(&l.bus)?,
                conn,
                model,
                p_kw: l.p_kw,
                q_kvar: l.q_kvar,
                distributed_fraction: l.distributed_fraction,
            });
        }

        let mut inverter_sites = Vec::with_capacity(self.inverters.len());
        for s in &self.inverters {
            inverter_sites.push(InverterSite {
                bus: find_bus(&s.bus)?,
                phases: s.phases,
                p_rating_kw: s.p_rating_kw,
                s_rating_kva: s.s_rating_kva,
                smart: s.smart,
            });
        }

        let mut shunt_caps = Vec::with_capacity(self.shunts.len());
        for c in &self.shunts {
            shunt_caps.push(ShuntCap {
                bus: find_bus(&c.bus)?,
                kvar: c.kvar,
            });
        }

        buses[source].is_source = true;
        Ok(FeederModel {
            name: self.name,
            buses,
            branches,
            loads,
            inverter_sites,
            regulators,
            shunt_caps,
            base_mva: self.base.mva,
            source,
            v_source_pu: self.base.v_source_pu,
        })
    }
}
