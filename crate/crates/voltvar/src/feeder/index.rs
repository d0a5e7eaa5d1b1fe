//! Computational view of a feeder: phase-node numbering, tree orientation,
//! per-unit branch data, lumped load placement, and the smart-inverter
//! control layout shared by the solver and the optimizers.

use num_complex::Complex64;

use crate::devices::RegulatorMode;
use crate::phase::Phase;

use super::{
    BranchKind, FeederError, FeederModel, LoadConn, LoadModel, Mat3, IDEAL_BRANCH_X_PU, ZERO_MAT3,
};

/// One branch in per-unit quantities, oriented along the tree.
#[derive(Debug, Clone)]
pub struct PuBranch {
    pub branch: usize,
    pub up_bus: usize,
    pub down_bus: usize,
    pub phases: Vec<Phase>,
    /// Series impedance in p.u. (placeholder reactance for regulator/switch).
    pub z_pu: Mat3,
    /// Inverse of the series impedance over present phases.
    pub y_series: Mat3,
    /// Half of the total shunt admittance in p.u. (one half per end).
    pub ysh_half_pu: Mat3,
    pub regulator: Option<usize>,
}

/// A load after distributed-load lumping: plain power records per bus.
#[derive(Debug, Clone)]
pub struct EffectiveLoad {
    pub bus: usize,
    pub conn: LoadConn,
    pub model: LoadModel,
    pub p_kw: [f64; 3],
    pub q_kvar: [f64; 3],
}

/// One supervisory Var control: a (smart site, phase) pair mapped to its
/// phase-node. The control vector used by the optimizers follows this order.
#[derive(Debug, Clone, Copy)]
pub struct Control {
    pub site: usize,
    pub bus: usize,
    pub node: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct NetworkIndex {
    /// Phase-node -> (bus, phase), buses in model order, phases A then B then C.
    pub nodes: Vec<(usize, Phase)>,
    node_of: Vec<[Option<usize>; 3]>,
    /// Buses in breadth-first order from the source (source first).
    pub bus_order: Vec<usize>,
    pub parent_bus: Vec<Option<usize>>,
    /// Per bus, index into `pu_branches` of the arriving branch.
    pub parent_pu_branch: Vec<Option<usize>>,
    pub depth: Vec<usize>,
    pub pu_branches: Vec<PuBranch>,
    /// Per-bus 3x3 shunt admittance block (line-charging halves + capacitors).
    pub bus_shunt_pu: Vec<Mat3>,
    pub eff_loads: Vec<EffectiveLoad>,
    pub controls: Vec<Control>,
    /// Per regulator: its pu-branch index.
    pub reg_pu_branch: Vec<usize>,
    /// Per regulator: bus mask of everything at or below its regulated bus.
    pub reg_downstream: Vec<Vec<bool>>,
    /// Regulator indices ordered by depth, most upstream first.
    pub regs_by_depth: Vec<usize>,
    pub source_bus: usize,
}

impl NetworkIndex {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.node_of[bus][phase.index()]
    }

    pub fn build(model: &FeederModel) -> Result<NetworkIndex, FeederError> {
        let nb = model.buses.len();
        let mut nodes = Vec::new();
        let mut node_of = vec![[None; 3]; nb];
        for (bi, bus) in model.buses.iter().enumerate() {
            for p in bus.phases.iter() {
                node_of[bi][p.index()] = Some(nodes.len());
                nodes.push((bi, p));
            }
        }

        // orient the tree from the source
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nb];
        for (bi, br) in model.branches.iter().enumerate() {
            adj[br.from].push((br.to, bi));
            adj[br.to].push((br.from, bi));
        }
        let mut parent_bus = vec![None; nb];
        let mut parent_branch = vec![None; nb];
        let mut depth = vec![0usize; nb];
        let mut bus_order = vec![model.source];
        let mut head = 0;
        let mut seen = vec![false; nb];
        seen[model.source] = true;
        while head < bus_order.len() {
            let bus = bus_order[head];
            head += 1;
            for &(next, bi) in &adj[bus] {
                if !seen[next] {
                    seen[next] = true;
                    parent_bus[next] = Some(bus);
                    parent_branch[next] = Some(bi);
                    depth[next] = depth[bus] + 1;
                    bus_order.push(next);
                }
            }
        }

        // per-unit branch data, oriented downstream
        let mut pu_branches = Vec::with_capacity(model.branches.len());
        let mut pu_of_branch = vec![usize::MAX; model.branches.len()];
        let mut bus_shunt_pu = vec![ZERO_MAT3; nb];
        for (bi, br) in model.branches.iter().enumerate() {
            // the child end identifies orientation
            let (up, down) = if parent_branch[br.to] == Some(bi) {
                (br.from, br.to)
            } else {
                (br.to, br.from)
            };
            if br.kind == BranchKind::Regulator && up != br.from {
                return Err(FeederError::BadValue(format!(
                    "regulator branch {}-{} written against the flow direction",
                    model.buses[br.from].id, model.buses[br.to].id
                )));
            }
            let phases: Vec<Phase> = br.phases.iter().collect();
            let z_base = model.z_base_ohm(br.to);
            let y_base = 1.0 / z_base;
            let mut z_pu = ZERO_MAT3;
            for i in 0..3 {
                for j in 0..3 {
                    z_pu[i][j] = br.z_ohm[i][j] / z_base;
                }
            }
            if br.kind != BranchKind::Line {
                // ideal device: stand-in reactance keeps the matrix invertible
                for &p in &phases {
                    let i = p.index();
                    if z_pu[i][i] == Complex64::new(0.0, 0.0) {
                        z_pu[i][i] = Complex64::new(0.0, IDEAL_BRANCH_X_PU);
                    }
                }
            }
            let y_series = invert_masked(&z_pu, &phases).ok_or_else(|| {
                FeederError::BadValue(format!(
                    "branch {}-{}: singular impedance",
                    model.buses[br.from].id, model.buses[br.to].id
                ))
            })?;
            let mut ysh_half_pu = ZERO_MAT3;
            for i in 0..3 {
                for j in 0..3 {
                    ysh_half_pu[i][j] = br.b_shunt_s[i][j] / y_base * 0.5;
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    bus_shunt_pu[up][i][j] += ysh_half_pu[i][j];
                    bus_shunt_pu[down][i][j] += ysh_half_pu[i][j];
                }
            }
            pu_of_branch[bi] = pu_branches.len();
            pu_branches.push(PuBranch {
                branch: bi,
                up_bus: up,
                down_bus: down,
                phases,
                z_pu,
                y_series,
                ysh_half_pu,
                regulator: br.regulator,
            });
        }
        let parent_pu_branch: Vec<Option<usize>> = parent_branch
            .iter()
            .map(|b| b.map(|bi| pu_of_branch[bi]))
            .collect();

        // capacitors as constant-impedance shunts
        let s_1ph = model.s_base_1ph_kva();
        for cap in &model.shunt_caps {
            for p in Phase::ALL {
                let q_pu = cap.kvar[p.index()] / s_1ph;
                if q_pu != 0.0 {
                    let i = p.index();
                    bus_shunt_pu[cap.bus][i][i] += Complex64::new(0.0, q_pu);
                }
            }
        }

        // distributed loads: fraction f spread along the arriving branch is
        // lumped half at each end; the remainder stays at the load bus
        let mut eff_loads = Vec::new();
        for load in &model.loads {
            let f = load.distributed_fraction;
            if f > 0.0 {
                let parent = parent_bus[load.bus].ok_or_else(|| {
                    FeederError::BadValue(format!(
                        "distributed load at source bus {}",
                        model.buses[load.bus].id
                    ))
                })?;
                for p in Phase::ALL {
                    let i = p.index();
                    if load.p_kw[i] == 0.0 && load.q_kvar[i] == 0.0 {
                        continue;
                    }
                    let needed = match load.conn {
                        LoadConn::Wye => vec![p],
                        LoadConn::Delta => vec![p, Phase::from_index((i + 1) % 3)],
                    };
                    for ph in needed {
                        if !model.buses[parent].phases.contains(ph) {
                            return Err(FeederError::Phasing(format!(
                                "distributed load at {}: parent bus {} lacks phase {ph}",
                                model.buses[load.bus].id, model.buses[parent].id
                            )));
                        }
                    }
                }
                let half = |v: [f64; 3], k: f64| [v[0] * k, v[1] * k, v[2] * k];
                eff_loads.push(EffectiveLoad {
                    bus: parent,
                    conn: load.conn,
                    model: load.model,
                    p_kw: half(load.p_kw, f / 2.0),
                    q_kvar: half(load.q_kvar, f / 2.0),
                });
                eff_loads.push(EffectiveLoad {
                    bus: load.bus,
                    conn: load.conn,
                    model: load.model,
                    p_kw: half(load.p_kw, 1.0 - f / 2.0),
                    q_kvar: half(load.q_kvar, 1.0 - f / 2.0),
                });
            } else {
                eff_loads.push(EffectiveLoad {
                    bus: load.bus,
                    conn: load.conn,
                    model: load.model,
                    p_kw: load.p_kw,
                    q_kvar: load.q_kvar,
                });
            }
        }

        // supervisory Var controls: smart sites in model order, phases A,B,C
        let mut controls = Vec::new();
        for (si, site) in model.inverter_sites.iter().enumerate() {
            if !site.smart {
                continue;
            }
            for p in site.phases.iter() {
                controls.push(Control {
                    site: si,
                    bus: site.bus,
                    node: node_of[site.bus][p.index()].unwrap(),
                    phase: p,
                });
            }
        }

        let mut reg_pu_branch = vec![usize::MAX; model.regulators.len()];
        for (pi, pb) in pu_branches.iter().enumerate() {
            if let Some(ri) = pb.regulator {
                reg_pu_branch[ri] = pi;
            }
        }
        let mut reg_downstream = Vec::with_capacity(model.regulators.len());
        for ri in 0..model.regulators.len() {
            let root = pu_branches[reg_pu_branch[ri]].down_bus;
            let mut mask = vec![false; nb];
            mask[root] = true;
            for &bus in &bus_order {
                if let Some(p) = parent_bus[bus] {
                    if mask[p] {
                        mask[bus] = true;
                    }
                }
            }
            reg_downstream.push(mask);
        }
        let mut regs_by_depth: Vec<usize> = (0..model.regulators.len()).collect();
        regs_by_depth.sort_by_key(|&ri| depth[pu_branches[reg_pu_branch[ri]].down_bus]);

        Ok(NetworkIndex {
            nodes,
            node_of,
            bus_order,
            parent_bus,
            parent_pu_branch,
            depth,
            pu_branches,
            bus_shunt_pu,
            eff_loads,
            controls,
            reg_pu_branch,
            reg_downstream,
            regs_by_depth,
            source_bus: model.source,
        })
    }

    /// Per-phase tap ratios of a pu-branch for a given tap state (1.0 for
    /// non-regulator branches). Ganged devices share one ratio.
    pub fn branch_ratios(
        &self,
        model: &FeederModel,
        pb: &PuBranch,
        taps: &crate::devices::TapState,
    ) -> [f64; 3] {
        let mut r = [1.0; 3];
        if let Some(ri) = pb.regulator {
            let spec = &model.regulators[ri];
            let state = &taps.regs[ri];
            for p in &pb.phases {
                let i = p.index();
                let tap = match spec.mode {
                    RegulatorMode::Ganged => state.taps[0],
                    RegulatorMode::PerPhase => state.taps[i],
                };
                r[i] = spec.ratio(tap);
            }
        }
        r
    }
}

/// Invert the submatrix of `m` over the listed phases (others stay zero).
/// Gaussian elimination with partial pivoting on at most 3x3.
pub(crate) fn invert_masked(m: &Mat3, phases: &[Phase]) -> Option<Mat3> {
    let k = phases.len();
    if k == 0 {
        return None;
    }
    let idx: Vec<usize> = phases.iter().map(|p| p.index()).collect();
    // augmented [A | I]
    let mut a = vec![vec![Complex64::new(0.0, 0.0); 2 * k]; k];
    for r in 0..k {
        for c in 0..k {
            a[r][c] = m[idx[r]][idx[c]];
        }
        a[r][k + r] = Complex64::new(1.0, 0.0);
    }
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| {
            a[i][col]
                .norm()
                .partial_cmp(&a[j][col].norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].norm() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        let d = a[col][col];
        for c in 0..2 * k {
            a[col][c] /= d;
        }
        for r in 0..k {
            if r != col {
                let f = a[r][col];
                if f != Complex64::new(0.0, 0.0) {
                    for c in 0..2 * k {
                        let v = a[col][c];
                        a[r][c] -= f * v;
                    }
                }
            }
        }
    }
    let mut out = ZERO_MAT3;
    for r in 0..k {
        for c in 0..k {
            out[idx[r]][idx[c]] = a[r][k + c];
        }
    }
    Some(out)
}
