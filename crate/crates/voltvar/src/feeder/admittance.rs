//! Sparse nodal admittance over phase-nodes. Regulator branches enter as
//! ideal tap-ratio transformers in series with their stand-in reactance:
//! with per-phase ratio r, the two-port stamp is
//! `[[r^2 y, -r y], [-r y, y]]`, which stays symmetric.

use num_complex::Complex64;

use crate::devices::TapState;

use super::{FeederError, FeederModel, NetworkIndex};

#[derive(Debug, Clone)]
pub struct AdmittanceView {
    pub n: usize,
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl AdmittanceView {
    fn add(&mut self, i: usize, j: usize, v: Complex64) {
        if v == Complex64::new(0.0, 0.0) {
            return;
        }
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |e| e.0) {
            Ok(pos) => row[pos].1 += v,
            Err(pos) => row.insert(pos, (j, v)),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i]
            .binary_search_by_key(&j, |e| e.0)
            .map(|pos| self.rows[i][pos].1)
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    /// I = Y V.
    pub fn mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        for (i, row) in self.rows.iter().enumerate() {
            let mut s = Complex64::new(0.0, 0.0);
            for &(j, y) in row {
                s += y * v[j];
            }
            out[i] = s;
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for &(j, y) in &self.rows[i] {
                worst = worst.max((y - self.get(j, i)).norm());
            }
        }
        worst
    }
}

/// Assemble the phase-node admittance matrix for a tap state.
pub fn build_admittance(
    model: &FeederModel,
    index: &NetworkIndex,
    taps: &TapState,
) -> Result<AdmittanceView, FeederError> {
    taps.validate(&model.regulators)
        .map_err(FeederError::BadValue)?;
    let n = index.n_nodes();
    let mut y = AdmittanceView {
        n,
        rows: vec![Vec::new(); n],
    };
    for pb in &index.pu_branches {
        let r = index.branch_ratios(model, pb, taps);
        for &pi in &pb.phases {
            let i = pi.index();
            let up_i = index.node(pb.up_bus, pi).unwrap();
            let dn_i = index.node(pb.down_bus, pi).unwrap();
            for &pj in &pb.phases {
                let j = pj.index();
                let ys = pb.y_series[i][j];
                if ys == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let up_j = index.node(pb.up_bus, pj).unwrap();
                let dn_j = index.node(pb.down_bus, pj).unwrap();
                y.add(up_i, up_j, ys * r[i] * r[j]);
                y.add(up_i, dn_j, -ys * r[i]);
                y.add(dn_i, up_j, -ys * r[j]);
                y.add(dn_i, dn_j, ys);
            }
        }
    }
    // nodal shunt blocks: line-charging halves plus capacitors
    for (bus, block) in index.bus_shunt_pu.iter().enumerate() {
        for i in 0..3 {
            for j in 0..3 {
                let v = block[i][j];
                if v == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let (Some(ni), Some(nj)) = (
                    index.node(bus, crate::phase::Phase::from_index(i)),
                    index.node(bus, crate::phase::Phase::from_index(j)),
                ) else {
                    continue;
                };
                y.add(ni, nj, v);
            }
        }
    }
    Ok(y)
}
