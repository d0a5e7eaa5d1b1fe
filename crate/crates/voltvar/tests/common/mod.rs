//! Shared test helpers: an independent admittance-based power-flow solver
//! used as the oracle for the sweep solver, and data-path utilities.
//!
//! The oracle iterates nodal current injections against a dense LU
//! factorization of the non-slack admittance block. It shares only the
//! feeder data and admittance assembly with the production path; the load
//! modeling and the solution process are written separately here.

use num_complex::Complex64;
use voltvar::feeder::{LoadConn, LoadModel};
use voltvar::{
    build_admittance, FeederModel, InjectionSet, NetworkIndex, Phase, PhasorSolution, TapState,
};

pub fn data_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Scheduled injection (generation minus load) per node at voltage `v`,
/// in per-unit. Independent reimplementation of the load models.
fn scheduled_injection(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    v: &[Complex64],
) -> Vec<Complex64> {
    let s_base = model.s_base_1ph_kva();
    let mut s = vec![Complex64::new(0.0, 0.0); index.n_nodes()];
    for (n, sv) in s.iter_mut().enumerate() {
        *sv += Complex64::new(inj.p_gen_kw[n] / s_base, inj.q_gen_kvar[n] / s_base);
    }
    for load in &inj.loads {
        for slot in 0..3 {
            let nom = Complex64::new(load.p_kw[slot] / s_base, load.q_kvar[slot] / s_base);
            if nom == Complex64::new(0.0, 0.0) {
                continue;
            }
            match load.conn {
                LoadConn::Wye => {
                    let n = index.node(load.bus, Phase::from_index(slot)).unwrap();
                    let vm = v[n].norm();
                    let sl = match load.model {
                        LoadModel::ConstPq => nom,
                        LoadModel::ConstI => nom * vm,
                        LoadModel::ConstZ => nom * vm * vm,
                    };
                    s[n] -= sl;
                }
                LoadConn::Delta => {
                    let n1 = index.node(load.bus, Phase::from_index(slot)).unwrap();
                    let n2 = index
                        .node(load.bus, Phase::from_index((slot + 1) % 3))
                        .unwrap();
                    let vll = v[n1] - v[n2];
                    let ratio = vll.norm() / SQRT3;
                    let sl = match load.model {
                        LoadModel::ConstPq => nom,
                        LoadModel::ConstI => nom * ratio,
                        LoadModel::ConstZ => nom * ratio * ratio,
                    };
                    let i_pair = (sl / vll).conj();
                    s[n1] -= v[n1] * i_pair.conj();
                    s[n2] -= v[n2] * (-i_pair).conj();
                }
            }
        }
    }
    s
}

/// Dense complex LU with partial pivoting; returns None on singularity.
struct Lu {
    n: usize,
    a: Vec<Complex64>,
    piv: Vec<usize>,
}

impl Lu {
    fn factor(mut a: Vec<Complex64>, n: usize) -> Option<Lu> {
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].norm();
            for r in (k + 1)..n {
                let m = a[r * n + k].norm();
                if m > best {
                    best = m;
                    p = r;
                }
            }
            if best < 1e-13 {
                return None;
            }
            piv[k] = p;
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
            }
            let pivot = a[k * n + k];
            for r in (k + 1)..n {
                let f = a[r * n + k] / pivot;
                a[r * n + k] = f;
                for c in (k + 1)..n {
                    let v = a[k * n + c];
                    a[r * n + c] -= f * v;
                }
            }
        }
        Some(Lu { n, a, piv })
    }

    fn solve(&self, b: &mut [Complex64]) {
        let n = self.n;
        // P b, then L y = Pb, then U x = y
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for k in 0..n {
            for r in (k + 1)..n {
                let f = self.a[r * n + k];
                let v = b[k];
                b[r] -= f * v;
            }
        }
        for k in (0..n).rev() {
            b[k] /= self.a[k * n + k];
            for r in 0..k {
                let f = self.a[r * n + k];
                let v = b[k];
                b[r] -= f * v;
            }
        }
    }
}

/// Independent power-flow solution by fixed-point current injection on the
/// full admittance matrix. Panics on non-convergence (test oracle).
pub fn oracle_solve(
    model: &FeederModel,
    index: &NetworkIndex,
    inj: &InjectionSet,
    taps: &TapState,
) -> PhasorSolution {
    let y = build_admittance(model, index, taps).unwrap();
    let n = index.n_nodes();
    let slack: Vec<bool> = index
        .nodes
        .iter()
        .map(|&(bus, _)| bus == index.source_bus)
        .collect();
    let reduced: Vec<usize> = (0..n).filter(|&i| !slack[i]).collect();
    let pos: Vec<Option<usize>> = {
        let mut p = vec![None; n];
        for (r, &i) in reduced.iter().enumerate() {
            p[i] = Some(r);
        }
        p
    };
    let m = reduced.len();
    let mut a = vec![Complex64::new(0.0, 0.0); m * m];
    for (r, &i) in reduced.iter().enumerate() {
        for &(j, yij) in y.row(i) {
            if let Some(c) = pos[j] {
                a[r * m + c] = yij;
            }
        }
    }
    let lu = Lu::factor(a, m).expect("reduced admittance is nonsingular");

    let mut v = vec![Complex64::new(0.0, 0.0); n];
    for (node, &(_, phase)) in index.nodes.iter().enumerate() {
        v[node] = Complex64::from_polar(model.v_source_pu, phase.nominal_angle());
    }
    let debug = std::env::var("ORACLE_DEBUG").is_ok();
    let mut iterations = 0;
    for iter in 1..=200 {
        iterations = iter;
        let s = scheduled_injection(model, index, inj, &v);
        // rhs = I_inj(V) - Y_rs V_slack
        let mut rhs = vec![Complex64::new(0.0, 0.0); m];
        for (r, &i) in reduced.iter().enumerate() {
            rhs[r] = (s[i] / v[i]).conj();
            for &(j, yij) in y.row(i) {
                if slack[j] {
                    rhs[r] -= yij * v[j];
                }
            }
        }
        lu.solve(&mut rhs);
        let mut delta: f64 = 0.0;
        for (r, &i) in reduced.iter().enumerate() {
            delta = delta.max((rhs[r] - v[i]).norm());
            v[i] = rhs[r];
        }
        if debug {
            let i_y = y.mul(&v);
            let s2 = scheduled_injection(model, index, inj, &v);
            let mut worst: f64 = 0.0;
            for i in 0..n {
                if !slack[i] {
                    worst = worst.max((s2[i] - v[i] * i_y[i].conj()).norm());
                }
            }
            println!("iter {iter}: delta {delta:.3e}, residual {worst:.3e}");
        }
        if delta < 1e-12 {
            break;
        }
    }
    // residual of the fixed point
    let i_y = y.mul(&v);
    let s = scheduled_injection(model, index, inj, &v);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        if slack[i] {
            continue;
        }
        worst = worst.max((s[i] - v[i] * i_y[i].conj()).norm());
    }
    assert!(
        worst < 1e-8,
        "oracle residual {worst:.3e} after {iterations} iterations"
    );
    PhasorSolution {
        vm: v.iter().map(|x| x.norm()).collect(),
        va: v.iter().map(|x| x.arg()).collect(),
        iterations,
        max_mismatch_pu: worst,
        sweep_trace: vec![],
    }
}

/// Published-style regulator taps for the unmodified feeder snapshot.
pub fn baseline_taps() -> TapState {
    let mut taps = TapState::neutral(2);
    taps.regs[0].taps = [12, 5, 5]; // vr1 A,B,C
    taps.regs[1].taps = [13, 11, 12]; // vr2 A,B,C
    taps
}
