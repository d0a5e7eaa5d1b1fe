//! CSV emission. `metrics.csv` accumulates one row per run under the fixed
//! header; the per-run series files are prefixed with condition and case.
//! All files are UTF-8 with LF line endings.

use std::fmt::Write as _;
use std::path::Path;

use super::{MetricsReport, SimError};

pub const METRICS_HEADER: &str = "case,N_OV,N_UV,loss_kWh,N_LTC,N_VR,N_total,V_max,V_min";

/// Append this run's row to `metrics.csv` and write the series files.
pub fn emit_report(report: &MetricsReport, out_dir: impl AsRef<Path>) -> Result<(), SimError> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let metrics = dir.join("metrics.csv");
    let mut body = if metrics.exists() {
        std::fs::read_to_string(&metrics)?
    } else {
        format!("{METRICS_HEADER}\n")
    };
    writeln!(
        body,
        "{},{},{},{:.6},{},{},{},{:.6},{:.6}",
        report.case.number(),
        report.n_ov,
        report.n_uv,
        report.loss_kwh,
        report.n_ltc,
        report.n_vr,
        report.n_total(),
        report.v_max,
        report.v_min
    )
    .expect("string write");
    std::fs::write(&metrics, body)?;

    let prefix = format!("{}_case{}", report.condition, report.case.number());

    let mut ts = String::from("time_s,loss_kw,v_min,v_max\n");
    for i in 0..report.series.t_s.len() {
        writeln!(
            ts,
            "{},{:.6},{:.6},{:.6}",
            report.series.t_s[i],
            report.series.loss_kw[i],
            report.series.v_min[i],
            report.series.v_max[i]
        )
        .expect("string write");
    }
    std::fs::write(dir.join(format!("{prefix}_timeseries.csv")), ts)?;

    let mut taps = String::from("time_s,regulator,tap_a,tap_b,tap_c\n");
    for (i, row) in report.series.taps.iter().enumerate() {
        for (ri, t) in row.iter().enumerate() {
            writeln!(
                taps,
                "{},{},{},{},{}",
                report.series.t_s[i], ri, t[0], t[1], t[2]
            )
            .expect("string write");
        }
    }
    std::fs::write(dir.join(format!("{prefix}_taps.csv")), taps)?;

    let mut q = String::from("time_s,control,q_kvar,v_pu\n");
    for (i, row) in report.series.q_kvar.iter().enumerate() {
        for (j, qv) in row.iter().enumerate() {
            writeln!(
                q,
                "{},{},{:.6},{:.6}",
                report.series.t_s[i], j, qv, report.series.v_ctrl[i][j]
            )
            .expect("string write");
        }
    }
    std::fs::write(dir.join(format!("{prefix}_qinj.csv")), q)?;

    if !report.dispatches.is_empty() {
        let mut d = String::from(
            "interval_s,site,phase,q_cmd_kvar,q_settled_kvar,err_frac,v_cmd_pu,v_settled_pu,v_err_pu,skipped,interval_clean\n",
        );
        for r in &report.dispatches {
            writeln!(
                d,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.t_s,
                r.site,
                r.phase,
                r.q_cmd_kvar,
                r.q_settled_kvar,
                (r.q_settled_kvar - r.q_cmd_kvar).abs() / r.q_lim_kvar.max(1e-9),
                r.v_cmd_pu,
                r.v_settled_pu,
                (r.v_settled_pu - r.v_cmd_pu).abs(),
                r.skipped,
                r.interval_clean
            )
            .expect("string write");
        }
        std::fs::write(dir.join(format!("{prefix}_dispatch_error.csv")), d)?;
    }

    if !report.vvo_wall_ms.is_empty() {
        let mut rt = String::from("interval,vvo_ms,tap_evaluations\n");
        for (i, ms) in report.vvo_wall_ms.iter().enumerate() {
            writeln!(rt, "{},{:.3},{}", i, ms, report.vvo_tap_evals[i]).expect("string write");
        }
        std::fs::write(dir.join(format!("{prefix}_runtime.csv")), rt)?;
    }
    Ok(())
}
