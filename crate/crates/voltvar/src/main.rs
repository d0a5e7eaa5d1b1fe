use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use voltvar::sim::report::emit_report;
use voltvar::sim::{run_case, CaseId, Scenario, SimError};

#[derive(Parser)]
#[command(
    name = "voltvar",
    about = "Quasi-static feeder simulation and supervisory Volt/VAR optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario case and write its reports.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario's case (1, 2 or 3).
        #[arg(long)]
        case: Option<u8>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a feeder file.
    Validate {
        #[arg(long)]
        feeder: PathBuf,
        /// Validate the raw sections without applying the overlay.
        #[arg(long)]
        unmodified: bool,
    },
    /// Run every scenario in a directory across all three cases.
    Sweep {
        /// Run cases 1, 2 and 3 for each scenario.
        #[arg(long, default_value_t = true)]
        all_cases: bool,
        #[arg(long, default_value = "crates/voltvar/data/scenarios")]
        scenarios: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            // solver failures carry a dedicated exit code
            for cause in e.chain() {
                if let Some(sim) = cause.downcast_ref::<SimError>() {
                    if matches!(sim, SimError::Solve { .. } | SimError::Vvo { .. }) {
                        return ExitCode::from(3);
                    }
                }
            }
            ExitCode::from(1)
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            case,
            out,
            seed,
        } => {
            let mut sc = Scenario::load(&scenario)
                .with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(c) = case {
                sc.case = CaseId::try_from(c).map_err(anyhow::Error::msg)?;
            }
            if let Some(s) = seed {
                sc.seed = s;
            }
            let report = run_case(&sc)?;
            emit_report(&report, &out)?;
            print_summary(&report);
            // a supervisory run that could not keep the service band clean
            // reports infeasibility
            if sc.case == CaseId::Supervisory && report.n_uv + report.n_ov > 0 {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { feeder, unmodified } => {
            let model = if unmodified {
                voltvar::load_feeder_unmodified(&feeder)
            } else {
                voltvar::load_feeder(&feeder)
            }
            .with_context(|| format!("validating {}", feeder.display()))?;
            let index = voltvar::NetworkIndex::build(&model)?;
            println!(
                "{}: {} buses ({} phase-nodes), {} branches, {} loads on {} buses, \
                 {} inverter sites ({} smart), {} regulators -- radial, all references resolve",
                feeder.display(),
                model.buses.len(),
                index.n_nodes(),
                model.branches.len(),
                model.loads.len(),
                model.load_bus_count(),
                model.inverter_sites.len(),
                model.smart_sites().count(),
                model.regulators.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            all_cases,
            scenarios,
            out,
            seed,
        } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&scenarios)
                .with_context(|| format!("reading {}", scenarios.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            anyhow::ensure!(
                !files.is_empty(),
                "no scenario files in {}",
                scenarios.display()
            );
            let cases: Vec<CaseId> = if all_cases {
                CaseId::ALL.to_vec()
            } else {
                vec![CaseId::Supervisory]
            };
            let mut infeasible = false;
            println!(
                "{:<16} {:>4} {:>6} {:>6} {:>12} {:>6} {:>6} {:>7} {:>8} {:>8}",
                "condition", "case", "N_OV", "N_UV", "loss_kWh", "N_LTC", "N_VR", "N_total",
                "V_max", "V_min"
            );
            for file in &files {
                let base =
                    Scenario::load(file).with_context(|| format!("loading {}", file.display()))?;
                for &case in &cases {
                    let mut sc = base.clone();
                    sc.case = case;
                    if let Some(s) = seed {
                        sc.seed = s;
                    }
                    let report = run_case(&sc)?;
                    emit_report(&report, &out)?;
                    println!(
                        "{:<16} {:>4} {:>6} {:>6} {:>12.2} {:>6} {:>6} {:>7} {:>8.4} {:>8.4}",
                        report.condition,
                        report.case.number(),
                        report.n_ov,
                        report.n_uv,
                        report.loss_kwh,
                        report.n_ltc,
                        report.n_vr,
                        report.n_total(),
                        report.v_max,
                        report.v_min
                    );
                    infeasible |= case == CaseId::Supervisory && report.n_uv + report.n_ov > 0;
                }
            }
            if infeasible {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_summary(r: &voltvar::sim::MetricsReport) {
    println!(
        "{} case {}: N_OV {}, N_UV {}, loss {:.2} kWh, N_LTC {}, N_VR {}, N_total {}, \
         V in [{:.4}, {:.4}], {} messages ({} bytes), {} infeasible intervals",
        r.condition,
        r.case.number(),
        r.n_ov,
        r.n_uv,
        r.loss_kwh,
        r.n_ltc,
        r.n_vr,
        r.n_total(),
        r.v_min,
        r.v_max,
        r.messages,
        r.bytes,
        r.infeasible_intervals
    );
}
