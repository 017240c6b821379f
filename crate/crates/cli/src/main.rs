use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use qmmm::harness::{self, ExperimentConfig};
use qmmm::solve::Status;

#[derive(Parser)]
#[command(name = "qmmm", version, about = "QM/MM coupling experiments on toy lattice models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Io {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the MLIP of the MM block and write potential.json.
    Fit(Io),
    /// Relax the defect under the reference model (cached).
    Reference(Io),
    /// Convergence study over the R_QM schedule.
    Converge(Io),
    /// Ghost forces at the homogeneous state and the GFC patch test.
    Ghostforce(Io),
    /// Far-field decay of the reference equilibrium and predictor strain.
    Decay(Io),
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let io = match &cli.command {
        Command::Fit(io) | Command::Reference(io) | Command::Converge(io) | Command::Ghostforce(io) | Command::Decay(io) => io,
    };
    let cfg = ExperimentConfig::from_path(&io.config).with_context(|| format!("loading {}", io.config.display()))?;
    let out = &io.out;
    let ok = match cli.command {
        Command::Fit(_) => {
            let r = harness::run_fit(&cfg, out)?;
            for e in &r.errors.entries {
                println!("{:?}{}  rrmse {:.3e}", e.kind, e.order, e.rrmse);
            }
            println!("#O {}  #B {}  rank {}  {:.2}s", r.n_obs, r.n_basis, r.rank, r.time_s);
            true
        }
        Command::Reference(_) => {
            let r = harness::run_reference(&cfg, out)?;
            println!(
                "{:?} after {} iterations, |g| {:.2e}{}",
                r.status,
                r.iterations,
                r.gradnorm,
                if r.from_cache { " (cached)" } else { "" }
            );
            r.status == Status::Converged
        }
        Command::Converge(_) => {
            let r = harness::run_converge(&cfg, out)?;
            for row in &r.rows {
                let err = row.error.map_or("-".to_string(), |e| format!("{e:.4e}"));
                println!(
                    "R_QM {:>5}  R_MM {:>5}  error {err:>11}  {} ({} it, {:.1}s)",
                    row.r_qm, row.r_mm, row.status, row.iterations, row.wall_s
                );
            }
            match (r.slope, r.slope_se) {
                (Some(s), Some(se)) => println!("slope {s:.3} ± {se:.3}"),
                _ => println!("slope unavailable"),
            }
            r.all_converged
        }
        Command::Ghostforce(_) => {
            let r = harness::run_ghostforce(&cfg, out)?;
            println!("max ghost {:.3e}  far {:.3e}  support {:.2}", r.max_ghost, r.max_far_ghost, r.support_halfwidth);
            if let (Some(c), Some(q)) = (r.core_force, r.ratio) {
                println!("core force {c:.3e}  ratio {q:.3}");
            }
            println!(
                "GFC residual {:.2e}  patch max|u| {:.2e}  uncorrected max|u| {:.2e}",
                r.gfc_residual, r.patch_gfc_max_u, r.patch_uncorrected_max_u
            );
            true
        }
        Command::Decay(_) => {
            let r = harness::run_decay(&cfg, out)?;
            let show = |name: &str, p: &qmmm::solve::DecayProfile| match (p.slope, p.slope_se) {
                (Some(s), Some(se)) => println!("{name} slope {s:.3} ± {se:.3}"),
                _ => println!("{name} slope unavailable"),
            };
            show("|Du|", &r.displacement);
            if let Some(p) = &r.strain {
                show("|e|", p);
            }
            if let Some(p) = &r.strain_gradient {
                show("|De|", p);
            }
            r.reference_status == Status::Converged
        }
    };
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
