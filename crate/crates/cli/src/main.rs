//! `fhnctl`: command line front end for `fhn-control`.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fhn_control::adjoint::{solve_pathwise, solve_regression};
use fhn_control::control::{cost, gradient};
use fhn_control::experiment::{
    cost_spec, make_reference, run_experiment, write_control_csv, write_manifest, ExperimentConfig,
};
use fhn_control::forward::{simulate_ensemble, write_paths_binary, write_summary_csv, SimOptions};
use fhn_control::io::{create, read_csv_column};
use fhn_control::oracle::{check_assumptions, fd_gradient, AuditDomain, FD_STEP};
use fhn_control::{AdjointOptions, Backend, ControlGrid, Ensemble};

#[derive(Parser, Debug)]
#[command(name = "fhnctl", version, about = "Simulate and control stochastic FitzHugh-Nagumo networks")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Falls back to `run.out_dir`, then `$FHN_OUT_DIR`, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    n_particles: Option<usize>,
    /// Override the horizon (`grid.t_end`).
    #[arg(long, global = true)]
    t_end: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ControlArgs {
    /// Constant control value; `control.initial` by default.
    #[arg(long, conflicts_with = "control")]
    alpha: Option<f64>,
    /// CSV with an `alpha` column, one row per step.
    #[arg(long)]
    control: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the particle system and write the LFP summary.
    Simulate {
        #[command(flatten)]
        ctrl: ControlArgs,
        /// Drop all noise terms.
        #[arg(long)]
        no_noise: bool,
        /// Also write every path to `paths.bin`.
        #[arg(long)]
        paths: bool,
    },
    /// Run projected gradient descent and write all artifacts.
    Optimize,
    /// Compare the adjoint gradient with central finite differences.
    GradientCheck {
        #[command(flatten)]
        ctrl: ControlArgs,
        /// Largest accepted relative L2 error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = FD_STEP)]
        fd_step: f64,
    },
    /// Solve the adjoint equation for one control.
    Adjoint {
        #[command(flatten)]
        ctrl: ControlArgs,
        /// Use the RBF regression scheme instead of the pathwise sweep.
        #[arg(long)]
        regression: bool,
        /// Number of P1 sample paths to export.
        #[arg(long, default_value_t = 10)]
        n_paths: usize,
    },
    /// Generate the configured reference profile.
    Reference,
    /// Monte Carlo audit of the model's structural bounds.
    CheckAssumptions {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 2024)]
        audit_seed: u64,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(n) = cli.n_particles {
        cfg.run.n_particles = n;
    }
    if let Some(t) = cli.t_end {
        cfg.grid.t_end = t;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = Some(out.clone());
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn control_grid(cfg: &ExperimentConfig, args: &ControlArgs) -> Result<ControlGrid> {
    let grid = cfg.time_grid()?;
    let (lo, hi) = (cfg.control.alpha_min, cfg.control.alpha_max);
    if let Some(path) = &args.control {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let values = read_csv_column(file, "alpha").with_context(|| format!("reading {}", path.display()))?;
        if values.len() != grid.n_steps {
            bail!("{} has {} control values, grid has {} steps", path.display(), values.len(), grid.n_steps);
        }
        return Ok(ControlGrid::new(values, lo, hi)?);
    }
    Ok(ControlGrid::constant(&grid, args.alpha.unwrap_or(cfg.control.initial), lo, hi)?)
}

fn manifest(cfg: &ExperimentConfig, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
    write_manifest(create(&dir.join("manifest.txt"))?, cfg, extra)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    let out = cfg.output_dir();
    match cli.command {
        Command::Simulate { ctrl, no_noise, paths } => {
            if no_noise {
                cfg.model = cfg.model.deterministic();
            }
            let grid = cfg.time_grid()?;
            let c = control_grid(&cfg, &ctrl)?;
            let init = cfg.initial_law()?;
            let ensemble = Ensemble::draw(&cfg.model, &grid, &init, cfg.run.n_particles, cfg.run.seed, Backend::default())?;
            let traj = simulate_ensemble(&cfg.model, &grid, &c, &Arc::new(ensemble), &SimOptions::default())?;
            write_summary_csv(&traj, create(&out.join("lfp.csv"))?)?;
            write_control_csv(create(&out.join("control.csv"))?, &c, grid.dt)?;
            if paths {
                write_paths_binary(&traj, create(&out.join("paths.bin"))?)?;
            }
            manifest(&cfg, &out, &[("command", "simulate".into())])?;
            let last = traj.summaries.last().unwrap();
            println!(
                "simulated {} particles over {} steps; final mean v {:.6}; wrote {}",
                cfg.run.n_particles,
                grid.n_steps,
                last.mean_v,
                out.display()
            );
        }
        Command::Optimize => {
            let report = run_experiment(&cfg, &out)?;
            let s = &report.state;
            println!(
                "status {:?} after {} iterations: cost {:.6} -> {:.6}; wrote {}",
                s.status,
                s.iterations,
                s.initial_cost,
                s.cost,
                out.display()
            );
        }
        Command::GradientCheck { ctrl, tolerance, fd_step } => {
            let grid = cfg.time_grid()?;
            let c = control_grid(&cfg, &ctrl)?;
            let reference = make_reference(&cfg)?;
            let spec = cost_spec(&cfg, &reference);
            let init = cfg.initial_law()?;
            let ensemble =
                Arc::new(Ensemble::draw(&cfg.model, &grid, &init, cfg.run.n_particles, cfg.run.seed, Backend::default())?);
            let traj = simulate_ensemble(&cfg.model, &grid, &c, &ensemble, &SimOptions::default())?;
            let opts = AdjointOptions {
                convention: cfg.optimizer.convention,
                ..AdjointOptions::default()
            };
            let adj = solve_pathwise(&cfg.model, &traj, &spec, &opts)?;
            let g = gradient(&traj, &adj, &spec)?;
            let fd = fd_gradient(&cfg.model, &spec, &c, &ensemble, &grid, fd_step, Backend::default())?;
            let err = g.relative_error(&fd);
            let mut w = create(&out.join("gradient_check.csv"))?;
            {
                use std::io::Write;
                writeln!(w, "t,adjoint,fd")?;
                for k in 0..grid.n_steps {
                    writeln!(w, "{},{},{}", grid.time(k), g.values[k], fd.values[k])?;
                }
            }
            manifest(&cfg, &out, &[("command", "gradient-check".into()), ("relative_error", err.to_string())])?;
            let ok = err <= tolerance;
            println!("relative L2 error {err:.3e} (tolerance {tolerance:.1e}): {}", if ok { "ok" } else { "FAILED" });
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Adjoint {
            ctrl,
            regression,
            n_paths,
        } => {
            let grid = cfg.time_grid()?;
            let c = control_grid(&cfg, &ctrl)?;
            let reference = make_reference(&cfg)?;
            let spec = cost_spec(&cfg, &reference);
            let init = cfg.initial_law()?;
            let ensemble = Ensemble::draw(&cfg.model, &grid, &init, cfg.run.n_particles, cfg.run.seed, Backend::default())?;
            let traj = simulate_ensemble(&cfg.model, &grid, &c, &Arc::new(ensemble), &SimOptions::default())?;
            let adj = if regression {
                solve_regression(&cfg.model, &traj, &spec, &cfg.optimizer.regression, cfg.optimizer.convention)?
            } else {
                let opts = AdjointOptions {
                    convention: cfg.optimizer.convention,
                    ..AdjointOptions::default()
                };
                solve_pathwise(&cfg.model, &traj, &spec, &opts)?
            };
            let g = gradient(&traj, &adj, &spec)?;
            adj.write_mean_csv(create(&out.join("adjoint_mean.csv"))?)?;
            adj.write_p1_paths_csv(n_paths, create(&out.join("p1_paths.csv"))?)?;
            g.write_csv(create(&out.join("gradient.csv"))?)?;
            let j = cost(&traj, &spec, &c)?;
            manifest(&cfg, &out, &[("command", "adjoint".into()), ("cost", j.to_string())])?;
            println!("cost {j:.6}, gradient L2 norm {:.6}; wrote {}", g.l2_norm(), out.display());
        }
        Command::Reference => {
            let grid = cfg.time_grid()?;
            let reference = make_reference(&cfg)?;
            reference.write_csv(create(&out.join("reference.csv"))?, grid.dt)?;
            manifest(&cfg, &out, &[("command", "reference".into()), ("reference", reference.provenance.clone())])?;
            println!("{}; wrote {}", reference.provenance, out.display());
        }
        Command::CheckAssumptions { samples, audit_seed } => {
            let dom = AuditDomain {
                alpha_min: cfg.control.alpha_min,
                alpha_max: cfg.control.alpha_max,
                seed: audit_seed,
                ..AuditDomain::default()
            };
            let report = check_assumptions(&cfg.model, samples, &dom)?;
            println!("{report}");
            if report.violations() > 0 {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
