//! Command implementations behind the `dcgrid` binary.
//!
//! Each `cmd_*` takes a resolved [`RunConfig`] and an output directory,
//! writes its report files and returns an [`Outcome`]. Errors map onto the
//! process exit status with [`exit_code`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dcgrid_core::{
    certify_monotonicity, integrate, linearize, load_config, metrics, simulate_reduced,
    solve_equilibrium, sweep_eigs, write_json, write_reduced_csv, write_spectrum_csv,
    write_sweep_csv, write_trajectory_csv, Error, Result, RunConfig, SystemState,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_SOLVER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CERTIFICATE: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "dcgrid",
    version,
    about = "DC microgrid with nested distributed control"
)]
pub struct Cli {
    /// TOML config file; missing keys come from the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in parameter set (table1, cs2, pi, high-alpha, high-alpha-pu).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Dotted-path override, e.g. `controller.alpha=1e-11`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".", global = true)]
    pub out: PathBuf,
    /// Integration step (s).
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// Simulated horizon (s).
    #[arg(long = "T", global = true)]
    pub t_end: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps and certificates.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time-domain run over the configured scenario.
    Simulate {
        /// Integrate only the slow states on the quasi-steady manifold.
        #[arg(long)]
        reduced: bool,
    },
    /// Closed-loop equilibrium.
    Equilibrium,
    /// Sampled monotonicity certificate; exit status 3 when it fails.
    Certify,
    /// Jacobian and spectrum at the equilibrium.
    Linearize,
    /// Spectra over the configured parameter sweep.
    Sweep,
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub code: u8,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_solver_failure() {
        return EXIT_SOLVER;
    }
    match err {
        Error::Io(_) | Error::Json(_) => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

/// Flags that shadow config keys, folded into the override list so they go
/// through the same validation.
pub fn overrides(cli: &Cli) -> Vec<String> {
    let mut out = cli.set.clone();
    if let Some(dt) = cli.dt {
        out.push(format!("simulation.dt={dt:?}"));
    }
    if let Some(t) = cli.t_end {
        out.push(format!("simulation.t_end={t:?}"));
    }
    if let Some(seed) = cli.seed {
        out.push(format!("seed={seed}"));
    }
    out
}

fn create(dir: &Path, name: &str, files: &mut Vec<PathBuf>) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path)?;
    files.push(path);
    Ok(BufWriter::new(f))
}

fn json_file<T: serde::Serialize>(
    dir: &Path,
    name: &str,
    kind: &str,
    cfg: &RunConfig,
    result: &T,
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    let mut w = create(dir, name, files)?;
    write_json(&mut w, kind, &cfg.hash(), cfg.seed, result)?;
    w.flush()?;
    Ok(())
}

/// Writes the resolved configuration next to the reports.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml()?);
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, reduced: bool) -> Result<Outcome> {
    let grid = cfg.microgrid()?;
    let scenario = &cfg.simulation.scenario;
    let mut files = Vec::new();
    if reduced {
        let n = grid.n_g();
        let traj = simulate_reduced(
            &grid,
            &vec![0.0; n],
            &vec![0.0; n],
            scenario,
            &cfg.reduced_options(),
        )?;
        let mut w = create(out, "reduced.csv", &mut files)?;
        write_reduced_csv(&mut w, &traj)?;
        w.flush()?;
        let last = traj.share_err.last().copied().unwrap_or(f64::NAN);
        return Ok(Outcome {
            code: EXIT_OK,
            files,
            summary: format!(
                "reduced run: {} samples, final sharing error {last:.3e} p.u.",
                traj.t.len()
            ),
        });
    }
    let x0 = SystemState::flat_start(&grid, cfg.simulation.initial_bus_voltage);
    let traj = integrate(&x0, &grid, scenario, &cfg.integrate_options())?;
    let m = metrics(&traj);
    let mut w = create(out, "trajectory.csv", &mut files)?;
    write_trajectory_csv(&mut w, &traj)?;
    w.flush()?;
    json_file(out, "metrics.json", "metrics", cfg, &m, &mut files)?;
    Ok(Outcome {
        code: EXIT_OK,
        files,
        summary: format!(
            "{} samples, u in [{:.4}, {:.4}] V, {} containment violations, final sharing error {:.3e} p.u.",
            traj.len(),
            m.u_min,
            m.u_max,
            m.containment_violations,
            m.final_share_err
        ),
    })
}

pub fn cmd_equilibrium(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.microgrid()?;
    let rep = solve_equilibrium(&grid)?;
    let mut files = Vec::new();
    json_file(
        out,
        "equilibrium.json",
        "equilibrium",
        cfg,
        &rep,
        &mut files,
    )?;
    let lam: Vec<String> = rep
        .controller()
        .lambda
        .iter()
        .map(|l| format!("{l:.5}"))
        .collect();
    Ok(Outcome {
        code: EXIT_OK,
        files,
        summary: format!(
            "lambda [{}], residual {:.2e}, spread {:.2e} ({})",
            lam.join(", "),
            rep.residual,
            rep.consensus_spread,
            rep.method
        ),
    })
}

pub fn cmd_certify(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.microgrid()?;
    let rep = certify_monotonicity(&grid, &cfg.certificate, cfg.seed)?;
    let mut files = Vec::new();
    json_file(
        out,
        "certificate.json",
        "certificate",
        cfg,
        &rep,
        &mut files,
    )?;
    Ok(Outcome {
        code: if rep.pass { EXIT_OK } else { EXIT_CERTIFICATE },
        files,
        summary: format!(
            "certificate {}: min eig {:.3e}, {} of {} samples fail ({} solver errors)",
            if rep.pass { "passes" } else { "fails" },
            rep.min_eig,
            rep.failed_samples,
            rep.samples.len(),
            rep.solver_errors
        ),
    })
}

pub fn cmd_linearize(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.microgrid()?;
    let eq = solve_equilibrium(&grid)?;
    let rep = linearize(&grid, &eq)?;
    let mut files = Vec::new();
    json_file(
        out,
        "linearization.json",
        "linearization",
        cfg,
        &rep,
        &mut files,
    )?;
    let mut w = create(out, "spectrum.csv", &mut files)?;
    write_spectrum_csv(&mut w, &rep.eigenvalues)?;
    w.flush()?;
    Ok(Outcome {
        code: EXIT_OK,
        files,
        summary: format!(
            "{} eigenvalues, max Re {:.3e}, {} near zero",
            rep.eigenvalues.len(),
            rep.max_real,
            rep.near_zero
        ),
    })
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.microgrid()?;
    let rep = sweep_eigs(&grid, &cfg.sweep)?;
    let mut files = Vec::new();
    json_file(out, "sweep.json", "sweep", cfg, &rep, &mut files)?;
    let mut w = create(out, "sweep.csv", &mut files)?;
    write_sweep_csv(&mut w, &rep)?;
    w.flush()?;
    let failed = rep.records.iter().filter(|r| r.error.is_some()).count();
    let worst = rep
        .records
        .iter()
        .filter_map(|r| r.max_real)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Outcome {
        // A sweep is a batch; points that fail are recorded in the report.
        code: EXIT_OK,
        files,
        summary: format!(
            "{} points over {}, {failed} failed, worst max Re {worst:.3e}",
            rep.records.len(),
            rep.targets.join("+")
        ),
    })
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(
        cli.config.as_deref(),
        cli.preset.as_deref(),
        &overrides(cli),
    )?;
    std::fs::create_dir_all(&cli.out)?;
    let cfg_path = echo_config(&cfg, &cli.out)?;
    let mut outcome = match cli.command {
        Command::Simulate { reduced } => cmd_simulate(&cfg, &cli.out, reduced),
        Command::Equilibrium => cmd_equilibrium(&cfg, &cli.out),
        Command::Certify => cmd_certify(&cfg, &cli.out),
        Command::Linearize => cmd_linearize(&cfg, &cli.out),
        Command::Sweep => cmd_sweep(&cfg, &cli.out),
    }?;
    outcome.files.insert(0, cfg_path);
    outcome.summary = format!("config {}\n{}", cfg.hash(), outcome.summary);
    Ok(outcome)
}

/// Runs a parsed command line; returns the exit status.
pub fn run(cli: &Cli) -> u8 {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return EXIT_CONFIG;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: worker pool: {e}");
            return EXIT_CONFIG;
        }
    }
    match execute(cli) {
        Ok(outcome) => {
            // A closed stdout (e.g. piped into `head`) must not turn a
            // finished run into a failure.
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", outcome.summary);
            for f in &outcome.files {
                let _ = writeln!(stdout, "wrote {}", f.display());
            }
            outcome.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
