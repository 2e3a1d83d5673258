//! Command-line driver: train a certificate, verify a checkpoint, simulate
//! or evaluate the closed loop, and print the LQR reference gain.

mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use qsr_core::certificates::{self, CertificateBundle};
use qsr_core::error::Error;
use qsr_core::losses::Objective;
use qsr_core::simeval::{self, CostMode};
use qsr_core::trainer;
use qsr_core::verifier;
use qsr_core::{Mat, Plant};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qsr", version, about = "Neural QSR dissipativity certificates: train, verify, simulate, evaluate")]
struct Cli {
    /// Config file (key = value lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Plant name override: circuit | pendulum | rodcart | pendulum-dynamic.
    #[arg(long, global = true)]
    plant: Option<String>,
    /// Seed override for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Bundle checkpoint path (verify/simulate/evaluate).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the counterexample-guided training loop and write a run directory.
    Train,
    /// Verify a checkpoint and print the verdict line.
    Verify,
    /// Simulate the closed loop from one initial state and write a trajectory CSV.
    Simulate {
        /// Comma-separated initial state; random in the region when omitted.
        #[arg(long)]
        x0: Option<String>,
    },
    /// Run the multi-trial cost protocol and write a cost summary CSV.
    Evaluate,
    /// Print the LQR gain and Riccati residual for the plant linearization.
    Lqr,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_)
                | Error::Singular { .. }
                | Error::Divergence { .. }
                | Error::BaselineUnavailable(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &cli.plant {
        cfg.plant_name = p.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate()?;

    match &cli.cmd {
        Cmd::Train => cmd_train(&cfg),
        Cmd::Verify => cmd_verify(&cfg, cli.checkpoint.as_deref()),
        Cmd::Simulate { x0 } => cmd_simulate(&cfg, cli.checkpoint.as_deref(), x0.as_deref()),
        Cmd::Evaluate => cmd_evaluate(&cfg, cli.checkpoint.as_deref()),
        Cmd::Lqr => cmd_lqr(&cfg),
    }
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.out_dir)
}

fn load_bundle(path: Option<&Path>, plant: &Plant) -> Result<CertificateBundle, Error> {
    let path = path.ok_or_else(|| Error::contract("--checkpoint is required"))?;
    let file = std::fs::File::open(path)?;
    let bundle = CertificateBundle::read_checkpoint(std::io::BufReader::new(file))?;
    if bundle.state_dim != plant.state_dim() || bundle.input_dim != plant.input_dim() {
        return Err(Error::shape(format!(
            "checkpoint is ({}, {}) but plant {} is ({}, {})",
            bundle.state_dim,
            bundle.input_dim,
            plant.name(),
            plant.state_dim(),
            plant.input_dim()
        )));
    }
    Ok(bundle)
}

fn cmd_train(cfg: &RunConfig) -> Result<u8, Error> {
    let plant = cfg.plant()?;
    let weights = cfg.loss_weights();
    let objective = Objective::state_input_norm(plant.state_dim(), plant.input_dim());
    let tc = cfg.train_config();

    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.txt"), cfg.echo())?;

    let outcome = trainer::train(&plant, &tc, &weights, &objective)?;

    let mut hist = String::from("iteration,L_d,L_v,L_t,L_r,L_c,total,dataset\n");
    for r in &outcome.history {
        hist.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}\n",
            r.iteration, r.dissipativity, r.storage, r.delta, r.r_pd, r.shaping, r.total,
            r.dataset_size
        ));
    }
    std::fs::write(dir.join("loss_history.csv"), hist)?;

    let mut attempts = String::new();
    for a in &outcome.attempts {
        let mut f = std::fs::File::create(dir.join(format!("checkpoint_iter{}.txt", a.iteration)))?;
        a.bundle.write_checkpoint(&mut f)?;
        attempts.push_str(&format!("iter {} {}\n", a.iteration, a.verdict.to_line()));
    }
    std::fs::write(dir.join("attempts.txt"), attempts)?;

    let mut f = std::fs::File::create(dir.join("bundle.txt"))?;
    outcome.bundle.write_checkpoint(&mut f)?;
    std::fs::write(dir.join("verdict.txt"), format!("{}\n", outcome.verdict.to_line()))?;

    println!("{}", outcome.verdict.to_line());
    println!(
        "run dir: {} (iterations: {}, dataset: {} points)",
        dir.display(),
        outcome.history.len(),
        outcome.dataset.len()
    );
    Ok(if outcome.certified() { 0 } else { 2 })
}

fn cmd_verify(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<u8, Error> {
    let plant = cfg.plant()?;
    let bundle = load_bundle(checkpoint, &plant)?;
    let verdict = verifier::verify(&bundle, &plant, cfg.delta, cfg.eps_origin, cfg.budget)?;
    println!("{}", verdict.to_line());
    Ok(if verdict.is_certified() { 0 } else { 2 })
}

fn cmd_simulate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    x0: Option<&str>,
) -> Result<u8, Error> {
    let plant = cfg.plant()?;
    let bundle = load_bundle(checkpoint, &plant)?;
    let x0: Vec<f64> = match x0 {
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad x0 component '{t}'")))
            })
            .collect::<Result<_, _>>()?,
        None => trainer::sample_region(&plant, 1, cfg.seed, cfg.eps_origin)?.points()[0].clone(),
    };
    if x0.len() != plant.state_dim() {
        return Err(Error::shape("x0 length != state dimension"));
    }

    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("trajectory.csv");
    let mut f = std::fs::File::create(&path)?;
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=plant.state_dim()).map(|i| format!("x{i}")))
        .chain((1..=plant.input_dim()).map(|i| format!("u{i}")))
        .chain(["V".to_string(), "w".to_string(), "runcost".to_string()])
        .collect();
    writeln!(f, "{}", header.join(","))?;

    let norm0 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm0 < 1e-12 {
        // Equilibrium start: a single row, no integration needed.
        let u = certificates::controller(&bundle, &x0)?;
        write_traj_row(&mut f, &bundle, 0.0, &x0, &u)?;
        println!("wrote {} (equilibrium start)", path.display());
        return Ok(0);
    }

    let ctrl = |x: &[f64]| certificates::controller(&bundle, x);
    let l = |x: &[f64], u: &[f64]| {
        x.iter().map(|v| v * v).sum::<f64>() + u.iter().map(|v| v * v).sum::<f64>()
    };
    let traj = simeval::simulate(&plant, ctrl, &x0, cfg.sim_h, cfg.sim_t_final, l)?;
    for (i, (x, u)) in traj.states.iter().zip(&traj.inputs).enumerate() {
        write_traj_row(&mut f, &bundle, i as f64 * traj.h, x, u)?;
    }
    if traj.left_region {
        eprintln!("warning: trajectory left the region of interest mid-run");
    }
    println!(
        "wrote {} ({} steps, final |x| = {:.3e})",
        path.display(),
        traj.states.len() - 1,
        traj.final_norm()
    );
    Ok(0)
}

fn write_traj_row(
    f: &mut std::fs::File,
    bundle: &CertificateBundle,
    t: f64,
    x: &[f64],
    u: &[f64],
) -> Result<(), Error> {
    let v = certificates::storage_value(bundle, x)?;
    let w = certificates::supply_rate(bundle, x, u)?;
    let run: f64 =
        x.iter().map(|a| a * a).sum::<f64>() + u.iter().map(|a| a * a).sum::<f64>();
    let row: Vec<String> = std::iter::once(format!("{t:.6}"))
        .chain(x.iter().map(|v| format!("{v:.9e}")))
        .chain(u.iter().map(|v| format!("{v:.9e}")))
        .chain([format!("{v:.9e}"), format!("{w:.9e}"), format!("{run:.9e}")])
        .collect();
    writeln!(f, "{}", row.join(",")).map_err(Error::from)
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<u8, Error> {
    let plant = cfg.plant()?;
    let bundle = load_bundle(checkpoint, &plant)?;
    let mode = if cfg.sim_paper_sum { CostMode::SampleSum } else { CostMode::Integral };
    let ctrl = |x: &[f64]| certificates::controller(&bundle, x);
    let trials = simeval::evaluate_trials(
        &plant,
        ctrl,
        cfg.sim_trials,
        cfg.seed,
        cfg.sim_h,
        cfg.sim_t_final,
        cfg.sim_conv_tol,
        mode,
    )?;

    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("costs.csv");
    let mut out = String::from("trial,");
    out.push_str(
        &(1..=plant.state_dim()).map(|i| format!("x0_{i}")).collect::<Vec<_>>().join(","),
    );
    out.push_str(",cost,converged\n");
    for (i, t) in trials.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{:.9e},{}\n",
            i,
            t.x0.iter().map(|v| format!("{v:.9e}")).collect::<Vec<_>>().join(","),
            t.cost,
            t.converged
        ));
    }
    std::fs::write(&path, out)?;

    let costs: Vec<f64> = trials.iter().map(|t| t.cost).collect();
    let (mean, std) = simeval::mean_std(&costs);
    let converged = trials.iter().filter(|t| t.converged).count();
    println!(
        "cost {mean:.4} +/- {std:.4} over {} trials ({converged} converged); wrote {}",
        trials.len(),
        path.display()
    );
    Ok(0)
}

fn cmd_lqr(cfg: &RunConfig) -> Result<u8, Error> {
    let plant = cfg.plant()?;
    let (a, b) = plant.linearization();
    let sol = simeval::lqr_baseline(
        &a,
        &b,
        &Mat::identity(plant.state_dim()),
        &Mat::identity(plant.input_dim()),
    )?;
    for r in 0..sol.k.rows() {
        let row: Vec<String> =
            (0..sol.k.cols()).map(|c| format!("{:.12e}", sol.k.get(r, c))).collect();
        println!("K[{r}] = [{}]", row.join(", "));
    }
    println!("riccati residual = {:.3e}", sol.residual);
    Ok(0)
}
