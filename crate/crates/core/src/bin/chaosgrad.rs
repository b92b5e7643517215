use chaosgrad::harness::{
    cascade_demo, emit_plots, reconstruct_field, run_convergence_experiment, run_verification_suite, ExperimentConfig,
};
use chaosgrad::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "chaosgrad", version, about = "Gradient reconstruction from imaginary multiplicative chaos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides mc.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides mc.replicas.
    #[arg(long)]
    replicas: Option<usize>,
    /// Overrides mc.workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Oracle-vs-Monte-Carlo suite; exit 1 if any check fails.
    Verify(RunArgs),
    /// Scale sweep with rel_L2 per scale and per average.
    Converge(RunArgs),
    /// Cascade invariance under a 2π/β shift of single weights.
    CascadeDemo {
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 12)]
        levels: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Estimates -<Γ, div F> for F = (a_1 f, ..., a_d f) from per-component estimates.
    ReconstructField {
        #[command(flatten)]
        run: RunArgs,
        /// Component amplitudes a_k, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,1")]
        amplitudes: Vec<f64>,
    },
    /// Plot-ready CSVs from a saved report JSON.
    EmitPlots {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(a: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.mc.seed = s;
    }
    if let Some(r) = a.replicas {
        cfg.mc.replicas = r;
    }
    if let Some(w) = a.workers {
        cfg.mc.workers = w;
    }
    if let Some(o) = &a.out {
        cfg.output.dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Verify(a) => {
            let cfg = match load(&a) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run_verification_suite(&cfg) {
                Ok(rep) => {
                    print!("{}", rep.summary());
                    match rep.write(&cfg.output_dir()) {
                        Ok(p) => println!("report: {}", p.display()),
                        Err(e) => return fail(e),
                    }
                    if rep.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Converge(a) => {
            let cfg = match load(&a) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run_convergence_experiment(&cfg) {
                Ok(rep) => {
                    print!("{}", rep.summary());
                    match rep.write(&cfg.output_dir()) {
                        Ok(p) => {
                            println!("report: {}", p.display());
                            ExitCode::SUCCESS
                        }
                        Err(e) => fail(e),
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::CascadeDemo { beta, levels, seed } => match cascade_demo(beta, levels, seed) {
            Ok(d) => {
                println!(
                    "cascade levels {} beta {} shift 2pi/beta = {:.6}: max deviation {:.3e}, field shift error {:.3e} over {} intervals",
                    d.levels, d.beta, d.shift, d.max_cell_deviation, d.max_field_shift_error, d.intervals_checked
                );
                if d.max_cell_deviation <= 1e-12 && d.max_field_shift_error <= 1e-12 {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::ReconstructField { run, amplitudes } => {
            let cfg = match load(&run) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match reconstruct_field(&cfg, &amplitudes) {
                Ok(r) => {
                    println!("eta {}  replicas {}  rel_L2 {:.4}", r.eta, r.rows.len(), r.rel_l2);
                    for row in r.rows.iter().take(10) {
                        println!(
                            "  replica {:>4}: estimate {:+.5} {:+.5}i  truth {:+.5}",
                            row.replica, row.estimate.re, row.estimate.im, row.truth
                        );
                    }
                    let dir = cfg.output_dir();
                    let write = || -> Result<PathBuf, Error> {
                        std::fs::create_dir_all(&dir)?;
                        let p = dir.join("reconstruction.json");
                        std::fs::write(&p, serde_json::to_string_pretty(&r)?)?;
                        Ok(p)
                    };
                    match write() {
                        Ok(p) => {
                            println!("written: {}", p.display());
                            ExitCode::SUCCESS
                        }
                        Err(e) => fail(e),
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::EmitPlots { report, out } => match emit_plots(&report, &out) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
