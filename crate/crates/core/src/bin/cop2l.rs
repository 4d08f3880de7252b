use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cop2l::continual::ENGINE_VERSION;
use cop2l::experiment::{render_bound_figure, run_experiment, verify_certificate, ExperimentConfig, RunOptions, VerifyOutcome};

#[derive(Parser, Debug)]
#[command(name = "cop2l", version, about = "Self-certified continual learning with Continual Pick-to-Learn")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every (method, seed) cell of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Cells executed concurrently (0 = one per core).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Replace the config's seed list, e.g. `--seed-override 3,4,5`.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        /// Output directory (takes precedence over COP2L_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild a run from its compression record and check its certificates.
    Verify {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Render the bound-versus-test-error figure of a metrics CSV.
    Render {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the engine version and, given a config, its hash and cells.
    Info {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            jobs,
            seed_override,
            out,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            if let Some(seeds) = seed_override {
                let text = match std::fs::read_to_string(&config) {
                    Ok(t) => t,
                    Err(e) => return fail(e),
                };
                let mut value: toml::Table = match toml::from_str(&text) {
                    Ok(v) => v,
                    Err(e) => return fail(e),
                };
                if let Some(run) = value.get_mut("run").and_then(|r| r.as_table_mut()) {
                    run.insert(
                        "seeds".into(),
                        toml::Value::Array(seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect()),
                    );
                }
                let base_dir = cfg.base_dir.clone();
                cfg = match ExperimentConfig::from_toml(&toml::to_string(&value).unwrap_or_default()) {
                    Ok(c) => c,
                    Err(e) => return fail(e),
                };
                cfg.base_dir = base_dir;
            }
            let out_dir = cfg.output_dir(out.as_deref());
            match run_experiment(&cfg, &RunOptions { out_dir: out_dir.clone(), jobs }) {
                Ok(report) if report.is_complete() => {
                    println!("config_hash {}", report.config_hash);
                    for c in &report.cells {
                        let forgetting = c.average_forgetting.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into());
                        let bound = c.mean_bound.map(|b| format!("{b:.4}")).unwrap_or_else(|| "-".into());
                        println!(
                            "{:<9} seed {:<6} accuracy {:.4} forgetting {forgetting} mean bound {bound}",
                            c.method.name(),
                            c.seed,
                            c.average_accuracy
                        );
                    }
                    println!("wrote {}", out_dir.display());
                    ExitCode::SUCCESS
                }
                Ok(report) => {
                    for (m, s, e) in &report.failures {
                        eprintln!("error: {} seed {s}: {e}", m.name());
                    }
                    fail(format!("{} cell(s) failed; outputs are incomplete", report.failures.len()))
                }
                Err(e) => fail(e),
            }
        }
        Command::Verify { record, config } => match verify_certificate(&record, &config) {
            Ok(VerifyOutcome::Match) => {
                println!("ok: reconstruction and certificates are identical");
                ExitCode::SUCCESS
            }
            Ok(outcome @ VerifyOutcome::Mismatch(_)) => {
                if let VerifyOutcome::Mismatch(diffs) = &outcome {
                    for d in diffs {
                        println!("mismatch: {d}");
                    }
                }
                ExitCode::from(outcome.exit_code() as u8)
            }
            Err(e) => fail(e),
        },
        Command::Render { metrics, out } => match render_bound_figure(&metrics, &out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::Info { config } => {
            println!("cop2l {ENGINE_VERSION}");
            if let Some(path) = config {
                let cfg = match ExperimentConfig::load(&path) {
                    Ok(c) => c,
                    Err(e) => return fail(e),
                };
                println!("config_hash {}", cfg.hash());
                println!("scenario {:?}", cfg.scenario());
                let methods: Vec<&str> = cfg.methods().iter().map(|m| m.name()).collect();
                println!("methods {}", methods.join(","));
                println!("seeds {:?}", cfg.run.seeds);
                println!("output_dir {}", cfg.output_dir(None).display());
            }
            ExitCode::SUCCESS
        }
    }
}
