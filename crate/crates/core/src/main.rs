use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedecider::datagen::{export_csv_file, generate_world};
use fedecider::experiment::{emit_results, read_metric_csv, run_experiment, ExperimentConfig, METRICS_FILE};
use fedecider::oracle::CaseStatus;
use fedecider::{verify, Result};

#[derive(Parser)]
#[command(name = "fedecider", version, about = "Federated cross-domain recommendation simulator")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = "FEDECIDER_OUTPUT_ROOT", default_value = "results", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Override the config's method.
        #[arg(long)]
        method: Option<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the oracle suite; exits non-zero on any failed case.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// JSON-lines report path (stdout summary is always printed).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate the synthetic world and export it as interaction CSV.
    GenData {
        /// Config supplying world parameters; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize test metrics of finished run directories.
    Report { runs: Vec<PathBuf> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, method, seed } => {
            let mut cfg = load_config(Some(&config))?;
            if let Some(m) = method {
                cfg.method = m.parse()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let dir = cfg
                .output_dir
                .clone()
                .unwrap_or_else(|| cli.output_root.join(&cfg.run_id));
            let archive = run_experiment(&cfg)?;
            emit_results(&archive, &dir)?;
            let s = &archive.summary;
            println!("{} seed {} -> {}", s.method, s.seed, dir.display());
            for (label, m) in [
                ("final", &s.final_test),
                ("last round", &s.last_round_test),
                ("best val round", &s.best_val_round_test),
            ] {
                let cells: Vec<String> = m.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
                println!("  {label:<15} {}", cells.join("  "));
            }
            println!("  best val round {}", s.best_val_round);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { seed, report } => {
            let records = verify::run_all(seed)?;
            if let Some(path) = report {
                let mut f = std::fs::File::create(path)?;
                for r in &records {
                    serde_json::to_writer(&mut f, r)?;
                    f.write_all(b"\n")?;
                }
            }
            let mut by_case: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
            for r in &records {
                let slot = match r.status {
                    CaseStatus::Pass => 0,
                    CaseStatus::Skip => 1,
                    CaseStatus::Fail => 2,
                };
                by_case.entry(&r.case).or_default()[slot] += 1;
            }
            let mut failed = false;
            for (case, [pass, skip, fail]) in &by_case {
                failed |= *fail > 0;
                let verdict = if *fail > 0 { "FAIL" } else { "PASS" };
                println!("{verdict} {case}: {pass} pass, {skip} skip, {fail} fail");
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let world = generate_world(&cfg.world())?;
            export_csv_file(&world.domains, &out)?;
            let users: usize = world.domains.iter().map(|d| d.sequences.len()).sum();
            println!("wrote {} users in {} domains to {}", users, world.domains.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs } => {
            println!("{:<28} {:<11} {:<6} {:>8} {:>8} {:>8} {:>8}", "run", "method", "round", "H@5", "H@10", "N@5", "N@10");
            for dir in runs {
                let rows = read_metric_csv(&dir.join(METRICS_FILE))?;
                // (run, method, round) -> metric -> (sum, count)
                let mut acc: BTreeMap<(String, String, String), BTreeMap<String, (f64, usize)>> = BTreeMap::new();
                for r in rows.into_iter().filter(|r| r.split == "test") {
                    let key = (r.run_id, r.method, r.round);
                    let e = acc.entry(key).or_default().entry(r.metric).or_default();
                    e.0 += r.value;
                    e.1 += 1;
                }
                let last = acc
                    .keys()
                    .filter_map(|k| k.2.parse::<usize>().ok())
                    .max();
                for ((run, method, round), m) in &acc {
                    if round != "final" && round.parse::<usize>().ok() != last {
                        continue;
                    }
                    let get = |k: &str| m.get(k).map_or(f64::NAN, |(s, n)| s / *n as f64);
                    println!(
                        "{:<28} {:<11} {:<6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                        run, method, round, get("H@5"), get("H@10"), get("N@5"), get("N@10")
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
