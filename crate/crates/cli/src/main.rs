use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use ravr_core::exact_oracle::ExactReport;
use ravr_core::experiment::config::default_init;
use ravr_core::experiment::export::export_csv_file;
use ravr_core::experiment::{compare, export_csv, load_config, report, run_experiment, verify_suite};
use ravr_core::{PolicyParams, TaskSpec};

#[derive(Parser)]
#[command(name = "ravr", version, about = "Answer-conditioned variational reasoning on enumerable tabular worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the exact identities on random worlds; one JSON line per world.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Run the experiment described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Paired comparison of two configs over seeds.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Exact distributions of a task under given or freshly initialized params.
    Enumerate {
        #[arg(long)]
        task: PathBuf,
        /// Parameter snapshot; defaults to the task's standard initialization.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Summary tables for a directory of metrics logs.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Selected columns of a metrics log as CSV.
    ExportCsv {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// `Ok(false)` means the command ran but its check failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Verify { seed, instances } => {
            let r = verify_suite(seed, instances)?;
            for row in &r.rows {
                println!("{}", serde_json::to_string(row)?);
            }
            eprint!("{}", r.summary_table());
            Ok(r.passed)
        }
        Command::Train { config, print_config } => {
            let cfg = load_config(&config)?;
            if print_config {
                print!("{}", cfg.to_toml_string());
                return Ok(true);
            }
            let out = run_experiment(&cfg)?;
            for run in &out.manifest.runs {
                println!(
                    "{} {} steps={} final_mu={:.6} -> {}",
                    run.run_id,
                    run.task_id,
                    run.steps,
                    run.final_mu_smoothed,
                    cfg.output_dir.join(&run.file).display()
                );
            }
            println!("manifest: {}", out.manifest_path.display());
            Ok(true)
        }
        Command::Compare { a, b, seeds, json } => {
            let ca = load_config(&a)?;
            let cb = load_config(&b)?;
            let r = compare(&ca, &cb, &seeds)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", r.to_table());
            }
            Ok(true)
        }
        Command::Enumerate {
            task,
            params,
            seed,
            json,
        } => {
            let task = TaskSpec::load(&task)?;
            let params = match params {
                Some(p) => PolicyParams::load_snapshot(&p)?,
                None => default_init(&task, seed)?,
            };
            if params.task_id() != task.task_id() {
                bail!("snapshot is for task '{}', not '{}'", params.task_id(), task.task_id());
            }
            let r = ExactReport::compute(&params, &task)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&exact_json(&task, &r))?);
            } else {
                print!("{}", exact_table(&task, &r));
            }
            Ok(true)
        }
        Command::Report { dir } => {
            print!("{}", report(&dir)?);
            Ok(true)
        }
        Command::ExportCsv { input, columns, out } => {
            let rows = match out {
                Some(path) => export_csv_file(&input, &columns, &path)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => export_csv(&input, &columns, std::io::stdout().lock())?,
            };
            eprintln!("{rows} rows");
            Ok(true)
        }
    }
}

fn exact_json(task: &TaskSpec, r: &ExactReport) -> serde_json::Value {
    let paths: Vec<_> = r
        .paths
        .iter()
        .enumerate()
        .map(|(i, z)| {
            json!({
                "path": task.render_path(z),
                "golden": task.is_golden(z),
                "prior": r.prior[i],
                "posterior": r.posterior[i],
                "amortized": r.amortized[i],
                "utility": r.utilities[i],
            })
        })
        .collect();
    json!({
        "task_id": task.task_id(),
        "mu": r.mu,
        "var_s": r.var_s,
        "e_post_s": r.e_post_s,
        "kl_post_prior": r.kl_post_prior,
        "elbo": r.elbo,
        "log_mu": r.log_mu,
        "paths": paths,
    })
}

fn exact_table(task: &TaskSpec, r: &ExactReport) -> String {
    let mut out = format!("{task}\n");
    out.push_str(&format!(
        "{:<36} {:>11} {:>11} {:>11} {:>11}\n",
        "path", "prior", "posterior", "amortized", "s"
    ));
    for (i, z) in r.paths.iter().enumerate() {
        let mark = if task.is_golden(z) { " *" } else { "" };
        out.push_str(&format!(
            "{:<36} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e}{mark}\n",
            task.render_path(z),
            r.prior[i],
            r.posterior[i],
            r.amortized[i],
            r.utilities[i]
        ));
    }
    out.push_str(&format!(
        "mu={:.6e} var_s={:.6e} e_post_s={:.6e} kl_post_prior={:.6e} elbo={:.6} log_mu={:.6}\n",
        r.mu, r.var_s, r.e_post_s, r.kl_post_prior, r.elbo, r.log_mu
    ));
    out
}
