use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use compbo_cli::{
    read_csv, run_sweep, summarise, write_csv, write_summary, ExperimentConfig, ExperimentTuple, RunRecord,
};
use compbo_core::bench::TaskKind;
use compbo_core::bo::{BoConfig, OptimizerSpec};
use compbo_core::{AcqForm, AcqKind};
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "compbo", version, about = "Batch Bayesian optimisation experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one task/optimiser pair for a single seed and print its CSV trace.
    Run {
        #[arg(long, default_value = "levy")]
        task: String,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value = "ucb")]
        acq: AcqKind,
        #[arg(long, default_value = "comp")]
        form: AcqForm,
        #[arg(long, default_value = "cadam")]
        optimizer: String,
        #[arg(long)]
        q: Option<usize>,
        /// Number of acquisition steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Inner optimiser iterations per restart.
        #[arg(long)]
        t_opt: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with loop settings; command-line flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_timing: bool,
    },
    /// Run every (tuple, seed) pair of an experiment config.
    Sweep {
        config: PathBuf,
        /// Output directory for results.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        no_timing: bool,
    },
    /// Aggregate a results CSV into a JSON summary.
    Summarise {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    ListOptimisers,
    ListTasks,
}

fn all_ok(records: &[RunRecord]) -> ExitCode {
    for r in records.iter().filter(|r| !r.is_ok()) {
        eprintln!("tuple {} seed {}: {}", r.tuple_id, r.seed, r.status);
    }
    if records.iter().all(RunRecord::is_ok) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run { task, dim, acq, form, optimizer, q, steps, t_opt, seed, config, out, no_timing } => {
            let mut bo = match config {
                Some(p) => serde_json::from_str::<BoConfig>(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => BoConfig::default(),
            };
            bo.kind = acq;
            bo.form = form;
            bo.optimizer = OptimizerSpec::from_name(&optimizer).map_err(anyhow::Error::msg)?;
            bo.q = q.unwrap_or(bo.q);
            bo.n_steps = steps.unwrap_or(bo.n_steps);
            bo.t_opt = t_opt.unwrap_or(bo.t_opt);
            let cfg = ExperimentConfig {
                tuples: vec![ExperimentTuple { task, dim, seeds: None, bo }],
                seeds: vec![seed],
                timing: !no_timing,
                ..ExperimentConfig::default()
            };
            cfg.validate()?;
            let records = run_sweep(&cfg)?;
            match out {
                Some(p) => write_csv(&records, BufWriter::new(File::create(&p)?))?,
                None => write_csv(&records, io::stdout().lock())?,
            }
            Ok(all_ok(&records))
        }
        Cmd::Sweep { config, out, jobs, no_timing } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = ExperimentConfig::from_json(&text)?;
            if jobs.is_some() {
                cfg.jobs = jobs;
            }
            if no_timing {
                cfg.timing = false;
            }
            cfg.validate()?;
            let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("results"));
            fs::create_dir_all(&dir)?;
            let records = run_sweep(&cfg)?;
            write_csv(&records, BufWriter::new(File::create(dir.join("results.csv"))?))?;
            write_summary(&summarise(&records), BufWriter::new(File::create(dir.join("summary.json"))?))?;
            eprintln!("{} runs written to {}", records.len(), dir.display());
            Ok(all_ok(&records))
        }
        Cmd::Summarise { csv, out } => {
            let records = read_csv(File::open(&csv).with_context(|| format!("opening {}", csv.display()))?)?;
            if records.is_empty() {
                bail!("{} holds no runs", csv.display());
            }
            let summary = summarise(&records);
            match out {
                Some(p) => write_summary(&summary, BufWriter::new(File::create(&p)?))?,
                None => write_summary(&summary, io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ListOptimisers => {
            for name in OptimizerSpec::names() {
                let forms: Vec<&str> = match OptimizerSpec::from_name(name) {
                    Ok(spec) => AcqForm::ALL.iter().filter(|f| spec.supports(**f)).map(|f| f.name()).collect(),
                    Err(_) => Vec::new(),
                };
                println!("{name}\t{}", forms.join(","));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ListTasks => {
            for kind in TaskKind::ALL {
                let (lo, hi) = kind.bounds();
                println!("{}\t[{lo}, {hi}]^d", kind.name());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
