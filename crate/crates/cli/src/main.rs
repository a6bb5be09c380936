mod commands;
mod config;
mod models;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{parse_grid, ModelKind, PoolMethod, Settings};

/// Local predictive ability of forecasting experts: fit GP models to
/// historical log scores, predict local ELPD and pool experts.
#[derive(Debug, Parser)]
#[command(name = "lpa", version)]
struct Cli {
    /// TOML settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for chains and replications.
    #[arg(long, global = true, env = "LPA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct SamplerArgs {
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Sampling iterations per chain.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct DataArgs {
    /// Score file of one expert (columns id, log_score, predictive_sd and
    /// pooling variables). Repeat for several experts.
    #[arg(long = "expert-file", required = true)]
    expert_files: Vec<PathBuf>,
    /// Pooling columns to use, comma separated (default: all other columns).
    #[arg(long, value_delimiter = ',')]
    pooling_vars: Option<Vec<String>>,
}

#[derive(Debug, Args, Default)]
struct PoolArgs {
    /// Pooling method; repeat to evaluate several (default: all).
    #[arg(long, value_enum)]
    method: Vec<PoolMethod>,
    /// Discrimination factor for softmax_fixed_c.
    #[arg(long)]
    c: Option<f64>,
    /// Candidate factors for dynamic c, comma separated.
    #[arg(long, value_parser = parse_grid)]
    c_grid: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate datasets from the one-expert scenario with a known ELPD.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Fit a model to each expert file and save posterior draws.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Summarize ELPD posteriors at query points.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Draws file per expert (default: <out>/<expert>.draws).
        #[arg(long)]
        fit: Vec<PathBuf>,
        /// Query file with the pooling columns and predictive_sd (default:
        /// the training points).
        #[arg(long)]
        query: Option<PathBuf>,
    },
    /// Pool experts at evaluation points using their ELPD posteriors.
    Pool {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        fit: Vec<PathBuf>,
        /// Score file of evaluation rows per expert, aligned by row.
        #[arg(long, required = true)]
        query: Vec<PathBuf>,
        #[command(flatten)]
        pool: PoolArgs,
    },
    /// Expanding-window one-step-ahead evaluation of benchmarks, the GP model
    /// and pooling methods.
    Backtest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        pool: PoolArgs,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        refit_every: Option<usize>,
    },
    /// Replicated simulation study: MISE and MILS of both GP models.
    Evaluate {
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        chisq_replications: Option<usize>,
    },
}

fn apply_sampler(s: &mut Settings, a: &SamplerArgs) {
    if let Some(m) = a.model {
        s.model = m;
    }
    if let Some(v) = a.draws {
        s.hmc.draws = v;
    }
    if let Some(v) = a.warmup {
        s.hmc.warmup = v;
    }
    if let Some(v) = a.chains {
        s.hmc.chains = v;
    }
}

fn apply_data(s: &mut Settings, a: &DataArgs) {
    if let Some(p) = &a.pooling_vars {
        s.pooling_vars = Some(p.clone());
    }
}

fn apply_pool(s: &mut Settings, a: &PoolArgs) {
    if !a.method.is_empty() {
        s.pool.methods = a.method.clone();
    }
    if let Some(c) = a.c {
        s.pool.c = c;
    }
    if let Some(g) = &a.c_grid {
        s.pool.c_grid = g.clone();
    }
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if let Some(out) = &cli.out {
        s.out = out.clone();
    }
    match &cli.command {
        Command::Simulate { n, replications } => {
            if let Some(n) = n {
                s.simulate.n = *n;
            }
            if let Some(r) = replications {
                s.simulate.replications = *r;
            }
        }
        Command::Fit { data, sampler } | Command::Predict { data, sampler, .. } => {
            apply_data(&mut s, data);
            apply_sampler(&mut s, sampler);
        }
        Command::Pool { data, sampler, pool, .. } => {
            apply_data(&mut s, data);
            apply_sampler(&mut s, sampler);
            apply_pool(&mut s, pool);
        }
        Command::Backtest { data, sampler, pool, start, refit_every } => {
            apply_data(&mut s, data);
            apply_sampler(&mut s, sampler);
            apply_pool(&mut s, pool);
            if let Some(v) = start {
                s.backtest.start = *v;
            }
            if let Some(v) = refit_every {
                s.backtest.refit_every = *v;
            }
        }
        Command::Evaluate { sampler, n, replications, chisq_replications } => {
            apply_sampler(&mut s, sampler);
            if let Some(n) = n {
                s.simulate.n = *n;
            }
            if let Some(r) = replications {
                s.simulate.replications = *r;
            }
            if let Some(r) = chisq_replications {
                s.simulate.chisq_replications = *r;
            }
        }
    }
    s.hmc.seed = s.seed;
    s.validate()?;
    Ok(s)
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global()?;
    }
    let s = settings(cli)?;
    let ctx = commands::Context::new(&s);
    match &cli.command {
        Command::Simulate { .. } => commands::simulate(&ctx),
        Command::Fit { data, .. } => commands::fit(&ctx, &data.expert_files),
        Command::Predict { data, fit, query, .. } => commands::predict(&ctx, &data.expert_files, fit, query.as_deref()),
        Command::Pool { data, fit, query, .. } => commands::pool(&ctx, &data.expert_files, fit, query),
        Command::Backtest { data, .. } => commands::backtest(&ctx, &data.expert_files),
        Command::Evaluate { .. } => commands::evaluate(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: sampler diagnostics failed (divergences above 5% or split-R̂ above 1.05); outputs were written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
