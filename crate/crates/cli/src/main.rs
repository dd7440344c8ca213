//! Experiment driver: database generation and seeded scheme runs with CSV
//! reports.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use locsse::alloc::DeltaMode;
use locsse::runner::{run, write_csv, RunError, RunSpec, SchemeKind};
use locsse::workload::{gen_db, DbSpec, Dist, Mix};

const EXIT_OVERFLOW: u8 = 3;
const EXIT_BAD_SPEC: u8 = 4;

#[derive(Parser)]
#[command(name = "locsse", version, about = "Locality-aware searchable encryption workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes a synthetic database file.
    GenDb(GenDb),
    /// Sets up a scheme, runs a checked workload and writes a CSV report.
    Run(Run),
}

#[derive(Args)]
struct DbArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Identifier budget N.
    #[arg(long, default_value_t = 1 << 14)]
    n: u64,
    /// uniform(L), zipf(S), single(L) or adversarial-script(PATH).
    #[arg(long, default_value = "uniform(16)")]
    dist: Dist,
    /// Fraction of N filled at setup.
    #[arg(long, default_value_t = 0.5)]
    fill: f64,
    /// Caps every list at N / (log2 N)^d for this d.
    #[arg(long)]
    cap_longest: Option<f64>,
}

#[derive(Args)]
struct GenDb {
    #[command(flatten)]
    db: DbArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    db: DbArgs,
    #[arg(long, default_value = "layered")]
    scheme: SchemeKind,
    /// Page size in identifiers.
    #[arg(long, default_value_t = 16)]
    p: usize,
    /// Operations per trial (trials per campaign for alloc-stats).
    #[arg(long, default_value_t = 1000)]
    ops: usize,
    /// Search, add and delete percentages.
    #[arg(long, default_value = "40,40,20")]
    mix: Mix,
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[arg(long, default_value_t = 4.0)]
    load_const: f64,
    #[arg(long, default_value = "logloglog")]
    delta_mode: DeltaMode,
    #[arg(long, default_value_t = 128)]
    lambda: u64,
    /// Round trips per layered update: 1 piggybacks the write on the next request.
    #[arg(long, default_value_t = 2)]
    rtt: u8,
    /// ORAM level count.
    #[arg(long, default_value_t = 2)]
    c: usize,
    /// ORAM block size in words.
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn db_spec(a: &DbArgs) -> DbSpec {
    DbSpec {
        fill: a.fill,
        cap_longest: a.cap_longest,
        ..DbSpec::new(a.n, a.dist.clone())
    }
}

fn gen(a: &GenDb) -> Result<(), RunError> {
    let g = gen_db(a.db.seed, &db_spec(&a.db))?;
    g.db.write_file(&a.out)?;
    log::info!("{} keywords, {} ids", g.db.num_keywords(), g.db.total_ids());
    Ok(())
}

fn spec_of(a: &Run) -> RunSpec {
    RunSpec {
        seed: a.db.seed,
        dist: a.db.dist.clone(),
        fill: a.db.fill,
        cap_longest: a.db.cap_longest,
        ops: a.ops,
        mix: a.mix,
        alpha: a.alpha,
        d: a.d,
        load_const: a.load_const,
        delta_mode: a.delta_mode,
        lambda: a.lambda,
        rtt: a.rtt,
        c: a.c,
        beta: a.beta,
        trials: a.trials,
        ..RunSpec::new(a.scheme, a.db.n, a.p)
    }
}

fn execute(a: &Run) -> Result<Option<String>, RunError> {
    let report = run(&spec_of(a))?;
    let out: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(File::create(path).map_err(locsse::Error::from)?),
        None => Box::new(io::stdout().lock()),
    };
    write_csv(out, &report.rows).map_err(|e| RunError::Scheme(locsse::Error::Io(e.into())))?;
    Ok(report.overflow)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_SPEC } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::GenDb(a) => gen(a).map(|_| None),
        Cmd::Run(a) => execute(a),
    };
    match result {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(overflow)) => {
            eprintln!("overflow: {overflow}");
            ExitCode::from(EXIT_OVERFLOW)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
