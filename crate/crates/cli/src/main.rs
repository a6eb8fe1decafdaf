// SPDX-License-Identifier: Apache-2.0

//! `bench`: microbenchmarks, engine comparisons and crash-state checks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pmsplit::bench::{self, BenchConfig, EngineKind, Format, Workload, DEVICE_SIZE_ENV};
use pmsplit::crashcheck::{self, CheckOptions, CrashPlan};
use pmsplit::kfs::Fault;
use pmsplit::pmem::Policy;
use pmsplit::script::Script;
use pmsplit::usplit::Mode;

#[derive(Parser)]
#[command(name = "bench", version, about = "Benchmarks and crash checks for the split PM file system")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one workload on one engine.
    Run {
        #[arg(long, value_parser = parse_engine)]
        engine: EngineKind,
        #[command(flatten)]
        params: Params,
    },
    /// Run one workload on several engines; throughput is normalized to
    /// the first.
    Compare {
        #[arg(long = "engine", value_parser = parse_engine, num_args = 1.., required = true)]
        engines: Vec<EngineKind>,
        #[command(flatten)]
        params: Params,
    },
    /// Explore crash states of a script.
    Crashcheck(CrashArgs),
}

#[derive(Args)]
struct Params {
    #[arg(long, value_parser = parse_workload)]
    workload: Workload,
    #[arg(long, value_parser = parse_size, default_value = "32M")]
    file_size: u64,
    #[arg(long, value_parser = parse_size, default_value = "4096")]
    op_size: u64,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Adds a modeled time of this many ns per persisted byte (reporting only).
    #[arg(long)]
    latency_ns_per_byte: Option<f64>,
    #[arg(long, env = DEVICE_SIZE_ENV, value_parser = parse_size, default_value = "256M")]
    device_size: u64,
    /// Result file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; defaults from the `--out` extension, else csv.
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
}

impl Params {
    fn config(&self, engine: EngineKind) -> BenchConfig {
        BenchConfig {
            file_size: self.file_size,
            op_size: self.op_size,
            iterations: self.iterations,
            seed: self.seed,
            threads: self.threads,
            latency_ns_per_byte: self.latency_ns_per_byte,
            device_size: self.device_size,
            ..BenchConfig::new(engine, self.workload.clone())
        }
    }

    fn format(&self) -> Format {
        self.format.unwrap_or_else(|| match self.out.as_ref().and_then(|p| p.extension()) {
            Some(e) if e == "json" => Format::Json,
            _ => Format::Csv,
        })
    }

    fn emit(&self, results: &[bench::BenchResult]) -> Result<()> {
        match &self.out {
            Some(p) => bench::emit_to(results, self.format(), p).with_context(|| format!("writing {}", p.display())),
            None => Ok(bench::emit(results, self.format(), &mut std::io::stdout().lock())?),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    StrictEpoch,
    Adversarial,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SkipJournalCommit,
    SkipLogFence,
    SkipRelinkDealloc,
}

#[derive(Args)]
struct CrashArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, value_enum, default_value = "strict-epoch")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 5000)]
    budget: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    inject: Vec<FaultArg>,
    /// Check only the crash plan stored in this JSON file.
    #[arg(long)]
    replay_plan: Option<PathBuf>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_engine(s: &str) -> Result<EngineKind, String> {
    s.parse()
}

fn parse_workload(s: &str) -> Result<Workload, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_size(s: &str) -> Result<u64, String> {
    bench::parse_size(s).ok_or_else(|| format!("bad size {s:?}"))
}

fn crashcheck_cmd(a: &CrashArgs) -> Result<bool> {
    let script = Script::load(&a.script).with_context(|| format!("loading {}", a.script.display()))?;
    let mut opts = CheckOptions::default().policy(match a.policy {
        PolicyArg::StrictEpoch => Policy::StrictEpoch,
        PolicyArg::Adversarial => Policy::Adversarial,
    });
    opts.budget = a.budget;
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    for f in &a.inject {
        opts = opts.inject(match f {
            FaultArg::SkipJournalCommit => Fault::SkipJournalCommit,
            FaultArg::SkipLogFence => Fault::SkipLogFence,
            FaultArg::SkipRelinkDealloc => Fault::SkipRelinkDealloc,
        });
    }
    let run = match &a.replay_plan {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let plan: CrashPlan = serde_json::from_str(&text).context("parsing crash plan")?;
            crashcheck::replay_plan(&script, a.mode, &opts, &plan)?
        }
        None => crashcheck::check_script(&script, a.mode, &opts)?,
    };
    let json = serde_json::to_string_pretty(&run.report)?;
    match &a.out {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    eprintln!(
        "{}: {} states, {} violations, {:.2?}",
        a.script.display(),
        run.report.states_checked,
        run.report.violation_count,
        run.elapsed
    );
    Ok(run.report.passed())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Run { engine, params } => {
            let r = bench::run(&params.config(engine))?;
            eprintln!("{}: {:.0} ops/s, {} bytes persisted", r.engine, r.ops_per_sec, r.counters.bytes_persisted);
            params.emit(&[r])?;
        }
        Cmd::Compare { engines, params } => {
            if engines.is_empty() {
                bail!("no engines given");
            }
            let configs: Vec<BenchConfig> = engines.iter().map(|e| params.config(*e)).collect();
            let cmp = bench::compare(&configs)?;
            if params.out.is_some() {
                params.emit(&cmp.results)?;
                print!("{cmp}");
            } else {
                eprint!("{cmp}");
                params.emit(&cmp.results)?;
            }
        }
        Cmd::Crashcheck(a) => return crashcheck_cmd(&a),
    }
    Ok(true)
}
