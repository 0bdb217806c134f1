//! `sysgemm`: enumerate schedule spaces, generate and simulate traces, tune,
//! and run the benchmark suites.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sysgemm::bench::{self, DESK_MAX_SQUARE};
use sysgemm::codegen::{generate_cisc_baseline, generate_trace, LoweredProgram, MoveCounts};
use sysgemm::config::{AcceleratorConfig, ConfigDocument};
use sysgemm::isa::{check_legality, Dataflow, InstructionTrace};
use sysgemm::quant::{folded_qgemm, QuantizedGemmProblem};
use sysgemm::sim::{measure, timed_execute, timeline, timeline_csv};
use sysgemm::space::{enumerate_valid, pad_workload, DoubleBuffer, ScheduleParams, Workload};
use sysgemm::tuner::{tune, Strategy, TuningJob, DEFAULT_EARLY_STOP, DEFAULT_PARALLELISM};

#[derive(Parser)]
#[command(name = "sysgemm", version, about = "GEMM schedule tuning for a systolic-array accelerator model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count (and optionally dump) the valid schedules of a workload.
    Enumerate {
        #[arg(long)]
        workload: Workload,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write one schedule per line as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Lower a schedule (or the baseline) to an instruction trace.
    Codegen {
        #[arg(long)]
        workload: Workload,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generate the fixed baseline instead of the given schedule.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        emit_trace: Option<PathBuf>,
        /// Seed of the random problem whose scale ends up in the trace.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time a trace and check its output against the reference.
    Simulate {
        /// Trace file written by `codegen --emit-trace`.
        #[arg(long, conflicts_with = "baseline")]
        trace: Option<PathBuf>,
        #[arg(long)]
        workload: Option<Workload>,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-instruction start/finish as CSV.
        #[arg(long)]
        timeline: Option<PathBuf>,
        /// Skip functional execution and report timing only.
        #[arg(long)]
        timing_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Search the schedule space of one workload.
    Tune {
        #[arg(long)]
        workload: Workload,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "model_guided")]
        strategy: Strategy,
        #[arg(long, default_value_t = 256)]
        budget: usize,
        #[arg(long, default_value_t = DEFAULT_EARLY_STOP)]
        early_stop: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PARALLELISM)]
        parallelism: usize,
        /// Every measurement, one JSON record per line.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Best schedule as JSON, usable with `--schedule`.
        #[arg(long)]
        best: Option<PathBuf>,
    },
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a builtin suite and write CSV series, a summary and a full report.
    Run {
        #[arg(long)]
        suite: String,
        /// Configuration files; defaults to both shipped presets.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Include square workloads above the desk-scale cap.
        #[arg(long)]
        full: bool,
        /// Drop workloads with a dimension above this size.
        #[arg(long)]
        max_size: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the summary table of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScheduleArgs {
    /// Schedule JSON file (as written by `tune --best`).
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Level-1 tiles as MxNxK.
    #[arg(long)]
    tile1: Option<Workload>,
    #[arg(long, default_value_t = 1)]
    parallel: u32,
    #[arg(long, default_value = "none")]
    dbuf: DoubleBuffer,
    #[arg(long)]
    exchange: bool,
    #[arg(long, default_value = "OS")]
    dataflow: Dataflow,
    #[arg(long)]
    big_mvout: bool,
}

impl ScheduleArgs {
    fn given(&self) -> bool {
        self.schedule.is_some() || self.tile1.is_some()
    }

    fn resolve(&self, cfg: &AcceleratorConfig) -> Result<ScheduleParams> {
        if let Some(path) = &self.schedule {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
        }
        let t = self.tile1.context("give either --schedule or --tile1")?;
        Ok(ScheduleParams {
            parallel_accumulations: self.parallel,
            apply_double_buffer: self.dbuf,
            exchange_axis: self.exchange,
            dataflow: self.dataflow,
            mvout_big_block: self.big_mvout,
            ..ScheduleParams::with_tiles(cfg.dim, t.m, t.n, t.k)
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigDocument> {
    match path {
        Some(p) => Ok(ConfigDocument::load(p)?),
        None => Ok(ConfigDocument::preset_l2()),
    }
}

fn problem(w: Workload, seed: u64) -> QuantizedGemmProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    QuantizedGemmProblem::random(w.m as usize, w.n as usize, w.k as usize, &mut rng)
}

fn lower_program(
    w: Workload,
    sched: &ScheduleArgs,
    baseline: bool,
    q: &QuantizedGemmProblem,
    cfg: &AcceleratorConfig,
) -> Result<LoweredProgram> {
    if baseline {
        return Ok(generate_cisc_baseline(w, q, cfg)?);
    }
    let p = sched.resolve(cfg)?;
    Ok(generate_trace(w, &p, q, cfg)?)
}

fn print_json(v: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Enumerate { workload, config, dump } => {
            let cfg = load_config(config.as_deref())?.accel;
            let space = enumerate_valid(&pad_workload(workload, &cfg), &cfg)?;
            println!("{workload}: {} valid schedules", space.len());
            if let Some(path) = dump {
                let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                for p in &space {
                    writeln!(f, "{}", serde_json::to_string(p)?)?;
                }
            }
        }
        Command::Codegen { workload, schedule, config, baseline, emit_trace, seed } => {
            let cfg = load_config(config.as_deref())?.accel;
            let q = problem(workload, seed);
            let prog = lower_program(workload, &schedule, baseline, &q, &cfg)?;
            let violations = check_legality(&prog.trace, &cfg);
            if let Some(path) = emit_trace {
                fs::write(&path, prog.trace.to_file_string()).with_context(|| format!("writing {}", path.display()))?;
            }
            print_json(serde_json::json!({
                "workload": workload.to_string(),
                "params": prog.params,
                "instructions": prog.trace.len(),
                "counts": MoveCounts::of(&prog.trace),
                "expected": prog.expected_moves,
                "violations": violations,
            }))?;
            if !violations.is_empty() {
                bail!("generated trace has {} legality violations", violations.len());
            }
        }
        Command::Simulate { trace, workload, schedule, baseline, config, timeline: tl, timing_only, seed } => {
            let cfg = load_config(config.as_deref())?.accel;
            let (trace, w): (InstructionTrace, Option<Workload>) = match trace {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let t = InstructionTrace::parse_file(&text).map_err(anyhow::Error::msg)?;
                    let w = workload.or(t.meta.workload);
                    (t, w)
                }
                None => {
                    let w = workload.context("give --trace or --workload")?;
                    if !baseline && !schedule.given() {
                        bail!("give a schedule (--schedule or --tile1) or --baseline");
                    }
                    let prog = lower_program(w, &schedule, baseline, &problem(w, seed), &cfg)?;
                    (prog.trace, Some(w))
                }
            };
            if let Some(path) = tl {
                let (_, spans) = timeline(&trace, &cfg)?;
                fs::write(&path, timeline_csv(&trace, &spans))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            match w {
                Some(w) if !timing_only => {
                    let q = problem(w, seed);
                    let image =
                        sysgemm::codegen::DramImage::from_problem(sysgemm::codegen::DramLayout::new(w, &cfg), &q)?;
                    let report = timed_execute(&trace, &image, &cfg)?;
                    let matches = report.output == folded_qgemm(&q)?;
                    print_json(serde_json::json!({
                        "workload": w.to_string(),
                        "timing": report.timing,
                        "matches_reference": matches,
                    }))?;
                    if !matches {
                        bail!("simulated output differs from the reference");
                    }
                }
                _ => print_json(serde_json::to_value(measure(&trace, &cfg)?)?)?,
            }
        }
        Command::Tune { workload, config, strategy, budget, early_stop, seed, parallelism, history, best } => {
            let cfg = load_config(config.as_deref())?.accel;
            let job = TuningJob { budget, early_stop, seed, parallelism, ..TuningJob::new(workload, cfg, strategy) };
            let result = tune(&job)?;
            if let Some(path) = history {
                let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                for r in &result.history {
                    writeln!(f, "{}", serde_json::to_string(r)?)?;
                }
            }
            if let Some(path) = best {
                fs::write(&path, serde_json::to_string_pretty(&result.best.params)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!(
                "{workload} {strategy}: {} trials over {} schedules; best {} cycles, {} GOPs",
                result.history.len(),
                result.space_size,
                result.best.cycles,
                bench::format_gops(result.best.gops)
            );
            println!("{}", result.best.params);
        }
        Command::Bench(BenchCommand::Run { suite, configs, out, full, max_size, seed }) => {
            let mut s = bench::builtin_suite(&suite).with_context(|| format!("unknown suite {suite:?}"))?;
            if !configs.is_empty() {
                let docs = configs.iter().map(|p| ConfigDocument::load(p)).collect::<Result<Vec<_>, _>>()?;
                s = s.with_configs(docs.into_iter().map(|d| (d.label, d.accel)).collect());
            }
            if !full && s.name == "square" {
                s = s.capped(DESK_MAX_SQUARE);
            }
            if let Some(m) = max_size {
                s = s.capped(m);
            }
            s.options.seed = seed;
            let report = bench::run_suite(&s, &out)?;
            print!("{}", bench::render_table(&report));
        }
        Command::Bench(BenchCommand::Report { out }) => {
            let report = bench::load_report(&out)?;
            print!("{}", bench::render_table(&report));
        }
    }
    Ok(())
}
