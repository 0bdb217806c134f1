//! Schedule search driven by simulated measurements.
//!
//! Three strategies share one measurement path (lower the schedule, time the
//! trace): exhaustive, uniform random without replacement, and a
//! model-guided search that refits a boosted-tree cost model on every batch
//! of measurements and proposes the unmeasured points it predicts fastest.

mod gbt;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::{lower, lower_cisc_baseline, CodegenError, CodegenOptions};
use crate::config::AcceleratorConfig;
use crate::quant::Scale;
use crate::sim::{count_ops, measure, SimError, TimingReport};
use crate::space::{
    accumulator_footprint, enumerate_valid, pad_workload, scratchpad_footprint, DoubleBuffer, ScheduleParams,
    SpaceError, Workload,
};

pub use gbt::{Gbt, GbtParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Exhaustive,
    Random,
    ModelGuided,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Exhaustive => "exhaustive",
            Strategy::Random => "random",
            Strategy::ModelGuided => "model_guided",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exhaustive" => Ok(Strategy::Exhaustive),
            "random" => Ok(Strategy::Random),
            "model_guided" | "model-guided" => Ok(Strategy::ModelGuided),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

pub const DEFAULT_EARLY_STOP: usize = 500;
pub const DEFAULT_PARALLELISM: usize = 8;
/// Probability of replacing a model proposal with a random unmeasured point.
pub const EPSILON: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningJob {
    pub workload: Workload,
    pub cfg: AcceleratorConfig,
    pub strategy: Strategy,
    /// Maximum measurements. Exhaustive search ignores it.
    pub budget: usize,
    /// Consecutive non-improving measurements before stopping. Exhaustive
    /// search ignores it.
    pub early_stop: usize,
    pub seed: u64,
    /// Measurements per batch.
    pub parallelism: usize,
}

impl TuningJob {
    pub fn new(workload: Workload, cfg: AcceleratorConfig, strategy: Strategy) -> Self {
        TuningJob {
            workload,
            cfg,
            strategy,
            budget: 256,
            early_stop: DEFAULT_EARLY_STOP,
            seed: 0,
            parallelism: DEFAULT_PARALLELISM,
        }
    }

    pub fn validate(&self) -> Result<(), TunerError> {
        let bad = |m: &str| Err(TunerError::InvalidJob(m.to_string()));
        if self.budget == 0 {
            return bad("budget must be at least 1");
        }
        if self.early_stop == 0 {
            return bad("early_stop must be at least 1");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if !self.workload.is_positive() {
            return bad("workload dimensions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub params: ScheduleParams,
    pub cycles: u64,
    pub gops: f64,
    pub trial_index: usize,
    /// Simulated seconds spent measuring up to and including this trial.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub best: TuningRecord,
    pub history: Vec<TuningRecord>,
    pub space_size: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TunerError {
    #[error("invalid tuning job: {0}")]
    InvalidJob(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Lowers `p` and times it. The output scale does not affect timing.
pub fn measure_schedule(w: Workload, p: &ScheduleParams, cfg: &AcceleratorConfig) -> Result<TimingReport, TunerError> {
    let prog = lower(w, p, Scale::ONE, cfg, CodegenOptions::default())?;
    Ok(measure(&prog.trace, cfg)?)
}

/// Model inputs: log-scaled tiles, one-hot flags and footprint ratios.
pub fn features(p: &ScheduleParams, w: &Workload, cfg: &AcceleratorConfig) -> Vec<f64> {
    let l = |v: u32| f64::from(v.max(1)).log2();
    let sp = scratchpad_footprint(p, cfg).map_or(1.0, |f| f.total_bytes as f64 / cfg.scratchpad_bytes() as f64);
    let acc = accumulator_footprint(p, cfg) as f64 / cfg.accumulator_bytes() as f64;
    let db = p.apply_double_buffer;
    vec![
        l(p.tile_m1),
        l(p.tile_n1),
        l(p.tile_k1),
        l(p.parallel_accumulations),
        f64::from(u8::from(db == DoubleBuffer::None)),
        f64::from(u8::from(db == DoubleBuffer::AOnly)),
        f64::from(u8::from(db == DoubleBuffer::BOnly)),
        f64::from(u8::from(db == DoubleBuffer::Both)),
        f64::from(u8::from(p.exchange_axis)),
        f64::from(u8::from(p.dataflow == crate::isa::Dataflow::OutputStationary)),
        f64::from(u8::from(p.mvout_big_block)),
        sp,
        acc,
        l(w.m / p.tile_m1.max(1)) + l(w.n / p.tile_n1.max(1)),
        l(w.k / p.tile_k1.max(1)),
    ]
}

struct Session<'a> {
    job: &'a TuningJob,
    padded: Workload,
    history: Vec<TuningRecord>,
    best: Option<(u64, ScheduleParams)>,
    since_best: usize,
    elapsed: f64,
}

impl Session<'_> {
    fn exhausted(&self, respect_limits: bool) -> bool {
        respect_limits && (self.history.len() >= self.job.budget || self.since_best >= self.job.early_stop)
    }

    /// Measures `batch` in parallel and appends the records in batch order,
    /// stopping early if a limit is reached partway through.
    fn run_batch(&mut self, batch: &[ScheduleParams], respect_limits: bool) -> Result<(), TunerError> {
        let cfg = &self.job.cfg;
        let w = self.job.workload;
        let reports: Vec<Result<TimingReport, TunerError>> =
            batch.par_iter().map(|p| measure_schedule(w, p, cfg)).collect();
        for (p, r) in batch.iter().zip(reports) {
            if self.exhausted(respect_limits) {
                break;
            }
            let r = r?;
            self.elapsed += r.total_cycles as f64 / cfg.timing.clock_hz;
            let rec = TuningRecord {
                params: *p,
                cycles: r.total_cycles,
                gops: r.gops,
                trial_index: self.history.len(),
                timestamp: self.elapsed,
            };
            // only fewer cycles count as progress; a tie-break swap does not
            let faster = self.best.is_none_or(|b| rec.cycles < b.0);
            if self.best.is_none_or(|b| (rec.cycles, rec.params) < b) {
                self.best = Some((rec.cycles, rec.params));
            }
            if faster {
                self.since_best = 0;
            } else {
                self.since_best += 1;
            }
            self.history.push(rec);
        }
        Ok(())
    }
}

pub fn tune(job: &TuningJob) -> Result<TuningResult, TunerError> {
    job.validate()?;
    let padded = pad_workload(job.workload, &job.cfg);
    let space = enumerate_valid(&padded, &job.cfg)?;
    let mut s = Session { job, padded, history: Vec::new(), best: None, since_best: 0, elapsed: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let chunk = job.parallelism.max(1);

    match job.strategy {
        Strategy::Exhaustive => {
            for batch in space.chunks(chunk) {
                s.run_batch(batch, false)?;
            }
        }
        Strategy::Random => {
            let mut order = space.clone();
            order.shuffle(&mut rng);
            for batch in order.chunks(chunk) {
                if s.exhausted(true) {
                    break;
                }
                s.run_batch(batch, true)?;
            }
        }
        Strategy::ModelGuided => model_guided(&mut s, &space, &mut rng)?,
    }

    let best = s
        .history
        .iter()
        .min_by(|a, b| (a.cycles, a.params).cmp(&(b.cycles, b.params)))
        .cloned()
        .ok_or(TunerError::Space(SpaceError::EmptySpace(job.workload)))?;
    Ok(TuningResult { best, history: s.history, space_size: space.len() })
}

fn model_guided(s: &mut Session<'_>, space: &[ScheduleParams], rng: &mut ChaCha8Rng) -> Result<(), TunerError> {
    let job = s.job;
    let feats: Vec<Vec<f64>> = space.iter().map(|p| features(p, &s.padded, &job.cfg)).collect();
    let mut measured = vec![false; space.len()];
    let batch_size = job.parallelism.max(1);

    let mut initial: Vec<usize> = (0..space.len()).collect();
    initial.shuffle(rng);
    initial.truncate(batch_size.max(16).min(job.budget));
    for &i in &initial {
        measured[i] = true;
    }
    let batch: Vec<ScheduleParams> = initial.iter().map(|&i| space[i]).collect();
    s.run_batch(&batch, true)?;
    let mut measured_idx = initial;

    while !s.exhausted(true) && measured_idx.len() < space.len() {
        // history and measured_idx stay aligned: run_batch only truncates the tail
        let n = s.history.len();
        let x: Vec<Vec<f64>> = measured_idx[..n].iter().map(|&i| feats[i].clone()).collect();
        let y: Vec<f64> = s.history.iter().map(|r| (r.cycles.max(1) as f64).ln()).collect();
        let model = Gbt::fit(&x, &y, &GbtParams::default());

        let mut ranked: Vec<(f64, usize)> =
            (0..space.len()).filter(|&i| !measured[i]).map(|i| (model.predict(&feats[i]), i)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut pool: Vec<usize> = ranked.iter().map(|&(_, i)| i).collect();

        let mut picks = Vec::with_capacity(batch_size);
        while picks.len() < batch_size && !pool.is_empty() {
            let at = if rng.gen_bool(EPSILON) { rng.gen_range(0..pool.len()) } else { 0 };
            picks.push(pool.remove(at));
        }
        for &i in &picks {
            measured[i] = true;
        }
        let batch: Vec<ScheduleParams> = picks.iter().map(|&i| space[i]).collect();
        s.run_batch(&batch, true)?;
        measured_idx.extend(picks);
    }
    Ok(())
}

/// Tuned best against the fixed baseline under the same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub workload: Workload,
    pub strategy: Strategy,
    pub space_size: usize,
    pub trials: usize,
    pub tuned: TuningRecord,
    pub cisc_params: ScheduleParams,
    pub cisc: TimingReport,
}

impl BaselineComparison {
    pub fn baseline_wins(&self) -> bool {
        self.cisc.total_cycles < self.tuned.cycles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// Spaces up to this size are searched exhaustively.
    pub exhaustive_cap: usize,
    pub budget: usize,
    pub early_stop: usize,
    pub seed: u64,
    pub parallelism: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            exhaustive_cap: 512,
            budget: 256,
            early_stop: DEFAULT_EARLY_STOP,
            seed: 0,
            parallelism: DEFAULT_PARALLELISM,
        }
    }
}

pub fn compare_baseline(w: Workload, cfg: &AcceleratorConfig) -> Result<BaselineComparison, TunerError> {
    compare_baseline_with(w, cfg, &CompareOptions::default())
}

pub fn compare_baseline_with(
    w: Workload,
    cfg: &AcceleratorConfig,
    opts: &CompareOptions,
) -> Result<BaselineComparison, TunerError> {
    let size = enumerate_valid(&pad_workload(w, cfg), cfg)?.len();
    let strategy = if size <= opts.exhaustive_cap { Strategy::Exhaustive } else { Strategy::ModelGuided };
    let job = TuningJob {
        budget: opts.budget,
        early_stop: opts.early_stop,
        seed: opts.seed,
        parallelism: opts.parallelism,
        ..TuningJob::new(w, cfg.clone(), strategy)
    };
    let result = tune(&job)?;
    let base = lower_cisc_baseline(w, Scale::ONE, cfg)?;
    let cisc = measure(&base.trace, cfg)?;
    debug_assert_eq!(cisc.ops, count_ops(&w));
    Ok(BaselineComparison {
        workload: w,
        strategy,
        space_size: size,
        trials: result.history.len(),
        tuned: result.best,
        cisc_params: base.params,
        cisc,
    })
}
