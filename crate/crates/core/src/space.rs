//! The GEMM schedule space and its hardware-driven pruning.
//!
//! A schedule tiles each of the M, N, K axes twice: level-1 tiles are what
//! one scratchpad load brings in, level-2 tiles are what one systolic-array
//! dispatch consumes. Level-2 tiles are pinned to `dim` so that every
//! dispatch fills the array; the search runs over level-1 tiles and the
//! ordering, buffering, dataflow and move-out flags.
//!
//! A point is kept only if every move it implies fits the per-instruction
//! row/column limits, its buffers fit the scratchpad (double-buffered copies
//! in disjoint banks) and its live output tiles fit the accumulator.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::AcceleratorConfig;
use crate::isa::Dataflow;

/// GEMM dimensions for `C[M,N] = A[M,K] * B[K,N] + D[M,N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Workload {
    pub m: u32,
    pub n: u32,
    pub k: u32,
}

impl Workload {
    pub const fn new(m: u32, n: u32, k: u32) -> Self {
        Workload { m, n, k }
    }

    pub const fn square(size: u32) -> Self {
        Workload { m: size, n: size, k: size }
    }

    pub fn is_positive(&self) -> bool {
        self.m >= 1 && self.n >= 1 && self.k >= 1
    }

    /// Operation count `2*M*N*K + M*N`.
    pub fn ops(&self) -> u64 {
        let (m, n, k) = (u64::from(self.m), u64::from(self.n), u64::from(self.k));
        2 * m * n * k + m * n
    }

    pub fn is_padded(&self, dim: u32) -> bool {
        self.m.is_multiple_of(dim) && self.n.is_multiple_of(dim) && self.k.is_multiple_of(dim)
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.n, self.k)
    }
}

impl FromStr for Workload {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('x').collect();
        let [m, n, k] = parts.as_slice() else {
            return Err(format!("workload must look like MxNxK, got {s:?}"));
        };
        let p = |v: &str| v.trim().parse::<u32>().map_err(|_| format!("bad dimension {v:?} in {s:?}"));
        let w = Workload::new(p(m)?, p(n)?, p(k)?);
        if !w.is_positive() {
            return Err(format!("workload dimensions must be positive: {s:?}"));
        }
        Ok(w)
    }
}

/// Rounds every dimension up to a multiple of `dim`; the padding is zeros.
pub fn pad_workload(w: Workload, cfg: &AcceleratorConfig) -> Workload {
    let up = |v: u32| v.div_ceil(cfg.dim) * cfg.dim;
    Workload::new(up(w.m), up(w.n), up(w.k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoubleBuffer {
    None,
    AOnly,
    BOnly,
    Both,
}

impl DoubleBuffer {
    pub const ALL: [DoubleBuffer; 4] =
        [DoubleBuffer::None, DoubleBuffer::AOnly, DoubleBuffer::BOnly, DoubleBuffer::Both];

    pub fn a(self) -> bool {
        matches!(self, DoubleBuffer::AOnly | DoubleBuffer::Both)
    }

    pub fn b(self) -> bool {
        matches!(self, DoubleBuffer::BOnly | DoubleBuffer::Both)
    }
}

impl fmt::Display for DoubleBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DoubleBuffer::None => "none",
            DoubleBuffer::AOnly => "a_only",
            DoubleBuffer::BOnly => "b_only",
            DoubleBuffer::Both => "both",
        })
    }
}

impl FromStr for DoubleBuffer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(DoubleBuffer::None),
            "a_only" | "a" => Ok(DoubleBuffer::AOnly),
            "b_only" | "b" => Ok(DoubleBuffer::BOnly),
            "both" => Ok(DoubleBuffer::Both),
            _ => Err(format!("unknown double-buffer mode {s:?}")),
        }
    }
}

/// One point of the schedule space. Field order is the enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub tile_m1: u32,
    pub tile_n1: u32,
    pub tile_k1: u32,
    pub tile_m2: u32,
    pub tile_n2: u32,
    pub tile_k2: u32,
    /// Output tiles accumulated before a bulk move-out.
    pub parallel_accumulations: u32,
    pub apply_double_buffer: DoubleBuffer,
    /// Iterate the output tiles N-major instead of M-major.
    pub exchange_axis: bool,
    pub dataflow: Dataflow,
    /// Coalesce the move-outs of one output tile into a single instruction.
    pub mvout_big_block: bool,
}

impl ScheduleParams {
    /// Single-array tiles, no buffering, M-major, output stationary.
    pub fn minimal(dim: u32) -> Self {
        ScheduleParams {
            tile_m1: dim,
            tile_n1: dim,
            tile_k1: dim,
            tile_m2: dim,
            tile_n2: dim,
            tile_k2: dim,
            parallel_accumulations: 1,
            apply_double_buffer: DoubleBuffer::None,
            exchange_axis: false,
            dataflow: Dataflow::OutputStationary,
            mvout_big_block: false,
        }
    }

    pub fn with_tiles(dim: u32, m1: u32, n1: u32, k1: u32) -> Self {
        ScheduleParams { tile_m1: m1, tile_n1: n1, tile_k1: k1, ..Self::minimal(dim) }
    }

    /// Stable short digest used to tag generated traces.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("schedule serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for ScheduleParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tile1={}x{}x{} tile2={}x{}x{} par={} dbuf={} exch={} df={} bigout={}",
            self.tile_m1,
            self.tile_n1,
            self.tile_k1,
            self.tile_m2,
            self.tile_n2,
            self.tile_k2,
            self.parallel_accumulations,
            self.apply_double_buffer,
            u8::from(self.exchange_axis),
            self.dataflow,
            u8::from(self.mvout_big_block),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InvalidReason {
    WorkloadNotPadded,
    ZeroTile,
    DivisibilityViolated,
    Tile2NotDim,
    ParallelAccumulationsOutOfRange,
    ScratchpadOverflow,
    AccumulatorOverflow,
    MoveLimitExceeded,
    UnsupportedDataflow,
    BigMvoutUnsupported,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpaceError {
    #[error("no valid schedule exists for workload {0}")]
    EmptySpace(Workload),
    #[error("no conflict-free scratchpad bank assignment: needs {needed_rows} rows, has {available_rows}")]
    Unsatisfiable { needed_rows: u64, available_rows: u64 },
}

/// Scratchpad row bases of each buffer slot. A single-buffered operand uses
/// the same base for both slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankAssignment {
    pub a_base: [u32; 2],
    pub b_base: [u32; 2],
    /// Banks touched by each slot; disjoint whenever anything is double-buffered.
    pub slot_banks: [Range<u32>; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScratchpadFootprint {
    /// Bytes of one copy of the A tile.
    pub a_bytes: u64,
    pub b_bytes: u64,
    /// All copies, counting double-buffered operands twice.
    pub total_bytes: u64,
    pub banks: BankAssignment,
}

fn rows_for(elems: u64, dim: u32) -> u64 {
    elems.div_ceil(u64::from(dim))
}

fn bank_range(start: u64, end: u64, bank_rows: u64) -> Range<u32> {
    if end <= start {
        return 0..0;
    }
    (start / bank_rows) as u32..end.div_ceil(bank_rows) as u32
}

/// Scratchpad usage of a schedule, with a greedy first-fit bank assignment:
/// slot 0 is packed from row 0, slot 1 starts at the first bank slot 0 does
/// not touch.
pub fn scratchpad_footprint(p: &ScheduleParams, cfg: &AcceleratorConfig) -> Result<ScratchpadFootprint, SpaceError> {
    let ib = cfg.input_bytes();
    let a_elems = u64::from(p.tile_m1) * u64::from(p.tile_k1);
    let b_elems = u64::from(p.tile_k1) * u64::from(p.tile_n1);
    let (a_bytes, b_bytes) = (a_elems * ib, b_elems * ib);
    let db = p.apply_double_buffer;
    let total_bytes = a_bytes * (1 + u64::from(db.a())) + b_bytes * (1 + u64::from(db.b()));

    let a_rows = rows_for(a_elems, cfg.dim);
    let b_rows = rows_for(b_elems, cfg.dim);
    let bank_rows = u64::from(cfg.sp_bank_rows);
    let available_rows = u64::from(cfg.sp_rows());

    let end0 = a_rows + b_rows;
    let start1 = end0.div_ceil(bank_rows) * bank_rows;
    let slot1_rows = if db.a() { a_rows } else { 0 } + if db.b() { b_rows } else { 0 };
    let needed_rows = if slot1_rows > 0 { start1 + slot1_rows } else { end0 };
    if needed_rows > available_rows {
        return Err(SpaceError::Unsatisfiable { needed_rows, available_rows });
    }

    let a1 = if db.a() { start1 } else { 0 };
    let b1 = if db.b() { start1 + if db.a() { a_rows } else { 0 } } else { a_rows };
    let banks = BankAssignment {
        a_base: [0, a1 as u32],
        b_base: [a_rows as u32, b1 as u32],
        slot_banks: [
            bank_range(0, end0, bank_rows),
            if slot1_rows > 0 { bank_range(start1, start1 + slot1_rows, bank_rows) } else { 0..0 },
        ],
    };
    Ok(ScratchpadFootprint { a_bytes, b_bytes, total_bytes, banks })
}

/// Accumulator bytes held by `parallel_accumulations` live output tiles.
///
/// The bias tile is moved into the output tile's own rows as the initial
/// partial sum, so it adds nothing on top.
pub fn accumulator_footprint(p: &ScheduleParams, cfg: &AcceleratorConfig) -> u64 {
    u64::from(p.parallel_accumulations) * u64::from(p.tile_m1) * u64::from(p.tile_n1) * cfg.acc_bytes()
}

fn output_tiles(p: &ScheduleParams, w: &Workload) -> u64 {
    u64::from(w.m / p.tile_m1) * u64::from(w.n / p.tile_n1)
}

/// Checks a schedule against an already padded workload. The first failing
/// rule is reported.
pub fn is_valid(p: &ScheduleParams, w: &Workload, cfg: &AcceleratorConfig) -> Result<(), InvalidReason> {
    use InvalidReason::*;
    let dim = cfg.dim;
    if !w.is_positive() || !w.is_padded(dim) {
        return Err(WorkloadNotPadded);
    }
    let tiles = [(p.tile_m1, p.tile_m2, w.m), (p.tile_n1, p.tile_n2, w.n), (p.tile_k1, p.tile_k2, w.k)];
    if tiles.iter().any(|&(t1, t2, _)| t1 == 0 || t2 == 0) {
        return Err(ZeroTile);
    }
    if tiles.iter().any(|&(t1, t2, full)| t1 % t2 != 0 || full % t1 != 0) {
        return Err(DivisibilityViolated);
    }
    if tiles.iter().any(|&(_, t2, _)| t2 != dim) {
        return Err(Tile2NotDim);
    }
    let par = u64::from(p.parallel_accumulations);
    if par == 0 || par > output_tiles(p, w) {
        return Err(ParallelAccumulationsOutOfRange);
    }
    if scratchpad_footprint(p, cfg).is_err() {
        return Err(ScratchpadOverflow);
    }
    if accumulator_footprint(p, cfg) > cfg.accumulator_bytes() {
        return Err(AccumulatorOverflow);
    }
    let fits = |rows: u32, cols: u32| rows <= cfg.max_mv_rows && cols <= cfg.max_mv_cols;
    let moves_fit = fits(p.tile_m1, p.tile_k1)
        && fits(p.tile_k1, p.tile_n1)
        && fits(p.tile_m1, p.tile_n1)
        && (!p.mvout_big_block || fits(p.tile_m1, p.tile_n1));
    if !moves_fit {
        return Err(MoveLimitExceeded);
    }
    let df_ok = match p.dataflow {
        Dataflow::WeightStationary => cfg.supports_ws,
        Dataflow::OutputStationary => cfg.supports_os,
    };
    if !df_ok {
        return Err(UnsupportedDataflow);
    }
    if p.mvout_big_block && !cfg.supports_big_mvout {
        return Err(BigMvoutUnsupported);
    }
    Ok(())
}

/// Multiples of `dim` that divide `full`, ascending.
pub fn tile_candidates(full: u32, dim: u32) -> Vec<u32> {
    (1..=full / dim).map(|j| j * dim).filter(|t| full.is_multiple_of(*t)).collect()
}

/// Every valid schedule for a padded workload, in lexicographic field order.
///
/// Level-1 tiles range over divisor-aligned sizes and
/// `parallel_accumulations` over powers of two up to the accumulator
/// capacity.
pub fn enumerate_valid(w: &Workload, cfg: &AcceleratorConfig) -> Result<Vec<ScheduleParams>, SpaceError> {
    let dim = cfg.dim;
    let mut out = Vec::new();
    if w.is_positive() && w.is_padded(dim) {
        for &tm in &tile_candidates(w.m, dim) {
            for &tn in &tile_candidates(w.n, dim) {
                let tile_bytes = u64::from(tm) * u64::from(tn) * cfg.acc_bytes();
                let cap = cfg.accumulator_bytes() / tile_bytes;
                let mut pars = Vec::new();
                let mut par = 1u64;
                while par <= cap.max(1) {
                    pars.push(par as u32);
                    par *= 2;
                }
                for &tk in &tile_candidates(w.k, dim) {
                    for &par in &pars {
                        for db in DoubleBuffer::ALL {
                            for exchange_axis in [false, true] {
                                for dataflow in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
                                    for mvout_big_block in [false, true] {
                                        let p = ScheduleParams {
                                            tile_m1: tm,
                                            tile_n1: tn,
                                            tile_k1: tk,
                                            tile_m2: dim,
                                            tile_n2: dim,
                                            tile_k2: dim,
                                            parallel_accumulations: par,
                                            apply_double_buffer: db,
                                            exchange_axis,
                                            dataflow,
                                            mvout_big_block,
                                        };
                                        if is_valid(&p, w, cfg).is_ok() {
                                            out.push(p);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(SpaceError::EmptySpace(*w));
    }
    Ok(out)
}
