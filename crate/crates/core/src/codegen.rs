//! Lowering of a scheduled GEMM to an instruction trace.
//!
//! The generated program follows the tiled loop nest
//!
//! ```text
//! config
//! for i_o, j_o (swapped when exchange_axis):
//!     move.in D'
//!     for k_o:
//!         move.in A', B'
//!         for i_i, j_i, k_i: preload B, compute A  -> C'
//!     move.out C' (deferred across `parallel_accumulations` output tiles)
//! fence
//! ```
//!
//! with every loop fully unrolled. A double-buffered operand is software
//! pipelined: its load for iteration `t + 1` is issued ahead of the compute
//! block of iteration `t`, into the other buffer slot. The first load of the
//! pipeline has nothing to overlap with.
//!
//! The baseline generator stands in for the accelerator's hardware loop
//! FSMs: a fixed tiling expanded to the same vocabulary with the FSM's own
//! weight-stationary inner order, tagged so the simulator applies the FSM's
//! load-balanced issue.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AcceleratorConfig;
use crate::isa::{Dataflow, Direction, Generator, Instruction, InstructionTrace, LocalAddr, TraceMeta};
use crate::quant::{fold_corrected_bias, QuantError, QuantizedGemmProblem, Scale};
use crate::space::{
    accumulator_footprint, is_valid, pad_workload, scratchpad_footprint, tile_candidates, DoubleBuffer, InvalidReason,
    ScheduleParams, Workload,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodegenError {
    #[error("schedule is not valid for this workload: {0}")]
    InvalidSchedule(InvalidReason),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// A row-major matrix in DRAM. `pitch` is the row stride in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramRegion {
    pub base: u64,
    pub rows: u32,
    pub cols: u32,
    pub elem_bytes: u32,
    pub pitch: u32,
}

impl DramRegion {
    pub fn addr(&self, row: u32, col: u32) -> u64 {
        self.base + (u64::from(row) * u64::from(self.pitch) + u64::from(col)) * u64::from(self.elem_bytes)
    }

    pub fn bytes(&self) -> u64 {
        u64::from(self.rows) * u64::from(self.pitch) * u64::from(self.elem_bytes)
    }
}

/// Placement of the operands in DRAM. All regions share one row pitch (in
/// elements) so a single move configuration per direction serves them all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramLayout {
    pub logical: Workload,
    pub padded: Workload,
    pub pitch: u32,
    pub a: DramRegion,
    pub b: DramRegion,
    /// Folded bias, accumulator width.
    pub d: DramRegion,
    pub c: DramRegion,
}

impl DramLayout {
    pub fn new(w: Workload, cfg: &AcceleratorConfig) -> Self {
        let padded = pad_workload(w, cfg);
        let pitch = padded.k.max(padded.n);
        let ib = cfg.input_bits / 8;
        let ab = cfg.acc_bits / 8;
        let a = DramRegion { base: 0, rows: padded.m, cols: padded.k, elem_bytes: ib, pitch };
        let b = DramRegion { base: a.base + a.bytes(), rows: padded.k, cols: padded.n, elem_bytes: ib, pitch };
        let d = DramRegion { base: b.base + b.bytes(), rows: padded.m, cols: padded.n, elem_bytes: ab, pitch };
        let c = DramRegion { base: d.base + d.bytes(), rows: padded.m, cols: padded.n, elem_bytes: ib, pitch };
        DramLayout { logical: w, padded, pitch, a, b, d, c }
    }

    pub fn total_bytes(&self) -> u64 {
        self.c.base + self.c.bytes()
    }
}

/// DRAM contents for one program: operands at the layout positions, the
/// folded bias in the D region, zero padding everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct DramImage {
    pub layout: DramLayout,
    pub bytes: Vec<u8>,
}

impl DramImage {
    pub fn zeroed(layout: DramLayout) -> Self {
        DramImage { layout, bytes: vec![0; layout.total_bytes() as usize] }
    }

    pub fn from_problem(layout: DramLayout, q: &QuantizedGemmProblem) -> Result<Self, CodegenError> {
        check_shape(&layout.logical, q)?;
        let bias = fold_corrected_bias(q)?;
        let mut img = Self::zeroed(layout);
        for ((r, c), &v) in q.q_a.indexed_iter() {
            img.bytes[layout.a.addr(r as u32, c as u32) as usize] = v as u8;
        }
        for ((r, c), &v) in q.q_b.indexed_iter() {
            img.bytes[layout.b.addr(r as u32, c as u32) as usize] = v as u8;
        }
        for ((r, c), &v) in bias.indexed_iter() {
            let at = layout.d.addr(r as u32, c as u32) as usize;
            img.bytes[at..at + 4].copy_from_slice(&v.to_le_bytes());
        }
        Ok(img)
    }

    /// The unpadded output region.
    pub fn read_c(&self) -> Array2<i8> {
        let l = &self.layout;
        Array2::from_shape_fn((l.logical.m as usize, l.logical.n as usize), |(r, c)| {
            self.bytes[l.c.addr(r as u32, c as u32) as usize] as i8
        })
    }
}

/// Instruction counts per category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MoveCounts {
    pub config_ex: usize,
    pub config_mv: usize,
    pub move_in: usize,
    pub move_out: usize,
    pub preload: usize,
    pub compute: usize,
    pub fence: usize,
}

impl MoveCounts {
    pub fn of(trace: &InstructionTrace) -> Self {
        let mut c = MoveCounts::default();
        for inst in &trace.instructions {
            match inst {
                Instruction::ConfigEx { .. } => c.config_ex += 1,
                Instruction::ConfigMv { .. } => c.config_mv += 1,
                Instruction::MoveIn { .. } => c.move_in += 1,
                Instruction::MoveOut { .. } => c.move_out += 1,
                Instruction::Preload { .. } => c.preload += 1,
                Instruction::Compute { .. } => c.compute += 1,
                Instruction::Fence => c.fence += 1,
                Instruction::Flush => {}
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoweredProgram {
    pub trace: InstructionTrace,
    pub dram_layout: DramLayout,
    /// Counts predicted from the loop bounds alone.
    pub expected_moves: MoveCounts,
    pub params: ScheduleParams,
}

impl LoweredProgram {
    pub fn dram_image(&self, q: &QuantizedGemmProblem) -> Result<DramImage, CodegenError> {
        DramImage::from_problem(self.dram_layout, q)
    }
}

/// Order of the three intra-tile loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnerOrder {
    /// `i_i, j_i, k_i`: the schedule's loop nest.
    #[default]
    Ijk,
    /// `j_i, k_i, i_i`: the hardware FSM's order, one B block per run of i.
    Jki,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CodegenOptions {
    /// Re-emit the configuration instructions before every output tile
    /// instead of once per program.
    pub reemit_config_per_tile: bool,
    pub inner_order: InnerOrder,
    pub generator: Generator,
}

fn check_shape(w: &Workload, q: &QuantizedGemmProblem) -> Result<(), CodegenError> {
    let (m, n, k) = q.shape()?;
    if (m, n, k) != (w.m as usize, w.n as usize, w.k as usize) {
        return Err(CodegenError::ShapeMismatch(format!("problem is {m}x{n}x{k}, workload is {w}")));
    }
    Ok(())
}

/// Lowers a schedule for the problem `q`, whose shape must equal `w`.
pub fn generate_trace(
    w: Workload,
    p: &ScheduleParams,
    q: &QuantizedGemmProblem,
    cfg: &AcceleratorConfig,
) -> Result<LoweredProgram, CodegenError> {
    check_shape(&w, q)?;
    lower(w, p, q.requant_scale()?, cfg, CodegenOptions::default())
}

/// Closed-form instruction counts for a schedule on a padded workload.
pub fn expected_counts(wp: &Workload, p: &ScheduleParams, dim: u32, opts: CodegenOptions) -> MoveCounts {
    let tiles = (wp.m / p.tile_m1) as usize * (wp.n / p.tile_n1) as usize;
    let iters = tiles * (wp.k / p.tile_k1) as usize;
    let d = dim as usize;
    let gemms = (wp.m as usize / d) * (wp.n as usize / d) * (wp.k as usize / d);
    let patches = (p.tile_m1 as usize / d) * (p.tile_n1 as usize / d);
    let reconfigs = if opts.reemit_config_per_tile { tiles - 1 } else { 0 };
    MoveCounts {
        config_ex: 1 + reconfigs,
        config_mv: 2 * (1 + reconfigs),
        move_in: tiles + 2 * iters,
        move_out: if p.mvout_big_block { tiles } else { tiles * patches },
        preload: gemms,
        compute: gemms,
        fence: 1,
    }
}

/// Lowers a schedule with an explicit output scale. The workload may be
/// unpadded; it is padded to the array dimension first.
pub fn lower(
    w: Workload,
    p: &ScheduleParams,
    out_scale: Scale,
    cfg: &AcceleratorConfig,
    opts: CodegenOptions,
) -> Result<LoweredProgram, CodegenError> {
    let wp = pad_workload(w, cfg);
    is_valid(p, &wp, cfg).map_err(CodegenError::InvalidSchedule)?;
    let banks = scratchpad_footprint(p, cfg)
        .map_err(|_| CodegenError::InvalidSchedule(InvalidReason::ScratchpadOverflow))?
        .banks;
    let layout = DramLayout::new(w, cfg);
    let dim = cfg.dim;
    let (tm, tn, tk) = (p.tile_m1, p.tile_n1, p.tile_k1);
    let (mt, nt, kt) = (wp.m / tm, wp.n / tn, wp.k / tk);
    let par = p.parallel_accumulations;
    let acc_tile_rows = tm * tn / dim;
    debug_assert!(accumulator_footprint(p, cfg) <= cfg.accumulator_bytes());

    let tiles: Vec<(u32, u32)> = if p.exchange_axis {
        (0..nt).flat_map(|jo| (0..mt).map(move |io| (io, jo))).collect()
    } else {
        (0..mt).flat_map(|io| (0..nt).map(move |jo| (io, jo))).collect()
    };
    let iters: Vec<(usize, u32)> = (0..tiles.len()).flat_map(|t| (0..kt).map(move |ko| (t, ko))).collect();

    let db = p.apply_double_buffer;
    let slot = |on: bool, g: usize| if on { g % 2 } else { 0 };
    let load_a = |g: usize| {
        let (t, ko) = iters[g];
        let (io, _) = tiles[t];
        Instruction::MoveIn {
            dram_addr: layout.a.addr(io * tm, ko * tk),
            dst: LocalAddr::sp(banks.a_base[slot(db.a(), g)]),
            rows: tm,
            cols: tk,
        }
    };
    let load_b = |g: usize| {
        let (t, ko) = iters[g];
        let (_, jo) = tiles[t];
        Instruction::MoveIn {
            dram_addr: layout.b.addr(ko * tk, jo * tn),
            dst: LocalAddr::sp(banks.b_base[slot(db.b(), g)]),
            rows: tk,
            cols: tn,
        }
    };
    let acc_base = |t: usize| (t as u32 % par) * acc_tile_rows;

    let configs = [
        Instruction::ConfigEx { dataflow: p.dataflow, out_scale: Scale::ONE },
        Instruction::ConfigMv { direction: Direction::In, stride: layout.pitch, scale: Scale::ONE },
        Instruction::ConfigMv { direction: Direction::Out, stride: layout.pitch, scale: out_scale },
    ];
    let mut out: Vec<Instruction> = configs.to_vec();

    if db.a() {
        out.push(load_a(0));
    }
    if db.b() {
        out.push(load_b(0));
    }
    for (g, &(t, ko)) in iters.iter().enumerate() {
        let (io, jo) = tiles[t];
        if ko == 0 {
            if opts.reemit_config_per_tile && t > 0 {
                out.extend_from_slice(&configs);
            }
            out.push(Instruction::MoveIn {
                dram_addr: layout.d.addr(io * tm, jo * tn),
                dst: LocalAddr::acc(acc_base(t)),
                rows: tm,
                cols: tn,
            });
        }
        if !db.a() {
            out.push(load_a(g));
        }
        if !db.b() {
            out.push(load_b(g));
        }
        if g + 1 < iters.len() {
            if db.a() {
                out.push(load_a(g + 1));
            }
            if db.b() {
                out.push(load_b(g + 1));
            }
        }

        let a_base = banks.a_base[slot(db.a(), g)];
        let b_base = banks.b_base[slot(db.b(), g)];
        let c_base = acc_base(t);
        let mut gemm = |ii: u32, jj: u32, kk: u32| {
            out.push(Instruction::Preload {
                b_addr: LocalAddr::sp(b_base + jj * tk + kk * dim),
                c_addr: LocalAddr::acc(c_base + jj * tm + ii * dim),
                rows: dim,
                cols: dim,
            });
            out.push(Instruction::Compute {
                a_addr: LocalAddr::sp(a_base + kk * tm + ii * dim),
                d_addr: None,
                rows: dim,
                cols: dim,
                accumulate: true,
            });
        };
        let (mi, ni, ki) = (tm / dim, tn / dim, tk / dim);
        match opts.inner_order {
            InnerOrder::Ijk => {
                for ii in 0..mi {
                    for jj in 0..ni {
                        for kk in 0..ki {
                            gemm(ii, jj, kk);
                        }
                    }
                }
            }
            InnerOrder::Jki => {
                for jj in 0..ni {
                    for kk in 0..ki {
                        for ii in 0..mi {
                            gemm(ii, jj, kk);
                        }
                    }
                }
            }
        }

        let closes_window = (t + 1) % par as usize == 0 || t + 1 == tiles.len();
        if ko + 1 == kt && closes_window {
            for u in (t / par as usize) * par as usize..=t {
                let (uo, vo) = tiles[u];
                let base = acc_base(u);
                if p.mvout_big_block {
                    out.push(Instruction::MoveOut {
                        dram_addr: layout.c.addr(uo * tm, vo * tn),
                        src: LocalAddr::acc(base),
                        rows: tm,
                        cols: tn,
                    });
                } else {
                    for ii in 0..tm / dim {
                        for jj in 0..tn / dim {
                            out.push(Instruction::MoveOut {
                                dram_addr: layout.c.addr(uo * tm + ii * dim, vo * tn + jj * dim),
                                src: LocalAddr::acc(base + jj * tm + ii * dim),
                                rows: dim,
                                cols: dim,
                            });
                        }
                    }
                }
            }
        }
    }
    out.push(Instruction::Fence);

    let trace = InstructionTrace {
        instructions: out,
        meta: TraceMeta { workload: Some(w), schedule_hash: Some(p.digest()), generator: opts.generator },
    };
    Ok(LoweredProgram { trace, dram_layout: layout, expected_moves: expected_counts(&wp, p, dim, opts), params: *p })
}

/// The fixed tiling the hardware loop FSMs pick: the largest uniform tile
/// cap (a power-of-two multiple of `dim`) such that each operand copy fits a
/// quarter of the scratchpad (half per double-buffered operand), one output
/// tile fits the accumulator, and every move fits the move limits; then as
/// many parallel accumulations as the accumulator holds.
pub fn cisc_params(w: Workload, cfg: &AcceleratorConfig) -> ScheduleParams {
    let wp = pad_workload(w, cfg);
    let dim = cfg.dim;
    let largest_max = wp.m.max(wp.n).max(wp.k);
    let fit = |full: u32, cap: u32| tile_candidates(full, dim).into_iter().filter(|&t| t <= cap).max().unwrap_or(dim);
    let dataflow = if cfg.supports_ws { Dataflow::WeightStationary } else { Dataflow::OutputStationary };
    let quarter = cfg.scratchpad_bytes() / 4;

    let mut cap = dim;
    while cap * 2 <= largest_max {
        cap *= 2;
    }
    loop {
        let (tm, tn, tk) = (fit(wp.m, cap), fit(wp.n, cap), fit(wp.k, cap));
        let mut p = ScheduleParams {
            apply_double_buffer: DoubleBuffer::Both,
            dataflow,
            ..ScheduleParams::with_tiles(dim, tm, tn, tk)
        };
        let ib = cfg.input_bytes();
        let operands_fit =
            u64::from(tm) * u64::from(tk) * ib <= quarter && u64::from(tk) * u64::from(tn) * ib <= quarter;
        if (operands_fit && is_valid(&p, &wp, cfg).is_ok()) || cap <= dim {
            let tiles = u64::from(wp.m / tm) * u64::from(wp.n / tn);
            let per_tile = accumulator_footprint(&p, cfg).max(1);
            let room = (cfg.accumulator_bytes() / per_tile).min(tiles).max(1);
            p.parallel_accumulations = 1 << (63 - room.leading_zeros());
            return p;
        }
        cap /= 2;
    }
}

/// Baseline program standing in for the accelerator's hand-written loop
/// instructions.
pub fn generate_cisc_baseline(
    w: Workload,
    q: &QuantizedGemmProblem,
    cfg: &AcceleratorConfig,
) -> Result<LoweredProgram, CodegenError> {
    check_shape(&w, q)?;
    lower_cisc_baseline(w, q.requant_scale()?, cfg)
}

pub fn lower_cisc_baseline(
    w: Workload,
    out_scale: Scale,
    cfg: &AcceleratorConfig,
) -> Result<LoweredProgram, CodegenError> {
    let p = cisc_params(w, cfg);
    let opts = CodegenOptions {
        inner_order: InnerOrder::Jki,
        generator: Generator::CiscBaseline,
        ..CodegenOptions::default()
    };
    lower(w, &p, out_scale, cfg, opts)
}
