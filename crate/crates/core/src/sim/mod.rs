//! Functional and timed execution of instruction traces.
//!
//! [`functional_execute`] applies each instruction's architectural effect in
//! program order. [`timed_execute`] runs the timing model first and then
//! applies the same effects in simulated start order, so any hazard the
//! timing model lets through shows up as a different output matrix.
//!
//! Traces produced by the baseline generator are issued with the
//! load-balancing policy; everything else issues in program order.

mod machine;
mod timing;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::DramImage;
use crate::config::AcceleratorConfig;
use crate::isa::{Category, Generator, InstructionTrace, LocalAddr};
use crate::space::Workload;

pub use machine::MachineState;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("instruction {index} reads {addr}, which was never written")]
    UninitializedRead { index: usize, addr: LocalAddr },
    #[error("instruction {index} addresses memory out of range")]
    AddressOutOfRange { index: usize },
    #[error("instruction {index} has inconsistent operand shapes")]
    ShapeMismatch { index: usize },
    #[error("instruction {index} runs before its unit is configured")]
    NotConfigured { index: usize },
    #[error("no instruction can make progress ({completed} of {total} completed)")]
    Deadlock { completed: usize, total: usize },
}

/// Cycles per controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ControllerCycles {
    pub load: u64,
    pub execute: u64,
    pub store: u64,
}

impl ControllerCycles {
    fn from_array(v: [u64; 3]) -> Self {
        ControllerCycles { load: v[timing::LOAD], execute: v[timing::EXEC], store: v[timing::STORE] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total_cycles: u64,
    pub busy: ControllerCycles,
    pub idle: ControllerCycles,
    /// Cycles during which a full reorder buffer held back the next instruction.
    pub rob_stall_cycles: u64,
    pub bank_conflict_count: u64,
    /// Cycles the execute controller sat idle waiting for a load to land.
    pub exec_load_wait_cycles: u64,
    pub ops: u64,
    pub gops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub output: Array2<i8>,
    #[serde(flatten)]
    pub timing: TimingReport,
}

/// Simulated execution window of one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub index: usize,
    pub category: Category,
    pub start: u64,
    pub finish: u64,
}

/// `2*M*N*K + M*N`.
pub fn count_ops(w: &Workload) -> u64 {
    w.ops()
}

fn issue_policy(trace: &InstructionTrace, cfg: &AcceleratorConfig) -> timing::Issue {
    match trace.meta.generator {
        Generator::CiscBaseline => timing::Issue::Balanced { threshold: cfg.balance_threshold },
        Generator::Tuned => timing::Issue::InOrder,
    }
}

fn schedule(trace: &InstructionTrace, cfg: &AcceleratorConfig) -> Result<(TimingReport, timing::Outcome), SimError> {
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let prepared = timing::prepare(trace, cfg)?;
    let out = timing::run(&prepared, cfg.rob_entries, issue_policy(trace, cfg))?;
    let total = out.total_cycles;
    let idle = out.busy.map(|b| total - b);
    let ops = trace.meta.workload.map_or(prepared.mac_ops, |w| count_ops(&w));
    let gops = if total == 0 { 0.0 } else { ops as f64 * cfg.timing.clock_hz / total as f64 / 1e9 };
    let report = TimingReport {
        total_cycles: total,
        busy: ControllerCycles::from_array(out.busy),
        idle: ControllerCycles::from_array(idle),
        rob_stall_cycles: out.rob_stall_cycles,
        bank_conflict_count: out.bank_conflict_count,
        exec_load_wait_cycles: out.exec_load_wait_cycles,
        ops,
        gops,
    };
    Ok((report, out))
}

/// Timing only; used where the output matrix is not needed.
pub fn measure(trace: &InstructionTrace, cfg: &AcceleratorConfig) -> Result<TimingReport, SimError> {
    schedule(trace, cfg).map(|(r, _)| r)
}

/// Timing plus the start/finish of every instruction.
pub fn timeline(trace: &InstructionTrace, cfg: &AcceleratorConfig) -> Result<(TimingReport, Vec<Span>), SimError> {
    let (report, out) = schedule(trace, cfg)?;
    let spans = trace
        .instructions
        .iter()
        .enumerate()
        .map(|(index, inst)| Span {
            index,
            category: inst.category(),
            start: out.start[index],
            finish: out.finish[index],
        })
        .collect();
    Ok((report, spans))
}

/// `index,category,start,finish,instruction` rows.
pub fn timeline_csv(trace: &InstructionTrace, spans: &[Span]) -> String {
    let mut out = String::from("index,category,start,finish,instruction\n");
    for s in spans {
        out.push_str(&format!(
            "{},{:?},{},{},{}\n",
            s.index, s.category, s.start, s.finish, trace.instructions[s.index]
        ));
    }
    out
}

fn run_in_order(
    trace: &InstructionTrace,
    image: &DramImage,
    cfg: &AcceleratorConfig,
    order: impl Iterator<Item = usize>,
) -> Result<Array2<i8>, SimError> {
    let mut state = MachineState::new(cfg, image.bytes.clone());
    for i in order {
        state.step(i, &trace.instructions[i])?;
    }
    let done = DramImage { layout: image.layout, bytes: state.dram };
    Ok(done.read_c())
}

/// Program-order execution; returns the unpadded output region.
pub fn functional_execute(
    trace: &InstructionTrace,
    image: &DramImage,
    cfg: &AcceleratorConfig,
) -> Result<Array2<i8>, SimError> {
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    run_in_order(trace, image, cfg, 0..trace.len())
}

pub fn timed_execute(
    trace: &InstructionTrace,
    image: &DramImage,
    cfg: &AcceleratorConfig,
) -> Result<SimReport, SimError> {
    let (timing, out) = schedule(trace, cfg)?;
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by_key(|&i| (out.start[i], i));
    let output = run_in_order(trace, image, cfg, order.into_iter())?;
    Ok(SimReport { output, timing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::{generate_trace, DramLayout};
    use crate::config::TimingParams;
    use crate::isa::{Direction, Instruction};
    use crate::quant::{folded_qgemm, QuantizedGemmProblem, Scale};
    use crate::space::ScheduleParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_with(bw: u64, latency: u64) -> AcceleratorConfig {
        AcceleratorConfig {
            timing: TimingParams { dma_bytes_per_cycle: bw, dma_latency_cycles: latency, ..TimingParams::l2() },
            ..AcceleratorConfig::default()
        }
    }

    fn mvin(row: u32) -> Instruction {
        Instruction::MoveIn { dram_addr: 0, dst: LocalAddr::sp(row), rows: 16, cols: 16 }
    }

    #[test]
    fn op_counts() {
        assert_eq!(count_ops(&Workload::square(1)), 3);
        assert_eq!(count_ops(&Workload::square(16)), 8448);
        assert_eq!(count_ops(&Workload::square(256)), 33_619_968);
    }

    #[test]
    fn single_move_in_cost() {
        let r = measure(&InstructionTrace::new(vec![mvin(0)]), &cfg_with(16, 10)).unwrap();
        assert_eq!(r.total_cycles, 26);
        assert_eq!(r.busy.load, 26);
        assert_eq!(r.idle.execute, 26);
    }

    #[test]
    fn compute_overlaps_independent_load() {
        let cfg = cfg_with(16, 10);
        // the second load targets another bank; the compute needs only the first
        let far = cfg.sp_bank_rows;
        let trace = InstructionTrace::new(vec![
            mvin(0),
            mvin(far),
            Instruction::Preload { b_addr: LocalAddr::sp(0), c_addr: LocalAddr::acc(0), rows: 16, cols: 16 },
            Instruction::Compute { a_addr: LocalAddr::sp(0), d_addr: None, rows: 16, cols: 16, accumulate: false },
        ]);
        let (r, spans) = timeline(&trace, &cfg).unwrap();
        let serial: u64 = 26 + 26 + cfg.timing.exec_fill_cycles + cfg.timing.exec_cycles_per_tile;
        assert!(r.total_cycles < serial, "{} vs {serial}", r.total_cycles);
        assert_eq!(spans[2].start, 26);
        assert!(spans[3].start < spans[1].finish);
    }

    #[test]
    fn dependent_chain_is_serial() {
        let cfg = cfg_with(16, 10);
        let trace = InstructionTrace::new(vec![
            mvin(0),
            Instruction::Preload { b_addr: LocalAddr::sp(0), c_addr: LocalAddr::acc(0), rows: 16, cols: 16 },
            Instruction::Compute { a_addr: LocalAddr::sp(0), d_addr: None, rows: 16, cols: 16, accumulate: false },
            Instruction::MoveOut { dram_addr: 0, src: LocalAddr::acc(0), rows: 16, cols: 16 },
            // overwrites what the move-out reads; int32 rows cost 10 + 1024 / 16
            Instruction::MoveIn { dram_addr: 0, dst: LocalAddr::acc(0), rows: 16, cols: 16 },
        ]);
        let t = &cfg.timing;
        let expected = 26 + t.exec_fill_cycles + t.exec_cycles_per_tile + 26 + 74;
        assert_eq!(measure(&trace, &cfg).unwrap().total_cycles, expected);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let cfg = AcceleratorConfig::default();
        let img = DramImage::zeroed(DramLayout::new(Workload::square(16), &cfg));
        let empty = InstructionTrace::default();
        assert_eq!(functional_execute(&empty, &img, &cfg), Err(SimError::EmptyTrace));
        assert_eq!(timed_execute(&empty, &img, &cfg).unwrap_err(), SimError::EmptyTrace);
    }

    #[test]
    fn identity_a_gives_b_plus_d() {
        let cfg = AcceleratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut q = QuantizedGemmProblem::random(16, 16, 16, &mut rng);
        q.q_a = Array2::from_shape_fn((16, 16), |(i, j)| i8::from(i == j));
        q.q_d = q.q_d.mapv(|v| v.clamp(-100, 100));
        q.q_b = q.q_b.mapv(|v| v.clamp(-20, 20));
        q.zp_a = 0;
        q.zp_c = 0;
        q.s_d = 1.0;
        q.s_c = 1.0;
        let w = Workload::square(16);
        let prog = generate_trace(w, &ScheduleParams::minimal(16), &q, &cfg).unwrap();
        let out = functional_execute(&prog.trace, &prog.dram_image(&q).unwrap(), &cfg).unwrap();
        let expected = (q.q_b.mapv(i32::from) + &q.q_d).mapv(|v| v as i8);
        assert_eq!(out, expected);
    }

    #[test]
    fn timed_output_matches_functional_and_oracle() {
        let cfg = AcceleratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Workload::new(48, 40, 72);
        let q = QuantizedGemmProblem::random(48, 40, 72, &mut rng);
        let p = ScheduleParams {
            apply_double_buffer: crate::space::DoubleBuffer::Both,
            parallel_accumulations: 2,
            ..ScheduleParams::with_tiles(16, 16, 48, 16)
        };
        let prog = generate_trace(w, &p, &q, &cfg).unwrap();
        let img = prog.dram_image(&q).unwrap();
        let f = functional_execute(&prog.trace, &img, &cfg).unwrap();
        let t = timed_execute(&prog.trace, &img, &cfg).unwrap();
        assert_eq!(f, t.output);
        assert_eq!(f, folded_qgemm(&q).unwrap());
        let b = t.timing.busy;
        let i = t.timing.idle;
        assert_eq!(b.load + i.load, t.timing.total_cycles);
        assert_eq!(b.store + i.store, t.timing.total_cycles);
    }

    #[test]
    fn unconfigured_move_is_rejected() {
        let cfg = AcceleratorConfig::default();
        let img = DramImage::zeroed(DramLayout::new(Workload::square(16), &cfg));
        let err = functional_execute(&InstructionTrace::new(vec![mvin(0)]), &img, &cfg).unwrap_err();
        assert_eq!(err, SimError::NotConfigured { index: 0 });
    }

    #[test]
    fn reading_unwritten_rows_is_rejected() {
        let cfg = AcceleratorConfig::default();
        let img = DramImage::zeroed(DramLayout::new(Workload::square(16), &cfg));
        let trace = InstructionTrace::new(vec![
            Instruction::ConfigMv { direction: Direction::Out, stride: 16, scale: Scale::ONE },
            Instruction::MoveOut { dram_addr: 0, src: LocalAddr::acc(32), rows: 16, cols: 16 },
        ]);
        let err = functional_execute(&trace, &img, &cfg).unwrap_err();
        assert_eq!(err, SimError::UninitializedRead { index: 1, addr: LocalAddr::acc(32) });
    }
}
