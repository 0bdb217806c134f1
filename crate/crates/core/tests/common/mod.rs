//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sysgemm::config::AcceleratorConfig;
use sysgemm::isa::{Category, Dataflow, InstructionTrace};
use sysgemm::quant::QuantizedGemmProblem;
use sysgemm::sim::{timeline, TimingReport};
use sysgemm::space::{DoubleBuffer, ScheduleParams, Workload};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn problem(w: Workload, seed: u64) -> QuantizedGemmProblem {
    QuantizedGemmProblem::random(w.m as usize, w.n as usize, w.k as usize, &mut rng(seed))
}

pub fn sample(space: &[ScheduleParams], count: usize, seed: u64) -> Vec<ScheduleParams> {
    let mut v = space.to_vec();
    v.shuffle(&mut rng(seed));
    v.truncate(count);
    v
}

/// Hardware validity written directly from the capacities, independent of
/// the library's pruning code.
pub fn admissible(p: &ScheduleParams, w: &Workload, cfg: &AcceleratorConfig) -> bool {
    let d = cfg.dim;
    let axes = [(p.tile_m1, p.tile_m2, w.m), (p.tile_n1, p.tile_n2, w.n), (p.tile_k1, p.tile_k2, w.k)];
    for (t1, t2, full) in axes {
        if t2 != d || t1 == 0 || t1 % t2 != 0 || full % t1 != 0 {
            return false;
        }
    }
    // A is tm x tk, B is tk x tn, C is tm x tn
    let rows_ok = p.tile_m1 <= cfg.max_mv_rows && p.tile_k1 <= cfg.max_mv_rows;
    let cols_ok = p.tile_k1 <= cfg.max_mv_cols && p.tile_n1 <= cfg.max_mv_cols;
    if !rows_ok || !cols_ok {
        return false;
    }
    let (tm, tn, tk) = (u64::from(p.tile_m1), u64::from(p.tile_n1), u64::from(p.tile_k1));
    let par = u64::from(p.parallel_accumulations);
    let out_tiles = u64::from(w.m) / tm * (u64::from(w.n) / tn);
    if par == 0 || par > out_tiles {
        return false;
    }
    // accumulator: par live output tiles of 32-bit words
    let acc_words = u64::from(cfg.acc_banks) * u64::from(cfg.acc_bank_rows) * u64::from(d);
    if par * tm * tn > acc_words {
        return false;
    }
    // scratchpad rows; second buffers must sit in banks the first ones leave free
    let bank = u64::from(cfg.sp_bank_rows);
    let total = u64::from(cfg.sp_banks) * bank;
    let a_rows = tm * tk / u64::from(d);
    let b_rows = tk * tn / u64::from(d);
    let extra = if p.apply_double_buffer.a() { a_rows } else { 0 } + if p.apply_double_buffer.b() { b_rows } else { 0 };
    let first = a_rows + b_rows;
    let fits = if extra == 0 {
        first <= total
    } else {
        let banks_first = first.div_ceil(bank);
        banks_first * bank + extra <= total
    };
    if !fits {
        return false;
    }
    let df = match p.dataflow {
        Dataflow::WeightStationary => cfg.supports_ws,
        Dataflow::OutputStationary => cfg.supports_os,
    };
    df && (!p.mvout_big_block || cfg.supports_big_mvout)
}

/// Filters the full cross product: every integer level-1 size, three
/// level-2 sizes, power-of-two accumulation counts beyond any capacity, and
/// every flag combination.
pub fn brute_force_space(w: &Workload, cfg: &AcceleratorConfig) -> Vec<ScheduleParams> {
    let d = cfg.dim;
    let mut out = Vec::new();
    for tm in 1..=w.m {
        for tn in 1..=w.n {
            for tk in 1..=w.k {
                for t2 in [d / 2, d, 2 * d] {
                    for par in (0..8).map(|e| 1u32 << e) {
                        for db in DoubleBuffer::ALL {
                            for exchange_axis in [false, true] {
                                for dataflow in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
                                    for mvout_big_block in [false, true] {
                                        let p = ScheduleParams {
                                            tile_m1: tm,
                                            tile_n1: tn,
                                            tile_k1: tk,
                                            tile_m2: t2,
                                            tile_n2: t2,
                                            tile_k2: t2,
                                            parallel_accumulations: par,
                                            apply_double_buffer: db,
                                            exchange_axis,
                                            dataflow,
                                            mvout_big_block,
                                        };
                                        if admissible(&p, w, cfg) {
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
    out
}

/// Busy time equals the summed spans per controller, spans on a controller
/// never overlap, and idle fills the rest.
pub fn check_conservation(trace: &InstructionTrace, cfg: &AcceleratorConfig) -> TimingReport {
    let (r, spans) = timeline(trace, cfg).unwrap();
    let cats = [
        (Category::Load, r.busy.load, r.idle.load),
        (Category::Execute, r.busy.execute, r.idle.execute),
        (Category::Store, r.busy.store, r.idle.store),
    ];
    for (cat, busy, idle) in cats {
        let mut own: Vec<_> = spans.iter().filter(|s| s.category == cat).collect();
        own.sort_by_key(|s| (s.start, s.index));
        assert_eq!(own.iter().map(|s| s.finish - s.start).sum::<u64>(), busy, "{cat:?}");
        assert!(own.windows(2).all(|p| p[0].finish <= p[1].start), "{cat:?} overlaps");
        assert_eq!(busy + idle, r.total_cycles);
    }
    assert_eq!(spans.iter().map(|s| s.finish).max().unwrap(), r.total_cycles);
    r
}
