//! Event-driven timing of the decoupled load / execute / store controllers.
//!
//! A pre-pass assigns every instruction a cost and the dependencies it must
//! wait for. Row-granular read/write sets give RAW, WAR and WAW edges; since
//! each controller runs its instructions in order, only the latest producer
//! per controller matters, so each instruction keeps one edge per
//! controller. Load and execute instructions touching the same scratchpad
//! bank are additionally serialized in program order.
//!
//! The event loop then inserts instructions into a shared reorder buffer,
//! starts the oldest ready instruction of each idle controller, and advances
//! time to the next completion.

use std::collections::VecDeque;
use std::ops::Range;

use crate::config::AcceleratorConfig;
use crate::isa::{patch_rows, Category, Dataflow, Instruction, InstructionTrace, LocalAddr, Memory};

use super::SimError;

pub(super) const LOAD: usize = 0;
pub(super) const EXEC: usize = 1;
pub(super) const STORE: usize = 2;
const SYNC: u8 = 3;

fn slot(cat: Category) -> u8 {
    match cat {
        Category::Load => LOAD as u8,
        Category::Execute => EXEC as u8,
        Category::Store => STORE as u8,
        Category::Sync => SYNC,
    }
}

/// Edge targets are stored as `index + 1`; zero means no edge.
type Edges = [u32; 3];

pub(super) struct Prepared {
    pub cat: Vec<u8>,
    pub cost: Vec<u64>,
    pub deps: Vec<Edges>,
    pub bank_dep: Vec<u32>,
    /// Multiply-accumulate operations issued, counted as 2 per MAC.
    pub mac_ops: u64,
}

struct RowTable {
    writer: Vec<u32>,
    readers: [Vec<u32>; 3],
}

impl RowTable {
    fn new(rows: usize) -> Self {
        RowTable { writer: vec![0; rows], readers: [vec![0; rows], vec![0; rows], vec![0; rows]] }
    }

    fn read(&mut self, rows: Range<usize>, c: usize, me: u32, cat: &[u8], deps: &mut Edges) {
        for r in rows {
            let w = self.writer[r];
            if w != 0 {
                let wc = cat[w as usize - 1] as usize;
                if wc != c {
                    deps[wc] = deps[wc].max(w);
                }
            }
            self.readers[c][r] = me;
        }
    }

    fn write(&mut self, rows: Range<usize>, c: usize, me: u32, cat: &[u8], deps: &mut Edges) {
        for r in rows {
            let w = self.writer[r];
            if w != 0 {
                let wc = cat[w as usize - 1] as usize;
                if wc != c {
                    deps[wc] = deps[wc].max(w);
                }
            }
            for (oc, readers) in self.readers.iter().enumerate() {
                if oc != c {
                    deps[oc] = deps[oc].max(readers[r]);
                }
            }
            self.writer[r] = me;
        }
    }
}

fn move_cost(bytes: u64, cfg: &AcceleratorConfig) -> u64 {
    cfg.timing.dma_latency_cycles + bytes.div_ceil(cfg.timing.dma_bytes_per_cycle.max(1))
}

pub(super) fn prepare(trace: &InstructionTrace, cfg: &AcceleratorConfig) -> Result<Prepared, SimError> {
    let n = trace.instructions.len();
    let dim = cfg.dim;
    let t = &cfg.timing;
    let mut sp = RowTable::new(cfg.sp_rows() as usize);
    let mut acc = RowTable::new(cfg.acc_rows() as usize);
    let bank_rows = cfg.sp_bank_rows.max(1) as usize;
    let mut bank_last = [vec![0u32; cfg.sp_banks as usize], vec![0u32; cfg.sp_banks as usize]];

    let mut p = Prepared {
        cat: Vec::with_capacity(n),
        cost: Vec::with_capacity(n),
        deps: Vec::with_capacity(n),
        bank_dep: Vec::with_capacity(n),
        mac_ops: 0,
    };
    let mut dataflow = Dataflow::WeightStationary;
    let mut stationary: Option<LocalAddr> = None;
    let mut staged: Option<(LocalAddr, u32)> = None;

    for (i, inst) in trace.instructions.iter().enumerate() {
        let me = i as u32 + 1;
        let c = slot(inst.category());
        p.cat.push(c);
        let c = c as usize;
        let mut deps: Edges = [0; 3];
        // at most two scratchpad operands per instruction
        let mut touched_sp: [Range<usize>; 2] = [0..0, 0..0];

        let span = |addr: LocalAddr, rows: u32, cols: u32| -> Result<(Memory, Range<usize>), SimError> {
            let r = patch_rows(addr, rows, cols, dim);
            let limit = match addr.mem {
                Memory::Scratchpad => u64::from(cfg.sp_rows()),
                Memory::Accumulator => u64::from(cfg.acc_rows()),
            };
            if r.end > limit {
                return Err(SimError::AddressOutOfRange { index: i });
            }
            Ok((addr.mem, r.start as usize..r.end as usize))
        };

        let cost = match *inst {
            Instruction::ConfigEx { dataflow: df, .. } => {
                dataflow = df;
                t.config_cycles
            }
            Instruction::ConfigMv { .. } => t.config_cycles,
            Instruction::MoveIn { dst, rows, cols, .. } => {
                let (mem, r) = span(dst, rows, cols)?;
                let elem = if mem == Memory::Accumulator { cfg.acc_bytes() } else { cfg.input_bytes() };
                match mem {
                    Memory::Scratchpad => {
                        sp.write(r.clone(), c, me, &p.cat, &mut deps);
                        touched_sp[0] = r;
                    }
                    Memory::Accumulator => acc.write(r, c, me, &p.cat, &mut deps),
                }
                move_cost(u64::from(rows) * u64::from(cols) * elem, cfg)
            }
            Instruction::MoveOut { src, rows, cols, .. } => {
                let (mem, r) = span(src, rows, cols)?;
                match mem {
                    Memory::Scratchpad => sp.read(r, c, me, &p.cat, &mut deps),
                    Memory::Accumulator => acc.read(r, c, me, &p.cat, &mut deps),
                }
                move_cost(u64::from(rows) * u64::from(cols) * cfg.input_bytes(), cfg)
            }
            Instruction::Preload { b_addr, c_addr, rows, cols } => {
                let (_, r) = span(b_addr, rows, cols)?;
                sp.read(r.clone(), c, me, &p.cat, &mut deps);
                touched_sp[0] = r;
                staged = Some((c_addr, cols));
                let key = match dataflow {
                    Dataflow::WeightStationary => b_addr,
                    Dataflow::OutputStationary => c_addr,
                };
                let refill = stationary != Some(key);
                stationary = Some(key);
                if refill {
                    t.exec_fill_cycles
                } else {
                    0
                }
            }
            Instruction::Compute { a_addr, d_addr, rows, cols, .. } => {
                let (_, r) = span(a_addr, rows, cols)?;
                sp.read(r.clone(), c, me, &p.cat, &mut deps);
                touched_sp[0] = r;
                if let Some(d) = d_addr {
                    let (_, rd) = span(d, rows, dim)?;
                    sp.read(rd.clone(), c, me, &p.cat, &mut deps);
                    touched_sp[1] = rd;
                }
                let (c_addr, n_cols) = staged.unwrap_or((LocalAddr::acc(0), dim));
                if c_addr.is_acc() {
                    let (_, rc) = span(c_addr, rows, n_cols)?;
                    acc.write(rc, c, me, &p.cat, &mut deps);
                }
                p.mac_ops += 2 * u64::from(rows) * u64::from(cols) * u64::from(n_cols);
                t.exec_cycles_per_tile
            }
            Instruction::Fence | Instruction::Flush => 0,
        };

        let mut bank_dep = 0;
        if c == LOAD || c == EXEC {
            let other = if c == LOAD { EXEC } else { LOAD };
            for r in &touched_sp {
                for b in r.start / bank_rows..r.end.div_ceil(bank_rows) {
                    bank_dep = bank_dep.max(bank_last[other][b]);
                    bank_last[c][b] = me;
                }
            }
            if bank_dep <= deps[other] {
                bank_dep = 0;
            }
        }
        p.cost.push(cost);
        p.deps.push(deps);
        p.bank_dep.push(bank_dep);
    }
    Ok(p)
}

pub(super) struct Outcome {
    pub start: Vec<u64>,
    pub finish: Vec<u64>,
    pub total_cycles: u64,
    pub busy: [u64; 3],
    pub rob_stall_cycles: u64,
    pub bank_conflict_count: u64,
    pub exec_load_wait_cycles: u64,
}

/// Issue policy for instructions entering the reorder buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) enum Issue {
    /// Strict program order.
    InOrder,
    /// One stream per category; a category holding more than its share of
    /// the buffer is paused while others have work.
    Balanced { threshold: f64 },
}

struct Engine<'a> {
    p: &'a Prepared,
    rob_entries: usize,
    now: u64,
    start: Vec<u64>,
    finish: Vec<u64>,
    inserted_at: Vec<u64>,
    queues: [VecDeque<u32>; 3],
    running: [Option<u32>; 3],
    rob: usize,
    held: [usize; 3],
    completed: usize,
}

impl Engine<'_> {
    fn done(&self, edge: u32) -> bool {
        edge == 0 || self.finish[edge as usize - 1] <= self.now
    }

    fn ready(&self, i: usize) -> bool {
        self.p.deps[i].iter().all(|&d| self.done(d)) && self.done(self.p.bank_dep[i])
    }

    fn insert(&mut self, i: usize) {
        let c = self.p.cat[i] as usize;
        self.rob += 1;
        self.held[c] += 1;
        self.inserted_at[i] = self.now;
        self.queues[c].push_back(i as u32);
    }

    fn retire_sync(&mut self, i: usize) {
        self.start[i] = self.now;
        self.finish[i] = self.now;
        self.completed += 1;
    }
}

pub(super) fn run(p: &Prepared, rob_entries: u32, issue: Issue) -> Result<Outcome, SimError> {
    let n = p.cat.len();
    let mut e = Engine {
        p,
        rob_entries: rob_entries.max(1) as usize,
        now: 0,
        start: vec![0; n],
        finish: vec![u64::MAX; n],
        inserted_at: vec![0; n],
        queues: Default::default(),
        running: [None; 3],
        rob: 0,
        held: [0; 3],
        completed: 0,
    };
    let mut busy = [0u64; 3];
    let (mut rob_stall, mut conflicts) = (0u64, 0u64);

    // in-order issue state
    let mut next = 0usize;
    // balanced issue state
    let mut streams: [Vec<u32>; 3] = Default::default();
    let mut syncs: Vec<usize> = Vec::new();
    for (i, &c) in p.cat.iter().enumerate() {
        if c == SYNC {
            syncs.push(i);
        } else {
            streams[c as usize].push(i as u32);
        }
    }
    let mut cursor = [0usize; 3];
    let mut bar = 0usize;
    let mut paused = [false; 3];

    while e.completed < n {
        let mut blocked = false;
        match issue {
            Issue::InOrder => {
                while next < n {
                    if p.cat[next] == SYNC {
                        if e.rob > 0 {
                            break;
                        }
                        e.retire_sync(next);
                        next += 1;
                    } else if e.rob >= e.rob_entries {
                        blocked = true;
                        break;
                    } else {
                        e.insert(next);
                        next += 1;
                    }
                }
            }
            Issue::Balanced { threshold } => loop {
                let barrier = syncs.get(bar).copied().unwrap_or(n);
                let cand: [Option<usize>; 3] =
                    std::array::from_fn(|c| streams[c].get(cursor[c]).map(|&i| i as usize).filter(|&i| i < barrier));
                let Some(oldest) = cand.iter().flatten().copied().min() else {
                    if barrier < n && e.rob == 0 {
                        e.retire_sync(barrier);
                        bar += 1;
                        continue;
                    }
                    break;
                };
                if e.rob >= e.rob_entries {
                    blocked = true;
                    break;
                }
                let share = threshold * e.rob_entries as f64;
                for c in 0..3 {
                    let others = (0..3).any(|o| o != c && cand[o].is_some());
                    let held = e.held[c] as f64;
                    if held > share && others {
                        paused[c] = true;
                    } else if held <= share - 1.0 || !others {
                        paused[c] = false;
                    }
                }
                // the last free entry is kept for the oldest pending instruction,
                // which can always make progress
                let pick = if e.rob + 1 == e.rob_entries {
                    oldest
                } else {
                    (0..3).filter(|&c| !paused[c]).filter_map(|c| cand[c]).min().unwrap_or(oldest)
                };
                let c = p.cat[pick] as usize;
                cursor[c] += 1;
                e.insert(pick);
            },
        }

        for c in 0..3 {
            if e.running[c].is_some() {
                continue;
            }
            let Some(&i) = e.queues[c].front() else { continue };
            let i = i as usize;
            if !e.ready(i) {
                continue;
            }
            e.queues[c].pop_front();
            let b = p.bank_dep[i];
            if b != 0 {
                let bf = e.finish[b as usize - 1];
                let data = p.deps[i].iter().filter(|&&d| d != 0).map(|&d| e.finish[d as usize - 1]).max();
                if bf > e.inserted_at[i] && data.is_none_or(|d| bf > d) {
                    conflicts += 1;
                }
            }
            e.start[i] = e.now;
            e.finish[i] = e.now + p.cost[i];
            busy[c] += p.cost[i];
            e.running[c] = Some(i as u32);
        }

        let Some(t) = e.running.iter().flatten().map(|&i| e.finish[i as usize]).min() else {
            if e.completed == n {
                break;
            }
            return Err(SimError::Deadlock { completed: e.completed, total: n });
        };
        if blocked {
            rob_stall += t - e.now;
        }
        e.now = t;
        for c in 0..3 {
            if let Some(i) = e.running[c] {
                if e.finish[i as usize] == t {
                    e.running[c] = None;
                    e.rob -= 1;
                    e.held[c] -= 1;
                    e.completed += 1;
                }
            }
        }
    }

    let total_cycles = e.finish.iter().copied().max().unwrap_or(0);
    let mut exec_wait = 0;
    let mut prev_exec_finish = 0;
    for i in 0..n {
        if p.cat[i] as usize != EXEC {
            continue;
        }
        let d = p.deps[i][LOAD];
        if d != 0 {
            let lf = e.finish[d as usize - 1];
            if lf > prev_exec_finish {
                exec_wait += lf.min(e.start[i]) - prev_exec_finish;
            }
        }
        prev_exec_finish = e.finish[i];
    }
    Ok(Outcome {
        start: e.start,
        finish: e.finish,
        total_cycles,
        busy,
        rob_stall_cycles: rob_stall,
        bank_conflict_count: conflicts,
        exec_load_wait_cycles: exec_wait,
    })
}
