//! Instruction vocabulary shared by the code generator and the simulator.
//!
//! Local addresses are abstract row indices. A row holds `dim` elements; the
//! accumulator has its own address space, selected by [`Memory`] on the
//! address. A `rows x cols` patch is stored as `ceil(cols / dim)` column
//! blocks, block `b` occupying rows `addr + b * rows .. addr + (b + 1) * rows`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::AcceleratorConfig;
use crate::quant::Scale;
use crate::space::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dataflow {
    #[serde(rename = "WS")]
    WeightStationary,
    #[serde(rename = "OS")]
    OutputStationary,
}

impl fmt::Display for Dataflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataflow::WeightStationary => "WS",
            Dataflow::OutputStationary => "OS",
        })
    }
}

impl FromStr for Dataflow {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "WS" | "ws" => Ok(Dataflow::WeightStationary),
            "OS" | "os" => Ok(Dataflow::OutputStationary),
            _ => Err(format!("unknown dataflow {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Memory {
    Scratchpad,
    Accumulator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalAddr {
    pub mem: Memory,
    pub row: u32,
}

impl LocalAddr {
    pub const fn sp(row: u32) -> Self {
        LocalAddr { mem: Memory::Scratchpad, row }
    }

    pub const fn acc(row: u32) -> Self {
        LocalAddr { mem: Memory::Accumulator, row }
    }

    pub fn is_acc(self) -> bool {
        self.mem == Memory::Accumulator
    }
}

impl fmt::Display for LocalAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mem {
            Memory::Scratchpad => write!(f, "sp:{}", self.row),
            Memory::Accumulator => write!(f, "acc:{}", self.row),
        }
    }
}

impl FromStr for LocalAddr {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mem, row) = s.split_once(':').ok_or_else(|| format!("bad address {s:?}"))?;
        let row = row.parse().map_err(|_| format!("bad address row in {s:?}"))?;
        match mem {
            "sp" => Ok(LocalAddr::sp(row)),
            "acc" => Ok(LocalAddr::acc(row)),
            _ => Err(format!("unknown memory {mem:?}")),
        }
    }
}

/// One accelerator instruction.
///
/// `ConfigMv::stride` is a DRAM row pitch in elements; the DMA scales it by
/// the element width of the local side (input width for the scratchpad,
/// accumulator width for the accumulator).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    ConfigEx {
        dataflow: Dataflow,
        out_scale: Scale,
    },
    ConfigMv {
        direction: Direction,
        stride: u32,
        scale: Scale,
    },
    MoveIn {
        dram_addr: u64,
        dst: LocalAddr,
        rows: u32,
        cols: u32,
    },
    MoveOut {
        dram_addr: u64,
        src: LocalAddr,
        rows: u32,
        cols: u32,
    },
    /// Stages a `rows x cols` B block and the accumulator target of the next
    /// compute.
    Preload {
        b_addr: LocalAddr,
        c_addr: LocalAddr,
        rows: u32,
        cols: u32,
    },
    /// Multiplies a `rows x cols` A block by the staged B block.
    Compute {
        a_addr: LocalAddr,
        d_addr: Option<LocalAddr>,
        rows: u32,
        cols: u32,
        accumulate: bool,
    },
    Fence,
    Flush,
}

/// Which controller executes an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Load,
    Execute,
    Store,
    /// Fence and flush: handled by the issue logic, no controller time.
    Sync,
}

impl Instruction {
    pub fn category(&self) -> Category {
        match self {
            Instruction::ConfigEx { .. } | Instruction::Preload { .. } | Instruction::Compute { .. } => {
                Category::Execute
            }
            Instruction::ConfigMv { direction: Direction::In, .. } | Instruction::MoveIn { .. } => Category::Load,
            Instruction::ConfigMv { direction: Direction::Out, .. } | Instruction::MoveOut { .. } => Category::Store,
            Instruction::Fence | Instruction::Flush => Category::Sync,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Instruction::ConfigEx { .. } | Instruction::ConfigMv { .. })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Instruction::ConfigEx { dataflow, out_scale } => {
                write!(f, "config.ex dataflow={dataflow} scale={out_scale}")
            }
            Instruction::ConfigMv { direction, stride, scale } => {
                let dir = match direction {
                    Direction::In => "in",
                    Direction::Out => "out",
                };
                write!(f, "config.mv dir={dir} stride={stride} scale={scale}")
            }
            Instruction::MoveIn { dram_addr, dst, rows, cols } => {
                write!(f, "mvin dram={dram_addr} dst={dst} rows={rows} cols={cols}")
            }
            Instruction::MoveOut { dram_addr, src, rows, cols } => {
                write!(f, "mvout dram={dram_addr} src={src} rows={rows} cols={cols}")
            }
            Instruction::Preload { b_addr, c_addr, rows, cols } => {
                write!(f, "preload b={b_addr} c={c_addr} rows={rows} cols={cols}")
            }
            Instruction::Compute { a_addr, d_addr, rows, cols, accumulate } => {
                write!(f, "compute a={a_addr} d=")?;
                match d_addr {
                    Some(d) => write!(f, "{d}")?,
                    None => f.write_str("none")?,
                }
                write!(f, " rows={rows} cols={cols} accumulate={accumulate}")
            }
            Instruction::Fence => f.write_str("fence"),
            Instruction::Flush => f.write_str("flush"),
        }
    }
}

struct Fields<'a> {
    line: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn get<T: FromStr>(&self, key: &str) -> Result<T, String> {
        let raw = self
            .pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format!("missing {key}= in {:?}", self.line))?;
        raw.parse().map_err(|_| format!("bad value for {key} in {:?}", self.line))
    }
}

impl FromStr for Instruction {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut words = line.split_whitespace();
        let op = words.next().ok_or("empty instruction")?;
        let pairs = words
            .map(|w| w.split_once('=').ok_or_else(|| format!("expected key=value, got {w:?}")))
            .collect::<Result<Vec<_>, _>>()?;
        let f = Fields { line, pairs };
        let scale = |key: &str| -> Result<Scale, String> { f.get::<String>(key)?.parse() };
        Ok(match op {
            "config.ex" => {
                Instruction::ConfigEx { dataflow: f.get::<String>("dataflow")?.parse()?, out_scale: scale("scale")? }
            }
            "config.mv" => Instruction::ConfigMv {
                direction: match f.get::<String>("dir")?.as_str() {
                    "in" => Direction::In,
                    "out" => Direction::Out,
                    other => return Err(format!("unknown direction {other:?}")),
                },
                stride: f.get("stride")?,
                scale: scale("scale")?,
            },
            "mvin" => Instruction::MoveIn {
                dram_addr: f.get("dram")?,
                dst: f.get::<String>("dst")?.parse()?,
                rows: f.get("rows")?,
                cols: f.get("cols")?,
            },
            "mvout" => Instruction::MoveOut {
                dram_addr: f.get("dram")?,
                src: f.get::<String>("src")?.parse()?,
                rows: f.get("rows")?,
                cols: f.get("cols")?,
            },
            "preload" => Instruction::Preload {
                b_addr: f.get::<String>("b")?.parse()?,
                c_addr: f.get::<String>("c")?.parse()?,
                rows: f.get("rows")?,
                cols: f.get("cols")?,
            },
            "compute" => Instruction::Compute {
                a_addr: f.get::<String>("a")?.parse()?,
                d_addr: match f.get::<String>("d")?.as_str() {
                    "none" => None,
                    d => Some(d.parse()?),
                },
                rows: f.get("rows")?,
                cols: f.get("cols")?,
                accumulate: f.get("accumulate")?,
            },
            "fence" => Instruction::Fence,
            "flush" => Instruction::Flush,
            other => return Err(format!("unknown instruction {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    #[default]
    Tuned,
    /// Expanded from the hardware loop FSMs; the simulator applies
    /// load-balanced issue to these traces.
    CiscBaseline,
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Tuned => "tuned",
            Generator::CiscBaseline => "cisc-baseline",
        })
    }
}

impl FromStr for Generator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tuned" => Ok(Generator::Tuned),
            "cisc-baseline" => Ok(Generator::CiscBaseline),
            _ => Err(format!("unknown generator {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceMeta {
    pub workload: Option<Workload>,
    pub schedule_hash: Option<String>,
    pub generator: Generator,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InstructionTrace {
    pub instructions: Vec<Instruction>,
    pub meta: TraceMeta,
}

impl InstructionTrace {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        InstructionTrace { instructions, meta: TraceMeta::default() }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Trace file contents: `# key=value` metadata lines, then the listing.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("# generator={}\n", self.meta.generator);
        if let Some(w) = self.meta.workload {
            out.push_str(&format!("# workload={w}\n"));
        }
        if let Some(h) = &self.meta.schedule_hash {
            out.push_str(&format!("# schedule={h}\n"));
        }
        out.push_str(&render_trace(self));
        out
    }

    pub fn parse_file(text: &str) -> Result<Self, String> {
        let mut trace = InstructionTrace::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    match k.trim() {
                        "generator" => trace.meta.generator = v.trim().parse()?,
                        "workload" => trace.meta.workload = Some(v.trim().parse()?),
                        "schedule" => trace.meta.schedule_hash = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                continue;
            }
            let inst = line.parse().map_err(|e| format!("line {}: {e}", lineno + 1))?;
            trace.instructions.push(inst);
        }
        Ok(trace)
    }
}

/// One line per instruction, newline-terminated.
pub fn render_trace(trace: &InstructionTrace) -> String {
    let mut out = String::new();
    for inst in &trace.instructions {
        out.push_str(&inst.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    MoveLimitExceeded,
    BigMvoutUnsupported,
    AddressOutOfRange,
    WrongAddressSpace,
    ComputeShapeExceeded,
    OperandShapeMismatch,
    MissingPreload,
    ConfigBeforeUse,
    UnsupportedDataflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

/// Local rows occupied by a `rows x cols` patch starting at `addr`.
pub fn patch_rows(addr: LocalAddr, rows: u32, cols: u32, dim: u32) -> Range<u64> {
    let blocks = u64::from(cols.div_ceil(dim.max(1)));
    let start = u64::from(addr.row);
    start..start + u64::from(rows) * blocks
}

fn memory_rows(mem: Memory, cfg: &AcceleratorConfig) -> u64 {
    match mem {
        Memory::Scratchpad => u64::from(cfg.sp_rows()),
        Memory::Accumulator => u64::from(cfg.acc_rows()),
    }
}

/// Every instruction index that breaks a hardware rule: move limits, address
/// bounds, capability flags, or configuration-before-use ordering.
pub fn check_legality(trace: &InstructionTrace, cfg: &AcceleratorConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let dim = cfg.dim;
    let (mut ex_cfg, mut in_cfg, mut out_cfg) = (false, false, false);
    let mut staged: Option<u32> = None;

    for (index, inst) in trace.instructions.iter().enumerate() {
        let mut flag = |kind| out.push(Violation { index, kind });
        let in_range = |addr: LocalAddr, rows: u32, cols: u32, flag: &mut dyn FnMut(ViolationKind)| {
            let r = patch_rows(addr, rows, cols, dim);
            if r.end > memory_rows(addr.mem, cfg) {
                flag(ViolationKind::AddressOutOfRange);
            }
        };
        match *inst {
            Instruction::ConfigEx { dataflow, .. } => {
                ex_cfg = true;
                let supported = match dataflow {
                    Dataflow::WeightStationary => cfg.supports_ws,
                    Dataflow::OutputStationary => cfg.supports_os,
                };
                if !supported {
                    flag(ViolationKind::UnsupportedDataflow);
                }
            }
            Instruction::ConfigMv { direction: Direction::In, .. } => in_cfg = true,
            Instruction::ConfigMv { direction: Direction::Out, .. } => out_cfg = true,
            Instruction::MoveIn { dst, rows, cols, .. } => {
                if !in_cfg {
                    flag(ViolationKind::ConfigBeforeUse);
                }
                if rows > cfg.max_mv_rows || cols > cfg.max_mv_cols {
                    flag(ViolationKind::MoveLimitExceeded);
                }
                in_range(dst, rows, cols, &mut flag);
            }
            Instruction::MoveOut { src, rows, cols, .. } => {
                if !out_cfg {
                    flag(ViolationKind::ConfigBeforeUse);
                }
                if rows > cfg.max_mv_rows || cols > cfg.max_mv_cols {
                    flag(ViolationKind::MoveLimitExceeded);
                }
                if (rows > dim || cols > dim) && !cfg.supports_big_mvout {
                    flag(ViolationKind::BigMvoutUnsupported);
                }
                in_range(src, rows, cols, &mut flag);
            }
            Instruction::Preload { b_addr, c_addr, rows, cols } => {
                if !ex_cfg {
                    flag(ViolationKind::ConfigBeforeUse);
                }
                if rows > dim || cols > dim {
                    flag(ViolationKind::ComputeShapeExceeded);
                }
                if b_addr.is_acc() || !c_addr.is_acc() {
                    flag(ViolationKind::WrongAddressSpace);
                }
                in_range(b_addr, rows, cols, &mut flag);
                staged = Some(rows);
            }
            Instruction::Compute { a_addr, d_addr, rows, cols, .. } => {
                if !ex_cfg {
                    flag(ViolationKind::ConfigBeforeUse);
                }
                if rows > dim || cols > dim {
                    flag(ViolationKind::ComputeShapeExceeded);
                }
                if a_addr.is_acc() {
                    flag(ViolationKind::WrongAddressSpace);
                }
                in_range(a_addr, rows, cols, &mut flag);
                if let Some(d) = d_addr {
                    in_range(d, rows, dim, &mut flag);
                }
                match staged {
                    None => flag(ViolationKind::MissingPreload),
                    Some(k) if k != cols => flag(ViolationKind::OperandShapeMismatch),
                    Some(_) => {}
                }
            }
            Instruction::Fence | Instruction::Flush => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn configured(body: Vec<Instruction>) -> InstructionTrace {
        let mut v = vec![
            Instruction::ConfigEx { dataflow: Dataflow::WeightStationary, out_scale: Scale::ONE },
            Instruction::ConfigMv { direction: Direction::In, stride: 16, scale: Scale::ONE },
            Instruction::ConfigMv { direction: Direction::Out, stride: 16, scale: Scale::ONE },
        ];
        v.extend(body);
        InstructionTrace::new(v)
    }

    #[test]
    fn small_move_is_legal() {
        let t = configured(vec![Instruction::MoveIn { dram_addr: 0, dst: LocalAddr::sp(0), rows: 16, cols: 16 }]);
        assert!(check_legality(&t, &AcceleratorConfig::default()).is_empty());
    }

    #[test]
    fn big_mvout_needs_support() {
        let cfg = AcceleratorConfig { supports_big_mvout: false, ..Default::default() };
        let t = configured(vec![Instruction::MoveOut { dram_addr: 0, src: LocalAddr::acc(0), rows: 32, cols: 32 }]);
        assert_eq!(check_legality(&t, &cfg), vec![Violation { index: 3, kind: ViolationKind::BigMvoutUnsupported }]);
        assert!(check_legality(&t, &AcceleratorConfig::default()).is_empty());
    }

    #[test]
    fn one_past_end_is_out_of_range() {
        let cfg = AcceleratorConfig::default();
        let end = cfg.sp_banks * cfg.sp_bank_rows;
        let t = configured(vec![Instruction::MoveIn { dram_addr: 0, dst: LocalAddr::sp(end), rows: 1, cols: 16 }]);
        assert_eq!(check_legality(&t, &cfg), vec![Violation { index: 3, kind: ViolationKind::AddressOutOfRange }]);
        let last =
            configured(vec![Instruction::MoveIn { dram_addr: 0, dst: LocalAddr::sp(end - 1), rows: 1, cols: 16 }]);
        assert!(check_legality(&last, &cfg).is_empty());
    }

    #[test]
    fn move_limits() {
        let cfg = AcceleratorConfig::default();
        let t = configured(vec![Instruction::MoveIn { dram_addr: 0, dst: LocalAddr::sp(0), rows: 16, cols: 512 }]);
        let kinds: Vec<_> = check_legality(&t, &cfg).into_iter().map(|v| v.kind).collect();
        assert_eq!(kinds, vec![ViolationKind::MoveLimitExceeded]);
    }

    #[test]
    fn config_must_precede_use() {
        let t = InstructionTrace::new(vec![
            Instruction::Preload { b_addr: LocalAddr::sp(0), c_addr: LocalAddr::acc(0), rows: 16, cols: 16 },
            Instruction::ConfigEx { dataflow: Dataflow::OutputStationary, out_scale: Scale::ONE },
        ]);
        assert_eq!(
            check_legality(&t, &AcceleratorConfig::default()),
            vec![Violation { index: 0, kind: ViolationKind::ConfigBeforeUse }]
        );
    }

    #[test]
    fn unsupported_dataflow() {
        let cfg = AcceleratorConfig { supports_os: false, ..Default::default() };
        let t = InstructionTrace::new(vec![Instruction::ConfigEx {
            dataflow: Dataflow::OutputStationary,
            out_scale: Scale::ONE,
        }]);
        assert_eq!(check_legality(&t, &cfg)[0].kind, ViolationKind::UnsupportedDataflow);
    }

    #[test]
    fn compute_needs_preload() {
        let t = configured(vec![Instruction::Compute {
            a_addr: LocalAddr::sp(0),
            d_addr: None,
            rows: 16,
            cols: 16,
            accumulate: false,
        }]);
        assert_eq!(check_legality(&t, &AcceleratorConfig::default())[0].kind, ViolationKind::MissingPreload);
    }

    #[test]
    fn render_examples() {
        assert_eq!(render_trace(&InstructionTrace::new(vec![Instruction::Fence])), "fence\n");
        let ex = Instruction::ConfigEx { dataflow: Dataflow::WeightStationary, out_scale: Scale::new(1, 2).unwrap() };
        assert_eq!(ex.to_string(), "config.ex dataflow=WS scale=1/2");
        assert_eq!(render_trace(&InstructionTrace::default()), "");
    }

    #[test]
    fn file_round_trip_keeps_metadata() {
        let mut t = configured(vec![Instruction::Fence]);
        t.meta = TraceMeta {
            workload: Some(Workload::new(32, 16, 64)),
            schedule_hash: Some("abcd".into()),
            generator: Generator::CiscBaseline,
        };
        let back = InstructionTrace::parse_file(&t.to_file_string()).unwrap();
        assert_eq!(back, t);
    }

    fn arb_addr() -> impl Strategy<Value = LocalAddr> {
        (any::<bool>(), 0u32..100_000).prop_map(|(acc, row)| if acc { LocalAddr::acc(row) } else { LocalAddr::sp(row) })
    }

    fn arb_scale() -> impl Strategy<Value = Scale> {
        (1i64..1_000_000, 1i64..1_000_000).prop_map(|(n, d)| Scale::new(n, d).unwrap())
    }

    fn arb_instruction() -> impl Strategy<Value = Instruction> {
        let df = prop_oneof![Just(Dataflow::WeightStationary), Just(Dataflow::OutputStationary)];
        let dir = prop_oneof![Just(Direction::In), Just(Direction::Out)];
        prop_oneof![
            (df, arb_scale()).prop_map(|(dataflow, out_scale)| Instruction::ConfigEx { dataflow, out_scale }),
            (dir, any::<u32>(), arb_scale()).prop_map(|(direction, stride, scale)| Instruction::ConfigMv {
                direction,
                stride,
                scale
            }),
            (any::<u64>(), arb_addr(), 0u32..1024, 0u32..1024)
                .prop_map(|(dram_addr, dst, rows, cols)| Instruction::MoveIn { dram_addr, dst, rows, cols }),
            (any::<u64>(), arb_addr(), 0u32..1024, 0u32..1024)
                .prop_map(|(dram_addr, src, rows, cols)| Instruction::MoveOut { dram_addr, src, rows, cols }),
            (arb_addr(), arb_addr(), 0u32..64, 0u32..64)
                .prop_map(|(b_addr, c_addr, rows, cols)| Instruction::Preload { b_addr, c_addr, rows, cols }),
            (arb_addr(), proptest::option::of(arb_addr()), 0u32..64, 0u32..64, any::<bool>()).prop_map(
                |(a_addr, d_addr, rows, cols, accumulate)| Instruction::Compute {
                    a_addr,
                    d_addr,
                    rows,
                    cols,
                    accumulate
                }
            ),
            Just(Instruction::Fence),
            Just(Instruction::Flush),
        ]
    }

    proptest! {
        #[test]
        fn listing_parses_back(insts in proptest::collection::vec(arb_instruction(), 0..40)) {
            let t = InstructionTrace::new(insts);
            let text = render_trace(&t);
            prop_assert_eq!(text.lines().count(), t.len());
            let back = InstructionTrace::parse_file(&text).unwrap();
            prop_assert_eq!(back.instructions, t.instructions);
        }
    }
}
