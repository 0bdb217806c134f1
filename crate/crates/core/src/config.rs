//! Static hardware description of the modeled accelerator.
//!
//! Every other module validates its inputs against an [`AcceleratorConfig`]:
//! the schedule space prunes tilings that overflow the scratchpad or the
//! accumulator, the legality checker bounds move sizes and addresses, and the
//! simulator takes its cost model from [`TimingParams`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Memory-path and pipeline costs used by the timing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingParams {
    pub clock_hz: f64,
    /// Bytes moved per cycle by the DMA engine once a transfer is streaming.
    pub dma_bytes_per_cycle: u64,
    /// Fixed latency paid by every move instruction.
    pub dma_latency_cycles: u64,
    /// Cycles to (re)fill the array when the stationary operand changes.
    pub exec_fill_cycles: u64,
    /// Steady-state cycles for one dim x dim x dim GEMM.
    pub exec_cycles_per_tile: u64,
    pub config_cycles: u64,
    pub l2_enabled: bool,
}

impl TimingParams {
    /// Memory path through the shared L2 cache.
    pub fn l2() -> Self {
        TimingParams {
            clock_hz: 100e6,
            dma_bytes_per_cycle: 16,
            dma_latency_cycles: 40,
            exec_fill_cycles: 16,
            exec_cycles_per_tile: 16,
            config_cycles: 4,
            l2_enabled: true,
        }
    }

    /// Memory path straight to DRAM.
    pub fn no_l2() -> Self {
        TimingParams { dma_bytes_per_cycle: 8, dma_latency_cycles: 120, l2_enabled: false, ..Self::l2() }
    }
}

impl Default for TimingParams {
    fn default() -> Self {
        Self::l2()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcceleratorConfig {
    /// The systolic array is `dim x dim` MAC units.
    pub dim: u32,
    pub input_bits: u32,
    pub acc_bits: u32,
    pub sp_banks: u32,
    /// Each scratchpad row holds `dim` input-width elements.
    pub sp_bank_rows: u32,
    pub acc_banks: u32,
    /// Each accumulator row holds `dim` accumulator-width elements.
    pub acc_bank_rows: u32,
    pub max_mv_rows: u32,
    pub max_mv_cols: u32,
    pub rob_entries: u32,
    pub supports_ws: bool,
    pub supports_os: bool,
    pub supports_big_mvout: bool,
    /// ROB share above which the load-balancing issue logic pauses a category.
    pub balance_threshold: f64,
    pub timing: TimingParams,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        AcceleratorConfig {
            dim: 16,
            input_bits: 8,
            acc_bits: 32,
            sp_banks: 4,
            sp_bank_rows: 4096,
            acc_banks: 1,
            acc_bank_rows: 1024,
            max_mv_rows: 256,
            max_mv_cols: 256,
            rob_entries: 16,
            supports_ws: true,
            supports_os: true,
            supports_big_mvout: true,
            balance_threshold: 0.5,
            timing: TimingParams::default(),
        }
    }
}

/// A single violated invariant reported by [`AcceleratorConfig::validate`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("systolic array dimension must be at least 1")]
    ZeroDimension,
    #[error("move limit {limit} for {axis} is below the array dimension {dim}")]
    MoveLimitBelowDim { axis: &'static str, limit: u32, dim: u32 },
    #[error("{0} has no banks or no rows")]
    EmptyMemory(&'static str),
    #[error("{name} bit width {bits} is unsupported (inputs are 8-bit, accumulators 32-bit)")]
    BitWidth { name: &'static str, bits: u32 },
    #[error("reorder buffer needs at least one entry")]
    EmptyRob,
    #[error("accelerator supports neither WS nor OS dataflow")]
    NoDataflow,
    #[error("balance threshold {0} outside (0, 1]")]
    BalanceThreshold(f64),
    #[error("invalid timing parameter: {0}")]
    Timing(&'static str),
}

/// Every invariant an [`AcceleratorConfig`] violates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "invalid accelerator config: {}", msgs.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

impl AcceleratorConfig {
    /// Returns the config unchanged if every invariant holds, otherwise the
    /// full list of violations.
    pub fn validate(self) -> Result<Self, ConfigErrors> {
        let mut errs = Vec::new();
        if self.dim == 0 {
            errs.push(ConfigError::ZeroDimension);
        }
        for (axis, limit) in [("rows", self.max_mv_rows), ("cols", self.max_mv_cols)] {
            if limit < self.dim {
                errs.push(ConfigError::MoveLimitBelowDim { axis, limit, dim: self.dim });
            }
        }
        if self.sp_banks == 0 || self.sp_bank_rows == 0 {
            errs.push(ConfigError::EmptyMemory("scratchpad"));
        }
        if self.acc_banks == 0 || self.acc_bank_rows == 0 {
            errs.push(ConfigError::EmptyMemory("accumulator"));
        }
        for (name, bits, want) in [("input", self.input_bits, 8), ("accumulator", self.acc_bits, 32)] {
            if bits != want {
                errs.push(ConfigError::BitWidth { name, bits });
            }
        }
        if self.rob_entries == 0 {
            errs.push(ConfigError::EmptyRob);
        }
        if !self.supports_ws && !self.supports_os {
            errs.push(ConfigError::NoDataflow);
        }
        if !(self.balance_threshold > 0.0 && self.balance_threshold <= 1.0) {
            errs.push(ConfigError::BalanceThreshold(self.balance_threshold));
        }
        let t = &self.timing;
        if !(t.clock_hz > 0.0 && t.clock_hz.is_finite()) {
            errs.push(ConfigError::Timing("clock_hz must be positive"));
        }
        if t.dma_bytes_per_cycle == 0 {
            errs.push(ConfigError::Timing("dma_bytes_per_cycle must be positive"));
        }
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(ConfigErrors(errs))
        }
    }

    pub fn input_bytes(&self) -> u64 {
        u64::from(self.input_bits / 8)
    }

    pub fn acc_bytes(&self) -> u64 {
        u64::from(self.acc_bits / 8)
    }

    pub fn sp_rows(&self) -> u32 {
        self.sp_banks * self.sp_bank_rows
    }

    pub fn acc_rows(&self) -> u32 {
        self.acc_banks * self.acc_bank_rows
    }

    pub fn scratchpad_bytes(&self) -> u64 {
        u64::from(self.sp_banks) * u64::from(self.sp_bank_rows) * u64::from(self.dim) * self.input_bytes()
    }

    pub fn accumulator_bytes(&self) -> u64 {
        u64::from(self.acc_banks) * u64::from(self.acc_bank_rows) * u64::from(self.dim) * self.acc_bytes()
    }

    /// Upper bound on throughput: every MAC busy every cycle.
    pub fn theoretical_peak_gops(&self) -> f64 {
        2.0 * f64::from(self.dim) * f64::from(self.dim) * self.timing.clock_hz / 1e9
    }

    /// The reference 16x16 configuration with its memory path through L2.
    pub fn gemmini16_l2() -> Self {
        Self::default()
    }

    pub fn gemmini16_nol2() -> Self {
        AcceleratorConfig { timing: TimingParams::no_l2(), ..Self::default() }
    }
}

/// A config file: an optional display label plus the accelerator fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    #[serde(default)]
    pub label: String,
    #[serde(flatten)]
    pub accel: AcceleratorConfig,
}

#[derive(Debug, Error)]
pub enum ConfigLoadError {
    #[error("reading {path}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}")]
    Parse { path: String, source: toml::de::Error },
    #[error(transparent)]
    Invalid(#[from] ConfigErrors),
}

pub const GEMMINI16_L2_CFG: &str = include_str!("../presets/gemmini16_l2.cfg");
pub const GEMMINI16_NOL2_CFG: &str = include_str!("../presets/gemmini16_nol2.cfg");

impl ConfigDocument {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigLoadError> {
        let doc: ConfigDocument =
            toml::from_str(text).map_err(|source| ConfigLoadError::Parse { path: origin.to_string(), source })?;
        let accel = doc.accel.validate()?;
        Ok(ConfigDocument { label: doc.label, accel })
    }

    /// Loads and validates a config file. An empty label falls back to the
    /// file stem.
    pub fn load(path: &Path) -> Result<Self, ConfigLoadError> {
        let shown = path.display().to_string();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigLoadError::Io { path: shown.clone(), source })?;
        let mut doc = Self::parse(&text, &shown)?;
        if doc.label.is_empty() {
            doc.label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(doc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn preset_l2() -> Self {
        Self::parse(GEMMINI16_L2_CFG, "gemmini16_l2.cfg").expect("shipped preset is valid")
    }

    pub fn preset_nol2() -> Self {
        Self::parse(GEMMINI16_NOL2_CFG, "gemmini16_nol2.cfg").expect("shipped preset is valid")
    }
}
