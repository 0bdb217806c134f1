//! Architectural state and per-instruction semantics.

use crate::config::AcceleratorConfig;
use crate::isa::{Dataflow, Direction, Instruction, LocalAddr, Memory};
use crate::quant::{saturate_i8, Scale};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MoveConfig {
    stride: u64,
    scale: Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Staged {
    b_addr: LocalAddr,
    c_addr: LocalAddr,
    rows: u32,
    cols: u32,
}

/// Scratchpad, accumulator and DRAM contents plus the pipeline configuration.
///
/// Local memories are stored row-major, `dim` elements per row, with a
/// per-row initialization bit.
#[derive(Debug, Clone)]
pub struct MachineState {
    dim: usize,
    input_bytes: u64,
    acc_bytes: u64,
    pub scratchpad: Vec<i8>,
    pub sp_written: Vec<bool>,
    pub accumulator: Vec<i32>,
    pub acc_written: Vec<bool>,
    pub dram: Vec<u8>,
    pub dataflow: Option<Dataflow>,
    ex_scale: Scale,
    mv_in: Option<MoveConfig>,
    mv_out: Option<MoveConfig>,
    staged: Option<Staged>,
}

impl MachineState {
    pub fn new(cfg: &AcceleratorConfig, dram: Vec<u8>) -> Self {
        let dim = cfg.dim as usize;
        let sp_rows = cfg.sp_rows() as usize;
        let acc_rows = cfg.acc_rows() as usize;
        MachineState {
            dim,
            input_bytes: cfg.input_bytes(),
            acc_bytes: cfg.acc_bytes(),
            scratchpad: vec![0; sp_rows * dim],
            sp_written: vec![false; sp_rows],
            accumulator: vec![0; acc_rows * dim],
            acc_written: vec![false; acc_rows],
            dram,
            dataflow: None,
            ex_scale: Scale::ONE,
            mv_in: None,
            mv_out: None,
            staged: None,
        }
    }

    fn rows_of(&self, mem: Memory) -> usize {
        match mem {
            Memory::Scratchpad => self.sp_written.len(),
            Memory::Accumulator => self.acc_written.len(),
        }
    }

    /// Local row holding element `(r, c)` of a patch at `addr` with `rows` rows.
    fn local_row(&self, addr: LocalAddr, rows: u32, r: u32, c: u32) -> usize {
        addr.row as usize + (c as usize / self.dim) * rows as usize + r as usize
    }

    fn check_patch(&self, index: usize, addr: LocalAddr, rows: u32, cols: u32) -> Result<(), SimError> {
        let blocks = (cols as usize).div_ceil(self.dim);
        let end = addr.row as usize + rows as usize * blocks;
        if end > self.rows_of(addr.mem) {
            return Err(SimError::AddressOutOfRange { index });
        }
        Ok(())
    }

    fn check_written(&self, index: usize, addr: LocalAddr, rows: u32, cols: u32) -> Result<(), SimError> {
        self.check_patch(index, addr, rows, cols)?;
        let blocks = (cols as usize).div_ceil(self.dim);
        let start = addr.row as usize;
        let written = match addr.mem {
            Memory::Scratchpad => &self.sp_written,
            Memory::Accumulator => &self.acc_written,
        };
        if let Some(off) = written[start..start + rows as usize * blocks].iter().position(|w| !w) {
            let row = (start + off) as u32;
            return Err(SimError::UninitializedRead { index, addr: LocalAddr { mem: addr.mem, row } });
        }
        Ok(())
    }

    fn dram_range(&self, index: usize, at: u64, len: u64) -> Result<std::ops::Range<usize>, SimError> {
        let end = at.checked_add(len).ok_or(SimError::AddressOutOfRange { index })?;
        if end > self.dram.len() as u64 {
            return Err(SimError::AddressOutOfRange { index });
        }
        Ok(at as usize..end as usize)
    }

    /// Applies the architectural effect of one instruction.
    pub fn step(&mut self, index: usize, inst: &Instruction) -> Result<(), SimError> {
        match *inst {
            Instruction::ConfigEx { dataflow, out_scale } => {
                self.dataflow = Some(dataflow);
                self.ex_scale = out_scale;
            }
            Instruction::ConfigMv { direction, stride, scale } => {
                let mc = Some(MoveConfig { stride: u64::from(stride), scale });
                match direction {
                    Direction::In => self.mv_in = mc,
                    Direction::Out => self.mv_out = mc,
                }
            }
            Instruction::MoveIn { dram_addr, dst, rows, cols } => self.move_in(index, dram_addr, dst, rows, cols)?,
            Instruction::MoveOut { dram_addr, src, rows, cols } => self.move_out(index, dram_addr, src, rows, cols)?,
            Instruction::Preload { b_addr, c_addr, rows, cols } => {
                if self.dataflow.is_none() {
                    return Err(SimError::NotConfigured { index });
                }
                if b_addr.is_acc() || !c_addr.is_acc() || rows as usize > self.dim || cols as usize > self.dim {
                    return Err(SimError::ShapeMismatch { index });
                }
                self.check_written(index, b_addr, rows, cols)?;
                self.check_patch(index, c_addr, rows, cols)?;
                self.staged = Some(Staged { b_addr, c_addr, rows, cols });
            }
            Instruction::Compute { a_addr, d_addr, rows, cols, accumulate } => {
                self.compute(index, a_addr, d_addr, rows, cols, accumulate)?
            }
            Instruction::Fence | Instruction::Flush => {}
        }
        Ok(())
    }

    fn move_in(&mut self, index: usize, dram_addr: u64, dst: LocalAddr, rows: u32, cols: u32) -> Result<(), SimError> {
        let mc = self.mv_in.ok_or(SimError::NotConfigured { index })?;
        self.check_patch(index, dst, rows, cols)?;
        let elem = if dst.is_acc() { self.acc_bytes } else { self.input_bytes };
        let pitch = mc.stride * elem;
        let dim = self.dim;
        for r in 0..rows {
            let src = self.dram_range(index, dram_addr + u64::from(r) * pitch, u64::from(cols) * elem)?;
            // zero the tail of partial blocks so the whole row is defined
            for b in 0..(cols as usize).div_ceil(dim) {
                let row = self.local_row(dst, rows, r, (b * dim) as u32);
                match dst.mem {
                    Memory::Scratchpad => {
                        self.scratchpad[row * dim..(row + 1) * dim].fill(0);
                        self.sp_written[row] = true;
                    }
                    Memory::Accumulator => {
                        self.accumulator[row * dim..(row + 1) * dim].fill(0);
                        self.acc_written[row] = true;
                    }
                }
            }
            for c in 0..cols {
                let row = self.local_row(dst, rows, r, c);
                let at = row * dim + c as usize % dim;
                match dst.mem {
                    Memory::Scratchpad => {
                        let v = i64::from(self.dram[src.start + c as usize] as i8);
                        self.scratchpad[at] =
                            if mc.scale == Scale::ONE { v as i8 } else { saturate_i8(mc.scale.apply(v)) };
                    }
                    Memory::Accumulator => {
                        let o = src.start + c as usize * elem as usize;
                        let raw = i32::from_le_bytes(self.dram[o..o + 4].try_into().expect("4 bytes"));
                        self.accumulator[at] = if mc.scale == Scale::ONE {
                            raw
                        } else {
                            mc.scale.apply(i64::from(raw)).clamp(i64::from(i32::MIN), i64::from(i32::MAX)) as i32
                        };
                    }
                }
            }
        }
        Ok(())
    }

    fn move_out(&mut self, index: usize, dram_addr: u64, src: LocalAddr, rows: u32, cols: u32) -> Result<(), SimError> {
        let mc = self.mv_out.ok_or(SimError::NotConfigured { index })?;
        self.check_written(index, src, rows, cols)?;
        let pitch = mc.stride * self.input_bytes;
        let dim = self.dim;
        for r in 0..rows {
            let dst = self.dram_range(index, dram_addr + u64::from(r) * pitch, u64::from(cols) * self.input_bytes)?;
            for c in 0..cols {
                let at = self.local_row(src, rows, r, c) * dim + c as usize % dim;
                let v = match src.mem {
                    Memory::Accumulator => saturate_i8(mc.scale.apply(i64::from(self.accumulator[at]))),
                    Memory::Scratchpad => self.scratchpad[at],
                };
                self.dram[dst.start + c as usize] = v as u8;
            }
        }
        Ok(())
    }

    fn compute(
        &mut self,
        index: usize,
        a_addr: LocalAddr,
        d_addr: Option<LocalAddr>,
        rows: u32,
        cols: u32,
        accumulate: bool,
    ) -> Result<(), SimError> {
        if self.dataflow.is_none() {
            return Err(SimError::NotConfigured { index });
        }
        let st = self.staged.ok_or(SimError::ShapeMismatch { index })?;
        if a_addr.is_acc() || rows as usize > self.dim || cols != st.rows {
            return Err(SimError::ShapeMismatch { index });
        }
        self.check_written(index, a_addr, rows, cols)?;
        if let Some(d) = d_addr {
            if d.is_acc() {
                return Err(SimError::ShapeMismatch { index });
            }
            self.check_written(index, d, rows, st.cols)?;
        }
        self.check_patch(index, st.c_addr, rows, st.cols)?;
        if accumulate {
            self.check_written(index, st.c_addr, rows, st.cols)?;
        }
        let dim = self.dim;
        let (m, k, n) = (rows as usize, cols as usize, st.cols as usize);
        let (a0, b0, c0) = (a_addr.row as usize, st.b_addr.row as usize, st.c_addr.row as usize);
        let scale = self.ex_scale;
        let mut sums = vec![0i32; n];
        for i in 0..m {
            sums.fill(0);
            let a_row = &self.scratchpad[(a0 + i) * dim..(a0 + i) * dim + k];
            for (kk, &a) in a_row.iter().enumerate() {
                let a = i32::from(a);
                let b_row = &self.scratchpad[(b0 + kk) * dim..(b0 + kk) * dim + n];
                for (s, &b) in sums.iter_mut().zip(b_row) {
                    *s = s.wrapping_add(a.wrapping_mul(i32::from(b)));
                }
            }
            let c_row = (c0 + i) * dim;
            for j in 0..n {
                let mut v = sums[j];
                if scale != Scale::ONE {
                    v = scale.apply(i64::from(v)) as i32;
                }
                if let Some(d) = d_addr {
                    v = v.wrapping_add(i32::from(self.scratchpad[(d.row as usize + i) * dim + j]));
                }
                let slot = &mut self.accumulator[c_row + j];
                *slot = if accumulate { slot.wrapping_add(v) } else { v };
            }
            self.acc_written[c0 + i] = true;
        }
        Ok(())
    }
}
