//! Quantized GEMM semantics.
//!
//! Inputs use an asymmetric scheme (zero point `zp_a`), weights are
//! symmetric, and the result is requantized into an int8 output with zero
//! point `zp_c` and multiplier `s_d / s_c`.
//!
//! Two oracles are provided:
//!
//! * [`reference_qgemm`] subtracts the input zero point inside the reduction,
//!   adds the bias and requantizes. It never touches the accelerator model.
//! * [`folded_qgemm`] is what the accelerator computes: a raw int8 GEMM on top
//!   of a bias with every constant folded in ([`fold_corrected_bias`]), and a
//!   single output scale applied at move-out.
//!
//! The folded zero-point term is `zp_c * s_c / s_d`. That is the only form
//! for which `scale * (raw + folded_bias)` expands back to the reference
//! expression.
//!
//! Rounding is half-away-from-zero followed by int8 saturation everywhere.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("scale factors must be positive and finite (s_d={s_d}, s_c={s_c})")]
    InvalidScale { s_d: f64, s_c: f64 },
    #[error("folded bias at ({row}, {col}) does not fit in int32: {value}")]
    BiasOverflow { row: usize, col: usize, value: i64 },
}

/// A positive rational multiplier, kept reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scale {
    num: i64,
    den: i64,
}

const SCALE_LIMIT: i128 = 1 << 62;

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: i64, den: i64) -> Option<Scale> {
        if num <= 0 || den <= 0 {
            return None;
        }
        let r = Ratio::new(num, den);
        Some(Scale { num: *r.numer(), den: *r.denom() })
    }

    pub fn num(self) -> i64 {
        self.num
    }

    pub fn den(self) -> i64 {
        self.den
    }

    /// `s_d / s_c`, exact whenever the reduced fraction of the two binary
    /// floats fits in 62 bits, otherwise the closest small rational.
    pub fn from_ratio(s_d: f64, s_c: f64) -> Result<Scale, QuantError> {
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if !ok(s_d) || !ok(s_c) {
            return Err(QuantError::InvalidScale { s_d, s_c });
        }
        if let Some(exact) = exact_ratio(s_d, s_c) {
            return Ok(exact);
        }
        Ratio::<i64>::approximate_float(s_d / s_c)
            .and_then(|r| Scale::new(*r.numer(), *r.denom()))
            .ok_or(QuantError::InvalidScale { s_d, s_c })
    }

    pub fn recip(self) -> Scale {
        Scale { num: self.den, den: self.num }
    }

    /// `round(x * self)`.
    pub fn apply(self, x: i64) -> i64 {
        round_half_away(i128::from(x) * i128::from(self.num), i128::from(self.den)) as i64
    }

    /// `round(offset + x * self)`, rounded once.
    pub fn apply_with_offset(self, x: i64, offset: i64) -> i64 {
        let den = i128::from(self.den);
        round_half_away(i128::from(offset) * den + i128::from(x) * i128::from(self.num), den) as i64
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn decompose(v: f64) -> (i128, i32) {
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as i128;
    if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1 << 52), exp - 1075)
    }
}

fn exact_ratio(a: f64, b: f64) -> Option<Scale> {
    let (ma, ea) = decompose(a);
    let (mb, eb) = decompose(b);
    let shift = ea - eb;
    if shift.abs() > 60 {
        return None;
    }
    let (num, den) = if shift >= 0 { (ma << shift, mb) } else { (ma, mb << -shift) };
    let r = Ratio::new(num, den);
    if *r.numer() >= SCALE_LIMIT || *r.denom() >= SCALE_LIMIT {
        return None;
    }
    Some(Scale { num: *r.numer() as i64, den: *r.denom() as i64 })
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, d) = s.split_once('/').unwrap_or((s, "1"));
        let num: i64 = n.trim().parse().map_err(|_| format!("bad scale numerator in {s:?}"))?;
        let den: i64 = d.trim().parse().map_err(|_| format!("bad scale denominator in {s:?}"))?;
        Scale::new(num, den).ok_or_else(|| format!("scale must be positive: {s:?}"))
    }
}

impl TryFrom<String> for Scale {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Scale> for String {
    fn from(s: Scale) -> String {
        s.to_string()
    }
}

/// Integer division of `num / den` (den > 0) rounding ties away from zero.
pub fn round_half_away(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num / den;
    let r = num % den;
    if 2 * r.abs() >= den {
        q + num.signum()
    } else {
        q
    }
}

pub fn saturate_i8(v: i64) -> i8 {
    v.clamp(i64::from(i8::MIN), i64::from(i8::MAX)) as i8
}

/// Everything the quantized GEMM `C[M,N] = A[M,K] * B[K,N] + D[M,N]` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGemmProblem {
    pub q_a: Array2<i8>,
    pub q_b: Array2<i8>,
    pub q_d: Array2<i32>,
    pub zp_a: i32,
    pub zp_c: i32,
    pub s_d: f64,
    pub s_c: f64,
}

impl QuantizedGemmProblem {
    /// `(m, n, k)` after checking that the operand shapes agree.
    pub fn shape(&self) -> Result<(usize, usize, usize), QuantError> {
        let (m, k) = self.q_a.dim();
        let (kb, n) = self.q_b.dim();
        if k != kb {
            return Err(QuantError::ShapeMismatch(format!("A is {m}x{k} but B is {kb}x{n}")));
        }
        if self.q_d.dim() != (m, n) {
            let (dm, dn) = self.q_d.dim();
            return Err(QuantError::ShapeMismatch(format!("bias is {dm}x{dn}, expected {m}x{n}")));
        }
        Ok((m, n, k))
    }

    /// The requantization multiplier `s_d / s_c`.
    pub fn requant_scale(&self) -> Result<Scale, QuantError> {
        Scale::from_ratio(self.s_d, self.s_c)
    }

    /// Random problem with int8 operands, a moderate bias, and a scale that
    /// keeps most outputs away from saturation.
    pub fn random<R: Rng + ?Sized>(m: usize, n: usize, k: usize, rng: &mut R) -> Self {
        let q_a = Array2::from_shape_simple_fn((m, k), || rng.gen::<i8>());
        let q_b = Array2::from_shape_simple_fn((k, n), || rng.gen::<i8>());
        let q_d = Array2::from_shape_simple_fn((m, n), || rng.gen_range(-(1 << 14)..=(1 << 14)));
        // typical |sum_k a*b| is about sqrt(k) * 74^2; aim outputs at +-48
        let target = 48.0 / ((k.max(1) as f64).sqrt() * 74.0 * 74.0);
        let s_c = f64::from(rng.gen_range(1u32..=64)) / 32.0;
        let raw = target * s_c * rng.gen_range(-2.0f64..2.0).exp2();
        // snap to a dyadic value so the multiplier stays exact
        let s_d = (raw * 1_048_576.0).round().max(1.0) / 1_048_576.0;
        QuantizedGemmProblem {
            q_a,
            q_b,
            q_d,
            zp_a: rng.gen_range(-128..=127),
            zp_c: rng.gen_range(-128..=127),
            s_d,
            s_c,
        }
    }
}

/// Ground-truth quantized GEMM: zero-point correction inside the reduction,
/// bias, then requantization `zp_c + (s_d/s_c) * acc`.
pub fn reference_qgemm(q: &QuantizedGemmProblem) -> Result<Array2<i8>, QuantError> {
    let (m, n, k) = q.shape()?;
    let scale = q.requant_scale()?;
    let zp_a = i64::from(q.zp_a);
    let mut out = Array2::<i8>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = i64::from(q.q_d[[i, j]]);
            for kk in 0..k {
                acc += (i64::from(q.q_a[[i, kk]]) - zp_a) * i64::from(q.q_b[[kk, j]]);
            }
            out[[i, j]] = saturate_i8(scale.apply_with_offset(acc, i64::from(q.zp_c)));
        }
    }
    Ok(out)
}

/// Bias with every constant folded in:
/// `D'(m,n) = D(m,n) - zp_a * sum_k B(k,n) + round(zp_c * s_c / s_d)`.
///
/// The correction depends only on the weights, so it is computed once per
/// weight matrix and broadcast down each column.
pub fn fold_corrected_bias(q: &QuantizedGemmProblem) -> Result<Array2<i32>, QuantError> {
    let (m, n, _) = q.shape()?;
    let scale = q.requant_scale()?;
    let zp_term = scale.recip().apply(i64::from(q.zp_c));
    let colsum = q.q_b.map(|&v| i64::from(v)).sum_axis(Axis(0));
    let mut out = Array2::<i32>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let value = i64::from(q.q_d[[i, j]]) - i64::from(q.zp_a) * colsum[j] + zp_term;
            out[[i, j]] = i32::try_from(value).map_err(|_| QuantError::BiasOverflow { row: i, col: j, value })?;
        }
    }
    Ok(out)
}

/// What the accelerator computes: raw int8 GEMM accumulated in wrapping
/// int32 on top of the folded bias, scaled once on the way out.
pub fn folded_qgemm(q: &QuantizedGemmProblem) -> Result<Array2<i8>, QuantError> {
    let (m, n, k) = q.shape()?;
    let scale = q.requant_scale()?;
    let bias = fold_corrected_bias(q)?;
    let mut out = Array2::<i8>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = bias[[i, j]];
            for kk in 0..k {
                acc = acc.wrapping_add(i32::from(q.q_a[[i, kk]]) * i32::from(q.q_b[[kk, j]]));
            }
            out[[i, j]] = saturate_i8(scale.apply(i64::from(acc)));
        }
    }
    Ok(out)
}
