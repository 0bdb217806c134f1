//! Frozen hand-computed quantization cases, and random agreement between
//! the folded and reference formulations.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use sysgemm::codegen::generate_trace;
use sysgemm::config::AcceleratorConfig;
use sysgemm::quant::{fold_corrected_bias, folded_qgemm, reference_qgemm, QuantizedGemmProblem};
use sysgemm::sim::functional_execute;
use sysgemm::space::{ScheduleParams, Workload};

#[derive(Deserialize)]
struct Case {
    name: String,
    a: Vec<Vec<i8>>,
    b: Vec<Vec<i8>>,
    d: Vec<Vec<i32>>,
    zp_a: i32,
    zp_c: i32,
    s_d: f64,
    s_c: f64,
    reference: Vec<Vec<i8>>,
    folded_bias: Vec<Vec<i32>>,
    folded: Vec<Vec<i8>>,
}

fn matrix<T: Copy>(rows: &[Vec<T>]) -> Array2<T> {
    let cols = rows[0].len();
    let flat: Vec<T> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).unwrap()
}

fn cases() -> Vec<Case> {
    serde_json::from_str(include_str!("fixtures/quant_cases.json")).unwrap()
}

impl Case {
    fn problem(&self) -> QuantizedGemmProblem {
        QuantizedGemmProblem {
            q_a: matrix(&self.a),
            q_b: matrix(&self.b),
            q_d: matrix(&self.d),
            zp_a: self.zp_a,
            zp_c: self.zp_c,
            s_d: self.s_d,
            s_c: self.s_c,
        }
    }
}

#[test]
fn frozen_cases() {
    for c in cases() {
        let q = c.problem();
        assert_eq!(reference_qgemm(&q).unwrap(), matrix(&c.reference), "{}: reference", c.name);
        assert_eq!(fold_corrected_bias(&q).unwrap(), matrix(&c.folded_bias), "{}: bias", c.name);
        assert_eq!(folded_qgemm(&q).unwrap(), matrix(&c.folded), "{}: folded", c.name);
    }
}

#[test]
fn frozen_cases_on_the_accelerator() {
    let cfg = AcceleratorConfig::gemmini16_l2();
    for c in cases() {
        let q = c.problem();
        let (m, k) = q.q_a.dim();
        let w = Workload::new(m as u32, q.q_b.dim().1 as u32, k as u32);
        let prog = generate_trace(w, &ScheduleParams::minimal(cfg.dim), &q, &cfg).unwrap();
        let out = functional_execute(&prog.trace, &prog.dram_image(&q).unwrap(), &cfg).unwrap();
        assert_eq!(out, matrix(&c.folded), "{}", c.name);
    }
}

/// `zp_c * s_c / s_d` is an integer, so folding loses nothing.
fn integral_fold(q: &QuantizedGemmProblem) -> bool {
    let t = f64::from(q.zp_c) * q.s_c / q.s_d;
    t.fract() == 0.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn folded_is_within_one(seed in any::<u64>(), m in 1usize..24, n in 1usize..24, k in 1usize..48) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = QuantizedGemmProblem::random(m, n, k, &mut rng);
        let r = reference_qgemm(&q).unwrap();
        let f = folded_qgemm(&q).unwrap();
        for (a, b) in r.iter().zip(f.iter()) {
            prop_assert!((i32::from(*a) - i32::from(*b)).abs() <= 1);
        }
    }

    #[test]
    fn folded_is_exact_for_integral_terms(seed in any::<u64>(), m in 1usize..16, n in 1usize..16, k in 1usize..32, shift in 0i32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = QuantizedGemmProblem::random(m, n, k, &mut rng);
        // s_c / s_d = 2^shift
        q.s_c = (-8.0f64).exp2();
        q.s_d = (-f64::from(shift) - 8.0).exp2();
        prop_assert!(integral_fold(&q));
        prop_assert_eq!(reference_qgemm(&q).unwrap(), folded_qgemm(&q).unwrap());
    }
}
