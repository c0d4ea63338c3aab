//! Finite-difference gradient verification.
//!
//! The oracle evaluates a scalar computation twice to rule out
//! non-determinism, then compares the tape gradient of every parameter
//! element against a central difference. It only drives the public tape API
//! and never inspects an op's backward code, so it stays an independent
//! check of the analytic formulas.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Outcome of a single gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// (parameter name, flat element index) of the worst element.
    pub worst: Option<(String, usize)>,
    /// Number of elements compared.
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Relative error with an absolute floor, so that near-zero gradient pairs
/// are compared on an absolute scale instead of blowing up the ratio.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks d(f)/d(p) for every element of every listed parameter against
/// central differences (f(p+eps) - f(p-eps)) / (2 eps).
///
/// `f` must be deterministic; it is re-evaluated and compared bitwise first.
pub fn grad_check<F>(
    f: F,
    params: &[(&str, &Tensor)],
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    let probe_a = f(&Tape::no_grad())?;
    let probe_b = f(&Tape::no_grad())?;
    if probe_a.numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check target must be scalar, got {:?}",
            probe_a.shape()
        )));
    }
    if probe_a.item().to_bits() != probe_b.item().to_bits() {
        return Err(Error::OracleInvalid(format!(
            "re-evaluation mismatch: {} vs {}",
            probe_a.item(),
            probe_b.item()
        )));
    }

    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };
    for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for idx in 0..p.numel() {
            p.nudge(idx, eps);
            let plus = f(&Tape::no_grad())?.item();
            p.nudge(idx, -2.0 * eps);
            let minus = f(&Tape::no_grad())?.item();
            p.nudge(idx, eps);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.to_string(), idx));
            }
        }
    }
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(report)
}

/// Convenience: grad-check with the standard eps=1e-5 / rtol=1e-4 settings.
pub fn grad_check_default<F>(f: F, params: &[(&str, &Tensor)]) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    grad_check(f, params, 1e-5, 1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        // f = sum(x^2), x = [1, 2] -> grad [2, 4]
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().into_param();
        let report = grad_check(
            |tape| {
                let sq = tape.mul(&x, &x)?;
                tape.sum_all(&sq)
            },
            &[("x", &x)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);

        let tape = Tape::new();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn detects_non_determinism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let x = Tensor::scalar(1.0).into_param();
        let err = grad_check(
            |tape| {
                counter.set(counter.get() + 1.0);
                let noisy = Tensor::scalar(counter.get());
                let prod = tape.mul(&x, &noisy)?;
                tape.sum_all(&prod)
            },
            &[("x", &x)],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }

    #[test]
    fn composed_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Tensor::randn(vec![4, 5], 1.0, &mut rng).into_param();
        let b = Tensor::randn(vec![5, 3], 1.0, &mut rng).into_param();
        let report = grad_check_default(
            |tape| {
                let prod = tape.matmul(&a, &b)?;
                let sm = tape.softmax_lastdim(&prod)?;
                let sq = tape.mul(&sm, &prod)?;
                tape.sum_all(&sq)
            },
            &[("a", &a), ("b", &b)],
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        // The matmul-only path also satisfies the documented 1e-5 bound.
        let report = grad_check(
            |tape| {
                let prod = tape.matmul(&a, &b)?;
                let sq = tape.mul(&prod, &prod)?;
                tape.sum_all(&sq)
            },
            &[("a", &a), ("b", &b)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gelu_layernorm_conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::randn(vec![3, 8], 1.0, &mut rng).into_param();
        let gain = Tensor::randn(vec![8], 0.3, &mut rng).into_param();
        let bias = Tensor::randn(vec![8], 0.3, &mut rng).into_param();
        let report = grad_check_default(
            |tape| {
                let ln = tape.layer_norm(&x, &gain, &bias, 1e-5)?;
                let ge = tape.gelu(&ln)?;
                let sq = tape.mul(&ge, &ge)?;
                tape.sum_all(&sq)
            },
            &[("x", &x), ("gain", &gain), ("bias", &bias)],
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);

        let img = Tensor::randn(vec![2, 4, 5, 2], 1.0, &mut rng).into_param();
        let w = Tensor::randn(vec![3, 3, 2, 3], 0.5, &mut rng).into_param();
        let report = grad_check_default(
            |tape| {
                let padded = tape.pad_replicate(&img, 1)?;
                let conv = tape.conv2d(&padded, &w, (2, 1))?;
                let sq = tape.mul(&conv, &conv)?;
                tape.sum_all(&sq)
            },
            &[("img", &img), ("w", &w)],
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn broadcast_gather_normalize_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng).into_param();
        let b = Tensor::randn(vec![4], 1.0, &mut rng).into_param();
        let table = Tensor::randn(vec![5, 4], 1.0, &mut rng).into_param();
        let report = grad_check_default(
            |tape| {
                let s = tape.add(&a, &b)?;
                let m = tape.mul(&s, &b)?;
                let rows = tape.gather_rows(&table, &[1, 4, 1])?;
                let nrm = tape.l2_normalize_lastdim(&rows)?;
                let mixed = tape.mul(&nrm, &rows)?;
                let flat = tape.reshape(&m, vec![6, 4])?;
                let joined = tape.concat(&[&flat, &mixed], 0)?;
                let sq = tape.mul(&joined, &joined)?;
                let total = tape.sum_all(&sq)?;
                tape.scale(&total, 1.0 / 36.0)
            },
            &[("a", &a), ("b", &b), ("table", &table)],
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
