//! Reverse-mode differentiation tape.
//!
//! Ops executed through a recording [`Tape`] push a backward closure; closures
//! run in exact reverse execution order on [`Tape::backward`]. Every op's
//! parents were executed (and recorded) before it, so reverse order guarantees
//! each output gradient is final before it is propagated.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Tape {
    ops: RefCell<Vec<(&'static str, Box<dyn Fn()>)>>,
    enabled: bool,
}

impl Tape {
    /// A recording tape: ops involving grad-requiring tensors are tracked.
    pub fn new() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
            enabled: true,
        }
    }

    /// An inference tape: nothing is recorded, backward is an error.
    pub fn no_grad() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
            enabled: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn num_ops(&self) -> usize {
        self.ops.borrow().len()
    }

    /// True when an op over these inputs must be recorded.
    pub(crate) fn should_record(&self, inputs: &[&Tensor]) -> bool {
        self.enabled && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn record(&self, name: &'static str, f: impl Fn() + 'static) {
        debug_assert!(self.enabled);
        self.ops.borrow_mut().push((name, Box::new(f)));
    }

    /// Seeds d(loss)/d(loss) = 1 and replays the tape backwards, accumulating
    /// gradients into every recorded tensor that requires them.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !self.enabled {
            return Err(Error::Input(
                "backward on a no-grad tape".to_string(),
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.seed_grad_one();
        if std::env::var_os("CFE_BWD_PROFILE").is_some() {
            let mut by_name: std::collections::BTreeMap<&'static str, (f64, usize)> =
                std::collections::BTreeMap::new();
            for (name, op) in self.ops.borrow().iter().rev() {
                let t0 = std::time::Instant::now();
                op();
                let e = by_name.entry(name).or_insert((0.0, 0));
                e.0 += t0.elapsed().as_secs_f64();
                e.1 += 1;
            }
            let total: f64 = by_name.values().map(|v| v.0).sum();
            eprintln!("backward total {:.3}s:", total);
            let mut rows: Vec<_> = by_name.into_iter().collect();
            rows.sort_by(|a, b| b.1.0.partial_cmp(&a.1.0).unwrap());
            for (name, (dt, n)) in rows {
                eprintln!("  {name:<16} {dt:.4}s over {n} ops");
            }
        } else {
            for (_, op) in self.ops.borrow().iter().rev() {
                op();
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::no_grad();
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .into_param();
        let out = tape.mul(&a, &a).unwrap();
        assert_eq!(tape.num_ops(), 0);
        assert!(!out.requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().into_param();
        let out = tape.mul(&a, &a).unwrap();
        assert!(tape.backward(&out).is_err());
    }

    #[test]
    fn constant_only_ops_are_not_recorded() {
        let tape = Tape::new();
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let out = tape.add(&a, &b).unwrap();
        assert_eq!(tape.num_ops(), 0);
        assert!(!out.requires_grad());
        assert_eq!(out.to_vec(), vec![4.0, 6.0]);
    }
}
