//! Spatial decay matrices for attention attenuation.
//!
//! Three options, per token pair (i, j) on the stage grid:
//!   1. `gamma^(|xi-xj| + |yi-yj|)`        (L1 exponent)
//!   2. `gamma^max(|xi-xj|, |yi-yj|)`      (Chebyshev exponent)
//!   3. `[|xi-xj| <= w  &  |yi-yj| <= h]`  (binary window)
//!
//! Options 1-2 use a per-head gamma; option 3 is head independent. The
//! matrices are constants: no gradient ever flows into them.

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayOption {
    /// L1-distance exponent.
    Sum,
    /// Chebyshev-distance exponent. Default; the max keeps same-character
    /// token pairs (short diagonal offsets) closer to 1 than option 1 does.
    Max,
    /// Binary w-by-h window indicator.
    Window,
}

impl DecayOption {
    pub fn from_index(i: usize) -> Result<DecayOption> {
        match i {
            1 => Ok(DecayOption::Sum),
            2 => Ok(DecayOption::Max),
            3 => Ok(DecayOption::Window),
            other => Err(Error::config(format!("decay option must be 1, 2 or 3, got {other}"))),
        }
    }

    pub fn index(&self) -> usize {
        match self {
            DecayOption::Sum => 1,
            DecayOption::Max => 2,
            DecayOption::Window => 3,
        }
    }
}

/// How to build the decay matrix for one stage.
#[derive(Debug, Clone)]
pub struct DecaySpec {
    pub option: DecayOption,
    /// Per-head decay bases, each in (0, 1). Ignored by `Window`.
    pub gammas: Vec<f64>,
    /// Window half-extents (x then y) for `Window`.
    pub window: (usize, usize),
}

impl DecaySpec {
    pub fn new(option: DecayOption, gammas: Vec<f64>, window: (usize, usize)) -> Result<DecaySpec> {
        if matches!(option, DecayOption::Sum | DecayOption::Max) {
            if gammas.is_empty() {
                return Err(Error::config("decay options 1-2 need at least one gamma"));
            }
            for &g in &gammas {
                if !(g > 0.0 && g < 1.0) {
                    return Err(Error::config(format!(
                        "gamma must lie strictly inside (0, 1), got {g}"
                    )));
                }
            }
        }
        Ok(DecaySpec { option, gammas, window })
    }

    pub fn num_heads(&self) -> usize {
        self.gammas.len()
    }
}

/// Default per-head gamma schedule: `1 - 2^(-5 - h)`. Strictly increasing,
/// always inside (0, 1).
pub fn gamma_schedule(num_heads: usize) -> Vec<f64> {
    (0..num_heads).map(|h| 1.0 - 2f64.powi(-5 - h as i32)).collect()
}

/// Builds the `[heads, L, L]` decay tensor for a token grid.
///
/// All options give a unit diagonal; for `Window` every head gets the same
/// slice. Entries always lie in [0, 1].
pub fn build_decay(spec: &DecaySpec, grid: &TokenGrid) -> Result<Tensor> {
    let l = grid.len();
    if l == 0 {
        return Err(Error::config("decay matrix over an empty grid"));
    }
    let heads = spec.gammas.len().max(1);
    let mut data = vec![0.0; heads * l * l];
    match spec.option {
        DecayOption::Sum | DecayOption::Max => {
            // exponent table, shared across heads
            let mut expo = vec![0i32; l * l];
            for i in 0..l {
                let (xi, yi) = grid.coords(i);
                for j in 0..l {
                    let (xj, yj) = grid.coords(j);
                    let dx = xi.abs_diff(xj) as i32;
                    let dy = yi.abs_diff(yj) as i32;
                    expo[i * l + j] = match spec.option {
                        DecayOption::Sum => dx + dy,
                        DecayOption::Max => dx.max(dy),
                        DecayOption::Window => unreachable!(),
                    };
                }
            }
            let max_expo = *expo.iter().max().unwrap();
            for (h, &gamma) in spec.gammas.iter().enumerate() {
                let powers: Vec<f64> = (0..=max_expo).map(|e| gamma.powi(e)).collect();
                let slice = &mut data[h * l * l..(h + 1) * l * l];
                for (d, &e) in slice.iter_mut().zip(&expo) {
                    *d = powers[e as usize];
                }
            }
        }
        DecayOption::Window => {
            let (w, h_win) = spec.window;
            for i in 0..l {
                let (xi, yi) = grid.coords(i);
                for j in 0..l {
                    let (xj, yj) = grid.coords(j);
                    let inside = xi.abs_diff(xj) <= w && yi.abs_diff(yj) <= h_win;
                    data[i * l + j] = if inside { 1.0 } else { 0.0 };
                }
            }
            let first: Vec<f64> = data[..l * l].to_vec();
            for h in 1..heads {
                data[h * l * l..(h + 1) * l * l].copy_from_slice(&first);
            }
        }
    }
    Tensor::from_vec(vec![heads, l, l], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn entry(d: &Tensor, l: usize, h: usize, i: usize, j: usize) -> f64 {
        d.data()[h * l * l + i * l + j]
    }

    #[test]
    fn option2_chebyshev_example() {
        // tokens (0,0) and (2,1) on a 2x3 grid -> 0.5^max(2,1) = 0.25
        let grid = TokenGrid::new(2, 3);
        let spec = DecaySpec::new(DecayOption::Max, vec![0.5], (0, 0)).unwrap();
        let d = build_decay(&spec, &grid).unwrap();
        let i = 0; // (0,0)
        let j = 1 * 3 + 2; // (2,1)
        assert_abs_diff_eq!(entry(&d, 6, 0, i, j), 0.25);
    }

    #[test]
    fn option1_l1_example() {
        // same pair -> 0.5^(2+1) = 0.125
        let grid = TokenGrid::new(2, 3);
        let spec = DecaySpec::new(DecayOption::Sum, vec![0.5], (0, 0)).unwrap();
        let d = build_decay(&spec, &grid).unwrap();
        assert_abs_diff_eq!(entry(&d, 6, 0, 0, 5), 0.125);
    }

    #[test]
    fn option3_window_boundary() {
        // w=5, h=3: |dx|=6 -> 0; |dx|=5 & |dy|=3 -> 1 (inclusive window)
        let grid = TokenGrid::new(4, 8);
        let spec = DecaySpec::new(DecayOption::Window, vec![], (5, 3)).unwrap();
        let d = build_decay(&spec, &grid).unwrap();
        let l = 32;
        let at = |x: usize, y: usize| y * 8 + x;
        assert_eq!(entry(&d, l, 0, at(0, 0), at(6, 0)), 0.0);
        assert_eq!(entry(&d, l, 0, at(0, 0), at(5, 3)), 1.0);
    }

    #[test]
    fn gamma_schedule_values() {
        assert_eq!(gamma_schedule(1), vec![0.96875]);
        assert_eq!(
            gamma_schedule(4),
            vec![0.96875, 0.984375, 0.9921875, 0.99609375]
        );
        for &g in gamma_schedule(12).iter() {
            assert!(g > 0.0 && g < 1.0);
        }
        let s = gamma_schedule(8);
        assert!(s.windows(2).all(|w| w[0] < w[1]), "strictly increasing");
    }

    #[test]
    fn gamma_out_of_range_is_config_error() {
        assert!(DecaySpec::new(DecayOption::Max, vec![1.0], (0, 0)).is_err());
        assert!(DecaySpec::new(DecayOption::Sum, vec![0.0], (0, 0)).is_err());
        assert!(DecaySpec::new(DecayOption::Window, vec![], (5, 3)).is_ok());
    }

    #[test]
    fn symmetry_unit_diagonal_and_option_ordering() {
        let grid = TokenGrid::new(4, 6);
        let l = grid.len();
        let gammas = vec![0.5, 0.9];
        let d1 = build_decay(
            &DecaySpec::new(DecayOption::Sum, gammas.clone(), (0, 0)).unwrap(),
            &grid,
        )
        .unwrap();
        let d2 = build_decay(
            &DecaySpec::new(DecayOption::Max, gammas.clone(), (0, 0)).unwrap(),
            &grid,
        )
        .unwrap();
        let d3 = build_decay(
            &DecaySpec::new(DecayOption::Window, vec![0.5, 0.9], (2, 1)).unwrap(),
            &grid,
        )
        .unwrap();
        for d in [&d1, &d2, &d3] {
            let data = d.data();
            for h in 0..2 {
                for i in 0..l {
                    assert_eq!(data[h * l * l + i * l + i], 1.0, "unit diagonal");
                    for j in 0..l {
                        assert_eq!(
                            data[h * l * l + i * l + j],
                            data[h * l * l + j * l + i],
                            "symmetry"
                        );
                        assert!(data[h * l * l + i * l + j] >= 0.0);
                        assert!(data[h * l * l + i * l + j] <= 1.0);
                    }
                }
            }
        }
        // option 2 >= option 1 entrywise (max <= sum in the exponent)
        let a = d1.data();
        let b = d2.data();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(y >= x);
        }
        // option 3 is binary
        assert!(d3.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn monotone_in_each_coordinate_gap() {
        let grid = TokenGrid::new(5, 7);
        for opt in [DecayOption::Sum, DecayOption::Max] {
            let spec = DecaySpec::new(opt, vec![0.8], (0, 0)).unwrap();
            let d = build_decay(&spec, &grid).unwrap();
            let data = d.data();
            let l = grid.len();
            let at = |x: usize, y: usize| y * 7 + x;
            // fix |dy| = 1, increase |dx|
            let mut prev = f64::INFINITY;
            for dx in 0..7 {
                let v = data[at(0, 0) * l + at(dx, 1)];
                assert!(v <= prev, "non-increasing in |dx|");
                prev = v;
            }
        }
    }
}
