//! Multiplicative position embedding for queries (and its conjugate for
//! keys), realized as a 2D axial rotation.
//!
//! The first half of each head dim rotates by angles keyed to the token's
//! x coordinate, the second half by its y coordinate, with the usual
//! geometric frequency ladder inside each half. Because a rotation by +a on
//! queries and -a on keys turns every QK dot product into a function of the
//! coordinate difference only, attention logits depend purely on relative
//! grid offsets.

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Precomputed per-token cos/sin tables for one (grid, head-dim) pair.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    /// `[L, head_dim/2]`, row-major over tokens.
    cos: Vec<f64>,
    sin: Vec<f64>,
    pub head_dim: usize,
    pub tokens: usize,
}

impl RotaryTable {
    pub fn new(grid: &TokenGrid, head_dim: usize, base_freq: f64) -> Result<RotaryTable> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::config(format!(
                "rotary head_dim must be a positive multiple of 4 (even axial halves), got {head_dim}"
            )));
        }
        let pairs = head_dim / 2;
        let pairs_per_axis = pairs / 2;
        let l = grid.len();
        let mut cos = vec![0.0; l * pairs];
        let mut sin = vec![0.0; l * pairs];
        // theta_k = base^(-2k / d_axis) within each axial half
        let d_axis = head_dim / 2;
        let thetas: Vec<f64> = (0..pairs_per_axis)
            .map(|k| base_freq.powf(-2.0 * k as f64 / d_axis as f64))
            .collect();
        for i in 0..l {
            let (x, y) = grid.coords(i);
            for k in 0..pairs_per_axis {
                let ax = x as f64 * thetas[k];
                let ay = y as f64 * thetas[k];
                cos[i * pairs + k] = ax.cos();
                sin[i * pairs + k] = ax.sin();
                cos[i * pairs + pairs_per_axis + k] = ay.cos();
                sin[i * pairs + pairs_per_axis + k] = ay.sin();
            }
        }
        Ok(RotaryTable { cos, sin, head_dim, tokens: l })
    }

    /// Rotation angle tables satisfy cos^2 + sin^2 = 1 by construction;
    /// exposed for the invariant test.
    pub fn unit_norm_defect(&self) -> f64 {
        self.cos
            .iter()
            .zip(&self.sin)
            .map(|(c, s)| (c * c + s * s - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Rotates consecutive value pairs of `x: [B, heads, L, head_dim]` by the
/// per-token table angles: +angle for queries, -angle (`conjugate`) for keys.
/// Norm-preserving per pair; linear, so the backward is the conjugate
/// rotation of the gradient.
pub fn apply_rotary(tape: &Tape, x: &Tensor, table: &RotaryTable, conjugate: bool) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "apply_rotary expects [B, heads, L, head_dim], got {:?}",
            shape
        )));
    }
    let (b, heads, l, d) = (shape[0], shape[1], shape[2], shape[3]);
    if d != table.head_dim {
        return Err(Error::config(format!(
            "rotary table head_dim {} does not match input head_dim {d}",
            table.head_dim
        )));
    }
    if l != table.tokens {
        return Err(Error::shape(format!(
            "rotary table built for {} tokens, input has {l}",
            table.tokens
        )));
    }
    let pairs = d / 2;
    let sign = if conjugate { -1.0 } else { 1.0 };
    let rotate = |src: &[f64], dst: &mut [f64], sign: f64| {
        // rows are (bh, i) token vectors; tables repeat every l rows
        crate::ops::for_each_row(dst, d, |row_idx, row| {
            let i = row_idx % l;
            let srow = &src[row_idx * d..(row_idx + 1) * d];
            let crow = &table.cos[i * pairs..(i + 1) * pairs];
            let trow = &table.sin[i * pairs..(i + 1) * pairs];
            for k in 0..pairs {
                let c = crow[k];
                let s = sign * trow[k];
                let a = srow[2 * k];
                let bb = srow[2 * k + 1];
                row[2 * k] = a * c - bb * s;
                row[2 * k + 1] = a * s + bb * c;
            }
        });
    };
    let mut out_data = vec![0.0; x.numel()];
    rotate(&x.data(), &mut out_data, sign);
    let out = Tensor::from_vec(shape, out_data)?;
    if tape.should_record(&[x]) {
        out.set_requires_grad(true);
        let (x, out_h) = (x.clone(), out.clone());
        let table = table.clone();
        tape.record("rotary", move || {
            let Some(g_guard) = out_h.grad_ref() else { return };
            let g: &[f64] = &g_guard;
            let mut dx = vec![0.0; g.len()];
            // inverse rotation of the incoming gradient
            crate::ops::for_each_row(&mut dx, d, |row_idx, row| {
                let i = row_idx % l;
                let srow = &g[row_idx * d..(row_idx + 1) * d];
                let crow = &table.cos[i * pairs..(i + 1) * pairs];
                let trow = &table.sin[i * pairs..(i + 1) * pairs];
                for k in 0..pairs {
                    let c = crow[k];
                    let s = -sign * trow[k];
                    let a = srow[2 * k];
                    let bb = srow[2 * k + 1];
                    row[2 * k] = a * c - bb * s;
                    row[2 * k + 1] = a * s + bb * c;
                }
            });
            drop(g_guard);
            x.accumulate_grad_owned(dx);
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn origin_token_is_identity() {
        let grid = TokenGrid::new(2, 3);
        let table = RotaryTable::new(&grid, 4, 10000.0).unwrap();
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![1, 1, 6, 4], 1.0, &mut rng);
        let y = apply_rotary(&tape, &x, &table, false).unwrap();
        // token 0 sits at (0, 0): zero angles
        assert_eq!(&x.to_vec()[..4], &y.to_vec()[..4]);
    }

    #[test]
    fn quarter_turn_on_unit_pair() {
        // One token at x=1 with theta_0 = pi/2 via a custom base circumvented:
        // use base so that theta_0 = 1 rad... instead test with an explicit
        // synthetic table through the public API: grid 1x2, head_dim 4,
        // base arbitrary; verify the trig identity directly.
        let grid = TokenGrid::new(1, 2);
        let table = RotaryTable::new(&grid, 4, 10000.0).unwrap();
        let tape = Tape::no_grad();
        // token 1, first pair rotates by angle a = 1 * theta_0 = 1 rad
        let x = Tensor::from_vec(vec![1, 1, 2, 4], vec![0.0; 8]).unwrap();
        {
            // pair (1, 0) at token 1
            let mut d = x.to_vec();
            d[4] = 1.0;
            x.assign(&d);
        }
        let y = apply_rotary(&tape, &x, &table, false).unwrap().to_vec();
        assert_abs_diff_eq!(y[4], 1f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(y[5], 1f64.sin(), epsilon = 1e-15);
        let yc = apply_rotary(&tape, &x, &table, true).unwrap().to_vec();
        assert_abs_diff_eq!(yc[4], 1f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(yc[5], -(1f64.sin()), epsilon = 1e-15);
    }

    #[test]
    fn norm_preserved_and_conjugate_inverts() {
        let grid = TokenGrid::new(3, 4);
        let table = RotaryTable::new(&grid, 8, 10000.0).unwrap();
        assert!(table.unit_norm_defect() < 1e-12);
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![2, 2, 12, 8], 1.0, &mut rng);
        let y = apply_rotary(&tape, &x, &table, false).unwrap();
        for (i, (xr, yr)) in x.to_vec().chunks(8).zip(y.to_vec().chunks(8)).enumerate() {
            let nx: f64 = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = yr.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(nx, ny, epsilon = 1e-10);
            let _ = i;
        }
        let back = apply_rotary(&tape, &y, &table, true).unwrap();
        for (a, b) in x.to_vec().iter().zip(back.to_vec()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn logits_depend_only_on_relative_offset() {
        // Brute force over a 3x4 grid. The attention logit is the real dot of
        // the +rotated query and +rotated key; for pair-vectors that real dot
        // equals Re(q_c * conj(k_c) * e^(i(a_i - a_j))), i.e. the key-side
        // conjugation lives in the transpose of QK^T. The logit must be
        // invariant when both tokens translate by the same offset.
        let grid = TokenGrid::new(3, 4);
        let d = 8;
        let table = RotaryTable::new(&grid, d, 10000.0).unwrap();
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn(vec![d], 1.0, &mut rng).to_vec();
        let k = Tensor::randn(vec![d], 1.0, &mut rng).to_vec();
        // place q at token i and k at token j by writing rows
        let place = |v: &[f64], tok: usize| {
            let mut data = vec![0.0; grid.len() * d];
            data[tok * d..(tok + 1) * d].copy_from_slice(v);
            Tensor::from_vec(vec![1, 1, grid.len(), d], data).unwrap()
        };
        let logit = |i: usize, j: usize| -> f64 {
            let qr = apply_rotary(&tape, &place(&q, i), &table, false).unwrap();
            let kr = apply_rotary(&tape, &place(&k, j), &table, false).unwrap();
            let qv = qr.to_vec();
            let kv = kr.to_vec();
            (0..d).map(|c| qv[i * d + c] * kv[j * d + c]).sum()
        };
        for (xi, yi) in [(0usize, 0usize), (1, 1), (2, 0)] {
            for (xj, yj) in [(0usize, 0usize), (3, 2), (1, 0)] {
                let base = logit(yi * 4 + xi, yj * 4 + xj);
                for (dx, dy) in [(1usize, 0usize), (0, 1), (1, 1)] {
                    let (nxi, nyi) = (xi + dx, yi + dy);
                    let (nxj, nyj) = (xj + dx, yj + dy);
                    if nxi >= 4 || nxj >= 4 || nyi >= 3 || nyj >= 3 {
                        continue;
                    }
                    let shifted = logit(nyi * 4 + nxi, nyj * 4 + nxj);
                    assert_abs_diff_eq!(base, shifted, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn odd_head_dim_rejected() {
        let grid = TokenGrid::new(2, 2);
        assert!(RotaryTable::new(&grid, 6, 10000.0).is_err());
        assert!(RotaryTable::new(&grid, 8, 10000.0).is_ok());
    }
}
