//! Differentiable tensor ops, implemented as methods on [`Tape`].
//!
//! Backward formulas are hand-derived per op; the finite-difference oracle in
//! [`crate::gradcheck`] cross-checks them. Kernels use fixed accumulation
//! orders so results are bit-reproducible for any thread count: parallel
//! loops only ever write disjoint output rows, and every reduction runs in a
//! fixed serial order within its row.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{numel_of, strides_of, Tensor};

/// Minimum element count before a kernel fans out across threads.
const PAR_MIN: usize = 16 * 1024;

/// Runs `fill(row_index, row)` over `out` split into rows of `row_len`.
/// Each row is produced independently with a fixed internal order, so the
/// result does not depend on the thread count.
pub(crate) fn for_each_row(
    out: &mut [f64],
    row_len: usize,
    fill: impl Fn(usize, &mut [f64]) + Sync,
) {
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    if out.len() >= PAR_MIN && out.len() > row_len && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            fill(i, row);
        }
    }
}

/// Elementwise map over equal-length buffers, parallel in page-sized rows.
fn map_elementwise(out: &mut [f64], f: impl Fn(usize, &mut [f64]) + Sync) {
    let n = out.len();
    let mut row = 4096usize.min(n.max(1));
    while row > 1 && n % row != 0 {
        row /= 2;
    }
    if row < 64 {
        f(0, out);
    } else {
        for_each_row(out, row, |r, chunk| f(r * row, chunk));
    }
}

/// Applies `f(b_slice, chunk)` over `out` in cycle-aligned chunks of `bn`,
/// where every chunk pairs with the full broadcast operand. Direct indexing,
/// no per-element modulo.
fn map_broadcast(out: &mut [f64], bn: usize, bd: &[f64], f: impl Fn(&[f64], &mut [f64], usize) + Sync) {
    debug_assert_eq!(bd.len(), bn);
    if bn == out.len() {
        // equal shapes: split the single cycle into page rows
        map_elementwise(out, |base, chunk| f(&bd[base..base + chunk.len()], chunk, base));
    } else {
        for_each_row(out, bn, |r, chunk| f(bd, chunk, r * bn));
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// Batch-broadcast layout for a pair of stacked-matrix operands.
struct BatchMap {
    out_batch: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn batch_map(a_shape: &[usize], b_shape: &[usize]) -> Result<BatchMap> {
    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];
    let rank = a_batch.len().max(b_batch.len());
    let mut out_batch = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i < rank - a_batch.len() { 1 } else { a_batch[i - (rank - a_batch.len())] };
        let bd = if i < rank - b_batch.len() { 1 } else { b_batch[i - (rank - b_batch.len())] };
        if ad != bd && ad != 1 && bd != 1 {
            return Err(Error::shape(format!(
                "matmul batch dims incompatible: {:?} vs {:?}",
                a_shape, b_shape
            )));
        }
        out_batch[i] = ad.max(bd);
    }
    let total: usize = out_batch.iter().product();
    let a_mat = a_shape[a_shape.len() - 2] * a_shape[a_shape.len() - 1];
    let b_mat = b_shape[b_shape.len() - 2] * b_shape[b_shape.len() - 1];
    let mut a_offsets = Vec::with_capacity(total);
    let mut b_offsets = Vec::with_capacity(total);
    let out_strides = strides_of(&out_batch);
    let a_strides = strides_of(a_batch);
    let b_strides = strides_of(b_batch);
    for flat in 0..total.max(1) {
        let mut a_off = 0usize;
        let mut b_off = 0usize;
        for i in 0..rank {
            let idx = (flat / out_strides[i]) % out_batch[i];
            let a_rel = i as isize - (rank - a_batch.len()) as isize;
            if a_rel >= 0 && a_batch[a_rel as usize] != 1 {
                a_off += idx * a_strides[a_rel as usize];
            }
            let b_rel = i as isize - (rank - b_batch.len()) as isize;
            if b_rel >= 0 && b_batch[b_rel as usize] != 1 {
                b_off += idx * b_strides[b_rel as usize];
            }
        }
        a_offsets.push(a_off * a_mat);
        b_offsets.push(b_off * b_mat);
    }
    Ok(BatchMap { out_batch, a_offsets, b_offsets })
}

/// Inverts the offset maps: for every distinct operand batch, the list of
/// output batches that consumed it. Gradient rows then sum their
/// contributions in a fixed order.
fn contributions(offsets: &[usize], mat: usize, batches: usize) -> Vec<Vec<usize>> {
    let mut contrib = vec![Vec::new(); batches];
    for (bo, &off) in offsets.iter().enumerate() {
        contrib[off / mat].push(bo);
    }
    contrib
}

impl Tape {
    /// Batched matrix product with broadcastable batch dims.
    /// Gradients: d/da = g·bᵀ, d/db = aᵀ·g, summed over broadcast batches.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let a_shape = a.shape();
        let b_shape = b.shape();
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2 operands, got {:?} and {:?}",
                a_shape, b_shape
            )));
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} · {:?}",
                a_shape, b_shape
            )));
        }
        let map = batch_map(&a_shape, &b_shape)?;
        let mut out_shape = map.out_batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let mut out_data = vec![0.0; numel_of(&out_shape)];
        {
            let ad_guard = a.data();
            let bd_guard = b.data();
            let (ad, bd): (&[f64], &[f64]) = (&ad_guard, &bd_guard);
            let (a_offsets, b_offsets) = (&map.a_offsets, &map.b_offsets);
            // Parallel across (batch, i) rows; each row accumulated serially.
            for_each_row(&mut out_data, n, |row_idx, row| {
                let bi = row_idx / m;
                let i = row_idx % m;
                let abase = a_offsets[bi] + i * ka;
                let arow = &ad[abase..abase + ka];
                let bbase = b_offsets[bi];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[bbase + kk * n..bbase + (kk + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            });
        }
        let out = Tensor::from_vec(out_shape, out_data)?;

        if self.should_record(&[a, b]) {
            out.set_requires_grad(true);
            let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
            let a_needs = a.requires_grad();
            let b_needs = b.requires_grad();
            let contrib_a = contributions(&map.a_offsets, m * ka, a.numel() / (m * ka));
            let contrib_b = contributions(&map.b_offsets, ka * n, b.numel() / (ka * n));
            let op_name: &'static str = if std::env::var_os("CFE_BWD_PROFILE").is_some() {
                Box::leak(
                    format!("matmul b{}m{m}k{ka}n{n}", map.a_offsets.len()).into_boxed_str(),
                )
            } else {
                "matmul"
            };
            self.record(op_name, move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                if a_needs {
                    let bd_guard = b.data();
                    let bd: &[f64] = &bd_guard;
                    // transpose each distinct b batch once: dA rows then
                    // accumulate in vectorizable axpy form instead of dots
                    let b_batches = bd.len() / (ka * n);
                    let mut bt = vec![0.0; bd.len()];
                    for bb in 0..b_batches {
                        let src = &bd[bb * ka * n..(bb + 1) * ka * n];
                        let dst = &mut bt[bb * ka * n..(bb + 1) * ka * n];
                        for kk in 0..ka {
                            for j in 0..n {
                                dst[j * ka + kk] = src[kk * n + j];
                            }
                        }
                    }
                    drop(bd_guard);
                    let bt_ref: &[f64] = &bt;
                    let mut da = vec![0.0; a.numel()];
                    for_each_row(&mut da, ka, |row_idx, row| {
                        let ba = row_idx / m;
                        let i = row_idx % m;
                        for &bo in &contrib_a[ba] {
                            let grow = &g[bo * m * n + i * n..bo * m * n + (i + 1) * n];
                            let btbase = (map.b_offsets[bo] / (ka * n)) * ka * n;
                            for (j, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let btrow = &bt_ref[btbase + j * ka..btbase + (j + 1) * ka];
                                for (slot, &bv) in row.iter_mut().zip(btrow) {
                                    *slot += gv * bv;
                                }
                            }
                        }
                    });
                    a.accumulate_grad_owned(da);
                }
                if b_needs {
                    let ad_guard = a.data();
                    let ad: &[f64] = &ad_guard;
                    let mut db = vec![0.0; b.numel()];
                    // row (bb, kk) of dB: over consumers and their m rows
                    for_each_row(&mut db, n, |row_idx, row| {
                        let bb = row_idx / ka;
                        let kk = row_idx % ka;
                        for &bo in &contrib_b[bb] {
                            let abase = map.a_offsets[bo];
                            let gbase = bo * m * n;
                            for i in 0..m {
                                let av = ad[abase + i * ka + kk];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &g[gbase + i * n..gbase + (i + 1) * n];
                                for (o, &gv) in row.iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                    drop(ad_guard);
                    b.accumulate_grad_owned(db);
                }
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

impl Tape {
    /// Row softmax over the last dim, stabilized by max subtraction.
    pub fn softmax_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let c = last_dim(&shape);
        if c == 0 {
            return Err(Error::shape("softmax over empty last dim"));
        }
        let mut out_data = vec![0.0; x.numel()];
        {
            let xd_guard = x.data();
            let xd: &[f64] = &xd_guard;
            for_each_row(&mut out_data, c, |r, row| {
                let xrow = &xd[r * c..(r + 1) * c];
                let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..c {
                    row[j] = (xrow[j] - m).exp();
                    s += row[j];
                }
                let inv = 1.0 / s;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            });
        }
        let out = Tensor::from_vec(shape, out_data)?;
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            let (x, out_h) = (x.clone(), out.clone());
            self.record("softmax_lastdim", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                let yd_guard = out_h.data();
                let yd: &[f64] = &yd_guard;
                let mut dx = vec![0.0; g.len()];
                for_each_row(&mut dx, c, |r, row| {
                    let y = &yd[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += gr[j] * y[j];
                    }
                    for j in 0..c {
                        row[j] = y[j] * (gr[j] - dot);
                    }
                });
                drop(yd_guard);
                drop(g_guard);
                x.accumulate_grad_owned(dx);
            });
        }
        Ok(out)
    }

    /// Row log-softmax over the last dim.
    pub fn log_softmax_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let c = last_dim(&shape);
        let mut out_data = vec![0.0; x.numel()];
        {
            let xd_guard = x.data();
            let xd: &[f64] = &xd_guard;
            for_each_row(&mut out_data, c, |r, row| {
                let xrow = &xd[r * c..(r + 1) * c];
                let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..c {
                    s += (xrow[j] - m).exp();
                }
                let lse = m + s.ln();
                for j in 0..c {
                    row[j] = xrow[j] - lse;
                }
            });
        }
        let out = Tensor::from_vec(shape, out_data)?;
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            let (x, out_h) = (x.clone(), out.clone());
            self.record("log_softmax_lastdim", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                let yd_guard = out_h.data();
                let yd: &[f64] = &yd_guard;
                let mut dx = vec![0.0; g.len()];
                for_each_row(&mut dx, c, |r, row| {
                    let y = &yd[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        row[j] = gr[j] - y[j].exp() * gsum;
                    }
                });
                drop(yd_guard);
                drop(g_guard);
                x.accumulate_grad_owned(dx);
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

impl Tape {
    /// Layer normalization over the last dim with affine gain/bias.
    /// Population variance; full backward through mean and variance.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = x.shape();
        let c = last_dim(&shape);
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm affine params must be [{}], got {:?} and {:?}",
                c,
                gain.shape(),
                bias.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = x.numel() / c;
        let mut out_data = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        {
            let xd_guard = x.data();
            let xd: &[f64] = &xd_guard;
            let gd_guard = gain.data();
            let gd: &[f64] = &gd_guard;
            let bd_guard = bias.data();
            let bd: &[f64] = &bd_guard;
            for (r, (row, inv)) in out_data.chunks_mut(c).zip(inv_std.iter_mut()).enumerate() {
                let xrow = &xd[r * c..(r + 1) * c];
                let mean = xrow.iter().sum::<f64>() / c as f64;
                let mut var = 0.0;
                for &v in xrow {
                    let d = v - mean;
                    var += d * d;
                }
                var /= c as f64;
                *inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    row[j] = (xrow[j] - mean) * *inv * gd[j] + bd[j];
                }
            }
        }
        let out = Tensor::from_vec(shape, out_data)?;
        if self.should_record(&[x, gain, bias]) {
            out.set_requires_grad(true);
            let (x, gain, bias, out_h) = (x.clone(), gain.clone(), bias.clone(), out.clone());
            self.record("layer_norm", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                let xd_guard = x.data();
                let xd: &[f64] = &xd_guard;
                let gd_guard = gain.data();
                let gd: &[f64] = &gd_guard;
                let mut dx = vec![0.0; xd.len()];
                let inv_std_ref: &[f64] = &inv_std;
                for_each_row(&mut dx, c, |r, drow| {
                    let xrow = &xd[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let inv = inv_std_ref[r];
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        let xh = (xrow[j] - mean) * inv;
                        let dxh = grow[j] * gd[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let m1 = sum_dxh / c as f64;
                    let m2 = sum_dxh_xh / c as f64;
                    for j in 0..c {
                        let xh = (xrow[j] - mean) * inv;
                        let dxh = grow[j] * gd[j];
                        drow[j] = inv * (dxh - m1 - xh * m2);
                    }
                });
                // affine grads: serial accumulation across rows
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                if gain.requires_grad() || bias.requires_grad() {
                    for r in 0..rows {
                        let xrow = &xd[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let inv = inv_std_ref[r];
                        let mean = xrow.iter().sum::<f64>() / c as f64;
                        for j in 0..c {
                            let xh = (xrow[j] - mean) * inv;
                            dgain[j] += grow[j] * xh;
                            dbias[j] += grow[j];
                        }
                    }
                }
                drop(xd_guard);
                drop(gd_guard);
                drop(g_guard);
                x.accumulate_grad_owned(dx);
                gain.accumulate_grad_owned(dgain);
                bias.accumulate_grad_owned(dbias);
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// elementwise: add / mul / scale / gelu
// ---------------------------------------------------------------------------

/// Broadcast check: `b` must equal the trailing dims of `a` (or match exactly).
/// Returns b's cycle length.
fn suffix_broadcast(a_shape: &[usize], b_shape: &[usize]) -> Result<usize> {
    if b_shape.len() > a_shape.len() || a_shape[a_shape.len() - b_shape.len()..] != *b_shape {
        return Err(Error::shape(format!(
            "incompatible broadcast: {:?} with {:?} (second operand must match trailing dims)",
            a_shape, b_shape
        )));
    }
    Ok(numel_of(b_shape))
}

impl Tape {
    /// Elementwise sum; `b` may be a trailing-dims broadcast of `a`.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let a_shape = a.shape();
        let bn = suffix_broadcast(&a_shape, &b.shape())?;
        let mut out_data = a.to_vec();
        {
            let bd_guard = b.data();
            let bd: &[f64] = &bd_guard;
            map_broadcast(&mut out_data, bn, bd, |bs, chunk, _| {
                for (v, &bv) in chunk.iter_mut().zip(bs) {
                    *v += bv;
                }
            });
        }
        let out = Tensor::from_vec(a_shape, out_data)?;
        if self.should_record(&[a, b]) {
            out.set_requires_grad(true);
            let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
            let b_needs = b.requires_grad();
            self.record("add", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                a.accumulate_grad(g);
                if b_needs {
                    let mut db = vec![0.0; bn];
                    for chunk in g.chunks(bn) {
                        for (d, gv) in db.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                    drop(g_guard);
                    b.accumulate_grad_owned(db);
                }
            });
        }
        Ok(out)
    }

    /// Hadamard product; `b` may be a trailing-dims broadcast of `a`
    /// (per-head decay matrices against batched attention).
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let a_shape = a.shape();
        let bn = suffix_broadcast(&a_shape, &b.shape())?;
        let mut out_data = a.to_vec();
        {
            let bd_guard = b.data();
            let bd: &[f64] = &bd_guard;
            map_broadcast(&mut out_data, bn, bd, |bs, chunk, _| {
                for (v, &bv) in chunk.iter_mut().zip(bs) {
                    *v *= bv;
                }
            });
        }
        let out = Tensor::from_vec(a_shape, out_data)?;
        if self.should_record(&[a, b]) {
            out.set_requires_grad(true);
            let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
            let a_needs = a.requires_grad();
            let b_needs = b.requires_grad();
            self.record("mul", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                if a_needs {
                    let bd_guard = b.data();
                    let bd: &[f64] = &bd_guard;
                    let mut da = vec![0.0; g.len()];
                    map_broadcast(&mut da, bn, bd, |bs, chunk, base| {
                        for (j, v) in chunk.iter_mut().enumerate() {
                            *v = g[base + j] * bs[j];
                        }
                    });
                    drop(bd_guard);
                    a.accumulate_grad_owned(da);
                }
                if b_needs {
                    let ad_guard = a.data();
                    let ad: &[f64] = &ad_guard;
                    let mut db = vec![0.0; bn];
                    for (k, gc) in g.chunks(bn).enumerate() {
                        let achunk = &ad[k * bn..(k + 1) * bn];
                        for j in 0..bn {
                            db[j] += gc[j] * achunk[j];
                        }
                    }
                    drop(ad_guard);
                    b.accumulate_grad_owned(db);
                }
            });
        }
        Ok(out)
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let out = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v * factor).collect())?;
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            let (x, out_h) = (x.clone(), out.clone());
            self.record("scale", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let dx: Vec<f64> = g_guard.iter().map(|v| v * factor).collect();
                drop(g_guard);
                x.accumulate_grad_owned(dx);
            });
        }
        Ok(out)
    }

    /// `a - b` (no broadcast needed by callers beyond `add`'s rules).
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, &nb)
    }

    /// GELU, tanh approximation (differentiated exactly as evaluated).
    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let mut out_data = vec![0.0; x.numel()];
        {
            let xd_guard = x.data();
            let xd: &[f64] = &xd_guard;
            map_elementwise(&mut out_data, |base, chunk| {
                for (j, v) in chunk.iter_mut().enumerate() {
                    let xv = xd[base + j];
                    let u = C * (xv + A * xv * xv * xv);
                    *v = 0.5 * xv * (1.0 + u.tanh());
                }
            });
        }
        let out = Tensor::from_vec(x.shape(), out_data)?;
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            let (x, out_h) = (x.clone(), out.clone());
            self.record("gelu", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                let xd_guard = x.data();
                let xd: &[f64] = &xd_guard;
                let mut dx = vec![0.0; g.len()];
                map_elementwise(&mut dx, |base, chunk| {
                    for (j, v) in chunk.iter_mut().enumerate() {
                        let xv = xd[base + j];
                        let u = C * (xv + A * xv * xv * xv);
                        let t = u.tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * xv * (1.0 - t * t) * C * (1.0 + 3.0 * A * xv * xv);
                        *v = g[base + j] * d;
                    }
                });
                drop(xd_guard);
                drop(g_guard);
                x.accumulate_grad_owned(dx);
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// shape plumbing: reshape / permute / concat / gather
// ---------------------------------------------------------------------------

impl Tape {
    pub fn reshape(&self, x: &Tensor, new_shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&new_shape) != x.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                new_shape
            )));
        }
        let out = Tensor::from_vec(new_shape, x.to_vec())?;
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            let (x, out_h) = (x.clone(), out.clone());
            self.record("reshape", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                x.accumulate_grad(&g_guard);
            });
        }
        Ok(out)
    }

    /// Axis permutation (data is materialized in the new order).
    pub fn permute(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let shape = x.shape();
        if axes.len() != shape.len() {
            return Err(Error::shape(format!(
                "permute axes {:?} do not match rank {}",
                axes,
                shape.len()
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &ax in axes {
            if ax >= axes.len() || seen[ax] {
                return Err(Error::shape(format!("invalid permutation {:?}", axes)));
            }
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let out_data = permute_copy(&x.data(), &shape, axes);
        let out = Tensor::from_vec(out_shape, out_data)?;
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            // Backward permutes the gradient by the inverse permutation.
            let mut inverse = vec![0usize; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let out_shape_c: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
            let (x, out_h) = (x.clone(), out.clone());
            self.record("permute", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let dx = permute_copy(&g_guard, &out_shape_c, &inverse);
                drop(g_guard);
                x.accumulate_grad_owned(dx);
            });
        }
        Ok(out)
    }

    /// Concatenation along `axis`.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {:?}", first)));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape(format!(
                    "concat shapes differ off-axis: {:?} vs {:?}",
                    first, s
                )));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut out_data = vec![0.0; outer * axis_total * inner];
        let mut axis_off = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let pa = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let dst = (o * axis_total + axis_off) * inner;
                let src = o * pa * inner;
                out_data[dst..dst + pa * inner].copy_from_slice(&pd[src..src + pa * inner]);
            }
            spans.push((axis_off, pa));
            axis_off += pa;
        }
        let out = Tensor::from_vec(out_shape, out_data)?;
        if self.should_record(parts) {
            out.set_requires_grad(true);
            let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let out_h = out.clone();
            self.record("concat", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                for (p, &(off, pa)) in owned.iter().zip(&spans) {
                    if !p.requires_grad() {
                        continue;
                    }
                    let mut dp = vec![0.0; outer * pa * inner];
                    for o in 0..outer {
                        let src = (o * axis_total + off) * inner;
                        let dst = o * pa * inner;
                        dp[dst..dst + pa * inner].copy_from_slice(&g[src..src + pa * inner]);
                    }
                    p.accumulate_grad_owned(dp);
                }
            });
        }
        Ok(out)
    }

    /// Row lookup `table[ids[i], :]` (embedding gather). Ids are constants;
    /// the backward scatter-adds into the table gradient.
    pub fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("gather_rows expects a matrix, got {:?}", shape)));
        }
        let (v, c) = (shape[0], shape[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("row id {id} out of range 0..{v}")));
            }
        }
        let mut out_data = vec![0.0; ids.len() * c];
        {
            let td = table.data();
            for (row, &id) in out_data.chunks_mut(c).zip(ids) {
                row.copy_from_slice(&td[id * c..(id + 1) * c]);
            }
        }
        let out = Tensor::from_vec(vec![ids.len(), c], out_data)?;
        if self.should_record(&[table]) {
            out.set_requires_grad(true);
            let (table, out_h) = (table.clone(), out.clone());
            let ids = ids.to_vec();
            self.record("gather_rows", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let mut dt = vec![0.0; table.numel()];
                for (grow, &id) in g_guard.chunks(c).zip(&ids) {
                    let drow = &mut dt[id * c..(id + 1) * c];
                    for j in 0..c {
                        drow[j] += grow[j];
                    }
                }
                drop(g_guard);
                table.accumulate_grad_owned(dt);
            });
        }
        Ok(out)
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        let out = Tensor::scalar(s);
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            let (x, out_h) = (x.clone(), out.clone());
            let n = x.numel();
            self.record("sum_all", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let gv = g_guard[0];
                drop(g_guard);
                x.accumulate_grad_owned(vec![gv; n]);
            });
        }
        Ok(out)
    }

    /// Rows scaled to unit L2 norm (last dim), with a tiny floor inside the
    /// square root so zero rows stay finite.
    pub fn l2_normalize_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        const FLOOR: f64 = 1e-24;
        let shape = x.shape();
        let c = last_dim(&shape);
        let rows = x.numel() / c;
        let mut out_data = vec![0.0; x.numel()];
        let mut inv_norm = vec![0.0; rows];
        {
            let xd = x.data();
            for r in 0..rows {
                let xrow = &xd[r * c..(r + 1) * c];
                let s: f64 = xrow.iter().map(|v| v * v).sum();
                let inv = 1.0 / (s + FLOOR).sqrt();
                inv_norm[r] = inv;
                for j in 0..c {
                    out_data[r * c + j] = xrow[j] * inv;
                }
            }
        }
        let out = Tensor::from_vec(shape, out_data)?;
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            let (x, out_h) = (x.clone(), out.clone());
            self.record("l2_normalize_lastdim", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                let xd_guard = x.data();
                let xd: &[f64] = &xd_guard;
                let mut dx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let xrow = &xd[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    let inv = inv_norm[r];
                    let dot: f64 = xrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let inv3 = inv * inv * inv;
                    for j in 0..c {
                        dx[r * c + j] = grow[j] * inv - xrow[j] * dot * inv3;
                    }
                }
                drop(xd_guard);
                drop(g_guard);
                x.accumulate_grad_owned(dx);
            });
        }
        Ok(out)
    }
}

fn permute_copy(data: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides_for_in: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let n = data.len();
    let mut out = vec![0.0; n];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    for slot in out.iter_mut() {
        *slot = data[in_off];
        // odometer increment over the output index space
        for d in (0..rank).rev() {
            idx[d] += 1;
            in_off += out_strides_for_in[d];
            if idx[d] < out_shape[d] {
                break;
            }
            in_off -= out_strides_for_in[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// spatial ops: replicate padding and conv2d (NHWC)
// ---------------------------------------------------------------------------

/// Padded rows mapping onto a source index: `src == 0` receives `0..=pad`,
/// the last source receives the trailing pad rows, interior ones map 1:1.
fn pad_sources(src: usize, len: usize, pad: usize) -> std::ops::RangeInclusive<usize> {
    let lo = if src == 0 { 0 } else { src + pad };
    let hi = if src == len - 1 { len - 1 + 2 * pad } else { src + pad };
    lo..=hi
}

impl Tape {
    /// Edge-replicate padding of an NHWC tensor. Replicate (not zero) padding
    /// keeps the conv stem translation invariant on constant inputs.
    pub fn pad_replicate(&self, x: &Tensor, pad: usize) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::shape(format!("pad_replicate expects NHWC, got {:?}", shape)));
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out_data = vec![0.0; b * hp * wp * c];
        {
            let xd_guard = x.data();
            let xd: &[f64] = &xd_guard;
            for_each_row(&mut out_data, c, |row_idx, row| {
                let xq = row_idx % wp;
                let y = (row_idx / wp) % hp;
                let bi = row_idx / (wp * hp);
                let sy = y.saturating_sub(pad).min(h - 1);
                let sx = xq.saturating_sub(pad).min(w - 1);
                let src = ((bi * h + sy) * w + sx) * c;
                row.copy_from_slice(&xd[src..src + c]);
            });
        }
        let out = Tensor::from_vec(vec![b, hp, wp, c], out_data)?;
        if self.should_record(&[x]) {
            out.set_requires_grad(true);
            let (x, out_h) = (x.clone(), out.clone());
            self.record("pad_replicate", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                let mut dx = vec![0.0; b * h * w * c];
                // gather form: every source pixel sums its padded copies
                for_each_row(&mut dx, c, |row_idx, row| {
                    let sx = row_idx % w;
                    let sy = (row_idx / w) % h;
                    let bi = row_idx / (w * h);
                    for y in pad_sources(sy, h, pad) {
                        for xq in pad_sources(sx, w, pad) {
                            let src = ((bi * hp + y) * wp + xq) * c;
                            for ci in 0..c {
                                row[ci] += g[src + ci];
                            }
                        }
                    }
                });
                drop(g_guard);
                x.accumulate_grad_owned(dx);
            });
        }
        Ok(out)
    }

    /// Valid (unpadded) 2D convolution, NHWC input, [KH, KW, Cin, Cout] weights.
    pub fn conv2d(&self, x: &Tensor, weight: &Tensor, stride: (usize, usize)) -> Result<Tensor> {
        let xs = x.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects NHWC input and KKIO weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {cin}, weight {wcin}"
            )));
        }
        let (sh, sw) = stride;
        if h < kh || w < kw {
            return Err(Error::shape(format!(
                "conv2d input {h}x{w} smaller than kernel {kh}x{kw}"
            )));
        }
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let mut out_data = vec![0.0; b * oh * ow * cout];
        {
            let xd_guard = x.data();
            let wd_guard = weight.data();
            let (xd, wd): (&[f64], &[f64]) = (&xd_guard, &wd_guard);
            for_each_row(&mut out_data, cout, |row_idx, row| {
                let ox = row_idx % ow;
                let oy = (row_idx / ow) % oh;
                let bi = row_idx / (ow * oh);
                for ky in 0..kh {
                    let iy = oy * sh + ky;
                    for kx in 0..kw {
                        let ix = ox * sw + kx;
                        let xbase = ((bi * h + iy) * w + ix) * cin;
                        let wbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = xd[xbase + ci];
                            if v == 0.0 {
                                continue;
                            }
                            let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (o, &wv) in row.iter_mut().zip(wrow) {
                                *o += v * wv;
                            }
                        }
                    }
                }
            });
        }
        let out = Tensor::from_vec(vec![b, oh, ow, cout], out_data)?;
        if self.should_record(&[x, weight]) {
            out.set_requires_grad(true);
            let (x, weight, out_h) = (x.clone(), weight.clone(), out.clone());
            let x_needs = x.requires_grad();
            let w_needs = weight.requires_grad();
            self.record("conv2d", move || {
                let Some(g_guard) = out_h.grad_ref() else { return };
                let g: &[f64] = &g_guard;
                if x_needs {
                    let wd_guard = weight.data();
                    let wd: &[f64] = &wd_guard;
                    let mut dx = vec![0.0; b * h * w * cin];
                    // gather form: each input element sums its consumers
                    for_each_row(&mut dx, cin, |row_idx, row| {
                        let ix = row_idx % w;
                        let iy = (row_idx / w) % h;
                        let bi = row_idx / (w * h);
                        for ky in 0..kh {
                            if iy < ky || (iy - ky) % sh != 0 {
                                continue;
                            }
                            let oy = (iy - ky) / sh;
                            if oy >= oh {
                                continue;
                            }
                            for kx in 0..kw {
                                if ix < kx || (ix - kx) % sw != 0 {
                                    continue;
                                }
                                let ox = (ix - kx) / sw;
                                if ox >= ow {
                                    continue;
                                }
                                let gbase = ((bi * oh + oy) * ow + ox) * cout;
                                let wbase = (ky * kw + kx) * cin * cout;
                                let grow = &g[gbase..gbase + cout];
                                for (ci, slot) in row.iter_mut().enumerate() {
                                    let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for (gv, wv) in grow.iter().zip(wrow) {
                                        acc += gv * wv;
                                    }
                                    *slot += acc;
                                }
                            }
                        }
                    });
                    drop(wd_guard);
                    x.accumulate_grad_owned(dx);
                }
                if w_needs {
                    let xd_guard = x.data();
                    let xd: &[f64] = &xd_guard;
                    let mut dw = vec![0.0; kh * kw * cin * cout];
                    // rows of dW are (ky, kx, ci); batches/positions reduce
                    // serially inside each row
                    for_each_row(&mut dw, cout, |row_idx, row| {
                        let ci = row_idx % cin;
                        let kx = (row_idx / cin) % kw;
                        let ky = row_idx / (cin * kw);
                        for bi in 0..b {
                            for oy in 0..oh {
                                let iy = oy * sh + ky;
                                for ox in 0..ow {
                                    let ix = ox * sw + kx;
                                    let v = xd[((bi * h + iy) * w + ix) * cin + ci];
                                    if v == 0.0 {
                                        continue;
                                    }
                                    let gbase = ((bi * oh + oy) * ow + ox) * cout;
                                    let grow = &g[gbase..gbase + cout];
                                    for (o, &gv) in row.iter_mut().zip(grow) {
                                        *o += v * gv;
                                    }
                                }
                            }
                        }
                    });
                    drop(xd_guard);
                    weight.accumulate_grad_owned(dw);
                }
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::no_grad();
        let i = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let out = tape.matmul(&i, &b).unwrap();
        assert_eq!(out.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::no_grad();
        let a = t(vec![1, 2], vec![1.0, 2.0]);
        let b = t(vec![2, 1], vec![3.0, 4.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), vec![1, 1]);
        assert_eq!(out.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::no_grad();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![4, 2], vec![0.0; 8]);
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_transpose_identity_property() {
        // (A·B)^T == B^T·A^T on small randoms, within 1e-12.
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::no_grad();
        for _ in 0..5 {
            let a = Tensor::randn(vec![4, 5], 1.0, &mut rng);
            let b = Tensor::randn(vec![5, 3], 1.0, &mut rng);
            let _ = rng.gen::<u64>();
            let ab = tape.matmul(&a, &b).unwrap();
            let abt = tape.permute(&ab, &[1, 0]).unwrap();
            let bt = tape.permute(&b, &[1, 0]).unwrap();
            let at = tape.permute(&a, &[1, 0]).unwrap();
            let btat = tape.matmul(&bt, &at).unwrap();
            for (x, y) in abt.to_vec().iter().zip(btat.to_vec()) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_batch_broadcast() {
        let tape = Tape::no_grad();
        let a = t(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let b = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), vec![2, 2, 2]);
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn matmul_shared_weight_grads_sum_over_batch() {
        use crate::gradcheck::grad_check_default;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![3, 4, 5], 1.0, &mut rng).into_param();
        let w = Tensor::randn(vec![5, 2], 1.0, &mut rng).into_param();
        let report = grad_check_default(
            |tape| {
                let y = tape.matmul(&x, &w)?;
                let sq = tape.mul(&y, &y)?;
                let s = tape.sum_all(&sq)?;
                tape.scale(&s, 1.0 / 24.0)
            },
            &[("x", &x), ("w", &w)],
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let tape = Tape::no_grad();
        let x = t(vec![3], vec![0.0, 0.0, 0.0]);
        let y = tape.softmax_lastdim(&x).unwrap();
        for v in y.to_vec() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = t(vec![2], vec![1000.0, 0.0]);
        let y = tape.softmax_lastdim(&x).unwrap().to_vec();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_hand_values() {
        let tape = Tape::no_grad();
        let x = t(vec![3], vec![1.0, 2.0, 3.0]);
        let y = tape.softmax_lastdim(&x).unwrap().to_vec();
        assert_abs_diff_eq!(y[0], 0.09003057, epsilon = 1e-8);
        assert_abs_diff_eq!(y[1], 0.24472847, epsilon = 1e-8);
        assert_abs_diff_eq!(y[2], 0.66524096, epsilon = 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_randoms() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::no_grad();
        for _ in 0..20 {
            let x = Tensor::randn(vec![4, 7], 3.0, &mut rng);
            let y = tape.softmax_lastdim(&x).unwrap();
            let yd = y.to_vec();
            for r in 0..4 {
                let s: f64 = yd[r * 7..(r + 1) * 7].iter().sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
                assert!(yd[r * 7..(r + 1) * 7].iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let tape = Tape::no_grad();
        let x = t(vec![1, 4], vec![5.0, 5.0, 5.0, 5.0]);
        let gain = Tensor::full(vec![4], 1.0);
        let bias = Tensor::zeros(vec![4]);
        let y = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for v in y.to_vec() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let tape = Tape::no_grad();
        let x = t(vec![1, 2], vec![1.0, 3.0]);
        let gain = Tensor::full(vec![2], 1.0);
        let bias = Tensor::zeros(vec![2]);
        let y = tape.layer_norm(&x, &gain, &bias, 1e-12).unwrap().to_vec();
        assert_abs_diff_eq!(y[0], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(y[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn layer_norm_standardizes_before_affine() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::no_grad();
        let c = 16;
        let x = Tensor::randn(vec![3, c], 2.0, &mut rng);
        let gain = Tensor::full(vec![c], 1.0);
        let bias = Tensor::zeros(vec![c]);
        let y = tape.layer_norm(&x, &gain, &bias, 1e-9).unwrap().to_vec();
        for r in 0..3 {
            let row = &y[r * c..(r + 1) * c];
            let mean: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::no_grad();
        let a = t(vec![3], vec![1.0, 2.0, 3.0]);
        let b = t(vec![3], vec![2.0, 2.0, 2.0]);
        assert_eq!(tape.mul(&a, &b).unwrap().to_vec(), vec![2.0, 4.0, 6.0]);
        let z = Tensor::zeros(vec![3]);
        assert_eq!(tape.add(&a, &z).unwrap().to_vec(), vec![1.0, 2.0, 3.0]);
        let x = t(vec![1], vec![0.0]);
        assert_eq!(tape.gelu(&x).unwrap().to_vec(), vec![0.0]);
    }

    #[test]
    fn broadcast_error_mentions_shapes() {
        let tape = Tape::no_grad();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2], vec![0.0; 2]);
        let err = tape.add(&a, &b).unwrap_err().to_string();
        assert!(err.contains("broadcast"), "{err}");
    }

    #[test]
    fn concat_token_axis() {
        let tape = Tape::no_grad();
        let a = t(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![1, 1, 2], vec![5.0, 6.0]);
        let out = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(out.shape(), vec![1, 3, 2]);
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::no_grad();
        let a = t(vec![2, 3, 4], (0..24).map(|v| v as f64).collect());
        let p = tape.permute(&a, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        let back = tape.permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn pad_replicate_keeps_constant_constant() {
        let tape = Tape::no_grad();
        let x = Tensor::full(vec![1, 3, 3, 2], 7.5);
        let y = tape.pad_replicate(&x, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 5, 2]);
        assert!(y.to_vec().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn conv2d_known_answer() {
        let tape = Tape::no_grad();
        // 1x3x3x1 input, 2x2 kernel of ones, stride 1 -> sums of 2x2 windows
        let x = t(vec![1, 3, 3, 1], (1..=9).map(|v| v as f64).collect());
        let w = Tensor::full(vec![2, 2, 1, 1], 1.0);
        let y = tape.conv2d(&x, &w, (1, 1)).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2, 1]);
        assert_eq!(y.to_vec(), vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn gather_rows_and_range_check() {
        let tape = Tape::no_grad();
        let table = t(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = tape.gather_rows(&table, &[2, 0]).unwrap();
        assert_eq!(out.to_vec(), vec![4.0, 5.0, 0.0, 1.0]);
        assert!(tape.gather_rows(&table, &[3]).is_err());
    }
}
