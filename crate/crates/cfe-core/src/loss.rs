//! Contrastive objectives over decoded character features.
//!
//! The memory-unit loss keeps one trainable vector per vocabulary class and,
//! for every supervised character, divides its squared distance to the own
//! unit by the summed squared distances to every other unit (plus delta).
//! Gradients flow into both the features and the units. A batch-local
//! supervised contrastive loss is included as the ablation baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Long-term per-class memory units, `[V, C]`.
pub struct MemoryBank {
    pub units: Tensor,
    pub vocab_size: usize,
    pub dim: usize,
}

impl MemoryBank {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut impl Rng, ps: &mut ParamSet) -> MemoryBank {
        let units =
            Tensor::randn(vec![vocab_size, dim], 1.0 / (dim as f64).sqrt(), rng).into_param();
        ps.register("bank.units", &units);
        MemoryBank { units, vocab_size, dim }
    }

    /// Bank view for a loaded checkpoint (units already registered).
    pub fn from_units(units: Tensor) -> MemoryBank {
        let shape = units.shape();
        MemoryBank { vocab_size: shape[0], dim: shape[1], units }
    }
}

/// When the contrastive term is active and how strongly.
#[derive(Debug, Clone, Copy)]
pub struct LossSchedule {
    pub total_steps: usize,
    /// Fraction of training after which the contrastive term switches on.
    pub activation_fraction: f64,
    pub lambda: f64,
}

impl LossSchedule {
    pub fn new(total_steps: usize, activation_fraction: f64, lambda: f64) -> LossSchedule {
        LossSchedule { total_steps, activation_fraction, lambda }
    }

    /// 0 before the activation boundary, `lambda` from it onward.
    pub fn effective_lambda(&self, step: usize) -> f64 {
        let boundary = (self.activation_fraction * self.total_steps as f64).floor() as usize;
        if step >= boundary {
            self.lambda
        } else {
            0.0
        }
    }
}

/// `L = L_ce + lambda_eff(step) * L_cl` on tape scalars.
pub fn combined_loss(
    tape: &Tape,
    ce: &Tensor,
    cl: Option<&Tensor>,
    schedule: &LossSchedule,
    step: usize,
) -> Result<Tensor> {
    let lambda = schedule.effective_lambda(step);
    match cl {
        Some(cl) if lambda != 0.0 => {
            let scaled = tape.scale(cl, lambda)?;
            tape.add(ce, &scaled)
        }
        _ => Ok(ce.clone()),
    }
}

/// Memory-unit consistency loss over supervised character positions.
///
/// `features` is `[N, C]` (flattened B*T), `labels[i]` the class id of row i,
/// `valid[i]` marks supervised positions (characters + EOS; pads excluded).
/// For each valid row: `0.5 * ||o - c_y||^2 / (sum_{j != y} ||o - c_j||^2 + delta)`.
/// The denominator runs over all V units, observed or not. Empty valid sets
/// return 0 by contract.
pub fn iicl(
    tape: &Tape,
    features: &Tensor,
    labels: &[usize],
    valid: &[bool],
    bank: &MemoryBank,
    delta: f64,
) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != bank.dim {
        return Err(Error::shape(format!(
            "iicl features must be [N, {}], got {:?}",
            bank.dim, shape
        )));
    }
    let n = shape[0];
    if labels.len() != n || valid.len() != n {
        return Err(Error::shape(format!(
            "iicl: {n} feature rows, {} labels, {} valid flags",
            labels.len(),
            valid.len()
        )));
    }
    if delta <= 0.0 {
        return Err(Error::config(format!("iicl delta must be > 0, got {delta}")));
    }
    let v = bank.vocab_size;
    let c = bank.dim;
    for (i, &y) in labels.iter().enumerate() {
        if valid[i] && y >= v {
            return Err(Error::Input(format!("label id {y} out of range 0..{v}")));
        }
    }

    // forward: numerators and denominators per valid row
    let mut numer = vec![0.0; n];
    let mut denom = vec![0.0; n];
    let mut total = 0.0;
    {
        let fd = features.data();
        let ud = bank.units.data();
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            let frow = &fd[i * c..(i + 1) * c];
            let y = labels[i];
            let mut den = delta;
            let mut num = 0.0;
            for j in 0..v {
                let urow = &ud[j * c..(j + 1) * c];
                let mut d2 = 0.0;
                for k in 0..c {
                    let d = frow[k] - urow[k];
                    d2 += d * d;
                }
                if j == y {
                    num = d2;
                } else {
                    den += d2;
                }
            }
            numer[i] = num;
            denom[i] = den;
            total += 0.5 * num / den;
        }
    }
    let out = Tensor::scalar(total);
    if tape.should_record(&[features, &bank.units]) {
        out.set_requires_grad(true);
        let (features_h, units_h, out_h) = (features.clone(), bank.units.clone(), out.clone());
        let labels = labels.to_vec();
        let valid = valid.to_vec();
        let f_needs = features.requires_grad();
        let u_needs = bank.units.requires_grad();
        tape.record("iicl", move || {
            let Some(g) = out_h.grad_snapshot() else { return };
            let gs = g[0];
            let fd = features_h.data().to_vec();
            let ud = units_h.data().to_vec();
            let mut df = vec![0.0; fd.len()];
            let mut du = vec![0.0; ud.len()];
            for i in 0..labels.len() {
                if !valid[i] {
                    continue;
                }
                let y = labels[i];
                let frow = &fd[i * c..(i + 1) * c];
                let inv_den = 1.0 / denom[i];
                let ratio = numer[i] * inv_den * inv_den; // n_i / d_i^2
                for j in 0..v {
                    let urow = &ud[j * c..(j + 1) * c];
                    if j == y {
                        // attraction: d/do 0.5*n/d = (o - c_y)/d, symmetric pull on the unit
                        for k in 0..c {
                            let diff = frow[k] - urow[k];
                            let gval = gs * diff * inv_den;
                            df[i * c + k] += gval;
                            du[j * c + k] -= gval;
                        }
                    } else {
                        // repulsion through the denominator: -0.5*n/d^2 * 2(o - c_j)
                        for k in 0..c {
                            let diff = frow[k] - urow[k];
                            let gval = gs * ratio * diff;
                            df[i * c + k] -= gval;
                            du[j * c + k] += gval;
                        }
                    }
                }
            }
            if f_needs {
                features_h.accumulate_grad(&df);
            }
            if u_needs {
                units_h.accumulate_grad(&du);
            }
        });
    }
    Ok(out)
}

/// Batch-local supervised contrastive baseline over L2-normalized features.
///
/// Anchors with no same-class positive in the batch contribute nothing; the
/// loss is the mean over anchors that have at least one. Composed from tape
/// primitives, so its gradient comes from the generic backward passes.
pub fn cc_loss(
    tape: &Tape,
    features: &Tensor,
    labels: &[usize],
    valid: &[bool],
    temperature: f64,
) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("cc_loss features must be [N, C], got {:?}", shape)));
    }
    if temperature <= 0.0 {
        return Err(Error::config(format!("cc temperature must be > 0, got {temperature}")));
    }
    let idx: Vec<usize> = (0..shape[0]).filter(|&i| valid[i]).collect();
    if idx.len() < 2 {
        return Err(Error::Input(format!(
            "cc_loss needs at least two valid characters, got {}",
            idx.len()
        )));
    }
    let m = idx.len();

    // gather valid rows into an [M, C] block
    let sel = tape.gather_rows(features, &idx)?;
    let z = tape.l2_normalize_lastdim(&sel)?;
    let zt = tape.permute(&z, &[1, 0])?;
    let sims = tape.scale(&tape.matmul(&z, &zt)?, 1.0 / temperature)?;

    // -inf-ish mask on the diagonal: an anchor never contrasts with itself
    let mut mask_data = vec![0.0; m * m];
    for i in 0..m {
        mask_data[i * m + i] = -1e30;
    }
    let diag_mask = Tensor::from_vec(vec![m, m], mask_data)?;
    let masked = tape.add(&sims, &diag_mask)?;
    let logp = tape.log_softmax_lastdim(&masked)?;

    // positive-pair weights: 1 / (|P(i)| * anchors_with_positives)
    let mut pos_counts = vec![0usize; m];
    for a in 0..m {
        for b in 0..m {
            if a != b && labels[idx[a]] == labels[idx[b]] {
                pos_counts[a] += 1;
            }
        }
    }
    let anchors = pos_counts.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let mut w = vec![0.0; m * m];
    for a in 0..m {
        if pos_counts[a] == 0 {
            continue;
        }
        for b in 0..m {
            if a != b && labels[idx[a]] == labels[idx[b]] {
                w[a * m + b] = 1.0 / (pos_counts[a] as f64 * anchors as f64);
            }
        }
    }
    let weights = Tensor::from_vec(vec![m, m], w)?;
    let weighted = tape.mul(&logp, &weights)?;
    let total = tape.sum_all(&weighted)?;
    tape.scale(&total, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_default;
    use approx::assert_abs_diff_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_with(units: Vec<f64>, v: usize, c: usize) -> MemoryBank {
        MemoryBank::from_units(Tensor::from_vec(vec![v, c], units).unwrap().into_param())
    }

    #[test]
    fn hand_worked_single_char() {
        // O = 1, c0 = 0, c1 = 3, y = 0, delta = 1:
        // 0.5 * |1-0|^2 / (|1-3|^2 + 1) = 0.5 / 5 = 0.1
        let tape = Tape::no_grad();
        let bank = bank_with(vec![0.0, 3.0], 2, 1);
        let o = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let loss = iicl(&tape, &o, &[0], &[true], &bank, 1.0).unwrap();
        assert_abs_diff_eq!(loss.item(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn features_on_their_units_give_zero() {
        let tape = Tape::no_grad();
        let bank = bank_with(vec![1.0, 2.0, -1.0, 0.5], 2, 2);
        let o = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let loss = iicl(&tape, &o, &[0, 1], &[true, true], &bank, 1.0).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn empty_valid_set_returns_zero() {
        let tape = Tape::no_grad();
        let bank = bank_with(vec![0.0, 1.0], 2, 1);
        let o = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let loss = iicl(&tape, &o, &[0, 1], &[false, false], &bank, 1.0).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let tape = Tape::no_grad();
        let bank = bank_with(vec![0.0, 1.0], 2, 1);
        let o = Tensor::from_vec(vec![1, 1], vec![3.0]).unwrap();
        assert!(iicl(&tape, &o, &[2], &[true], &bank, 1.0).is_err());
    }

    #[test]
    fn iicl_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut ps = ParamSet::new();
        let bank = MemoryBank::new(5, 3, &mut rng, &mut ps);
        let o = Tensor::randn(vec![9, 3], 1.0, &mut rng).into_param();
        let labels = vec![0, 2, 4, 1, 1, 3, 0, 2, 4];
        let valid = vec![true, true, false, true, true, true, true, false, true];
        let report = grad_check_default(
            |tape| iicl(tape, &o, &labels, &valid, &bank, 1.0),
            &[("o", &o), ("units", &bank.units)],
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn iicl_invariant_to_batch_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mut ps = ParamSet::new();
        let bank = MemoryBank::new(4, 2, &mut rng, &mut ps);
        let o = Tensor::randn(vec![5, 2], 1.0, &mut rng);
        let labels = vec![0, 1, 2, 3, 1];
        let tape = Tape::no_grad();
        let base = iicl(&tape, &o, &labels, &[true; 5], &bank, 1.0).unwrap().item();
        // permute rows 0..5 by a fixed shuffle
        let perm = [3usize, 0, 4, 1, 2];
        let od = o.to_vec();
        let mut pd = vec![0.0; od.len()];
        let mut pl = vec![0usize; 5];
        for (dst, &src) in perm.iter().enumerate() {
            pd[dst * 2..dst * 2 + 2].copy_from_slice(&od[src * 2..src * 2 + 2]);
            pl[dst] = labels[src];
        }
        let po = Tensor::from_vec(vec![5, 2], pd).unwrap();
        let permuted = iicl(&tape, &po, &pl, &[true; 5], &bank, 1.0).unwrap().item();
        assert_abs_diff_eq!(base, permuted, epsilon = 1e-12);
    }

    #[test]
    fn scaling_behavior_invariant_at_delta_zero_limit_increasing_with_delta() {
        // Scaling features and units by s leaves n/d fixed when delta = 0;
        // with delta = 1 the ratio n/(d + 1/s^2 scaled) grows toward that
        // limit, so the loss strictly increases with s.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut ps = ParamSet::new();
        let bank = MemoryBank::new(4, 3, &mut rng, &mut ps);
        let o = Tensor::randn(vec![6, 3], 1.0, &mut rng);
        let labels = vec![0, 1, 2, 3, 0, 1];
        let tape = Tape::no_grad();
        let eval = |s: f64, delta: f64| -> f64 {
            let so = Tensor::from_vec(vec![6, 3], o.to_vec().iter().map(|v| v * s).collect())
                .unwrap();
            let su = Tensor::from_vec(
                vec![4, 3],
                bank.units.to_vec().iter().map(|v| v * s).collect(),
            )
            .unwrap();
            let sbank = MemoryBank::from_units(su);
            iicl(&tape, &so, &labels, &[true; 6], &sbank, delta).unwrap().item()
        };
        // delta -> 0 limit: scale invariance (use a vanishing delta that
        // scales with s^2 to probe the exact limit)
        let l1 = eval(1.0, 1e-300);
        let l2 = eval(2.0, 1e-300);
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
        // delta = 1: strictly increasing in s
        let series: Vec<f64> = [0.5, 1.0, 2.0, 4.0].iter().map(|&s| eval(s, 1.0)).collect();
        for w in series.windows(2) {
            assert!(w[0] < w[1], "loss must increase with scale: {:?}", series);
        }
    }

    #[test]
    fn absent_class_units_feel_only_repulsion() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let mut ps = ParamSet::new();
        let bank = MemoryBank::new(5, 2, &mut rng, &mut ps);
        let o = Tensor::randn(vec![3, 2], 1.0, &mut rng).into_param();
        let labels = vec![0, 1, 0]; // classes 2, 3, 4 absent
        let tape = Tape::new();
        let loss = iicl(&tape, &o, &labels, &[true; 3], &bank, 1.0).unwrap();
        tape.backward(&loss).unwrap();
        let du = bank.units.grad().unwrap();
        // independent repulsion-only formula for an absent class k:
        // d/dc_k = sum_i n_i/d_i^2 * (o_i - c_k)  (see derivation in iicl)
        let od = o.to_vec();
        let ud = bank.units.to_vec();
        for k in 2..5 {
            let mut expect = [0.0f64; 2];
            for i in 0..3 {
                let y = labels[i];
                let frow = &od[i * 2..(i + 1) * 2];
                let mut den = 1.0;
                let mut num = 0.0;
                for j in 0..5 {
                    let urow = &ud[j * 2..(j + 1) * 2];
                    let d2: f64 =
                        frow.iter().zip(urow).map(|(a, b)| (a - b) * (a - b)).sum();
                    if j == y {
                        num = d2;
                    } else {
                        den += d2;
                    }
                }
                let ratio = num / (den * den);
                for c in 0..2 {
                    expect[c] += ratio * (frow[c] - ud[k * 2 + c]);
                }
            }
            for c in 0..2 {
                assert_abs_diff_eq!(du[k * 2 + c], expect[c], epsilon = 1e-12);
            }
        }
        bank.units.zero_grad();
        o.zero_grad();
    }

    #[test]
    fn units_converge_toward_class_means_on_frozen_features() {
        // Distant, tight clusters: gradient descent on the units alone should
        // park each unit near its class mean (the numerator's fixed point).
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut ps = ParamSet::new();
        let bank = MemoryBank::new(3, 2, &mut rng, &mut ps);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..8 {
                let jitter = Tensor::randn(vec![2], 0.05, &mut rng);
                let j = jitter.to_vec();
                rows.extend_from_slice(&[c[0] + j[0], c[1] + j[1]]);
                labels.push(k);
            }
        }
        let o = Tensor::from_vec(vec![24, 2], rows).unwrap();
        let valid = vec![true; 24];
        for _ in 0..400 {
            bank.units.zero_grad();
            let tape = Tape::new();
            let loss = iicl(&tape, &o, &labels, &valid, &bank, 1.0).unwrap();
            tape.backward(&loss).unwrap();
            let g = bank.units.grad().unwrap();
            let mut u = bank.units.to_vec();
            for (ui, gi) in u.iter_mut().zip(&g) {
                *ui -= 5.0 * gi;
            }
            bank.units.assign(&u);
        }
        let u = bank.units.to_vec();
        for (k, c) in centers.iter().enumerate() {
            let dx = u[k * 2] - c[0];
            let dy = u[k * 2 + 1] - c[1];
            let dist = (dx * dx + dy * dy).sqrt();
            assert!(dist < 1.0, "unit {k} ended {dist:.3} from its class mean");
        }
    }

    #[test]
    fn schedule_gates_the_contrastive_term() {
        let s = LossSchedule::new(1000, 0.75, 0.2);
        assert_eq!(s.effective_lambda(100), 0.0); // 10% of training
        assert_eq!(s.effective_lambda(749), 0.0);
        assert_eq!(s.effective_lambda(750), 0.2);
        assert_eq!(s.effective_lambda(800), 0.2); // 80% of training

        let tape = Tape::new();
        let ce = Tensor::scalar(2.0);
        let cl = Tensor::scalar(0.5);
        let both = combined_loss(&tape, &ce, Some(&cl), &s, 800).unwrap();
        assert_abs_diff_eq!(both.item(), 2.0 + 0.2 * 0.5, epsilon = 1e-15);
        let early = combined_loss(&tape, &ce, Some(&cl), &s, 100).unwrap();
        assert_eq!(early.item(), 2.0);
        let zero_cl = combined_loss(&tape, &ce, Some(&Tensor::scalar(0.0)), &s, 800).unwrap();
        assert_eq!(zero_cl.item(), 2.0);
    }

    #[test]
    fn cc_aligned_positives_give_near_zero() {
        let tape = Tape::no_grad();
        // two identical same-class features, one far-away other class
        let o = Tensor::from_vec(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let loss = cc_loss(&tape, &o, &[0, 0, 1], &[true; 3], 0.1).unwrap();
        assert!(loss.item() < 1e-8, "got {}", loss.item());
    }

    #[test]
    fn cc_indiscriminate_features_hit_ln_baseline() {
        let tape = Tape::no_grad();
        // all features identical across classes: every anchor's positives and
        // negatives tie, so each term is ln(N-1)
        let o = Tensor::from_vec(vec![4, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
            .unwrap();
        let loss = cc_loss(&tape, &o, &[0, 0, 1, 1], &[true; 4], 0.1).unwrap();
        assert_abs_diff_eq!(loss.item(), 3f64.ln(), epsilon = 1e-9);
        assert!(loss.item() > 0.0);
    }

    #[test]
    fn cc_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let o = Tensor::randn(vec![7, 4], 1.0, &mut rng).into_param();
        let labels = vec![0, 1, 0, 2, 1, 2, 0];
        let valid = vec![true, true, true, true, false, true, true];
        let report = grad_check_default(
            |tape| cc_loss(tape, &o, &labels, &valid, 0.5),
            &[("o", &o)],
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn cc_needs_two_valid_chars() {
        let tape = Tape::no_grad();
        let o = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(cc_loss(&tape, &o, &[0, 1], &[true, false], 0.1).is_err());
    }
}
