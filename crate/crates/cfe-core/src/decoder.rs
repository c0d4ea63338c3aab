//! One-layer autoregressive transformer decoder over the fused visual tokens.
//!
//! Teacher forcing at train time (causal self-attention + cross-attention
//! over the encoder memory), greedy argmax decoding at inference. The
//! pre-classifier features O feed both the linear classifier and the
//! memory-unit loss.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{causal_mask, LayerNorm, Linear, Mha, Mlp, ParamSet};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub struct DecodeOutput {
    /// Recognition features `[B, T, C]` (pre-classifier).
    pub features: Tensor,
    /// `[B, T, V]`
    pub logits: Tensor,
}

pub struct Decoder {
    embed: Tensor,
    pos: Tensor,
    ln_sa: LayerNorm,
    sa: Mha,
    ln_ca: LayerNorm,
    ca: Mha,
    ln_mlp: LayerNorm,
    mlp: Mlp,
    ln_out: LayerNorm,
    mask: Tensor,
    pub t_max: usize,
    vocab_size: usize,
    dim: usize,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng, ps: &mut ParamSet) -> Decoder {
        let c = cfg.fused_width;
        let v = cfg.vocab_size;
        let t = cfg.max_label_len;
        let heads = cfg.decoder_heads();
        let embed = Tensor::randn(vec![v, c], 1.0 / (c as f64).sqrt(), rng).into_param();
        ps.register("dec.embed", &embed);
        let pos = Tensor::randn(vec![t, c], 1.0 / (c as f64).sqrt(), rng).into_param();
        ps.register("dec.pos", &pos);
        let ln_sa = LayerNorm::new(c, ps, "dec.ln_sa");
        let sa = Mha::new(c, heads, cfg.scale_mode, rng, ps, "dec.sa");
        let ln_ca = LayerNorm::new(c, ps, "dec.ln_ca");
        let ca = Mha::new(c, heads, cfg.scale_mode, rng, ps, "dec.ca");
        let ln_mlp = LayerNorm::new(c, ps, "dec.ln_mlp");
        let mlp = Mlp::new(c, c * cfg.mlp_ratio, rng, ps, "dec.mlp");
        let ln_out = LayerNorm::new(c, ps, "dec.ln_out");
        Decoder {
            embed,
            pos,
            ln_sa,
            sa,
            ln_ca,
            ca,
            ln_mlp,
            mlp,
            ln_out,
            mask: causal_mask(t),
            t_max: t,
            vocab_size: v,
            dim: c,
        }
    }

    /// Key/value projection of the encoder memory, computed once per batch.
    pub fn project_memory(&self, tape: &Tape, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        self.ca.project_kv(tape, fused)
    }

    /// Decoder layer over already-shifted input ids (`[B][T]`, BOS first).
    pub fn forward_features(
        &self,
        tape: &Tape,
        memory_kv: &(Tensor, Tensor),
        input_ids: &[Vec<usize>],
    ) -> Result<Tensor> {
        let b = input_ids.len();
        let t = self.t_max;
        let mut flat = Vec::with_capacity(b * t);
        for row in input_ids {
            if row.len() != t {
                return Err(Error::Input(format!(
                    "decoder input rows must have length {t}, got {}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        let emb = tape.gather_rows(&self.embed, &flat)?;
        let emb = tape.reshape(&emb, vec![b, t, self.dim])?;
        let x = tape.add(&emb, &self.pos)?;

        let h = self.ln_sa.forward(tape, &x)?;
        let (sk, sv) = self.sa.project_kv(tape, &h)?;
        let sa_out = self.sa.attend(tape, &h, &sk, &sv, Some(&self.mask))?;
        let x = tape.add(&x, &sa_out)?;

        let h = self.ln_ca.forward(tape, &x)?;
        let ca_out = self.ca.attend(tape, &h, &memory_kv.0, &memory_kv.1, None)?;
        let x = tape.add(&x, &ca_out)?;

        let h = self.ln_mlp.forward(tape, &x)?;
        let m = self.mlp.forward(tape, &h)?;
        let x = tape.add(&x, &m)?;

        self.ln_out.forward(tape, &x)
    }

    /// Teacher-forced pass: shifts the targets right behind a BOS, returns
    /// features and classifier logits.
    pub fn decode_train(
        &self,
        tape: &Tape,
        fused: &Tensor,
        targets: &[Vec<usize>],
        classifier: &Linear,
        vocab: &Vocabulary,
    ) -> Result<DecodeOutput> {
        let t = self.t_max;
        let mut inputs = Vec::with_capacity(targets.len());
        for row in targets {
            if row.len() != t {
                return Err(Error::Input(format!(
                    "target rows must be padded to length {t}, got {}",
                    row.len()
                )));
            }
            let mut shifted = Vec::with_capacity(t);
            shifted.push(vocab.bos_id());
            shifted.extend_from_slice(&row[..t - 1]);
            inputs.push(shifted);
        }
        let kv = self.project_memory(tape, fused)?;
        let features = self.forward_features(tape, &kv, &inputs)?;
        let logits = classifier.forward(tape, &features)?;
        Ok(DecodeOutput { features, logits })
    }

    /// Greedy autoregressive decoding: feeds argmax tokens from BOS until EOS
    /// or `t_max` steps. Returns symbol-id sequences without specials.
    pub fn decode_greedy(
        &self,
        fused: &Tensor,
        classifier: &Linear,
        vocab: &Vocabulary,
    ) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::no_grad();
        let b = fused.dim(0);
        let t = self.t_max;
        let kv = self.project_memory(&tape, fused)?;
        let mut inputs = vec![vec![vocab.pad_id(); t]; b];
        for row in inputs.iter_mut() {
            row[0] = vocab.bos_id();
        }
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for step in 0..t {
            let features = self.forward_features(&tape, &kv, &inputs)?;
            let logits = classifier.forward(&tape, &features)?;
            let ld = logits.data();
            let v = self.vocab_size;
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let row = &ld[(i * t + step) * v..(i * t + step) * v + v];
                let mut best = 0usize;
                for (j, &val) in row.iter().enumerate() {
                    if val > row[best] {
                        best = j;
                    }
                }
                if best == vocab.eos_id() || best == vocab.bos_id() || best == vocab.pad_id() {
                    done[i] = true;
                    continue;
                }
                outputs[i].push(best);
                if step + 1 < t {
                    inputs[i][step + 1] = best;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

/// Mean negative log-likelihood over non-pad positions, fused with its
/// softmax backward (the gradient over each class row sums to zero).
pub fn cross_entropy(
    tape: &Tape,
    logits: &Tensor,
    targets: &[usize],
    pad_id: usize,
) -> Result<Tensor> {
    let shape = logits.shape();
    let v = *shape.last().ok_or_else(|| Error::shape("cross_entropy on rank-0 tensor"))?;
    let rows = logits.numel() / v;
    if targets.len() != rows {
        return Err(Error::shape(format!(
            "cross_entropy: {} target rows for {} logit rows",
            targets.len(),
            rows
        )));
    }
    for &t in targets {
        if t >= v && t != pad_id {
            return Err(Error::Input(format!("target id {t} out of range 0..{v}")));
        }
    }
    let count = targets.iter().filter(|&&t| t != pad_id).count();
    if count == 0 {
        return Err(Error::Input(
            "cross_entropy over an all-pad batch: mean undefined".to_string(),
        ));
    }
    let mut total = 0.0;
    {
        let ld = logits.data();
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt == pad_id {
                continue;
            }
            let row = &ld[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
        }
    }
    let out = Tensor::scalar(total / count as f64);
    if tape.should_record(&[logits]) {
        out.set_requires_grad(true);
        let (logits_h, out_h) = (logits.clone(), out.clone());
        let targets = targets.to_vec();
        tape.record("cross_entropy", move || {
            let Some(g) = out_h.grad_snapshot() else { return };
            let scale = g[0] / count as f64;
            let ld = logits_h.data().to_vec();
            let mut dl = vec![0.0; ld.len()];
            for (r, &tgt) in targets.iter().enumerate() {
                if tgt == pad_id {
                    continue;
                }
                let row = &ld[r * v..(r + 1) * v];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                let drow = &mut dl[r * v..(r + 1) * v];
                for j in 0..v {
                    drow[j] = (row[j] - m).exp();
                    s += drow[j];
                }
                for (j, d) in drow.iter_mut().enumerate() {
                    let p = *d / s;
                    *d = scale * (p - if j == tgt { 1.0 } else { 0.0 });
                }
            }
            logits_h.accumulate_grad(&dl);
        });
    }
    Ok(out)
}
