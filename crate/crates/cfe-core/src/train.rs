//! Training harness: dataset assembly, the seeded step loop, loss schedule
//! wiring, divergence detection, and epoch checkpoints.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, TrainState};
use crate::config::ModelConfig;
use crate::corpus::{self, CorpusSpec, GlyphSample, Split};
use crate::decoder::cross_entropy;
use crate::error::{Error, Result};
use crate::loss::{cc_loss, combined_loss, iicl, LossSchedule};
use crate::model::{Contrastive, Model};
use crate::optim::{Adam, LrSchedule};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_fraction: f64,
    /// Learning rate at the 384-image reference batch; the effective peak is
    /// scaled by `batch_size / 384`.
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    /// Optional greedy-decode early stop on the training set.
    pub early_stop: Option<EarlyStop>,
}

#[derive(Debug, Clone, Copy)]
pub struct EarlyStop {
    pub every: usize,
    pub word_accuracy: f64,
}

impl TrainConfig {
    /// Tuned defaults for the desk corpus.
    pub fn desk_default() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            warmup_fraction: 0.075,
            base_lr: 0.036,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            early_stop: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub contrastive: Contrastive,
    pub lambda: f64,
    pub delta: f64,
    pub activation_fraction: f64,
    pub cc_temperature: f64,
}

impl LossConfig {
    pub fn new(contrastive: Contrastive) -> LossConfig {
        LossConfig {
            contrastive,
            lambda: 0.2,
            delta: 1.0,
            activation_fraction: 0.75,
            cc_temperature: 0.1,
        }
    }
}

/// In-memory dataset: pixels plus padded target ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<String>,
    pub targets: Vec<Vec<usize>>,
    pub img_h: usize,
    pub img_w: usize,
}

impl Dataset {
    pub fn from_samples(
        samples: &[GlyphSample],
        vocab: &Vocabulary,
        max_label_len: usize,
        img_h: usize,
        img_w: usize,
    ) -> Result<Dataset> {
        let mut images = Vec::with_capacity(samples.len());
        let mut texts = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            images.push(s.pixels_f64());
            targets.push(vocab.encode_label(&s.text, max_label_len)?);
            texts.push(s.text.clone());
        }
        Ok(Dataset { images, texts, targets, img_h, img_w })
    }

    pub fn from_dir(
        corpus_dir: &Path,
        split: &str,
        vocab: &Vocabulary,
        max_label_len: usize,
        img_h: usize,
        img_w: usize,
    ) -> Result<Dataset> {
        let loaded = corpus::load_split(corpus_dir, split)?;
        let mut images = Vec::with_capacity(loaded.len());
        let mut texts = Vec::with_capacity(loaded.len());
        let mut targets = Vec::with_capacity(loaded.len());
        for s in &loaded {
            if s.bytes.len() != img_h * img_w {
                return Err(Error::Input(format!(
                    "sample {} has {} pixels, expected {}x{}",
                    s.id,
                    s.bytes.len(),
                    img_h,
                    img_w
                )));
            }
            images.push(crate::pgm::bytes_to_f64(&s.bytes));
            targets.push(vocab.encode_label(&s.text, max_label_len)?);
            texts.push(s.text.clone());
        }
        Ok(Dataset { images, texts, targets, img_h, img_w })
    }

    /// Renders a split directly in memory (no files).
    pub fn from_spec(
        spec: &CorpusSpec,
        split: Split,
        vocab: &Vocabulary,
        max_label_len: usize,
    ) -> Result<Dataset> {
        let samples = corpus::generate_split(spec, split)?;
        Dataset::from_samples(&samples, vocab, max_label_len, spec.img_h, spec.img_w)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Batch tensors for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<Vec<usize>>) {
        let b = indices.len();
        let hw = self.img_h * self.img_w;
        let mut pixels = Vec::with_capacity(b * hw);
        let mut targets = Vec::with_capacity(b);
        for &i in indices {
            pixels.extend_from_slice(&self.images[i]);
            targets.push(self.targets[i].clone());
        }
        let images = Tensor::from_vec(vec![b, self.img_h, self.img_w, 1], pixels)
            .expect("consistent by construction");
        (images, targets)
    }
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub cl: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub total_steps: usize,
    pub final_loss: f64,
    pub log: Vec<StepLog>,
    /// Hash over the exact (epoch, step, indices) visit order.
    pub batch_order_hash: u64,
    /// Final serialized checkpoint.
    pub checkpoint: Vec<u8>,
    pub checkpoint_path: Option<PathBuf>,
    pub early_stopped_at: Option<usize>,
}

/// Deterministic epoch shuffles: one rng drives the whole visit order.
fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Salt separating the batch-order stream from the weight-init stream.
const BATCH_ORDER_SALT: u64 = 0x9ec3_8a1f_55aa_1234;

/// Trains a freshly initialized model.
pub fn train(
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    dataset: &Dataset,
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainOutcome)> {
    let model = Model::new(model_cfg, lcfg.contrastive, tcfg.seed)?;
    let adam = Adam::new(model.params(), tcfg.beta1, tcfg.beta2, tcfg.eps);
    let rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ BATCH_ORDER_SALT);
    run_loop(model, adam, rng, 0, tcfg, lcfg, dataset, vocab, out_dir)
}

/// Continues training from a checkpoint (schedule boundaries included).
pub fn resume(
    checkpoint_path: &Path,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    dataset: &Dataset,
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainOutcome)> {
    let (model, adam, state) = checkpoint::load(checkpoint_path)?;
    if model.contrastive != lcfg.contrastive {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with contrastive={}, requested {}",
            model.contrastive.name(),
            lcfg.contrastive.name()
        )));
    }
    let rng = state.rng();
    run_loop(
        model,
        adam,
        rng,
        state.step as usize,
        tcfg,
        lcfg,
        dataset,
        vocab,
        out_dir,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    model: Model,
    mut adam: Adam,
    mut rng: ChaCha8Rng,
    start_step: usize,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    dataset: &Dataset,
    vocab: &Vocabulary,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainOutcome)> {
    if dataset.is_empty() {
        return Err(Error::Input("empty training dataset".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let n = dataset.len();
    let batch = tcfg.batch_size.max(1).min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = steps_per_epoch * tcfg.epochs;
    let lr_schedule = LrSchedule::new(tcfg.base_lr, batch, tcfg.warmup_fraction, total_steps);
    let loss_schedule = LossSchedule::new(total_steps, lcfg.activation_fraction, lcfg.lambda);

    let mut order_hasher = DefaultHasher::new();
    let mut log = Vec::with_capacity(total_steps - start_step);
    let mut last_ckpt: Option<PathBuf> = None;
    let mut early_stopped_at = None;
    let mut step = start_step;

    'epochs: for epoch in start_step / steps_per_epoch..tcfg.epochs {
        let mut indices: Vec<usize> = (0..n).collect();
        shuffle(&mut indices, &mut rng);
        for (batch_idx, chunk) in indices.chunks(batch).enumerate() {
            // a resumed run replays earlier epochs' shuffles to stay aligned
            if epoch * steps_per_epoch + batch_idx < step {
                continue;
            }
            (epoch, batch_idx, chunk).hash(&mut order_hasher);

            let (images, targets) = dataset.batch(chunk);
            let tape = Tape::new();
            let fwd = model.forward_train(&tape, &images, &targets, vocab, false)?;
            let flat_targets: Vec<usize> = targets.iter().flatten().copied().collect();
            let ce = cross_entropy(&tape, &fwd.decode.logits, &flat_targets, vocab.pad_id())?;

            let lambda_active = loss_schedule.effective_lambda(step) != 0.0;
            let cl = if lambda_active && lcfg.contrastive != Contrastive::None {
                let c = model.cfg.fused_width;
                let flat_feats = tape.reshape(
                    &fwd.decode.features,
                    vec![flat_targets.len(), c],
                )?;
                let valid: Vec<bool> =
                    flat_targets.iter().map(|&t| t != vocab.pad_id()).collect();
                match lcfg.contrastive {
                    Contrastive::Iicl => {
                        let bank = model.bank.as_ref().expect("iicl model owns a bank");
                        Some(iicl(&tape, &flat_feats, &flat_targets, &valid, bank, lcfg.delta)?)
                    }
                    Contrastive::Cc => {
                        if valid.iter().filter(|&&v| v).count() >= 2 {
                            Some(cc_loss(
                                &tape,
                                &flat_feats,
                                &flat_targets,
                                &valid,
                                lcfg.cc_temperature,
                            )?)
                        } else {
                            None
                        }
                    }
                    Contrastive::None => None,
                }
            } else {
                None
            };
            let total = combined_loss(&tape, &ce, cl.as_ref(), &loss_schedule, step)?;

            let loss_val = total.item();
            if !loss_val.is_finite() {
                return Err(Error::Diverged { step, last_checkpoint: last_ckpt });
            }
            tape.backward(&total)?;
            let lr = lr_schedule.lr(step);
            adam.step(model.params(), lr, tcfg.clip_norm);

            log.push(StepLog {
                step,
                lr,
                ce: ce.item(),
                cl: cl.as_ref().map(|t| t.item()).unwrap_or(0.0),
                total: loss_val,
            });
            step += 1;

            if let Some(es) = tcfg.early_stop {
                if step % es.every == 0 {
                    let acc = quick_train_accuracy(&model, dataset, vocab)?;
                    if acc >= es.word_accuracy {
                        early_stopped_at = Some(step);
                        break 'epochs;
                    }
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join(format!("ckpt-epoch-{:03}.bin", epoch + 1));
            let state = TrainState::of_rng(&rng, step as u64, total_steps as u64);
            checkpoint::save(&path, &model, &adam, &state)?;
            last_ckpt = Some(path);
        }
    }

    let state = TrainState::of_rng(&rng, step as u64, total_steps as u64);
    let bytes = checkpoint::serialize(&model, &adam, &state);
    let checkpoint_path = match out_dir {
        Some(dir) => {
            let path = dir.join("checkpoint.bin");
            std::fs::write(&path, &bytes)?;
            Some(path)
        }
        None => None,
    };
    if let Some(dir) = out_dir {
        let mut csv = String::from("step,lr,ce,cl,total\n");
        for l in &log {
            let _ = writeln!(csv, "{},{},{},{},{}", l.step, l.lr, l.ce, l.cl, l.total);
        }
        std::fs::write(dir.join("losses.csv"), csv)?;
    }
    let final_loss = log.last().map(|l| l.total).unwrap_or(f64::NAN);
    Ok((
        model,
        TrainOutcome {
            steps_run: step - start_step,
            total_steps,
            final_loss,
            log,
            batch_order_hash: order_hasher.finish(),
            checkpoint: bytes,
            checkpoint_path,
            early_stopped_at,
        },
    ))
}

/// Exact-match accuracy by greedy decode over the whole dataset.
pub fn quick_train_accuracy(model: &Model, dataset: &Dataset, vocab: &Vocabulary) -> Result<f64> {
    let mut correct = 0usize;
    let bs = 64usize;
    let mut idx = 0usize;
    while idx < dataset.len() {
        let hi = (idx + bs).min(dataset.len());
        let indices: Vec<usize> = (idx..hi).collect();
        let (images, _) = dataset.batch(&indices);
        let words = model.recognize(&images, vocab)?;
        for (w, &i) in words.iter().zip(&indices) {
            if *w == dataset.texts[i] {
                correct += 1;
            }
        }
        idx = hi;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_setup() -> (ModelConfig, Vocabulary, Dataset, CorpusSpec) {
        let mut spec = CorpusSpec::desk_default();
        spec.train_count = 8;
        spec.eval_count = 4;
        spec.max_len = 3;
        let vocab = spec.vocabulary();
        let mut cfg = ModelConfig::defaults();
        cfg.stage_widths = [8, 16, 16];
        cfg.stage_heads = [2, 4, 4];
        cfg.stage_depths = [1, 1, 1];
        cfg.decay_order = (1, 2);
        cfg.fused_width = 16;
        cfg.input = (32, 64);
        cfg.max_label_len = 4;
        cfg.vocab_size = vocab.size();
        cfg.mlp_ratio = 2;
        let ds = Dataset::from_spec(&spec, Split::Train, &vocab, 4).unwrap();
        (cfg, vocab, ds, spec)
    }

    fn micro_tcfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_fraction: 0.1,
            base_lr: 0.02,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::desk_default()
        }
    }

    #[test]
    fn identical_seeds_give_byte_identical_checkpoints() {
        let (cfg, vocab, ds, _) = micro_setup();
        let tcfg = micro_tcfg(1);
        let lcfg = LossConfig::new(Contrastive::Iicl);
        let (_, a) = train(&cfg, &tcfg, &lcfg, &ds, &vocab, None).unwrap();
        let (_, b) = train(&cfg, &tcfg, &lcfg, &ds, &vocab, None).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.batch_order_hash, b.batch_order_hash);
        let mut tcfg2 = tcfg.clone();
        tcfg2.seed = 2;
        let (_, c) = train(&cfg, &tcfg2, &lcfg, &ds, &vocab, None).unwrap();
        assert_ne!(a.checkpoint, c.checkpoint);
    }

    #[test]
    fn contrastive_term_inactive_before_boundary() {
        let (cfg, vocab, ds, _) = micro_setup();
        let tcfg = micro_tcfg(2); // 4 steps -> boundary at step 3
        let lcfg = LossConfig::new(Contrastive::Iicl);
        let (model, out) = train(&cfg, &tcfg, &lcfg, &ds, &vocab, None).unwrap();
        assert_eq!(out.total_steps, 4);
        for l in &out.log {
            if l.step < 3 {
                assert_eq!(l.cl, 0.0, "cl active too early at step {}", l.step);
                assert_eq!(l.total, l.ce);
            }
        }
        assert!(out.log.iter().any(|l| l.cl != 0.0), "cl never activated");
        // the bank exists and received updates only in the active window
        assert!(model.bank.is_some());
    }

    #[test]
    fn loss_decreases_on_micro_overfit() {
        let (cfg, vocab, ds, _) = micro_setup();
        let mut tcfg = micro_tcfg(30); // 60 steps
        tcfg.base_lr = 1.0; // peak 1e-2 at batch 4
        let lcfg = LossConfig::new(Contrastive::None);
        let (_, out) = train(&cfg, &tcfg, &lcfg, &ds, &vocab, None).unwrap();
        let first = out.log.first().unwrap().total;
        let last = out.log.last().unwrap().total;
        assert!(
            last < first * 0.5,
            "loss did not drop: first {first:.4}, last {last:.4}"
        );
    }

    #[test]
    fn resume_crosses_activation_boundary() {
        let (cfg, vocab, ds, _) = micro_setup();
        let dir = std::env::temp_dir().join(format!("cfe-train-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        // full run: 2 epochs x 2 steps, boundary at step 3
        let tcfg = micro_tcfg(2);
        let lcfg = LossConfig::new(Contrastive::Iicl);
        let (_, full) = train(&cfg, &tcfg, &lcfg, &ds, &vocab, Some(&dir)).unwrap();
        // partial: stop after epoch 1 (checkpoint), then resume
        let resumed = resume(
            &dir.join("ckpt-epoch-001.bin"),
            &tcfg,
            &lcfg,
            &ds,
            &vocab,
            None,
        )
        .unwrap()
        .1;
        // the resumed run activates cl at the same global step
        let full_first_active = full.log.iter().find(|l| l.cl != 0.0).map(|l| l.step);
        let res_first_active = resumed.log.iter().find(|l| l.cl != 0.0).map(|l| l.step);
        assert_eq!(full_first_active, res_first_active);
        let _ = std::fs::remove_dir_all(&dir);
    }
}
