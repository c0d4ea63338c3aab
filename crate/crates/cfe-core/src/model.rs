//! Full recognizer: encoder, decoder, classifier head, and (optionally) the
//! memory bank, behind one named-parameter registry.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{DecodeOutput, Decoder};
use crate::encoder::{EncodeOutput, Encoder};
use crate::error::Result;
use crate::layers::{Linear, ParamSet};
use crate::loss::MemoryBank;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Which contrastive objective a model trains with. `Iicl` owns a memory
/// bank; the others do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contrastive {
    None,
    Cc,
    Iicl,
}

impl Contrastive {
    pub fn parse(s: &str) -> crate::error::Result<Contrastive> {
        match s {
            "none" => Ok(Contrastive::None),
            "cc" => Ok(Contrastive::Cc),
            "iicl" => Ok(Contrastive::Iicl),
            other => Err(crate::error::Error::config(format!(
                "loss.contrastive must be none|cc|iicl, got {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Contrastive::None => "none",
            Contrastive::Cc => "cc",
            Contrastive::Iicl => "iicl",
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub classifier: Linear,
    pub bank: Option<MemoryBank>,
    pub contrastive: Contrastive,
    params: ParamSet,
}

pub struct TrainForward {
    pub encode: EncodeOutput,
    pub decode: DecodeOutput,
}

impl Model {
    /// Builds a model with weights drawn deterministically from `seed`.
    pub fn new(cfg: &ModelConfig, contrastive: Contrastive, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let encoder = Encoder::new(cfg, &mut rng, &mut ps)?;
        let decoder = Decoder::new(cfg, &mut rng, &mut ps);
        let classifier = Linear::new(
            cfg.fused_width,
            cfg.vocab_size,
            true,
            &mut rng,
            &mut ps,
            "cls",
        );
        let bank = match contrastive {
            Contrastive::Iicl => Some(MemoryBank::new(
                cfg.vocab_size,
                cfg.fused_width,
                &mut rng,
                &mut ps,
            )),
            _ => None,
        };
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            decoder,
            classifier,
            bank,
            contrastive,
            params: ps,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Teacher-forced pass over a batch: images `[B, H, W, 1]`, targets
    /// padded to T. `capture` keeps per-block attention for diagnostics.
    pub fn forward_train(
        &self,
        tape: &Tape,
        images: &Tensor,
        targets: &[Vec<usize>],
        vocab: &Vocabulary,
        capture: bool,
    ) -> Result<TrainForward> {
        let encode = self.encoder.forward(tape, images, capture)?;
        let decode =
            self.decoder
                .decode_train(tape, &encode.fused, targets, &self.classifier, vocab)?;
        Ok(TrainForward { encode, decode })
    }

    /// Greedy inference: returns decoded strings.
    pub fn recognize(&self, images: &Tensor, vocab: &Vocabulary) -> Result<Vec<String>> {
        let tape = Tape::no_grad();
        let encode = self.encoder.forward(&tape, images, false)?;
        let ids = self
            .decoder
            .decode_greedy(&encode.fused, &self.classifier, vocab)?;
        Ok(ids
            .iter()
            .map(|seq| seq.iter().filter_map(|&id| vocab.char_of(id)).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::defaults();
        cfg.stage_widths = [8, 16, 24];
        cfg.stage_heads = [1, 2, 3];
        cfg.stage_depths = [1, 1, 1];
        cfg.decay_order = (1, 2);
        cfg.fused_width = 12;
        cfg.input = (16, 16);
        cfg.max_label_len = 4;
        cfg.vocab_size = 6;
        cfg.mlp_ratio = 2;
        cfg
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let cfg = small_cfg();
        let a = Model::new(&cfg, Contrastive::Iicl, 5).unwrap();
        let b = Model::new(&cfg, Contrastive::Iicl, 5).unwrap();
        assert_eq!(a.params().len(), b.params().len());
        for ((na, ta), (nb, tb)) in a.params().items().iter().zip(b.params().items()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let c = Model::new(&cfg, Contrastive::Iicl, 6).unwrap();
        let first_a = &a.params().items()[0].1;
        let first_c = &c.params().items()[0].1;
        assert_ne!(first_a.to_vec(), first_c.to_vec());
    }

    #[test]
    fn bank_present_only_for_iicl() {
        let cfg = small_cfg();
        assert!(Model::new(&cfg, Contrastive::Iicl, 0).unwrap().bank.is_some());
        assert!(Model::new(&cfg, Contrastive::None, 0).unwrap().bank.is_none());
        assert!(Model::new(&cfg, Contrastive::Cc, 0).unwrap().bank.is_none());
    }

    #[test]
    fn full_forward_shapes() {
        let cfg = small_cfg();
        let vocab = Vocabulary::new(&['a', 'b', 'c']);
        assert_eq!(vocab.size(), cfg.vocab_size);
        let model = Model::new(&cfg, Contrastive::Iicl, 1).unwrap();
        let tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let images = Tensor::randn(vec![2, 16, 16, 1], 0.5, &mut rng);
        let targets = vec![
            vocab.encode_label("ab", 4).unwrap(),
            vocab.encode_label("c", 4).unwrap(),
        ];
        let fwd = model
            .forward_train(&tape, &images, &targets, &vocab, false)
            .unwrap();
        assert_eq!(fwd.decode.features.shape(), vec![2, 4, 12]);
        assert_eq!(fwd.decode.logits.shape(), vec![2, 4, 6]);
        let words = model.recognize(&images, &vocab).unwrap();
        assert_eq!(words.len(), 2);
    }
}
