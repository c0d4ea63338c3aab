use cfe_core::config::ModelConfig;
use cfe_core::corpus::{CorpusSpec, Split};
use cfe_core::model::Contrastive;
use cfe_core::train::{train, Dataset, EarlyStop, LossConfig, TrainConfig};
use std::time::Instant;

fn main() {
    let mut spec = CorpusSpec::desk_default();
    spec.train_count = 64;
    spec.eval_count = 4;
    let vocab = spec.vocabulary();
    let cfg = ModelConfig::variant("desk").unwrap();
    let ds = Dataset::from_spec(&spec, Split::Train, &vocab, cfg.max_label_len).unwrap();

    let tcfg = TrainConfig {
        epochs: 15, // 60 steps
        warmup_fraction: 0.1,
        base_lr: 0.048,
        batch_size: 16,
        seed: 0,
        early_stop: None,
        ..TrainConfig::desk_default()
    };
    let lcfg = LossConfig::new(Contrastive::None);
    let t0 = Instant::now();
    let (_, out) = train(&cfg, &tcfg, &lcfg, &ds, &vocab, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("{} steps in {:.2}s -> {:.3}s/step", out.steps_run, dt, dt / out.steps_run as f64);

    // overfit check on 16 samples
    let mut spec16 = CorpusSpec::desk_default();
    spec16.train_count = 16;
    spec16.eval_count = 4;
    let ds16 = Dataset::from_spec(&spec16, Split::Train, &vocab, cfg.max_label_len).unwrap();
    let tcfg = TrainConfig {
        epochs: 300,
        warmup_fraction: 0.05,
        base_lr: 0.072, // peak 3e-3 at batch 16
        batch_size: 16,
        seed: 0,
        early_stop: Some(EarlyStop { every: 10, word_accuracy: 1.0 }),
        ..TrainConfig::desk_default()
    };
    let t0 = Instant::now();
    let (model, out) = train(&cfg, &tcfg, &lcfg, &ds16, &vocab, None).unwrap();
    let acc = cfe_core::train::quick_train_accuracy(&model, &ds16, &vocab).unwrap();
    println!("overfit: stop {:?} in {:.1}s, acc {:.3}", out.early_stopped_at, t0.elapsed().as_secs_f64(), acc);
}
