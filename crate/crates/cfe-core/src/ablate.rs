//! Controlled component ablations: trains a grid of model variants on the
//! same data with the same seeds and tabulates eval accuracy.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::decay::DecayOption;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::Contrastive;
use crate::train::{train, Dataset, LossConfig, TrainConfig};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Encoder constraint + contrastive loss, individually and together.
    Components,
    /// No contrastive vs batch-local contrastive vs memory units.
    Contrastive,
    /// Decay matrix and multi-scale fusion within the encoder.
    CaceParts,
    /// The three decay matrix options.
    DecayOptions,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Suite> {
        match s {
            "components" => Ok(Suite::Components),
            "contrastive" => Ok(Suite::Contrastive),
            "cace_parts" => Ok(Suite::CaceParts),
            "decay_options" => Ok(Suite::DecayOptions),
            other => Err(Error::config(format!(
                "unknown suite {other:?} (components|contrastive|cace_parts|decay_options)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Components => "components",
            Suite::Contrastive => "contrastive",
            Suite::CaceParts => "cace_parts",
            Suite::DecayOptions => "decay_options",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellSpec {
    pub name: String,
    pub decay: bool,
    pub fusion: bool,
    pub contrastive: Contrastive,
    pub option: DecayOption,
}

pub fn cells(suite: Suite) -> Vec<CellSpec> {
    let cell = |name: &str, decay: bool, fusion: bool, contrastive: Contrastive| CellSpec {
        name: name.to_string(),
        decay,
        fusion,
        contrastive,
        option: DecayOption::Max,
    };
    match suite {
        Suite::Components => vec![
            cell("baseline", false, false, Contrastive::None),
            cell("cace", true, true, Contrastive::None),
            cell("iicl", false, false, Contrastive::Iicl),
            cell("full", true, true, Contrastive::Iicl),
        ],
        Suite::Contrastive => vec![
            cell("none", true, true, Contrastive::None),
            cell("cc", true, true, Contrastive::Cc),
            cell("iicl", true, true, Contrastive::Iicl),
        ],
        Suite::CaceParts => vec![
            cell("neither", false, false, Contrastive::Iicl),
            cell("decay", true, false, Contrastive::Iicl),
            cell("fusion", false, true, Contrastive::Iicl),
            cell("both", true, true, Contrastive::Iicl),
        ],
        Suite::DecayOptions => (1..=3)
            .map(|i| CellSpec {
                name: format!("option{i}"),
                decay: true,
                fusion: true,
                contrastive: Contrastive::Iicl,
                option: DecayOption::from_index(i).expect("1..=3"),
            })
            .collect(),
    }
}

/// Applies a cell onto the base model configuration.
pub fn cell_model_cfg(base: &ModelConfig, cell: &CellSpec) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.decay_enabled = cell.decay;
    if !cell.decay {
        cfg.decay_order = (0, cfg.total_depth());
    }
    cfg.fusion_enabled = cell.fusion;
    cfg.decay_option = cell.option;
    cfg
}

#[derive(Debug)]
pub struct RunResult {
    pub cell: String,
    pub seed: u64,
    pub accuracy: f64,
    pub batch_order_hash: u64,
    pub checkpoint: Vec<u8>,
}

#[derive(Debug)]
pub struct SuiteResult {
    pub suite: Suite,
    pub cell_names: Vec<String>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
}

impl SuiteResult {
    pub fn accuracies(&self, cell: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|&s| {
                self.runs
                    .iter()
                    .find(|r| r.cell == cell && r.seed == s)
                    .map(|r| r.accuracy)
                    .expect("every (cell, seed) ran")
            })
            .collect()
    }

    pub fn mean_accuracy(&self, cell: &str) -> f64 {
        let accs = self.accuracies(cell);
        accs.iter().sum::<f64>() / accs.len() as f64
    }

    pub fn checkpoint(&self, cell: &str, seed: u64) -> Option<&[u8]> {
        self.runs
            .iter()
            .find(|r| r.cell == cell && r.seed == seed)
            .map(|r| r.checkpoint.as_slice())
    }

    /// Identical data order across cells is the controlled-experiment
    /// contract; per seed, every cell must log the same batch hash.
    pub fn verify_shared_order(&self) -> Result<()> {
        for &seed in &self.seeds {
            let hashes: Vec<u64> = self
                .runs
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| r.batch_order_hash)
                .collect();
            if hashes.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Input(format!(
                    "cells disagree on batch order for seed {seed}: {hashes:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## {} ablation", self.suite.name());
        let mut header = String::from("| cell |");
        let mut rule = String::from("|------|");
        for seed in &self.seeds {
            let _ = write!(header, " seed {seed} |");
            rule.push_str("--------|");
        }
        header.push_str(" mean |");
        rule.push_str("------|");
        let _ = writeln!(s, "{header}");
        let _ = writeln!(s, "{rule}");
        for cell in &self.cell_names {
            let _ = write!(s, "| {cell} |");
            for acc in self.accuracies(cell) {
                let _ = write!(s, " {acc:.4} |");
            }
            let _ = writeln!(s, " {:.4} |", self.mean_accuracy(cell));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,cell,seed,word_accuracy\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{},{}", self.suite.name(), r.cell, r.seed, r.accuracy);
        }
        s
    }

    pub fn batch_hash_log(&self) -> String {
        let mut s = String::from("cell,seed,batch_order_hash\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{:016x}", r.cell, r.seed, r.batch_order_hash);
        }
        s
    }
}

/// Trains every (cell, seed) on the shared datasets. Runs are independent
/// and fan out across threads; each one is internally deterministic.
pub fn run_suite(
    suite: Suite,
    base_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    base_lcfg: &LossConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    vocab: &Vocabulary,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<SuiteResult> {
    let cell_list = cells(suite);
    let mut jobs = Vec::new();
    for cell in &cell_list {
        for &seed in seeds {
            jobs.push((cell.clone(), seed));
        }
    }
    let runs: Result<Vec<RunResult>> = jobs
        .par_iter()
        .map(|(cell, seed)| {
            let cfg = cell_model_cfg(base_cfg, cell);
            let mut run_tcfg = tcfg.clone();
            run_tcfg.seed = *seed;
            let mut lcfg = base_lcfg.clone();
            lcfg.contrastive = cell.contrastive;
            let (model, outcome) = train(&cfg, &run_tcfg, &lcfg, train_ds, vocab, None)?;
            let report = evaluate(
                &model,
                &[("eval".to_string(), eval_ds)],
                vocab,
                false,
            )?;
            Ok(RunResult {
                cell: cell.name.clone(),
                seed: *seed,
                accuracy: report.wavg,
                batch_order_hash: outcome.batch_order_hash,
                checkpoint: outcome.checkpoint,
            })
        })
        .collect();
    let result = SuiteResult {
        suite,
        cell_names: cell_list.iter().map(|c| c.name.clone()).collect(),
        seeds: seeds.to_vec(),
        runs: runs?,
    };
    result.verify_shared_order()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.md", suite.name())), result.to_markdown())?;
        std::fs::write(dir.join(format!("{}.csv", suite.name())), result.to_csv())?;
        std::fs::write(
            dir.join(format!("{}_batch_hashes.csv", suite.name())),
            result.batch_hash_log(),
        )?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_have_expected_row_structure() {
        assert_eq!(cells(Suite::Components).len(), 4);
        assert_eq!(cells(Suite::Contrastive).len(), 3);
        assert_eq!(cells(Suite::CaceParts).len(), 4);
        assert_eq!(cells(Suite::DecayOptions).len(), 3);
        let comp = cells(Suite::Components);
        assert_eq!(comp[0].name, "baseline");
        assert!(!comp[0].decay && !comp[0].fusion);
        assert_eq!(comp[3].contrastive, Contrastive::Iicl);
    }

    #[test]
    fn disabled_decay_keeps_config_valid() {
        let base = ModelConfig::defaults();
        let cfg = cell_model_cfg(&base, &cells(Suite::Components)[0]);
        cfg.validate().unwrap();
        assert!(!cfg.decay_enabled);
        assert_eq!(cfg.decay_order, (0, base.total_depth()));
    }
}
