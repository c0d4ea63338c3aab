//! Evaluation: greedy decoding, exact-match word accuracy, per-class
//! character accuracy, and sample-weighted aggregation across splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::Dataset;
use crate::vocab::{fold_case_36, Vocabulary};

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub name: String,
    pub samples: usize,
    pub correct: usize,
    pub word_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ClassAccuracy {
    pub symbol: char,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub splits: Vec<SplitResult>,
    /// Sample-count-weighted mean of split accuracies.
    pub wavg: f64,
    pub per_class: Vec<ClassAccuracy>,
}

/// Weighted average over (sample count, accuracy) pairs.
pub fn wavg(parts: &[(usize, f64)]) -> f64 {
    let total: usize = parts.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return 0.0;
    }
    parts.iter().map(|(n, a)| *n as f64 * a).sum::<f64>() / total as f64
}

/// Greedy-decodes every split and scores exact matches. `fold36` lowercases
/// and strips non-alphanumerics on both sides before comparing.
pub fn evaluate(
    model: &Model,
    splits: &[(String, &Dataset)],
    vocab: &Vocabulary,
    fold36: bool,
) -> Result<MetricsReport> {
    if splits.is_empty() || splits.iter().any(|(_, d)| d.is_empty()) {
        return Err(Error::Input("evaluation needs at least one non-empty split".into()));
    }
    let mut split_results = Vec::new();
    let mut class_stats: BTreeMap<char, (usize, usize)> = BTreeMap::new();
    for (name, ds) in splits {
        let mut correct = 0usize;
        let bs = 64usize;
        let mut idx = 0usize;
        while idx < ds.len() {
            let hi = (idx + bs).min(ds.len());
            let indices: Vec<usize> = (idx..hi).collect();
            let (images, _) = ds.batch(&indices);
            let words = model.recognize(&images, vocab)?;
            for (w, &i) in words.iter().zip(&indices) {
                let label = &ds.texts[i];
                let (pred_cmp, label_cmp) = if fold36 {
                    (fold_case_36(w), fold_case_36(label))
                } else {
                    (w.clone(), label.clone())
                };
                if pred_cmp == label_cmp {
                    correct += 1;
                }
                // per-class character accuracy, position aligned
                let pred_chars: Vec<char> = pred_cmp.chars().collect();
                for (pos, lc) in label_cmp.chars().enumerate() {
                    let entry = class_stats.entry(lc).or_insert((0, 0));
                    entry.1 += 1;
                    if pred_chars.get(pos) == Some(&lc) {
                        entry.0 += 1;
                    }
                }
            }
            idx = hi;
        }
        split_results.push(SplitResult {
            name: name.clone(),
            samples: ds.len(),
            correct,
            word_accuracy: correct as f64 / ds.len() as f64,
        });
    }
    let wavg_val = wavg(
        &split_results
            .iter()
            .map(|s| (s.samples, s.word_accuracy))
            .collect::<Vec<_>>(),
    );
    let per_class = class_stats
        .into_iter()
        .map(|(symbol, (correct, total))| ClassAccuracy { symbol, correct, total })
        .collect();
    Ok(MetricsReport { splits: split_results, wavg: wavg_val, per_class })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,samples,correct,word_accuracy\n");
        for r in &self.splits {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.samples, r.correct, r.word_accuracy);
        }
        let _ = writeln!(s, "wavg,,,{}", self.wavg);
        s
    }

    pub fn class_csv(&self) -> String {
        let mut s = String::from("class,correct,total,char_accuracy\n");
        for c in &self.per_class {
            let acc = if c.total > 0 { c.correct as f64 / c.total as f64 } else { 0.0 };
            let _ = writeln!(s, "{},{},{},{}", c.symbol, c.correct, c.total, acc);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.splits {
            let _ = writeln!(
                s,
                "split {:<12} {:>6} samples  word accuracy {:.4}",
                r.name, r.samples, r.word_accuracy
            );
        }
        let _ = writeln!(s, "WAVG {:.4}", self.wavg);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wavg_is_sample_weighted() {
        assert!((wavg(&[(100, 0.5), (300, 1.0)]) - 0.875).abs() < 1e-12);
        assert_eq!(wavg(&[]), 0.0);
    }
}
