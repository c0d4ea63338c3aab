//! Quantitative diagnostics: attention locality, feature-space cluster
//! separation, and attention heatmap export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoder::AttnRecord;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pgm;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::Dataset;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone)]
pub struct LocalityRecord {
    pub stage: usize,
    pub block_in_stage: usize,
    pub global_index: usize,
    pub head: usize,
    pub decayed: bool,
    /// Mean attention-weighted Chebyshev distance (rows renormalized).
    pub locality: f64,
}

/// Locality of one attention map `[B, heads, L, L]` on its grid: for every
/// query, the attention-mass-weighted Chebyshev distance to the keys. Rows
/// are renormalized by their mass first, so attenuated (post-decay) rows
/// compare on where the mass sits rather than how much survived.
pub fn locality_of(record: &AttnRecord) -> Vec<f64> {
    let shape = record.probs.shape();
    let (b, heads, l) = (shape[0], shape[1], shape[2]);
    let data = record.probs.data();
    let mut out = Vec::with_capacity(heads);
    // distance table once per record
    let mut dist = vec![0.0f64; l * l];
    for i in 0..l {
        for j in 0..l {
            dist[i * l + j] = record.grid.chebyshev(i, j) as f64;
        }
    }
    for h in 0..heads {
        let mut total = 0.0;
        let mut queries = 0usize;
        for bi in 0..b {
            let base = (bi * heads + h) * l * l;
            for i in 0..l {
                let row = &data[base + i * l..base + (i + 1) * l];
                let mass: f64 = row.iter().sum();
                if mass <= 0.0 {
                    continue;
                }
                let d: f64 = row
                    .iter()
                    .zip(&dist[i * l..(i + 1) * l])
                    .map(|(a, d)| a * d)
                    .sum();
                total += d / mass;
                queries += 1;
            }
        }
        out.push(total / queries.max(1) as f64);
    }
    out
}

/// Runs the encoder with attention capture and reports per-(block, head)
/// locality.
pub fn attention_locality(model: &Model, images: &Tensor) -> Result<Vec<LocalityRecord>> {
    let tape = Tape::no_grad();
    let encoded = model.encoder.forward(&tape, images, true)?;
    let mut out = Vec::new();
    for rec in &encoded.attention {
        for (head, loc) in locality_of(rec).into_iter().enumerate() {
            out.push(LocalityRecord {
                stage: rec.stage,
                block_in_stage: rec.block_in_stage,
                global_index: rec.global_index,
                head,
                decayed: rec.decayed,
                locality: loc,
            });
        }
    }
    Ok(out)
}

/// Fraction of a query row's attention mass that falls inside the
/// (+-w, +-h) grid window around the query token.
pub fn window_mass(record: &AttnRecord, batch: usize, head: usize, query: usize, w: usize, h: usize) -> f64 {
    let shape = record.probs.shape();
    let (heads, l) = (shape[1], shape[2]);
    let data = record.probs.data();
    let base = (batch * heads + head) * l * l + query * l;
    let row = &data[base..base + l];
    let (qx, qy) = record.grid.coords(query);
    let mut inside = 0.0;
    let mut total = 0.0;
    for (j, &a) in row.iter().enumerate() {
        let (x, y) = record.grid.coords(j);
        total += a;
        if x.abs_diff(qx) <= w && y.abs_diff(qy) <= h {
            inside += a;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct ClassCluster {
    pub symbol: char,
    pub count: usize,
    /// Mean distance of member features to the class mean.
    pub intra: f64,
    /// Distance from the class mean to the nearest other class mean.
    pub inter: f64,
}

#[derive(Debug, Clone)]
pub struct ClusterReport {
    pub classes: Vec<ClassCluster>,
    /// Mean of intra/inter over classes with inter > 0.
    pub mean_ratio: f64,
    /// Class pairs whose means coincide (inter == 0).
    pub flagged: Vec<(char, char)>,
    /// Classes with fewer than 2 samples, skipped from the ratio.
    pub skipped: Vec<char>,
    /// Fraction of characters closer to their own memory unit than to any
    /// other (only for models with a bank).
    pub own_unit_fraction: Option<f64>,
    /// Raw features for external projection: (symbol, feature vector).
    pub features: Vec<(char, Vec<f64>)>,
}

/// Teacher-forced features at real character positions (EOS and pads
/// excluded), clustered per class.
pub fn cluster_metrics(
    model: &Model,
    dataset: &Dataset,
    vocab: &Vocabulary,
) -> Result<ClusterReport> {
    if dataset.is_empty() {
        return Err(Error::Input("cluster metrics over an empty split".into()));
    }
    let c = model.cfg.fused_width;
    let mut features: Vec<(usize, Vec<f64>)> = Vec::new();
    let bs = 64usize;
    let mut idx = 0usize;
    while idx < dataset.len() {
        let hi = (idx + bs).min(dataset.len());
        let indices: Vec<usize> = (idx..hi).collect();
        let (images, targets) = dataset.batch(&indices);
        let tape = Tape::no_grad();
        let fwd = model.forward_train(&tape, &images, &targets, vocab, false)?;
        let fd = fwd.decode.features.data();
        let t = model.cfg.max_label_len;
        for (bi, target) in targets.iter().enumerate() {
            for (pos, &id) in target.iter().enumerate() {
                if id < vocab.num_symbols() {
                    let base = (bi * t + pos) * c;
                    features.push((id, fd[base..base + c].to_vec()));
                }
            }
        }
        idx = hi;
    }

    let k = vocab.num_symbols();
    let mut sums = vec![vec![0.0; c]; k];
    let mut counts = vec![0usize; k];
    for (id, f) in &features {
        counts[*id] += 1;
        for (s, v) in sums[*id].iter_mut().zip(f) {
            *s += v;
        }
    }
    let means: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.iter().map(|v| v / n as f64).collect()))
        .collect();

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };

    let mut classes = Vec::new();
    let mut skipped = Vec::new();
    let mut flagged = Vec::new();
    let mut ratios = Vec::new();
    for id in 0..k {
        let symbol = vocab.char_of(id).expect("symbol ids");
        if counts[id] < 2 {
            skipped.push(symbol);
            continue;
        }
        let mean = means[id].as_ref().expect("counted above");
        let mut intra = 0.0;
        for (fid, f) in &features {
            if *fid == id {
                intra += dist(f, mean);
            }
        }
        intra /= counts[id] as f64;
        let mut inter = f64::INFINITY;
        let mut nearest = symbol;
        for other in 0..k {
            if other == id {
                continue;
            }
            if let Some(om) = &means[other] {
                let d = dist(mean, om);
                if d < inter {
                    inter = d;
                    nearest = vocab.char_of(other).expect("symbol ids");
                }
            }
        }
        if inter == 0.0 {
            flagged.push((symbol, nearest));
        } else if inter.is_finite() {
            ratios.push(intra / inter);
        }
        classes.push(ClassCluster { symbol, count: counts[id], intra, inter });
    }
    let mean_ratio = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };

    let own_unit_fraction = model.bank.as_ref().map(|bank| {
        let ud = bank.units.data();
        let mut own = 0usize;
        for (id, f) in &features {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for u in 0..bank.vocab_size {
                let d: f64 = f
                    .iter()
                    .zip(&ud[u * c..(u + 1) * c])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = u;
                }
            }
            if best == *id {
                own += 1;
            }
        }
        own as f64 / features.len().max(1) as f64
    });

    let features_out = features
        .into_iter()
        .map(|(id, f)| (vocab.char_of(id).expect("symbol ids"), f))
        .collect();
    Ok(ClusterReport {
        classes,
        mean_ratio,
        flagged,
        skipped,
        own_unit_fraction,
        features: features_out,
    })
}

impl ClusterReport {
    pub fn features_csv(&self) -> String {
        let dim = self.features.first().map(|(_, f)| f.len()).unwrap_or(0);
        let mut s = String::from("class");
        for i in 0..dim {
            let _ = write!(s, ",f{i}");
        }
        s.push('\n');
        for (symbol, f) in &self.features {
            let _ = write!(s, "{symbol}");
            for v in f {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "class  count  intra      inter      ratio");
        for c in &self.classes {
            let ratio = if c.inter > 0.0 { c.intra / c.inter } else { f64::NAN };
            let _ = writeln!(
                s,
                "{:>5} {:>6}  {:>9.4}  {:>9.4}  {:>7.4}",
                c.symbol, c.count, c.intra, c.inter, ratio
            );
        }
        let _ = writeln!(s, "mean intra/inter ratio: {:.4}", self.mean_ratio);
        if let Some(f) = self.own_unit_fraction {
            let _ = writeln!(s, "characters nearest own memory unit: {:.4}", f);
        }
        if !self.flagged.is_empty() {
            let _ = writeln!(s, "degenerate pairs (coinciding means): {:?}", self.flagged);
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "skipped (fewer than 2 samples): {:?}", self.skipped);
        }
        s
    }
}

/// Dumps one query row of every (block, head) of a stage as PGM heatmaps
/// (min-max scaled to 0..255, image dims = the stage grid).
pub fn dump_attention(
    model: &Model,
    image: &Tensor,
    stage: usize,
    query: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !(1..=3).contains(&stage) {
        return Err(Error::Input(format!("stage must be 1..=3, got {stage}")));
    }
    let tape = Tape::no_grad();
    let encoded = model.encoder.forward(&tape, image, true)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for rec in encoded.attention.iter().filter(|r| r.stage == stage) {
        let l = rec.grid.len();
        if query >= l {
            return Err(Error::Input(format!(
                "query index {query} out of range for stage {stage} with {l} tokens"
            )));
        }
        let shape = rec.probs.shape();
        let heads = shape[1];
        let data = rec.probs.data();
        for head in 0..heads {
            let base = head * l * l + query * l;
            let row = &data[base..base + l];
            let bytes = pgm::scale_to_bytes(row);
            let path = out_dir.join(format!(
                "stage{}_block{}_head{}.pgm",
                stage, rec.block_in_stage, head
            ));
            pgm::write_file(&path, rec.grid.width, rec.grid.height, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TokenGrid;

    fn record_with(probs: Tensor, grid: TokenGrid) -> AttnRecord {
        AttnRecord {
            stage: 1,
            block_in_stage: 1,
            global_index: 1,
            decayed: false,
            grid,
            probs,
        }
    }

    #[test]
    fn identity_attention_has_zero_locality() {
        let l = 4;
        let mut data = vec![0.0; l * l];
        for i in 0..l {
            data[i * l + i] = 1.0;
        }
        let rec = record_with(
            Tensor::from_vec(vec![1, 1, l, l], data).unwrap(),
            TokenGrid::new(2, 2),
        );
        assert_eq!(locality_of(&rec), vec![0.0]);
    }

    #[test]
    fn uniform_attention_on_2x2_grid_gives_three_quarters() {
        let l = 4;
        let rec = record_with(
            Tensor::full(vec![1, 1, l, l], 0.25),
            TokenGrid::new(2, 2),
        );
        let loc = locality_of(&rec)[0];
        assert!((loc - 0.75).abs() < 1e-12, "got {loc}");
    }

    #[test]
    fn window_mass_of_identity_is_one() {
        let l = 6;
        let mut data = vec![0.0; l * l];
        for i in 0..l {
            data[i * l + i] = 0.5; // attenuated but all inside the window
        }
        let rec = record_with(
            Tensor::from_vec(vec![1, 1, l, l], data).unwrap(),
            TokenGrid::new(2, 3),
        );
        assert_eq!(window_mass(&rec, 0, 0, 2, 1, 1), 1.0);
    }
}
