//! Procedural glyph corpus.
//!
//! Classes are stroke-path prototypes on a 3x3 lattice; rendering distorts
//! each glyph (anisotropic scale, shear, rotation, stroke-width and endpoint
//! jitter, per-stroke intensity, pixel noise) and rasterizes it into a
//! grayscale strip. Three designated class pairs share at least 70% of their
//! segments, so the corpus deliberately contains near-identical classes --
//! the confusions the recognizer is supposed to survive. Everything is a
//! pure function of (classes, seed), bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pgm;
use crate::vocab::Vocabulary;

/// One stroke: a line segment in lattice coordinates (0..=2 per axis).
pub type Segment = (u8, u8, u8, u8);

#[derive(Debug, Clone)]
pub struct GlyphClass {
    pub symbol: char,
    pub segments: Vec<Segment>,
}

/// Distortion parameter ranges at full strength; `level` in [0, 1] scales
/// every jitter linearly (level 0 renders the bare prototypes).
#[derive(Debug, Clone, Copy)]
pub struct DistortionRanges {
    pub scale_spread: f64,
    pub shear_max: f64,
    pub rot_max: f64,
    pub thickness_base: f64,
    pub thickness_spread: f64,
    pub pos_jitter: f64,
    pub kern_jitter: f64,
    pub endpoint_jitter: f64,
    pub intensity_drop: f64,
    pub noise_amp: f64,
}

impl Default for DistortionRanges {
    fn default() -> Self {
        DistortionRanges {
            scale_spread: 0.16,
            shear_max: 0.22,
            rot_max: 0.12,
            thickness_base: 1.8,
            thickness_spread: 0.5,
            pos_jitter: 1.5,
            kern_jitter: 1.2,
            endpoint_jitter: 0.8,
            intensity_drop: 0.25,
            noise_amp: 0.10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub classes: Vec<GlyphClass>,
    /// Index pairs designed to be confusable (>= 70% shared segments).
    pub confusable_pairs: Vec<(usize, usize)>,
    pub img_h: usize,
    pub img_w: usize,
    pub max_len: usize,
    pub train_count: usize,
    pub eval_count: usize,
    /// Distortion strength in [0, 1].
    pub level: f64,
    pub base_seed: u64,
    pub ranges: DistortionRanges,
}

/// Sixteen stroke-pattern classes 'A'..'P'. Pairs (A,B), (C,D), (E,F) are
/// the designated confusables.
pub fn desk_classes() -> (Vec<GlyphClass>, Vec<(usize, usize)>) {
    const LV: Segment = (0, 0, 0, 2);
    const RV: Segment = (2, 0, 2, 2);
    const CV: Segment = (1, 0, 1, 2);
    const TH: Segment = (0, 0, 2, 0);
    const CH: Segment = (0, 1, 2, 1);
    const BH: Segment = (0, 2, 2, 2);
    const D1: Segment = (0, 0, 2, 2);
    const D2: Segment = (0, 2, 2, 0);
    const LVT: Segment = (0, 0, 0, 1);
    const LVB: Segment = (0, 1, 0, 2);
    const RVB: Segment = (2, 1, 2, 2);
    const TAIL: Segment = (1, 1, 2, 2);
    // Only the designated pairs may differ by a single stroke; every other
    // pair needs at least a two-stroke edit so stroke dimming cannot bridge
    // them (checked by the segment-share and subset tests below).
    let defs: [(char, &[Segment]); 16] = [
        ('A', &[LV, TH, CH, BH]),             // E-shape
        ('B', &[LV, TH, CH]),                 // F-shape, pair of A
        ('C', &[LV, RV, TH, BH]),             // O-shape
        ('D', &[LV, RV, TH, BH, TAIL]),       // Q-shape, pair of C
        ('E', &[LV, RV, D1]),                 // N-shape
        ('F', &[LV, RV, D1, TH]),             // barred N, pair of E
        ('G', &[TH, CV]),                     // T
        ('H', &[LV, RV, CH]),                 // H-shape
        ('I', &[D1, D2]),                     // X
        ('J', &[TH, D2, BH]),                 // Z
        ('K', &[(0, 0, 1, 2), (1, 2, 2, 0)]), // V
        ('L', &[LV, RV, (0, 0, 1, 1), (1, 1, 2, 0)]), // M-shape
        ('M', &[TH, LVT, CH, RVB, BH]),       // S
        ('N', &[LV, (0, 1, 2, 0), (0, 1, 2, 2)]), // K-shape
        ('O', &[CV, CH]),                     // plus
        ('P', &[CV, BH, LVB]),                // J-shape
    ];
    let classes = defs
        .iter()
        .map(|(symbol, segs)| GlyphClass { symbol: *symbol, segments: segs.to_vec() })
        .collect();
    (classes, vec![(0, 1), (2, 3), (4, 5)])
}

impl CorpusSpec {
    /// The standard desk corpus: 16 classes, 32x64 strips, labels up to 5
    /// characters, full distortion.
    pub fn desk_default() -> CorpusSpec {
        let (classes, confusable_pairs) = desk_classes();
        CorpusSpec {
            classes,
            confusable_pairs,
            img_h: 32,
            img_w: 64,
            max_len: 5,
            train_count: 8000,
            eval_count: 1000,
            level: 1.0,
            base_seed: 42,
            ranges: DistortionRanges::default(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let symbols: Vec<char> = self.classes.iter().map(|c| c.symbol).collect();
        Vocabulary::new(&symbols)
    }

    /// Fraction of shared segments (intersection over union).
    pub fn segment_share(&self, a: usize, b: usize) -> f64 {
        let sa: std::collections::BTreeSet<Segment> =
            self.classes[a].segments.iter().copied().collect();
        let sb: std::collections::BTreeSet<Segment> =
            self.classes[b].segments.iter().copied().collect();
        let inter = sa.intersection(&sb).count();
        let union = sa.union(&sb).count();
        inter as f64 / union as f64
    }

    fn slot_width(&self) -> f64 {
        (self.img_w as f64 - 2.0 * MARGIN) / self.max_len as f64
    }

    fn echo_flat(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format.version = cfe-corpus/1");
        let symbols: String = self.classes.iter().map(|c| c.symbol).collect();
        let _ = writeln!(s, "corpus.classes = {symbols}");
        let pairs: Vec<String> = self
            .confusable_pairs
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect();
        let _ = writeln!(s, "corpus.confusable_pairs = {}", pairs.join(","));
        let _ = writeln!(s, "corpus.img_h = {}", self.img_h);
        let _ = writeln!(s, "corpus.img_w = {}", self.img_w);
        let _ = writeln!(s, "corpus.max_len = {}", self.max_len);
        let _ = writeln!(s, "corpus.train_count = {}", self.train_count);
        let _ = writeln!(s, "corpus.eval_count = {}", self.eval_count);
        let _ = writeln!(s, "corpus.level = {}", self.level);
        let _ = writeln!(s, "corpus.base_seed = {}", self.base_seed);
        s
    }
}

const MARGIN: f64 = 2.0;
const LABEL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const EVAL_SEED_OFFSET: u64 = 1 << 32;

/// Per-character applied distortion, recorded for reproducibility checks.
#[derive(Debug, Clone)]
pub struct CharDistortion {
    pub scale_x: f64,
    pub scale_y: f64,
    pub shear: f64,
    pub rotation: f64,
    pub thickness: f64,
    pub dx: f64,
    pub dy: f64,
    pub advance: f64,
    pub intensities: Vec<f64>,
    pub endpoint_jitter: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GlyphSample {
    pub classes: Vec<usize>,
    pub text: String,
    pub seed: u64,
    /// Quantized pixels, row-major, `img_h * img_w`.
    pub bytes: Vec<u8>,
    pub distortion: Vec<CharDistortion>,
    pub noise_amp: f64,
}

impl GlyphSample {
    pub fn pixels_f64(&self) -> Vec<f64> {
        pgm::bytes_to_f64(&self.bytes)
    }
}

fn dist_to_segment(px: f64, py: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let (vx, vy) = (x2 - x1, y2 - y1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - x1) * vx + (py - y1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (x1 + t * vx, y1 + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders a glyph sequence. Pure function of (classes, seed, spec).
pub fn render_sample(classes: &[usize], seed: u64, spec: &CorpusSpec) -> Result<GlyphSample> {
    for &c in classes {
        if c >= spec.classes.len() {
            return Err(Error::Input(format!(
                "class index {c} out of range 0..{}",
                spec.classes.len()
            )));
        }
    }
    let slot = spec.slot_width();
    if classes.len() as f64 * slot + 2.0 * MARGIN > spec.img_w as f64 + 1e-9 {
        return Err(Error::Layout(format!(
            "{} glyphs at slot width {slot:.1} exceed image width {}",
            classes.len(),
            spec.img_w
        )));
    }
    let lvl = spec.level;
    let r = &spec.ranges;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let glyph_h = spec.img_h as f64 * 0.62;
    let glyph_w = (slot - 2.0).max(3.0);
    let cy_base = spec.img_h as f64 / 2.0;

    let mut field = vec![0.0f64; spec.img_h * spec.img_w];
    let mut cursor = MARGIN + slot / 2.0;
    let mut distortions = Vec::with_capacity(classes.len());
    for &cls in classes {
        let proto = &spec.classes[cls];
        let scale_x = 1.0 + lvl * r.scale_spread * rng.gen_range(-1.0..1.0);
        let scale_y = 1.0 + lvl * r.scale_spread * rng.gen_range(-1.0..1.0);
        let shear = lvl * r.shear_max * rng.gen_range(-1.0..1.0);
        let rotation = lvl * r.rot_max * rng.gen_range(-1.0..1.0);
        let thickness =
            (r.thickness_base + lvl * r.thickness_spread * rng.gen_range(-1.0..1.0)).max(0.6);
        let dx = lvl * r.pos_jitter * rng.gen_range(-1.0..1.0);
        let dy = lvl * r.pos_jitter * rng.gen_range(-1.0..1.0);
        let advance = slot + lvl * r.kern_jitter * rng.gen_range(-1.0..1.0);
        let mut intensities = Vec::with_capacity(proto.segments.len());
        let mut endpoint_jitter = Vec::with_capacity(proto.segments.len() * 2);
        for _ in &proto.segments {
            intensities.push(1.0 - lvl * r.intensity_drop * rng.gen_range(0.0..1.0));
            for _ in 0..2 {
                endpoint_jitter.push((
                    lvl * r.endpoint_jitter * rng.gen_range(-1.0..1.0),
                    lvl * r.endpoint_jitter * rng.gen_range(-1.0..1.0),
                ));
            }
        }

        let (sin_r, cos_r) = rotation.sin_cos();
        let cx = cursor + dx;
        let cy = cy_base + dy;
        // lattice (0..=2) -> centered unit -> distorted -> image pixels
        let map = |gx: u8, gy: u8, jitter: (f64, f64)| -> (f64, f64) {
            let u = (gx as f64 / 2.0 - 0.5) * scale_x;
            let v = (gy as f64 / 2.0 - 0.5) * scale_y;
            let u = u + shear * v;
            let (ru, rv) = (u * cos_r - v * sin_r, u * sin_r + v * cos_r);
            (cx + ru * glyph_w + jitter.0, cy + rv * glyph_h + jitter.1)
        };
        for (si, seg) in proto.segments.iter().enumerate() {
            let p1 = map(seg.0, seg.1, endpoint_jitter[2 * si]);
            let p2 = map(seg.2, seg.3, endpoint_jitter[2 * si + 1]);
            let intensity = intensities[si];
            // rasterize within the segment's bounding box plus the stroke
            let pad = thickness / 2.0 + 1.5;
            let x_lo = (p1.0.min(p2.0) - pad).floor().max(0.0) as usize;
            let x_hi = ((p1.0.max(p2.0) + pad).ceil() as usize).min(spec.img_w - 1);
            let y_lo = (p1.1.min(p2.1) - pad).floor().max(0.0) as usize;
            let y_hi = ((p1.1.max(p2.1) + pad).ceil() as usize).min(spec.img_h - 1);
            for py in y_lo..=y_hi {
                for px in x_lo..=x_hi {
                    let d = dist_to_segment(
                        px as f64 + 0.5,
                        py as f64 + 0.5,
                        p1.0,
                        p1.1,
                        p2.0,
                        p2.1,
                    );
                    let cov = ((thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0)) * intensity;
                    let slot_ref = &mut field[py * spec.img_w + px];
                    if cov > *slot_ref {
                        *slot_ref = cov;
                    }
                }
            }
        }
        distortions.push(CharDistortion {
            scale_x,
            scale_y,
            shear,
            rotation,
            thickness,
            dx,
            dy,
            advance,
            intensities,
            endpoint_jitter,
        });
        cursor += advance;
    }
    let noise_amp = lvl * r.noise_amp;
    if noise_amp > 0.0 {
        for v in field.iter_mut() {
            *v = (*v + noise_amp * rng.gen_range(0.0..1.0)).min(1.0);
        }
    }
    let text: String = classes.iter().map(|&c| spec.classes[c].symbol).collect();
    Ok(GlyphSample {
        classes: classes.to_vec(),
        text,
        seed,
        bytes: pgm::f64_to_bytes(&field),
        distortion: distortions,
        noise_amp,
    })
}

/// Class-balanced character stream: every block of `k` draws is a fresh
/// shuffled permutation of the `k` classes, so long-run class counts stay
/// within one block of exactly uniform.
struct BalancedStream {
    rng: ChaCha8Rng,
    buf: Vec<usize>,
    k: usize,
}

impl BalancedStream {
    fn new(seed: u64, k: usize) -> BalancedStream {
        BalancedStream { rng: ChaCha8Rng::seed_from_u64(seed), buf: Vec::new(), k }
    }

    fn next(&mut self) -> usize {
        if self.buf.is_empty() {
            self.buf = (0..self.k).collect();
            // Fisher-Yates, drawing from the stream rng
            for i in (1..self.k).rev() {
                let j = self.rng.gen_range(0..=i);
                self.buf.swap(i, j);
            }
        }
        self.buf.pop().expect("refilled above")
    }
}

/// Labels for a whole split: per-sample lengths come from the sample seed,
/// characters from the split's balanced stream.
pub fn draw_labels(spec: &CorpusSpec, split: Split) -> Vec<Vec<usize>> {
    let mut stream = BalancedStream::new(
        spec.base_seed ^ LABEL_SALT ^ (split as u64 + 1),
        spec.classes.len(),
    );
    let n = split.count(spec);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let seed = sample_seed(spec, split, i);
        let mut len_rng = ChaCha8Rng::seed_from_u64(seed ^ LABEL_SALT);
        let len = len_rng.gen_range(1..=spec.max_len);
        out.push((0..len).map(|_| stream.next()).collect());
    }
    out
}

pub fn sample_seed(spec: &CorpusSpec, split: Split, index: usize) -> u64 {
    match split {
        Split::Train => spec.base_seed + index as u64,
        Split::Eval => spec.base_seed + EVAL_SEED_OFFSET + index as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
    pub fn count(&self, spec: &CorpusSpec) -> usize {
        match self {
            Split::Train => spec.train_count,
            Split::Eval => spec.eval_count,
        }
    }
}

/// Generates one split in memory. Labels come from the split's balanced
/// stream; rendering fans out across threads (each sample is a pure function
/// of its classes and seed).
pub fn generate_split(spec: &CorpusSpec, split: Split) -> Result<Vec<GlyphSample>> {
    assert!((spec.train_count as u64) < EVAL_SEED_OFFSET, "split seed ranges overlap");
    use rayon::prelude::*;
    let labels = draw_labels(spec, split);
    labels
        .par_iter()
        .enumerate()
        .map(|(i, classes)| render_sample(classes, sample_seed(spec, split, i), spec))
        .collect()
}

/// Writes the full corpus: `manifest.txt`, and per split an `index.txt`
/// plus `images/NNNNNN.pgm`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<CorpusManifest> {
    let mut class_counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut totals = BTreeMap::new();
    for split in [Split::Train, Split::Eval] {
        let dir = out_dir.join(split.dir_name());
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir)?;
        let samples = generate_split(spec, split)?;
        let mut index = String::new();
        for (i, s) in samples.iter().enumerate() {
            let file = format!("images/{i:06}.pgm");
            pgm::write_file(&dir.join(&file), spec.img_w, spec.img_h, &s.bytes)?;
            let _ = writeln!(index, "{i:06}\t{}\t{}\t{file}", s.text, s.seed);
            for ch in s.text.chars() {
                *class_counts.entry(ch).or_insert(0) += 1;
            }
        }
        std::fs::write(dir.join("index.txt"), index)?;
        totals.insert(split.dir_name().to_string(), samples.len());
    }
    let manifest = CorpusManifest {
        totals,
        class_counts,
        spec_echo: spec.echo_flat(),
    };
    std::fs::write(out_dir.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub totals: BTreeMap<String, usize>,
    pub class_counts: BTreeMap<char, usize>,
    pub spec_echo: String,
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let mut s = self.spec_echo.clone();
        for (split, n) in &self.totals {
            let _ = writeln!(s, "count.{split} = {n}");
        }
        for (ch, n) in &self.class_counts {
            let _ = writeln!(s, "count.class.{ch} = {n}");
        }
        s
    }
}

/// A sample loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub text: String,
    pub seed: u64,
    pub bytes: Vec<u8>,
}

pub fn load_split(corpus_dir: &Path, split: &str) -> Result<Vec<LoadedSample>> {
    let dir = corpus_dir.join(split);
    let index = std::fs::read_to_string(dir.join("index.txt")).map_err(|e| {
        Error::Input(format!("cannot read split index {:?}: {e}", dir.join("index.txt")))
    })?;
    let mut out = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Input(format!(
                "index line {} has {} fields, expected 4",
                lineno + 1,
                fields.len()
            )));
        }
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| Error::Input(format!("bad seed on index line {}", lineno + 1)))?;
        let (_, _, bytes) = pgm::read_file(&dir.join(fields[3]))?;
        out.push(LoadedSample {
            id: fields[0].to_string(),
            text: fields[1].to_string(),
            seed,
            bytes,
        });
    }
    if out.is_empty() {
        return Err(Error::Input(format!("split {split:?} is empty")));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// template-correlation oracle
// ---------------------------------------------------------------------------

/// Undistorted single-glyph rasters used as a fixed, model-free classifier
/// for corpus calibration.
pub struct TemplateOracle {
    templates: Vec<Vec<f64>>,
    img_h: usize,
    img_w: usize,
    shift: i64,
}

impl TemplateOracle {
    pub fn build(spec: &CorpusSpec) -> Result<TemplateOracle> {
        let mut clean = spec.clone();
        clean.level = 0.0;
        let mut templates = Vec::with_capacity(spec.classes.len());
        for c in 0..spec.classes.len() {
            let s = render_sample(&[c], 0, &clean)?;
            templates.push(s.pixels_f64());
        }
        Ok(TemplateOracle {
            templates,
            img_h: spec.img_h,
            img_w: spec.img_w,
            shift: 3,
        })
    }

    fn ncc(&self, img: &[f64], template: &[f64], dx: i64, dy: i64) -> f64 {
        let (h, w) = (self.img_h as i64, self.img_w as i64);
        let mut sa = 0.0;
        let mut sb = 0.0;
        let mut n = 0usize;
        // compare on the overlap of the shifted template
        for y in 0..h {
            let ty = y - dy;
            if ty < 0 || ty >= h {
                continue;
            }
            for x in 0..w {
                let tx = x - dx;
                if tx < 0 || tx >= w {
                    continue;
                }
                sa += img[(y * w + x) as usize];
                sb += template[(ty * w + tx) as usize];
                n += 1;
            }
        }
        if n == 0 {
            return -1.0;
        }
        let (ma, mb) = (sa / n as f64, sb / n as f64);
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for y in 0..h {
            let ty = y - dy;
            if ty < 0 || ty >= h {
                continue;
            }
            for x in 0..w {
                let tx = x - dx;
                if tx < 0 || tx >= w {
                    continue;
                }
                let a = img[(y * w + x) as usize] - ma;
                let b = template[(ty * w + tx) as usize] - mb;
                cov += a * b;
                va += a * a;
                vb += b * b;
            }
        }
        if va <= 0.0 || vb <= 0.0 {
            return -1.0;
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    /// Best correlation over small shifts, per class.
    pub fn scores(&self, img: &[f64]) -> Vec<f64> {
        self.templates
            .iter()
            .map(|t| {
                let mut best = -1.0f64;
                for dy in -self.shift..=self.shift {
                    for dx in -self.shift..=self.shift {
                        best = best.max(self.ncc(img, t, dx, dy));
                    }
                }
                best
            })
            .collect()
    }

    pub fn classify(&self, img: &[f64]) -> usize {
        let scores = self.scores(img);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Confusion statistics of the template oracle over freshly rendered
/// single-glyph samples, used by the calibration checks.
pub struct OracleStats {
    pub accuracy: f64,
    /// `confusion[i][j]`: fraction of class-i samples ranked as class j.
    pub confusion: Vec<Vec<f64>>,
}

pub fn oracle_stats(spec: &CorpusSpec, per_class: usize, seed_salt: u64) -> Result<OracleStats> {
    let oracle = TemplateOracle::build(spec)?;
    let k = spec.classes.len();
    let mut confusion = vec![vec![0.0; k]; k];
    let mut correct = 0usize;
    for cls in 0..k {
        for i in 0..per_class {
            let seed = spec.base_seed ^ seed_salt ^ ((cls * per_class + i) as u64) << 8;
            let s = render_sample(&[cls], seed, spec)?;
            let pred = oracle.classify(&s.pixels_f64());
            confusion[cls][pred] += 1.0;
            if pred == cls {
                correct += 1;
            }
        }
        for v in confusion[cls].iter_mut() {
            *v /= per_class as f64;
        }
    }
    Ok(OracleStats {
        accuracy: correct as f64 / (k * per_class) as f64,
        confusion,
    })
}
