//! Model/run configuration: named variants, validation, and the flat
//! `section.key = value` config-file format used by the CLI.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::decay::DecayOption;
use crate::error::{Error, Result};

/// How attention logits are scaled before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    /// 1/sqrt(d_head) — the default.
    SqrtD,
    /// 1/d_head — the literal written form.
    D,
}

impl ScaleMode {
    pub fn parse(s: &str) -> Result<ScaleMode> {
        match s {
            "sqrt_d" => Ok(ScaleMode::SqrtD),
            "d" => Ok(ScaleMode::D),
            other => Err(Error::config(format!(
                "attn.scale_mode must be sqrt_d or d, got {other:?}"
            ))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            ScaleMode::SqrtD => "sqrt_d",
            ScaleMode::D => "d",
        }
    }
}

/// Encoder/decoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: String,
    pub stage_widths: [usize; 3],
    pub stage_depths: [usize; 3],
    pub stage_heads: [usize; 3],
    /// Shared width after multi-scale fusion.
    pub fused_width: usize,
    /// (x, y): the first x blocks (global numbering) apply the decay matrix,
    /// the last y do not.
    pub decay_order: (usize, usize),
    pub mlp_ratio: usize,
    /// Input image extents (height, width).
    pub input: (usize, usize),
    pub decoder_layers: usize,
    /// Maximum label length (with terminator), a.k.a. T.
    pub max_label_len: usize,
    pub vocab_size: usize,
    pub scale_mode: ScaleMode,
    pub decay_option: DecayOption,
    /// Window half-extents for decay option 3.
    pub decay_window: (usize, usize),
    /// Explicit per-head gammas; when empty the standard schedule applies.
    /// A single value is shared across all heads of every stage.
    pub decay_gammas: Vec<f64>,
    /// Rotary base frequency.
    pub pos_base_freq: f64,
    /// false disables decay matrices entirely (equivalent to order (0, N)).
    pub decay_enabled: bool,
    /// false bypasses multi-scale fusion: the decoder reads projected F3 only.
    pub fusion_enabled: bool,
}

impl ModelConfig {
    /// Named variants. `tiny`/`small`/`base` follow the published tables with
    /// a 32x128 input; `desk` is the small-footprint configuration the test
    /// corpus trains in minutes on a CPU.
    pub fn variant(name: &str) -> Result<ModelConfig> {
        let mut cfg = match name {
            "tiny" => ModelConfig {
                variant: "tiny".into(),
                stage_widths: [64, 128, 256],
                stage_depths: [3, 6, 3],
                stage_heads: [2, 4, 8],
                fused_width: 128,
                decay_order: (6, 6),
                input: (32, 128),
                max_label_len: 25,
                vocab_size: 96,
                ..ModelConfig::defaults()
            },
            "small" => ModelConfig {
                variant: "small".into(),
                stage_widths: [96, 192, 256],
                stage_depths: [3, 6, 6],
                stage_heads: [3, 6, 8],
                fused_width: 192,
                decay_order: (8, 7),
                input: (32, 128),
                max_label_len: 25,
                vocab_size: 96,
                ..ModelConfig::defaults()
            },
            "base" => ModelConfig {
                variant: "base".into(),
                stage_widths: [128, 256, 384],
                stage_depths: [3, 6, 9],
                stage_heads: [4, 8, 12],
                fused_width: 256,
                decay_order: (8, 10),
                input: (32, 128),
                max_label_len: 25,
                vocab_size: 96,
                ..ModelConfig::defaults()
            },
            "desk" => ModelConfig::defaults(),
            other => {
                return Err(Error::config(format!(
                    "unknown model.variant {other:?} (expected tiny|small|base|desk)"
                )))
            }
        };
        cfg.validate()?;
        let _ = &mut cfg;
        Ok(cfg)
    }

    /// The desk variant: what the synthetic-corpus experiments run.
    pub fn defaults() -> ModelConfig {
        ModelConfig {
            variant: "desk".into(),
            stage_widths: [32, 64, 96],
            stage_depths: [1, 2, 1],
            stage_heads: [2, 4, 8],
            fused_width: 96,
            decay_order: (2, 2),
            mlp_ratio: 4,
            input: (32, 64),
            decoder_layers: 1,
            max_label_len: 8,
            vocab_size: 19, // 16 glyph classes + EOS/BOS/PAD
            scale_mode: ScaleMode::SqrtD,
            decay_option: DecayOption::Max,
            decay_window: (5, 3),
            decay_gammas: Vec::new(),
            pos_base_freq: 10000.0,
            decay_enabled: true,
            fusion_enabled: true,
        }
    }

    pub fn total_depth(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    /// Decoder head count: the stage-3 head count, stepped down to the
    /// largest value that divides the fused width (needed for base, where
    /// 256 is not divisible by 12).
    pub fn decoder_heads(&self) -> usize {
        let mut h = self.stage_heads[2].min(self.fused_width);
        while h > 1 && self.fused_width % h != 0 {
            h -= 1;
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        let (x, y) = self.decay_order;
        if x + y != self.total_depth() {
            return Err(Error::config(format!(
                "decay order {x}-{y} must cover all {} blocks exactly",
                self.total_depth()
            )));
        }
        for s in 0..3 {
            let (c, h) = (self.stage_widths[s], self.stage_heads[s]);
            if h == 0 || c % h != 0 {
                return Err(Error::config(format!(
                    "stage {} width {c} not divisible by {h} heads",
                    s + 1
                )));
            }
            if (c / h) % 4 != 0 {
                return Err(Error::config(format!(
                    "stage {} head dim {} must be a multiple of 4 for the axial rotary pairs",
                    s + 1,
                    c / h
                )));
            }
        }
        let (ih, iw) = self.input;
        if ih == 0 || ih % 16 != 0 {
            return Err(Error::config(format!(
                "input height {ih} must be a positive multiple of 16 (stem + two downsamplings)"
            )));
        }
        if iw == 0 || iw % 4 != 0 {
            return Err(Error::config(format!(
                "input width {iw} must be a positive multiple of 4"
            )));
        }
        if self.stage_widths[0] % 2 != 0 {
            return Err(Error::config("stage 1 width must be even (stem half-width)"));
        }
        if self.decoder_layers != 1 {
            return Err(Error::config("only a 1-layer decoder is supported"));
        }
        if self.max_label_len < 2 {
            return Err(Error::config("max_label_len must be at least 2"));
        }
        if !self.decay_gammas.is_empty() && self.decay_gammas.len() != 1 {
            for (s, &h) in self.stage_heads.iter().enumerate() {
                if self.decay_gammas.len() != h {
                    return Err(Error::config(format!(
                        "decay.gammas has {} entries; stage {} needs {h} (or give a single shared value)",
                        self.decay_gammas.len(),
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-stage gamma list: explicit config values, a shared single value,
    /// or the default schedule.
    pub fn stage_gammas(&self, stage: usize) -> Vec<f64> {
        let h = self.stage_heads[stage];
        match self.decay_gammas.len() {
            0 => crate::decay::gamma_schedule(h),
            1 => vec![self.decay_gammas[0]; h],
            _ => self.decay_gammas.clone(),
        }
    }

    /// Flat-text echo embedded in checkpoints and manifests.
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.variant = {}", self.variant);
        let _ = writeln!(
            s,
            "model.stage_widths = {},{},{}",
            self.stage_widths[0], self.stage_widths[1], self.stage_widths[2]
        );
        let _ = writeln!(
            s,
            "model.stage_depths = {},{},{}",
            self.stage_depths[0], self.stage_depths[1], self.stage_depths[2]
        );
        let _ = writeln!(
            s,
            "model.stage_heads = {},{},{}",
            self.stage_heads[0], self.stage_heads[1], self.stage_heads[2]
        );
        let _ = writeln!(s, "model.fused_width = {}", self.fused_width);
        let _ = writeln!(s, "model.decay_order = {}-{}", self.decay_order.0, self.decay_order.1);
        let _ = writeln!(s, "model.mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "model.input_h = {}", self.input.0);
        let _ = writeln!(s, "model.input_w = {}", self.input.1);
        let _ = writeln!(s, "model.decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "model.max_label_len = {}", self.max_label_len);
        let _ = writeln!(s, "model.vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "attn.scale_mode = {}", self.scale_mode.name());
        let _ = writeln!(s, "decay.option = {}", self.decay_option.index());
        let _ = writeln!(s, "decay.window_w = {}", self.decay_window.0);
        let _ = writeln!(s, "decay.window_h = {}", self.decay_window.1);
        if !self.decay_gammas.is_empty() {
            let gammas: Vec<String> = self.decay_gammas.iter().map(|g| g.to_string()).collect();
            let _ = writeln!(s, "decay.gammas = {}", gammas.join(","));
        }
        let _ = writeln!(s, "pos.base_freq = {}", self.pos_base_freq);
        let _ = writeln!(s, "model.decay_enabled = {}", self.decay_enabled);
        let _ = writeln!(s, "model.fusion_enabled = {}", self.fusion_enabled);
        s
    }

    /// Rebuilds a configuration from its flat-text echo.
    pub fn from_flat_text(text: &str) -> Result<ModelConfig> {
        let cfg = Config::parse(text)?;
        let name = cfg.get("model.variant").unwrap_or("desk");
        let mut mc = ModelConfig::variant(name)?;
        mc.apply(&cfg)?;
        Ok(mc)
    }

    /// Applies config-file overrides on top of this configuration.
    pub fn apply(&mut self, cfg: &Config) -> Result<()> {
        if let Some(v) = cfg.get("model.stage_widths") {
            self.stage_widths = parse_triple(v, "model.stage_widths")?;
        }
        if let Some(v) = cfg.get("model.stage_depths") {
            self.stage_depths = parse_triple(v, "model.stage_depths")?;
        }
        if let Some(v) = cfg.get("model.stage_heads") {
            self.stage_heads = parse_triple(v, "model.stage_heads")?;
        }
        if let Some(v) = cfg.get("model.fused_width") {
            self.fused_width = cfg.parse_at("model.fused_width", v)?;
        }
        if let Some(v) = cfg.get("model.decay_order") {
            let (a, b) = v
                .split_once('-')
                .ok_or_else(|| Error::config(format!("model.decay_order wants x-y, got {v:?}")))?;
            self.decay_order = (
                cfg.parse_at("model.decay_order", a.trim())?,
                cfg.parse_at("model.decay_order", b.trim())?,
            );
        }
        if let Some(v) = cfg.get("model.mlp_ratio") {
            self.mlp_ratio = cfg.parse_at("model.mlp_ratio", v)?;
        }
        if let Some(v) = cfg.get("model.input_h") {
            self.input.0 = cfg.parse_at("model.input_h", v)?;
        }
        if let Some(v) = cfg.get("model.input_w") {
            self.input.1 = cfg.parse_at("model.input_w", v)?;
        }
        if let Some(v) = cfg.get("model.max_label_len") {
            self.max_label_len = cfg.parse_at("model.max_label_len", v)?;
        }
        if let Some(v) = cfg.get("model.vocab_size") {
            self.vocab_size = cfg.parse_at("model.vocab_size", v)?;
        }
        if let Some(v) = cfg.get("model.decoder_layers") {
            self.decoder_layers = cfg.parse_at("model.decoder_layers", v)?;
        }
        if let Some(v) = cfg.get("attn.scale_mode") {
            self.scale_mode = ScaleMode::parse(v)?;
        }
        if let Some(v) = cfg.get("decay.option") {
            self.decay_option = DecayOption::from_index(cfg.parse_at("decay.option", v)?)?;
        }
        if let Some(v) = cfg.get("decay.window_w") {
            self.decay_window.0 = cfg.parse_at("decay.window_w", v)?;
        }
        if let Some(v) = cfg.get("decay.window_h") {
            self.decay_window.1 = cfg.parse_at("decay.window_h", v)?;
        }
        if let Some(v) = cfg.get("decay.gammas") {
            let mut gammas = Vec::new();
            for part in v.split(',') {
                gammas.push(cfg.parse_at("decay.gammas", part.trim())?);
            }
            self.decay_gammas = gammas;
        }
        if let Some(v) = cfg.get("pos.base_freq") {
            self.pos_base_freq = cfg.parse_at("pos.base_freq", v)?;
        }
        if let Some(v) = cfg.get("model.decay_enabled") {
            self.decay_enabled = cfg.parse_at("model.decay_enabled", v)?;
        }
        if let Some(v) = cfg.get("model.fusion_enabled") {
            self.fusion_enabled = cfg.parse_at("model.fusion_enabled", v)?;
        }
        self.validate()
    }
}

fn parse_triple(v: &str, key: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::config(format!("{key} wants three comma-separated values, got {v:?}")));
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::config(format!("{key}: {part:?} is not an integer")))?;
    }
    Ok(out)
}

/// Flat `section.key = value` file. Lines starting with `#` and blank lines
/// are ignored; later keys override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn empty() -> Config {
        Config::default()
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() || !key.contains('.') {
                return Err(Error::config(format!(
                    "line {}: keys are section.key, got {key:?}",
                    lineno + 1
                )));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { entries })
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn parse_at<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            Error::config(format!("{key}: cannot parse {raw:?} as {}", std::any::type_name::<T>()))
        })
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => self.parse_at(key, v).map(Some),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_variants_validate() {
        for name in ["tiny", "small", "base", "desk"] {
            let cfg = ModelConfig::variant(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.decay_order.0 + cfg.decay_order.1, cfg.total_depth());
        }
        assert!(ModelConfig::variant("huge").is_err());
    }

    #[test]
    fn decoder_heads_steps_down_for_base() {
        let base = ModelConfig::variant("base").unwrap();
        assert_eq!(base.stage_heads[2], 12);
        assert_eq!(base.decoder_heads(), 8); // 256 % 12 != 0, 256 % 8 == 0
        let tiny = ModelConfig::variant("tiny").unwrap();
        assert_eq!(tiny.decoder_heads(), 8);
    }

    #[test]
    fn invalid_decay_split_rejected() {
        let mut cfg = ModelConfig::defaults();
        cfg.decay_order = (1, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flat_file_round_trip() {
        let cfg = ModelConfig::variant("tiny").unwrap();
        let text = cfg.to_flat_text();
        let parsed = Config::parse(&text).unwrap();
        let mut rebuilt = ModelConfig::variant(parsed.get("model.variant").unwrap()).unwrap();
        rebuilt.apply(&parsed).unwrap();
        assert_eq!(cfg, rebuilt);
    }

    #[test]
    fn parser_handles_comments_and_errors() {
        let cfg = Config::parse("# comment\n train.epochs = 3 # trailing\n\n").unwrap();
        assert_eq!(cfg.get("train.epochs"), Some("3"));
        assert!(Config::parse("bogus line").is_err());
        assert!(Config::parse("nosection = 1").is_err());
    }
}
