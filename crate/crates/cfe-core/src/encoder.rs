//! Three-stage pyramid encoder with decayed self-attention and multi-scale
//! fusion.
//!
//! Stage grids: the stem reduces the image 4x in both axes; between stages a
//! strided conv halves the height only, so token counts run HW/16, HW/32,
//! HW/64. Blocks are numbered globally across stages; the first `x` of them
//! (the decay order) multiply their post-softmax attention by the stage's
//! decay matrix — written exactly that way, with no renormalization, so
//! attenuated rows sum to less than one.

use rand::Rng;

use crate::config::ModelConfig;
use crate::decay::{build_decay, DecaySpec};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::layers::{attn_scale, merge_heads, split_heads, LayerNorm, Linear, Mlp, ParamSet};
use crate::rotary::{apply_rotary, RotaryTable};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One attention map captured for diagnostics: the effective (post-decay)
/// probabilities, detached from the tape.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub stage: usize,
    pub block_in_stage: usize,
    /// 1-based global block number.
    pub global_index: usize,
    pub decayed: bool,
    pub grid: TokenGrid,
    /// `[B, heads, L, L]`
    pub probs: Tensor,
}

pub struct EncodeOutput {
    /// `[B, 7HW/64, C]` with fusion, `[B, HW/64, C]` without.
    pub fused: Tensor,
    /// Per-stage token sequences F1, F2, F3.
    pub stage_tokens: [Tensor; 3],
    pub attention: Vec<AttnRecord>,
}

/// Pre-norm attention block per the encoder equation: rotary Q/K, scaled
/// logits, softmax, optional Hadamard decay, value mix, residual; then a
/// pre-norm MLP with residual. Heads are concatenated straight back into the
/// residual stream (the equation has no output projection).
pub struct CaceBlock {
    ln1: LayerNorm,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    ln2: LayerNorm,
    mlp: Mlp,
    pub heads: usize,
    scale: f64,
    pub use_decay: bool,
}

impl CaceBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: &ModelConfig,
        dim: usize,
        heads: usize,
        use_decay: bool,
        rng: &mut impl Rng,
        ps: &mut ParamSet,
        name: &str,
    ) -> CaceBlock {
        let std = 1.0 / (dim as f64).sqrt();
        let wq = Tensor::randn(vec![dim, dim], std, rng).into_param();
        let wk = Tensor::randn(vec![dim, dim], std, rng).into_param();
        let wv = Tensor::randn(vec![dim, dim], std, rng).into_param();
        ps.register(format!("{name}.wq"), &wq);
        ps.register(format!("{name}.wk"), &wk);
        ps.register(format!("{name}.wv"), &wv);
        let ln1 = LayerNorm::new(dim, ps, &format!("{name}.ln1"));
        let ln2 = LayerNorm::new(dim, ps, &format!("{name}.ln2"));
        let mlp = Mlp::new(dim, dim * cfg.mlp_ratio, rng, ps, &format!("{name}.mlp"));
        CaceBlock {
            ln1,
            wq,
            wk,
            wv,
            ln2,
            mlp,
            heads,
            scale: attn_scale(cfg.scale_mode, dim / heads),
            use_decay,
        }
    }

    /// The attention sublayer: returns (context `[B, L, C]`, effective
    /// attention `[B, heads, L, L]`). The key rotation uses the same sign as
    /// the query; its conjugation is supplied by the transpose inside QK^T.
    pub fn attention(
        &self,
        tape: &Tape,
        x: &Tensor,
        rotary: &RotaryTable,
        decay: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        if self.use_decay && decay.is_none() {
            return Err(Error::config("block expects a decay matrix but none was supplied"));
        }
        let h = self.ln1.forward(tape, x)?;
        let q = split_heads(tape, &tape.matmul(&h, &self.wq)?, self.heads)?;
        let k = split_heads(tape, &tape.matmul(&h, &self.wk)?, self.heads)?;
        let v = split_heads(tape, &tape.matmul(&h, &self.wv)?, self.heads)?;
        let q = apply_rotary(tape, &q, rotary, false)?;
        let k = apply_rotary(tape, &k, rotary, false)?;
        let kt = tape.permute(&k, &[0, 1, 3, 2])?;
        let scores = tape.scale(&tape.matmul(&q, &kt)?, self.scale)?;
        let probs = tape.softmax_lastdim(&scores)?;
        let eff = if self.use_decay {
            let d = decay.expect("checked above");
            if d.shape() != [self.heads, q.dim(2), q.dim(2)] {
                return Err(Error::shape(format!(
                    "decay shape {:?} does not match heads={} L={}",
                    d.shape(),
                    self.heads,
                    q.dim(2)
                )));
            }
            tape.mul(&probs, d)?
        } else {
            probs
        };
        let ctx = tape.matmul(&eff, &v)?;
        Ok((merge_heads(tape, &ctx)?, eff))
    }

    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor,
        rotary: &RotaryTable,
        decay: Option<&Tensor>,
        capture: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (ctx, eff) = self.attention(tape, x, rotary, decay)?;
        let x = tape.add(x, &ctx)?;
        let h = self.ln2.forward(tape, &x)?;
        let m = self.mlp.forward(tape, &h)?;
        let out = tape.add(&x, &m)?;
        Ok((out, capture.then(|| eff.detach())))
    }
}

struct Stem {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

struct Downsample {
    w: Tensor,
    b: Tensor,
}

pub struct Encoder {
    stem: Stem,
    stages: Vec<Vec<CaceBlock>>,
    downs: Vec<Downsample>,
    /// Per-stage projections to the fused width (only `[2]` when fusion is
    /// disabled).
    fusion: Vec<Option<Linear>>,
    pub grids: [TokenGrid; 3],
    rotary: Vec<RotaryTable>,
    decay: Vec<Option<Tensor>>,
    input: (usize, usize),
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng, ps: &mut ParamSet) -> Result<Encoder> {
        cfg.validate()?;
        let (ih, iw) = cfg.input;
        let grids = [
            TokenGrid::new(ih / 4, iw / 4),
            TokenGrid::new(ih / 8, iw / 4),
            TokenGrid::new(ih / 16, iw / 4),
        ];

        let c1 = cfg.stage_widths[0];
        let w1 = Tensor::randn(vec![3, 3, 1, c1 / 2], 1.0 / 3.0, rng).into_param();
        let b1 = Tensor::zeros(vec![c1 / 2]).into_param();
        let w2 = Tensor::randn(
            vec![3, 3, c1 / 2, c1],
            1.0 / (9.0 * (c1 / 2) as f64).sqrt(),
            rng,
        )
        .into_param();
        let b2 = Tensor::zeros(vec![c1]).into_param();
        ps.register("enc.stem.conv1.w", &w1);
        ps.register("enc.stem.conv1.b", &b1);
        ps.register("enc.stem.conv2.w", &w2);
        ps.register("enc.stem.conv2.b", &b2);
        let stem = Stem { w1, b1, w2, b2 };

        let decay_split = if cfg.decay_enabled { cfg.decay_order.0 } else { 0 };
        let mut stages = Vec::new();
        let mut global = 0usize;
        for s in 0..3 {
            let mut blocks = Vec::new();
            for b in 0..cfg.stage_depths[s] {
                global += 1;
                blocks.push(CaceBlock::new(
                    cfg,
                    cfg.stage_widths[s],
                    cfg.stage_heads[s],
                    global <= decay_split,
                    rng,
                    ps,
                    &format!("enc.stage{}.block{}", s + 1, b + 1),
                ));
            }
            stages.push(blocks);
        }

        let mut downs = Vec::new();
        for s in 0..2 {
            let (cin, cout) = (cfg.stage_widths[s], cfg.stage_widths[s + 1]);
            let w = Tensor::randn(vec![3, 3, cin, cout], 1.0 / (9.0 * cin as f64).sqrt(), rng)
                .into_param();
            let b = Tensor::zeros(vec![cout]).into_param();
            ps.register(format!("enc.down{}.w", s + 1), &w);
            ps.register(format!("enc.down{}.b", s + 1), &b);
            downs.push(Downsample { w, b });
        }

        let mut fusion = Vec::new();
        for s in 0..3 {
            if cfg.fusion_enabled || s == 2 {
                fusion.push(Some(Linear::new(
                    cfg.stage_widths[s],
                    cfg.fused_width,
                    true,
                    rng,
                    ps,
                    &format!("enc.fuse{}", s + 1),
                )));
            } else {
                fusion.push(None);
            }
        }

        let mut rotary = Vec::new();
        let mut decay = Vec::new();
        for s in 0..3 {
            let dh = cfg.stage_widths[s] / cfg.stage_heads[s];
            rotary.push(RotaryTable::new(&grids[s], dh, cfg.pos_base_freq)?);
            let stage_uses_decay = stages[s].iter().any(|b| b.use_decay);
            decay.push(if stage_uses_decay {
                let spec = DecaySpec::new(cfg.decay_option, cfg.stage_gammas(s), cfg.decay_window)?;
                Some(build_decay(&spec, &grids[s])?)
            } else {
                None
            });
        }

        Ok(Encoder {
            stem,
            stages,
            downs,
            fusion,
            grids,
            rotary,
            decay,
            input: cfg.input,
        })
    }

    /// The stem: two stride-2 3x3 convs (GELU between), flattening to
    /// `[B, HW/16, C1]` on the stage-1 grid.
    pub fn patch_embed(&self, tape: &Tape, img: &Tensor) -> Result<Tensor> {
        let s = img.shape();
        let (ih, iw) = self.input;
        if s.len() != 4 || s[1] != ih || s[2] != iw || s[3] != 1 {
            return Err(Error::shape(format!(
                "expected image [B, {ih}, {iw}, 1], got {:?}",
                s
            )));
        }
        let b = s[0];
        let y = tape.pad_replicate(img, 1)?;
        let y = tape.conv2d(&y, &self.stem.w1, (2, 2))?;
        let y = tape.add(&y, &self.stem.b1)?;
        let y = tape.gelu(&y)?;
        let y = tape.pad_replicate(&y, 1)?;
        let y = tape.conv2d(&y, &self.stem.w2, (2, 2))?;
        let y = tape.add(&y, &self.stem.b2)?;
        let g = self.grids[0];
        tape.reshape(&y, vec![b, g.len(), self.stem.w2.dim(3)])
    }

    /// Height-halving strided conv between stages.
    fn downsample(&self, tape: &Tape, x: &Tensor, stage: usize) -> Result<Tensor> {
        let g = self.grids[stage];
        if g.height % 2 != 0 {
            return Err(Error::config(format!(
                "grid height {} must be even to downsample",
                g.height
            )));
        }
        let b = x.dim(0);
        let c = x.dim(2);
        let img = tape.reshape(x, vec![b, g.height, g.width, c])?;
        let padded = tape.pad_replicate(&img, 1)?;
        let down = &self.downs[stage];
        let y = tape.conv2d(&padded, &down.w, (2, 1))?;
        let y = tape.add(&y, &down.b)?;
        let cout = down.w.dim(3);
        tape.reshape(&y, vec![b, g.height / 2 * g.width, cout])
    }

    /// Full encoder pass. `capture` retains per-block effective attention.
    pub fn forward(&self, tape: &Tape, img: &Tensor, capture: bool) -> Result<EncodeOutput> {
        let mut attention = Vec::new();
        let mut x = self.patch_embed(tape, img)?;
        let mut stage_tokens: Vec<Tensor> = Vec::with_capacity(3);
        let mut global = 0usize;
        for s in 0..3 {
            for (bi, block) in self.stages[s].iter().enumerate() {
                global += 1;
                let (next, probs) =
                    block.forward(tape, &x, &self.rotary[s], self.decay[s].as_ref(), capture)?;
                x = next;
                if let Some(probs) = probs {
                    attention.push(AttnRecord {
                        stage: s + 1,
                        block_in_stage: bi + 1,
                        global_index: global,
                        decayed: block.use_decay,
                        grid: self.grids[s],
                        probs,
                    });
                }
            }
            stage_tokens.push(x.clone());
            if s < 2 {
                x = self.downsample(tape, &x, s)?;
            }
        }

        let fused = if self.fusion[0].is_some() {
            let mut projected = Vec::with_capacity(3);
            for s in 0..3 {
                projected.push(
                    self.fusion[s]
                        .as_ref()
                        .expect("fusion projections present")
                        .forward(tape, &stage_tokens[s])?,
                );
            }
            let refs: Vec<&Tensor> = projected.iter().collect();
            tape.concat(&refs, 1)?
        } else {
            self.fusion[2]
                .as_ref()
                .expect("stage-3 projection always present")
                .forward(tape, &stage_tokens[2])?
        };

        let stage_tokens: [Tensor; 3] = stage_tokens.try_into().map_err(|_| {
            Error::shape("expected exactly three stage outputs")
        })?;
        Ok(EncodeOutput { fused, stage_tokens, attention })
    }

    pub fn block(&self, stage: usize, index: usize) -> &CaceBlock {
        &self.stages[stage][index]
    }

    pub fn stage_decay(&self, stage: usize) -> Option<&Tensor> {
        self.decay[stage].as_ref()
    }

    pub fn stage_rotary(&self, stage: usize) -> &RotaryTable {
        &self.rotary[stage]
    }

    pub fn num_blocks(&self, stage: usize) -> usize {
        self.stages[stage].len()
    }
}
