//! Small reusable layers and the named-parameter registry.

use rand::Rng;

use crate::config::ScaleMode;
use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Ordered (name, tensor) registry of trainable parameters. Construction
/// order is the registration order, which fixes the optimizer and checkpoint
/// layout.
#[derive(Debug, Default)]
pub struct ParamSet {
    items: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: &Tensor) {
        let name = name.into();
        debug_assert!(t.requires_grad(), "registering non-trainable tensor {name}");
        debug_assert!(
            !self.items.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.items.push((name, t.clone()));
    }

    pub fn items(&self) -> &[(String, Tensor)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.items {
            t.zero_grad();
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Dense projection on the last dim, optional bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
        ps: &mut ParamSet,
        name: &str,
    ) -> Linear {
        let w = Tensor::randn(vec![in_dim, out_dim], 1.0 / (in_dim as f64).sqrt(), rng).into_param();
        ps.register(format!("{name}.w"), &w);
        let b = bias.then(|| {
            let b = Tensor::zeros(vec![out_dim]).into_param();
            ps.register(format!("{name}.b"), &b);
            b
        });
        Linear { w, b }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &self.w)?;
        match &self.b {
            Some(b) => tape.add(&y, b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, ps: &mut ParamSet, name: &str) -> LayerNorm {
        let gain = Tensor::full(vec![dim], 1.0).into_param();
        let bias = Tensor::zeros(vec![dim]).into_param();
        ps.register(format!("{name}.gain"), &gain);
        ps.register(format!("{name}.bias"), &bias);
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gain, &self.bias, self.eps)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng, ps: &mut ParamSet, name: &str) -> Mlp {
        Mlp {
            fc1: Linear::new(dim, hidden, true, rng, ps, &format!("{name}.fc1")),
            fc2: Linear::new(hidden, dim, true, rng, ps, &format!("{name}.fc2")),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(&h)?;
        self.fc2.forward(tape, &h)
    }
}

/// `[B, T, C] -> [B, heads, T, C/heads]`
pub fn split_heads(tape: &Tape, x: &Tensor, heads: usize) -> Result<Tensor> {
    let s = x.shape();
    let (b, t, c) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, vec![b, t, heads, c / heads])?;
    tape.permute(&r, &[0, 2, 1, 3])
}

/// `[B, heads, T, dh] -> [B, T, heads*dh]`
pub fn merge_heads(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (b, h, t, dh) = (s[0], s[1], s[2], s[3]);
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(&p, vec![b, t, h * dh])
}

pub fn attn_scale(mode: ScaleMode, head_dim: usize) -> f64 {
    match mode {
        ScaleMode::SqrtD => 1.0 / (head_dim as f64).sqrt(),
        ScaleMode::D => 1.0 / head_dim as f64,
    }
}

/// Standard multi-head attention with an output projection; used by the
/// decoder (the encoder blocks have their own projection-free form).
#[derive(Debug, Clone)]
pub struct Mha {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    scale: f64,
}

impl Mha {
    pub fn new(
        dim: usize,
        heads: usize,
        scale_mode: ScaleMode,
        rng: &mut impl Rng,
        ps: &mut ParamSet,
        name: &str,
    ) -> Mha {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Mha {
            wq: Linear::new(dim, dim, true, rng, ps, &format!("{name}.wq")),
            wk: Linear::new(dim, dim, true, rng, ps, &format!("{name}.wk")),
            wv: Linear::new(dim, dim, true, rng, ps, &format!("{name}.wv")),
            wo: Linear::new(dim, dim, true, rng, ps, &format!("{name}.wo")),
            heads,
            scale: attn_scale(scale_mode, dim / heads),
        }
    }

    /// Projects keys/values once; reusable across autoregressive steps.
    pub fn project_kv(&self, tape: &Tape, kv_in: &Tensor) -> Result<(Tensor, Tensor)> {
        let k = split_heads(tape, &self.wk.forward(tape, kv_in)?, self.heads)?;
        let v = split_heads(tape, &self.wv.forward(tape, kv_in)?, self.heads)?;
        Ok((k, v))
    }

    /// Attention of `q_in: [B, Tq, C]` over projected keys/values, with an
    /// optional additive logit mask (`[Tq, Tk]`, broadcast over batch/heads).
    pub fn attend(
        &self,
        tape: &Tape,
        q_in: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let q = split_heads(tape, &self.wq.forward(tape, q_in)?, self.heads)?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.scale(&tape.matmul(&q, &kt)?, self.scale)?;
        let scores = match mask {
            Some(m) => tape.add(&scores, m)?,
            None => scores,
        };
        let probs = tape.softmax_lastdim(&scores)?;
        let ctx = tape.matmul(&probs, v)?;
        let merged = merge_heads(tape, &ctx)?;
        self.wo.forward(tape, &merged)
    }
}

/// Additive causal mask: 0 on/below the diagonal, -1e30 above. The huge
/// negative (rather than -inf) keeps masked log-probs finite while the
/// softmax weight underflows to exactly zero.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = -1e30;
        }
    }
    Tensor::from_vec(vec![t, t], data).expect("consistent by construction")
}
