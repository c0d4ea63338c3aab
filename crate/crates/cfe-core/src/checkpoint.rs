//! Checkpoint persistence.
//!
//! Binary layout (all little-endian):
//!   magic "CFECKPT1", u32 version,
//!   u8 contrastive mode, config echo (len-prefixed flat text),
//!   named parameters (name, dims, f32 data),
//!   Adam state (step count, betas/eps, per-parameter m and v as f32),
//!   training counters (step, total steps),
//!   rng state (32-byte seed + u128 word position).
//!
//! Save -> load -> save is byte-identical: parameters are stored as f32, and
//! f64 -> f32 -> f64 -> f32 is idempotent.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Contrastive, Model};
use crate::optim::Adam;

const MAGIC: &[u8; 8] = b"CFECKPT1";
const VERSION: u32 = 1;

/// Training counters and rng state stored next to the weights, so the
/// contrastive activation boundary survives a resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub total_steps: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl TrainState {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn of_rng(rng: &ChaCha8Rng, step: u64, total_steps: u64) -> TrainState {
        TrainState {
            step,
            total_steps,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}
fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 string".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn serialize(model: &Model, adam: &Adam, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(match model.contrastive {
        Contrastive::None => 0,
        Contrastive::Cc => 1,
        Contrastive::Iicl => 2,
    });
    put_str(&mut out, &model.cfg.to_flat_text());
    let items = model.params().items();
    put_u32(&mut out, items.len() as u32);
    for (name, t) in items {
        put_str(&mut out, name);
        let shape = t.shape();
        put_u32(&mut out, shape.len() as u32);
        for d in &shape {
            put_u32(&mut out, *d as u32);
        }
        put_f32s(&mut out, &t.data());
    }
    put_u64(&mut out, adam.step_count);
    put_f64(&mut out, adam.beta1);
    put_f64(&mut out, adam.beta2);
    put_f64(&mut out, adam.eps);
    for (m, v) in adam.m.iter().zip(&adam.v) {
        put_f32s(&mut out, m);
        put_f32s(&mut out, v);
    }
    put_u64(&mut out, state.step);
    put_u64(&mut out, state.total_steps);
    out.extend_from_slice(&state.rng_seed);
    out.extend_from_slice(&state.rng_word_pos.to_le_bytes());
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<(Model, Adam, TrainState)> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let contrastive = match cur.take(1)?[0] {
        0 => Contrastive::None,
        1 => Contrastive::Cc,
        2 => Contrastive::Iicl,
        b => return Err(Error::Checkpoint(format!("bad contrastive byte {b}"))),
    };
    let cfg_text = cur.string()?;
    let cfg = ModelConfig::from_flat_text(&cfg_text)?;
    let model = Model::new(&cfg, contrastive, 0)?;

    let count = cur.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {count}, config implies {}",
            model.params().len()
        )));
    }
    for (name, t) in model.params().items() {
        let fname = cur.string()?;
        if &fname != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected {name}, found {fname}"
            )));
        }
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        if dims != t.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: file {dims:?}, config {:?}",
                t.shape()
            )));
        }
        let data = cur.f32s(t.numel())?;
        t.assign(&data);
    }
    let mut adam = Adam::new(model.params(), 0.9, 0.999, 1e-8);
    adam.step_count = cur.u64()?;
    adam.beta1 = cur.f64()?;
    adam.beta2 = cur.f64()?;
    adam.eps = cur.f64()?;
    for i in 0..count {
        let n = adam.m[i].len();
        adam.m[i] = cur.f32s(n)?;
        adam.v[i] = cur.f32s(n)?;
    }
    let step = cur.u64()?;
    let total_steps = cur.u64()?;
    let rng_seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let rng_word_pos = u128::from_le_bytes(cur.take(16)?.try_into().unwrap());
    Ok((
        model,
        adam,
        TrainState { step, total_steps, rng_seed, rng_word_pos },
    ))
}

pub fn save(path: &Path, model: &Model, adam: &Adam, state: &TrainState) -> Result<()> {
    std::fs::write(path, serialize(model, adam, state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Adam, TrainState)> {
    deserialize(&std::fs::read(path)?)
}

/// Rejects a checkpoint whose embedded config differs from the expected one.
pub fn expect_config(loaded: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if loaded != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint was built for a different model configuration:\n{}\nvs expected:\n{}",
            loaded.to_flat_text(),
            expected.to_flat_text()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(contrastive: Contrastive) -> Model {
        let mut cfg = ModelConfig::defaults();
        cfg.stage_widths = [8, 8, 8];
        cfg.stage_heads = [2, 2, 2];
        cfg.stage_depths = [1, 1, 1];
        cfg.decay_order = (1, 2);
        cfg.fused_width = 8;
        cfg.input = (16, 16);
        cfg.max_label_len = 4;
        cfg.vocab_size = 6;
        cfg.mlp_ratio = 2;
        Model::new(&cfg, contrastive, 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny_model(Contrastive::Iicl);
        let adam = Adam::new(model.params(), 0.9, 0.999, 1e-8);
        let rng = ChaCha8Rng::seed_from_u64(11);
        let state = TrainState::of_rng(&rng, 17, 100);
        let bytes_a = serialize(&model, &adam, &state);
        let (m2, a2, s2) = deserialize(&bytes_a).unwrap();
        let bytes_b = serialize(&m2, &a2, &s2);
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(s2.step, 17);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let model = tiny_model(Contrastive::None);
        let adam = Adam::new(model.params(), 0.9, 0.999, 1e-8);
        let state = TrainState::of_rng(&ChaCha8Rng::seed_from_u64(0), 0, 1);
        let bytes = serialize(&model, &adam, &state);
        let (loaded, _, _) = deserialize(&bytes).unwrap();
        let mut other = loaded.cfg.clone();
        other.fused_width = 16;
        assert!(expect_config(&loaded.cfg, &other).is_err());
        assert!(expect_config(&loaded.cfg, &model.cfg).is_ok());
    }

    #[test]
    fn rng_state_round_trips_mid_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..13 {
            let _: u64 = rng.gen();
        }
        let state = TrainState::of_rng(&rng, 0, 1);
        let mut restored = state.rng();
        for _ in 0..7 {
            let a: u64 = rng.gen();
            let b: u64 = restored.gen();
            assert_eq!(a, b);
        }
    }
}
