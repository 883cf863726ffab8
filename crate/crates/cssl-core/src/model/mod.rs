//! Masked-autoencoder vision transformer: configuration, parameter storage,
//! and the forward/backward passes.
//!
//! All parameters of one model live in a single flat `Vec<f64>` described by
//! a [`Layout`] derived from the [`ModelConfig`]. The flat form keeps the
//! optimizer, checkpointing, bit-identity comparisons, and finite-difference
//! probing trivial; named views give structured access.

pub mod mae;
pub mod ops;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Architecture of one tokenizer + encoder + decoder model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patch side length in pixels.
    pub patch: usize,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub d_enc: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub d_dec: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    /// MLP hidden width = `mlp_ratio * d`.
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// Laptop-scale default for 32x32 single-channel inputs.
    pub fn tiny() -> Self {
        ModelConfig {
            patch: 8,
            channels: 1,
            image_h: 32,
            image_w: 32,
            d_enc: 64,
            enc_layers: 4,
            enc_heads: 4,
            d_dec: 32,
            dec_layers: 2,
            dec_heads: 4,
            mlp_ratio: 4,
        }
    }

    /// ViT-B-shaped preset for 512x512 inputs. A configuration target, not a
    /// test target.
    pub fn vit_b() -> Self {
        ModelConfig {
            patch: 16,
            channels: 1,
            image_h: 512,
            image_w: 512,
            d_enc: 768,
            enc_layers: 12,
            enc_heads: 12,
            d_dec: 512,
            dec_layers: 8,
            dec_heads: 16,
            mlp_ratio: 4,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Flattened patch dimension `V*V*C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.channels == 0
            || self.image_h % self.patch != 0
            || self.image_w % self.patch != 0
        {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.d_enc == 0 || self.enc_heads == 0 || self.d_enc % self.enc_heads != 0 {
            return Err(Error::invalid(format!(
                "encoder width {} not divisible by {} heads",
                self.d_enc, self.enc_heads
            )));
        }
        if self.d_dec == 0 || self.dec_heads == 0 || self.d_dec % self.dec_heads != 0 {
            return Err(Error::invalid(format!(
                "decoder width {} not divisible by {} heads",
                self.d_dec, self.dec_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp_ratio must be >= 1"));
        }
        Ok(())
    }
}

/// How per-image embeddings are pooled from token features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    First,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Zero,
    One,
    Normal,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: InitKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat-buffer layout of every tensor in one model, in a fixed order:
/// tokenizer, encoder blocks, decoder. The tokenizer + encoder prefix is
/// contiguous so the continual trainer can update it in isolation.
#[derive(Debug, Clone)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    by_name: BTreeMap<String, usize>,
    total_len: usize,
    /// End of the tokenizer + encoder segment (= start of the decoder).
    trunk_len: usize,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, init: InitKind) {
        let len: usize = shape.iter().product();
        self.specs.push(TensorSpec {
            name: name.into(),
            shape,
            offset: self.offset,
            init,
        });
        self.offset += len;
    }

    fn push_block(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.push(format!("{prefix}.ln1.g"), vec![d], InitKind::One);
        self.push(format!("{prefix}.ln1.b"), vec![d], InitKind::Zero);
        for proj in ["q", "k", "v", "o"] {
            self.push(format!("{prefix}.attn.w{proj}"), vec![d, d], InitKind::Normal);
            self.push(format!("{prefix}.attn.b{proj}"), vec![d], InitKind::Zero);
        }
        self.push(format!("{prefix}.ln2.g"), vec![d], InitKind::One);
        self.push(format!("{prefix}.ln2.b"), vec![d], InitKind::Zero);
        self.push(format!("{prefix}.mlp.w1"), vec![d, hidden], InitKind::Normal);
        self.push(format!("{prefix}.mlp.b1"), vec![hidden], InitKind::Zero);
        self.push(format!("{prefix}.mlp.w2"), vec![hidden, d], InitKind::Normal);
        self.push(format!("{prefix}.mlp.b2"), vec![d], InitKind::Zero);
    }
}

impl Layout {
    pub fn build(cfg: &ModelConfig) -> Layout {
        let n = cfg.num_patches();
        let pd = cfg.patch_dim();
        let mut b = LayoutBuilder {
            specs: Vec::new(),
            offset: 0,
        };
        b.push("tok.proj.w", vec![pd, cfg.d_enc], InitKind::Normal);
        b.push("tok.proj.b", vec![cfg.d_enc], InitKind::Zero);
        b.push("tok.pos", vec![n, cfg.d_enc], InitKind::Normal);
        for i in 0..cfg.enc_layers {
            b.push_block(&format!("enc.{i}"), cfg.d_enc, cfg.mlp_ratio * cfg.d_enc);
        }
        let trunk_len = b.offset;
        b.push("dec.embed.w", vec![cfg.d_enc, cfg.d_dec], InitKind::Normal);
        b.push("dec.embed.b", vec![cfg.d_dec], InitKind::Zero);
        b.push("dec.mask_token", vec![cfg.d_dec], InitKind::Normal);
        b.push("dec.pos", vec![n, cfg.d_dec], InitKind::Normal);
        for i in 0..cfg.dec_layers {
            b.push_block(&format!("dec.{i}"), cfg.d_dec, cfg.mlp_ratio * cfg.d_dec);
        }
        b.push("dec.head.w", vec![cfg.d_dec, pd], InitKind::Normal);
        b.push("dec.head.b", vec![pd], InitKind::Zero);

        let total_len = b.offset;
        let by_name = b
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Layout {
            specs: b.specs,
            by_name,
            total_len,
            trunk_len,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn trunk_len(&self) -> usize {
        self.trunk_len
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        let idx = self.by_name[name];
        &self.specs[idx]
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.spec(name).range()
    }
}

/// All parameters of one model in one flat buffer.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    pub data: Vec<f64>,
}

/// Parameter initialization scale for weights and embeddings.
const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Seeded initialization: weights and embeddings N(0, 0.02), biases and
    /// norm offsets zero, norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let layout = Layout::build(&config);
        let mut data = vec![0.0; layout.total_len()];
        let mut rng = rng::rng_for(seed, rng::stream::PARAM_INIT, 0);
        for spec in layout.specs() {
            let slice = &mut data[spec.range()];
            match spec.init {
                InitKind::Zero => {}
                InitKind::One => slice.fill(1.0),
                InitKind::Normal => {
                    for v in slice.iter_mut() {
                        *v = INIT_STD * rng::standard_normal(&mut rng);
                    }
                }
            }
        }
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    /// Rebuild from a raw buffer (checkpoint loading).
    pub fn from_data(config: ModelConfig, data: Vec<f64>) -> Result<ModelParams> {
        config.validate()?;
        let layout = Layout::build(&config);
        if data.len() != layout.total_len() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter buffer has {} values, layout expects {}",
                data.len(),
                layout.total_len()
            )));
        }
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        &self.data[self.layout.range(name)]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.layout.range(name);
        &mut self.data[range]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bit-level equality of two parameter sets (configs must match too).
    pub fn bits_equal(&self, other: &ModelParams) -> bool {
        self.config == other.config
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Overwrite every entry with N(0, std) noise (norm gains get 1 + noise).
    /// Test conditioning helper for gradient checks.
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = rng::rng_for(seed, rng::stream::PARAM_INIT, 1);
        for spec in self.layout.specs().to_vec() {
            let base = match spec.init {
                InitKind::One => 1.0,
                _ => 0.0,
            };
            for v in &mut self.data[spec.range()] {
                *v = base + std * rng::standard_normal(&mut rng);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_complete() {
        let cfg = ModelConfig::tiny();
        let layout = Layout::build(&cfg);
        let mut expected = 0;
        for spec in layout.specs() {
            assert_eq!(spec.offset, expected, "{}", spec.name);
            expected += spec.len();
        }
        assert_eq!(layout.total_len(), expected);
        assert!(layout.trunk_len() < layout.total_len());
        assert_eq!(layout.range("dec.embed.w").start, layout.trunk_len());
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig::tiny();
        let a = ModelParams::init(cfg, 9).unwrap();
        let b = ModelParams::init(cfg, 9).unwrap();
        assert!(a.bits_equal(&b));
        assert!(a.all_finite());
        let c = ModelParams::init(cfg, 10).unwrap();
        assert!(!a.bits_equal(&c));
    }

    #[test]
    fn norm_gains_start_at_one() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(cfg, 1).unwrap();
        assert!(params.tensor("enc.0.ln1.g").iter().all(|&v| v == 1.0));
        assert!(params.tensor("enc.0.ln1.b").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validate_rejects_bad_dims() {
        let mut cfg = ModelConfig::tiny();
        cfg.enc_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.patch = 7;
        assert!(cfg.validate().is_err());
    }
}
