//! Model configuration and the path-addressed parameter store.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Relevance function between a context token and a patch latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `sigmoid(a·b / √d)`
    #[default]
    SigmoidDot,
    /// `(1 + cos(a, b)) / 2`
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub max_text_len: usize,
    pub similarity: Similarity,
    /// Use a second attention-pooling instance for the contrastive image token.
    pub separate_contrastive_pool: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            d: 64,
            heads: 4,
            image_layers: 4,
            text_layers: 2,
            decoder_layers: 2,
            mlp_ratio: 4.0,
            patch_size: 8,
            image_height: 32,
            image_width: 32,
            max_text_len: 24,
            similarity: Similarity::SigmoidDot,
            separate_contrastive_pool: false,
        }
    }

    /// ViT-B/16 scale.
    pub fn full_scale() -> Self {
        Self {
            d: 768,
            heads: 12,
            image_layers: 12,
            text_layers: 12,
            decoder_layers: 12,
            mlp_ratio: 4.0,
            patch_size: 16,
            image_height: 224,
            image_width: 224,
            max_text_len: 128,
            similarity: Similarity::SigmoidDot,
            separate_contrastive_pool: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad("d must be a positive multiple of heads");
        }
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return bad("image sides must be divisible by patch_size");
        }
        if self.mlp_hidden() == 0 {
            return bad("mlp_ratio too small");
        }
        if self.max_text_len == 0 {
            return bad("max_text_len must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn contrastive_pool_prefix(&self) -> &'static str {
        if self.separate_contrastive_pool {
            "pool_con"
        } else {
            "pool"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn linear(out: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{prefix}.w"), (fan_in, fan_out), Init::Normal));
    out.push((format!("{prefix}.b"), (1, fan_out), Init::Zeros));
}

fn layer_norm(out: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.g"), (1, d), Init::Ones));
    out.push((format!("{prefix}.b"), (1, d), Init::Zeros));
}

// Keys carry no bias: it adds the same logit to every key of a query.
fn attention(out: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, d: usize) {
    linear(out, &format!("{prefix}.q"), d, d);
    out.push((format!("{prefix}.k.w"), (d, d), Init::Normal));
    linear(out, &format!("{prefix}.v"), d, d);
    linear(out, &format!("{prefix}.o"), d, d);
}

fn mlp(out: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, d: usize, hidden: usize) {
    linear(out, &format!("{prefix}.fc1"), d, hidden);
    linear(out, &format!("{prefix}.fc2"), hidden, d);
}

fn encoder_block(out: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, cfg: &EncoderConfig) {
    layer_norm(out, &format!("{prefix}.ln1"), cfg.d);
    attention(out, &format!("{prefix}.attn"), cfg.d);
    layer_norm(out, &format!("{prefix}.ln2"), cfg.d);
    mlp(out, &format!("{prefix}.mlp"), cfg.d, cfg.mlp_hidden());
}

fn pool(out: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.query"), (1, d), Init::Normal));
    linear(out, &format!("{prefix}.q"), d, d);
    out.push((format!("{prefix}.k.w"), (d, d), Init::Normal));
    linear(out, &format!("{prefix}.v"), d, d);
}

fn layout(cfg: &EncoderConfig, vocab_size: usize) -> Vec<(String, (usize, usize), Init)> {
    let d = cfg.d;
    let mut out = Vec::new();
    linear(&mut out, "patch.proj", cfg.patch_dim(), d);
    out.push(("patch.pos".into(), (cfg.num_patches(), d), Init::Normal));
    for l in 0..cfg.image_layers {
        encoder_block(&mut out, &format!("image.block{l}"), cfg);
    }
    layer_norm(&mut out, "image.ln_final", d);

    out.push(("text.tok".into(), (vocab_size, d), Init::Normal));
    out.push(("text.pos".into(), (cfg.max_text_len, d), Init::Normal));
    out.push(("text.ctx".into(), (1, d), Init::Normal));
    for l in 0..cfg.text_layers {
        encoder_block(&mut out, &format!("text.block{l}"), cfg);
    }
    layer_norm(&mut out, "text.ln_final", d);

    pool(&mut out, "pool", d);
    if cfg.separate_contrastive_pool {
        pool(&mut out, "pool_con", d);
    }

    for l in 0..cfg.decoder_layers {
        let prefix = format!("decoder.block{l}");
        layer_norm(&mut out, &format!("{prefix}.ln1"), d);
        attention(&mut out, &format!("{prefix}.self_attn"), d);
        layer_norm(&mut out, &format!("{prefix}.ln2"), d);
        attention(&mut out, &format!("{prefix}.cross_attn"), d);
        layer_norm(&mut out, &format!("{prefix}.ln3"), d);
        mlp(&mut out, &format!("{prefix}.mlp"), d, cfg.mlp_hidden());
    }
    layer_norm(&mut out, "decoder.ln_final", d);
    linear(&mut out, "decoder.out", d, vocab_size);
    out
}

/// Every trainable tensor, addressed by a unique dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Matrix>,
}

impl ModelParams {
    /// Truncated-normal (σ = 0.02, cut at 2σ) weights and embeddings, zero
    /// biases and LN offsets, unit LN scales.
    pub fn init<R: Rng>(cfg: &EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = Self::default();
        for (path, (r, c), init) in layout(cfg, vocab_size) {
            let m = match init {
                Init::Zeros => Matrix::zeros(r, c),
                Init::Ones => Matrix::filled(r, c, 1.0),
                Init::Normal => {
                    let data = (0..r * c)
                        .map(|_| loop {
                            let v: f64 = normal.sample(rng);
                            if v.abs() <= 0.04 {
                                break v;
                            }
                        })
                        .collect();
                    Matrix::from_vec(r, c, data)?
                }
            };
            params.insert(&path, m)?;
        }
        Ok(params)
    }

    /// Checks that exactly the expected paths exist with the expected shapes.
    pub fn validate(&self, cfg: &EncoderConfig, vocab_size: usize) -> Result<()> {
        let expected = layout(cfg, vocab_size);
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (path, shape, _) in expected {
            match self.tensors.get(&path) {
                None => return Err(Error::Shape(format!("missing tensor `{path}`"))),
                Some(m) if m.shape() != shape => {
                    return Err(Error::Shape(format!(
                        "`{path}` has shape {:?}, expected {shape:?}",
                        m.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, path: &str, m: Matrix) -> Result<()> {
        if self.tensors.contains_key(path) {
            return Err(Error::Shape(format!("duplicate parameter path `{path}`")));
        }
        self.tensors.insert(path.to_string(), m);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Matrix> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_validates_and_paths_are_unique() {
        let cfg = EncoderConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&cfg, 40, &mut rng).unwrap();
        p.validate(&cfg, 40).unwrap();
        assert_eq!(p.get("patch.proj.w").unwrap().shape(), (192, 64));
        assert_eq!(p.get("patch.pos").unwrap().shape(), (16, 64));
        assert!(p.get("pool_con.query").is_none());
        let w = p.get("image.block0.attn.q.w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(p.get("image.block0.ln1.g").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn validate_rejects_wrong_shapes() {
        let cfg = EncoderConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(&cfg, 40, &mut rng).unwrap();
        assert!(p.validate(&cfg, 41).is_err());
        let mut dup = ModelParams::default();
        dup.insert("a", Matrix::zeros(1, 1)).unwrap();
        assert!(dup.insert("a", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn heads_must_divide_d() {
        let cfg = EncoderConfig {
            heads: 5,
            ..EncoderConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }
}
