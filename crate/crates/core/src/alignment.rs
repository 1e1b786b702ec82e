//! Image-text alignment: word-level tokenizer, text embeddings, the
//! symmetric image-text contrastive loss and the autoregressive description
//! decoder with its negative log-likelihood.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{AttnLayout, Graph, Segment, Var};
use crate::corpus::{Description, TaxonomyRecord, BOS, CTX, EOS, PAD, RESERVED, SEP};
use crate::error::{at_path, Error, Result};
use crate::params::{EncoderConfig, ModelParams};
use crate::tensor::Matrix;
use crate::transformer::{attention_g, embed_text_g, layer_norm_g, linear_g, mlp_g, LatentSequence};

/// Closed-vocabulary whitespace tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vec<String>, max_len: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("token {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        for r in [PAD, BOS, EOS, CTX, SEP] {
            if !index.contains_key(r) {
                return Err(Error::Vocab(format!("reserved token {r} missing")));
            }
        }
        Ok(Self {
            vocab,
            index,
            max_len,
        })
    }

    /// Reserved tokens followed by every description word in sorted order.
    pub fn from_records(records: &[TaxonomyRecord], max_len: usize) -> Result<Self> {
        let words: BTreeSet<&str> = records
            .iter()
            .flat_map(|r| r.descriptions.iter())
            .flat_map(|d| d.text.split_whitespace())
            .filter(|w| !RESERVED.contains(w))
            .collect();
        let vocab = RESERVED
            .iter()
            .copied()
            .chain(words)
            .map(str::to_string)
            .collect();
        Self::new(vocab, max_len)
    }

    /// One token per line; the line number is the id.
    pub fn load(path: &Path, max_len: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(at_path(path))?;
        Self::new(text.lines().map(str::to_string).collect(), max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.vocab.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(at_path(path))?;
        Ok(())
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("out-of-vocabulary token `{token}`")))
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let toks: Result<Vec<&str>> = ids
            .iter()
            .map(|&i| {
                self.vocab
                    .get(i)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Vocab(format!("token id {i} out of range")))
            })
            .collect();
        Ok(toks?.join(" "))
    }

    /// Per-level descriptions, high level first, joined by `[SEP]`. When too
    /// long, tokens are dropped from the high-level end so species text
    /// survives.
    pub fn encode_descriptions(&self, descriptions: &[Description]) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for (i, d) in descriptions.iter().enumerate() {
            if i > 0 {
                ids.push(self.sep());
            }
            ids.extend(self.encode(&d.text)?);
        }
        if ids.len() > self.max_len {
            ids.drain(..ids.len() - self.max_len);
        }
        Ok(ids)
    }

    /// `[BOS] t_1 … t_n`, the decoder's teacher-forcing target.
    pub fn decoder_target(&self, ids: &[usize]) -> Vec<usize> {
        let mut t = Vec::with_capacity(ids.len() + 1);
        t.push(self.bos());
        t.extend_from_slice(ids);
        t
    }
}

/// Context row `w_ct` followed by `α_w(t_i) + e_w(i)` for each token.
pub fn embed_text(tokens: &[usize], params: &ModelParams, cfg: &EncoderConfig) -> Result<LatentSequence> {
    let mut g = Graph::new(params);
    let (x, _) = embed_text_g(&mut g, cfg, &[tokens.to_vec()])?;
    Ok(g.value(x).clone())
}

/// Image and text context tokens of `N` matched pairs (row `i` of each).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPairs {
    pub image_tokens: Matrix,
    pub text_tokens: Matrix,
}

/// Symmetric InfoNCE over L2-normalised tokens with logits `z_i·w_j / τ`:
/// mean image→text NLL plus mean text→image NLL.
pub fn contrastive_loss_g(g: &mut Graph, z: Var, w: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let n = g.value(z).rows();
    if n == 0 || g.value(w).rows() != n {
        return Err(Error::Shape(format!(
            "contrastive loss over {n} image tokens and {} text tokens",
            g.value(w).rows()
        )));
    }
    let zn = g.l2_normalize_rows(z);
    let wn = g.l2_normalize_rows(w);
    let logits = g.matmul_t(zn, wn)?;
    let logits = g.scale(logits, 1.0 / temperature);
    let diag: Vec<Option<usize>> = (0..n).map(Some).collect();
    let i2t = g.cross_entropy(logits, diag.clone(), n as f64)?;
    let lt = g.transpose(logits);
    let t2i = g.cross_entropy(lt, diag, n as f64)?;
    g.weighted_sum(vec![(i2t, 1.0), (t2i, 1.0)])
}

pub fn contrastive_loss(batch: &BatchPairs, temperature: f64) -> Result<f64> {
    let params = ModelParams::default();
    let mut g = Graph::new(&params);
    let z = g.input(batch.image_tokens.clone());
    let w = g.input(batch.text_tokens.clone());
    let l = contrastive_loss_g(&mut g, z, w, temperature)?;
    Ok(g.value(l).scalar())
}

/// Teacher-forced decoder logits. `targets[b]` is `[BOS] t_1 … t_n`; the
/// decoder reads `[BOS] t_1 … t_{n-1}` with a causal mask and cross-attends
/// to rows `image_ranges[b]` of `image_latents`. Returns one logits row per
/// predicted token, items stacked in order.
pub fn decoder_logits_g(
    g: &mut Graph,
    cfg: &EncoderConfig,
    image_latents: Var,
    image_ranges: &[(usize, usize)],
    targets: &[Vec<usize>],
) -> Result<Var> {
    if image_ranges.len() != targets.len() {
        return Err(Error::Shape("one image per description target is required".into()));
    }
    let vocab = g.params().get("text.tok").map(Matrix::rows).unwrap_or(0);
    let mut tok_idx = Vec::new();
    let mut pos_idx = Vec::new();
    let mut lengths = Vec::with_capacity(targets.len());
    for t in targets {
        if t.len() < 2 {
            return Err(Error::invalid("decoder target needs [BOS] and at least one token"));
        }
        let n = t.len() - 1;
        if n > cfg.max_text_len {
            return Err(Error::invalid(format!(
                "decoder target of {n} tokens exceeds the maximum of {}",
                cfg.max_text_len
            )));
        }
        for (i, &id) in t[..n].iter().enumerate() {
            if id >= vocab {
                return Err(Error::Vocab(format!("token id {id} outside vocabulary of {vocab}")));
            }
            tok_idx.push(id);
            pos_idx.push(i);
        }
        lengths.push(n);
    }
    let tok = g.param("text.tok")?;
    let pos = g.param("text.pos")?;
    let t = g.gather_rows(tok, tok_idx)?;
    let p = g.gather_rows(pos, pos_idx)?;
    let mut x = g.add(t, p)?;

    let self_layout = Arc::new(AttnLayout::self_attention(&lengths, true));
    let mut start = 0;
    let cross_layout = Arc::new(AttnLayout {
        segments: lengths
            .iter()
            .zip(image_ranges)
            .map(|(&len, &(k_start, k_len))| {
                let s = Segment {
                    q_start: start,
                    q_len: len,
                    k_start,
                    k_len,
                };
                start += len;
                s
            })
            .collect(),
        causal: false,
    });
    for l in 0..cfg.decoder_layers {
        let prefix = format!("decoder.block{l}");
        let h = layer_norm_g(g, x, &format!("{prefix}.ln1"))?;
        let a = attention_g(g, h, h, &format!("{prefix}.self_attn"), cfg.heads, self_layout.clone())?;
        x = g.add(x, a)?;
        let h = layer_norm_g(g, x, &format!("{prefix}.ln2"))?;
        let a = attention_g(
            g,
            h,
            image_latents,
            &format!("{prefix}.cross_attn"),
            cfg.heads,
            cross_layout.clone(),
        )?;
        x = g.add(x, a)?;
        let h = layer_norm_g(g, x, &format!("{prefix}.ln3"))?;
        let m = mlp_g(g, h, &format!("{prefix}.mlp"))?;
        x = g.add(x, m)?;
    }
    let h = layer_norm_g(g, x, "decoder.ln_final")?;
    linear_g(g, h, "decoder.out")
}

/// Next-token targets matching [`decoder_logits_g`]'s rows; `PAD` targets
/// are masked out.
pub fn decoder_targets(targets: &[Vec<usize>], pad: usize) -> Vec<Option<usize>> {
    targets
        .iter()
        .flat_map(|t| t[1..].iter().map(move |&id| (id != pad).then_some(id)))
        .collect()
}

/// Per-position logits for a single image and target `[BOS] t_1 … t_n`.
pub fn decode_description(
    z_s: &LatentSequence,
    target: &[usize],
    params: &ModelParams,
    cfg: &EncoderConfig,
) -> Result<Matrix> {
    let mut g = Graph::new(params);
    let z = g.input(z_s.clone());
    let logits = decoder_logits_g(&mut g, cfg, z, &[(0, z_s.rows())], &[target.to_vec()])?;
    Ok(g.value(logits).clone())
}

/// `−Σ_t log p(t_t | t_<t, image)` over non-`PAD` targets.
pub fn description_loss(logits: &Matrix, target: &[usize], pad: usize) -> Result<f64> {
    if target.len() != logits.rows() + 1 {
        return Err(Error::Shape(format!(
            "{} logits rows for a target of {} tokens",
            logits.rows(),
            target.len()
        )));
    }
    let params = ModelParams::default();
    let mut g = Graph::new(&params);
    let l = g.input(logits.clone());
    let targets = decoder_targets(&[target.to_vec()], pad);
    let loss = g.cross_entropy(l, targets, 1.0)?;
    Ok(g.value(loss).scalar())
}
