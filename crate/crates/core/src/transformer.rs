//! Patch and token embeddings, pre-norm transformer blocks and the image
//! and text encoders.
//!
//! The graph-level functions (`*_g`) work on packed batches: many sequences
//! stacked row-wise, with an [`AttnLayout`] keeping attention inside each
//! sequence. The plain functions run a single sequence forward.

use std::sync::Arc;

use crate::autodiff::{AttnLayout, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{EncoderConfig, ModelParams};
use crate::patching::PatchSet;
use crate::tensor::Matrix;

/// Token latents, `N × d`.
pub type LatentSequence = Matrix;

pub fn linear_g(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn projection_g(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    g.matmul(x, w)
}

pub fn layer_norm_g(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.g"))?;
    let beta = g.param(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Multi-head attention with query/key/value/output projections under
/// `prefix`. `x_q` supplies queries, `x_kv` keys and values.
pub fn attention_g(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    prefix: &str,
    heads: usize,
    layout: Arc<AttnLayout>,
) -> Result<Var> {
    let q = linear_g(g, x_q, &format!("{prefix}.q"))?;
    let k = projection_g(g, x_kv, &format!("{prefix}.k"))?;
    let v = linear_g(g, x_kv, &format!("{prefix}.v"))?;
    let d = g.value(q).cols();
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let a = g.attention(q, k, v, heads, scale, layout)?;
    linear_g(g, a, &format!("{prefix}.o"))
}

pub fn mlp_g(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let h = linear_g(g, x, &format!("{prefix}.fc1"))?;
    let h = g.gelu(h);
    linear_g(g, h, &format!("{prefix}.fc2"))
}

fn ensure_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `X' = X + MSA(LN(X))`, `X_out = X' + MLP(LN(X'))`.
pub fn encoder_block_g(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    heads: usize,
    layout: Arc<AttnLayout>,
) -> Result<Var> {
    let h = layer_norm_g(g, x, &format!("{prefix}.ln1"))?;
    let a = attention_g(g, h, h, &format!("{prefix}.attn"), heads, layout)?;
    let x1 = g.add(x, a)?;
    let h = layer_norm_g(g, x1, &format!("{prefix}.ln2"))?;
    let m = mlp_g(g, h, &format!("{prefix}.mlp"))?;
    let out = g.add(x1, m)?;
    ensure_finite(g, out, prefix)?;
    Ok(out)
}

/// `L_e` image blocks then the final LN, over sequences of the given lengths.
pub fn image_encoder_g(g: &mut Graph, x: Var, cfg: &EncoderConfig, lengths: &[usize]) -> Result<Var> {
    let layout = Arc::new(AttnLayout::self_attention(lengths, false));
    let mut h = x;
    for l in 0..cfg.image_layers {
        h = encoder_block_g(g, h, &format!("image.block{l}"), cfg.heads, layout.clone())?;
    }
    layer_norm_g(g, h, "image.ln_final")
}

/// Bidirectional text encoder; each sequence already starts with its context
/// row.
pub fn text_encoder_g(g: &mut Graph, x: Var, cfg: &EncoderConfig, lengths: &[usize]) -> Result<Var> {
    let layout = Arc::new(AttnLayout::self_attention(lengths, false));
    let mut h = x;
    for l in 0..cfg.text_layers {
        h = encoder_block_g(g, h, &format!("text.block{l}"), cfg.heads, layout.clone())?;
    }
    layer_norm_g(g, h, "text.ln_final")
}

fn check_block(block: &[f64], cfg: &EncoderConfig) -> Result<()> {
    if block.len() != cfg.patch_dim() {
        return Err(Error::Shape(format!(
            "patch block has {} values, expected {}",
            block.len(),
            cfg.patch_dim()
        )));
    }
    Ok(())
}

/// `α_p(p) [+ e_p(i)]` for every block; positions are original grid indices,
/// or none for pool patches.
pub fn embed_patch_rows_g(
    g: &mut Graph,
    cfg: &EncoderConfig,
    blocks: &[&[f64]],
    positions: Option<&[usize]>,
) -> Result<Var> {
    let mut data = Vec::with_capacity(blocks.len() * cfg.patch_dim());
    for b in blocks {
        check_block(b, cfg)?;
        data.extend_from_slice(b);
    }
    let pixels = g.input(Matrix::from_vec(blocks.len(), cfg.patch_dim(), data)?);
    let x = linear_g(g, pixels, "patch.proj")?;
    match positions {
        None => Ok(x),
        Some(pos) => {
            if let Some(&bad) = pos.iter().find(|&&p| p >= cfg.num_patches()) {
                return Err(Error::Shape(format!("patch index {bad} beyond the grid")));
            }
            let table = g.param("patch.pos")?;
            let e = g.gather_rows(table, pos.to_vec())?;
            g.add(x, e)
        }
    }
}

/// Packs token sequences as `[w_ct, α_w(t_1)+e_w(0), …]` rows.
pub fn embed_text_g(g: &mut Graph, cfg: &EncoderConfig, seqs: &[Vec<usize>]) -> Result<(Var, Vec<usize>)> {
    let vocab = g.params().get("text.tok").map(Matrix::rows).unwrap_or(0);
    let mut tok_idx = Vec::new();
    let mut pos_idx = Vec::new();
    let mut lengths = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.len() > cfg.max_text_len {
            return Err(Error::invalid(format!(
                "text of {} tokens exceeds the maximum of {}",
                s.len(),
                cfg.max_text_len
            )));
        }
        tok_idx.push(0);
        pos_idx.push(0);
        for (i, &t) in s.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Vocab(format!("token id {t} outside vocabulary of {vocab}")));
            }
            tok_idx.push(t + 1);
            pos_idx.push(i + 1);
        }
        lengths.push(s.len() + 1);
    }
    let ctx = g.param("text.ctx")?;
    let tok = g.param("text.tok")?;
    let tok_table = g.concat_rows(vec![ctx, tok])?;
    let zero = g.input(Matrix::zeros(1, cfg.d));
    let pos = g.param("text.pos")?;
    let pos_table = g.concat_rows(vec![zero, pos])?;
    let t = g.gather_rows(tok_table, tok_idx)?;
    let p = g.gather_rows(pos_table, pos_idx)?;
    Ok((g.add(t, p)?, lengths))
}

// ---------------------------------------------------------------------------
// Single-sequence forward passes

pub fn embed_patches(set: &PatchSet, params: &ModelParams, cfg: &EncoderConfig) -> Result<LatentSequence> {
    let mut g = Graph::new(params);
    let blocks: Vec<&[f64]> = set.blocks.iter().map(Vec::as_slice).collect();
    let x = embed_patch_rows_g(&mut g, cfg, &blocks, Some(&set.indices))?;
    Ok(g.value(x).clone())
}

/// One pre-norm block under `prefix` (e.g. `image.block0`).
pub fn encoder_block(x: &LatentSequence, params: &ModelParams, prefix: &str, heads: usize) -> Result<LatentSequence> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("input to {prefix}")));
    }
    let mut g = Graph::new(params);
    let xv = g.input(x.clone());
    let layout = Arc::new(AttnLayout::self_attention(&[x.rows()], false));
    let out = encoder_block_g(&mut g, xv, prefix, heads, layout)?;
    Ok(g.value(out).clone())
}

pub fn encode_image(x: &LatentSequence, params: &ModelParams, cfg: &EncoderConfig) -> Result<LatentSequence> {
    let mut g = Graph::new(params);
    let xv = g.input(x.clone());
    let out = image_encoder_g(&mut g, xv, cfg, &[x.rows()])?;
    Ok(g.value(out).clone())
}

/// `w` must already carry the context row first (see
/// [`crate::alignment::embed_text`]).
pub fn encode_text(w: &LatentSequence, params: &ModelParams, cfg: &EncoderConfig) -> Result<LatentSequence> {
    if w.rows() == 0 || w.rows() - 1 > cfg.max_text_len {
        return Err(Error::invalid(format!(
            "text sequence of {} rows exceeds {} tokens plus context",
            w.rows(),
            cfg.max_text_len
        )));
    }
    let mut g = Graph::new(params);
    let xv = g.input(w.clone());
    let out = text_encoder_g(&mut g, xv, cfg, &[w.rows()])?;
    Ok(g.value(out).clone())
}
