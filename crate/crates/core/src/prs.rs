//! Patch-wise relevance scoring: how likely a pool patch is to come from the
//! image summarised by a context token, and the binary relevance loss.

use crate::autodiff::{sigmoid, Graph, Var, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::params::{EncoderConfig, ModelParams, Similarity};
use crate::tensor::{dot, Matrix};
use crate::transformer::{embed_patch_rows_g, image_encoder_g};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPatch {
    pub source: String,
    pub index: usize,
    pub score: f64,
    /// 1 when the patch was held out from the anchor image itself.
    pub label: u8,
}

/// Encodes a pool patch as a one-token sequence. Only the patch projection
/// is applied; pool patches carry no position.
pub fn embed_pool_patch(block: &[f64], params: &ModelParams, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new(params);
    let x = embed_patch_rows_g(&mut g, cfg, &[block], None)?;
    let z = image_encoder_g(&mut g, x, cfg, &[1])?;
    Ok(g.value(z).row(0).to_vec())
}

pub fn prs_score(z_ct: &[f64], z_p: &[f64], similarity: Similarity) -> Result<f64> {
    if z_ct.len() != z_p.len() {
        return Err(Error::Shape(format!(
            "context token has {} dims, patch latent {}",
            z_ct.len(),
            z_p.len()
        )));
    }
    Ok(match similarity {
        Similarity::SigmoidDot => sigmoid(dot(z_ct, z_p) / (z_ct.len() as f64).sqrt()),
        Similarity::Cosine => {
            let n = (dot(z_ct, z_ct) * dot(z_p, z_p)).sqrt().max(1e-12);
            (1.0 + dot(z_ct, z_p) / n) / 2.0
        }
    })
}

/// Scores for row pairs of `z_ct` and `z_p` (`n × d` each), as `n × 1`.
pub fn prs_scores_g(g: &mut Graph, z_ct: Var, z_p: Var, similarity: Similarity) -> Result<Var> {
    let d = g.value(z_ct).cols();
    match similarity {
        Similarity::SigmoidDot => {
            let logits = g.row_dot(z_ct, z_p)?;
            let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
            Ok(g.sigmoid(logits))
        }
        Similarity::Cosine => {
            let a = g.l2_normalize_rows(z_ct);
            let b = g.l2_normalize_rows(z_p);
            let cos = g.row_dot(a, b)?;
            Ok(g.affine(cos, 0.5, 0.5))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelevanceLoss {
    pub value: f64,
    /// Scores clamped to `[1e-7, 1 - 1e-7]`.
    pub saturated: usize,
}

/// Mean binary cross-entropy of the scores against their labels.
pub fn relevance_loss(scored: &[ScoredPatch]) -> Result<RelevanceLoss> {
    if scored.is_empty() {
        return Err(Error::invalid("relevance loss over no patches"));
    }
    let params = ModelParams::default();
    let mut g = Graph::new(&params);
    let probs = Matrix::from_vec(scored.len(), 1, scored.iter().map(|s| s.score).collect())?;
    let p = g.input(probs);
    let loss = g.bce(p, scored.iter().map(|s| s.label as f64).collect())?;
    Ok(RelevanceLoss {
        value: g.value(loss).scalar(),
        saturated: g.saturation_count(loss),
    })
}

/// Lower clamp bound used by [`relevance_loss`].
pub const SCORE_CLAMP: f64 = PROB_CLAMP;
