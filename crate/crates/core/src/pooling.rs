//! Single-query attention pooling: a learned placeholder token attends over
//! a sequence of latents and returns one context vector.

use std::sync::Arc;

use crate::autodiff::{AttnLayout, Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Matrix;
use crate::transformer::{linear_g, projection_g, LatentSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextToken {
    pub vector: Vec<f64>,
    pub source: TokenSource,
}

/// Pools each `(start, len)` row range of `z` to one row. Returns a
/// `ranges.len() × d` matrix.
pub fn attention_pool_g(g: &mut Graph, z: Var, ranges: &[(usize, usize)], prefix: &str) -> Result<Var> {
    if let Some(r) = ranges.iter().find(|r| r.1 == 0) {
        return Err(Error::invalid(format!("attention pooling over an empty sequence at row {}", r.0)));
    }
    let query = g.param(&format!("{prefix}.query"))?;
    let q = linear_g(g, query, &format!("{prefix}.q"))?;
    let q = g.gather_rows(q, vec![0; ranges.len()])?;
    let k = projection_g(g, z, &format!("{prefix}.k"))?;
    let v = linear_g(g, z, &format!("{prefix}.v"))?;
    let d = g.value(q).cols();
    let layout = Arc::new(AttnLayout {
        segments: ranges
            .iter()
            .enumerate()
            .map(|(b, &(start, len))| Segment {
                q_start: b,
                q_len: 1,
                k_start: start,
                k_len: len,
            })
            .collect(),
        causal: false,
    });
    g.attention(q, k, v, 1, 1.0 / (d as f64).sqrt(), layout)
}

/// Pooled token together with the attention weight of every row.
pub fn attention_pool_with_weights(
    z_s: &LatentSequence,
    params: &ModelParams,
    prefix: &str,
) -> Result<(ContextToken, Vec<f64>)> {
    if z_s.rows() == 0 {
        return Err(Error::invalid("attention pooling over an empty sequence"));
    }
    let mut g = Graph::new(params);
    let z = g.input(z_s.clone());
    let pooled = attention_pool_g(&mut g, z, &[(0, z_s.rows())], prefix)?;
    let weights = g.attention_weights(pooled).expect("attention node")[0][0]
        .data()
        .to_vec();
    Ok((
        ContextToken {
            vector: g.value(pooled).row(0).to_vec(),
            source: TokenSource::Image,
        },
        weights,
    ))
}

pub fn attention_pool(z_s: &LatentSequence, params: &ModelParams) -> Result<ContextToken> {
    attention_pool_with_weights(z_s, params, "pool").map(|(t, _)| t)
}

/// `z W_v + b_v` for every row; the points the pooled token is a convex
/// combination of.
pub fn value_rows(z_s: &LatentSequence, params: &ModelParams, prefix: &str) -> Result<Matrix> {
    let mut g = Graph::new(params);
    let z = g.input(z_s.clone());
    let v = linear_g(&mut g, z, &format!("{prefix}.v"))?;
    Ok(g.value(v).clone())
}
