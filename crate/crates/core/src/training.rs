//! Pretraining objective, optimizer, schedule and the training loop.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::alignment::{contrastive_loss_g, decoder_logits_g, decoder_targets, Tokenizer};
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::corpus::{Image, TaxonomyRecord};
use crate::error::{at_path, Error, Result};
use crate::params::{EncoderConfig, ModelParams};
use crate::patching::{sample_subset, split, PatchGrid, PatchPool, PatchSet, PoolEntry};
use crate::pooling::attention_pool_g;
use crate::prs::prs_scores_g;
use crate::tensor::Matrix;
use crate::transformer::{embed_patch_rows_g, embed_text_g, image_encoder_g, text_encoder_g};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub relevance: bool,
    pub contrastive: bool,
    pub description: bool,
    pub weight_rel: f64,
    pub weight_con: f64,
    pub weight_desc: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            relevance: true,
            contrastive: true,
            description: true,
            weight_rel: 1.0,
            weight_con: 1.0,
            weight_desc: 1.0,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    /// Only the relevance term.
    pub fn relevance_only() -> Self {
        Self {
            contrastive: false,
            description: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            warmup_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Fixed step count; 0 means `epochs` passes over the corpus.
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            steps: 2000,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub ratio: f64,
    pub k_pos: usize,
    pub k_neg: usize,
    pub pool_capacity: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            k_pos: 8,
            k_neg: 8,
            pool_capacity: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 500,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: EncoderConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub sampling: SamplingConfig,
    pub run: RunConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            model: EncoderConfig::desk(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            sampling: SamplingConfig::default(),
            run: RunConfig::default(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            model: EncoderConfig::full_scale(),
            optim: OptimConfig {
                lr: 1.5e-4,
                ..OptimConfig::default()
            },
            schedule: ScheduleConfig {
                epochs: 200,
                steps: 0,
                batch_size: 64,
            },
            sampling: SamplingConfig {
                pool_capacity: 65536,
                ..SamplingConfig::default()
            },
            run: RunConfig {
                checkpoint_every: 5000,
                threads: 1,
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let l = &self.loss;
        for (name, w) in [("weight_rel", l.weight_rel), ("weight_con", l.weight_con), ("weight_desc", l.weight_desc)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be a finite value >= 0, got {w}")));
            }
        }
        if !(l.relevance || l.contrastive || l.description) {
            return Err(Error::Config("at least one loss must be enabled".into()));
        }
        if !(l.temperature > 0.0) {
            return Err(Error::Config("loss.temperature must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config("optim.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.warmup_fraction) {
            return Err(Error::Config("optim.warmup_fraction must be in [0, 1)".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config("optim betas must be in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return Err(Error::Config("optim.eps must be positive, weight_decay and grad_clip >= 0".into()));
        }
        if self.schedule.batch_size == 0 {
            return Err(Error::Config("schedule.batch_size must be positive".into()));
        }
        if self.schedule.steps == 0 && self.schedule.epochs == 0 {
            return Err(Error::Config("one of schedule.steps or schedule.epochs must be positive".into()));
        }
        let s = &self.sampling;
        if !(s.ratio > 0.0 && s.ratio < 1.0) {
            return Err(Error::Config(format!("sampling.ratio {} not in (0, 1)", s.ratio)));
        }
        if l.relevance && s.k_pos + s.k_neg == 0 {
            return Err(Error::Config("relevance loss needs k_pos + k_neg > 0".into()));
        }
        if self.run.threads == 0 {
            return Err(Error::Config("run.threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(at_path(path))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn steps_per_epoch(&self, num_items: usize) -> usize {
        num_items.div_ceil(self.schedule.batch_size).max(1)
    }

    pub fn total_steps(&self, num_items: usize) -> usize {
        if self.schedule.steps > 0 {
            self.schedule.steps
        } else {
            self.schedule.epochs * self.steps_per_epoch(num_items)
        }
    }
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

pub fn warmup_steps(total: usize, optim: &OptimConfig) -> usize {
    (optim.warmup_fraction * total as f64).round() as usize
}

/// Linear warmup to the base rate, then cosine decay reaching 0 on the last
/// step, `total − 1`.
pub fn lr_at(step: usize, total: usize, optim: &OptimConfig) -> f64 {
    let warmup = warmup_steps(total, optim);
    if step < warmup {
        return optim.lr * step as f64 / warmup as f64;
    }
    if step + 1 >= total && step > warmup {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / total.saturating_sub(1 + warmup).max(1) as f64;
    optim.lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Decoupled weight decay is applied to projection matrices (`*.w`) only.
pub fn decays(path: &str) -> bool {
    path.ends_with(".w")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(optim: &OptimConfig) -> Self {
        Self {
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: optim.eps,
            weight_decay: optim.weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Matrix>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (path, g) in grads {
            let p = params
                .get_mut(path)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{path}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{path}`")));
            }
            let m = self.m.entry(path.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(path.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let wd = if decays(path) { self.weight_decay } else { 0.0 };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * *pi);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Data and batches

/// Random stream for one purpose, independent of every other stream.
pub fn stream_rng(seed: u64, kind: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 48) | (n & ((1 << 48) - 1)));
    rng
}

pub const STREAM_INIT: u64 = 1;
pub const STREAM_EPOCH: u64 = 2;
pub const STREAM_STEP: u64 = 3;
pub const STREAM_EVAL: u64 = 4;
pub const STREAM_PROBE: u64 = 5;

/// Corpus prepared for training: patch grids and tokenized descriptions.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub ids: Vec<String>,
    pub grids: Vec<PatchGrid>,
    pub texts: Vec<Vec<usize>>,
    pub bos: usize,
}

impl TrainingData {
    pub fn new(
        records: &[TaxonomyRecord],
        images: &[Image],
        tokenizer: &Tokenizer,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        if records.is_empty() || records.len() != images.len() {
            return Err(Error::invalid(format!(
                "{} records with {} images",
                records.len(),
                images.len()
            )));
        }
        let mut grids = Vec::with_capacity(images.len());
        for (r, img) in records.iter().zip(images) {
            if img.height != cfg.image_height || img.width != cfg.image_width {
                return Err(Error::Shape(format!(
                    "record {}: image is {}x{}, model expects {}x{}",
                    r.id, img.height, img.width, cfg.image_height, cfg.image_width
                )));
            }
            grids.push(split(img, cfg.patch_size)?);
        }
        let texts = records
            .iter()
            .map(|r| tokenizer.encode_descriptions(&r.descriptions))
            .collect::<Result<_>>()?;
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            grids,
            texts,
            bos: tokenizer.bos(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub kept: PatchSet,
    pub positives: Vec<PoolEntry>,
    pub negatives: Vec<PoolEntry>,
    pub text: Vec<usize>,
    /// `[BOS]` followed by `text`.
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

/// Samples each item's kept subset, pushes every held-out patch to the pool,
/// then draws per item up to `k_pos` of its own held-out patches and up to
/// `k_neg` pool patches from other images.
pub fn prepare_batch<R: Rng>(
    data: &TrainingData,
    indices: &[usize],
    pool: &mut PatchPool,
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<Batch> {
    let mut subsets = Vec::with_capacity(indices.len());
    for &i in indices {
        let (set, held) = sample_subset(&data.grids[i], &data.ids[i], sampling.ratio, rng)?;
        subsets.push((i, set, held));
    }
    for (_, _, held) in &subsets {
        pool.push(held.iter().cloned());
    }
    let mut items = Vec::with_capacity(subsets.len());
    for (i, kept, held) in subsets {
        let k = sampling.k_pos.min(held.len());
        let positives: Vec<PoolEntry> = index::sample(rng, held.len(), k)
            .into_iter()
            .map(|j| held[j].clone())
            .collect();
        let id = data.ids[i].clone();
        let eligible = pool.entries().filter(|e| e.source != id).count();
        let negatives = pool.sample(sampling.k_neg.min(eligible), Some(&id), rng)?;
        items.push(BatchItem {
            id,
            kept,
            positives,
            negatives,
            text: data.texts[i].clone(),
            target: std::iter::once(data.bos).chain(data.texts[i].iter().copied()).collect(),
        });
    }
    Ok(Batch { items })
}

// ---------------------------------------------------------------------------
// Objective

/// Loss terms of one batch. Disabled terms are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub relevance: Option<f64>,
    pub contrastive: Option<f64>,
    pub description: Option<f64>,
    pub total: f64,
    pub pos_prs: Option<f64>,
    pub neg_prs: Option<f64>,
    pub saturated: usize,
    pub desc_accuracy: Option<f64>,
}

fn finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{term} loss is {value}")))
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds the weighted objective on `g`; returns the root and its breakdown.
pub fn total_loss_g(
    g: &mut Graph,
    batch: &Batch,
    cfg: &EncoderConfig,
    loss: &LossConfig,
) -> Result<(crate::autodiff::Var, LossBreakdown)> {
    let items = &batch.items;
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }

    // Kept patches of every item, then (for the relevance term) every
    // candidate as its own one-token sequence, all through one encoder pass.
    let mut blocks: Vec<&[f64]> = Vec::new();
    let mut positions = Vec::new();
    let mut ranges = Vec::with_capacity(items.len());
    let mut lengths = Vec::new();
    for it in items {
        if it.kept.is_empty() {
            return Err(Error::invalid(format!("item {} keeps no patches", it.id)));
        }
        ranges.push((blocks.len(), it.kept.len()));
        lengths.push(it.kept.len());
        blocks.extend(it.kept.blocks.iter().map(Vec::as_slice));
        positions.extend_from_slice(&it.kept.indices);
    }
    let kept_rows = blocks.len();
    let x_kept = embed_patch_rows_g(g, cfg, &blocks, Some(&positions))?;

    let mut cand_blocks: Vec<&[f64]> = Vec::new();
    let mut cand_owner = Vec::new();
    let mut labels = Vec::new();
    if loss.relevance {
        for (b, it) in items.iter().enumerate() {
            for (set, y) in [(&it.positives, 1.0), (&it.negatives, 0.0)] {
                for e in set.iter() {
                    cand_blocks.push(&e.block);
                    cand_owner.push(b);
                    labels.push(y);
                }
            }
        }
        if cand_blocks.is_empty() {
            return Err(Error::invalid("relevance loss enabled but the batch has no candidate patches"));
        }
    }
    let x = if cand_blocks.is_empty() {
        x_kept
    } else {
        let x_cand = embed_patch_rows_g(g, cfg, &cand_blocks, None)?;
        lengths.extend(std::iter::repeat_n(1, cand_blocks.len()));
        g.concat_rows(vec![x_kept, x_cand])?
    };
    let z = image_encoder_g(g, x, cfg, &lengths)?;
    let pooled = attention_pool_g(g, z, &ranges, "pool")?;

    let mut terms = Vec::new();
    let mut out = LossBreakdown {
        relevance: None,
        contrastive: None,
        description: None,
        total: 0.0,
        pos_prs: None,
        neg_prs: None,
        saturated: 0,
        desc_accuracy: None,
    };

    if loss.relevance {
        let z_p = g.gather_rows(z, (kept_rows..kept_rows + cand_blocks.len()).collect())?;
        let z_ct = g.gather_rows(pooled, cand_owner)?;
        let scores = prs_scores_g(g, z_ct, z_p, cfg.similarity)?;
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (&s, &y) in g.value(scores).data().iter().zip(&labels) {
            if y == 1.0 { pos.push(s) } else { neg.push(s) }
        }
        let l = g.bce(scores, labels)?;
        out.relevance = Some(finite(g.value(l).scalar(), "relevance")?);
        out.saturated = g.saturation_count(l);
        out.pos_prs = mean(&pos);
        out.neg_prs = mean(&neg);
        terms.push((l, loss.weight_rel));
    }

    if loss.contrastive {
        let z_img = if cfg.separate_contrastive_pool {
            attention_pool_g(g, z, &ranges, cfg.contrastive_pool_prefix())?
        } else {
            pooled
        };
        let texts: Vec<Vec<usize>> = items.iter().map(|it| it.text.clone()).collect();
        let (w_in, t_lengths) = embed_text_g(g, cfg, &texts)?;
        let w_all = text_encoder_g(g, w_in, cfg, &t_lengths)?;
        let mut starts = Vec::with_capacity(t_lengths.len());
        let mut acc = 0;
        for len in &t_lengths {
            starts.push(acc);
            acc += len;
        }
        let w_ct = g.gather_rows(w_all, starts)?;
        let l = contrastive_loss_g(g, z_img, w_ct, loss.temperature)?;
        out.contrastive = Some(finite(g.value(l).scalar(), "contrastive")?);
        terms.push((l, loss.weight_con));
    }

    if loss.description {
        let targets: Vec<Vec<usize>> = items.iter().map(|it| it.target.clone()).collect();
        let logits = decoder_logits_g(g, cfg, z, &ranges, &targets)?;
        let tgt = decoder_targets(&targets, usize::MAX);
        let l = g.cross_entropy(logits, tgt.clone(), items.len() as f64)?;
        out.description = Some(finite(g.value(l).scalar(), "description")?);
        let probs = g.cross_entropy_probs(l).expect("cross-entropy node");
        let (mut hit, mut n) = (0usize, 0usize);
        for (r, t) in tgt.iter().enumerate() {
            if let Some(t) = *t {
                let row = probs.row(r);
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &p)| if p > row[best] { j } else { best });
                hit += (arg == t) as usize;
                n += 1;
            }
        }
        out.desc_accuracy = (n > 0).then(|| hit as f64 / n as f64);
        terms.push((l, loss.weight_desc));
    }

    let root = g.weighted_sum(terms)?;
    out.total = finite(g.value(root).scalar(), "total")?;
    Ok((root, out))
}

/// Forward pass only.
pub fn total_loss(params: &ModelParams, batch: &Batch, cfg: &EncoderConfig, loss: &LossConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new(params);
    total_loss_g(&mut g, batch, cfg, loss).map(|(_, b)| b)
}

/// Loss breakdown and the gradient of the weighted total for every parameter
/// the objective touches.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &Batch,
    cfg: &EncoderConfig,
    loss: &LossConfig,
) -> Result<(LossBreakdown, BTreeMap<String, Matrix>)> {
    let mut g = Graph::new(params);
    let (root, breakdown) = total_loss_g(&mut g, batch, cfg, loss)?;
    let grads = g.backward(root).into_param_grads(params);
    if let Some((path, _)) = grads.iter().find(|(_, m)| !m.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{path}`")));
    }
    Ok((breakdown, grads))
}

/// Expected total at initialization: `ln 2` per relevance term, `2 ln N`
/// for the contrastive term and `n ln |V|` per description.
pub fn init_oracle(batch: &Batch, loss: &LossConfig, vocab_size: usize) -> f64 {
    let n = batch.items.len() as f64;
    let mut total = 0.0;
    if loss.relevance {
        total += loss.weight_rel * LN_2;
    }
    if loss.contrastive {
        total += loss.weight_con * 2.0 * n.ln();
    }
    if loss.description {
        let mean_len = batch.items.iter().map(|it| it.text.len() as f64).sum::<f64>() / n;
        total += loss.weight_desc * mean_len * (vocab_size as f64).ln();
    }
    total
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Append-only per-step records with strictly increasing steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::invalid(format!(
                    "metrics step {} does not follow step {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Drops records of steps at or after `step`.
    pub fn truncate_to(&mut self, step: usize) {
        self.records.retain(|r| r.step < step);
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut log = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            log.push(rec)?;
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(BufReader::new(fs::File::open(path).map_err(at_path(path))?))
    }

    /// Mean total over the first and last `window` records.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        if self.records.is_empty() || window == 0 {
            return None;
        }
        let w = window.min(self.records.len());
        let avg = |rs: &[StepRecord]| rs.iter().map(|r| r.loss.total).sum::<f64>() / rs.len() as f64;
        Some((avg(&self.records[..w]), avg(&self.records[self.records.len() - w..])))
    }
}

// ---------------------------------------------------------------------------
// Training loop

pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Owns parameters, optimizer state and the patch pool.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub tokenizer: Tokenizer,
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub pool: PatchPool,
    step: usize,
    total_steps: usize,
    diverging: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, tokenizer: Tokenizer, num_items: usize) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::invalid("cannot train on an empty corpus"));
        }
        if tokenizer.max_len() != config.model.max_text_len {
            return Err(Error::Config(format!(
                "tokenizer max length {} differs from model.max_text_len {}",
                tokenizer.max_len(),
                config.model.max_text_len
            )));
        }
        let mut rng = stream_rng(config.seed, STREAM_INIT, 0);
        let params = ModelParams::init(&config.model, tokenizer.len(), &mut rng)?;
        Ok(Self {
            optimizer: AdamW::new(&config.optim),
            pool: PatchPool::new(config.sampling.pool_capacity),
            total_steps: config.total_steps(num_items),
            step: 0,
            diverging: 0,
            params,
            tokenizer,
            config,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Item indices of the batch at `step`; each epoch is a fresh
    /// permutation and the last batch of an epoch may be short.
    pub fn batch_indices(&self, step: usize, num_items: usize) -> Vec<usize> {
        let b = self.config.schedule.batch_size;
        let spe = self.config.steps_per_epoch(num_items);
        let epoch = step / spe;
        let mut perm: Vec<usize> = (0..num_items).collect();
        perm.shuffle(&mut stream_rng(self.config.seed, STREAM_EPOCH, epoch as u64));
        let start = (step % spe) * b;
        perm[start..(start + b).min(num_items)].to_vec()
    }

    /// Runs one optimization step and returns its metrics.
    pub fn train_step(&mut self, data: &TrainingData) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let step = self.step;
        let cfg = &self.config;
        let mut rng = stream_rng(cfg.seed, STREAM_STEP, step as u64);
        let indices = self.batch_indices(step, data.len());
        let batch = prepare_batch(data, &indices, &mut self.pool, &cfg.sampling, &mut rng)?;
        let (breakdown, mut grads) = loss_and_grads(&self.params, &batch, &cfg.model, &cfg.loss)?;

        let reference = init_oracle(&batch, &cfg.loss, self.tokenizer.len());
        if breakdown.total > DIVERGENCE_FACTOR * reference {
            self.diverging += 1;
        } else {
            self.diverging = 0;
        }
        if self.diverging >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "total loss {:.6} above {}x the initialization oracle {:.6} for {} consecutive steps \
                     (relevance {:?}, contrastive {:?}, description {:?})",
                    breakdown.total,
                    DIVERGENCE_FACTOR,
                    reference,
                    DIVERGENCE_PATIENCE,
                    breakdown.relevance,
                    breakdown.contrastive,
                    breakdown.description
                ),
            });
        }

        let lr = lr_at(step, self.total_steps, &cfg.optim);
        clip_grad_norm(&mut grads, cfg.optim.grad_clip);
        self.optimizer.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            loss: breakdown,
        })
    }

    /// Trains until `until` (capped at the total), calling `on_step` after
    /// every step.
    pub fn run<F>(&mut self, data: &TrainingData, until: usize, log: &mut MetricsLog, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepRecord) -> Result<()>,
    {
        let until = until.min(self.total_steps);
        while self.step < until {
            let rec = self.train_step(data)?;
            on_step(self, &rec)?;
            log.push(rec)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let entries: Vec<&PoolEntry> = self.pool.entries().collect();
        let header = json!({
            "format": "insect-fm-train",
            "config": self.config,
            "vocab": self.tokenizer.vocab(),
            "step": self.step,
            "total_steps": self.total_steps,
            "diverging": self.diverging,
            "adam_t": self.optimizer.t,
            "pool": {
                "capacity": self.pool.capacity(),
                "sources": entries.iter().map(|e| e.source.as_str()).collect::<Vec<_>>(),
                "indices": entries.iter().map(|e| e.index).collect::<Vec<_>>(),
            },
        });
        let mut ck = Checkpoint::new(header);
        for (path, m) in self.params.iter() {
            ck.tensors.insert(format!("param/{path}"), m.clone());
        }
        for (path, m) in &self.optimizer.m {
            ck.tensors.insert(format!("adam.m/{path}"), m.clone());
        }
        for (path, m) in &self.optimizer.v {
            ck.tensors.insert(format!("adam.v/{path}"), m.clone());
        }
        let pd = self.config.model.patch_dim();
        let blocks: Vec<f64> = entries.iter().flat_map(|e| e.block.iter().copied()).collect();
        ck.tensors
            .insert("pool.blocks".into(), Matrix::from_vec(entries.len(), pd, blocks)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (config, tokenizer, params) = model_from_checkpoint(ck)?;
        let h = &ck.header;
        let field = |name: &str| -> Result<u64> {
            h[name]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("header field `{name}` missing")))
        };
        let mut optimizer = AdamW::new(&config.optim);
        optimizer.t = field("adam_t")?;
        for (key, m) in &ck.tensors {
            if let Some(p) = key.strip_prefix("adam.m/") {
                optimizer.m.insert(p.to_string(), m.clone());
            } else if let Some(p) = key.strip_prefix("adam.v/") {
                optimizer.v.insert(p.to_string(), m.clone());
            }
        }
        let pool_h = &h["pool"];
        let sources: Vec<String> = serde_json::from_value(pool_h["sources"].clone())?;
        let indices: Vec<usize> = serde_json::from_value(pool_h["indices"].clone())?;
        let capacity = pool_h["capacity"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("pool capacity missing".into()))? as usize;
        let blocks = ck
            .tensors
            .get("pool.blocks")
            .ok_or_else(|| Error::Checkpoint("pool.blocks missing".into()))?;
        if sources.len() != indices.len() || blocks.rows() != sources.len() {
            return Err(Error::Checkpoint("pool header and blocks disagree".into()));
        }
        let mut pool = PatchPool::new(capacity);
        pool.push(sources.into_iter().zip(indices).enumerate().map(|(r, (source, index))| PoolEntry {
            source,
            index,
            block: blocks.row(r).to_vec(),
        }));
        Ok(Self {
            step: field("step")? as usize,
            total_steps: field("total_steps")? as usize,
            diverging: field("diverging")? as usize,
            optimizer,
            pool,
            params,
            tokenizer,
            config,
        })
    }
}

/// Configuration, tokenizer and parameters stored in a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Tokenizer, ModelParams)> {
    let config: TrainConfig = serde_json::from_value(ck.header["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let vocab: Vec<String> = serde_json::from_value(ck.header["vocab"].clone())
        .map_err(|e| Error::Checkpoint(format!("vocab: {e}")))?;
    let tokenizer = Tokenizer::new(vocab, config.model.max_text_len)?;
    let mut params = ModelParams::default();
    for (key, m) in &ck.tensors {
        if let Some(p) = key.strip_prefix("param/") {
            params.insert(p, m.clone())?;
        }
    }
    params.validate(&config.model, tokenizer.len())?;
    Ok((config, tokenizer, params))
}

/// Loads a checkpoint file, or `final` inside a checkpoint directory.
pub fn load_model(path: &Path) -> Result<(TrainConfig, Tokenizer, ModelParams)> {
    let file = if path.is_dir() { path.join("final") } else { path.to_path_buf() };
    model_from_checkpoint(&Checkpoint::load(&file)?)
}

/// Full run from initialization.
pub fn train(config: &TrainConfig, data: &TrainingData, tokenizer: &Tokenizer) -> Result<(ModelParams, MetricsLog)> {
    let mut trainer = Trainer::new(config.clone(), tokenizer.clone(), data.len())?;
    let mut log = MetricsLog::new();
    let total = trainer.total_steps();
    trainer.run(data, total, &mut log, |_, _| Ok(()))?;
    Ok((trainer.params, log))
}
