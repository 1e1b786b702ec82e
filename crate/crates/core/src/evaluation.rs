//! Transfer protocols on frozen parameters: PRS discrimination, linear
//! probing of the pooled context token and zero-shot description matching.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::Tokenizer;
use crate::autodiff::Graph;
use crate::corpus::{Level, TaxonomyRecord};
use crate::error::{Error, Result};
use crate::params::{EncoderConfig, ModelParams};
use crate::patching::{sample_subset, PatchGrid, PatchPool};
use crate::pooling::attention_pool_g;
use crate::prs::prs_scores_g;
use crate::tensor::{dot, Matrix};
use crate::training::{
    stream_rng, AdamW, OptimConfig, SamplingConfig, TrainingData, STREAM_EVAL, STREAM_PROBE,
};
use crate::transformer::{embed_patch_rows_g, embed_text_g, image_encoder_g, text_encoder_g};

const CHUNK: usize = 32;

/// Pooled context token of every whole image, one row each.
pub fn image_contexts(params: &ModelParams, cfg: &EncoderConfig, grids: &[PatchGrid], prefix: &str) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(grids.len());
    for chunk in grids.chunks(CHUNK) {
        let mut g = Graph::new(params);
        let mut blocks: Vec<&[f64]> = Vec::new();
        let mut positions = Vec::new();
        let mut ranges = Vec::new();
        let mut lengths = Vec::new();
        for grid in chunk {
            ranges.push((blocks.len(), grid.num_patches()));
            lengths.push(grid.num_patches());
            blocks.extend(grid.blocks.iter().map(Vec::as_slice));
            positions.extend(0..grid.num_patches());
        }
        let x = embed_patch_rows_g(&mut g, cfg, &blocks, Some(&positions))?;
        let z = image_encoder_g(&mut g, x, cfg, &lengths)?;
        let pooled = attention_pool_g(&mut g, z, &ranges, prefix)?;
        let v = g.value(pooled);
        rows.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
    }
    Matrix::from_rows(&rows).or_else(|_| Ok(Matrix::zeros(0, cfg.d)))
}

/// Text context token (`w_ct` after the text encoder) of every sequence.
pub fn text_contexts(params: &ModelParams, cfg: &EncoderConfig, texts: &[Vec<usize>]) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(CHUNK) {
        let mut g = Graph::new(params);
        let (x, lengths) = embed_text_g(&mut g, cfg, chunk)?;
        let w = text_encoder_g(&mut g, x, cfg, &lengths)?;
        let v = g.value(w);
        let mut start = 0;
        for len in lengths {
            rows.push(v.row(start).to_vec());
            start += len;
        }
    }
    Matrix::from_rows(&rows).or_else(|_| Ok(Matrix::zeros(0, cfg.d)))
}

// ---------------------------------------------------------------------------
// PRS discrimination

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrsEvaluation {
    pub auc: f64,
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub gap: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U over average ranks).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Evaluation("ROC-AUC needs positives and negatives".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|(_, p)| *p).count() as f64;
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Scores, for every image, up to `k_pos` of its own held-out patches and
/// up to `k_neg` held-out patches of other images against the context token
/// of its kept subset.
pub fn evaluate_prs(
    params: &ModelParams,
    cfg: &EncoderConfig,
    data: &TrainingData,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<PrsEvaluation> {
    let mut rng = stream_rng(seed, STREAM_EVAL, 0);
    let mut subsets = Vec::with_capacity(data.len());
    let mut pool = PatchPool::new(usize::MAX);
    for (grid, id) in data.grids.iter().zip(&data.ids) {
        let (set, held) = sample_subset(grid, id, sampling.ratio, &mut rng)?;
        pool.push(held.iter().cloned());
        subsets.push((set, held));
    }
    let mut candidates = Vec::with_capacity(data.len());
    for ((_, held), id) in subsets.iter().zip(&data.ids) {
        let k = sampling.k_pos.min(held.len());
        let pos: Vec<_> = index::sample(&mut rng, held.len(), k).into_iter().map(|j| held[j].clone()).collect();
        let eligible = pool.entries().filter(|e| &e.source != id).count();
        let neg = pool.sample(sampling.k_neg.min(eligible), Some(id), &mut rng)?;
        candidates.push((pos, neg));
    }

    let (mut pos_scores, mut neg_scores) = (Vec::new(), Vec::new());
    let items: Vec<usize> = (0..data.len()).collect();
    for chunk in items.chunks(CHUNK / 2) {
        let mut g = Graph::new(params);
        let mut blocks: Vec<&[f64]> = Vec::new();
        let mut positions = Vec::new();
        let mut ranges = Vec::new();
        let mut lengths = Vec::new();
        for &i in chunk {
            let set = &subsets[i].0;
            ranges.push((blocks.len(), set.len()));
            lengths.push(set.len());
            blocks.extend(set.blocks.iter().map(Vec::as_slice));
            positions.extend_from_slice(&set.indices);
        }
        let kept_rows = blocks.len();
        let mut cand: Vec<&[f64]> = Vec::new();
        let mut owner = Vec::new();
        let mut labels = Vec::new();
        for (b, &i) in chunk.iter().enumerate() {
            let (pos, neg) = &candidates[i];
            for (set, y) in [(pos, true), (neg, false)] {
                for e in set {
                    cand.push(&e.block);
                    owner.push(b);
                    labels.push(y);
                }
            }
        }
        if cand.is_empty() {
            continue;
        }
        let x_kept = embed_patch_rows_g(&mut g, cfg, &blocks, Some(&positions))?;
        let x_cand = embed_patch_rows_g(&mut g, cfg, &cand, None)?;
        lengths.extend(std::iter::repeat_n(1, cand.len()));
        let x = g.concat_rows(vec![x_kept, x_cand])?;
        let z = image_encoder_g(&mut g, x, cfg, &lengths)?;
        let pooled = attention_pool_g(&mut g, z, &ranges, "pool")?;
        let z_p = g.gather_rows(z, (kept_rows..kept_rows + cand.len()).collect())?;
        let z_ct = g.gather_rows(pooled, owner)?;
        let s = prs_scores_g(&mut g, z_ct, z_p, cfg.similarity)?;
        for (&v, &y) in g.value(s).data().iter().zip(&labels) {
            if y { pos_scores.push(v) } else { neg_scores.push(v) }
        }
    }
    let auc = roc_auc(&pos_scores, &neg_scores)?;
    let pos_mean = pos_scores.iter().sum::<f64>() / pos_scores.len() as f64;
    let neg_mean = neg_scores.iter().sum::<f64>() / neg_scores.len() as f64;
    Ok(PrsEvaluation {
        auc,
        pos_mean,
        neg_mean,
        gap: pos_mean - neg_mean,
        n_pos: pos_scores.len(),
        n_neg: neg_scores.len(),
    })
}

// ---------------------------------------------------------------------------
// Classification protocols

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub level: Level,
    pub steps: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            level: Level::Species,
            steps: 200,
            lr: 1e-3,
            train_fraction: 0.8,
            seed: 0,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    }
}

pub const TIE_RULE: &str = "lowest class index";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub protocol: String,
    pub level: Level,
    pub top1: f64,
    pub top5: f64,
    pub per_class: BTreeMap<String, f64>,
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub tie_rule: String,
    pub config: serde_json::Value,
    pub config_hash: String,
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_hash(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Class index of every label; classes are sorted by name.
pub fn class_index(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let idx = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is a class"))
        .collect();
    (classes, idx)
}

/// Position of `truth` when classes are ranked by descending score, ties
/// ranked by class index.
fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

fn accuracies(
    scores: &[Vec<f64>],
    truth: &[usize],
    classes: &[String],
) -> (f64, f64, BTreeMap<String, f64>) {
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (s, &t) in scores.iter().zip(truth) {
        let r = rank_of(s, t);
        top1 += (r == 0) as usize;
        top5 += (r < 5) as usize;
        let e = per.entry(t).or_default();
        e.0 += (r == 0) as usize;
        e.1 += 1;
    }
    let n = truth.len().max(1) as f64;
    let per_class = per
        .into_iter()
        .map(|(c, (hit, tot))| (classes[c].clone(), hit as f64 / tot as f64))
        .collect();
    (top1 as f64 / n, top5 as f64 / n, per_class)
}

/// Trains a linear classifier on standardized features of a random
/// `train_fraction` split and reports accuracy on the rest.
pub fn linear_probe(features: &Matrix, labels: &[String], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = features.rows();
    if n != labels.len() || n == 0 {
        return Err(Error::Evaluation(format!("{n} feature rows for {} labels", labels.len())));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Evaluation("train_fraction must be in (0, 1)".into()));
    }
    let (classes, truth) = class_index(labels);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(cfg.seed, STREAM_PROBE, 0));
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).min(n);
    let (train, test) = order.split_at(n_train);
    if test.is_empty() || train.is_empty() {
        return Err(Error::Evaluation(format!("a {n}-item corpus leaves an empty split")));
    }
    let seen: BTreeSet<usize> = train.iter().map(|&i| truth[i]).collect();
    if let Some(c) = (0..classes.len()).find(|c| !seen.contains(c)) {
        return Err(Error::Evaluation(format!("class `{}` is absent from the training split", classes[c])));
    }

    let d = features.cols();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        for ((s, m), v) in sd.iter_mut().zip(&mean).zip(features.row(i)) {
            *s += (v - m) * (v - m);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-8));
    let standardize = |rows: &[usize]| -> Result<Matrix> {
        let data = rows
            .iter()
            .flat_map(|&i| features.row(i).iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s))
            .collect();
        Matrix::from_vec(rows.len(), d, data)
    };
    let x_train = standardize(train)?;
    let x_test = standardize(test)?;

    let k = classes.len();
    let mut params = ModelParams::default();
    params.insert("probe.w", Matrix::zeros(d, k))?;
    params.insert("probe.b", Matrix::zeros(1, k))?;
    let mut opt = AdamW::new(&OptimConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
        ..OptimConfig::default()
    });
    let targets: Vec<Option<usize>> = train.iter().map(|&i| Some(truth[i])).collect();
    for _ in 0..cfg.steps {
        let grads = {
            let mut g = Graph::new(&params);
            let x = g.input(x_train.clone());
            let w = g.param("probe.w")?;
            let b = g.param("probe.b")?;
            let logits = g.matmul(x, w)?;
            let logits = g.add_row(logits, b)?;
            let loss = g.cross_entropy(logits, targets.clone(), train.len() as f64)?;
            g.backward(loss).into_param_grads(&params)
        };
        opt.step(&mut params, &grads, cfg.lr)?;
    }
    let logits = x_test.matmul(&params.get("probe.w").expect("probe weights").clone());
    let bias = params.get("probe.b").expect("probe bias").row(0).to_vec();
    let scores: Vec<Vec<f64>> = (0..logits.rows())
        .map(|r| logits.row(r).iter().zip(&bias).map(|(a, b)| a + b).collect())
        .collect();
    let test_truth: Vec<usize> = test.iter().map(|&i| truth[i]).collect();
    let (top1, top5, per_class) = accuracies(&scores, &test_truth, &classes);
    let config = serde_json::to_value(cfg)?;
    Ok(ProbeResult {
        protocol: "linear_probe".into(),
        level: cfg.level,
        top1,
        top5,
        per_class,
        classes,
        n_train: train.len(),
        n_test: test.len(),
        tie_rule: TIE_RULE.into(),
        config_hash: config_hash(&config),
        config,
    })
}

/// Assigns each image to the class whose description token has the highest
/// cosine similarity with its image token. Ties go to the lowest class
/// index.
pub fn zero_shot_from_features(
    image_tokens: &Matrix,
    labels: &[String],
    classes: &[String],
    class_tokens: &Matrix,
    level: Level,
) -> Result<ProbeResult> {
    if image_tokens.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Evaluation("one label per image token is required".into()));
    }
    if class_tokens.rows() != classes.len() {
        return Err(Error::Evaluation("one description token per class is required".into()));
    }
    let mut truth = Vec::with_capacity(labels.len());
    for l in labels {
        let c = classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| Error::Evaluation(format!("no description for class `{l}`")))?;
        truth.push(c);
    }
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = dot(v, v).sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect()
    };
    let class_units: Vec<Vec<f64>> = (0..class_tokens.rows()).map(|c| unit(class_tokens.row(c))).collect();
    let scores: Vec<Vec<f64>> = (0..image_tokens.rows())
        .map(|i| {
            let z = unit(image_tokens.row(i));
            class_units.iter().map(|w| dot(&z, w)).collect()
        })
        .collect();
    let (top1, top5, per_class) = accuracies(&scores, &truth, classes);
    let config = serde_json::json!({ "level": level, "similarity": "cosine", "tie_rule": TIE_RULE });
    Ok(ProbeResult {
        protocol: "zero_shot".into(),
        level,
        top1,
        top5,
        per_class,
        classes: classes.to_vec(),
        n_train: 0,
        n_test: labels.len(),
        tie_rule: TIE_RULE.into(),
        config_hash: config_hash(&config),
        config,
    })
}

/// One description per class at `level`: the first record (by id) of the
/// class, with its descriptions from the top of the hierarchy down to
/// `level`.
pub fn class_descriptions(
    records: &[TaxonomyRecord],
    level: Level,
    tokenizer: &Tokenizer,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    let mut sorted: Vec<&TaxonomyRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for r in sorted {
        let class = r.label(level).to_string();
        if out.contains_key(&class) {
            continue;
        }
        let descs: Vec<_> = r.descriptions.iter().filter(|d| d.level <= level).cloned().collect();
        out.insert(class, tokenizer.encode_descriptions(&descs)?);
    }
    Ok(out)
}

/// Zero-shot protocol on a prepared corpus.
pub fn zero_shot(
    params: &ModelParams,
    cfg: &EncoderConfig,
    data: &TrainingData,
    labels: &[String],
    descriptions: &BTreeMap<String, Vec<usize>>,
    level: Level,
) -> Result<ProbeResult> {
    let classes: Vec<String> = descriptions.keys().cloned().collect();
    let texts: Vec<Vec<usize>> = descriptions.values().cloned().collect();
    let class_tokens = text_contexts(params, cfg, &texts)?;
    let image_tokens = image_contexts(params, cfg, &data.grids, cfg.contrastive_pool_prefix())?;
    zero_shot_from_features(&image_tokens, labels, &classes, &class_tokens, level)
}

/// Linear probe on the pooled context tokens of a prepared corpus.
pub fn probe_model(
    params: &ModelParams,
    cfg: &EncoderConfig,
    data: &TrainingData,
    labels: &[String],
    probe: &ProbeConfig,
) -> Result<ProbeResult> {
    let feats = image_contexts(params, cfg, &data.grids, "pool")?;
    linear_probe(&feats, labels, probe)
}

/// Labels of every record at `level`.
pub fn labels_at(records: &[TaxonomyRecord], level: Level) -> Vec<String> {
    records.iter().map(|r| r.label(level).to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let pos = [0.9, 0.4, 0.4, 0.7, 0.1];
        let neg = [0.4, 0.2, 0.8, 0.1, 0.1, 0.3];
        assert!((roc_auc(&pos, &neg).unwrap() - brute_auc(&pos, &neg)).abs() < 1e-15);
        assert_eq!(roc_auc(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
        assert!(roc_auc(&[], &[0.1]).is_err());
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 0);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 2);
        assert_eq!(rank_of(&[0.1, 0.9, 0.5], 2), 1);
    }

    #[test]
    fn one_class_probe_is_perfect() {
        let feats = Matrix::from_vec(10, 2, (0..20).map(|i| i as f64).collect()).unwrap();
        let labels = vec!["a".to_string(); 10];
        let r = linear_probe(&feats, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.top5, 1.0);
    }

    #[test]
    fn separable_probe_and_determinism() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            let mut r: Vec<f64> = (0..3).map(|k| (k == c) as u8 as f64).collect();
            r.push((i as f64).cos());
            rows.push(r);
            labels.push(format!("c{c}"));
        }
        let feats = Matrix::from_rows(&rows).unwrap();
        let a = linear_probe(&feats, &labels, &ProbeConfig::default()).unwrap();
        let b = linear_probe(&feats, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.top1 > 0.9, "{}", a.top1);
        assert!(a.top5 >= a.top1);
    }

    #[test]
    fn missing_training_class_is_an_error() {
        let feats = Matrix::zeros(5, 2);
        let mut labels = vec!["a".to_string(); 5];
        // with 5 items the split keeps 4 for training; put the lone "b" in the test slot
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut stream_rng(0, STREAM_PROBE, 0));
        labels[order[4]] = "b".into();
        assert!(linear_probe(&feats, &labels, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn identical_descriptions_pick_the_first_class() {
        let img = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let labels = vec!["a".to_string(), "b".into(), "c".into()];
        let classes = labels.clone();
        let same = Matrix::from_rows(&vec![vec![0.3, 0.4]; 3]).unwrap();
        let r = zero_shot_from_features(&img, &labels, &classes, &same, Level::Species).unwrap();
        assert!((r.top1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class["a"], 1.0);
    }

    #[test]
    fn zero_shot_ignores_description_scale() {
        let img = Matrix::from_rows(&[vec![1.0, 0.2], vec![-0.3, 1.0], vec![0.5, 0.5]]).unwrap();
        let labels = vec!["a".to_string(), "b".into(), "a".into()];
        let classes = vec!["a".to_string(), "b".into()];
        let w = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.8]]).unwrap();
        let mut w3 = w.clone();
        w3.scale_in_place(3.7);
        let a = zero_shot_from_features(&img, &labels, &classes, &w, Level::Species).unwrap();
        let b = zero_shot_from_features(&img, &labels, &classes, &w3, Level::Species).unwrap();
        assert_eq!(a.top1, b.top1);
        assert_eq!(a.per_class, b.per_class);
        assert!(zero_shot_from_features(&img, &labels, &classes[..1], &w.select_rows(&[0]), Level::Species).is_err());
    }
}

