//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{Image, RESERVED};
use crate::error::{Error, Result};
use crate::params::{EncoderConfig, ModelParams};
use crate::patching::{split, PatchPool};
use crate::tensor::Matrix;
use crate::training::{loss_and_grads, prepare_batch, total_loss, Batch, LossConfig, TrainConfig, TrainingData};

/// A scalar function of the parameters with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &ModelParams) -> Result<f64>;
    fn gradient(&self, params: &ModelParams) -> Result<BTreeMap<String, Matrix>>;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stencil {
    /// `(L(θ+ε) − L(θ−ε)) / 2ε`
    TwoPoint,
    /// `(−L(θ+2ε) + 8L(θ+ε) − 8L(θ−ε) + L(θ−2ε)) / 12ε`
    FourPoint,
}

/// Compares the analytic gradient with `(L(θ+ε) − L(θ−ε)) / 2ε` on up to
/// `per_tensor` random entries of every parameter the gradient covers.
pub fn grad_check<O: Objective, R: Rng>(
    objective: &O,
    params: &ModelParams,
    epsilon: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    grad_check_with(objective, params, Stencil::TwoPoint, epsilon, per_tensor, rng)
}

pub fn grad_check_with<O: Objective, R: Rng>(
    objective: &O,
    params: &ModelParams,
    stencil: Stencil,
    epsilon: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let grads = objective.gradient(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (path, g) in &grads {
        let n = g.len();
        for i in index::sample(rng, n, per_tensor.min(n)) {
            let original = probe.get(path).expect("gradient path is a parameter").data()[i];
            let mut at = |h: f64| -> Result<f64> {
                probe.get_mut(path).unwrap().data_mut()[i] = original + h;
                let l = objective.loss(&probe);
                probe.get_mut(path).unwrap().data_mut()[i] = original;
                l
            };
            let numeric = match stencil {
                Stencil::TwoPoint => (at(epsilon)? - at(-epsilon)?) / (2.0 * epsilon),
                Stencil::FourPoint => {
                    (-at(2.0 * epsilon)? + 8.0 * at(epsilon)? - 8.0 * at(-epsilon)? + at(-2.0 * epsilon)?)
                        / (12.0 * epsilon)
                }
            };
            let analytic = g.data()[i];
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_path.is_empty() {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst_path: path.clone(),
                    worst_index: i,
                    analytic,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// `Σ w_i (θ_i − t_i)²` over every parameter entry.
pub struct Quadratic {
    pub target: ModelParams,
    pub weight: f64,
}

impl Objective for Quadratic {
    fn loss(&self, params: &ModelParams) -> Result<f64> {
        let mut total = 0.0;
        for (path, m) in params.iter() {
            let t = self
                .target
                .get(path)
                .ok_or_else(|| Error::Shape(format!("no target for `{path}`")))?;
            total += m.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(self.weight * total)
    }

    fn gradient(&self, params: &ModelParams) -> Result<BTreeMap<String, Matrix>> {
        params
            .iter()
            .map(|(path, m)| {
                let t = self
                    .target
                    .get(path)
                    .ok_or_else(|| Error::Shape(format!("no target for `{path}`")))?;
                let data = m.data().iter().zip(t.data()).map(|(a, b)| 2.0 * self.weight * (a - b)).collect();
                Ok((path.clone(), Matrix::from_vec(m.rows(), m.cols(), data)?))
            })
            .collect()
    }
}

/// The pretraining objective on one fixed batch.
pub struct BatchObjective {
    pub batch: Batch,
    pub model: EncoderConfig,
    pub loss: LossConfig,
}

impl Objective for BatchObjective {
    fn loss(&self, params: &ModelParams) -> Result<f64> {
        total_loss(params, &self.batch, &self.model, &self.loss).map(|b| b.total)
    }

    fn gradient(&self, params: &ModelParams) -> Result<BTreeMap<String, Matrix>> {
        loss_and_grads(params, &self.batch, &self.model, &self.loss).map(|(_, g)| g)
    }
}

/// Vocabulary size of random gradient-check instances.
pub const CHECK_VOCAB: usize = 16;

/// Random instance for `config`: `batch_size` uniform-noise images, random
/// full-length token sequences, and parameters moved away from their
/// initialization by uniform noise of half-width `spread` so no gradient is
/// degenerate.
pub fn random_instance(config: &TrainConfig, seed: u64, spread: f64) -> Result<(ModelParams, Batch)> {
    config.validate()?;
    let cfg = &config.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(cfg, CHECK_VOCAB, &mut rng)?;
    for (_, m) in params.iter_mut() {
        for v in m.data_mut() {
            *v += rng.gen_range(-spread..spread);
        }
    }
    let n = config.schedule.batch_size;
    let mut ids = Vec::with_capacity(n);
    let mut grids = Vec::with_capacity(n);
    let mut texts = Vec::with_capacity(n);
    for b in 0..n {
        let pixels = (0..cfg.image_height * cfg.image_width * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        grids.push(split(&Image::new(cfg.image_height, cfg.image_width, pixels)?, cfg.patch_size)?);
        ids.push(format!("check-{b}"));
        texts.push(
            (0..cfg.max_text_len)
                .map(|_| rng.gen_range(RESERVED.len()..CHECK_VOCAB))
                .collect(),
        );
    }
    let data = TrainingData {
        ids,
        grids,
        texts,
        bos: 1,
    };
    let mut pool = PatchPool::new(config.sampling.pool_capacity.max(n * cfg.num_patches()));
    let all: Vec<usize> = (0..n).collect();
    let batch = prepare_batch(&data, &all, &mut pool, &config.sampling, &mut rng)?;
    Ok((params, batch))
}

pub const LOSS_NAMES: [&str; 3] = ["relevance", "contrastive", "description"];

/// Half-width of the parameter noise in [`check_losses`] instances.
pub const CHECK_SPREAD: f64 = 0.5;
/// Step of the four-point stencil in [`check_losses`]. Small enough that the
/// `O(ε⁴)` truncation stays below 1e-6 relative, large enough that forward
/// pass rounding (around 1e-13 in the loss) does not dominate.
pub const CHECK_EPSILON: f64 = 3e-3;

/// Gradient check of each loss term on its own, then of the weighted total,
/// using the four-point stencil.
pub fn check_losses(config: &TrainConfig, seed: u64, per_tensor: usize) -> Result<BTreeMap<String, GradCheckReport>> {
    let (params, batch) = random_instance(config, seed, CHECK_SPREAD)?;
    let mut out = BTreeMap::new();
    let single = |name: &str| LossConfig {
        relevance: name == "relevance",
        contrastive: name == "contrastive",
        description: name == "description",
        ..config.loss.clone()
    };
    let mut runs: Vec<(String, LossConfig)> = LOSS_NAMES.iter().map(|n| (n.to_string(), single(n))).collect();
    runs.push(("total".into(), config.loss.clone()));
    for (i, (name, loss)) in runs.into_iter().enumerate() {
        let objective = BatchObjective {
            batch: batch.clone(),
            model: config.model.clone(),
            loss,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 + 1));
        let report = grad_check_with(&objective, &params, Stencil::FourPoint, CHECK_EPSILON, per_tensor, &mut rng)?;
        out.insert(name, report);
    }
    Ok(out)
}

/// Model and sampling sizes of the standard small instance: `d = 8`, two
/// heads, 4 kept patches and 4-token descriptions, two pairs.
pub fn small_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model = EncoderConfig {
        d: 8,
        heads: 2,
        image_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        patch_size: 4,
        image_height: 16,
        image_width: 8,
        max_text_len: 4,
        ..EncoderConfig::desk()
    };
    c.schedule.batch_size = 2;
    c.sampling.k_pos = 2;
    c.sampling.k_neg = 2;
    c
}
