//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported call returns a JSON string. The same operations are
//! available natively through [`Demo`], [`specimen`] and [`schedule`].

use std::path::Path;

use insect_fm::alignment::Tokenizer;
use insect_fm::corpus::{generate_synthetic, resolve_images, Image, Level, SyntheticCorpusSpec, TaxonomyRecord};
use insect_fm::evaluation::evaluate_prs;
use insect_fm::patching::{sample_subset, split, PatchGrid};
use insect_fm::pooling::attention_pool;
use insect_fm::prs::{embed_pool_patch, prs_score};
use insect_fm::training::{lr_at, stream_rng, LossConfig, OptimConfig, TrainConfig, Trainer, TrainingData};
use insect_fm::transformer::{embed_patches, encode_image};
use insect_fm::{EncoderConfig, Error, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const DEMO_STREAM: u64 = 100;

fn pixels(image: &Image) -> Vec<u8> {
    image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn describe(record: &TaxonomyRecord) -> Value {
    json!({
        "id": record.id,
        "species": record.label(Level::Species),
        "genus": record.label(Level::Genus),
        "descriptions": record.descriptions.iter().map(|d| &d.text).collect::<Vec<_>>(),
    })
}

fn grid_json(grid: &PatchGrid) -> Value {
    json!({"patch": grid.patch_size, "rows": grid.grid_rows, "cols": grid.grid_cols})
}

/// One synthetic specimen with a random half of its patches kept.
pub fn specimen(classes: usize, index: usize, seed: u64, ratio: f64) -> Result<Value> {
    let spec = SyntheticCorpusSpec::desk(classes, 1, seed);
    let records = generate_synthetic(&spec)?;
    let record = records
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("specimen {index} of {}", records.len())))?;
    let image = &resolve_images(std::slice::from_ref(record), Path::new("."))?[0];
    let grid = split(image, spec.patch_size)?;
    let (kept, _) = sample_subset(&grid, &record.id, ratio, &mut stream_rng(seed, DEMO_STREAM, index as u64))?;
    Ok(json!({
        "record": describe(record),
        "height": image.height,
        "width": image.width,
        "rgb": pixels(image),
        "grid": grid_json(&grid),
        "kept": kept.indices,
    }))
}

/// Learning rate at every step of a `total`-step run.
pub fn schedule(total: usize, lr: f64, warmup_fraction: f64) -> Result<Value> {
    if total == 0 || total > 100_000 {
        return Err(Error::InvalidArgument("total steps must be in 1..=100000".into()));
    }
    let optim = OptimConfig {
        lr,
        warmup_fraction,
        ..OptimConfig::default()
    };
    let lrs: Vec<f64> = (0..total).map(|s| lr_at(s, total, &optim)).collect();
    Ok(json!({"warmup": insect_fm::training::warmup_steps(total, &optim), "lr": lrs}))
}

/// A small relevance-only model trained step by step on a synthetic corpus.
pub struct Demo {
    config: TrainConfig,
    records: Vec<TaxonomyRecord>,
    images: Vec<Image>,
    data: TrainingData,
    trainer: Trainer,
}

impl Demo {
    pub fn new(classes: usize, per_class: usize, seed: u64) -> Result<Self> {
        let mut config = TrainConfig::desk();
        config.seed = seed;
        config.model = EncoderConfig {
            d: 32,
            heads: 2,
            image_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
            ..EncoderConfig::desk()
        };
        config.loss = LossConfig::relevance_only();
        config.schedule.steps = 400;
        config.schedule.batch_size = 8;
        config.validate()?;
        let records = generate_synthetic(&SyntheticCorpusSpec::desk(classes, per_class, seed))?;
        let images = resolve_images(&records, Path::new("."))?;
        let tokenizer = Tokenizer::from_records(&records, config.model.max_text_len)?;
        let data = TrainingData::new(&records, &images, &tokenizer, &config.model)?;
        let trainer = Trainer::new(config.clone(), tokenizer, data.len())?;
        Ok(Self {
            config,
            records,
            images,
            data,
            trainer,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Runs up to `steps` more optimizer steps; reports the last one.
    pub fn train(&mut self, steps: usize) -> Result<Value> {
        let mut last = None;
        for _ in 0..steps {
            if self.trainer.is_done() {
                break;
            }
            last = Some(self.trainer.train_step(&self.data)?);
        }
        Ok(json!({
            "step": self.trainer.step(),
            "total": self.trainer.total_steps(),
            "last": last,
        }))
    }

    /// PRS statistics over the whole corpus.
    pub fn evaluate(&self) -> Result<Value> {
        let e = evaluate_prs(&self.trainer.params, &self.config.model, &self.data, &self.config.sampling, 0)?;
        Ok(json!({"auc": e.auc, "gap": e.gap, "pos_mean": e.pos_mean, "neg_mean": e.neg_mean}))
    }

    /// Scores the held-out patches of specimen `index` and every patch of
    /// specimen `other` against the context token of `index`'s kept half.
    pub fn score(&self, index: usize, other: usize) -> Result<Value> {
        let n = self.len();
        if index >= n || other >= n || index == other {
            return Err(Error::InvalidArgument(format!("need two distinct specimens below {n}")));
        }
        let cfg = &self.config.model;
        let params = &self.trainer.params;
        let grid = &self.data.grids[index];
        let rng = &mut stream_rng(self.config.seed, DEMO_STREAM, index as u64);
        let (kept, held) = sample_subset(grid, &self.data.ids[index], self.config.sampling.ratio, rng)?;
        let z = encode_image(&embed_patches(&kept, params, cfg)?, params, cfg)?;
        let ct = attention_pool(&z, params)?.vector;
        let score = |block: &[f64]| -> Result<f64> { prs_score(&ct, &embed_pool_patch(block, params, cfg)?, cfg.similarity) };
        let own: Vec<Value> = held
            .iter()
            .map(|e| Ok(json!({"index": e.index, "score": score(&e.block)?})))
            .collect::<Result<_>>()?;
        let foreign: Vec<f64> = self.data.grids[other].blocks.iter().map(|b| score(b)).collect::<Result<_>>()?;
        Ok(json!({
            "grid": grid_json(grid),
            "kept": kept.indices,
            "own": own,
            "foreign": foreign,
            "anchor": {"record": describe(&self.records[index]), "rgb": pixels(&self.images[index])},
            "other": {"record": describe(&self.records[other]), "rgb": pixels(&self.images[other])},
            "height": self.images[index].height,
            "width": self.images[index].width,
        }))
    }
}

fn js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = specimen)]
pub fn specimen_js(classes: usize, index: usize, seed: u64, ratio: f64) -> std::result::Result<String, JsError> {
    js(specimen(classes, index, seed, ratio))
}

#[wasm_bindgen(js_name = schedule)]
pub fn schedule_js(total: usize, lr: f64, warmup_fraction: f64) -> std::result::Result<String, JsError> {
    js(schedule(total, lr, warmup_fraction))
}

#[wasm_bindgen]
pub struct Session(Demo);

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(classes: usize, per_class: usize, seed: u64) -> std::result::Result<Session, JsError> {
        Demo::new(classes, per_class, seed).map(Session).map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn size(&self) -> usize {
        self.0.len()
    }

    pub fn train(&mut self, steps: usize) -> std::result::Result<String, JsError> {
        js(self.0.train(steps))
    }

    pub fn evaluate(&self) -> std::result::Result<String, JsError> {
        js(self.0.evaluate())
    }

    pub fn score(&self, index: usize, other: usize) -> std::result::Result<String, JsError> {
        js(self.0.score(index, other))
    }
}
