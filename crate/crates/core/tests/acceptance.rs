//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line to
//! stdout (bypassing the test harness capture) and the test fails if any
//! criterion does.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use insect_fm::alignment::{decode_description, Tokenizer};
use insect_fm::autodiff::{AttnLayout, Graph};
use insect_fm::checkpoint::Checkpoint;
use insect_fm::corpus::{generate_synthetic, resolve_images, Level, SyntheticCorpusSpec, TaxonomyRecord};
use insect_fm::evaluation::{class_descriptions, evaluate_prs, labels_at, probe_model, zero_shot, ProbeConfig};
use insect_fm::gradcheck::{check_losses, small_config};
use insect_fm::patching::{reassemble, split, PatchPool};
use insect_fm::pooling::attention_pool;
use insect_fm::training::{
    lr_at, prepare_batch, stream_rng, total_loss, train, LossConfig, MetricsLog, SamplingConfig, TrainConfig,
    Trainer, TrainingData, STREAM_INIT,
};
use insect_fm::{EncoderConfig, Matrix, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_CORPUS_SEED: u64 = 7;
const HELD_OUT_SEED: u64 = 1007;
const CLASSES: usize = 8;
const PER_CLASS: usize = 64;
const PROBE_PER_CLASS: usize = 128;
const PROBE_SPLITS: u64 = 5;

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "criterion {id} [{name}]: {verdict} {detail}");
        let _ = out.flush();
        if !pass {
            self.failed.push(format!("{id} {name}: {detail}"));
        }
    }
}

struct Corpus {
    records: Vec<TaxonomyRecord>,
    data: TrainingData,
}

fn corpus(per_class: usize, seed: u64, tokenizer: &Tokenizer, model: &EncoderConfig) -> Corpus {
    let records = generate_synthetic(&SyntheticCorpusSpec::desk(CLASSES, per_class, seed)).unwrap();
    let images = resolve_images(&records, Path::new(".")).unwrap();
    let data = TrainingData::new(&records, &images, tokenizer, model).unwrap();
    Corpus { records, data }
}

struct Setup {
    config: TrainConfig,
    tokenizer: Tokenizer,
    train: Corpus,
    held_out: Corpus,
    probe_set: Corpus,
}

impl Setup {
    fn new() -> Self {
        let config = TrainConfig::desk();
        let records = generate_synthetic(&SyntheticCorpusSpec::desk(CLASSES, PER_CLASS, TRAIN_CORPUS_SEED)).unwrap();
        let tokenizer = Tokenizer::from_records(&records, config.model.max_text_len).unwrap();
        let train = corpus(PER_CLASS, TRAIN_CORPUS_SEED, &tokenizer, &config.model);
        let held_out = corpus(PER_CLASS, HELD_OUT_SEED, &tokenizer, &config.model);
        let probe_set = corpus(PROBE_PER_CLASS, HELD_OUT_SEED, &tokenizer, &config.model);
        Setup {
            config,
            tokenizer,
            train,
            held_out,
            probe_set,
        }
    }

    fn train(&self, seed: u64, loss: LossConfig) -> (ModelParams, MetricsLog) {
        let config = TrainConfig {
            seed,
            loss,
            ..self.config.clone()
        };
        train(&config, &self.train.data, &self.tokenizer).unwrap()
    }

    /// Mean top-1 over several random train/test splits of the probe set.
    fn probe(&self, params: &ModelParams) -> f64 {
        let labels = labels_at(&self.probe_set.records, Level::Species);
        let total: f64 = (0..PROBE_SPLITS)
            .map(|seed| {
                let cfg = ProbeConfig {
                    seed,
                    ..ProbeConfig::default()
                };
                probe_model(params, &self.config.model, &self.probe_set.data, &labels, &cfg).unwrap().top1
            })
            .sum();
        total / PROBE_SPLITS as f64
    }
}

fn gradient_correctness(r: &mut Report) {
    let start = Instant::now();
    let cfg = small_config();
    let mut worst = (0.0f64, String::new());
    for seed in 0..5 {
        for (name, rep) in check_losses(&cfg, seed, 8).unwrap() {
            if rep.max_rel_error > worst.0 {
                worst = (rep.max_rel_error, format!("{name} seed {seed} {}", rep.worst_path));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.0 < 1e-4 && elapsed < Duration::from_secs(60);
    r.line(
        1,
        "gradient correctness",
        pass,
        format!("max rel error {:.2e} ({}) over 4 losses x 5 instances in {:.1?}", worst.0, worst.1, elapsed),
    );
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().zip(row).for_each(|(o, x)| *o = x / norm);
    }
    m
}

fn loss_at_init(r: &mut Report) {
    let start = Instant::now();
    let config = TrainConfig::desk();
    let records = generate_synthetic(&SyntheticCorpusSpec::desk(CLASSES, 2, 3)).unwrap();
    let tokenizer = Tokenizer::from_records(&records, config.model.max_text_len).unwrap();
    let data = corpus(2, 3, &tokenizer, &config.model).data;
    let sampling = SamplingConfig {
        k_pos: 8,
        k_neg: 8,
        ..config.sampling.clone()
    };
    let n = 8.0f64;
    let vocab = tokenizer.len() as f64;
    let (con_target, desc_target) = (2.0 * n.ln(), vocab.ln());
    let mut worst = [0.0f64; 3];
    for seed in 0..100u64 {
        let params = ModelParams::init(&config.model, tokenizer.len(), &mut stream_rng(seed, STREAM_INIT, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..CLASSES).map(|c| 2 * c + rng.gen_range(0..2)).collect();
        let mut pool = PatchPool::new(4096);
        let batch = prepare_batch(&data, &idx, &mut pool, &sampling, &mut rng).unwrap();
        let b = total_loss(&params, &batch, &config.model, &LossConfig::default()).unwrap();
        let tokens: usize = batch.items.iter().map(|it| it.text.len()).sum();
        let per_token = b.description.unwrap() * n / tokens as f64;
        worst[0] = worst[0].max((b.relevance.unwrap() - std::f64::consts::LN_2).abs());
        worst[1] = worst[1].max((b.contrastive.unwrap() - con_target).abs() / con_target);
        worst[2] = worst[2].max((per_token - desc_target).abs() / desc_target);
    }
    // The contrastive oracle for exactly normalized, independent tokens.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut unit_worst = 0.0f64;
    for _ in 0..100 {
        let pairs = insect_fm::alignment::BatchPairs {
            image_tokens: unit_rows(8, config.model.d, &mut rng),
            text_tokens: unit_rows(8, config.model.d, &mut rng),
        };
        let l = insect_fm::alignment::contrastive_loss(&pairs, 1.0).unwrap();
        unit_worst = unit_worst.max((l - con_target).abs() / con_target);
    }
    let elapsed = start.elapsed();
    let pass = worst[0] <= 0.05
        && worst[1] <= 0.10
        && unit_worst <= 0.10
        && worst[2] <= 0.05
        && elapsed < Duration::from_secs(60);
    r.line(
        2,
        "loss at init",
        pass,
        format!(
            "100 seeds: max |L_rel - ln2| {:.4}; L_con rel dev {:.2}% (model) {:.2}% (unit tokens); \
             L_desc/token rel dev {:.2}% of ln {}; {:.1?}",
            worst[0],
            100.0 * worst[1],
            100.0 * unit_worst,
            100.0 * worst[2],
            tokenizer.len(),
            elapsed
        ),
    );
}

fn prs_and_zero_shot(r: &mut Report, setup: &Setup, params: &ModelParams, log: &MetricsLog, elapsed: Duration) {
    let cfg = &setup.config;
    let prs = evaluate_prs(params, &cfg.model, &setup.held_out.data, &cfg.sampling, 0).unwrap();
    let (start, end) = log.smoothed_ends(50).unwrap();
    let pass = prs.auc >= 0.9 && prs.gap >= 0.2 && elapsed < Duration::from_secs(15 * 60);
    r.line(
        3,
        "PRS discrimination",
        pass,
        format!(
            "held-out AUC {:.4}, gap {:.4} (pos {:.4}, neg {:.4}; {} pos / {} neg) after {} steps in {:.0?}; \
             smoothed loss {:.3} -> {:.3}",
            prs.auc,
            prs.gap,
            prs.pos_mean,
            prs.neg_mean,
            prs.n_pos,
            prs.n_neg,
            log.len(),
            elapsed,
            start,
            end
        ),
    );

    let held = &setup.held_out;
    let labels = labels_at(&held.records, Level::Species);
    let descriptions = class_descriptions(&setup.train.records, Level::Species, &setup.tokenizer).unwrap();
    let zs = zero_shot(params, &cfg.model, &held.data, &labels, &descriptions, Level::Species).unwrap();
    let mut same = descriptions.clone();
    let first = same.values().next().unwrap().clone();
    same.values_mut().for_each(|d| *d = first.clone());
    let control = zero_shot(params, &cfg.model, &held.data, &labels, &same, Level::Species).unwrap();
    let chance = 1.0 / CLASSES as f64;

    let batch = {
        let idx: Vec<usize> = (0..held.data.len()).step_by(4).collect();
        let mut pool = PatchPool::new(4096);
        prepare_batch(&held.data, &idx, &mut pool, &cfg.sampling, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    };
    let desc_only = LossConfig {
        relevance: false,
        contrastive: false,
        ..LossConfig::default()
    };
    let acc = total_loss(params, &batch, &cfg.model, &desc_only).unwrap().desc_accuracy.unwrap();
    let pass = zs.top1 >= 3.0 * chance && (control.top1 - chance).abs() < 1e-12;
    r.line(
        5,
        "zero-shot matching",
        pass,
        format!(
            "held-out top-1 {:.4} (top-5 {:.4}) vs 3x chance {:.4}; identical descriptions {:.4} ({}); \
             teacher-forced description accuracy {:.4}",
            zs.top1,
            zs.top5,
            3.0 * chance,
            control.top1,
            control.tie_rule,
            acc
        ),
    );
}

fn transfer_ordering(r: &mut Report, setup: &Setup, full_seed0: &ModelParams) {
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let random = ModelParams::init(&setup.config.model, setup.tokenizer.len(), &mut stream_rng(seed, STREAM_INIT, 0))
            .unwrap();
        let (rel, _) = setup.train(seed, LossConfig::relevance_only());
        let full = if seed == 0 {
            full_seed0.clone()
        } else {
            setup.train(seed, LossConfig::default()).0
        };
        let (a_random, a_rel, a_full) = (setup.probe(&random), setup.probe(&rel), setup.probe(&full));
        pass &= a_rel > a_random && a_full >= a_rel - 0.02;
        rows.push(format!("seed {seed}: random {a_random:.4} rel {a_rel:.4} full {a_full:.4}"));
    }
    r.line(4, "transfer ordering", pass, rows.join("; "));
}

fn bin(args: &[&str]) -> Vec<u8> {
    let o = Command::new(env!("CARGO_BIN_EXE_insect-fm")).args(args).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o.stdout
}

fn cli_determinism(dir: &Path) -> Result<(), String> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut tiny = TrainConfig::desk();
    tiny.model = EncoderConfig {
        d: 16,
        heads: 2,
        image_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        ..EncoderConfig::desk()
    };
    tiny.schedule.steps = 6;
    tiny.schedule.batch_size = 8;
    std::fs::write(p("tiny.toml"), tiny.to_toml().unwrap()).unwrap();
    for name in ["c0.jsonl", "c1.jsonl"] {
        bin(&["gen-corpus", "--classes", "4", "--per-class", "4", "--seed", "2", "--out", &s(&p(name))]);
    }
    let files_equal = |a: &Path, b: &Path| std::fs::read(a).unwrap() == std::fs::read(b).unwrap();
    if !files_equal(&p("c0.jsonl"), &p("c1.jsonl")) {
        return Err("gen-corpus".into());
    }
    let corpus = s(&p("c0.jsonl"));
    for run in ["r0", "r1"] {
        bin(&["pretrain", "--corpus", &corpus, "--config", &s(&p("tiny.toml")), "--out", &s(&p(run)), "--log-every", "0"]);
    }
    for file in ["final", "metrics.jsonl"] {
        if !files_equal(&p("r0").join(file), &p("r1").join(file)) {
            return Err(format!("pretrain {file}"));
        }
    }
    let ckpt = s(&p("r0"));
    let commands: Vec<Vec<String>> = vec![
        vec!["stats".into(), "--corpus".into(), corpus.clone()],
        vec!["gradcheck".into(), "--per-tensor".into(), "1".into()],
        vec!["inspect".into(), "--ckpt".into(), ckpt.clone()],
        vec!["probe".into(), "--ckpt".into(), ckpt.clone(), "--corpus".into(), corpus.clone(), "--steps".into(), "20".into()],
        vec!["zeroshot".into(), "--ckpt".into(), ckpt, "--corpus".into(), corpus],
    ];
    for args in commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        if bin(&args) != bin(&args) {
            return Err(args[0].to_string());
        }
    }
    Ok(())
}

fn structural_invariants(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |rows: usize, cols: usize| {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    };
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let empty = ModelParams::default();
    let mut g = Graph::new(&empty);
    let (q, k, v) = (g.input(random(9, 8)), g.input(random(9, 8)), g.input(random(9, 8)));
    let out = g.attention(q, k, v, 2, 0.5, Arc::new(AttnLayout::self_attention(&[4, 5], true))).unwrap();
    let rows_ok = g.attention_weights(out).unwrap().iter().flatten().all(|h| {
        (0..h.rows()).all(|i| (h.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6)
    });
    checks.push(("softmax rows sum to 1", rows_ok));

    let cfg = EncoderConfig {
        d: 8,
        heads: 2,
        image_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        patch_size: 4,
        image_height: 8,
        image_width: 8,
        max_text_len: 6,
        ..EncoderConfig::desk()
    };
    let mut prng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ModelParams::init(&cfg, 12, &mut prng).unwrap();
    for (_, m) in params.iter_mut() {
        m.data_mut().iter_mut().for_each(|x| *x += prng.gen_range(-0.5..0.5));
    }
    let z = random(6, 8);
    let a = attention_pool(&z, &params).unwrap();
    let b = attention_pool(&z.select_rows(&[3, 0, 5, 1, 4, 2]), &params).unwrap();
    checks.push((
        "pooling permutation invariance",
        a.vector.iter().zip(&b.vector).all(|(x, y)| (x - y).abs() <= 1e-10),
    ));

    let target = vec![1, 5, 6, 7, 8];
    let base = decode_description(&z, &target, &params, &cfg).unwrap();
    let causal = (1..target.len() - 1).all(|j| {
        let mut t = target.clone();
        t[j] = 11;
        let o = decode_description(&z, &t, &params, &cfg).unwrap();
        (0..j).all(|row| o.row(row) == base.row(row))
    });
    checks.push(("decoder causality", causal));

    let img = insect_fm::corpus::Image::new(12, 8, (0..12 * 8 * 3).map(|i| i as f64 / 288.0).collect()).unwrap();
    checks.push(("patch round trip", reassemble(&split(&img, 4).unwrap()) == img));

    let mut tc = TrainConfig::desk();
    tc.model = EncoderConfig {
        d: 16,
        heads: 2,
        image_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        ..EncoderConfig::desk()
    };
    tc.schedule.steps = 8;
    tc.schedule.batch_size = 8;
    let records = generate_synthetic(&SyntheticCorpusSpec::desk(4, 4, 5)).unwrap();
    let tok = Tokenizer::from_records(&records, tc.model.max_text_len).unwrap();
    let images = resolve_images(&records, Path::new(".")).unwrap();
    let data = TrainingData::new(&records, &images, &tok, &tc.model).unwrap();
    let mut whole = Trainer::new(tc.clone(), tok.clone(), data.len()).unwrap();
    let mut whole_log = MetricsLog::new();
    whole.run(&data, 8, &mut whole_log, |_, _| Ok(())).unwrap();
    let mut first = Trainer::new(tc, tok, data.len()).unwrap();
    let mut log = MetricsLog::new();
    first.run(&data, 3, &mut log, |_, _| Ok(())).unwrap();
    let bytes = first.to_checkpoint().unwrap().to_bytes().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed.run(&data, 8, &mut log, |_, _| Ok(())).unwrap();
    checks.push((
        "checkpoint resume bit-exact",
        log == whole_log
            && resumed.to_checkpoint().unwrap().to_bytes().unwrap() == whole.to_checkpoint().unwrap().to_bytes().unwrap(),
    ));

    let dir = tempfile::tempdir().unwrap();
    let cli = cli_determinism(dir.path());
    checks.push(("CLI seed determinism", cli.is_ok()));

    let pass = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "broken" }))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = match cli {
        Err(cmd) => format!("{detail} (differs: {cmd})"),
        Ok(()) => detail,
    };
    r.line(6, "structural invariants", pass, detail);
}

fn schedule_reference(r: &mut Report) {
    let desk = TrainConfig::desk();
    let total = desk.schedule.steps;
    let w = insect_fm::training::warmup_steps(total, &desk.optim);
    let at_warmup = lr_at(w, total, &desk.optim);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/full_scale.toml");
    let full = TrainConfig::load(&path).unwrap();
    let full_total = full.total_steps(1_000_000);
    let full_w = insect_fm::training::warmup_steps(full_total, &full.optim);
    let full_at_warmup = lr_at(full_w, full_total, &full.optim);
    let pass = at_warmup == desk.optim.lr && full.optim.lr == 1.5e-4 && full_at_warmup == full.optim.lr;
    r.line(
        7,
        "schedule reference point",
        pass,
        format!(
            "desk lr_at({w}) = {at_warmup:e} (base {:e}); full_scale.toml lr {:e}, lr_at({full_w}) = {full_at_warmup:e}",
            desk.optim.lr, full.optim.lr
        ),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    gradient_correctness(&mut r);
    loss_at_init(&mut r);

    let setup = Setup::new();
    let start = Instant::now();
    let (params, log) = setup.train(setup.config.seed, LossConfig::default());
    let elapsed = start.elapsed();
    prs_and_zero_shot(&mut r, &setup, &params, &log, elapsed);
    transfer_ordering(&mut r, &setup, &params);
    structural_invariants(&mut r);
    schedule_reference(&mut r);
    assert!(r.failed.is_empty(), "failed criteria: {:#?}", r.failed);
}
