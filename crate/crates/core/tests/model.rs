use std::sync::Arc;

use insect_fm::alignment::{decode_description, embed_text};
use insect_fm::autodiff::{AttnLayout, Graph};
use insect_fm::pooling::{attention_pool, attention_pool_with_weights, value_rows};
use insect_fm::transformer::encode_text;
use insect_fm::{EncoderConfig, Matrix, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 12;

fn small() -> EncoderConfig {
    EncoderConfig {
        d: 8,
        heads: 2,
        image_layers: 1,
        text_layers: 1,
        decoder_layers: 2,
        patch_size: 4,
        image_height: 8,
        image_width: 8,
        max_text_len: 6,
        ..EncoderConfig::desk()
    }
}

/// Initialized parameters pushed away from the near-zero init so every
/// path carries signal.
fn params(cfg: &EncoderConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(cfg, VOCAB, &mut rng).unwrap();
    for (_, m) in p.iter_mut() {
        for v in m.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn attention_rows_are_distributions() {
    let empty = ModelParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for causal in [false, true] {
        let mut g = Graph::new(&empty);
        let q = g.input(random(9, 8, &mut rng));
        let k = g.input(random(9, 8, &mut rng));
        let v = g.input(random(9, 8, &mut rng));
        let layout = Arc::new(AttnLayout::self_attention(&[4, 5], causal));
        let out = g.attention(q, k, v, 2, 0.5, layout).unwrap();
        let weights = g.attention_weights(out).unwrap();
        assert_eq!(weights.len(), 2);
        for segment in weights {
            for head in segment {
                for r in 0..head.rows() {
                    let row = head.row(r);
                    assert!(row.iter().all(|&w| w >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

#[test]
fn pooled_token_lies_in_the_value_hull() {
    let cfg = small();
    for seed in 0..5 {
        let p = params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let z = random(4, cfg.d, &mut rng);
        let (token, weights) = attention_pool_with_weights(&z, &p, "pool").unwrap();
        let v = value_rows(&z, &p, "pool").unwrap();
        // Affine least squares: minimise |Vᵀw − z_ct|² subject to Σw = 1.
        let mut a = vec![vec![0.0; 5]; 5];
        let mut b = vec![0.0; 5];
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] = 2.0 * v.row(i).iter().zip(v.row(j)).map(|(x, y)| x * y).sum::<f64>();
            }
            a[i][4] = 1.0;
            a[4][i] = 1.0;
            b[i] = 2.0 * v.row(i).iter().zip(&token.vector).map(|(x, y)| x * y).sum::<f64>();
        }
        b[4] = 1.0;
        let w = solve(a, b);
        let residual: f64 = (0..cfg.d)
            .map(|c| ((0..4).map(|i| w[i] * v.get(i, c)).sum::<f64>() - token.vector[c]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(residual < 1e-9, "residual {residual}");
        for i in 0..4 {
            assert!(w[i] >= -1e-9, "weight {}", w[i]);
            assert!((w[i] - weights[i]).abs() < 1e-8);
        }
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn pooling_ignores_row_order() {
    let cfg = small();
    let p = params(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let z = random(6, cfg.d, &mut rng);
        let mut order: Vec<usize> = (0..6).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let a = attention_pool(&z, &p).unwrap();
        let b = attention_pool(&z.select_rows(&order), &p).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let cfg = small();
    let p = params(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = random(4, cfg.d, &mut rng);
    let target = vec![1, 5, 6, 7, 8, 9, 10];
    let base = decode_description(&z, &target, &p, &cfg).unwrap();
    assert_eq!(base.rows(), 6);
    for j in 1..target.len() - 1 {
        let mut changed = target.clone();
        changed[j] = if target[j] == 11 { 5 } else { 11 };
        let out = decode_description(&z, &changed, &p, &cfg).unwrap();
        for r in 0..j {
            assert_eq!(out.row(r), base.row(r), "row {r} moved when input {j} changed");
        }
        assert_ne!(out.row(j), base.row(j));
    }
}

#[test]
fn zero_cross_attention_output_detaches_the_image() {
    let cfg = small();
    let mut p = params(&cfg, 5);
    for l in 0..cfg.decoder_layers {
        for suffix in ["w", "b"] {
            p.get_mut(&format!("decoder.block{l}.cross_attn.o.{suffix}")).unwrap().scale_in_place(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let target = vec![1, 5, 6, 7];
    let a = decode_description(&random(4, cfg.d, &mut rng), &target, &p, &cfg).unwrap();
    let b = decode_description(&random(3, cfg.d, &mut rng), &target, &p, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn text_sequences_gain_one_context_row() {
    let cfg = small();
    let p = params(&cfg, 9);
    for n in 0..=cfg.max_text_len {
        let tokens: Vec<usize> = (0..n).map(|i| 5 + i % 7).collect();
        let w = embed_text(&tokens, &p, &cfg).unwrap();
        assert_eq!(w.rows(), n + 1);
        assert_eq!(encode_text(&w, &p, &cfg).unwrap().rows(), n + 1);
    }
    let same = embed_text(&[6, 6], &p, &cfg).unwrap();
    let pos = p.get("text.pos").unwrap();
    for c in 0..cfg.d {
        let diff = same.get(1, c) - same.get(2, c);
        assert!((diff - (pos.get(0, c) - pos.get(1, c))).abs() < 1e-15);
    }
}
