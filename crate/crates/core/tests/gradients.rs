use insect_fm::alignment::contrastive_loss_g;
use insect_fm::autodiff::Graph;
use insect_fm::gradcheck::{
    check_losses, grad_check, grad_check_with, random_instance, relative_error, small_config, BatchObjective,
    Stencil, CHECK_EPSILON, CHECK_SPREAD,
};
use insect_fm::training::LossConfig;
use insect_fm::{Matrix, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn relevance_loss_on_two_patch_images() {
    let mut cfg = small_config();
    cfg.model.image_height = 8;
    cfg.model.image_width = 4;
    cfg.sampling.k_pos = 1;
    cfg.sampling.k_neg = 1;
    cfg.loss = LossConfig::relevance_only();
    for seed in 0..10 {
        let (params, batch) = random_instance(&cfg, seed, CHECK_SPREAD).unwrap();
        for item in &batch.items {
            assert_eq!(item.kept.len(), 1);
            assert_eq!(item.positives.len() + item.negatives.len(), 2);
        }
        let objective = BatchObjective {
            batch,
            model: cfg.model.clone(),
            loss: cfg.loss.clone(),
        };
        let r = grad_check(&objective, &params, 1e-5, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn contrastive_plus_description_on_two_pairs() {
    let mut cfg = small_config();
    cfg.loss = LossConfig {
        relevance: false,
        ..LossConfig::default()
    };
    for seed in 0..10 {
        let (params, batch) = random_instance(&cfg, seed, CHECK_SPREAD).unwrap();
        assert_eq!(batch.items.len(), 2);
        let objective = BatchObjective {
            batch,
            model: cfg.model.clone(),
            loss: cfg.loss.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = grad_check_with(&objective, &params, Stencil::FourPoint, CHECK_EPSILON, 8, &mut rng).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn contrastive_gradient_with_respect_to_tokens() {
    let empty = ModelParams::default();
    let loss_of = |z: &Matrix, w: &Matrix| {
        let mut g = Graph::new(&empty);
        let (zv, wv) = (g.input(z.clone()), g.input(w.clone()));
        let l = contrastive_loss_g(&mut g, zv, wv, 1.0).unwrap();
        g.value(l).scalar()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let z = Matrix::from_vec(2, 8, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Matrix::from_vec(2, 8, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new(&empty);
        let (zv, wv) = (g.input_with_grad(z.clone()), g.input_with_grad(w.clone()));
        let l = contrastive_loss_g(&mut g, zv, wv, 1.0).unwrap();
        let grads = g.backward(l);
        for (var, which) in [(zv, 0), (wv, 1)] {
            let analytic = grads.of(var).unwrap();
            for i in 0..16 {
                let eps = 1e-5;
                let (mut zp, mut wp) = (z.clone(), w.clone());
                let (mut zm, mut wm) = (z.clone(), w.clone());
                if which == 0 {
                    zp.data_mut()[i] += eps;
                    zm.data_mut()[i] -= eps;
                } else {
                    wp.data_mut()[i] += eps;
                    wm.data_mut()[i] -= eps;
                }
                let fd = (loss_of(&zp, &wp) - loss_of(&zm, &wm)) / (2.0 * eps);
                let rel = relative_error(analytic.data()[i], fd);
                assert!(rel < TOL, "entry {i}: {} vs {fd}", analytic.data()[i]);
            }
        }
    }
}

#[test]
fn every_loss_passes_on_random_instances() {
    let cfg = small_config();
    for seed in 0..10 {
        for (name, r) in check_losses(&cfg, seed, 8).unwrap() {
            assert!(r.max_rel_error < TOL, "{name}, seed {seed}: {r:?}");
            assert!(r.checked > 100);
        }
    }
}
