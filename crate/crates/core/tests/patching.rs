use insect_fm::corpus::Image;
use insect_fm::patching::{kept_count, reassemble, sample_subset, split, PatchPool};
use insect_fm::training::{prepare_batch, SamplingConfig, TrainingData};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, seed: u64) -> Image {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

proptest! {
    #[test]
    fn split_then_reassemble_is_exact(gh in 1usize..5, gw in 1usize..5, p in 1usize..6, seed in any::<u64>()) {
        let img = image(gh * p, gw * p, seed);
        let grid = split(&img, p).unwrap();
        prop_assert_eq!(grid.num_patches(), gh * gw);
        prop_assert_eq!(reassemble(&grid), img);
    }

    #[test]
    fn kept_and_held_out_partition_the_grid(
        gh in 1usize..6, gw in 1usize..6, ratio in 0.01f64..0.99, seed in any::<u64>()
    ) {
        let grid = split(&image(gh * 2, gw * 2, seed), 2).unwrap();
        let n = grid.num_patches();
        let (set, held) = sample_subset(&grid, "img", ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(set.len(), kept_count(ratio, n).min(n));
        let mut all: Vec<usize> = set.indices.iter().copied().chain(held.iter().map(|e| e.index)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for e in &held {
            prop_assert_eq!(e.source.as_str(), "img");
            prop_assert!(!set.indices.contains(&e.index));
            prop_assert_eq!(&e.block, &grid.blocks[e.index]);
        }
        for (i, b) in set.indices.iter().zip(&set.blocks) {
            prop_assert_eq!(b, &grid.blocks[*i]);
        }
    }
}

#[test]
fn each_index_is_kept_half_the_time() {
    let grid = split(&image(8, 8, 0), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    let mut kept = [0usize; 4];
    for _ in 0..draws {
        let (set, _) = sample_subset(&grid, "x", 0.5, &mut rng).unwrap();
        assert_eq!(set.len(), 2);
        for i in set.indices {
            kept[i] += 1;
        }
    }
    for k in kept {
        let f = k as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
    }
}

#[test]
fn pool_of_one_image_returns_every_patch() {
    let grid = split(&image(28, 28, 1), 2).unwrap();
    let (_, held) = sample_subset(&grid, "a", 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(held.len(), 98);
    let mut pool = PatchPool::new(4096);
    pool.push(held.clone());
    let mut back = pool.sample(98, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    back.sort_by_key(|e| e.index);
    assert_eq!(back, held);
}

#[test]
fn batch_candidates_respect_provenance() {
    let cfg = insect_fm::EncoderConfig {
        patch_size: 4,
        image_height: 8,
        image_width: 8,
        ..insect_fm::EncoderConfig::desk()
    };
    let n = 6;
    let data = TrainingData {
        ids: (0..n).map(|i| format!("img{i}")).collect(),
        grids: (0..n).map(|i| split(&image(8, 8, i as u64), cfg.patch_size).unwrap()).collect(),
        texts: vec![vec![5, 6]; n],
        bos: 1,
    };
    let sampling = SamplingConfig {
        k_pos: 2,
        k_neg: 3,
        ..SamplingConfig::default()
    };
    let mut pool = PatchPool::new(100);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = prepare_batch(&data, &(0..n).collect::<Vec<_>>(), &mut pool, &sampling, &mut rng).unwrap();
    for (item, grid) in batch.items.iter().zip(&data.grids) {
        let kept: Vec<usize> = item.kept.indices.clone();
        assert_eq!(item.positives.len(), 2);
        assert_eq!(item.negatives.len(), 3);
        for p in &item.positives {
            assert_eq!(p.source, item.id);
            assert!(!kept.contains(&p.index));
            assert_eq!(p.block, grid.blocks[p.index]);
        }
        for q in &item.negatives {
            assert_ne!(q.source, item.id);
        }
    }
}
