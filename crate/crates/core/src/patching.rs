//! Non-overlapping patch grids, visible-subset sampling and the cross-image
//! pool of held-out patches.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Image;
use crate::error::{Error, Result};

/// Image split into `s_p × s_p` patches, row-major. Each block is the
/// patch's pixels flattened row-major with interleaved RGB, so its length is
/// `3·s_p²`. Indices are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub blocks: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.blocks.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

pub fn split(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {patch_size}-pixel patches",
            image.height, image.width
        )));
    }
    let (gr, gc) = (image.height / patch_size, image.width / patch_size);
    let mut blocks = Vec::with_capacity(gr * gc);
    for pr in 0..gr {
        for pc in 0..gc {
            let mut block = Vec::with_capacity(patch_size * patch_size * 3);
            for r in 0..patch_size {
                for c in 0..patch_size {
                    block.extend_from_slice(image.pixel(pr * patch_size + r, pc * patch_size + c));
                }
            }
            blocks.push(block);
        }
    }
    Ok(PatchGrid {
        patch_size,
        grid_rows: gr,
        grid_cols: gc,
        blocks,
    })
}

/// Inverse of [`split`].
pub fn reassemble(grid: &PatchGrid) -> Image {
    let s = grid.patch_size;
    let mut img = Image::zeros(grid.grid_rows * s, grid.grid_cols * s);
    for (i, block) in grid.blocks.iter().enumerate() {
        let (pr, pc) = (i / grid.grid_cols, i % grid.grid_cols);
        for r in 0..s {
            for c in 0..s {
                let src = &block[(r * s + c) * 3..(r * s + c) * 3 + 3];
                img.pixel_mut(pr * s + r, pc * s + c).copy_from_slice(src);
            }
        }
    }
    img
}

/// Visible patches of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub source: String,
    /// Strictly increasing grid indices.
    pub indices: Vec<usize>,
    pub blocks: Vec<Vec<f64>>,
}

impl PatchSet {
    /// Every patch of the grid; used when encoding whole images.
    pub fn full(grid: &PatchGrid, source: &str) -> Self {
        Self {
            source: source.to_string(),
            indices: (0..grid.num_patches()).collect(),
            blocks: grid.blocks.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub source: String,
    pub index: usize,
    pub block: Vec<f64>,
}

/// `round(ratio·n)` with halves rounded up.
pub fn kept_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

/// Keeps a uniformly random subset of `round(ratio·N_P)` patches and returns
/// the rest as held-out pool entries.
pub fn sample_subset<R: Rng>(
    grid: &PatchGrid,
    source: &str,
    ratio: f64,
    rng: &mut R,
) -> Result<(PatchSet, Vec<PoolEntry>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("sampling ratio {ratio} not in (0, 1)")));
    }
    let n = grid.num_patches();
    let k = kept_count(ratio, n).min(n);
    let mut kept = index::sample(rng, n, k).into_vec();
    kept.sort_unstable();
    let mut is_kept = vec![false; n];
    for &i in &kept {
        is_kept[i] = true;
    }
    let set = PatchSet {
        source: source.to_string(),
        blocks: kept.iter().map(|&i| grid.blocks[i].clone()).collect(),
        indices: kept,
    };
    let held_out = (0..n)
        .filter(|&i| !is_kept[i])
        .map(|i| PoolEntry {
            source: source.to_string(),
            index: i,
            block: grid.blocks[i].clone(),
        })
        .collect();
    Ok((set, held_out))
}

/// FIFO buffer of held-out patches from many images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPool {
    capacity: usize,
    entries: VecDeque<PoolEntry>,
}

impl PatchPool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter()
    }

    /// Appends entries, evicting the oldest beyond capacity.
    pub fn push(&mut self, held_out: impl IntoIterator<Item = PoolEntry>) {
        for e in held_out {
            if self.capacity == 0 {
                return;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(e);
        }
    }

    /// `k` distinct entries, none from `exclude`.
    pub fn sample<R: Rng>(
        &self,
        k: usize,
        exclude: Option<&str>,
        rng: &mut R,
    ) -> Result<Vec<PoolEntry>> {
        let eligible: Vec<usize> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| exclude != Some(e.source.as_str()))
            .map(|(i, _)| i)
            .collect();
        if k > eligible.len() {
            return Err(Error::invalid(format!(
                "asked for {k} pool patches but only {} are eligible",
                eligible.len()
            )));
        }
        Ok(index::sample(rng, eligible.len(), k)
            .into_iter()
            .map(|i| self.entries[eligible[i]].clone())
            .collect())
    }
}
