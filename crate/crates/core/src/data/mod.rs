//! Datasets, selection subsets, augmentation and checkpoints.

mod checkpoint;
mod cifar;
mod synthetic;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, sidecar_path,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cifar::{cifar10_normalization, load_cifar10, CIFAR_RECORD_BYTES};
pub use synthetic::{make_synthetic, make_synthetic_split, SyntheticKind};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Normalization;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train | test)"
            ))),
        }
    }
}

/// Raw images in `[0, 1]` with labels and the normalization a model should apply.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
    /// Channels known to carry the label signal (synthetic data only).
    pub informative: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        let [n, c, _, _] = images.shape();
        if n == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
        }
        if normalization.mean.len() != c || normalization.std.len() != c {
            return Err(Error::Data(format!(
                "normalization statistics cover {} channels, images have {c}",
                normalization.mean.len()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            normalization,
            informative: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.shape();
        [c, h, w]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_samples(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
            informative: self.informative.clone(),
        })
    }

    /// Consecutive index ranges of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(move |s| (s..(s + size).min(self.len())).collect())
    }
}

/// Class-stratified sample of `count` items without replacement: classes are
/// visited round-robin, so per-class counts differ by at most one while every
/// class has samples left.
pub fn sample_subset(ds: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    Ok(ds.subset(&subset_indices(ds, count, seed)?)?)
}

pub fn subset_indices(ds: &Dataset, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > ds.len() {
        return Err(Error::Config(format!(
            "subset of {count} requested from {} samples",
            ds.len()
        )));
    }
    let mut r = rng::stream(seed, rng::SUBSET);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for group in &mut by_class {
        group.shuffle(&mut r);
    }
    let mut order: Vec<usize> = (0..ds.num_classes).collect();
    order.shuffle(&mut r);
    let mut picked = Vec::with_capacity(count);
    let mut depth = 0;
    while picked.len() < count {
        for &k in &order {
            if picked.len() == count {
                break;
            }
            if let Some(&i) = by_class[k].get(depth) {
                picked.push(i);
            }
        }
        depth += 1;
    }
    picked.shuffle(&mut r);
    Ok(picked)
}

/// Random crop after zero padding by `pad`, and a horizontal flip with
/// probability ½, applied per sample to raw images.
pub fn augment(images: &Tensor, pad: usize, flip: bool, rng: &mut Rng) -> Tensor {
    let [n, c, h, w] = images.shape();
    let mut out = Tensor::zeros(images.shape());
    let src = images.data();
    let plane = h * w;
    for i in 0..n {
        let dy = if pad > 0 {
            rng.random_range(0..=2 * pad) as isize - pad as isize
        } else {
            0
        };
        let dx = if pad > 0 {
            rng.random_range(0..=2 * pad) as isize - pad as isize
        } else {
            0
        };
        let mirror = flip && rng.random_bool(0.5);
        let dst = out.data_mut();
        for k in 0..c {
            let base = (i * c + k) * plane;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let tx = if mirror { w - 1 - x } else { x };
                    let sx = tx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    dst[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}
