//! Seeded synthetic image datasets.
//!
//! Values are generated around zero and mapped into `[0, 1]` by
//! `0.5 + PIXEL_SCALE·v`, clamped.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::Normalization;
use crate::rng;
use crate::tensor::Tensor;

const PIXEL_SCALE: f64 = 0.12;
/// Per-pixel noise of informative-channel data, relative to a unit template.
const CHANNEL_NOISE: f64 = 2.0;
const BLOB_NOISE: f64 = 1.0;
/// Fraction of informative channels, rounded up.
const INFORMATIVE_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// One Gaussian cluster per class around a random mean image.
    GaussianBlobs,
    /// Only some channels carry a class template; the others carry a template
    /// of a random, label-independent class. Every channel has the same
    /// marginal statistics.
    InformativeChannel,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(SyntheticKind::GaussianBlobs),
            "informative-channel" => Ok(SyntheticKind::InformativeChannel),
            other => Err(Error::Config(format!(
                "unknown synthetic dataset `{other}` (gaussian-blobs | informative-channel)"
            ))),
        }
    }
}

/// Training split of [`make_synthetic_split`].
pub fn make_synthetic(
    kind: SyntheticKind,
    n: usize,
    num_classes: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    make_synthetic_split(kind, n, num_classes, shape, seed, Split::Train)
}

/// Both splits share class templates (fixed by `seed`) and differ in noise.
pub fn make_synthetic_split(
    kind: SyntheticKind,
    n: usize,
    num_classes: usize,
    shape: [usize; 3],
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if n == 0 || num_classes == 0 || shape.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!(
            "synthetic dataset needs positive size, classes and shape; got n={n}, m={num_classes}, {shape:?}"
        )));
    }
    let [c, h, w] = shape;
    let plane = h * w;
    let mut tr = rng::stream(seed, "synthetic-templates");
    let gauss = |r: &mut rng::Rng| -> f64 { StandardNormal.sample(r) };
    // templates[k][y] is one plane
    let templates: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|_| {
            (0..num_classes)
                .map(|_| (0..plane).map(|_| gauss(&mut tr)).collect())
                .collect()
        })
        .collect();
    let informative: Vec<usize> = match kind {
        SyntheticKind::GaussianBlobs => (0..c).collect(),
        SyntheticKind::InformativeChannel => {
            let k = ((INFORMATIVE_FRACTION * c as f64).ceil() as usize).clamp(1, c);
            let mut pick = index::sample(&mut tr, c, k).into_vec();
            pick.sort_unstable();
            pick
        }
    };
    let noise = match kind {
        SyntheticKind::GaussianBlobs => BLOB_NOISE,
        SyntheticKind::InformativeChannel => CHANNEL_NOISE,
    };
    let split_index = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut sr = rng::substream(seed, "synthetic-samples", split_index);
    let mut data = Vec::with_capacity(n * c * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        labels.push(y);
        for (k, per_class) in templates.iter().enumerate() {
            let source = if informative.binary_search(&k).is_ok() {
                y
            } else {
                sr.random_range(0..num_classes)
            };
            for &t in &per_class[source] {
                let v = t + noise * gauss(&mut sr);
                data.push((0.5 + PIXEL_SCALE * v).clamp(0.0, 1.0));
            }
        }
    }
    let images = Tensor::from_vec([n, c, h, w], data)?;
    let spread = PIXEL_SCALE * (1.0 + noise * noise).sqrt();
    let norm = Normalization {
        mean: vec![0.5; c],
        std: vec![spread; c],
    };
    let mut ds = Dataset::new(images, labels, num_classes, split, norm)?;
    if kind == SyntheticKind::InformativeChannel {
        ds.informative = Some(informative);
    }
    Ok(ds)
}
