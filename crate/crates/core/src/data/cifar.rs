//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32×32.

use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::Normalization;
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
const PIXELS: usize = 3072;

/// The widely published CIFAR-10 training-set channel statistics.
pub fn cifar10_normalization() -> Normalization {
    Normalization {
        mean: vec![0.4914, 0.4822, 0.4465],
        std: vec![0.2470, 0.2435, 0.2616],
    }
}

fn batch_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Reads the training (data_batch_1..5.bin) or test (test_batch.bin) split.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files = batch_files(dir, split);
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return Err(Error::MissingFile(missing.clone()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in &files {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::WrongFileSize {
                path: path.clone(),
                size: bytes.len() as u64,
            });
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::BadLabel {
                    path: path.clone(),
                    record: r,
                    label: rec[0],
                });
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    debug_assert_eq!(pixels.len(), labels.len() * PIXELS);
    let images = Tensor::from_vec([labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10, split, cifar10_normalization())
}
