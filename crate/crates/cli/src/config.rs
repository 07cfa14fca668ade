//! Flat `section.key = value` configuration with a fixed key table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dcp::data::SyntheticKind;
use dcp::loss::HeadNorm;
use dcp::pipeline::{FinetuneConfig, PruneConfig, Strategy};
use dcp::selector::StopMode;
use dcp::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Kind {
    Uint,
    Float,
    Bool,
    Choice(&'static [&'static str]),
    Text,
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, help: &'static str) -> Key {
    Key {
        name,
        default,
        kind,
        help,
    }
}

pub const KEYS: &[Key] = &[
    key(
        "run.seed",
        "0",
        Kind::Uint,
        "seed for initialization, subsets, selection and shuffling",
    ),
    key(
        "model.arch",
        "toy-cnn",
        Kind::Choice(&dcp::network::ARCHITECTURES),
        "network architecture",
    ),
    key(
        "data.source",
        "synthetic",
        Kind::Choice(&["synthetic", "cifar10"]),
        "dataset source",
    ),
    key(
        "data.kind",
        "gaussian-blobs",
        Kind::Choice(&["gaussian-blobs", "informative-channel"]),
        "synthetic generator",
    ),
    key("data.classes", "10", Kind::Uint, "synthetic class count"),
    key(
        "data.shape",
        "auto",
        Kind::Text,
        "synthetic image shape CxHxW, or auto for the architecture default",
    ),
    key(
        "data.train_size",
        "1000",
        Kind::Uint,
        "synthetic training samples",
    ),
    key(
        "data.test_size",
        "500",
        Kind::Uint,
        "synthetic test samples",
    ),
    key(
        "data.seed",
        "0",
        Kind::Uint,
        "seed of the synthetic generator",
    ),
    key(
        "data.dir",
        "data/cifar-10-batches-bin",
        Kind::Text,
        "CIFAR-10 batch directory (DCP_DATA_DIR overrides the file value)",
    ),
    key("train.epochs", "10", Kind::Uint, "baseline training epochs"),
    key("train.lr", "0.05", Kind::Float, "initial learning rate"),
    key(
        "train.tau",
        "0.998",
        Kind::Float,
        "per-iteration learning-rate decay",
    ),
    key("train.momentum", "0.9", Kind::Float, "SGD momentum"),
    key(
        "train.weight_decay",
        "0.0001",
        Kind::Float,
        "L2 weight decay",
    ),
    key("train.batch_size", "64", Kind::Uint, "minibatch size"),
    key(
        "train.crop_pad",
        "0",
        Kind::Uint,
        "random-crop padding; 0 disables cropping",
    ),
    key("train.flip", "false", Kind::Bool, "random horizontal flips"),
    key(
        "prune.strategy",
        "dcp",
        Kind::Choice(&Strategy::ALL),
        "channel selection strategy",
    ),
    key(
        "prune.lambda",
        "1.0",
        Kind::Float,
        "weight of the discrimination loss",
    ),
    key(
        "prune.stop_mode",
        "budget",
        Kind::Choice(&["budget", "tolerance", "whichever-first"]),
        "selection stopping rule",
    ),
    key(
        "prune.keep_ratio",
        "0.7",
        Kind::Float,
        "fraction of input channels kept per layer",
    ),
    key(
        "prune.epsilon",
        "0.01",
        Kind::Float,
        "relative loss-change tolerance",
    ),
    key(
        "prune.heads",
        "auto",
        Kind::Text,
        "auxiliary losses, or auto",
    ),
    key(
        "prune.subset_size",
        "1000",
        Kind::Uint,
        "training samples used for selection",
    ),
    key(
        "prune.head_norm",
        "batch",
        Kind::Choice(&["batch", "running"]),
        "normalization inside auxiliary heads",
    ),
    key(
        "prune.selection_lr",
        "0.01",
        Kind::Float,
        "learning rate of the selection SGD",
    ),
    key(
        "prune.inner_steps",
        "20",
        Kind::Uint,
        "SGD steps after each added channel",
    ),
    key(
        "prune.selection_batch",
        "64",
        Kind::Uint,
        "minibatch size of the selection SGD",
    ),
    key(
        "prune.stage_epochs",
        "2",
        Kind::Uint,
        "fine-tune epochs before each stage",
    ),
    key(
        "prune.stage_lr",
        "0.05",
        Kind::Float,
        "learning rate of the stage fine-tune",
    ),
    key(
        "prune.final_epochs",
        "10",
        Kind::Uint,
        "fine-tune epochs after selection",
    ),
    key(
        "prune.final_lr",
        "0.05",
        Kind::Float,
        "learning rate of the final fine-tune",
    ),
    key(
        "prune.compact",
        "true",
        Kind::Bool,
        "remove pruned channels before saving",
    ),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn check(key: &Key, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("`{}` expects {what}, got `{value}`", key.name));
    match key.kind {
        Kind::Uint => value
            .parse::<u64>()
            .map(drop)
            .map_err(|_| bad("a non-negative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Kind::Bool => value
            .parse::<bool>()
            .map(drop)
            .map_err(|_| bad("true or false")),
        Kind::Choice(options) if options.contains(&value) => Ok(()),
        Kind::Choice(options) => Err(bad(&format!("one of {}", options.join(" | ")))),
        Kind::Text => Ok(()),
    }
}

/// Resolved values for every key, plus which ones were set explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
    explicit: BTreeSet<&'static str>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS
                .iter()
                .map(|k| (k.name, k.default.to_string()))
                .collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl Config {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let key =
            lookup(name).ok_or_else(|| Error::Config(format!("unknown config key `{name}`")))?;
        let value = value.trim();
        check(key, value)?;
        self.values.insert(key.name, value.to_string());
        self.explicit.insert(key.name);
        Ok(())
    }

    /// Lines of `key = value`; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    no + 1
                ))
            })?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn is_explicit(&self, name: &str) -> bool {
        self.explicit.contains(name)
    }

    pub fn get(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("config key `{name}` is not in the table"))
    }

    pub fn uint(&self, name: &str) -> u64 {
        self.get(name).parse().expect("validated on set")
    }

    pub fn usize(&self, name: &str) -> usize {
        self.uint(name) as usize
    }

    pub fn float(&self, name: &str) -> f64 {
        self.get(name).parse().expect("validated on set")
    }

    pub fn flag(&self, name: &str) -> bool {
        self.get(name).parse().expect("validated on set")
    }

    /// Every key with its resolved value, in key order.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.uint("run.seed")
    }

    pub fn synthetic_kind(&self) -> SyntheticKind {
        self.get("data.kind").parse().expect("validated on set")
    }

    /// `None` when the architecture default applies.
    pub fn data_shape(&self) -> Result<Option<[usize; 3]>> {
        let raw = self.get("data.shape");
        if raw == "auto" {
            return Ok(None);
        }
        let dims: Vec<usize> = raw
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Config(format!("`data.shape` expects CxHxW or auto, got `{raw}`"))
            })?;
        match dims[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Some([c, h, w])),
            _ => Err(Error::Config(format!(
                "`data.shape` expects CxHxW or auto, got `{raw}`"
            ))),
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.usize("train.epochs"),
            lr: self.float("train.lr"),
            tau: self.float("train.tau"),
            momentum: self.float("train.momentum"),
            weight_decay: self.float("train.weight_decay"),
            batch_size: self.usize("train.batch_size"),
            crop_pad: self.usize("train.crop_pad"),
            flip: self.flag("train.flip"),
            seed: self.seed(),
        }
    }

    pub fn prune(&self) -> Result<PruneConfig> {
        let heads = match self.get("prune.heads") {
            "auto" => None,
            v => Some(v.parse::<usize>().map_err(|_| {
                Error::Config(format!(
                    "`prune.heads` expects a positive integer or auto, got `{v}`"
                ))
            })?),
        };
        let base = self.finetune();
        let cfg = PruneConfig {
            strategy: self.get("prune.strategy").parse()?,
            lambda: self.float("prune.lambda"),
            stop_mode: self.get("prune.stop_mode").parse()?,
            keep_ratio: self.float("prune.keep_ratio"),
            epsilon: self.float("prune.epsilon"),
            heads,
            subset_size: self.usize("prune.subset_size"),
            head_norm: match self.get("prune.head_norm") {
                "running" => HeadNorm::Running,
                _ => HeadNorm::Batch,
            },
            selection_lr: self.float("prune.selection_lr"),
            inner_steps: self.usize("prune.inner_steps"),
            selection_batch: self.usize("prune.selection_batch"),
            stage_finetune: FinetuneConfig {
                epochs: self.usize("prune.stage_epochs"),
                lr: self.float("prune.stage_lr"),
                ..base.clone()
            },
            final_finetune: FinetuneConfig {
                epochs: self.usize("prune.final_epochs"),
                lr: self.float("prune.final_lr"),
                ..base
            },
            seed: self.seed(),
        };
        cfg.validate()?;
        if cfg.stop_mode != StopMode::Budget
            && matches!(cfg.strategy, Strategy::Random | Strategy::WeightSum)
        {
            return Err(Error::Config(format!(
                "strategy `{}` needs prune.stop_mode = budget",
                self.get("prune.strategy")
            )));
        }
        Ok(cfg)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_comments() {
        let cfg =
            Config::parse_text("# baseline\nprune.lambda = 0.5  # half\n\nrun.seed=7\n").unwrap();
        assert_eq!(cfg.float("prune.lambda"), 0.5);
        assert_eq!(cfg.seed(), 7);
        assert!(cfg.is_explicit("run.seed"));
        assert!(!cfg.is_explicit("model.arch"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse_text("prune.lamda = 1")
            .unwrap_err()
            .to_string();
        assert!(err.contains("prune.lamda"), "{err}");
    }

    #[test]
    fn values_are_checked_against_their_kind() {
        for bad in [
            "run.seed = -1",
            "prune.keep_ratio = lots",
            "train.flip = yes",
            "model.arch = alexnet",
        ] {
            assert!(Config::parse_text(bad).is_err(), "{bad}");
        }
        assert!(Config::parse_text("no equals sign").is_err());
    }

    #[test]
    fn defaults_map_to_library_configs() {
        let cfg = Config::default();
        let p = cfg.prune().unwrap();
        assert_eq!(p.strategy, Strategy::Dcp);
        assert_eq!(p.heads, None);
        assert_eq!(cfg.data_shape().unwrap(), None);
        let mut cfg = cfg;
        cfg.set("data.shape", "10x8x8").unwrap();
        assert_eq!(cfg.data_shape().unwrap(), Some([10, 8, 8]));
        cfg.set("prune.strategy", "random").unwrap();
        cfg.set("prune.stop_mode", "tolerance").unwrap();
        assert!(cfg.prune().is_err());
    }

    #[test]
    fn every_default_passes_its_own_check() {
        for k in KEYS {
            check(k, k.default).unwrap();
        }
    }
}
