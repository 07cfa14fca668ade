use std::path::{Path, PathBuf};
use std::time::Instant;

use dcp::data::{
    load_checkpoint, load_cifar10, make_synthetic_split, save_checkpoint, CheckpointMeta, Dataset,
    Split,
};
use dcp::network::{
    build_architecture_for, default_input_shape, Complexity, NetworkDef, FLOP_CONVENTION,
};
use dcp::pipeline::{evaluate, finetune_stage, run_dcp, ErrorRates};
use dcp::{Error, Result};
use serde_json::{json, Value};

use crate::config::Config;
use crate::report::{self, sha256_hex};

pub const DATA_DIR_ENV: &str = "DCP_DATA_DIR";

/// Output of one command: the record and whether wall time belongs to it.
pub struct Outcome {
    pub command: &'static str,
    pub record: Value,
    pub wall_seconds: Option<f64>,
}

fn config_hash(cfg: &Config) -> String {
    sha256_hex(&serde_json::to_vec(&cfg.snapshot()).expect("string map serializes"))
}

fn load_data(cfg: &Config, split: Split, shape_hint: [usize; 3]) -> Result<Dataset> {
    match cfg.get("data.source") {
        "cifar10" => load_cifar10(Path::new(cfg.get("data.dir")), split),
        _ => {
            let n = match split {
                Split::Train => cfg.usize("data.train_size"),
                Split::Test => cfg.usize("data.test_size"),
            };
            let shape = cfg.data_shape()?.unwrap_or(shape_hint);
            make_synthetic_split(
                cfg.synthetic_kind(),
                n,
                cfg.usize("data.classes"),
                shape,
                cfg.uint("data.seed"),
                split,
            )
        }
    }
}

fn fresh_shape(cfg: &Config) -> Result<[usize; 3]> {
    if cfg.get("data.source") == "cifar10" {
        return Ok([3, 32, 32]);
    }
    match cfg.data_shape()? {
        Some(s) => Ok(s),
        None => default_input_shape(cfg.get("model.arch")),
    }
}

fn check_arch(cfg: &Config, net: &NetworkDef) -> Result<()> {
    let wanted = cfg.get("model.arch");
    if cfg.is_explicit("model.arch") && wanted != net.arch {
        return Err(Error::Config(format!(
            "checkpoint holds a `{}` network but model.arch is `{wanted}`",
            net.arch
        )));
    }
    Ok(())
}

fn rates(e: &ErrorRates) -> Value {
    json!({ "top1": e.top1, "top5": e.top5, "samples": e.samples })
}

fn complexity(c: &Complexity) -> Value {
    json!({ "params": c.params, "conv_weights": c.conv_weights, "flops": c.flops })
}

fn save(net: &NetworkDef, meta: &CheckpointMeta, path: &Path) -> Result<String> {
    save_checkpoint(net, meta, path)?;
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn train(cfg: &Config, out: &Path, resume: Option<&Path>) -> Result<Outcome> {
    let started = Instant::now();
    let (mut net, done) = match resume {
        Some(p) => {
            let (net, meta) = load_checkpoint(p)?;
            check_arch(cfg, &net)?;
            (net, meta.epochs_trained)
        }
        None => {
            let shape = fresh_shape(cfg)?;
            let classes = match cfg.get("data.source") {
                "cifar10" => 10,
                _ => cfg.usize("data.classes"),
            };
            (
                build_architecture_for(cfg.get("model.arch"), classes, shape, cfg.seed())?,
                0,
            )
        }
    };
    let train = load_data(cfg, Split::Train, net.input_shape)?;
    let test = load_data(cfg, Split::Test, net.input_shape)?;
    if resume.is_none() {
        net.normalization = train.normalization.clone();
    }
    let ft = cfg.finetune();
    let stats = finetune_stage(&mut net, None, &train, &ft, done)?;
    let error = evaluate(&net, &test)?;
    let meta = CheckpointMeta {
        seed: cfg.seed(),
        config_hash: config_hash(cfg),
        epochs_trained: done + ft.epochs as u64,
    };
    let digest = save(&net, &meta, out)?;
    Ok(Outcome {
        command: "train",
        record: json!({
            "config": cfg.snapshot(),
            "seed": cfg.seed(),
            "arch": net.arch,
            "epochs_run": ft.epochs,
            "epochs_trained": meta.epochs_trained,
            "first_epoch_loss": stats.first_epoch_final_loss,
            "last_epoch_loss": stats.last_epoch_final_loss,
            "test_error": rates(&error),
            "complexity": complexity(&Complexity::of(&net)),
            "checkpoint_sha256": digest,
        }),
        wall_seconds: Some(started.elapsed().as_secs_f64()),
    })
}

pub fn prune(cfg: &Config, checkpoint: &Path, out: &Path) -> Result<Outcome> {
    let started = Instant::now();
    let (net, meta) = load_checkpoint(checkpoint)?;
    check_arch(cfg, &net)?;
    let pc = cfg.prune()?;
    let train = load_data(cfg, Split::Train, net.input_shape)?;
    let test = load_data(cfg, Split::Test, net.input_shape)?;
    let (pruned, rep) = run_dcp(&net, &train, Some(&test), &pc)?;
    let saved = if cfg.flag("prune.compact") {
        pruned.compact()?
    } else {
        pruned
    };
    let epochs = meta.epochs_trained
        + (rep.head_names.len() * pc.stage_finetune.epochs) as u64
        + pc.final_finetune.epochs as u64;
    let out_meta = CheckpointMeta {
        seed: cfg.seed(),
        config_hash: config_hash(cfg),
        epochs_trained: epochs,
    };
    let digest = save(&saved, &out_meta, out)?;
    let layers: Vec<Value> = rep
        .layers
        .iter()
        .map(|l| {
            json!({
                "layer": l.layer,
                "name": l.name,
                "stage": l.stage,
                "channels": l.channels,
                "kept": l.kept,
                "l20": l.l20,
                "selected": l.selected,
                "loss_first": l.loss_history.first(),
                "loss_last": l.loss_history.last(),
                "iterations": l.loss_history.len().saturating_sub(1),
            })
        })
        .collect();
    Ok(Outcome {
        command: "prune",
        record: json!({
            "config": cfg.snapshot(),
            "seed": cfg.seed(),
            "arch": net.arch,
            "strategy": rep.strategy,
            "heads": rep.head_names,
            "layers": layers,
            "before": complexity(&rep.before),
            "after": complexity(&rep.after),
            "param_reduction": rep.param_reduction(),
            "flop_reduction": rep.flop_reduction(),
            "error_before": rep.error_before.as_ref().map(rates),
            "error_after_selection": rep.error_after_selection.as_ref().map(rates),
            "error_after": rep.error_after.as_ref().map(rates),
            "error_gap": rep.error_gap(),
            "compacted": cfg.flag("prune.compact"),
            "checkpoint_sha256": digest,
        }),
        wall_seconds: Some(started.elapsed().as_secs_f64()),
    })
}

pub fn eval(cfg: &Config, checkpoint: &Path, baseline: Option<&Path>) -> Result<Outcome> {
    let (net, _) = load_checkpoint(checkpoint)?;
    let test = load_data(cfg, Split::Test, net.input_shape)?;
    let error = evaluate(&net, &test)?;
    let gap = match baseline {
        Some(p) => {
            let (base, _) = load_checkpoint(p)?;
            Some(error.top1 - evaluate(&base, &test)?.top1)
        }
        None => None,
    };
    Ok(Outcome {
        command: "eval",
        record: json!({
            "arch": net.arch,
            "checkpoint_sha256": sha256_hex(&std::fs::read(checkpoint)?),
            "split": "test",
            "error": rates(&error),
            "error_gap": gap,
            "complexity": complexity(&Complexity::of(&net)),
        }),
        wall_seconds: None,
    })
}

pub fn complexity_of(cfg: &Config, checkpoint: Option<&PathBuf>) -> Result<Outcome> {
    let net = match checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => {
            let classes = match cfg.get("data.source") {
                "cifar10" => 10,
                _ => cfg.usize("data.classes"),
            };
            build_architecture_for(
                cfg.get("model.arch"),
                classes,
                fresh_shape(cfg)?,
                cfg.seed(),
            )?
        }
    };
    let c = Complexity::of(&net);
    Ok(Outcome {
        command: "complexity",
        record: json!({
            "arch": net.arch,
            "num_classes": net.num_classes,
            "input_shape": net.input_shape,
            "params": c.params,
            "conv_weights": c.conv_weights,
            "flops": c.flops,
            "flop_convention": FLOP_CONVENTION,
        }),
        wall_seconds: None,
    })
}

pub fn finish(outcome: Outcome, report_path: Option<&Path>) -> Result<()> {
    let line = report::line(outcome.command, outcome.record, outcome.wall_seconds);
    report::emit(&line, report_path)?;
    Ok(())
}
