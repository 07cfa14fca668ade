use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::loss::{HeadNorm, LossHead};
use crate::network::{Mode, NetworkDef, TraceSpec};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// SGD with momentum and L2 weight decay over a fixed list of arrays.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lengths: &[usize], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Arrays whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} arrays, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((w, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            for ((wi, &gi), vi) in w.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-iteration learning-rate decay.
    pub tau: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Zero-padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr: 0.05,
            tau: 0.998,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            crop_pad: 0,
            flip: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.tau > 0.0
            && self.tau <= 1.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid fine-tune settings {self:?}"
            )))
        }
    }
}

/// Mean losses of the first and last epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStats {
    pub iterations: usize,
    pub first_epoch_final_loss: f64,
    pub last_epoch_final_loss: f64,
    pub first_epoch_head_loss: Option<f64>,
    pub last_epoch_head_loss: Option<f64>,
    pub final_lr: f64,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "{what} became non-finite during fine-tuning; try a smaller learning rate"
        )))
    }
}

/// Alternating fine-tune: per mini-batch one forward pass, a step along
/// `∂L_S/∂W` (which also trains the head), a step along `∂L_f/∂W`, then
/// `lr ← τ·lr`. Without a head this is plain training on the final loss.
/// `stream` keys the shuffling so separate calls draw different orders.
pub fn finetune_stage(
    net: &mut NetworkDef,
    mut head: Option<&mut LossHead>,
    data: &Dataset,
    config: &FinetuneConfig,
    stream: u64,
) -> Result<FinetuneStats> {
    config.validate()?;
    if data.num_classes != net.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, network {}",
            data.num_classes, net.num_classes
        )));
    }
    let mut opt = Sgd::new(
        &net.param_lengths(),
        config.lr,
        config.momentum,
        config.weight_decay,
    );
    let mut head_opt = head.as_ref().map(|h| {
        Sgd::new(
            &[h.channels(), h.channels(), h.theta.len()],
            config.lr,
            config.momentum,
            config.weight_decay,
        )
    });
    let mut stats = FinetuneStats {
        final_lr: config.lr,
        ..FinetuneStats::default()
    };
    let mut lr = config.lr;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let mut r = rng::substream(config.seed, rng::SHUFFLE, (stream << 20) | epoch as u64);
        order.shuffle(&mut r);
        let (mut sum_f, mut sum_s, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let (mut images, labels) = data.batch(batch)?;
            if config.crop_pad > 0 || config.flip {
                images = augment(&images, config.crop_pad, config.flip, &mut r);
            }
            let mut tape = Tape::new();
            let trace = net.trace(
                &mut tape,
                Some(&images),
                &TraceSpec::new(Mode::Train).with_grads(),
            )?;
            let vars = net.param_vars(&trace);
            let logits = trace.output(net.final_node()).expect("full trace");
            let lf = tape.softmax_cross_entropy(logits, &labels)?;
            sum_f += finite(tape.value(lf).item(), "final loss")?;
            opt.lr = lr;
            if let (Some(h), Some(hopt)) = (head.as_deref_mut(), head_opt.as_mut()) {
                let act = trace.output(h.attach).expect("head inside network");
                let ht = h.trace(&mut tape, act, HeadNorm::Batch, true)?;
                let ls = tape.softmax_cross_entropy(ht.logits, &labels)?;
                sum_s += finite(tape.value(ls).item(), "head loss")?;
                tape.backward(ls)?;
                let grads: Vec<Option<Tensor>> = vars
                    .iter()
                    .map(|v| v.and_then(|v| tape.take_grad(v)))
                    .collect();
                let head_grads = [
                    tape.take_grad(ht.gamma),
                    tape.take_grad(ht.beta),
                    tape.take_grad(ht.theta),
                ];
                opt.step(net.params_mut(), &grads)?;
                hopt.lr = lr;
                hopt.step(
                    vec![&mut h.bn.gamma, &mut h.bn.beta, h.theta.data_mut()],
                    &head_grads,
                )?;
                if let Some(s) = &ht.batch_stats {
                    h.update_running(s);
                }
            }
            tape.backward(lf)?;
            let grads: Vec<Option<Tensor>> = vars
                .iter()
                .map(|v| v.and_then(|v| tape.take_grad(v)))
                .collect();
            opt.step(net.params_mut(), &grads)?;
            net.update_running_stats(&trace.batch_stats);
            net.enforce_masks();
            lr *= config.tau;
            batches += 1;
            stats.iterations += 1;
        }
        let nb = batches.max(1) as f64;
        if epoch == 0 {
            stats.first_epoch_final_loss = sum_f / nb;
            stats.first_epoch_head_loss = head.is_some().then_some(sum_s / nb);
        }
        stats.last_epoch_final_loss = sum_f / nb;
        stats.last_epoch_head_loss = head.is_some().then_some(sum_s / nb);
    }
    stats.final_lr = lr;
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub top1: f64,
    /// Only reported for at least five classes.
    pub top5: Option<f64>,
    pub samples: usize,
}

/// Classification error in eval mode.
pub fn evaluate(net: &NetworkDef, data: &Dataset) -> Result<ErrorRates> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if data.num_classes != net.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, network {}",
            data.num_classes, net.num_classes
        )));
    }
    let m = net.num_classes;
    let (mut wrong1, mut wrong5) = (0usize, 0usize);
    for idx in data.chunks(256) {
        let (images, labels) = data.batch(&idx)?;
        let logits = net.forward(&images, None, Mode::Eval)?;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * m..(i + 1) * m];
            // rank of the true class: classes scoring higher, ties counted
            // against the prediction
            let better = row
                .iter()
                .enumerate()
                .filter(|&(k, &v)| k != y && v >= row[y])
                .count();
            wrong1 += usize::from(better >= 1);
            wrong5 += usize::from(better >= 5);
        }
    }
    let n = data.len() as f64;
    Ok(ErrorRates {
        top1: wrong1 as f64 / n,
        top5: (m >= 5).then(|| wrong5 as f64 / n),
        samples: data.len(),
    })
}

/// Mean final cross-entropy in eval mode.
pub fn mean_loss(net: &NetworkDef, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for idx in data.chunks(256) {
        let (images, labels) = data.batch(&idx)?;
        let mut tape = Tape::new();
        let trace = net.trace(&mut tape, Some(&images), &TraceSpec::new(Mode::Eval))?;
        let l =
            tape.softmax_cross_entropy(trace.output(net.final_node()).expect("traced"), &labels)?;
        total += tape.value(l).item() * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}
