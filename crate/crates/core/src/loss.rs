//! Reconstruction, discrimination-aware and joint losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::network::{fill_normal, BatchNorm, Mode, NetworkDef, TraceSpec, BN_MOMENTUM};
use crate::rng;
use crate::tensor::Tensor;

/// Statistics used by the head's batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadNorm {
    /// Statistics of the batch being evaluated.
    Batch,
    /// The head's running statistics; the head is then affine up to the ReLU.
    Running,
}

/// Auxiliary classifier at layer `attach`: BN → ReLU → global average pool → θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossHead {
    pub attach: usize,
    pub bn: BatchNorm,
    /// `[n_p, m, 1, 1]`.
    pub theta: Tensor,
}

/// Variables created when a head is recorded on a tape.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub features: Var,
    pub logits: Var,
    pub gamma: Var,
    pub beta: Var,
    pub theta: Var,
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl LossHead {
    /// Head on the output of node `attach` with seed-determined `θ`.
    pub fn build(net: &NetworkDef, attach: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if attach >= net.len() {
            return Err(Error::invalid(format!(
                "head position {attach} is beyond the final layer {}",
                net.final_node()
            )));
        }
        if num_classes == 0 {
            return Err(Error::invalid("head needs at least one class"));
        }
        let n_p = net.output_shape(attach)[0];
        let mut theta = Tensor::zeros([n_p, num_classes, 1, 1]);
        let mut r = rng::substream(seed, rng::INIT, 0x4845_4144 ^ attach as u64);
        fill_normal(theta.data_mut(), (1.0 / n_p as f64).sqrt(), &mut r);
        Ok(LossHead {
            attach,
            bn: BatchNorm::new(n_p),
            theta,
        })
    }

    pub fn channels(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.theta.shape()[1]
    }

    /// True when every class column of `θ` is identical, so the head cannot discriminate.
    pub fn is_degenerate(&self) -> bool {
        let [d, m, _, _] = self.theta.shape();
        let t = self.theta.data();
        m > 1 && (0..d).all(|k| t[k * m..(k + 1) * m].iter().all(|&v| v == t[k * m]))
    }

    /// Records `F^p` and the logits `θᵀF^p` for activation `o_p`.
    pub fn trace(
        &self,
        tape: &mut Tape,
        o_p: Var,
        norm: HeadNorm,
        grads: bool,
    ) -> Result<HeadTrace> {
        let c = tape.value(o_p).shape()[1];
        if c != self.channels() {
            return Err(Error::invalid(format!(
                "head expects {} channels at layer {}, activation has {c}",
                self.channels(),
                self.attach
            )));
        }
        let gamma = tape.leaf(
            Tensor::from_vec([1, c, 1, 1], self.bn.gamma.clone())?,
            grads,
        );
        let beta = tape.leaf(Tensor::from_vec([1, c, 1, 1], self.bn.beta.clone())?, grads);
        let stats = match norm {
            HeadNorm::Batch => BnStats::Batch,
            HeadNorm::Running => BnStats::Fixed {
                mean: &self.bn.running_mean,
                var: &self.bn.running_var,
            },
        };
        let (normed, batch_stats) = tape.batch_norm(o_p, gamma, beta, stats)?;
        let act = tape.relu(normed)?;
        let features = tape.global_avg_pool(act)?;
        let theta = tape.leaf(self.theta.clone(), grads);
        let logits = tape.fully_connected(features, theta)?;
        Ok(HeadTrace {
            features,
            logits,
            gamma,
            beta,
            theta,
            batch_stats,
        })
    }

    /// `F^p(W) = AvgPool(ReLU(BN(O^p)))` as a `[N, n_p, 1, 1]` tensor.
    pub fn features(&self, activation: &Tensor, norm: HeadNorm) -> Result<Tensor> {
        let mut tape = Tape::new();
        let o = tape.constant(activation.clone());
        let h = self.trace(&mut tape, o, norm, false)?;
        Ok(tape.value(h.features).clone())
    }

    pub fn update_running(&mut self, stats: &(Vec<f64>, Vec<f64>)) {
        self.bn.update_running(&stats.0, &stats.1, BN_MOMENTUM);
    }

    /// Sets the head's running statistics to the exact moments of `activation`.
    pub fn calibrate(&mut self, activation: &Tensor) -> Result<()> {
        let (m, v) = kernels::channel_moments(activation)?;
        self.bn.running_mean = m;
        self.bn.running_var = v;
        Ok(())
    }
}

/// Baseline feature maps `O^b` of the pre-trained model on a fixed sample subset.
#[derive(Clone, Debug, Default)]
pub struct BaselineCache {
    maps: BTreeMap<usize, Tensor>,
}

impl BaselineCache {
    /// Runs `net` in eval mode on `inputs` and stores the outputs of `layers`.
    pub fn capture(net: &NetworkDef, inputs: &Tensor, layers: &[usize]) -> Result<Self> {
        let Some(&last) = layers.iter().max() else {
            return Ok(BaselineCache::default());
        };
        let mut tape = Tape::new();
        let trace = net.trace(
            &mut tape,
            Some(inputs),
            &TraceSpec::new(Mode::Eval).upto(last),
        )?;
        let maps = layers
            .iter()
            .map(|&l| (l, tape.value(trace.output(l).expect("traced")).clone()))
            .collect();
        Ok(BaselineCache { maps })
    }

    pub fn insert(&mut self, layer: usize, map: Tensor) {
        self.maps.insert(layer, map);
    }

    pub fn get(&self, layer: usize) -> Result<&Tensor> {
        self.maps.get(&layer).ok_or_else(|| {
            Error::invalid(format!("no baseline feature map cached for layer {layer}"))
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.maps.keys().copied()
    }
}

/// `L_M = 1/(2Q) Σ ‖O^b − O‖²` with `Q = N·n·h_out·z_out`.
pub fn reconstruction_loss(
    pruned_out: &Tensor,
    cache: &BaselineCache,
    layer: usize,
) -> Result<f64> {
    let base = cache.get(layer)?;
    kernels::mean_squared_half(pruned_out, base, base.len())
}

/// `L_S^p`: mean cross-entropy of the head's softmax on `activation`.
pub fn discrimination_loss(
    head: &LossHead,
    activation: &Tensor,
    labels: &[usize],
    norm: HeadNorm,
) -> Result<f64> {
    let mut tape = Tape::new();
    let o = tape.constant(activation.clone());
    let h = head.trace(&mut tape, o, norm, false)?;
    let l = tape.softmax_cross_entropy(h.logits, labels)?;
    Ok(tape.value(l).item())
}

/// `L = L_M + λ·L_S`.
pub fn joint_loss(reconstruction: f64, discrimination: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(reconstruction + lambda * discrimination)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_architecture;

    #[test]
    fn head_beyond_final_layer_rejected() {
        let net = build_architecture("toy-cnn", 3, 0).unwrap();
        assert!(LossHead::build(&net, net.len(), 3, 0).is_err());
    }

    #[test]
    fn head_logit_shape() {
        let net = build_architecture("toy-cnn", 5, 0).unwrap();
        let l = net.find("conv3").unwrap();
        let head = LossHead::build(&net, l, 5, 1).unwrap();
        let x = Tensor::full([3, 3, 8, 8], 0.5);
        let o = net.forward(&x, Some(l), Mode::Eval).unwrap();
        let mut tape = Tape::new();
        let ov = tape.constant(o);
        let h = head.trace(&mut tape, ov, HeadNorm::Batch, false).unwrap();
        assert_eq!(tape.value(h.logits).shape(), [3, 5, 1, 1]);
    }

    #[test]
    fn zero_theta_gives_ln_m() {
        let net = build_architecture("toy-cnn", 4, 0).unwrap();
        let l = net.find("conv1").unwrap();
        let mut head = LossHead::build(&net, l, 4, 0).unwrap();
        head.theta = Tensor::zeros(head.theta.shape());
        assert!(head.is_degenerate());
        let o = Tensor::full([2, 8, 3, 3], 1.5);
        let ls = discrimination_loss(&head, &o, &[0, 3], HeadNorm::Batch).unwrap();
        assert!((ls - 4f64.ln()).abs() < 1e-14);
        let wrong = Tensor::full([2, 7, 3, 3], 1.5);
        assert!(discrimination_loss(&head, &wrong, &[0, 3], HeadNorm::Batch).is_err());
    }

    #[test]
    fn joint_loss_cases() {
        assert_eq!(joint_loss(0.7, 3.0, 0.0).unwrap(), 0.7);
        assert_eq!(joint_loss(0.0, 3.0, 1.0).unwrap(), 3.0);
        assert_eq!(joint_loss(0.5, 2.0, 1.0).unwrap(), 2.5);
        assert!(joint_loss(0.5, 2.0, -0.1).is_err());
        assert!(joint_loss(0.5, 2.0, f64::NAN).is_err());
    }

    #[test]
    fn reconstruction_cases() {
        let mut cache = BaselineCache::default();
        cache.insert(2, Tensor::scalar(0.0));
        assert_eq!(
            reconstruction_loss(&Tensor::scalar(1.0), &cache, 2).unwrap(),
            0.5
        );
        assert_eq!(
            reconstruction_loss(&Tensor::scalar(0.0), &cache, 2).unwrap(),
            0.0
        );
        assert!(reconstruction_loss(&Tensor::scalar(0.0), &cache, 3).is_err());
    }
}
