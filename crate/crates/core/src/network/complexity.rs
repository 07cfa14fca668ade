//! Parameter and multiply-accumulate accounting.

use serde::{Deserialize, Serialize};

use super::{LayerKind, NetworkDef};

pub const FLOP_CONVENTION: &str = "multiply-accumulates of conv and fully-connected layers \
     (n_live * c_kept * kh * kw * h_out * w_out per conv, d_live * m per FC); \
     batch-norm, ReLU, pooling and residual additions are not counted";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: u64,
    pub conv_weights: u64,
    pub flops: u64,
}

impl Complexity {
    pub fn of(net: &NetworkDef) -> Self {
        let (params, conv_weights) = tally_params(net);
        Complexity {
            params,
            conv_weights,
            flops: count_flops(net),
        }
    }
}

fn tally_params(net: &NetworkDef) -> (u64, u64) {
    let live = net.liveness();
    let count = |v: &[bool]| v.iter().filter(|&&b| b).count() as u64;
    let mut total = 0;
    let mut conv_total = 0;
    for (idx, node) in net.nodes().iter().enumerate() {
        match &node.kind {
            LayerKind::Conv(conv) => {
                let src = live.source(node.inputs[0]);
                let cols = conv
                    .input_mask
                    .iter()
                    .zip(src)
                    .filter(|(&m, &l)| m && l)
                    .count() as u64;
                let [_, _, kh, kw] = conv.weight.shape();
                let n = count(&live.nodes[idx]);
                let w = n * cols * (kh * kw) as u64;
                total += w;
                conv_total += w;
            }
            LayerKind::BatchNorm(_) => total += 2 * count(&live.nodes[idx]),
            LayerKind::FullyConnected { theta } => {
                total += count(live.source(node.inputs[0])) * theta.shape()[1] as u64
            }
            _ => {}
        }
    }
    (total, conv_total)
}

/// Learnable scalars that survive compaction: conv weights, BN γ/β, FC θ.
pub fn count_params(net: &NetworkDef) -> u64 {
    tally_params(net).0
}

/// Multiply-accumulates for one input sample, see [`FLOP_CONVENTION`].
pub fn count_flops(net: &NetworkDef) -> u64 {
    let live = net.liveness();
    let count = |v: &[bool]| v.iter().filter(|&&b| b).count() as u64;
    let mut total = 0;
    for (idx, node) in net.nodes().iter().enumerate() {
        match &node.kind {
            LayerKind::Conv(conv) => {
                let src = live.source(node.inputs[0]);
                let cols = conv
                    .input_mask
                    .iter()
                    .zip(src)
                    .filter(|(&m, &l)| m && l)
                    .count() as u64;
                let [_, _, kh, kw] = conv.weight.shape();
                let [_, oh, ow] = net.output_shape(idx);
                total += count(&live.nodes[idx]) * cols * (kh * kw * oh * ow) as u64;
            }
            LayerKind::FullyConnected { theta } => {
                total += count(live.source(node.inputs[0])) * theta.shape()[1] as u64
            }
            _ => {}
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_architecture, Conv, LayerNode, Source};
    use crate::tensor::Tensor;

    #[test]
    fn single_mac() {
        let conv = Conv {
            weight: Tensor::full([1, 1, 1, 1], 1.0),
            stride: 1,
            padding: 0,
            input_mask: vec![true],
        };
        let net = NetworkDef::new(
            "one",
            [1, 1, 1],
            1,
            vec![LayerNode::new(
                "c",
                LayerKind::Conv(conv),
                vec![Source::Input],
            )],
        )
        .unwrap();
        assert_eq!(count_flops(&net), 1);
        assert_eq!(count_params(&net), 1);
    }

    #[test]
    fn toy_counts_by_hand() {
        let net = build_architecture("toy-cnn", 10, 0).unwrap();
        // conv: 3*8*9 + 8*16*9 + 16*16*9, BN: 2*(8+16+16), FC: 16*10
        assert_eq!(count_params(&net), 216 + 1152 + 2304 + 80 + 160);
        // 8x8 for conv1 and conv2, 4x4 after the pool
        assert_eq!(count_flops(&net), 216 * 64 + 1152 * 64 + 2304 * 16 + 160);
    }

    #[test]
    fn masks_reduce_consumer_and_producer() {
        let mut net = build_architecture("toy-cnn", 10, 0).unwrap();
        let before = count_params(&net);
        let l = net.find("conv2").unwrap();
        net.apply_mask(l, &[0, 1, 2, 3, 4]).unwrap();
        // three conv1 filters (3*9 each), their BN entries, three conv2 columns (16*9 each)
        let removed = 3 * 27 + 3 * 2 + 3 * 16 * 9;
        assert_eq!(count_params(&net), before - removed);
        assert_eq!(count_params(&net.compact().unwrap()), before - removed);
    }
}
