//! Input-channel masks, channel liveness, and physical compaction.

use super::{Conv, LayerKind, NetworkDef, Source};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of input channels whose weight slice `W[:, k, :, :]` is not identically zero.
pub fn l20_norm(weight: &Tensor) -> usize {
    let [n, c, kh, kw] = weight.shape();
    let plane = kh * kw;
    let w = weight.data();
    (0..c)
        .filter(|&k| {
            (0..n).any(|j| {
                w[(j * c + k) * plane..(j * c + k + 1) * plane]
                    .iter()
                    .any(|&v| v != 0.0)
            })
        })
        .count()
}

/// Which output channels of every node survive compaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Liveness {
    /// Raw-input channels still read (after any existing selection).
    pub input: Vec<bool>,
    pub nodes: Vec<Vec<bool>>,
    /// Convolutions whose partial mask cannot be pushed to a producer.
    pub unpropagated: Vec<usize>,
}

impl Liveness {
    pub fn source(&self, s: Source) -> &[bool] {
        match s {
            Source::Input => &self.input,
            Source::Node(i) => &self.nodes[i],
        }
    }
}

/// The chain feeding a convolution's input: channel-wise nodes back to the
/// producing convolution (or the network input).
struct ProducerChain {
    channelwise: Vec<usize>,
    producer: Source,
}

impl NetworkDef {
    /// Walks back from `conv`'s input through single-consumer channel-wise
    /// nodes. `None` when channels are shared with another consumer.
    fn producer_chain(&self, conv: usize, consumers: &[usize]) -> Option<ProducerChain> {
        let mut channelwise = Vec::new();
        let mut src = self.nodes[conv].inputs[0];
        loop {
            let count = match src {
                Source::Input => consumers[0],
                Source::Node(i) => consumers[i + 1],
            };
            if count != 1 {
                return None;
            }
            match src {
                Source::Input => {
                    return Some(ProducerChain {
                        channelwise,
                        producer: src,
                    })
                }
                Source::Node(i) => match &self.nodes[i].kind {
                    LayerKind::Conv(_) => {
                        return Some(ProducerChain {
                            channelwise,
                            producer: src,
                        })
                    }
                    k if k.is_channelwise() => {
                        channelwise.push(i);
                        src = self.nodes[i].inputs[0];
                    }
                    _ => return None,
                },
            }
        }
    }

    /// Convolutions whose input channels can be pruned with the producer's
    /// filters and batch-norm entries removed alongside. In residual networks
    /// this excludes convolutions reading a block input shared with the
    /// shortcut, so block outputs stay aligned.
    pub fn prunable_layers(&self) -> Vec<usize> {
        let consumers = self.consumer_counts();
        self.conv_nodes()
            .into_iter()
            .filter(|&i| self.producer_chain(i, &consumers).is_some())
            .collect()
    }

    /// Keeps only input channels `keep` of convolution `layer` and zeroes the
    /// other weight columns.
    pub fn apply_mask(&mut self, layer: usize, keep: &[usize]) -> Result<()> {
        let conv = self.conv_mut(layer)?;
        let c = conv.in_channels();
        if keep.is_empty() {
            return Err(Error::invalid(format!(
                "layer {layer} must keep at least one channel"
            )));
        }
        if let Some(&k) = keep.iter().find(|&&k| k >= c) {
            return Err(Error::invalid(format!(
                "channel {k} out of range for layer {layer} with {c} inputs"
            )));
        }
        let mut mask = vec![false; c];
        for &k in keep {
            mask[k] = true;
        }
        conv.input_mask = mask;
        conv.enforce_mask();
        Ok(())
    }

    /// Live channels after pushing every partial mask back to its producer.
    pub fn liveness(&self) -> Liveness {
        let consumers = self.consumer_counts();
        let raw_c = self.effective_input_shape()[0];
        let mut live = Liveness {
            input: vec![true; raw_c],
            nodes: (0..self.nodes.len())
                .map(|i| vec![true; self.shapes[i][0]])
                .collect(),
            unpropagated: Vec::new(),
        };
        for idx in self.conv_nodes() {
            let conv = self.conv(idx).expect("conv node");
            if conv.input_mask.iter().all(|&m| m) {
                continue;
            }
            match self.producer_chain(idx, &consumers) {
                Some(chain) => {
                    let restrict = |v: &mut Vec<bool>| {
                        for (l, &m) in v.iter_mut().zip(&conv.input_mask) {
                            *l &= m;
                        }
                    };
                    for &n in &chain.channelwise {
                        restrict(&mut live.nodes[n]);
                    }
                    match chain.producer {
                        Source::Input => restrict(&mut live.input),
                        Source::Node(p) => restrict(&mut live.nodes[p]),
                    }
                }
                None => live.unpropagated.push(idx),
            }
        }
        live
    }

    /// Physically removes masked channels, the producer filters feeding them,
    /// and their batch-norm entries. The result computes the same function.
    pub fn compact(&self) -> Result<NetworkDef> {
        let live = self.liveness();
        if let Some(&bad) = live.unpropagated.first() {
            return Err(Error::invalid(format!(
                "cannot compact layer {} ({}): its masked input channels are shared with \
                 another consumer (e.g. a residual branch)",
                bad, self.nodes[bad].name
            )));
        }
        let keep = |v: &[bool]| -> Vec<usize> { (0..v.len()).filter(|&i| v[i]).collect() };
        let mut nodes = self.nodes.clone();
        for (idx, node) in nodes.iter_mut().enumerate() {
            let out_keep = keep(&live.nodes[idx]);
            match &mut node.kind {
                LayerKind::Conv(conv) => {
                    let src_live = live.source(node.inputs[0]);
                    let in_keep: Vec<usize> =
                        (0..conv.in_channels()).filter(|&k| src_live[k]).collect();
                    *conv = slice_conv(conv, &out_keep, &in_keep)?;
                }
                LayerKind::BatchNorm(bn) => {
                    let pick = |v: &Vec<f64>| out_keep.iter().map(|&k| v[k]).collect::<Vec<_>>();
                    bn.gamma = pick(&bn.gamma);
                    bn.beta = pick(&bn.beta);
                    bn.running_mean = pick(&bn.running_mean);
                    bn.running_var = pick(&bn.running_var);
                }
                LayerKind::FullyConnected { theta } => {
                    let src_live = live.source(node.inputs[0]);
                    let rows: Vec<usize> = keep(src_live);
                    let [_, m, _, _] = theta.shape();
                    let mut data = Vec::with_capacity(rows.len() * m);
                    for &r in &rows {
                        data.extend_from_slice(&theta.data()[r * m..(r + 1) * m]);
                    }
                    *theta = Tensor::from_vec([rows.len(), m, 1, 1], data)?;
                }
                _ => {}
            }
        }
        let mut out = self.clone();
        let input_keep = keep(&live.input);
        if input_keep.len() != live.input.len() {
            let base: Vec<usize> = match &self.input_channels {
                Some(sel) => sel.clone(),
                None => (0..self.input_shape[0]).collect(),
            };
            out.input_channels = Some(input_keep.iter().map(|&k| base[k]).collect());
        }
        out.replace_nodes(nodes)?;
        Ok(out)
    }
}

fn slice_conv(conv: &Conv, out_keep: &[usize], in_keep: &[usize]) -> Result<Conv> {
    let [n, c, kh, kw] = conv.weight.shape();
    let plane = kh * kw;
    let w = conv.weight.data();
    let mut data = Vec::with_capacity(out_keep.len() * in_keep.len() * plane);
    for &j in out_keep {
        debug_assert!(j < n);
        for &k in in_keep {
            let start = (j * c + k) * plane;
            data.extend_from_slice(&w[start..start + plane]);
        }
    }
    // columns outside the mask were zero, and survivors of compaction are
    // exactly the masked-in channels, so the new mask is full
    let input_mask = in_keep.iter().map(|&k| conv.input_mask[k]).collect();
    Ok(Conv {
        weight: Tensor::from_vec([out_keep.len(), in_keep.len(), kh, kw], data)?,
        stride: conv.stride,
        padding: conv.padding,
        input_mask,
    })
}
