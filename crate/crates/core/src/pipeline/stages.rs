use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerKind, NetworkDef, Source};

/// Prunable layers split into `P` stages, each closed by an auxiliary loss,
/// plus a final stage read at the network output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Head positions `L_1..L_P` (node indices).
    pub heads: Vec<usize>,
    /// `P + 1` layer lists; the last belongs to the final loss and is empty
    /// because `L_P` closes the last prunable layer.
    pub stages: Vec<Vec<usize>>,
    pub final_node: usize,
}

impl StagePlan {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Boundaries `L_1 < … < L_P < L_{P+1}`.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut b = self.heads.clone();
        b.push(self.final_node);
        b
    }
}

/// 2 heads for nets of at most 20 convolutions, 3 beyond; never more than the
/// prunable layer count allows.
pub fn default_heads(net: &NetworkDef) -> usize {
    let wanted = if net.conv_nodes().len() <= 20 { 2 } else { 3 };
    wanted
        .min(net.prunable_layers().len().saturating_sub(1))
        .max(1)
}

/// End of the unit a layer belongs to: follows single consumers through
/// batch norm, ReLU and residual additions.
fn unit_end(net: &NetworkDef, layer: usize) -> usize {
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); net.len()];
    for (idx, node) in net.nodes().iter().enumerate() {
        for s in &node.inputs {
            if let Source::Node(i) = *s {
                consumers[i].push(idx);
            }
        }
    }
    let mut cur = layer;
    loop {
        match consumers[cur].as_slice() {
            [next]
                if matches!(
                    net.node(*next).kind,
                    LayerKind::BatchNorm(_) | LayerKind::Relu | LayerKind::ResidualAdd
                ) =>
            {
                cur = *next
            }
            _ => return cur,
        }
    }
}

/// Splits the prunable layers into `heads` contiguous groups whose sizes
/// differ by at most one (larger groups first). Each head sits at the end of
/// its group's last layer unit.
pub fn plan_stages(net: &NetworkDef, heads: usize) -> Result<StagePlan> {
    let prunable = net.prunable_layers();
    if heads == 0 || heads >= prunable.len() {
        return Err(Error::Config(format!(
            "number of heads must lie in 1..{} for {} prunable layers, got {heads}",
            prunable.len(),
            prunable.len()
        )));
    }
    let base = prunable.len() / heads;
    let extra = prunable.len() % heads;
    let mut stages = Vec::with_capacity(heads + 1);
    let mut start = 0;
    for p in 0..heads {
        let size = base + usize::from(p < extra);
        stages.push(prunable[start..start + size].to_vec());
        start += size;
    }
    let positions: Vec<usize> = stages
        .iter()
        .map(|s| unit_end(net, *s.last().expect("non-empty stage")))
        .collect();
    stages.push(Vec::new());
    Ok(StagePlan {
        heads: positions,
        stages,
        final_node: net.final_node(),
    })
}
