//! Built-in architectures.

use super::{BatchNorm, Conv, LayerKind, LayerNode, NetworkDef, Source};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const ARCHITECTURES: [&str; 4] = ["vggnet-cifar", "resnet-56", "resnet-8", "toy-cnn"];

pub fn default_input_shape(name: &str) -> Result<[usize; 3]> {
    match name {
        "vggnet-cifar" | "resnet-56" => Ok([3, 32, 32]),
        "resnet-8" | "toy-cnn" => Ok([3, 8, 8]),
        other => Err(Error::Config(format!("unknown architecture `{other}`"))),
    }
}

/// Builds `name` for its default input extents with seed-determined weights.
pub fn build_architecture(name: &str, num_classes: usize, seed: u64) -> Result<NetworkDef> {
    build_architecture_for(name, num_classes, default_input_shape(name)?, seed)
}

pub fn build_architecture_for(
    name: &str,
    num_classes: usize,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<NetworkDef> {
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let mut b = Builder::new(input_shape[0]);
    match name {
        "vggnet-cifar" => vgg(&mut b),
        "resnet-56" => resnet(&mut b, [16, 32, 64], 9),
        "resnet-8" => resnet(&mut b, [8, 16, 32], 1),
        "toy-cnn" => toy(&mut b),
        other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
    }
    b.head(num_classes);
    let mut net = NetworkDef::new(name, input_shape, num_classes, b.nodes)?;
    net.reinitialize(&mut rng::stream(seed, rng::INIT));
    Ok(net)
}

struct Builder {
    nodes: Vec<LayerNode>,
    cursor: Source,
    channels: usize,
}

impl Builder {
    fn new(channels: usize) -> Self {
        Builder {
            nodes: Vec::new(),
            cursor: Source::Input,
            channels,
        }
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<Source>) -> Source {
        self.nodes.push(LayerNode::new(name, kind, inputs));
        Source::Node(self.nodes.len() - 1)
    }

    fn conv_from(
        &mut self,
        name: &str,
        from: Source,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Source {
        let conv = Conv {
            weight: Tensor::zeros([cout, cin, k, k]),
            stride,
            padding: k / 2,
            input_mask: vec![true; cin],
        };
        self.push(name.to_string(), LayerKind::Conv(conv), vec![from])
    }

    fn bn_from(&mut self, name: &str, from: Source, c: usize) -> Source {
        self.push(
            name.to_string(),
            LayerKind::BatchNorm(BatchNorm::new(c)),
            vec![from],
        )
    }

    fn relu_from(&mut self, name: &str, from: Source) -> Source {
        self.push(name.to_string(), LayerKind::Relu, vec![from])
    }

    /// conv → BN → ReLU on the cursor.
    fn conv_bn_relu(&mut self, name: &str, cout: usize, stride: usize) {
        let c = self.conv_from(name, self.cursor, self.channels, cout, 3, stride);
        let b = self.bn_from(&format!("{name}.bn"), c, cout);
        self.cursor = self.relu_from(&format!("{name}.relu"), b);
        self.channels = cout;
    }

    fn max_pool(&mut self, name: &str) {
        self.cursor = self.push(
            name.to_string(),
            LayerKind::MaxPool {
                window: 2,
                stride: 2,
            },
            vec![self.cursor],
        );
    }

    fn basic_block(&mut self, name: &str, cout: usize, stride: usize) {
        let input = self.cursor;
        let cin = self.channels;
        let c1 = self.conv_from(&format!("{name}.conv1"), input, cin, cout, 3, stride);
        let b1 = self.bn_from(&format!("{name}.bn1"), c1, cout);
        let r1 = self.relu_from(&format!("{name}.relu1"), b1);
        let c2 = self.conv_from(&format!("{name}.conv2"), r1, cout, cout, 3, 1);
        let b2 = self.bn_from(&format!("{name}.bn2"), c2, cout);
        let shortcut = if stride != 1 || cin != cout {
            let p = self.conv_from(&format!("{name}.proj"), input, cin, cout, 1, stride);
            self.bn_from(&format!("{name}.proj.bn"), p, cout)
        } else {
            input
        };
        let sum = self.push(
            format!("{name}.add"),
            LayerKind::ResidualAdd,
            vec![b2, shortcut],
        );
        self.cursor = self.relu_from(&format!("{name}.relu2"), sum);
        self.channels = cout;
    }

    fn head(&mut self, num_classes: usize) {
        let gap = self.push("gap".into(), LayerKind::GlobalAvgPool, vec![self.cursor]);
        self.push(
            "fc".into(),
            LayerKind::FullyConnected {
                theta: Tensor::zeros([self.channels, num_classes, 1, 1]),
            },
            vec![gap],
        );
    }
}

/// VGG-19 convolution stack: pools follow conv1-2, conv2-2, conv3-4 and conv4-4.
fn vgg(b: &mut Builder) {
    let blocks: [(usize, usize, usize); 4] = [(1, 64, 2), (2, 128, 2), (3, 256, 4), (4, 512, 8)];
    for (block, width, depth) in blocks {
        for i in 1..=depth {
            b.conv_bn_relu(&format!("conv{block}-{i}"), width, 1);
            let pooled = matches!((block, i), (1, 2) | (2, 2) | (3, 4) | (4, 4));
            if pooled {
                b.max_pool(&format!("pool{block}-{i}"));
            }
        }
    }
}

/// CIFAR residual network: stem plus three stages of basic blocks, with 1×1
/// projection shortcuts where the shape changes.
fn resnet(b: &mut Builder, widths: [usize; 3], blocks_per_stage: usize) {
    b.conv_bn_relu("stem", widths[0], 1);
    for (s, &w) in widths.iter().enumerate() {
        for i in 0..blocks_per_stage {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            b.basic_block(&format!("stage{}.block{}", s + 1, i + 1), w, stride);
        }
    }
}

fn toy(b: &mut Builder) {
    b.conv_bn_relu("conv1", 8, 1);
    b.conv_bn_relu("conv2", 16, 1);
    b.max_pool("pool2");
    b.conv_bn_relu("conv3", 16, 1);
}
