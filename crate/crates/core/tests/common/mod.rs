//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::io::Write as _;

use dcp::kernels::BN_EPS;
use dcp::loss::{BaselineCache, LossHead};
use dcp::network::{Conv, LayerKind, LayerNode, NetworkDef, Source};
use dcp::rng::{self, Rng};
use dcp::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn random_tensor(shape: [usize; 4], r: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal(r)).collect()).unwrap()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = x.data()[i];
            probe.data_mut()[i] = v + h;
            let up = f(&probe);
            probe.data_mut()[i] = v - h;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Writes a line past the test harness's output capture.
pub fn announce(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

/// Direct quadruple-loop convolution.
pub fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let [o, _, kh, kw] = w.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    for i in 0..n {
        for j in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for k in 0..c {
                        for a in 0..kh {
                            for b in 0..kw {
                                let iy = (y * stride + a) as isize - pad as isize;
                                let ix = (xx * stride + b) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(i, k, iy as usize, ix as usize) * w.at(j, k, a, b);
                            }
                        }
                    }
                    let off = out.offset(i, j, y, xx);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

/// One convolution reading the raw input; the layer under selection in
/// single-layer instances.
pub fn single_conv_net(
    weight: Tensor,
    padding: usize,
    input: [usize; 3],
    classes: usize,
) -> NetworkDef {
    let c = weight.shape()[1];
    let conv = Conv {
        weight,
        stride: 1,
        padding,
        input_mask: vec![true; c],
    };
    NetworkDef::new(
        "single",
        input,
        classes,
        vec![LayerNode::new(
            "conv",
            LayerKind::Conv(conv),
            vec![Source::Input],
        )],
    )
    .unwrap()
}

/// A single-layer selection problem whose joint loss is convex in W: the
/// head normalizes with fixed statistics, its shift keeps every ReLU input
/// positive, and its classifier columns have equal sums.
pub struct ConvexInstance {
    pub net: NetworkDef,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub cache: BaselineCache,
    pub head: LossHead,
    pub true_weight: Tensor,
}

pub const CONVEX_SHIFT: f64 = 60.0;

pub fn convex_instance(
    seed: u64,
    c: usize,
    n: usize,
    k: usize,
    samples: usize,
    classes: usize,
) -> ConvexInstance {
    let mut r = rng::stream(seed, "convex-instance");
    let side = 4;
    let images = random_tensor([samples, c, side, side], &mut r);
    let true_weight = random_tensor([n, c, k, k], &mut r).scaled(0.5);
    let pad = k / 2;
    let net = single_conv_net(Tensor::zeros([n, c, k, k]), pad, [c, side, side], classes);
    let base = conv_oracle(&images, &true_weight, 1, pad);
    let mut cache = BaselineCache::default();
    cache.insert(0, base.clone());
    let labels: Vec<usize> = (0..samples).map(|_| r.random_range(0..classes)).collect();
    let mut head = LossHead::build(&net, 0, classes, seed).unwrap();
    head.calibrate(&base).unwrap();
    head.bn.beta = vec![CONVEX_SHIFT; n];
    head.bn.gamma = (0..n).map(|_| 0.5 + r.random::<f64>()).collect();
    let mut theta = random_tensor([n, classes, 1, 1], &mut r);
    // equal column sums cancel the large shift in the softmax
    for j in 0..n {
        let row = &mut theta.data_mut()[j * classes..(j + 1) * classes];
        let mean = row.iter().sum::<f64>() / classes as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    head.theta = theta;
    ConvexInstance {
        net,
        images,
        labels,
        cache,
        head,
        true_weight,
    }
}

/// Smallest head pre-activation `γ(O − μ)/σ + β` over all entries, for the
/// convex instance at weight `w`.
pub fn min_head_preactivation(inst: &ConvexInstance, w: &Tensor) -> f64 {
    let pad = w.shape()[2] / 2;
    let o = conv_oracle(&inst.images, w, 1, pad);
    let [nn, cc, hh, ww] = o.shape();
    let bn = &inst.head.bn;
    let mut lo = f64::INFINITY;
    for i in 0..nn {
        for j in 0..cc {
            let s = (bn.running_var[j] + BN_EPS).sqrt();
            for y in 0..hh {
                for x in 0..ww {
                    let v = bn.gamma[j] * (o.at(i, j, y, x) - bn.running_mean[j]) / s + bn.beta[j];
                    lo = lo.min(v);
                }
            }
        }
    }
    lo
}

/// Greedy-oracle instance: a 1×1 convolution over per-sample scalars whose
/// channel vectors (across samples) are orthogonal with equal norm.
pub struct OrthogonalInstance {
    pub net: NetworkDef,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub cache: BaselineCache,
    pub head: LossHead,
    pub lambda: f64,
}

fn orthonormal_columns(rows: usize, cols: usize, r: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| normal(r)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

pub fn orthogonal_instance(seed: u64, c: usize) -> OrthogonalInstance {
    let mut r = rng::stream(seed, "orthogonal-instance");
    let samples = 24;
    let n = 3;
    let classes = 2;
    let scale = (samples as f64).sqrt();
    let cols = orthonormal_columns(samples, c, &mut r);
    let mut images = Tensor::zeros([samples, c, 1, 1]);
    for (k, col) in cols.iter().enumerate() {
        for i in 0..samples {
            let off = images.offset(i, k, 0, 0);
            images.data_mut()[off] = scale * col[i];
        }
    }
    let mut w_true = random_tensor([n, c, 1, 1], &mut r).scaled(0.3);
    let star = r.random_range(0..c);
    for j in 0..n {
        let off = w_true.offset(j, star, 0, 0);
        w_true.data_mut()[off] = if j == 0 { 2.5 } else { -1.5 };
    }
    let base = conv_oracle(&images, &w_true, 1, 0);
    let mut cache = BaselineCache::default();
    cache.insert(0, base.clone());
    let labels: Vec<usize> = (0..samples)
        .map(|i| usize::from(base.at(i, 0, 0, 0) > 0.0))
        .collect();
    let net = single_conv_net(Tensor::zeros([n, c, 1, 1]), 0, [c, 1, 1], classes);
    let mut head = LossHead::build(&net, 0, classes, seed).unwrap();
    head.calibrate(&base).unwrap();
    head.bn.beta = vec![CONVEX_SHIFT; n];
    let mut theta = random_tensor([n, classes, 1, 1], &mut r).scaled(0.2);
    for j in 0..n {
        let row = &mut theta.data_mut()[j * classes..(j + 1) * classes];
        let mean = row.iter().sum::<f64>() / classes as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    head.theta = theta;
    OrthogonalInstance {
        net,
        images,
        labels,
        cache,
        head,
        lambda: 1.0,
    }
}

/// `L_M + λ·L_S` for a 1×1 convolution on 1×1 inputs with a fixed-statistics
/// head at its output, written out with plain loops.
pub fn direct_joint_loss(inst: &OrthogonalInstance, w: &Tensor) -> f64 {
    let [samples, c, _, _] = inst.images.shape();
    let n = w.shape()[0];
    let base = inst.cache.get(0).unwrap();
    let bn = &inst.head.bn;
    let m = inst.head.num_classes();
    let mut lm = 0.0;
    let mut ls = 0.0;
    for i in 0..samples {
        let mut feats = vec![0.0; n];
        for j in 0..n {
            let mut o = 0.0;
            for k in 0..c {
                o += w.at(j, k, 0, 0) * inst.images.at(i, k, 0, 0);
            }
            lm += (o - base.at(i, j, 0, 0)).powi(2);
            let z = bn.gamma[j] * (o - bn.running_mean[j]) / (bn.running_var[j] + BN_EPS).sqrt()
                + bn.beta[j];
            feats[j] = z.max(0.0);
        }
        let logits: Vec<f64> = (0..m)
            .map(|y| {
                (0..n)
                    .map(|j| inst.head.theta.at(j, y, 0, 0) * feats[j])
                    .sum()
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        ls += lse - logits[inst.labels[i]];
    }
    lm / (2.0 * (samples * n) as f64) + inst.lambda * ls / samples as f64
}

/// Minimizes [`direct_joint_loss`] over the slice of channel `k` alone by
/// gradient descent on central differences with backtracking.
pub fn best_single_channel_loss(inst: &OrthogonalInstance, k: usize) -> f64 {
    let [n, c, _, _] = inst.net.conv(0).unwrap().weight.shape();
    let mut w = Tensor::zeros([n, c, 1, 1]);
    let mut f = direct_joint_loss(inst, &w);
    let mut step = 1.0;
    for _ in 0..400 {
        let g: Vec<f64> = (0..n)
            .map(|j| {
                let off = w.offset(j, k, 0, 0);
                let v = w.data()[off];
                w.data_mut()[off] = v + 1e-6;
                let up = direct_joint_loss(inst, &w);
                w.data_mut()[off] = v - 1e-6;
                let down = direct_joint_loss(inst, &w);
                w.data_mut()[off] = v;
                (up - down) / 2e-6
            })
            .collect();
        let gn: f64 = g.iter().map(|v| v * v).sum();
        if gn < 1e-20 {
            break;
        }
        loop {
            let mut trial = w.clone();
            for j in 0..n {
                let off = trial.offset(j, k, 0, 0);
                trial.data_mut()[off] -= step * g[j];
            }
            let ft = direct_joint_loss(inst, &trial);
            if ft <= f - 0.25 * step * gn {
                w = trial;
                f = ft;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return f;
            }
        }
    }
    f
}
