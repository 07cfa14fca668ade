//! Stage-wise pruning: fine-tune with an auxiliary loss, select channels for
//! every layer of the stage, move on; finish with a whole-network fine-tune.

mod stages;
mod train;

pub use stages::{default_heads, plan_stages, StagePlan};
pub use train::{
    evaluate, finetune_stage, mean_loss, ErrorRates, FinetuneConfig, FinetuneStats, Sgd,
};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{sample_subset, Dataset};
use crate::error::{Error, Result};
use crate::loss::{BaselineCache, HeadNorm, LossHead};
use crate::network::{l20_norm, Complexity, NetworkDef};
use crate::rng::{self, Rng};
use crate::selector::{
    channel_budget, install_selection, select_channels, Objective, SelectionConfig,
    SelectionOutcome, SelectionProblem, SelectionState, StopMode, StopRule,
};
use crate::tensor::Tensor;

/// How channels are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Greedy selection on `L_M + λ·L_S`.
    Dcp,
    /// Uniformly random subset, then re-fit on the joint loss.
    Random,
    /// Largest `Σ_j ‖W_{j,k}‖₁`, then re-fit on the joint loss.
    WeightSum,
    /// Greedy selection on `L_M` alone.
    DcpLambda0,
    /// Greedy selection on `λ·L_S` alone.
    DcpLsOnly,
}

impl Strategy {
    pub const ALL: [&'static str; 5] =
        ["dcp", "random", "weight-sum", "dcp-lambda0", "dcp-ls-only"];
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcp" => Ok(Strategy::Dcp),
            "random" => Ok(Strategy::Random),
            "weight-sum" => Ok(Strategy::WeightSum),
            "dcp-lambda0" => Ok(Strategy::DcpLambda0),
            "dcp-ls-only" => Ok(Strategy::DcpLsOnly),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` ({})",
                Strategy::ALL.join(" | ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    pub stop_mode: StopMode,
    pub keep_ratio: f64,
    pub epsilon: f64,
    /// Auxiliary heads `P`; `None` picks [`default_heads`].
    pub heads: Option<usize>,
    pub subset_size: usize,
    pub head_norm: HeadNorm,
    pub selection_lr: f64,
    pub inner_steps: usize,
    pub selection_batch: usize,
    pub stage_finetune: FinetuneConfig,
    pub final_finetune: FinetuneConfig,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            strategy: Strategy::Dcp,
            lambda: 1.0,
            stop_mode: StopMode::Budget,
            keep_ratio: 0.7,
            epsilon: 0.01,
            heads: None,
            subset_size: 1000,
            head_norm: HeadNorm::Batch,
            selection_lr: 0.01,
            inner_steps: 20,
            selection_batch: 64,
            stage_finetune: FinetuneConfig {
                epochs: 2,
                ..FinetuneConfig::default()
            },
            final_finetune: FinetuneConfig::default(),
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep ratio must lie in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        if self.stop_mode != StopMode::Budget && !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.heads == Some(0) {
            return Err(Error::Config(
                "at least one auxiliary head is required".into(),
            ));
        }
        if self.subset_size == 0 {
            return Err(Error::Config("selection subset must be non-empty".into()));
        }
        if !(self.selection_lr >= 0.0) {
            return Err(Error::Config(format!(
                "selection learning rate must be non-negative, got {}",
                self.selection_lr
            )));
        }
        if self.strategy == Strategy::DcpLsOnly && self.lambda == 0.0 {
            return Err(Error::Config("dcp-ls-only needs a positive lambda".into()));
        }
        if matches!(self.strategy, Strategy::Random | Strategy::WeightSum)
            && self.stop_mode == StopMode::Tolerance
        {
            return Err(Error::Config(
                "random and weight-sum selection need a channel budget (stop mode budget)".into(),
            ));
        }
        self.stage_finetune.validate()?;
        self.final_finetune.validate()
    }

    fn selection_config(&self) -> SelectionConfig {
        let (lambda, use_reconstruction) = match self.strategy {
            Strategy::DcpLambda0 => (0.0, true),
            Strategy::DcpLsOnly => (self.lambda, false),
            _ => (self.lambda, true),
        };
        SelectionConfig {
            lambda,
            use_reconstruction,
            gamma: self.selection_lr,
            inner_steps: self.inner_steps,
            batch_size: self.selection_batch,
            seed: self.seed,
        }
    }
}

/// A uniformly random `kappa`-subset of `0..c`, sorted.
pub fn select_random(c: usize, kappa: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if kappa == 0 || kappa > c {
        return Err(Error::invalid(format!(
            "cannot draw {kappa} of {c} channels"
        )));
    }
    let mut keep = index::sample(rng, c, kappa).into_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// The `kappa` input channels with the largest `Σ_j ‖W_{j,k,:,:}‖₁`, sorted;
/// ties go to the smaller index.
pub fn select_weight_sum(weight: &Tensor, kappa: usize) -> Result<Vec<usize>> {
    let [n, c, kh, kw] = weight.shape();
    if kappa == 0 || kappa > c {
        return Err(Error::invalid(format!(
            "cannot keep {kappa} of {c} channels"
        )));
    }
    let plane = kh * kw;
    let w = weight.data();
    let scores: Vec<f64> = (0..c)
        .map(|k| {
            (0..n)
                .flat_map(|j| &w[(j * c + k) * plane..(j * c + k + 1) * plane])
                .map(|v| v.abs())
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..kappa].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub name: String,
    pub stage: usize,
    pub channels: usize,
    pub kept: usize,
    pub l20: usize,
    pub selected: Vec<usize>,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcpReport {
    pub strategy: Strategy,
    pub head_names: Vec<String>,
    pub layers: Vec<LayerRecord>,
    pub before: Complexity,
    pub after: Complexity,
    pub error_before: Option<ErrorRates>,
    /// After all selections, before the final fine-tune.
    pub error_after_selection: Option<ErrorRates>,
    pub error_after: Option<ErrorRates>,
}

impl DcpReport {
    /// Pruned minus baseline top-1 error; positive means the pruned model is worse.
    pub fn error_gap(&self) -> Option<f64> {
        Some(self.error_after?.top1 - self.error_before?.top1)
    }

    pub fn param_reduction(&self) -> f64 {
        self.before.params as f64 / self.after.params.max(1) as f64
    }

    pub fn flop_reduction(&self) -> f64 {
        self.before.flops as f64 / self.after.flops.max(1) as f64
    }
}

/// Warm start from `reference` on the kept channels, then one round of the
/// selection SGD, kept only if it lowers the loss.
fn refit_fixed(
    problem: &SelectionProblem,
    reference: &Tensor,
    keep: &[usize],
    config: &SelectionConfig,
) -> Result<SelectionOutcome> {
    let [n, c, kh, kw] = reference.shape();
    let plane = kh * kw;
    let mut start = Tensor::zeros(reference.shape());
    for j in 0..n {
        for &k in keep {
            let s = (j * c + k) * plane;
            start.data_mut()[s..s + plane].copy_from_slice(&reference.data()[s..s + plane]);
        }
    }
    let start_loss = problem.evaluate(&start, None, false)?.loss;
    let mut fitted = start.clone();
    let mut r = rng::substream(config.seed, rng::SELECTION, problem.layer() as u64);
    let loss = problem.optimize_active(&mut fitted, keep, config, &mut r)?;
    let (weight, end) = if loss <= start_loss {
        (fitted, loss)
    } else {
        (start, start_loss)
    };
    let l20 = l20_norm(&weight);
    Ok(SelectionOutcome {
        state: SelectionState {
            selected: keep.to_vec(),
            t: keep.len(),
            loss_history: vec![start_loss, end],
            grad_norms: Vec::new(),
        },
        weight,
        l20,
    })
}

/// Runs the full procedure on a copy of `pretrained` and returns the pruned
/// (masked, not compacted) network. `test`, when given, is used only for the
/// error figures of the report.
pub fn run_dcp(
    pretrained: &NetworkDef,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &PruneConfig,
) -> Result<(NetworkDef, DcpReport)> {
    config.validate()?;
    if train.num_classes != pretrained.num_classes {
        return Err(Error::Data(format!(
            "training data has {} classes, network {}",
            train.num_classes, pretrained.num_classes
        )));
    }
    let mut net = pretrained.clone();
    let heads = config.heads.unwrap_or_else(|| default_heads(&net));
    let plan = plan_stages(&net, heads)?;
    let subset = sample_subset(train, config.subset_size.min(train.len()), config.seed)?;
    let prunable = net.prunable_layers();
    let cache = BaselineCache::capture(pretrained, &subset.images, &prunable)?;
    let sel = config.selection_config();
    let error_before = test.map(|t| evaluate(pretrained, t)).transpose()?;
    let before = Complexity::of(pretrained);

    let mut records = Vec::new();
    for (p, layers) in plan.stages.iter().enumerate() {
        if layers.is_empty() {
            // the final stage's fine-tune coincides with the final fine-tune
            continue;
        }
        let mut head = LossHead::build(
            &net,
            plan.heads[p],
            net.num_classes,
            config.seed.wrapping_add(p as u64),
        )?;
        finetune_stage(
            &mut net,
            Some(&mut head),
            train,
            &config.stage_finetune,
            p as u64,
        )?;
        for &layer in layers {
            let conv = net.conv(layer)?;
            let c = conv.in_channels();
            let reference = conv.weight.clone();
            let rule = StopRule {
                mode: config.stop_mode,
                kappa: match config.stop_mode {
                    StopMode::Tolerance => usize::MAX,
                    _ => channel_budget(c, config.keep_ratio)?,
                },
                epsilon: config.epsilon,
            };
            let outcome = if config.stop_mode == StopMode::Budget && rule.kappa == c {
                // nothing to prune
                SelectionOutcome {
                    state: SelectionState {
                        selected: (0..c).collect(),
                        t: 0,
                        loss_history: Vec::new(),
                        grad_norms: Vec::new(),
                    },
                    l20: l20_norm(&reference),
                    weight: reference.clone(),
                }
            } else {
                let problem = SelectionProblem::new(
                    &net,
                    layer,
                    &subset.images,
                    &subset.labels,
                    &cache,
                    Objective::Head(&head, config.head_norm),
                    &sel,
                )?;
                match config.strategy {
                    Strategy::Random => {
                        let mut r = rng::substream(config.seed, "random-selection", layer as u64);
                        let keep = select_random(c, rule.kappa, &mut r)?;
                        refit_fixed(&problem, &reference, &keep, &sel)?
                    }
                    Strategy::WeightSum => {
                        let keep = select_weight_sum(&reference, rule.kappa)?;
                        refit_fixed(&problem, &reference, &keep, &sel)?
                    }
                    _ => select_channels(&problem, Some(&reference), &rule, &sel)?,
                }
            };
            if outcome.state.selected.is_empty() {
                return Err(Error::Numerical(format!(
                    "layer {layer} was left without channels"
                )));
            }
            install_selection(&mut net, layer, &outcome)?;
            let mut selected = outcome.state.selected.clone();
            selected.sort_unstable();
            records.push(LayerRecord {
                layer,
                name: net.node(layer).name.clone(),
                stage: p,
                channels: c,
                kept: selected.len(),
                l20: outcome.l20,
                selected,
                loss_history: outcome.state.loss_history,
            });
        }
    }
    let error_after_selection = test.map(|t| evaluate(&net, t)).transpose()?;
    finetune_stage(
        &mut net,
        None,
        train,
        &config.final_finetune,
        plan.stages.len() as u64,
    )?;
    let error_after = test.map(|t| evaluate(&net, t)).transpose()?;
    let report = DcpReport {
        strategy: config.strategy,
        head_names: plan
            .heads
            .iter()
            .map(|&h| net.node(h).name.clone())
            .collect(),
        layers: records,
        before,
        after: Complexity::of(&net),
        error_before,
        error_after_selection,
        error_after,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_sum_drops_zero_channel() {
        let mut w = Tensor::full([2, 3, 1, 1], 1.0);
        w.data_mut()[1] = 0.0;
        w.data_mut()[4] = 0.0;
        assert_eq!(select_weight_sum(&w, 2).unwrap(), vec![0, 2]);
        assert_eq!(select_weight_sum(&w.scaled(2.0), 2).unwrap(), vec![0, 2]);
        assert!(select_weight_sum(&w, 4).is_err());
    }

    #[test]
    fn random_full_set_and_seeded() {
        let mut r = rng::stream(1, "t");
        assert_eq!(select_random(5, 5, &mut r).unwrap(), vec![0, 1, 2, 3, 4]);
        let a = select_random(10, 3, &mut rng::stream(2, "t")).unwrap();
        let b = select_random(10, 3, &mut rng::stream(2, "t")).unwrap();
        assert_eq!(a, b);
        assert!(select_random(3, 4, &mut r).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in Strategy::ALL {
            let s: Strategy = name.parse().unwrap();
            assert_eq!(serde_json::to_value(s).unwrap(), name);
        }
    }
}
