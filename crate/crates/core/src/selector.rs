//! Greedy channel selection for one convolution.
//!
//! Starting from an all-zero weight, each iteration ranks the unselected
//! input channels by the Frobenius norm of their slice of `∂L/∂W`, adds the
//! best one, and re-fits the selected slices by SGD while the others stay
//! exactly zero.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{BaselineCache, HeadNorm, LossHead};
use crate::network::{l20_norm, LayerKind, Mode, NetworkDef, Source, TraceSpec};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Channels kept for a layer with `c` inputs: `⌈η·c⌉`.
pub fn channel_budget(c: usize, keep_ratio: f64) -> Result<usize> {
    if c == 0 {
        return Err(Error::invalid("layer has no input channels"));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "keep ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    // guard against 0.7 * 10 = 7.000000000000001
    let raw = keep_ratio * c as f64;
    let k = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    Ok((k as usize).clamp(1, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMode {
    Budget,
    Tolerance,
    WhicheverFirst,
}

impl std::str::FromStr for StopMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" => Ok(StopMode::Budget),
            "tolerance" => Ok(StopMode::Tolerance),
            "whichever-first" => Ok(StopMode::WhicheverFirst),
            other => Err(Error::Config(format!(
                "unknown stop mode `{other}` (budget | tolerance | whichever-first)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub mode: StopMode,
    pub kappa: usize,
    pub epsilon: f64,
}

impl StopRule {
    pub fn budget(kappa: usize) -> Self {
        StopRule {
            mode: StopMode::Budget,
            kappa,
            epsilon: 0.0,
        }
    }

    pub fn tolerance(epsilon: f64) -> Self {
        StopRule {
            mode: StopMode::Tolerance,
            kappa: usize::MAX,
            epsilon,
        }
    }

    fn uses_budget(&self) -> bool {
        self.mode != StopMode::Tolerance
    }

    fn uses_tolerance(&self) -> bool {
        self.mode != StopMode::Budget
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if self.uses_budget() && !(1..=c).contains(&self.kappa) {
            return Err(Error::Config(format!(
                "channel budget {} outside 1..={c}",
                self.kappa
            )));
        }
        if self.uses_tolerance() && !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "stopping tolerance must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    /// Selected channels in the order they were added.
    pub selected: Vec<usize>,
    pub t: usize,
    /// `L(W^0), …, L(W^t)` on the full selection subset; `W^0 = 0`.
    pub loss_history: Vec<f64>,
    /// `‖G_j‖_F` from the most recent ranking pass.
    pub grad_norms: Vec<f64>,
}

/// Whether selection should end after the current iteration.
pub fn should_stop(state: &SelectionState, rule: &StopRule) -> Result<bool> {
    let budget_hit = rule.uses_budget() && state.selected.len() >= rule.kappa;
    if !rule.uses_tolerance() {
        return Ok(budget_hit);
    }
    if state.t == 0 || state.loss_history.len() < 2 {
        if rule.mode == StopMode::Tolerance {
            return Err(Error::invalid(
                "tolerance stopping needs at least one completed iteration",
            ));
        }
        return Ok(budget_hit);
    }
    let h = &state.loss_history;
    let l0 = h[0];
    if l0 == 0.0 {
        return Err(Error::Numerical(
            "initial selection loss is zero, so the relative tolerance is undefined".into(),
        ));
    }
    let (prev, cur) = (h[h.len() - 2], h[h.len() - 1]);
    Ok(budget_hit || (prev - cur).abs() / l0 <= rule.epsilon)
}

/// Hyper-parameters of the greedy loop and its inner SGD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub lambda: f64,
    /// Include `L_M`; off for the discrimination-only ablation.
    pub use_reconstruction: bool,
    pub gamma: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            lambda: 1.0,
            use_reconstruction: true,
            gamma: 0.01,
            inner_steps: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Where the discrimination term is read.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// An auxiliary head attached at or after the layer.
    Head(&'a LossHead, HeadNorm),
    /// The network's own classifier output.
    Final,
}

/// Value (and optionally weight gradient) of the joint loss for one weight.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub reconstruction: Option<f64>,
    pub discrimination: Option<f64>,
    pub grad: Option<Tensor>,
}

/// The joint loss of one convolution as a function of its weight alone.
///
/// Everything upstream is evaluated once; downstream layers run in eval mode
/// with their stored weights and running statistics.
pub struct SelectionProblem<'a> {
    net: &'a NetworkDef,
    layer: usize,
    stride: usize,
    padding: usize,
    weight_shape: [usize; 4],
    input: Tensor,
    baseline: Option<Tensor>,
    presets: Vec<(usize, Tensor)>,
    labels: Vec<usize>,
    objective: Objective<'a>,
    target: usize,
    lambda: f64,
}

fn pick<'t>(t: &'t Tensor, samples: Option<&[usize]>) -> Result<Cow<'t, Tensor>> {
    Ok(match samples {
        Some(s) => Cow::Owned(t.select_samples(s)?),
        None => Cow::Borrowed(t),
    })
}

impl<'a> SelectionProblem<'a> {
    /// `images` are raw samples of the selection subset; `cache` must hold the
    /// baseline output of `layer` for the same samples in the same order.
    pub fn new(
        net: &'a NetworkDef,
        layer: usize,
        images: &Tensor,
        labels: &[usize],
        cache: &BaselineCache,
        objective: Objective<'a>,
        config: &SelectionConfig,
    ) -> Result<Self> {
        let conv = net.conv(layer)?;
        if !(config.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                config.lambda
            )));
        }
        if config.lambda == 0.0 && !config.use_reconstruction {
            return Err(Error::Config(
                "selection objective is empty: lambda is 0 and reconstruction is off".into(),
            ));
        }
        if labels.len() != images.shape()[0] {
            return Err(Error::invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                images.shape()[0]
            )));
        }
        let target = match objective {
            Objective::Head(head, _) => head.attach,
            Objective::Final => net.final_node(),
        };
        if target < layer {
            return Err(Error::invalid(format!(
                "loss at layer {target} precedes the layer {layer} being pruned"
            )));
        }
        let baseline = if config.use_reconstruction {
            let b = cache.get(layer)?.clone();
            if b.shape()[0] != images.shape()[0] {
                return Err(Error::invalid(
                    "baseline cache was captured on a different sample count",
                ));
            }
            Some(b)
        } else {
            None
        };

        // Nodes before `layer` read by the downstream part, plus the conv input.
        let mut needed: Vec<usize> = Vec::new();
        for idx in layer + 1..=target {
            for s in &net.node(idx).inputs {
                if let Source::Node(i) = *s {
                    if i < layer && !needed.contains(&i) {
                        needed.push(i);
                    }
                }
                if *s == Source::Input {
                    return Err(Error::invalid(
                        "layers after the pruned one may not read the raw input",
                    ));
                }
            }
        }
        let src = net.node(layer).inputs[0];
        let mut tape = Tape::new();
        let trace = if layer > 0 {
            Some(net.trace(
                &mut tape,
                Some(images),
                &TraceSpec::new(Mode::Eval).upto(layer - 1),
            )?)
        } else {
            None
        };
        let value = |i: usize| -> Tensor {
            let t = trace.as_ref().expect("layer > 0");
            tape.value(t.output(i).expect("traced")).clone()
        };
        let input = match src {
            Source::Input => net.prepare_input(images)?,
            Source::Node(i) => value(i),
        };
        let presets = needed.into_iter().map(|i| (i, value(i))).collect();
        Ok(SelectionProblem {
            net,
            layer,
            stride: conv.stride,
            padding: conv.padding,
            weight_shape: conv.weight.shape(),
            input,
            baseline,
            presets,
            labels: labels.to_vec(),
            objective,
            target,
            lambda: config.lambda,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn channels(&self) -> usize {
        self.weight_shape[1]
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        self.weight_shape
    }

    /// Joint loss at `weight` over `samples` (default: the whole subset).
    pub fn evaluate(
        &self,
        weight: &Tensor,
        samples: Option<&[usize]>,
        want_grad: bool,
    ) -> Result<Evaluation> {
        if weight.shape() != self.weight_shape {
            return Err(Error::ShapeMismatch {
                op: "selection weight",
                lhs: weight.shape(),
                rhs: self.weight_shape,
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(pick(&self.input, samples)?.into_owned());
        let w = tape.leaf(weight.clone(), want_grad);
        let o = tape.conv2d(x, w, self.stride, self.padding)?;
        let mut total: Option<Var> = None;
        let mut reconstruction = None;
        if let Some(base) = &self.baseline {
            let b = tape.constant(pick(base, samples)?.into_owned());
            let q = tape.value(b).len();
            let lm = tape.mean_squared_half(o, b, q)?;
            reconstruction = Some(tape.value(lm).item());
            total = Some(lm);
        }
        let mut discrimination = None;
        if self.lambda > 0.0 {
            let act = if self.target == self.layer {
                o
            } else {
                let mut preset = vec![(self.layer, o)];
                for (i, t) in &self.presets {
                    preset.push((*i, tape.constant(pick(t, samples)?.into_owned())));
                }
                let spec = TraceSpec {
                    start: self.layer + 1,
                    upto: Some(self.target),
                    preset,
                    ..TraceSpec::new(Mode::Eval)
                };
                let trace = self.net.trace(&mut tape, None, &spec)?;
                trace.output(self.target).expect("traced")
            };
            let logits = match self.objective {
                Objective::Head(head, norm) => head.trace(&mut tape, act, norm, false)?.logits,
                Objective::Final => act,
            };
            let labels: Cow<[usize]> = match samples {
                Some(s) => Cow::Owned(s.iter().map(|&i| self.labels[i]).collect()),
                None => Cow::Borrowed(&self.labels),
            };
            let ls = tape.softmax_cross_entropy(logits, &labels)?;
            discrimination = Some(tape.value(ls).item());
            let scaled = tape.scale(ls, self.lambda)?;
            total = Some(match total {
                Some(lm) => tape.add(lm, scaled)?,
                None => scaled,
            });
        }
        let total = total.expect("non-empty objective checked at construction");
        let loss = tape.value(total).item();
        let grad = if want_grad {
            tape.backward(total)?;
            tape.take_grad(w)
        } else {
            None
        };
        Ok(Evaluation {
            loss,
            reconstruction,
            discrimination,
            grad,
        })
    }

    /// `‖G_j‖_F` for every input channel at `weight`, over the whole subset.
    pub fn channel_grad_norms(&self, weight: &Tensor) -> Result<Vec<f64>> {
        let g = self
            .evaluate(weight, None, true)?
            .grad
            .ok_or_else(|| Error::invalid("gradient missing after backward"))?;
        Ok(slice_norms(&g))
    }

    /// Best unselected channel by gradient norm; ties go to the smaller index.
    pub fn rank_channels(&self, weight: &Tensor, exclude: &[usize]) -> Result<(usize, Vec<f64>)> {
        let norms = self.channel_grad_norms(weight)?;
        let best = argmax_excluding(&norms, exclude).ok_or_else(|| {
            Error::invalid(format!(
                "every channel of layer {} is already selected",
                self.layer
            ))
        })?;
        Ok((best, norms))
    }

    /// Plain SGD on the slices in `active`; the rest of `weight` is never
    /// touched. Returns the loss over the whole subset afterwards.
    pub fn optimize_active(
        &self,
        weight: &mut Tensor,
        active: &[usize],
        config: &SelectionConfig,
        rng: &mut Rng,
    ) -> Result<f64> {
        if active.is_empty() {
            return Err(Error::invalid("cannot optimize an empty channel set"));
        }
        let [n, c, kh, kw] = self.weight_shape;
        if let Some(&bad) = active.iter().find(|&&k| k >= c) {
            return Err(Error::invalid(format!(
                "channel {bad} out of range for {c} inputs"
            )));
        }
        if !(config.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "selection learning rate must be non-negative, got {}",
                config.gamma
            )));
        }
        let initial = self.evaluate(weight, None, false)?.loss;
        if config.gamma == 0.0 || config.inner_steps == 0 {
            return Ok(initial);
        }
        let total = self.samples();
        let full_batch = config.batch_size == 0 || config.batch_size >= total;
        let mut order: Vec<usize> = (0..total).collect();
        let mut cursor = total;
        let mut strikes = 0;
        let plane = kh * kw;
        for step in 0..config.inner_steps {
            let batch: Option<Vec<usize>> = if full_batch {
                None
            } else {
                if cursor + config.batch_size > total {
                    order.shuffle(rng);
                    cursor = 0;
                }
                let b = order[cursor..cursor + config.batch_size].to_vec();
                cursor += config.batch_size;
                Some(b)
            };
            let eval = self.evaluate(weight, batch.as_deref(), true)?;
            if !eval.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "selection loss at layer {} became non-finite at step {step}; \
                     try a smaller selection learning rate",
                    self.layer
                )));
            }
            strikes = if eval.loss > 10.0 * initial {
                strikes + 1
            } else {
                0
            };
            if strikes >= 3 {
                return Err(Error::Numerical(format!(
                    "selection at layer {} diverged (loss {:.4e} vs initial {:.4e}); \
                     try a smaller selection learning rate than {}",
                    self.layer, eval.loss, initial, config.gamma
                )));
            }
            let g = eval.grad.expect("requested");
            let w = weight.data_mut();
            let gd = g.data();
            for j in 0..n {
                for &k in active {
                    let s = (j * c + k) * plane;
                    for e in s..s + plane {
                        w[e] -= config.gamma * gd[e];
                    }
                }
            }
        }
        let fin = self.evaluate(weight, None, false)?.loss;
        if !fin.is_finite() {
            return Err(Error::Numerical(format!(
                "selection loss at layer {} is non-finite after optimization",
                self.layer
            )));
        }
        Ok(fin)
    }
}

fn slice_norms(g: &Tensor) -> Vec<f64> {
    let [n, c, kh, kw] = g.shape();
    let plane = kh * kw;
    let d = g.data();
    (0..c)
        .map(|k| {
            (0..n)
                .flat_map(|j| &d[(j * c + k) * plane..(j * c + k + 1) * plane])
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn argmax_excluding(values: &[f64], exclude: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        if exclude.contains(&j) {
            continue;
        }
        match best {
            Some(b) if v <= values[b] => {}
            _ => best = Some(j),
        }
    }
    best
}

fn copy_slice(dst: &mut Tensor, src: &Tensor, k: usize) {
    let [n, c, kh, kw] = dst.shape();
    let plane = kh * kw;
    for j in 0..n {
        let s = (j * c + k) * plane;
        dst.data_mut()[s..s + plane].copy_from_slice(&src.data()[s..s + plane]);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub state: SelectionState,
    /// Optimized weight; slices outside the selected set are exactly zero.
    pub weight: Tensor,
    /// Non-zero input-channel slices of `weight`.
    pub l20: usize,
}

/// Greedy selection until `rule` fires or every channel is selected.
///
/// A newly added slice starts from whichever of zero and the matching slice
/// of `reference` gives the lower loss, and the SGD result is only kept when
/// it does not raise the loss above that starting point.
pub fn select_channels(
    problem: &SelectionProblem,
    reference: Option<&Tensor>,
    rule: &StopRule,
    config: &SelectionConfig,
) -> Result<SelectionOutcome> {
    let c = problem.channels();
    rule.validate(c)?;
    if let Some(r) = reference {
        if r.shape() != problem.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "reference weight",
                lhs: r.shape(),
                rhs: problem.weight_shape(),
            });
        }
    }
    let mut rng = rng::substream(config.seed, rng::SELECTION, problem.layer() as u64);
    let mut weight = Tensor::zeros(problem.weight_shape());
    let mut state = SelectionState {
        loss_history: vec![problem.evaluate(&weight, None, false)?.loss],
        ..SelectionState::default()
    };
    loop {
        let (k, norms) = problem.rank_channels(&weight, &state.selected)?;
        state.grad_norms = norms;
        state.selected.push(k);
        let mut start = weight.clone();
        let mut start_loss = *state.loss_history.last().expect("seeded");
        if let Some(r) = reference {
            let mut warm = weight.clone();
            copy_slice(&mut warm, r, k);
            let l = problem.evaluate(&warm, None, false)?.loss;
            if l < start_loss {
                start = warm;
                start_loss = l;
            }
        }
        let mut fitted = start.clone();
        let loss = problem.optimize_active(&mut fitted, &state.selected, config, &mut rng)?;
        if loss <= start_loss {
            weight = fitted;
            state.loss_history.push(loss);
        } else {
            weight = start;
            state.loss_history.push(start_loss);
        }
        state.t += 1;
        if state.selected.len() == c || should_stop(&state, rule)? {
            break;
        }
    }
    let l20 = l20_norm(&weight);
    Ok(SelectionOutcome { state, weight, l20 })
}

/// Writes a selection result into `net`: mask plus optimized weight.
pub fn install_selection(
    net: &mut NetworkDef,
    layer: usize,
    outcome: &SelectionOutcome,
) -> Result<()> {
    let mut keep = outcome.state.selected.clone();
    keep.sort_unstable();
    net.apply_mask(layer, &keep)?;
    match &mut net.node_mut(layer).kind {
        LayerKind::Conv(conv) => {
            if conv.weight.shape() != outcome.weight.shape() {
                return Err(Error::ShapeMismatch {
                    op: "install selection",
                    lhs: conv.weight.shape(),
                    rhs: outcome.weight.shape(),
                });
            }
            conv.weight = outcome.weight.clone();
            conv.enforce_mask();
            Ok(())
        }
        _ => Err(Error::invalid(format!(
            "layer {layer} is not a convolution"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(channel_budget(64, 0.875).unwrap(), 56);
        assert_eq!(channel_budget(17, 1.0).unwrap(), 17);
        assert_eq!(channel_budget(10, 0.31).unwrap(), 4);
        assert_eq!(channel_budget(10, 0.7).unwrap(), 7);
        assert!(channel_budget(10, 0.0).is_err());
        assert!(channel_budget(10, 1.01).is_err());
        assert!(channel_budget(10, f64::NAN).is_err());
    }

    fn state(history: &[f64], selected: usize) -> SelectionState {
        SelectionState {
            selected: (0..selected).collect(),
            t: history.len() - 1,
            loss_history: history.to_vec(),
            grad_norms: Vec::new(),
        }
    }

    #[test]
    fn tolerance_arithmetic() {
        let s = state(&[10.0, 6.0, 5.95], 2);
        assert!(should_stop(&s, &StopRule::tolerance(0.01)).unwrap());
        assert!(!should_stop(&s, &StopRule::tolerance(0.004)).unwrap());
        let flat = state(&[3.0, 3.0], 1);
        assert!(should_stop(&flat, &StopRule::tolerance(1e-12)).unwrap());
        assert!(should_stop(&state(&[0.0, 0.0], 1), &StopRule::tolerance(0.1)).is_err());
        assert!(should_stop(&state(&[1.0], 0), &StopRule::tolerance(0.1)).is_err());
    }

    #[test]
    fn budget_and_combined_rules() {
        let s = state(&[10.0, 6.0, 2.0], 2);
        assert!(should_stop(&s, &StopRule::budget(2)).unwrap());
        assert!(!should_stop(&s, &StopRule::budget(3)).unwrap());
        let both = StopRule {
            mode: StopMode::WhicheverFirst,
            kappa: 3,
            epsilon: 0.5,
        };
        assert!(should_stop(&s, &both).unwrap());
        assert!(!should_stop(
            &s,
            &StopRule {
                epsilon: 0.1,
                ..both
            }
        )
        .unwrap());
        assert!(StopRule::budget(0).validate(4).is_err());
        assert!(StopRule::budget(5).validate(4).is_err());
        assert!(StopRule::tolerance(0.0).validate(4).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_excluding(&[1.0, 3.0, 3.0], &[]), Some(1));
        assert_eq!(argmax_excluding(&[1.0, 3.0, 3.0], &[1]), Some(2));
        assert_eq!(argmax_excluding(&[1.0], &[0]), None);
        assert_eq!(argmax_excluding(&[0.0, 0.0], &[]), Some(0));
    }

    #[test]
    fn stop_mode_parses() {
        assert_eq!(
            "whichever-first".parse::<StopMode>().unwrap(),
            StopMode::WhicheverFirst
        );
        assert!("sometimes".parse::<StopMode>().is_err());
    }
}
