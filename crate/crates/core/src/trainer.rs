//! Toy two-group classifier and the two-phase consistency/detection schedule.
//!
//! The model is `cls = softmax(W_d tanh(W_b x + b_b) + b_d)`. The `backbone`
//! group is `(W_b, b_b)` and the `detection` group is `(W_d, b_d)`.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;

/// Floor applied inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch kind does not match the active phase")]
    PhaseBatchMismatch,
    #[error("loss became non-finite in phase {phase}, epoch {epoch}")]
    Diverged { phase: u8, epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite parameter in group {0}")]
    NonFinite(&'static str),
}

/// A dense affine layer stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.weight[r * self.cols..(r + 1) * self.cols];
                self.bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// `W^T v`.
    fn apply_transposed(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, vr) in v.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weight[r * self.cols..(r + 1) * self.cols]) {
                *o += w * vr;
            }
        }
        out
    }

    /// Adds the outer product `d x^T` to the weight and `d` to the bias.
    fn accumulate(&mut self, d: &[f64], x: &[f64]) {
        for (r, dr) in d.iter().enumerate() {
            for (w, xv) in self.weight[r * self.cols..(r + 1) * self.cols].iter_mut().zip(x) {
                *w += dr * xv;
            }
            self.bias[r] += dr;
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        if i < self.weight.len() {
            self.weight[i]
        } else {
            self.bias[i - self.weight.len()]
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        if i < self.weight.len() {
            self.weight[i] = v;
        } else {
            let n = self.weight.len();
            self.bias[i - n] = v;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub backbone: Affine,
    pub detection: Affine,
}

struct Activations {
    h: Vec<f64>,
    cls: Vec<f64>,
}

impl ToyModelParams {
    pub fn zeros(d_in: usize, d_h: usize, classes: usize) -> Self {
        Self {
            backbone: Affine::zeros(d_h, d_in),
            detection: Affine::zeros(classes, d_h),
        }
    }

    /// Gaussian weights with standard deviation `scale / sqrt(fan_in)`, zero biases.
    pub fn random(d_in: usize, d_h: usize, classes: usize, scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(d_in, d_h, classes);
        let mut rng = substream(seed, "trainer/init");
        for (layer, fan_in) in [(&mut p.backbone, d_in), (&mut p.detection, d_h)] {
            let s = scale / (fan_in.max(1) as f64).sqrt();
            for w in layer.weight.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = s * z;
            }
        }
        p
    }

    pub fn d_in(&self) -> usize {
        self.backbone.cols
    }

    pub fn classes(&self) -> usize {
        self.detection.rows
    }

    pub fn group(&self, g: Group) -> &Affine {
        match g {
            Group::Backbone => &self.backbone,
            Group::Detection => &self.detection,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut Affine {
        match g {
            Group::Backbone => &mut self.backbone,
            Group::Detection => &mut self.detection,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.detection.cols != self.backbone.rows {
            return Err(TrainError::DimMismatch {
                expected: self.backbone.rows,
                got: self.detection.cols,
            });
        }
        for (name, g) in [("backbone", &self.backbone), ("detection", &self.detection)] {
            if g.weight.len() != g.rows * g.cols || g.bias.len() != g.rows {
                return Err(TrainError::Config(format!("{name} has inconsistent shape")));
            }
            if g.values().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite(if name == "backbone" { "backbone" } else { "detection" }));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), TrainError> {
        if x.len() != self.d_in() {
            return Err(TrainError::DimMismatch {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let h: Vec<f64> = self.backbone.apply(x).into_iter().map(f64::tanh).collect();
        let cls = softmax(&self.detection.apply(&h));
        Activations { h, cls }
    }

    /// Accumulates the gradient of a loss with `dL/dcls = g` for input `x`
    /// into the listed groups.
    fn backprop(&self, x: &[f64], act: &Activations, g: &[f64], grads: &mut ToyModelParams, groups: &[Group]) {
        let gy: f64 = g.iter().zip(&act.cls).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = act.cls.iter().zip(g).map(|(y, gi)| y * (gi - gy)).collect();
        if groups.contains(&Group::Detection) {
            grads.detection.accumulate(&dz, &act.h);
        }
        if groups.contains(&Group::Backbone) {
            let dh = self.detection.apply_transposed(&dz);
            let da: Vec<f64> = dh.iter().zip(&act.h).map(|(d, h)| d * (1.0 - h * h)).collect();
            grads.backbone.accumulate(&da, x);
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn forward(params: &ToyModelParams, x: &[f64]) -> Result<Vec<f64>, TrainError> {
    params.check_input(x)?;
    Ok(params.activations(x).cls)
}

/// Index of the largest probability, lowest index on ties.
pub fn predict(params: &ToyModelParams, x: &[f64]) -> Result<usize, TrainError> {
    let cls = forward(params, x)?;
    let mut best = 0;
    for (i, v) in cls.iter().enumerate() {
        if *v > cls[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `-sum_c p_c ln(max(q_c, 1e-12))`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(pc, qc)| pc * qc.max(LOG_CLAMP).ln()).sum::<f64>()
}

/// Partial derivatives of [`cross_entropy`] with respect to `p` and `q`.
fn cross_entropy_grads(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dp = q.iter().map(|qc| -qc.max(LOG_CLAMP).ln()).collect();
    let dq = p
        .iter()
        .zip(q)
        .map(|(pc, qc)| if *qc > LOG_CLAMP { -pc / qc } else { 0.0 })
        .collect();
    (dp, dq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyForm {
    /// `CE(cls1, cls2)` as written.
    #[default]
    Literal,
    /// `(CE(cls1, cls2) + CE(cls2, cls1)) / 2`.
    Symmetric,
}

fn pair_loss(p: &[f64], q: &[f64], form: ConsistencyForm) -> f64 {
    match form {
        ConsistencyForm::Literal => cross_entropy(p, q),
        ConsistencyForm::Symmetric => 0.5 * (cross_entropy(p, q) + cross_entropy(q, p)),
    }
}

fn pair_loss_grads(p: &[f64], q: &[f64], form: ConsistencyForm) -> (Vec<f64>, Vec<f64>) {
    match form {
        ConsistencyForm::Literal => cross_entropy_grads(p, q),
        ConsistencyForm::Symmetric => {
            let (dp1, dq1) = cross_entropy_grads(p, q);
            let (dq2, dp2) = cross_entropy_grads(q, p);
            (
                dp1.iter().zip(&dp2).map(|(a, b)| 0.5 * (a + b)).collect(),
                dq1.iter().zip(&dq2).map(|(a, b)| 0.5 * (a + b)).collect(),
            )
        }
    }
}

/// Sum over pairs of `CE(cls1_k, cls2_k)`.
pub fn consistency_loss(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    consistency_loss_with(pairs, ConsistencyForm::Literal)
}

pub fn consistency_loss_with(pairs: &[(Vec<f64>, Vec<f64>)], form: ConsistencyForm) -> f64 {
    pairs.iter().map(|(p, q)| pair_loss(p, q, form)).sum()
}

pub fn detection_loss(cls: &[f64], label: usize) -> Result<f64, TrainError> {
    if label >= cls.len() {
        return Err(TrainError::LabelOutOfRange {
            label,
            classes: cls.len(),
        });
    }
    Ok(-cls[label].max(LOG_CLAMP).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub const PHASE1: Self = Self { alpha: 1.0, beta: 0.0 };
    pub const PHASE2: Self = Self { alpha: 0.0, beta: 1.0 };

    /// The group that receives gradient under these weights.
    pub fn active_group(&self) -> Option<Group> {
        match (self.alpha > 0.0, self.beta > 0.0) {
            (true, false) => Some(Group::Backbone),
            (false, true) => Some(Group::Detection),
            _ => None,
        }
    }
}

pub fn overall_loss(weights: LossWeights, consistency: f64, det: f64) -> f64 {
    weights.alpha * consistency + weights.beta * det
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSchedule {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            epochs_phase1: 30,
            epochs_phase2: 30,
        }
    }
}

impl LossSchedule {
    pub fn weights(phase: u8) -> LossWeights {
        if phase == 1 {
            LossWeights::PHASE1
        } else {
            LossWeights::PHASE2
        }
    }
}

/// Student and teacher descriptors of one aligned frame of an accepted pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPair {
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Consistency(&'a [ConsistencyPair]),
    Detection(&'a [LabeledSample]),
}

/// Value of `alpha * L_consistency + beta * L_det` on a batch.
pub fn batch_loss(
    params: &ToyModelParams,
    batch: Batch<'_>,
    weights: LossWeights,
    form: ConsistencyForm,
) -> Result<f64, TrainError> {
    match batch {
        Batch::Consistency(items) => {
            let mut total = 0.0;
            for it in items {
                total += pair_loss(&forward(params, &it.student)?, &forward(params, &it.teacher)?, form);
            }
            Ok(overall_loss(weights, total, 0.0))
        }
        Batch::Detection(items) => {
            let mut total = 0.0;
            for it in items {
                total += detection_loss(&forward(params, &it.x)?, it.label)?;
            }
            Ok(overall_loss(weights, 0.0, total))
        }
    }
}

/// Analytic gradient of [`batch_loss`] with respect to the active group.
/// The other group's gradient is all zeros.
pub fn backward(
    params: &ToyModelParams,
    batch: Batch<'_>,
    weights: LossWeights,
    form: ConsistencyForm,
) -> Result<ToyModelParams, TrainError> {
    let mut grads = ToyModelParams {
        backbone: Affine::zeros(params.backbone.rows, params.backbone.cols),
        detection: Affine::zeros(params.detection.rows, params.detection.cols),
    };
    let active = weights.active_group();
    match (batch, active) {
        (_, None) => Ok(grads),
        (Batch::Consistency(items), Some(Group::Backbone)) => {
            for it in items {
                params.check_input(&it.student)?;
                params.check_input(&it.teacher)?;
                let a1 = params.activations(&it.student);
                let a2 = params.activations(&it.teacher);
                let (dp, dq) = pair_loss_grads(&a1.cls, &a2.cls, form);
                let scale = |v: Vec<f64>| v.into_iter().map(|x| weights.alpha * x).collect::<Vec<_>>();
                params.backprop(&it.student, &a1, &scale(dp), &mut grads, &[Group::Backbone]);
                params.backprop(&it.teacher, &a2, &scale(dq), &mut grads, &[Group::Backbone]);
            }
            Ok(grads)
        }
        (Batch::Detection(items), Some(Group::Detection)) => {
            for it in items {
                params.check_input(&it.x)?;
                if it.label >= params.classes() {
                    return Err(TrainError::LabelOutOfRange {
                        label: it.label,
                        classes: params.classes(),
                    });
                }
                let act = params.activations(&it.x);
                let mut g = vec![0.0; params.classes()];
                let y = act.cls[it.label];
                if y > LOG_CLAMP {
                    g[it.label] = -weights.beta / y;
                }
                params.backprop(&it.x, &act, &g, &mut grads, &[Group::Detection]);
            }
            Ok(grads)
        }
        _ => Err(TrainError::PhaseBatchMismatch),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: LossSchedule,
    pub consistency: ConsistencyForm,
    pub skip_phase1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 8,
            schedule: LossSchedule::default(),
            consistency: ConsistencyForm::Literal,
            skip_phase1: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub phase: u8,
    /// Mean per-item loss over the whole phase dataset after the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: ToyModelParams,
    pub curve: Vec<EpochLoss>,
    /// Mean consistency loss before any update; `None` without pairs.
    pub initial_consistency: Option<f64>,
    pub phase1_ran: bool,
    pub warnings: Vec<String>,
}

impl TrainOutcome {
    pub fn final_consistency(&self) -> Option<f64> {
        self.curve.iter().rev().find(|e| e.phase == 1).map(|e| e.loss)
    }
}

pub const NO_PAIRS_WARNING: &str = "no cross-camera pairs: phase 1 skipped";
pub const NO_LABELS_WARNING: &str = "no confident labels: phase 2 skipped";

fn mean_loss(
    params: &ToyModelParams,
    batch: Batch<'_>,
    weights: LossWeights,
    form: ConsistencyForm,
    n: usize,
) -> Result<f64, TrainError> {
    Ok(batch_loss(params, batch, weights, form)? / n.max(1) as f64)
}

#[allow(clippy::too_many_arguments)]
fn sgd_loop<G, E>(
    params: &mut ToyModelParams,
    phase: u8,
    n: usize,
    config: &TrainConfig,
    seed: u64,
    curve: &mut Vec<EpochLoss>,
    grad: G,
    eval: E,
) -> Result<(), TrainError>
where
    G: Fn(&ToyModelParams, &[usize]) -> Result<ToyModelParams, TrainError>,
    E: Fn(&ToyModelParams) -> Result<f64, TrainError>,
{
    let group = LossSchedule::weights(phase).active_group().expect("phase weights select one group");
    let epochs = if phase == 1 {
        config.schedule.epochs_phase1
    } else {
        config.schedule.epochs_phase2
    };
    let mut rng = substream(seed, &format!("trainer/shuffle/phase{phase}"));
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let grads = grad(params, chunk)?;
            for (p, g) in params.group_mut(group).values_mut().zip(grads.group(group).values()) {
                *p -= config.lr * g;
            }
        }
        let loss = eval(params)?;
        if !loss.is_finite() || params.group(group).values().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged { phase, epoch });
        }
        curve.push(EpochLoss { epoch, phase, loss });
    }
    Ok(())
}

/// Phase 1 fits the backbone to the consistency loss on `pairs`; phase 2
/// fits the detection head to `labels`. Only the active group is updated.
pub fn train_two_phase(
    init: ToyModelParams,
    pairs: &[ConsistencyPair],
    labels: &[LabeledSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    init.validate()?;
    let form = config.consistency;
    let mut params = init;
    let mut curve = Vec::new();
    let mut warnings = Vec::new();

    let initial_consistency = if pairs.is_empty() {
        None
    } else {
        Some(mean_loss(&params, Batch::Consistency(pairs), LossWeights::PHASE1, form, pairs.len())?)
    };

    let run_phase1 = !config.skip_phase1 && !pairs.is_empty();
    if pairs.is_empty() && !config.skip_phase1 {
        warn!("{NO_PAIRS_WARNING}");
        warnings.push(NO_PAIRS_WARNING.to_string());
    }
    if run_phase1 {
        sgd_loop(&mut params, 1, pairs.len(), config, seed, &mut curve, |p, idx| {
            let batch: Vec<ConsistencyPair> = idx.iter().map(|i| pairs[*i].clone()).collect();
            backward(p, Batch::Consistency(&batch), LossWeights::PHASE1, form)
        }, |p| mean_loss(p, Batch::Consistency(pairs), LossWeights::PHASE1, form, pairs.len()))?;
        info!("phase 1 done: {} epochs on {} pairs", config.schedule.epochs_phase1, pairs.len());
    }

    if labels.is_empty() {
        warn!("{NO_LABELS_WARNING}");
        warnings.push(NO_LABELS_WARNING.to_string());
        return Ok(TrainOutcome {
            params,
            curve,
            initial_consistency,
            phase1_ran: run_phase1,
            warnings,
        });
    }
    sgd_loop(&mut params, 2, labels.len(), config, seed, &mut curve, |p, idx| {
        let batch: Vec<LabeledSample> = idx.iter().map(|i| labels[*i].clone()).collect();
        backward(p, Batch::Detection(&batch), LossWeights::PHASE2, form)
    }, |p| mean_loss(p, Batch::Detection(labels), LossWeights::PHASE2, form, labels.len()))?;

    Ok(TrainOutcome {
        params,
        curve,
        initial_consistency,
        phase1_ran: run_phase1,
        warnings,
    })
}

/// Gradient of the summed detection loss with respect to both groups.
pub fn supervised_gradients(params: &ToyModelParams, samples: &[LabeledSample]) -> Result<ToyModelParams, TrainError> {
    let mut grads = ToyModelParams {
        backbone: Affine::zeros(params.backbone.rows, params.backbone.cols),
        detection: Affine::zeros(params.detection.rows, params.detection.cols),
    };
    for it in samples {
        params.check_input(&it.x)?;
        if it.label >= params.classes() {
            return Err(TrainError::LabelOutOfRange {
                label: it.label,
                classes: params.classes(),
            });
        }
        let act = params.activations(&it.x);
        let mut g = vec![0.0; params.classes()];
        let y = act.cls[it.label];
        if y > LOG_CLAMP {
            g[it.label] = -1.0 / y;
        }
        params.backprop(&it.x, &act, &g, &mut grads, &[Group::Backbone, Group::Detection]);
    }
    Ok(grads)
}

/// Plain supervised SGD on both groups, used to build a base model before
/// the two-phase adaptation.
pub fn pretrain(
    init: ToyModelParams,
    samples: &[LabeledSample],
    epochs: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<ToyModelParams, TrainError> {
    config.validate()?;
    init.validate()?;
    let mut params = init;
    let mut rng = substream(seed, "trainer/shuffle/pretrain");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<LabeledSample> = chunk.iter().map(|i| samples[*i].clone()).collect();
            let grads = supervised_gradients(&params, &batch)?;
            for (p, g) in params.backbone.values_mut().zip(grads.backbone.values()) {
                *p -= config.lr * g;
            }
            for (p, g) in params.detection.values_mut().zip(grads.detection.values()) {
                *p -= config.lr * g;
            }
        }
        if params.backbone.values().chain(params.detection.values()).any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged { phase: 0, epoch });
        }
    }
    Ok(params)
}

/// Fraction of samples whose arg-max class equals the label.
pub fn accuracy(params: &ToyModelParams, samples: &[LabeledSample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        if predict(params, &s.x)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_prob(rng: &mut impl Rng, c: usize) -> Vec<f64> {
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
        softmax(&z)
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = ToyModelParams::zeros(4, 3, 5);
        let cls = forward(&p, &[0.3, -1.0, 2.0, 0.0]).unwrap();
        assert!(cls.iter().all(|v| (*v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forward_sums_to_one_and_checks_dims() {
        let p = ToyModelParams::random(6, 4, 3, 2.0, 1);
        let mut rng = substream(9, "t");
        for _ in 0..20 {
            let x = random_unit(&mut rng, 6);
            let cls = forward(&p, &x).unwrap();
            assert!((cls.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(cls, forward(&p, &x).unwrap());
        }
        assert_eq!(
            forward(&p, &[1.0]),
            Err(TrainError::DimMismatch { expected: 6, got: 1 })
        );
    }

    #[test]
    fn consistency_examples() {
        let one_hot = vec![0.0, 1.0, 0.0];
        assert_eq!(consistency_loss(&[(one_hot.clone(), one_hot)]), 0.0);
        let u = vec![0.5, 0.5];
        assert!((consistency_loss(&[(u.clone(), u)]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(consistency_loss(&[]), 0.0);
    }

    #[test]
    fn batch_is_sum_of_pairs() {
        let mut rng = substream(2, "t");
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..50).map(|_| (random_prob(&mut rng, 4), random_prob(&mut rng, 4))).collect();
        let mut oracle = 0.0;
        for (p, q) in &pairs {
            let mut ce = 0.0;
            for c in 0..4 {
                ce -= p[c] * q[c].ln();
            }
            oracle += ce;
        }
        assert!((consistency_loss(&pairs) - oracle).abs() < 1e-12);
    }

    #[test]
    fn detection_examples() {
        assert_eq!(detection_loss(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let u = vec![0.25; 4];
        assert!((detection_loss(&u, 3).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(
            detection_loss(&u, 4),
            Err(TrainError::LabelOutOfRange { label: 4, classes: 4 })
        );
        let mut rng = substream(3, "t");
        for _ in 0..20 {
            let q = random_prob(&mut rng, 3);
            let l = rng.random_range(0..3);
            let mut p = vec![0.0; 3];
            p[l] = 1.0;
            assert!((detection_loss(&q, l).unwrap() - cross_entropy(&p, &q)).abs() < 1e-15);
        }
    }

    #[test]
    fn overall_examples() {
        assert_eq!(overall_loss(LossWeights::PHASE1, 2.0, 7.0), 2.0);
        assert_eq!(overall_loss(LossWeights::PHASE2, 2.0, 7.0), 7.0);
        assert_eq!(overall_loss(LossWeights { alpha: 0.0, beta: 0.0 }, 2.0, 7.0), 0.0);
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    fn fd_check(params: &ToyModelParams, batch: Batch<'_>, weights: LossWeights, form: ConsistencyForm) -> f64 {
        let group = weights.active_group().unwrap();
        let grads = backward(params, batch, weights, form).unwrap();
        let other = if group == Group::Backbone { Group::Detection } else { Group::Backbone };
        assert!(grads.group(other).is_zero());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..params.group(group).len() {
            let mut plus = params.clone();
            let v = plus.group(group).get(i);
            plus.group_mut(group).set(i, v + h);
            let mut minus = params.clone();
            minus.group_mut(group).set(i, v - h);
            let num = (batch_loss(&plus, batch, weights, form).unwrap() - batch_loss(&minus, batch, weights, form).unwrap()) / (2.0 * h);
            worst = worst.max(rel_err(grads.group(group).get(i), num));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = substream(11, "gradcheck");
        let mut worst: f64 = 0.0;
        for draw in 0..100u64 {
            let params = ToyModelParams::random(5, 4, 3, 1.5, draw);
            let pairs: Vec<ConsistencyPair> = (0..3)
                .map(|_| ConsistencyPair {
                    student: random_unit(&mut rng, 5),
                    teacher: random_unit(&mut rng, 5),
                })
                .collect();
            let labels: Vec<LabeledSample> = (0..3)
                .map(|_| LabeledSample {
                    x: random_unit(&mut rng, 5),
                    label: rng.random_range(0..3),
                })
                .collect();
            for form in [ConsistencyForm::Literal, ConsistencyForm::Symmetric] {
                worst = worst.max(fd_check(&params, Batch::Consistency(&pairs), LossWeights::PHASE1, form));
            }
            worst = worst.max(fd_check(&params, Batch::Detection(&labels), LossWeights::PHASE2, ConsistencyForm::Literal));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn routing_errors_and_empty_batches() {
        let p = ToyModelParams::random(2, 2, 2, 1.0, 0);
        let labels = vec![LabeledSample { x: vec![1.0, 0.0], label: 1 }];
        assert_eq!(
            backward(&p, Batch::Detection(&labels), LossWeights::PHASE1, ConsistencyForm::Literal),
            Err(TrainError::PhaseBatchMismatch)
        );
        let g = backward(&p, Batch::Consistency(&[]), LossWeights::PHASE1, ConsistencyForm::Literal).unwrap();
        assert!(g.backbone.is_zero() && g.detection.is_zero());
        let bad = vec![LabeledSample { x: vec![1.0, 0.0], label: 2 }];
        assert!(matches!(
            backward(&p, Batch::Detection(&bad), LossWeights::PHASE2, ConsistencyForm::Literal),
            Err(TrainError::LabelOutOfRange { .. })
        ));
    }

    fn toy_data(seed: u64) -> (Vec<ConsistencyPair>, Vec<LabeledSample>) {
        let mut rng = substream(seed, "toy");
        let protos = [random_unit(&mut rng, 4), random_unit(&mut rng, 4)];
        let noisy = |rng: &mut rand_chacha::ChaCha8Rng, c: usize| -> Vec<f64> {
            protos[c].iter().map(|v| v + 0.2 * rng.random_range(-1.0..1.0)).collect()
        };
        let pairs = (0..40)
            .map(|i| ConsistencyPair {
                student: noisy(&mut rng, i % 2),
                teacher: noisy(&mut rng, i % 2),
            })
            .collect();
        let labels = (0..40)
            .map(|i| LabeledSample {
                x: noisy(&mut rng, i % 2),
                label: 1 + i % 2,
            })
            .collect();
        (pairs, labels)
    }

    #[test]
    fn phases_touch_only_their_group() {
        let (pairs, labels) = toy_data(1);
        let init = ToyModelParams::random(4, 3, 3, 1.0, 5);
        let mut cfg = TrainConfig::default();
        cfg.schedule.epochs_phase2 = 0;
        let p1 = train_two_phase(init.clone(), &pairs, &labels, &cfg, 1).unwrap();
        assert_eq!(p1.params.detection, init.detection);
        assert_ne!(p1.params.backbone, init.backbone);
        let cfg = TrainConfig::default();
        let full = train_two_phase(init, &pairs, &labels, &cfg, 1).unwrap();
        assert_eq!(full.params.backbone, p1.params.backbone);
        assert_eq!(full.curve.len(), 60);
        assert!(full.final_consistency().unwrap() < full.initial_consistency.unwrap());
    }

    #[test]
    fn skipping_phase1_and_missing_pairs() {
        let (pairs, labels) = toy_data(2);
        let init = ToyModelParams::random(4, 3, 3, 1.0, 5);
        let cfg = TrainConfig {
            skip_phase1: true,
            ..TrainConfig::default()
        };
        let out = train_two_phase(init.clone(), &pairs, &labels, &cfg, 1).unwrap();
        assert!(!out.phase1_ran);
        assert_eq!(out.params.backbone, init.backbone);
        assert!(out.warnings.is_empty());
        let out = train_two_phase(init.clone(), &[], &labels, &TrainConfig::default(), 1).unwrap();
        assert_eq!(out.warnings, vec![NO_PAIRS_WARNING.to_string()]);
        let out = train_two_phase(init.clone(), &pairs, &[], &TrainConfig::default(), 1).unwrap();
        assert_eq!(out.warnings, vec![NO_LABELS_WARNING.to_string()]);
        assert_eq!(out.params.detection, init.detection);
        assert_eq!(out.curve.len(), 30);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (pairs, labels) = toy_data(3);
        let init = ToyModelParams::random(4, 3, 3, 1.0, 5);
        let a = train_two_phase(init.clone(), &pairs, &labels, &TrainConfig::default(), 7).unwrap();
        let b = train_two_phase(init, &pairs, &labels, &TrainConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        assert!(accuracy(&a.params, &labels).unwrap() > 0.9);
    }

    #[test]
    fn divergence_is_reported() {
        let (pairs, labels) = toy_data(4);
        let init = ToyModelParams::random(4, 3, 3, 1.0, 5);
        let cfg = TrainConfig {
            lr: 1e308,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_two_phase(init, &pairs, &labels, &cfg, 1),
            Err(TrainError::Diverged { .. })
        ));
    }

    proptest! {
        #[test]
        fn consistency_is_non_negative(seed in 0u64..1000) {
            let mut rng = substream(seed, "nn");
            let pairs: Vec<_> = (0..5).map(|_| (random_prob(&mut rng, 3), random_prob(&mut rng, 3))).collect();
            prop_assert!(consistency_loss(&pairs) >= 0.0);
            prop_assert!(consistency_loss_with(&pairs, ConsistencyForm::Symmetric) >= 0.0);
        }
    }

    #[test]
    fn pretraining_fits_labelled_samples() {
        let (_, labels) = toy_data(4);
        let init = ToyModelParams::random(4, 3, 3, 1.0, 2);
        let cfg = TrainConfig::default();
        let before = accuracy(&init, &labels).unwrap();
        let trained = pretrain(init.clone(), &labels, 40, &cfg, 3).unwrap();
        assert!(accuracy(&trained, &labels).unwrap() > before.max(0.9));
        assert_eq!(trained, pretrain(init.clone(), &labels, 40, &cfg, 3).unwrap());
        assert_eq!(pretrain(init.clone(), &labels, 0, &cfg, 3).unwrap(), init);
    }
}
