//! Probing heads on frozen layer stacks: the convex gated prototype head,
//! single-layer linear probes, and a layer-wise linear sweep.

mod cgp;

pub use cgp::{cgp_tape, gate_aggregate, normalize_stack, pool_features, prototype_similarity, CgpBatch, CgpIds, CgpVars};

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{LayerStack, INIT_STD};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, f1, mean_average_precision, Averaging};
use crate::numerics::kernels::{l2_normalize, sigmoid};
use crate::numerics::{adamw_step, softmax, AdamWConfig, Bound, Dtype, OptimState, ParamStore, Tape, Tensor, Var, WarmupCosine};
use crate::rng::{substream, trunc_normal, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLoss {
    /// Independent sigmoid per class, for multi-label targets.
    Bce,
    /// Softmax over classes, for single-label targets.
    #[default]
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Prototype count.
    pub k: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub cgp_weight_decay: f64,
    pub linear_weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: ProbeLoss,
    /// Validation cadence in steps; the best validated state is kept.
    pub eval_every: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            k: 10000,
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: 0,
            cgp_weight_decay: 0.5,
            linear_weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            loss: ProbeLoss::Ce,
            eval_every: 100,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config(format!("probe lr must be > 0 with 0 <= min_lr <= lr, got {} / {}", self.lr, self.min_lr)));
        }
        if self.k == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("probe k, batch_size and eval_every must be >= 1".into()));
        }
        if self.cgp_weight_decay < 0.0 || self.linear_weight_decay < 0.0 {
            return Err(Error::Config("probe weight decay must be >= 0".into()));
        }
        Ok(())
    }

    fn schedule(&self) -> WarmupCosine {
        WarmupCosine {
            start_lr: 0.0,
            peak_lr: self.lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }
}

/// Ground truth for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    MultiClass { classes: usize, y: Vec<usize> },
    /// S×C binary matrix.
    MultiLabel(Tensor),
}

impl Labels {
    pub fn multi_class(classes: usize, y: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Param(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Labels::MultiClass { classes, y })
    }

    pub fn multi_label(m: Tensor) -> Result<Self> {
        m.dims2("multi_label")?;
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Param("multi-label targets must be 0 or 1".into()));
        }
        Ok(Labels::MultiLabel(m))
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::MultiClass { y, .. } => y.len(),
            Labels::MultiLabel(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Labels::MultiClass { classes, .. } => *classes,
            Labels::MultiLabel(m) => m.cols(),
        }
    }

    fn loss_kind(&self) -> ProbeLoss {
        match self {
            Labels::MultiClass { .. } => ProbeLoss::Ce,
            Labels::MultiLabel(_) => ProbeLoss::Bce,
        }
    }
}

/// Frozen stacks of one split with their labels.
#[derive(Clone, Debug)]
pub struct Split {
    pub stacks: Vec<LayerStack>,
    pub labels: Labels,
}

impl Split {
    pub fn new(stacks: Vec<LayerStack>, labels: Labels) -> Result<Self> {
        if stacks.len() != labels.len() {
            return Err(Error::Param(format!("{} stacks but {} labels", stacks.len(), labels.len())));
        }
        if stacks.is_empty() {
            return Err(Error::EmptyInput("probe split has no samples".into()));
        }
        let (l, n, d) = (stacks[0].layers(), stacks[0].tokens(), stacks[0].dim());
        for (i, s) in stacks.iter().enumerate() {
            if (s.layers(), s.tokens(), s.dim()) != (l, n, d) {
                return Err(Error::shape(
                    "probe_split",
                    format!("stack {i} is {}x{}x{}, expected {l}x{n}x{d}", s.layers(), s.tokens(), s.dim()),
                ));
            }
        }
        Ok(Split { stacks, labels })
    }
}

/// Probe input in the form a head consumes.
#[derive(Clone, Debug)]
pub enum Inputs {
    /// Unit-normalized (L×N×D, L×D) pairs.
    Stacks(Vec<(Tensor, Tensor)>),
    /// S×F feature rows.
    Features(Tensor),
}

#[derive(Clone, Debug)]
pub struct ProbeData {
    pub inputs: Inputs,
    pub labels: Labels,
}

impl ProbeData {
    pub fn stacks(split: &Split) -> Self {
        let dummy = Tensor::full(&[1, split.stacks[0].dim()], 1.0);
        let inputs = split
            .stacks
            .iter()
            .map(|s| {
                let (z, o, _) = normalize_stack(s, &dummy);
                (z, o)
            })
            .collect();
        ProbeData {
            inputs: Inputs::Stacks(inputs),
            labels: split.labels.clone(),
        }
    }

    /// Per-sample pooled vectors from one layer (`None` = last).
    pub fn pooled(split: &Split, layer: Option<usize>, pooling: Pooling) -> Result<Self> {
        let l = split.stacks[0].layers();
        let layer = layer.unwrap_or(l - 1);
        if layer >= l {
            return Err(Error::Param(format!("layer {layer} out of range for {l} layers")));
        }
        let rows: Vec<Vec<f64>> = split
            .stacks
            .iter()
            .map(|s| match pooling {
                Pooling::Cls => s.layer_cls(layer).into_data(),
                Pooling::MeanPatch => s.mean_patch(layer),
            })
            .collect();
        Ok(ProbeData {
            inputs: Inputs::Features(Tensor::from_rows(&rows)?),
            labels: split.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    MeanPatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Cgp { layers: usize, dim: usize, k: usize },
    Linear { features: usize },
}

/// Probe parameters, optimizer moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeState {
    pub head: HeadKind,
    pub classes: usize,
    pub config: ProbeConfig,
    pub params: ParamStore,
    pub opt: OptimState,
    pub step: u64,
}

const DTYPE: Dtype = Dtype::F64;

fn unit_rows(rng: &mut Rng, k: usize, d: usize) -> Tensor {
    let g: Vec<f64> = (0..k * d).map(|_| StandardNormal.sample(rng)).collect();
    l2_normalize(&Tensor::matrix(k, d, g).expect("k×d"))
}

impl ProbeState {
    /// Prototypes uniform on the unit sphere, gate at zero, small classifier.
    pub fn cgp(layers: usize, dim: usize, classes: usize, config: ProbeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if layers == 0 || dim == 0 || classes == 0 {
            return Err(Error::Param("cgp needs layers, dim and classes >= 1".into()));
        }
        let k = config.k;
        let mut p = ParamStore::new();
        p.add("probe.prototypes", unit_rows(rng, k, dim), true);
        p.add("probe.gate", Tensor::zeros(&[1, layers]), false);
        p.add("probe.w", trunc_normal(rng, &[3 * k, classes], INIT_STD), true);
        p.add("probe.b", Tensor::zeros(&[classes]), false);
        let opt = OptimState::new(adamw(&config, config.cgp_weight_decay), &p);
        Ok(ProbeState {
            head: HeadKind::Cgp { layers, dim, k },
            classes,
            config,
            params: p,
            opt,
            step: 0,
        })
    }

    pub fn linear(features: usize, classes: usize, config: ProbeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if features == 0 || classes == 0 {
            return Err(Error::Param("linear probe needs features and classes >= 1".into()));
        }
        let mut p = ParamStore::new();
        p.add("probe.w", trunc_normal(rng, &[features, classes], INIT_STD), true);
        p.add("probe.b", Tensor::zeros(&[classes]), false);
        let opt = OptimState::new(adamw(&config, config.linear_weight_decay), &p);
        Ok(ProbeState {
            head: HeadKind::Linear { features },
            classes,
            config,
            params: p,
            opt,
            step: 0,
        })
    }

    fn cgp_ids(&self) -> CgpIds {
        let id = |n: &str| self.params.id(n).expect("cgp parameter");
        CgpIds {
            prototypes: id("probe.prototypes"),
            gate: id("probe.gate"),
            w: id("probe.w"),
            b: id("probe.b"),
        }
    }

    /// Convex layer weights `softmax(a)`; empty for linear heads.
    pub fn alpha(&self) -> Vec<f64> {
        match self.params.by_name("probe.gate") {
            Some(a) => softmax(a, 1).expect("1×L").into_data(),
            None => Vec::new(),
        }
    }

    fn check(&self, data: &ProbeData) -> Result<()> {
        if data.labels.classes() != self.classes {
            return Err(Error::Param(format!(
                "labels have {} classes, probe has {}",
                data.labels.classes(),
                self.classes
            )));
        }
        if data.labels.loss_kind() != self.config.loss {
            return Err(Error::Config(format!(
                "loss {:?} does not fit {:?} labels",
                self.config.loss,
                data.labels.loss_kind()
            )));
        }
        match (&self.head, &data.inputs) {
            (HeadKind::Cgp { layers, dim, .. }, Inputs::Stacks(s)) => {
                let sh = s.first().map(|(z, _)| z.shape().to_vec()).unwrap_or_default();
                if sh.len() == 3 && sh[0] != *layers {
                    return Err(Error::shape("cgp_forward", format!("layer axis: stack has {}, probe expects {layers}", sh[0])));
                }
                if sh.len() == 3 && sh[2] != *dim {
                    return Err(Error::shape("cgp_forward", format!("feature axis: stack has {}, probe expects {dim}", sh[2])));
                }
                Ok(())
            }
            (HeadKind::Linear { features }, Inputs::Features(x)) if x.cols() == *features => Ok(()),
            (HeadKind::Linear { features }, Inputs::Features(x)) => Err(Error::shape(
                "linear_probe",
                format!("feature axis: input has {}, probe expects {features}", x.cols()),
            )),
            _ => Err(Error::Param("probe head and input kind differ".into())),
        }
    }

    /// B×C logits for the samples `idx`.
    pub fn logits_tape(&self, tape: &mut Tape, b: &Bound, data: &ProbeData, idx: &[usize]) -> Result<Var> {
        match &data.inputs {
            Inputs::Stacks(s) => {
                let items: Vec<(&Tensor, &Tensor)> = idx.iter().map(|&i| (&s[i].0, &s[i].1)).collect();
                let batch = CgpBatch::pack(&items)?;
                Ok(cgp_tape(tape, b, &self.cgp_ids(), &batch)?.logits)
            }
            Inputs::Features(x) => {
                let xb = tape.constant(x.gather_rows(idx)?);
                let id = |n: &str| self.params.id(n).expect("linear parameter");
                tape.linear(xb, b[id("probe.w")], Some(b[id("probe.b")]))
            }
        }
    }

    /// Class scores: softmax probabilities for CE heads, sigmoids for BCE heads.
    pub fn predict(&self, data: &ProbeData) -> Result<Tensor> {
        self.check(data)?;
        let mut rows = Vec::with_capacity(data.len() * self.classes);
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(self.config.batch_size.max(64)) {
            let mut tape = Tape::new(DTYPE);
            let b = self.params.bind(&mut tape, false);
            let logits = self.logits_tape(&mut tape, &b, data, chunk)?;
            let l = tape.value(logits);
            let p = match self.config.loss {
                ProbeLoss::Ce => softmax(l, 1)?,
                ProbeLoss::Bce => sigmoid(l),
            };
            rows.extend_from_slice(p.data());
        }
        Tensor::matrix(data.len(), self.classes, rows)
    }
}

fn adamw(cfg: &ProbeConfig, weight_decay: f64) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay,
    }
}

/// Logits of one frozen stack under a CGP state.
pub fn cgp_forward(stack: &LayerStack, state: &ProbeState) -> Result<Vec<f64>> {
    let data = ProbeData::stacks(&Split {
        stacks: vec![stack.clone()],
        labels: Labels::MultiClass { classes: state.classes, y: vec![0] },
    });
    if let HeadKind::Cgp { layers, dim, .. } = state.head {
        if stack.layers() != layers {
            return Err(Error::shape("cgp_forward", format!("layer axis: stack has {}, probe expects {layers}", stack.layers())));
        }
        if stack.dim() != dim {
            return Err(Error::shape("cgp_forward", format!("feature axis: stack has {}, probe expects {dim}", stack.dim())));
        }
    } else {
        return Err(Error::Param("cgp_forward needs a CGP state".into()));
    }
    let mut tape = Tape::new(DTYPE);
    let b = state.params.bind(&mut tape, false);
    let logits = state.logits_tape(&mut tape, &b, &data, &[0])?;
    Ok(tape.value(logits).data().to_vec())
}

/// Scores of a probe on one split. `primary` is accuracy for multi-class
/// labels and mAP for multi-label ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub primary: f64,
    pub accuracy: Option<f64>,
    pub map: Option<f64>,
    pub f1_macro: Option<f64>,
    pub f1_micro: Option<f64>,
}

pub fn evaluate(state: &ProbeState, data: &ProbeData) -> Result<ProbeMetrics> {
    let scores = state.predict(data)?;
    match &data.labels {
        Labels::MultiClass { y, .. } => {
            let acc = accuracy(&scores, y)?;
            Ok(ProbeMetrics {
                primary: acc,
                accuracy: Some(acc),
                map: None,
                f1_macro: None,
                f1_micro: None,
            })
        }
        Labels::MultiLabel(m) => {
            let map = mean_average_precision(&scores, m)?.map;
            Ok(ProbeMetrics {
                primary: map,
                accuracy: None,
                map: Some(map),
                f1_macro: Some(f1(&scores, m, 0.5, Averaging::Macro)?),
                f1_micro: Some(f1(&scores, m, 0.5, Averaging::Micro)?),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    /// Mean training loss since the previous point; absent before training.
    pub loss: Option<f64>,
    pub lr: f64,
    pub valid: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub state: ProbeState,
    pub history: Vec<EvalPoint>,
    /// Step of the returned state; the final step when there is no validation split.
    pub best_step: u64,
}

fn minibatch(seed: u64, step: u64, n: usize, b: usize) -> Vec<usize> {
    let mut rng = substream(seed, &format!("probe/data/{step}"));
    let mut idx = sample(&mut rng, n, b.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// One optimizer step on a minibatch; returns the loss.
pub fn probe_step(state: &mut ProbeState, data: &ProbeData, idx: &[usize]) -> Result<f64> {
    let mut tape = Tape::new(DTYPE);
    let b = state.params.bind(&mut tape, true);
    let logits = state.logits_tape(&mut tape, &b, data, idx)?;
    let loss = match &data.labels {
        Labels::MultiClass { y, .. } => {
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            tape.cross_entropy(logits, &yb)?
        }
        Labels::MultiLabel(m) => tape.bce_with_logits(logits, &m.gather_rows(idx)?)?,
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("probe loss at step {}", state.step)));
    }
    let grads = tape.backward(loss)?.into_tensors();
    let lr = state.config.schedule().lr_at(state.step);
    adamw_step(&mut state.opt, &mut state.params, &grads, lr, DTYPE)?;
    state.step += 1;
    Ok(value)
}

/// Trains `state` for `config.steps` minibatch steps. With a validation
/// split, the state with the best validation score (earliest on ties) is
/// returned; step 0 is evaluated too.
pub fn train_probe(mut state: ProbeState, train: &ProbeData, valid: Option<&ProbeData>, seed: u64) -> Result<ProbeRun> {
    state.check(train)?;
    if let Some(v) = valid {
        state.check(v)?;
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("probe training split is empty".into()));
    }
    let cfg = state.config.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, u64, ProbeState)> = None;
    let mut consider = |state: &ProbeState, loss: Option<f64>, history: &mut Vec<EvalPoint>| -> Result<()> {
        let score = valid.map(|v| evaluate(state, v)).transpose()?.map(|m| m.primary);
        history.push(EvalPoint {
            step: state.step,
            loss,
            lr: cfg.schedule().lr_at(state.step),
            valid: score,
        });
        if let Some(s) = score {
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, state.step, state.clone()));
            }
        }
        Ok(())
    };
    consider(&state, None, &mut history)?;
    let mut running = 0.0;
    let mut count = 0;
    for step in state.step..cfg.steps {
        let idx = minibatch(seed, step, train.len(), cfg.batch_size);
        running += probe_step(&mut state, train, &idx)?;
        count += 1;
        if state.step % cfg.eval_every == 0 || state.step == cfg.steps {
            consider(&state, Some(running / count as f64), &mut history)?;
            running = 0.0;
            count = 0;
        }
    }
    Ok(match best {
        Some((_, step, s)) => ProbeRun {
            state: s,
            history,
            best_step: step,
        },
        None => ProbeRun {
            best_step: state.step,
            state,
            history,
        },
    })
}

/// Trained head plus its held-out scores.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub run: ProbeRun,
    pub test: ProbeMetrics,
}

pub fn cgp_probe(train: &Split, valid: Option<&Split>, test: &Split, cfg: &ProbeConfig, seed: u64) -> Result<ProbeOutcome> {
    let s0 = &train.stacks[0];
    let state = ProbeState::cgp(
        s0.layers(),
        s0.dim(),
        train.labels.classes(),
        cfg.clone(),
        &mut substream(seed, "probe/init"),
    )?;
    let valid = valid.map(ProbeData::stacks);
    let run = train_probe(state, &ProbeData::stacks(train), valid.as_ref(), seed)?;
    let test = evaluate(&run.state, &ProbeData::stacks(test))?;
    Ok(ProbeOutcome { run, test })
}

/// Linear head on one pooled layer (`None` = final layer).
pub fn linear_probe(
    train: &Split,
    valid: Option<&Split>,
    test: &Split,
    layer: Option<usize>,
    pooling: Pooling,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    let tr = ProbeData::pooled(train, layer, pooling)?;
    let va = valid.map(|v| ProbeData::pooled(v, layer, pooling)).transpose()?;
    let te = ProbeData::pooled(test, layer, pooling)?;
    let state = ProbeState::linear(
        train.stacks[0].dim(),
        train.labels.classes(),
        cfg.clone(),
        &mut substream(seed, "probe/init"),
    )?;
    let run = train_probe(state, &tr, va.as_ref(), seed)?;
    let test = evaluate(&run.state, &te)?;
    Ok(ProbeOutcome { run, test })
}

/// Test score of an independent mean-patch linear probe on every layer.
pub fn layerwise_linear_probe(train: &Split, valid: Option<&Split>, test: &Split, cfg: &ProbeConfig, seed: u64) -> Result<Vec<f64>> {
    (0..train.stacks[0].layers())
        .map(|l| linear_probe(train, valid, test, Some(l), Pooling::MeanPatch, cfg, seed).map(|o| o.test.primary))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub alpha: Vec<f64>,
    pub argmax: usize,
}

pub fn gate_report(state: &ProbeState) -> Result<GateReport> {
    let alpha = state.alpha();
    if alpha.is_empty() {
        return Err(Error::Param("gate report needs a CGP state".into()));
    }
    let argmax = crate::metrics::argmax(&alpha);
    Ok(GateReport { alpha, argmax })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Rank correlation with average ranks for ties; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}
