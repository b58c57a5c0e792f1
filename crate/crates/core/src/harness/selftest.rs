//! Built-in verification suites: finite-difference gradient checks,
//! structural contracts of the probe and targets, and metric oracles.

use serde::Serialize;

use crate::encoder::{add_block_params, block_tape, LayerStack, Tap};
use crate::error::Result;
use crate::metrics::{accuracy, average_precision, f1, Averaging};
use crate::numerics::{grad_check, Dtype, ParamStore, Tensor};
use crate::pretrain::{make_targets, random_mask, Decoder, DecoderConfig, DecoderKind, MaskConfig, PretrainConfig, Trainer};
use crate::probe::{cgp_forward, Labels, ProbeConfig, ProbeData, ProbeState, Split};
use crate::rng::{randomize, substream, trunc_normal};

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// Largest error-like quantity seen (relative gradient error, oracle gap, ...).
    pub worst: f64,
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        SuiteResult {
            name: name.into(),
            passed: 0,
            total: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, value: f64, what: impl FnOnce() -> String) {
        self.total += 1;
        self.worst = self.worst.max(value);
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(what());
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total && self.total > 0
    }
}

fn project(seed: u64, shape: &[usize]) -> Tensor {
    trunc_normal(&mut substream(seed, "selftest/project"), shape, 1.0)
}

/// One gated block (dim 8, 2 heads, 4 tokens) per seed.
pub fn grad_encoder_block(seeds: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("grad_encoder_block");
    for seed in 0..seeds {
        let mut store = ParamStore::new();
        let ids = add_block_params(&mut store, "blk", 8, 16, true, &mut substream(seed, "selftest/init"));
        randomize(&mut store, &mut substream(seed, "selftest/scale"), 0.5);
        let x = trunc_normal(&mut substream(seed, "selftest/x"), &[4, 8], 1.0);
        let r = project(seed, &[4, 8]);
        let report = grad_check(
            &store,
            |t, b| {
                let xv = t.constant(x.clone());
                let out = block_tape(t, b, &ids, xv, 2, 1e-6)?.z_d;
                let rv = t.constant(r.clone());
                let m = t.mul(out, rv)?;
                t.sum(m)
            },
            1e-3,
        )?;
        let e = report.max_rel_err();
        suite.record(e <= GRAD_TOL, e, || format!("seed {seed}: {:?}", report.worst()));
    }
    Ok(suite)
}

/// Depth-2 decoder of either kind over a 2×3 grid, half the tokens masked.
pub fn grad_decoder(kind: DecoderKind, seeds: u64) -> Result<SuiteResult> {
    let name = match kind {
        DecoderKind::Cnn => "grad_decoder_cnn",
        DecoderKind::Vit => "grad_decoder_vit",
    };
    let mut suite = SuiteResult::new(name);
    let cfg = DecoderConfig {
        kind,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        ..DecoderConfig::default()
    };
    for seed in 0..seeds {
        let mut dec = Decoder::init(cfg.clone(), 8, (2, 3), &mut substream(seed, "selftest/init"))?;
        randomize(&mut dec.params, &mut substream(seed, "selftest/scale"), 0.5);
        fan_in_scale(&mut dec.params, 8);
        let plan = random_mask(6, 0.5, &mut substream(seed, "selftest/mask"))?;
        let vis = trunc_normal(&mut substream(seed, "selftest/x"), &[plan.visible.len(), 8], 1.0);
        let r = project(seed, &[6, 8]);
        let report = grad_check(
            &dec.params,
            |t, b| {
                let v = t.constant(vis.clone());
                let out = dec.forward_tape(t, b, v, &plan)?;
                let rv = t.constant(r.clone());
                let m = t.mul(out, rv)?;
                t.sum(m)
            },
            2e-3,
        )?;
        let e = report.max_rel_err();
        suite.record(e <= GRAD_TOL, e, || format!("seed {seed}: {:?}", report.worst()));
    }
    Ok(suite)
}

/// Shrinks weight matrices wider than `dim` on the input side by
/// sqrt(dim / fan_in). At a flat std 0.5 the 72-input conv and the attention
/// logits saturate, leaving gradients near 1e-10 that finite differences
/// cannot resolve against a loss of order 10.
fn fan_in_scale(params: &mut ParamStore, dim: usize) {
    for i in 0..params.len() {
        let name = params.entries()[i].name.clone();
        let id = params.id(&name).expect("own name");
        let w = params.get_mut(id);
        if w.shape().len() == 2 && w.shape()[0] > dim {
            let s = (dim as f64 / w.shape()[0] as f64).sqrt();
            *w = w.map(|v| v * s);
        }
    }
}

fn toy_stack(seed: u64, l: usize, n: usize, d: usize) -> LayerStack {
    let mut r = substream(seed, "selftest/stack");
    LayerStack::new(trunc_normal(&mut r, &[l, n, d], 1.0), trunc_normal(&mut r, &[l, d], 1.0), Tap::Eob).expect("shapes")
}

fn toy_probe(seed: u64, l: usize, d: usize, k: usize, c: usize) -> Result<ProbeState> {
    let cfg = ProbeConfig {
        k,
        ..ProbeConfig::default()
    };
    let mut s = ProbeState::cgp(l, d, c, cfg, &mut substream(seed, "selftest/probe"))?;
    randomize(&mut s.params, &mut substream(seed, "selftest/scale"), 0.5);
    Ok(s)
}

/// Full CGP head at L=3, N=4, K=5, D=8, C=2 under cross-entropy.
pub fn grad_cgp(seeds: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("grad_cgp");
    for seed in 0..seeds {
        let state = toy_probe(seed, 3, 8, 5, 2)?;
        let split = Split::new(
            vec![toy_stack(seed, 3, 4, 8), toy_stack(seed + 1000, 3, 4, 8)],
            Labels::multi_class(2, vec![0, 1])?,
        )?;
        let data = ProbeData::stacks(&split);
        // min/max pooling has kinks, so the step stays small
        let report = grad_check(
            &state.params,
            |t, b| {
                let logits = state.logits_tape(t, b, &data, &[0, 1])?;
                t.cross_entropy(logits, &[0, 1])
            },
            1e-5,
        )?;
        let e = report.max_rel_err();
        suite.record(e <= GRAD_TOL, e, || format!("seed {seed}: {:?}", report.worst()));
    }
    Ok(suite)
}

/// Feature width, gate convexity, scale and gate-shift invariance.
pub fn cgp_contracts(seeds: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("cgp_contracts");
    for seed in 0..seeds {
        let k = [1, 7, 64][seed as usize % 3];
        let state = toy_probe(seed, 3, 8, k, 2)?;
        let stack = toy_stack(seed, 3, 4, 8);
        let width = state.params.by_name("probe.w").map(|w| w.rows()).unwrap_or(0);
        suite.record(width == 3 * k, 0.0, || format!("seed {seed}: classifier input {width} for K={k}"));

        let alpha = state.alpha();
        let sum: f64 = alpha.iter().sum();
        suite.record((sum - 1.0).abs() <= 1e-10 && alpha.iter().all(|&a| a > 0.0), 0.0, || {
            format!("seed {seed}: alpha {alpha:?}")
        });

        let base = cgp_forward(&stack, &state)?;
        let mut scaled = stack.clone();
        let (n, d) = (stack.tokens(), stack.dim());
        for l in 0..3 {
            let c = [0.001, 3.0, 250.0][(l + seed as usize) % 3];
            scaled.patch.data_mut()[l * n * d..(l + 1) * n * d].iter_mut().for_each(|v| *v *= c);
            scaled.cls.row_mut(l).iter_mut().for_each(|v| *v *= c);
        }
        let drift = max_gap(&base, &cgp_forward(&scaled, &state)?);
        suite.record(drift <= 1e-6, drift, || format!("seed {seed}: scale drift {drift:e}"));

        let mut shifted = state.clone();
        let g = shifted.params.id("probe.gate").expect("gate");
        shifted.params.get_mut(g).data_mut().iter_mut().for_each(|v| *v += 3.7);
        let drift = max_gap(&base, &cgp_forward(&stack, &shifted)?);
        suite.record(drift <= 1e-9, drift, || format!("seed {seed}: gate shift drift {drift:e}"));
    }
    Ok(suite)
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Token and feature standardization of the targets, `o` as the token
/// mean, and no teacher tensor registered as trainable on a student tape.
pub fn target_contracts(seeds: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("target_contracts");
    for seed in 0..seeds {
        let mut stack = toy_stack(seed, 3, 12, 16);
        // uneven offsets and scales per layer and channel
        stack.patch.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = *v * (1.0 + (i % 7) as f64) + (i % 5) as f64);
        let t = make_targets(&stack);
        let (n, d) = (t.z.rows(), t.z.cols());
        let mut worst_mean = 0.0f64;
        let mut worst_var = 0.0f64;
        for i in 0..n {
            let row = t.z.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
        suite.record(worst_mean < 1e-6, worst_mean, || format!("seed {seed}: token mean {worst_mean:e}"));
        suite.record(worst_var < 1e-4, worst_var, || format!("seed {seed}: token var gap {worst_var:e}"));
        let gap = (0..d)
            .map(|j| ((0..n).map(|i| t.z.get2(i, j)).sum::<f64>() / n as f64 - t.o[j]).abs())
            .fold(0.0, f64::max);
        suite.record(gap <= 1e-12, gap, || format!("seed {seed}: o gap {gap:e}"));
    }

    let enc = crate::encoder::EncoderConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        gated: true,
        patch_dim: 4,
        grid: (2, 2),
        ln_eps: 1e-6,
    };
    let pcfg = PretrainConfig {
        views: 1,
        batch_size: 1,
        dtype: Dtype::F64,
        mask: MaskConfig::Random { ratio: 0.5 },
        ..PretrainConfig::default()
    };
    let trainer = Trainer::new(enc, pcfg, 0)?;
    let patches = trunc_normal(&mut substream(0, "selftest/patches"), &[4, 4], 1.0);
    let (targets, _) = trainer.targets(&patches)?;
    let plan = trainer.plan_for(0, 0, 0)?;
    let (tape, vars) = trainer.view_tape(&patches, &targets, &plan, 1.0)?;
    let grads = tape.backward(vars.objective)?;
    let leaked: Vec<&String> = grads
        .params()
        .iter()
        .map(|(n, _)| n)
        .filter(|n| trainer.encoder.params.by_name(n).is_none() && trainer.decoder.params.by_name(n).is_none())
        .collect();
    let expected = trainer.encoder.params.len() + trainer.decoder.params.len();
    suite.record(leaked.is_empty() && grads.params().len() == expected, 0.0, || {
        format!("unexpected trainable tensors on the student tape: {leaked:?}")
    });
    Ok(suite)
}

/// AP over every positive of the precision at its own score threshold,
/// counting all samples scored at least as high.
pub fn brute_force_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let sum: f64 = pos
        .iter()
        .map(|&i| {
            let above = (0..scores.len()).filter(|&j| scores[j] >= scores[i]);
            let (hit, all) = above.fold((0, 0), |(h, a), j| (h + labels[j] as usize, a + 1));
            hit as f64 / all as f64
        })
        .sum();
    Some(sum / pos.len() as f64)
}

pub fn metric_oracle(instances: usize) -> Result<SuiteResult> {
    use rand::Rng as _;
    let mut suite = SuiteResult::new("metric_oracle");
    let mut rng = substream(0, "selftest/ap");
    for inst in 0..instances {
        let s = rng.gen_range(1..=32);
        // coarse scores force plenty of ties
        let scores: Vec<f64> = (0..s).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let mut labels: Vec<bool> = (0..s).map(|_| rng.gen_bool(0.4)).collect();
        labels[rng.gen_range(0..s)] = true;
        let (a, b) = (average_precision(&scores, &labels), brute_force_ap(&scores, &labels));
        let gap = match (a, b) {
            (Some(a), Some(b)) => (a - b).abs(),
            _ => f64::INFINITY,
        };
        suite.record(gap <= 1e-9, gap, || format!("instance {inst}: sweep {a:?} vs brute force {b:?}"));
    }

    let scores = Tensor::matrix(4, 1, vec![0.9, 0.8, 0.7, 0.2]).expect("4×1");
    let labels = Tensor::matrix(4, 1, vec![1.0, 1.0, 0.0, 1.0]).expect("4×1");
    // TP=2, FP=1, FN=1
    for avg in [Averaging::Macro, Averaging::Micro] {
        let v = f1(&scores, &labels, 0.5, avg)?;
        suite.record(v == 2.0 / 3.0, (v - 2.0 / 3.0).abs(), || format!("f1 {avg:?} hand case gave {v}"));
    }
    let perfect = f1(&labels, &labels, 0.5, Averaging::Macro)?;
    suite.record(perfect == 1.0, 0.0, || format!("f1 of exact predictions gave {perfect}"));
    let acc_scores = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]).expect("4×2");
    let acc = accuracy(&acc_scores, &[0, 1, 0, 0])?;
    suite.record(acc == 0.75, (acc - 0.75).abs(), || format!("accuracy hand case gave {acc}"));
    let tie = accuracy(&Tensor::full(&[3, 3], 0.5), &[0, 0, 0])?;
    suite.record(tie == 1.0, 0.0, || format!("uniform scores with class-0 labels gave {tie}"));
    Ok(suite)
}

/// Every suite at the given seed count.
pub fn selftest(seeds: u64, ap_instances: usize) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        grad_encoder_block(seeds)?,
        grad_decoder(DecoderKind::Cnn, seeds)?,
        grad_decoder(DecoderKind::Vit, seeds)?,
        grad_cgp(seeds)?,
        cgp_contracts(seeds)?,
        target_contracts(seeds)?,
        metric_oracle(ap_instances)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_hand_cases() {
        assert_eq!(brute_force_ap(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(brute_force_ap(&[0.9, 0.5, 0.1], &[false, false, true]), Some(1.0 / 3.0));
        // a tied pair counts both as retrieved
        assert_eq!(brute_force_ap(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(brute_force_ap(&[0.5], &[false]), None);
    }

    #[test]
    fn quick_suites_pass() {
        for s in selftest(2, 50).unwrap() {
            assert!(s.ok(), "{}: {:?}", s.name, s.failures);
        }
    }
}
