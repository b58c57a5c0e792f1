use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::collapse::{collapse_diagnostics, CollapseReport};
use super::decoder::{Decoder, DecoderConfig};
use super::loss::{mlr_loss_tape, LocalNorm, LossReport, ViewLoss};
use super::mask::{inverse_block_mask, random_mask, MaskPlan};
use super::targets::{make_targets, Targets};
use super::teacher::{ema_update, EmaSchedule, TeacherState};
use crate::encoder::{Encoder, EncoderConfig, Tap};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, Dtype, OptimState, Tape, Tensor, Var, WarmupCosine};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskConfig {
    Random { ratio: f64 },
    InverseBlock { keep_ratio: f64, aspect_min: f64, aspect_max: f64 },
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig::InverseBlock {
            keep_ratio: 0.2,
            aspect_min: 0.33,
            aspect_max: 3.0,
        }
    }
}

impl MaskConfig {
    pub fn plan(&self, grid: (usize, usize), rng: &mut crate::rng::Rng) -> Result<MaskPlan> {
        match *self {
            MaskConfig::Random { ratio } => random_mask(grid.0 * grid.1, ratio, rng),
            MaskConfig::InverseBlock {
                keep_ratio,
                aspect_min,
                aspect_max,
            } => inverse_block_mask(grid, keep_ratio, (aspect_min, aspect_max), rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Masked student views per sample sharing one teacher pass.
    pub views: usize,
    pub mask: MaskConfig,
    pub target_tap: Tap,
    pub local_norm: LocalNorm,
    pub decoder: DecoderConfig,
    pub optim: AdamWConfig,
    pub start_lr: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub ema_start: f64,
    pub ema_end: f64,
    /// Defaults to half of `steps`.
    pub ema_anneal_steps: Option<u64>,
    pub dtype: Dtype,
    /// Collapse diagnostics cadence in steps; 0 disables them.
    pub collapse_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 8,
            views: 16,
            mask: MaskConfig::default(),
            target_tap: Tap::Eob,
            local_norm: LocalNorm::OverN,
            decoder: DecoderConfig::default(),
            optim: AdamWConfig::default(),
            start_lr: 1e-6,
            peak_lr: 5e-4,
            min_lr: 1e-6,
            warmup_steps: 250,
            ema_start: 0.999,
            ema_end: 0.9999,
            ema_anneal_steps: None,
            dtype: Dtype::F32,
            collapse_every: 100,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.views == 0 {
            return Err(Error::Config("batch_size and views must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0) || self.start_lr < 0.0 || self.min_lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative with peak > 0".into()));
        }
        self.ema().validate()
    }

    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine {
            start_lr: self.start_lr,
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    pub fn ema(&self) -> EmaSchedule {
        EmaSchedule {
            start: self.ema_start,
            end: self.ema_end,
            anneal_steps: self.ema_anneal_steps.unwrap_or(self.steps / 2),
        }
    }
}

/// One training sample: an id for error messages and its N×k² patches.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub id: &'a str,
    pub patches: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossReport,
    pub lr: f64,
    pub lambda: f64,
    pub teacher_forwards: usize,
    pub collapse: Option<CollapseReport>,
}

/// Handles of one student view on its tape.
#[derive(Clone, Copy, Debug)]
pub struct ViewVars {
    pub global: Var,
    pub local: Var,
    pub objective: Var,
}

/// Student encoder + decoder, EMA teacher and both optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub cfg: PretrainConfig,
    pub seed: u64,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub teacher: TeacherState,
    pub enc_opt: OptimState,
    pub dec_opt: OptimState,
    pub step: u64,
}

impl Trainer {
    pub fn new(enc_cfg: EncoderConfig, cfg: PretrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Encoder::init(enc_cfg, &mut substream(seed, "init/encoder"))?;
        let mut decoder = Decoder::init(
            cfg.decoder.clone(),
            encoder.cfg.dim,
            encoder.cfg.grid,
            &mut substream(seed, "init/decoder"),
        )?;
        for store in [&mut encoder.params, &mut decoder.params] {
            for i in 0..store.len() {
                let name = store.entries()[i].name.clone();
                let id = store.id(&name).expect("own name");
                let v = store.get(id).clone().rounded(cfg.dtype);
                *store.get_mut(id) = v;
            }
        }
        let teacher = TeacherState::new(&encoder.params, cfg.ema())?;
        let enc_opt = OptimState::new(cfg.optim, &encoder.params);
        let dec_opt = OptimState::new(cfg.optim, &decoder.params);
        Ok(Trainer {
            cfg,
            seed,
            encoder,
            decoder,
            teacher,
            enc_opt,
            dec_opt,
            step: 0,
        })
    }

    /// Mask plan for (step, batch slot, view); a pure function of the seed.
    pub fn plan_for(&self, step: u64, slot: usize, view: usize) -> Result<MaskPlan> {
        let mut rng = substream(self.seed, &format!("mask/{step}/{slot}/{view}"));
        self.cfg.mask.plan(self.encoder.cfg.grid, &mut rng)
    }

    /// Sample indices for `step`, drawn without replacement from `0..n`.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let mut rng = substream(self.seed, &format!("data/{step}"));
        sample(&mut rng, n, self.cfg.batch_size.min(n)).into_vec()
    }

    /// Teacher targets from an unmasked pass with the EMA weights.
    pub fn targets(&self, patches: &Tensor) -> Result<(Targets, Tensor)> {
        let full = self
            .encoder
            .forward_full_with(&self.teacher.params, patches, None, self.cfg.dtype)?;
        let stack = full.stack(self.cfg.target_tap);
        let last = stack.layer_patch(stack.layers() - 1);
        Ok((make_targets(stack), last))
    }

    /// Builds one student view: encoder on the visible tokens, decoder over
    /// the full grid, and the loss against fixed targets.
    pub fn view_tape(&self, patches: &Tensor, targets: &Targets, plan: &MaskPlan, weight: f64) -> Result<(Tape, ViewVars)> {
        let mut tape = Tape::new(self.cfg.dtype);
        let be = self.encoder.params.bind(&mut tape, true);
        let bd = self.decoder.params.bind(&mut tape, true);
        let fwd = self.encoder.forward_tape(&mut tape, &be, patches, Some(&plan.visible))?;
        let out = fwd.output();
        let o_m = tape.gather_rows(out, &[0])?;
        let rows: Vec<usize> = (1..=plan.visible.len()).collect();
        let vis = tape.gather_rows(out, &rows)?;
        let pred = self.decoder.forward_tape(&mut tape, &bd, vis, plan)?;
        let (global, local) = mlr_loss_tape(&mut tape, targets, pred, o_m, plan, self.cfg.local_norm)?;
        let sum = tape.add(global, local)?;
        let objective = tape.scale(sum, weight)?;
        Ok((tape, ViewVars { global, local, objective }))
    }

    /// One optimizer step over `batch`: one teacher pass per sample, `views`
    /// student passes reusing its targets, AdamW on student and decoder, then
    /// the EMA update.
    pub fn step(&mut self, batch: &[Sample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let dtype = self.cfg.dtype;
        let weight = 1.0 / (batch.len() * self.cfg.views) as f64;
        let n_enc = self.encoder.params.len();
        let mut enc_grads: Vec<Tensor> = self.encoder.params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        let mut dec_grads: Vec<Tensor> = self.decoder.params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        let mut views = Vec::with_capacity(batch.len() * self.cfg.views);
        let mut teacher_forwards = 0;
        let mut student_last = Vec::new();
        let mut teacher_last = Vec::new();
        let diagnose = self.cfg.collapse_every > 0 && self.step % self.cfg.collapse_every == 0;

        for (slot, s) in batch.iter().enumerate() {
            let (targets, t_last) = self.targets(s.patches)?;
            teacher_forwards += 1;
            if diagnose {
                let full = self.encoder.forward_full(s.patches, None, dtype)?;
                student_last.push(full.eob.layer_patch(full.eob.layers() - 1));
                teacher_last.push(t_last);
            }
            for v in 0..self.cfg.views {
                let plan = self.plan_for(self.step, slot, v)?;
                let non_finite = |e: Error| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss {
                        sample: s.id.to_string(),
                        view: v,
                    },
                    other => other,
                };
                let (tape, vars) = self.view_tape(s.patches, &targets, &plan, weight).map_err(non_finite)?;
                let (g, l) = (tape.value(vars.global).item(), tape.value(vars.local).item());
                if !g.is_finite() || !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        sample: s.id.to_string(),
                        view: v,
                    });
                }
                views.push(ViewLoss { global: g, local: l });
                let grads = tape.backward(vars.objective).map_err(non_finite)?.into_tensors();
                for (i, g) in grads.iter().enumerate() {
                    let acc = if i < n_enc { &mut enc_grads[i] } else { &mut dec_grads[i - n_enc] };
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
        }

        let lr = self.cfg.schedule().lr_at(self.step);
        adamw_step(&mut self.enc_opt, &mut self.encoder.params, &enc_grads, lr, dtype)?;
        adamw_step(&mut self.dec_opt, &mut self.decoder.params, &dec_grads, lr, dtype)?;
        let lambda = ema_update(&mut self.teacher, &self.encoder.params, dtype)?;
        let report = StepReport {
            step: self.step,
            loss: LossReport::from_views(views),
            lr,
            lambda,
            teacher_forwards,
            collapse: diagnose.then(|| collapse_diagnostics(&student_last, Some(&teacher_last))),
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs until `cfg.steps`, drawing batches from `data` by step index.
    pub fn run(&mut self, ids: &[String], data: &[Tensor], on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<()> {
        self.run_until(self.cfg.steps, ids, data, on_step)
    }

    /// Like [`Trainer::run`] but stops before step `stop` (capped at `cfg.steps`);
    /// the schedules still span `cfg.steps`.
    pub fn run_until(
        &mut self,
        stop: u64,
        ids: &[String],
        data: &[Tensor],
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() || ids.len() != data.len() {
            return Err(Error::EmptyInput("pretraining needs a non-empty, labelled set of samples".into()));
        }
        while self.step < stop.min(self.cfg.steps) {
            let idx = self.batch_indices(self.step, data.len());
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| Sample {
                    id: &ids[i],
                    patches: &data[i],
                })
                .collect();
            let report = self.step(&batch)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}
