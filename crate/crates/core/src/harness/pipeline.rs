//! The stages behind the command-line tool. Each reads and writes plain
//! files under an output directory so stages can run separately.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::probe::{cgp_probe, gate_report, layerwise_linear_probe, linear_probe, spearman, GateReport, Pooling, ProbeConfig, ProbeMetrics};
use crate::pretrain::{StepReport, Trainer};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::container::{write_atomic, Container};
use super::ingest::{cache_dir, ingest, IngestReport};
use super::manifest::{Manifest, SplitName};
use super::stacks::{read_splits, StackSet};

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(v)?.as_bytes())
}

/// Synthetic corpus under `out`, with the config that produced it.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let m = super::synth::synth_dataset(out, cfg.seed, &cfg.synth)?;
    cfg.save(&out.join("config.json"))?;
    Ok(m)
}

fn ingest_for(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<(Manifest, IngestReport)> {
    let manifest = Manifest::load(manifest_path)?;
    let report = ingest(&manifest, manifest_dir(manifest_path), cfg, &cache_dir(&out.join("cache")))?;
    Ok((manifest, report))
}

fn ingest_summary(r: &IngestReport) -> serde_json::Value {
    json!({
        "items": r.items.len(),
        "featurized": r.featurized,
        "cache_hits": r.cache_hits,
        "errors": r.errors.iter().map(|e| json!({"id": e.id, "message": e.message})).collect::<Vec<_>>(),
    })
}

/// Featurizes every record and writes `ingest.json`.
pub fn run_ingest(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<IngestReport> {
    std::fs::create_dir_all(out)?;
    let (_, report) = ingest_for(cfg, manifest_path, out)?;
    write_json(&out.join("ingest.json"), &ingest_summary(&report))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub start_step: u64,
    pub steps: u64,
    pub samples: usize,
    pub final_loss: Option<f64>,
    pub collapse_warnings: usize,
    pub checkpoint: PathBuf,
}

pub fn train_log_path(out: &Path) -> PathBuf {
    out.join("train_log.jsonl")
}

pub fn read_train_log(path: &Path) -> Result<Vec<StepReport>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Checkpoints must come from the same model and schedule as `cfg`.
fn check_resumable(cfg: &RunConfig, saved: &RunConfig) -> Result<()> {
    if cfg.encoder_config() != saved.encoder_config() || cfg.pretrain != saved.pretrain {
        return Err(Error::Config(
            "checkpoint was trained with a different encoder or pretraining config".into(),
        ));
    }
    Ok(())
}

/// Pretrains on the train split. The log gets one JSON line per step; with
/// `resume`, training continues from that checkpoint and the log is appended.
pub fn run_pretrain(cfg: &RunConfig, manifest_path: &Path, out: &Path, resume: Option<&Path>) -> Result<PretrainSummary> {
    std::fs::create_dir_all(out)?;
    let (_, report) = ingest_for(cfg, manifest_path, out)?;
    let train = report.split(SplitName::Train);
    if train.is_empty() {
        return Err(Error::EmptyInput("no usable training clips".into()));
    }
    let ids: Vec<String> = train.iter().map(|f| f.id.clone()).collect();
    let data: Vec<Tensor> = train.iter().map(|f| f.patches.clone()).collect();

    let mut trainer = match resume {
        Some(p) => {
            let (t, saved) = load_checkpoint(p)?;
            check_resumable(cfg, &saved)?;
            if t.seed != cfg.seed {
                log::warn!("resuming with the checkpoint's seed {} instead of {}", t.seed, cfg.seed);
            }
            t
        }
        None => Trainer::new(cfg.encoder_config(), cfg.pretrain.clone(), cfg.seed)?,
    };
    cfg.save(&out.join("config.json"))?;
    let start_step = trainer.step;
    let mut log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(train_log_path(out))?
    } else {
        File::create(train_log_path(out))?
    };
    let ckpt_dir = out.join("checkpoints");
    let mut final_loss = None;
    let mut collapse_warnings = 0;
    trainer.run(&ids, &data, |t, r| {
        writeln!(log_file, "{}", serde_json::to_string(r)?)?;
        final_loss = Some(r.loss.total);
        if let Some(c) = &r.collapse {
            if c.collapsed {
                collapse_warnings += 1;
                log::warn!("step {}: representation collapse suspected", r.step);
            }
        }
        if r.step % 100 == 0 {
            log::info!("step {} loss {:.5} lr {:.3e}", r.step, r.loss.total, r.lr);
        }
        if cfg.checkpoint_every > 0 && t.step % cfg.checkpoint_every == 0 && t.step < t.cfg.steps {
            std::fs::create_dir_all(&ckpt_dir)?;
            save_checkpoint(&ckpt_dir.join(format!("step{}.batl", t.step)), t, cfg)?;
        }
        Ok(())
    })?;
    log_file.flush()?;
    let checkpoint = out.join("checkpoint.batl");
    save_checkpoint(&checkpoint, &trainer, cfg)?;
    let summary = PretrainSummary {
        start_step,
        steps: trainer.step,
        samples: data.len(),
        final_loss,
        collapse_warnings,
        checkpoint,
    };
    write_json(&out.join("pretrain.json"), &json!({"summary": summary, "ingest": ingest_summary(&report)}))?;
    Ok(summary)
}

/// Frozen per-layer embeddings of every split from the student encoder,
/// written to `out/stacks/{split}.batl`.
pub fn run_embed(cfg: &RunConfig, manifest_path: &Path, checkpoint: &Path, out: &Path) -> Result<Vec<StackSet>> {
    std::fs::create_dir_all(out)?;
    let (trainer, saved) = load_checkpoint(checkpoint)?;
    if saved.encoder_config() != cfg.encoder_config() {
        return Err(Error::Config("checkpoint encoder does not match the config".into()));
    }
    let (manifest, report) = ingest_for(cfg, manifest_path, out)?;
    let dir = out.join("stacks");
    let mut sets = Vec::new();
    for split in SplitName::ALL {
        let items = report.split(split);
        if items.is_empty() {
            if split == SplitName::Valid {
                continue;
            }
            return Err(Error::EmptyInput(format!("no usable clips in the {} split", split.as_str())));
        }
        let mut set = StackSet {
            split,
            task: manifest.task,
            vocabulary: manifest.vocabulary.clone(),
            tap: cfg.embed.tap,
            ids: Vec::with_capacity(items.len()),
            labels: Vec::with_capacity(items.len()),
            stacks: Vec::with_capacity(items.len()),
        };
        for f in items {
            let full = trainer.encoder.forward_full(&f.patches, None, trainer.cfg.dtype)?;
            let s = full.stack(cfg.embed.tap);
            let record = manifest.records.iter().find(|r| r.id == f.id).expect("ingested from this manifest");
            set.ids.push(f.id.clone());
            set.labels.push(record.labels.clone());
            set.stacks.push(crate::encoder::LayerStack::new(
                s.patch.clone().rounded(crate::numerics::Dtype::F32),
                s.cls.clone().rounded(crate::numerics::Dtype::F32),
                s.tap,
            )?);
        }
        set.write(&dir)?;
        sets.push(set);
    }
    write_json(&out.join("embed.json"), &json!({
        "checkpoint": checkpoint,
        "splits": sets.iter().map(StackSet::describe).collect::<Vec<_>>(),
        "ingest": ingest_summary(&report),
    }))?;
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KPoint {
    pub k: usize,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    /// `accuracy` or `map`.
    pub metric: String,
    pub layers: usize,
    pub cgp: ProbeMetrics,
    pub cgp_best_step: u64,
    pub linear_final: ProbeMetrics,
    pub layerwise: Vec<f64>,
    pub layerwise_argmax: usize,
    pub gate: GateReport,
    /// Rank correlation between the gate weights and the layerwise curve.
    pub spearman: Option<f64>,
    pub k_sweep: Vec<KPoint>,
}

pub fn probe_summary_path(out: &Path) -> PathBuf {
    out.join("probe_summary.json")
}

pub fn read_probe_summary(path: &Path) -> Result<ProbeSummary> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// CGP, final-layer linear and layerwise linear probes on stored stacks.
pub fn run_probe(cfg: &RunConfig, stacks_dir: &Path, out: &Path) -> Result<ProbeSummary> {
    std::fs::create_dir_all(out)?;
    let (train, valid, test) = read_splits(stacks_dir)?;
    let (train, test) = (train.to_split()?, test.to_split()?);
    let valid = valid.map(|v| v.to_split()).transpose()?;
    let pc = &cfg.probe;
    let seed = cfg.seed;

    let cgp = cgp_probe(&train, valid.as_ref(), &test, pc, seed)?;
    log::info!("cgp test {:.4} (best step {})", cgp.test.primary, cgp.run.best_step);
    let linear = linear_probe(&train, valid.as_ref(), &test, None, Pooling::Cls, pc, seed)?;
    let layerwise = layerwise_linear_probe(&train, valid.as_ref(), &test, pc, seed)?;
    let gate = gate_report(&cgp.run.state)?;
    let mut k_sweep = Vec::new();
    for &k in &cfg.k_sweep {
        let kc = ProbeConfig { k, ..pc.clone() };
        let o = cgp_probe(&train, valid.as_ref(), &test, &kc, seed)?;
        log::info!("k={k}: test {:.4}", o.test.primary);
        k_sweep.push(KPoint { k, test: o.test.primary });
    }

    let summary = ProbeSummary {
        metric: if cgp.test.accuracy.is_some() { "accuracy" } else { "map" }.into(),
        layers: train.stacks[0].layers(),
        spearman: spearman(&gate.alpha, &layerwise),
        layerwise_argmax: crate::metrics::argmax(&layerwise),
        cgp: cgp.test.clone(),
        cgp_best_step: cgp.run.best_step,
        linear_final: linear.test,
        layerwise,
        gate,
        k_sweep,
    };
    write_json(&probe_summary_path(out), &summary)?;
    let mut hist = String::new();
    for p in &cgp.run.history {
        hist.push_str(&serde_json::to_string(p)?);
        hist.push('\n');
    }
    write_atomic(&out.join("probe_history.jsonl"), hist.as_bytes())?;
    let mut c = Container::new(json!({"kind": "probe", "head": cgp.run.state.head, "best_step": cgp.run.best_step}));
    for e in cgp.run.state.params.entries() {
        c.push(e.name.clone(), e.value.clone());
    }
    c.write(&out.join("probe.batl"))?;
    Ok(summary)
}
