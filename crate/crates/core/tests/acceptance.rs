//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Pass criterion numbers as arguments to run a subset.

use std::path::{Path, PathBuf};
use std::time::Instant;

use batlab::encoder::attention_sink;
use batlab::frontend::{FrontendConfig, MelConfig};
use batlab::harness::checkpoint::load_checkpoint;
use batlab::harness::config::{EncoderSpec, LayeredConfig, RunConfig};
use batlab::harness::ingest::ingest;
use batlab::harness::manifest::{Manifest, SplitName};
use batlab::harness::pipeline::{read_train_log, run_embed, run_pretrain, run_probe, run_synth, train_log_path, ProbeSummary};
use batlab::harness::selftest::{cgp_contracts, grad_cgp, grad_decoder, grad_encoder_block, metric_oracle, target_contracts, SuiteResult};
use batlab::harness::synth::layered_task;
use batlab::metrics::argmax;
use batlab::pretrain::{DecoderConfig, DecoderKind, StepReport};
use batlab::probe::{cgp_probe, gate_report, layerwise_linear_probe, linear_probe, spearman, Pooling, ProbeConfig, ProbeLoss, Split};

const SEED: u64 = 7;
const GRAD_SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = Result<Outcome, Box<dyn std::error::Error>>;

fn desk_config(seed: u64, gated: bool, steps: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.frontend = FrontendConfig::Modern {
        mel: MelConfig {
            n_mels: 64,
            ..MelConfig::default()
        },
        top_db: 80.0,
    };
    cfg.data.crop_frames = 128;
    cfg.data.patch = 16;
    cfg.encoder = EncoderSpec {
        depth: 4,
        dim: 64,
        heads: 4,
        gated,
        ..EncoderSpec::default()
    };
    cfg.pretrain.steps = steps;
    cfg.pretrain.warmup_steps = steps / 8;
    cfg.pretrain.batch_size = 4;
    cfg.pretrain.views = 4;
    cfg.pretrain.decoder = DecoderConfig {
        kind: DecoderKind::Vit,
        depth: 2,
        heads: 4,
        ..DecoderConfig::default()
    };
    cfg.probe.k = 64;
    cfg.probe.loss = ProbeLoss::Bce;
    cfg
}

fn suite_line(s: &SuiteResult) -> String {
    format!("{} {}/{} worst {:.2e}", s.name, s.passed, s.total, s.worst)
}

fn suites(list: Vec<SuiteResult>) -> Outcome {
    let pass = list.iter().all(|s| s.ok());
    let mut detail = list.iter().map(suite_line).collect::<Vec<_>>().join("; ");
    for s in &list {
        for f in s.failures.iter().take(3) {
            detail.push_str(&format!("\n      {}: {f}", s.name));
        }
    }
    Outcome { pass, detail }
}

fn criterion_1() -> Check {
    Ok(suites(vec![
        grad_encoder_block(GRAD_SEEDS)?,
        grad_decoder(DecoderKind::Cnn, GRAD_SEEDS)?,
        grad_decoder(DecoderKind::Vit, GRAD_SEEDS)?,
        grad_cgp(GRAD_SEEDS)?,
    ]))
}

fn criterion_2() -> Check {
    Ok(suites(vec![cgp_contracts(GRAD_SEEDS)?]))
}

fn criterion_3() -> Check {
    Ok(suites(vec![target_contracts(GRAD_SEEDS)?]))
}

fn criterion_4() -> Check {
    Ok(suites(vec![metric_oracle(1000)?]))
}

/// Pretraining runs shared by criteria 5, 8 and 9.
struct DeskRuns {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    gated: PathBuf,
    gated_again: PathBuf,
    ungated: PathBuf,
}

fn desk_runs() -> Result<DeskRuns, Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    run_synth(&desk_config(SEED, true, 2000), &data)?;
    let manifest = data.join("manifest.json");
    let runs = [("gated", true), ("gated_again", true), ("ungated", false)];
    for (name, gated) in runs {
        let t = Instant::now();
        run_pretrain(&desk_config(SEED, gated, 2000), &manifest, &root.join(name), None)?;
        eprintln!("    pretrain {name}: {:.0}s", t.elapsed().as_secs_f64());
    }
    Ok(DeskRuns {
        _tmp: tmp,
        data,
        gated: root.join("gated"),
        gated_again: root.join("gated_again"),
        ungated: root.join("ungated"),
    })
}

fn mean_local(log: &[StepReport], from: u64, to: u64) -> f64 {
    let sel: Vec<f64> = log.iter().filter(|r| r.step >= from && r.step < to).map(|r| r.loss.local).collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

fn criterion_5(runs: &DeskRuns) -> Check {
    let a = read_train_log(&train_log_path(&runs.gated))?;
    let b = read_train_log(&train_log_path(&runs.gated_again))?;
    let (early, late) = (mean_local(&a, 100, 200), mean_local(&a, 1900, 2000));
    let ratio = late / early;
    let flagged: Vec<u64> = a
        .iter()
        .filter(|r| r.step > 200 && r.collapse.as_ref().is_some_and(|c| c.collapsed))
        .map(|r| r.step)
        .collect();
    let checked = a.iter().filter(|r| r.step > 200 && r.collapse.is_some()).count();
    let drift = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x.loss.total - y.loss.total).abs().max((x.loss.local - y.loss.local).abs()))
        .fold(0.0, f64::max);
    let same_len = a.len() == b.len() && a.len() == 2000;
    let same_ckpt = std::fs::read(runs.gated.join("checkpoint.batl"))? == std::fs::read(runs.gated_again.join("checkpoint.batl"))?;
    let (pa, pb, pc) = (ratio <= 0.5, flagged.is_empty() && checked > 0, same_len && drift <= 1e-9 && same_ckpt);
    Ok(Outcome {
        pass: pa && pb && pc,
        detail: format!(
            "(a) local {early:.3} -> {late:.3}, ratio {ratio:.3} (need <= 0.5) {}; (b) {} collapse flags in {checked} checks after step 200 {}; (c) rerun max loss drift {drift:.1e}, checkpoints identical {same_ckpt} {}",
            verdict(pa),
            flagged.len(),
            verdict(pb),
            verdict(pc)
        ),
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn layered_splits(cfg: &LayeredConfig, seed: u64) -> Result<(Split, Split, Split), Box<dyn std::error::Error>> {
    let sets = layered_task(seed, cfg, 4)?;
    Ok((sets[0].to_split()?, sets[1].to_split()?, sets[2].to_split()?))
}

fn layered_probe_config() -> ProbeConfig {
    ProbeConfig {
        k: 64,
        ..ProbeConfig::default()
    }
}

fn criterion_6() -> Check {
    let lc = LayeredConfig::default();
    let target = lc.designated_layer();
    let (tr, va, te) = layered_splits(&lc, SEED)?;
    let pc = layered_probe_config();
    let curve = layerwise_linear_probe(&tr, Some(&va), &te, &pc, SEED)?;
    let last = *curve.last().expect("layers");
    let construction = curve[target] >= 0.9 && last <= 0.7;
    let linear = linear_probe(&tr, Some(&va), &te, None, Pooling::Cls, &pc, SEED)?.test.primary;
    let cgp = cgp_probe(&tr, Some(&va), &te, &pc, SEED)?;
    let gate = gate_report(&cgp.run.state)?;
    let rho = spearman(&gate.alpha, &curve);
    let checks = [
        argmax(&curve) == target,
        gate.argmax == target,
        cgp.test.primary - linear >= 0.10,
        rho.is_some_and(|r| r > 0.0),
    ];
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    Ok(Outcome {
        pass: construction && checks.iter().all(|&c| c),
        detail: format!(
            "designated layer {target}; construction: linear at designated {:.3} (need >= 0.9), final {last:.3} (need <= 0.7) {}\n      \
             (a) layerwise [{}] argmax {} {}; (b) alpha [{}] argmax {} {}; (c) cgp {:.3} vs final-layer linear {linear:.3} {}; (d) spearman {} {}",
            curve[target],
            verdict(construction),
            fmt(&curve),
            argmax(&curve),
            verdict(checks[0]),
            fmt(&gate.alpha),
            gate.argmax,
            verdict(checks[1]),
            cgp.test.primary,
            verdict(checks[2]),
            rho.map_or("undefined".into(), |r| format!("{r:.3}")),
            verdict(checks[3]),
        ),
    })
}

const SWEEP_PROBE_SEEDS: u64 = 3;

fn criterion_7() -> Check {
    // a larger test split and several probe seeds keep one-sample flips
    // below the tolerance
    let lc = LayeredConfig {
        samples: 4000,
        ..LayeredConfig::default()
    };
    let (tr, va, te) = layered_splits(&lc, SEED)?;
    let mut m = Vec::new();
    for k in [16, 64, 256] {
        let pc = ProbeConfig {
            k,
            ..ProbeConfig::default()
        };
        let mut acc = 0.0;
        for s in 0..SWEEP_PROBE_SEEDS {
            acc += cgp_probe(&tr, Some(&va), &te, &pc, SEED + s)?.test.primary;
        }
        m.push(100.0 * acc / SWEEP_PROBE_SEEDS as f64);
    }
    let no_drop = m[2] >= m[0] - 0.5;
    let diminishing = m[2] - m[1] <= m[1] - m[0] + 1.0;
    Ok(Outcome {
        pass: no_drop && diminishing,
        detail: format!(
            "mean test accuracy over {SWEEP_PROBE_SEEDS} probe seeds: K=16 {:.2}%, K=64 {:.2}%, K=256 {:.2}%; 256 vs 16 {:+.2} pp {}; gains {:+.2} then {:+.2} pp {}",
            m[0],
            m[1],
            m[2],
            m[2] - m[0],
            verdict(no_drop),
            m[1] - m[0],
            m[2] - m[1],
            verdict(diminishing)
        ),
    })
}

fn sink_statistic(run: &Path, data: &Path) -> Result<f64, Box<dyn std::error::Error>> {
    let (trainer, cfg) = load_checkpoint(&run.join("checkpoint.batl"))?;
    let manifest = Manifest::load(&data.join("manifest.json"))?;
    let report = ingest(&manifest, data, &cfg, &run.join("cache"))?;
    let clips = report.split(SplitName::Test);
    let mut total = 0.0;
    for f in &clips {
        let full = trainer.encoder.forward_full(&f.patches, None, trainer.cfg.dtype)?;
        total += attention_sink(&full.attention_maps());
    }
    Ok(total / clips.len() as f64)
}

fn criterion_8(runs: &DeskRuns) -> Check {
    let gated = sink_statistic(&runs.gated, &runs.data)?;
    let ungated = sink_statistic(&runs.ungated, &runs.data)?;
    let note = if gated < ungated {
        "gated is lower"
    } else {
        "FLAG: gated is not lower"
    };
    Ok(Outcome {
        pass: true,
        detail: format!("attention sink on test clips: gated {gated:.4}, ungated {ungated:.4} ({note}; reported, not scored)"),
    })
}

fn criterion_9(runs: &DeskRuns) -> Check {
    let log = read_train_log(&train_log_path(&runs.gated))?;
    let bad = log.iter().filter(|r| r.loss.total != r.loss.global + r.loss.local).count();
    let weights = [
        r#"{"pretrain": {"global_weight": 2.0}}"#,
        r#"{"pretrain": {"local_weight": 0.5}}"#,
        r#"{"pretrain": {"loss_scale": 80000.0}}"#,
        r#"{"pretrain": {"global_loss_scale": 80000.0}}"#,
    ];
    let accepted: Vec<&str> = weights.iter().copied().filter(|w| RunConfig::from_json(w).is_ok()).collect();
    Ok(Outcome {
        pass: bad == 0 && accepted.is_empty() && log.len() == 2000,
        detail: format!(
            "{} logged steps, {bad} with total != global + local; loss-weight keys accepted by the config: {}",
            log.len(),
            if accepted.is_empty() { "none".to_string() } else { accepted.join(", ") }
        ),
    })
}

fn flatten_summary(s: &ProbeSummary) -> Vec<f64> {
    let m = |p: &batlab::probe::ProbeMetrics| vec![p.primary, p.map.unwrap_or(-1.0), p.f1_macro.unwrap_or(-1.0), p.f1_micro.unwrap_or(-1.0)];
    let mut v = m(&s.cgp);
    v.extend(m(&s.linear_final));
    v.extend(&s.layerwise);
    v.extend(&s.gate.alpha);
    v.push(s.spearman.unwrap_or(-2.0));
    v
}

fn end_to_end(root: &Path) -> Result<Vec<f64>, Box<dyn std::error::Error>> {
    let cfg = desk_config(SEED, true, 200);
    run_synth(&cfg, &root.join("data"))?;
    let manifest = root.join("data/manifest.json");
    run_pretrain(&cfg, &manifest, &root.join("pretrain"), None)?;
    run_embed(&cfg, &manifest, &root.join("pretrain/checkpoint.batl"), &root.join("embed"))?;
    Ok(flatten_summary(&run_probe(&cfg, &root.join("embed/stacks"), &root.join("probe"))?))
}

fn criterion_10() -> Check {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let mut cfg = desk_config(SEED, true, 50);
    cfg.checkpoint_every = 25;
    run_synth(&cfg, &root.join("data"))?;
    let manifest = root.join("data/manifest.json");
    run_pretrain(&cfg, &manifest, &root.join("full"), None)?;
    run_pretrain(&cfg, &manifest, &root.join("resumed"), Some(&root.join("full/checkpoints/step25.batl")))?;
    let full = read_train_log(&train_log_path(&root.join("full")))?;
    let resumed = read_train_log(&train_log_path(&root.join("resumed")))?;
    let full_tail: Vec<f64> = full.iter().filter(|r| r.step >= 25).map(|r| r.loss.total).collect();
    let resumed_trace: Vec<f64> = resumed.iter().map(|r| r.loss.total).collect();
    let same_trace = full.len() == 50 && resumed_trace.len() == 25 && full_tail == resumed_trace;
    let same_ckpt = std::fs::read(root.join("full/checkpoint.batl"))? == std::fs::read(root.join("resumed/checkpoint.batl"))?;

    let a = end_to_end(&root.join("e2e_a"))?;
    let b = end_to_end(&root.join("e2e_b"))?;
    let drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let deterministic = a.len() == b.len() && drift <= 1e-9;
    Ok(Outcome {
        pass: same_trace && same_ckpt && deterministic,
        detail: format!(
            "resume at step 25 of 50: loss trace identical {same_trace}, final checkpoint identical {same_ckpt}; \
             synth -> ingest -> pretrain 200 -> embed -> probe twice: {} metrics, max drift {drift:.1e} {}",
            a.len(),
            verdict(deterministic)
        ),
    })
}

fn report(n: usize, name: &str, started: Instant, r: Check) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match r {
        Ok(o) => {
            println!("criterion {n:>2} {name}: {} [{secs:.0}s]\n      {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("criterion {n:>2} {name}: FAIL [{secs:.0}s]\n      error: {e}");
            false
        }
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut ok = true;
    let run = |n: usize, name: &str, f: &dyn Fn() -> Check| !on(n) || report(n, name, Instant::now(), f());
    ok &= run(1, "gradient fidelity", &criterion_1);
    ok &= run(2, "cgp structural contracts", &criterion_2);
    ok &= run(3, "target contracts", &criterion_3);
    ok &= run(4, "metric oracle", &criterion_4);
    if on(5) || on(8) || on(9) {
        let t = Instant::now();
        match desk_runs() {
            Ok(runs) => {
                eprintln!("    desk-scale pretraining: {:.0}s", t.elapsed().as_secs_f64());
                ok &= run(5, "desk-scale pretraining", &|| criterion_5(&runs));
                ok &= run(8, "gated attention sink a/b", &|| criterion_8(&runs));
                ok &= run(9, "equal loss weighting", &|| criterion_9(&runs));
            }
            Err(e) => {
                for (n, name) in [(5, "desk-scale pretraining"), (8, "gated attention sink a/b"), (9, "equal loss weighting")] {
                    if on(n) {
                        println!("criterion {n:>2} {name}: FAIL\n      error: {e}");
                        ok = false;
                    }
                }
            }
        }
    }
    ok &= run(6, "layer-aware probing", &criterion_6);
    ok &= run(7, "prototype-count trend", &criterion_7);
    ok &= run(10, "checkpoint resume and determinism", &criterion_10);
    if !ok {
        std::process::exit(1);
    }
}
