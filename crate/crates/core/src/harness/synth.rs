//! Synthetic corpora: multi-label clips of tones, chirps and noise bursts,
//! and the layered probing task built on a frozen random encoder.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{Encoder, EncoderConfig, LayerStack, Tap};
use crate::error::Result;
use crate::frontend::{write_wav, CANONICAL_SAMPLE_RATE};
use crate::numerics::Dtype;
use crate::rng::{substream, Rng};

use super::config::{LayeredConfig, SynthConfig};
use super::manifest::{EventSpec, LayeredInfo, Manifest, Record, SplitName, SynthSpec, TaskKind};
use super::stacks::StackSet;

const FADE_SECONDS: f64 = 0.01;
const NOISE_FLOOR: f64 = 0.005;
const PEAK: f64 = 0.9;
/// Chance that a non-forced class also occurs in a clip.
const EXTRA_CLASS_P: f64 = 0.3;

pub fn class_name(c: usize) -> String {
    format!("class{c}")
}

/// 70/15/15 by position, so every split gets a contiguous run of the
/// round-robin forced classes.
pub fn split_of(i: usize, n: usize) -> SplitName {
    let (a, b) = ((n * 70).div_ceil(100), (n * 85).div_ceil(100));
    if i < a {
        SplitName::Train
    } else if i < b {
        SplitName::Valid
    } else {
        SplitName::Test
    }
}

fn class_freq(c: usize, n_classes: usize) -> f64 {
    if n_classes == 1 {
        return 1000.0;
    }
    200.0 * 30f64.powf(c as f64 / (n_classes - 1) as f64)
}

fn event_kind(c: usize) -> &'static str {
    ["tone", "chirp", "noise"][c % 3]
}

fn clip_spec(i: usize, seed: u64, cfg: &SynthConfig) -> (SynthSpec, Vec<usize>) {
    let mut rng = substream(seed, &format!("synth/clip/{i}"));
    let seconds = (rng.gen_range(cfg.min_seconds..=cfg.max_seconds) * 100.0).round() / 100.0;
    let forced = i % cfg.n_classes;
    let classes: Vec<usize> = (0..cfg.n_classes)
        .filter(|&c| c == forced || rng.gen_bool(EXTRA_CLASS_P))
        .collect();
    let mut events = Vec::new();
    for &c in &classes {
        let count = rng.gen_range(1..=2);
        for e in 0..count {
            let duration = rng.gen_range(0.2..=0.8f64).min(seconds);
            // the first event starts early so short crops still contain it
            let latest = if e == 0 { (seconds - duration).min(0.5) } else { seconds - duration };
            let onset = rng.gen_range(0.0..=latest.max(0.0));
            events.push(EventSpec {
                class: c,
                kind: event_kind(c).into(),
                onset,
                duration,
                freq: class_freq(c, cfg.n_classes) * rng.gen_range(0.97..=1.03),
                amplitude: rng.gen_range(0.2..=0.5),
            });
        }
    }
    (SynthSpec { seconds, events }, classes)
}

/// Renders a clip description; the noise floor and noise-burst partials
/// come from their own substreams so they are reproducible too.
pub fn render(spec: &SynthSpec, seed: u64, i: usize) -> Vec<f64> {
    let sr = CANONICAL_SAMPLE_RATE as f64;
    let n = (spec.seconds * sr).round() as usize;
    let mut rng = substream(seed, &format!("synth/render/{i}"));
    let mut x: Vec<f64> = (0..n)
        .map(|_| NOISE_FLOOR * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    for ev in &spec.events {
        let start = (ev.onset * sr).round() as usize;
        let len = ((ev.duration * sr).round() as usize).min(n.saturating_sub(start));
        let fade = ((FADE_SECONDS * sr) as usize).max(1);
        let partials: Vec<(f64, f64)> = (0..16)
            .map(|_| (rng.gen_range(ev.freq..ev.freq * 1.5), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        for j in 0..len {
            let t = j as f64 / sr;
            let env = {
                let edge = j.min(len - 1 - j);
                if edge < fade {
                    0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
                } else {
                    1.0
                }
            };
            let v = match ev.kind.as_str() {
                "tone" => (2.0 * PI * ev.freq * t).sin(),
                "chirp" => (2.0 * PI * (ev.freq * t + ev.freq * t * t / (2.0 * ev.duration))).sin(),
                _ => partials.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() / 4.0,
            };
            x[start + j] += ev.amplitude * env * v;
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    x
}

/// Writes `wav/*.wav` and `manifest.json` under `out`, plus the layered
/// task's stacks under `layered/` when enabled.
pub fn synth_dataset(out: &Path, seed: u64, cfg: &SynthConfig) -> Result<Manifest> {
    let vocabulary: Vec<String> = (0..cfg.n_classes).map(class_name).collect();
    let mut records = Vec::with_capacity(cfg.n_clips);
    std::fs::create_dir_all(out.join("wav"))?;
    for i in 0..cfg.n_clips {
        let (spec, classes) = clip_spec(i, seed, cfg);
        let id = format!("clip{i:05}");
        let rel = format!("wav/{id}.wav");
        write_wav(&out.join(&rel), &render(&spec, seed, i), CANONICAL_SAMPLE_RATE)?;
        records.push(Record {
            id,
            path: rel,
            labels: classes.into_iter().map(class_name).collect(),
            split: split_of(i, cfg.n_clips),
            synth: Some(spec),
        });
    }
    let layered = if cfg.layered {
        let lc = &cfg.layered_task;
        for set in layered_task(seed, lc, cfg.n_classes)? {
            set.write(&out.join("layered"))?;
        }
        Some(LayeredInfo {
            designated_layer: lc.designated_layer(),
            layers: lc.layers,
            dim: lc.dim,
            tokens: lc.tokens,
            stacks: "layered".into(),
        })
    } else {
        None
    };
    let manifest = Manifest {
        vocabulary,
        task: TaskKind::MultiLabel,
        records,
        layered,
    };
    manifest.validate()?;
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Class-code amplitude per layer: a squared triangle peaking at the
/// designated layer and reaching zero at the first and last layers.
pub fn signal_profile(cfg: &LayeredConfig) -> Vec<f64> {
    let star = cfg.designated_layer();
    (0..cfg.layers)
        .map(|l| {
            let width = if l < star { star } else { cfg.layers - 1 - star } as f64;
            let t = if width == 0.0 { 0.0 } else { (1.0 - (l.abs_diff(star) as f64) / width).max(0.0) };
            if l == star {
                cfg.signal
            } else {
                cfg.signal * t * t
            }
        })
        .collect()
}

/// Orthonormal D×C basis of the class subspace.
fn class_basis(rng: &mut Rng, d: usize, c: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, c, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Runs random inputs through a frozen, randomly initialized encoder and
/// rewrites the class subspace of every layer: the encoder's own activity
/// there is removed and replaced by the class code at that layer's
/// strength, plus per-sample and per-token noise. Above the designated layer
/// the code fades out, so later blocks carry none of it.
pub fn layered_task(seed: u64, cfg: &LayeredConfig, n_classes: usize) -> Result<Vec<StackSet>> {
    let enc_cfg = EncoderConfig {
        depth: cfg.layers,
        dim: cfg.dim,
        heads: cfg.heads,
        mlp_ratio: 4,
        gated: true,
        patch_dim: cfg.dim,
        grid: (cfg.tokens, 1),
        ln_eps: 1e-6,
    };
    let encoder = Encoder::init(enc_cfg, &mut substream(seed, "layered/encoder"))?;
    let u = class_basis(&mut substream(seed, "layered/basis"), cfg.dim, n_classes);
    let profile = signal_profile(cfg);
    let vocabulary: Vec<String> = (0..n_classes).map(class_name).collect();
    let mut sets: Vec<StackSet> = SplitName::ALL
        .iter()
        .map(|&split| StackSet {
            split,
            task: TaskKind::MultiClass,
            vocabulary: vocabulary.clone(),
            tap: Tap::Eob,
            ids: Vec::new(),
            labels: Vec::new(),
            stacks: Vec::new(),
        })
        .collect();
    for i in 0..cfg.samples {
        let y = i % n_classes;
        let mut rng = substream(seed, &format!("layered/sample/{i}"));
        let x = crate::rng::trunc_normal(&mut rng, &[cfg.tokens, cfg.dim], 1.0);
        let stack = encoder.forward_full(&x, None, Dtype::F64)?.eob;
        let mut patch = stack.patch.clone();
        let mut cls = stack.cls.clone();
        for (l, &s) in profile.iter().enumerate() {
            let shared: Vec<f64> = (0..n_classes).map(|_| cfg.sample_noise * rng.sample::<f64, _>(StandardNormal)).collect();
            let rewrite = |row: &mut [f64], rng: &mut Rng| {
                let h = nalgebra::DVector::from_column_slice(row);
                let coeff = u.transpose() * &h;
                let code = nalgebra::DVector::from_fn(n_classes, |c, _| {
                    let token: f64 = rng.sample(StandardNormal);
                    shared[c] + cfg.token_noise * token + if c == y { s } else { 0.0 }
                });
                let out = h - &u * coeff + &u * code;
                row.copy_from_slice(out.as_slice());
            };
            let n = cfg.tokens * cfg.dim;
            for row in patch.data_mut()[l * n..(l + 1) * n].chunks_mut(cfg.dim) {
                rewrite(row, &mut rng);
            }
            rewrite(cls.row_mut(l), &mut rng);
        }
        let stack = LayerStack::new(patch.rounded(Dtype::F32), cls.rounded(Dtype::F32), Tap::Eob)?;
        let set = &mut sets[split_of(i, cfg.samples) as usize];
        set.ids.push(format!("layered{i:05}"));
        set.labels.push(vec![class_name(y)]);
        set.stacks.push(stack);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_clips: 12,
            n_classes: 4,
            min_seconds: 0.5,
            max_seconds: 1.5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = synth_dataset(a.path(), 3, &small()).unwrap();
        let mb = synth_dataset(b.path(), 3, &small()).unwrap();
        assert_eq!(ma, mb);
        for r in &ma.records {
            assert_eq!(std::fs::read(a.path().join(&r.path)).unwrap(), std::fs::read(b.path().join(&r.path)).unwrap());
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.json")).unwrap(),
            std::fs::read(b.path().join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn clips_respect_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(dir.path(), 1, &small()).unwrap();
        assert_eq!(m.vocabulary.len(), 4);
        for (i, r) in m.records.iter().enumerate() {
            let spec = r.synth.as_ref().unwrap();
            assert!((0.5..=1.5).contains(&spec.seconds));
            assert!(r.labels.contains(&class_name(i % 4)));
            let w = crate::frontend::load_audio(&dir.path().join(&r.path), CANONICAL_SAMPLE_RATE).unwrap();
            assert_eq!(w.samples.len(), (spec.seconds * 16000.0).round() as usize);
            assert!(w.samples.iter().all(|v| v.abs() <= 0.91));
        }
    }

    #[test]
    fn profile_peaks_at_the_designated_layer() {
        let cfg = LayeredConfig::default();
        let p = signal_profile(&cfg);
        assert_eq!(p.len(), 6);
        assert_eq!(p[3], 4.0);
        assert_eq!((p[0], p[5]), (0.0, 0.0));
        assert!(p[2] < p[3] && p[4] < p[3] && p[1] < p[2]);
    }

    #[test]
    fn splits_are_contiguous_and_cover_all() {
        let n = 20;
        let s: Vec<SplitName> = (0..n).map(|i| split_of(i, n)).collect();
        assert_eq!(s.iter().filter(|&&x| x == SplitName::Train).count(), 14);
        assert_eq!(s.iter().filter(|&&x| x == SplitName::Valid).count(), 3);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }
}
