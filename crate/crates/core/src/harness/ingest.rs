use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frontend::{load_audio, patchify, MelSpec, CANONICAL_SAMPLE_RATE};
use crate::numerics::Tensor;

use super::config::RunConfig;
use super::container::Container;
use super::manifest::{Manifest, SplitName};

pub const CACHE_ENV: &str = "BATLAB_CACHE_DIR";

/// `$BATLAB_CACHE_DIR` if set, otherwise `fallback`.
pub fn cache_dir(fallback: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| fallback.to_path_buf())
}

/// Featurized clip: its patch sequence over the configured crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurized {
    pub id: String,
    pub split: SplitName,
    pub patches: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestError {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    /// Successful records, in manifest order.
    pub items: Vec<Featurized>,
    pub featurized: usize,
    pub cache_hits: usize,
    pub errors: Vec<IngestError>,
}

impl IngestReport {
    pub fn split(&self, s: SplitName) -> Vec<&Featurized> {
        self.items.iter().filter(|f| f.split == s).collect()
    }
}

/// Hash of everything the cached features depend on.
pub fn cache_key(cfg: &RunConfig, audio: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(b"batlab-features-v1\0");
    h.update(serde_json::to_vec(&cfg.frontend).expect("frontend serializes"));
    h.update(cfg.data.crop_frames.to_le_bytes());
    h.update(cfg.data.patch.to_le_bytes());
    h.update(Sha256::digest(audio));
    hex::encode(h.finalize())
}

/// Leading `frames` rows of `mel`, zero-padded when the clip is shorter.
pub fn crop_frames(mel: &MelSpec, frames: usize) -> MelSpec {
    let f = mel.bins();
    let keep = mel.frames().min(frames);
    let mut data = mel.values.data()[..keep * f].to_vec();
    data.resize(frames * f, 0.0);
    MelSpec {
        values: Tensor::matrix(frames, f, data).expect("frames×bins"),
        tag: mel.tag.clone(),
        frame: mel.frame,
    }
}

/// Audio file → frontend → crop → patches.
pub fn featurize(path: &Path, cfg: &RunConfig) -> Result<Tensor> {
    let wave = load_audio(path, CANONICAL_SAMPLE_RATE)?;
    let mel = cfg.frontend.run(&wave)?;
    Ok(patchify(&crop_frames(&mel, cfg.data.crop_frames), cfg.data.patch)?.patches)
}

/// Featurizes every record through a content-addressed cache. Failures are
/// collected per record and do not stop the run.
pub fn ingest(manifest: &Manifest, manifest_dir: &Path, cfg: &RunConfig, cache: &Path) -> Result<IngestReport> {
    std::fs::create_dir_all(cache)?;
    let mut report = IngestReport::default();
    for r in &manifest.records {
        let path = manifest.resolve(manifest_dir, r);
        let outcome = (|| -> Result<(Tensor, bool)> {
            let audio = std::fs::read(&path)?;
            let entry = cache.join(format!("{}.batl", cache_key(cfg, &audio)));
            if entry.exists() {
                if let Ok(mut c) = Container::read(&entry) {
                    if let Some(t) = c.take("patches") {
                        return Ok((t, true));
                    }
                }
                log::warn!("unreadable cache entry {}; recomputing", entry.display());
            }
            let patches = featurize(&path, cfg)?;
            let mut c = Container::new(json!({"kind": "features", "source": r.path, "grid": cfg.encoder_config().grid}));
            c.push("patches", patches.clone());
            c.write(&entry)?;
            // read back what later runs will see
            Ok((patches.rounded(crate::numerics::Dtype::F32), false))
        })();
        match outcome {
            Ok((patches, hit)) => {
                if hit {
                    report.cache_hits += 1;
                } else {
                    report.featurized += 1;
                }
                report.items.push(Featurized {
                    id: r.id.clone(),
                    split: r.split,
                    patches,
                });
            }
            Err(e) => {
                let message = match &e {
                    Error::Io(io) => format!("{}: {io}", path.display()),
                    other => other.to_string(),
                };
                log::warn!("ingest failed for `{}`: {message}", r.id);
                report.errors.push(IngestError {
                    id: r.id.clone(),
                    message,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{FrontendConfig, MelConfig};
    use crate::harness::config::SynthConfig;
    use crate::harness::synth::synth_dataset;

    fn cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.frontend = FrontendConfig::Modern {
            mel: MelConfig {
                n_mels: 32,
                ..MelConfig::default()
            },
            top_db: 80.0,
        };
        c.data.crop_frames = 48;
        c.data.patch = 16;
        c
    }

    fn corpus(dir: &Path, n: usize) -> Manifest {
        let s = SynthConfig {
            n_clips: n,
            min_seconds: 0.3,
            max_seconds: 0.8,
            ..SynthConfig::default()
        };
        synth_dataset(dir, 0, &s).unwrap()
    }

    #[test]
    fn warm_cache_featurizes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 5);
        let cache = dir.path().join("cache");
        let first = ingest(&m, dir.path(), &cfg(), &cache).unwrap();
        assert_eq!((first.featurized, first.cache_hits), (5, 0));
        assert_eq!(first.items[0].patches.shape(), &[6, 256]);
        let second = ingest(&m, dir.path(), &cfg(), &cache).unwrap();
        assert_eq!((second.featurized, second.cache_hits), (0, 5));
        assert_eq!(first.items, second.items);
    }

    #[test]
    fn one_corrupt_file_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path(), 10);
        std::fs::write(dir.path().join(&m.records[4].path), b"RIFF....garbage").unwrap();
        let r = ingest(&m, dir.path(), &cfg(), &dir.path().join("cache")).unwrap();
        assert_eq!(r.items.len(), 9);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].id, m.records[4].id);
        let mut missing = m.clone();
        missing.records[0].path = "nope.wav".into();
        let r = ingest(&missing, dir.path(), &cfg(), &dir.path().join("cache")).unwrap();
        assert!(r.errors.iter().any(|e| e.id == m.records[0].id && e.message.contains("nope.wav")));
    }

    #[test]
    fn key_tracks_frontend_config() {
        let audio = b"same bytes";
        let a = cfg();
        let mut b = cfg();
        if let FrontendConfig::Modern { top_db, .. } = &mut b.frontend {
            *top_db = 60.0;
        }
        assert_ne!(cache_key(&a, audio), cache_key(&b, audio));
        let mut c = cfg();
        c.data.crop_frames = 64;
        assert_ne!(cache_key(&a, audio), cache_key(&c, audio));
        assert_eq!(cache_key(&a, audio), cache_key(&cfg(), audio));
        assert_ne!(cache_key(&a, audio), cache_key(&a, b"other"));
    }

    #[test]
    fn crop_pads_and_truncates() {
        let mel = MelSpec {
            values: Tensor::matrix(3, 2, vec![1.0; 6]).unwrap(),
            tag: crate::frontend::PipelineTag::PowerMel,
            frame: crate::frontend::FrameParams {
                sample_rate: 16000,
                n_fft: 1024,
                win_length: 400,
                hop: 160,
                n_mels: 2,
            },
        };
        assert_eq!(crop_frames(&mel, 5).values.data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(crop_frames(&mel, 2).values.shape(), &[2, 2]);
    }
}
