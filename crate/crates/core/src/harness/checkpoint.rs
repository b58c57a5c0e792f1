//! Trainer checkpoints: one tensor container plus a JSON sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{OptimState, ParamStore};
use crate::pretrain::Trainer;

use super::config::RunConfig;
use super::container::{write_atomic, Container};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed besides the tensors. Masks and batches are drawn from
/// per-step substreams of `seed`, so the seed is the whole RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub code_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub step: u64,
    pub rng: String,
    pub lr_next: f64,
    pub teacher_step: u64,
    pub lambda_next: f64,
    pub encoder_opt_step: u64,
    pub decoder_opt_step: u64,
    pub container_sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn put_store(c: &mut Container, prefix: &str, store: &ParamStore) {
    for e in store.entries() {
        c.push(format!("{prefix}/{}", e.name), e.value.clone());
    }
}

fn put_opt(c: &mut Container, prefix: &str, store: &ParamStore, opt: &OptimState) {
    for (e, (m, v)) in store.entries().iter().zip(opt.m.iter().zip(&opt.v)) {
        c.push(format!("{prefix}.m/{}", e.name), m.clone());
        c.push(format!("{prefix}.v/{}", e.name), v.clone());
    }
}

fn take(c: &mut Container, name: &str, path: &Path) -> Result<crate::numerics::Tensor> {
    c.take(name).ok_or_else(|| Error::Container {
        path: path.to_path_buf(),
        detail: format!("missing tensor `{name}`"),
    })
}

fn fill_store(c: &mut Container, prefix: &str, store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut loaded = ParamStore::new();
    for e in store.entries() {
        loaded.add(e.name.clone(), take(c, &format!("{prefix}/{}", e.name), path)?, e.decay);
    }
    store.assign_from(&loaded)
}

fn fill_opt(c: &mut Container, prefix: &str, store: &ParamStore, opt: &mut OptimState, path: &Path) -> Result<()> {
    for (i, e) in store.entries().iter().enumerate() {
        for (kind, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let t = take(c, &format!("{prefix}.{kind}/{}", e.name), path)?;
            if t.shape() != dst.shape() {
                return Err(Error::shape("checkpoint", format!("`{prefix}.{kind}/{}` has shape {:?}", e.name, t.shape())));
            }
            *dst = t;
        }
    }
    Ok(())
}

pub fn checkpoint_container(trainer: &Trainer) -> Container {
    let mut c = Container::new(serde_json::json!({"kind": "checkpoint", "step": trainer.step}));
    put_store(&mut c, "encoder", &trainer.encoder.params);
    put_store(&mut c, "decoder", &trainer.decoder.params);
    put_store(&mut c, "teacher", &trainer.teacher.params);
    put_opt(&mut c, "opt.encoder", &trainer.encoder.params, &trainer.enc_opt);
    put_opt(&mut c, "opt.decoder", &trainer.decoder.params, &trainer.dec_opt);
    c
}

/// Writes `path` (tensors) and `path` with a `.json` extension (sidecar).
pub fn save_checkpoint(path: &Path, trainer: &Trainer, config: &RunConfig) -> Result<()> {
    let bytes = checkpoint_container(trainer).to_bytes()?;
    let sidecar = Sidecar {
        code_version: CODE_VERSION.into(),
        config: config.clone(),
        seed: trainer.seed,
        step: trainer.step,
        rng: "stateless per-step substreams of the seed".into(),
        lr_next: trainer.cfg.schedule().lr_at(trainer.step),
        teacher_step: trainer.teacher.step,
        lambda_next: trainer.teacher.lambda(),
        encoder_opt_step: trainer.enc_opt.step,
        decoder_opt_step: trainer.dec_opt.step,
        container_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp)?;
    serde_json::from_str(&text).map_err(|e| Error::Container {
        path: sp,
        detail: format!("bad sidecar: {e}"),
    })
}

/// Rebuilds a trainer exactly as saved. Nothing is returned unless every
/// tensor is present with the expected shape.
pub fn load_checkpoint(path: &Path) -> Result<(Trainer, RunConfig)> {
    let sidecar = read_sidecar(path)?;
    let bytes = std::fs::read(path)?;
    if hex::encode(Sha256::digest(&bytes)) != sidecar.container_sha256 {
        // validate the container itself first for a more specific error
        Container::from_bytes(&bytes, path)?;
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let mut c = Container::from_bytes(&bytes, path)?;
    let cfg = sidecar.config;
    cfg.validate()?;
    let mut t = Trainer::new(cfg.encoder_config(), cfg.pretrain.clone(), sidecar.seed)?;
    fill_store(&mut c, "encoder", &mut t.encoder.params, path)?;
    fill_store(&mut c, "decoder", &mut t.decoder.params, path)?;
    fill_store(&mut c, "teacher", &mut t.teacher.params, path)?;
    let enc_params = t.encoder.params.clone();
    fill_opt(&mut c, "opt.encoder", &enc_params, &mut t.enc_opt, path)?;
    let dec_params = t.decoder.params.clone();
    fill_opt(&mut c, "opt.decoder", &dec_params, &mut t.dec_opt, path)?;
    if !c.tensors.is_empty() {
        return Err(Error::Container {
            path: path.to_path_buf(),
            detail: format!("unexpected tensor `{}`", c.tensors[0].0),
        });
    }
    t.step = sidecar.step;
    t.teacher.step = sidecar.teacher_step;
    t.enc_opt.step = sidecar.encoder_opt_step;
    t.dec_opt.step = sidecar.decoder_opt_step;
    Ok((t, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::EncoderSpec;
    use crate::pretrain::{DecoderConfig, DecoderKind};
    use crate::rng::{substream, trunc_normal};

    pub(crate) fn toy_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.crop_frames = 32;
        cfg.data.patch = 16;
        cfg.frontend = crate::frontend::FrontendConfig::Modern {
            mel: crate::frontend::MelConfig {
                n_mels: 32,
                ..Default::default()
            },
            top_db: 80.0,
        };
        cfg.encoder = EncoderSpec {
            depth: 2,
            dim: 16,
            heads: 2,
            ..EncoderSpec::default()
        };
        cfg.pretrain.steps = 50;
        cfg.pretrain.batch_size = 2;
        cfg.pretrain.views = 2;
        cfg.pretrain.warmup_steps = 5;
        cfg.pretrain.collapse_every = 0;
        cfg.pretrain.mask = crate::pretrain::MaskConfig::Random { ratio: 0.5 };
        cfg.pretrain.decoder = DecoderConfig {
            kind: DecoderKind::Vit,
            depth: 1,
            heads: 2,
            ..DecoderConfig::default()
        };
        cfg
    }

    fn data() -> (Vec<String>, Vec<crate::numerics::Tensor>) {
        let d: Vec<_> = (0..6)
            .map(|i| trunc_normal(&mut substream(i, "x"), &[4, 256], 1.0).rounded(crate::numerics::Dtype::F32))
            .collect();
        ((0..6).map(|i| format!("s{i}")).collect(), d)
    }

    #[test]
    fn resume_reproduces_the_loss_trace() {
        let cfg = toy_config();
        let (ids, d) = data();
        let mut full = Trainer::new(cfg.encoder_config(), cfg.pretrain.clone(), 11).unwrap();
        let mut trace = Vec::new();
        full.run(&ids, &d, |_, r| {
            trace.push(r.loss.total);
            Ok(())
        })
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.batl");
        let mut first = Trainer::new(cfg.encoder_config(), cfg.pretrain.clone(), 11).unwrap();
        let mut resumed = Vec::new();
        first
            .run_until(25, &ids, &d, |_, r| {
                resumed.push(r.loss.total);
                Ok(())
            })
            .unwrap();
        save_checkpoint(&p, &first, &cfg).unwrap();
        let (mut second, back_cfg) = load_checkpoint(&p).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(second, first);
        second
            .run(&ids, &d, |_, r| {
                resumed.push(r.loss.total);
                Ok(())
            })
            .unwrap();
        assert_eq!(trace.len(), 50);
        assert_eq!(resumed, trace);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = toy_config();
        let (ids, d) = data();
        let mut t = Trainer::new(cfg.encoder_config(), cfg.pretrain.clone(), 2).unwrap();
        t.run_until(3, &ids, &d, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.batl"), dir.path().join("b.batl"));
        save_checkpoint(&a, &t, &cfg).unwrap();
        let (back, _) = load_checkpoint(&a).unwrap();
        save_checkpoint(&b, &back, &cfg).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(std::fs::read(sidecar_path(&a)).unwrap(), std::fs::read(sidecar_path(&b)).unwrap());
    }

    #[test]
    fn foreign_or_damaged_files_are_refused() {
        let cfg = toy_config();
        let t = Trainer::new(cfg.encoder_config(), cfg.pretrain.clone(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.batl");
        save_checkpoint(&p, &t, &cfg).unwrap();
        let good = std::fs::read(&p).unwrap();
        let mut foreign = good.clone();
        foreign[..4].copy_from_slice(b"XXXX");
        std::fs::write(&p, &foreign).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Container { .. })));
        std::fs::write(&p, &good[..good.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checksum(_))));
    }
}
