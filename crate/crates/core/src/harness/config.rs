use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Tap};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::pretrain::PretrainConfig;
use crate::probe::ProbeConfig;

use super::container::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub gated: bool,
    pub ln_eps: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            gated: true,
            ln_eps: 1e-6,
        }
    }
}

/// How spectrograms become fixed-size patch sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Leading frames kept per clip; shorter clips are zero-padded.
    pub crop_frames: usize,
    /// Patch side k.
    pub patch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            crop_frames: 1024,
            patch: 16,
        }
    }
}

/// Frozen-random-encoder task with class information at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayeredConfig {
    pub samples: usize,
    pub layers: usize,
    pub dim: usize,
    pub tokens: usize,
    pub heads: usize,
    /// Defaults to `layers / 2`; must leave at least one layer above it.
    pub designated: Option<usize>,
    /// Class-code amplitude at the designated layer.
    pub signal: f64,
    /// Per-sample noise inside the class subspace (survives token pooling).
    pub sample_noise: f64,
    /// Per-token noise inside the class subspace.
    pub token_noise: f64,
}

impl Default for LayeredConfig {
    fn default() -> Self {
        LayeredConfig {
            samples: 2000,
            layers: 6,
            dim: 32,
            tokens: 16,
            heads: 4,
            designated: None,
            signal: 4.0,
            sample_noise: 1.0,
            token_noise: 1.0,
        }
    }
}

impl LayeredConfig {
    pub fn designated_layer(&self) -> usize {
        self.designated.unwrap_or(self.layers / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub n_classes: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub layered: bool,
    pub layered_task: LayeredConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clips: 512,
            n_classes: 4,
            min_seconds: 1.0,
            max_seconds: 10.0,
            layered: false,
            layered_task: LayeredConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Block intermediate written to the stacks.
    pub tap: Tap,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { tap: Tap::Eob }
    }
}

/// One experiment, end to end. Saved copies always carry every field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub data: DataConfig,
    pub encoder: EncoderSpec,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub synth: SynthConfig,
    pub embed: EmbedConfig,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Extra prototype counts for a CGP sweep during `probe`.
    pub k_sweep: Vec<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn n_mels(&self) -> usize {
        match &self.frontend {
            FrontendConfig::Modern { mel, .. } => mel.n_mels,
            FrontendConfig::Legacy { legacy, .. } => legacy.mel.n_mels,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let k = self.data.patch;
        EncoderConfig {
            depth: self.encoder.depth,
            dim: self.encoder.dim,
            heads: self.encoder.heads,
            mlp_ratio: self.encoder.mlp_ratio,
            gated: self.encoder.gated,
            patch_dim: k * k,
            grid: (self.data.crop_frames / k.max(1), self.n_mels() / k.max(1)),
            ln_eps: self.encoder.ln_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.data.patch;
        if k == 0 || self.data.crop_frames == 0 || self.data.crop_frames % k != 0 || self.n_mels() % k != 0 {
            return Err(Error::Config(format!(
                "crop_frames ({}) and n_mels ({}) must be positive multiples of the patch size ({k})",
                self.data.crop_frames,
                self.n_mels()
            )));
        }
        self.encoder_config().validate()?;
        self.pretrain.validate()?;
        self.pretrain.decoder.validate(self.encoder.dim)?;
        self.probe.validate()?;
        let s = &self.synth;
        if s.n_classes == 0 || !(s.min_seconds > 0.0) || s.max_seconds < s.min_seconds {
            return Err(Error::Config("synth needs n_classes >= 1 and 0 < min_seconds <= max_seconds".into()));
        }
        let l = &s.layered_task;
        if l.layers < 2 || l.designated_layer() + 1 >= l.layers || l.dim < s.n_classes || l.tokens == 0 {
            return Err(Error::Config(format!(
                "layered task needs a designated layer below the last of {} layers and dim >= classes",
                l.layers
            )));
        }
        if self.k_sweep.contains(&0) {
            return Err(Error::Config("k_sweep entries must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.encoder_config().grid, (64, 8));
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"pretrain": {"stepz": 3}}"#,
            r#"{"probe": {"k": 4, "temperature": 1}}"#,
            r#"{"frontend": {"kind": "modern", "mel": {"n_mel": 64}}}"#,
            r#"{"pretrain": {"decoder": {"kind": "vit", "width": 3}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn echo_contains_every_default() {
        let cfg = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        let v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        for key in ["seed", "frontend", "data", "encoder", "pretrain", "probe", "synth", "embed", "checkpoint_every", "k_sweep"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["probe"]["k"], 10000);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn inconsistent_sizes_are_config_errors() {
        assert!(RunConfig::from_json(r#"{"data": {"crop_frames": 100}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"encoder": {"dim": 30, "heads": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"synth": {"layered_task": {"layers": 4, "designated": 3}}}"#).is_err());
    }
}
