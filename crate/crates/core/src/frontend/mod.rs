//! Audio loading and the two spectrogram pipelines: modern (power mel, dB,
//! per-clip min-max) and legacy (log filterbank with dataset-level
//! standardization), plus patch extraction.

mod audio;
mod legacy;
mod mel;
mod patch;

use serde::{Deserialize, Serialize};

pub use audio::{load_audio, resample, write_wav};
pub use legacy::{legacy_frontend, log_fbank, LegacyConfig};
pub use mel::{db_compress, mel_filterbank, mel_spectrogram, minmax_normalize, modern_frontend, MelConfig};
pub use patch::{patchify, unpatchify, PatchSequence};

use crate::numerics::Tensor;

pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
}

/// Processing history of a spectrogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineTag {
    PowerMel,
    Decibel { top_db: f64 },
    Modern,
    LogFbank,
    Legacy { mean: f64, std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop: usize,
    pub n_mels: usize,
}

/// A T×F spectrogram (time frames by mel bins).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    pub values: Tensor,
    pub tag: PipelineTag,
    pub frame: FrameParams,
}

impl MelSpec {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }
}

/// Frontend selection as it appears in run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrontendConfig {
    Modern {
        #[serde(default)]
        mel: MelConfig,
        #[serde(default = "default_top_db")]
        top_db: f64,
    },
    Legacy {
        #[serde(default)]
        legacy: LegacyConfig,
        mean: f64,
        std: f64,
    },
}

fn default_top_db() -> f64 {
    80.0
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig::Modern {
            mel: MelConfig::default(),
            top_db: default_top_db(),
        }
    }
}

impl FrontendConfig {
    pub fn run(&self, wave: &Waveform) -> crate::Result<MelSpec> {
        match self {
            FrontendConfig::Modern { mel, top_db } => modern_frontend(wave, mel, *top_db),
            FrontendConfig::Legacy { legacy, mean, std } => legacy_frontend(wave, *mean, *std, legacy),
        }
    }
}
