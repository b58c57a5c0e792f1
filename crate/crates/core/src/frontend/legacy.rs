use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::mel::{hann, mel_filterbank, power_frames, MelConfig};
use super::{MelSpec, PipelineTag, Waveform};
use crate::error::{Error, Result};

/// Kaldi-style filterbank constants. None of these are fixed by any
/// reference pipeline we follow, so all are configurable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegacyConfig {
    pub mel: MelConfig,
    pub preemphasis: f64,
    pub remove_dc: bool,
    /// Hann raised to 0.85 (symmetric) instead of the periodic Hann.
    pub povey_window: bool,
    pub log_floor: f64,
}

impl Default for LegacyConfig {
    fn default() -> Self {
        LegacyConfig {
            mel: MelConfig {
                f_min: 20.0,
                ..MelConfig::default()
            },
            preemphasis: 0.97,
            remove_dc: true,
            povey_window: true,
            log_floor: f32::EPSILON as f64,
        }
    }
}

fn povey(n: usize) -> Vec<f64> {
    let denom = (n.max(2) - 1) as f64;
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos()).powf(0.85))
        .collect()
}

/// `ln(max(fbank, floor))` features before standardization.
pub fn log_fbank(wave: &Waveform, cfg: &LegacyConfig) -> Result<MelSpec> {
    let mc = &cfg.mel;
    mc.validate(wave.sample_rate)?;
    let window = if cfg.povey_window {
        povey(mc.win_length)
    } else {
        hann(mc.win_length)
    };
    let (remove_dc, pre) = (cfg.remove_dc, cfg.preemphasis);
    let power = power_frames(&wave.samples, mc, &window, |frame| {
        if remove_dc {
            let mean = frame.iter().sum::<f64>() / frame.len() as f64;
            frame.iter_mut().for_each(|v| *v -= mean);
        }
        if pre != 0.0 {
            for i in (1..frame.len()).rev() {
                frame[i] -= pre * frame[i - 1];
            }
            frame[0] -= pre * frame[0];
        }
    })?;
    let fb = mel_filterbank(mc.n_fft / 2 + 1, mc.f_min, mc.f_max, mc.n_mels, wave.sample_rate);
    let floor = cfg.log_floor;
    let values = power.matmul(&fb)?.map(|v| v.max(floor).ln());
    Ok(MelSpec {
        values,
        tag: PipelineTag::LogFbank,
        frame: mc.frame_params(wave.sample_rate),
    })
}

/// Log filterbank standardized with dataset-level scalars supplied by the caller.
pub fn legacy_frontend(wave: &Waveform, mean: f64, std: f64, cfg: &LegacyConfig) -> Result<MelSpec> {
    if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
        return Err(Error::Param(format!("legacy standardization needs std > 0, got mean {mean} std {std}")));
    }
    let raw = log_fbank(wave, cfg)?;
    Ok(MelSpec {
        values: raw.values.map(|v| (v - mean) / std),
        tag: PipelineTag::Legacy { mean, std },
        frame: raw.frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chirp() -> Waveform {
        Waveform {
            samples: (0..8000).map(|i| (i as f64 * i as f64 * 1e-5).sin() * 0.3).collect(),
            sample_rate: 16_000,
            source_id: "c".into(),
        }
    }

    #[test]
    fn identity_standardization_is_raw_log_fbank() {
        let cfg = LegacyConfig::default();
        let raw = log_fbank(&chirp(), &cfg).unwrap();
        let std = legacy_frontend(&chirp(), 0.0, 1.0, &cfg).unwrap();
        assert_eq!(raw.values, std.values);
        assert_eq!(std.tag, PipelineTag::Legacy { mean: 0.0, std: 1.0 });
    }

    #[test]
    fn different_stats_are_affine() {
        let cfg = LegacyConfig::default();
        let a = legacy_frontend(&chirp(), -4.0, 4.5, &cfg).unwrap();
        let b = legacy_frontend(&chirp(), 1.0, 2.0, &cfg).unwrap();
        // b = (a·4.5 − 4 − 1) / 2
        for (&x, &y) in a.values.data().iter().zip(b.values.data()) {
            assert!(((x * 4.5 - 4.0 - 1.0) / 2.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = LegacyConfig::default();
        let w = Waveform {
            samples: vec![0.0; 2000],
            sample_rate: 16_000,
            source_id: "s".into(),
        };
        let out = legacy_frontend(&w, 1.0, 2.0, &cfg).unwrap();
        let expected = (cfg.log_floor.ln() - 1.0) / 2.0;
        assert!(out.values.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn nonpositive_std_is_rejected() {
        let cfg = LegacyConfig::default();
        assert!(matches!(legacy_frontend(&chirp(), 0.0, 0.0, &cfg), Err(Error::Param(_))));
        assert!(matches!(legacy_frontend(&chirp(), 0.0, -1.0, &cfg), Err(Error::Param(_))));
    }
}
