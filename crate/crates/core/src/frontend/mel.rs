use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FrameParams, MelSpec, PipelineTag, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const POWER_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_fft: 1024,
            win_length: 400,
            hop: 160,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl MelConfig {
    pub(crate) fn frame_params(&self, sample_rate: u32) -> FrameParams {
        FrameParams {
            sample_rate,
            n_fft: self.n_fft,
            win_length: self.win_length,
            hop: self.hop,
            n_mels: self.n_mels,
        }
    }

    pub(crate) fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.win_length == 0 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::Param("window, hop and mel count must be positive".into()));
        }
        if self.win_length > self.n_fft {
            return Err(Error::Param(format!(
                "window {} exceeds n_fft {}",
                self.win_length, self.n_fft
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if self.f_max > nyquist {
            return Err(Error::Param(format!("f_max {} exceeds Nyquist {nyquist}", self.f_max)));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return Err(Error::Param(format!("bad band [{}, {}]", self.f_min, self.f_max)));
        }
        Ok(())
    }

    /// `1 + floor((n − win) / hop)`, or `None` when `n < win`.
    pub fn num_frames(&self, num_samples: usize) -> Option<usize> {
        (num_samples >= self.win_length).then(|| 1 + (num_samples - self.win_length) / self.hop)
    }
}

pub(crate) fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub(crate) fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-scale triangular filters, `n_freqs × n_mels`, unnormalized peaks of 1.
pub fn mel_filterbank(n_freqs: usize, f_min: f64, f_max: f64, n_mels: usize, sample_rate: u32) -> Tensor {
    let nyquist = sample_rate as f64 / 2.0;
    let freqs: Vec<f64> = (0..n_freqs)
        .map(|i| nyquist * i as f64 / (n_freqs - 1).max(1) as f64)
        .collect();
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(&[n_freqs, n_mels]);
    for (i, &f) in freqs.iter().enumerate() {
        for m in 0..n_mels {
            let down = (f - pts[m]) / (pts[m + 1] - pts[m]);
            let up = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
            fb.row_mut(i)[m] = down.min(up).max(0.0);
        }
    }
    fb
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrum of each frame after `prepare` shapes the windowed samples.
/// Returns `T × (n_fft/2 + 1)`.
pub(crate) fn power_frames(
    samples: &[f64],
    cfg: &MelConfig,
    window: &[f64],
    prepare: impl Fn(&mut [f64]),
) -> Result<Tensor> {
    let t = cfg
        .num_frames(samples.len())
        .ok_or_else(|| Error::EmptyInput(format!("{} samples is shorter than one window", samples.len())))?;
    let n_freqs = cfg.n_fft / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let mut out = Tensor::zeros(&[t, n_freqs]);
    let mut frame = vec![0.0; cfg.win_length];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for i in 0..t {
        frame.copy_from_slice(&samples[i * cfg.hop..i * cfg.hop + cfg.win_length]);
        prepare(&mut frame);
        for (j, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if j < frame.len() { frame[j] * window[j] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (o, c) in out.row_mut(i).iter_mut().zip(&buf[..n_freqs]) {
            *o = c.norm_sqr();
        }
    }
    Ok(out)
}

/// Power mel spectrogram (no pre-emphasis, no dither).
pub fn mel_spectrogram(wave: &Waveform, cfg: &MelConfig) -> Result<MelSpec> {
    cfg.validate(wave.sample_rate)?;
    let power = power_frames(&wave.samples, cfg, &hann(cfg.win_length), |_| {})?;
    let fb = mel_filterbank(cfg.n_fft / 2 + 1, cfg.f_min, cfg.f_max, cfg.n_mels, wave.sample_rate);
    let values = power.matmul(&fb)?.map(|v| v.max(0.0));
    Ok(MelSpec {
        values,
        tag: PipelineTag::PowerMel,
        frame: cfg.frame_params(wave.sample_rate),
    })
}

/// `10·log10(max(v, 1e−10))` relative to the clip's own maximum, clamped to
/// `[−top_db, 0]`.
pub fn db_compress(mel: &MelSpec, top_db: f64) -> MelSpec {
    let db = mel.values.map(|v| 10.0 * v.max(POWER_FLOOR).log10());
    let reference = db.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top_db = top_db.max(0.0);
    MelSpec {
        values: db.map(|v| (v - reference).max(-top_db)),
        tag: PipelineTag::Decibel { top_db },
        frame: mel.frame,
    }
}

/// Per-clip rescale to [0, 1]; a constant input maps to zeros.
pub fn minmax_normalize(mel: &MelSpec) -> MelSpec {
    let d = mel.values.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        mel.values.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    } else {
        Tensor::zeros(mel.values.shape())
    };
    MelSpec {
        values,
        tag: PipelineTag::Modern,
        frame: mel.frame,
    }
}

pub fn modern_frontend(wave: &Waveform, cfg: &MelConfig, top_db: f64) -> Result<MelSpec> {
    let mel = mel_spectrogram(wave, cfg)?;
    Ok(minmax_normalize(&db_compress(&mel, top_db)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform {
            samples,
            sample_rate: 16_000,
            source_id: "t".into(),
        }
    }

    fn sine(freq: f64, n: usize) -> Waveform {
        wave((0..n).map(|i| (2.0 * PI * freq * i as f64 / 16_000.0).sin()).collect())
    }

    fn spec(values: Tensor) -> MelSpec {
        MelSpec {
            values,
            tag: PipelineTag::PowerMel,
            frame: MelConfig::default().frame_params(16_000),
        }
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MelConfig::default();
        for n in [400, 401, 559, 560, 16_000, 160_000] {
            let m = mel_spectrogram(&sine(300.0, n), &cfg).unwrap();
            assert_eq!(m.frames(), 1 + (n - 400) / 160);
            assert_eq!(m.bins(), 128);
        }
        assert!(mel_spectrogram(&sine(300.0, 399), &cfg).is_err());
        assert!(MelConfig::default().num_frames(160_000).unwrap() >= 998);
    }

    #[test]
    fn sine_peaks_in_its_mel_bin() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&sine(440.0, 16_000), &cfg).unwrap();
        // analytic: the filter whose triangle has the largest weight at 440 Hz
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(8000.0));
        let step = (hi - lo) / 129.0;
        let m440 = hz_to_mel(440.0);
        let expected = (0..128)
            .max_by(|&a, &b| {
                let w = |i: usize| 1.0 - ((m440 - (lo + step * (i + 1) as f64)).abs() / step);
                w(a).total_cmp(&w(b))
            })
            .unwrap();
        for t in 0..m.frames() {
            assert_eq!(crate::metrics::argmax(m.values.row(t)), expected, "frame {t}");
        }
    }

    #[test]
    fn silence_and_noise() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&wave(vec![0.0; 4000]), &cfg).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = wave((0..16_000).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let m = mel_spectrogram(&noise, &cfg).unwrap();
        assert!(m.values.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn f_max_above_nyquist_is_rejected() {
        let cfg = MelConfig {
            f_max: 8001.0,
            ..MelConfig::default()
        };
        assert!(matches!(mel_spectrogram(&sine(1.0, 1000), &cfg), Err(Error::Param(_))));
    }

    #[test]
    fn db_cases() {
        let m = spec(Tensor::matrix(2, 2, vec![1.0, 100.0, 10.0, 50.0]).unwrap());
        let d = db_compress(&m, 80.0);
        let (lo, hi) = d.values.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((hi - lo - 20.0).abs() < 1e-12);
        assert_eq!(hi, 0.0);

        let e = db_compress(&spec(Tensor::full(&[3, 2], 7.0)), 80.0);
        assert!(e.values.data().iter().all(|&v| v == e.values.data()[0]));

        let z = db_compress(&spec(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()), 80.0);
        assert_eq!(z.values.data(), &[-80.0, 0.0]);
    }

    #[test]
    fn minmax_cases() {
        let m = spec(Tensor::matrix(2, 2, vec![0.0, 10.0, 5.0, 10.0]).unwrap());
        assert_eq!(minmax_normalize(&m).values.data(), &[0.0, 1.0, 0.5, 1.0]);
        let c = minmax_normalize(&spec(Tensor::full(&[2, 3], -4.0)));
        assert!(c.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modern_output_spans_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = wave((0..8000).map(|i| (i as f64 * 0.05).sin() * rng.gen_range(0.0..1.0)).collect());
        let m = modern_frontend(&w, &MelConfig::default(), 80.0).unwrap();
        let d = m.values.data();
        assert_eq!(d.iter().copied().fold(f64::MAX, f64::min), 0.0);
        assert_eq!(d.iter().copied().fold(f64::MIN, f64::max), 1.0);
        assert_eq!(m.tag, PipelineTag::Modern);
        assert_eq!(modern_frontend(&w, &MelConfig::default(), 80.0).unwrap(), m);
    }
}
