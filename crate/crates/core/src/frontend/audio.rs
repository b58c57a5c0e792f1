use std::f64::consts::PI;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side of the output instant.
const SINC_ZEROS: f64 = 16.0;
/// Fraction of the lower Nyquist frequency kept by the anti-aliasing filter.
const ROLLOFF: f64 = 0.95;

fn format_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io)
            if matches!(io.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied) =>
        {
            Error::Io(io)
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a PCM WAV (8/16/24/32-bit int or 32-bit float), averages channels,
/// resamples to `target_sr` and scales down if the peak exceeds 1.
pub fn load_audio(path: &Path, target_sr: u32) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| format_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if !(8..=32).contains(&spec.bits_per_sample) {
                return Err(Error::Format(format!(
                    "{}: unsupported bit depth {}",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format_err(path, e))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, e))?,
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no samples", path.display())));
    }
    if interleaved.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("{}: non-finite sample", path.display())));
    }
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let mut samples = if spec.sample_rate == target_sr {
        mono
    } else {
        resample(&mono, spec.sample_rate, target_sr)
    };
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Waveform {
        samples,
        sample_rate: target_sr,
        source_id: path.display().to_string(),
    })
}

/// Band-limited resampling with a Hann-windowed sinc kernel. The output has
/// `round(len · to / from)` samples.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let cutoff = ROLLOFF * ratio.min(1.0);
    let half = (SINC_ZEROS / cutoff).ceil() as i64;
    let n_out = (x.len() as f64 * ratio).round() as usize;
    let n = x.len() as i64;
    (0..n_out)
        .map(|i| {
            let t = i as f64 / ratio;
            let center = t.floor() as i64;
            let mut acc = 0.0;
            for j in (center - half).max(0)..=(center + half + 1).min(n - 1) {
                let d = t - j as f64;
                let u = d / (half as f64 + 1.0);
                if u.abs() >= 1.0 {
                    continue;
                }
                let window = 0.5 * (1.0 + (PI * u).cos());
                let arg = cutoff * d;
                let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                acc += x[j as usize] * cutoff * sinc * window;
            }
            acc
        })
        .collect()
}

/// Writes a mono 16-bit PCM WAV; samples are clamped to [−1, 1].
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| format_err(path, e))?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(q).map_err(|e| format_err(path, e))?;
    }
    w.finalize().map_err(|e| format_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: hound::WavSpec, frames: &[Vec<f64>]) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for f in frames {
            for &s in f {
                match spec.sample_format {
                    hound::SampleFormat::Float => w.write_sample(s as f32).unwrap(),
                    hound::SampleFormat::Int => {
                        let scale = ((1i64 << (spec.bits_per_sample - 1)) - 1) as f64;
                        w.write_sample((s * scale).round() as i32).unwrap()
                    }
                }
            }
        }
        w.finalize().unwrap();
    }

    fn spec(ch: u16, sr: u32, bits: u16, fmt: hound::SampleFormat) -> hound::WavSpec {
        hound::WavSpec {
            channels: ch,
            sample_rate: sr,
            bits_per_sample: bits,
            sample_format: fmt,
        }
    }

    /// Magnitude of the DFT of `x` at `freq` Hz, computed directly.
    fn dft_mag(x: &[f64], sr: f64, freq: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &v) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * n as f64 / sr;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn passthrough_at_target_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f64> = (0..160_000).map(|i| ((i % 97) as f64 / 97.0) - 0.5).collect();
        write_raw(&p, spec(1, 16_000, 16, hound::SampleFormat::Int), &[x.clone()]);
        let w = load_audio(&p, 16_000).unwrap();
        assert_eq!(w.samples.len(), 160_000);
        let err = w.samples.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1.0 / 32768.0 + 1e-12, "{err}");
    }

    #[test]
    fn ratio_sets_length() {
        let y = resample(&vec![0.1; 320_000], 32_000, 16_000);
        assert!((y.len() as i64 - 160_000).abs() <= 1);
    }

    #[test]
    fn resampled_sine_keeps_its_frequency() {
        let x: Vec<f64> = (0..48_000).map(|i| (2.0 * PI * 440.0 * i as f64 / 48_000.0).sin() * 0.8).collect();
        let y = resample(&x, 48_000, 16_000);
        // one second at 16 kHz gives 1 Hz bins; scan ±20 bins around 440
        let seg = &y[2000..14000];
        let sr = 16_000.0;
        let bin = sr / seg.len() as f64;
        let mut best = (0.0, 0.0);
        for k in -20..=20 {
            let f = 440.0 + k as f64 * bin;
            let m = dft_mag(seg, sr, f);
            if m > best.1 {
                best = (f, m);
            }
        }
        assert!((best.0 - 440.0).abs() <= bin, "peak at {}", best.0);
        // amplitude preserved in the passband
        let peak = seg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.8).abs() < 0.01, "{peak}");
    }

    #[test]
    fn stereo_and_formats() {
        let dir = tempfile::tempdir().unwrap();
        for (bits, fmt) in [
            (8, hound::SampleFormat::Int),
            (16, hound::SampleFormat::Int),
            (24, hound::SampleFormat::Int),
            (32, hound::SampleFormat::Float),
        ] {
            let p = dir.path().join(format!("s{bits}.wav"));
            let frames: Vec<Vec<f64>> = (0..100).map(|_| vec![0.5, -0.25]).collect();
            let mut flat = Vec::new();
            frames.iter().for_each(|f| flat.extend_from_slice(f));
            write_raw(&p, spec(2, 16_000, bits, fmt), &[flat]);
            let w = load_audio(&p, 16_000).unwrap();
            assert_eq!(w.samples.len(), 100);
            assert!((w.samples[0] - 0.125).abs() < 0.01, "{bits}: {}", w.samples[0]);
        }
    }

    #[test]
    fn float_peak_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loud.wav");
        write_raw(&p, spec(1, 16_000, 32, hound::SampleFormat::Float), &[vec![0.5, -2.0, 1.0]]);
        let w = load_audio(&p, 16_000).unwrap();
        assert_eq!(w.samples, vec![0.25, -1.0, 0.5]);
    }

    #[test]
    fn bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.wav");
        std::fs::write(&p, b"RIFFnope").unwrap();
        let r = load_audio(&p, 16_000);
        assert!(matches!(r, Err(Error::Format(_))), "{r:?}");
        let e = dir.path().join("empty.wav");
        write_raw(&e, spec(1, 16_000, 16, hound::SampleFormat::Int), &[]);
        assert!(matches!(load_audio(&e, 16_000), Err(Error::EmptyInput(_))));
    }
}
