//! Log-mel spectrogram featurization for raw waveforms.
//!
//! A clip is windowed with a Hamming window (25 ms every 10 ms by default),
//! each frame is transformed with a real DFT, magnitudes pass a triangular
//! mel filterbank (HTK scale), and the natural log is taken with a floor.
//! The time axis is right-padded with the log floor (or truncated) to a fixed
//! frame count, giving a fixed 64x512 grid per 5 s clip at default settings.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MelConfig {
    pub mel_bins: usize,
    pub target_frames: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            mel_bins: 64,
            target_frames: 512,
            window_ms: 25.0,
            hop_ms: 10.0,
            log_floor: 1e-10,
        }
    }
}

/// Mel bins x time frames, always exactly `mel_bins x target_frames`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub values: Tensor,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each triangular filter.
pub fn mel_center_frequencies(mel_bins: usize, sample_rate: f64) -> Vec<f64> {
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(sample_rate / 2.0);
    (1..=mel_bins)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel_bins + 1) as f64))
        .collect()
}

/// Triangular filterbank over `n_bins` DFT magnitude bins.
fn mel_filterbank(mel_bins: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let bin_hz = sample_rate / n_fft as f64;
    let mut filters = vec![vec![0.0; n_bins]; mel_bins];
    for m in 0..mel_bins {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for (k, f) in filters[m].iter_mut().enumerate() {
            let hz = k as f64 * bin_hz;
            if hz > left && hz < center {
                *f = (hz - left) / (center - left);
            } else if hz >= center && hz < right {
                *f = (right - hz) / (right - center);
            }
        }
    }
    filters
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Magnitudes of the real DFT (bins 0..=n/2) of one windowed frame.
fn dft_magnitudes(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let mut out = Vec::with_capacity(n / 2 + 1);
    for k in 0..=n / 2 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &x) in frame.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * k as f64 * t as f64 / n as f64;
            re += x * ang.cos();
            im += x * ang.sin();
        }
        out.push((re * re + im * im).sqrt());
    }
    out
}

/// Log-mel spectrogram of one clip.
pub fn mel_spectrogram(waveform: &[f64], sample_rate: f64, cfg: &MelConfig) -> Result<Spectrogram> {
    if sample_rate <= 0.0 {
        return Err(Error::Input(format!("sample rate {sample_rate} must be positive")));
    }
    let win = (cfg.window_ms * 1e-3 * sample_rate).round() as usize;
    let hop = (cfg.hop_ms * 1e-3 * sample_rate).round() as usize;
    if win < 2 || hop == 0 {
        return Err(Error::Input("window/hop too short at this sample rate".into()));
    }
    if waveform.len() < win {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            waveform.len()
        )));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("waveform contains non-finite samples".into()));
    }

    let window = hamming(win);
    let filters = mel_filterbank(cfg.mel_bins, win, sample_rate);
    let n_frames = 1 + (waveform.len() - win) / hop;
    let floor_log = cfg.log_floor.ln();

    let mut values = vec![floor_log; cfg.mel_bins * cfg.target_frames];
    for f in 0..n_frames.min(cfg.target_frames) {
        let start = f * hop;
        let frame: Vec<f64> = (0..win).map(|i| waveform[start + i] * window[i]).collect();
        let mags = dft_magnitudes(&frame);
        for (m, filt) in filters.iter().enumerate() {
            let energy: f64 = filt.iter().zip(&mags).map(|(w, x)| w * x).sum();
            values[m * cfg.target_frames + f] = energy.max(cfg.log_floor).ln();
        }
    }
    Ok(Spectrogram {
        values: Tensor::new(vec![cfg.mel_bins, cfg.target_frames], values)?,
    })
}

/// Headerless little-endian f32 sample file.
pub fn read_waveform_f32le(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Input(format!(
            "waveform file {path:?} length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_waveform_f32le(path: &Path, samples: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(samples.len() * 4);
    for &s in samples {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_gives_uniform_log_floor() {
        let cfg = MelConfig::default();
        let wave = vec![0.0; 16_000 * 5];
        let spec = mel_spectrogram(&wave, 16_000.0, &cfg).unwrap();
        let expect = cfg.log_floor.ln();
        assert!(spec.values.data.iter().all(|&v| v == expect));
    }

    #[test]
    fn five_second_clip_is_64_by_512() {
        let cfg = MelConfig::default();
        let wave: Vec<f64> = (0..16_000 * 5).map(|i| (i as f64 * 0.01).sin()).collect();
        let spec = mel_spectrogram(&wave, 16_000.0, &cfg).unwrap();
        assert_eq!(spec.values.shape, vec![64, 512]);
    }

    #[test]
    fn pure_tone_peaks_at_nearest_mel_bin() {
        let cfg = MelConfig::default();
        let sr = 16_000.0;
        let freq = 440.0;
        let wave: Vec<f64> = (0..80_000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
            .collect();
        let spec = mel_spectrogram(&wave, sr, &cfg).unwrap();

        // Independent oracle: recompute filter center frequencies from the
        // HTK mel formulas directly and find the one nearest 440 Hz.
        let m = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let inv = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
        let (lo, hi) = (m(0.0), m(sr / 2.0));
        let centers: Vec<f64> = (1..=64)
            .map(|i| inv(lo + (hi - lo) * i as f64 / 65.0))
            .collect();
        let expected_bin = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - freq).abs().partial_cmp(&(b.1 - freq).abs()).unwrap()
            })
            .unwrap()
            .0;

        // Frames containing real signal: 498 of 512 (the rest are padding).
        let frames = 498;
        for f in 0..frames {
            let mut best = f64::NEG_INFINITY;
            let mut best_m = 0;
            for bin in 0..64 {
                let v = spec.values.data[bin * 512 + f];
                if v > best {
                    best = v;
                    best_m = bin;
                }
            }
            assert_eq!(best_m, expected_bin, "frame {f} peaked at wrong mel bin");
        }
    }

    #[test]
    fn too_short_waveform_is_an_input_error() {
        let cfg = MelConfig::default();
        let wave = vec![0.0; 100];
        assert!(matches!(
            mel_spectrogram(&wave, 16_000.0, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn waveform_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wave.f32le");
        let samples = vec![0.0, 0.5, -0.25, 1.0];
        write_waveform_f32le(&path, &samples).unwrap();
        assert_eq!(read_waveform_f32le(&path).unwrap(), samples);
    }
}
