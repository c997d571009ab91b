//! Log-mel spectrogram front end (VGGish-style framing: 25 ms windows,
//! 10 ms hop, 64 HTK-mel bands between 125 and 7500 Hz, 96 frames per
//! segment).

use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::AudioClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub sample_rate_hz: u32,
    pub n_mels: usize,
    pub frames_per_segment: usize,
    pub segment_seconds: f64,
    pub hop_seconds: f64,
    pub eps: f64,
    pub window_seconds: f64,
    pub frame_hop_seconds: f64,
    pub fft_len: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Shortest accepted input; anything between this and one segment is
    /// zero-padded.
    pub min_seconds: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            n_mels: 64,
            frames_per_segment: 96,
            segment_seconds: 0.96,
            hop_seconds: 1.0,
            eps: 1e-6,
            window_seconds: 0.025,
            frame_hop_seconds: 0.010,
            fft_len: 512,
            fmin_hz: 125.0,
            fmax_hz: 7500.0,
            min_seconds: 0.1,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Band edges in Hz: `n_mels + 2` points evenly spaced on the mel scale.
pub fn mel_band_edges(cfg: &SpectrogramConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular weight of `band` at frequency `hz`, computed on the mel axis.
pub fn mel_weight(cfg: &SpectrogramConfig, band: usize, hz: f64) -> f64 {
    let edges: Vec<f64> = mel_band_edges(cfg).into_iter().map(hz_to_mel).collect();
    let m = hz_to_mel(hz);
    let (l, c, u) = (edges[band], edges[band + 1], edges[band + 2]);
    let rise = (m - l) / (c - l);
    let fall = (u - m) / (u - c);
    rise.min(fall).max(0.0)
}

/// Precomputed transform for one configuration.
pub struct MelFrontEnd {
    cfg: SpectrogramConfig,
    window: Vec<f64>,
    /// `[n_mels][n_bins]`
    weights: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontEnd {
    pub fn new(cfg: &SpectrogramConfig) -> Result<Self> {
        let win_len = (cfg.window_seconds * cfg.sample_rate_hz as f64).round() as usize;
        if win_len == 0 || win_len > cfg.fft_len {
            return Err(Error::Config(format!(
                "window of {win_len} samples does not fit fft_len {}",
                cfg.fft_len
            )));
        }
        if cfg.n_mels == 0 || cfg.frames_per_segment == 0 || cfg.fmax_hz <= cfg.fmin_hz {
            return Err(Error::Config("degenerate spectrogram config".into()));
        }
        // periodic Hann
        let window = (0..win_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win_len as f64).cos())
            .collect();
        let n_bins = cfg.fft_len / 2 + 1;
        let weights = (0..cfg.n_mels)
            .map(|b| {
                (0..n_bins)
                    .map(|k| {
                        if k == 0 {
                            return 0.0;
                        }
                        let hz = k as f64 * cfg.sample_rate_hz as f64 / cfg.fft_len as f64;
                        mel_weight(cfg, b, hz)
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_len);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            weights,
            fft,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    fn frame_log_mel(&self, samples: &[f64], start: usize, out: &mut [f32]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_len];
        for (i, w) in self.window.iter().enumerate() {
            let s = samples.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(s * w, 0.0);
        }
        self.fft.process(&mut buf);
        let mags: Vec<f64> = buf[..self.cfg.fft_len / 2 + 1].iter().map(|c| c.norm()).collect();
        for (b, row) in self.weights.iter().enumerate() {
            let e: f64 = row.iter().zip(&mags).map(|(w, m)| w * m).sum();
            out[b] = (e + self.cfg.eps).ln() as f32;
        }
    }

    /// `[T, frames_per_segment, n_mels]` values, row-major.
    pub fn compute(&self, waveform: &[f32], sample_rate_hz: u32) -> Result<(usize, Vec<f32>)> {
        let cfg = &self.cfg;
        if sample_rate_hz != cfg.sample_rate_hz {
            return Err(Error::Config(format!(
                "sample rate {sample_rate_hz} Hz does not match the configured {} Hz",
                cfg.sample_rate_hz
            )));
        }
        let sr = cfg.sample_rate_hz as f64;
        let min_len = (cfg.min_seconds * sr).ceil() as usize;
        if waveform.is_empty() || waveform.len() < min_len {
            return Err(Error::TooShort {
                samples: waveform.len(),
                min: min_len,
            });
        }
        let seg_len = (cfg.segment_seconds * sr).round() as usize;
        let hop = (cfg.hop_seconds * sr).round() as usize;
        let frame_hop = (cfg.frame_hop_seconds * sr).round() as usize;
        let mut samples: Vec<f64> = waveform.iter().map(|&s| s as f64).collect();
        if samples.len() < seg_len {
            samples.resize(seg_len, 0.0);
        }
        let t = (samples.len() - seg_len) / hop + 1;
        let (f, m) = (cfg.frames_per_segment, cfg.n_mels);
        let mut out = vec![0f32; t * f * m];
        for seg in 0..t {
            for j in 0..f {
                let start = seg * hop + j * frame_hop;
                let o = (seg * f + j) * m;
                self.frame_log_mel(&samples, start, &mut out[o..o + m]);
            }
        }
        Ok((t, out))
    }
}

pub fn log_mel_spectrogram(waveform: &[f32], sample_rate_hz: u32, cfg: &SpectrogramConfig) -> Result<AudioClip> {
    let fe = MelFrontEnd::new(cfg)?;
    spectrogram_with(&fe, waveform, sample_rate_hz)
}

pub fn spectrogram_with(fe: &MelFrontEnd, waveform: &[f32], sample_rate_hz: u32) -> Result<AudioClip> {
    let (t, data) = fe.compute(waveform, sample_rate_hz)?;
    let cfg = fe.config();
    let tensor = Tensor::from_vec(data, (t, cfg.frames_per_segment, cfg.n_mels), &Device::Cpu)?;
    AudioClip::new(tensor, sample_rate_hz)
}

/// Mono 16-bit or float WAV; multi-channel input is averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let err = |msg: String| Error::Audio {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(e.to_string()))?
        }
    };
    let mono = raw
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate_hz: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(err)?;
    }
    w.finalize().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, sr: u32) -> Vec<f32> {
        let n = (seconds * sr as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect()
    }

    #[test]
    fn silence_is_log_eps() {
        let cfg = SpectrogramConfig::default();
        let clip = log_mel_spectrogram(&vec![0.0; 16_000], 16_000, &cfg).unwrap();
        assert_eq!(clip.spectrograms().dims(), &[1, 96, 64]);
        let v: Vec<f32> = clip.spectrograms().flatten_all().unwrap().to_vec1().unwrap();
        let want = (1e-6f64).ln() as f32;
        assert!(v.iter().all(|&x| x == want));
    }

    #[test]
    fn sine_peaks_in_analytic_band() {
        let cfg = SpectrogramConfig::default();
        // Band whose triangle is tallest at 440 Hz, from the edges alone.
        let oracle = (0..cfg.n_mels)
            .max_by(|&a, &b| mel_weight(&cfg, a, 440.0).total_cmp(&mel_weight(&cfg, b, 440.0)))
            .unwrap();
        let edges = mel_band_edges(&cfg);
        assert!(edges[oracle] < 440.0 && 440.0 < edges[oracle + 2]);

        let clip = log_mel_spectrogram(&sine(440.0, 1.0, 16_000), 16_000, &cfg).unwrap();
        let mean_per_band = clip.spectrograms().get(0).unwrap().mean(0).unwrap();
        let v: Vec<f32> = mean_per_band.to_vec1().unwrap();
        let argmax = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax, oracle);
    }

    #[test]
    fn segment_count_and_padding() {
        let cfg = SpectrogramConfig::default();
        assert_eq!(log_mel_spectrogram(&vec![0.1; 32_000], 16_000, &cfg).unwrap().len(), 2);
        assert_eq!(log_mel_spectrogram(&vec![0.1; 24_000], 16_000, &cfg).unwrap().len(), 1);
        // 0.5 s pads to one segment
        assert_eq!(log_mel_spectrogram(&vec![0.1; 8_000], 16_000, &cfg).unwrap().len(), 1);
        assert!(matches!(
            log_mel_spectrogram(&vec![0.1; 1_000], 16_000, &cfg),
            Err(Error::TooShort { .. })
        ));
        assert!(matches!(log_mel_spectrogram(&[], 16_000, &cfg), Err(Error::TooShort { .. })));
        assert!(log_mel_spectrogram(&vec![0.1; 16_000], 8_000, &cfg).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let s = sine(300.0, 0.2, 16_000);
        write_wav(&p, &s, 16_000).unwrap();
        let (back, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(back.len(), s.len());
        assert!(back.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
