//! Frozen feature extractors: a three-level visual pyramid at strides
//! 8/16/32 and one pooled audio vector per frame.
//!
//! The shipped backbones are small random-weight convolution stacks. Any
//! type implementing [`VisualBackbone`] or [`AudioBackbone`] with the same
//! shape contract can replace them.

use candle_core::{DType, Device, Module, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::types::{AudioClip, FrameClip};

/// Visual features `[T, C_l, H0/s, W0/s]` for strides 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 3]) -> Result<Self> {
        let dims: Vec<(usize, usize, usize, usize)> =
            levels.iter().map(|l| l.dims4()).collect::<candle_core::Result<_>>()?;
        let t = dims[0].0;
        for w in dims.windows(2) {
            let ((_, _, h0, w0), (t1, _, h1, w1)) = (w[0], w[1]);
            if t1 != t || h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::shape(format!(
                    "pyramid levels must share T and halve spatially: {dims:?}"
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn frames(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn channels(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.levels[i].dims()[1])
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            levels: [
                self.levels[0].to_dtype(dtype)?,
                self.levels[1].to_dtype(dtype)?,
                self.levels[2].to_dtype(dtype)?,
            ],
        })
    }
}

/// Audio vectors `[T, C_a]`.
#[derive(Debug, Clone)]
pub struct AudioEmbedding {
    pub vectors: Tensor,
}

impl AudioEmbedding {
    pub fn new(vectors: Tensor) -> Result<Self> {
        let (t, c) = vectors.dims2()?;
        if t == 0 || c == 0 {
            return Err(Error::shape("audio embedding must be non-empty"));
        }
        Ok(Self { vectors })
    }

    pub fn frames(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims()[1]
    }
}

pub trait VisualBackbone: Send + Sync {
    /// Map normalized frames `[T, 3, H, W]` to the three pyramid levels.
    fn extract(&self, frames: &Tensor) -> Result<[Tensor; 3]>;
    fn channels(&self) -> [usize; 3];
    fn params(&self) -> &ParamStore;
}

pub trait AudioBackbone: Send + Sync {
    /// Map spectrograms `[T, H_a, W_a]` to `[T, C_a]`.
    fn extract(&self, spectrograms: &Tensor) -> Result<Tensor>;
    fn dim(&self) -> usize;
    fn params(&self) -> &ParamStore;
}

/// Stride-2 conv stack: a stem, then four stages at strides 4/8/16/32;
/// the last three stages form the pyramid.
pub struct ToyVisualBackbone {
    stem: Conv2d,
    stages: [Conv2d; 4],
    channels: [usize; 4],
    store: ParamStore,
}

impl ToyVisualBackbone {
    pub const DEFAULT_CHANNELS: [usize; 4] = [32, 64, 128, 256];

    pub fn new(seed: u64, channels: [usize; 4], dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, device);
        let stem_width = channels[0] / 2;
        let stem = Conv2d::he(&store.pp("stem"), 3, stem_width.max(1), 3, 2, 1)?;
        let mut cin = stem_width.max(1);
        let mut stages = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Conv2d::he(&store.pp(format!("stage{i}")), cin, c, 3, 2, 1)?);
            cin = c;
        }
        let stages: [Conv2d; 4] = stages.try_into().map_err(|_| Error::shape("four stages"))?;
        Ok(Self {
            stem,
            stages,
            channels,
            store,
        })
    }
}

impl VisualBackbone for ToyVisualBackbone {
    fn extract(&self, frames: &Tensor) -> Result<[Tensor; 3]> {
        let x = ((frames - 0.5)? * 4.0)?;
        let mut x = self.stem.forward(&x)?.relu()?;
        let mut outs = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x)?.relu()?;
            if i > 0 {
                outs.push(x.clone());
            }
        }
        Ok([outs[0].clone(), outs[1].clone(), outs[2].clone()])
    }

    fn channels(&self) -> [usize; 3] {
        [self.channels[1], self.channels[2], self.channels[3]]
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// Three stride-2 conv blocks, a mean over time, mel pooled into
/// `FREQ_BANDS` coarse bands (centered per channel), then a fixed
/// projection. Keeping the band
/// profile lets tones that differ only in pitch embed apart.
pub struct ToyAudioBackbone {
    blocks: [Conv2d; 3],
    proj: Linear,
    dim: usize,
    offset: f64,
    scale: f64,
    store: ParamStore,
}

impl ToyAudioBackbone {
    pub const DEFAULT_DIM: usize = 128;
    pub const FREQ_BANDS: usize = 8;
    const WIDTHS: [usize; 4] = [1, 32, 64, 64];

    /// `floor_value` is the spectrogram value of silence (`ln eps`); inputs
    /// are shifted so silence maps to zero.
    pub fn new(seed: u64, dim: usize, floor_value: f64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, device);
        let w = Self::WIDTHS;
        let mut blocks = Vec::with_capacity(3);
        for i in 0..3 {
            blocks.push(Conv2d::he(&store.pp(format!("block{i}")), w[i], w[i + 1], 3, 2, 1)?);
        }
        let blocks: [Conv2d; 3] = blocks.try_into().map_err(|_| Error::shape("three blocks"))?;
        let proj = Linear::no_bias(&store.pp("proj"), w[3] * Self::FREQ_BANDS, dim)?;
        Ok(Self {
            blocks,
            proj,
            dim,
            offset: floor_value,
            scale: 8.0,
            store,
        })
    }
}

/// Average `[T, C, M]` over `bands` contiguous slices of the last axis.
fn band_pool(x: &Tensor, bands: usize) -> Result<Tensor> {
    let m = x.dim(2)?;
    let parts = (0..bands)
        .map(|b| {
            let lo = (b * m / bands).min(m - 1);
            let hi = ((b + 1) * m / bands).max(lo + 1);
            x.narrow(2, lo, hi - lo)?.mean_keepdim(2)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 2)?)
}

impl AudioBackbone for ToyAudioBackbone {
    fn extract(&self, spectrograms: &Tensor) -> Result<Tensor> {
        let (t, h, w) = spectrograms.dims3()?;
        let mut x = ((spectrograms - self.offset)? / self.scale)?.reshape((t, 1, h, w))?;
        for b in &self.blocks {
            x = b.forward(&x)?.relu()?;
        }
        let bands = band_pool(&x.mean(2)?, Self::FREQ_BANDS)?;
        // Per-channel centering across bands keeps the spectral profile and
        // drops the pitch-independent level.
        let bands = bands.broadcast_sub(&bands.mean_keepdim(2)?)?.flatten_from(1)?;
        Ok(self.proj.forward(&bands)?)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}

pub fn encode_visual(clip: &FrameClip, backbone: &dyn VisualBackbone) -> Result<FeaturePyramid> {
    let (h, w) = (clip.height(), clip.width());
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!("frame size {h}x{w} is not divisible by 32")));
    }
    let levels = backbone.extract(clip.frames())?;
    let t = clip.len();
    for (i, (l, c)) in levels.iter().zip(backbone.channels()).enumerate() {
        let s = 8 << i;
        let want = [t, c, h / s, w / s];
        if l.dims() != want {
            return Err(Error::shape(format!(
                "backbone level {i} has shape {:?}, expected {want:?}",
                l.dims()
            )));
        }
    }
    FeaturePyramid::new(levels)
}

pub fn encode_audio(spec: &AudioClip, backbone: &dyn AudioBackbone) -> Result<AudioEmbedding> {
    let v = backbone.extract(spec.spectrograms())?;
    if v.dims() != [spec.len(), backbone.dim()] {
        return Err(Error::shape(format!(
            "audio backbone produced {:?}, expected [{}, {}]",
            v.dims(),
            spec.len(),
            backbone.dim()
        )));
    }
    AudioEmbedding::new(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{log_mel_spectrogram, SpectrogramConfig};
    use proptest::prelude::*;

    fn visual() -> ToyVisualBackbone {
        ToyVisualBackbone::new(1, ToyVisualBackbone::DEFAULT_CHANNELS, DType::F32, &Device::Cpu).unwrap()
    }

    fn audio() -> ToyAudioBackbone {
        ToyAudioBackbone::new(2, 128, (1e-6f64).ln(), DType::F32, &Device::Cpu).unwrap()
    }

    fn frames(t: usize, h: usize, w: usize) -> FrameClip {
        let n = t * 3 * h * w;
        let data: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
        FrameClip::new(Tensor::from_vec(data, (t, 3, h, w), &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn pyramid_shapes_at_224() {
        let p = encode_visual(&frames(1, 224, 224), &visual()).unwrap();
        assert_eq!(p.levels[0].dims(), &[1, 64, 28, 28]);
        assert_eq!(p.levels[1].dims(), &[1, 128, 14, 14]);
        assert_eq!(p.levels[2].dims(), &[1, 256, 7, 7]);
        let p5 = encode_visual(&frames(5, 64, 96), &visual()).unwrap();
        assert!(p5.levels.iter().all(|l| l.dims()[0] == 5));
    }

    #[test]
    fn rejects_indivisible_frames() {
        assert!(matches!(encode_visual(&frames(1, 48, 64), &visual()), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_frames_identical_features() {
        let one = frames(1, 64, 64);
        let two = FrameClip::new(Tensor::cat(&[one.frames(), one.frames()], 0).unwrap()).unwrap();
        let p = encode_visual(&two, &visual()).unwrap();
        for l in &p.levels {
            let d: f32 = (l.get(0).unwrap() - l.get(1).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn pyramid_contract_for_random_sizes(t in 1usize..3, hb in 1usize..4, wb in 1usize..4) {
            let p = encode_visual(&frames(t, 32 * hb, 32 * wb), &visual()).unwrap();
            for (i, l) in p.levels.iter().enumerate() {
                let s = 8 << i;
                prop_assert_eq!(l.dims(), &[t, [64, 128, 256][i], 32 * hb / s, 32 * wb / s]);
            }
        }
    }

    #[test]
    fn audio_embedding_per_segment() {
        let cfg = SpectrogramConfig::default();
        let wave: Vec<f32> = (0..48_000).map(|i| ((i as f32) * 0.05).sin() * 0.3).collect();
        let spec = log_mel_spectrogram(&wave, 16_000, &cfg).unwrap();
        let emb = encode_audio(&spec, &audio()).unwrap();
        assert_eq!(emb.vectors.dims(), &[3, 128]);

        let first = spec.spectrograms().get(0).unwrap().unsqueeze(0).unwrap();
        let dup = AudioClip::new(Tensor::cat(&[&first, &first], 0).unwrap(), 16_000).unwrap();
        let e = encode_audio(&dup, &audio()).unwrap();
        let d: f32 = (e.vectors.get(0).unwrap() - e.vectors.get(1).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn silence_and_tone_embed_differently() {
        let cfg = SpectrogramConfig::default();
        let silent = log_mel_spectrogram(&vec![0.0; 16_000], 16_000, &cfg).unwrap();
        let tone: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16_000.0).sin() * 0.5)
            .collect();
        let tone = log_mel_spectrogram(&tone, 16_000, &cfg).unwrap();
        let a = encode_audio(&silent, &audio()).unwrap().vectors;
        let b = encode_audio(&tone, &audio()).unwrap().vectors;
        let l2: f32 = (a - b).unwrap().sqr().unwrap().sum_all().unwrap().sqrt().unwrap().to_scalar().unwrap();
        assert!(l2 > 0.0);
    }

    fn tone(hz: f32) -> AudioClip {
        let wave: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f32::consts::PI * hz * i as f32 / 16_000.0).sin() * 0.5)
            .collect();
        log_mel_spectrogram(&wave, 16_000, &SpectrogramConfig::default()).unwrap()
    }

    fn cosine(a: &Tensor, b: &Tensor) -> f32 {
        let dot: f32 = (a * b).unwrap().sum_all().unwrap().to_scalar().unwrap();
        let n = |x: &Tensor| -> f32 { x.sqr().unwrap().sum_all().unwrap().sqrt().unwrap().to_scalar().unwrap() };
        dot / (n(a) * n(b))
    }

    #[test]
    fn pitch_survives_pooling() {
        let bb = audio();
        let e: Vec<Tensor> = [300.0, 1200.0, 4000.0].iter().map(|&hz| encode_audio(&tone(hz), &bb).unwrap().vectors).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let c = cosine(&e[i], &e[j]);
                assert!(c < 0.5, "tones {i} and {j} embed too closely: cos {c}");
            }
        }
    }
}
