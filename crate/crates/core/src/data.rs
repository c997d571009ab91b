//! Loading manifest samples into tensors and caching their frozen
//! backbone features.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::audio::{read_wav, spectrogram_with, MelFrontEnd, SpectrogramConfig};
use crate::encoders::{AudioEmbedding, FeaturePyramid};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::AuTR;
use crate::synthesis::TripletSample;
use crate::types::{rle_decode, AudioClip, BinaryMask, FrameClip};

/// One triplet as tensors: a still image becomes a one-frame clip paired
/// with the first audio segment.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub class: String,
    pub image_uri: String,
    pub frames: FrameClip,
    pub audio: AudioClip,
    /// Ground truth per frame at the annotation's native size.
    pub gt: Vec<BinaryMask>,
}

/// A sample with its frozen features computed once.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub id: String,
    pub class: String,
    pub image_uri: String,
    pub pyramid: FeaturePyramid,
    pub audio: AudioEmbedding,
    pub gt: Vec<BinaryMask>,
}

/// `[1, 3, canvas, canvas]` in `[0, 1]`, resized with a triangle filter if
/// the file has another size.
pub fn load_image(path: &Path, canvas: usize, device: &Device) -> Result<FrameClip> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let img = if img.width() as usize != canvas || img.height() as usize != canvas {
        image::imageops::resize(&img, canvas as u32, canvas as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let n = canvas * canvas;
    let mut data = vec![0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px.0[c] as f32 / 255.0;
        }
    }
    FrameClip::new(Tensor::from_vec(data, (1, 3, canvas, canvas), device)?)
}

pub fn load_sample(s: &TripletSample, root: &Path, canvas: usize, fe: &MelFrontEnd, device: &Device) -> Result<LoadedSample> {
    let frames = load_image(&root.join(&s.image_uri), canvas, device)?;
    let (wave, sr) = read_wav(&root.join(&s.audio_uri))?;
    let audio = spectrogram_with(fe, &wave, sr)?;
    let audio = AudioClip::new(audio.spectrograms().to_device(device)?, audio.sample_rate_hz())?.fit_to(frames.len())?;
    Ok(LoadedSample {
        id: s.id.clone(),
        class: s.canonical_class.clone(),
        image_uri: s.image_uri.clone(),
        frames,
        audio,
        gt: vec![rle_decode(&s.mask)?],
    })
}

/// Load every sample, resolving URIs against `root`.
pub fn load_samples(
    samples: &[TripletSample],
    root: &Path,
    canvas: usize,
    audio: &SpectrogramConfig,
    exec: Execution,
) -> Result<Vec<LoadedSample>> {
    let fe = MelFrontEnd::new(audio)?;
    exec.map(samples, |s| load_sample(s, root, canvas, &fe, &Device::Cpu))
        .into_iter()
        .collect()
}

pub fn encode_samples(model: &AuTR, samples: &[LoadedSample], exec: Execution) -> Result<Vec<EncodedSample>> {
    let dtype = model.dtype();
    exec.map(samples, |s| {
        let frames = FrameClip::new(s.frames.frames().to_dtype(dtype)?)?;
        let audio = AudioClip::new(s.audio.spectrograms().to_dtype(dtype)?, s.audio.sample_rate_hz())?;
        let (pyramid, audio) = model.encode(&frames, &audio)?;
        Ok(EncodedSample {
            id: s.id.clone(),
            class: s.class.clone(),
            image_uri: s.image_uri.clone(),
            pyramid,
            audio,
            gt: s.gt.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Load and encode manifest samples whose URIs are relative to `root`.
pub fn prepare(
    samples: &[TripletSample],
    root: &Path,
    model: &AuTR,
    canvas: usize,
    audio: &SpectrogramConfig,
    exec: Execution,
) -> Result<Vec<EncodedSample>> {
    let loaded = load_samples(samples, root, canvas, audio, exec)?;
    encode_samples(model, &loaded, exec)
}

/// For each sample, the mask of a different-class object in the same
/// image, if there is one.
pub fn silent_masks<'a>(samples: &'a [EncodedSample]) -> Vec<Option<&'a [BinaryMask]>> {
    samples
        .iter()
        .map(|s| {
            samples
                .iter()
                .find(|o| o.image_uri == s.image_uri && o.class != s.class)
                .map(|o| o.gt.as_slice())
        })
        .collect()
}
