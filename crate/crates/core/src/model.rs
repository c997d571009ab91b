//! The full audio-aware query transformer: frozen backbones, fusion,
//! query decoder and mask head behind one forward call.

use candle_core::{DType, Device, Tensor, Var};

use crate::config::ModelConfig;
use crate::encoders::{
    encode_audio, encode_visual, AudioBackbone, AudioEmbedding, FeaturePyramid, ToyAudioBackbone, ToyVisualBackbone,
    VisualBackbone,
};
use crate::error::Result;
use crate::fusion::{avff, decode_queries, mm_encode, FusionStack};
use crate::mask_head::{dynamic_convolve, KernelGenerator, MaskFeatures, MaskLogits, PixelDecoder, SoundingHead};
use crate::nn::ParamStore;
use crate::types::{AudioClip, FrameClip};

/// Seed of the frozen stand-in backbones. It is fixed rather than derived
/// from the run seed so that every model shares one "pretrained" feature
/// extractor, as a real pretrained backbone would be shared.
pub const BACKBONE_SEED: u64 = 0x5eed_bac4_b0e5;

/// Floor of the log-mel front end with the default `eps`.
const SPECTROGRAM_FLOOR: f64 = -13.815510557964274;

pub struct AuTR {
    cfg: ModelConfig,
    visual: Box<dyn VisualBackbone>,
    audio: Box<dyn AudioBackbone>,
    store: ParamStore,
    fusion: FusionStack,
    pixel: PixelDecoder,
    kernels: KernelGenerator,
    sounding: SoundingHead,
}

impl AuTR {
    /// Toy backbones plus freshly initialized trainable modules.
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let visual = ToyVisualBackbone::new(BACKBONE_SEED, cfg.visual_channels, dtype, device)?;
        let audio = ToyAudioBackbone::new(BACKBONE_SEED ^ 1, cfg.audio_dim, SPECTROGRAM_FLOOR, dtype, device)?;
        Self::with_backbones(cfg, seed, Box::new(visual), Box::new(audio))
    }

    /// Plug in any backbones that honour the pyramid and embedding shapes.
    pub fn with_backbones(
        cfg: &ModelConfig,
        seed: u64,
        visual: Box<dyn VisualBackbone>,
        audio: Box<dyn AudioBackbone>,
    ) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, visual.params().dtype(), &visual.params().device());
        let mut cfg = cfg.clone();
        cfg.audio_dim = audio.dim();
        let fusion = FusionStack::new(&store.pp("fusion"), &cfg, visual.channels())?;
        let pixel = PixelDecoder::new(&store.pp("pixel"), visual.channels(), cfg.c_av, cfg.audio_dim, cfg.c_m)?;
        let kernels = KernelGenerator::new(&store.pp("kernels"), cfg.d_model, cfg.c_m)?;
        let sounding = SoundingHead::new(&store.pp("sounding"), cfg.d_model)?;
        Ok(Self {
            cfg,
            visual,
            audio,
            store,
            fusion,
            pixel,
            kernels,
            sounding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }

    /// Frozen features, detached from the backbone parameters.
    pub fn encode(&self, frames: &FrameClip, audio: &AudioClip) -> Result<(FeaturePyramid, AudioEmbedding)> {
        audio.check_paired(frames)?;
        let pyr = encode_visual(frames, self.visual.as_ref())?;
        let emb = encode_audio(audio, self.audio.as_ref())?;
        let levels = [pyr.levels[0].detach(), pyr.levels[1].detach(), pyr.levels[2].detach()];
        Ok((FeaturePyramid::new(levels)?, AudioEmbedding::new(emb.vectors.detach())?))
    }

    pub fn forward_encoded(&self, pyramid: &FeaturePyramid, audio: &AudioEmbedding) -> Result<MaskLogits> {
        let fused = avff(&self.fusion, pyramid, audio)?;
        let fused = mm_encode(&self.fusion, &fused)?;
        let queries = decode_queries(&self.fusion, &fused, audio)?;
        let features: MaskFeatures = self.pixel.forward(pyramid, audio, &fused)?;
        let bank = self.kernels.forward(&queries)?;
        Ok(MaskLogits {
            logits: dynamic_convolve(&features, &bank)?,
            sounding_scores: self.sounding.forward(&queries)?,
        })
    }

    pub fn forward(&self, frames: &FrameClip, audio: &AudioClip) -> Result<MaskLogits> {
        let (pyr, emb) = self.encode(frames, audio)?;
        self.forward_encoded(&pyr, &emb)
    }

    pub fn fusion(&self) -> &FusionStack {
        &self.fusion
    }

    pub fn pixel_decoder(&self) -> &PixelDecoder {
        &self.pixel
    }

    /// Parameters updated by training, by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.store.vars()
    }

    /// Backbone parameters, prefixed `backbone.visual.` / `backbone.audio.`.
    pub fn frozen(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .visual
            .params()
            .vars()
            .into_iter()
            .map(|(k, v)| (format!("backbone.visual.{k}"), v))
            .collect();
        out.extend(
            self.audio
                .params()
                .vars()
                .into_iter()
                .map(|(k, v)| (format!("backbone.audio.{k}"), v)),
        );
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn trainable_store(&self) -> &ParamStore {
        &self.store
    }

    /// Snapshot of the trainable weights.
    pub fn weights(&self) -> Result<std::collections::BTreeMap<String, Tensor>> {
        self.trainable()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    pub fn load_weights(&self, weights: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        Ok(self.store.load(weights)?)
    }
}
