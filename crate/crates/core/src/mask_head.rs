//! Pixel decoder, per-query dynamic 1×1 convolution, sounding scores and
//! inference-time mask selection.

use candle_core::{DType, Module, Tensor};

use crate::encoders::{AudioEmbedding, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::{FusedPyramid, QueryEmbeddings};
use crate::interp::resize_bilinear;
use crate::nn::{Conv2d, Linear, Mlp2, MultiHeadAttention, ParamStore, PointwiseConv};
use crate::types::BinaryMask;

/// Mask features `[T, C_m, H0/4, W0/4]`.
#[derive(Debug, Clone)]
pub struct MaskFeatures {
    pub maps: Tensor,
}

/// One 1×1 kernel and bias per query.
#[derive(Debug, Clone)]
pub struct KernelBank {
    pub kernels: Tensor,
    pub biases: Tensor,
}

#[derive(Debug, Clone)]
pub struct MaskLogits {
    /// `[N_q, T, H, W]`
    pub logits: Tensor,
    /// `[N_q]`, pre-sigmoid.
    pub sounding_scores: Tensor,
}

impl MaskLogits {
    pub fn n_queries(&self) -> usize {
        self.logits.dims()[0]
    }
}

/// Nearest-neighbour ×2 upsampling of `[N, C, H, W]` built from a broadcast,
/// so gradients flow through it.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// FPN over the fused maps, with lateral projections of the backbone
/// levels, ending at stride 4 with an additive audio cross-attention step.
pub struct PixelDecoder {
    lateral_v: Vec<PointwiseConv>,
    lateral_av: Vec<PointwiseConv>,
    smooth: Vec<Conv2d>,
    head: Conv2d,
    audio_proj: Linear,
    audio_attn: MultiHeadAttention,
}

impl PixelDecoder {
    pub fn new(ps: &ParamStore, visual_channels: [usize; 3], c_av: usize, c_a: usize, c_m: usize) -> Result<Self> {
        let mut lateral_v = Vec::new();
        let mut lateral_av = Vec::new();
        let mut smooth = Vec::new();
        for (i, &c) in visual_channels.iter().enumerate() {
            lateral_v.push(PointwiseConv::new(&ps.pp(format!("lateral_v{i}")), c, c_m)?);
            lateral_av.push(PointwiseConv::new(&ps.pp(format!("lateral_av{i}")), c_av, c_m)?);
            smooth.push(Conv2d::new(&ps.pp(format!("smooth{i}")), c_m, c_m, 3, 1, 1)?);
        }
        Ok(Self {
            lateral_v,
            lateral_av,
            smooth,
            head: Conv2d::new(&ps.pp("head"), c_m, c_m, 3, 1, 1)?,
            audio_proj: Linear::new(&ps.pp("audio_proj"), c_a, c_m)?,
            audio_attn: MultiHeadAttention::new(&ps.pp("audio_attn"), c_m, 1)?,
        })
    }

    /// The top-down pathway alone, at stride 4.
    pub fn fpn(&self, pyramid: &FeaturePyramid, fused: &FusedPyramid) -> Result<Tensor> {
        let mut up: Option<Tensor> = None;
        for l in (0..3).rev() {
            let mut x = (self.lateral_v[l].forward(&pyramid.levels[l])? + self.lateral_av[l].forward(&fused.levels[l])?)?;
            if let Some(u) = &up {
                x = (x + upsample2(u)?)?;
            }
            up = Some(self.smooth[l].forward(&x)?.relu()?);
        }
        let top = up.expect("three levels");
        Ok(self.head.forward(&upsample2(&top)?)?)
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, audio: &AudioEmbedding, fused: &FusedPyramid) -> Result<MaskFeatures> {
        let maps = self.fpn(pyramid, fused)?;
        let (t, c, h, w) = maps.dims4()?;
        let tokens = maps.reshape((t, c, h * w))?.transpose(1, 2)?;
        let a = self.audio_proj.forward(&audio.vectors)?.unsqueeze(1)?;
        let tokens = (&tokens + self.audio_attn.forward(&tokens, &a)?)?;
        Ok(MaskFeatures {
            maps: tokens.transpose(1, 2)?.reshape((t, c, h, w))?,
        })
    }
}

pub fn pixel_decode(
    decoder: &PixelDecoder,
    pyramid: &FeaturePyramid,
    audio: &AudioEmbedding,
    fused: &FusedPyramid,
) -> Result<MaskFeatures> {
    decoder.forward(pyramid, audio, fused)
}

/// Two-layer MLP from query embeddings to `C_m + 1` values per query.
pub struct KernelGenerator {
    mlp: Mlp2,
    c_m: usize,
}

impl KernelGenerator {
    pub fn new(ps: &ParamStore, d: usize, c_m: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::new(ps, d, d, c_m + 1)?,
            c_m,
        })
    }

    pub fn forward(&self, queries: &QueryEmbeddings) -> Result<KernelBank> {
        let out = self.mlp.forward(&queries.outputs)?;
        Ok(KernelBank {
            kernels: out.narrow(1, 0, self.c_m)?,
            biases: out.narrow(1, self.c_m, 1)?.squeeze(1)?,
        })
    }
}

pub fn generate_kernels(generator: &KernelGenerator, queries: &QueryEmbeddings) -> Result<KernelBank> {
    generator.forward(queries)
}

/// `logits[i, t, y, x] = Σ_c kernels[i, c] · maps[t, c, y, x] + biases[i]`.
pub fn dynamic_convolve(features: &MaskFeatures, bank: &KernelBank) -> Result<Tensor> {
    let (t, c, h, w) = features.maps.dims4()?;
    let (n, ck) = bank.kernels.dims2()?;
    if ck != c {
        return Err(Error::shape(format!("kernels have {ck} channels, features have {c}")));
    }
    let flat = features.maps.transpose(0, 1)?.reshape((c, t * h * w))?;
    let logits = bank
        .kernels
        .matmul(&flat)?
        .broadcast_add(&bank.biases.reshape((n, 1))?)?;
    Ok(logits.reshape((n, t, h, w))?)
}

pub struct SoundingHead {
    linear: Linear,
}

impl SoundingHead {
    pub fn new(ps: &ParamStore, d: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(ps, d, 1)?,
        })
    }

    pub fn forward(&self, queries: &QueryEmbeddings) -> Result<Tensor> {
        Ok(self.linear.forward(&queries.outputs)?.squeeze(1)?)
    }
}

pub fn score_sounding(head: &SoundingHead, queries: &QueryEmbeddings) -> Result<Tensor> {
    head.forward(queries)
}

/// First index of the maximum; NaN never wins.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || values[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

/// Pick the query with the highest sounding score, resample its logits to
/// `h0 × w0` and binarize `sigmoid > threshold` per frame.
pub fn select_and_upsample(pred: &MaskLogits, h0: usize, w0: usize, threshold: f64) -> Result<(Vec<BinaryMask>, usize)> {
    let scores: Vec<f64> = pred.sounding_scores.to_dtype(DType::F64)?.to_vec1()?;
    let winner = argmax_first(&scores);
    let logits = pred.logits.get(winner)?.to_dtype(DType::F64)?;
    let up = resize_bilinear(&logits, h0, w0)?;
    let frames: Vec<Vec<f64>> = up.flatten_from(1)?.to_vec2()?;
    let masks = frames
        .into_iter()
        .map(|f| {
            let bits = f.iter().map(|&z| 1.0 / (1.0 + (-z).exp()) > threshold).collect();
            BinaryMask::from_bits(h0, w0, bits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((masks, winner))
}
