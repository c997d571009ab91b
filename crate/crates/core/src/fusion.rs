//! Audio-visual fusion: per-scale cross-attention from visual tokens to the
//! audio vector, a multimodal transformer encoder over all scales and
//! frames, and a decoder whose queries are seeded from the audio.

use candle_core::{Module, Tensor};

use crate::config::{ModelConfig, QueryInit};
use crate::encoders::{AudioEmbedding, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{sinusoid, LayerNorm, Linear, Mlp2, MultiHeadAttention, ParamStore, PointwiseConv};

/// Three maps `[T, C_av, H_l, W_l]` sharing one channel width.
#[derive(Debug, Clone)]
pub struct FusedPyramid {
    pub levels: [Tensor; 3],
}

impl FusedPyramid {
    pub fn frames(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn width(&self) -> usize {
        self.levels[0].dims()[1]
    }

    /// Tokens `[1, T * Σ H_l W_l, C]`, ordered frame-major, then level,
    /// then row-major pixels.
    pub fn flatten(&self) -> Result<Tensor> {
        let t = self.frames();
        let c = self.width();
        let mut per_frame = Vec::with_capacity(t);
        for f in 0..t {
            let mut parts = Vec::with_capacity(3);
            for l in &self.levels {
                let m = l.get(f)?;
                let (_, h, w) = m.dims3()?;
                parts.push(m.reshape((c, h * w))?.t()?);
            }
            per_frame.push(Tensor::cat(&parts, 0)?);
        }
        Ok(Tensor::cat(&per_frame, 0)?.unsqueeze(0)?)
    }

    /// Inverse of [`flatten`](Self::flatten) for the same level geometry.
    pub fn unflatten_like(&self, tokens: &Tensor) -> Result<FusedPyramid> {
        let tokens = tokens.squeeze(0)?;
        let c = tokens.dim(1)?;
        let sizes: Vec<(usize, usize)> = self.levels.iter().map(|l| (l.dims()[2], l.dims()[3])).collect();
        let per_frame: usize = sizes.iter().map(|(h, w)| h * w).sum();
        let mut levels: [Vec<Tensor>; 3] = Default::default();
        for f in 0..self.frames() {
            let mut off = f * per_frame;
            for (li, &(h, w)) in sizes.iter().enumerate() {
                let m = tokens.narrow(0, off, h * w)?.t()?.reshape((c, h, w))?;
                levels[li].push(m);
                off += h * w;
            }
        }
        let stack = |v: &Vec<Tensor>| Tensor::stack(v, 0);
        Ok(FusedPyramid {
            levels: [stack(&levels[0])?, stack(&levels[1])?, stack(&levels[2])?],
        })
    }
}

/// Decoder output `[N_q, D]`.
#[derive(Debug, Clone)]
pub struct QueryEmbeddings {
    pub outputs: Tensor,
}

struct AvffLevel {
    visual_proj: PointwiseConv,
    attn: MultiHeadAttention,
}

/// Early audio-visual fusion, one attention block per scale.
pub struct Avff {
    audio_mlp: Mlp2,
    levels: Vec<AvffLevel>,
    width: usize,
}

impl Avff {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig, visual_channels: [usize; 3]) -> Result<Self> {
        let audio_mlp = Mlp2::new(&ps.pp("audio_mlp"), cfg.audio_dim, cfg.c_av, cfg.c_av)?;
        let levels = visual_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let p = ps.pp(format!("level{i}"));
                Ok(AvffLevel {
                    visual_proj: PointwiseConv::new(&p.pp("proj"), c, cfg.c_av)?,
                    attn: MultiHeadAttention::new(&p.pp("attn"), cfg.c_av, cfg.heads)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            audio_mlp,
            levels,
            width: cfg.c_av,
        })
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, audio: &AudioEmbedding) -> Result<FusedPyramid> {
        let t = pyramid.frames();
        if audio.frames() != t {
            return Err(Error::shape(format!(
                "pyramid has {t} frames but audio has {}",
                audio.frames()
            )));
        }
        let a = self.audio_mlp.forward(&audio.vectors)?.unsqueeze(1)?; // [T, 1, C]
        let mut out = Vec::with_capacity(3);
        for (lvl, feat) in self.levels.iter().zip(&pyramid.levels) {
            let (_, _, h, w) = feat.dims4()?;
            let v = lvl.visual_proj.to_tokens(feat)?; // [T, HW, C]
            let fused = (&v + lvl.attn.forward(&v, &a)?)?;
            out.push(fused.transpose(1, 2)?.reshape((t, self.width, h, w))?);
        }
        Ok(FusedPyramid {
            levels: [out[0].clone(), out[1].clone(), out[2].clone()],
        })
    }

    pub fn level_attention(&self, level: usize) -> &MultiHeadAttention {
        &self.levels[level].attn
    }
}

struct FeedForward {
    mlp: Mlp2,
}

impl FeedForward {
    fn new(ps: &ParamStore, dim: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::new(ps, dim, dim * mult.max(1), dim)?,
        })
    }
}

struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn new(ps: &ParamStore, dim: usize, heads: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&ps.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&ps.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&ps.pp("norm2"), dim)?,
            ffn: FeedForward::new(&ps.pp("ffn"), dim, mult)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ffn.mlp.forward(&h)?)?)
    }
}

/// Fixed sinusoidal encodings over (t, y, x), concatenated to width `c`
/// (the encoder passes them through a learned projection):
/// a quarter of the channels for time, the rest split between rows and
/// columns. Spatial positions are normalized image coordinates so all
/// scales share one frame of reference.
pub fn spatio_temporal_encoding(
    frames: usize,
    sizes: &[(usize, usize)],
    c: usize,
    temporal: bool,
) -> Vec<f64> {
    let ct = (c / 4) & !1;
    let cy = ((c - ct) / 2) & !1;
    let cx = c - ct - cy;
    const SPAN: f64 = 64.0;
    let mut out = Vec::new();
    for t in 0..frames {
        for &(h, w) in sizes {
            for y in 0..h {
                for x in 0..w {
                    if temporal {
                        sinusoid(t as f64, ct, &mut out);
                    } else {
                        out.extend(std::iter::repeat_n(0.0, ct));
                    }
                    sinusoid((y as f64 + 0.5) / h as f64 * SPAN, cy, &mut out);
                    sinusoid((x as f64 + 0.5) / w as f64 * SPAN, cx, &mut out);
                }
            }
        }
    }
    out
}

/// Self-attention over the tokens of every scale and frame.
pub struct MultimodalEncoder {
    pe_proj: Linear,
    layers: Vec<EncoderLayer>,
    temporal: bool,
}

impl MultimodalEncoder {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(&ps.pp(format!("layer{i}")), cfg.c_av, cfg.heads, cfg.ffn_mult))
            .collect::<Result<_>>()?;
        Ok(Self {
            pe_proj: Linear::new(&ps.pp("pe_proj"), cfg.c_av, cfg.c_av)?,
            layers,
            temporal: cfg.temporal_encoding,
        })
    }

    pub fn positional(&self, fused: &FusedPyramid) -> Result<Tensor> {
        let sizes: Vec<(usize, usize)> = fused.levels.iter().map(|l| (l.dims()[2], l.dims()[3])).collect();
        let c = fused.width();
        let pe = spatio_temporal_encoding(fused.frames(), &sizes, c, self.temporal);
        let n = pe.len() / c;
        let dtype = fused.levels[0].dtype();
        let pe = Tensor::from_vec(pe, (1, n, c), fused.levels[0].device())?.to_dtype(dtype)?;
        Ok(self.pe_proj.forward(&pe)?)
    }

    pub fn forward(&self, fused: &FusedPyramid) -> Result<FusedPyramid> {
        let tokens = fused.flatten()?;
        let mut x = (tokens + self.positional(fused)?)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        fused.unflatten_like(&x)
    }
}

/// Audio-derived initial queries plus learned per-query position embeddings.
pub struct QueryBank {
    count: usize,
    init: QueryInit,
    content: Linear,
    constant: Tensor,
    position: Tensor,
}

impl QueryBank {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            count: cfg.n_queries,
            init: cfg.query_init,
            content: Linear::new(&ps.pp("content"), cfg.audio_dim, cfg.d_model)?,
            constant: ps.uniform("constant", &[1, cfg.d_model], 1.0 / (cfg.d_model as f64).sqrt())?,
            position: ps.uniform("position", &[cfg.n_queries, cfg.d_model], 1.0)?,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Initial queries `[N_q, D]`: shared content broadcast to every query,
    /// plus its position embedding.
    pub fn initial(&self, audio: &AudioEmbedding) -> Result<Tensor> {
        let content = match self.init {
            QueryInit::Audio => self.content.forward(&audio.vectors.mean_keepdim(0)?)?,
            QueryInit::Constant => self.constant.clone(),
        };
        Ok(self.position.broadcast_add(&content)?)
    }
}

struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn new(ps: &ParamStore, dim: usize, heads: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&ps.pp("norm1"), dim)?,
            self_attn: MultiHeadAttention::new(&ps.pp("self_attn"), dim, heads)?,
            norm2: LayerNorm::new(&ps.pp("norm2"), dim)?,
            cross_attn: MultiHeadAttention::new(&ps.pp("cross_attn"), dim, heads)?,
            norm3: LayerNorm::new(&ps.pp("norm3"), dim)?,
            ffn: FeedForward::new(&ps.pp("ffn"), dim, mult)?,
        })
    }

    fn forward(&self, q: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(q)?;
        let q = (q + self.self_attn.forward(&h, &h)?)?;
        let h = self.norm2.forward(&q)?;
        let q = (&q + self.cross_attn.forward(&h, memory)?)?;
        let h = self.norm3.forward(&q)?;
        Ok((&q + self.ffn.mlp.forward(&h)?)?)
    }
}

pub struct QueryDecoder {
    memory_proj: Linear,
    layers: Vec<DecoderLayer>,
}

impl QueryDecoder {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            memory_proj: Linear::new(&ps.pp("memory_proj"), cfg.c_av, cfg.d_model)?,
            layers: (0..cfg.dec_layers)
                .map(|i| DecoderLayer::new(&ps.pp(format!("layer{i}")), cfg.d_model, cfg.heads, cfg.ffn_mult))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, fused: &FusedPyramid, initial: &Tensor) -> Result<QueryEmbeddings> {
        let mut q = initial.unsqueeze(0)?;
        if !self.layers.is_empty() {
            let memory = self.memory_proj.forward(&fused.flatten()?)?;
            for layer in &self.layers {
                q = layer.forward(&q, &memory)?;
            }
        }
        Ok(QueryEmbeddings {
            outputs: q.squeeze(0)?,
        })
    }
}

/// The three fusion stages bundled, in order.
pub struct FusionStack {
    pub avff: Avff,
    pub encoder: MultimodalEncoder,
    pub queries: QueryBank,
    pub decoder: QueryDecoder,
}

impl FusionStack {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig, visual_channels: [usize; 3]) -> Result<Self> {
        Ok(Self {
            avff: Avff::new(&ps.pp("avff"), cfg, visual_channels)?,
            encoder: MultimodalEncoder::new(&ps.pp("encoder"), cfg)?,
            queries: QueryBank::new(&ps.pp("queries"), cfg)?,
            decoder: QueryDecoder::new(&ps.pp("decoder"), cfg)?,
        })
    }
}

pub fn avff(stack: &FusionStack, pyramid: &FeaturePyramid, audio: &AudioEmbedding) -> Result<FusedPyramid> {
    stack.avff.forward(pyramid, audio)
}

pub fn mm_encode(stack: &FusionStack, fused: &FusedPyramid) -> Result<FusedPyramid> {
    stack.encoder.forward(fused)
}

pub fn decode_queries(stack: &FusionStack, fused: &FusedPyramid, audio: &AudioEmbedding) -> Result<QueryEmbeddings> {
    let initial = stack.queries.initial(audio)?;
    stack.decoder.forward(fused, &initial)
}
