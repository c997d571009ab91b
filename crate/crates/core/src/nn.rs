//! Small layer library over candle tensors with a seeded parameter store.
//!
//! Parameter initialization draws from a ChaCha stream keyed by the model
//! seed and creation order, so two builds with the same seed are
//! bit-identical.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type TResult<T> = candle_core::Result<T>;

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Named, seeded parameter registry. Cloning shares the registry.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                device: device.clone(),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> ParamStore {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            inner: self.inner.clone(),
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        self.inner.lock().unwrap().device.clone()
    }

    fn create(&self, name: &str, shape: &[usize], fill: impl FnMut(&mut ChaCha8Rng) -> f64) -> TResult<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().unwrap();
        if inner.vars.contains_key(&full) {
            candle_core::bail!("parameter {full} registered twice");
        }
        let n: usize = shape.iter().product();
        let mut fill = fill;
        let data: Vec<f64> = (0..n).map(|_| fill(&mut inner.rng)).collect();
        let t = Tensor::from_vec(data, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> TResult<Tensor> {
        self.create(name, shape, |rng| rng.random_range(-bound..=bound))
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> TResult<Tensor> {
        self.create(name, shape, |_| value)
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite every registered parameter found in `values`; unknown or
    /// missing names are reported.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> TResult<()> {
        let inner = self.inner.lock().unwrap();
        for (name, var) in &inner.vars {
            let v = values
                .get(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("missing parameter {name}")))?;
            if v.dims() != var.dims() {
                candle_core::bail!("parameter {name}: shape {:?} != {:?}", v.dims(), var.dims());
            }
            var.set(&v.to_dtype(inner.dtype)?)?;
        }
        for name in values.keys() {
            if !inner.vars.contains_key(name) {
                candle_core::bail!("unexpected parameter {name}");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// PyTorch-style uniform(±1/√fan_in) init.
    pub fn new(ps: &ParamStore, in_dim: usize, out_dim: usize) -> TResult<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: ps.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: Some(ps.uniform("bias", &[out_dim], bound)?),
        })
    }

    pub fn no_bias(ps: &ParamStore, in_dim: usize, out_dim: usize) -> TResult<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: ps.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> TResult<Tensor> {
        let wt = self.weight.t()?;
        // Flatten leading dims: batched matmul against a broadcast weight
        // gets its backward pass wrong.
        let y = match x.rank() {
            2 => x.matmul(&wt)?,
            _ => {
                let mut dims = x.dims().to_vec();
                let last = dims.pop().unwrap_or(1);
                let rows: usize = dims.iter().product();
                let y = x.reshape((rows, last))?.matmul(&wt)?;
                dims.push(wt.dim(1)?);
                y.reshape(dims)?
            }
        };
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

/// Two linear layers with a ReLU between.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(ps: &ParamStore, in_dim: usize, hidden: usize, out_dim: usize) -> TResult<Self> {
        Ok(Self {
            fc1: Linear::new(&ps.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::new(&ps.pp("fc2"), hidden, out_dim)?,
        })
    }
}

impl Module for Mlp2 {
    fn forward(&self, x: &Tensor) -> TResult<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(ps: &ParamStore, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> TResult<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform("weight", &[cout, cin, k, k], bound)?,
            bias: Some(ps.uniform("bias", &[cout], bound)?),
            stride,
            padding,
        })
    }

    /// He-uniform weights and zero bias, for frozen random feature stacks.
    pub fn he(ps: &ParamStore, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> TResult<Self> {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform("weight", &[cout, cin, k, k], bound)?,
            bias: Some(ps.constant("bias", &[cout], 0.0)?),
            stride,
            padding,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> TResult<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// 1×1 convolution as a per-pixel linear map over `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    linear: Linear,
}

impl PointwiseConv {
    pub fn new(ps: &ParamStore, cin: usize, cout: usize) -> TResult<Self> {
        Ok(Self {
            linear: Linear::new(ps, cin, cout)?,
        })
    }

    /// Map `[N, C, H, W]` to tokens `[N, H*W, C_out]`.
    pub fn to_tokens(&self, x: &Tensor) -> TResult<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = x.reshape((n, c, h * w))?.transpose(1, 2)?;
        self.linear.forward(&tokens)
    }
}

impl Module for PointwiseConv {
    fn forward(&self, x: &Tensor) -> TResult<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let y = self.to_tokens(x)?;
        let cout = y.dim(2)?;
        y.transpose(1, 2)?.reshape((n, cout, h, w))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, dim: usize) -> TResult<Self> {
        Ok(Self {
            gamma: ps.constant("gamma", &[dim], 1.0)?,
            beta: ps.constant("beta", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> TResult<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

pub fn softmax_last(x: &Tensor) -> TResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Query rows processed per attention chunk; bounds the score matrix size
/// for long token sequences.
const ATTN_QUERY_CHUNK: usize = 512;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &ParamStore, dim: usize, heads: usize) -> TResult<Self> {
        if heads == 0 || dim % heads != 0 {
            candle_core::bail!("width {dim} is not divisible by {heads} heads");
        }
        Ok(Self {
            q: Linear::new(&ps.pp("q"), dim, dim)?,
            k: Linear::new(&ps.pp("k"), dim, dim)?,
            v: Linear::new(&ps.pp("v"), dim, dim)?,
            out: Linear::new(&ps.pp("out"), dim, dim)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> TResult<Tensor> {
        let (b, l, _) = x.dims3()?;
        x.reshape((b, l, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()
    }

    /// Attention probabilities `[B, heads, Lq, Lk]` (diagnostics and tests).
    pub fn weights(&self, query: &Tensor, kv: &Tensor) -> TResult<Tensor> {
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        softmax_last(&(q.matmul(&k.t()?)? * scale)?)
    }

    /// `query` `[B, Lq, D]` attends over `kv` `[B, Lk, D]`.
    pub fn forward(&self, query: &Tensor, kv: &Tensor) -> TResult<Tensor> {
        let (b, lq, dim) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let kt = k.t()?.contiguous()?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < lq {
            let len = ATTN_QUERY_CHUNK.min(lq - start);
            let qc = if len == lq { q.clone() } else { q.narrow(2, start, len)? };
            let probs = softmax_last(&(qc.matmul(&kt)? * scale)?)?;
            parts.push(probs.matmul(&v)?);
            start += len;
        }
        let ctx = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Tensor::cat(&parts, 2)?
        };
        let ctx = ctx.transpose(1, 2)?.reshape((b, lq, dim))?;
        self.out.forward(&ctx)
    }
}

/// Sinusoidal features of a scalar position: `width` values alternating
/// sin/cos over geometrically spaced frequencies.
pub fn sinusoid(pos: f64, width: usize, out: &mut Vec<f64>) {
    let half = width / 2;
    for i in 0..half {
        let freq = 1.0 / 10_000f64.powf(i as f64 / half.max(1) as f64);
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    if width % 2 == 1 {
        out.push(0.0);
    }
}
