//! Shared domain types: frame clips, spectrogram clips, binary masks and
//! their run-length encoding.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp;

/// Video frames `[T, 3, H0, W0]`. Still images are clips with `T = 1`.
#[derive(Debug, Clone)]
pub struct FrameClip {
    frames: Tensor,
}

impl FrameClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        let dims = frames.dims();
        match dims {
            [t, 3, h, w] if *t >= 1 && *h > 0 && *w > 0 => Ok(Self { frames }),
            _ => Err(Error::shape(format!(
                "frame clip must be [T>=1, 3, H>0, W>0], got {dims:?}"
            ))),
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.frames.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.dims()[3]
    }
}

/// Log-mel spectrograms `[T, H_a, W_a]`, one per frame.
#[derive(Debug, Clone)]
pub struct AudioClip {
    spectrograms: Tensor,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(spectrograms: Tensor, sample_rate_hz: u32) -> Result<Self> {
        let dims = spectrograms.dims();
        match dims {
            [t, ha, wa] if *t >= 1 && *ha > 0 && *wa > 0 => Ok(Self {
                spectrograms,
                sample_rate_hz,
            }),
            _ => Err(Error::shape(format!(
                "audio clip must be [T>=1, H_a, W_a], got {dims:?}"
            ))),
        }
    }

    pub fn spectrograms(&self) -> &Tensor {
        &self.spectrograms
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.spectrograms.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Keep the first `t` segments, or repeat the last one up to `t`.
    pub fn fit_to(&self, t: usize) -> Result<AudioClip> {
        let have = self.len();
        let spectrograms = if have == t {
            self.spectrograms.clone()
        } else if have > t {
            self.spectrograms.narrow(0, 0, t)?
        } else {
            let last = self.spectrograms.narrow(0, have - 1, 1)?;
            let pad = last.repeat((t - have, 1, 1))?;
            Tensor::cat(&[&self.spectrograms, &pad], 0)?
        };
        AudioClip::new(spectrograms, self.sample_rate_hz)
    }

    pub fn check_paired(&self, frames: &FrameClip) -> Result<()> {
        if self.len() != frames.len() {
            return Err(Error::shape(format!(
                "audio has {} segments but clip has {} frames",
                self.len(),
                frames.len()
            )));
        }
        Ok(())
    }
}

/// Binary mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as u8 as f64).collect()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Uncompressed COCO-style run lengths: column-major scan, first run counts
/// zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRLE {
    #[serde(rename = "size")]
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl MaskRLE {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    pub fn area(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as usize).sum()
    }
}

pub fn rle_encode(mask: &BinaryMask) -> MaskRLE {
    let (h, w) = (mask.height, mask.width);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    MaskRLE {
        size: [h, w],
        counts,
    }
}

pub fn rle_decode(rle: &MaskRLE) -> Result<BinaryMask> {
    let (h, w) = (rle.height(), rle.width());
    let total: usize = rle.counts.iter().map(|&c| c as usize).sum();
    if total != h * w {
        return Err(Error::LengthMismatch {
            expected: h * w,
            got: total,
        });
    }
    let mut mask = BinaryMask::zeros(h, w);
    let mut idx = 0usize;
    let mut value = false;
    for &c in &rle.counts {
        for _ in 0..c {
            let (x, y) = (idx / h, idx % h);
            if value {
                mask.set(y, x, true);
            }
            idx += 1;
        }
        value = !value;
    }
    Ok(mask)
}

/// Bilinear resample of the 0/1 field followed by `value > threshold`.
pub fn resize_mask(mask: &BinaryMask, h: usize, w: usize, threshold: f64) -> BinaryMask {
    assert!(h > 0 && w > 0, "target size must be positive");
    if (h, w) == (mask.height, mask.width) {
        return mask.clone();
    }
    let field = interp::resample_grid(&mask.as_f64(), mask.height, mask.width, h, w);
    BinaryMask {
        height: h,
        width: w,
        bits: field.into_iter().map(|v| v > threshold).collect(),
    }
}
