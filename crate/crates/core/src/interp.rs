//! Bilinear resampling weights (half-pixel centers, edge clamped).
//!
//! The same weights back both the scalar mask resize and the differentiable
//! tensor upsample used by the loss, so the two agree exactly.

use candle_core::{DType, Device, Tensor};

/// For each output index, the two source taps and their weights.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 2]> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            [(lo, 1.0 - frac), (hi, frac)]
        })
        .collect()
}

/// Dense `[out_len, in_len]` interpolation matrix.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (i, taps) in bilinear_taps(in_len, out_len).iter().enumerate() {
        for &(j, w) in taps {
            m[i * in_len + j] += w;
        }
    }
    m
}

/// Resample the trailing two dims of a scalar grid.
pub fn resample_grid(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, rx) in tx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, wy) in ry {
                for &(sx, wx) in rx {
                    acc += wy * wx * src[sy * w + sx];
                }
            }
            out[oy * out_w + ox] = acc;
        }
    }
    out
}

/// Differentiable bilinear resize of a tensor's last two dims, as
/// `Ry · X · Rxᵀ`. Only rank-2 matmuls are used: batched products against a
/// broadcast operand do not backpropagate correctly.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let dims = x.dims().to_vec();
    let n = dims.len();
    if n < 2 {
        candle_core::bail!("resize_bilinear needs at least 2 dims, got {dims:?}");
    }
    let (h, w) = (dims[n - 2], dims[n - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let lead: usize = dims[..n - 2].iter().product();
    let ryt = matrix_tensor(h, out_h, x.dtype(), x.device())?.t()?.contiguous()?;
    let rxt = matrix_tensor(w, out_w, x.dtype(), x.device())?.t()?.contiguous()?;
    // Columns first: [lead·h, w] · [w, ow].
    let cols = x.reshape((lead * h, w))?.matmul(&rxt)?;
    // Then rows, with h moved innermost: [lead·ow, h] · [h, oh].
    let cols = cols.reshape((lead, h, out_w))?.transpose(1, 2)?.contiguous()?;
    let both = cols.reshape((lead * out_w, h))?.matmul(&ryt)?;
    let out = both.reshape((lead, out_w, out_h))?.transpose(1, 2)?;
    let mut out_dims = dims[..n - 2].to_vec();
    out_dims.extend([out_h, out_w]);
    out.reshape(out_dims)
}

fn matrix_tensor(
    in_len: usize,
    out_len: usize,
    dtype: DType,
    device: &Device,
) -> candle_core::Result<Tensor> {
    Tensor::from_vec(bilinear_matrix(in_len, out_len), (out_len, in_len), device)?.to_dtype(dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_partition_unity() {
        for (i, o) in [(4, 8), (8, 4), (16, 64), (7, 3), (1, 5)] {
            for taps in bilinear_taps(i, o) {
                assert!((taps[0].1 + taps[1].1 - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tensor_resize_matches_scalar_grid() {
        let src: Vec<f64> = (0..20).map(|v| (v as f64 * 0.37).sin()).collect();
        let t = Tensor::from_vec(src.clone(), (1, 4, 5), &Device::Cpu).unwrap();
        let up = resize_bilinear(&t, 9, 6).unwrap();
        let got: Vec<f64> = up.flatten_all().unwrap().to_vec1().unwrap();
        let want = resample_grid(&src, 4, 5, 9, 6);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let taps = bilinear_taps(4, 2);
        assert_eq!(taps[0], [(0, 0.5), (1, 0.5)]);
        assert_eq!(taps[1], [(2, 0.5), (3, 0.5)]);
    }
}
