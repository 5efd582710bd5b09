//! Spatial tensors tagged with the space they live in.
//!
//! Images and latents share one container; the tag keeps codec boundaries
//! honest (encode wants pixels, the denoiser wants latents). Also hosts the
//! nearest-neighbor warps used by augmentation and the toy generator.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pixel,
    Latent,
}

/// `[C, H, W]` array in pixel or latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    tensor: Tensor,
    space: Space,
}

impl LatentTensor {
    pub fn new(tensor: Tensor, space: Space) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(WeftError::InvalidTensor(format!(
                "expected [C,H,W], got {:?}",
                tensor.shape()
            )));
        }
        let (c, h, w) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
        if c < 1 || h < 1 || w < 1 {
            return Err(WeftError::InvalidTensor(format!(
                "every dimension must be positive, got [{c},{h},{w}]"
            )));
        }
        if !tensor.all_finite() {
            return Err(WeftError::InvalidTensor("non-finite entries".into()));
        }
        Ok(LatentTensor { tensor, space })
    }

    pub fn zeros(c: usize, h: usize, w: usize, space: Space) -> Result<Self> {
        Self::new(Tensor::zeros(&[c, h, w]), space)
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn expect_space(&self, space: Space) -> Result<()> {
        if self.space != space {
            return Err(WeftError::InvalidTensor(format!(
                "expected {:?}-space input, got {:?}",
                space, self.space
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.tensor.max_abs_diff(&other.tensor)
    }

    pub fn mse(&self, other: &LatentTensor) -> f64 {
        self.tensor.mse(&other.tensor)
    }
}

/// Nearest-neighbor warp of a `[H, W]` plane. `map` sends a destination cell
/// to its source cell; out-of-range sources take `fill`.
pub fn warp_plane<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    fill: T,
    map: impl Fn(usize, usize) -> (i64, i64),
) -> Vec<T> {
    let mut out = vec![fill; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y, x);
            if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                out[y * w + x] = src[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

fn warp_chw(t: &Tensor, fill: f64, map: impl Fn(usize, usize) -> (i64, i64) + Copy) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        data.extend(warp_plane(&t.data()[ch * h * w..(ch + 1) * h * w], h, w, fill, map));
    }
    Tensor::from_vec(t.shape(), data)
}

/// Horizontal mirror of a `[C, H, W]` tensor.
pub fn flip_h(t: &Tensor) -> Tensor {
    let w = t.shape()[2];
    warp_chw(t, 0.0, |y, x| (y as i64, (w - 1 - x) as i64))
}

/// Integer translation; exposed cells take `fill`.
pub fn shift2d(t: &Tensor, dy: i64, dx: i64, fill: f64) -> Tensor {
    warp_chw(t, fill, |y, x| (y as i64 - dy, x as i64 - dx))
}

/// Uniform scale about the image center with nearest sampling.
pub fn scale_nearest(t: &Tensor, factor: f64, fill: f64) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    warp_chw(t, fill, |y, x| {
        let sy = cy + (y as f64 - cy) / factor;
        let sx = cx + (x as f64 - cx) / factor;
        (sy.round() as i64, sx.round() as i64)
    })
}

/// Per-channel mean over non-overlapping `f x f` blocks.
pub fn block_mean(t: &Tensor, f: usize) -> Result<Tensor> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(WeftError::ShapeMismatch {
            expected: format!("spatial dims divisible by {f}"),
            got: format!("[{c},{h},{w}]"),
        });
    }
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for by in 0..oh {
            for bx in 0..ow {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += t.data()[ch * h * w + (by * f + dy) * w + bx * f + dx];
                    }
                }
                out[ch * oh * ow + by * ow + bx] = acc * norm;
            }
        }
    }
    Ok(Tensor::from_vec(&[c, oh, ow], out))
}

/// Nearest upsample by an integer factor.
pub fn nearest_upsample(t: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * oh * ow + y * ow + x] = t.data()[ch * h * w + (y / f) * w + x / f];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Downsample a `[1, H, W]` mask by area-averaging blocks, then threshold at
/// 0.5 so the result stays binary.
pub fn downsample_mask(mask: &Tensor, f: usize) -> Result<Tensor> {
    let mut m = block_mean(mask, f)?;
    for v in m.data_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    Ok(m)
}
