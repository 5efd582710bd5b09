//! Pixel/latent codec boundary.
//!
//! The workbench runs its denoiser in a reduced spatial space. The default
//! codec is deliberately simple and invertible on block-constant images up to
//! summation rounding: encode averages non-overlapping blocks, decode repeats
//! each latent cell back out. Channel count is preserved in both directions.

use crate::error::{Result, WeftError};
use crate::latent::{self, LatentTensor, Space};

/// Maps images to latents and back. `encode` divides each spatial dimension
/// by `factor()`; `decode` multiplies them back.
pub trait LatentCodec {
    /// Spatial reduction factor applied per dimension.
    fn factor(&self) -> usize;

    /// Channel count of the latent space (equals the image channel count for
    /// codecs that do not remap channels).
    fn latent_channels(&self, image_channels: usize) -> usize;

    /// Worst-case round-trip max-abs error for inputs with entries in [0, 1].
    fn tolerance(&self) -> f64;

    fn encode_image(&self, image: &LatentTensor) -> Result<LatentTensor>;

    fn decode_latent(&self, latent: &LatentTensor) -> Result<LatentTensor>;
}

/// Block-average encoder with nearest-neighbor decoder.
#[derive(Debug, Clone, Copy)]
pub struct BlockCodec {
    factor: usize,
}

impl BlockCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(WeftError::Config("codec factor must be positive".into()));
        }
        Ok(BlockCodec { factor })
    }
}

impl Default for BlockCodec {
    fn default() -> Self {
        BlockCodec { factor: 4 }
    }
}

impl LatentCodec for BlockCodec {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels
    }

    fn tolerance(&self) -> f64 {
        // A block's mean can sit a full data range away from one of its
        // pixels, so only block-constant content round-trips exactly.
        1.0
    }

    fn encode_image(&self, image: &LatentTensor) -> Result<LatentTensor> {
        image.expect_space(Space::Pixel)?;
        let latent = latent::block_mean(image.tensor(), self.factor)?;
        LatentTensor::new(latent, Space::Latent)
    }

    fn decode_latent(&self, latent: &LatentTensor) -> Result<LatentTensor> {
        latent.expect_space(Space::Latent)?;
        let image = latent::nearest_upsample(latent.tensor(), self.factor);
        LatentTensor::new(image, Space::Pixel)
    }
}
