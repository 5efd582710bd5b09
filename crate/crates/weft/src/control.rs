//! Try-on control branch: packs inpainting conditions and turns them into
//! additive residuals for the denoiser's skip and mid features.
//!
//! The branch copies the denoiser's encoder trunk and mid block. Its input
//! convolution is widened to also ingest the packed condition channels; the
//! weights touching the noisy latent are copied from the denoiser and the
//! new channels start at zero. Every residual leaves through a 1x1
//! projection initialized to zero, so a freshly created branch is exactly
//! inert until trained.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::latent::{self, LatentTensor, Space};
use crate::nn::{Bound, Conv2dLayer, Init, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::TextEmbedding;
use crate::unet::{
    build_encoder_levels, ControlResiduals, EncLevel, GraphResiduals, ResBlock, TimeMlp,
    UNetConfig,
};

/// Number of channels the fixed pose slot occupies in packed conditions.
pub const POSE_SLOT_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseKind {
    /// No pose signal; the slot is zero-filled.
    None,
    /// Single-channel rendering of skeleton keypoints.
    KeypointRender,
    /// Two-channel normalized body coordinates.
    DenseCoords,
}

impl PoseKind {
    pub fn channels(&self) -> usize {
        match self {
            PoseKind::None => 0,
            PoseKind::KeypointRender => 1,
            PoseKind::DenseCoords => 2,
        }
    }
}

impl std::str::FromStr for PoseKind {
    type Err = WeftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PoseKind::None),
            "keypoint_render" | "keypoint" => Ok(PoseKind::KeypointRender),
            "dense_coords" | "dense" => Ok(PoseKind::DenseCoords),
            other => Err(WeftError::Config(format!("unknown pose kind {other}"))),
        }
    }
}

/// Pose conditioning: `data` is `[channels, H, W]` where the channel count is
/// fixed by `kind`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMap {
    pub data: Tensor,
    pub kind: PoseKind,
}

impl PoseMap {
    pub fn new(data: Tensor, kind: PoseKind) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[0] != kind.channels() {
            return Err(WeftError::ShapeMismatch {
                expected: format!("[{}, H, W] for {kind:?}", kind.channels()),
                got: format!("{:?}", data.shape()),
            });
        }
        Ok(PoseMap { data, kind })
    }

    pub fn none(h: usize, w: usize) -> Self {
        PoseMap { data: Tensor::zeros(&[0, h, w]), kind: PoseKind::None }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Packed pixel-space condition block for the control branch.
///
/// Channel order: `[mask, masked image channels..., pose slot (2)]`. The
/// pose slot is always present; kinds with fewer channels leave the
/// remainder at zero so swapping pose kinds never changes the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TryOnCondition {
    pub packed: Tensor,
    pub image_channels: usize,
    pub pose_kind: PoseKind,
}

impl TryOnCondition {
    pub fn channels(&self) -> usize {
        self.packed.shape()[0]
    }
}

/// Expected packed channel count for an image with `c` channels.
pub fn packed_channels(c: usize) -> usize {
    1 + c + POSE_SLOT_CHANNELS
}

/// Packs `[mask, image_context, pose]` into one pixel-space block.
/// `image_context` is the already-masked source image; `mask` is `[1, H, W]`
/// with 1 marking the region to generate.
pub fn pack_condition(
    image_context: &LatentTensor,
    mask: &Tensor,
    pose: &PoseMap,
) -> Result<TryOnCondition> {
    image_context.expect_space(Space::Pixel)?;
    let (c, h, w) = (image_context.channels(), image_context.height(), image_context.width());
    if mask.shape() != [1, h, w] {
        return Err(WeftError::ShapeMismatch {
            expected: format!("[1, {h}, {w}]"),
            got: format!("{:?}", mask.shape()),
        });
    }
    for &m in mask.data() {
        if m != 0.0 && m != 1.0 {
            return Err(WeftError::InvalidTensor(format!("mask must be binary, found {m}")));
        }
    }
    if pose.kind != PoseKind::None && (pose.height() != h || pose.width() != w) {
        return Err(WeftError::ShapeMismatch {
            expected: format!("pose [*, {h}, {w}]"),
            got: format!("{:?}", pose.data.shape()),
        });
    }

    let total = packed_channels(c);
    let mut data = Vec::with_capacity(total * h * w);
    data.extend_from_slice(mask.data());
    data.extend_from_slice(image_context.data());
    data.extend_from_slice(pose.data.data());
    data.resize(total * h * w, 0.0);
    Ok(TryOnCondition {
        packed: Tensor::from_vec(&[total, h, w], data),
        image_channels: c,
        pose_kind: pose.kind,
    })
}

/// Downsamples a packed condition to latent resolution with the block codec
/// convention: area averages everywhere, then the mask channel is
/// re-thresholded at 0.5 to stay binary.
pub fn condition_to_latent(cond: &TryOnCondition, factor: usize) -> Result<Tensor> {
    let mut z = latent::block_mean(&cond.packed, factor)?;
    let hw = z.shape()[1] * z.shape()[2];
    for v in &mut z.data_mut()[..hw] {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    Ok(z)
}

/// Control branch over the denoiser's encoder trunk.
#[derive(Debug, Clone)]
pub struct TryOnControlNet {
    cfg: UNetConfig,
    cond_channels: usize,
    stem: Conv2dLayer,
    time: TimeMlp,
    enc: Vec<EncLevel>,
    mid: ResBlock,
    projections: Vec<Conv2dLayer>,
    prefix: String,
}

impl TryOnControlNet {
    /// Builds the branch under `prefix`, copying every shared parameter from
    /// the denoiser. The widened stem keeps the denoiser's weights on the
    /// latent channels and zeros on the condition channels; the per-site
    /// output projections start at zero.
    pub fn from_denoiser(
        set: &mut ParamSet,
        prefix: &str,
        denoiser_prefix: &str,
        cfg: &UNetConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let cond_channels = packed_channels(cfg.latent_channels);
        let in_channels = cfg.latent_channels + cond_channels;

        let mut init = Init::new(set, prefix, cfg.init_seed);
        let stem = init.conv("stem", cfg.base_channels, in_channels, 3, 1, 1)?;
        let time = TimeMlp::build(&mut init, cfg.time_dim)?;
        let enc = build_encoder_levels(&mut init, cfg, cfg.depth)?;
        let mid = ResBlock::build(&mut init, "mid", cfg.width(cfg.depth), cfg.time_dim, cfg.groups)?;
        let mut projections = Vec::with_capacity(cfg.depth + 1);
        for (i, name) in cfg.residual_sites().iter().enumerate() {
            let ch = cfg.width(if name == "mid" { cfg.depth } else { i });
            projections.push(init.conv_zero(&format!("proj.{name}"), ch, ch, 1, 1, 0)?);
        }

        // Copy shared weights from the denoiser: widened stem gets the
        // latent-channel slice, everything else copies one-to-one.
        let src_stem = set.value_by_name(&format!("{denoiser_prefix}stem.w"))?.clone();
        let mut stem_w = Tensor::zeros(&[cfg.base_channels, in_channels, 3, 3]);
        for o in 0..cfg.base_channels {
            for i in 0..cfg.latent_channels {
                for p in 0..9 {
                    stem_w.data_mut()[(o * in_channels + i) * 9 + p] =
                        src_stem.data()[(o * cfg.latent_channels + i) * 9 + p];
                }
            }
        }
        set.set_value(&format!("{prefix}stem.w"), stem_w)?;
        let src_stem_b = set.value_by_name(&format!("{denoiser_prefix}stem.b"))?.clone();
        set.set_value(&format!("{prefix}stem.b"), src_stem_b)?;
        for name in set.sorted_names() {
            let Some(suffix) = name.strip_prefix(prefix) else { continue };
            if suffix.starts_with("stem.") || suffix.starts_with("proj.") {
                continue;
            }
            let src = set.value_by_name(&format!("{denoiser_prefix}{suffix}"))?.clone();
            set.set_value(&name, src)?;
        }

        Ok(TryOnControlNet {
            cfg: *cfg,
            cond_channels,
            stem,
            time,
            enc,
            mid,
            projections,
            prefix: prefix.to_string(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    /// Produces residuals for every site on an existing graph. `x` is the
    /// noisy latent `[latent_channels, h, w]`; `cond_latent` is the packed
    /// condition at latent resolution `[cond_channels, h, w]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bnd: &Bound,
        x: Var,
        t: usize,
        text: &TextEmbedding,
        cond_latent: Var,
    ) -> Result<GraphResiduals> {
        let xs = g.val(x).shape().to_vec();
        let cs = g.val(cond_latent).shape().to_vec();
        if xs.len() != 3 || xs[0] != self.cfg.latent_channels {
            return Err(WeftError::ShapeMismatch {
                expected: format!("[{}, h, w]", self.cfg.latent_channels),
                got: format!("{xs:?}"),
            });
        }
        if cs != [self.cond_channels, xs[1], xs[2]] {
            return Err(WeftError::ShapeMismatch {
                expected: format!("[{}, {}, {}]", self.cond_channels, xs[1], xs[2]),
                got: format!("{cs:?}"),
            });
        }
        if text.dim() != self.cfg.text_dim {
            return Err(WeftError::ShapeMismatch {
                expected: format!("text dim {}", self.cfg.text_dim),
                got: format!("{}", text.dim()),
            });
        }

        let text_var = g.constant(text.vectors.clone());
        let temb = self.time.forward(g, bnd, t);
        let sites = self.cfg.residual_sites();

        let stacked = g.concat_channels(x, cond_latent);
        let mut h = self.stem.forward(g, bnd, stacked);
        let mut feats: Vec<Var> = vec![h];
        for level in &self.enc {
            h = level.down.forward(g, bnd, h);
            h = level.res.forward(g, bnd, h, temb);
            let attn = level.attn.forward(g, bnd, h, text_var, None);
            h = attn.x;
            feats.push(h);
        }
        let m = self.mid.forward(g, bnd, h, temb);

        let mut out = Vec::with_capacity(sites.len());
        for (i, name) in sites.iter().enumerate() {
            let feat = if name == "mid" { m } else { feats[i] };
            let r = self.projections[i].forward(g, bnd, feat);
            out.push((name.clone(), r));
        }
        Ok(GraphResiduals { sites: out })
    }

    /// Pure wrapper returning residual tensors.
    pub fn forward(
        &self,
        set: &ParamSet,
        x: &Tensor,
        t: usize,
        text: &TextEmbedding,
        cond_latent: &Tensor,
    ) -> Result<ControlResiduals> {
        let mut g = Graph::new();
        let bnd = set.bind(&mut g);
        let xv = g.constant(x.clone());
        let cv = g.constant(cond_latent.clone());
        let res = self.forward_graph(&mut g, &bnd, xv, t, text, cv)?;
        Ok(ControlResiduals {
            sites: res.sites.into_iter().map(|(n, v)| (n, g.val(v).clone())).collect(),
        })
    }
}
