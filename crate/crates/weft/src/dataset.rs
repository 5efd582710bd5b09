//! Dataset vocabulary shared by training and the synthesis engine: semantic
//! parse maps, the per-example record type, and prompt routing.

use serde::{Deserialize, Serialize};

use crate::control::{PoseKind, PoseMap};
use crate::error::{Result, WeftError};
use crate::latent::{LatentTensor, Space};
use crate::tensor::{fnv1a64, tensor_hash, Tensor};

/// Semantic segmentation labels. The numeric values are the on-disk and
/// in-manifest encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ParseLabel {
    Background = 0,
    Skin = 1,
    Hair = 2,
    Garment = 3,
    Other = 4,
}

impl ParseLabel {
    pub const ALL: [ParseLabel; 5] = [
        ParseLabel::Background,
        ParseLabel::Skin,
        ParseLabel::Hair,
        ParseLabel::Garment,
        ParseLabel::Other,
    ];
}

impl TryFrom<u8> for ParseLabel {
    type Error = WeftError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ParseLabel::Background),
            1 => Ok(ParseLabel::Skin),
            2 => Ok(ParseLabel::Hair),
            3 => Ok(ParseLabel::Garment),
            4 => Ok(ParseLabel::Other),
            other => Err(WeftError::InvalidTensor(format!("parse label {other} out of range"))),
        }
    }
}

/// Dense label grid over an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseMap {
    labels: Vec<u8>,
    height: usize,
    width: usize,
}

impl ParseMap {
    pub fn new(labels: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width || height == 0 || width == 0 {
            return Err(WeftError::ShapeMismatch {
                expected: format!("{height}*{width} labels"),
                got: format!("{}", labels.len()),
            });
        }
        for &l in &labels {
            ParseLabel::try_from(l)?;
        }
        Ok(ParseMap { labels, height, width })
    }

    pub fn filled(label: ParseLabel, height: usize, width: usize) -> Self {
        ParseMap { labels: vec![label as u8; height * width], height, width }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> ParseLabel {
        ParseLabel::try_from(self.labels[y * self.width + x]).expect("validated at construction")
    }

    pub fn set(&mut self, y: usize, x: usize, label: ParseLabel) {
        self.labels[y * self.width + x] = label as u8;
    }

    /// Binary `[1, H, W]` mask of the pixels carrying `label`.
    pub fn mask_for(&self, label: ParseLabel) -> Tensor {
        let data: Vec<f64> =
            self.labels.iter().map(|&l| if l == label as u8 { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&[1, self.height, self.width], data)
    }

    pub fn count(&self, label: ParseLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label as u8).count()
    }
}

/// One training example: the dressed person, the garment reference, pose and
/// parse conditioning, the inpainting mask, and the two prompts.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub person_image: LatentTensor,
    pub garment_image: LatentTensor,
    pub dense_map: PoseMap,
    pub parse_map: ParseMap,
    pub agnostic_mask: Tensor,
    pub garment_category_prompt: String,
    pub target_prompt: String,
}

impl DatasetRecord {
    /// Checks the cross-field contracts: consistent spatial dimensions, a
    /// binary mask, and pixel-space images.
    pub fn validate(&self) -> Result<()> {
        self.person_image.expect_space(Space::Pixel)?;
        self.garment_image.expect_space(Space::Pixel)?;
        let (h, w) = (self.person_image.height(), self.person_image.width());
        if self.garment_image.height() != h || self.garment_image.width() != w {
            return Err(WeftError::ShapeMismatch {
                expected: format!("garment image {h}x{w}"),
                got: format!("{}x{}", self.garment_image.height(), self.garment_image.width()),
            });
        }
        if self.agnostic_mask.shape() != [1, h, w] {
            return Err(WeftError::ShapeMismatch {
                expected: format!("mask [1, {h}, {w}]"),
                got: format!("{:?}", self.agnostic_mask.shape()),
            });
        }
        for &m in self.agnostic_mask.data() {
            if m != 0.0 && m != 1.0 {
                return Err(WeftError::InvalidTensor(format!("mask must be binary, found {m}")));
            }
        }
        if self.parse_map.height() != h || self.parse_map.width() != w {
            return Err(WeftError::ShapeMismatch {
                expected: format!("parse map {h}x{w}"),
                got: format!("{}x{}", self.parse_map.height(), self.parse_map.width()),
            });
        }
        if self.dense_map.kind != PoseKind::None
            && (self.dense_map.height() != h || self.dense_map.width() != w)
        {
            return Err(WeftError::ShapeMismatch {
                expected: format!("dense map [*, {h}, {w}]"),
                got: format!("{:?}", self.dense_map.data.shape()),
            });
        }
        Ok(())
    }

    /// Content-addressed identity, independent of the record's position in
    /// any batch or file. Used to derive per-example training randomness.
    pub fn content_hash(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |h: u64| {
            acc = fnv1a64(&[acc.to_le_bytes(), h.to_le_bytes()].concat());
        };
        mix(tensor_hash(self.person_image.tensor()));
        mix(tensor_hash(self.garment_image.tensor()));
        mix(tensor_hash(&self.dense_map.data));
        mix(fnv1a64(self.parse_map.labels()));
        mix(tensor_hash(&self.agnostic_mask));
        mix(fnv1a64(self.garment_category_prompt.as_bytes()));
        mix(fnv1a64(self.target_prompt.as_bytes()));
        acc
    }
}

/// Routes a record's prompts: the garment encoder receives the category
/// description, the denoiser receives the target description. Empty strings
/// are legal and map to the empty-prompt embedding downstream.
pub fn dispatch_prompts(rec: &DatasetRecord) -> (&str, &str) {
    (&rec.garment_category_prompt, &rec.target_prompt)
}
