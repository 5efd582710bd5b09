//! Batch request and response JSON objects for generate and tryon.
//! Requests are one JSON object per line; paths resolve relative to the
//! request file. Responses mirror the output directory: one line per
//! request, and successful tryon lines double as evaluation manifest rows.

use serde::{Deserialize, Serialize};

/// One garment-conditioned text-to-image request.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequestLine {
    /// Garment product image (PNG).
    pub garment: String,
    /// Description of the garment, fed to the garment encoder.
    pub garment_prompt: String,
    /// Description of the target scene, fed to the denoiser.
    pub target_prompt: String,
    /// Per-request seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// One virtual try-on request.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TryonRequestLine {
    /// Source person image (PNG).
    pub person: String,
    /// Garment product image (PNG).
    pub garment: String,
    /// Binary mask marking the region to generate (PNG, white = generate).
    pub mask: String,
    /// Pose conditioning image; requires pose_kind.
    #[serde(default)]
    pub pose: Option<String>,
    /// none, keypoint_render, or dense_coords.
    #[serde(default)]
    pub pose_kind: Option<String>,
    pub garment_prompt: String,
    pub target_prompt: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// One line of responses.jsonl. File paths are relative to the output
/// directory, so a successful tryon line is directly usable as an
/// evaluation manifest row.
#[derive(Debug, Clone, Serialize)]
pub struct ResponseLine {
    pub index: usize,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub garment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResponseLine {
    pub fn failure(index: usize, method: &str, error: String) -> Self {
        ResponseLine {
            index,
            method: method.into(),
            image: None,
            reference: None,
            mask: None,
            garment: None,
            seed: None,
            error: Some(error),
        }
    }
}
