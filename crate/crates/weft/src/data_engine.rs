//! Synthesis pipeline that turns raw figure images into training records.
//! A parser backend produces body maps, a tagger backend produces prompts,
//! and a drawer backend repaints the garment region; the pipeline wires them
//! together, derives the garment-agnostic mask, and emits a JSONL manifest
//! of on-disk records. Every backend is pluggable; the shipped
//! implementations are deterministic mocks that are exact on generator
//! images. Adapters for real services would speak the JSON wire shapes in
//! [`BackendRequest`] and [`BackendResponse`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{PoseKind, PoseMap};
use crate::dataset::{DatasetRecord, ParseLabel, ParseMap};
use crate::error::{Result, WeftError};
use crate::imageio;
use crate::latent::{LatentTensor, Space};
use crate::tensor::{derive_seed, fnv1a64, tensor_hash, Tensor};

/// Version string stamped into every manifest entry's provenance.
pub const ENGINE_VERSION: &str = "0.1.0";

/// Default dilation radius (in pixels) for the garment-agnostic mask.
pub const DEFAULT_DILATION_RADIUS: usize = 3;

/// Segmentation backend: image to per-pixel parse labels.
pub trait Segmenter {
    fn id(&self) -> &str;
    fn segment(&self, image: &LatentTensor) -> Result<ParseMap>;
}

/// Body-coordinate backend: image to a dense two-channel pose map.
pub trait PoseEstimator {
    fn id(&self) -> &str;
    fn estimate(&self, image: &LatentTensor) -> Result<PoseMap>;
}

/// Description backend: image to a short garment description.
pub trait Captioner {
    fn id(&self) -> &str;
    fn caption(&self, image: &LatentTensor) -> Result<String>;
}

/// Prompt backend: garment description to a full inpainting prompt built
/// from a template. The seed fixes the template choice.
pub trait TemplateSource {
    fn id(&self) -> &str;
    fn inpaint_prompt(&self, description: &str, seed: u64) -> Result<String>;
}

/// Repaint backend: fills the masked region of an image from a prompt,
/// leaving everything outside the mask untouched.
pub trait Inpainter {
    fn id(&self) -> &str;
    fn inpaint(
        &self,
        image: &LatentTensor,
        mask: &Tensor,
        dense: &PoseMap,
        prompt: &str,
        seed: u64,
    ) -> Result<LatentTensor>;
}

/// Acceptance predicate deciding whether a synthesized record is kept.
pub type AcceptFn = Box<dyn Fn(&DatasetRecord) -> bool>;

/// Default acceptance: the mask marks at least one pixel and the
/// description is non-empty.
pub fn default_accept(rec: &DatasetRecord) -> bool {
    rec.agnostic_mask.data().iter().any(|&v| v == 1.0)
        && !rec.garment_category_prompt.is_empty()
}

/// The five pluggable backends plus the acceptance predicate.
pub struct EngineBackends {
    pub segmenter: Box<dyn Segmenter>,
    pub pose_estimator: Box<dyn PoseEstimator>,
    pub captioner: Box<dyn Captioner>,
    pub template_source: Box<dyn TemplateSource>,
    pub inpainter: Box<dyn Inpainter>,
    pub accept: AcceptFn,
}

impl EngineBackends {
    /// Builds the full mock stack keyed to a set of generator records.
    pub fn mock(records: &[DatasetRecord]) -> Self {
        EngineBackends {
            segmenter: Box::new(MockSegmenter::from_records(records)),
            pose_estimator: Box::new(MockPoseEstimator::from_records(records)),
            captioner: Box::new(MockCaptioner::from_records(records)),
            template_source: Box::new(MockTemplateSource),
            inpainter: Box::new(MockInpainter),
            accept: Box::new(default_accept),
        }
    }
}

/// Engine-level knobs. `seed` fans out to a per-record seed that drives the
/// stochastic backends; `dilation_radius` shapes the agnostic mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    pub seed: u64,
    pub dilation_radius: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { seed: 0, dilation_radius: DEFAULT_DILATION_RADIUS }
    }
}

/// Request shape a remote backend adapter would POST. Exactly one of the
/// payload fields is set per backend kind; images travel as base64 PNG.
/// Only mocks ship in this crate, so nothing here performs network calls.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackendRequest {
    /// One of "segmenter", "pose_estimator", "captioner",
    /// "template_source", "inpainter".
    pub backend: String,
    /// Versioned model identifier on the serving side.
    pub model_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_png_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_png_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_png_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Response shape a remote backend adapter would return.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackendResponse {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_png_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_png_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

fn backend_err(id: &str, message: impl Into<String>) -> WeftError {
    WeftError::Backend { id: id.to_string(), message: message.into() }
}

/// Ground-truth segmenter: looks generator images up by content hash.
pub struct MockSegmenter {
    map: BTreeMap<u64, ParseMap>,
}

impl MockSegmenter {
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let map = records
            .iter()
            .map(|r| (tensor_hash(r.person_image.tensor()), r.parse_map.clone()))
            .collect();
        MockSegmenter { map }
    }
}

impl Segmenter for MockSegmenter {
    fn id(&self) -> &str {
        "mock-segmenter-v1"
    }

    fn segment(&self, image: &LatentTensor) -> Result<ParseMap> {
        self.map
            .get(&tensor_hash(image.tensor()))
            .cloned()
            .ok_or_else(|| backend_err(self.id(), "image not in the generator set"))
    }
}

/// Ground-truth pose estimator keyed the same way as [`MockSegmenter`].
pub struct MockPoseEstimator {
    map: BTreeMap<u64, PoseMap>,
}

impl MockPoseEstimator {
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let map = records
            .iter()
            .map(|r| (tensor_hash(r.person_image.tensor()), r.dense_map.clone()))
            .collect();
        MockPoseEstimator { map }
    }
}

impl PoseEstimator for MockPoseEstimator {
    fn id(&self) -> &str {
        "mock-pose-v1"
    }

    fn estimate(&self, image: &LatentTensor) -> Result<PoseMap> {
        self.map
            .get(&tensor_hash(image.tensor()))
            .cloned()
            .ok_or_else(|| backend_err(self.id(), "image not in the generator set"))
    }
}

/// Ground-truth captioner returning the generator's garment description.
pub struct MockCaptioner {
    map: BTreeMap<u64, String>,
}

impl MockCaptioner {
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let map = records
            .iter()
            .map(|r| {
                (tensor_hash(r.person_image.tensor()), r.garment_category_prompt.clone())
            })
            .collect();
        MockCaptioner { map }
    }
}

impl Captioner for MockCaptioner {
    fn id(&self) -> &str {
        "mock-captioner-v1"
    }

    fn caption(&self, image: &LatentTensor) -> Result<String> {
        self.map
            .get(&tensor_hash(image.tensor()))
            .cloned()
            .ok_or_else(|| backend_err(self.id(), "image not in the generator set"))
    }
}

const INPAINT_TEMPLATES: [&str; 4] = [
    "a person wearing a {color} {pattern} {category}",
    "a photo of a person in a {color} {pattern} {category}",
    "someone dressed in a {color} {pattern} {category}",
    "a model wearing a {color} {pattern} {category} outdoors",
];

/// Template source for descriptions of the form
/// "a {color} {pattern} {category}". The seed picks the template.
pub struct MockTemplateSource;

impl TemplateSource for MockTemplateSource {
    fn id(&self) -> &str {
        "mock-template-v1"
    }

    fn inpaint_prompt(&self, description: &str, seed: u64) -> Result<String> {
        let words: Vec<&str> = description.split_whitespace().collect();
        if words.len() != 4 || words[0] != "a" {
            return Err(backend_err(
                self.id(),
                format!("description '{description}' is not of the form 'a color pattern category'"),
            ));
        }
        let template = INPAINT_TEMPLATES[(seed as usize) % INPAINT_TEMPLATES.len()];
        Ok(template
            .replace("{color}", words[1])
            .replace("{pattern}", words[2])
            .replace("{category}", words[3]))
    }
}

/// Procedural inpainter: fills the masked region with a striped texture
/// whose palette and period are derived from the prompt and seed, and
/// copies the input everywhere else.
pub struct MockInpainter;

impl Inpainter for MockInpainter {
    fn id(&self) -> &str {
        "mock-inpainter-v1"
    }

    fn inpaint(
        &self,
        image: &LatentTensor,
        mask: &Tensor,
        _dense: &PoseMap,
        prompt: &str,
        seed: u64,
    ) -> Result<LatentTensor> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
            seed ^ fnv1a64(prompt.as_bytes()),
            "mock.inpainter",
        ));
        let base = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let period = rng.random_range(2..=4usize);
        let (h, w) = (image.height(), image.width());
        let hw = h * w;
        let mut out = image.tensor().clone();
        for y in 0..h {
            for x in 0..w {
                if mask.data()[y * w + x] != 1.0 {
                    continue;
                }
                let shade = if (y / period) % 2 == 0 { 1.0 } else { 0.5 };
                for c in 0..3 {
                    out.data_mut()[c * hw + y * w + x] = base[c] * shade;
                }
            }
        }
        LatentTensor::new(out, Space::Pixel)
    }
}

/// Wrapper that injects a failure for one specific input image, for
/// exercising the engine's partial-failure path.
pub struct FaultySegmenter<S: Segmenter> {
    inner: S,
    fail_on: u64,
}

impl<S: Segmenter> FaultySegmenter<S> {
    /// Fails whenever the input image's content hash equals `fail_on`.
    pub fn new(inner: S, fail_on: u64) -> Self {
        FaultySegmenter { inner, fail_on }
    }
}

impl<S: Segmenter> Segmenter for FaultySegmenter<S> {
    fn id(&self) -> &str {
        "faulty-segmenter"
    }

    fn segment(&self, image: &LatentTensor) -> Result<ParseMap> {
        if tensor_hash(image.tensor()) == self.fail_on {
            return Err(backend_err(self.id(), "injected fault"));
        }
        self.inner.segment(image)
    }
}

fn expect_rgb_pixel(image: &LatentTensor) -> Result<()> {
    image.expect_space(Space::Pixel)?;
    if image.channels() != 3 {
        return Err(WeftError::ShapeMismatch {
            expected: "[3, H, W]".into(),
            got: format!("{:?}", image.tensor().shape()),
        });
    }
    Ok(())
}

/// Runs the parser stage: segmentation plus dense body coordinates, with
/// backend outputs validated against the pipeline's contracts.
pub fn parse(image: &LatentTensor, backends: &EngineBackends) -> Result<(ParseMap, PoseMap)> {
    expect_rgb_pixel(image)?;
    let parse_map = backends.segmenter.segment(image)?;
    if parse_map.height() != image.height() || parse_map.width() != image.width() {
        return Err(backend_err(
            backends.segmenter.id(),
            format!(
                "parse map {}x{} does not match image {}x{}",
                parse_map.height(),
                parse_map.width(),
                image.height(),
                image.width()
            ),
        ));
    }
    let dense = backends.pose_estimator.estimate(image)?;
    if dense.kind != PoseKind::DenseCoords {
        return Err(backend_err(backends.pose_estimator.id(), "expected dense coordinates"));
    }
    if dense.height() != image.height() || dense.width() != image.width() {
        return Err(backend_err(
            backends.pose_estimator.id(),
            "dense map dimensions do not match the image",
        ));
    }
    if dense.data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(backend_err(
            backends.pose_estimator.id(),
            "dense map values outside [0, 1]",
        ));
    }
    Ok((parse_map, dense))
}

/// Derives the garment-agnostic mask and the blanked conditioning image.
/// The mask is the garment label region dilated by a Euclidean disc of the
/// given radius, clipped to non-background pixels; the returned image is
/// the input with the masked region zeroed.
pub fn derive_agnostic(
    image: &LatentTensor,
    parse_map: &ParseMap,
    radius: usize,
) -> Result<(Tensor, LatentTensor)> {
    expect_rgb_pixel(image)?;
    let (h, w) = (parse_map.height(), parse_map.width());
    if h != image.height() || w != image.width() {
        return Err(WeftError::ShapeMismatch {
            expected: format!("parse map {}x{}", image.height(), image.width()),
            got: format!("{h}x{w}"),
        });
    }
    if parse_map.count(ParseLabel::Garment) == 0 {
        return Err(WeftError::EmptyGarment);
    }

    let r = radius as i64;
    let mut mask = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            if parse_map.get(y, x) == ParseLabel::Background {
                continue;
            }
            let mut hit = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    if parse_map.get(yy as usize, xx as usize) == ParseLabel::Garment {
                        hit = true;
                        break 'scan;
                    }
                }
            }
            if hit {
                mask.data_mut()[y * w + x] = 1.0;
            }
        }
    }

    let hw = h * w;
    let mut masked = image.tensor().clone();
    for i in 0..hw {
        if mask.data()[i] == 1.0 {
            for c in 0..3 {
                masked.data_mut()[c * hw + i] = 0.0;
            }
        }
    }
    Ok((mask, LatentTensor::new(masked, Space::Pixel)?))
}

/// Runs the tagger stage: a garment description plus an inpainting prompt
/// built from it.
pub fn tag(
    image: &LatentTensor,
    backends: &EngineBackends,
    seed: u64,
) -> Result<(String, String)> {
    expect_rgb_pixel(image)?;
    let description = backends.captioner.caption(image)?;
    if description.trim().is_empty() {
        return Err(backend_err(backends.captioner.id(), "empty description"));
    }
    let prompt = backends.template_source.inpaint_prompt(&description, seed)?;
    Ok((description, prompt))
}

/// Runs the drawer stage and enforces its contract: pixels outside the
/// mask come back bit-identical. An all-zero mask short-circuits to the
/// input image.
pub fn draw(
    image: &LatentTensor,
    mask: &Tensor,
    dense: &PoseMap,
    prompt: &str,
    backends: &EngineBackends,
    seed: u64,
) -> Result<LatentTensor> {
    expect_rgb_pixel(image)?;
    if mask.shape() != [1, image.height(), image.width()] {
        return Err(WeftError::ShapeMismatch {
            expected: format!("[1, {}, {}]", image.height(), image.width()),
            got: format!("{:?}", mask.shape()),
        });
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(WeftError::InvalidTensor("mask must be binary".into()));
    }
    if mask.data().iter().all(|&v| v == 0.0) {
        return Ok(image.clone());
    }
    let out = backends.inpainter.inpaint(image, mask, dense, prompt, seed)?;
    if out.tensor().shape() != image.tensor().shape() {
        return Err(backend_err(backends.inpainter.id(), "output shape differs from input"));
    }
    let hw = image.height() * image.width();
    for i in 0..hw {
        if mask.data()[i] == 1.0 {
            continue;
        }
        for c in 0..3 {
            if out.data()[c * hw + i] != image.data()[c * hw + i] {
                return Err(backend_err(
                    backends.inpainter.id(),
                    "modified pixels outside the mask",
                ));
            }
        }
    }
    Ok(out)
}

/// Provenance stamped on every manifest record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Provenance {
    pub segmenter: String,
    pub pose_estimator: String,
    pub captioner: String,
    pub template_source: String,
    pub inpainter: String,
    pub root_seed: u64,
    pub record_seed: u64,
    pub engine_version: String,
}

impl Provenance {
    fn complete(&self) -> bool {
        !self.segmenter.is_empty()
            && !self.pose_estimator.is_empty()
            && !self.captioner.is_empty()
            && !self.template_source.is_empty()
            && !self.inpainter.is_empty()
            && !self.engine_version.is_empty()
    }
}

/// One successful manifest line: relative file paths plus prompts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecordEntry {
    pub person: String,
    pub garment: String,
    pub dense: String,
    pub parse: String,
    pub mask: String,
    pub category_prompt: String,
    pub target_prompt: String,
    pub provenance: Provenance,
}

/// One failed manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FailureEntry {
    pub index: usize,
    pub backend: String,
    pub error: String,
}

/// A manifest line: either a record or a captured failure. Record lines
/// carry exactly the documented record keys; failure lines nest under a
/// single "failure" key.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ManifestEntry {
    Record(RecordEntry),
    Failure { failure: FailureEntry },
}

/// An ordered list of manifest entries, one per input image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// File name of the manifest inside an engine output directory.
pub const MANIFEST_NAME: &str = "manifest.jsonl";

impl Manifest {
    pub fn records(&self) -> impl Iterator<Item = &RecordEntry> {
        self.entries.iter().filter_map(|e| match e {
            ManifestEntry::Record(r) => Some(r),
            ManifestEntry::Failure { .. } => None,
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = &FailureEntry> {
        self.entries.iter().filter_map(|e| match e {
            ManifestEntry::Failure { failure } => Some(failure),
            ManifestEntry::Record(_) => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(
                &serde_json::to_string(entry)
                    .map_err(|e| WeftError::Config(format!("manifest serialization: {e}")))?,
            );
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                WeftError::Config(format!("manifest line {}: {e}", i + 1))
            })?;
            entries.push(entry);
        }
        Ok(Manifest { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    /// Checks that every referenced file exists under `base_dir` and that
    /// provenance is complete on every record.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        for rec in self.records() {
            for rel in [&rec.person, &rec.garment, &rec.dense, &rec.parse, &rec.mask] {
                let path = base_dir.join(rel);
                if !path.is_file() {
                    return Err(WeftError::Config(format!(
                        "manifest references missing file {}",
                        path.display()
                    )));
                }
            }
            if !rec.provenance.complete() {
                return Err(WeftError::Config("incomplete provenance".into()));
            }
        }
        Ok(())
    }

    /// Loads every record's files back into validated [`DatasetRecord`]s.
    pub fn load_records(&self, base_dir: &Path) -> Result<Vec<DatasetRecord>> {
        let mut out = Vec::new();
        for rec in self.records() {
            let record = DatasetRecord {
                person_image: imageio::load_image(&base_dir.join(&rec.person))?,
                garment_image: imageio::load_image(&base_dir.join(&rec.garment))?,
                dense_map: imageio::load_pose(&base_dir.join(&rec.dense), PoseKind::DenseCoords)?,
                parse_map: imageio::load_parse(&base_dir.join(&rec.parse))?,
                agnostic_mask: imageio::load_mask(&base_dir.join(&rec.mask))?,
                garment_category_prompt: rec.category_prompt.clone(),
                target_prompt: rec.target_prompt.clone(),
            };
            record.validate()?;
            out.push(record);
        }
        Ok(out)
    }
}

fn failure_of(stage: &str, err: &WeftError) -> (String, String) {
    match err {
        WeftError::Backend { id, message } => (id.clone(), message.clone()),
        other => (stage.to_string(), other.to_string()),
    }
}

fn synthesize_one(
    image: &LatentTensor,
    backends: &EngineBackends,
    cfg: &EngineConfig,
    record_seed: u64,
) -> Result<DatasetRecord> {
    let (parse_map, dense) = parse(image, backends)?;
    let (mask, _masked) = derive_agnostic(image, &parse_map, cfg.dilation_radius)?;
    let (description, prompt) = tag(image, backends, record_seed)?;
    let drawn = draw(image, &mask, &dense, &prompt, backends, record_seed)?;

    // Product shot: drawn garment texels on white, extracted by the
    // original garment label region.
    let region = parse_map.mask_for(ParseLabel::Garment);
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    let mut product = Tensor::full(&[3, h, w], 1.0);
    for i in 0..hw {
        if region.data()[i] == 1.0 {
            for c in 0..3 {
                product.data_mut()[c * hw + i] = drawn.data()[c * hw + i];
            }
        }
    }

    let record = DatasetRecord {
        person_image: drawn,
        garment_image: LatentTensor::new(product, Space::Pixel)?,
        dense_map: dense,
        parse_map,
        agnostic_mask: mask,
        garment_category_prompt: description,
        target_prompt: prompt,
    };
    record.validate()?;
    Ok(record)
}

/// Runs the full parser to tagger to drawer pipeline over `images`, writing
/// PNGs and a JSONL manifest into `out_dir`. A failing record is captured
/// as a failure entry and the run continues; entries keep input order, so
/// re-running with the same seed is byte-identical.
pub fn run_engine(
    images: &[LatentTensor],
    backends: &EngineBackends,
    out_dir: &Path,
    cfg: &EngineConfig,
) -> Result<Manifest> {
    if images.is_empty() {
        return Err(WeftError::Config("run_engine needs at least one image".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::default();

    for (i, image) in images.iter().enumerate() {
        let record_seed = derive_seed(cfg.seed, &format!("engine.record.{i}"));
        match synthesize_one(image, backends, cfg, record_seed) {
            Ok(record) => {
                if !(backends.accept)(&record) {
                    manifest.entries.push(ManifestEntry::Failure {
                        failure: FailureEntry {
                            index: i,
                            backend: "acceptance".into(),
                            error: "record rejected by the acceptance predicate".into(),
                        },
                    });
                    continue;
                }
                let entry = RecordEntry {
                    person: format!("person_{i:03}.png"),
                    garment: format!("garment_{i:03}.png"),
                    dense: format!("dense_{i:03}.png"),
                    parse: format!("parse_{i:03}.png"),
                    mask: format!("mask_{i:03}.png"),
                    category_prompt: record.garment_category_prompt.clone(),
                    target_prompt: record.target_prompt.clone(),
                    provenance: Provenance {
                        segmenter: backends.segmenter.id().into(),
                        pose_estimator: backends.pose_estimator.id().into(),
                        captioner: backends.captioner.id().into(),
                        template_source: backends.template_source.id().into(),
                        inpainter: backends.inpainter.id().into(),
                        root_seed: cfg.seed,
                        record_seed,
                        engine_version: ENGINE_VERSION.into(),
                    },
                };
                imageio::save_image(&out_dir.join(&entry.person), &record.person_image)?;
                imageio::save_image(&out_dir.join(&entry.garment), &record.garment_image)?;
                imageio::save_pose(&out_dir.join(&entry.dense), &record.dense_map)?;
                imageio::save_parse(&out_dir.join(&entry.parse), &record.parse_map)?;
                imageio::save_mask(&out_dir.join(&entry.mask), &record.agnostic_mask)?;
                manifest.entries.push(ManifestEntry::Record(entry));
            }
            Err(err) => {
                let (backend, error) = failure_of("engine", &err);
                manifest.entries.push(ManifestEntry::Failure {
                    failure: FailureEntry { index: i, backend, error },
                });
            }
        }
    }

    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
