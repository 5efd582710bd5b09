//! Evaluation kit: masked garment similarity, embedding similarities,
//! SSIM, FID, KID, human-study aggregation, and a table renderer. All
//! metrics are pure functions of their inputs, so fixed inputs and a fixed
//! embedder give identical outputs.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::latent::{block_mean, LatentTensor, Space};
use crate::tensor::{derive_seed, fnv1a64, Tensor};

/// Image (and optionally text) to fixed-dimension feature vectors.
pub trait Embedder {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &LatentTensor) -> Result<Vec<f64>>;
    fn embed_text(&self, _text: &str) -> Result<Vec<f64>> {
        Err(WeftError::MetricInput("embedder has no text capability".into()))
    }
}

/// Pluggable perceptual-distance slot (LPIPS-style). No implementation
/// ships; wiring one in requires a pretrained network.
pub type PerceptualDistance = Box<dyn Fn(&LatentTensor, &LatentTensor) -> Result<f64>>;

/// Pluggable single-image aesthetic-score slot. No implementation ships.
pub type AestheticScore = Box<dyn Fn(&LatentTensor) -> Result<f64>>;

/// Default embedder: 8x average-pool over each channel, flatten, apply a
/// fixed seeded random projection to 64 dimensions, L2-normalize. Text is
/// embedded as the normalized sum of seeded per-token vectors, so prompts
/// sharing tokens land near each other.
pub struct ToyEmbedder {
    seed: u64,
}

/// Output dimension of [`ToyEmbedder`].
pub const TOY_EMBED_DIM: usize = 64;

const TOY_POOL: usize = 8;

impl ToyEmbedder {
    pub fn new(seed: u64) -> Self {
        ToyEmbedder { seed }
    }

    fn projection(&self, in_dim: usize) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("toy_embedder.proj.{in_dim}")));
        let scale = 1.0 / (in_dim as f64).sqrt();
        Tensor::randn(&[TOY_EMBED_DIM, in_dim], &mut rng)
            .data()
            .iter()
            .map(|v| v * scale)
            .collect()
    }
}

fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(WeftError::UndefinedSimilarity("zero-norm embedding".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

impl Embedder for ToyEmbedder {
    fn id(&self) -> &str {
        "toy-embedder-v1"
    }

    fn dim(&self) -> usize {
        TOY_EMBED_DIM
    }

    fn embed_image(&self, image: &LatentTensor) -> Result<Vec<f64>> {
        image.expect_space(Space::Pixel)?;
        let pooled = block_mean(image.tensor(), TOY_POOL)?;
        let feats = pooled.data();
        let proj = self.projection(feats.len());
        let mut out = vec![0.0; TOY_EMBED_DIM];
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &proj[o * feats.len()..(o + 1) * feats.len()];
            *out_v = row.iter().zip(feats).map(|(w, f)| w * f).sum();
        }
        l2_normalize(&mut out)?;
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; TOY_EMBED_DIM];
        let mut any = false;
        for token in text.split_whitespace() {
            any = true;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.seed ^ fnv1a64(token.as_bytes()),
                "toy_embedder.token",
            ));
            for (o, v) in Tensor::randn(&[TOY_EMBED_DIM], &mut rng).data().iter().enumerate() {
                out[o] += v;
            }
        }
        if !any {
            return Err(WeftError::MetricInput("cannot embed empty text".into()));
        }
        l2_normalize(&mut out)?;
        Ok(out)
    }
}

fn checked_embed(emb: &dyn Embedder, image: &LatentTensor) -> Result<Vec<f64>> {
    let v = emb.embed_image(image)?;
    validate_vector(emb, &v)?;
    Ok(v)
}

fn validate_vector(emb: &dyn Embedder, v: &[f64]) -> Result<()> {
    if v.len() != emb.dim() {
        return Err(WeftError::MetricInput(format!(
            "embedder '{}' returned dimension {} instead of {}",
            emb.id(),
            v.len(),
            emb.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(WeftError::MetricInput(format!(
            "embedder '{}' returned non-finite values",
            emb.id()
        )));
    }
    Ok(())
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding spill.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(WeftError::MetricInput(format!(
            "cosine inputs of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(WeftError::UndefinedSimilarity("zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Masked garment similarity: cosine between the embedding of the try-on
/// image with its garment mask applied elementwise (full frame, not a
/// crop) and the embedding of the garment product image.
pub fn dino_m(
    tryon: &LatentTensor,
    mask: &Tensor,
    garment: &LatentTensor,
    emb: &dyn Embedder,
) -> Result<f64> {
    tryon.expect_space(Space::Pixel)?;
    garment.expect_space(Space::Pixel)?;
    if mask.shape() != [1, tryon.height(), tryon.width()] {
        return Err(WeftError::ShapeMismatch {
            expected: format!("[1, {}, {}]", tryon.height(), tryon.width()),
            got: format!("{:?}", mask.shape()),
        });
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(WeftError::InvalidTensor("mask must be binary".into()));
    }
    let hw = tryon.height() * tryon.width();
    let mut masked = tryon.tensor().clone();
    for c in 0..tryon.channels() {
        for i in 0..hw {
            masked.data_mut()[c * hw + i] *= mask.data()[i];
        }
    }
    let ea = checked_embed(emb, &LatentTensor::new(masked, Space::Pixel)?)?;
    let eb = checked_embed(emb, garment)?;
    cosine(&ea, &eb)
}

/// The two comparison modes for [`embedding_similarity`]: image against
/// image, or image against prompt text.
pub enum SimilarityMode<'a> {
    ImageImage(&'a LatentTensor, &'a LatentTensor),
    ImageText(&'a LatentTensor, &'a str),
}

/// Cosine similarity of two embeddings, in either mode.
pub fn embedding_similarity(mode: SimilarityMode, emb: &dyn Embedder) -> Result<f64> {
    let (ea, eb) = match mode {
        SimilarityMode::ImageImage(a, b) => (checked_embed(emb, a)?, checked_embed(emb, b)?),
        SimilarityMode::ImageText(a, text) => {
            let e = emb.embed_text(text)?;
            validate_vector(emb, &e)?;
            (checked_embed(emb, a)?, e)
        }
    };
    cosine(&ea, &eb)
}

/// Embeds a batch of images into feature rows for [`fid`] and [`kid`].
pub fn image_features(images: &[LatentTensor], emb: &dyn Embedder) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|img| checked_embed(emb, img)).collect()
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn to_gray(image: &LatentTensor) -> Result<Vec<f64>> {
    image.expect_space(Space::Pixel)?;
    let hw = image.height() * image.width();
    match image.channels() {
        1 => Ok(image.data().to_vec()),
        3 => {
            let d = image.data();
            Ok((0..hw)
                .map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i])
                .collect())
        }
        c => Err(WeftError::MetricInput(format!("no grayscale conversion for {c} channels"))),
    }
}

/// Separable Gaussian filter in valid mode: rows first, then columns.
/// Output is (h - win + 1) x (w - win + 1).
fn gauss_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            rows[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
/// valid mode, constants k1 = 0.01 and k2 = 0.03 on a unit data range.
/// Inputs are grayscale or RGB (converted by luma weights).
pub fn ssim(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(WeftError::ShapeMismatch {
            expected: format!("{:?}", a.tensor().shape()),
            got: format!("{:?}", b.tensor().shape()),
        });
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(WeftError::MetricInput(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let ga = to_gray(a)?;
    let gb = to_gray(b)?;

    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x * y).collect();

    let mu_a = gauss_valid(&ga, h, w);
    let mu_b = gauss_valid(&gb, h, w);
    let e_aa = gauss_valid(&sq(&ga), h, w);
    let e_bb = gauss_valid(&sq(&gb), h, w);
    let e_ab = gauss_valid(&prod, h, w);

    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

fn feature_matrix(feats: &[Vec<f64>], name: &str) -> Result<(DMatrix<f64>, usize, usize)> {
    if feats.len() < 2 {
        return Err(WeftError::MetricInput(format!("{name} needs at least 2 feature rows")));
    }
    let d = feats[0].len();
    if d == 0 {
        return Err(WeftError::MetricInput(format!("{name} features are empty")));
    }
    for row in feats {
        if row.len() != d {
            return Err(WeftError::MetricInput(format!("{name} feature rows differ in length")));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(WeftError::MetricInput(format!("{name} features contain non-finite values")));
        }
    }
    let n = feats.len();
    Ok((DMatrix::from_fn(n, d, |i, j| feats[i][j]), n, d))
}

fn mean_and_cov(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let d = m.ncols();
    let mean = DMatrix::from_fn(1, d, |_, j| m.column(j).sum() / n as f64);
    let mut centered = m.clone();
    for i in 0..n {
        for j in 0..d {
            centered[(i, j)] -= mean[(0, j)];
        }
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

const EIG_CLIP: f64 = -1e-8;

/// Trace of the principal square root of a symmetric PSD matrix, by
/// eigendecomposition. Slightly negative eigenvalues (above -1e-8) are
/// clipped to zero; anything lower is a stability error.
fn trace_sqrt_sym(m: DMatrix<f64>) -> Result<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut total = 0.0;
    for &ev in eig.eigenvalues.iter() {
        if ev < EIG_CLIP {
            return Err(WeftError::NumericalStability(format!(
                "matrix square root eigenvalue {ev} below tolerance"
            )));
        }
        total += ev.max(0.0).sqrt();
    }
    Ok(total)
}

/// Frechet distance between Gaussian fits of two feature sets:
/// squared mean distance plus `tr(Ca + Cb - 2 (Ca Cb)^(1/2))`, with the
/// cross term computed through the symmetrized product
/// `Ca^(1/2) Cb Ca^(1/2)`. Covariances are unbiased (n - 1). For a stable
/// covariance estimate, n of at least d + 1 rows per side is recommended.
pub fn fid(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let (ma, _, da) = feature_matrix(feats_a, "fid a")?;
    let (mb, _, db) = feature_matrix(feats_b, "fid b")?;
    if da != db {
        return Err(WeftError::MetricInput(format!(
            "fid feature dimensions differ: {da} vs {db}"
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(&ma);
    let (mu_b, cov_b) = mean_and_cov(&mb);

    let diff = &mu_a - &mu_b;
    let mean_term: f64 = diff.iter().map(|v| v * v).sum();

    // (Ca Cb)^(1/2) shares its trace with Ca^(1/2) Cb Ca^(1/2), which is
    // symmetric PSD and safe to root by eigendecomposition.
    let eig_a = ((&cov_a + cov_a.transpose()) * 0.5).symmetric_eigen();
    let mut sqrt_vals = eig_a.eigenvalues.clone();
    for v in sqrt_vals.iter_mut() {
        if *v < EIG_CLIP {
            return Err(WeftError::NumericalStability(format!(
                "covariance eigenvalue {v} below tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let sqrt_a =
        &eig_a.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig_a.eigenvectors.transpose();
    let cross = trace_sqrt_sym(&sqrt_a * &cov_b * &sqrt_a)?;

    Ok(mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross)
}

/// Unbiased squared maximum mean discrepancy with the cubic polynomial
/// kernel `k(x, y) = (x . y / d + 1)^3`. May be slightly negative under
/// the null by construction of the unbiased estimator.
pub fn kid(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let (_, m, da) = feature_matrix(feats_a, "kid a")?;
    let (_, n, db) = feature_matrix(feats_b, "kid b")?;
    if da != db {
        return Err(WeftError::MetricInput(format!(
            "kid feature dimensions differ: {da} vs {db}"
        )));
    }
    let d = da as f64;
    let k = |x: &[f64], y: &[f64]| -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let base = dot / d + 1.0;
        base * base * base
    };

    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += k(&feats_a[i], &feats_a[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += k(&feats_b[i], &feats_b[j]);
            }
        }
    }
    let mut kab = 0.0;
    for row in feats_a {
        for col in feats_b {
            kab += k(row, col);
        }
    }

    Ok(kaa / (m as f64 * (m as f64 - 1.0)) + kbb / (n as f64 * (n as f64 - 1.0))
        - 2.0 * kab / (m as f64 * n as f64))
}

/// The three aspects ranked in the preference study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Identity,
    Quality,
    Preservation,
}

impl Aspect {
    pub const ALL: [Aspect; 3] = [Aspect::Identity, Aspect::Quality, Aspect::Preservation];

    pub fn label(&self) -> &'static str {
        match self {
            Aspect::Identity => "Identity",
            Aspect::Quality => "Quality",
            Aspect::Preservation => "Preservation",
        }
    }
}

/// One participant's ranking of all compared methods for one aspect,
/// best first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResponse {
    pub respondent_id: String,
    pub aspect: Aspect,
    pub ranking: Vec<String>,
}

/// How rank r out of M methods converts to a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// W = M - r + 1 (first place M, last place 1).
    #[default]
    Linear,
    /// W = M / r (first place M, decaying harmonically).
    Reciprocal,
}

impl Weighting {
    fn weight(&self, rank: usize, m: usize) -> f64 {
        match self {
            Weighting::Linear => (m - rank + 1) as f64,
            Weighting::Reciprocal => m as f64 / rank as f64,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Weighting::Linear => "linear",
            Weighting::Reciprocal => "reciprocal",
        }
    }
}

/// Aggregates for one method under one aspect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspectScores {
    /// Percent of responses ranking the method first.
    pub preference_pct: f64,
    /// S = sum over ranks of (count at rank x weight) / N.
    pub score: f64,
    /// Number of responses for the aspect.
    pub n: usize,
}

/// method -> aspect -> aggregates.
pub type HumanScores = BTreeMap<String, BTreeMap<Aspect, AspectScores>>;

/// Aggregates study responses into per-method, per-aspect preference
/// percentages and comprehensive scores. Every response must rank exactly
/// the compared methods; scores are computed from rank counts, so response
/// order never matters.
pub fn human_scores(
    responses: &[StudyResponse],
    methods: &[String],
    weighting: Weighting,
) -> Result<HumanScores> {
    if methods.is_empty() {
        return Err(WeftError::MetricInput("no methods to score".into()));
    }
    let method_set: BTreeSet<&str> = methods.iter().map(|s| s.as_str()).collect();
    if method_set.len() != methods.len() {
        return Err(WeftError::MetricInput("duplicate method ids".into()));
    }
    let m = methods.len();

    // counts[aspect][method] = per-rank counts (index r - 1).
    let mut counts: BTreeMap<Aspect, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    let mut totals: BTreeMap<Aspect, usize> = BTreeMap::new();
    for resp in responses {
        let seen: BTreeSet<&str> = resp.ranking.iter().map(|s| s.as_str()).collect();
        if resp.ranking.len() != m || seen != method_set {
            return Err(WeftError::MetricInput(format!(
                "response from '{}' is not a complete ranking of the {m} methods",
                resp.respondent_id
            )));
        }
        let per = counts.entry(resp.aspect).or_default();
        for (idx, name) in resp.ranking.iter().enumerate() {
            per.entry(methods.iter().find(|s| *s == name).unwrap())
                .or_insert_with(|| vec![0; m])[idx] += 1;
        }
        *totals.entry(resp.aspect).or_insert(0) += 1;
    }

    let mut out: HumanScores = BTreeMap::new();
    for (aspect, per) in &counts {
        let n = totals[aspect];
        for method in methods {
            let ranks = per
                .get(method.as_str())
                .cloned()
                .unwrap_or_else(|| vec![0; m]);
            let first = ranks[0];
            let score: f64 = ranks
                .iter()
                .enumerate()
                .map(|(idx, &f)| f as f64 * weighting.weight(idx + 1, m))
                .sum::<f64>()
                / n as f64;
            out.entry(method.clone()).or_default().insert(
                *aspect,
                AspectScores {
                    preference_pct: first as f64 / n as f64 * 100.0,
                    score,
                    n,
                },
            );
        }
    }
    Ok(out)
}

/// Whether larger or smaller values win when ranking methods on a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Direction registry for rendering: distribution distances and
/// perceptual distances fall, similarities and scores rise.
pub fn metric_direction(name: &str) -> Direction {
    match name.to_ascii_lowercase().as_str() {
        "fid" | "kid" | "lpips" => Direction::LowerBetter,
        _ => Direction::HigherBetter,
    }
}

/// Report metadata; `dino_masking` records the masking convention used by
/// [`dino_m`] and `weighting` the human-score weighting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportMetadata {
    pub dataset_id: String,
    pub seed: u64,
    pub embedder_id: String,
    pub dino_masking: String,
    pub weighting: Weighting,
}

impl ReportMetadata {
    pub fn new(dataset_id: &str, seed: u64, embedder_id: &str) -> Self {
        ReportMetadata {
            dataset_id: dataset_id.into(),
            seed,
            embedder_id: embedder_id.into(),
            dino_masking: "elementwise_full_frame".into(),
            weighting: Weighting::default(),
        }
    }
}

/// Everything the report renderer needs: metric values per method plus
/// optional study aggregates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub methods: Vec<String>,
    /// metric name -> method -> raw (unscaled) value.
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<HumanScores>,
}

/// Output formats for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = WeftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(WeftError::Config(format!("unknown report format '{other}'"))),
        }
    }
}

impl EvalReport {
    pub fn new(metadata: ReportMetadata, methods: Vec<String>) -> Self {
        EvalReport { metadata, methods, metrics: BTreeMap::new(), study: None }
    }

    pub fn insert(&mut self, metric: &str, method: &str, value: f64) {
        self.metrics
            .entry(metric.to_string())
            .or_default()
            .insert(method.to_string(), value);
    }

    /// All values finite, every metric row keyed by known methods, and
    /// metadata fields non-empty.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(WeftError::MetricInput("report has no methods".into()));
        }
        if self.metadata.dataset_id.is_empty() || self.metadata.embedder_id.is_empty() {
            return Err(WeftError::MetricInput("incomplete report metadata".into()));
        }
        for (metric, row) in &self.metrics {
            for (method, value) in row {
                if !self.methods.contains(method) {
                    return Err(WeftError::MetricInput(format!(
                        "metric '{metric}' scored unknown method '{method}'"
                    )));
                }
                if !value.is_finite() {
                    return Err(WeftError::MetricInput(format!(
                        "metric '{metric}' has non-finite value for '{method}'"
                    )));
                }
            }
        }
        if let Some(study) = &self.study {
            for method in study.keys() {
                if !self.methods.contains(method) {
                    return Err(WeftError::MetricInput(format!(
                        "study scored unknown method '{method}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rendered value for a metric and method, scaled for display. The
/// distribution-discrepancy metric reads in hundredths, so it is scaled
/// by 100 and labeled as such.
fn display_value(metric: &str, value: f64) -> f64 {
    if metric.eq_ignore_ascii_case("kid") {
        value * 100.0
    } else {
        value
    }
}

fn display_name(metric: &str) -> String {
    if metric.eq_ignore_ascii_case("kid") {
        format!("{metric} (x100)")
    } else {
        metric.to_string()
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Ranks values by direction; returns (best set, second set) by value
/// equality so ties share the decoration.
fn rank_sets(values: &[(String, f64)], dir: Direction) -> (Vec<f64>, Vec<f64>) {
    let mut distinct: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if dir == Direction::HigherBetter {
        distinct.reverse();
    }
    let best = distinct.first().map(|&v| vec![v]).unwrap_or_default();
    let second = distinct.get(1).map(|&v| vec![v]).unwrap_or_default();
    (best, second)
}

fn decorate(text: String, value: f64, best: &[f64], second: &[f64]) -> String {
    if best.contains(&value) {
        format!("**{text}**")
    } else if second.contains(&value) {
        format!("<u>{text}</u>")
    } else {
        text
    }
}

fn markdown_metrics(report: &EvalReport) -> String {
    let mut out = String::new();
    if report.metrics.is_empty() {
        return out;
    }
    let metric_names: Vec<&String> = report.metrics.keys().collect();
    out.push_str("| method |");
    for m in &metric_names {
        out.push_str(&format!(" {} |", display_name(m)));
    }
    out.push('\n');
    out.push_str("| --- |");
    for _ in &metric_names {
        out.push_str(" --- |");
    }
    out.push('\n');

    // Per-metric best/second sets over display values.
    let mut ranked: BTreeMap<&String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for name in &metric_names {
        let values: Vec<(String, f64)> = report.metrics[*name]
            .iter()
            .map(|(method, v)| (method.clone(), display_value(name, *v)))
            .collect();
        ranked.insert(name, rank_sets(&values, metric_direction(name)));
    }

    for method in &report.methods {
        out.push_str(&format!("| {method} |"));
        for name in &metric_names {
            match report.metrics[*name].get(method) {
                Some(v) => {
                    let dv = display_value(name, *v);
                    let (best, second) = &ranked[name];
                    out.push_str(&format!(" {} |", decorate(fmt(dv), dv, best, second)));
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

fn markdown_study(report: &EvalReport) -> String {
    let Some(study) = &report.study else {
        return String::new();
    };
    let mut out = String::new();
    for (title, pick) in [
        ("preference (%)", 0usize),
        ("comprehensive score", 1usize),
    ] {
        out.push_str(&format!("\n### study: {title}\n\n"));
        out.push_str("| method |");
        for aspect in Aspect::ALL {
            out.push_str(&format!(" {} |", aspect.label()));
        }
        out.push('\n');
        out.push_str("| --- | --- | --- | --- |\n");

        let mut ranked: BTreeMap<Aspect, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for aspect in Aspect::ALL {
            let values: Vec<(String, f64)> = report
                .methods
                .iter()
                .filter_map(|m| {
                    study.get(m).and_then(|per| per.get(&aspect)).map(|s| {
                        (m.clone(), if pick == 0 { s.preference_pct } else { s.score })
                    })
                })
                .collect();
            ranked.insert(aspect, rank_sets(&values, Direction::HigherBetter));
        }

        for method in &report.methods {
            out.push_str(&format!("| {method} |"));
            for aspect in Aspect::ALL {
                match study.get(method).and_then(|per| per.get(&aspect)) {
                    Some(s) => {
                        let v = if pick == 0 { s.preference_pct } else { s.score };
                        let (best, second) = &ranked[&aspect];
                        out.push_str(&format!(" {} |", decorate(fmt(v), v, best, second)));
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Renders a validated report. Markdown bolds the best value per column
/// and underlines the second best; CSV and JSON carry the same display
/// scaling for the distribution-discrepancy metric (labeled x100) in CSV,
/// while JSON is the raw serialized report.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    report.validate()?;
    match format {
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!(
                "## evaluation: {} (embedder {}, seed {}, mask {}, weighting {})\n\n",
                report.metadata.dataset_id,
                report.metadata.embedder_id,
                report.metadata.seed,
                report.metadata.dino_masking,
                report.metadata.weighting.label(),
            ));
            out.push_str(&markdown_metrics(report));
            out.push_str(&markdown_study(report));
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut out = String::from("metric,method,value\n");
            for (metric, row) in &report.metrics {
                for (method, v) in row {
                    out.push_str(&format!(
                        "{},{},{}\n",
                        display_name(metric).replace(' ', "_"),
                        method,
                        display_value(metric, *v)
                    ));
                }
            }
            if let Some(study) = &report.study {
                for (method, per) in study {
                    for (aspect, s) in per {
                        out.push_str(&format!(
                            "study_preference_pct_{},{},{}\n",
                            aspect.label().to_ascii_lowercase(),
                            method,
                            s.preference_pct
                        ));
                        out.push_str(&format!(
                            "study_score_{},{},{}\n",
                            aspect.label().to_ascii_lowercase(),
                            method,
                            s.score
                        ));
                    }
                }
            }
            Ok(out)
        }
        ReportFormat::Json => serde_json::to_string_pretty(report)
            .map_err(|e| WeftError::Config(format!("report serialization: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct StubEmbedder {
        by_hash: BTreeMap<u64, Vec<f64>>,
        dim: usize,
    }

    impl Embedder for StubEmbedder {
        fn id(&self) -> &str {
            "stub"
        }
        fn dim(&self) -> usize {
            self.dim
        }
        fn embed_image(&self, image: &LatentTensor) -> Result<Vec<f64>> {
            Ok(self.by_hash[&crate::tensor::tensor_hash(image.tensor())].clone())
        }
    }

    fn img(seed: u64) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
        LatentTensor::new(Tensor::from_vec(&[3, 32, 32], data), Space::Pixel).unwrap()
    }

    fn ones_mask() -> Tensor {
        Tensor::full(&[1, 32, 32], 1.0)
    }

    #[test]
    fn toy_embedder_is_normalized_and_deterministic() {
        let emb = ToyEmbedder::new(3);
        let a = img(1);
        let e1 = emb.embed_image(&a).unwrap();
        let e2 = emb.embed_image(&a).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), TOY_EMBED_DIM);
        let norm: f64 = e1.iter().map(|v| v * v).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-12);

        let t1 = emb.embed_text("a red striped shirt").unwrap();
        let t2 = emb.embed_text("a red striped dress").unwrap();
        let t3 = emb.embed_text("someone dressed in blue").unwrap();
        let close = cosine(&t1, &t2).unwrap();
        let far = cosine(&t1, &t3).unwrap();
        assert!(close > far, "shared tokens should raise similarity: {close} vs {far}");
        assert!(emb.embed_text("   ").is_err());
    }

    #[test]
    fn masked_similarity_matches_hand_cosines() {
        let a = img(1);
        let b = img(2);
        let emb = StubEmbedder {
            dim: 4,
            by_hash: BTreeMap::from([
                (crate::tensor::tensor_hash(a.tensor()), vec![1.0, 0.0, 0.0, 0.0]),
                (crate::tensor::tensor_hash(b.tensor()), vec![1.0, 1.0, 0.0, 0.0]),
            ]),
        };
        let got = dino_m(&a, &ones_mask(), &b, &emb).unwrap();
        assert!((got - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);

        let emb = StubEmbedder {
            dim: 4,
            by_hash: BTreeMap::from([
                (crate::tensor::tensor_hash(a.tensor()), vec![0.0, 1.0, 0.0, 0.0]),
                (crate::tensor::tensor_hash(b.tensor()), vec![1.0, 0.0, 0.0, 0.0]),
            ]),
        };
        assert_eq!(dino_m(&a, &ones_mask(), &b, &emb).unwrap(), 0.0);

        let toy = ToyEmbedder::new(5);
        let same = dino_m(&a, &ones_mask(), &a, &toy).unwrap();
        assert!((same - 1.0).abs() < 1e-12, "self-similarity under all-ones mask");

        let emb = StubEmbedder {
            dim: 4,
            by_hash: BTreeMap::from([
                (crate::tensor::tensor_hash(a.tensor()), vec![0.0; 4]),
                (crate::tensor::tensor_hash(b.tensor()), vec![1.0, 0.0, 0.0, 0.0]),
            ]),
        };
        assert!(matches!(
            dino_m(&a, &ones_mask(), &b, &emb),
            Err(WeftError::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn masking_changes_the_embedded_content() {
        let toy = ToyEmbedder::new(5);
        let a = img(3);
        let mut mask = Tensor::zeros(&[1, 32, 32]);
        for i in 0..512 {
            mask.data_mut()[i] = 1.0;
        }
        let masked = dino_m(&a, &mask, &a, &toy).unwrap();
        let unmasked = dino_m(&a, &ones_mask(), &a, &toy).unwrap();
        assert!(masked < unmasked, "masking must change the try-on embedding");
    }

    #[test]
    fn embedding_similarity_covers_both_modes() {
        let a = img(1);
        let b = img(2);
        let emb = StubEmbedder {
            dim: 2,
            by_hash: BTreeMap::from([
                (crate::tensor::tensor_hash(a.tensor()), vec![3.0, 4.0]),
                (crate::tensor::tensor_hash(b.tensor()), vec![4.0, 3.0]),
            ]),
        };
        let got = embedding_similarity(SimilarityMode::ImageImage(&a, &b), &emb).unwrap();
        assert!((got - 24.0 / 25.0).abs() < 1e-12);

        let toy = ToyEmbedder::new(9);
        let same = embedding_similarity(SimilarityMode::ImageImage(&a, &a), &toy).unwrap();
        assert!((same - 1.0).abs() < 1e-12);
        let txt = embedding_similarity(SimilarityMode::ImageText(&a, "a shirt"), &toy).unwrap();
        assert!((-1.0..=1.0).contains(&txt));
        assert!(embedding_similarity(SimilarityMode::ImageText(&a, "x"), &emb).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = img(4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_opposite_constants_hits_the_closed_form() {
        let zeros = LatentTensor::zeros(1, 16, 16, Space::Pixel).unwrap();
        let ones = LatentTensor::new(Tensor::full(&[1, 16, 16], 1.0), Space::Pixel).unwrap();
        let c1 = 0.0001;
        // mu_a = 0, mu_b = 1, all variances zero: the c2 factors cancel,
        // leaving (c1 * c2) / ((1 + c1) * c2) = c1 / (1 + c1).
        let expect = c1 / (1.0 + c1);
        assert!((ssim(&zeros, &ones).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_a_direct_window_loop() {
        let a = img(5);
        let b = img(6);
        let got = ssim(&a, &b).unwrap();

        // Direct oracle: iterate windows, accumulate Gaussian-weighted
        // moments with explicit 2D weights.
        let k = gaussian_kernel();
        let ga = to_gray(&a).unwrap();
        let gb = to_gray(&b).unwrap();
        let (h, w) = (32, 32);
        let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
        let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k[dy] * k[dx];
                        ma += wgt * ga[(y0 + dy) * w + x0 + dx];
                        mb += wgt * gb[(y0 + dy) * w + x0 + dx];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k[dy] * k[dx];
                        let xa = ga[(y0 + dy) * w + x0 + dx] - ma;
                        let xb = gb[(y0 + dy) * w + x0 + dx] - mb;
                        va += wgt * xa * xa;
                        vb += wgt * xb * xb;
                        cov += wgt * xa * xb;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let oracle = total / count as f64;
        assert!((got - oracle).abs() < 1e-6, "ssim {got} vs oracle {oracle}");
    }

    #[test]
    fn ssim_rejects_bad_inputs() {
        let a = img(1);
        let small = LatentTensor::zeros(3, 8, 8, Space::Pixel).unwrap();
        assert!(ssim(&a, &small).is_err());
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn fid_is_zero_on_identical_features_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats: Vec<Vec<f64>> =
            (0..24).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let zero = fid(&feats, &feats).unwrap();
        assert!(zero.abs() < 1e-6, "fid(a,a) = {zero}");

        let other: Vec<Vec<f64>> =
            (0..30).map(|_| (0..6).map(|_| rng.random::<f64>() + 0.3).collect()).collect();
        let ab = fid(&feats, &other).unwrap();
        let ba = fid(&other, &feats).unwrap();
        assert!((ab - ba).abs() < 1e-8, "fid symmetry: {ab} vs {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_matches_the_scalar_formula_in_one_dimension() {
        let a: Vec<Vec<f64>> = vec![vec![0.0], vec![2.0], vec![4.0]];
        let b: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0], vec![3.0]];
        // mu_a = 2, sigma_a = 2 (unbiased), mu_b = 2, sigma_b = 1:
        // (2-2)^2 + (2-1)^2 = 1.
        let got = fid(&a, &b).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "fid = {got}");
    }

    #[test]
    fn fid_recovers_the_true_mean_separation() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let n = 10_000;
        let d0 = 2.0;
        let offset = d0 / (d as f64).sqrt();
        let sample = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            z + shift
                        })
                        .collect()
                })
                .collect()
        };
        let a = sample(&mut rng, 0.0);
        let b = sample(&mut rng, offset);
        let got = fid(&a, &b).unwrap();
        let expect = d0 * d0;
        assert!(
            (got - expect).abs() / expect < 0.05,
            "fid {got} should be within 5% of {expect}"
        );
    }

    #[test]
    fn fid_rejects_bad_features() {
        let a = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(fid(&a, &[vec![1.0]]).is_err());
        assert!(fid(&a, &[vec![f64::NAN, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(fid(&a, &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn kid_matches_a_hand_computed_two_point_case() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        // Within-set kernels are both (0/2+1)^3 = 1. Cross kernels:
        // 3.375, 1, 3.375, 1. MMD^2 = 1 + 1 - 2 * 8.75 / 4 = -2.375.
        let got = kid(&a, &b).unwrap();
        assert!((got - (-2.375)).abs() < 1e-12, "kid = {got}");
    }

    #[test]
    fn kid_is_near_zero_under_the_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let d = 2;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect()).collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let got = kid(&a, &b).unwrap();
        assert!(got.abs() < 1e-3, "null kid = {got}");
    }

    #[test]
    fn human_scores_match_hand_computations() {
        let methods = vec!["A".to_string(), "B".to_string(), "C".to_string()];
        let rank = |ids: [&str; 3], who: &str| StudyResponse {
            respondent_id: who.into(),
            aspect: Aspect::Identity,
            ranking: ids.iter().map(|s| s.to_string()).collect(),
        };
        let responses =
            vec![rank(["A", "B", "C"], "p1"), rank(["A", "B", "C"], "p2"), rank(["B", "A", "C"], "p3")];

        let scores = human_scores(&responses, &methods, Weighting::Linear).unwrap();
        let a = scores["A"][&Aspect::Identity];
        assert_eq!(a.n, 3);
        assert_eq!(a.preference_pct, 2.0 / 3.0 * 100.0);
        assert_eq!(a.score, 8.0 / 3.0);
        let b = scores["B"][&Aspect::Identity];
        assert_eq!(b.preference_pct, 1.0 / 3.0 * 100.0);
        assert_eq!(b.score, (1.0 * 3.0 + 2.0 * 2.0) / 3.0);
        let c = scores["C"][&Aspect::Identity];
        assert_eq!(c.preference_pct, 0.0);
        assert_eq!(c.score, 1.0);

        let recip = human_scores(&responses, &methods, Weighting::Reciprocal).unwrap();
        assert_eq!(recip["A"][&Aspect::Identity].score, (2.0 * 3.0 + 1.0 * 1.5) / 3.0);

        // First-place counts sum to N per aspect.
        let firsts: f64 = ["A", "B", "C"]
            .iter()
            .map(|m| scores[*m][&Aspect::Identity].preference_pct / 100.0 * 3.0)
            .sum();
        assert!((firsts - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unanimous_rankings_give_full_preference_and_top_score() {
        let methods: Vec<String> = ["X", "Y", "Z", "W", "V"].iter().map(|s| s.to_string()).collect();
        let responses: Vec<StudyResponse> = (0..4)
            .map(|i| StudyResponse {
                respondent_id: format!("p{i}"),
                aspect: Aspect::Quality,
                ranking: methods.clone(),
            })
            .collect();
        let scores = human_scores(&responses, &methods, Weighting::Linear).unwrap();
        let x = scores["X"][&Aspect::Quality];
        assert_eq!(x.preference_pct, 100.0);
        assert_eq!(x.score, 5.0);
    }

    #[test]
    fn human_scores_are_order_invariant_and_validated() {
        let methods = vec!["A".to_string(), "B".to_string()];
        let resp = |ids: [&str; 2], aspect: Aspect| StudyResponse {
            respondent_id: "p".into(),
            aspect,
            ranking: ids.iter().map(|s| s.to_string()).collect(),
        };
        let mut responses = vec![
            resp(["A", "B"], Aspect::Identity),
            resp(["B", "A"], Aspect::Identity),
            resp(["A", "B"], Aspect::Preservation),
        ];
        let fwd = human_scores(&responses, &methods, Weighting::Linear).unwrap();
        responses.reverse();
        let rev = human_scores(&responses, &methods, Weighting::Linear).unwrap();
        assert_eq!(fwd, rev);
        assert!(fwd["A"].contains_key(&Aspect::Identity));
        assert!(fwd["A"].contains_key(&Aspect::Preservation));
        assert!(!fwd["A"].contains_key(&Aspect::Quality));

        let bad = vec![resp(["A", "A"], Aspect::Identity)];
        assert!(human_scores(&bad, &methods, Weighting::Linear).is_err());
        let incomplete = vec![StudyResponse {
            respondent_id: "p".into(),
            aspect: Aspect::Identity,
            ranking: vec!["A".into()],
        }];
        assert!(human_scores(&incomplete, &methods, Weighting::Linear).is_err());
    }

    fn sample_report() -> EvalReport {
        let mut report = EvalReport::new(
            ReportMetadata::new("toy-8", 3, "toy-embedder-v1"),
            vec!["ours".into(), "baseline".into()],
        );
        report.insert("fid", "ours", 7.98);
        report.insert("fid", "baseline", 8.19);
        report.insert("ssim", "ours", 0.81);
        report.insert("ssim", "baseline", 0.84);
        report.insert("kid", "ours", 0.0123);
        report.insert("kid", "baseline", 0.0456);
        report
    }

    #[test]
    fn markdown_report_bolds_best_and_underlines_second() {
        let report = sample_report();
        let md = emit_report(&report, ReportFormat::Markdown).unwrap();
        assert!(md.contains("**7.9800**"), "lower distribution distance wins:\n{md}");
        assert!(md.contains("<u>8.1900</u>"));
        assert!(md.contains("**0.8400**"), "higher similarity wins:\n{md}");
        assert!(md.contains("<u>0.8100</u>"));
        assert!(md.contains("kid (x100)"));
        assert!(md.contains("**1.2300**"), "scaled by 100 at render:\n{md}");
        assert_eq!(md, emit_report(&report, ReportFormat::Markdown).unwrap());
    }

    #[test]
    fn csv_report_round_trips_values() {
        let report = sample_report();
        let csv = emit_report(&report, ReportFormat::Csv).unwrap();
        let mut seen = 0;
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 3);
            let value: f64 = cols[2].parse().unwrap();
            let raw = report.metrics[cols[0].trim_end_matches("_(x100)")] [cols[1]];
            let expect = if cols[0].starts_with("kid") { raw * 100.0 } else { raw };
            assert_eq!(value, expect);
            seen += 1;
        }
        assert_eq!(seen, 6);
    }

    #[test]
    fn json_report_round_trips_and_validates() {
        let mut report = sample_report();
        let methods = vec!["ours".to_string(), "baseline".to_string()];
        let responses = vec![StudyResponse {
            respondent_id: "p".into(),
            aspect: Aspect::Identity,
            ranking: methods.clone(),
        }];
        report.study = Some(human_scores(&responses, &methods, Weighting::Linear).unwrap());
        let json = emit_report(&report, ReportFormat::Json).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let md = emit_report(&report, ReportFormat::Markdown).unwrap();
        assert!(md.contains("Identity |"));
        assert!(md.contains("study: preference"));

        let mut bad = sample_report();
        bad.insert("fid", "stranger", 1.0);
        assert!(emit_report(&bad, ReportFormat::Markdown).is_err());
        let mut bad = sample_report();
        bad.insert("fid", "ours", f64::NAN);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_method_report_renders_one_bold_row() {
        let mut report =
            EvalReport::new(ReportMetadata::new("toy", 0, "toy-embedder-v1"), vec!["ours".into()]);
        report.insert("ssim", "ours", 0.9);
        let md = emit_report(&report, ReportFormat::Markdown).unwrap();
        let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ours")).collect();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].contains("**0.9000**"));
        assert!(!md.contains("<u>"));
    }

    #[test]
    fn metric_directions_are_registered() {
        assert_eq!(metric_direction("fid"), Direction::LowerBetter);
        assert_eq!(metric_direction("KID"), Direction::LowerBetter);
        assert_eq!(metric_direction("lpips"), Direction::LowerBetter);
        assert_eq!(metric_direction("ssim"), Direction::HigherBetter);
        assert_eq!(metric_direction("dino_m"), Direction::HigherBetter);
        assert_eq!(metric_direction("clip_t"), Direction::HigherBetter);
    }
}
