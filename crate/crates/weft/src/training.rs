//! Two-stage training: stage one fits the garment encoder against a frozen
//! denoiser; stage two freezes the encoder and fits the control branch.
//! Includes consistent spatial augmentation, content-keyed per-example
//! randomness (so loss is independent of batch order), SGD with momentum,
//! and line-delimited JSON progress logging.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::control::{condition_to_latent, pack_condition, PoseMap};
use crate::dataset::{dispatch_prompts, DatasetRecord, ParseLabel, ParseMap};
use crate::error::{Result, WeftError};
use crate::latent::{flip_h, warp_plane, LatentTensor, Space};
use crate::nn::collect_grads;
use crate::pipeline::{ModelBundle, CONTROL_PREFIX, GARMENT_PREFIX};
use crate::schedule::add_noise;
use crate::tensor::{fnv1a64, Graph, Tensor};
use crate::unet::{AttentionMode, GraphInjection};

/// Training stage. Stage two assumes the garment encoder was already fitted
/// and typically starts from a stage-one checkpoint; the command layer
/// enforces that ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = WeftError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(WeftError::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = WeftError;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s
            .parse()
            .map_err(|_| WeftError::Config(format!("stage must be 1 or 2, got {s}")))?;
        Stage::try_from(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Flip,
    Shift,
    Scale,
}

impl std::str::FromStr for Augmentation {
    type Err = WeftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flip" => Ok(Augmentation::Flip),
            "shift" => Ok(Augmentation::Shift),
            "scale" => Ok(Augmentation::Scale),
            other => Err(WeftError::Config(format!("unknown augmentation {other}"))),
        }
    }
}

/// The augmentations each stage may use: stage one flips only, stage two
/// adds random shift and scale.
pub fn allowed_augmentations(stage: Stage) -> BTreeSet<Augmentation> {
    match stage {
        Stage::One => BTreeSet::from([Augmentation::Flip]),
        Stage::Two => {
            BTreeSet::from([Augmentation::Flip, Augmentation::Shift, Augmentation::Scale])
        }
    }
}

/// Default learning rate per stage.
pub fn stage_default_lr(stage: Stage) -> f64 {
    match stage {
        Stage::One => 1e-4,
        Stage::Two => 1e-5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub augmentations: BTreeSet<Augmentation>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            stage: Stage::One,
            learning_rate: stage_default_lr(Stage::One),
            batch_size: 4,
            max_steps: 100,
            augmentations: BTreeSet::from([Augmentation::Flip]),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(WeftError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(WeftError::Config("batch_size must be at least 1".into()));
        }
        let allowed = allowed_augmentations(self.stage);
        for a in &self.augmentations {
            if !allowed.contains(a) {
                return Err(WeftError::Config(format!(
                    "augmentation {a:?} is not allowed in stage {}",
                    u8::from(self.stage)
                )));
            }
        }
        Ok(())
    }
}

/// Mirrors every spatial field left-right. An involution.
pub fn flip_record(rec: &DatasetRecord) -> DatasetRecord {
    let (h, w) = (rec.parse_map.height(), rec.parse_map.width());
    let flipped_labels =
        warp_plane(rec.parse_map.labels(), h, w, 0u8, |y, x| (y as i64, (w - 1 - x) as i64));
    DatasetRecord {
        person_image: LatentTensor::new(flip_h(rec.person_image.tensor()), Space::Pixel)
            .expect("flip preserves shape"),
        garment_image: LatentTensor::new(flip_h(rec.garment_image.tensor()), Space::Pixel)
            .expect("flip preserves shape"),
        dense_map: PoseMap { data: flip_h(&rec.dense_map.data), kind: rec.dense_map.kind },
        parse_map: ParseMap::new(flipped_labels, h, w).expect("labels preserved"),
        agnostic_mask: flip_h(&rec.agnostic_mask),
        garment_category_prompt: rec.garment_category_prompt.clone(),
        target_prompt: rec.target_prompt.clone(),
    }
}

fn warp_record(
    rec: &DatasetRecord,
    map: impl Fn(usize, usize) -> (i64, i64) + Copy,
) -> DatasetRecord {
    let (h, w) = (rec.parse_map.height(), rec.parse_map.width());
    let warp_tensor = |t: &Tensor, fill: f64| {
        let c = t.shape()[0];
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
            data.extend(warp_plane(plane, h, w, fill, map));
        }
        Tensor::from_vec(t.shape(), data)
    };
    let labels = warp_plane(rec.parse_map.labels(), h, w, ParseLabel::Background as u8, map);
    DatasetRecord {
        person_image: LatentTensor::new(warp_tensor(rec.person_image.tensor(), 0.0), Space::Pixel)
            .expect("warp preserves shape"),
        garment_image: LatentTensor::new(
            warp_tensor(rec.garment_image.tensor(), 0.0),
            Space::Pixel,
        )
        .expect("warp preserves shape"),
        dense_map: PoseMap {
            data: warp_tensor(&rec.dense_map.data, 0.0),
            kind: rec.dense_map.kind,
        },
        parse_map: ParseMap::new(labels, h, w).expect("labels preserved"),
        agnostic_mask: warp_tensor(&rec.agnostic_mask, 0.0),
        garment_category_prompt: rec.garment_category_prompt.clone(),
        target_prompt: rec.target_prompt.clone(),
    }
}

/// Translates every spatial field by `(dy, dx)`, filling vacated pixels with
/// zeros (background for the parse map).
pub fn shift_record(rec: &DatasetRecord, dy: i64, dx: i64) -> DatasetRecord {
    warp_record(rec, move |y, x| (y as i64 - dy, x as i64 - dx))
}

/// Rescales every spatial field about the canvas center with nearest
/// neighbor sampling. `factor` 1.0 is the identity.
pub fn scale_record(rec: &DatasetRecord, factor: f64) -> DatasetRecord {
    let h = rec.parse_map.height() as f64;
    let w = rec.parse_map.width() as f64;
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    warp_record(rec, move |y, x| {
        let sy = ((y as f64 - cy) / factor + cy).round();
        let sx = ((x as f64 - cx) / factor + cx).round();
        (sy as i64, sx as i64)
    })
}

/// Applies the enabled augmentations with parameters drawn from `rng`. Every
/// spatial field of the record moves together. Pose planes are transformed
/// as images; their values are not re-normalized.
pub fn augment(
    rec: &DatasetRecord,
    rng: &mut ChaCha8Rng,
    stage: Stage,
    augs: &BTreeSet<Augmentation>,
) -> Result<DatasetRecord> {
    let allowed = allowed_augmentations(stage);
    for a in augs {
        if !allowed.contains(a) {
            return Err(WeftError::Config(format!(
                "augmentation {a:?} is not allowed in stage {}",
                u8::from(stage)
            )));
        }
    }
    let mut out = rec.clone();
    if augs.contains(&Augmentation::Flip) && rng.random::<bool>() {
        out = flip_record(&out);
    }
    if augs.contains(&Augmentation::Shift) {
        let dy = rng.random_range(-3..=3);
        let dx = rng.random_range(-3..=3);
        if (dy, dx) != (0, 0) {
            out = shift_record(&out, dy, dx);
        }
    }
    if augs.contains(&Augmentation::Scale) {
        let factor = 0.85 + 0.3 * rng.random::<f64>();
        out = scale_record(&out, factor);
    }
    Ok(out)
}

/// SGD with momentum state plus the global step counter.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub step: usize,
    pub velocity: BTreeMap<String, Tensor>,
}

impl TrainState {
    pub fn new() -> Self {
        TrainState::default()
    }
}

pub const SGD_MOMENTUM: f64 = 0.9;

/// Per-step summary, one JSON line in progress logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub grad_norm: BTreeMap<String, f64>,
}

/// Marks exactly the stage's trainable parameters so gradients flow only
/// where the stage allows: garment encoder in stage one, control branch in
/// stage two.
pub fn prepare_stage(bundle: &mut ModelBundle, stage: Stage) -> Result<()> {
    if stage == Stage::Two && bundle.control.is_none() {
        return Err(WeftError::Training("stage 2 needs a control branch in the bundle".into()));
    }
    let prefix = match stage {
        Stage::One => GARMENT_PREFIX,
        Stage::Two => CONTROL_PREFIX,
    };
    bundle.set.set_trainable_where(|name| name.starts_with(prefix));
    Ok(())
}

fn record_rng(cfg: &TrainingConfig, rec_hash: u64, step: usize, label: &str) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(24 + label.len());
    bytes.extend_from_slice(&cfg.seed.to_le_bytes());
    bytes.extend_from_slice(&rec_hash.to_le_bytes());
    bytes.extend_from_slice(&(step as u64).to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}

/// Builds the stage loss for one batch on a fresh graph and optionally
/// backpropagates. Records are processed in content-hash order, which makes
/// the loss and the gradients independent of batch permutation.
fn compute_stage_loss(
    bundle: &ModelBundle,
    batch: &[DatasetRecord],
    cfg: &TrainingConfig,
    step: usize,
    stage: Stage,
    want_grads: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(WeftError::Training("empty batch".into()));
    }
    let mut ordered: Vec<&DatasetRecord> = batch.iter().collect();
    ordered.sort_by_key(|r| r.content_hash());

    let mut g = Graph::new();
    let bnd = bundle.set.bind(&mut g);
    let t_max = bundle.schedule.len();
    let mut total: Option<crate::tensor::Var> = None;

    for rec in ordered {
        rec.validate()?;
        let hash = rec.content_hash();
        let rec = if cfg.augmentations.is_empty() {
            rec.clone()
        } else {
            let mut rng = record_rng(cfg, hash, step, "augment");
            augment(rec, &mut rng, stage, &cfg.augmentations)?
        };

        let t = record_rng(cfg, hash, step, "timestep").random_range(0..t_max);
        let z0 = bundle.codec.encode_image(&rec.person_image)?.into_tensor();
        let mut noise_rng = record_rng(cfg, hash, step, "noise");
        let eps = Tensor::randn(z0.shape(), &mut noise_rng);
        let x_t = add_noise(&z0, &eps, t, &bundle.schedule)?;

        let (garment_prompt, target_prompt) = dispatch_prompts(&rec);
        let garment_text = bundle.embedder.embed(garment_prompt);
        let target_text = bundle.embedder.embed(target_prompt);

        let garment_latent =
            bundle.codec.encode_image(&rec.garment_image)?.into_tensor();
        let gz = g.constant(garment_latent);
        let kv = bundle.garment.encode_graph(&mut g, &bnd, gz, &garment_text, t)?;
        let inj = GraphInjection {
            sites: kv,
            mode: AttentionMode::Asa,
            scale: bundle.options.garment_scale,
        };

        let residuals = if stage == Stage::Two {
            let ctrl = bundle
                .control
                .as_ref()
                .ok_or_else(|| WeftError::Training("stage 2 needs a control branch".into()))?;
            let hw = rec.person_image.height() * rec.person_image.width();
            let context: Vec<f64> = rec
                .person_image
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (1.0 - rec.agnostic_mask.data()[i % hw]))
                .collect();
            let context = LatentTensor::new(
                Tensor::from_vec(rec.person_image.tensor().shape(), context),
                Space::Pixel,
            )?;
            let cond = pack_condition(&context, &rec.agnostic_mask, &rec.dense_map)?;
            let cz = condition_to_latent(&cond, bundle.codec.factor())?;
            let czv = g.constant(cz);
            let xv = g.constant(x_t.clone());
            Some(ctrl.forward_graph(&mut g, &bnd, xv, t, &target_text, czv)?)
        } else {
            None
        };

        let xv = g.constant(x_t);
        let pred = bundle.denoiser.forward_graph(
            &mut g,
            &bnd,
            xv,
            t,
            &target_text,
            Some(&inj),
            residuals.as_ref(),
        )?;
        let target = g.constant(eps);
        let sample_loss = g.mse(pred, target);
        total = Some(match total {
            Some(acc) => g.add(acc, sample_loss),
            None => sample_loss,
        });
    }

    let total = total.expect("batch checked non-empty");
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    let loss_value = g.val(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(WeftError::Training(format!("loss diverged to {loss_value}")));
    }
    let grads = if want_grads {
        g.backward(loss)?;
        collect_grads(&g, &bundle.set, &bnd)
    } else {
        BTreeMap::new()
    };
    Ok((loss_value, grads))
}

/// Evaluates the stage loss without touching parameters, using the same
/// per-record randomness a training step at `step` would use.
pub fn eval_loss(
    bundle: &ModelBundle,
    batch: &[DatasetRecord],
    cfg: &TrainingConfig,
    step: usize,
) -> Result<f64> {
    Ok(compute_stage_loss(bundle, batch, cfg, step, cfg.stage, false)?.0)
}

fn grad_norms_by_group(grads: &BTreeMap<String, Tensor>) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (name, grad) in grads {
        let group = name.split('.').next().unwrap_or("other").to_string();
        let sq: f64 = grad.data().iter().map(|v| v * v).sum();
        *sums.entry(group).or_insert(0.0) += sq;
    }
    sums.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

fn apply_sgd(
    bundle: &mut ModelBundle,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    state: &mut TrainState,
) -> Result<()> {
    for (name, grad) in grads {
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi = SGD_MOMENTUM * *vi + gi;
        }
        let v = v.clone();
        bundle.set.update(name, |p| {
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        })?;
    }
    Ok(())
}

fn run_step(
    batch: &[DatasetRecord],
    bundle: &mut ModelBundle,
    cfg: &TrainingConfig,
    state: &mut TrainState,
    stage: Stage,
) -> Result<StepStats> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(WeftError::Training(format!(
            "config says stage {} but step function is for stage {}",
            u8::from(cfg.stage),
            u8::from(stage)
        )));
    }
    prepare_stage(bundle, stage)?;
    let (loss, grads) = compute_stage_loss(bundle, batch, cfg, state.step, stage, true)?;
    apply_sgd(bundle, &grads, cfg.learning_rate, state)?;
    let stats = StepStats {
        step: state.step,
        stage: u8::from(stage),
        loss,
        grad_norm: grad_norms_by_group(&grads),
    };
    state.step += 1;
    Ok(stats)
}

/// One optimization step of stage one: only garment-encoder parameters move.
pub fn stage1_step(
    batch: &[DatasetRecord],
    bundle: &mut ModelBundle,
    cfg: &TrainingConfig,
    state: &mut TrainState,
) -> Result<StepStats> {
    run_step(batch, bundle, cfg, state, Stage::One)
}

/// One optimization step of stage two: only control-branch parameters move.
pub fn stage2_step(
    batch: &[DatasetRecord],
    bundle: &mut ModelBundle,
    cfg: &TrainingConfig,
    state: &mut TrainState,
) -> Result<StepStats> {
    run_step(batch, bundle, cfg, state, Stage::Two)
}

/// Evaluates the stage loss for one batch without updating anything, and
/// when `want_grads` also returns the gradients of the currently trainable
/// parameters. Mark trainability first via [`prepare_stage`]. Useful for
/// gradient probes such as finite-difference checks.
pub fn stage_loss(
    bundle: &ModelBundle,
    batch: &[DatasetRecord],
    cfg: &TrainingConfig,
    step: usize,
    want_grads: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    compute_stage_loss(bundle, batch, cfg, step, cfg.stage, want_grads)
}

/// Runs `cfg.max_steps` steps over the dataset in fixed batch rotation,
/// writing one JSON line per step to `log` when provided. Returns all step
/// stats.
pub fn train_loop(
    bundle: &mut ModelBundle,
    data: &[DatasetRecord],
    cfg: &TrainingConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(WeftError::Training("training needs at least one record".into()));
    }
    let mut state = TrainState::new();
    let mut all = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let batch: Vec<DatasetRecord> = (0..cfg.batch_size)
            .map(|j| data[(step * cfg.batch_size + j) % data.len()].clone())
            .collect();
        let stats = match cfg.stage {
            Stage::One => stage1_step(&batch, bundle, cfg, &mut state)?,
            Stage::Two => stage2_step(&batch, bundle, cfg, &mut state)?,
        };
        if let Some(ref mut sink) = log {
            let line = serde_json::to_string(&stats)
                .map_err(|e| WeftError::Training(format!("log serialization: {e}")))?;
            writeln!(sink, "{line}")?;
        }
        all.push(stats);
    }
    Ok(all)
}
