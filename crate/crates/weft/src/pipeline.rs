//! End-to-end inference: garment-conditioned text-to-image, inpainting
//! virtual try-on with per-step latent blending, classifier-free guidance,
//! and the task registry mapping task names to pipeline wiring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{BlockCodec, LatentCodec};
use crate::control::{condition_to_latent, pack_condition, PoseKind, PoseMap, TryOnControlNet};
use crate::error::{Result, WeftError};
use crate::garment::GarmentEncoder;
use crate::latent::{downsample_mask, LatentTensor, Space};
use crate::nn::ParamSet;
use crate::schedule::{add_noise, ddim_step, ddim_timesteps, NoiseSchedule, ScheduleConfig};
use crate::tensor::{derive_seed, Tensor};
use crate::text::{HashedTextEmbedder, TextEmbedding};
use crate::unet::{AttentionMode, ControlResiduals, InjectionSet, MiniUnet, UNetConfig};

/// The four supported task names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    GcT2i,
    StylizedGcT2i,
    ControllableGcT2i,
    VirtualTryon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Text2Image,
    Inpainting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlChoice {
    None,
    Any,
    Tryon,
}

/// One row of the task registry: how a named task wires the pieces together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskName,
    pub pipeline: PipelineKind,
    pub use_garment_encoder: bool,
    pub base_model_id: String,
    pub controlnet: ControlChoice,
}

/// Looks up a task by name. Names are matched case-insensitively with
/// spaces, hyphens, and underscores ignored, so "virtual try-on",
/// "virtual_tryon", and "Virtual TryOn" all resolve to the same row.
pub fn resolve_task(name: &str) -> Result<TaskConfig> {
    let key: String = name.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
    let (task, pipeline, base, controlnet) = match key.as_str() {
        "gct2i" => (TaskName::GcT2i, PipelineKind::Text2Image, "sd-mini", ControlChoice::None),
        "stylizedgct2i" => {
            (TaskName::StylizedGcT2i, PipelineKind::Text2Image, "stylized", ControlChoice::None)
        }
        "controllablegct2i" => {
            (TaskName::ControllableGcT2i, PipelineKind::Text2Image, "any", ControlChoice::Any)
        }
        "virtualtryon" => {
            (TaskName::VirtualTryon, PipelineKind::Inpainting, "sd-mini", ControlChoice::Tryon)
        }
        _ => return Err(WeftError::UnknownTask(name.to_string())),
    };
    Ok(TaskConfig {
        task,
        pipeline,
        use_garment_encoder: true,
        base_model_id: base.to_string(),
        controlnet,
    })
}

/// All four registry rows in declaration order.
pub fn task_registry() -> Vec<TaskConfig> {
    ["gc_t2i", "stylized_gc_t2i", "controllable_gc_t2i", "virtual_tryon"]
        .iter()
        .map(|n| resolve_task(n).expect("registry names are valid"))
        .collect()
}

/// Classifier-free guidance: `eps_uncond + s * (eps_cond - eps_uncond)`.
pub fn cfg_combine(
    eps_uncond: &LatentTensor,
    eps_cond: &LatentTensor,
    s: f64,
) -> Result<LatentTensor> {
    if eps_uncond.tensor().shape() != eps_cond.tensor().shape() {
        return Err(WeftError::ShapeMismatch {
            expected: format!("{:?}", eps_uncond.tensor().shape()),
            got: format!("{:?}", eps_cond.tensor().shape()),
        });
    }
    let data: Vec<f64> = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + s * (c - u))
        .collect();
    LatentTensor::new(
        Tensor::from_vec(eps_uncond.tensor().shape(), data),
        eps_uncond.space(),
    )
}

/// Per-element latent blend: `m * z_gen + (1 - m) * z_src_noised`, with the
/// single-channel mask broadcast across latent channels.
pub fn blend_latents(
    z_gen: &LatentTensor,
    z_src_noised: &LatentTensor,
    m_latent: &Tensor,
) -> Result<LatentTensor> {
    let shape = z_gen.tensor().shape();
    if z_src_noised.tensor().shape() != shape {
        return Err(WeftError::ShapeMismatch {
            expected: format!("{shape:?}"),
            got: format!("{:?}", z_src_noised.tensor().shape()),
        });
    }
    let (h, w) = (z_gen.height(), z_gen.width());
    if m_latent.shape() != [1, h, w] {
        return Err(WeftError::ShapeMismatch {
            expected: format!("[1, {h}, {w}]"),
            got: format!("{:?}", m_latent.shape()),
        });
    }
    for &m in m_latent.data() {
        if !(0.0..=1.0).contains(&m) {
            return Err(WeftError::InvalidTensor(format!("blend mask value {m} outside [0, 1]")));
        }
    }
    let hw = h * w;
    let data: Vec<f64> = z_gen
        .data()
        .iter()
        .zip(z_src_noised.data())
        .enumerate()
        .map(|(i, (&g, &s))| {
            let m = m_latent.data()[i % hw];
            m * g + (1.0 - m) * s
        })
        .collect();
    LatentTensor::new(Tensor::from_vec(shape, data), z_gen.space())
}

/// Which timestep the garment encoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentTiming {
    /// Re-encode at every sampling step with that step's timestep. This is
    /// the default and matches how training samples the encoder.
    Matched,
    /// Encode once at a fixed timestep and reuse the K/V at every step.
    Fixed(usize),
}

impl GarmentTiming {
    pub fn resolve(&self, step_t: usize) -> usize {
        match self {
            GarmentTiming::Matched => step_t,
            GarmentTiming::Fixed(t) => *t,
        }
    }
}

/// Behavior knobs shared by both pipelines.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    /// Timestep policy for the garment encoder.
    pub garment_timing: GarmentTiming,
    /// When true the unconditional guidance pass also drops the garment K/V;
    /// by default it keeps them so guidance steers text adherence only.
    pub drop_garment_on_uncond: bool,
    /// When true incoming masks mark the region to keep instead of the
    /// region to generate, and are inverted on entry.
    pub masks_mark_keep: bool,
    /// Scale on the garment attention branch.
    pub garment_scale: f64,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            garment_timing: GarmentTiming::Matched,
            drop_garment_on_uncond: false,
            masks_mark_keep: false,
            garment_scale: 1.0,
            eta: 0.0,
        }
    }
}

/// Everything inference needs: parameters, networks, codec, embedder, and
/// the noise schedule. Parameters are immutable during sampling, so a bundle
/// can serve concurrent requests through shared references.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub set: ParamSet,
    pub denoiser: MiniUnet,
    pub garment: GarmentEncoder,
    pub control: Option<TryOnControlNet>,
    pub codec: BlockCodec,
    pub embedder: HashedTextEmbedder,
    pub schedule: NoiseSchedule,
    pub options: PipelineOptions,
}

pub const DENOISER_PREFIX: &str = "denoiser.";
pub const GARMENT_PREFIX: &str = "garment.";
pub const CONTROL_PREFIX: &str = "control.";

/// Per-request garment conditioning state, encoded once and re-projected to
/// K/V at each step's timestep.
struct GarmentContext {
    latent: Tensor,
    prompt: TextEmbedding,
    mode: AttentionMode,
}

impl ModelBundle {
    /// Builds a freshly initialized bundle: denoiser from the seed in `cfg`,
    /// garment encoder copied from the denoiser trunk, and (optionally) a
    /// zero-initialized control branch.
    pub fn fresh(cfg: &UNetConfig, sched: &ScheduleConfig, with_control: bool) -> Result<Self> {
        let mut set = ParamSet::new();
        let denoiser = MiniUnet::build(&mut set, DENOISER_PREFIX, cfg)?;
        let garment = GarmentEncoder::from_denoiser(&mut set, GARMENT_PREFIX, DENOISER_PREFIX, cfg)?;
        let control = if with_control {
            Some(TryOnControlNet::from_denoiser(&mut set, CONTROL_PREFIX, DENOISER_PREFIX, cfg)?)
        } else {
            None
        };
        Ok(ModelBundle {
            set,
            denoiser,
            garment,
            control,
            codec: BlockCodec::default(),
            embedder: HashedTextEmbedder::default(),
            schedule: NoiseSchedule::from_config(sched)?,
            options: PipelineOptions::default(),
        })
    }

    pub fn unet_config(&self) -> &UNetConfig {
        self.denoiser.config()
    }

    fn latent_shape_for(&self, image: &LatentTensor) -> Result<[usize; 3]> {
        let f = self.codec.factor();
        if image.height() % f != 0 || image.width() % f != 0 {
            return Err(WeftError::ShapeMismatch {
                expected: format!("spatial dims divisible by {f}"),
                got: format!("{}x{}", image.height(), image.width()),
            });
        }
        Ok([self.unet_config().latent_channels, image.height() / f, image.width() / f])
    }

    fn garment_context(&self, req: &GenerationRequest) -> Result<Option<GarmentContext>> {
        if req.attention_mode == AttentionMode::None {
            return Ok(None);
        }
        Ok(Some(GarmentContext {
            latent: self.codec.encode_image(&req.garment_image)?.into_tensor(),
            prompt: self.embedder.embed(&req.garment_prompt),
            mode: req.attention_mode,
        }))
    }

    fn injection_at(&self, ctx: &Option<GarmentContext>, step_t: usize) -> Result<Option<InjectionSet>> {
        let Some(ctx) = ctx else { return Ok(None) };
        let t = self.options.garment_timing.resolve(step_t);
        let kv = self.garment.encode(&self.set, &ctx.latent, &ctx.prompt, t)?;
        Ok(Some(InjectionSet { kv, mode: ctx.mode, scale: self.options.garment_scale }))
    }

    /// One guided denoiser evaluation: conditional and unconditional passes
    /// combined with the request's guidance scale.
    #[allow(clippy::too_many_arguments)]
    fn guided_eps(
        &self,
        z: &Tensor,
        t: usize,
        text_cond: &crate::text::TextEmbedding,
        text_uncond: &crate::text::TextEmbedding,
        inj: &Option<InjectionSet>,
        guidance: f64,
        cond_latent: Option<&Tensor>,
    ) -> Result<Tensor> {
        let res_cond = self.residuals_for(z, t, text_cond, cond_latent)?;
        let eps_cond =
            self.denoiser.forward(&self.set, z, t, text_cond, inj.as_ref(), res_cond.as_ref())?;
        let uncond_inj = if self.options.drop_garment_on_uncond { &None } else { inj };
        let res_uncond = self.residuals_for(z, t, text_uncond, cond_latent)?;
        let eps_uncond = self.denoiser.forward(
            &self.set,
            z,
            t,
            text_uncond,
            uncond_inj.as_ref(),
            res_uncond.as_ref(),
        )?;
        let c = LatentTensor::new(eps_cond, Space::Latent)?;
        let u = LatentTensor::new(eps_uncond, Space::Latent)?;
        Ok(cfg_combine(&u, &c, guidance)?.into_tensor())
    }

    fn residuals_for(
        &self,
        z: &Tensor,
        t: usize,
        text: &crate::text::TextEmbedding,
        cond_latent: Option<&Tensor>,
    ) -> Result<Option<ControlResiduals>> {
        match (self.control.as_ref(), cond_latent) {
            (Some(ctrl), Some(cz)) => Ok(Some(ctrl.forward(&self.set, z, t, text, cz)?)),
            _ => Ok(None),
        }
    }

    /// Garment-conditioned text-to-image generation. The output has the
    /// garment image's dimensions. Deterministic for a fixed seed.
    pub fn generate_gc_t2i(&self, req: &GenerationRequest) -> Result<LatentTensor> {
        req.validate()?;
        let shape = self.latent_shape_for(&req.garment_image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, "pipeline.init_noise"));
        let init = Tensor::randn(&shape, &mut rng);
        self.generate_gc_t2i_with_noise(req, &init)
    }

    /// Same as [`generate_gc_t2i`](Self::generate_gc_t2i) but with the
    /// initial latent noise supplied by the caller. Everything downstream of
    /// the noise draw is identical, which makes seed isolation testable.
    pub fn generate_gc_t2i_with_noise(
        &self,
        req: &GenerationRequest,
        init_noise: &Tensor,
    ) -> Result<LatentTensor> {
        req.validate()?;
        let shape = self.latent_shape_for(&req.garment_image)?;
        if init_noise.shape() != shape {
            return Err(WeftError::ShapeMismatch {
                expected: format!("{shape:?}"),
                got: format!("{:?}", init_noise.shape()),
            });
        }
        let ctx = self.garment_context(req)?;
        let text_cond = self.embedder.embed(&req.target_prompt);
        let text_uncond = self.embedder.embed("");

        let ladder = ddim_timesteps(self.schedule.len(), req.steps)?;
        let mut z = init_noise.clone();
        for (i, &t) in ladder.iter().enumerate() {
            let t_prev = ladder.get(i + 1).copied();
            let inj = self.injection_at(&ctx, t)?;
            let eps = self.guided_eps(&z, t, &text_cond, &text_uncond, &inj, req.guidance_scale, None)?;
            z = ddim_step(&z, &eps, t, t_prev, &self.schedule, self.options.eta, None)?;
        }
        self.codec.decode_latent(&LatentTensor::new(z, Space::Latent)?)
    }

    /// Inpainting virtual try-on. Out-of-mask content is preserved at every
    /// step by blending with the forward-noised source latent, and the final
    /// image composites the source codec round-trip back outside the mask.
    pub fn tryon(&self, req: &TryOnRequest) -> Result<LatentTensor> {
        Ok(self.tryon_outcome(req)?.image)
    }

    /// Runs try-on and also returns the final pre-decode latent.
    pub fn tryon_outcome(&self, req: &TryOnRequest) -> Result<TryOnOutcome> {
        req.validate()?;
        let shape = self.latent_shape_for(&req.source_image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.gen.seed, "pipeline.init_noise"));
        let init = Tensor::randn(&shape, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.gen.seed, "pipeline.source_noise"));
        let eps_src = Tensor::randn(&shape, &mut rng);
        self.tryon_with_noise(req, &init, &eps_src)
    }

    /// Try-on with caller-supplied initial noise and source noise. `eps_src`
    /// is the single draw used to forward-noise the source latent at every
    /// step's noise level.
    pub fn tryon_with_noise(
        &self,
        req: &TryOnRequest,
        init_noise: &Tensor,
        eps_src: &Tensor,
    ) -> Result<TryOnOutcome> {
        req.validate()?;
        let shape = self.latent_shape_for(&req.source_image)?;
        if init_noise.shape() != shape || eps_src.shape() != shape {
            return Err(WeftError::ShapeMismatch {
                expected: format!("{shape:?}"),
                got: format!("{:?} / {:?}", init_noise.shape(), eps_src.shape()),
            });
        }

        let mask = req.effective_mask(self.options.masks_mark_keep);
        let (h, w) = (req.source_image.height(), req.source_image.width());
        let hw = h * w;
        let masked: Vec<f64> = req
            .source_image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (1.0 - mask.data()[i % hw]))
            .collect();
        let context = LatentTensor::new(
            Tensor::from_vec(req.source_image.tensor().shape(), masked),
            Space::Pixel,
        )?;
        let cond = pack_condition(&context, &mask, &req.pose)?;
        let cond_latent = condition_to_latent(&cond, self.codec.factor())?;
        let m_latent = downsample_mask(&mask, self.codec.factor())?;

        let z0_src = self.codec.encode_image(&req.source_image)?.into_tensor();
        let ctx = self.garment_context(&req.gen)?;
        let text_cond = self.embedder.embed(&req.gen.target_prompt);
        let text_uncond = self.embedder.embed("");

        let ladder = ddim_timesteps(self.schedule.len(), req.gen.steps)?;
        let mut z = init_noise.clone();
        for (i, &t) in ladder.iter().enumerate() {
            let t_prev = ladder.get(i + 1).copied();
            let inj = self.injection_at(&ctx, t)?;
            let eps = self.guided_eps(
                &z,
                t,
                &text_cond,
                &text_uncond,
                &inj,
                req.gen.guidance_scale,
                Some(&cond_latent),
            )?;
            let z_gen = ddim_step(&z, &eps, t, t_prev, &self.schedule, self.options.eta, None)?;
            let z_src_noised = match t_prev {
                Some(tp) => add_noise(&z0_src, eps_src, tp, &self.schedule)?,
                None => z0_src.clone(),
            };
            z = blend_latents(
                &LatentTensor::new(z_gen, Space::Latent)?,
                &LatentTensor::new(z_src_noised, Space::Latent)?,
                &m_latent,
            )?
            .into_tensor();
        }

        let final_latent = LatentTensor::new(z, Space::Latent)?;
        let decoded = self.codec.decode_latent(&final_latent)?;
        let roundtrip = self.codec.decode_latent(&self.codec.encode_image(&req.source_image)?)?;
        let composed: Vec<f64> = decoded
            .data()
            .iter()
            .zip(roundtrip.data())
            .enumerate()
            .map(|(i, (&gen, &src))| {
                let m = mask.data()[i % hw];
                m * gen + (1.0 - m) * src
            })
            .collect();
        let image = LatentTensor::new(
            Tensor::from_vec(decoded.tensor().shape(), composed),
            Space::Pixel,
        )?;
        Ok(TryOnOutcome { image, final_latent })
    }
}

/// Inputs for garment-conditioned text-to-image.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub garment_image: LatentTensor,
    pub garment_prompt: String,
    pub target_prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub attention_mode: AttentionMode,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(WeftError::Config("steps must be at least 1".into()));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(WeftError::Config(format!(
                "guidance_scale must be finite and nonnegative, got {}",
                self.guidance_scale
            )));
        }
        self.garment_image.expect_space(Space::Pixel)?;
        Ok(())
    }
}

/// Inputs for inpainting try-on: the generation fields plus the source
/// person image, the region mask, and optional pose conditioning.
#[derive(Debug, Clone)]
pub struct TryOnRequest {
    pub gen: GenerationRequest,
    pub source_image: LatentTensor,
    pub mask: Tensor,
    pub pose: PoseMap,
}

impl TryOnRequest {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.source_image.expect_space(Space::Pixel)?;
        let (h, w) = (self.source_image.height(), self.source_image.width());
        if self.mask.shape() != [1, h, w] {
            return Err(WeftError::ShapeMismatch {
                expected: format!("mask [1, {h}, {w}]"),
                got: format!("{:?}", self.mask.shape()),
            });
        }
        for &m in self.mask.data() {
            if m != 0.0 && m != 1.0 {
                return Err(WeftError::InvalidTensor(format!(
                    "mask must be binary, found {m}"
                )));
            }
        }
        if self.pose.kind != PoseKind::None
            && (self.pose.height() != h || self.pose.width() != w)
        {
            return Err(WeftError::ShapeMismatch {
                expected: format!("pose [*, {h}, {w}]"),
                got: format!("{:?}", self.pose.data.shape()),
            });
        }
        Ok(())
    }

    /// The mask with 1 marking the region to generate, applying the
    /// convention flip when the bundle says masks mark the keep region.
    pub fn effective_mask(&self, masks_mark_keep: bool) -> Tensor {
        if !masks_mark_keep {
            return self.mask.clone();
        }
        let mut m = self.mask.clone();
        for v in m.data_mut() {
            *v = 1.0 - *v;
        }
        m
    }
}

/// Try-on result: the composited pixel image plus the final latent, which
/// tests use to check out-of-mask preservation before decoding.
#[derive(Debug, Clone)]
pub struct TryOnOutcome {
    pub image: LatentTensor,
    pub final_latent: LatentTensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::sample_noise;

    fn small_bundle(with_control: bool) -> ModelBundle {
        let cfg = UNetConfig::default();
        let sched = ScheduleConfig { steps: 20, beta_start: 1e-4, beta_end: 0.02 };
        ModelBundle::fresh(&cfg, &sched, with_control).unwrap()
    }

    fn pixel_image(seed: u64, h: usize, w: usize) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTensor::new(Tensor::randn(&[3, h, w], &mut rng), Space::Pixel).unwrap()
    }

    fn gen_request(seed: u64) -> GenerationRequest {
        GenerationRequest {
            garment_image: pixel_image(40, 32, 32),
            garment_prompt: "a red striped shirt".into(),
            target_prompt: "a person wearing a red striped shirt".into(),
            seed,
            steps: 4,
            guidance_scale: 3.0,
            attention_mode: AttentionMode::Asa,
        }
    }

    fn tryon_request(seed: u64) -> TryOnRequest {
        let mut mask = Tensor::zeros(&[1, 32, 32]);
        for y in 8..24 {
            for x in 8..24 {
                mask.data_mut()[y * 32 + x] = 1.0;
            }
        }
        TryOnRequest {
            gen: gen_request(seed),
            source_image: pixel_image(41, 32, 32),
            mask,
            pose: PoseMap::none(32, 32),
        }
    }

    #[test]
    fn registry_has_exactly_four_rows() {
        let rows = task_registry();
        assert_eq!(rows.len(), 4);
        let vt = resolve_task("virtual try-on").unwrap();
        assert_eq!(vt.task, TaskName::VirtualTryon);
        assert_eq!(vt.pipeline, PipelineKind::Inpainting);
        assert!(vt.use_garment_encoder);
        assert_eq!(vt.base_model_id, "sd-mini");
        assert_eq!(vt.controlnet, ControlChoice::Tryon);

        let gc = resolve_task("GC t2i").unwrap();
        assert_eq!(gc.task, TaskName::GcT2i);
        assert_eq!(gc.pipeline, PipelineKind::Text2Image);
        assert_eq!(gc.base_model_id, "sd-mini");
        assert_eq!(gc.controlnet, ControlChoice::None);

        let st = resolve_task("stylized_gc_t2i").unwrap();
        assert_eq!(st.base_model_id, "stylized");
        assert_eq!(st.controlnet, ControlChoice::None);

        let ct = resolve_task("controllable GC t2i").unwrap();
        assert_eq!(ct.base_model_id, "any");
        assert_eq!(ct.controlnet, ControlChoice::Any);

        assert!(matches!(resolve_task("segmentation"), Err(WeftError::UnknownTask(_))));
    }

    #[test]
    fn inpainting_rows_pair_with_tryon_control() {
        for row in task_registry() {
            if row.task == TaskName::VirtualTryon {
                assert_eq!(row.pipeline, PipelineKind::Inpainting);
                assert_eq!(row.controlnet, ControlChoice::Tryon);
            }
        }
    }

    #[test]
    fn cfg_combine_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = LatentTensor::new(Tensor::randn(&[3, 4, 4], &mut rng), Space::Latent).unwrap();
        let c = LatentTensor::new(Tensor::randn(&[3, 4, 4], &mut rng), Space::Latent).unwrap();
        let s = 3.0;
        let out = cfg_combine(&u, &c, s).unwrap();
        for i in 0..u.data().len() {
            let want = u.data()[i] + s * (c.data()[i] - u.data()[i]);
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_combine_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = LatentTensor::new(Tensor::randn(&[2, 4, 4], &mut rng), Space::Latent).unwrap();
        let c = LatentTensor::new(Tensor::randn(&[2, 4, 4], &mut rng), Space::Latent).unwrap();
        let at_one = cfg_combine(&u, &c, 1.0).unwrap();
        assert!(at_one.max_abs_diff(&c) < 1e-12);
        for s in [0.0, 1.0, 3.0, 7.5] {
            let same = cfg_combine(&u, &u, s).unwrap();
            assert_eq!(same.data(), u.data());
        }
        let short = LatentTensor::zeros(2, 2, 2, Space::Latent).unwrap();
        assert!(cfg_combine(&u, &short, 1.0).is_err());
    }

    #[test]
    fn blend_selects_per_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = LatentTensor::new(Tensor::randn(&[3, 4, 4], &mut rng), Space::Latent).unwrap();
        let s = LatentTensor::new(Tensor::randn(&[3, 4, 4], &mut rng), Space::Latent).unwrap();

        let ones = Tensor::full(&[1, 4, 4], 1.0);
        assert_eq!(blend_latents(&g, &s, &ones).unwrap().data(), g.data());
        let zeros = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(blend_latents(&g, &s, &zeros).unwrap().data(), s.data());

        let mut checker = Tensor::zeros(&[1, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                checker.data_mut()[y * 4 + x] = ((x + y) % 2) as f64;
            }
        }
        let out = blend_latents(&g, &s, &checker).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let i = (c * 4 + y) * 4 + x;
                    let want = if (x + y) % 2 == 1 { g.data()[i] } else { s.data()[i] };
                    assert_eq!(out.data()[i], want);
                }
            }
        }

        let bad = Tensor::full(&[1, 4, 4], 1.5);
        assert!(blend_latents(&g, &s, &bad).is_err());
    }

    #[test]
    fn generation_is_deterministic_for_a_fixed_seed() {
        let bundle = small_bundle(false);
        let req = gen_request(11);
        let a = bundle.generate_gc_t2i(&req).unwrap();
        let b = bundle.generate_gc_t2i(&req).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.tensor().shape(), &[3, 32, 32]);

        let mut other = req.clone();
        other.seed = 12;
        let c = bundle.generate_gc_t2i(&other).unwrap();
        assert!(a.max_abs_diff(&c) > 1e-9);
    }

    #[test]
    fn seed_only_changes_the_initial_noise() {
        let bundle = small_bundle(false);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = sample_noise(&[3, 8, 8], &mut rng);
        let mut a_req = gen_request(1);
        let mut b_req = gen_request(2);
        a_req.seed = 1;
        b_req.seed = 2;
        let a = bundle.generate_gc_t2i_with_noise(&a_req, &noise).unwrap();
        let b = bundle.generate_gc_t2i_with_noise(&b_req, &noise).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zeroed_garment_values_match_no_injection_exactly() {
        let mut bundle = small_bundle(false);
        let names: Vec<String> = bundle
            .set
            .sorted_names()
            .into_iter()
            .filter(|n| n.starts_with(GARMENT_PREFIX) && n.contains(".self_v."))
            .collect();
        assert!(!names.is_empty());
        for name in names {
            bundle.set.update(&name, |t| t.data_mut().fill(0.0)).unwrap();
        }
        let mut asa_req = gen_request(3);
        asa_req.attention_mode = AttentionMode::Asa;
        let mut none_req = asa_req.clone();
        none_req.attention_mode = AttentionMode::None;
        let asa = bundle.generate_gc_t2i(&asa_req).unwrap();
        let none = bundle.generate_gc_t2i(&none_req).unwrap();
        assert!(asa.max_abs_diff(&none) < 1e-6);
    }

    #[test]
    fn attention_modes_change_the_output() {
        let bundle = small_bundle(false);
        let req = gen_request(4);
        let asa = bundle.generate_gc_t2i(&req).unwrap();
        let mut csa_req = req.clone();
        csa_req.attention_mode = AttentionMode::Csa;
        let csa = bundle.generate_gc_t2i(&csa_req).unwrap();
        let mut none_req = req.clone();
        none_req.attention_mode = AttentionMode::None;
        let none = bundle.generate_gc_t2i(&none_req).unwrap();
        assert!(asa.max_abs_diff(&none) > 1e-9);
        assert!(asa.max_abs_diff(&csa) > 1e-9);
    }

    #[test]
    fn single_step_and_many_steps_both_complete() {
        let bundle = small_bundle(false);
        for steps in [1, 20] {
            let mut req = gen_request(5);
            req.steps = steps;
            let out = bundle.generate_gc_t2i(&req).unwrap();
            assert_eq!(out.tensor().shape(), &[3, 32, 32]);
            assert!(out.tensor().all_finite());
        }
    }

    #[test]
    fn request_validation_rejects_bad_fields() {
        let bundle = small_bundle(false);
        let mut req = gen_request(6);
        req.steps = 0;
        assert!(bundle.generate_gc_t2i(&req).is_err());
        let mut req = gen_request(6);
        req.guidance_scale = -1.0;
        assert!(bundle.generate_gc_t2i(&req).is_err());
        let mut treq = tryon_request(6);
        treq.mask = Tensor::zeros(&[1, 8, 8]);
        assert!(bundle.tryon(&treq).is_err());
        let mut treq = tryon_request(6);
        treq.mask.data_mut()[0] = 0.4;
        assert!(bundle.tryon(&treq).is_err());
    }

    #[test]
    fn tryon_is_deterministic_and_preserves_out_of_mask_pixels() {
        let bundle = small_bundle(true);
        let req = tryon_request(21);
        let a = bundle.tryon(&req).unwrap();
        let b = bundle.tryon(&req).unwrap();
        assert_eq!(a.data(), b.data());

        let roundtrip = bundle
            .codec
            .decode_latent(&bundle.codec.encode_image(&req.source_image).unwrap())
            .unwrap();
        let hw = 32 * 32;
        let mut out_mse = 0.0;
        let mut n = 0.0;
        for (i, (&got, &want)) in a.data().iter().zip(roundtrip.data()).enumerate() {
            if req.mask.data()[i % hw] == 0.0 {
                out_mse += (got - want) * (got - want);
                n += 1.0;
            }
        }
        assert!(out_mse / n < 1e-6);
    }

    #[test]
    fn all_zero_mask_returns_the_codec_roundtrip_exactly() {
        let bundle = small_bundle(true);
        let mut req = tryon_request(22);
        req.mask = Tensor::zeros(&[1, 32, 32]);
        let out = bundle.tryon(&req).unwrap();
        let roundtrip = bundle
            .codec
            .decode_latent(&bundle.codec.encode_image(&req.source_image).unwrap())
            .unwrap();
        assert_eq!(out.data(), roundtrip.data());
    }

    #[test]
    fn final_latent_keeps_source_values_where_mask_is_zero() {
        let bundle = small_bundle(true);
        let req = tryon_request(23);
        let outcome = bundle.tryon_outcome(&req).unwrap();
        let z0 = bundle.codec.encode_image(&req.source_image).unwrap();
        let m = downsample_mask(&req.mask, bundle.codec.factor()).unwrap();
        let hw = 8 * 8;
        for (i, (&got, &src)) in outcome.final_latent.data().iter().zip(z0.data()).enumerate() {
            if m.data()[i % hw] == 0.0 {
                assert_eq!(got, src);
            }
        }
    }

    #[test]
    fn fresh_control_branch_is_neutral_through_the_full_pipeline() {
        let with = small_bundle(true);
        let without = ModelBundle { control: None, ..with.clone() };
        let req = tryon_request(24);
        let a = with.tryon(&req).unwrap();
        let b = without.tryon(&req).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn tryon_noise_injection_isolates_the_seed() {
        let bundle = small_bundle(true);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let init = sample_noise(&[3, 8, 8], &mut rng);
        let eps_src = sample_noise(&[3, 8, 8], &mut rng);
        let mut a_req = tryon_request(1);
        a_req.gen.seed = 100;
        let mut b_req = tryon_request(1);
        b_req.gen.seed = 200;
        let a = bundle.tryon_with_noise(&a_req, &init, &eps_src).unwrap();
        let b = bundle.tryon_with_noise(&b_req, &init, &eps_src).unwrap();
        assert_eq!(a.image.data(), b.image.data());
    }

    #[test]
    fn mask_convention_flip_inverts_the_generated_region() {
        let mut flipped = small_bundle(true);
        flipped.options.masks_mark_keep = true;
        let plain = small_bundle(true);

        let req = tryon_request(25);
        let mut inverted = req.clone();
        for v in inverted.mask.data_mut() {
            *v = 1.0 - *v;
        }
        let a = plain.tryon(&req).unwrap();
        let b = flipped.tryon(&inverted).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn pose_conditioning_flows_through_once_control_is_live() {
        let mut bundle = small_bundle(true);
        // Make the control branch responsive: lift a projection and the
        // stem's pose-slot weights off zero.
        bundle.set.update("control.proj.skip0.w", |t| {
            for v in t.data_mut().iter_mut().step_by(4) {
                *v = 0.03;
            }
        })
        .unwrap();
        let cfg = *bundle.unet_config();
        let in_ch = cfg.latent_channels + bundle.control.as_ref().unwrap().cond_channels();
        let pose_ch = cfg.latent_channels + 4;
        bundle
            .set
            .update("control.stem.w", |t| {
                for o in 0..cfg.base_channels {
                    t.data_mut()[(o * in_ch + pose_ch) * 9 + 4] = 0.05;
                    t.data_mut()[(o * in_ch + pose_ch + 1) * 9 + 4] = 0.05;
                }
            })
            .unwrap();

        let mut req = tryon_request(26);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        req.pose = PoseMap::new(Tensor::randn(&[2, 32, 32], &mut rng), PoseKind::DenseCoords).unwrap();
        let a = bundle.tryon(&req).unwrap();
        let mut other = req.clone();
        other.pose = PoseMap::none(32, 32);
        let b = bundle.tryon(&other).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn concurrent_requests_match_serial_results() {
        let bundle = std::sync::Arc::new(small_bundle(true));
        let gen_req = gen_request(31);
        let try_req = tryon_request(32);
        let serial_gen = bundle.generate_gc_t2i(&gen_req).unwrap();
        let serial_try = bundle.tryon(&try_req).unwrap();

        let (par_gen, par_try) = std::thread::scope(|s| {
            let b1 = bundle.clone();
            let g = s.spawn(move || b1.generate_gc_t2i(&gen_req).unwrap());
            let b2 = bundle.clone();
            let t = s.spawn(move || b2.tryon(&try_req).unwrap());
            (g.join().unwrap(), t.join().unwrap())
        });
        assert_eq!(par_gen.data(), serial_gen.data());
        assert_eq!(par_try.data(), serial_try.data());
    }
}
