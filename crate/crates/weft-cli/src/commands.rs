//! The six command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use weft::checkpoint::{load_into, read_meta, save_checkpoint};
use weft::control::{PoseKind, PoseMap};
use weft::data_engine::{run_engine, EngineBackends, EngineConfig};
use weft::dataset::DatasetRecord;
use weft::error::{Result, WeftError};
use weft::eval::{
    dino_m, emit_report, fid, human_scores, image_features, kid, ssim, Embedder, EvalReport,
    ReportFormat, ReportMetadata, StudyResponse, ToyEmbedder,
};
use weft::imageio;
use weft::latent::LatentTensor;
use weft::pipeline::{GenerationRequest, ModelBundle, TryOnRequest};
use weft::tensor::derive_seed;
use weft::toy::{make_toy_dataset, toy_keypoint_pose};
use weft::training::{train_loop, Stage};

use crate::context::{log_event, read_jsonl, resolve_relative, RunContext};
use crate::data;
use crate::requests::{GenerateRequestLine, ResponseLine, TryonRequestLine};
use crate::{EvaluateArgs, GenerateArgs, ReportArgs, SynthesizeArgs, TrainArgs, TryonArgs};

/// Forwards training progress both to the log artifact and to stderr.
struct Tee {
    file: fs::File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        std::io::stderr().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()?;
        std::io::stderr().flush()
    }
}

fn artifact_event(path: &Path) {
    log_event(serde_json::json!({
        "event": "artifact",
        "path": path.to_string_lossy(),
    }));
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut ctx = RunContext::new("train", &args.common)?;
    if let Some(seed) = ctx.cli_seed {
        ctx.cfg.train.seed = seed;
    }
    let stage = ctx.cfg.train.stage;
    if stage == Stage::Two && args.init.is_none() {
        return Err(WeftError::Config(
            "stage 2 trains the control branch on top of a stage-1 checkpoint; pass --init".into(),
        ));
    }
    let init_path = args.init.as_deref().map(data::resolve_checkpoint);
    if let Some(ref path) = init_path {
        let meta = read_meta(path)?;
        if data::adopt_checkpoint_config(&mut ctx.cfg, &meta)? {
            log_event(serde_json::json!({
                "event": "config_from_checkpoint",
                "checkpoint": path.to_string_lossy(),
            }));
        }
    }
    let seed = ctx.cfg.train.seed;
    let records = data::load_records(&ctx.cfg, args.data.as_deref())?;
    ctx.write_snapshot(&args.out, seed)?;

    let mut bundle = ModelBundle::fresh(&ctx.cfg.model, &ctx.cfg.schedule, stage == Stage::Two)?;
    if let Some(ref path) = init_path {
        let report = load_into(path, &mut bundle.set, true)?;
        log_event(serde_json::json!({
            "event": "checkpoint_loaded",
            "checkpoint": path.to_string_lossy(),
            "loaded": report.loaded.len(),
            "skipped": report.skipped.len(),
        }));
    }

    let log_path = args.out.join("train_log.jsonl");
    let mut sink = Tee { file: fs::File::create(&log_path)? };
    let stats = train_loop(&mut bundle, &records, &ctx.cfg.train, Some(&mut sink))?;
    artifact_event(&log_path);

    let meta = BTreeMap::from([
        ("model".to_string(), serde_json::to_string(&ctx.cfg.model).expect("serializable")),
        ("schedule".to_string(), serde_json::to_string(&ctx.cfg.schedule).expect("serializable")),
        ("stage".to_string(), u8::from(stage).to_string()),
        ("seed".to_string(), seed.to_string()),
        ("steps".to_string(), stats.len().to_string()),
    ]);
    let ckpt_path = args.out.join(data::CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &bundle.set, &meta)?;
    artifact_event(&ckpt_path);

    log_event(serde_json::json!({
        "event": "run_complete",
        "command": "train",
        "steps": stats.len(),
        "final_loss": stats.last().map(|s| s.loss),
    }));
    Ok(())
}

/// One sampling job: the request (absent when preparation already failed)
/// plus its pre-filled response row.
struct Job {
    request: Option<GenerationRequest>,
    tryon: Option<(LatentTensor, weft::tensor::Tensor, PoseMap)>,
    response: ResponseLine,
}

fn base_request(cfg: &weft::config::RunConfig, garment: LatentTensor, seed: u64) -> GenerationRequest {
    GenerationRequest {
        garment_image: garment,
        garment_prompt: String::new(),
        target_prompt: String::new(),
        seed,
        steps: cfg.sampler.steps,
        guidance_scale: cfg.sampler.guidance_scale,
        attention_mode: cfg.sampler.attention_mode,
    }
}

/// Picks the pose conditioning for a dataset record, honoring --pose-kind.
fn record_pose(rec: &DatasetRecord, pose_kind: Option<&str>) -> Result<PoseMap> {
    let Some(kind) = pose_kind else {
        return Ok(rec.dense_map.clone());
    };
    let (h, w) = (rec.person_image.height(), rec.person_image.width());
    match kind.parse::<PoseKind>()? {
        PoseKind::None => Ok(PoseMap::none(h, w)),
        PoseKind::KeypointRender => toy_keypoint_pose(rec),
        PoseKind::DenseCoords => {
            if rec.dense_map.kind == PoseKind::DenseCoords {
                Ok(rec.dense_map.clone())
            } else {
                Err(WeftError::Config("record carries no dense pose".into()))
            }
        }
    }
}

fn run_jobs(bundle: &ModelBundle, jobs: Vec<Job>, out: &Path) -> Result<()> {
    let mut responses: Vec<ResponseLine> = Vec::with_capacity(jobs.len());
    let mut first_err: Option<WeftError> = None;
    for job in jobs {
        let Some(request) = job.request else {
            // Preparation already failed; the row carries the error.
            responses.push(job.response);
            continue;
        };
        let outcome = match &job.tryon {
            None => bundle.generate_gc_t2i(&request),
            Some((source, mask, pose)) => bundle.tryon(&TryOnRequest {
                gen: request.clone(),
                source_image: source.clone(),
                mask: mask.clone(),
                pose: pose.clone(),
            }),
        };
        match outcome {
            Ok(image) => {
                let name = job.response.image.as_deref().expect("job names its image");
                let path = out.join(name);
                imageio::save_image(&path, &image)?;
                artifact_event(&path);
                responses.push(job.response);
            }
            Err(err) => {
                responses.push(ResponseLine::failure(
                    job.response.index,
                    &job.response.method,
                    err.to_string(),
                ));
                if first_err.is_none() {
                    first_err = Some(err);
                }
            }
        }
    }

    let resp_path = out.join("responses.jsonl");
    let mut text = String::new();
    for line in &responses {
        text.push_str(&serde_json::to_string(line).expect("serializable"));
        text.push('\n');
    }
    fs::write(&resp_path, text)?;
    artifact_event(&resp_path);

    let failures = responses.iter().filter(|r| r.error.is_some()).count();
    log_event(serde_json::json!({
        "event": "run_complete",
        "images": responses.len() - failures,
        "failures": failures,
    }));
    match first_err {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut ctx = RunContext::new("generate", &args.common)?;
    let base_seed = ctx.cli_seed.unwrap_or(0);
    let bundle = data::build_bundle(&mut ctx.cfg, args.checkpoint.as_deref())?;
    ctx.write_snapshot(&args.out, base_seed)?;

    let mut jobs = Vec::new();
    let mut first_prep_err: Option<WeftError> = None;
    if let Some(req_file) = &args.requests {
        let lines: Vec<GenerateRequestLine> = read_jsonl(req_file)?;
        for (i, line) in lines.into_iter().enumerate() {
            let seed =
                line.seed.unwrap_or_else(|| derive_seed(base_seed, &format!("cli.request.{i}")));
            match imageio::load_image(&resolve_relative(req_file, &line.garment)) {
                Ok(garment) => jobs.push(Job {
                    request: Some(GenerationRequest {
                        garment_prompt: line.garment_prompt,
                        target_prompt: line.target_prompt,
                        ..base_request(&ctx.cfg, garment, seed)
                    }),
                    tryon: None,
                    response: ResponseLine {
                        index: i,
                        method: "generate".into(),
                        image: Some(format!("gen_{i:03}.png")),
                        reference: None,
                        mask: None,
                        garment: None,
                        seed: Some(seed),
                        error: None,
                    },
                }),
                Err(err) => {
                    jobs.push(Job {
                        request: None,
                        tryon: None,
                        response: ResponseLine::failure(i, "generate", err.to_string()),
                    });
                    if first_prep_err.is_none() {
                        first_prep_err = Some(err);
                    }
                }
            }
        }
    } else {
        let records = data::load_records(&ctx.cfg, args.data.as_deref())?;
        let rec = records.get(args.index).ok_or_else(|| {
            WeftError::Config(format!(
                "--index {} out of range ({} records)",
                args.index,
                records.len()
            ))
        })?;
        let reference = "reference_000.png".to_string();
        let garment = "garment_000.png".to_string();
        imageio::save_image(&args.out.join(&reference), &rec.person_image)?;
        imageio::save_image(&args.out.join(&garment), &rec.garment_image)?;
        jobs.push(Job {
            request: Some(GenerationRequest {
                garment_prompt: rec.garment_category_prompt.clone(),
                target_prompt: rec.target_prompt.clone(),
                ..base_request(&ctx.cfg, rec.garment_image.clone(), base_seed)
            }),
            tryon: None,
            response: ResponseLine {
                index: 0,
                method: "generate".into(),
                image: Some("gen_000.png".into()),
                reference: Some(reference),
                mask: None,
                garment: Some(garment),
                seed: Some(base_seed),
                error: None,
            },
        });
    }

    run_prepared(&bundle, jobs, first_prep_err, &args.out)
}

/// Runs the jobs; a request-preparation failure still surfaces as this
/// run's error after every response row is written.
fn run_prepared(
    bundle: &ModelBundle,
    jobs: Vec<Job>,
    first_prep_err: Option<WeftError>,
    out: &Path,
) -> Result<()> {
    match (run_jobs(bundle, jobs, out), first_prep_err) {
        (Err(err), _) => Err(err),
        (Ok(()), Some(err)) => Err(err),
        (Ok(()), None) => Ok(()),
    }
}

pub fn tryon(args: TryonArgs) -> Result<()> {
    let mut ctx = RunContext::new("tryon", &args.common)?;
    let base_seed = ctx.cli_seed.unwrap_or(0);
    let bundle = data::build_bundle(&mut ctx.cfg, args.checkpoint.as_deref())?;
    ctx.write_snapshot(&args.out, base_seed)?;

    let mut jobs = Vec::new();
    let mut first_prep_err: Option<WeftError> = None;
    if let Some(req_file) = &args.requests {
        let lines: Vec<TryonRequestLine> = read_jsonl(req_file)?;
        for (i, line) in lines.into_iter().enumerate() {
            let seed =
                line.seed.unwrap_or_else(|| derive_seed(base_seed, &format!("cli.request.{i}")));
            match prepare_tryon_line(req_file, &line, &args.out, i) {
                Ok((source, garment, mask, pose, names)) => jobs.push(Job {
                    request: Some(GenerationRequest {
                        garment_prompt: line.garment_prompt,
                        target_prompt: line.target_prompt,
                        ..base_request(&ctx.cfg, garment, seed)
                    }),
                    tryon: Some((source, mask, pose)),
                    response: ResponseLine {
                        index: i,
                        method: "tryon".into(),
                        image: Some(format!("tryon_{i:03}.png")),
                        reference: Some(names.0),
                        mask: Some(names.1),
                        garment: Some(names.2),
                        seed: Some(seed),
                        error: None,
                    },
                }),
                Err(err) => {
                    jobs.push(Job {
                        request: None,
                        tryon: None,
                        response: ResponseLine::failure(i, "tryon", err.to_string()),
                    });
                    if first_prep_err.is_none() {
                        first_prep_err = Some(err);
                    }
                }
            }
        }
    } else {
        let records = data::load_records(&ctx.cfg, args.data.as_deref())?;
        let rec = records.get(args.index).ok_or_else(|| {
            WeftError::Config(format!(
                "--index {} out of range ({} records)",
                args.index,
                records.len()
            ))
        })?;
        let pose = record_pose(rec, args.pose_kind.as_deref())?;
        let names = save_tryon_inputs(
            &args.out,
            0,
            &rec.person_image,
            &rec.agnostic_mask,
            &rec.garment_image,
        )?;
        jobs.push(Job {
            request: Some(GenerationRequest {
                garment_prompt: rec.garment_category_prompt.clone(),
                target_prompt: rec.target_prompt.clone(),
                ..base_request(&ctx.cfg, rec.garment_image.clone(), base_seed)
            }),
            tryon: Some((rec.person_image.clone(), rec.agnostic_mask.clone(), pose)),
            response: ResponseLine {
                index: 0,
                method: "tryon".into(),
                image: Some("tryon_000.png".into()),
                reference: Some(names.0),
                mask: Some(names.1),
                garment: Some(names.2),
                seed: Some(base_seed),
                error: None,
            },
        });
    }

    run_prepared(&bundle, jobs, first_prep_err, &args.out)
}

/// Saves the try-on inputs next to the output so a successful response line
/// is a self-contained evaluation row. Returns (reference, mask, garment)
/// file names.
fn save_tryon_inputs(
    out: &Path,
    index: usize,
    person: &LatentTensor,
    mask: &weft::tensor::Tensor,
    garment: &LatentTensor,
) -> Result<(String, String, String)> {
    let names = (
        format!("source_{index:03}.png"),
        format!("mask_{index:03}.png"),
        format!("garment_{index:03}.png"),
    );
    imageio::save_image(&out.join(&names.0), person)?;
    imageio::save_mask(&out.join(&names.1), mask)?;
    imageio::save_image(&out.join(&names.2), garment)?;
    Ok(names)
}

type TryonInputs =
    (LatentTensor, LatentTensor, weft::tensor::Tensor, PoseMap, (String, String, String));

fn prepare_tryon_line(
    req_file: &Path,
    line: &TryonRequestLine,
    out: &Path,
    index: usize,
) -> Result<TryonInputs> {
    let source = imageio::load_image(&resolve_relative(req_file, &line.person))?;
    let garment = imageio::load_image(&resolve_relative(req_file, &line.garment))?;
    let mask = imageio::load_mask(&resolve_relative(req_file, &line.mask))?;
    let kind = match line.pose_kind.as_deref() {
        Some(k) => k.parse::<PoseKind>()?,
        None => PoseKind::None,
    };
    let pose = match (kind, &line.pose) {
        (PoseKind::None, _) => PoseMap::none(source.height(), source.width()),
        (k, Some(p)) => imageio::load_pose(&resolve_relative(req_file, p), k)?,
        (_, None) => {
            return Err(WeftError::Config("pose_kind given without a pose file".into()));
        }
    };
    let names = save_tryon_inputs(out, index, &source, &mask, &garment)?;
    Ok((source, garment, mask, pose, names))
}

pub fn synthesize(args: SynthesizeArgs) -> Result<()> {
    let ctx = RunContext::new("synthesize", &args.common)?;
    let count = args.count.unwrap_or(ctx.cfg.data.size);
    if count == 0 {
        return Err(WeftError::Config("--count must be at least 1".into()));
    }
    let engine_seed = ctx.cli_seed.unwrap_or(0);
    ctx.write_snapshot(&args.out, engine_seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.data.seed);
    let records = make_toy_dataset(count, &mut rng)?;
    let images: Vec<LatentTensor> = records.iter().map(|r| r.person_image.clone()).collect();
    let backends = EngineBackends::mock(&records);
    let engine_cfg = EngineConfig { seed: engine_seed, ..EngineConfig::default() };
    let manifest = run_engine(&images, &backends, &args.out, &engine_cfg)?;

    let produced = manifest.records().count();
    let failed = manifest.failures().count();
    log_event(serde_json::json!({
        "event": "run_complete",
        "command": "synthesize",
        "records": produced,
        "failures": failed,
    }));
    if failed > 0 {
        return Err(WeftError::Backend {
            id: "engine".into(),
            message: format!("{failed} of {count} records failed; see the manifest"),
        });
    }
    Ok(())
}

/// One line of the evaluation input manifest. Extra keys are tolerated so
/// tryon's responses.jsonl can be evaluated directly.
#[derive(Debug, Deserialize)]
struct EvalManifestRow {
    method: String,
    image: String,
    reference: String,
    #[serde(default)]
    mask: Option<String>,
    #[serde(default)]
    garment: Option<String>,
}

/// Where a report goes: a directory gets every format, a file gets the one
/// its extension (or --format) names.
enum OutTarget {
    Dir(PathBuf, Option<ReportFormat>),
    File(PathBuf, ReportFormat),
}

fn out_target(out: &Path, format: Option<&str>) -> Result<OutTarget> {
    let explicit = format.map(str::parse::<ReportFormat>).transpose()?;
    let from_ext = match out.extension().and_then(|e| e.to_str()) {
        Some("md") => Some(ReportFormat::Markdown),
        Some("csv") => Some(ReportFormat::Csv),
        Some("json") => Some(ReportFormat::Json),
        _ => None,
    };
    match from_ext {
        Some(fmt) => Ok(OutTarget::File(out.to_path_buf(), explicit.unwrap_or(fmt))),
        None => Ok(OutTarget::Dir(out.to_path_buf(), explicit)),
    }
}

fn format_ext(fmt: ReportFormat) -> &'static str {
    match fmt {
        ReportFormat::Markdown => "md",
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
    }
}

/// Renders the report at the target and writes the snapshot beside it. The
/// raw JSON report is always kept so it can be re-rendered later.
fn write_report_files(
    ctx: &RunContext,
    report: &EvalReport,
    target: &OutTarget,
    seed: u64,
) -> Result<()> {
    match target {
        OutTarget::File(path, fmt) => {
            ctx.write_snapshot_for_file(path, seed)?;
            fs::write(path, emit_report(report, *fmt)?)?;
            artifact_event(path);
            if *fmt != ReportFormat::Json {
                let raw = path.with_extension("json");
                fs::write(&raw, emit_report(report, ReportFormat::Json)?)?;
                artifact_event(&raw);
            }
        }
        OutTarget::Dir(dir, explicit) => {
            ctx.write_snapshot(dir, seed)?;
            let mut formats = match explicit {
                Some(fmt) => vec![*fmt],
                None => vec![ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Json],
            };
            if !formats.contains(&ReportFormat::Json) {
                formats.push(ReportFormat::Json);
            }
            for fmt in formats {
                let path = dir.join(format!("report.{}", format_ext(fmt)));
                fs::write(&path, emit_report(report, fmt)?)?;
                artifact_event(&path);
            }
        }
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let ctx = RunContext::new("evaluate", &args.common)?;
    let embed_seed = ctx.cli_seed.unwrap_or(ctx.cfg.eval.embedder_seed);
    let target = out_target(&args.out, args.format.as_deref())?;

    let rows: Vec<EvalManifestRow> = read_jsonl(&args.manifest)?;
    if rows.is_empty() {
        return Err(WeftError::MetricInput("results manifest is empty".into()));
    }
    let mut groups: BTreeMap<String, Vec<&EvalManifestRow>> = BTreeMap::new();
    for row in &rows {
        groups.entry(row.method.clone()).or_default().push(row);
    }
    let methods: Vec<String> = groups.keys().cloned().collect();

    let emb = ToyEmbedder::new(embed_seed);
    let mut metadata = ReportMetadata::new(&ctx.cfg.eval.dataset_id, embed_seed, emb.id());
    metadata.weighting = ctx.cfg.eval.weighting;
    let mut report = EvalReport::new(metadata, methods);

    for (method, rows) in &groups {
        let mut images = Vec::with_capacity(rows.len());
        let mut references = Vec::with_capacity(rows.len());
        for row in rows {
            images.push(imageio::load_image(&resolve_relative(&args.manifest, &row.image))?);
            references
                .push(imageio::load_image(&resolve_relative(&args.manifest, &row.reference))?);
        }

        let mut ssim_sum = 0.0;
        for (img, reference) in images.iter().zip(&references) {
            ssim_sum += ssim(img, reference)?;
        }
        report.insert("ssim", method, ssim_sum / rows.len() as f64);

        let mut dino_sum = 0.0;
        let mut dino_n = 0usize;
        for (row, img) in rows.iter().zip(&images) {
            if let (Some(mask), Some(garment)) = (&row.mask, &row.garment) {
                let mask = imageio::load_mask(&resolve_relative(&args.manifest, mask))?;
                let garment = imageio::load_image(&resolve_relative(&args.manifest, garment))?;
                dino_sum += dino_m(img, &mask, &garment, &emb)?;
                dino_n += 1;
            }
        }
        if dino_n > 0 {
            report.insert("dino_m", method, dino_sum / dino_n as f64);
        }

        if rows.len() >= 2 {
            let fa = image_features(&images, &emb)?;
            let fb = image_features(&references, &emb)?;
            report.insert("fid", method, fid(&fa, &fb)?);
            report.insert("kid", method, kid(&fa, &fb)?);
        } else {
            log_event(serde_json::json!({
                "event": "metric_skipped",
                "method": method,
                "reason": "distribution metrics need at least 2 images",
            }));
        }
    }

    if let Some(study_file) = &args.study {
        let responses: Vec<StudyResponse> = read_jsonl(study_file)?;
        let scores = human_scores(&responses, &report.methods, report.metadata.weighting)?;
        report.study = Some(scores);
    }
    report.validate()?;
    write_report_files(&ctx, &report, &target, embed_seed)?;

    log_event(serde_json::json!({
        "event": "run_complete",
        "command": "evaluate",
        "methods": report.methods.len(),
        "rows": rows.len(),
    }));
    Ok(())
}

pub fn report(args: ReportArgs) -> Result<()> {
    let ctx = RunContext::new("report", &args.common)?;
    let text = fs::read_to_string(&args.report)
        .map_err(|e| WeftError::Config(format!("cannot read {}: {e}", args.report.display())))?;
    let mut report: EvalReport = serde_json::from_str(&text)
        .map_err(|e| WeftError::Config(format!("{}: {e}", args.report.display())))?;

    if let Some(study_file) = &args.study {
        let responses: Vec<StudyResponse> = read_jsonl(study_file)?;
        let scores = human_scores(&responses, &report.methods, report.metadata.weighting)?;
        report.study = Some(scores);
    }
    report.validate()?;

    let seed = ctx.cli_seed.unwrap_or(report.metadata.seed);
    let target = out_target(&args.out, args.format.as_deref())?;
    write_report_files(&ctx, &report, &target, seed)?;

    log_event(serde_json::json!({
        "event": "run_complete",
        "command": "report",
        "methods": report.methods.len(),
    }));
    Ok(())
}
