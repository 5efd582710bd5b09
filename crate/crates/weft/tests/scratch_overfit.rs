use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weft::codec::LatentCodec;
use weft::dataset::{dispatch_prompts, DatasetRecord};
use weft::garment::copy_params_by_suffix;
use weft::nn::collect_grads;
use weft::pipeline::{GenerationRequest, ModelBundle, TryOnRequest};
use weft::schedule::{add_noise, ScheduleConfig};
use weft::tensor::{Graph, Tensor};
use weft::toy::{make_toy_dataset, toy_keypoint_pose};
use weft::training::{train_loop, Stage, TrainingConfig, SGD_MOMENTUM};
use weft::unet::{AttentionMode, UNetConfig};

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// Injection-free denoising pretraining of the backbone itself.
fn base_train(bundle: &mut ModelBundle, records: &[DatasetRecord], steps: usize, lr: f64) -> Vec<f64> {
    bundle.set.set_trainable_where(|n| n.starts_with("denoiser."));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut velocity: BTreeMap<String, Tensor> = BTreeMap::new();
    let t_max = bundle.schedule.len();
    let mut losses = Vec::with_capacity(steps);
    for _step in 0..steps {
        let mut g = Graph::new();
        let bnd = bundle.set.bind(&mut g);
        let mut total = None;
        for rec in records {
            let t = rng.random_range(0..t_max);
            let z0 = bundle.codec.encode_image(&rec.person_image).unwrap().into_tensor();
            let eps = Tensor::randn(z0.shape(), &mut rng);
            let x_t = add_noise(&z0, &eps, t, &bundle.schedule).unwrap();
            let (_, target_prompt) = dispatch_prompts(rec);
            let text = bundle.embedder.embed(target_prompt);
            let xv = g.constant(x_t);
            let pred = bundle.denoiser.forward_graph(&mut g, &bnd, xv, t, &text, None, None).unwrap();
            let tv = g.constant(eps);
            let l = g.mse(pred, tv);
            total = Some(match total {
                Some(acc) => g.add(acc, l),
                None => l,
            });
        }
        let loss = g.scale(total.unwrap(), 1.0 / records.len() as f64);
        losses.push(g.val(loss).data()[0]);
        g.backward(loss).unwrap();
        let grads = collect_grads(&g, &bundle.set, &bnd);
        for (name, grad) in &grads {
            let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                *vi = SGD_MOMENTUM * *vi + gi;
            }
            let v = v.clone();
            bundle
                .set
                .update(name, |p| {
                    for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                        *pi -= lr * vi;
                    }
                })
                .unwrap();
        }
    }
    losses
}

#[test]
#[ignore]
fn scratch() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let records = make_toy_dataset(8, &mut rng).unwrap();
    let ucfg = UNetConfig::default();
    let sched = ScheduleConfig::default();
    let mut bundle = ModelBundle::fresh(&ucfg, &sched, true).unwrap();
    bundle.options.garment_scale = envf("GSCALE", 1.0);

    // Phase 0: make the backbone an actual denoiser.
    let t0 = Instant::now();
    let base_steps = envf("B_STEPS", 1200.0) as usize;
    let base = base_train(&mut bundle, &records, base_steps, envf("B_LR", 1e-2));
    let b_secs = t0.elapsed().as_secs_f64();
    let w = 50.min(base.len());
    println!(
        "base: {} steps {:.0}s  first{w} {:.4}  last{w} {:.4}",
        base.len(),
        b_secs,
        base[..w].iter().sum::<f64>() / w as f64,
        base[base.len() - w..].iter().sum::<f64>() / w as f64
    );

    // Text-only generation check after base training: does text identity alone
    // steer samples onto the memorized records?
    let mse = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    };
    for i in [0usize, 3] {
        let rec = &records[i];
        let req = GenerationRequest {
            garment_image: rec.garment_image.clone(),
            garment_prompt: rec.garment_category_prompt.clone(),
            target_prompt: rec.target_prompt.clone(),
            seed: 5,
            steps: 25,
            guidance_scale: envf("GS", 1.0),
            attention_mode: AttentionMode::None,
        };
        let gen = bundle.generate_gc_t2i(&req).unwrap();
        println!("base gen rec{i} (text only) MSE vs person {:.4}", mse(gen.data(), rec.person_image.data()));
    }

    // Garment encoder attach: either copy the trained prefix (COPY=1) or keep
    // the untrained copy that fresh() installed.
    if envf("COPY", 0.0) > 0.0 {
        copy_params_by_suffix(&mut bundle.set, "garment.", "denoiser.").unwrap();
    }

    // Phase 1: stage-1 overfit per the training contract.
    let cfg = TrainingConfig {
        stage: Stage::One,
        learning_rate: envf("LR", 1e-2),
        batch_size: envf("BS", 8.0) as usize,
        max_steps: envf("STEPS", 2000.0) as usize,
        augmentations: Default::default(),
        seed: 0,
    };
    let t1 = Instant::now();
    let stats = train_loop(&mut bundle, &records, &cfg, None).unwrap();
    let secs = t1.elapsed().as_secs_f64();
    let losses: Vec<f64> = stats.iter().map(|s| s.loss).collect();
    let ma: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    let (init_ma, best_ma, last_ma) =
        (ma[0], ma.iter().cloned().fold(f64::INFINITY, f64::min), *ma.last().unwrap());
    for (i, s) in stats.iter().enumerate() {
        if i % 200 == 0 || i + 1 == stats.len() {
            println!("s1 step {i:4} loss {:.4}", s.loss);
        }
    }
    println!(
        "s1: {:.0}s ({:.3}/step)  ma0 {init_ma:.4}  maBest {best_ma:.4}  maLast {last_ma:.4}  drop {:.1}%",
        secs,
        secs / losses.len() as f64,
        (1.0 - last_ma / init_ma) * 100.0
    );

    // Generation vs memorized target.
    for i in [0usize, 3] {
        let rec = &records[i];
        let req = GenerationRequest {
            garment_image: rec.garment_image.clone(),
            garment_prompt: rec.garment_category_prompt.clone(),
            target_prompt: rec.target_prompt.clone(),
            seed: 5,
            steps: 25,
            guidance_scale: envf("GS", 1.0),
            attention_mode: AttentionMode::Asa,
        };
        let gen = bundle.generate_gc_t2i(&req).unwrap();
        let rt = bundle
            .codec
            .decode_latent(&bundle.codec.encode_image(&rec.person_image).unwrap())
            .unwrap();
        println!(
            "gen rec{i} MSE vs person {:.4}  vs roundtrip {:.4}",
            mse(gen.data(), rec.person_image.data()),
            mse(gen.data(), rt.data())
        );
    }

    // Phase 2: stage-2 on the control branch, then pose sensitivity.
    let cfg2 = TrainingConfig {
        stage: Stage::Two,
        learning_rate: envf("LR2", 1e-3),
        batch_size: 8,
        max_steps: envf("STEPS2", 300.0) as usize,
        augmentations: Default::default(),
        seed: 1,
    };
    let t2 = Instant::now();
    let stats2 = train_loop(&mut bundle, &records, &cfg2, None).unwrap();
    println!(
        "s2: {:.0}s  first {:.4}  last {:.4}",
        t2.elapsed().as_secs_f64(),
        stats2.first().unwrap().loss,
        stats2.last().unwrap().loss
    );

    let rec = &records[0];
    let poses = [
        weft::control::PoseMap::none(rec.person_image.height(), rec.person_image.width()),
        toy_keypoint_pose(rec).unwrap(),
        rec.dense_map.clone(),
    ];
    let mut latents = Vec::new();
    for pose in &poses {
        let req = TryOnRequest {
            gen: GenerationRequest {
                garment_image: rec.garment_image.clone(),
                garment_prompt: rec.garment_category_prompt.clone(),
                target_prompt: rec.target_prompt.clone(),
                seed: 7,
                steps: 25,
                guidance_scale: 1.0,
                attention_mode: AttentionMode::Asa,
            },
            source_image: rec.person_image.clone(),
            mask: rec.agnostic_mask.clone(),
            pose: pose.clone(),
        };
        latents.push(bundle.tryon_outcome(&req).unwrap().final_latent);
    }
    for i in 0..3 {
        for j in (i + 1)..3 {
            let d = latents[i]
                .data()
                .iter()
                .zip(latents[j].data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            println!("pose diff {i}{j}: {d:.6}");
        }
    }
}
