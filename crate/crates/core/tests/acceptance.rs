//! Acceptance criteria, one PASS/FAIL line each.

mod common;

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellpilot::augment::{D4Element, Sample};
use cellpilot::dataio::{synth_dataset, SynthConfig};
use cellpilot::evalharness::{
    emit_report, mean_std, parse_summary_csv, run_dataset, single_prompt_iou, EvalConfig, EvalReport,
    StartMode,
};
use cellpilot::maskcore::{error_regions, label_components, largest_error_component, Connectivity};
use cellpilot::model::doubles::GtOracleModel;
use cellpilot::model::{inject_lora, ModelConfig, PromptGroup, PromptableModel, ToyBackbone};
use cellpilot::pipeline::{postprocess_mask, preprocess, Session, DEFAULT_TARGET_SIZE};
use cellpilot::training::{segmentation_loss, train, TrainConfig};
use cellpilot::{BinaryMask, BoxPrompt, PointPrompt, Prompt, RgbImage};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn FnMut() -> Outcome>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = rng.gen_range(0.2..0.7);
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

/// Components by breadth-first flood fill, as sorted pixel lists.
fn flood_components(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = m.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !m.get(r, c) || seen[r * w + c] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[r * w + c] = true;
            while let Some((y, x)) = queue.pop_front() {
                comp.push((y, x));
                let mut nb = Vec::new();
                if y > 0 {
                    nb.push((y - 1, x));
                }
                if y + 1 < h {
                    nb.push((y + 1, x));
                }
                if x > 0 {
                    nb.push((y, x - 1));
                }
                if x + 1 < w {
                    nb.push((y, x + 1));
                }
                for (ny, nx) in nb {
                    if m.get(ny, nx) && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
    }
    out
}

fn pixels(m: &BinaryMask) -> Vec<(usize, usize)> {
    let mut p: Vec<_> = m.foreground().collect();
    p.sort();
    p
}

fn mask_ops_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let pred = random_mask(&mut rng, 16, 16);
        let gt = random_mask(&mut rng, 16, 16);

        let labels = label_components(&gt, Connectivity::Four);
        let mut ours: Vec<_> = (0..labels.len())
            .map(|k| pixels(&labels.component_mask(k)))
            .collect();
        ours.sort();
        let mut oracle = flood_components(&gt);
        oracle.sort();
        ensure(ours == oracle, || format!("case {case}: components differ"))?;

        let regions = error_regions(&pred, &gt).map_err(|e| e.to_string())?;
        let fn_set: Vec<_> = pixels(&gt)
            .into_iter()
            .filter(|&(r, c)| !pred.get(r, c))
            .collect();
        let fp_set: Vec<_> = pixels(&pred)
            .into_iter()
            .filter(|&(r, c)| !gt.get(r, c))
            .collect();
        ensure(pixels(&regions.false_negative) == fn_set, || {
            format!("case {case}: false negatives differ")
        })?;
        ensure(pixels(&regions.false_positive) == fp_set, || {
            format!("case {case}: false positives differ")
        })?;

        let fn_mask = BinaryMask::from_pixels(16, 16, &fn_set);
        let fp_mask = BinaryMask::from_pixels(16, 16, &fp_set);
        // Largest by area; false negatives win ties, then the earliest first pixel.
        let best = |m: &BinaryMask| {
            flood_components(m)
                .into_iter()
                .min_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])))
        };
        let expected = match (best(&fn_mask), best(&fp_mask)) {
            (None, None) => None,
            (Some(f), None) => Some((f, true)),
            (None, Some(p)) => Some((p, false)),
            (Some(f), Some(p)) => Some(if f.len() >= p.len() { (f, true) } else { (p, false) }),
        };
        let got = largest_error_component(&pred, &gt)
            .map_err(|e| e.to_string())?
            .map(|(m, side)| (pixels(&m), side));
        ensure(got == expected, || {
            format!("case {case}: largest error component differs")
        })?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("1000 masks exact in {t:.2?}"))
}

fn random_image(rng: &mut ChaCha8Rng, s: usize) -> RgbImage {
    let data = (0..s * s * 3).map(|_| rng.gen::<f32>()).collect();
    RgbImage::from_vec(s, s, data).unwrap()
}

fn random_prompts(rng: &mut ChaCha8Rng, s: usize) -> PromptGroup {
    let mut g = PromptGroup::default();
    if rng.gen_bool(0.5) {
        let (a, b) = (rng.gen_range(0..s), rng.gen_range(0..s));
        let (c, d) = (rng.gen_range(0..s), rng.gen_range(0..s));
        g.boxes
            .push(BoxPrompt::new(a.min(b), c.min(d), a.max(b), c.max(d)));
    }
    for _ in 0..rng.gen_range(usize::from(g.boxes.is_empty())..4) {
        let p = if rng.gen_bool(0.7) {
            PointPrompt::positive(rng.gen_range(0..s), rng.gen_range(0..s))
        } else {
            PointPrompt::negative(rng.gen_range(0..s), rng.gen_range(0..s))
        };
        g.points.push(p);
    }
    g
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn lora_identity() -> Outcome {
    let cfg = ModelConfig::default();
    let base = ToyBackbone::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
    let injected =
        inject_lora(base.try_clone().map_err(|e| e.to_string())?, &cfg.lora).map_err(|e| e.to_string())?;
    let s = cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for _ in 0..100 {
        let img = random_image(&mut rng, s);
        let prompts = random_prompts(&mut rng, s);
        let a = base
            .decode_mask(&base.encode_image(&img).unwrap(), &prompts)
            .unwrap();
        let b = injected
            .decode_mask(&injected.encode_image(&img).unwrap(), &prompts)
            .unwrap();
        worst = worst.max(max_abs_diff(&a, &b));
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;

    // Census: trainable weights outside the encoder plus r·(d_in + d_out) per adapted projection.
    let outside: usize = base
        .params()
        .iter()
        .filter(|(n, p)| p.trainable && !n.starts_with("enc."))
        .map(|(_, p)| p.var.elem_count())
        .sum();
    let r = cfg.lora.rank;
    let d = cfg.embed_dim;
    let adapters = cfg.encoder_depth * cfg.lora.targets.len() * r * (d + d);
    let expected = outside + adapters;
    let trainable = injected.params().trainable_count();
    ensure(trainable == expected, || {
        format!("{trainable} trainable, expected {expected}")
    })?;
    let frozen_ok = injected
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("enc.") && !n.contains(".lora_"))
        .all(|(_, p)| !p.trainable);
    ensure(frozen_ok, || "encoder weight left trainable".into())?;
    Ok(format!(
        "max deviation {worst:.1e} on 100 inputs; {trainable} trainable = {outside} + {adapters} adapter"
    ))
}

fn small_f64_model() -> ToyBackbone {
    let cfg = ModelConfig {
        input_size: 32,
        patch_size: 8,
        embed_dim: 16,
        encoder_depth: 2,
        num_heads: 2,
        mlp_dim: 16,
        decoder_depth: 1,
        decoder_mlp_dim: 16,
        pixel_channels: 2,
        pixel_hidden: 4,
        ..Default::default()
    };
    let model = ToyBackbone::with_dtype(cfg.clone(), 3, DType::F64).unwrap();
    let model = inject_lora(model, &cfg.lora).unwrap();
    // Non-zero adapters so their gradients are exercised too.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = model
        .params()
        .names()
        .filter(|n| n.ends_with("lora_b"))
        .cloned()
        .collect();
    for n in names {
        let t = model.params().get(&n).unwrap();
        let vals: Vec<f64> = (0..t.elem_count()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let v = Tensor::from_vec(vals, t.dims(), &Device::Cpu).unwrap();
        model.params().assign(&n, &v).unwrap();
    }
    model
}

fn gradient_check() -> Outcome {
    let model = small_f64_model();
    let s = model.config().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng, s);
    let gt = BinaryMask::from_fn(s, s, |r, c| {
        (r as f64 - 14.0).powi(2) + (c as f64 - 17.0).powi(2) < 40.0
    });
    let mut prompts = PromptGroup::default();
    prompts.boxes.push(BoxPrompt::new(7, 10, 21, 24));
    prompts.points.push(PointPrompt::positive(14, 17));
    prompts.points.push(PointPrompt::negative(3, 28));

    let loss = |m: &ToyBackbone| -> Tensor {
        let emb = m.encode_image(&img).unwrap();
        segmentation_loss(&m.decode_mask(&emb, &prompts).unwrap(), &gt).unwrap()
    };
    let grads = loss(&model).backward().map_err(|e| e.to_string())?;

    let trainable: Vec<(String, candle_core::Var)> = model
        .params()
        .trainable()
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    let eps = 1e-6;
    let mut worst = 0f64;
    let mut checked = 0;
    for _ in 0..60 {
        let (name, var) = &trainable[rng.gen_range(0..trainable.len())];
        let grad = grads
            .get(var.as_tensor())
            .ok_or_else(|| format!("no gradient for {name}"))?
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let i = rng.gen_range(0..original.len());
        let eval_at = |delta: f64| {
            let mut v = original.clone();
            v[i] += delta;
            model
                .params()
                .assign(
                    name,
                    &Tensor::from_vec(v, var.as_tensor().dims(), &Device::Cpu).unwrap(),
                )
                .unwrap();
            loss(&model).to_scalar::<f64>().unwrap()
        };
        let numeric = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
        model
            .params()
            .assign(
                name,
                &Tensor::from_vec(original.clone(), var.as_tensor().dims(), &Device::Cpu).unwrap(),
            )
            .unwrap();
        let analytic = grad[i];
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-7 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        ensure(err < 1e-3, || {
            format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}")
        })?;
        worst = worst.max(err);
        checked += 1;
    }
    Ok(format!("{checked} parameters, worst relative error {worst:.1e}"))
}

/// Small quota and batch: many cheap updates instead of few expensive ones.
fn desk_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 2,
        grad_accumulation_steps: 1,
        learning_rate: 3e-3,
        points_per_image: 2,
        boxes_per_image: 2,
        seed: 0,
        ..Default::default()
    }
}

fn held_out() -> Vec<Sample> {
    synth_dataset(&SynthConfig {
        images: 20,
        seed: 999,
        ..Default::default()
    })
}

fn desk_training(trained: &mut Option<ToyBackbone>) -> Outcome {
    let data = synth_dataset(&SynthConfig {
        images: 200,
        seed: 1,
        ..Default::default()
    });
    let cfg = ModelConfig::default();
    let model = inject_lora(ToyBackbone::new(cfg.clone(), 0).unwrap(), &cfg.lora).unwrap();
    let tc = desk_config();
    let start = Instant::now();
    let out = train(model, &data, &tc).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let test = held_out();
    let b = single_prompt_iou(&out.model, &test, StartMode::Box, (0, 10), 5).map_err(|e| e.to_string())?;
    let p = single_prompt_iou(&out.model, &test, StartMode::Point, (0, 10), 5).map_err(|e| e.to_string())?;
    *trained = Some(out.model);
    let line = format!(
        "{} epochs in {t:.0?}; box IoU {b:.3}, point IoU {p:.3}",
        tc.epochs
    );
    ensure(
        t <= Duration::from_secs(15 * 60) && b >= 0.70 && p >= 0.55,
        || line.clone(),
    )?;
    Ok(line)
}

fn interactive_improvement(trained: &Option<ToyBackbone>) -> Outcome {
    let model = trained.as_ref().ok_or("no trained model")?;
    let test = held_out();
    let mut lines = Vec::new();
    for start in [StartMode::Box, StartMode::Point] {
        let cfg = EvalConfig {
            start,
            max_clicks: 5,
            seed: 8,
            ..Default::default()
        };
        let report = run_dataset(model, "synthetic", &test, &cfg).map_err(|e| e.to_string())?;
        let means: Vec<f64> = (0..=5).map(|k| mean_std(&report.groups[0].column(k)).0).collect();
        for k in 0..5 {
            ensure(means[k + 1] >= means[k] - 0.01, || {
                format!("{start}: {means:.3?}")
            })?;
        }
        lines.push(format!("{start} {:.3}->{:.3}", means[0], means[5]));
    }
    Ok(lines.join(", "))
}

fn harness_oracle() -> Outcome {
    let samples = synth_dataset(&SynthConfig {
        images: 6,
        seed: 3,
        ..Default::default()
    });
    let model = GtOracleModel::new(128);
    for s in &samples {
        model
            .register(&s.image, s.instances.clone())
            .map_err(|e| e.to_string())?;
    }
    let mut report = EvalReport::default();
    for start in [StartMode::Box, StartMode::Point] {
        let cfg = EvalConfig {
            start,
            max_clicks: 5,
            ..Default::default()
        };
        report.merge(run_dataset(&model, "synthetic", &samples, &cfg).map_err(|e| e.to_string())?);
    }
    for row in report.summary() {
        ensure(row.mean == 1.0 && row.std == 0.0, || format!("{row:?}"))?;
    }
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(&report, dir.path()).map_err(|e| e.to_string())?;
    let csv = parse_summary_csv(&std::fs::read_to_string(&paths.csv).unwrap()).map_err(|e| e.to_string())?;
    let json: EvalReport = serde_json::from_str(&std::fs::read_to_string(&paths.json).unwrap()).unwrap();
    let mut rows = 0;
    for row in &csv {
        let group = json
            .group(&row.dataset, row.start_mode)
            .ok_or("csv row without json group")?;
        let (mean, std) = mean_std(&group.column(row.clicks));
        ensure(
            (mean - row.mean).abs() < 1e-9 && (std - row.std).abs() < 1e-9,
            || format!("{row:?}"),
        )?;
        rows += 1;
    }
    ensure(rows == 12, || format!("{rows} csv rows"))?;
    Ok(format!("{rows} rows at 1.000 ± 0; CSV matches JSON"))
}

fn preprocess_round_trip() -> Outcome {
    let sizes = [
        (300, 500),
        (500, 300),
        (1024, 1024),
        (777, 1333),
        (2048, 1024),
        (4096, 2048),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 1f64;
    for (h, w) in sizes {
        for _ in 0..3 {
            let (cr, cc) = (
                rng.gen_range(0.3..0.7) * h as f64,
                rng.gen_range(0.3..0.7) * w as f64,
            );
            let (ar, ac) = (
                rng.gen_range(0.1..0.3) * h as f64,
                rng.gen_range(0.1..0.3) * w as f64,
            );
            let shape = BinaryMask::from_fn(h, w, |r, c| {
                ((r as f64 - cr) / ar).powi(2) + ((c as f64 - cc) / ac).powi(2) <= 1.0
            });
            let mut img = RgbImage::new(h, w);
            for (r, c) in shape.foreground() {
                img.set_pixel(r, c, [1.0, 1.0, 1.0]);
            }
            let (input, record) = preprocess(&img, DEFAULT_TARGET_SIZE).map_err(|e| e.to_string())?;
            let s = DEFAULT_TARGET_SIZE;
            let logits: Vec<f32> = input.data().chunks(3).map(|px| (px[0] - 0.5) * 40.0).collect();
            let logits = Tensor::from_vec(logits, (s, s), &Device::Cpu).unwrap();
            let back = postprocess_mask(&logits, &record, 0.5).map_err(|e| e.to_string())?;
            let score = cellpilot::maskcore::iou(&back, &shape).unwrap();
            ensure(score >= 0.99, || format!("{h}x{w}: IoU {score:.4}"))?;
            worst = worst.min(score);
        }
    }
    Ok(format!("18 shapes over 6 sizes, worst IoU {worst:.4}"))
}

fn d4_laws() -> Outcome {
    let n = 7;
    for g in D4Element::ALL {
        for h in D4Element::ALL {
            let gh = g.compose(h);
            for r in 0..n {
                for c in 0..n {
                    let (r1, c1) = h.map(r, c, n);
                    ensure(gh.map(r, c, n) == g.map(r1, c1, n), || format!("{g:?}∘{h:?}"))?;
                }
            }
        }
        ensure(
            g.compose(g.inverse()) == D4Element::E && g.inverse().compose(g) == D4Element::E,
            || format!("{g:?} inverse"),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..100 {
        let m = random_mask(&mut rng, 12, 12);
        let g = D4Element::ALL[i % 8];
        let back = g.inverse().apply_mask(&g.apply_mask(&m).unwrap()).unwrap();
        ensure(back == m, || format!("mask {i} under {g:?}"))?;
    }
    Ok("64 compositions match pointwise; 100 masks restored".into())
}

fn replay_determinism() -> Outcome {
    let cfg = ModelConfig::default();
    let model = inject_lora(ToyBackbone::new(cfg.clone(), 12).unwrap(), &cfg.lora).unwrap();
    let images = synth_dataset(&SynthConfig {
        images: 10,
        seed: 13,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut steps = 0;
    for seq in 0..100 {
        let sample = &images[seq % images.len()];
        let mut session = Session::new(&model, sample.image.clone(), "").map_err(|e| e.to_string())?;
        let (h, w) = sample.image.dims();
        let first = if rng.gen_bool(0.5) {
            Prompt::Point(PointPrompt::positive(rng.gen_range(0..h), rng.gen_range(0..w)))
        } else {
            let inst = &sample.instances[rng.gen_range(0..sample.instances.len())];
            Prompt::Box(inst.bounding_box().unwrap())
        };
        let id = session.add_mask(&model, first).map_err(|e| e.to_string())?;
        for _ in 0..rng.gen_range(1..5) {
            if rng.gen_bool(0.2) && session.mask(id).unwrap().history.len() > 1 {
                session.undo(&model, id).map_err(|e| e.to_string())?;
            } else {
                let p = PointPrompt {
                    row: rng.gen_range(0..h),
                    col: rng.gen_range(0..w),
                    ..PointPrompt::positive(0, 0)
                };
                let p = if rng.gen_bool(0.5) {
                    p
                } else {
                    PointPrompt::negative(p.row, p.col)
                };
                session
                    .refine_mask(&model, id, Prompt::Point(p))
                    .map_err(|e| e.to_string())?;
            }
            let live = session.mask(id).unwrap().mask.clone();
            let replayed = session.replay(&model, id).map_err(|e| e.to_string())?;
            ensure(live == replayed, || format!("sequence {seq} diverged"))?;
            steps += 1;
        }
    }
    Ok(format!("100 sequences, {steps} refinements bitwise equal"))
}

fn service_contract() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let checks = rt.block_on(common::endpoint_script());
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    ensure(failed.is_empty(), || failed.join("; "))?;
    Ok(format!(
        "{} endpoint checks against goldens, export/ingest lossless",
        checks.len()
    ))
}

fn main() {
    let mut trained = None;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match &r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(e) => println!("FAIL {name}: {e}"),
        }
        results.push((name, r));
    };
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: &str| filter.is_empty() || filter.iter().any(|f| n.contains(f.as_str()));

    let mut table: Vec<Criterion> = vec![
        ("mask_ops_oracle", Box::new(mask_ops_oracle)),
        ("lora_zero_init_identity", Box::new(lora_identity)),
        ("gradient_check", Box::new(gradient_check)),
    ];
    for (name, f) in table.iter_mut() {
        if wanted(name) {
            run(name, f.as_mut());
        }
    }
    if wanted("desk_training") || wanted("interactive_improvement") {
        run("desk_training", &mut || desk_training(&mut trained));
        let t = &trained;
        run("interactive_improvement", &mut || interactive_improvement(t));
    }
    let mut rest: Vec<Criterion> = vec![
        ("harness_oracle", Box::new(harness_oracle)),
        ("preprocess_round_trip", Box::new(preprocess_round_trip)),
        ("d4_group_laws", Box::new(d4_laws)),
        ("replay_determinism", Box::new(replay_determinism)),
        ("service_contract", Box::new(service_contract)),
    ];
    for (name, f) in rest.iter_mut() {
        if wanted(name) {
            run(name, f.as_mut());
        }
    }
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
