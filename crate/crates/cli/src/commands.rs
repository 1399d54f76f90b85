use std::borrow::Cow;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use palseg::dataset::synth::write_fixture;
use palseg::dataset::{
    load_manifest, validate_sample, ClassCatalog, Normalization, Split, IGNORE_COLOR,
};
use palseg::geometry::{unfold_image, AnnularImage, Interpolation, PalCalibration, SampleMap};
use palseg::infer::{evaluate_report, predict_labels};
use palseg::metrics::benchmark;
use palseg::model::{build_model, load_checkpoint, EncoderVariant, ModelConfig, SegNet};
use palseg::raster::{load_png, save_png, Raster};
use palseg::train::{fit_with, TrainConfig, TrainData};
use serde_json::json;

use crate::{BenchArgs, EvalArgs, PredictArgs, SynthArgs, TrainArgs, UnfoldArgs};

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        // a closed reader such as `head` is not a failure of the command
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!("input {} does not exist", input.display());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    Ok(files)
}

pub fn unfold(a: &UnfoldArgs) -> Result<ExitCode> {
    let calib = PalCalibration::from_json_file(&a.calib)
        .with_context(|| format!("{}", a.calib.display()))?;
    let interp: Interpolation = a.interp.parse()?;
    let inputs = png_inputs(&a.input)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    // one sample map per distinct sensor size
    let mut maps: HashMap<(usize, usize), SampleMap> = HashMap::new();
    let mut written = Vec::new();
    for path in &inputs {
        let raw = load_png(path)?;
        let dims = (raw.width(), raw.height());
        let map = match maps.entry(dims) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(SampleMap::build_with(
                &calib,
                a.width,
                a.height,
                dims.0,
                dims.1,
                a.flip_rows,
            )?),
        };
        let out = unfold_image(&AnnularImage(raw), map, interp, a.fill)?.0;
        let name = path.file_name().expect("listed files have names");
        let dst = a.out.join(name);
        save_png(&out, &dst)?;
        let mut entry =
            json!({"input": path, "output": dst, "valid_fraction": map.valid_fraction()});
        if a.emit_mask {
            let stem = path
                .file_stem()
                .expect("listed files have stems")
                .to_string_lossy();
            let mask_path = a.out.join(format!("{stem}_mask.png"));
            save_png(&map.mask_raster(), &mask_path)?;
            entry["mask"] = json!(mask_path);
        }
        eprintln!("unfolded {} -> {}", path.display(), dst.display());
        written.push(entry);
    }
    print_json(&json!({"width": a.width, "height": a.height, "files": written}))?;
    Ok(ExitCode::SUCCESS)
}

pub fn dataset_validate(root: &Path) -> Result<ExitCode> {
    let manifest = match load_manifest(root) {
        Ok(m) => m,
        Err(e) => {
            print_json(&json!({"root": root, "ok": false, "errors": [e.to_string()]}))?;
            return Ok(ExitCode::from(1));
        }
    };
    let k = manifest.catalog.num_classes();
    let mut totals = vec![0u64; k];
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for entry in &manifest.entries {
        match manifest.load_sample(entry) {
            Ok(s) => {
                let r = validate_sample(&s, &manifest.catalog);
                for (t, c) in totals.iter_mut().zip(&r.class_counts) {
                    *t += c;
                }
                if !r.is_ok() {
                    errors.push(format!("{}: invalid sample", r.id));
                }
                reports.push(r);
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    let class_totals: serde_json::Map<String, serde_json::Value> = manifest
        .catalog
        .names()
        .into_iter()
        .zip(totals)
        .map(|(n, c)| (n, json!(c)))
        .collect();
    let ok = errors.is_empty();
    print_json(&json!({
        "root": root,
        "ok": ok,
        "num_train": manifest.count(Split::Train),
        "num_test": manifest.count(Split::Test),
        "classes": manifest.catalog,
        "class_pixel_totals": class_totals,
        "samples": reports,
        "errors": errors,
    }))?;
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn dataset_synth(a: &SynthArgs) -> Result<ExitCode> {
    let m = write_fixture(&a.out, a.train, a.test, a.width, a.height, a.seed)?;
    print_json(&json!({
        "root": m.root,
        "num_train": m.count(Split::Train),
        "num_test": m.count(Split::Test),
    }))?;
    Ok(ExitCode::SUCCESS)
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let cfg = TrainConfig::from_json_file(&a.config)
        .with_context(|| format!("{}", a.config.display()))?;
    cfg.validate()?;
    let manifest = load_manifest(&a.data)?;
    if manifest.catalog.num_classes() != cfg.model.num_classes {
        bail!(
            "the dataset has {} classes but the model is configured for {}",
            manifest.catalog.num_classes(),
            cfg.model.num_classes
        );
    }
    let data = TrainData::from_manifest(&manifest)?;
    let summary = fit_with(&cfg, &data, &a.out, a.resume, &mut |e| {
        eprintln!(
            "epoch {:>4}  steps {:>5}  loss {:.4}  lr {:.2e}  {} mIoU {:.4}  acc {:.4}",
            e.epoch, e.global_step, e.loss, e.lr_head, e.eval_split, e.miou, e.pixel_accuracy
        )
    })?;
    print_json(&json!({
        "out_dir": summary.out_dir,
        "epochs_run": summary.epochs_run,
        "global_step": summary.global_step,
        "best_miou": summary.best_miou,
        "best_epoch": summary.best_epoch,
        "final": summary.final_report.map(|r| r.to_json()),
    }))?;
    Ok(ExitCode::SUCCESS)
}

/// Normalization recorded by the training run that wrote `checkpoint`, or
/// the default when no `train_config.json` sits beside it.
fn normalization_for(checkpoint: &Path) -> Result<Normalization> {
    let cfg = checkpoint.with_file_name("train_config.json");
    if cfg.is_file() {
        Ok(TrainConfig::from_json_file(&cfg)?.normalization)
    } else {
        Ok(Normalization::default())
    }
}

fn load_model(path: &Path) -> Result<SegNet<f32>> {
    let (model, _) = load_checkpoint::<f32>(path, None, false)?;
    Ok(model)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let split: Split = a.split.parse()?;
    let mut model = load_model(&a.checkpoint)?;
    let manifest = load_manifest(&a.data)?;
    let names = manifest.catalog.names();
    if names.len() != model.config().num_classes {
        bail!(
            "checkpoint predicts {} classes but the dataset defines {}",
            model.config().num_classes,
            names.len()
        );
    }
    if manifest.count(split) == 0 {
        bail!("the {} split of {} is empty", a.split, a.data.display());
    }
    let ignore = manifest
        .catalog
        .ignore_id
        .unwrap_or(palseg::dataset::DEFAULT_IGNORE_ID);
    let samples = manifest
        .split(split)
        .map(|e| manifest.load_sample(e).map(Cow::Owned));
    let report = evaluate_report(
        &mut model,
        samples,
        &normalization_for(&a.checkpoint)?,
        ignore,
        &names,
    )?;
    let mut out = report.to_json();
    out["split"] = json!(a.split);
    out["checkpoint"] = json!(a.checkpoint);
    print_json(&out)?;
    Ok(ExitCode::SUCCESS)
}

fn catalog_for(path: Option<&Path>, k: usize) -> Result<ClassCatalog> {
    let cat = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let c: ClassCatalog =
                serde_json::from_str(&text).with_context(|| format!("{}", p.display()))?;
            c.validate()?;
            c
        }
        None => ClassCatalog::default(),
    };
    if cat.num_classes() != k {
        bail!(
            "the model predicts {k} classes but the catalog has {}; pass --catalog",
            cat.num_classes()
        );
    }
    Ok(cat)
}

pub fn predict(a: &PredictArgs) -> Result<ExitCode> {
    if !(0.0..=1.0).contains(&a.alpha) {
        bail!("--alpha must lie in [0, 1], got {}", a.alpha);
    }
    let mut model = load_model(&a.checkpoint)?;
    let catalog = catalog_for(a.catalog.as_deref(), model.config().num_classes)?;
    let raw = load_png(&a.image)?;
    let rgb = if raw.channels() == 1 {
        Raster::from_fn(raw.width(), raw.height(), 3, |x, y, p| {
            p.fill(raw.get(x, y, 0))
        })
    } else {
        raw
    };
    let image = rgb.map(|v| v as f32 / 255.0);
    let mask = a.mask.as_deref().map(load_png).transpose()?;
    if mask.as_ref().is_some_and(|m| m.channels() != 1) {
        bail!("--mask must be a single-channel PNG");
    }
    let fill = catalog
        .ignore_id
        .unwrap_or(palseg::dataset::DEFAULT_IGNORE_ID);
    let labels = predict_labels(
        &mut model,
        &image,
        &normalization_for(&a.checkpoint)?,
        mask.as_ref(),
        fill,
    )?;
    let colors = catalog.colorize(&labels);
    save_png(&colors, &a.out)?;
    if let Some(p) = &a.labels {
        save_png(&labels, p)?;
    }
    if let Some(p) = &a.overlay {
        let blend = Raster::from_fn(rgb.width(), rgb.height(), 3, |x, y, px| {
            let blind = labels.get(x, y, 0) == fill;
            for (c, v) in px.iter_mut().enumerate() {
                let base = rgb.get(x, y, c) as f32;
                *v = if blind {
                    base as u8
                } else {
                    (base * (1.0 - a.alpha) + colors.get(x, y, c) as f32 * a.alpha).round() as u8
                };
            }
        });
        save_png(&blend, p)?;
    }
    let counts: serde_json::Map<String, serde_json::Value> = catalog
        .entries
        .iter()
        .map(|e| {
            let n = labels.data().iter().filter(|&&l| l == e.id).count();
            (e.name.clone(), json!(n))
        })
        .collect();
    let blind = labels.data().iter().filter(|&&l| l == fill).count();
    print_json(&json!({
        "image": a.image,
        "output": a.out,
        "width": labels.width(),
        "height": labels.height(),
        "class_pixels": counts,
        "blind_pixels": blind,
        "blind_color": IGNORE_COLOR,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn parse_shape(s: &str) -> Result<[usize; 4]> {
    let dims: Vec<usize> = s
        .split([',', 'x', '×'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("--shape {s:?} is not N,C,H,W"))?;
    match dims[..] {
        [n, c, h, w] if n > 0 && c > 0 && h > 0 && w > 0 => Ok([n, c, h, w]),
        _ => bail!("--shape {s:?} must be four positive integers N,C,H,W"),
    }
}

pub fn bench(a: &BenchArgs) -> Result<ExitCode> {
    let shape = parse_shape(&a.shape)?;
    let mut model = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let variant: EncoderVariant = a.model.parse()?;
            let cfg = match variant {
                EncoderVariant::Resnet18 => ModelConfig::resnet18(a.classes),
                EncoderVariant::TinyTest => ModelConfig::tiny(a.classes),
            };
            build_model::<f32>(&cfg, 0)?
        }
    };
    let report = benchmark(&mut model, shape, a.warmup, a.runs)?;
    let mut out = serde_json::to_value(&report)?;
    out["model"] = json!(model.config().encoder_variant);
    print_json(&out)?;
    Ok(ExitCode::SUCCESS)
}
