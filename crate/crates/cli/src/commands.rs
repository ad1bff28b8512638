use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use sarcnet_core::data::{
    generate_synthetic, load_manifest, split, write_manifest, CellRecord, Manifest, PrepConfig, PreparedCell,
    PreparedSet, SyntheticSpec,
};
use sarcnet_core::explain::{raw_cam, save_overlay, Heatmap};
use sarcnet_core::features::{extract, write_feature_csv, ClassMap, FeatureVector, Protocol, ScalerParams};
use sarcnet_core::imagecore::{
    load_image, load_mask, pad_to_square, prepare_input, resize_bilinear, CellMask, GrayImage,
};
use sarcnet_core::model::{load_checkpoint, predict, Checkpoint};
use sarcnet_core::parallel;
use sarcnet_core::tensor::Tensor;
use sarcnet_core::train::{self, fit_baseline, scaled_rows, Metrics, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::exit::CliError;
use crate::{Cli, Command, Global};

/// Entries written by `generate`; `--force` removes exactly these.
const GENERATED: [&str; 6] = ["images", "masks", "classmaps", "manifest.csv", "truth.csv", "spec.toml"];

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    check_inputs(&cli.command, g)?;
    setup_threads(g)?;
    match &cli.command {
        Command::Generate => generate(g),
        Command::Extract { manifest } => extract_features(g, manifest),
        Command::Train { manifest } => train_cmd(g, manifest),
        Command::Evaluate { manifest, checkpoint } => evaluate(g, manifest, checkpoint),
        Command::Score {
            image,
            mask,
            classmap,
            checkpoint,
        } => score(g, image, mask, classmap.as_deref(), checkpoint),
        Command::Explain {
            manifest,
            checkpoint,
            cells,
            stage,
            raw,
        } => explain(g, manifest, checkpoint, cells, *stage, *raw),
        Command::Report { predictions } => report(g, predictions),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError::Usage(msg.into()).into()
}

/// Every referenced input must exist before any work starts.
fn check_inputs(cmd: &Command, g: &Global) -> Result<()> {
    let mut inputs: Vec<&Path> = g.config.iter().map(PathBuf::as_path).collect();
    match cmd {
        Command::Generate => {}
        Command::Extract { manifest } | Command::Train { manifest } => inputs.push(manifest),
        Command::Evaluate { manifest, checkpoint }
        | Command::Explain {
            manifest, checkpoint, ..
        } => inputs.extend([manifest.as_path(), checkpoint.as_path()]),
        Command::Score {
            image,
            mask,
            classmap,
            checkpoint,
        } => {
            inputs.extend([image.as_path(), mask.as_path(), checkpoint.as_path()]);
            inputs.extend(classmap.as_deref());
        }
        Command::Report { predictions } => inputs.push(predictions),
    }
    if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
        return Err(CliError::Io(format!("{} does not exist", missing.display())).into());
    }
    if !matches!(cmd, Command::Score { .. }) && g.out.is_none() {
        return Err(usage("--out <DIR> is required"));
    }
    Ok(())
}

fn setup_threads(g: &Global) -> Result<()> {
    let threads = match (g.reproducible, g.threads) {
        (_, Some(0)) => return Err(usage("--threads must be at least 1")),
        (true, Some(n)) if n > 1 => {
            warn!("--reproducible runs on one thread; ignoring --threads {n}");
            1
        }
        (true, _) => 1,
        (false, Some(n)) => n,
        (false, None) => std::thread::available_parallelism().map_or(1, usize::from),
    };
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting worker threads")?;
    if threads > 1 {
        info!("{threads} worker threads; 32-bit results may differ from --reproducible in the last digits");
    }
    Ok(())
}

fn out_dir(g: &Global) -> Result<&Path> {
    let out = g.out.as_deref().ok_or_else(|| usage("--out <DIR> is required"))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).context("serializing")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Loads through the canonical path so record paths stay valid from any
/// output directory.
fn read_manifest(path: &Path) -> Result<Manifest> {
    let path = path
        .canonicalize()
        .with_context(|| format!("resolving {}", path.display()))?;
    let m = load_manifest(&path)?;
    if m.excluded > 0 {
        info!(
            "{}: dropped {} rows with a zero expert score",
            path.display(),
            m.excluded
        );
    }
    Ok(m)
}

fn train_config(g: &Global) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &g.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(p) = g.protocol {
        cfg.model.protocol = p;
    }
    Ok(cfg)
}

fn generate(g: &Global) -> Result<()> {
    let mut spec: SyntheticSpec = match &g.config {
        Some(p) => read_toml(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let out = g.out.as_deref().ok_or_else(|| usage("--out <DIR> is required"))?;
    let occupied = fs::read_dir(out).is_ok_and(|mut d| d.next().is_some());
    if occupied {
        if !g.force {
            return Err(CliError::Io(format!(
                "{} already exists and is not empty; pass --force to replace a generated dataset",
                out.display()
            ))
            .into());
        }
        for name in GENERATED {
            let p = out.join(name);
            let removed = if p.is_dir() {
                fs::remove_dir_all(&p)
            } else if p.exists() {
                fs::remove_file(&p)
            } else {
                Ok(())
            };
            removed.with_context(|| format!("removing {}", p.display()))?;
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cells = generate_synthetic(&spec, out)?;
    write_toml(&out.join("spec.toml"), &spec)?;
    println!(
        "generated {} cells: {}",
        cells.len(),
        out.join("manifest.csv").display()
    );
    Ok(())
}

fn extract_features(g: &Global, manifest: &Path) -> Result<()> {
    let cfg = train_config(g)?;
    let protocol = cfg.model.protocol;
    let out = out_dir(g)?;
    let m = read_manifest(manifest)?;
    let glcm = cfg.prep.glcm;
    let rows = parallel::map_slice(&m.records, |rec| -> Result<(String, FeatureVector)> {
        let cell = match rec
            .features
            .filter(|f| protocol == Protocol::P1 || f.fractions.is_some())
        {
            Some(f) => f,
            None => {
                let img = load_image(&rec.image_path, 0)?;
                let mask = load_mask(&rec.mask_path)?;
                let classmap = match (&rec.classmap_path, protocol) {
                    (Some(p), Protocol::P2) => Some(ClassMap::load(p)?),
                    _ => None,
                };
                extract(&img, &mask, classmap.as_ref(), &glcm)?
            }
        };
        let v = FeatureVector::assemble(&cell, protocol)?;
        Ok((rec.cell_id.clone(), v))
    })
    .into_iter()
    .zip(&m.records)
    .map(|(r, rec)| r.with_context(|| format!("cell `{}`", rec.cell_id)))
    .collect::<Result<Vec<_>>>()?;
    let path = out.join("features.csv");
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_feature_csv(file, &rows)?;
    println!("{} cells ({protocol}): {}", rows.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct BaselineSummary {
    cells: usize,
    spearman: Option<f64>,
    mae: f64,
    mse: f64,
    r2: Option<f64>,
    regularized: bool,
    intercept: f64,
    weights: Vec<f64>,
}

fn format_metrics(m: &Metrics) -> String {
    let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    format!(
        "spearman={} mae={:.4} mse={:.4} r2={}",
        opt(m.spearman),
        m.mae,
        m.mse,
        opt(m.r2)
    )
}

fn train_cmd(g: &Global, manifest: &Path) -> Result<()> {
    let mut cfg = train_config(g)?;
    cfg.validate()?;
    let out = out_dir(g)?;
    cfg.checkpoint_dir = Some(out.to_path_buf());
    let m = read_manifest(manifest)?;
    let parts = split(&m.records, &cfg.split)?;
    let (n_train, n_val, n_test) = parts.sizes();
    info!("split: {n_train} train, {n_val} val, {n_test} test");

    let all = PreparedSet::prepare(&m.records, cfg.model.protocol, &cfg.prep)?;
    let (tr, va, te) = (
        all.subset(&parts.train),
        all.subset(&parts.val),
        all.subset(&parts.test),
    );
    let outcome = train::train(&tr, &va, &cfg)?;
    let best = &outcome.best;
    let scaler = best
        .meta
        .scaler
        .as_ref()
        .context("trained checkpoint carries no scaler")?;

    write_toml(
        &out.join("config.toml"),
        &TrainConfig {
            checkpoint_dir: None,
            ..cfg.clone()
        },
    )?;
    write_splits(&out.join("splits.csv"), &m.records, &parts)?;
    let test_records: Vec<CellRecord> = parts.test.iter().map(|&i| m.records[i].clone()).collect();
    write_manifest(&out.join("test_manifest.csv"), &test_records)?;

    let report = train::evaluate(&best.params, &te, scaler, outcome.best_epoch())?;
    report.write_all(&out.join("test"))?;

    let baseline = fit_baseline(&tr, scaler)?;
    let base_pred = baseline.predict_all(&scaled_rows(&te, scaler)?);
    let base_metrics = Metrics::compute(&base_pred, &te.targets())?;
    write_toml(
        &out.join("baseline.toml"),
        &BaselineSummary {
            cells: te.len(),
            spearman: base_metrics.spearman,
            mae: base_metrics.mae,
            mse: base_metrics.mse,
            r2: base_metrics.r2,
            regularized: baseline.regularized,
            intercept: baseline.intercept,
            weights: baseline.weights.clone(),
        },
    )?;

    let epoch = outcome.best_epoch().map_or("none".to_string(), |e| e.to_string());
    println!("best epoch {epoch}: {}", out.join("best.ckpt").display());
    println!("test     {}", format_metrics(&report.metrics));
    println!("baseline {}", format_metrics(&base_metrics));
    Ok(())
}

fn write_splits(path: &Path, records: &[CellRecord], parts: &sarcnet_core::data::SplitAssignment) -> Result<()> {
    let mut label = vec![""; records.len()];
    for (name, ids) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        for &i in ids.iter() {
            label[i] = name;
        }
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["cell_id", "split"])?;
    for (r, l) in records.iter().zip(label) {
        w.write_record([r.cell_id.as_str(), l])?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

/// A checkpoint with everything needed to rebuild its inputs.
struct Loaded {
    ckpt: Checkpoint,
    scaler: ScalerParams,
    prep: PrepConfig,
}

impl Loaded {
    fn protocol(&self) -> Protocol {
        self.ckpt.params.config.protocol
    }
}

fn open_checkpoint(g: &Global, path: &Path) -> Result<Loaded> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let protocol = ckpt.params.config.protocol;
    if let Some(requested) = g.protocol {
        if requested != protocol {
            return Err(usage(format!(
                "protocol mismatch: {} was trained with {protocol}, {requested} was requested",
                path.display()
            )));
        }
    }
    let scaler = ckpt
        .meta
        .scaler
        .clone()
        .ok_or_else(|| usage(format!("{} carries no feature scaler", path.display())))?;
    if scaler.protocol != protocol {
        return Err(usage(format!(
            "protocol mismatch inside {}: model {protocol}, scaler {}",
            path.display(),
            scaler.protocol
        )));
    }
    let prep = PrepConfig {
        input_size: ckpt.params.config.input_size,
        pad_square: ckpt.meta.pad_square,
        glcm: ckpt.meta.glcm.unwrap_or_default(),
    };
    Ok(Loaded { ckpt, scaler, prep })
}

fn evaluate(g: &Global, manifest: &Path, checkpoint: &Path) -> Result<()> {
    let loaded = open_checkpoint(g, checkpoint)?;
    let out = out_dir(g)?;
    let m = read_manifest(manifest)?;
    let set = PreparedSet::prepare(&m.records, loaded.protocol(), &loaded.prep)?;
    let report = train::evaluate(&loaded.ckpt.params, &set, &loaded.scaler, loaded.ckpt.meta.epoch)?;
    report.write_all(out)?;
    println!("{} cells: {}", report.cells.len(), format_metrics(&report.metrics));
    Ok(())
}

fn scaled_features(scaler: &ScalerParams, v: &FeatureVector) -> Result<Vec<f32>> {
    Ok(scaler.apply(v)?.values.iter().map(|&x| x as f32).collect())
}

fn score(g: &Global, image: &Path, mask: &Path, classmap: Option<&Path>, checkpoint: &Path) -> Result<()> {
    let loaded = open_checkpoint(g, checkpoint)?;
    let protocol = loaded.protocol();
    let classmap = match (protocol, classmap) {
        (Protocol::P2, None) => return Err(usage("protocol p2 checkpoints need --classmap")),
        (Protocol::P2, Some(p)) => Some(ClassMap::load(p)?),
        (Protocol::P1, _) => None,
    };
    let img = load_image(image, 0)?;
    let mask = load_mask(mask)?;
    let cell = extract(&img, &mask, classmap.as_ref(), &loaded.prep.glcm)?;
    let features = scaled_features(&loaded.scaler, &FeatureVector::assemble(&cell, protocol)?)?;
    let s = loaded.prep.input_size;
    let input = prepare_input(&img, s, loaded.prep.pad_square)?;
    let images = Tensor::new(vec![1, 3, s, s], input.into_data())?;
    let feats = Tensor::new(vec![1, features.len()], features)?;
    let raw = f64::from(predict(&loaded.ckpt.params, images, feats)?[0]);
    println!("{raw:.4} (display {:.2})", raw.clamp(1.0, 5.0));
    Ok(())
}

/// Mask in model-input coordinates.
fn input_mask(mask: &CellMask, size: usize, pad_square: bool) -> Result<CellMask> {
    let mask = if pad_square {
        let (h, w) = mask.dims();
        let side = h.max(w);
        let (oy, ox) = ((side - h) / 2, (side - w) / 2);
        let mut bits = vec![false; side * side];
        for y in 0..h {
            for x in 0..w {
                bits[(y + oy) * side + x + ox] = mask.contains(y, x);
            }
        }
        CellMask::new(side, side, bits)?
    } else {
        mask.clone()
    };
    Ok(mask.resize_nearest(size, size)?)
}

struct Saliency {
    cell_id: String,
    day: i64,
    ground_truth: f64,
    score: f32,
    mask_ratio: Option<f64>,
}

fn explain(g: &Global, manifest: &Path, checkpoint: &Path, cells: &[String], stage: usize, raw: bool) -> Result<()> {
    let loaded = open_checkpoint(g, checkpoint)?;
    let out = out_dir(g)?;
    let m = read_manifest(manifest)?;
    let records: Vec<&CellRecord> = if cells.is_empty() {
        m.records.iter().collect()
    } else {
        cells
            .iter()
            .map(|id| {
                m.records
                    .iter()
                    .find(|r| &r.cell_id == id)
                    .ok_or_else(|| usage(format!("cell `{id}` is not in {}", manifest.display())))
            })
            .collect::<Result<_>>()?
    };
    if !(1..=sarcnet_core::explain::FINAL_STAGE).contains(&stage) {
        return Err(usage(format!(
            "--stage {stage} outside 1..={}",
            sarcnet_core::explain::FINAL_STAGE
        )));
    }
    let s = loaded.prep.input_size;
    let rows = parallel::map_slice(&records, |rec| -> Result<Saliency> {
        let cell = PreparedCell::from_record(rec, loaded.protocol(), &loaded.prep)?;
        let image = Tensor::new(vec![3, s, s], cell.plane.repeat(3))?;
        let feats = scaled_features(&loaded.scaler, &cell.features)?;
        let cam = raw_cam(&loaded.ckpt.params, &image, &feats, stage)?;
        let small = Heatmap::new(cam.height, cam.width, sarcnet_core::explain::normalize(&cam.values))?;
        let heat = small.resized(s, s);

        let img = load_image(&rec.image_path, 0)?;
        let base: GrayImage = if loaded.prep.pad_square {
            resize_bilinear(&pad_to_square(&img), s, s)?
        } else {
            resize_bilinear(&img, s, s)?
        };
        save_overlay(&base, &heat, &out.join(format!("{}_gradcam.png", rec.cell_id)))?;
        if raw {
            heat.save_raw(&out.join(format!("{}.hmap", rec.cell_id)))?;
        }
        let mask = input_mask(&load_mask(&rec.mask_path)?, s, loaded.prep.pad_square)?;
        Ok(Saliency {
            cell_id: rec.cell_id.clone(),
            day: rec.day,
            ground_truth: rec.ground_truth,
            score: cam.score,
            mask_ratio: heat.mask_ratio(&mask),
        })
    })
    .into_iter()
    .zip(&records)
    .map(|(r, rec)| r.with_context(|| format!("cell `{}`", rec.cell_id)))
    .collect::<Result<Vec<_>>>()?;

    let path = out.join("saliency.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["cell_id", "day", "ground_truth", "score", "mask_ratio"])?;
    for r in &rows {
        w.write_record([
            r.cell_id.clone(),
            r.day.to_string(),
            r.ground_truth.to_string(),
            r.score.to_string(),
            r.mask_ratio.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    println!("{} overlays (stage {stage}): {}", rows.len(), out.display());
    Ok(())
}

fn report(g: &Global, predictions: &Path) -> Result<()> {
    let out = out_dir(g)?;
    let cells = train::read_predictions(predictions)?;
    let report = train::EvalReport::from_cells(cells, None)?;
    report.write_all(out)?;
    match report.highest_mean_day() {
        Some(day) => println!("{} days; highest mean prediction on day {day}", report.histograms.len()),
        None => println!("no days to report"),
    }
    Ok(())
}
