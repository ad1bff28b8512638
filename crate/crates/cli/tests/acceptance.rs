//! Acceptance suite. Every criterion prints one `PASS`, `FAIL` or `SKIP` line.
//!
//! The process exits non-zero only when `SARCNET_ACCEPTANCE_STRICT=1` is set
//! and a criterion failed. `SARCNET_REPRO_MANIFEST` points the full-size
//! reproduction criterion at a real annotated manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sarcnet_core::data::synthetic::render_cell;
use sarcnet_core::data::{load_manifest, split, write_manifest, CellRecord, SplitSpec, SyntheticSpec};
use sarcnet_core::explain::gradcam;
use sarcnet_core::features::{alignment_metrics, aspect_ratio, correlation_profile, GlcmConfig, Protocol};
use sarcnet_core::gradcheck::{check_network, check_ops, TOL_F32, TOL_F64};
use sarcnet_core::imagecore::CellMask;
use sarcnet_core::model::{load_checkpoint, SarcNetConfig};
use sarcnet_core::tensor::{Adam, AdamConfig, Tensor};
use sarcnet_core::train::metrics;

const SYNTHETIC_DATA: &str = r#"
image_size = 128
seed = 0

[[cohorts]]
day = 18
counts = [120, 120, 120, 120, 120]
"#;

const SYNTHETIC_TRAIN: &str = r#"
lr = 0.0005
batch_size = 40
epochs = 30

[model]
input_size = 64
stage_widths = [8, 16, 32, 64]
protocol = "p2"

[prep]
input_size = 64
"#;

const COHORT_DATA: &str = r#"
image_size = 128
seed = 1

[[cohorts]]
day = 18
counts = [40, 40, 40, 10, 10]

[[cohorts]]
day = 32
counts = [10, 10, 40, 40, 40]
"#;

const REPRO_TRAIN: &str = r#"
lr = 0.0005
batch_size = 40
epochs = 100
"#;

const SEED: &str = "0";
const WALL_LIMIT: Duration = Duration::from_secs(600);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn judge(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn sarcnet(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sarcnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .context("running sarcnet")?;
    ensure!(
        out.status.success(),
        "sarcnet {} exited with {}: {}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("temp paths are UTF-8")
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(toml::from_str(&text)?)
}

fn float(t: &toml::Table, key: &str) -> Option<f64> {
    t.get(key).and_then(toml::Value::as_float)
}

/// One generated dataset plus one reproducible training run.
struct Experiment {
    data: PathBuf,
    run: PathBuf,
    elapsed: Duration,
}

impl Experiment {
    fn run(root: &Path, name: &str) -> Result<Self> {
        let data = root.join(format!("{name}-data"));
        let run = root.join(format!("{name}-run"));
        let spec = root.join("synthetic-data.toml");
        let cfg = root.join("synthetic-train.toml");
        fs::write(&spec, SYNTHETIC_DATA)?;
        fs::write(&cfg, SYNTHETIC_TRAIN)?;
        let start = Instant::now();
        sarcnet(&[
            "generate",
            "--config",
            path_str(&spec),
            "--seed",
            SEED,
            "--out",
            path_str(&data),
        ])?;
        sarcnet(&[
            "train",
            "--manifest",
            path_str(&data.join("manifest.csv")),
            "--config",
            path_str(&cfg),
            "--seed",
            SEED,
            "--reproducible",
            "--out",
            path_str(&run),
        ])?;
        Ok(Self {
            data,
            run,
            elapsed: start.elapsed(),
        })
    }

    fn checkpoint(&self) -> PathBuf {
        self.run.join("best.ckpt")
    }
}

fn paper_repro(root: &Path) -> Result<Verdict> {
    let Ok(manifest) = std::env::var("SARCNET_REPRO_MANIFEST") else {
        return Ok(Verdict::Skip(
            "full-size reproduction needs an annotated dataset; set SARCNET_REPRO_MANIFEST".into(),
        ));
    };
    let cfg = root.join("repro.toml");
    fs::write(&cfg, REPRO_TRAIN)?;
    let out = root.join("repro-run");
    sarcnet(&[
        "train",
        "--manifest",
        &manifest,
        "--config",
        path_str(&cfg),
        "--protocol",
        "p2",
        "--out",
        path_str(&out),
    ])?;
    let model = float(&read_table(&out.join("test/summary.toml"))?, "spearman");
    let base = float(&read_table(&out.join("baseline.toml"))?, "spearman");
    let (Some(model), Some(base)) = (model, base) else {
        return Ok(Verdict::Fail("undefined test Spearman".into()));
    };
    Ok(judge(
        model >= 0.80 && model > base,
        format!("test Spearman {model:.4} (>= 0.80), baseline {base:.4}"),
    ))
}

fn end_to_end(exp: &Experiment) -> Result<Verdict> {
    let s = read_table(&exp.run.join("test/summary.toml"))?;
    let spearman = float(&s, "spearman").unwrap_or(f64::NAN);
    let mae = float(&s, "mae").unwrap_or(f64::NAN);
    let ok = spearman >= 0.90 && mae <= 0.40 && exp.elapsed <= WALL_LIMIT;
    Ok(judge(
        ok,
        format!(
            "test Spearman {spearman:.4} (>= 0.90), MAE {mae:.4} (<= 0.40), wall {:.0}s on one thread (<= 600s)",
            exp.elapsed.as_secs_f64()
        ),
    ))
}

fn baseline_ordering(exp: &Experiment) -> Result<Verdict> {
    let model = float(&read_table(&exp.run.join("test/summary.toml"))?, "spearman").unwrap_or(f64::NAN);
    let base = float(&read_table(&exp.run.join("baseline.toml"))?, "spearman").unwrap_or(f64::NAN);
    Ok(judge(
        model >= base,
        format!("network test Spearman {model:.4} vs linear baseline {base:.4}"),
    ))
}

fn gradient_suite() -> Result<Verdict> {
    let start = Instant::now();
    let mut reports = check_ops(12, 11)?;
    for protocol in [Protocol::P1, Protocol::P2] {
        let cfg = SarcNetConfig::scaled().with_protocol(protocol).with_seed(4);
        let mut r = check_network(&cfg, 2, 20, 21)?;
        r.name = format!("network/{protocol}");
        reports.push(r);
    }
    let elapsed = start.elapsed();
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passes() || r.coords < 10)
        .map(|r| r.name.as_str())
        .collect();
    let worst64 = reports.iter().map(|r| r.worst_f64).fold(0.0, f64::max);
    let worst32 = reports.iter().map(|r| r.worst_f32).fold(0.0, f64::max);
    Ok(judge(
        failing.is_empty() && elapsed <= Duration::from_secs(60),
        format!(
            "{} checks, worst rel err {worst64:.1e} f64 (<= {TOL_F64:e}), {worst32:.1e} f32 (<= {TOL_F32:e}), {:.1}s; failing {failing:?}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

/// Rank of each value: one plus the number of smaller values plus half the
/// number of other equal values.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation through the pairwise-difference identity.
fn brute_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let (da, db) = (a[i] - a[j], b[i] - b[j]);
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn brute_r2(pred: &[f64], target: &[f64]) -> Option<f64> {
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum();
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

fn close(got: Option<f64>, want: Option<f64>) -> bool {
    match (got, want) {
        (Some(g), Some(w)) => (g - w).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    }
}

fn metric_oracles() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = Vec::new();
    let mut tied = 0;
    for case in 0..200 {
        let n = rng.random_range(3..=50);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            for _ in 0..rng.random_range(1..=n / 2 + 1) {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                v[i] = v[j];
            }
            if rng.random_bool(0.3) {
                v.iter_mut().for_each(|x| *x = (*x * 2.0).round() / 2.0);
            }
            v
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        if brute_ranks(&a).iter().any(|r| r.fract() != 0.0) {
            tied += 1;
        }
        let want_s = brute_pearson(&brute_ranks(&a), &brute_ranks(&b));
        let want_mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
        let want_mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        let want_r2 = brute_r2(&a, &b);
        let ok = close(metrics::spearman(&a, &b).ok(), want_s)
            && close(metrics::mae(&a, &b).ok(), Some(want_mae))
            && close(metrics::mse(&a, &b).ok(), Some(want_mse))
            && close(metrics::r2(&a, &b).ok(), want_r2);
        if !ok {
            mismatches.push(case);
        }
    }
    Ok(judge(
        mismatches.is_empty(),
        format!("200 pairs ({tied} with ties), tolerance 1e-9; mismatching cases {mismatches:?}"),
    ))
}

fn glcm_period() -> Result<Verdict> {
    let mut rates = Vec::new();
    let mut ok = true;
    for period in [6.0, 10.0, 14.0] {
        let mut hits = 0;
        for seed in 0..20 {
            let spec = SyntheticSpec {
                stripe_period: period,
                seed,
                ..SyntheticSpec::default()
            };
            let r = render_cell(&spec, 5, 0)?;
            let m = alignment_metrics(&correlation_profile(&r.image, &r.mask, &GlcmConfig::default())?);
            if (m.peak_distance_px - period).abs() <= 1.0 {
                hits += 1;
            }
        }
        ok &= hits * 100 >= 95 * 20;
        rates.push(format!("{period}px {hits}/20"));
    }
    Ok(judge(ok, format!("{} (>= 95% within +-1 px)", rates.join(", "))))
}

fn mask_from(size: usize, inside: impl Fn(f64, f64) -> bool) -> Result<CellMask> {
    let c = (size as f64 - 1.0) / 2.0;
    let bits = (0..size * size)
        .map(|i| inside((i % size) as f64 - c, (i / size) as f64 - c))
        .collect();
    Ok(CellMask::new(size, size, bits)?)
}

fn morphology() -> Result<Verdict> {
    let mut worst_axis = 0.0f64;
    let mut worst_rot = 0.0f64;
    for ratio in [1.0, 2.0, 4.0] {
        let (half_long, half_short) = (12.0 * ratio, 12.0);
        let axis = mask_from(128, |x, y| x.abs() <= half_long && y.abs() <= half_short)?;
        let (s, c) = 30f64.to_radians().sin_cos();
        let rot = mask_from(128, |x, y| {
            let (u, v) = (x * c + y * s, -x * s + y * c);
            u.abs() <= half_long && v.abs() <= half_short
        })?;
        worst_axis = worst_axis.max((aspect_ratio(&axis)? / ratio - 1.0).abs());
        worst_rot = worst_rot.max((aspect_ratio(&rot)? / ratio - 1.0).abs());
    }
    let disc = aspect_ratio(&mask_from(101, |x, y| x * x + y * y <= 40.0 * 40.0)?)?;
    let disc_err = (disc - 1.0).abs();
    Ok(judge(
        worst_axis <= 0.02 && worst_rot <= 0.05 && disc_err <= 0.02,
        format!(
            "axis-aligned worst {:.2}% (<= 2%), rotated 30deg worst {:.2}% (<= 5%), disc {disc:.4}",
            100.0 * worst_axis,
            100.0 * worst_rot
        ),
    ))
}

fn adam_first_step() -> Result<Verdict> {
    let lr = 5e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let g = sign * 10f64.powf(rng.random_range(-3.0..3.0));
        let start = rng.random_range(-2.0..2.0);
        let mut p = Tensor::scalar(start);
        p.accumulate_grad(&[g])?;
        let mut opt = Adam::<f64>::new(AdamConfig::with_lr(lr));
        opt.step([("w", &mut p)])?;
        worst = worst.max(((p.data()[0] - start).abs() - lr).abs());
    }
    Ok(judge(
        worst <= 1e-6,
        format!("100 gradients with |g| in [1e-3, 1e3], worst | |step| - lr | = {worst:.1e} (<= 1e-6)"),
    ))
}

/// Output files of one run that must match byte for byte.
const RUN_ARTIFACTS: [&str; 8] = [
    "best.ckpt",
    "train_log.csv",
    "baseline.toml",
    "config.toml",
    "splits.csv",
    "test/predictions.csv",
    "test/summary.toml",
    "test/hist_day18.png",
];

fn determinism(a: &Experiment, b: &Experiment) -> Result<Verdict> {
    let mut differing = Vec::new();
    let manifest = |e: &Experiment| fs::read(e.data.join("manifest.csv"));
    if manifest(a)? != manifest(b)? {
        differing.push("manifest.csv".to_string());
    }
    for name in RUN_ARTIFACTS {
        if fs::read(a.run.join(name))? != fs::read(b.run.join(name))? {
            differing.push(name.to_string());
        }
    }
    Ok(judge(
        differing.is_empty(),
        format!(
            "{} files compared across two --reproducible runs; differing {differing:?}",
            RUN_ARTIFACTS.len() + 1
        ),
    ))
}

fn levels(data: &Path) -> Result<BTreeMap<String, u8>> {
    let mut r = csv::Reader::from_path(data.join("truth.csv"))?;
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        out.insert(row[0].to_string(), row[1].parse()?);
    }
    Ok(out)
}

fn gradcam_properties(root: &Path, exp: &Experiment) -> Result<Verdict> {
    let ckpt = load_checkpoint(&exp.checkpoint())?;
    let cfg = &ckpt.params.config;
    let s = cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for _ in 0..50 {
        let image: Vec<f32> = (0..3 * s * s).map(|_| rng.random_range(-2.0..2.0)).collect();
        let feats: Vec<f32> = (0..cfg.feature_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = gradcam(&ckpt.params, &Tensor::new(vec![3, s, s], image)?, &feats)?;
        let in_range = h.values().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !(in_range && h.height() == s && h.width() == s) {
            bad += 1;
        }
    }

    let out = root.join("explain");
    sarcnet(&[
        "explain",
        "--manifest",
        path_str(&exp.run.join("test_manifest.csv")),
        "--checkpoint",
        path_str(&exp.checkpoint()),
        "--out",
        path_str(&out),
    ])?;
    let level = levels(&exp.data)?;
    let mut r = csv::Reader::from_path(out.join("saliency.csv"))?;
    let (mut strong, mut total) = (0, 0);
    for row in r.records() {
        let row = row?;
        if level.get(&row[0]).copied().unwrap_or(0) < 4 {
            continue;
        }
        total += 1;
        if row[4].parse::<f64>().is_ok_and(|ratio| ratio >= 1.5) {
            strong += 1;
        }
    }
    ensure!(total > 0, "no level-4/5 cells in the test split");
    Ok(judge(
        bad == 0 && strong * 5 >= total * 4,
        format!(
            "{bad}/50 random inputs out of contract; in/out-of-mask saliency >= 1.5 on {strong}/{total} level-4/5 test cells (>= 80%)"
        ),
    ))
}

fn cohort_shift(root: &Path, exp: &Experiment) -> Result<Verdict> {
    let spec = root.join("cohorts.toml");
    fs::write(&spec, COHORT_DATA)?;
    let data = root.join("cohorts");
    sarcnet(&["generate", "--config", path_str(&spec), "--out", path_str(&data)])?;
    let eval = root.join("cohorts-eval");
    sarcnet(&[
        "evaluate",
        "--manifest",
        path_str(&data.join("manifest.csv")),
        "--checkpoint",
        path_str(&exp.checkpoint()),
        "--out",
        path_str(&eval),
    ])?;
    let report = root.join("cohorts-report");
    sarcnet(&[
        "report",
        "--predictions",
        path_str(&eval.join("predictions.csv")),
        "--out",
        path_str(&report),
    ])?;

    let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    let mut r = csv::Reader::from_path(eval.join("predictions.csv"))?;
    for row in r.records() {
        let row = row?;
        let e = sums.entry(row[1].parse()?).or_default();
        e.0 += row[3].parse::<f64>()?;
        e.1 += 1;
    }
    let mean = |day| sums.get(&day).map(|&(s, n)| s / n as f64);
    let (Some(early), Some(late)) = (mean(18), mean(32)) else {
        bail!("missing a cohort in the predictions");
    };
    let summary = read_table(&report.join("summary.toml"))?;
    let named = summary.get("highest_mean_day").and_then(toml::Value::as_integer);
    let pngs = ["hist_day18.png", "hist_day32.png"]
        .iter()
        .all(|p| report.join(p).is_file());
    Ok(judge(
        late - early >= 0.5 && named == Some(32) && pngs,
        format!(
            "mean prediction day 18 {early:.3}, day 32 {late:.3}, shift {:.3} (>= 0.5); summary names day {named:?}; histograms written {pngs}",
            late - early
        ),
    ))
}

fn data_semantics(root: &Path) -> Result<Verdict> {
    let dir = root.join("fixture");
    fs::create_dir_all(&dir)?;
    let rows = [
        ("a", 3, 4, Some(3.5)),
        ("b", 5, 5, Some(5.0)),
        ("c", 0, 4, None),
        ("d", 1, 2, Some(1.5)),
        ("e", 2, 0, None),
        ("f", 4, 5, Some(4.5)),
        ("g", 0, 0, None),
        ("h", 2, 3, Some(2.5)),
    ];
    let mut text = String::from("cell_id,image_path,mask_path,classmap_path,day,expert1,expert2\n");
    for (id, e1, e2, _) in rows {
        text.push_str(&format!("{id},img/{id}.png,mask/{id}.png,,18,{e1},{e2}\n"));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, text)?;
    let m = load_manifest(&path)?;
    let kept: Vec<(String, f64)> = m.records.iter().map(|r| (r.cell_id.clone(), r.ground_truth)).collect();
    let expected: Vec<(String, f64)> = rows
        .iter()
        .filter_map(|&(id, _, _, gt)| gt.map(|g| (id.to_string(), g)))
        .collect();
    let semantics_ok = m.excluded == 3 && kept == expected;

    let big: Vec<CellRecord> = (0..5761)
        .map(|i| {
            CellRecord::new(
                format!("c{i}"),
                dir.join(format!("{i}.png")),
                dir.join(format!("{i}m.png")),
                None,
                18,
                (1 + (i % 5) as u8, 1 + (i % 5) as u8),
            )
        })
        .collect();
    let big_path = dir.join("big.csv");
    write_manifest(&big_path, &big)?;
    let loaded = load_manifest(&big_path)?;
    let (tr, va, te) = split(&loaded.records, &SplitSpec::default())?.sizes();
    let within = |got: usize, want: usize| got.abs_diff(want) <= 1;
    let split_ok = loaded.records.len() == 5761 && within(tr, 3686) && within(va, 922) && within(te, 1153);
    Ok(judge(
        semantics_ok && split_ok,
        format!(
            "excluded {} score-0 rows, averages {:?}; 5761-row split {tr}/{va}/{te} (3686/922/1153 +-1)",
            m.excluded,
            kept.iter().map(|k| k.1).collect::<Vec<_>>()
        ),
    ))
}

fn report(name: &str, outcome: Result<Verdict>, tally: &mut [usize; 3]) {
    let (tag, detail, slot) = match outcome {
        Ok(Verdict::Pass(d)) => ("PASS", d, 0),
        Ok(Verdict::Fail(d)) => ("FAIL", d, 1),
        Ok(Verdict::Skip(d)) => ("SKIP", d, 2),
        Err(e) => ("FAIL", format!("error: {e:#}"), 1),
    };
    tally[slot] += 1;
    println!("{tag} {name}: {detail}");
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut tally = [0usize; 3];

    report("paper-reproduction", paper_repro(root), &mut tally);
    let first = Experiment::run(root, "a");
    let second = Experiment::run(root, "b");
    match (&first, &second) {
        (Ok(a), Ok(b)) => {
            report("synthetic-end-to-end", end_to_end(a), &mut tally);
            report("baseline-ordering", baseline_ordering(a), &mut tally);
            report("determinism", determinism(a, b), &mut tally);
            report("gradcam", gradcam_properties(root, a), &mut tally);
            report("cohort-shift", cohort_shift(root, a), &mut tally);
        }
        _ => {
            let err = first.as_ref().err().or(second.as_ref().err()).expect("one run failed");
            for name in [
                "synthetic-end-to-end",
                "baseline-ordering",
                "determinism",
                "gradcam",
                "cohort-shift",
            ] {
                report(
                    name,
                    Err(anyhow::anyhow!("synthetic experiment failed: {err:#}")),
                    &mut tally,
                );
            }
        }
    }
    report("gradient-suite", gradient_suite(), &mut tally);
    report("metric-oracles", metric_oracles(), &mut tally);
    report("glcm-period", glcm_period(), &mut tally);
    report("morphology", morphology(), &mut tally);
    report("adam-first-step", adam_first_step(), &mut tally);
    report("data-semantics", data_semantics(root), &mut tally);

    println!(
        "acceptance: {} passed, {} failed, {} skipped",
        tally[0], tally[1], tally[2]
    );
    if tally[1] > 0 && std::env::var("SARCNET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
