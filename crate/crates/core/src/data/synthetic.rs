//! Procedural single-cell images with known organization level.
//!
//! | level | content                                              |
//! |-------|------------------------------------------------------|
//! | 1     | a few random puncta                                  |
//! | 2     | dense puncta, mostly on a jittered lattice           |
//! | 3     | random puncta plus short fiber segments              |
//! | 4     | striations whose orientation changes patch by patch  |
//! | 5     | striations perpendicular to the cell's long axis     |
//!
//! A striation period is one thin z-disc line (width `0.15·P`, at least one
//! pixel) on top of a weak cosine band. Every cell is an ellipse whose long
//! axis lies within one degree of the image rows or columns.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{io_err, write_manifest, CellRecord, DataError, Result};
use crate::features::{ClassMap, OrgClass};
use crate::imagecore::{CellMask, GrayImage};
use crate::parallel;

const BACKGROUND: f64 = 0.05;
const CYTOPLASM: f64 = 0.2;
const SIGNAL: f64 = 0.6;
const LINE_WEIGHT: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub day: i64,
    /// Cells per organization level 1..=5.
    pub counts: [usize; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub cohorts: Vec<CohortSpec>,
    pub image_size: usize,
    /// Range of the ellipse semi-major axis, pixels.
    pub major_axis: [f64; 2],
    /// Range of the ellipse semi-minor axis, pixels.
    pub minor_axis: [f64; 2],
    /// Striation period of levels 4 and 5, pixels.
    pub stripe_period: f64,
    /// Gaussian sigma of one punctum, pixels.
    pub puncta_radius: f64,
    /// Random puncta per 1000 cell pixels at level 1.
    pub sparse_puncta: f64,
    /// Puncta per 1000 cell pixels at level 2.
    pub dense_puncta: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Probability that the second expert scores one level off.
    pub disagreement: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            cohorts: vec![CohortSpec {
                day: 18,
                counts: [120; 5],
            }],
            image_size: 128,
            major_axis: [40.0, 54.0],
            minor_axis: [20.0, 26.0],
            stripe_period: 10.0,
            puncta_radius: 1.5,
            sparse_puncta: 4.0,
            dense_puncta: 20.0,
            noise: 0.03,
            disagreement: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn with_counts(counts: [usize; 5]) -> Self {
        Self {
            cohorts: vec![CohortSpec { day: 18, counts }],
            ..Self::default()
        }
    }

    pub fn total(&self) -> usize {
        self.cohorts.iter().flat_map(|c| c.counts).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.cohorts.is_empty() || self.total() == 0 {
            return bad("synthetic spec generates no cells".into());
        }
        if self.image_size < 32 {
            return bad(format!("image_size {} below 32", self.image_size));
        }
        for (name, r) in [("major_axis", self.major_axis), ("minor_axis", self.minor_axis)] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("{name} range {r:?} is invalid"));
            }
        }
        let s = self.image_size as f64;
        if self.major_axis[1] + 0.05 * s + 1.0 > s / 2.0 {
            return bad(format!(
                "major axis up to {} does not fit a {s}px image",
                self.major_axis[1]
            ));
        }
        if self.minor_axis[0] < 4.0 {
            return bad("minor axis below 4 px".into());
        }
        if self.stripe_period < 3.0 {
            return bad(format!("stripe period {} below 3 px", self.stripe_period));
        }
        if self.puncta_radius <= 0.0 || self.sparse_puncta < 0.0 || self.dense_puncta < 0.0 {
            return bad("puncta parameters must be positive".into());
        }
        if !(self.noise >= 0.0 && (0.0..=1.0).contains(&self.disagreement)) {
            return bad("noise must be >= 0 and disagreement in [0, 1]".into());
        }
        Ok(())
    }
}

/// One generated cell and its construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCell {
    pub record: CellRecord,
    pub level: u8,
    /// Striation period for levels 4 and 5.
    pub stripe_period: Option<f64>,
}

/// In-memory rendering of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: GrayImage,
    pub mask: CellMask,
    pub classmap: ClassMap,
}

fn priority(c: OrgClass) -> u8 {
    match c {
        OrgClass::Background | OrgClass::DiffuseOther => 0,
        OrgClass::DisorganizedPuncta => 1,
        OrgClass::OrganizedPuncta => 2,
        OrgClass::Fibers => 3,
        OrgClass::OrganizedZdiscs => 4,
    }
}

struct Canvas {
    size: usize,
    signal: Vec<f64>,
    labels: Vec<OrgClass>,
    inside: Vec<bool>,
}

impl Canvas {
    fn put(&mut self, i: usize, value: f64, class: Option<OrgClass>) {
        if !self.inside[i] {
            return;
        }
        self.signal[i] = self.signal[i].max(value);
        if let Some(c) = class {
            if priority(c) > priority(self.labels[i]) {
                self.labels[i] = c;
            }
        }
    }

    fn blob(&mut self, cy: f64, cx: f64, sigma: f64, amp: f64, class: OrgClass) {
        let r = (3.0 * sigma).ceil() as isize;
        let (iy, ix) = (cy.round() as isize, cx.round() as isize);
        for y in (iy - r).max(0)..(iy + r + 1).min(self.size as isize) {
            for x in (ix - r).max(0)..(ix + r + 1).min(self.size as isize) {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                let i = y as usize * self.size + x as usize;
                self.put(i, amp * g, (g >= 0.5).then_some(class));
            }
        }
    }

    fn segment(&mut self, p0: (f64, f64), p1: (f64, f64), sigma: f64, amp: f64) {
        let r = 3.0 * sigma;
        let (y0, y1) = (p0.0.min(p1.0) - r, p0.0.max(p1.0) + r);
        let (x0, x1) = (p0.1.min(p1.1) - r, p0.1.max(p1.1) + r);
        let (dy, dx) = (p1.0 - p0.0, p1.1 - p0.1);
        let len2 = (dy * dy + dx * dx).max(1e-12);
        let last = self.size - 1;
        let clampi = |v: f64| (v.max(0.0) as usize).min(last);
        for y in clampi(y0.floor())..=clampi(y1.ceil()) {
            for x in clampi(x0.floor())..=clampi(x1.ceil()) {
                let (py, px) = (y as f64 - p0.0, x as f64 - p0.1);
                let t = ((py * dy + px * dx) / len2).clamp(0.0, 1.0);
                let d2 = (py - t * dy).powi(2) + (px - t * dx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                self.put(y * self.size + x, amp * g, (g >= 0.5).then_some(OrgClass::Fibers));
            }
        }
    }
}

/// Striation intensity at phase `t ∈ [0, P)` and whether it lies on the line.
fn striation(t: f64, period: f64) -> (f64, bool) {
    let width = (0.15 * period).max(1.0);
    let on_line = t < width;
    let band = 0.5 + 0.5 * (2.0 * PI * t / period).cos();
    let v = LINE_WEIGHT * if on_line { 1.0 } else { 0.0 } + (1.0 - LINE_WEIGHT) * band;
    (v, on_line)
}

/// Uniform point inside the ellipse, in image coordinates.
fn sample_inside(rng: &mut ChaCha8Rng, center: (f64, f64), axes: (f64, f64), phi: f64) -> (f64, f64) {
    loop {
        let u = rng.random_range(-1.0..1.0f64);
        let v = rng.random_range(-1.0..1.0f64);
        if u * u + v * v <= 1.0 {
            let (u, v) = (u * axes.0, v * axes.1);
            let y = center.0 + u * phi.sin() + v * phi.cos();
            let x = center.1 + u * phi.cos() - v * phi.sin();
            return (y, x);
        }
    }
}

/// Renders one cell of the given level. Deterministic in `(spec.seed, index)`.
pub fn render_cell(spec: &SyntheticSpec, level: u8, index: u64) -> Result<Rendered> {
    if !(1..=5).contains(&level) {
        return Err(DataError::Config(format!("level {level} outside 1..=5")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.image_size;
    let sf = s as f64;
    let jitter = 0.05 * sf;
    let center = (
        sf / 2.0 + rng.random_range(-jitter..=jitter),
        sf / 2.0 + rng.random_range(-jitter..=jitter),
    );
    let axes = (
        rng.random_range(spec.major_axis[0]..=spec.major_axis[1]),
        rng.random_range(spec.minor_axis[0]..=spec.minor_axis[1]),
    );
    let base = if rng.random_bool(0.5) { 0.0 } else { PI / 2.0 };
    let phi = base + rng.random_range(-1.0..=1.0f64).to_radians();
    let gain = rng.random_range(0.85..=1.0);

    let mut canvas = Canvas {
        size: s,
        signal: vec![0.0; s * s],
        labels: vec![OrgClass::Background; s * s],
        inside: vec![false; s * s],
    };
    // (u, v) are coordinates along the long and short axis
    let local = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - center.0, x as f64 - center.1);
        (dx * phi.cos() + dy * phi.sin(), -dx * phi.sin() + dy * phi.cos())
    };
    for y in 0..s {
        for x in 0..s {
            let (u, v) = local(y, x);
            if (u / axes.0).powi(2) + (v / axes.1).powi(2) <= 1.0 {
                let i = y * s + x;
                canvas.inside[i] = true;
                canvas.labels[i] = OrgClass::DiffuseOther;
            }
        }
    }
    let area = canvas.inside.iter().filter(|&&b| b).count() as f64;
    let sigma = spec.puncta_radius;
    let period = spec.stripe_period;
    let random_puncta = |canvas: &mut Canvas, rng: &mut ChaCha8Rng, per_k: f64| {
        let n = (per_k * area / 1000.0 * rng.random_range(0.8..=1.2)).round() as usize;
        for _ in 0..n {
            let (y, x) = sample_inside(rng, center, axes, phi);
            let amp = rng.random_range(0.6..=1.0);
            canvas.blob(y, x, sigma, amp, OrgClass::DisorganizedPuncta);
        }
    };

    match level {
        1 => random_puncta(&mut canvas, &mut rng, spec.sparse_puncta),
        2 => {
            // lattice along the long axis, spacing P, rows 0.8 P apart
            let keep = 0.7;
            let (du, dv) = (period, 0.8 * period);
            let (nu, nv) = ((axes.0 / du).ceil() as i64, (axes.1 / dv).ceil() as i64);
            for iu in -nu..=nu {
                for iv in -nv..=nv {
                    let u = iu as f64 * du + rng.random_range(-1.0..=1.0);
                    let v = iv as f64 * dv + rng.random_range(-1.0..=1.0);
                    if (u / axes.0).powi(2) + (v / axes.1).powi(2) > 1.0 || !rng.random_bool(keep) {
                        continue;
                    }
                    let y = center.0 + u * phi.sin() + v * phi.cos();
                    let x = center.1 + u * phi.cos() - v * phi.sin();
                    let amp = rng.random_range(0.6..=1.0);
                    canvas.blob(y, x, sigma, amp, OrgClass::OrganizedPuncta);
                }
            }
            let lattice = keep * area / (du * dv);
            let extra = (spec.dense_puncta * area / 1000.0 - lattice).max(0.0);
            random_puncta(&mut canvas, &mut rng, extra * 1000.0 / area);
        }
        3 => {
            random_puncta(&mut canvas, &mut rng, 1.5 * spec.sparse_puncta);
            let n = (area / 400.0).round().max(1.0) as usize;
            for _ in 0..n {
                let (y, x) = sample_inside(&mut rng, center, axes, phi);
                let len = rng.random_range(10.0..=24.0);
                let ang = rng.random_range(0.0..PI);
                let (hy, hx) = (0.5 * len * ang.sin(), 0.5 * len * ang.cos());
                let amp = rng.random_range(0.6..=0.9);
                canvas.segment((y - hy, x - hx), (y + hy, x + hx), 0.8, amp);
            }
        }
        4 => {
            let patch = (3.0 * period).round().max(8.0) as usize;
            let grid = s.div_ceil(patch);
            let params: Vec<(f64, f64)> = (0..grid * grid)
                .map(|_| (rng.random_range(0.0..PI), rng.random_range(0.0..period)))
                .collect();
            for y in 0..s {
                for x in 0..s {
                    let (theta, phase) = params[(y / patch) * grid + x / patch];
                    let t = (x as f64 * theta.cos() + y as f64 * theta.sin() + phase).rem_euclid(period);
                    let (v, line) = striation(t, period);
                    canvas.put(y * s + x, v, line.then_some(OrgClass::OrganizedZdiscs));
                }
            }
        }
        _ => {
            let phase = rng.random_range(0.0..period);
            for y in 0..s {
                for x in 0..s {
                    let (u, _) = local(y, x);
                    let (v, line) = striation((u + phase).rem_euclid(period), period);
                    canvas.put(y * s + x, v, line.then_some(OrgClass::OrganizedZdiscs));
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite sigma");
    let pixels: Vec<f32> = (0..s * s)
        .map(|i| {
            let clean = if canvas.inside[i] {
                gain * (CYTOPLASM + SIGNAL * canvas.signal[i])
            } else {
                BACKGROUND
            };
            let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (clean + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    let image = GrayImage::new(s, s, pixels).map_err(|e| DataError::Config(e.to_string()))?;
    let mask = CellMask::new(s, s, canvas.inside).map_err(|e| DataError::Config(e.to_string()))?;
    let labels = canvas.labels.iter().map(|&c| c as u8).collect();
    let classmap = ClassMap::new(s, s, labels).expect("labels in range");
    Ok(Rendered { image, mask, classmap })
}

fn expert_scores(rng: &mut ChaCha8Rng, level: u8, p: f64) -> (u8, u8) {
    if p > 0.0 && rng.random_bool(p) {
        let up = match level {
            1 => true,
            5 => false,
            _ => rng.random_bool(0.5),
        };
        (level, if up { level + 1 } else { level - 1 })
    } else {
        (level, level)
    }
}

/// Writes `images/`, `masks/`, `classmaps/`, `manifest.csv` and `truth.csv`
/// (cell id, level, day, stripe period) under `out`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Vec<SyntheticCell>> {
    spec.validate()?;
    for sub in ["images", "masks", "classmaps"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(dir))?;
    }
    let plan: Vec<(u64, u8, i64)> = spec
        .cohorts
        .iter()
        .flat_map(|c| {
            c.counts
                .iter()
                .enumerate()
                .flat_map(move |(l, &n)| std::iter::repeat_n((l as u8 + 1, c.day), n))
        })
        .enumerate()
        .map(|(i, (level, day))| (i as u64, level, day))
        .collect();

    let cells = parallel::map_slice(&plan, |&(index, level, day)| -> Result<SyntheticCell> {
        let id = format!("cell_{index:05}");
        let rendered = render_cell(spec, level, index)?;
        let paths = [
            out.join("images").join(format!("{id}.png")),
            out.join("masks").join(format!("{id}.png")),
            out.join("classmaps").join(format!("{id}.png")),
        ];
        let img_err = |source| DataError::Image {
            cell_id: id.clone(),
            source,
        };
        rendered.image.save_png16(&paths[0]).map_err(img_err)?;
        rendered.mask.save_png(&paths[1]).map_err(img_err)?;
        rendered
            .classmap
            .save_png(&paths[2])
            .map_err(|source| DataError::Feature {
                cell_id: id.clone(),
                source,
            })?;
        // expert scores draw from a stream disjoint from the renderer's
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0FE8_BE27);
        rng.set_stream(index);
        let experts = expert_scores(&mut rng, level, spec.disagreement);
        let [image, mask, classmap] = paths;
        Ok(SyntheticCell {
            record: CellRecord::new(id, image, mask, Some(classmap), day, experts),
            level,
            stripe_period: (level >= 4).then_some(spec.stripe_period),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let records: Vec<CellRecord> = cells.iter().map(|c| c.record.clone()).collect();
    write_manifest(&out.join("manifest.csv"), &records)?;
    let truth_path = out.join("truth.csv");
    let mut w = csv::Writer::from_path(&truth_path)?;
    w.write_record(["cell_id", "level", "day", "stripe_period_px"])?;
    for c in &cells {
        w.write_record([
            c.record.cell_id.clone(),
            c.level.to_string(),
            c.record.day.to_string(),
            c.stripe_period.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(truth_path))?;
    Ok(cells)
}
