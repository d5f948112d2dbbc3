//! Segmentation scores: region similarity J (IoU), boundary F-measure,
//! dataset aggregation (J_M, F_M, J&F, J_R) and runtime measurement.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{read_mask, read_probability_png, BinaryMask};
use crate::error::{Error, Result};
use crate::sequence::{list_sequences, load_meta};

/// Binarisation threshold for probability masks (strictly greater is moving).
pub const DEFAULT_THRESHOLD: f32 = 0.5;

fn same_shape(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape(
            "predicted mask",
            (gt.width(), gt.height()),
            (pred.width(), pred.height()),
        ));
    }
    Ok(())
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn region_j(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn boundary(mask: &BinaryMask) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            out[y * w + x] = edge
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
        }
    }
    out
}

/// `ceil(0.0075 * diagonal)` pixels.
pub fn default_tolerance(width: usize, height: usize) -> f64 {
    (0.0075 * ((width * width + height * height) as f64).sqrt()).ceil()
}

/// Dilates `b` by the disk `dx² + dy² <= r²`.
fn dilate(b: &[bool], w: usize, h: usize, r: f64) -> Vec<bool> {
    let reach = r.max(0.0).floor() as isize;
    let offsets: Vec<(isize, isize)> = (-reach..=reach)
        .flat_map(|dy| (-reach..=reach).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| ((dx * dx + dy * dy) as f64) <= r * r)
        .collect();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !b[y * w + x] {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with matching tolerance `tolerance` pixels.
///
/// Both boundaries empty gives 1; exactly one empty gives 0.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tolerance: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    if !(tolerance >= 0.0) {
        return Err(Error::Config(format!("boundary tolerance must be >= 0, got {tolerance}")));
    }
    let (w, h) = (pred.width(), pred.height());
    let bp = boundary(pred);
    let bg = boundary(gt);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gd = dilate(&bg, w, h, tolerance);
    let pd = dilate(&bp, w, h, tolerance);
    let hit_p = bp.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
    let hit_g = bg.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Fraction of values strictly above 0.5.
pub fn j_recall(js: &[f64]) -> f64 {
    if js.is_empty() {
        return 0.0;
    }
    js.iter().filter(|&&j| j > 0.5).count() as f64 / js.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    pub j: Vec<f64>,
    pub f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
}

impl SequenceScore {
    pub fn new(name: impl Into<String>, j: Vec<f64>, f: Vec<f64>) -> Self {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Self {
            name: name.into(),
            j_mean: mean(&j),
            f_mean: mean(&f),
            j,
            f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub sequences: Vec<SequenceScore>,
    /// Mean over sequences of per-sequence mean J.
    pub j_m: f64,
    pub f_m: f64,
    pub j_and_f: f64,
    /// Fraction of all frames with J > 0.5.
    pub j_r: f64,
    pub frames: usize,
    #[serde(default)]
    pub seconds_per_frame: Option<f64>,
}

impl SegReport {
    pub fn from_sequences(sequences: Vec<SequenceScore>) -> Self {
        let n = sequences.len().max(1) as f64;
        let j_m = sequences.iter().map(|s| s.j_mean).sum::<f64>() / n;
        let f_m = sequences.iter().map(|s| s.f_mean).sum::<f64>() / n;
        let all: Vec<f64> = sequences.iter().flat_map(|s| s.j.iter().copied()).collect();
        Self {
            j_m,
            f_m,
            j_and_f: (j_m + f_m) / 2.0,
            j_r: j_recall(&all),
            frames: all.len(),
            sequences,
            seconds_per_frame: None,
        }
    }

    /// One row per frame plus a per-sequence mean row (`frame` = `mean`).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut rows: Vec<[String; 4]> = vec![["sequence".into(), "frame".into(), "J".into(), "F".into()]];
        for s in &self.sequences {
            for (i, (j, f)) in s.j.iter().zip(&s.f).enumerate() {
                rows.push([s.name.clone(), i.to_string(), j.to_string(), f.to_string()]);
            }
            rows.push([s.name.clone(), "mean".into(), s.j_mean.to_string(), s.f_mean.to_string()]);
        }
        for r in rows {
            w.write_record(&r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Scores one sequence of binary predictions against ground truth.
pub fn score_sequence(name: &str, preds: &[BinaryMask], gts: &[BinaryMask], tolerance: Option<f64>) -> Result<SequenceScore> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!("{name} predictions"), gts.len(), preds.len()));
    }
    let mut j = Vec::with_capacity(preds.len());
    let mut f = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let tol = tolerance.unwrap_or_else(|| default_tolerance(g.width(), g.height()));
        j.push(region_j(p, g)?);
        f.push(boundary_f(p, g, tol)?);
    }
    Ok(SequenceScore::new(name, j, f))
}

/// Scores probability PNGs under `pred_dir/<seq>/NNNNN.png` against
/// ground-truth masks of the dataset at `gt_dir` (`<seq>/masks/NNNNN.png`).
/// Every missing prediction is listed in the error.
pub fn evaluate_dataset(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    threshold: f32,
    tolerance: Option<f64>,
) -> Result<SegReport> {
    let pred_dir = pred_dir.as_ref();
    let mut missing: Vec<PathBuf> = Vec::new();
    let mut plan = Vec::new();
    for seq_dir in list_sequences(gt_dir)? {
        let meta = load_meta(&seq_dir)?;
        let mut pairs = Vec::with_capacity(meta.frames);
        for i in 0..meta.frames {
            let pred = pred_dir.join(&meta.name).join(format!("{i:05}.png"));
            let gt = seq_dir.join("masks").join(format!("{i:05}.png"));
            for p in [&pred, &gt] {
                if !p.is_file() {
                    missing.push(p.clone());
                }
            }
            pairs.push((pred, gt));
        }
        plan.push((meta.name, pairs));
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Data(format!("{} missing mask files: {}", list.len(), list.join(", "))));
    }
    let mut sequences = Vec::with_capacity(plan.len());
    for (name, pairs) in plan {
        let mut preds = Vec::with_capacity(pairs.len());
        let mut gts = Vec::with_capacity(pairs.len());
        for (p, g) in pairs {
            let (w, h, probs) = read_probability_png(&p)?;
            preds.push(BinaryMask::from_probabilities(w, h, &probs, threshold)?);
            gts.push(read_mask(&g)?);
        }
        sequences.push(score_sequence(&name, &preds, &gts, tolerance)?);
    }
    Ok(SegReport::from_sequences(sequences))
}

/// Median over `repetitions` of wall time per frame for `run`, which must
/// process `frames` frames per call.
pub fn bench_runtime(mut run: impl FnMut() -> Result<()>, frames: usize, repetitions: usize) -> Result<f64> {
    if frames == 0 || repetitions == 0 {
        return Err(Error::Config("benchmark needs at least one frame and one repetition".into()));
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64() / frames as f64);
    }
    Ok(median(&mut times))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
