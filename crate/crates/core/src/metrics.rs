//! Overlap and surface-distance metrics.
//!
//! Surfaces are foreground voxels with a 6-connected background neighbour,
//! where out-of-volume counts as background. Surface distances are physical
//! (spacing-scaled) Euclidean distances between surface voxel centres,
//! computed with an exact separable squared distance transform.

use crate::volume::{BinaryMask, Shape3, Spacing};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: prediction {pred} vs ground truth {gt}")]
    ShapeMismatch { pred: Shape3, gt: Shape3 },
    #[error("surface distance undefined: {0} mask is empty")]
    EmptyMask(&'static str),
    #[error("percentile must lie in (0, 100], got {0}")]
    InvalidPercentile(f64),
}

/// Metrics for one prediction against one ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub hausdorff_mm: f64,
    pub asd_mm: f64,
    pub hausdorff_percentile: f64,
}

/// Options for evaluating a batch of volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// 95 reports HD95; 100 reports the exact Hausdorff distance.
    pub hd_percentile: f64,
    /// Surface-metric value recorded when exactly one mask is empty.
    /// `None` uses the volume diagonal in millimetres.
    pub empty_sentinel_mm: Option<f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            hd_percentile: 95.0,
            empty_sentinel_mm: None,
        }
    }
}

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<(), MetricError> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    Ok(())
}

fn overlap_counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    pred.as_slice()
        .iter()
        .zip(gt.as_slice())
        .fold((0, 0, 0), |(i, p, g), (&a, &b)| {
            (i + (a & b) as usize, p + a as usize, g + b as usize)
        })
}

/// `2|P∩G| / (|P| + |G|)`, or 1 when both masks are empty.
pub fn dice_coefficient(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let (inter, p, g) = overlap_counts(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`, or 1 when both masks are empty.
pub fn jaccard_index(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let (inter, p, g) = overlap_counts(pred, gt);
    let union = p + g - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

const NEIGHBOURS_6: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];

/// Flat indices of foreground voxels with a background or out-of-volume
/// 6-neighbour, in ascending order.
pub fn surface_voxels(mask: &BinaryMask) -> Vec<usize> {
    let s = mask.shape();
    let data = mask.as_slice();
    (0..s.len())
        .filter(|&idx| {
            if data[idx] == 0 {
                return false;
            }
            let (i, j, k) = s.coords(idx);
            NEIGHBOURS_6.iter().any(|&(di, dj, dk)| {
                s.checked_index(i as isize + di, j as isize + dj, k as isize + dk)
                    .map_or(true, |q| data[q] == 0)
            })
        })
        .collect()
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// voxel in `sites`.
pub fn squared_distance_transform(shape: Shape3, sites: &[usize], spacing: Spacing) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; shape.len()];
    for &s in sites {
        dist[s] = 0.0;
    }
    let dims = shape.dims();
    let strides = [shape.w * shape.d, shape.d, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in (0..3).rev() {
        let n = dims[axis];
        let stride = strides[axis];
        for base in 0..shape.len() {
            if (base / stride) % n != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|p| dist[base + p * stride]));
            lower_envelope(&line, spacing.0[axis], &mut out);
            for p in 0..n {
                dist[base + p * stride] = out[p];
            }
        }
    }
    dist
}

/// One-dimensional squared distance transform of a sampled function
/// (Felzenszwalb & Huttenlocher lower envelope of parabolas).
fn lower_envelope(f: &[f64], spacing: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let s2 = spacing * spacing;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            continue;
        }
        let fq = f[q] + s2 * (q * q) as f64;
        let mut intersect;
        loop {
            let p = *v.last().unwrap();
            let fp = f[p] + s2 * (p * p) as f64;
            intersect = (fq - fp) / (2.0 * s2 * (q - p) as f64);
            if intersect <= *z.last().unwrap() && v.len() > 1 {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        v.push(q);
        z.push(intersect);
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (p, slot) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - v[k] as f64;
        *slot = s2 * d * d + f[v[k]];
    }
}

/// Distances from every surface voxel of `from` to the surface of `to`.
fn directed_surface_distances<'a>(from: &'a [usize], to_dt: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    from.iter().map(move |&idx| to_dt[idx].sqrt())
}

/// Surface distances in both directions, pooled.
fn symmetric_surface_distances(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<Vec<f64>, MetricError> {
    check_shapes(pred, gt)?;
    if pred.is_empty() {
        return Err(MetricError::EmptyMask("prediction"));
    }
    if gt.is_empty() {
        return Err(MetricError::EmptyMask("ground truth"));
    }
    let shape = pred.shape();
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    let dt_p = squared_distance_transform(shape, &sp, spacing);
    let dt_g = squared_distance_transform(shape, &sg, spacing);
    let mut all: Vec<f64> = directed_surface_distances(&sp, &dt_g).collect();
    all.extend(directed_surface_distances(&sg, &dt_p));
    Ok(all)
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Percentile of the pooled symmetric surface distances in mm;
/// `percentile = 100` gives the exact Hausdorff distance.
pub fn hausdorff_distance(
    pred: &BinaryMask,
    gt: &BinaryMask,
    spacing: Spacing,
    percentile_q: f64,
) -> Result<f64, MetricError> {
    if !(percentile_q > 0.0 && percentile_q <= 100.0) {
        return Err(MetricError::InvalidPercentile(percentile_q));
    }
    let mut d = symmetric_surface_distances(pred, gt, spacing)?;
    if percentile_q == 100.0 {
        return Ok(d.iter().copied().fold(0.0, f64::max));
    }
    Ok(percentile(&mut d, percentile_q))
}

/// Mean of the pooled symmetric surface distances in mm.
pub fn average_surface_distance(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<f64, MetricError> {
    let d = symmetric_surface_distances(pred, gt, spacing)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// All four metrics, applying the empty-mask policy of `options`: overlap
/// scores are always computed, surface metrics become the sentinel when
/// exactly one mask is empty and 0 when both are.
pub fn evaluate_pair(
    pred: &BinaryMask,
    gt: &BinaryMask,
    spacing: Spacing,
    options: &MetricOptions,
) -> Result<SegMetrics, MetricError> {
    let dice = dice_coefficient(pred, gt)?;
    let jaccard = jaccard_index(pred, gt)?;
    let q = options.hd_percentile;
    if !(q > 0.0 && q <= 100.0) {
        return Err(MetricError::InvalidPercentile(q));
    }
    let (hausdorff_mm, asd_mm) = match (pred.is_empty(), gt.is_empty()) {
        (true, true) => (0.0, 0.0),
        (false, false) => {
            let mut d = symmetric_surface_distances(pred, gt, spacing)?;
            let asd = d.iter().sum::<f64>() / d.len() as f64;
            let hd = if q == 100.0 {
                d.iter().copied().fold(0.0, f64::max)
            } else {
                percentile(&mut d, q)
            };
            (hd, asd)
        }
        (pred_empty, _) => {
            let sentinel = options
                .empty_sentinel_mm
                .unwrap_or_else(|| spacing.diagonal_mm(pred.shape()));
            log::warn!(
                "{} mask is empty; recording surface metrics as sentinel {sentinel:.3} mm",
                if pred_empty { "predicted" } else { "ground-truth" }
            );
            (sentinel, sentinel)
        }
    };
    Ok(SegMetrics {
        dice,
        jaccard,
        hausdorff_mm,
        asd_mm,
        hausdorff_percentile: q,
    })
}

/// Arithmetic mean of each metric field.
pub fn mean_metrics(items: &[SegMetrics]) -> Option<SegMetrics> {
    let first = items.first()?;
    let n = items.len() as f64;
    let avg = |f: fn(&SegMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    Some(SegMetrics {
        dice: avg(|m| m.dice),
        jaccard: avg(|m| m.jaccard),
        hausdorff_mm: avg(|m| m.hausdorff_mm),
        asd_mm: avg(|m| m.asd_mm),
        hausdorff_percentile: first.hausdorff_percentile,
    })
}
