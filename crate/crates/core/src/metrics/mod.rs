//! Occupancy and planning metrics.

pub mod report;

pub use report::{EvalAccumulator, EvalReport};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{revoxelize, GridSpec, LabeledPoint, LabeledPointCloud, Pose, SparseOccupancy};
use crate::scalar::{Scalar, Vec3};
use crate::world::scene::{FREE, GROUND};

/// Class-agnostic IoU over occupied cells. Two empty sets score 1.
pub fn occupancy_iou(pred: &SparseOccupancy, gt: &SparseOccupancy) -> f64 {
    let inter = pred.iter().filter(|(c, _)| gt.contains(c)).count();
    let union = pred.len() + gt.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-class intersection and union counts for classes `1..n_classes`.
pub fn class_counts(pred: &SparseOccupancy, gt: &SparseOccupancy, n_classes: usize) -> Vec<(usize, usize)> {
    let mut counts = vec![(0usize, 0usize); n_classes];
    for (c, &lp) in pred.iter() {
        match gt.get(c) {
            Some(lg) if lg == lp => {
                counts[lp].0 += 1;
                counts[lp].1 += 1;
            }
            Some(lg) => {
                counts[lp].1 += 1;
                counts[lg].1 += 1;
            }
            None => counts[lp].1 += 1,
        }
    }
    for (c, &lg) in gt.iter() {
        if !pred.contains(c) {
            counts[lg].1 += 1;
        }
    }
    counts[FREE] = (0, 0);
    counts
}

pub(crate) fn miou_from_counts(counts: &[(usize, usize)]) -> Result<f64> {
    let present: Vec<f64> = counts
        .iter()
        .skip(1)
        .filter(|(_, u)| *u > 0)
        .map(|&(i, u)| i as f64 / u as f64)
        .collect();
    if present.is_empty() {
        return Err(Error::EmptySet("no semantic class present in prediction or ground truth"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean IoU over non-free classes present in either input.
pub fn occupancy_miou(pred: &SparseOccupancy, gt: &SparseOccupancy, n_classes: usize) -> Result<f64> {
    for (_, &l) in pred.iter().chain(gt.iter()) {
        if l >= n_classes {
            return Err(Error::InvalidClass {
                label: l,
                classes: n_classes,
            });
        }
    }
    miou_from_counts(&class_counts(pred, gt, n_classes))
}

/// Bins points by their argmax class; cells whose majority label is free are dropped.
pub fn prediction_to_occupancy<T: Scalar>(points: &[Vec3<T>], logits: &[Vec<T>], grid: &GridSpec<T>) -> Result<SparseOccupancy> {
    if points.len() != logits.len() {
        return Err(Error::LengthMismatch {
            what: "points vs logits",
            left: points.len(),
            right: logits.len(),
        });
    }
    let cloud = LabeledPointCloud {
        points: points
            .iter()
            .zip(logits)
            .map(|(p, z)| LabeledPoint {
                position: *p,
                label: argmax(z),
                timestamp: 0,
            })
            .collect(),
    };
    let mut occ = revoxelize(&cloud, grid).occupancy;
    let free: Vec<_> = occ.iter().filter(|(_, &l)| l == FREE).map(|(c, _)| *c).collect();
    for c in free {
        occ.remove(&c);
    }
    Ok(occ)
}

pub fn argmax<T: Scalar>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Planar distance per horizon.
pub fn trajectory_l2(pred: &[Pose<f64>], gt: &[Pose<f64>]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "trajectory horizons",
            left: pred.len(),
            right: gt.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(a, b)| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt())
        .collect())
}

/// Means of per-horizon values over the first `k` horizons for each `k` in `cutoffs`.
pub fn cumulative_means(values: &[f64], cutoffs: &[usize]) -> Vec<f64> {
    cutoffs
        .iter()
        .map(|&k| {
            let k = k.min(values.len());
            if k == 0 {
                0.0
            } else {
                values[..k].iter().sum::<f64>() / k as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Self {
            length: 4.0,
            width: 1.8,
        }
    }
}

/// Whether the ego footprint at `pose` (grid coordinates) overlaps, with
/// positive area, any cell column holding a non-drivable occupied cell.
pub fn collides(pose: &Pose<f64>, occ: &SparseOccupancy, grid: &GridSpec<f64>, fp: &Footprint) -> bool {
    let (s, c) = pose.yaw.sin_cos();
    let (a, b) = (0.5 * fp.length, 0.5 * fp.width);
    let ext_x = a * c.abs() + b * s.abs();
    let ext_y = a * s.abs() + b * c.abs();
    let v = grid.voxel_size;
    let h = 0.5 * v;
    let lo = |center: f64, ext: f64, axis: usize| (((center - ext - grid.origin[axis]) / v).floor().max(0.0)) as usize;
    let hi = |center: f64, ext: f64, axis: usize| {
        let x = ((center + ext - grid.origin[axis]) / v).floor();
        if x < 0.0 {
            None
        } else {
            Some((x as usize).min(grid.dims[axis] - 1))
        }
    };
    let (Some(x1), Some(y1)) = (hi(pose.x, ext_x, 0), hi(pose.y, ext_y, 1)) else {
        return false;
    };
    let (x0, y0) = (lo(pose.x, ext_x, 0), lo(pose.y, ext_y, 1));
    let blocked = |ix: usize, iy: usize| {
        (0..grid.dims[2]).any(|iz| matches!(occ.get(&[ix, iy, iz]), Some(l) if l != FREE && l != GROUND))
    };
    for ix in x0..=x1 {
        for iy in y0..=y1 {
            let cx = grid.origin[0] + (ix as f64 + 0.5) * v;
            let cy = grid.origin[1] + (iy as f64 + 0.5) * v;
            if square_overlaps_rect([cx, cy], h, [pose.x, pose.y], [c, s], a, b) && blocked(ix, iy) {
                return true;
            }
        }
    }
    false
}

/// Separating-axis test between an axis-aligned square and an oriented
/// rectangle; touching boundaries do not count as overlap.
fn square_overlaps_rect(sq: [f64; 2], h: f64, rc: [f64; 2], u: [f64; 2], a: f64, b: f64) -> bool {
    let d = [rc[0] - sq[0], rc[1] - sq[1]];
    let v = [-u[1], u[0]];
    let axes = [[1.0, 0.0], [0.0, 1.0], u, v];
    axes.iter().all(|n| {
        let dist = (d[0] * n[0] + d[1] * n[1]).abs();
        let r_rect = a * (u[0] * n[0] + u[1] * n[1]).abs() + b * (v[0] * n[0] + v[1] * n[1]).abs();
        let r_sq = h * (n[0].abs() + n[1].abs());
        dist < r_rect + r_sq - 1e-12
    })
}

/// Per-horizon collision fraction over samples. `samples[i]` pairs predicted
/// poses (one per horizon, each in the frame of that horizon's occupancy)
/// with the occupancy per horizon.
pub fn collision_rate(samples: &[(Vec<Pose<f64>>, Vec<SparseOccupancy>)], grid: &GridSpec<f64>, fp: &Footprint) -> Vec<f64> {
    let horizons = samples.iter().map(|(p, _)| p.len()).max().unwrap_or(0);
    let mut hits = vec![0usize; horizons];
    let mut total = vec![0usize; horizons];
    for (poses, occs) in samples {
        for (h, (p, o)) in poses.iter().zip(occs).enumerate() {
            total[h] += 1;
            hits[h] += usize::from(collides(p, o, grid, fp));
        }
    }
    hits.iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect()
}

/// Repeats the last observed frame-to-frame motion (constant speed and yaw rate).
pub fn constant_velocity_baseline(past: &[Pose<f64>], horizon: usize) -> Result<Vec<Pose<f64>>> {
    if past.len() < 2 {
        return Err(Error::LengthMismatch {
            what: "past waypoints (need at least 2)",
            left: past.len(),
            right: 2,
        });
    }
    let prev = past[past.len() - 2];
    let last = past[past.len() - 1];
    let step = prev.relative(&last);
    let mut out = Vec::with_capacity(horizon);
    let mut cur = last;
    for t in 1..=horizon {
        let mut next = cur.compose(&step);
        next.frame = last.frame + t as i64;
        out.push(next);
        cur = next;
    }
    Ok(out)
}

/// Counts of occupied cells per class, for reporting.
pub fn class_histogram(occ: &SparseOccupancy) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for (_, &l) in occ.iter() {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}
