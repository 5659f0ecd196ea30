//! Voxel and point geometry: grids, poses, exact nearest neighbors, Chamfer
//! distance, and multi-frame ground-truth construction.

pub mod chamfer;
pub mod grid;
pub mod knn;
pub mod pose;
pub mod xyz;

pub use chamfer::{chamfer_distance, chamfer_gradient, ChamferResult};
pub use grid::{
    occupancy_to_points, revoxelize, CellIndex, GridSpec, LabeledPoint, LabeledPointCloud,
    Revoxelized, SparseOccupancy,
};
pub use knn::{nearest_neighbor_index, KdTree};
pub use pose::{transform_point, transform_points, wrap_angle, Pose};

use crate::error::{Error, Result};
use crate::scalar::{Scalar, Vec3};

/// Converts every frame to points tagged with its frame index and expresses
/// them all in the frame of `poses[0]`.
pub fn union_future_gt<T: Scalar>(
    frames: &[SparseOccupancy],
    poses: &[Pose<T>],
    grid: &GridSpec<T>,
) -> Result<LabeledPointCloud<T>> {
    if frames.len() != poses.len() {
        return Err(Error::LengthMismatch {
            what: "frames vs poses",
            left: frames.len(),
            right: poses.len(),
        });
    }
    let mut out = LabeledPointCloud::default();
    let Some(anchor) = poses.first() else {
        return Ok(out);
    };
    for (t, (occ, pose)) in frames.iter().zip(poses).enumerate() {
        let cloud = occupancy_to_points(occ, grid, t);
        out.points
            .extend(transform_points(&cloud, pose, anchor).points);
    }
    Ok(out)
}

/// Point targets: one point per occupied cell with its label and the distinct
/// frame indices that contributed to the cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimedTargets<T> {
    pub points: Vec<Vec3<T>>,
    pub labels: Vec<usize>,
    pub timestamps: Vec<Vec<usize>>,
}

impl<T: Scalar> TimedTargets<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Single-frame targets; every point carries `timestamp`.
    pub fn from_occupancy(occ: &SparseOccupancy, grid: &GridSpec<T>, timestamp: usize) -> Self {
        let cloud = occupancy_to_points(occ, grid, timestamp);
        Self {
            points: cloud.positions(),
            labels: cloud.points.iter().map(|p| p.label).collect(),
            timestamps: vec![vec![timestamp]; cloud.len()],
        }
    }

    pub fn from_revoxelized(r: &Revoxelized, grid: &GridSpec<T>) -> Self {
        let mut out = Self::default();
        for (c, &label) in r.occupancy.iter() {
            out.points.push(grid.cell_center(c));
            out.labels.push(label);
            out.timestamps.push(r.distinct_timestamps(c));
        }
        out
    }
}

/// Full multi-frame target construction: union into the anchor frame, then
/// re-voxelize on `grid`.
pub fn union_targets<T: Scalar>(
    frames: &[SparseOccupancy],
    poses: &[Pose<T>],
    frame_grid: &GridSpec<T>,
    union_grid: &GridSpec<T>,
) -> Result<TimedTargets<T>> {
    let cloud = union_future_gt(frames, poses, frame_grid)?;
    Ok(TimedTargets::from_revoxelized(&revoxelize(&cloud, union_grid), union_grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec<f64> {
        GridSpec::new([0.0; 3], 1.0, [8, 8, 2]).unwrap()
    }

    fn occ(cells: &[([usize; 3], usize)]) -> SparseOccupancy {
        SparseOccupancy::from_cells(cells.iter().copied(), &grid(), 4).unwrap()
    }

    #[test]
    fn single_frame_union_is_plain_points() {
        let o = occ(&[([1, 2, 0], 1), ([3, 3, 1], 2)]);
        let u = union_future_gt(&[o.clone()], &[Pose::identity(0)], &grid()).unwrap();
        assert_eq!(u, occupancy_to_points(&o, &grid(), 0));
    }

    #[test]
    fn static_frames_duplicate_with_timestamps() {
        let o = occ(&[([1, 2, 0], 1)]);
        let p = Pose::identity(0);
        let u = union_future_gt(&[o.clone(), o], &[p, p], &grid()).unwrap();
        assert_eq!(u.len(), 2);
        assert_eq!(u.points[0].position, u.points[1].position);
        assert_eq!((u.points[0].timestamp, u.points[1].timestamp), (0, 1));
    }

    #[test]
    fn moving_ego_maps_back() {
        let o1 = occ(&[([1, 2, 0], 1)]);
        let poses = [Pose::identity(0), Pose::new(2.0, 0.0, 0.0, 1)];
        let u = union_future_gt(&[SparseOccupancy::new(), o1.clone()], &poses, &grid()).unwrap();
        // oracle: explicit composition of transform_points
        let manual = transform_points(&occupancy_to_points(&o1, &grid(), 1), &poses[1], &poses[0]);
        assert_eq!(u.points, manual.points);
        assert_eq!(u.points[0].position, [3.5, 2.5, 0.5]);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(union_future_gt(&[SparseOccupancy::new()], &[], &grid()).is_err());
    }

    #[test]
    fn union_targets_carry_timestamp_sets() {
        let o = occ(&[([1, 1, 0], 1)]);
        let poses = [Pose::identity(0), Pose::identity(1)];
        let t = union_targets(&[o.clone(), o], &poses, &grid(), &grid()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.timestamps[0], vec![0, 1]);
    }
}
