//! Voxel grids, sparse semantic occupancy and labeled point clouds.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{Scalar, Vec3};

pub type CellIndex = [usize; 3];

/// Axis-aligned voxel grid. Cell `(ix, iy, iz)` spans the half-open box
/// `[origin + i * voxel, origin + (i + 1) * voxel)` on every axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    pub origin: Vec3<T>,
    pub voxel_size: T,
    pub dims: [usize; 3],
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(origin: Vec3<T>, voxel_size: T, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > T::zero()) || !voxel_size.is_finite() {
            return Err(Error::config("voxel_size", "must be positive and finite"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config("dims", "every axis needs at least one cell"));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Grid of `dims` cells centered on the ego origin in x and y, with the
    /// bottom face at `z_min`.
    pub fn ego_centered(voxel_size: T, dims: [usize; 3], z_min: T) -> Result<Self> {
        let half = T::of(0.5);
        let origin = [
            -T::of_usize(dims[0]) * voxel_size * half,
            -T::of_usize(dims[1]) * voxel_size * half,
            z_min,
        ];
        Self::new(origin, voxel_size, dims)
    }

    /// Same voxel lattice, padded by `margin` cells on both sides in x and y.
    pub fn expanded_xy(&self, margin: usize) -> Self {
        let m = T::of_usize(margin) * self.voxel_size;
        Self {
            origin: [self.origin[0] - m, self.origin[1] - m, self.origin[2]],
            voxel_size: self.voxel_size,
            dims: [
                self.dims[0] + 2 * margin,
                self.dims[1] + 2 * margin,
                self.dims[2],
            ],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn contains_index(&self, c: &CellIndex) -> bool {
        c[0] < self.dims[0] && c[1] < self.dims[1] && c[2] < self.dims[2]
    }

    pub fn cell_center(&self, c: &CellIndex) -> Vec3<T> {
        let half = T::of(0.5);
        let mut out = [T::zero(); 3];
        for a in 0..3 {
            out[a] = self.origin[a] + (T::of_usize(c[a]) + half) * self.voxel_size;
        }
        out
    }

    /// Floor binning; `None` when the point falls outside the grid.
    pub fn cell_of(&self, p: &Vec3<T>) -> Option<CellIndex> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !f.is_finite() || f < T::zero() {
                return None;
            }
            let i = f.to_usize()?;
            if i >= self.dims[a] {
                return None;
            }
            c[a] = i;
        }
        Some(c)
    }

    /// Upper bound of the grid extent on each axis.
    pub fn extent_max(&self) -> Vec3<T> {
        let mut out = self.origin;
        for a in 0..3 {
            out[a] += T::of_usize(self.dims[a]) * self.voxel_size;
        }
        out
    }
}

/// Set of occupied cells with one semantic label each.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparseOccupancy {
    cells: BTreeMap<CellIndex, usize>,
}

impl SparseOccupancy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from `(cell, label)` pairs, rejecting duplicates, out-of-grid
    /// cells and labels `>= n_classes`.
    pub fn from_cells<T: Scalar>(
        cells: impl IntoIterator<Item = (CellIndex, usize)>,
        grid: &GridSpec<T>,
        n_classes: usize,
    ) -> Result<Self> {
        let mut occ = Self::new();
        for (c, label) in cells {
            if !grid.contains_index(&c) {
                return Err(Error::IndexOutOfRange(format!("cell {c:?} outside {:?}", grid.dims)));
            }
            if label >= n_classes {
                return Err(Error::InvalidClass {
                    label,
                    classes: n_classes,
                });
            }
            if occ.cells.insert(c, label).is_some() {
                return Err(Error::Shape(format!("duplicate cell {c:?}")));
            }
        }
        Ok(occ)
    }

    /// Inserts or overwrites a cell.
    pub fn set(&mut self, c: CellIndex, label: usize) {
        self.cells.insert(c, label);
    }

    pub fn get(&self, c: &CellIndex) -> Option<usize> {
        self.cells.get(c).copied()
    }

    pub fn contains(&self, c: &CellIndex) -> bool {
        self.cells.contains_key(c)
    }

    pub fn remove(&mut self, c: &CellIndex) -> Option<usize> {
        self.cells.remove(c)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cells in lexicographic `(ix, iy, iz)` order.
    pub fn iter(&self) -> impl Iterator<Item = (&CellIndex, &usize)> {
        self.cells.iter()
    }

    pub fn validate<T: Scalar>(&self, grid: &GridSpec<T>, n_classes: usize) -> Result<()> {
        for (c, &l) in &self.cells {
            if !grid.contains_index(c) {
                return Err(Error::IndexOutOfRange(format!("cell {c:?}")));
            }
            if l >= n_classes {
                return Err(Error::InvalidClass {
                    label: l,
                    classes: n_classes,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint<T> {
    pub position: Vec3<T>,
    pub label: usize,
    pub timestamp: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledPointCloud<T> {
    pub points: Vec<LabeledPoint<T>>,
}

impl<T: Scalar> LabeledPointCloud<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3<T>> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// One point per occupied cell, placed at the cell center.
pub fn occupancy_to_points<T: Scalar>(
    occ: &SparseOccupancy,
    grid: &GridSpec<T>,
    timestamp: usize,
) -> LabeledPointCloud<T> {
    let points = occ
        .iter()
        .map(|(c, &label)| LabeledPoint {
            position: grid.cell_center(c),
            label,
            timestamp,
        })
        .collect();
    LabeledPointCloud { points }
}

/// Result of binning a point cloud back into a grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Revoxelized {
    pub occupancy: SparseOccupancy,
    /// All timestamps of the points that fell into each cell, sorted.
    pub timestamps: BTreeMap<CellIndex, Vec<usize>>,
}

impl Revoxelized {
    /// Distinct timestamps carried by a cell.
    pub fn distinct_timestamps(&self, c: &CellIndex) -> Vec<usize> {
        let mut ts = self.timestamps.get(c).cloned().unwrap_or_default();
        ts.dedup();
        ts
    }
}

/// Bins points with the floor rule, dropping anything outside the grid.
/// Each cell takes the majority label of its points; ties go to the
/// smallest class id.
pub fn revoxelize<T: Scalar>(cloud: &LabeledPointCloud<T>, grid: &GridSpec<T>) -> Revoxelized {
    let mut votes: BTreeMap<CellIndex, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut timestamps: BTreeMap<CellIndex, Vec<usize>> = BTreeMap::new();
    for p in &cloud.points {
        if let Some(c) = grid.cell_of(&p.position) {
            *votes.entry(c).or_default().entry(p.label).or_insert(0) += 1;
            timestamps.entry(c).or_default().push(p.timestamp);
        }
    }
    let mut occupancy = SparseOccupancy::new();
    for (c, counts) in votes {
        // BTreeMap iterates labels ascending, so `>` keeps the smallest on ties.
        let mut best = (0usize, 0usize);
        for (&label, &n) in &counts {
            if n > best.1 {
                best = (label, n);
            }
        }
        occupancy.set(c, best.0);
    }
    for ts in timestamps.values_mut() {
        ts.sort_unstable();
    }
    Revoxelized {
        occupancy,
        timestamps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid() -> GridSpec<f64> {
        GridSpec::new([0.0; 3], 1.0, [4, 4, 4]).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::<f64>::new([0.0; 3], 0.0, [1, 1, 1]).is_err());
        assert!(GridSpec::<f64>::new([0.0; 3], 1.0, [1, 0, 1]).is_err());
    }

    #[test]
    fn unit_cell_center() {
        let g = unit_grid();
        let occ = SparseOccupancy::from_cells([([0, 0, 0], 1)], &g, 3).unwrap();
        let cloud = occupancy_to_points(&occ, &g, 0);
        assert_eq!(cloud.points[0].position, [0.5, 0.5, 0.5]);
        assert_eq!(cloud.points[0].label, 1);
    }

    #[test]
    fn empty_occupancy_gives_empty_cloud() {
        let cloud = occupancy_to_points(&SparseOccupancy::new(), &unit_grid(), 0);
        assert!(cloud.is_empty());
    }

    #[test]
    fn far_corner_center_at_full_resolution() {
        let g = GridSpec::<f64>::new([-40.0, -40.0, -1.0], 0.4, [200, 200, 16]).unwrap();
        let c = g.cell_center(&[199, 199, 15]);
        // Independent arithmetic: last cell spans [hi - voxel, hi).
        let expect = [40.0 - 0.2, 40.0 - 0.2, -1.0 + 16.0 * 0.4 - 0.2];
        for a in 0..3 {
            assert!((c[a] - expect[a]).abs() < 1e-9, "{c:?}");
        }
        assert!((c[0] - 39.8).abs() < 1e-9 && (c[2] - 5.2).abs() < 1e-9);
    }

    #[test]
    fn from_cells_validates() {
        let g = unit_grid();
        assert!(SparseOccupancy::from_cells([([4, 0, 0], 0)], &g, 3).is_err());
        assert!(SparseOccupancy::from_cells([([0, 0, 0], 3)], &g, 3).is_err());
        assert!(SparseOccupancy::from_cells([([0, 0, 0], 0), ([0, 0, 0], 1)], &g, 3).is_err());
    }

    #[test]
    fn revoxelize_single_point() {
        let g = unit_grid();
        let cloud = LabeledPointCloud {
            points: vec![LabeledPoint {
                position: [1.5, 2.5, 0.5],
                label: 2,
                timestamp: 3,
            }],
        };
        let r = revoxelize(&cloud, &g);
        assert_eq!(r.occupancy.get(&[1, 2, 0]), Some(2));
        assert_eq!(r.timestamps[&[1, 2, 0]], vec![3]);
    }

    #[test]
    fn revoxelize_merges_timestamps() {
        let g = unit_grid();
        let pts = [(0.2, 0), (0.7, 3)]
            .iter()
            .map(|&(x, t)| LabeledPoint {
                position: [x, 0.5, 0.5],
                label: 1,
                timestamp: t,
            })
            .collect();
        let r = revoxelize(&LabeledPointCloud { points: pts }, &g);
        assert_eq!(r.occupancy.len(), 1);
        assert_eq!(r.timestamps[&[0, 0, 0]], vec![0, 3]);
    }

    #[test]
    fn boundary_goes_to_higher_cell() {
        let g = unit_grid();
        assert_eq!(g.cell_of(&[1.0, 0.0, 0.0]), Some([1, 0, 0]));
        assert_eq!(g.cell_of(&[4.0, 0.0, 0.0]), None);
        assert_eq!(g.cell_of(&[-1e-12, 0.0, 0.0]), None);
    }

    #[test]
    fn majority_label_tie_breaks_low() {
        let g = unit_grid();
        let mk = |label| LabeledPoint {
            position: [0.5, 0.5, 0.5],
            label,
            timestamp: 0,
        };
        let r = revoxelize(&LabeledPointCloud { points: vec![mk(4), mk(2)] }, &g);
        assert_eq!(r.occupancy.get(&[0, 0, 0]), Some(2));
        let r = revoxelize(
            &LabeledPointCloud {
                points: vec![mk(4), mk(2), mk(4)],
            },
            &g,
        );
        assert_eq!(r.occupancy.get(&[0, 0, 0]), Some(4));
    }

    #[test]
    fn expanded_grid_keeps_lattice() {
        let g = GridSpec::ego_centered(0.5, [8, 8, 2], -1.0).unwrap();
        let e = g.expanded_xy(2);
        assert_eq!(e.dims, [12, 12, 2]);
        let c = g.cell_center(&[0, 0, 0]);
        let ce = e.cell_center(&[2, 2, 0]);
        assert_eq!(c, ce);
    }
}
