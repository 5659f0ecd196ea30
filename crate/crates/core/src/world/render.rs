//! Voxelization of scene geometry into per-frame ground truth.

use std::collections::BTreeMap;

use crate::geometry::{CellIndex, GridSpec, Pose, SparseOccupancy};
use crate::world::scene::{BoxSpec, SceneSpec};

/// Marks every cell whose center lies strictly inside `b` (given in grid
/// coordinates) with `(priority, class)` unless a higher priority already holds it.
fn rasterize(b: &BoxSpec, priority: u8, grid: &GridSpec<f64>, cells: &mut BTreeMap<CellIndex, (u8, usize)>) {
    let (lo, hi) = b.aabb();
    let mut range = [(0usize, 0usize); 3];
    for a in 0..3 {
        let v = grid.voxel_size;
        let first = ((lo[a] - grid.origin[a]) / v - 0.5).ceil().max(0.0);
        let last = ((hi[a] - grid.origin[a]) / v - 0.5).floor();
        if last < 0.0 || first > (grid.dims[a] - 1) as f64 {
            return;
        }
        range[a] = (first as usize, (last as usize).min(grid.dims[a] - 1));
    }
    for ix in range[0].0..=range[0].1 {
        for iy in range[1].0..=range[1].1 {
            for iz in range[2].0..=range[2].1 {
                let c = [ix, iy, iz];
                if !b.contains(&grid.cell_center(&c)) {
                    continue;
                }
                match cells.get(&c) {
                    Some(&(p, _)) if p >= priority => {}
                    _ => {
                        cells.insert(c, (priority, b.class));
                    }
                }
            }
        }
    }
}

/// Every box of the scene at `frame`, expressed in the ego frame, with its
/// overlap priority (agent 2 > static 1 > ground 0).
pub fn boxes_in_ego_frame(spec: &SceneSpec, frame: usize, ego: &Pose<f64>) -> Vec<(BoxSpec, u8)> {
    let mut out: Vec<(BoxSpec, u8)> = spec.ground_boxes().iter().map(|b| (b.in_frame(ego), 0)).collect();
    out.extend(spec.static_boxes.iter().map(|b| (b.in_frame(ego), 1)));
    out.extend(spec.agents.iter().map(|a| (a.box_at(frame).in_frame(ego), 2)));
    out
}

/// Ground-truth occupancy of `frame` in that frame's ego coordinates.
pub fn render_gt_occupancy(spec: &SceneSpec, frame: usize, grid: &GridSpec<f64>) -> SparseOccupancy {
    let ego = spec.ego_poses()[frame];
    render_with_pose(spec, frame, &ego, grid)
}

pub(crate) fn render_with_pose(spec: &SceneSpec, frame: usize, ego: &Pose<f64>, grid: &GridSpec<f64>) -> SparseOccupancy {
    let mut cells = BTreeMap::new();
    for (b, prio) in boxes_in_ego_frame(spec, frame, ego) {
        rasterize(&b, prio, grid, &mut cells);
    }
    let mut occ = SparseOccupancy::new();
    for (c, (_, label)) in cells {
        occ.set(c, label);
    }
    occ
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{generate_scene, AgentSpec, Scenario, WorldConfig, BUILDING, GROUND, VEHICLE};

    fn bare_spec() -> SceneSpec {
        SceneSpec {
            seed: 0,
            n_classes: 6,
            scenario: Scenario::Stationary,
            ground_class: GROUND,
            road_width: 6.0,
            static_boxes: vec![],
            agents: vec![],
            ego_speed: vec![0.0; 7],
            ego_yaw_rate: vec![0.0; 7],
        }
    }

    #[test]
    fn unit_box_in_cell_occupies_that_cell() {
        let grid = GridSpec::new([0.0, 0.0, 0.0], 1.0, [4, 4, 4]).unwrap();
        let b = BoxSpec {
            center: [1.5, 2.5, 0.5],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            class: BUILDING,
        };
        let mut cells = BTreeMap::new();
        rasterize(&b, 1, &grid, &mut cells);
        assert_eq!(cells.keys().copied().collect::<Vec<_>>(), vec![[1, 2, 0]]);
    }

    #[test]
    fn agent_moves_one_meter_per_frame() {
        let mut spec = bare_spec();
        spec.road_width = 0.1;
        spec.agents.push(AgentSpec {
            pose: [-3.0, 0.0, 0.0],
            velocity: [1.0, 0.0],
            size: [2.0, 1.0, 1.0],
            class: VEHICLE,
        });
        let grid = GridSpec::ego_centered(0.5, [48, 48, 8], -1.0).unwrap();
        let cells = |f: usize| -> Vec<CellIndex> {
            render_gt_occupancy(&spec, f, &grid)
                .iter()
                .filter(|(_, &l)| l == VEHICLE)
                .map(|(c, _)| *c)
                .collect()
        };
        let (a, b) = (cells(0), cells(1));
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for (ca, cb) in a.iter().zip(&b) {
            // one meter is two cells along x
            assert_eq!(cb[0], ca[0] + 2);
            assert_eq!((ca[1], ca[2]), (cb[1], cb[2]));
        }
    }

    #[test]
    fn static_scene_shifts_back_as_ego_advances() {
        let mut spec = bare_spec();
        spec.scenario = Scenario::Straight;
        spec.ego_speed = vec![1.0; 7];
        spec.static_boxes.push(BoxSpec {
            center: [5.0, 4.0, 0.5],
            size: [2.0, 2.0, 2.0],
            yaw: 0.0,
            class: BUILDING,
        });
        let grid = GridSpec::ego_centered(0.5, [48, 48, 8], -1.0).unwrap();
        let b0: Vec<CellIndex> = render_gt_occupancy(&spec, 0, &grid)
            .iter()
            .filter(|(_, &l)| l == BUILDING)
            .map(|(c, _)| *c)
            .collect();
        let b1: Vec<CellIndex> = render_gt_occupancy(&spec, 1, &grid)
            .iter()
            .filter(|(_, &l)| l == BUILDING)
            .map(|(c, _)| *c)
            .collect();
        assert_eq!(b0.len(), b1.len());
        for (c0, c1) in b0.iter().zip(&b1) {
            assert_eq!(c1[0] + 2, c0[0]);
        }
    }

    #[test]
    fn agents_override_ground() {
        let cfg = WorldConfig::default();
        let grid = GridSpec::ego_centered(0.5, [48, 48, 8], -1.0).unwrap();
        let spec = generate_scene(3, &cfg).unwrap();
        let occ = render_gt_occupancy(&spec, 2, &grid);
        occ.validate(&grid, cfg.n_classes).unwrap();
        assert!(occ.len() > 100);
    }
}
