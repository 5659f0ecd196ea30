//! Synthetic driving scenes: generation, ground-truth rendering, the feature
//! field, and the on-disk dataset format.

pub mod dataset;
pub mod field;
pub mod render;
pub mod scene;

pub use dataset::{load_dataset, read_manifest, read_sequence, sequence_dir, write_dataset, write_sequence};
pub use field::FeatureField;
pub use render::render_gt_occupancy;
pub use scene::{generate_scene, AgentSpec, BoxSpec, Scenario, SceneSpec, WorldConfig};

use crate::error::Result;
use crate::geometry::{union_targets, GridSpec, Pose, SparseOccupancy, TimedTargets};

/// A rendered scene: ego poses and per-frame occupancy in each frame's ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub spec: SceneSpec,
    pub grid: GridSpec<f64>,
    pub past_frames: usize,
    pub future_frames: usize,
    /// World poses, one per frame.
    pub poses: Vec<Pose<f64>>,
    pub frames: Vec<SparseOccupancy>,
}

impl SceneSequence {
    pub fn render(spec: SceneSpec, cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate(cfg.n_frames())?;
        let grid = frame_grid(cfg)?;
        let poses: Vec<Pose<f64>> = spec.ego_poses().into_iter().take(cfg.n_frames()).collect();
        let frames = (0..cfg.n_frames())
            .map(|k| render::render_with_pose(&spec, k, &poses[k], &grid))
            .collect();
        Ok(Self {
            spec,
            grid,
            past_frames: cfg.past_frames,
            future_frames: cfg.future_frames,
            poses,
            frames,
        })
    }

    pub fn generate(seed: u64, cfg: &WorldConfig) -> Result<Self> {
        Self::render(generate_scene(seed, cfg)?, cfg)
    }

    pub fn current(&self) -> usize {
        self.past_frames
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    /// Pose of frame `k` in the current ego frame.
    pub fn relative_pose(&self, k: usize) -> Pose<f64> {
        let mut p = self.poses[self.current()].relative(&self.poses[k]);
        p.frame = k as i64 - self.current() as i64;
        p
    }

    /// Past and current waypoints (oldest first), relative to the current pose.
    pub fn past_waypoints(&self) -> Vec<Pose<f64>> {
        (0..=self.current()).map(|k| self.relative_pose(k)).collect()
    }

    /// Ground-truth future waypoints `w^1..w^f`, relative to the current pose.
    pub fn future_waypoints(&self) -> Vec<Pose<f64>> {
        (1..=self.future_frames).map(|t| self.relative_pose(self.current() + t)).collect()
    }

    /// Occupancy of horizon `t` (0 = current frame).
    pub fn horizon(&self, t: usize) -> &SparseOccupancy {
        &self.frames[self.current() + t]
    }

    pub fn field(&self) -> FeatureField {
        let half = 0.5 * self.grid.voxel_size * self.grid.dims[0].max(self.grid.dims[1]) as f64;
        FeatureField::build_with_pose(&self.spec, self.current(), &self.poses[self.current()], half)
    }

    /// Multi-frame targets for horizons `0..=f` united into the current frame.
    pub fn union_targets(&self, union_grid: &GridSpec<f64>) -> Result<TimedTargets<f64>> {
        let frames: Vec<SparseOccupancy> = (0..=self.future_frames).map(|t| self.horizon(t).clone()).collect();
        let poses: Vec<Pose<f64>> = (0..=self.future_frames).map(|t| self.relative_pose(self.current() + t)).collect();
        union_targets(&frames, &poses, &self.grid, union_grid)
    }
}

pub fn frame_grid(cfg: &WorldConfig) -> Result<GridSpec<f64>> {
    GridSpec::ego_centered(cfg.voxel_size, cfg.grid_dims, cfg.z_min)
}

pub fn union_grid(cfg: &WorldConfig) -> Result<GridSpec<f64>> {
    Ok(frame_grid(cfg)?.expanded_xy(cfg.union_margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform_point;
    use crate::world::scene::{FREE, GROUND};

    #[test]
    fn static_content_follows_ego_motion() {
        let cfg = WorldConfig {
            agent_range: [0, 0],
            stationary_prob: 0.0,
            ..WorldConfig::default()
        };
        let seq = SceneSequence::generate(5, &cfg).unwrap();
        let g = &seq.grid;
        // every static cell of frame k, moved into frame 0 coordinates, lands
        // within half a voxel diagonal of a frame-0 cell or outside the frame-0 grid
        let p0 = seq.poses[0];
        let pk = seq.poses[3];
        let mut checked = 0;
        for (c, _) in seq.frames[3].iter() {
            let q = transform_point(&g.cell_center(c), &pk, &p0);
            if let Some(c0) = g.cell_of(&q) {
                let inner = (0..2).all(|a| c0[a] >= 2 && c0[a] + 2 < g.dims[a]);
                if inner {
                    let near = (-1i64..=1).any(|dx| {
                        (-1i64..=1).any(|dy| {
                            let n = [(c0[0] as i64 + dx) as usize, (c0[1] as i64 + dy) as usize, c0[2]];
                            seq.frames[0].contains(&n)
                        })
                    });
                    assert!(near, "cell {c:?} -> {c0:?}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn nearest_peak_classifier_recovers_labels() {
        let cfg = WorldConfig::default();
        let mut total = 0usize;
        let mut right = 0usize;
        for seed in 0..8 {
            let seq = SceneSequence::generate(seed, &cfg).unwrap();
            let field = seq.field();
            for (c, &label) in seq.horizon(0).iter() {
                let f: Vec<f64> = field.sample(&seq.grid.cell_center(c));
                let best = (0..f.len()).fold(0, |b, i| if f[i] > f[b] { i } else { b });
                total += 1;
                right += usize::from(best + 1 == label);
            }
        }
        assert!(right as f64 >= 0.95 * total as f64, "{right}/{total}");
        let _ = (FREE, GROUND);
    }

    #[test]
    fn waypoints_are_relative_to_current() {
        let seq = SceneSequence::generate(2, &WorldConfig::default()).unwrap();
        let w = seq.past_waypoints();
        assert_eq!(w.len(), 3);
        let cur = w[2];
        assert!(cur.x.abs() < 1e-12 && cur.y.abs() < 1e-12 && cur.yaw.abs() < 1e-12);
        assert_eq!(seq.future_waypoints().len(), 4);
    }
}
