//! Procedural scene specifications.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub const FREE: usize = 0;
pub const GROUND: usize = 1;
pub const BUILDING: usize = 2;
pub const VEHICLE: usize = 3;
pub const PEDESTRIAN: usize = 4;
pub const BARRIER: usize = 5;

/// Lowest class count the generator can populate.
pub const MIN_CLASSES: usize = 6;

/// Top of the ground layer in ego-frame z.
pub const GROUND_TOP: f64 = -0.5;
pub const GROUND_THICKNESS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: usize,
}

impl BoxSpec {
    /// Strict containment test in the box's own frame.
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        let q = self.local(p);
        (0..3).all(|a| q[a].abs() < 0.5 * self.size[a])
    }

    pub fn local(&self, p: &[f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Axis-aligned bounds in the box's parent frame.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        let (s, c) = self.yaw.sin_cos();
        let hx = 0.5 * (self.size[0] * c.abs() + self.size[1] * s.abs());
        let hy = 0.5 * (self.size[0] * s.abs() + self.size[1] * c.abs());
        let hz = 0.5 * self.size[2];
        (
            [self.center[0] - hx, self.center[1] - hy, self.center[2] - hz],
            [self.center[0] + hx, self.center[1] + hy, self.center[2] + hz],
        )
    }

    /// The same box seen from `frame` (a pose in this box's parent frame).
    pub fn in_frame(&self, frame: &Pose<f64>) -> BoxSpec {
        let c = frame.from_reference(&self.center);
        BoxSpec {
            center: c,
            size: self.size,
            yaw: self.yaw - frame.yaw,
            class: self.class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    /// World `(x, y, yaw)` at frame 0.
    pub pose: [f64; 3],
    /// World displacement per frame.
    pub velocity: [f64; 2],
    pub size: [f64; 3],
    pub class: usize,
}

impl AgentSpec {
    pub fn box_at(&self, frame: usize) -> BoxSpec {
        let k = frame as f64;
        BoxSpec {
            center: [
                self.pose[0] + self.velocity[0] * k,
                self.pose[1] + self.velocity[1] * k,
                GROUND_TOP + 0.5 * self.size[2],
            ],
            size: self.size,
            yaw: self.pose[2],
            class: self.class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Stationary,
    Straight,
    Turning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub scenario: Scenario,
    /// The ground is a road strip of this width following the ego path.
    pub ground_class: usize,
    pub road_width: f64,
    pub static_boxes: Vec<BoxSpec>,
    pub agents: Vec<AgentSpec>,
    /// Ego forward motion per frame (meters), one entry per frame.
    pub ego_speed: Vec<f64>,
    /// Ego heading change per frame (radians), one entry per frame.
    pub ego_yaw_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub grid_dims: [usize; 3],
    pub voxel_size: f64,
    pub z_min: f64,
    pub past_frames: usize,
    pub future_frames: usize,
    /// Base ego speed range in meters per frame.
    pub speed_range: [f64; 2],
    pub stationary_prob: f64,
    pub turning_prob: f64,
    /// Largest heading change per frame (radians).
    pub max_yaw_rate: f64,
    pub static_range: [usize; 2],
    pub agent_range: [usize; 2],
    pub road_width: f64,
    /// Extra cells on each xy side of the frame grid for multi-frame targets.
    pub union_margin: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            grid_dims: [48, 48, 8],
            voxel_size: 0.5,
            z_min: -1.0,
            past_frames: 2,
            future_frames: 4,
            speed_range: [0.0, 2.5],
            stationary_prob: 0.1,
            turning_prob: 0.5,
            max_yaw_rate: 0.12,
            static_range: [2, 5],
            agent_range: [0, 2],
            road_width: 6.0,
            union_margin: 8,
        }
    }
}

impl WorldConfig {
    pub fn n_frames(&self) -> usize {
        self.past_frames + self.future_frames + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < MIN_CLASSES {
            return Err(Error::config(
                "world.n_classes",
                format!("need at least {MIN_CLASSES} classes (free, ground, building, vehicle, pedestrian, barrier)"),
            ));
        }
        if self.grid_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("world.grid_dims", "all dims must be >= 1"));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config("world.voxel_size", "must be positive"));
        }
        if !self.z_min.is_finite() {
            return Err(Error::config("world.z_min", "must be finite"));
        }
        if self.past_frames < 1 {
            return Err(Error::config("world.past_frames", "need at least one past frame"));
        }
        let [lo, hi] = self.speed_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("world.speed_range", "need 0 <= min <= max"));
        }
        for (key, p) in [("world.stationary_prob", self.stationary_prob), ("world.turning_prob", self.turning_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        if !(self.max_yaw_rate >= 0.0 && self.max_yaw_rate < 1.0) {
            return Err(Error::config("world.max_yaw_rate", "must lie in [0, 1) rad/frame"));
        }
        if self.static_range[0] > self.static_range[1] {
            return Err(Error::config("world.static_range", "min exceeds max"));
        }
        if self.agent_range[0] > self.agent_range[1] {
            return Err(Error::config("world.agent_range", "min exceeds max"));
        }
        if !(self.road_width > 0.0) {
            return Err(Error::config("world.road_width", "must be positive"));
        }
        Ok(())
    }
}

impl SceneSpec {
    pub fn n_frames(&self) -> usize {
        self.ego_speed.len()
    }

    pub fn validate(&self, min_frames: usize) -> Result<()> {
        if self.ego_speed.len() < min_frames || self.ego_yaw_rate.len() != self.ego_speed.len() {
            return Err(Error::config("scene.ego_speed", format!("profile must cover {min_frames} frames")));
        }
        let boxes = self.static_boxes.iter().copied().chain(self.agents.iter().map(|a| a.box_at(0)));
        for b in boxes {
            if b.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::config("scene.size", "box sizes must be positive"));
            }
            if b.class >= self.n_classes {
                return Err(Error::InvalidClass {
                    label: b.class,
                    classes: self.n_classes,
                });
            }
        }
        if self.ground_class >= self.n_classes {
            return Err(Error::InvalidClass {
                label: self.ground_class,
                classes: self.n_classes,
            });
        }
        Ok(())
    }

    /// World-frame ego pose at every frame; frame 0 sits at the origin.
    pub fn ego_poses(&self) -> Vec<Pose<f64>> {
        let mut poses = vec![Pose::identity(0)];
        for k in 1..self.n_frames() {
            let prev = poses[k - 1];
            let step = Pose::new(self.ego_speed[k - 1], 0.0, self.ego_yaw_rate[k - 1], k as i64);
            poses.push(prev.compose(&step));
        }
        poses
    }

    /// Dense samples `(x, y, heading)` along the ego path, extended straight
    /// by `extend` meters before the first and after the last frame.
    pub fn path_samples(&self, spacing: f64, extend: f64) -> Vec<[f64; 3]> {
        let poses = self.ego_poses();
        let mut out = Vec::new();
        let first = poses[0];
        let n_back = (extend / spacing).ceil() as usize;
        for i in (1..=n_back).rev() {
            let d = -(i as f64) * spacing;
            out.push([first.x + d * first.yaw.cos(), first.y + d * first.yaw.sin(), first.yaw]);
        }
        for w in poses.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
            let n = ((len / spacing).ceil() as usize).max(1);
            for i in 0..n {
                let f = i as f64 / n as f64;
                let yaw = a.yaw + crate::geometry::wrap_angle(b.yaw - a.yaw) * f;
                out.push([a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f, yaw]);
            }
        }
        let last = *poses.last().unwrap_or(&first);
        for i in 0..=n_back {
            let d = i as f64 * spacing;
            out.push([last.x + d * last.yaw.cos(), last.y + d * last.yaw.sin(), last.yaw]);
        }
        out
    }

    /// The ground plane realized as overlapping road segments.
    pub fn ground_boxes(&self) -> Vec<BoxSpec> {
        let samples = self.path_samples(1.0, 20.0);
        samples
            .windows(2)
            .filter_map(|w| {
                let (a, b) = (w[0], w[1]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                (len > 1e-9).then(|| BoxSpec {
                    center: [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), GROUND_TOP - 0.5 * GROUND_THICKNESS],
                    size: [len + 0.3, self.road_width, GROUND_THICKNESS],
                    yaw: (b[1] - a[1]).atan2(b[0] - a[0]),
                    class: self.ground_class,
                })
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn count(rng: &mut ChaCha8Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.gen_range(lo..=hi)
}

/// Reproducible scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = cfg.n_frames();
    let scenario = if rng.gen::<f64>() < cfg.stationary_prob {
        Scenario::Stationary
    } else if rng.gen::<f64>() < cfg.turning_prob {
        Scenario::Turning
    } else {
        Scenario::Straight
    };
    let (speed, yaw_rate) = match scenario {
        Scenario::Stationary => (vec![0.0; frames], vec![0.0; frames]),
        _ => {
            let base = uniform(&mut rng, cfg.speed_range);
            let accel = uniform(&mut rng, [-0.08, 0.08]) * (cfg.speed_range[1] - cfg.speed_range[0]).max(0.0);
            let speed: Vec<f64> = (0..frames)
                .map(|k| (base + accel * k as f64).clamp(cfg.speed_range[0], cfg.speed_range[1]))
                .collect();
            let yaw_rate = if scenario == Scenario::Turning && cfg.max_yaw_rate > 0.0 {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let r0 = uniform(&mut rng, [0.25 * cfg.max_yaw_rate, 0.75 * cfg.max_yaw_rate]);
                let r1 = uniform(&mut rng, [0.03, 0.08]) * cfg.max_yaw_rate;
                (0..frames)
                    .map(|k| sign * (r0 + r1 * k as f64).min(cfg.max_yaw_rate))
                    .collect()
            } else {
                vec![0.0; frames]
            };
            (speed, yaw_rate)
        }
    };
    let mut spec = SceneSpec {
        seed,
        n_classes: cfg.n_classes,
        scenario,
        ground_class: GROUND,
        road_width: cfg.road_width,
        static_boxes: Vec::new(),
        agents: Vec::new(),
        ego_speed: speed,
        ego_yaw_rate: yaw_rate,
    };
    // Anchor objects along the part of the path that is visible at the current frame.
    let path = spec.path_samples(0.5, 10.0);
    let poses = spec.ego_poses();
    let cur = poses[cfg.past_frames];
    let visible: Vec<[f64; 3]> = path
        .iter()
        .copied()
        .filter(|s| {
            let p = cur.from_reference(&[s[0], s[1], 0.0]);
            p[0].abs() < 11.0 && p[1].abs() < 11.0
        })
        .collect();
    let pick = |rng: &mut ChaCha8Rng| visible[rng.gen_range(0..visible.len())];
    let half_road = 0.5 * cfg.road_width;
    for _ in 0..count(&mut rng, cfg.static_range) {
        let s = pick(&mut rng);
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let (sn, cs) = s[2].sin_cos();
        let (lat, b) = if rng.gen::<f64>() < 0.6 {
            let fx = uniform(&mut rng, [1.5, 3.0]);
            let fy = uniform(&mut rng, [1.5, 3.0]);
            let h = uniform(&mut rng, [1.5, 3.0]);
            let lat = side * (half_road + 1.0 + 0.5 * fy + uniform(&mut rng, [0.0, 3.0]));
            (lat, ([fx, fy, h], BUILDING))
        } else {
            let lat = side * (half_road + 0.4);
            (lat, ([uniform(&mut rng, [1.5, 3.0]), 0.4, 1.0], BARRIER))
        };
        let (size, class) = b;
        spec.static_boxes.push(BoxSpec {
            center: [s[0] - sn * lat, s[1] + cs * lat, GROUND_TOP + 0.5 * size[2]],
            size,
            yaw: s[2],
            class,
        });
    }
    for _ in 0..count(&mut rng, cfg.agent_range) {
        // Agents are anchored at frame 0 positions.
        let s = path[rng.gen_range(0..path.len())];
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let (sn, cs) = s[2].sin_cos();
        if rng.gen::<f64>() < 0.6 {
            let lat = side * 2.7;
            let v = uniform(&mut rng, [0.0, 1.5]);
            spec.agents.push(AgentSpec {
                pose: [s[0] - sn * lat, s[1] + cs * lat, s[2]],
                velocity: [cs * v, sn * v],
                size: [uniform(&mut rng, [3.5, 4.5]), 1.6, 1.5],
                class: VEHICLE,
            });
        } else {
            let lat = side * (half_road + uniform(&mut rng, [0.5, 3.0]));
            let heading = uniform(&mut rng, [-std::f64::consts::PI, std::f64::consts::PI]);
            let v = uniform(&mut rng, [0.0, 0.6]);
            spec.agents.push(AgentSpec {
                pose: [s[0] - sn * lat, s[1] + cs * lat, heading],
                velocity: [heading.cos() * v, heading.sin() * v],
                size: [0.6, 0.6, 1.7],
                class: PEDESTRIAN,
            });
        }
    }
    spec.validate(frames)?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap(), generate_scene(8, &cfg).unwrap());
    }

    #[test]
    fn zero_agents_is_static() {
        let cfg = WorldConfig {
            agent_range: [0, 0],
            ..WorldConfig::default()
        };
        for seed in 0..20 {
            assert!(generate_scene(seed, &cfg).unwrap().agents.is_empty());
        }
    }

    #[test]
    fn speed_histogram_spans_range() {
        let cfg = WorldConfig {
            speed_range: [0.0, 10.0],
            stationary_prob: 0.1,
            ..WorldConfig::default()
        };
        let mut bins = [0usize; 10];
        for seed in 0..500 {
            let s = generate_scene(seed, &cfg).unwrap();
            let v = s.ego_speed[cfg.past_frames];
            bins[((v / 1.0) as usize).min(9)] += 1;
        }
        assert!(bins.iter().all(|&b| b > 0), "{bins:?}");
    }

    #[test]
    fn bad_class_count_names_key() {
        let cfg = WorldConfig {
            n_classes: 3,
            ..WorldConfig::default()
        };
        match generate_scene(0, &cfg) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "world.n_classes"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ego_path_integrates_profile() {
        let mut spec = generate_scene(1, &WorldConfig::default()).unwrap();
        spec.ego_speed = vec![1.0; 7];
        spec.ego_yaw_rate = vec![0.0; 7];
        let poses = spec.ego_poses();
        assert!((poses[6].x - 6.0).abs() < 1e-12 && poses[6].y.abs() < 1e-12);
    }
}
