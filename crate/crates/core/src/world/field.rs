//! Smooth per-class feature field standing in for image features.
//!
//! Channel `c` (one per non-free class) at position `p` is
//!
//! ```text
//! s_c(p) = 1 − Π_b (1 − exp(−d̃_b(p)))      over boxes b of class c
//! f_c(p) = 0.95 s_c + 0.05 n_c(p) (1 − s_c)
//! ```
//!
//! where `d̃ = sqrt(d² + ε²) − ε` is a smoothed distance to the box and `n_c`
//! is a seeded sum of sinusoids in (−1, 1). Values stay in [−0.05, 0.95].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Pose;
use crate::scalar::{Scalar, Vec3};
use crate::world::scene::{BoxSpec, SceneSpec};

const PEAK: f64 = 0.95;
const NOISE: f64 = 0.05;
const FALLOFF: f64 = 1.0;
const SMOOTH: f64 = 0.05;
const NOISE_TERMS: usize = 3;
/// Boxes farther than this from the field's region of interest are dropped.
const CULL: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
struct Wave {
    k: [f64; 3],
    phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    /// Boxes grouped by channel (`class − 1`).
    boxes: Vec<Vec<BoxSpec>>,
    noise: Vec<Vec<Wave>>,
}

impl FeatureField {
    /// Field of `frame` in that frame's ego coordinates, keeping boxes that
    /// come within `CULL` meters of the square `|x|, |y| <= half_extent`.
    pub fn build(spec: &SceneSpec, frame: usize, half_extent: f64) -> Self {
        let ego = spec.ego_poses()[frame];
        Self::build_with_pose(spec, frame, &ego, half_extent)
    }

    pub fn build_with_pose(spec: &SceneSpec, frame: usize, ego: &Pose<f64>, half_extent: f64) -> Self {
        let channels = spec.n_classes - 1;
        let mut boxes = vec![Vec::new(); channels];
        let reach = half_extent + CULL;
        for (b, _) in crate::world::render::boxes_in_ego_frame(spec, frame, ego) {
            let (lo, hi) = b.aabb();
            if lo[0] > reach || hi[0] < -reach || lo[1] > reach || hi[1] < -reach {
                continue;
            }
            if b.class >= 1 {
                boxes[b.class - 1].push(b);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
        let noise = (0..channels)
            .map(|_| {
                (0..NOISE_TERMS)
                    .map(|_| {
                        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                        let elev = rng.gen_range(-0.5..0.5f64);
                        let w = std::f64::consts::TAU / rng.gen_range(3.0..6.0);
                        Wave {
                            k: [w * theta.cos() * elev.cos(), w * theta.sin() * elev.cos(), w * elev.sin()],
                            phase: rng.gen_range(0.0..std::f64::consts::TAU),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { boxes, noise }
    }

    pub fn channels(&self) -> usize {
        self.boxes.len()
    }

    /// Feature vector at `p`.
    pub fn sample<T: Scalar>(&self, p: &Vec3<T>) -> Vec<T> {
        let q = [p[0].f64(), p[1].f64(), p[2].f64()];
        (0..self.channels())
            .map(|c| T::of(self.channel(c, &q, None)))
            .collect()
    }

    /// Feature vector and its Jacobian `[channel][axis]` at `p`.
    pub fn sample_with_jacobian<T: Scalar>(&self, p: &Vec3<T>) -> (Vec<T>, Vec<Vec3<T>>) {
        let q = [p[0].f64(), p[1].f64(), p[2].f64()];
        let mut vals = Vec::with_capacity(self.channels());
        let mut jac = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let mut g = [0.0; 3];
            vals.push(T::of(self.channel(c, &q, Some(&mut g))));
            jac.push([T::of(g[0]), T::of(g[1]), T::of(g[2])]);
        }
        (vals, jac)
    }

    fn channel(&self, c: usize, p: &[f64; 3], grad: Option<&mut [f64; 3]>) -> f64 {
        let boxes = &self.boxes[c];
        // per-box activation and its gradient
        let mut act = Vec::with_capacity(boxes.len());
        let mut act_grad = Vec::with_capacity(boxes.len());
        for b in boxes {
            let (a, g) = box_activation(b, p);
            act.push(a);
            act_grad.push(g);
        }
        let n = act.len();
        // prefix/suffix products of (1 − a)
        let mut prefix = vec![1.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] * (1.0 - act[i]);
        }
        let s = 1.0 - prefix[n];
        let mut ds = [0.0; 3];
        if grad.is_some() {
            let mut suffix = 1.0;
            for i in (0..n).rev() {
                let others = prefix[i] * suffix;
                for a in 0..3 {
                    ds[a] += act_grad[i][a] * others;
                }
                suffix *= 1.0 - act[i];
            }
        }
        let mut nz = 0.0;
        let mut dn = [0.0; 3];
        for w in &self.noise[c] {
            let arg = w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase;
            nz += arg.sin();
            let cs = arg.cos();
            for a in 0..3 {
                dn[a] += cs * w.k[a];
            }
        }
        let inv = 1.0 / NOISE_TERMS as f64;
        nz *= inv;
        if let Some(g) = grad {
            for a in 0..3 {
                g[a] = PEAK * ds[a] + NOISE * (dn[a] * inv * (1.0 - s) - nz * ds[a]);
            }
        }
        PEAK * s + NOISE * nz * (1.0 - s)
    }
}

/// `exp(−d̃/FALLOFF)` for the smoothed distance to an oriented box, with gradient.
fn box_activation(b: &BoxSpec, p: &[f64; 3]) -> (f64, [f64; 3]) {
    let q = b.local(p);
    let mut e = [0.0; 3];
    let mut d2 = 0.0;
    for a in 0..3 {
        let over = q[a].abs() - 0.5 * b.size[a];
        if over > 0.0 {
            e[a] = over * q[a].signum();
            d2 += over * over;
        }
    }
    let r = (d2 + SMOOTH * SMOOTH).sqrt();
    let dt = r - SMOOTH;
    let act = (-dt / FALLOFF).exp();
    // d(act)/d(q) = −act/FALLOFF · e / r ; rotate back to the parent frame
    let k = -act / (FALLOFF * r);
    let gq = [k * e[0], k * e[1], k * e[2]];
    let (s, c) = b.yaw.sin_cos();
    (act, [c * gq[0] - s * gq[1], s * gq[0] + c * gq[1], gq[2]])
}
