//! State-conditioned forecasting: queries are partitioned by timestamp and
//! rolled forward one frame at a time. Each step the ego query attends to
//! the accumulated scene, a waypoint is decoded from it, the next group of
//! queries joins the scene, and every accumulated query migrates into the
//! next predicted ego frame by a regressed, clamped offset.

pub mod ego;

pub use ego::{ego_scores, EgoAttention, EgoCache};

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::nn::encoding::{positional_encoding_4d, positional_encoding_backward};
use crate::nn::layers::{Mlp, MlpCache, Module, Param};
use crate::nn::tensor::Tensor;
use crate::perception::waypoint_features;
use crate::scalar::Scalar;

/// Query indices grouped by timestamp, each group in ascending index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenePartition {
    pub groups: Vec<Vec<usize>>,
}

impl ScenePartition {
    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

pub fn partition_by_timestamp(timestamps: &[usize], future_frames: usize) -> Result<ScenePartition> {
    let mut groups = vec![Vec::new(); future_frames + 1];
    for (i, &t) in timestamps.iter().enumerate() {
        if t > future_frames {
            return Err(Error::IndexOutOfRange(format!("timestamp {t} of query {i} exceeds {future_frames}")));
        }
        groups[t].push(i);
    }
    Ok(ScenePartition { groups })
}

/// `[acc; incoming] + PE(positions, timestamps) + 1 qᵀ`. Either encoding
/// term may be skipped by passing `None`.
pub fn scene_augmentation<T: Scalar>(
    accumulated: &Tensor<T>,
    incoming: &Tensor<T>,
    encoding: Option<&Tensor<T>>,
    ego: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut out = accumulated.concat_rows(incoming)?;
    let d = out.cols();
    if ego.cols() != d || ego.rows() != 1 {
        return Err(Error::Shape("ego query width differs from scene queries".into()));
    }
    if let Some(pe) = encoding {
        if pe.rows() != out.rows() || pe.cols() != d {
            return Err(Error::Shape("encoding shape differs from scene queries".into()));
        }
        out.add_assign(pe);
    }
    for i in 0..out.rows() {
        for (o, &q) in out.row_mut(i).iter_mut().zip(ego.row(0)) {
            *o += q;
        }
    }
    Ok(out)
}

/// Soft norm clamp `o · M tanh(‖o‖/M) / ‖o‖`: identity near zero, never
/// longer than `M`.
pub fn clamp_offset<T: Scalar>(o: [T; 3], max: T) -> [T; 3] {
    let n = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
    if n < T::of(1e-12) {
        return o;
    }
    let s = max * (n / max).tanh() / n;
    [o[0] * s, o[1] * s, o[2] * s]
}

fn clamp_offset_backward<T: Scalar>(o: [T; 3], max: T, g: [T; 3]) -> [T; 3] {
    let n = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
    if n < T::of(1e-12) {
        return g;
    }
    let th = (n / max).tanh();
    let s = max * th / n;
    let sech2 = T::one() - th * th;
    // ds/dn
    let ds = (sech2 * n - max * th) / (n * n);
    let og = o[0] * g[0] + o[1] * g[1] + o[2] * g[2];
    let k = ds / n * og;
    [s * g[0] + k * o[0], s * g[1] + k * o[1], s * g[2] + k * o[2]]
}

/// `R(−ψ)` applied to the xy part.
fn rotate_into<T: Scalar>(p: &[T], yaw: T) -> [T; 3] {
    let (s, c) = yaw.sin_cos();
    [c * p[0] + s * p[1], -s * p[0] + c * p[1], p[2]]
}

/// `R(ψ)` applied to the xy part (transpose of [`rotate_into`]).
fn rotate_out<T: Scalar>(p: &[T], yaw: T) -> [T; 3] {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// `pose ∘ delta` on raw `(x, y, yaw)` triples (yaw is not wrapped).
pub fn compose_pose<T: Scalar>(pose: [T; 3], delta: [T; 3]) -> [T; 3] {
    let (s, c) = pose[2].sin_cos();
    [
        pose[0] + c * delta[0] - s * delta[1],
        pose[1] + s * delta[0] + c * delta[1],
        pose[2] + delta[2],
    ]
}

/// Returns `(d pose, d delta)` for gradient `g` on the composed pose.
fn compose_pose_backward<T: Scalar>(pose: [T; 3], delta: [T; 3], g: [T; 3]) -> ([T; 3], [T; 3]) {
    let (s, c) = pose[2].sin_cos();
    let dyaw = g[2] + g[0] * (-s * delta[0] - c * delta[1]) + g[1] * (c * delta[0] - s * delta[1]);
    (
        [g[0], g[1], dyaw],
        [g[0] * c + g[1] * s, -g[0] * s + g[1] * c, g[2]],
    )
}

/// Perception state handed to the rollout. Point rows are query-major.
#[derive(Debug, Clone, Copy)]
pub struct ScfInput<'a, T> {
    pub embeddings: &'a Tensor<T>,
    pub positions: &'a Tensor<T>,
    pub offsets: &'a Tensor<T>,
    pub logits: &'a Tensor<T>,
    pub points_per_query: usize,
    pub timestamps: &'a [usize],
    /// Past waypoints relative to the current pose, current last.
    pub waypoints: &'a [Pose<f64>],
}

/// Prediction for one future frame, expressed in that frame's predicted ego
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastFrame<T> {
    /// Accumulated predicted pose `(x, y, yaw)` relative to the current frame.
    pub pose: [T; 3],
    /// Decoded per-step motion.
    pub delta: [T; 3],
    /// Source query of every accumulated row.
    pub queries: Vec<usize>,
    pub positions: Tensor<T>,
    /// Clamped migration offsets, one per accumulated row.
    pub migration: Tensor<T>,
    pub points: Tensor<T>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScfOutput<T> {
    pub partition: ScenePartition,
    pub frames: Vec<ForecastFrame<T>>,
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    attn: EgoCache<T>,
    waypoint: MlpCache<T>,
    pose_prev: [T; 3],
    new_positions: Tensor<T>,
    n_prev: usize,
    concat_positions: Tensor<T>,
    offset_head: MlpCache<T>,
    raw_offsets: Vec<[T; 3]>,
    rotated: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ScfCache<T> {
    state: Option<MlpCache<T>>,
    initial_positions: Tensor<T>,
    steps: Vec<StepCache<T>>,
}

/// Loss gradients on rollout outputs, one entry per future frame.
#[derive(Debug, Clone)]
pub struct ScfGrad<T> {
    pub points: Vec<Option<Tensor<T>>>,
    pub logits: Vec<Option<Tensor<T>>>,
    pub poses: Vec<[T; 3]>,
}

impl<T: Scalar> ScfGrad<T> {
    pub fn new(frames: usize) -> Self {
        Self {
            points: vec![None; frames],
            logits: vec![None; frames],
            poses: vec![[T::zero(); 3]; frames],
        }
    }
}

/// Gradients on the perception state consumed by the rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScfInputGrad<T> {
    pub embeddings: Tensor<T>,
    pub positions: Tensor<T>,
    pub offsets: Tensor<T>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scf<T> {
    pub ego_init: Param<T>,
    pub state_encoder: Mlp<T>,
    pub attention: EgoAttention<T>,
    pub waypoint_head: Mlp<T>,
    /// Emits a 3D migration offset followed by `C` logit refinements.
    pub offset_head: Mlp<T>,
    pub future_frames: usize,
    pub max_step: f64,
    pub ego_state: bool,
    pub pe4d: bool,
    pub freeze_queries: bool,
}

impl<T: Scalar> Scf<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, n_classes: usize, past_frames: usize, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            ego_init: Param::normal("scf.ego_init", &[1, d], 0.02, rng),
            state_encoder: Mlp::new("scf.state", &[3 * (past_frames + 1), d, d], 0.5, rng),
            attention: EgoAttention::new("scf.ego", d, rng),
            waypoint_head: Mlp::new("scf.waypoint", &[d, d, 3], 0.01, rng),
            offset_head: Mlp::new("scf.offset", &[d, d, 3 + n_classes], 0.01, rng),
            future_frames: cfg.future_frames(),
            max_step: cfg.max_step,
            ego_state: cfg.ego_state,
            pe4d: cfg.pe4d,
            freeze_queries: cfg.freeze_queries,
        }
    }

    fn encode(&self, positions: &Tensor<T>, ts: &[usize], d: usize) -> Result<Option<Tensor<T>>> {
        if self.pe4d {
            Ok(Some(positional_encoding_4d(positions, ts, d)?))
        } else {
            Ok(None)
        }
    }

    pub fn forward(&self, input: &ScfInput<'_, T>) -> Result<(ScfOutput<T>, ScfCache<T>)> {
        let n = input.embeddings.rows();
        let d = input.embeddings.cols();
        let p = input.points_per_query;
        if input.positions.rows() != n || input.timestamps.len() != n {
            return Err(Error::Shape("scf inputs disagree on query count".into()));
        }
        if input.offsets.rows() != n * p || input.logits.rows() != n * p {
            return Err(Error::Shape("scf point rows must be N × points_per_query".into()));
        }
        let c = input.logits.cols();
        if self.offset_head.out_dim() != 3 + c {
            return Err(Error::Shape("offset head width does not match class count".into()));
        }
        let partition = partition_by_timestamp(input.timestamps, self.future_frames)?;
        let mut q = self.ego_init.value.clone();
        let state = if self.ego_state {
            let (s, cache) = self.state_encoder.forward(&waypoint_features(input.waypoints))?;
            q.add_assign(&s);
            Some(cache)
        } else {
            None
        };
        let mut rows = partition.groups[0].clone();
        let mut x = input.positions.select_rows(&rows);
        let initial_positions = x.clone();
        let ts0: Vec<usize> = rows.iter().map(|&i| input.timestamps[i]).collect();
        let mut scene = scene_augmentation(
            &input.embeddings.select_rows(&rows),
            &Tensor::zeros(&[0, d]),
            self.encode(&x, &ts0, d)?.as_ref(),
            &q,
        )?;
        let mut pose = [T::zero(); 3];
        let max = T::of(self.max_step);
        let mut frames = Vec::with_capacity(self.future_frames);
        let mut steps = Vec::with_capacity(self.future_frames);
        for t in 0..self.future_frames {
            let (q_next, attn) = self.attention.forward(&q, &scene, &x)?;
            let (dv, waypoint) = self.waypoint_head.forward(&q_next)?;
            let delta = [dv.row(0)[0], dv.row(0)[1], dv.row(0)[2]];
            let pose_next = compose_pose(pose, delta);
            let incoming = &partition.groups[t + 1];
            let mut new_positions = input.positions.select_rows(incoming);
            if !self.freeze_queries {
                for i in 0..new_positions.rows() {
                    let r = new_positions.row(i);
                    let local = rotate_into(&[r[0] - pose[0], r[1] - pose[1], r[2]], pose[2]);
                    new_positions.row_mut(i).copy_from_slice(&local);
                }
            }
            let n_prev = rows.len();
            rows.extend_from_slice(incoming);
            let concat_positions = x.concat_rows(&new_positions)?;
            let ts_rows: Vec<usize> = rows.iter().map(|&i| input.timestamps[i]).collect();
            let augmented = scene_augmentation(
                &scene,
                &input.embeddings.select_rows(incoming),
                self.encode(&concat_positions, &ts_rows, d)?.as_ref(),
                &q_next,
            )?;
            let (o, offset_head) = self.offset_head.forward(&augmented)?;
            let m = rows.len();
            let mut raw_offsets = Vec::with_capacity(m);
            let mut migration = Tensor::zeros(&[m, 3]);
            let mut x_next = concat_positions.clone();
            for i in 0..m {
                let raw = [o.row(i)[0], o.row(i)[1], o.row(i)[2]];
                raw_offsets.push(raw);
                if self.freeze_queries {
                    continue;
                }
                let dl = clamp_offset(raw, max);
                migration.row_mut(i).copy_from_slice(&dl);
                let xr = concat_positions.row(i);
                let u = [xr[0] + dl[0] - delta[0], xr[1] + dl[1] - delta[1], xr[2] + dl[2]];
                x_next.row_mut(i).copy_from_slice(&rotate_into(&u, delta[2]));
            }
            let mut points = Tensor::zeros(&[m * p, 3]);
            let mut rotated = Tensor::zeros(&[m * p, 3]);
            let mut logits = Tensor::zeros(&[m * p, c]);
            for (r, &qi) in rows.iter().enumerate() {
                let refine = &o.row(r)[3..];
                for k in 0..p {
                    let off = input.offsets.row(qi * p + k);
                    let rot = if self.freeze_queries {
                        [off[0], off[1], off[2]]
                    } else {
                        rotate_into(off, pose_next[2])
                    };
                    rotated.row_mut(r * p + k).copy_from_slice(&rot);
                    for a in 0..3 {
                        points.row_mut(r * p + k)[a] = x_next.row(r)[a] + rot[a];
                    }
                    for ((l, &base), &dz) in logits.row_mut(r * p + k).iter_mut().zip(input.logits.row(qi * p + k)).zip(refine) {
                        *l = base + dz;
                    }
                }
            }
            frames.push(ForecastFrame {
                pose: pose_next,
                delta,
                queries: rows.clone(),
                positions: x_next.clone(),
                migration,
                points,
                logits,
            });
            steps.push(StepCache {
                attn,
                waypoint,
                pose_prev: pose,
                new_positions,
                n_prev,
                concat_positions,
                offset_head,
                raw_offsets,
                rotated,
            });
            q = q_next;
            scene = augmented;
            x = x_next;
            pose = pose_next;
        }
        Ok((
            ScfOutput { partition, frames },
            ScfCache {
                state,
                initial_positions,
                steps,
            },
        ))
    }

    /// Accumulates parameter gradients and returns gradients on the inputs.
    pub fn backward(
        &mut self,
        cache: &ScfCache<T>,
        input: &ScfInput<'_, T>,
        out: &ScfOutput<T>,
        grad: &ScfGrad<T>,
    ) -> Result<ScfInputGrad<T>> {
        let n = input.embeddings.rows();
        let d = input.embeddings.cols();
        let p = input.points_per_query;
        let c = input.logits.cols();
        let max = T::of(self.max_step);
        let mut g_emb = Tensor::zeros(&[n, d]);
        let mut g_pos = Tensor::zeros(&[n, 3]);
        let mut g_off = Tensor::zeros(&[n * p, 3]);
        let mut g_log = Tensor::zeros(&[n * p, c]);
        let n0 = out.partition.groups[0].len();
        // gradients flowing backward into step state (scene, positions, ego query, pose)
        let mut g_scene = Tensor::zeros(&[out.frames.last().map_or(n0, |f| f.queries.len()), d]);
        let mut g_x = Tensor::zeros(&[g_scene.rows(), 3]);
        let mut g_q = Tensor::zeros(&[1, d]);
        let mut g_pose = [T::zero(); 3];
        for t in (0..self.future_frames).rev() {
            let f = &out.frames[t];
            let s = &cache.steps[t];
            let m = f.queries.len();
            for a in 0..3 {
                g_pose[a] += grad.poses[t][a];
            }
            let mut g_refine = Tensor::zeros(&[m, c]);
            if let Some(gp) = &grad.points[t] {
                for (r, &qi) in f.queries.iter().enumerate() {
                    for k in 0..p {
                        let g = gp.row(r * p + k);
                        for a in 0..3 {
                            g_x.row_mut(r)[a] += g[a];
                        }
                        let dst = g_off.row_mut(qi * p + k);
                        if self.freeze_queries {
                            for a in 0..3 {
                                dst[a] += g[a];
                            }
                        } else {
                            let back = rotate_out(g, f.pose[2]);
                            for a in 0..3 {
                                dst[a] += back[a];
                            }
                            let rot = s.rotated.row(r * p + k);
                            g_pose[2] += g[0] * rot[1] - g[1] * rot[0];
                        }
                    }
                }
            }
            if let Some(gl) = &grad.logits[t] {
                for (r, &qi) in f.queries.iter().enumerate() {
                    for k in 0..p {
                        let g = gl.row(r * p + k);
                        for (o, &v) in g_log.row_mut(qi * p + k).iter_mut().zip(g) {
                            *o += v;
                        }
                        for (o, &v) in g_refine.row_mut(r).iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }
            // migration
            let mut g_delta = [T::zero(); 3];
            let mut g_concat = Tensor::zeros(&[m, 3]);
            let mut g_o = Tensor::zeros(&[m, 3 + c]);
            for r in 0..m {
                let g = g_x.row(r);
                if self.freeze_queries {
                    g_concat.row_mut(r).copy_from_slice(g);
                    continue;
                }
                let xn = f.positions.row(r);
                g_delta[2] += g[0] * xn[1] - g[1] * xn[0];
                let du = rotate_out(g, f.delta[2]);
                g_delta[0] -= du[0];
                g_delta[1] -= du[1];
                g_concat.row_mut(r).copy_from_slice(&du);
                let gr = clamp_offset_backward(s.raw_offsets[r], max, du);
                g_o.row_mut(r)[..3].copy_from_slice(&gr);
            }
            for r in 0..m {
                g_o.row_mut(r)[3..].copy_from_slice(g_refine.row(r));
            }
            let mut g_aug = g_scene.clone();
            g_aug.add_assign(&self.offset_head.backward(&s.offset_head, &g_o)?);
            // augmentation
            for r in 0..m {
                for (o, &v) in g_q.row_mut(0).iter_mut().zip(g_aug.row(r)) {
                    *o += v;
                }
            }
            if self.pe4d {
                g_concat.add_assign(&positional_encoding_backward(&s.concat_positions, &g_aug)?);
            }
            let incoming = &f.queries[s.n_prev..];
            let mut g_pose_prev = [T::zero(); 3];
            for (j, &qi) in incoming.iter().enumerate() {
                let r = s.n_prev + j;
                for (o, &v) in g_emb.row_mut(qi).iter_mut().zip(g_aug.row(r)) {
                    *o += v;
                }
                let g = g_concat.row(r);
                if self.freeze_queries {
                    for a in 0..3 {
                        g_pos.row_mut(qi)[a] += g[a];
                    }
                    continue;
                }
                let local = s.new_positions.row(j);
                let back = rotate_out(g, s.pose_prev[2]);
                for a in 0..3 {
                    g_pos.row_mut(qi)[a] += back[a];
                }
                g_pose_prev[0] -= back[0];
                g_pose_prev[1] -= back[1];
                g_pose_prev[2] += g[0] * local[1] - g[1] * local[0];
            }
            let (gp, gd) = compose_pose_backward(s.pose_prev, f.delta, g_pose);
            for a in 0..3 {
                g_pose_prev[a] += gp[a];
                g_delta[a] += gd[a];
            }
            let g_dv = Tensor::from_vec(&[1, 3], g_delta.to_vec())?;
            g_q.add_assign(&self.waypoint_head.backward(&s.waypoint, &g_dv)?);
            let (dq, dscene, dx) = self.attention.backward(&s.attn, &g_q)?;
            let n_prev = s.n_prev;
            g_scene = Tensor::zeros(&[n_prev, d]);
            g_x = Tensor::zeros(&[n_prev, 3]);
            for r in 0..n_prev {
                for a in 0..d {
                    g_scene.row_mut(r)[a] = g_aug.row(r)[a] + dscene.row(r)[a];
                }
                for a in 0..3 {
                    g_x.row_mut(r)[a] = g_concat.row(r)[a] + dx.row(r)[a];
                }
            }
            g_q = dq;
            g_pose = g_pose_prev;
        }
        // bootstrap: scene⁰ = E[G0] + PE(X⁰) + q⁰
        let g0 = &out.partition.groups[0];
        let mut gq0 = g_q.clone();
        for r in 0..g0.len() {
            for (o, &v) in gq0.row_mut(0).iter_mut().zip(g_scene.row(r)) {
                *o += v;
            }
        }
        if self.pe4d {
            g_x.add_assign(&positional_encoding_backward(&cache.initial_positions, &g_scene)?);
        }
        for (r, &qi) in g0.iter().enumerate() {
            for (o, &v) in g_emb.row_mut(qi).iter_mut().zip(g_scene.row(r)) {
                *o += v;
            }
            for a in 0..3 {
                g_pos.row_mut(qi)[a] += g_x.row(r)[a];
            }
        }
        self.ego_init.grad.add_assign(&gq0);
        if let Some(sc) = &cache.state {
            self.state_encoder.backward(sc, &gq0)?;
        }
        Ok(ScfInputGrad {
            embeddings: g_emb,
            positions: g_pos,
            offsets: g_off,
            logits: g_log,
        })
    }
}

impl<T: Scalar> Module<T> for Scf<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.ego_init);
        self.state_encoder.visit(f);
        self.attention.visit(f);
        self.waypoint_head.visit(f);
        self.offset_head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.ego_init);
        self.state_encoder.visit_mut(f);
        self.attention.visit_mut(f);
        self.waypoint_head.visit_mut(f);
        self.offset_head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, GradCheckConfig};
    use crate::nn::layers::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        emb: Tensor<f64>,
        pos: Tensor<f64>,
        off: Tensor<f64>,
        logits: Tensor<f64>,
        ts: Vec<usize>,
        wps: Vec<Pose<f64>>,
    }

    const P: usize = 2;
    const C: usize = 6;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_queries: 12,
            query_split: vec![4, 3, 3, 2],
            embed_dim: 16,
            n_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let ts = vec![0, 1, 0, 2, 3, 0, 1, 2, 0, 1, 3, 2];
        Fixture {
            emb: Tensor::from_fn(&[n, 16], |_| rng.gen_range(-1.0..1.0)),
            pos: Tensor::from_fn(&[n, 3], |_| rng.gen_range(-3.0..3.0)),
            off: Tensor::from_fn(&[n * P, 3], |_| rng.gen_range(-0.5..0.5)),
            logits: Tensor::from_fn(&[n * P, C], |_| rng.gen_range(-2.0..2.0)),
            ts,
            wps: vec![Pose::new(-2.0, 0.1, -0.05, -2), Pose::new(-1.0, 0.02, -0.02, -1), Pose::identity(0)],
        }
    }

    fn input(f: &Fixture) -> ScfInput<'_, f64> {
        ScfInput {
            embeddings: &f.emb,
            positions: &f.pos,
            offsets: &f.off,
            logits: &f.logits,
            points_per_query: P,
            timestamps: &f.ts,
            waypoints: &f.wps,
        }
    }

    /// Heads scaled up so migration and motion are far from zero.
    fn model(cfg: &ModelConfig, seed: u64) -> Scf<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Scf::new(cfg, C, 2, &mut rng);
        m.waypoint_head.layers[1] = Linear::new("w", 16, 3, 1.0, &mut rng);
        m.offset_head.layers[1] = Linear::new("o", 16, 3 + C, 1.5, &mut rng);
        m
    }

    #[test]
    fn partition_examples() {
        let p = partition_by_timestamp(&[0, 0, 0], 2).unwrap();
        assert_eq!(p.groups, vec![vec![0, 1, 2], vec![], vec![]]);
        let ts = crate::perception::timestamps_from_split(&[90, 10, 10, 10, 10]);
        let p = partition_by_timestamp(&ts, 4).unwrap();
        assert_eq!(p.sizes(), vec![90, 10, 10, 10, 10]);
        assert_eq!(p, partition_by_timestamp(&ts, 4).unwrap());
        assert!(partition_by_timestamp(&[0, 5], 4).is_err());
        let p = partition_by_timestamp(&[1, 0, 1, 0], 1).unwrap();
        assert_eq!(p.groups, vec![vec![1, 3], vec![0, 2]]);
    }

    #[test]
    fn augmentation_examples() {
        let q0 = Tensor::from_fn(&[3, 8], |i| i as f64);
        let pe = Tensor::from_fn(&[3, 8], |i| 0.5 * i as f64);
        let ego = Tensor::from_fn(&[1, 8], |i| -(i as f64));
        let out = scene_augmentation(&Tensor::zeros(&[0, 8]), &q0, Some(&pe), &ego).unwrap();
        for r in 0..3 {
            for a in 0..8 {
                assert_eq!(out.row(r)[a], q0.row(r)[a] + pe.row(r)[a] + ego.row(0)[a]);
            }
        }
        let zero = Tensor::zeros(&[1, 8]);
        let plain = scene_augmentation(&q0, &q0, None, &zero).unwrap();
        assert_eq!(plain, q0.concat_rows(&q0).unwrap());
        let big = scene_augmentation(&Tensor::zeros(&[90, 8]), &Tensor::zeros(&[10, 8]), None, &zero).unwrap();
        assert_eq!(big.rows(), 100);
        assert!(scene_augmentation(&q0, &q0, None, &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn clamp_is_bounded_and_smooth() {
        assert_eq!(clamp_offset([0.0; 3], 5.0), [0.0; 3]);
        let small = clamp_offset([0.01f64, 0.0, 0.0], 5.0);
        assert!((small[0] - 0.01).abs() < 1e-6);
        let big = clamp_offset([300.0f64, -400.0, 0.0], 5.0);
        let n = (big[0] * big[0] + big[1] * big[1]).sqrt();
        assert!(n <= 5.0 && n > 4.99);
        let o = [1.3, -4.2, 0.7];
        let g = [0.3, 0.9, -1.1];
        let an = clamp_offset_backward(o, 5.0, g);
        let rep = check_gradient(
            |x| {
                let c = clamp_offset([x[0], x[1], x[2]], 5.0);
                c[0] * g[0] + c[1] * g[1] + c[2] * g[2]
            },
            &o,
            &an,
            &GradCheckConfig::with_tolerance(1e-7),
        );
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn compose_backward_matches_differences() {
        let pose = [0.4, -1.2, 0.3];
        let delta = [1.5, 0.2, -0.1];
        let g = [0.7, -0.4, 1.1];
        let (gp, gd) = compose_pose_backward(pose, delta, g);
        let f = |p: [f64; 3], dl: [f64; 3]| {
            let c = compose_pose(p, dl);
            c[0] * g[0] + c[1] * g[1] + c[2] * g[2]
        };
        let cfg = GradCheckConfig::with_tolerance(1e-7);
        assert!(check_gradient(|x| f([x[0], x[1], x[2]], delta), &pose, &gp, &cfg).passed());
        assert!(check_gradient(|x| f(pose, [x[0], x[1], x[2]]), &delta, &gd, &cfg).passed());
    }

    #[test]
    fn no_future_frames_gives_no_output() {
        let c = ModelConfig {
            n_queries: 12,
            query_split: vec![12],
            embed_dim: 16,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let mut fx = fixture(1);
        fx.ts = vec![0; 12];
        let m = model(&c, 1);
        let (out, _) = m.forward(&input(&fx)).unwrap();
        assert!(out.frames.is_empty());
    }

    #[test]
    fn zero_heads_leave_queries_in_place() {
        let fx = fixture(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Scf::new(&cfg(), C, 2, &mut rng);
        m.waypoint_head.layers[1] = Linear::zeros("w", 16, 3);
        m.offset_head.layers[1] = Linear::zeros("o", 16, 3 + C);
        let (out, _) = m.forward(&input(&fx)).unwrap();
        for f in &out.frames {
            assert_eq!(f.delta, [0.0; 3]);
            assert_eq!(f.pose, [0.0; 3]);
            assert!(f.migration.data().iter().all(|&v| v == 0.0));
            for (r, &qi) in f.queries.iter().enumerate() {
                assert_eq!(f.positions.row(r), fx.pos.row(qi));
                for k in 0..P {
                    assert_eq!(f.logits.row(r * P + k), fx.logits.row(qi * P + k));
                }
            }
        }
    }

    #[test]
    fn accumulated_size_follows_groups() {
        let fx = fixture(3);
        let m = model(&cfg(), 3);
        let (out, _) = m.forward(&input(&fx)).unwrap();
        let sizes = out.partition.sizes();
        assert_eq!(out.frames.len(), 3);
        for (t, f) in out.frames.iter().enumerate() {
            let expect: usize = sizes[..=t + 1].iter().sum();
            assert_eq!(f.queries.len(), expect);
            assert_eq!(f.points.rows(), expect * P);
        }
    }

    #[test]
    fn migration_respects_max_step() {
        let fx = fixture(4);
        let mut m = model(&cfg(), 4);
        m.offset_head.layers[1].weight.value.scale(1e3);
        let (out, _) = m.forward(&input(&fx)).unwrap();
        for f in &out.frames {
            for r in 0..f.migration.rows() {
                let v = f.migration.row(r);
                assert!((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() <= 5.0 + 1e-12);
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let fx = fixture(5);
        let a = model(&cfg(), 5).forward(&input(&fx)).unwrap().0;
        let b = model(&cfg(), 5).forward(&input(&fx)).unwrap().0;
        assert_eq!(a, b);
    }

    fn probe(out: &ScfOutput<f64>, seed: u64) -> ScfGrad<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ScfGrad::new(out.frames.len());
        for (t, f) in out.frames.iter().enumerate() {
            g.points[t] = Some(Tensor::from_fn(f.points.shape(), |_| rng.gen_range(-1.0..1.0)));
            g.logits[t] = Some(Tensor::from_fn(f.logits.shape(), |_| rng.gen_range(-1.0..1.0)));
            g.poses[t] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        }
        g
    }

    fn evaluate(out: &ScfOutput<f64>, g: &ScfGrad<f64>) -> f64 {
        let mut s = 0.0;
        for (t, f) in out.frames.iter().enumerate() {
            let dot = |a: &Tensor<f64>, b: &Option<Tensor<f64>>| -> f64 {
                a.data().iter().zip(b.as_ref().unwrap().data()).map(|(x, y)| x * y).sum()
            };
            s += dot(&f.points, &g.points[t]) + dot(&f.logits, &g.logits[t]);
            s += (0..3).map(|a| f.pose[a] * g.poses[t][a]).sum::<f64>();
        }
        s
    }

    fn rollout_gradcheck(cfg: &ModelConfig) {
        let fx = fixture(6);
        let mut m = model(cfg, 6);
        let (out, cache) = m.forward(&input(&fx)).unwrap();
        let g = probe(&out, 7);
        m.zero_grad();
        let gi = m.backward(&cache, &input(&fx), &out, &g).unwrap();
        let gc = GradCheckConfig {
            tolerance: 1e-4,
            max_entries: 300,
            ..GradCheckConfig::default()
        };
        let x0 = m.flat_values();
        let an = m.flat_grads();
        let mut pm = m.clone();
        let rep = check_gradient(
            |x| {
                pm.set_flat_values(x);
                evaluate(&pm.forward(&input(&fx)).unwrap().0, &g)
            },
            &x0,
            &an,
            &gc,
        );
        assert!(rep.passed(), "params {:?}", &rep.failures[..rep.failures.len().min(4)]);
        let fx_ref = &fx;
        let with = |which: usize, x: &[f64]| -> f64 {
            let mut f2 = Fixture {
                emb: fx_ref.emb.clone(),
                pos: fx_ref.pos.clone(),
                off: fx_ref.off.clone(),
                logits: fx_ref.logits.clone(),
                ts: fx_ref.ts.clone(),
                wps: fx_ref.wps.clone(),
            };
            let t = match which {
                0 => &mut f2.emb,
                1 => &mut f2.pos,
                2 => &mut f2.off,
                _ => &mut f2.logits,
            };
            t.data_mut().copy_from_slice(x);
            evaluate(&m.forward(&input(&f2)).unwrap().0, &g)
        };
        for (which, (x, a)) in [
            (&fx.emb, &gi.embeddings),
            (&fx.pos, &gi.positions),
            (&fx.off, &gi.offsets),
            (&fx.logits, &gi.logits),
        ]
        .into_iter()
        .enumerate()
        {
            let rep = check_gradient(|v| with(which, v), x.data(), a.data(), &gc);
            assert!(rep.passed(), "input {which}: {:?}", &rep.failures[..rep.failures.len().min(4)]);
        }
    }

    #[test]
    fn rollout_gradient_matches_finite_differences() {
        rollout_gradcheck(&cfg());
    }

    #[test]
    fn ablated_rollout_gradient_matches_finite_differences() {
        let mut c = cfg();
        c.pe4d = false;
        c.ego_state = false;
        rollout_gradcheck(&c);
        let mut c = cfg();
        c.freeze_queries = true;
        rollout_gradcheck(&c);
    }
}
