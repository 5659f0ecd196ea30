//! Sparse-query perception: learnable 4D queries, ego-conditioned scaling of
//! their initial positions, and a stack of decoder layers that emit growing
//! point sets per query.

pub mod layer;

pub use layer::{sample_features, update_query_positions, DecoderLayer, LayerCache, LayerOutput};

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::nn::layers::{Mlp, MlpCache, Module, Param};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;
use crate::world::FeatureField;

/// Waypoint translations enter the scaling MLP divided by this (meters).
pub const WAYPOINT_SCALE: f64 = 5.0;

/// Learnable queries plus their (externally scheduled) timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet<T> {
    pub embeddings: Param<T>,
    pub base_positions: Param<T>,
    pub timestamps: Vec<usize>,
}

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: usize, b: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

/// `n` Halton points (bases 2, 3, 5) spread over the box `[lo, hi)`.
pub fn halton_lattice(n: usize, lo: [f64; 3], hi: [f64; 3]) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let u = [radical_inverse(i + 1, 2), radical_inverse(i + 1, 3), radical_inverse(i + 1, 5)];
            [0, 1, 2].map(|a| lo[a] + u[a] * (hi[a] - lo[a]))
        })
        .collect()
}

impl<T: Scalar> QuerySet<T> {
    /// Embeddings ~ N(0, 0.02²), positions on a Halton lattice, timestamps
    /// filled group by group in index order.
    pub fn new<R: Rng>(split: &[usize], dim: usize, extent: ([f64; 3], [f64; 3]), rng: &mut R) -> Self {
        let n: usize = split.iter().sum();
        let lattice = halton_lattice(n, extent.0, extent.1);
        let pos = Tensor::from_fn(&[n, 3], |k| T::of(lattice[k / 3][k % 3]));
        Self {
            embeddings: Param::normal("queries.embeddings", &[n, dim], 0.02, rng),
            base_positions: Param::new("queries.positions", pos),
            timestamps: timestamps_from_split(split),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// `[0; s0] ++ [1; s1] ++ ...`
pub fn timestamps_from_split(split: &[usize]) -> Vec<usize> {
    split.iter().enumerate().flat_map(|(t, &s)| std::iter::repeat(t).take(s)).collect()
}

impl<T: Scalar> Module<T> for QuerySet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.embeddings);
        f(&self.base_positions);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.embeddings);
        f(&mut self.base_positions);
    }
}

/// Flattens `(x/s, y/s, yaw)` of each waypoint into one row.
pub fn waypoint_features<T: Scalar>(waypoints: &[Pose<f64>]) -> Tensor<T> {
    let row: Vec<T> = waypoints
        .iter()
        .flat_map(|w| [T::of(w.x / WAYPOINT_SCALE), T::of(w.y / WAYPOINT_SCALE), T::of(w.yaw)])
        .collect();
    let n = row.len();
    Tensor::from_vec(&[1, n], row).expect("row length matches")
}

/// `p'_i = γ ⊙ p_i` for every row.
pub fn adaptive_scaling<T: Scalar>(gamma: [T; 3], base: &Tensor<T>) -> Result<Tensor<T>> {
    if base.cols() != 3 {
        return Err(Error::Shape("positions must be [N, 3]".into()));
    }
    let mut out = base.clone();
    for i in 0..out.rows() {
        for (v, g) in out.row_mut(i).iter_mut().zip(gamma) {
            *v *= g;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rap<T> {
    pub queries: QuerySet<T>,
    /// Predicts `log γ` from flattened past waypoints.
    pub scaling: Mlp<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub past_frames: usize,
    pub freeze_scaling: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RapOutput<T> {
    pub gamma: [T; 3],
    /// Scaled initial positions `P0'`.
    pub initial: Tensor<T>,
    pub layers: Vec<LayerOutput<T>>,
}

impl<T: Scalar> RapOutput<T> {
    pub fn last(&self) -> &LayerOutput<T> {
        self.layers.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct RapCache<T> {
    scaling: Option<MlpCache<T>>,
    gamma: [T; 3],
    layers: Vec<LayerCache<T>>,
}

/// Loss gradients on every output of [`Rap::forward`]. `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct RapGrad<T> {
    pub initial: Option<Tensor<T>>,
    pub points: Vec<Option<Tensor<T>>>,
    pub logits: Vec<Option<Tensor<T>>>,
    /// Offsets of the final layer only (not through its query positions).
    pub final_offsets: Option<Tensor<T>>,
    pub final_embeddings: Option<Tensor<T>>,
    pub final_positions: Option<Tensor<T>>,
}

impl<T: Scalar> RapGrad<T> {
    pub fn new(n_layers: usize) -> Self {
        Self {
            initial: None,
            points: vec![None; n_layers],
            logits: vec![None; n_layers],
            final_offsets: None,
            final_embeddings: None,
            final_positions: None,
        }
    }
}

fn add_opt<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(s) => s.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> RapGrad<T> {
    pub fn add_initial(&mut self, g: Tensor<T>) {
        add_opt(&mut self.initial, g);
    }
    pub fn add_points(&mut self, layer: usize, g: Tensor<T>) {
        add_opt(&mut self.points[layer], g);
    }
    pub fn add_logits(&mut self, layer: usize, g: Tensor<T>) {
        add_opt(&mut self.logits[layer], g);
    }
    pub fn add_final_offsets(&mut self, g: Tensor<T>) {
        add_opt(&mut self.final_offsets, g);
    }
    pub fn add_final_embeddings(&mut self, g: Tensor<T>) {
        add_opt(&mut self.final_embeddings, g);
    }
    pub fn add_final_positions(&mut self, g: Tensor<T>) {
        add_opt(&mut self.final_positions, g);
    }
}

impl<T: Scalar> Rap<T> {
    pub fn new<R: Rng>(
        cfg: &ModelConfig,
        n_classes: usize,
        past_frames: usize,
        extent: ([f64; 3], [f64; 3]),
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_queries;
        let d = cfg.embed_dim;
        let queries = QuerySet::new(&cfg.query_split, d, extent, rng);
        let scaling = Mlp::new("rap.scaling", &[3 * (past_frames + 1), 32, 3], 0.01, rng);
        let layers = cfg
            .points_ladder
            .iter()
            .enumerate()
            .map(|(l, &p)| {
                DecoderLayer::new(&format!("rap.layer{l}"), d, cfg.n_heads, n, n_classes - 1, n_classes, p, cfg.tau_mode, rng)
            })
            .collect();
        Ok(Self {
            queries,
            scaling,
            layers,
            past_frames,
            freeze_scaling: cfg.freeze_scaling,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn points_ladder(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.points_out).collect()
    }

    fn gamma(&self, waypoints: &[Pose<f64>]) -> Result<([T; 3], Option<MlpCache<T>>)> {
        if waypoints.len() != self.past_frames + 1 {
            return Err(Error::LengthMismatch {
                what: "past waypoints",
                left: waypoints.len(),
                right: self.past_frames + 1,
            });
        }
        if self.freeze_scaling {
            return Ok(([T::one(); 3], None));
        }
        let (s, cache) = self.scaling.forward(&waypoint_features(waypoints))?;
        let r = s.row(0);
        Ok(([r[0].exp(), r[1].exp(), r[2].exp()], Some(cache)))
    }

    pub fn forward(
        &self,
        waypoints: &[Pose<f64>],
        field: &FeatureField,
        temporal_mask: bool,
    ) -> Result<(RapOutput<T>, RapCache<T>)> {
        let (gamma, scaling) = self.gamma(waypoints)?;
        let initial = adaptive_scaling(gamma, &self.queries.base_positions.value)?;
        let mut e = self.queries.embeddings.value.clone();
        let mut x = initial.clone();
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (o, c) = layer.forward(&e, &x, &self.queries.timestamps, temporal_mask, field)?;
            e = o.embeddings.clone();
            x = o.positions.clone();
            outs.push(o);
            caches.push(c);
        }
        Ok((
            RapOutput {
                gamma,
                initial,
                layers: outs,
            },
            RapCache {
                scaling,
                gamma,
                layers: caches,
            },
        ))
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&mut self, cache: &RapCache<T>, out: &RapOutput<T>, grad: &RapGrad<T>) -> Result<()> {
        let n = self.n_queries();
        let d = self.queries.embeddings.value.cols();
        let n_layers = self.layers.len();
        let mut de = grad.final_embeddings.clone().unwrap_or_else(|| Tensor::zeros(&[n, d]));
        let mut dx = grad.final_positions.clone().unwrap_or_else(|| Tensor::zeros(&[n, 3]));
        for l in (0..n_layers).rev() {
            let o = &out.layers[l];
            let zp = Tensor::zeros(o.points.shape());
            let zl = Tensor::zeros(o.logits.shape());
            let dp = grad.points[l].as_ref().unwrap_or(&zp);
            let dl = grad.logits[l].as_ref().unwrap_or(&zl);
            let doff = if l + 1 == n_layers { grad.final_offsets.as_ref() } else { None };
            let (de_in, dx_in) = self.layers[l].backward(&cache.layers[l], dp, doff, dl, &de, &dx)?;
            de = de_in;
            dx = dx_in;
        }
        self.queries.embeddings.grad.add_assign(&de);
        if let Some(g) = &grad.initial {
            dx.add_assign(g);
        }
        // P0' = γ ⊙ P0
        let base = &self.queries.base_positions.value;
        let mut dgamma = [T::zero(); 3];
        let mut dbase = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            for a in 0..3 {
                dbase.row_mut(i)[a] = cache.gamma[a] * dx.row(i)[a];
                dgamma[a] += base.row(i)[a] * dx.row(i)[a];
            }
        }
        self.queries.base_positions.grad.add_assign(&dbase);
        if let Some(sc) = &cache.scaling {
            let ds = Tensor::from_vec(&[1, 3], (0..3).map(|a| dgamma[a] * cache.gamma[a]).collect())?;
            self.scaling.backward(sc, &ds)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Rap<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.queries.visit(f);
        self.scaling.visit(f);
        self.layers.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.queries.visit_mut(f);
        self.scaling.visit_mut(f);
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, GradCheckConfig};
    use crate::world::{SceneSequence, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EXTENT: ([f64; 3], [f64; 3]) = ([-12.0, -12.0, -1.0], [12.0, 12.0, 3.0]);

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_queries: 32,
            query_split: vec![16, 8, 8],
            n_layers: 2,
            points_ladder: vec![2, 4],
            embed_dim: 16,
            n_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn scene() -> SceneSequence {
        SceneSequence::generate(11, &WorldConfig::default()).unwrap()
    }

    fn model(cfg: &ModelConfig, seed: u64) -> Rap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Rap::new(cfg, 6, 2, EXTENT, &mut rng).unwrap();
        // spread queries so the layers see distinct positions and timestamps
        m.queries.timestamps = timestamps_from_split(&cfg.query_split);
        m
    }

    fn random_like(t: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(t.shape(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Random linear functional of every output, as a gradient.
    fn probe(out: &RapOutput<f64>, seed: u64) -> RapGrad<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = RapGrad::new(out.layers.len());
        g.add_initial(random_like(&out.initial, &mut rng));
        for (l, o) in out.layers.iter().enumerate() {
            g.add_points(l, random_like(&o.points, &mut rng));
            g.add_logits(l, random_like(&o.logits, &mut rng));
        }
        let last = out.last();
        g.add_final_offsets(random_like(&last.offsets, &mut rng));
        g.add_final_embeddings(random_like(&last.embeddings, &mut rng));
        g.add_final_positions(random_like(&last.positions, &mut rng));
        g
    }

    fn dot(a: &Tensor<f64>, b: &Option<Tensor<f64>>) -> f64 {
        b.as_ref().map_or(0.0, |b| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
    }

    fn evaluate(out: &RapOutput<f64>, g: &RapGrad<f64>) -> f64 {
        let mut s = dot(&out.initial, &g.initial);
        for (l, o) in out.layers.iter().enumerate() {
            s += dot(&o.points, &g.points[l]) + dot(&o.logits, &g.logits[l]);
        }
        let last = out.last();
        s + dot(&last.offsets, &g.final_offsets)
            + dot(&last.embeddings, &g.final_embeddings)
            + dot(&last.positions, &g.final_positions)
    }

    #[test]
    fn scaling_examples() {
        let p = Tensor::from_vec(&[1, 3], vec![3.0, 1.0, 0.5]).unwrap();
        assert_eq!(adaptive_scaling([1.0; 3], &p).unwrap(), p);
        assert_eq!(adaptive_scaling([2.0, 1.0, 1.0], &p).unwrap().data(), &[6.0, 1.0, 0.5]);
    }

    #[test]
    fn wrong_waypoint_count_is_rejected() {
        let seq = scene();
        let m = model(&small_cfg(), 1);
        let wps = vec![Pose::identity(0); 2];
        assert!(m.forward(&wps, &seq.field(), true).is_err());
    }

    #[test]
    fn query_position_update_examples() {
        let one = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(update_query_positions(&one, 1).unwrap(), one);
        let pair = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 4.0, 1.0]).unwrap();
        assert_eq!(update_query_positions(&pair, 2).unwrap().data(), &[0.0, 3.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Tensor::from_fn(&[5 * 4, 3], |_| rng.gen_range(-5.0..5.0));
        let got = update_query_positions(&pts, 4).unwrap();
        for i in 0..5 {
            for a in 0..3 {
                let mean = (0..4).map(|k| pts.row(i * 4 + k)[a]).sum::<f64>() / 4.0;
                assert!((got.row(i)[a] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ladder_counts_and_position_means() {
        let seq = scene();
        let cfg = small_cfg();
        let m = model(&cfg, 2);
        let (out, _) = m.forward(&seq.past_waypoints(), &seq.field(), true).unwrap();
        assert_eq!(out.layers.len(), 2);
        for (o, &p) in out.layers.iter().zip(&cfg.points_ladder) {
            assert_eq!(o.points.rows(), 32 * p);
            assert_eq!(o.logits.shape(), &[32 * p, 6]);
            assert_eq!(o.positions, update_query_positions(&o.points, p).unwrap());
        }
    }

    #[test]
    fn single_query_single_point() {
        let seq = scene();
        let cfg = ModelConfig {
            n_queries: 1,
            query_split: vec![1],
            n_layers: 1,
            points_ladder: vec![1],
            embed_dim: 8,
            n_heads: 1,
            ..ModelConfig::default()
        };
        let m = model(&cfg, 4);
        let (out, _) = m.forward(&seq.past_waypoints(), &seq.field(), true).unwrap();
        assert_eq!(out.last().points.rows(), 1);
        assert_eq!(out.last().positions, out.last().points);
    }

    #[test]
    fn replay_is_bit_identical() {
        let seq = scene();
        let a = model(&small_cfg(), 5).forward(&seq.past_waypoints(), &seq.field(), true).unwrap().0;
        let b = model(&small_cfg(), 5).forward(&seq.past_waypoints(), &seq.field(), true).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let seq = scene();
        let field = seq.field();
        let wps = seq.past_waypoints();
        let mut m = model(&small_cfg(), 6);
        let (out, cache) = m.forward(&wps, &field, true).unwrap();
        let g = probe(&out, 99);
        m.zero_grad();
        m.backward(&cache, &out, &g).unwrap();
        let analytic = m.flat_grads();
        let x0 = m.flat_values();
        let mut probe_model = m.clone();
        let cfg = GradCheckConfig {
            tolerance: 1e-4,
            max_entries: 300,
            seed: 7,
            ..GradCheckConfig::default()
        };
        let rep = check_gradient(
            |x| {
                probe_model.set_flat_values(x);
                let (o, _) = probe_model.forward(&wps, &field, true).unwrap();
                evaluate(&o, &g)
            },
            &x0,
            &analytic,
            &cfg,
        );
        assert!(rep.passed(), "max rel err {} failures {:?}", rep.max_rel_err, &rep.failures[..rep.failures.len().min(5)]);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let seq = scene();
        let mut m = model(&small_cfg(), 7);
        let (out, cache) = m.forward(&seq.past_waypoints(), &seq.field(), true).unwrap();
        let g = probe(&out, 1);
        m.backward(&cache, &out, &g).unwrap();
        m.visit(&mut |p| {
            let norm: f64 = p.grad.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{} has zero gradient", p.name);
        });
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let seq = scene();
        let field = seq.field();
        let cfg = small_cfg();
        let m = model(&cfg, 8);
        let n = cfg.n_queries;
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let mut pm = m.clone();
        pm.queries.embeddings.value = m.queries.embeddings.value.select_rows(&perm);
        pm.queries.base_positions.value = m.queries.base_positions.value.select_rows(&perm);
        pm.queries.timestamps = perm.iter().map(|&i| m.queries.timestamps[i]).collect();
        for (pl, l) in pm.layers.iter_mut().zip(&m.layers) {
            let tau = &l.attn.tau_raw.value;
            pl.attn.tau_raw.value = Tensor::from_fn(tau.shape(), |k| tau.row(k / n)[perm[k % n]]);
        }
        let (a, _) = m.forward(&seq.past_waypoints(), &field, true).unwrap();
        let (b, _) = pm.forward(&seq.past_waypoints(), &field, true).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let p = la.points_per_query;
            for (new, &old) in perm.iter().enumerate() {
                for k in 0..p {
                    for (x, y) in la.points.row(old * p + k).iter().zip(lb.points.row(new * p + k)) {
                        assert!((x - y).abs() < 1e-9);
                    }
                    for (x, y) in la.logits.row(old * p + k).iter().zip(lb.logits.row(new * p + k)) {
                        assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn later_queries_never_affect_earlier_ones() {
        let seq = scene();
        let field = seq.field();
        let m = model(&small_cfg(), 9);
        let (a, _) = m.forward(&seq.past_waypoints(), &field, true).unwrap();
        let mut pm = m.clone();
        let ts = m.queries.timestamps.clone();
        for (i, &t) in ts.iter().enumerate() {
            if t > 0 {
                pm.queries.embeddings.value.row_mut(i).fill(0.0);
                pm.queries.base_positions.value.row_mut(i).copy_from_slice(&[5.0, -3.0, 1.0]);
            }
        }
        let (b, _) = pm.forward(&seq.past_waypoints(), &field, true).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let p = la.points_per_query;
            for i in (0..ts.len()).filter(|&i| ts[i] == 0) {
                for k in 0..p {
                    assert_eq!(la.points.row(i * p + k), lb.points.row(i * p + k));
                    assert_eq!(la.logits.row(i * p + k), lb.logits.row(i * p + k));
                }
                assert_eq!(la.embeddings.row(i), lb.embeddings.row(i));
            }
        }
    }

    #[test]
    fn frozen_scaling_ignores_waypoints() {
        let seq = scene();
        let field = seq.field();
        let mut cfg = small_cfg();
        cfg.freeze_scaling = true;
        let m = model(&cfg, 10);
        let still = vec![Pose::identity(0); 3];
        let fast: Vec<Pose<f64>> = (0..3).map(|k| Pose::new(-10.0 * (2 - k) as f64, 0.0, 0.0, k as i64 - 2)).collect();
        let (a, _) = m.forward(&still, &field, true).unwrap();
        let (b, _) = m.forward(&fast, &field, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gamma, [1.0; 3]);
        let mut cfg = small_cfg();
        cfg.freeze_scaling = false;
        let m = model(&cfg, 10);
        let (a, _) = m.forward(&still, &field, true).unwrap();
        let (b, _) = m.forward(&fast, &field, true).unwrap();
        assert_ne!(a.gamma, b.gamma);
    }

    #[test]
    fn halton_lattice_fills_extent() {
        let pts = halton_lattice(130, EXTENT.0, EXTENT.1);
        for p in &pts {
            for a in 0..3 {
                assert!(p[a] >= EXTENT.0[a] && p[a] < EXTENT.1[a]);
            }
        }
        let left = pts.iter().filter(|p| p[0] < 0.0).count();
        assert!((55..=75).contains(&left), "{left}");
    }

    #[test]
    fn desk_forward_is_fast() {
        let seq = scene();
        let field = seq.field();
        let m = model(&ModelConfig::default(), 12);
        let t0 = std::time::Instant::now();
        let (out, _) = m.forward(&seq.past_waypoints(), &field, true).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        assert_eq!(out.last().points.rows(), 130 * 16);
        assert!(dt < 1.0, "forward took {dt} s");
    }
}
