//! One decoder layer: feature sampling, mixing, temporal-spatial attention,
//! point emission and per-point classification.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::attention::{TauMode, TsMhsa, TsMhsaCache};
use crate::nn::layers::{Linear, Mlp, MlpCache, Module, Param};
use crate::nn::tensor::Tensor;
use crate::scalar::{Scalar, Vec3};
use crate::world::FeatureField;

/// Query positions enter the mixer divided by this (meters).
pub const POSITION_SCALE: f64 = 10.0;

/// Samples the field at every row of `x` (`[M, 3]`), returning `[M, D_f]` and
/// the per-row Jacobians.
pub fn sample_features<T: Scalar>(x: &Tensor<T>, field: &FeatureField) -> (Tensor<T>, Vec<Vec<Vec3<T>>>) {
    let m = x.rows();
    let df = field.channels();
    let mut f = Tensor::zeros(&[m, df]);
    let mut jac = Vec::with_capacity(m);
    for i in 0..m {
        let r = x.row(i);
        let (v, j) = field.sample_with_jacobian(&[r[0], r[1], r[2]]);
        f.row_mut(i).copy_from_slice(&v);
        jac.push(j);
    }
    (f, jac)
}

/// `dL/dx` contribution through sampled features: `Jᵀ dF` per row.
fn features_backward<T: Scalar>(jac: &[Vec<Vec3<T>>], df: &Tensor<T>, dx: &mut Tensor<T>) {
    for (i, j) in jac.iter().enumerate() {
        let g = df.row(i);
        let out = dx.row_mut(i);
        for (c, jc) in j.iter().enumerate() {
            for a in 0..3 {
                out[a] += jc[a] * g[c];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub mix: Mlp<T>,
    pub attn: TsMhsa<T>,
    pub point_head: Mlp<T>,
    pub class_from_embedding: Linear<T>,
    pub class_from_feature: Linear<T>,
    pub points_out: usize,
}

/// Outputs of one layer. Point rows are query-major: row `i * P + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput<T> {
    pub points: Tensor<T>,
    pub offsets: Tensor<T>,
    pub logits: Tensor<T>,
    pub embeddings: Tensor<T>,
    pub positions: Tensor<T>,
    pub points_per_query: usize,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    e: Tensor<T>,
    jac_x: Vec<Vec<Vec3<T>>>,
    mix_in_width: usize,
    mix: MlpCache<T>,
    attn: TsMhsaCache<T>,
    h2: Tensor<T>,
    head: MlpCache<T>,
    point_features: Tensor<T>,
    jac_points: Vec<Vec<Vec3<T>>>,
}

impl<T: Scalar> DecoderLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        dim: usize,
        heads: usize,
        n_queries: usize,
        feature_dim: usize,
        n_classes: usize,
        points_out: usize,
        tau_mode: TauMode,
        rng: &mut R,
    ) -> Self {
        Self {
            mix: Mlp::new(&format!("{name}.mix"), &[dim + feature_dim + 3, dim, dim], 0.5, rng),
            attn: TsMhsa::new(&format!("{name}.attn"), dim, heads, n_queries, tau_mode, rng),
            point_head: Mlp::new(&format!("{name}.points"), &[dim, dim, 3 * points_out], 0.5, rng),
            class_from_embedding: Linear::new(&format!("{name}.cls_emb"), dim, n_classes, 0.1, rng),
            class_from_feature: Linear::new(&format!("{name}.cls_feat"), feature_dim, n_classes, 1.0, rng),
            points_out,
        }
    }

    pub fn forward(
        &self,
        e: &Tensor<T>,
        x: &Tensor<T>,
        timestamps: &[usize],
        temporal_mask: bool,
        field: &FeatureField,
    ) -> Result<(LayerOutput<T>, LayerCache<T>)> {
        let n = e.rows();
        if x.rows() != n || x.cols() != 3 {
            return Err(Error::Shape("query positions must be [N, 3]".into()));
        }
        let p = self.points_out;
        let (f, jac_x) = sample_features(x, field);
        let mut xs = x.clone();
        xs.scale(T::one() / T::of(POSITION_SCALE));
        let mix_in = e.concat_cols(&f)?.concat_cols(&xs)?;
        let (m, mix_cache) = self.mix.forward(&mix_in)?;
        let mut h = e.clone();
        h.add_assign(&m);
        let (a, attn_cache) = self.attn.forward(&h, x, timestamps, temporal_mask)?;
        let mut h2 = h;
        h2.add_assign(&a);
        let (off, head_cache) = self.point_head.forward(&h2)?;
        let offsets = off.reshape(&[n * p, 3])?;
        let mut points = Tensor::zeros(&[n * p, 3]);
        let mut positions = Tensor::zeros(&[n, 3]);
        let inv_p = T::one() / T::of_usize(p);
        for i in 0..n {
            for k in 0..p {
                let r = i * p + k;
                for ax in 0..3 {
                    let v = x.row(i)[ax] + offsets.row(r)[ax];
                    points.row_mut(r)[ax] = v;
                    positions.row_mut(i)[ax] += v * inv_p;
                }
            }
        }
        let (pf, jac_points) = sample_features(&points, field);
        let mut logits = self.class_from_feature.forward(&pf)?;
        let ze = self.class_from_embedding.forward(&h2)?;
        for i in 0..n {
            for k in 0..p {
                for (o, &z) in logits.row_mut(i * p + k).iter_mut().zip(ze.row(i)) {
                    *o += z;
                }
            }
        }
        let out = LayerOutput {
            points,
            offsets,
            logits,
            embeddings: h2.clone(),
            positions,
            points_per_query: p,
        };
        let cache = LayerCache {
            e: e.clone(),
            jac_x,
            mix_in_width: mix_in.cols(),
            mix: mix_cache,
            attn: attn_cache,
            h2,
            head: head_cache,
            point_features: pf,
            jac_points,
        };
        Ok((out, cache))
    }

    /// Back-propagates gradients on the layer outputs. `d_offsets` receives
    /// gradient on the offsets alone (not through the query position).
    /// Returns `(dL/d embeddings_in, dL/d positions_in)`.
    pub fn backward(
        &mut self,
        c: &LayerCache<T>,
        d_points: &Tensor<T>,
        d_offsets: Option<&Tensor<T>>,
        d_logits: &Tensor<T>,
        d_embeddings: &Tensor<T>,
        d_positions: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = c.e.rows();
        let p = self.points_out;
        let dim = c.e.cols();
        let inv_p = T::one() / T::of_usize(p);
        let mut dpts = d_points.clone();
        for i in 0..n {
            for k in 0..p {
                for ax in 0..3 {
                    dpts.row_mut(i * p + k)[ax] += d_positions.row(i)[ax] * inv_p;
                }
            }
        }
        // classification
        let dpf = self.class_from_feature.backward(&c.point_features, d_logits)?;
        let mut dze = Tensor::zeros(&[n, d_logits.cols()]);
        for i in 0..n {
            for k in 0..p {
                for (o, &g) in dze.row_mut(i).iter_mut().zip(d_logits.row(i * p + k)) {
                    *o += g;
                }
            }
        }
        let mut dh2 = d_embeddings.clone();
        dh2.add_assign(&self.class_from_embedding.backward(&c.h2, &dze)?);
        features_backward(&c.jac_points, &dpf, &mut dpts);
        // points = x + offsets
        let mut dx = Tensor::zeros(&[n, 3]);
        let mut doff = dpts.clone();
        if let Some(extra) = d_offsets {
            doff.add_assign(extra);
        }
        for i in 0..n {
            for k in 0..p {
                for ax in 0..3 {
                    dx.row_mut(i)[ax] += dpts.row(i * p + k)[ax];
                }
            }
        }
        let doff = doff.reshape(&[n, 3 * p])?;
        dh2.add_assign(&self.point_head.backward(&c.head, &doff)?);
        // residual attention
        let (dh_attn, dx_attn) = self.attn.backward(&c.attn, &dh2)?;
        dx.add_assign(&dx_attn);
        let mut dh = dh2;
        dh.add_assign(&dh_attn);
        // residual mixer
        let dmix = self.mix.backward(&c.mix, &dh)?;
        debug_assert_eq!(dmix.cols(), c.mix_in_width);
        let df_w = dmix.cols() - dim - 3;
        let mut de = dh;
        let mut dfeat = Tensor::zeros(&[n, df_w]);
        let inv_s = T::one() / T::of(POSITION_SCALE);
        for i in 0..n {
            let r = dmix.row(i);
            for (o, &g) in de.row_mut(i).iter_mut().zip(&r[..dim]) {
                *o += g;
            }
            dfeat.row_mut(i).copy_from_slice(&r[dim..dim + df_w]);
            for ax in 0..3 {
                dx.row_mut(i)[ax] += r[dim + df_w + ax] * inv_s;
            }
        }
        features_backward(&c.jac_x, &dfeat, &mut dx);
        Ok((de, dx))
    }
}

impl<T: Scalar> Module<T> for DecoderLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.mix.visit(f);
        self.attn.visit(f);
        self.point_head.visit(f);
        self.class_from_embedding.visit(f);
        self.class_from_feature.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mix.visit_mut(f);
        self.attn.visit_mut(f);
        self.point_head.visit_mut(f);
        self.class_from_embedding.visit_mut(f);
        self.class_from_feature.visit_mut(f);
    }
}

/// Mean of each query's points: the next query position.
pub fn update_query_positions<T: Scalar>(points: &Tensor<T>, points_per_query: usize) -> Result<Tensor<T>> {
    if points_per_query == 0 || points.rows() % points_per_query != 0 {
        return Err(Error::Shape("point rows not divisible by points per query".into()));
    }
    let n = points.rows() / points_per_query;
    let mut out = Tensor::zeros(&[n, 3]);
    let inv = T::one() / T::of_usize(points_per_query);
    for i in 0..n {
        for k in 0..points_per_query {
            for ax in 0..3 {
                out.row_mut(i)[ax] += points.row(i * points_per_query + k)[ax] * inv;
            }
        }
    }
    Ok(out)
}
