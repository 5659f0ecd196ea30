//! Ego-to-scene cross-attention with a query-conditioned distance penalty.
//!
//! ```text
//! s_i = <q, k_i> / √D − τ_i ‖p_i‖²,   τ_i = softplus(MLP(k_i))
//! h   = q + Σ softmax(s)_i V k_i
//! q'  = h + MLP(h)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{sigmoid, softmax_backward_row, softmax_in_place, softplus, Linear, Mlp, MlpCache, Module, Param};
use crate::nn::tensor::Tensor;
use crate::scalar::{norm2, Scalar};

/// Initial bias of the penalty MLP output; softplus(−4) ≈ 0.018 per m².
const TAU_BIAS: f64 = -4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EgoAttention<T> {
    pub value: Linear<T>,
    pub tau: Mlp<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct EgoCache<T> {
    q: Tensor<T>,
    keys: Tensor<T>,
    positions: Tensor<T>,
    tau_cache: MlpCache<T>,
    tau_raw: Vec<T>,
    tau: Vec<T>,
    values: Tensor<T>,
    /// Softmax weights over scene queries.
    pub weights: Vec<T>,
    mlp_cache: MlpCache<T>,
}

/// Raw scores `s_i` for given penalties.
pub fn ego_scores<T: Scalar>(q: &[T], keys: &Tensor<T>, positions: &Tensor<T>, tau: &[T]) -> Vec<T> {
    let scale = T::one() / T::of_usize(q.len()).sqrt();
    (0..keys.rows())
        .map(|i| {
            let dot: T = q.iter().zip(keys.row(i)).map(|(&a, &b)| a * b).sum();
            let p = positions.row(i);
            dot * scale - tau[i] * norm2(&[p[0], p[1], p[2]])
        })
        .collect()
}

impl<T: Scalar> EgoAttention<T> {
    pub fn new<R: Rng>(name: &str, dim: usize, rng: &mut R) -> Self {
        let mut tau = Mlp::new(&format!("{name}.tau"), &[dim, 16, 1], 0.1, rng);
        if let Some(last) = tau.layers.last_mut() {
            last.bias.value.fill(T::of(TAU_BIAS));
        }
        Self {
            value: Linear::new(&format!("{name}.value"), dim, dim, 1.0, rng),
            tau,
            mlp: Mlp::new(&format!("{name}.mlp"), &[dim, dim, dim], 0.5, rng),
        }
    }

    /// `q` is `[1, D]`, `keys` `[n, D]`, `positions` `[n, 3]` in the ego frame.
    pub fn forward(&self, q: &Tensor<T>, keys: &Tensor<T>, positions: &Tensor<T>) -> Result<(Tensor<T>, EgoCache<T>)> {
        let n = keys.rows();
        if n == 0 || keys.is_empty() {
            return Err(Error::EmptySet("scene queries for ego attention"));
        }
        if q.rows() != 1 || q.cols() != keys.cols() {
            return Err(Error::Shape("ego query must be [1, D] matching scene queries".into()));
        }
        if positions.rows() != n || positions.cols() != 3 {
            return Err(Error::Shape("scene positions must be [n, 3]".into()));
        }
        let (r, tau_cache) = self.tau.forward(keys)?;
        let tau_raw: Vec<T> = r.data().to_vec();
        let tau: Vec<T> = tau_raw.iter().map(|&v| softplus(v)).collect();
        let mut weights = ego_scores(q.row(0), keys, positions, &tau);
        softmax_in_place(&mut weights);
        let values = self.value.forward(keys)?;
        let mut h = q.clone();
        for (i, &w) in weights.iter().enumerate() {
            for (o, &v) in h.row_mut(0).iter_mut().zip(values.row(i)) {
                *o += w * v;
            }
        }
        let (m, mlp_cache) = self.mlp.forward(&h)?;
        let mut out = h;
        out.add_assign(&m);
        if !out.is_finite() {
            return Err(Error::NonFinite("ego query"));
        }
        Ok((
            out,
            EgoCache {
                q: q.clone(),
                keys: keys.clone(),
                positions: positions.clone(),
                tau_cache,
                tau_raw,
                tau,
                values,
                weights,
                mlp_cache,
            },
        ))
    }

    /// Returns gradients for `(q, keys, positions)`.
    pub fn backward(&mut self, c: &EgoCache<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let n = c.keys.rows();
        let d = c.keys.cols();
        let mut dh = dout.clone();
        dh.add_assign(&self.mlp.backward(&c.mlp_cache, dout)?);
        let mut dq = dh.clone();
        let mut dalpha = vec![T::zero(); n];
        let mut dvalues = Tensor::zeros(&[n, d]);
        for i in 0..n {
            dalpha[i] = dh.row(0).iter().zip(c.values.row(i)).map(|(&a, &b)| a * b).sum();
            for (o, &g) in dvalues.row_mut(i).iter_mut().zip(dh.row(0)) {
                *o = c.weights[i] * g;
            }
        }
        let mut dkeys = self.value.backward(&c.keys, &dvalues)?;
        let mut ds = vec![T::zero(); n];
        softmax_backward_row(&c.weights, &dalpha, &mut ds);
        let scale = T::one() / T::of_usize(d).sqrt();
        let mut dpos = Tensor::zeros(&[n, 3]);
        let mut dtau_raw = Tensor::zeros(&[n, 1]);
        let two = T::of(2.0);
        for i in 0..n {
            let k = c.keys.row(i).to_vec();
            for (o, &kv) in dq.row_mut(0).iter_mut().zip(&k) {
                *o += ds[i] * kv * scale;
            }
            for (o, &qv) in dkeys.row_mut(i).iter_mut().zip(c.q.row(0)) {
                *o += ds[i] * qv * scale;
            }
            let p = c.positions.row(i);
            let r2 = norm2(&[p[0], p[1], p[2]]);
            for a in 0..3 {
                dpos.row_mut(i)[a] = -ds[i] * c.tau[i] * two * p[a];
            }
            dtau_raw.row_mut(i)[0] = -ds[i] * r2 * sigmoid(c.tau_raw[i]);
        }
        dkeys.add_assign(&self.tau.backward(&c.tau_cache, &dtau_raw)?);
        Ok((dq, dkeys, dpos))
    }
}

impl<T: Scalar> Module<T> for EgoAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.value.visit(f);
        self.tau.visit(f);
        self.mlp.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.value.visit_mut(f);
        self.tau.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}
