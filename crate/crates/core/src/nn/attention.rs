//! Temporal-spatial multi-head self-attention.
//!
//! Per head `h`, the pre-softmax score between queries `i` and `j` is
//!
//! ```text
//! S[h,i,j] = <q_i, k_j>_h − τ[h,i] ‖p_i − p_j‖² + M_ij,   M_ij = 0 if t_i ≥ t_j else MASK_VALUE
//! ```
//!
//! so a query only attends to queries whose timestamp is not later than its
//! own. Self-attention (`j = i`) is never masked.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{softmax_backward_row, softmax_in_place, Linear, Module, Param};
use crate::nn::tensor::Tensor;
use crate::scalar::{dist2, Scalar};

/// Stand-in for −∞ in the temporal mask.
pub const MASK_VALUE: f64 = -1e9;

/// Raw inputs of the score function. `tau` is `[H, N]`, or `[1, N]` when
/// one factor per query is shared by all heads.
#[derive(Debug, Clone)]
pub struct AttentionInputs<'a, T> {
    pub queries: &'a Tensor<T>,
    pub keys: &'a Tensor<T>,
    pub positions: &'a Tensor<T>,
    pub timestamps: &'a [usize],
    pub tau: &'a Tensor<T>,
    pub n_heads: usize,
    pub temporal_mask: bool,
}

impl<T: Scalar> AttentionInputs<'_, T> {
    fn validate(&self) -> Result<()> {
        let n = self.queries.rows();
        let d = self.queries.cols();
        if self.keys.rows() != n || self.keys.cols() != d {
            return Err(Error::Shape("keys must match queries".into()));
        }
        if self.positions.rows() != n || self.positions.cols() != 3 {
            return Err(Error::Shape("positions must be [N, 3]".into()));
        }
        if self.timestamps.len() != n {
            return Err(Error::LengthMismatch {
                what: "timestamps",
                left: self.timestamps.len(),
                right: n,
            });
        }
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {} heads", self.n_heads)));
        }
        let th = self.tau.rows();
        if self.tau.cols() != n || (th != 1 && th != self.n_heads) {
            return Err(Error::Shape(format!("tau shape {:?}", self.tau.shape())));
        }
        if !self.queries.is_finite() || !self.keys.is_finite() {
            return Err(Error::NonFinite("attention embeddings"));
        }
        if !self.positions.is_finite() {
            return Err(Error::NonFinite("attention positions"));
        }
        if !self.tau.is_finite() {
            return Err(Error::NonFinite("tau"));
        }
        Ok(())
    }

    #[inline]
    fn tau_at(&self, h: usize, i: usize) -> T {
        let row = if self.tau.rows() == 1 { 0 } else { h };
        self.tau.row(row)[i]
    }
}

fn pairwise_sq_dist<T: Scalar>(pos: &Tensor<T>) -> Tensor<T> {
    let n = pos.rows();
    let mut d2 = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let pi = [pos.row(i)[0], pos.row(i)[1], pos.row(i)[2]];
        for j in 0..n {
            let pj = [pos.row(j)[0], pos.row(j)[1], pos.row(j)[2]];
            d2.data_mut()[i * n + j] = dist2(&pi, &pj);
        }
    }
    d2
}

fn scores_with<T: Scalar>(inp: &AttentionInputs<'_, T>, d2: &Tensor<T>) -> Tensor<T> {
    let n = inp.queries.rows();
    let dh = inp.queries.cols() / inp.n_heads;
    let mask = T::of(MASK_VALUE);
    let mut s = Tensor::zeros(&[inp.n_heads, n, n]);
    let sd = s.data_mut();
    for h in 0..inp.n_heads {
        let lo = h * dh;
        for i in 0..n {
            let qi = &inp.queries.row(i)[lo..lo + dh];
            let tau = inp.tau_at(h, i);
            for j in 0..n {
                let kj = &inp.keys.row(j)[lo..lo + dh];
                let mut v: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                v -= tau * d2.data()[i * n + j];
                if inp.temporal_mask && inp.timestamps[i] < inp.timestamps[j] {
                    v += mask;
                }
                sd[(h * n + i) * n + j] = v;
            }
        }
    }
    s
}

/// Pre-softmax scores `[H, N, N]`.
pub fn ts_mhsa_scores<T: Scalar>(inputs: &AttentionInputs<'_, T>) -> Result<Tensor<T>> {
    inputs.validate()?;
    Ok(scores_with(inputs, &pairwise_sq_dist(inputs.positions)))
}

/// How the learnable spatial factor τ is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    PerHeadPerQuery,
    PerQuery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsMhsa<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    /// `τ = exp(tau_raw)`, shape `[H, N]` or `[1, N]`.
    pub tau_raw: Param<T>,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct TsMhsaCache<T> {
    x: Tensor<T>,
    positions: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    tau: Tensor<T>,
    d2: Tensor<T>,
    /// `[H, N, N]` softmax weights.
    pub weights: Tensor<T>,
    heads_out: Tensor<T>,
}

impl<T: Scalar> TsMhsa<T> {
    pub fn new<R: Rng>(name: &str, dim: usize, n_heads: usize, n_queries: usize, tau_mode: TauMode, rng: &mut R) -> Self {
        assert!(dim % n_heads == 0, "embed dim must divide into heads");
        let tau_rows = match tau_mode {
            TauMode::PerHeadPerQuery => n_heads,
            TauMode::PerQuery => 1,
        };
        Self {
            wq: Linear::new(&format!("{name}.q"), dim, dim, 1.0, rng),
            wk: Linear::new(&format!("{name}.k"), dim, dim, 1.0, rng),
            wv: Linear::new(&format!("{name}.v"), dim, dim, 1.0, rng),
            wo: Linear::new(&format!("{name}.o"), dim, dim, 0.5, rng),
            // exp(0) = 1
            tau_raw: Param::zeros(format!("{name}.tau_raw"), &[tau_rows, n_queries]),
            n_heads,
        }
    }

    pub fn tau(&self) -> Tensor<T> {
        let mut t = self.tau_raw.value.clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.exp());
        t
    }

    fn head_scale(&self) -> T {
        let dh = self.wq.out_dim() / self.n_heads;
        T::one() / T::of_usize(dh).sqrt()
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        positions: &Tensor<T>,
        timestamps: &[usize],
        temporal_mask: bool,
    ) -> Result<(Tensor<T>, TsMhsaCache<T>)> {
        let n = x.rows();
        let dim = self.wq.out_dim();
        let dh = dim / self.n_heads;
        let mut q = self.wq.forward(x)?;
        q.scale(self.head_scale());
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let tau = self.tau();
        let inputs = AttentionInputs {
            queries: &q,
            keys: &k,
            positions,
            timestamps,
            tau: &tau,
            n_heads: self.n_heads,
            temporal_mask,
        };
        inputs.validate()?;
        let d2 = pairwise_sq_dist(positions);
        let mut weights = scores_with(&inputs, &d2);
        let floor = T::of(MASK_VALUE * 0.5);
        for hi in 0..self.n_heads * n {
            let row = &mut weights.data_mut()[hi * n..(hi + 1) * n];
            if row.iter().all(|&s| s < floor) {
                return Err(Error::MaskedRow(hi % n));
            }
            softmax_in_place(row);
        }
        let mut heads_out = Tensor::zeros(&[n, dim]);
        for h in 0..self.n_heads {
            let lo = h * dh;
            for i in 0..n {
                let a = &weights.data()[(h * n + i) * n..(h * n + i + 1) * n];
                let mut acc = vec![T::zero(); dh];
                for (j, &w) in a.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    for (o, &vv) in acc.iter_mut().zip(&v.row(j)[lo..lo + dh]) {
                        *o += w * vv;
                    }
                }
                heads_out.row_mut(i)[lo..lo + dh].copy_from_slice(&acc);
            }
        }
        let y = self.wo.forward(&heads_out)?;
        Ok((
            y,
            TsMhsaCache {
                x: x.clone(),
                positions: positions.clone(),
                q,
                k,
                v,
                tau,
                d2,
                weights,
                heads_out,
            },
        ))
    }

    /// Returns `(dL/dx, dL/dpositions)` and accumulates parameter gradients.
    pub fn backward(&mut self, c: &TsMhsaCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = c.x.rows();
        let dim = self.wq.out_dim();
        let dh = dim / self.n_heads;
        let d_heads = self.wo.backward(&c.heads_out, dy)?;
        let mut dq = Tensor::zeros(&[n, dim]);
        let mut dk = Tensor::zeros(&[n, dim]);
        let mut dv = Tensor::zeros(&[n, dim]);
        let mut dpos = Tensor::zeros(&[n, 3]);
        let tau_rows = c.tau.rows();
        let two = T::of(2.0);
        let mut da = vec![T::zero(); n];
        let mut ds = vec![T::zero(); n];
        for h in 0..self.n_heads {
            let lo = h * dh;
            for i in 0..n {
                let a = &c.weights.data()[(h * n + i) * n..(h * n + i + 1) * n];
                let doi = &d_heads.row(i)[lo..lo + dh];
                for j in 0..n {
                    da[j] = doi.iter().zip(&c.v.row(j)[lo..lo + dh]).map(|(&x, &y)| x * y).sum();
                    if a[j] != T::zero() {
                        for (g, &d) in dv.row_mut(j)[lo..lo + dh].iter_mut().zip(doi) {
                            *g += a[j] * d;
                        }
                    }
                }
                softmax_backward_row(a, &da, &mut ds);
                let tau_row = if tau_rows == 1 { 0 } else { h };
                let tau_hi = c.tau.row(tau_row)[i];
                let mut dtau = T::zero();
                let pi = [c.positions.row(i)[0], c.positions.row(i)[1], c.positions.row(i)[2]];
                for j in 0..n {
                    let g = ds[j];
                    if g == T::zero() {
                        continue;
                    }
                    let kj = &c.k.row(j)[lo..lo + dh];
                    for (o, &kv) in dq.row_mut(i)[lo..lo + dh].iter_mut().zip(kj) {
                        *o += g * kv;
                    }
                    let qi = &c.q.row(i)[lo..lo + dh];
                    for (o, &qv) in dk.row_mut(j)[lo..lo + dh].iter_mut().zip(qi) {
                        *o += g * qv;
                    }
                    dtau -= g * c.d2.data()[i * n + j];
                    if i != j {
                        let coef = two * tau_hi * g;
                        for ax in 0..3 {
                            let diff = pi[ax] - c.positions.row(j)[ax];
                            dpos.row_mut(i)[ax] -= coef * diff;
                            dpos.row_mut(j)[ax] += coef * diff;
                        }
                    }
                }
                self.tau_raw.grad.row_mut(tau_row)[i] += dtau * tau_hi;
            }
        }
        dq.scale(self.head_scale());
        let mut dx = self.wq.backward(&c.x, &dq)?;
        dx.add_assign(&self.wk.backward(&c.x, &dk)?);
        dx.add_assign(&self.wv.backward(&c.x, &dv)?);
        Ok((dx, dpos))
    }
}

impl<T: Scalar> Module<T> for TsMhsa<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
        f(&self.tau_raw);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
        f(&mut self.tau_raw);
    }
}
