//! Parameters, linear layers and small MLPs with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::scalar::Scalar;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal<R: Rng>(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Self {
        let value = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        Self::new(name, value)
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.grad.fill(T::zero()));
    }

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    /// All parameter values concatenated in visit order.
    fn flat_values(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_params());
        self.visit(&mut |p| v.extend_from_slice(p.value.data()));
        v
    }

    fn flat_grads(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.n_params());
        self.visit(&mut |p| v.extend_from_slice(p.grad.data()));
        v
    }

    /// Inverse of [`Module::flat_values`].
    fn set_flat_values(&mut self, values: &[T]) {
        let mut k = 0;
        self.visit_mut(&mut |p| {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[k..k + n]);
            k += n;
        });
    }

    /// `(name, offset, len)` of every parameter in the flat layout.
    fn param_layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut k = 0;
        self.visit(&mut |p| {
            out.push((p.name.clone(), k, p.value.len()));
            k += p.value.len();
        });
        out
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

/// Numerically safe `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `y = x W + b` with `W [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    /// Weights drawn from N(0, gain² / in), zero bias.
    pub fn new<R: Rng>(name: &str, inp: usize, out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (inp as f64).sqrt();
        Self {
            weight: Param::normal(format!("{name}.weight"), &[inp, out], std, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out]),
        }
    }

    pub fn zeros(name: &str, inp: usize, out: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), &[inp, out]),
            bias: Param::zeros(format!("{name}.bias"), &[out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "{}: input width {} != {}",
                self.weight.name,
                x.cols(),
                self.in_dim()
            )));
        }
        let mut y = matmul(x, &self.weight.value)?;
        let b = self.bias.value.data();
        for i in 0..y.rows() {
            for (v, &bb) in y.row_mut(i).iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dw = matmul_tn(x, dy)?;
        self.weight.grad.add_assign(&dw);
        let db = self.bias.grad.data_mut();
        for i in 0..dy.rows() {
            for (g, &d) in db.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
        matmul_nt(dy, &self.weight.value)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Linear layers with SiLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `dims = [in, hidden.., out]`. The last layer is scaled by `out_gain`;
    /// pass 0 for a zero-initialized head.
    pub fn new<R: Rng>(name: &str, dims: &[usize], out_gain: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if i + 1 == n {
                    if out_gain == 0.0 {
                        Linear::zeros(&lname, dims[i], dims[i + 1])
                    } else {
                        Linear::new(&lname, dims[i], dims[i + 1], out_gain, rng)
                    }
                } else {
                    Linear::new(&lname, dims[i], dims[i + 1], 1.0, rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            cache.inputs.push(h);
            if i == last {
                h = z;
            } else {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = silu(*v));
                cache.pre.push(z);
                h = a;
            }
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                for (g, &z) in d.data_mut().iter_mut().zip(cache.pre[i].data()) {
                    *g *= silu_grad(z);
                }
            }
            d = self.layers[i].backward(&cache.inputs[i], &d)?;
        }
        Ok(d)
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// Row-wise softmax, subtracting the row max.
pub fn softmax_rows<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    let mut out = s.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Gradient of a softmax row: `p ⊙ (dp − Σ p dp)`.
pub fn softmax_backward_row<T: Scalar>(p: &[T], dp: &[T], ds: &mut [T]) {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    for ((o, &pi), &dpi) in ds.iter_mut().zip(p).zip(dp) {
        *o = pi * (dpi - dot);
    }
}
