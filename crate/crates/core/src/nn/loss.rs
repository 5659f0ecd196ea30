//! Losses with closed-form gradients.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Mean over rows of `−α (1 − p_t)^γ log p_t` with softmax probabilities.
/// Returns the loss and its gradient with respect to `logits`.
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize], fp: FocalParams) -> Result<(T, Tensor<T>)> {
    let n = logits.rows();
    let c = logits.cols();
    if targets.len() != n {
        return Err(Error::LengthMismatch {
            what: "focal targets",
            left: targets.len(),
            right: n,
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidClass { label: bad, classes: c });
    }
    let mut grad = Tensor::zeros(&[n, c]);
    if n == 0 {
        return Ok((T::zero(), grad));
    }
    let gamma = T::of(fp.gamma);
    let alpha = T::of(fp.alpha);
    let inv_n = T::one() / T::of_usize(n);
    let mut total = T::zero();
    for i in 0..n {
        let z = logits.row(i);
        let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let t = targets[i];
        let log_pt = z[t] - lse;
        let pt = log_pt.exp();
        let q = T::one() - pt;
        let mod_factor = if fp.gamma == 0.0 { T::one() } else { q.powf(gamma) };
        total += -alpha * mod_factor * log_pt;
        // d/dpt of −α q^γ log pt
        let dq_term = if fp.gamma == 0.0 || q <= T::zero() {
            T::zero()
        } else {
            alpha * gamma * q.powf(gamma - T::one()) * log_pt
        };
        // the 1/pt is cancelled by dpt/dz = pt (δ − p)
        let dpt_times_pt = dq_term * pt - alpha * mod_factor;
        let g = grad.row_mut(i);
        for k in 0..c {
            let pk = (z[k] - lse).exp();
            let delta = if k == t { T::one() } else { T::zero() };
            g[k] = dpt_times_pt * (delta - pk) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// `Σ (a − b)²` and its gradient with respect to `a`.
pub fn l2_loss<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Vec<T>)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "l2 operands",
            left: a.len(),
            right: b.len(),
        });
    }
    let two = T::of(2.0);
    let mut v = T::zero();
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            v += d * d;
            two * d
        })
        .collect();
    Ok((v, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, GradCheckConfig};

    #[test]
    fn confident_correct_is_near_zero() {
        let logits = Tensor::<f64>::from_vec(&[2, 3], vec![40.0, 0.0, 0.0, 0.0, 0.0, 40.0]).unwrap();
        let (l, _) = focal_loss(&logits, &[0, 2], FocalParams::default()).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn reduces_to_cross_entropy() {
        let logits = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.9).sin() * 2.0);
        let targets = [0, 2, 1, 1];
        let (l, _) = focal_loss(&logits, &targets, FocalParams { gamma: 0.0, alpha: 1.0 }).unwrap();
        let mut ce = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let z = logits.row(i);
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            ce -= (z[t].exp() / s).ln();
        }
        assert!((l - ce / 4.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_target_errors() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            focal_loss(&logits, &[3], FocalParams::default()),
            Err(Error::InvalidClass { .. })
        ));
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let logits = Tensor::from_fn(&[16, 5], |i| ((i * 37 % 11) as f64 - 5.0) * 0.4);
        let targets: Vec<usize> = (0..16).map(|i| (i * 3) % 5).collect();
        let fp = FocalParams::default();
        let (_, g) = focal_loss(&logits, &targets, fp).unwrap();
        let rep = check_gradient(
            |v| focal_loss(&Tensor::from_vec(&[16, 5], v.to_vec()).unwrap(), &targets, fp).unwrap().0,
            logits.data(),
            g.data(),
            &GradCheckConfig {
                max_entries: 80,
                ..GradCheckConfig::default()
            },
        );
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn l2_basic() {
        let (v, g) = l2_loss(&[1.0, 2.0], &[0.5, 2.0]).unwrap();
        assert_eq!(v, 0.25);
        assert_eq!(g, vec![1.0, 0.0]);
        assert!(l2_loss(&[1.0], &[]).is_err());
    }
}
