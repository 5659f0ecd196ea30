//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation `h` for `(f(x+h) − f(x−h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Upper bound on checked coordinates; larger inputs are subsampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-6,
            floor: 1e-3,
            max_entries: 64,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` around `x`.
/// `f` receives a perturbed copy of `x` and must be deterministic.
pub fn check_gradient<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    x: &[T],
    analytic: &[T],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let idx: Vec<usize> = if x.len() <= cfg.max_entries {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = sample(&mut rng, x.len(), cfg.max_entries).into_vec();
        v.sort_unstable();
        v
    };
    let h = T::of(cfg.step);
    let mut buf = x.to_vec();
    let mut report = GradCheckReport::default();
    for i in idx {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf).f64();
        buf[i] = orig - h;
        let fm = f(&buf).f64();
        buf[i] = orig;
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a = analytic[i].f64();
        let rel = relative_error(a, numeric, cfg.floor);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel);
        if !(rel < cfg.tolerance) {
            report.failures.push(GradCheckFailure {
                index: i,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = [1.0f64, -2.0, 0.5];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let rep = check_gradient(|v| v.iter().map(|a| a * a).sum::<f64>(), &x, &g, &GradCheckConfig::default());
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.checked, 3);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let x = [1.0f64, -2.0, 0.5];
        let mut g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        g[1] *= 1.01;
        let rep = check_gradient(|v| v.iter().map(|a| a * a).sum::<f64>(), &x, &g, &GradCheckConfig::default());
        assert!(!rep.passed());
        assert_eq!(rep.failures.len(), 1);
        assert_eq!(rep.failures[0].index, 1);
    }

    #[test]
    fn subsamples_large_inputs() {
        let x = vec![0.5f64; 1000];
        let g = vec![1.0f64; 1000];
        let rep = check_gradient(|v| v.iter().sum::<f64>(), &x, &g, &GradCheckConfig::default());
        assert_eq!(rep.checked, 64);
        assert!(rep.passed());
    }
}
