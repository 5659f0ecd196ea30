//! Squared Chamfer distance with explicit nearest-neighbor matchings.

use crate::error::{Error, Result};
use crate::geometry::knn::KdTree;
use crate::scalar::{Scalar, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct ChamferResult<T> {
    pub value: T,
    /// Nearest GT index for every predicted point.
    pub match_p_to_g: Vec<usize>,
    /// Nearest predicted index for every GT point.
    pub match_g_to_p: Vec<usize>,
}

/// `Σ_p min_g ‖p−g‖² + Σ_g min_p ‖g−p‖²`, summed in index order.
pub fn chamfer_distance<T: Scalar>(pred: &[Vec3<T>], gt: &[Vec3<T>]) -> Result<ChamferResult<T>> {
    if pred.is_empty() {
        return Err(Error::EmptySet("predicted points"));
    }
    if gt.is_empty() {
        return Err(Error::EmptySet("ground-truth points"));
    }
    let gt_tree = KdTree::build(gt)?;
    let pred_tree = KdTree::build(pred)?;
    let mut value = T::zero();
    let mut match_p_to_g = Vec::with_capacity(pred.len());
    for p in pred {
        let (i, d) = gt_tree.nearest(p);
        value += d;
        match_p_to_g.push(i);
    }
    let mut match_g_to_p = Vec::with_capacity(gt.len());
    for g in gt {
        let (i, d) = pred_tree.nearest(g);
        value += d;
        match_g_to_p.push(i);
    }
    Ok(ChamferResult {
        value,
        match_p_to_g,
        match_g_to_p,
    })
}

/// Gradient of the Chamfer value with respect to every predicted point,
/// holding the matching fixed.
pub fn chamfer_gradient<T: Scalar>(
    pred: &[Vec3<T>],
    gt: &[Vec3<T>],
    result: &ChamferResult<T>,
) -> Result<Vec<Vec3<T>>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySet("chamfer inputs"));
    }
    if result.match_p_to_g.len() != pred.len() || result.match_g_to_p.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "chamfer matching",
            left: result.match_p_to_g.len() + result.match_g_to_p.len(),
            right: pred.len() + gt.len(),
        });
    }
    let two = T::of(2.0);
    let mut grad = vec![[T::zero(); 3]; pred.len()];
    for (i, p) in pred.iter().enumerate() {
        let g = &gt[result.match_p_to_g[i]];
        for a in 0..3 {
            grad[i][a] += two * (p[a] - g[a]);
        }
    }
    for (j, g) in gt.iter().enumerate() {
        let i = result.match_g_to_p[j];
        for a in 0..3 {
            grad[i][a] += two * (pred[i][a] - g[a]);
        }
    }
    Ok(grad)
}
