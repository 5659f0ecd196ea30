//! Training objectives.
//!
//! Pretraining sums a Chamfer term on the scaled initial positions and, per
//! decoder layer, a Chamfer term plus a focal term whose targets are the
//! labels of the matched ground-truth points. End-to-end training adds, per
//! future frame, weighted Chamfer, focal and waypoint terms.

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::forecast::{ScfGrad, ScfOutput};
use crate::geometry::{chamfer_distance, chamfer_gradient, wrap_angle, ChamferResult, GridSpec, Pose, TimedTargets};
use crate::nn::loss::{focal_loss, FocalParams};
use crate::nn::tensor::Tensor;
use crate::perception::{RapGrad, RapOutput};
use crate::scalar::{Scalar, Vec3};

/// Every loss term of one step, each unweighted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTerms {
    pub chamfer_initial: f64,
    pub chamfer_layers: Vec<f64>,
    pub focal_layers: Vec<f64>,
    pub chamfer_forecast: Vec<f64>,
    pub focal_forecast: Vec<f64>,
    pub plan: Vec<f64>,
}

impl LossTerms {
    pub fn pretrain(&self) -> f64 {
        let mut s = self.chamfer_initial;
        for (c, f) in self.chamfer_layers.iter().zip(&self.focal_layers) {
            s += c + f;
        }
        s
    }

    pub fn total(&self, w: &LossConfig) -> f64 {
        let mut s = self.pretrain();
        for t in 0..self.plan.len() {
            s += w.lambda_chamfer * self.chamfer_forecast[t] + w.lambda_focal * self.focal_forecast[t] + w.lambda_plan * self.plan[t];
        }
        s
    }

    /// Column names matching [`LossTerms::values`].
    pub fn columns(n_layers: usize, future: usize) -> Vec<String> {
        let mut c = vec!["cd_init".to_string()];
        c.extend((1..=n_layers).map(|l| format!("cd_l{l}")));
        c.extend((1..=n_layers).map(|l| format!("focal_l{l}")));
        c.extend((1..=future).map(|t| format!("cd_f{t}")));
        c.extend((1..=future).map(|t| format!("focal_f{t}")));
        c.extend((1..=future).map(|t| format!("plan_f{t}")));
        c
    }

    /// Flat values; forecast columns are zero when the step had none.
    pub fn values(&self, n_layers: usize, future: usize) -> Vec<f64> {
        let pad = |v: &[f64], n: usize| -> Vec<f64> { (0..n).map(|i| v.get(i).copied().unwrap_or(0.0)).collect() };
        let mut v = vec![self.chamfer_initial];
        v.extend(pad(&self.chamfer_layers, n_layers));
        v.extend(pad(&self.focal_layers, n_layers));
        v.extend(pad(&self.chamfer_forecast, future));
        v.extend(pad(&self.focal_forecast, future));
        v.extend(pad(&self.plan, future));
        v
    }
}

fn to_vec3<T: Scalar>(p: &Vec3<f64>) -> Vec3<T> {
    [T::of(p[0]), T::of(p[1]), T::of(p[2])]
}

fn rows3<T: Scalar>(t: &Tensor<T>) -> Vec<Vec3<T>> {
    (0..t.rows()).map(|i| { let r = t.row(i); [r[0], r[1], r[2]] }).collect()
}

fn grad_tensor<T: Scalar>(g: &[Vec3<T>]) -> Tensor<T> {
    Tensor::from_vec(&[g.len(), 3], g.iter().flatten().copied().collect()).expect("rows of three")
}

/// Pretraining loss with gradients, plus the final layer's matching (used
/// to accumulate the statistics matrix).
#[derive(Debug, Clone)]
pub struct PretrainLoss<T> {
    pub terms: LossTerms,
    pub grad: RapGrad<T>,
    pub final_matching: ChamferResult<T>,
}

pub fn pretrain_loss<T: Scalar>(out: &RapOutput<T>, targets: &TimedTargets<f64>, focal: FocalParams) -> Result<PretrainLoss<T>> {
    if targets.is_empty() {
        return Err(Error::EmptySet("pretraining targets"));
    }
    let gt: Vec<Vec3<T>> = targets.points.iter().map(to_vec3).collect();
    let mut grad = RapGrad::new(out.layers.len());
    let mut terms = LossTerms::default();
    let init = rows3(&out.initial);
    let cr = chamfer_distance(&init, &gt)?;
    terms.chamfer_initial = cr.value.f64();
    grad.add_initial(grad_tensor(&chamfer_gradient(&init, &gt, &cr)?));
    let mut last = None;
    for (l, layer) in out.layers.iter().enumerate() {
        let pts = rows3(&layer.points);
        let cr = chamfer_distance(&pts, &gt)?;
        terms.chamfer_layers.push(cr.value.f64());
        grad.add_points(l, grad_tensor(&chamfer_gradient(&pts, &gt, &cr)?));
        let labels: Vec<usize> = cr.match_p_to_g.iter().map(|&g| targets.labels[g]).collect();
        let (fl, fg) = focal_loss(&layer.logits, &labels, focal)?;
        terms.focal_layers.push(fl.f64());
        grad.add_logits(l, fg);
        last = Some(cr);
    }
    Ok(PretrainLoss {
        terms,
        grad,
        final_matching: last.ok_or(Error::EmptySet("decoder layers"))?,
    })
}

/// Ground truth for one future frame, in that frame's true ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTarget {
    /// True pose relative to the current frame.
    pub pose: Pose<f64>,
    pub points: Vec<Vec3<f64>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForecastLoss<T> {
    pub chamfer: Vec<f64>,
    pub focal: Vec<f64>,
    pub plan: Vec<f64>,
    /// Gradients of the weighted future terms.
    pub grad: ScfGrad<T>,
}

/// Per-frame Chamfer against the target re-expressed in the predicted ego
/// frame (predicted points outside `grid` have no term of their own but can
/// still serve as a target point's nearest prediction), focal on the
/// in-grid points, and squared waypoint error with wrapped yaw.
pub fn forecast_loss<T: Scalar>(
    out: &ScfOutput<T>,
    targets: &[FrameTarget],
    grid: &GridSpec<f64>,
    weights: &LossConfig,
) -> Result<ForecastLoss<T>> {
    if targets.len() != out.frames.len() {
        return Err(Error::LengthMismatch {
            what: "forecast horizons",
            left: out.frames.len(),
            right: targets.len(),
        });
    }
    let focal = weights.focal();
    let mut grad = ScfGrad::new(out.frames.len());
    let (mut chamfer, mut focal_terms, mut plan) = (Vec::new(), Vec::new(), Vec::new());
    let lo = grid.origin;
    let hi = grid.extent_max();
    for (t, (f, tgt)) in out.frames.iter().zip(targets).enumerate() {
        let [px, py, pyaw] = f.pose;
        let (s, c) = pyaw.sin_cos();
        // target in predicted frame: R(−ψ)(w − p) with w in current-frame coordinates
        let world: Vec<Vec3<f64>> = tgt.points.iter().map(|g| tgt.pose.to_reference(g)).collect();
        let gt: Vec<Vec3<T>> = world
            .iter()
            .map(|w| {
                let dx = T::of(w[0]) - px;
                let dy = T::of(w[1]) - py;
                [c * dx + s * dy, -s * dx + c * dy, T::of(w[2])]
            })
            .collect();
        let all: Vec<Vec3<T>> = (0..f.points.rows()).map(|r| { let p = f.points.row(r); [p[0], p[1], p[2]] }).collect();
        let kept: Vec<usize> = (0..all.len())
            .filter(|&r| (0..3).all(|a| all[r][a].f64() >= lo[a] && all[r][a].f64() < hi[a]))
            .collect();
        let mut gp = Tensor::zeros(f.points.shape());
        let mut gl = Tensor::zeros(f.logits.shape());
        let mut gpose = [T::zero(); 3];
        let (mut cd, mut fl) = (0.0, 0.0);
        if !gt.is_empty() {
            // predicted points outside the frame only skip their own term;
            // every target point still needs its nearest prediction
            let cr = chamfer_distance(&all, &gt)?;
            let lam2 = T::of(2.0 * weights.lambda_chamfer);
            let mut value = T::zero();
            let mut dg = vec![[T::zero(); 3]; gt.len()];
            let mut pair = |p: usize, g: usize, value: &mut T, gp: &mut Tensor<T>| {
                let d = [all[p][0] - gt[g][0], all[p][1] - gt[g][1], all[p][2] - gt[g][2]];
                *value += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let row = gp.row_mut(p);
                for a in 0..3 {
                    row[a] += lam2 * d[a];
                    dg[g][a] -= lam2 * d[a];
                }
            };
            for &r in &kept {
                pair(r, cr.match_p_to_g[r], &mut value, &mut gp);
            }
            for (g, &p) in cr.match_g_to_p.iter().enumerate() {
                pair(p, g, &mut value, &mut gp);
            }
            cd = value.f64();
            // target side, chained into the predicted pose
            for (g, d) in gt.iter().zip(&dg) {
                gpose[0] -= c * d[0] - s * d[1];
                gpose[1] -= s * d[0] + c * d[1];
                gpose[2] += d[0] * g[1] - d[1] * g[0];
            }
            if !kept.is_empty() {
                let logits = f.logits.select_rows(&kept);
                let labels: Vec<usize> = kept.iter().map(|&r| tgt.labels[cr.match_p_to_g[r]]).collect();
                let (l, g) = focal_loss(&logits, &labels, focal)?;
                fl = l.f64();
                let lam = T::of(weights.lambda_focal);
                for (k, &r) in kept.iter().enumerate() {
                    for (o, &v) in gl.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o = lam * v;
                    }
                }
            }
        }
        let ex = px - T::of(tgt.pose.x);
        let ey = py - T::of(tgt.pose.y);
        let eyaw = wrap_angle(pyaw - T::of(tgt.pose.yaw));
        plan.push((ex * ex + ey * ey + eyaw * eyaw).f64());
        let two_lam = T::of(2.0 * weights.lambda_plan);
        gpose[0] += two_lam * ex;
        gpose[1] += two_lam * ey;
        gpose[2] += two_lam * eyaw;
        chamfer.push(cd);
        focal_terms.push(fl);
        grad.points[t] = Some(gp);
        grad.logits[t] = Some(gl);
        grad.poses[t] = gpose;
    }
    Ok(ForecastLoss {
        chamfer,
        focal: focal_terms,
        plan,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::forecast::{ForecastFrame, ScenePartition};
    use crate::nn::gradcheck::{check_gradient, GradCheckConfig};
    use crate::nn::layers::Module;
    use crate::perception::{timestamps_from_split, Rap};
    use crate::world::{union_grid, SceneSequence, WorldConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C: usize = 6;

    fn grid() -> GridSpec<f64> {
        GridSpec::ego_centered(0.5, [16, 16, 4], -1.0).unwrap()
    }

    fn frame(rng: &mut ChaCha8Rng, n: usize) -> ForecastFrame<f64> {
        ForecastFrame {
            pose: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.2)],
            delta: [0.0; 3],
            queries: vec![],
            positions: Tensor::zeros(&[0, 3]),
            migration: Tensor::zeros(&[0, 3]),
            // a few fall outside the grid and are masked
            points: Tensor::from_fn(&[n, 3], |_| rng.gen_range(-4.5..4.5)),
            logits: Tensor::from_fn(&[n, C], |_| rng.gen_range(-2.0..2.0)),
        }
    }

    fn targets(rng: &mut ChaCha8Rng, frames: usize) -> Vec<FrameTarget> {
        (0..frames)
            .map(|t| FrameTarget {
                pose: Pose::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.2), t as i64 + 1),
                points: (0..15).map(|_| [rng.gen_range(-3.5..3.5), rng.gen_range(-3.5..3.5), rng.gen_range(-0.8..0.8)]).collect(),
                labels: (0..15).map(|_| rng.gen_range(1..C)).collect(),
            })
            .collect()
    }

    fn output(rng: &mut ChaCha8Rng, frames: usize) -> ScfOutput<f64> {
        ScfOutput {
            partition: ScenePartition { groups: vec![] },
            frames: (0..frames).map(|_| frame(rng, 20)).collect(),
        }
    }

    fn weighted(l: &ForecastLoss<f64>, w: &LossConfig) -> f64 {
        (0..l.plan.len())
            .map(|t| w.lambda_chamfer * l.chamfer[t] + w.lambda_focal * l.focal[t] + w.lambda_plan * l.plan[t])
            .sum()
    }

    #[test]
    fn forecast_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = output(&mut rng, 2);
        let tg = targets(&mut rng, 2);
        let w = LossConfig {
            lambda_chamfer: 0.7,
            lambda_focal: 1.3,
            lambda_plan: 0.4,
            ..LossConfig::default()
        };
        let l = forecast_loss(&out, &tg, &grid(), &w).unwrap();
        let gc = GradCheckConfig::with_tolerance(1e-5);
        for t in 0..2 {
            let mut o = out.clone();
            let rep = check_gradient(
                |x| {
                    o.frames[t].points.data_mut().copy_from_slice(x);
                    weighted(&forecast_loss(&o, &tg, &grid(), &w).unwrap(), &w)
                },
                out.frames[t].points.data(),
                l.grad.points[t].as_ref().unwrap().data(),
                &gc,
            );
            assert!(rep.passed(), "points {t}: {:?}", rep.failures);
            let mut o = out.clone();
            let rep = check_gradient(
                |x| {
                    o.frames[t].logits.data_mut().copy_from_slice(x);
                    weighted(&forecast_loss(&o, &tg, &grid(), &w).unwrap(), &w)
                },
                out.frames[t].logits.data(),
                l.grad.logits[t].as_ref().unwrap().data(),
                &gc,
            );
            assert!(rep.passed(), "logits {t}: {:?}", rep.failures);
            let mut o = out.clone();
            let rep = check_gradient(
                |x| {
                    o.frames[t].pose.copy_from_slice(x);
                    weighted(&forecast_loss(&o, &tg, &grid(), &w).unwrap(), &w)
                },
                &out.frames[t].pose,
                &l.grad.poses[t],
                &gc,
            );
            assert!(rep.passed(), "pose {t}: {:?}", rep.failures);
        }
    }

    #[test]
    fn exact_prediction_has_zero_geometric_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tg = targets(&mut rng, 1);
        let p = tg[0].pose;
        let pts: Vec<f64> = tg[0].points.iter().flatten().copied().collect();
        let out = ScfOutput {
            partition: ScenePartition { groups: vec![] },
            frames: vec![ForecastFrame {
                pose: [p.x, p.y, p.yaw],
                points: Tensor::from_vec(&[15, 3], pts).unwrap(),
                logits: Tensor::zeros(&[15, C]),
                ..frame(&mut rng, 1)
            }],
        };
        let l = forecast_loss(&out, &tg, &grid(), &LossConfig::default()).unwrap();
        assert!(l.chamfer[0] < 1e-20 && l.plan[0] < 1e-20, "{l:?}");
        assert!(l.focal[0] > 0.0);
    }

    #[test]
    fn leaving_the_grid_does_not_escape_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tg = targets(&mut rng, 1);
        let mut out = output(&mut rng, 1);
        out.frames[0].points = Tensor::from_fn(&[20, 3], |i| if i % 3 == 0 { 30.0 } else { 0.0 });
        let l = forecast_loss(&out, &tg, &grid(), &LossConfig::default()).unwrap();
        assert!(l.chamfer[0] > 15.0 * 20.0 * 20.0, "{l:?}");
        assert_eq!(l.focal[0], 0.0);
        // the matched points are pulled back toward the targets
        let g = l.grad.points[0].as_ref().unwrap();
        assert!((0..20).all(|r| g.row(r)[0] >= 0.0));
        assert!((0..20).map(|r| g.row(r)[0]).sum::<f64>() > 0.0);
    }

    #[test]
    fn yaw_error_is_wrapped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tg = targets(&mut rng, 1);
        tg[0].pose = Pose::new(0.0, 0.0, 3.1, 1);
        let mut out = output(&mut rng, 1);
        out.frames[0].pose = [0.0, 0.0, -3.1];
        let l = forecast_loss(&out, &tg, &grid(), &LossConfig::default()).unwrap();
        let d = 2.0 * std::f64::consts::PI - 6.2;
        assert!((l.plan[0] - d * d).abs() < 1e-12);
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = output(&mut rng, 2);
        let tg = targets(&mut rng, 3);
        assert!(forecast_loss(&out, &tg, &grid(), &LossConfig::default()).is_err());
    }

    #[test]
    fn zero_weights_give_pure_pretrain_total() {
        let terms = LossTerms {
            chamfer_initial: 1.5,
            chamfer_layers: vec![0.5, 0.25],
            focal_layers: vec![0.125, 0.0625],
            chamfer_forecast: vec![3.0, 4.0],
            focal_forecast: vec![1.0, 2.0],
            plan: vec![7.0, 9.0],
        };
        let zero = LossConfig {
            lambda_chamfer: 0.0,
            lambda_focal: 0.0,
            lambda_plan: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(terms.total(&zero), terms.pretrain());
        assert_eq!(terms.pretrain(), 1.5 + 0.5 + 0.25 + 0.125 + 0.0625);
        let w = LossConfig::default();
        assert!((terms.total(&w) - (terms.pretrain() + 7.0 + 3.0 + 1.6)).abs() < 1e-12);
        let cols = LossTerms::columns(2, 2);
        assert_eq!(cols.len(), terms.values(2, 2).len());
    }

    #[test]
    fn pretrain_gradient_matches_finite_differences() {
        let wc = WorldConfig::default();
        let seq = SceneSequence::generate(11, &wc).unwrap();
        let field = seq.field();
        let wps = seq.past_waypoints();
        let full = seq.union_targets(&union_grid(&wc).unwrap()).unwrap();
        // a sparse target keeps nearest-neighbour switches (where the focal
        // targets jump) away from the probes
        let keep: Vec<usize> = (0..full.len()).step_by(full.len() / 12).collect();
        let tg = TimedTargets {
            points: keep.iter().map(|&i| full.points[i]).collect(),
            labels: keep.iter().map(|&i| full.labels[i]).collect(),
            timestamps: keep.iter().map(|&i| full.timestamps[i].clone()).collect(),
        };
        let cfg = ModelConfig {
            n_queries: 32,
            query_split: vec![16, 8, 8],
            n_layers: 2,
            points_ladder: vec![2, 4],
            embed_dim: 16,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Rap::new(&cfg, C, 2, ([-12.0, -12.0, -1.0], [12.0, 12.0, 3.0]), &mut rng).unwrap();
        m.queries.timestamps = timestamps_from_split(&cfg.query_split);
        let focal = LossConfig::default().focal();
        let (out, cache) = m.forward(&wps, &field, true).unwrap();
        let l = pretrain_loss(&out, &tg, focal).unwrap();
        m.zero_grad();
        m.backward(&cache, &out, &l.grad).unwrap();
        let an = m.flat_grads();
        let mut pm = m.clone();
        let rep = check_gradient(
            |x| {
                pm.set_flat_values(x);
                let (o, _) = pm.forward(&wps, &field, true).unwrap();
                pretrain_loss(&o, &tg, focal).unwrap().terms.pretrain()
            },
            &m.flat_values(),
            &an,
            &GradCheckConfig {
                step: 1e-5,
                tolerance: 1e-4,
                floor: 1e-2,
                max_entries: 200,
                ..GradCheckConfig::default()
            },
        );
        assert!(rep.passed(), "{} {:?}", rep.max_rel_err, &rep.failures[..rep.failures.len().min(4)]);
        assert_eq!(l.final_matching.match_p_to_g.len(), out.last().points.rows());
    }
}
