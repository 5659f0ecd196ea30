//! Held-out evaluation and forecast export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::comment_block;
use crate::error::{Error, Result};
use crate::geometry::{LabeledPoint, LabeledPointCloud};
use crate::metrics::{argmax, collides, constant_velocity_baseline, trajectory_l2, EvalAccumulator, EvalReport, Footprint};
use crate::model::{Prediction, Sample, WorldModel};
use crate::scalar::Scalar;

/// Scores one prediction into `acc`.
pub fn score_prediction(acc: &mut EvalAccumulator, sample: &Sample, pred: &Prediction, footprint: &Footprint) -> Result<()> {
    for (t, (p, g)) in pred.occupancy.iter().zip(&sample.occupancy).enumerate() {
        acc.add_occupancy(t, p, g);
    }
    let l2 = trajectory_l2(&pred.poses, &sample.future)?;
    let base = constant_velocity_baseline(&sample.past, sample.future.len())?;
    let base_l2 = trajectory_l2(&base, &sample.future)?;
    let hits: Vec<bool> = pred
        .poses_in_true_frame
        .iter()
        .enumerate()
        .map(|(t, p)| collides(p, &sample.occupancy[t + 1], &sample.grid, footprint))
        .collect();
    acc.add_plan(&l2, &base_l2, &hits);
    Ok(())
}

/// Runs inference on every sample and pools the scores.
pub fn evaluate<T: Scalar>(model: &WorldModel<T>, samples: &[Sample], n_classes: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptySet("evaluation samples"));
    }
    let mut acc = EvalAccumulator::new(n_classes, samples[0].future.len());
    let fp = Footprint::default();
    for s in samples {
        let t0 = Instant::now();
        let pred = model.predict(s)?;
        acc.add_runtime(t0.elapsed().as_secs_f64() * 1e3);
        score_prediction(&mut acc, s, &pred, &fp)?;
    }
    acc.finish()
}

/// Writes `forecast_t{t}.xyz` for every future frame (points in that
/// frame's predicted ego coordinates, argmax labels) and `trajectory.csv`.
/// Returns the written paths.
pub fn export_forecast(pred: &Prediction, dir: &Path, config_text: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = comment_block(config_text);
    let mut written = Vec::new();
    for (t, (pts, logits)) in pred.forecast_points.iter().zip(&pred.forecast_logits).enumerate() {
        let cloud = LabeledPointCloud {
            points: pts
                .iter()
                .zip(logits)
                .map(|(p, z)| LabeledPoint {
                    position: *p,
                    label: argmax(z),
                    timestamp: t + 1,
                })
                .collect(),
        };
        let path = dir.join(format!("forecast_t{}.xyz", t + 1));
        let text = header.clone() + &crate::geometry::xyz::format_xyz(&cloud);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let mut csv = header;
    csv.push_str("t,x,y,yaw\n");
    for (t, p) in pred.poses.iter().enumerate() {
        let _ = writeln!(csv, "{},{:?},{:?},{:?}", t + 1, p.x, p.y, p.yaw);
    }
    let path = dir.join("trajectory.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::geometry::xyz::parse_xyz;
    use crate::world::{SceneSequence, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> Sample {
        let wc = WorldConfig::default();
        Sample::from_sequence(&SceneSequence::generate(seed, &wc).unwrap(), &wc).unwrap()
    }

    #[test]
    fn ground_truth_as_prediction_scores_perfectly() {
        let s = sample(4);
        let pred = Prediction {
            occupancy: s.occupancy.clone(),
            poses: s.future.clone(),
            poses_in_true_frame: s.future.iter().map(|p| p.relative(p)).collect(),
            forecast_points: vec![],
            forecast_logits: vec![],
        };
        let mut acc = EvalAccumulator::new(6, 4);
        score_prediction(&mut acc, &s, &pred, &Footprint::default()).unwrap();
        let r = acc.finish().unwrap();
        assert!(r.miou.iter().all(|&m| m == 1.0), "{:?}", r.miou);
        assert!(r.iou.iter().all(|&m| m == 1.0));
        assert!(r.l2.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn export_writes_one_file_per_frame_plus_trajectory() {
        let s = sample(5);
        let wc = WorldConfig::default();
        let cfg = ModelConfig {
            n_queries: 40,
            query_split: vec![24, 4, 4, 4, 4],
            n_layers: 2,
            points_ladder: vec![2, 4],
            embed_dim: 16,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let m = WorldModel::<f64>::new(&cfg, &wc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pred = m.predict(&s).unwrap();
        let dir = std::env::temp_dir().join(format!("sqworld-export-{}", std::process::id()));
        let files = export_forecast(&pred, &dir, "seed = 3\n").unwrap();
        assert_eq!(files.len(), 5);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("# seed = 3\n"));
        let cloud = parse_xyz::<f64>(&text).unwrap();
        assert_eq!(cloud.len(), pred.forecast_points[0].len());
        let traj = std::fs::read_to_string(&files[4]).unwrap();
        assert_eq!(traj.lines().filter(|l| !l.starts_with('#')).count(), 5);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
