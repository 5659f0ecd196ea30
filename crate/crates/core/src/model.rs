//! The full world model: perception followed by autoregressive forecasting,
//! with per-sample training steps and inference.

use rand::Rng;

use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::forecast::{Scf, ScfInput, ScfOutput};
use crate::geometry::{ChamferResult, GridSpec, Pose, SparseOccupancy, TimedTargets};
use crate::metrics::prediction_to_occupancy;
use crate::nn::layers::{Module, Param};
use crate::nn::tensor::Tensor;
use crate::perception::{Rap, RapGrad, RapOutput};
use crate::scalar::{Scalar, Vec3};
use crate::scheduling::{forecast_loss, pretrain_loss, FrameTarget, LossTerms};
use crate::world::{union_grid, FeatureField, SceneSequence, WorldConfig};

/// Everything a training step or an evaluation needs from one sequence.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Past and current waypoints relative to the current pose.
    pub past: Vec<Pose<f64>>,
    /// True future poses relative to the current pose.
    pub future: Vec<Pose<f64>>,
    pub field: FeatureField,
    pub union: TimedTargets<f64>,
    pub frames: Vec<FrameTarget>,
    /// Occupancy of horizons `0..=f`, each in its own ego frame.
    pub occupancy: Vec<SparseOccupancy>,
    pub grid: GridSpec<f64>,
}

impl Sample {
    pub fn from_sequence(seq: &SceneSequence, world: &WorldConfig) -> Result<Self> {
        let union = seq.union_targets(&union_grid(world)?)?;
        let future = seq.future_waypoints();
        let frames = future
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                let occ = seq.horizon(i + 1);
                let mut points = Vec::with_capacity(occ.len());
                let mut labels = Vec::with_capacity(occ.len());
                for (c, &l) in occ.iter() {
                    points.push(seq.grid.cell_center(c));
                    labels.push(l);
                }
                FrameTarget { pose: *pose, points, labels }
            })
            .collect();
        Ok(Self {
            past: seq.past_waypoints(),
            future,
            field: seq.field(),
            union,
            frames,
            occupancy: (0..=seq.future_frames).map(|t| seq.horizon(t).clone()).collect(),
            grid: seq.grid,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    EndToEnd,
}

/// Loss terms of one step plus the final-layer matching against the union
/// targets (for the statistics matrix).
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub terms: LossTerms,
    pub matching: ChamferResult<f64>,
    /// Source query of every final-layer point.
    pub point_sources: Vec<usize>,
}

/// Inference result of one sample, mapped for evaluation. The current frame
/// is read from the final perception layer and frame `t` from the forecast.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Occupancy of horizons `0..=f`, each in that horizon's true ego frame.
    pub occupancy: Vec<SparseOccupancy>,
    /// Planned poses relative to the current pose.
    pub poses: Vec<Pose<f64>>,
    /// Planned pose of horizon `t` expressed in the true frame of horizon `t`.
    pub poses_in_true_frame: Vec<Pose<f64>>,
    /// Forecast points and logits per future frame, in the predicted frame.
    pub forecast_points: Vec<Vec<Vec3<f64>>>,
    pub forecast_logits: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel<T> {
    pub rap: Rap<T>,
    pub scf: Scf<T>,
    pub temporal_mask: bool,
}

impl<T: Scalar> Module<T> for WorldModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.rap.visit(f);
        self.scf.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.rap.visit_mut(f);
        self.scf.visit_mut(f);
    }
}

fn rows3<T: Scalar>(t: &Tensor<T>) -> Vec<Vec3<f64>> {
    (0..t.rows()).map(|i| { let r = t.row(i); [r[0].f64(), r[1].f64(), r[2].f64()] }).collect()
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.f64()).collect()).collect()
}

impl<T: Scalar> WorldModel<T> {
    pub fn new<R: Rng>(model: &ModelConfig, world: &WorldConfig, rng: &mut R) -> Result<Self> {
        model.validate()?;
        if model.future_frames() != world.future_frames {
            return Err(Error::config(
                "model.query_split",
                format!("needs {} groups for {} future frames", world.future_frames + 1, world.future_frames),
            ));
        }
        let ug = union_grid(world)?;
        let extent = (ug.origin, ug.extent_max());
        let rap = Rap::new(model, world.n_classes, world.past_frames, extent, rng)?;
        let scf = Scf::new(model, world.n_classes, world.past_frames, rng);
        Ok(Self {
            rap,
            scf,
            temporal_mask: model.temporal_mask,
        })
    }

    pub fn timestamps(&self) -> &[usize] {
        &self.rap.queries.timestamps
    }

    pub fn set_timestamps(&mut self, ts: Vec<usize>) {
        self.rap.queries.timestamps = ts;
    }

    fn mask(&self, phase: Phase) -> bool {
        phase == Phase::EndToEnd && self.temporal_mask
    }

    fn scf_input<'a>(out: &'a RapOutput<T>, ts: &'a [usize], past: &'a [Pose<f64>]) -> ScfInput<'a, T> {
        let last = out.last();
        ScfInput {
            embeddings: &last.embeddings,
            positions: &last.positions,
            offsets: &last.offsets,
            logits: &last.logits,
            points_per_query: last.points_per_query,
            timestamps: ts,
            waypoints: past,
        }
    }

    /// Forward, loss and backward for one sample. Gradients are added to the
    /// parameters' accumulators; call `zero_grad` first for a fresh step.
    pub fn train_step(&mut self, sample: &Sample, phase: Phase, weights: &LossConfig) -> Result<StepOutput> {
        let (out, cache) = self.rap.forward(&sample.past, &sample.field, self.mask(phase))?;
        let pre = pretrain_loss(&out, &sample.union, weights.focal())?;
        let mut terms = pre.terms;
        let mut grad: RapGrad<T> = pre.grad;
        if phase == Phase::EndToEnd && self.scf.future_frames > 0 {
            let ts = self.rap.queries.timestamps.clone();
            let input = Self::scf_input(&out, &ts, &sample.past);
            let (sout, scache) = self.scf.forward(&input)?;
            let fl = forecast_loss(&sout, &sample.frames, &sample.grid, weights)?;
            let gi = self.scf.backward(&scache, &input, &sout, &fl.grad)?;
            let l = out.layers.len() - 1;
            grad.add_final_embeddings(gi.embeddings);
            grad.add_final_positions(gi.positions);
            grad.add_final_offsets(gi.offsets);
            grad.add_logits(l, gi.logits);
            terms.chamfer_forecast = fl.chamfer;
            terms.focal_forecast = fl.focal;
            terms.plan = fl.plan;
        }
        self.rap.backward(&cache, &out, &grad)?;
        let ppq = out.last().points_per_query;
        let m = &pre.final_matching;
        Ok(StepOutput {
            terms,
            matching: ChamferResult {
                value: m.value.f64(),
                match_p_to_g: m.match_p_to_g.clone(),
                match_g_to_p: m.match_g_to_p.clone(),
            },
            point_sources: (0..out.last().points.rows()).map(|i| i / ppq).collect(),
        })
    }

    /// Loss terms without touching gradients.
    pub fn evaluate_loss(&self, sample: &Sample, phase: Phase, weights: &LossConfig) -> Result<LossTerms> {
        let (out, _) = self.rap.forward(&sample.past, &sample.field, self.mask(phase))?;
        let mut terms = pretrain_loss(&out, &sample.union, weights.focal())?.terms;
        if phase == Phase::EndToEnd && self.scf.future_frames > 0 {
            let (sout, _) = self.scf.forward(&Self::scf_input(&out, self.timestamps(), &sample.past))?;
            let fl = forecast_loss(&sout, &sample.frames, &sample.grid, weights)?;
            terms.chamfer_forecast = fl.chamfer;
            terms.focal_forecast = fl.focal;
            terms.plan = fl.plan;
        }
        Ok(terms)
    }

    pub fn forward(&self, sample: &Sample) -> Result<(RapOutput<T>, ScfOutput<T>)> {
        let (out, _) = self.rap.forward(&sample.past, &sample.field, self.temporal_mask)?;
        let (sout, _) = self.scf.forward(&Self::scf_input(&out, self.timestamps(), &sample.past))?;
        Ok((out, sout))
    }

    /// Runs inference and maps every output into the frames used for scoring.
    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let (out, sout) = self.forward(sample)?;
        let last = out.last();
        let grid = &sample.grid;
        let mut occupancy = vec![prediction_to_occupancy(&rows3(&last.points), &rows(&last.logits), grid)?];
        let mut poses = Vec::new();
        let mut in_true = Vec::new();
        let mut forecast_points = Vec::new();
        let mut forecast_logits = Vec::new();
        for (t, f) in sout.frames.iter().enumerate() {
            let pose = Pose::new(f.pose[0].f64(), f.pose[1].f64(), f.pose[2].f64(), t as i64 + 1);
            let truth = sample.future[t];
            let pts = rows3(&f.points);
            let mapped: Vec<Vec3<f64>> = pts.iter().map(|p| truth.from_reference(&pose.to_reference(p))).collect();
            let logits = rows(&f.logits);
            occupancy.push(prediction_to_occupancy(&mapped, &logits, grid)?);
            poses.push(pose);
            in_true.push(truth.relative(&pose));
            forecast_points.push(pts);
            forecast_logits.push(logits);
        }
        Ok(Prediction {
            occupancy,
            poses,
            poses_in_true_frame: in_true,
            forecast_points,
            forecast_logits,
        })
    }
}
