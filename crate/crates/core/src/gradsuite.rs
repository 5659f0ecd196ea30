//! The finite-difference gradient suite run by `sqworld gradcheck`.
//!
//! Every check uses central differences with `h = 1e-4` in `f64`. Inputs are
//! random but seeded, so a run is reproducible from the config seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RunConfig};
use crate::error::Result;
use crate::forecast::ego::EgoAttention;
use crate::geometry::{chamfer_distance, chamfer_gradient, TimedTargets};
use crate::model::{Sample, WorldModel};
use crate::nn::attention::{TauMode, TsMhsa};
use crate::nn::gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
use crate::nn::layers::{Linear, Mlp, Module};
use crate::nn::loss::focal_loss;
use crate::nn::tensor::Tensor;
use crate::scheduling::pretrain_loss;
use crate::world::SceneSequence;

pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn settings(tolerance: f64, max_entries: usize, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        step: STEP,
        tolerance,
        max_entries,
        seed,
        ..GradCheckConfig::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks every parameter of `m` and every input of `f` (a list of
/// tensors) for a scalar loss `f(module, inputs)`.
fn check_module<M: Module<f64> + Clone>(
    m: &M,
    inputs: &[Tensor<f64>],
    input_grads: &[Tensor<f64>],
    f: impl Fn(&M, &[Tensor<f64>]) -> f64,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut probe = m.clone();
    report.merge(check_gradient(
        |x| {
            probe.set_flat_values(x);
            f(&probe, inputs)
        },
        &m.flat_values(),
        &m.flat_grads(),
        cfg,
    ));
    for (k, (x, g)) in inputs.iter().zip(input_grads).enumerate() {
        let mut moved = inputs.to_vec();
        report.merge(check_gradient(
            |v| {
                moved[k] = Tensor::from_vec(x.shape(), v.to_vec()).expect("same shape");
                f(m, &moved)
            },
            x.data(),
            g.data(),
            cfg,
        ));
    }
    report
}

fn linear_and_mlp(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = settings(1e-6, 256, seed);
    let mut report = GradCheckReport::default();

    let mut lin = Linear::<f64>::new("lin", 8, 12, 1.0, &mut rng);
    lin.bias.value = uniform(&mut rng, &[12], 0.5);
    let x = uniform(&mut rng, &[5, 8], 1.0);
    let w = uniform(&mut rng, &[5, 12], 1.0);
    lin.zero_grad();
    let dx = lin.backward(&x, &w)?;
    report.merge(check_module(&lin, &[x], &[dx], |l, i| dot(&l.forward(&i[0]).expect("shape"), &w), &cfg));

    let mut mlp = Mlp::<f64>::new("mlp", &[6, 10, 10, 4], 1.0, &mut rng);
    let x = uniform(&mut rng, &[4, 6], 1.0);
    let w = uniform(&mut rng, &[4, 4], 1.0);
    let (_, cache) = mlp.forward(&x)?;
    mlp.zero_grad();
    let dx = mlp.backward(&cache, &w)?;
    report.merge(check_module(&mlp, &[x], &[dx], |m, i| dot(&m.forward(&i[0]).expect("shape").0, &w), &cfg));
    Ok(report)
}

fn focal(seed: u64, cfg: &RunConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.world.n_classes;
    let logits = uniform(&mut rng, &[24, c], 3.0);
    let targets: Vec<usize> = (0..24).map(|_| rng.gen_range(0..c)).collect();
    let fp = cfg.loss.focal();
    let (_, g) = focal_loss(&logits, &targets, fp)?;
    Ok(check_gradient(
        |v| focal_loss(&Tensor::from_vec(&[24, c], v.to_vec()).expect("shape"), &targets, fp).expect("valid").0,
        logits.data(),
        g.data(),
        &settings(1e-6, 24 * c, seed),
    ))
}

fn ts_mhsa(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let mut layer = TsMhsa::<f64>::new("attn", 8, 2, n, TauMode::PerHeadPerQuery, &mut rng);
    layer.tau_raw.value = uniform(&mut rng, &[2, n], 0.5);
    let x = uniform(&mut rng, &[n, 8], 1.0);
    let p = uniform(&mut rng, &[n, 3], 1.5);
    let ts: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let w = uniform(&mut rng, &[n, 8], 1.0);
    let (_, cache) = layer.forward(&x, &p, &ts, true)?;
    layer.zero_grad();
    let (dx, dp) = layer.backward(&cache, &w)?;
    Ok(check_module(
        &layer,
        &[x, p],
        &[dx, dp],
        |l, i| dot(&l.forward(&i[0], &i[1], &ts, true).expect("shape").0, &w),
        &settings(1e-5, 400, seed),
    ))
}

fn ego_attention(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = EgoAttention::<f64>::new("ego", 8, &mut rng);
    // make the distance penalty large enough to matter
    m.tau.layers[1].weight.value.scale(10.0);
    m.tau.layers[1].bias.value.fill(-0.5);
    let q = uniform(&mut rng, &[1, 8], 1.0);
    let k = uniform(&mut rng, &[7, 8], 1.0);
    let p = uniform(&mut rng, &[7, 3], 2.0);
    let w = uniform(&mut rng, &[1, 8], 1.0);
    let (_, cache) = m.forward(&q, &k, &p)?;
    m.zero_grad();
    let (dq, dk, dp) = m.backward(&cache, &w)?;
    Ok(check_module(
        &m,
        &[q, k, p],
        &[dq, dk, dp],
        |m, i| dot(&m.forward(&i[0], &i[1], &i[2]).expect("shape").0, &w),
        &settings(1e-4, 400, seed),
    ))
}

fn chamfer(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pt = |n: usize| -> Vec<[f64; 3]> { (0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)]).collect() };
    let pred = pt(40);
    let gt = pt(55);
    let r = chamfer_distance(&pred, &gt)?;
    let g: Vec<f64> = chamfer_gradient(&pred, &gt, &r)?.into_iter().flatten().collect();
    let flat: Vec<f64> = pred.iter().flatten().copied().collect();
    Ok(check_gradient(
        |v| {
            let p: Vec<[f64; 3]> = v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            chamfer_distance(&p, &gt).expect("non-empty").value
        },
        &flat,
        &g,
        &settings(1e-5, flat.len(), seed),
    ))
}

/// A 32-query (at `f = 4`), two-layer stack with the configured switches. At full size
/// the loss runs to ~1e5 and its rounding noise swamps `h = 1e-4` differences
/// for the small entries.
fn probe_model(cfg: &RunConfig) -> ModelConfig {
    let f = cfg.world.future_frames;
    let mut split = vec![2; f + 1];
    split[0] = 24;
    ModelConfig {
        n_queries: 24 + 2 * f,
        query_split: split,
        n_layers: 2,
        points_ladder: vec![2, 4],
        embed_dim: 16,
        n_heads: 2,
        ..cfg.model.clone()
    }
}

/// Full perception loss of a small stack on one generated sequence, against
/// every twelfth point of its union target.
fn pretrain(seed: u64, cfg: &RunConfig) -> Result<GradCheckReport> {
    let seq = SceneSequence::generate(cfg.seed, &cfg.world)?;
    let sample = Sample::from_sequence(&seq, &cfg.world)?;
    let full = &sample.union;
    // nearest-neighbour switches make the focal targets jump; a sparse
    // target keeps them away from the probes
    let stride = (full.len() / 12).max(1);
    let keep: Vec<usize> = (0..full.len()).step_by(stride).collect();
    let tg = TimedTargets {
        points: keep.iter().map(|&i| full.points[i]).collect(),
        labels: keep.iter().map(|&i| full.labels[i]).collect(),
        timestamps: keep.iter().map(|&i| full.timestamps[i].clone()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = WorldModel::<f64>::new(&probe_model(cfg), &cfg.world, &mut rng)?;
    let mut rap = model.rap;
    let mask = cfg.model.temporal_mask;
    let fp = cfg.loss.focal();
    let (out, cache) = rap.forward(&sample.past, &sample.field, mask)?;
    let l = pretrain_loss(&out, &tg, fp)?;
    rap.zero_grad();
    rap.backward(&cache, &out, &l.grad)?;
    let mut probe = rap.clone();
    Ok(check_gradient(
        |x| {
            probe.set_flat_values(x);
            let (o, _) = probe.forward(&sample.past, &sample.field, mask).expect("forward");
            pretrain_loss(&o, &tg, fp).expect("targets").terms.pretrain()
        },
        &rap.flat_values(),
        &rap.flat_grads(),
        &GradCheckConfig {
            floor: 1e-2,
            ..settings(1e-4, 200, seed)
        },
    ))
}

/// Runs every check; inputs are seeded from `cfg.seed`.
pub fn run_suite(cfg: &RunConfig) -> Result<Vec<SuiteEntry>> {
    let s = cfg.seed;
    let entry = |name, tolerance, report| SuiteEntry { name, tolerance, report };
    Ok(vec![
        entry("linear_mlp", 1e-6, linear_and_mlp(s)?),
        entry("focal_loss", 1e-6, focal(s.wrapping_add(1), cfg)?),
        entry("ts_mhsa", 1e-5, ts_mhsa(s.wrapping_add(2))?),
        entry("ego_attention", 1e-4, ego_attention(s.wrapping_add(3))?),
        entry("chamfer", 1e-5, chamfer(s.wrapping_add(4))?),
        entry("pretrain_loss", 1e-4, pretrain(s.wrapping_add(5), cfg)?),
    ])
}
