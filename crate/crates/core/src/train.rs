//! Two-phase training loop with timestamp self-scheduling, CSV logs,
//! checkpoints and resume.
//!
//! Pretraining epochs optimise the perception loss with the temporal mask
//! off. Query timestamps are re-assigned from the statistics matrix after
//! the last pretraining epoch and after every end-to-end epoch; the matrix
//! is reset at the start of each epoch.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{comment_block, RunConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::EvalReport;
use crate::model::{Phase, Sample, WorldModel};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::Module;
use crate::nn::optim::{AdamW, LrSchedule};
use crate::scheduling::{accumulate_counts, assign_timestamps, churn, LossTerms, StatMatrix};
use crate::world::{load_dataset, read_manifest, sequence_dir, SceneSequence};

/// Training sequences: read from `data_dir` when set, else generated from
/// seeds `seed, seed + 1, ...`.
pub fn training_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let n = cfg.train.sequences;
    let seqs = match &cfg.data_dir {
        Some(dir) => {
            let m = read_manifest(&sequence_dir(dir, 0))?;
            if m.world != cfg.world {
                return Err(Error::config("data_dir", "dataset was generated with a different [world] section"));
            }
            let all = load_dataset(dir)?;
            if all.len() < n {
                return Err(Error::config(
                    "train.sequences",
                    format!("dataset at {} has {} sequences, {n} requested", dir.display(), all.len()),
                ));
            }
            all.into_iter().take(n).collect()
        }
        None => (0..n)
            .map(|i| SceneSequence::generate(cfg.seed.wrapping_add(i as u64), &cfg.world))
            .collect::<Result<Vec<_>>>()?,
    };
    seqs.iter().map(|s| Sample::from_sequence(s, &cfg.world)).collect()
}

/// Held-out sequences, seeds starting at `seed + eval.seed_offset`.
pub fn held_out_samples(cfg: &RunConfig, count: usize) -> Result<Vec<Sample>> {
    let base = cfg.seed.wrapping_add(cfg.eval.seed_offset);
    (0..count)
        .map(|i| Sample::from_sequence(&SceneSequence::generate(base.wrapping_add(i as u64), &cfg.world)?, &cfg.world))
        .collect()
}

/// Per-epoch summary; `terms` follows [`LossTerms::columns`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub steps: usize,
    pub lr: f64,
    pub terms: Vec<f64>,
    pub total: f64,
    /// Fraction of queries whose timestamp changed at this epoch's assignment.
    pub churn: Option<f64>,
    pub validation: Option<Validation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub terms: Vec<f64>,
    pub total: f64,
    pub report: EvalReport,
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Pretrain => "pretrain",
        Phase::EndToEnd => "e2e",
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    /// The config exactly as supplied, echoed into every output.
    pub config_text: String,
    pub model: WorldModel<f64>,
    pub optim: AdamW<f64>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub stats: StatMatrix,
    pub records: Vec<EpochRecord>,
    /// Log and checkpoint directory.
    pub out: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, config_text: String) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = WorldModel::new(&cfg.model, &cfg.world, &mut rng)?;
        let optim = AdamW::new(cfg.train.optimizer, &model);
        let stats = StatMatrix::zeros(cfg.model.n_queries, cfg.world.future_frames + 1);
        Ok(Self {
            cfg,
            config_text,
            model,
            optim,
            epoch: 0,
            step: 0,
            stats,
            records: Vec::new(),
            out: None,
        })
    }

    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn total_epochs(&self) -> usize {
        self.cfg.train.pretrain_epochs + self.cfg.train.e2e_epochs
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.cfg.train.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::EndToEnd
        }
    }

    /// Learning-rate schedule; a zero `total_steps` spans the whole run.
    pub fn schedule(&self) -> LrSchedule {
        let mut s = self.cfg.train.schedule;
        if s.total_steps == 0 {
            s.total_steps = self.total_epochs() * self.cfg.train.sequences * self.cfg.train.repeats;
        }
        s
    }

    fn order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(self.cfg.train.repeats)).collect();
        if self.cfg.train.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            idx.shuffle(&mut rng);
        }
        idx
    }

    /// Runs one epoch over `train`, then re-assigns timestamps when due and
    /// scores `val` (if non-empty).
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::EmptySet("training samples"));
        }
        let e = self.epoch;
        let phase = self.phase_of(e);
        let schedule = self.schedule();
        let n_layers = self.cfg.model.n_layers;
        let future = self.cfg.world.future_frames;
        let cols = LossTerms::columns(n_layers, future).len();
        let mut sums = vec![0.0; cols];
        let mut total = 0.0;
        let mut lr = 0.0;
        let mut step_log = String::new();
        let order = self.order(e, train.len());
        self.stats.reset();
        for &i in &order {
            let s = &train[i];
            self.model.zero_grad();
            let out = self.model.train_step(s, phase, &self.cfg.loss)?;
            let t = out.terms.total(&self.cfg.loss);
            if !t.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            lr = schedule.rate(self.step);
            let norm = self.optim.update(&mut self.model, lr);
            self.step += 1;
            accumulate_counts(&mut self.stats, &out.matching, &out.point_sources, &s.union.timestamps)?;
            let vals = out.terms.values(n_layers, future);
            for (a, v) in sums.iter_mut().zip(&vals) {
                *a += v;
            }
            total += t;
            let _ = write!(step_log, "{},{},{},{i},{lr:?},{norm:?},{t:?}", e + 1, self.step, phase_name(phase));
            for v in &vals {
                let _ = write!(step_log, ",{v:?}");
            }
            step_log.push('\n');
        }
        let n = order.len() as f64;
        let assign_now = phase == Phase::EndToEnd || e + 1 == self.cfg.train.pretrain_epochs;
        let churn_value = if assign_now {
            let next = assign_timestamps(&self.stats, &self.cfg.model.query_split)?;
            let c = churn(self.model.timestamps(), &next);
            self.model.set_timestamps(next);
            Some(c)
        } else {
            None
        };
        self.epoch += 1;
        let validation = if val.is_empty() { None } else { Some(self.validate(val, phase)?) };
        let record = EpochRecord {
            epoch: self.epoch,
            phase,
            steps: order.len(),
            lr,
            terms: sums.iter().map(|s| s / n).collect(),
            total: total / n,
            churn: churn_value,
            validation,
        };
        if let Some(dir) = self.out.clone() {
            self.write_epoch(&dir, &record, &step_log)?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    fn validate(&self, val: &[Sample], phase: Phase) -> Result<Validation> {
        let (l, f) = (self.cfg.model.n_layers, self.cfg.world.future_frames);
        let mut sums = vec![0.0; LossTerms::columns(l, f).len()];
        let mut total = 0.0;
        for s in val {
            let t = self.model.evaluate_loss(s, phase, &self.cfg.loss)?;
            total += t.total(&self.cfg.loss);
            for (a, v) in sums.iter_mut().zip(t.values(l, f)) {
                *a += v;
            }
        }
        let n = val.len() as f64;
        Ok(Validation {
            terms: sums.iter().map(|s| s / n).collect(),
            total: total / n,
            report: evaluate(&self.model, val, self.cfg.world.n_classes)?,
        })
    }

    /// Runs epochs until `until` have completed (capped at the configured
    /// total), handing each record to `progress`.
    pub fn run(&mut self, until: usize, train: &[Sample], val: &[Sample], mut progress: impl FnMut(&EpochRecord)) -> Result<()> {
        let until = until.min(self.total_epochs());
        while self.epoch < until {
            let r = self.run_epoch(train, val)?;
            progress(&r);
            let every = self.cfg.train.checkpoint_every;
            let due = (every > 0 && self.epoch % every == 0) || self.epoch == until;
            if due {
                if let Some(dir) = self.out.clone() {
                    let ck = self.checkpoint();
                    ck.save(&dir.join(format!("checkpoint_e{:03}.ckpt", self.epoch)))?;
                    ck.save(&dir.join("latest.ckpt"))?;
                }
            }
        }
        Ok(())
    }

    pub fn step_columns(&self) -> Vec<String> {
        let mut c: Vec<String> = ["epoch", "step", "phase", "sample", "lr", "grad_norm", "total"].iter().map(|s| s.to_string()).collect();
        c.extend(LossTerms::columns(self.cfg.model.n_layers, self.cfg.world.future_frames));
        c
    }

    pub fn epoch_columns(&self) -> Vec<String> {
        let f = self.cfg.world.future_frames;
        let mut c: Vec<String> = ["epoch", "split", "phase", "steps", "lr", "total"].iter().map(|s| s.to_string()).collect();
        c.extend(LossTerms::columns(self.cfg.model.n_layers, f));
        c.extend((0..=f).map(|t| format!("miou_h{t}")));
        c.extend((0..=f).map(|t| format!("iou_h{t}")));
        c.extend((1..=f).map(|t| format!("l2_h{t}")));
        c.extend((1..=f).map(|t| format!("collision_h{t}")));
        c.push("churn".into());
        c
    }

    fn epoch_rows(&self, r: &EpochRecord) -> String {
        let f = self.cfg.world.future_frames;
        let blanks = |n: usize| ",".repeat(n);
        let mut s = format!("{},train,{},{},{:?},{:?}", r.epoch, phase_name(r.phase), r.steps, r.lr, r.total);
        for v in &r.terms {
            let _ = write!(s, ",{v:?}");
        }
        s.push_str(&blanks(2 * (f + 1) + 2 * f));
        match r.churn {
            Some(c) => {
                let _ = write!(s, ",{c:?}");
            }
            None => s.push(','),
        }
        s.push('\n');
        if let Some(v) = &r.validation {
            let _ = write!(s, "{},val,{},0,,{:?}", r.epoch, phase_name(r.phase), v.total);
            let rep = &v.report;
            for x in v.terms.iter().chain(&rep.miou).chain(&rep.iou).chain(&rep.l2).chain(&rep.collision) {
                let _ = write!(s, ",{x:?}");
            }
            s.push_str(",\n");
        }
        s
    }

    fn write_epoch(&self, dir: &Path, r: &EpochRecord, step_log: &str) -> Result<()> {
        let header = comment_block(&self.config_text);
        append(&dir.join("steps.csv"), &header, &self.step_columns().join(","), step_log)?;
        append(&dir.join("epochs.csv"), &header, &self.epoch_columns().join(","), &self.epoch_rows(r))?;
        let stats = dir.join(format!("stats_e{:03}.csv", r.epoch));
        std::fs::write(&stats, header + &self.stats.to_csv()).map_err(|e| Error::io(&stats, e))?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.put_module("model.", &self.model);
        for (i, (m, v)) in self.optim.m.iter().zip(&self.optim.v).enumerate() {
            ck.put_tensor(&format!("adam.m.{i:04}"), m);
            ck.put_tensor(&format!("adam.v.{i:04}"), v);
        }
        ck.put_meta("adam_step", self.optim.step);
        ck.put_meta("seed", self.cfg.seed);
        ck.put_meta("epoch", self.epoch);
        ck.put_meta("step", self.step);
        let ts: Vec<String> = self.model.timestamps().iter().map(usize::to_string).collect();
        ck.put_meta("timestamps", ts.join(" "));
        ck.put_meta("config", &self.config_text);
        ck
    }

    /// Restores a trainer from a checkpoint written under a compatible
    /// config (same seed, world, model and loss sections). `config_text` is
    /// what `cfg` was parsed from, not necessarily the checkpoint's copy.
    pub fn resume(cfg: RunConfig, config_text: String, ck: &Checkpoint) -> Result<Self> {
        let mut saved = RunConfig::from_toml(ck.meta_str("config")?)?;
        // the seed may have been overridden on the command line
        saved.seed = ck.meta_parse("seed")?;
        for (key, same) in [
            ("seed", saved.seed == cfg.seed),
            ("world", saved.world == cfg.world),
            ("model", saved.model == cfg.model),
            ("loss", saved.loss == cfg.loss),
        ] {
            if !same {
                return Err(Error::config(key, "differs from the checkpoint's config"));
            }
        }
        let mut t = Self::new(cfg, config_text)?;
        load_model(ck, &mut t.model)?;
        for (i, (m, v)) in t.optim.m.iter_mut().zip(t.optim.v.iter_mut()).enumerate() {
            let tm = ck.tensor(&format!("adam.m.{i:04}"))?;
            let tv = ck.tensor(&format!("adam.v.{i:04}"))?;
            if tm.shape() != m.shape() || tv.shape() != v.shape() {
                return Err(Error::Shape(format!("optimizer state {i} does not match the model")));
            }
            *m = tm;
            *v = tv;
        }
        t.optim.step = ck.meta_parse("adam_step")?;
        t.epoch = ck.meta_parse("epoch")?;
        t.step = ck.meta_parse("step")?;
        Ok(t)
    }
}

/// A model shaped by `cfg` with the checkpoint's parameters and timestamps.
pub fn model_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<WorldModel<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = WorldModel::new(&cfg.model, &cfg.world, &mut rng)?;
    load_model(ck, &mut model)?;
    Ok(model)
}

/// Loads parameters and query timestamps into `model`.
pub fn load_model(ck: &Checkpoint, model: &mut WorldModel<f64>) -> Result<()> {
    ck.load_module("model.", model)?;
    let ts = ck
        .meta_str("timestamps")?
        .split_whitespace()
        .map(|v| v.parse::<usize>().map_err(|_| Error::Parse("checkpoint timestamps are malformed".into())))
        .collect::<Result<Vec<_>>>()?;
    if ts.len() != model.timestamps().len() {
        return Err(Error::LengthMismatch {
            what: "checkpoint timestamps",
            left: ts.len(),
            right: model.timestamps().len(),
        });
    }
    model.set_timestamps(ts);
    Ok(())
}

/// Appends `rows` to a CSV, writing the config header and column line first
/// when the file does not exist yet.
fn append(path: &Path, header: &str, columns: &str, rows: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(header);
        s.push_str(columns);
        s.push('\n');
    }
    s.push_str(rows);
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
