//! Two-stage optimisation driver.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autograd::optim::Adam;
use autograd::{Graph, ParamStore};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::MultiContrastSample;
use crate::diffusion::{make_schedule, DiffusionSchedule, SamplerNoise};
use crate::error::{Error, Result};
use crate::model::{stage1_loss, stage2_loss, stage_trainable, Batch, LossParts, Model};
use crate::seed;

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub l_img: f64,
    pub l_dc: f64,
    pub l_diff: f64,
    pub lr: f64,
    pub total: f64,
}

/// Appends [`StepRecord`]s as JSON lines.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    /// Opens `path`, truncating it unless `append` is set.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub stage: Stage,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub schedule: Option<DiffusionSchedule>,
    pub step: u64,
    samples: Vec<MultiContrastSample>,
}

impl Trainer {
    pub fn stage_one(config: &RunConfig, samples: Vec<MultiContrastSample>) -> Result<Self> {
        config.validate()?;
        let (params, model) = Model::init::<f32>(config);
        let optimizer = Adam::new(params.len());
        Self::build(config.clone(), Stage::One, model, params, optimizer, None, 0, samples)
    }

    /// Starts stage two from a finished stage-one checkpoint. PE and the
    /// network come from the checkpoint; CE and the denoiser keep their
    /// seeded initial values, which stage one never touches.
    pub fn stage_two(config: &RunConfig, stage_one: &Checkpoint, samples: Vec<MultiContrastSample>) -> Result<Self> {
        config.validate()?;
        if stage_one.stage != Stage::One {
            return Err(Error::config("stage two must start from a stage-one checkpoint"));
        }
        if !config.model.use_prior {
            return Err(Error::config("stage two needs model.use_prior = true"));
        }
        let (mut params, model) = Model::init::<f32>(config);
        for (_, name, value) in stage_one.params.iter() {
            let Some(dst) = params.id(name) else {
                return Err(Error::config(format!("stage-one parameter {name} does not exist in this model")));
            };
            if params.get(dst).shape() != value.shape() {
                return Err(Error::config(format!("stage-one parameter {name} has a different shape")));
            }
            *params.get_mut(dst) = value.clone();
        }
        let d = &config.diffusion;
        let schedule = make_schedule(d.steps, d.beta_start, d.beta_end)?;
        let optimizer = Adam::new(params.len());
        Self::build(config.clone(), Stage::Two, model, params, optimizer, Some(schedule), 0, samples)
    }

    /// Continues from any checkpoint, using its stored config.
    pub fn resume(ckpt: Checkpoint, samples: Vec<MultiContrastSample>) -> Result<Self> {
        let model = ckpt.model();
        let schedule = match ckpt.stage {
            Stage::One => None,
            Stage::Two => Some(ckpt.schedule()?),
        };
        Self::build(ckpt.config, ckpt.stage, model, ckpt.params, ckpt.optimizer, schedule, ckpt.step, samples)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        config: RunConfig,
        stage: Stage,
        model: Model,
        params: ParamStore<f32>,
        optimizer: Adam<f32>,
        schedule: Option<DiffusionSchedule>,
        step: u64,
        samples: Vec<MultiContrastSample>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("training needs at least one sample"));
        }
        Ok(Self { config, stage, model, params, optimizer, schedule, step, samples })
    }

    /// Sample indices of the batch for step `step` (0-based): consecutive
    /// slices of per-epoch permutations.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.samples.len();
        let b = self.config.train.batch_size;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..b)
            .map(|i| {
                let global = step * b as u64 + i as u64;
                let epoch = global / n as u64;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut seed::rng(self.config.train.seed, &[seed::stream::EPOCH, epoch]));
                    cached = Some((epoch, perm));
                }
                cached.as_ref().unwrap().1[(global % n as u64) as usize]
            })
            .collect()
    }

    fn stage_tag(&self) -> u64 {
        match self.stage {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    /// Loss of the next step without updating anything.
    pub fn peek_loss(&self) -> Result<LossParts> {
        let batch = self.batch(self.step)?;
        let mut g = Graph::inference(&self.params);
        Ok(self.loss(&mut g, &batch, self.step).1)
    }

    fn batch(&self, step: u64) -> Result<Batch> {
        let picked: Vec<&MultiContrastSample> = self.batch_indices(step).into_iter().map(|i| &self.samples[i]).collect();
        Batch::new(&picked, self.config.data.scale)
    }

    fn loss(&self, g: &mut Graph<'_, f32>, batch: &Batch, step: u64) -> (autograd::Var, LossParts) {
        match (self.stage, &self.schedule) {
            (Stage::Two, Some(schedule)) => {
                let mut rng = seed::rng(self.config.train.seed, &[seed::stream::STEP, self.stage_tag(), step]);
                let noise = SamplerNoise::draw(&mut rng, batch.ids.len(), self.config.model.prior_dim(), schedule.steps());
                stage2_loss(g, &self.model, batch, &self.config, schedule, &noise)
            }
            _ => stage1_loss(g, &self.model, batch, &self.config),
        }
    }

    /// One optimisation step. A non-finite loss aborts with the batch ids.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let batch = self.batch(step)?;
        let stage = self.stage_tag() as u8;
        let (grads, parts) = {
            let mut g = Graph::with_trainable(&self.params, stage_trainable(stage, &self.config.model));
            let (loss, parts) = self.loss(&mut g, &batch, step);
            if !parts.total.is_finite() || !g.item(loss).is_finite() {
                return Err(Error::NonFinite { step: step + 1, batch: batch.ids.clone() });
            }
            (g.backward(loss), parts)
        };
        if !grads.param_norm().is_finite() {
            return Err(Error::NonFinite { step: step + 1, batch: batch.ids });
        }
        let lr = self.config.train.lr_at(step);
        self.optimizer.step(&mut self.params, &grads, lr);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            l_img: parts.l_img,
            l_dc: parts.l_dc,
            l_diff: parts.l_diff,
            lr,
            total: parts.total,
        })
    }

    /// Trains up to `config.train.total_steps`, calling `on_step` after each
    /// step (for logging and periodic checkpoints).
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.train.total_steps {
            let rec = self.step_once()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            schedule: self.schedule.clone(),
        }
    }

    pub fn samples(&self) -> &[MultiContrastSample] {
        &self.samples
    }
}

/// Runs a stage to completion, writing metrics and checkpoints under
/// `out_dir` (`metrics.jsonl`, `checkpoint.safetensors`, and
/// `checkpoint-<step>.safetensors` every `train.checkpoint_every` steps).
pub fn train_to_dir(trainer: &mut Trainer, out_dir: &Path, append_metrics: bool) -> Result<PathBuf> {
    train_to_dir_with(trainer, out_dir, append_metrics, |_| {})
}

/// [`train_to_dir`] with a per-step callback (progress reporting).
pub fn train_to_dir_with(
    trainer: &mut Trainer,
    out_dir: &Path,
    append_metrics: bool,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PathBuf> {
    let mut log = MetricsLog::open(&out_dir.join("metrics.jsonl"), append_metrics)?;
    let every = trainer.config.train.checkpoint_every;
    trainer.run(|t, rec| {
        log.write(rec)?;
        on_step(rec);
        if every > 0 && rec.step % every == 0 {
            log.flush()?;
            t.checkpoint().save(&out_dir.join(format!("checkpoint-{}.safetensors", rec.step)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let path = out_dir.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&path)?;
    Ok(path)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
