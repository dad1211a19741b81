//! Adam, the step learning-rate schedule and the end-to-end training loop.
//!
//! One optimizer step consumes `batch_size` samples; the gradients of each
//! sample's objective are averaged. Every random choice (visiting order and
//! point sampling) is derived from the run seed and the epoch, so an epoch
//! can be replayed from a checkpoint taken at its start.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_block_points, split_blocks, Block, BlockingConfig, Sample, Scene};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::network::{attach_losses, Graph, HeadInputs, LossConfig, Model, ModelConfig, ParamStore, SampleTargets};
use crate::seed::{derive, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|(_, p)| Array2::zeros(p.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: 0.0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
///
/// Gradients are checked before anything is modified, so a rejected step
/// leaves parameters and moments untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Array2<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch {
            context: "adam_step tensors",
            expected: format!("{} gradients and moments", params.len()),
            got: format!("{} gradients, {} moments", grads.len(), state.m.len()),
        });
    }
    for (id, g) in params.ids().zip(grads) {
        let p = params.get(id);
        if g.dim() != p.dim() || state.m[id.index()].dim() != p.dim() {
            return Err(Error::ShapeMismatch {
                context: "adam_step gradient",
                expected: format!("{:?} for `{}`", p.dim(), params.name(id)),
                got: format!("{:?}", g.dim()),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.get_mut(id);
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_halving_period_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Loss terms, association costs and gradient mode.
    pub loss: LossConfig,
    pub blocking: BlockingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-4,
            lr_halving_period_epochs: 20,
            epochs: 100,
            batch_size: 1,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            blocking: BlockingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("initial_lr", "must be positive"));
        }
        if self.lr_halving_period_epochs == 0 {
            return Err(Error::config("lr_halving_period_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("adam", "betas must lie in [0, 1) and eps be positive"));
        }
        self.loss.validate()?;
        self.blocking.validate()
    }
}

/// `initial_lr * 2^-floor(epoch / period)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = epoch / cfg.lr_halving_period_epochs;
    cfg.initial_lr * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

/// Mean losses over one epoch's samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub samples: usize,
    pub losses: LossReport,
}

/// Blocks cut from the training scenes once, before the first epoch.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    blocks: Vec<Block>,
}

impl TrainingSet {
    /// Splits every scene into blocks, rejecting scenes with more instances
    /// than the model has boxes.
    pub fn new(scenes: &[Scene], blocking: &BlockingConfig, h_max: usize) -> Result<Self> {
        blocking.validate()?;
        let mut blocks = Vec::new();
        for scene in scenes {
            if scene.n_instances() > h_max {
                return Err(Error::TooManyInstances {
                    scene: scene.id.clone(),
                    instances: scene.n_instances(),
                    h_max,
                });
            }
            blocks.extend(
                split_blocks(scene, blocking.block_size, blocking.stride)?
                    .into_iter()
                    .filter(|b| b.n_points() > 0),
            );
        }
        if blocks.is_empty() {
            return Err(Error::Empty("training set has no points"));
        }
        Ok(Self { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Visiting order and sampled inputs for one epoch.
    pub fn epoch_samples(&self, seed: u64, epoch: usize, n_points: usize) -> Result<Vec<Sample>> {
        let mut order: Vec<usize> = (0..self.blocks.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, streams::SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);
        order
            .into_iter()
            .enumerate()
            .map(|(pos, i)| {
                let stream = derive(seed, streams::SAMPLE, epoch as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(derive(stream, i as u64, pos as u64));
                let block = sample_block_points(&self.blocks[i], n_points, true, &mut rng)?;
                Sample::from_block(&block)
            })
            .collect()
    }
}

/// Gradient of the sample's training objective with respect to every
/// parameter tensor, plus the sample's losses.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    loss: &LossConfig,
) -> Result<(LossReport, Vec<Array2<f64>>)> {
    let targets = SampleTargets::new(sample)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.full_forward(&mut g, &bound, &sample.features)?;
    let lv = attach_losses(&mut g, HeadInputs::from(&out), &targets, loss, None)?;
    let grads = g.backward(lv.objective);
    let per_param = model
        .params()
        .ids()
        .zip(bound.vars())
        .map(|(id, &v)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(model.params().get(id).dim()))
        })
        .collect();
    Ok((lv.report, per_param))
}

/// Losses of one sample without building gradients.
pub fn sample_losses(model: &Model, sample: &Sample, loss: &LossConfig) -> Result<LossReport> {
    let targets = SampleTargets::new(sample)?;
    let mut g = Graph::new();
    let bound = model.bind_constant(&mut g);
    let out = model.full_forward(&mut g, &bound, &sample.features)?;
    Ok(attach_losses(&mut g, HeadInputs::from(&out), &targets, loss, None)?.report)
}

/// Model, optimizer and progress of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub(crate) model: Model,
    pub(crate) config: TrainConfig,
    pub(crate) optimizer: OptimizerState,
    /// Index of the next epoch to run.
    pub(crate) epoch: usize,
    pub(crate) history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config)?;
        let optimizer = OptimizerState::new(model.params());
        Ok(Self {
            model,
            config,
            optimizer,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Changes the total epoch budget, e.g. to extend a resumed run.
    pub fn with_epochs(mut self, epochs: usize) -> Result<Self> {
        if epochs < self.epoch {
            return Err(Error::config(
                "epochs",
                format!("{} epochs have already been run", self.epoch),
            ));
        }
        self.config.epochs = epochs;
        Ok(self)
    }

    pub fn training_set(&self, scenes: &[Scene]) -> Result<TrainingSet> {
        TrainingSet::new(scenes, &self.config.blocking, self.model.config().h_max)
    }

    /// One optimizer step on a batch; returns the batch-mean losses.
    pub fn step(&mut self, batch: &[Sample], lr: f64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let h_max = self.model.config().h_max;
        let mut sum: Option<Vec<Array2<f64>>> = None;
        let mut report = LossReport::default();
        for sample in batch {
            if sample.t_gt() > h_max {
                return Err(Error::TooManyInstances {
                    scene: sample.id.clone(),
                    instances: sample.t_gt(),
                    h_max,
                });
            }
            let (r, grads) = sample_gradients(&self.model, sample, &self.config.loss)?;
            accumulate(&mut report, &r);
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(grads).for_each(|(a, g)| *a += &g),
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mut grads = sum.expect("non-empty batch");
        grads.iter_mut().for_each(|g| *g *= inv);
        adam_step(
            self.model.params_mut(),
            &grads,
            &mut self.optimizer,
            lr,
            &self.config.adam,
        )?;
        Ok(scaled(&report, inv))
    }

    /// Runs the next epoch over the training set.
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.config);
        let samples = data.epoch_samples(self.config.seed, epoch, self.config.blocking.train_points)?;
        let mut total = LossReport::default();
        for batch in samples.chunks(self.config.batch_size) {
            let r = self.step(batch, lr)?;
            accumulate(&mut total, &scaled(&r, batch.len() as f64));
        }
        let record = EpochRecord {
            epoch,
            lr,
            samples: samples.len(),
            losses: scaled(&total, 1.0 / samples.len() as f64),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} sem {:.4} bbox {:.4} bbs {:.4} pmask {:.4} all {:.4}",
            record.losses.l_sem,
            record.losses.l_bbox,
            record.losses.l_bbs,
            record.losses.l_pmask,
            record.losses.l_all
        );
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until `config.epochs` have completed, calling `on_epoch`
    /// after each one (e.g. to checkpoint or append to a history file).
    pub fn run(
        &mut self,
        data: &TrainingSet,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let record = self.run_epoch(data)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }
}

/// Trains a fresh model on `scenes` for `config.epochs` epochs.
pub fn train(scenes: &[Scene], model_config: ModelConfig, config: TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(model_config, config)?;
    let data = trainer.training_set(scenes)?;
    trainer.run(&data, |_, _| Ok(()))?;
    Ok(trainer)
}

fn accumulate(acc: &mut LossReport, r: &LossReport) {
    acc.l_sem += r.l_sem;
    acc.l_bbox += r.l_bbox;
    acc.l_bbs += r.l_bbs;
    acc.l_pmask += r.l_pmask;
    acc.l_all += r.l_all;
}

fn scaled(r: &LossReport, s: f64) -> LossReport {
    LossReport {
        l_sem: r.l_sem * s,
        l_bbox: r.l_bbox * s,
        l_bbs: r.l_bbs * s,
        l_pmask: r.l_pmask * s,
        l_all: r.l_all * s,
    }
}

/// Writes one JSON record per line.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::config("history", e.to_string()))?;
        out.push(b'\n');
    }
    crate::data::write_atomic(path, &out)
}

/// Appends one record to a line-delimited history file.
pub fn append_history(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).map_err(|e| Error::config("history", e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
