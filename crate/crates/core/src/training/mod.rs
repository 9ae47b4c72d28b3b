//! Joint training of the duration, spectral and F0 paths.
//!
//! Step `s` (1-based) draws its batch from a deterministic stream of
//! per-epoch shuffles and seeds its dropout from `(seed, s)`, so a run
//! resumed from a checkpoint reproduces the uninterrupted run exactly.

mod checkpoint;
mod loss;
mod optim;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError};
use crate::features::AcousticFeatureSequence;
use crate::model::{layers::Dropout, AcousticModel, ModelConfig, ModelError, TokenBatch};
use crate::score::PhonemeTokenSequence;
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use loss::{
    decoder_loss, duration_loss, spectral_loss, total_loss, DecoderTerms, DurationTerms, LossBreakdown, LossTerms,
    LossWeights, SpectralTerms, Targets,
};
pub use optim::{lr_schedule, Adam};

pub const LOSS_LOG_HEADER: &str = "step\tlr\ttotal\tL_pd\tL_sd\tL_m\tL_b\tL_f\tL_u";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("training input: {0}")]
    Input(String),
    #[error("training data failed validation:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    /// Desk-scale schedule (2000 steps, warmup 200, batch 8) on the tiny model.
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_steps: 2000,
            warmup_steps: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-9,
            seed: 0,
            loss_weights: LossWeights::default(),
            model: ModelConfig::tiny(),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 40k steps, warmup 4000, batch 32, full model.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 32,
            total_steps: 40_000,
            warmup_steps: 4000,
            model: ModelConfig::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.total_steps == 0 || self.warmup_steps == 0 {
            return Err(TrainError::Config(
                "batch_size, total_steps and warmup_steps must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_epsilon <= 0.0 {
            return Err(TrainError::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        self.loss_weights.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// One training pair; `tokens` carries ground-truth durations.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tokens: &'a PhonemeTokenSequence,
    pub features: &'a AcousticFeatureSequence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    /// Tab-separated loss-log line (no trailing newline).
    pub fn to_log_line(&self) -> String {
        let mut s = format!("{}\t{}\t{}", self.step, self.lr, self.loss.total);
        for c in self.loss.components() {
            let _ = write!(s, "\t{c}");
        }
        s
    }
}

/// Append-only loss log flushed after every record.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "{LOSS_LOG_HEADER}").map_err(io)?;
        Ok(Self { out })
    }

    /// Opens an existing log for appending (used when resuming).
    pub fn append(path: &Path) -> Result<Self, TrainError> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<(), TrainError> {
        let io = |e: std::io::Error| TrainError::Io(e.to_string());
        writeln!(self.out, "{}", record.to_log_line()).map_err(io)?;
        self.out.flush().map_err(io)
    }
}

/// Checks every example before training starts; all problems are reported.
pub fn validate_examples(examples: &[Example<'_>], model: &ModelConfig) -> Result<(), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Validation(vec!["corpus is empty".into()]));
    }
    let mut problems = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match ex.tokens.total_frames() {
            None => problems.push(format!("example {i}: no ground-truth durations")),
            Some(t) if t != ex.features.frames() => problems.push(format!(
                "example {i}: durations sum to {t} frames, features have {}",
                ex.features.frames()
            )),
            Some(_) => {}
        }
        if let Err(e) = TokenBatch::new(&[ex.tokens], model) {
            problems.push(format!("example {i}: {e}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Validation(problems))
    }
}

/// Example indices for training step `step` (1-based): consecutive slices
/// of a stream of per-epoch permutations, wrapping across epochs.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, corpus_len: usize) -> Vec<usize> {
    let start = (step - 1) * batch_size as u64;
    let n = corpus_len as u64;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch_size as u64 {
        let pos = start + k;
        let epoch = pos / n;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            cached = Some((epoch, epoch_order(seed, epoch, corpus_len)));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n) as usize]);
    }
    out
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4531);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Model, optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: AcousticModel,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = AcousticModel::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
            model.parameters().tensors(),
        );
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.config.validate()?;
        let model = AcousticModel::from_parameters(ckpt.config.model.clone(), ckpt.params)?;
        let c = &ckpt.config;
        let mut adam = Adam::new(c.adam_beta1, c.adam_beta2, c.adam_epsilon, model.parameters().tensors());
        for (dst, src) in [(&mut adam.first_moment, ckpt.adam_m), (&mut adam.second_moment, ckpt.adam_v)] {
            if src.len() != dst.len() || src.iter().zip(dst.iter()).any(|(s, d)| s.shape() != d.shape()) {
                return Err(TrainError::Checkpoint("optimizer moments do not match the model".into()));
            }
            *dst = src;
        }
        Ok(Self {
            config: ckpt.config,
            model,
            adam,
            step: ckpt.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Overrides the step budget, e.g. to extend a resumed run.
    pub fn set_total_steps(&mut self, total_steps: u64) {
        self.config.total_steps = total_steps;
    }

    pub fn model(&self) -> &AcousticModel {
        &self.model
    }

    pub fn into_model(self) -> AcousticModel {
        self.model
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self, vocab: &[String]) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            vocab: vocab.to_vec(),
            params: self
                .model
                .parameters()
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam_m: self.adam.first_moment.clone(),
            adam_v: self.adam.second_moment.clone(),
        }
    }

    /// Loss of the current parameters on `batch`, without dropout or update.
    pub fn evaluate(&self, batch: &[Example<'_>]) -> Result<LossBreakdown, TrainError> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, false);
        let terms = self.build_loss(&mut g, &p, batch, &mut Dropout::disabled())?;
        Ok(LossBreakdown::read(&g, &terms))
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        p: &[crate::autodiff::Var],
        batch: &[Example<'_>],
        dropout: &mut Dropout<'_>,
    ) -> Result<LossTerms, TrainError> {
        let seqs: Vec<&PhonemeTokenSequence> = batch.iter().map(|e| e.tokens).collect();
        let frames: Vec<usize> = batch.iter().map(|e| e.features.frames()).collect();
        let fwd = self.model.forward_train(g, p, &seqs, &frames, dropout)?;
        let pairs: Vec<_> = batch.iter().map(|e| (e.tokens, e.features)).collect();
        let targets = Targets::new(&pairs, &fwd.tokens, &fwd.frames)?;
        Ok(total_loss(g, &fwd.encoder, &fwd.decoder, &targets, &self.config.loss_weights)?)
    }

    /// Runs one optimization step on `batch`.
    pub fn step_on(&mut self, batch: &[Example<'_>]) -> Result<StepRecord, TrainError> {
        let step = self.step + 1;
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, true);
        let mut rng = dropout_rng(self.config.seed, step);
        let mut dropout = Dropout {
            rate: self.config.model.dropout,
            rng: Some(&mut rng),
        };
        let non_finite = |e: TrainError| match e {
            TrainError::Graph(GraphError::NonFinite(_)) | TrainError::Model(ModelError::Graph(GraphError::NonFinite(_))) => {
                TrainError::NonFinite { step }
            }
            e => e,
        };
        let terms = self.build_loss(&mut g, &p, batch, &mut dropout).map_err(non_finite)?;
        let loss = LossBreakdown::read(&g, &terms);
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        g.backward(terms.total).map_err(|e| non_finite(e.into()))?;
        let grads: Vec<Tensor> = p
            .iter()
            .zip(self.model.parameters().tensors())
            .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let lr = lr_schedule(step, self.config.model.hidden_dim, self.config.warmup_steps);
        self.adam.update(self.model.parameters_mut().tensors_mut(), &grads, lr, step);
        self.step = step;
        Ok(StepRecord { step, lr, loss })
    }

    /// Trains until `total_steps`, calling `on_step` after every update.
    pub fn run(
        &mut self,
        examples: &[Example<'_>],
        mut on_step: impl FnMut(&StepRecord) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        validate_examples(examples, &self.config.model)?;
        while self.step < self.config.total_steps {
            let idx = batch_indices(self.config.seed, self.step + 1, self.config.batch_size, examples.len());
            let batch: Vec<Example<'_>> = idx.iter().map(|&i| examples[i]).collect();
            let record = self.step_on(&batch)?;
            log::debug!("step {} loss {:.5}", record.step, record.loss.total);
            on_step(&record)?;
        }
        Ok(())
    }
}

/// Trains a fresh model and returns the final checkpoint and loss records.
pub fn train(
    config: &TrainConfig,
    examples: &[Example<'_>],
    vocab: &[String],
) -> Result<(Checkpoint, Vec<StepRecord>), TrainError> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = Vec::with_capacity(config.total_steps as usize);
    trainer.run(examples, |r| {
        log.push(*r);
        Ok(())
    })?;
    Ok((trainer.checkpoint(vocab), log))
}
