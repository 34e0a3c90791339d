//! Three-phase training: teacher-forced pretraining of the generator,
//! pretraining of the two discriminators on real vs sampled pieces, then
//! joint adversarial updates.
//!
//! Every source of randomness has its own seeded stream (data order,
//! generator dropout, sampling noise, augmentation offsets, discriminator
//! dropout). The generator's NLL term draws only from the first two, so an
//! adversarial step with both weights at zero updates the generator exactly
//! like a plain NLL step.

mod checkpoint;
mod steps;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use steps::{
    adversarial_step, disc_pretrain, disc_step, generator_loss, gumbel_tau, nll_pretrain, nll_step, run_adversarial,
    DiscStats, GeneratorLoss,
};

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Discriminator, Generator, ModelConfig, ModelError};
use crate::remi::{CodecConfig, TokenSequence, Vocabulary};
use crate::tensor::{Adam, AdamConfig, TensorError};
use crate::views::{ViewKind, DEFAULT_MAX_SHIFT};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Weight of the melody discriminator's adversarial term.
    pub alpha: f64,
    /// Weight of the rhythm discriminator's adversarial term.
    pub beta: f64,
    /// Pretraining stops once the running mean NLL falls below this.
    pub nll_stop_threshold: f64,
    /// Number of recent steps in the running mean.
    pub nll_window: usize,
    pub nll_max_epochs: usize,
    pub disc_pretrain_epochs: usize,
    pub adv_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub gumbel_tau_start: f64,
    pub gumbel_tau_end: f64,
    /// Per-step multiplicative decay of the relaxation temperature.
    pub gumbel_tau_decay: f64,
    /// Leading bars of each piece given to the generator as its condition.
    pub cond_bars: usize,
    pub max_shift: i32,
    /// Discriminator updates per adversarial step.
    pub disc_steps: usize,
    /// Minimize `-log D` instead of `log(1 - D)` in the generator loss.
    pub non_saturating: bool,
    pub model: ModelConfig,
    pub codec: CodecConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            beta: 0.15,
            nll_stop_threshold: 0.55,
            nll_window: 50,
            nll_max_epochs: 1000,
            disc_pretrain_epochs: 120,
            adv_epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            gumbel_tau_start: 1.0,
            gumbel_tau_end: 0.5,
            gumbel_tau_decay: 0.999,
            cond_bars: 4,
            max_shift: DEFAULT_MAX_SHIFT,
            disc_steps: 1,
            non_saturating: false,
            model: ModelConfig::paper(),
            codec: CodecConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Desk-scale schedule for the toy model.
    pub fn toy() -> Self {
        Self {
            nll_stop_threshold: 1.5,
            nll_window: 20,
            nll_max_epochs: 50,
            disc_pretrain_epochs: 12,
            adv_epochs: 10,
            lr: 1e-3,
            gumbel_tau_decay: 0.995,
            cond_bars: 1,
            model: ModelConfig::toy(),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper" => Some(Self::default()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.nll_stop_threshold > 0.0) {
            return bad("nll_stop_threshold must be positive");
        }
        if self.batch_size == 0 || self.nll_window == 0 || self.cond_bars == 0 {
            return bad("batch_size, nll_window and cond_bars must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.gumbel_tau_end > 0.0 && self.gumbel_tau_start >= self.gumbel_tau_end) {
            return bad("gumbel temperatures must satisfy start >= end > 0");
        }
        if !(self.gumbel_tau_decay > 0.0 && self.gumbel_tau_decay <= 1.0) {
            return bad("gumbel_tau_decay must be in (0, 1]");
        }
        if self.max_shift < 1 {
            return bad("max_shift must be at least 1");
        }
        self.model.validate()?;
        self.codec.validate().map_err(ModelError::from)?;
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// One training pair: the condition and the full piece.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub cond: Vec<usize>,
    /// The condition without its `EOS`; the decoder starts sampling here.
    pub prefix: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Pairs each piece with its first `cond_bars` bars.
    pub fn from_sequences(seqs: &[TokenSequence], cond_bars: usize, codec: &CodecConfig) -> Result<Self, TrainError> {
        if seqs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let vocab = Vocabulary::new(codec).map_err(ModelError::from)?;
        let ids = |s: &TokenSequence| -> Result<Vec<usize>, TrainError> {
            Ok(vocab.encode_ids(s).map_err(ModelError::from)?.into_iter().map(|i| i as usize).collect())
        };
        let examples = seqs
            .iter()
            .map(|s| {
                let cond = s.bar_prefix(cond_bars, codec);
                Ok(Example { cond: ids(&cond)?, prefix: ids(&cond.without_eos())?, target: ids(s)? })
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_target_len(&self) -> usize {
        self.examples.iter().map(|e| e.target.len()).max().unwrap_or(0)
    }
}

/// Independent random streams, all derived from the config seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub sample: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub disc: ChaCha8Rng,
}

pub(crate) fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { data: stream(seed, 1), dropout: stream(seed, 2), sample: stream(seed, 3), augment: stream(seed, 4), disc: stream(seed, 5) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Nll,
    Disc,
    Adv,
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nll" => Ok(Phase::Nll),
            "disc" => Ok(Phase::Disc),
            "adv" => Ok(Phase::Adv),
            other => Err(format!("unknown phase `{other}`, expected nll, disc or adv")),
        }
    }
}

/// One row of the metrics log. Fields a phase does not compute are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub phase: Phase,
    pub nll: Option<f64>,
    pub adv_melody: Option<f64>,
    pub adv_rhythm: Option<f64>,
    pub d_m_loss: Option<f64>,
    pub d_r_loss: Option<f64>,
    pub d_m_acc: Option<f64>,
    pub d_r_acc: Option<f64>,
    /// Generator objective actually differentiated in this step.
    pub total: Option<f64>,
}

impl StepMetrics {
    fn new(step: u64, phase: Phase) -> Self {
        Self {
            step,
            phase,
            nll: None,
            adv_melody: None,
            adv_rhythm: None,
            d_m_loss: None,
            d_r_loss: None,
            d_m_acc: None,
            d_r_acc: None,
            total: None,
        }
    }
}

pub const METRICS_HEADER: &str = "step,nll,adv_melody,adv_rhythm,d_m_loss,d_r_loss,d_m_acc,d_r_acc";

pub fn write_metrics_csv<W: Write>(log: &[StepMetrics], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for m in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.step,
            cell(m.nll),
            cell(m.adv_melody),
            cell(m.adv_rhythm),
            cell(m.d_m_loss),
            cell(m.d_r_loss),
            cell(m.d_m_acc),
            cell(m.d_r_acc)
        )?;
    }
    Ok(())
}

/// Models, optimizers and every counter needed to resume exactly.
pub struct TrainState {
    pub config: TrainingConfig,
    pub generator: Generator,
    pub melody: Discriminator,
    pub rhythm: Discriminator,
    pub gen_opt: Adam,
    pub melody_opt: Adam,
    pub rhythm_opt: Adam,
    pub rngs: RngStreams,
    /// Total optimizer steps over all phases.
    pub step: u64,
    pub nll_steps: u64,
    pub disc_steps: u64,
    pub adv_steps: u64,
    /// Completed passes over the data.
    pub epoch: u64,
    /// Position inside the current epoch's permutation.
    pub cursor: usize,
    pub permutation: Vec<usize>,
    /// Epoch at which the running phase started.
    pub phase_start_epoch: u64,
    pub phase: Option<Phase>,
    pub recent_nll: VecDeque<f64>,
    pub log: Vec<StepMetrics>,
}

impl TrainState {
    pub fn new(config: TrainingConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut init = stream(config.seed, 0);
        let generator = Generator::new(&config.model, &config.codec, &mut init)?;
        let melody = Discriminator::new(&config.model, &config.codec, ViewKind::Melody, &mut init)?;
        let rhythm = Discriminator::new(&config.model, &config.codec, ViewKind::Rhythm, &mut init)?;
        let adam = config.adam();
        Ok(Self {
            gen_opt: Adam::new(adam, &params_of(&generator.params())),
            melody_opt: Adam::new(adam, &params_of(&melody.params())),
            rhythm_opt: Adam::new(adam, &params_of(&rhythm.params())),
            rngs: RngStreams::new(config.seed),
            generator,
            melody,
            rhythm,
            step: 0,
            nll_steps: 0,
            disc_steps: 0,
            adv_steps: 0,
            epoch: 0,
            cursor: 0,
            permutation: Vec::new(),
            phase_start_epoch: 0,
            phase: None,
            recent_nll: VecDeque::new(),
            log: Vec::new(),
            config,
        })
    }

    /// Changes the learning rate of all three optimizers, keeping their moments.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        for opt in [&mut self.gen_opt, &mut self.melody_opt, &mut self.rhythm_opt] {
            opt.config.lr = lr;
        }
    }

    /// Mean of the recent NLL window, once it is full.
    pub fn running_nll(&self) -> Option<f64> {
        (self.recent_nll.len() >= self.config.nll_window)
            .then(|| self.recent_nll.iter().sum::<f64>() / self.recent_nll.len() as f64)
    }

    pub(crate) fn enter_phase(&mut self, phase: Phase) {
        if self.phase != Some(phase) {
            self.phase = Some(phase);
            self.phase_start_epoch = self.epoch;
        }
    }

    pub(crate) fn phase_epochs(&self) -> u64 {
        self.epoch - self.phase_start_epoch
    }

    /// Indices of the next batch; reshuffles at every epoch boundary.
    pub(crate) fn next_batch(&mut self, n: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        if self.cursor == 0 || self.permutation.len() != n {
            self.permutation = (0..n).collect();
            self.permutation.shuffle(&mut self.rngs.data);
            self.cursor = 0;
        }
        let end = (self.cursor + self.config.batch_size).min(n);
        let batch = self.permutation[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor == n {
            self.cursor = 0;
            self.epoch += 1;
        }
        batch
    }
}

pub(crate) fn params_of(named: &crate::model::NamedParams) -> Vec<crate::tensor::Tensor> {
    named.iter().map(|(_, t)| t.clone()).collect()
}
