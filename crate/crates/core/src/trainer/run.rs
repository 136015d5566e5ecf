use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TrainExample;
use super::loss::{ar_loss_on_tape, build_labels, causal_lm_loss, training_plan, IGNORE_LABEL};
use super::optim::{AdamWConfig, OptState, RatioMode, RatioSchedule};
use crate::error::{Error, Result};
use crate::model::{GradMode, Model, ModelConfig};
use crate::numerics::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Plain causal LM on windows of at most `w` tokens; updates the base.
    Base,
    /// Compression-based auto-regression; updates only the beacon weights.
    #[default]
    Beacon,
}

/// Contents of a training config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub seed: u64,
    pub lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub ratio_mode: RatioMode,
    /// Ratios to sample from; defaults to the model's ratio set.
    pub ratios: Option<Vec<usize>>,
    /// Document length bounds in tokens, before eos.
    pub min_len: usize,
    pub max_len: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Beacon,
            seed: 0,
            lr: 1e-3,
            total_steps: 1000,
            batch_size: 1,
            weight_decay: 0.0,
            ratio_mode: RatioMode::ChunkWise,
            ratios: None,
            min_len: 65,
            max_len: 4096,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config(
                "batch_size and total_steps must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        for &a in self.ratio_list() {
            self.model.check_ratio(a)?;
        }
        Ok(())
    }

    pub fn ratio_list(&self) -> &[usize] {
        self.ratios.as_deref().unwrap_or(&self.model.ratio_set)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::new(self.lr, self.total_steps)
        }
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: usize,
}

/// Outcome of one optimizer step over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Token-weighted mean loss over the batch.
    pub loss: f64,
    /// Labelled positions in the batch; zero means the step was skipped.
    pub count: usize,
    pub lr: f64,
}

fn add_grads<T: Scalar>(
    acc: &mut [Tensor<T>],
    grads: &mut Gradients<T>,
    vars: &[Var],
) -> Result<()> {
    for (a, v) in acc.iter_mut().zip(vars) {
        let g = grads
            .take(*v)
            .ok_or_else(|| Error::State("missing gradient for a trainable leaf".into()))?;
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += *y;
        }
    }
    Ok(())
}

fn check_finite(loss: f64, step: usize, example: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "loss {loss} at step {step}, batch example {example}"
        )))
    }
}

/// One compression-AR update of the beacon weights. Gradients of the batch
/// are accumulated with weights proportional to labelled positions.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptState<T>,
    batch: &[TrainExample],
    schedule: &mut RatioSchedule,
) -> Result<StepOutcome> {
    let config = model.config.clone();
    let mut jobs = Vec::with_capacity(batch.len());
    for ex in batch {
        let chunks = ex.tokens.len().div_ceil(config.chunk_size).max(1);
        let ratios = schedule.sample(chunks)?;
        let plan = training_plan(&config, ex.tokens.len(), &ratios)?;
        let labels = build_labels(&plan, &ex.tokens);
        let count = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        jobs.push((plan, labels, count));
    }
    let total: usize = jobs.iter().map(|j| j.2).sum();
    let lr = opt.lr();
    if total == 0 {
        return Ok(StepOutcome {
            loss: 0.0,
            count: 0,
            lr,
        });
    }
    let mut acc: Vec<Tensor<T>> = model
        .beacon
        .named()
        .iter()
        .map(|(_, p)| Tensor::zeros(p.shape()))
        .collect();
    let mut loss_sum = 0.0;
    for (i, (ex, (plan, labels, count))) in batch.iter().zip(&jobs).enumerate() {
        if *count == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, GradMode::BEACON);
        let bounds = vec![&bound; plan.len()];
        let out = ar_loss_on_tape(&mut tape, &config, &bounds, &ex.tokens, plan, labels)?;
        let value = tape.value(out.loss).item().as_f64();
        check_finite(value, opt.step(), i)?;
        loss_sum += value * *count as f64;
        let scaled = tape.scale(out.loss, T::from_f64(*count as f64 / total as f64))?;
        let mut grads = tape.backward(scaled)?;
        add_grads(&mut acc, &mut grads, &bound.beacon_vars())?;
    }
    opt.update(model.beacon.params_mut(), &acc)?;
    Ok(StepOutcome {
        loss: loss_sum / total as f64,
        count: total,
        lr,
    })
}

/// Picks a window of at most `w` tokens from each example.
pub fn crop_windows(batch: &[TrainExample], w: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    batch
        .iter()
        .map(|ex| {
            let n = ex.tokens.len();
            let start = if n > w { rng.gen_range(0..=n - w) } else { 0 };
            ex.tokens[start..(start + w).min(n)].to_vec()
        })
        .collect()
}

/// One causal-LM update of the base weights on already cropped windows.
pub fn base_train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptState<T>,
    windows: &[Vec<u32>],
) -> Result<StepOutcome> {
    let lr = opt.lr();
    let total: usize = windows.iter().map(|w| w.len().saturating_sub(1)).sum();
    if total == 0 {
        return Ok(StepOutcome {
            loss: 0.0,
            count: 0,
            lr,
        });
    }
    let mut acc: Vec<Tensor<T>> = model
        .base
        .named()
        .iter()
        .map(|(_, p)| Tensor::zeros(p.shape()))
        .collect();
    let mut loss_sum = 0.0;
    for (i, win) in windows.iter().enumerate() {
        let mut tape = Tape::new();
        let (out, bound) = causal_lm_loss(&mut tape, model, win)?;
        if out.count == 0 {
            continue;
        }
        let value = tape.value(out.loss).item().as_f64();
        check_finite(value, opt.step(), i)?;
        loss_sum += value * out.count as f64;
        let scaled = tape.scale(out.loss, T::from_f64(out.count as f64 / total as f64))?;
        let mut grads = tape.backward(scaled)?;
        add_grads(&mut acc, &mut grads, &bound.base_vars())?;
    }
    opt.update(model.base.params_mut(), &acc)?;
    Ok(StepOutcome {
        loss: loss_sum / total as f64,
        count: total,
        lr,
    })
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub tokens_seen: usize,
}

/// Stateful training loop over a fixed example list; data order, ratio
/// draws and crops all derive from the config seed.
pub struct Trainer<T> {
    pub config: TrainConfig,
    opt: OptState<T>,
    schedule: RatioSchedule,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    tokens_seen: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, model: &Model<T>) -> Result<Self> {
        config.validate()?;
        if config.model != model.config {
            return Err(Error::ConfigMismatch {
                expected: model.config.hash(),
                found: config.model.hash(),
            });
        }
        let opt = match config.phase {
            Phase::Beacon => OptState::new(config.adamw(), &model.beacon.named()),
            Phase::Base => OptState::new(config.adamw(), &model.base.named()),
        };
        let schedule =
            RatioSchedule::new(config.seed, config.ratio_list().to_vec(), config.ratio_mode)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
        Ok(Self {
            config,
            opt,
            schedule,
            rng,
            order: Vec::new(),
            cursor: 0,
            tokens_seen: 0,
        })
    }

    pub fn opt(&self) -> &OptState<T> {
        &self.opt
    }

    fn next_batch<'a>(&mut self, examples: &'a [TrainExample]) -> Vec<&'a TrainExample> {
        (0..self.config.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = (0..examples.len()).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                &examples[self.order[self.cursor - 1]]
            })
            .collect()
    }

    /// Runs one step and returns its metrics record.
    pub fn step(&mut self, model: &mut Model<T>, examples: &[TrainExample]) -> Result<StepMetrics> {
        if examples.is_empty() {
            return Err(Error::Data("no training examples".into()));
        }
        let batch: Vec<TrainExample> = self.next_batch(examples).into_iter().cloned().collect();
        let step = self.opt.step();
        let out = match self.config.phase {
            Phase::Beacon => {
                self.tokens_seen += batch.iter().map(|e| e.tokens.len()).sum::<usize>();
                train_step(model, &mut self.opt, &batch, &mut self.schedule)?
            }
            Phase::Base => {
                let windows = crop_windows(&batch, model.config.chunk_size, &mut self.rng);
                self.tokens_seen += windows.iter().map(Vec::len).sum::<usize>();
                base_train_step(model, &mut self.opt, &windows)?
            }
        };
        Ok(StepMetrics {
            step,
            loss: out.loss,
            lr: out.lr,
            tokens_seen: self.tokens_seen,
        })
    }

    /// Runs until `total_steps` updates have been applied, appending one
    /// JSON line per step to `metrics`.
    pub fn run(
        &mut self,
        model: &mut Model<T>,
        examples: &[TrainExample],
        metrics: &mut impl Write,
    ) -> Result<TrainReport> {
        let mut first = None;
        let mut last = 0.0;
        let mut steps = 0;
        while self.opt.step() < self.config.total_steps {
            let before = self.opt.step();
            let m = self.step(model, examples)?;
            if self.opt.step() == before {
                // Nothing labelled in this batch; move on without an update.
                steps += 1;
                if steps > 10 * self.config.total_steps {
                    return Err(Error::Data(
                        "training batches carry no labelled positions".into(),
                    ));
                }
                continue;
            }
            writeln!(
                metrics,
                "{}",
                serde_json::to_string(&m).map_err(|e| Error::Format(e.to_string()))?
            )?;
            first.get_or_insert(m.loss);
            last = m.loss;
            steps += 1;
        }
        Ok(TrainReport {
            steps: self.opt.step(),
            first_loss: first.unwrap_or(0.0),
            last_loss: last,
            tokens_seen: self.tokens_seen,
        })
    }
}
