//! Training configuration, Adam, and the deterministic epoch loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::{DatasetMode, Example, Vocabulary};
use crate::error::{arg_err, FvnError, Result};
use crate::network::{label_inventory, Fvn, LossValues, ModelConfig};
use crate::layers::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: DatasetMode,
    pub dim: usize,
    pub codebook_size: usize,
    pub encoder_layers: usize,
    pub beta_content: f64,
    pub beta_style: f64,
    pub beta_word: f64,
    pub max_decode_len: usize,
    pub block_control_grad: bool,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Held-out share of the training file when no dev split is given.
    pub validation_fraction: f64,
    pub threads: usize,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub pretrained_embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            mode: DatasetMode::Personage,
            dim: m.dim,
            codebook_size: m.codebook_size,
            encoder_layers: m.encoder_layers,
            beta_content: m.beta_content,
            beta_style: m.beta_style,
            beta_word: m.beta_word,
            max_decode_len: m.max_decode_len,
            block_control_grad: m.block_control_grad,
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            clip_norm: None,
            validation_fraction: 0.1,
            threads: 1,
            train_path: None,
            dev_path: None,
            pretrained_embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| FvnError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            codebook_size: self.codebook_size,
            encoder_layers: self.encoder_layers,
            beta_content: self.beta_content,
            beta_style: self.beta_style,
            beta_word: self.beta_word,
            max_decode_len: self.max_decode_len,
            block_control_grad: self.block_control_grad,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.batch_size == 0 || self.threads == 0 {
            return Err(FvnError::Config("batch_size and threads must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FvnError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(FvnError::Config("adam moments must lie in [0, 1) and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(FvnError::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(FvnError::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Bias-corrected Adam update. Rejects the whole step, leaving parameters
/// and moments untouched, if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, hp: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return arg_err(format!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return crate::error::dim_err("adam_step", format!("gradient {:?} for {}", g.shape(), params.name(id)));
        }
        if !g.is_finite() {
            return Err(FvnError::Numeric {
                op: "adam_step".into(),
                detail: format!("non-finite gradient in parameter {}", params.name(id)),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let (m, v, g) = (state.m[i].data_mut(), state.v[i].data_mut(), grads[i].data());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-example training losses.
    pub train: LossValues,
    pub train_dec_per_token: f64,
    pub val_dec: Option<f64>,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub steps: u64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Progress carried across interruptions.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Progress {
    pub epochs_done: usize,
    pub best_val: Option<f64>,
    pub best_params: Option<Vec<Tensor>>,
    pub history: Vec<EpochLog>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Fvn,
    pub adam: AdamState,
    pub progress: Progress,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn example_grads(model: &Fvn, ex: &Example) -> Result<(Vec<Tensor>, LossValues, usize)> {
    let tape = Tape::new();
    let b = model.binder(&tape, true);
    let loss = model.total_loss(&b, ex)?;
    let grads = tape.backward(&loss.total)?;
    Ok((b.param_grads(&grads), loss.values(), ex.delex_tokens.len() + 1))
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        vocab: Vocabulary,
        train: Vec<Example>,
        val: Vec<Example>,
        pretrained: Option<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return arg_err("training set is empty");
        }
        let labels = label_inventory(&train, config.mode);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Fvn::new(config.model(), config.mode, vocab, labels, pretrained, &mut rng)?;
        let adam = AdamState::new(&model.params);
        Ok(Trainer { config, model, adam, progress: Progress::default(), train, val })
    }

    /// Continue from saved state; `config.epochs` may differ from the
    /// original run, everything else must match.
    pub fn resume(
        config: TrainConfig,
        model: Fvn,
        adam: AdamState,
        progress: Progress,
        train: Vec<Example>,
        val: Vec<Example>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return arg_err("training set is empty");
        }
        if model.mode != config.mode {
            return Err(FvnError::Config(format!(
                "checkpoint was trained in {} mode, not {}",
                model.mode, config.mode
            )));
        }
        if adam.m.len() != model.params.len() {
            return Err(FvnError::State("optimizer state does not match the parameters".into()));
        }
        Ok(Trainer { config, model, adam, progress, train, val })
    }

    /// Example order for `epoch`; depends only on (seed, epoch).
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Summed gradients and losses over a batch, reduced in batch order.
    fn batch_grads(&self, batch: &[usize]) -> Result<(Vec<Tensor>, LossValues, usize)> {
        let threads = self.config.threads.min(batch.len()).max(1);
        let results: Vec<Result<(Vec<Tensor>, LossValues, usize)>> = if threads == 1 {
            batch.iter().map(|&i| example_grads(&self.model, &self.train[i])).collect()
        } else {
            let chunk = batch.len().div_ceil(threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .chunks(chunk)
                    .map(|part| {
                        s.spawn(move || {
                            part.iter().map(|&i| example_grads(&self.model, &self.train[i])).collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let mut sum: Vec<Tensor> = self.model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut losses = LossValues::default();
        let mut tokens = 0;
        for r in results {
            let (g, l, n) = r?;
            for (acc, gi) in sum.iter_mut().zip(&g) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
            }
            losses.add_scaled(&l, 1.0);
            tokens += n;
        }
        Ok((sum, losses, tokens))
    }

    /// Mean teacher-forced L_Dec over `examples`.
    pub fn mean_dec_loss(&self, examples: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            let tape = Tape::new();
            let b = self.model.binder(&tape, false);
            total += self.model.total_loss(&b, ex)?.dec.item();
        }
        Ok(total / examples.len() as f64)
    }

    /// Run one epoch, update progress, and return its log line.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.progress.epochs_done;
        let order = self.epoch_order(epoch);
        let mut sums = LossValues::default();
        let mut tokens = 0usize;
        let (mut norm_sum, mut norm_max, mut steps) = (0.0, 0.0f64, 0u64);
        let hp = self.config.adam();
        for batch in order.chunks(self.config.batch_size) {
            let (mut grads, losses, n) = self.batch_grads(batch)?;
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= scale));
            let norm = global_norm(&grads);
            if let Some(clip) = self.config.clip_norm {
                if norm > clip {
                    let f = clip / norm;
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= f));
                }
            }
            adam_step(&mut self.model.params, &grads, &mut self.adam, &hp)?;
            sums.add_scaled(&losses, 1.0);
            tokens += n;
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            steps += 1;
        }
        let n = self.train.len() as f64;
        let mut train = LossValues::default();
        train.add_scaled(&sums, 1.0 / n);
        let val_dec = if self.val.is_empty() { None } else { Some(self.mean_dec_loss(&self.val)?) };
        let criterion = val_dec.unwrap_or(train.dec);
        if self.progress.best_val.is_none_or(|b| criterion < b) {
            self.progress.best_val = Some(criterion);
            self.progress.best_params = Some(self.model.params.values().to_vec());
        }
        let log = EpochLog {
            epoch: epoch + 1,
            train,
            train_dec_per_token: sums.dec / tokens as f64,
            val_dec,
            grad_norm_mean: norm_sum / steps as f64,
            grad_norm_max: norm_max,
            steps: self.adam.step,
        };
        self.progress.epochs_done += 1;
        self.progress.history.push(log.clone());
        Ok(log)
    }

    /// Train until `config.epochs` or `stop_after` more epochs, calling
    /// `on_epoch` after each.
    pub fn run(&mut self, stop_after: Option<usize>, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<()> {
        let mut ran = 0;
        while self.progress.epochs_done < self.config.epochs && stop_after.is_none_or(|s| ran < s) {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
            ran += 1;
        }
        Ok(())
    }

    /// The model with the best-by-validation parameters installed.
    pub fn best_model(&self) -> Result<Fvn> {
        let mut m = self.model.clone();
        if let Some(best) = &self.progress.best_params {
            m.params.assign(best.clone())?;
        }
        Ok(m)
    }
}
