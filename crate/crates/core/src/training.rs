//! Optimization loop, metrics log and checkpoint directory.
//!
//! A checkpoint directory holds:
//!
//! ```text
//! config.json           TrainConfig plus the vocabulary size
//! metrics.csv           step,L_s,L_l,L_g,grad_norm,lr (append-only)
//! step-XXXXXXXX.ckpt    binary checkpoints, zero-padded step number
//! ```
//!
//! Minibatches are built from per-example graphs whose gradients are summed
//! and scaled by `1 / batch`, so no padding is involved. Example order is a
//! seeded permutation per epoch, and dropout masks are seeded from
//! `(seed, step, slot)`; a run resumed from any checkpoint therefore
//! continues exactly as the uninterrupted run would.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{LossValues, LossWeights, ModelConfig, Pesg};
use crate::tensor_core::{Adagrad, Checkpoint, Graph, Scalar, TensorError};
use crate::retrieval::ProtoIndex;
use crate::text::{encode_example, encode_source, tokenize, Example, Limits, RawRecord, Vocabulary};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_HEADER: &str = "step,L_s,L_l,L_g,grad_norm,lr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub keep_prob: f64,
    pub clip: (f64, f64),
    pub beam: usize,
    pub epsilon: f64,
    pub eta: f64,
    pub hops: usize,
    pub kernel: usize,
    pub normalize_cross: bool,
    pub max_src: usize,
    pub max_tgt: usize,
    pub lr: f64,
    pub initial_accumulator: f64,
    pub adagrad_eps: f64,
    pub init_std: f64,
    pub seed: u64,
    pub steps: u64,
    /// Save every this many steps; 0 saves only the first and last.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            emb_dim: 256,
            hidden: 256,
            batch_size: 64,
            keep_prob: 0.7,
            clip: (-5.0, 5.0),
            beam: 5,
            epsilon: 1.0,
            eta: 1.0,
            hops: 3,
            kernel: 3,
            normalize_cross: false,
            max_src: 250,
            max_tgt: 100,
            lr: 0.15,
            initial_accumulator: 0.1,
            adagrad_eps: 1e-10,
            init_std: 0.1,
            seed: 1,
            steps: 1000,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            hops: self.hops,
            kernel: self.kernel,
            normalize_cross: self.normalize_cross,
            init_std: self.init_std,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            epsilon: self.epsilon,
            eta: self.eta,
        }
    }

    pub fn limits(&self) -> Limits {
        Limits {
            max_src_len: self.max_src,
            max_tgt_len: self.max_tgt,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep probability must be in (0, 1], got {}", self.keep_prob));
        }
        if !(self.clip.0 < self.clip.1) {
            return bad(format!("empty clip range {:?}", self.clip));
        }
        if !(self.lr > 0.0) || self.initial_accumulator < 0.0 || self.adagrad_eps < 0.0 {
            return bad("learning rate must be positive and Adagrad constants non-negative".into());
        }
        if self.max_src == 0 || self.max_tgt == 0 {
            return bad("length limits must be positive".into());
        }
        Ok(())
    }
}

/// `eps * L_g + eta * L_l + L_s`, refusing non-finite components.
pub fn total_loss(l_s: f64, l_l: f64, l_g: f64, eps: f64, eta: f64) -> Result<f64, ModelError> {
    for (name, v) in [("L_s", l_s), ("L_l", l_l), ("L_g", l_g)] {
        if !v.is_finite() {
            return Err(ModelError::Diverged {
                step: 0,
                detail: format!("{name} = {v} (L_s = {l_s}, L_l = {l_l}, L_g = {l_g})"),
            });
        }
    }
    Ok(eps * l_g + eta * l_l + l_s)
}

/// One metrics row. Loss terms are batch means; `seq_per_token` divides the
/// summed sequence loss by the number of target tokens in the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub seq_per_token: f64,
    pub local: f64,
    pub global: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.seq_per_token, self.local, self.global, self.grad_norm, self.lr
        )
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Deterministic example order: permutation `e` of `0..n` is a function of
/// `(seed, e)` only.
#[derive(Clone, Debug)]
pub struct EpochOrder {
    n: usize,
    seed: u64,
    cache: HashMap<u64, Vec<usize>>,
}

impl EpochOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, cache: HashMap::new() }
    }

    pub fn permutation(&mut self, epoch: u64) -> &[usize] {
        let (n, seed) = (self.n, self.seed);
        self.cache.retain(|&e, _| e + 1 >= epoch);
        self.cache.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, 0xE90C])));
            p
        })
    }

    /// Indices of the batch used at `step` (0-based).
    pub fn batch(&mut self, step: u64, batch_size: usize) -> Vec<usize> {
        let (n, start) = (self.n as u64, step * batch_size as u64);
        (start..start + batch_size as u64)
            .map(|pos| self.permutation(pos / n)[(pos % n) as usize])
            .collect()
    }
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: Pesg<T>,
    pub opt: Adagrad<T>,
    /// Number of completed optimizer steps.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Self, ModelError> {
        config.validate()?;
        let model = Pesg::new(config.model_config(vocab_size), config.seed)?;
        let opt = Adagrad::new(
            &model.params,
            T::lit(config.lr),
            T::lit(config.adagrad_eps),
            (T::lit(config.clip.0), T::lit(config.clip.1)),
            T::lit(config.initial_accumulator),
        );
        Ok(Self { config, model, opt, step: 0 })
    }

    pub fn from_checkpoint(config: TrainConfig, vocab_size: usize, ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut t = Self::new(config, vocab_size)?;
        ckpt.restore(&mut t.model.params, &mut t.opt)?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model.params, &self.opt, self.step)
    }

    /// Forward and backward over `batch`, leaving the mean gradient in the
    /// parameter store. `slot_seed(k)` seeds dropout for the `k`-th example.
    fn accumulate_batch(
        &mut self,
        batch: &[&Example],
        slot_seed: impl Fn(usize) -> u64,
    ) -> Result<(LossValues, usize), ModelError> {
        let weights = self.config.weights();
        let scale = T::one() / T::lit(batch.len() as f64);
        let mut sum = LossValues {
            total: 0.0,
            seq: 0.0,
            local: 0.0,
            global: 0.0,
            tokens: 0,
            taus: [0.0; 4],
        };
        self.model.params.zero_grads();
        for (k, ex) in batch.iter().enumerate() {
            let step = self.step + 1;
            let diverged = |detail: String| ModelError::Diverged {
                step,
                detail: format!("example {k} of batch: {detail}"),
            };
            let (values, grads) = {
                let mut g = if self.config.keep_prob < 1.0 {
                    Graph::training(&self.model.params, self.config.keep_prob, slot_seed(k))?
                } else {
                    Graph::new(&self.model.params)
                };
                let out = self.model.forward(&mut g, ex, weights)?;
                let values = self.model.values(&g, &out);
                if let Err(ModelError::Diverged { detail, .. }) =
                    total_loss(values.seq, values.local, values.global, weights.epsilon, weights.eta)
                {
                    return Err(diverged(detail));
                }
                let grads = g.backward(out.total).map_err(|e| match e {
                    TensorError::NonFinite { .. } => diverged(e.to_string()),
                    other => other.into(),
                })?;
                (values, grads)
            };
            self.model.params.accumulate(&grads, scale);
            sum.total += values.total;
            sum.seq += values.seq;
            sum.local += values.local;
            sum.global += values.global;
            sum.tokens += values.tokens;
            for (a, b) in sum.taus.iter_mut().zip(values.taus) {
                *a += b;
            }
        }
        let n = batch.len();
        Ok((sum, n))
    }

    /// One optimizer step on an explicit batch.
    pub fn train_batch(&mut self, batch: &[&Example]) -> Result<StepMetrics, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let (seed, step) = (self.config.seed, self.step);
        let (sum, n) = self.accumulate_batch(batch, |k| mix_seed(&[seed, step, k as u64]))?;
        let grad_norm = self.opt.step(&mut self.model.params).as_f64();
        if !grad_norm.is_finite() {
            return Err(ModelError::Diverged {
                step: step + 1,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        self.step += 1;
        let nf = n as f64;
        Ok(StepMetrics {
            step: self.step,
            seq_per_token: sum.seq / sum.tokens.max(1) as f64,
            local: sum.local / nf,
            global: sum.global / nf,
            total: sum.total / nf,
            grad_norm,
            lr: self.config.lr,
        })
    }

    /// One optimizer step on the batch the schedule assigns to the next step.
    pub fn train_step(&mut self, data: &[Example], order: &mut EpochOrder) -> Result<StepMetrics, ModelError> {
        let idx = order.batch(self.step, self.config.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        self.train_batch(&batch)
    }

    /// Mean inference-mode loss over `data` (no dropout).
    pub fn mean_loss(&self, data: &[Example]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for ex in data {
            total += self.model.evaluate_loss(ex, self.config.weights())?.total;
        }
        Ok(total / data.len().max(1) as f64)
    }
}

/// Builds a vocabulary over documents and summaries of `corpus`.
pub fn corpus_vocabulary(corpus: &[RawRecord], cap: usize) -> Result<Vocabulary, ModelError> {
    let tokens: Vec<Vec<String>> = corpus
        .iter()
        .flat_map(|r| [tokenize(r.doc_text()), tokenize(r.summary_text())])
        .collect();
    Ok(Vocabulary::build(&tokens, cap)?)
}

/// Retrieves a prototype for every record (from `index`, excluding the
/// record itself when `self_exclude`) and encodes the pairs.
pub fn paired_examples(
    corpus: &[RawRecord],
    index: &ProtoIndex,
    vocab: &Vocabulary,
    limits: Limits,
    self_exclude: bool,
) -> Result<Vec<Example>, ModelError> {
    let pairs = index.pair_corpus(corpus, self_exclude)?;
    index
        .attach(corpus, &pairs)?
        .iter()
        .map(|rec| Ok(encode_example(rec, vocab, limits)?))
        .collect()
}

/// Same pairing as [`paired_examples`], tolerating records without a
/// summary (they get an empty one).
pub fn source_examples(
    corpus: &[RawRecord],
    index: &ProtoIndex,
    vocab: &Vocabulary,
    limits: Limits,
    self_exclude: bool,
) -> Result<Vec<Example>, ModelError> {
    let pairs = index.pair_corpus(corpus, self_exclude)?;
    index
        .attach(corpus, &pairs)?
        .iter()
        .map(|rec| Ok(encode_source(rec, vocab, limits)?))
        .collect()
}

/// Layout of a checkpoint directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    vocab_size: usize,
    train: TrainConfig,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join(format!("step-{step:08}.ckpt"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    /// All checkpoints as `(step, path)`, ascending.
    pub fn checkpoints(&self) -> Result<Vec<(u64, PathBuf)>, ModelError> {
        let mut out = Vec::new();
        if !self.root.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(step) = name
                .strip_prefix("step-")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                out.push((step, path));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn latest(&self) -> Result<Option<(u64, PathBuf)>, ModelError> {
        Ok(self.checkpoints()?.pop())
    }

    pub fn write_config(&self, config: &TrainConfig, vocab_size: usize) -> Result<(), ModelError> {
        fs::create_dir_all(&self.root)?;
        let stored = StoredConfig {
            vocab_size,
            train: config.clone(),
        };
        let json = serde_json::to_string_pretty(&stored).map_err(|e| ModelError::Config(e.to_string()))?;
        fs::write(self.config_path(), json + "\n")?;
        Ok(())
    }

    /// Returns `(train config, vocabulary size)`.
    pub fn read_config(&self) -> Result<(TrainConfig, usize), ModelError> {
        let text = fs::read_to_string(self.config_path())?;
        let stored: StoredConfig = serde_json::from_str(&text)
            .map_err(|e| ModelError::Config(format!("{}: {e}", self.config_path().display())))?;
        Ok((stored.train, stored.vocab_size))
    }

    /// Loads the model of the latest checkpoint, or of `step` if given.
    pub fn load_model<T: Scalar>(&self, step: Option<u64>) -> Result<(Pesg<T>, u64), ModelError> {
        let (config, vocab) = self.read_config()?;
        let path = match step {
            Some(s) => self.checkpoint_path(s),
            None => self
                .latest()?
                .map(|(_, p)| p)
                .ok_or_else(|| ModelError::Config(format!("no checkpoint in {}", self.root.display())))?,
        };
        let ckpt = Checkpoint::load(&path)?;
        let mut model = Pesg::new(config.model_config(vocab), config.seed)?;
        ckpt.restore_params(&mut model.params)?;
        Ok((model, ckpt.step))
    }

    /// Drops metrics rows beyond `step`, so a resumed run does not
    /// duplicate the ones it is about to rewrite.
    fn trim_metrics(&self, step: u64) -> Result<(), ModelError> {
        let path = self.metrics_path();
        if !path.exists() {
            return Ok(());
        }
        let mut kept = String::new();
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            let keep = match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                Some(s) => s <= step,
                None => true,
            };
            if keep {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        fs::write(path, kept)?;
        Ok(())
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs (or resumes) training in `dir` until `config.steps` steps are done.
///
/// A step-0 checkpoint is written for a fresh run. On divergence the run
/// stops with [`ModelError::Diverged`]; checkpoints already written are
/// left untouched.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    vocab_size: usize,
    data: &[Example],
    dir: &Path,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainSummary, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Config("no training examples".into()));
    }
    let run = RunDir::new(dir);
    let mut trainer = match run.latest()? {
        Some((_, path)) => {
            let (stored, stored_vocab) = run.read_config()?;
            if stored.model_config(stored_vocab) != config.model_config(vocab_size) || stored.seed != config.seed {
                return Err(ModelError::Config(format!(
                    "{} holds a run with a different model or seed",
                    dir.display()
                )));
            }
            Trainer::<T>::from_checkpoint(config.clone(), vocab_size, &Checkpoint::load(&path)?)?
        }
        None => Trainer::<T>::new(config.clone(), vocab_size)?,
    };
    run.write_config(config, vocab_size)?;
    run.trim_metrics(trainer.step)?;
    let mut checkpoints = Vec::new();
    let first_step = trainer.step;
    if first_step == 0 {
        let p = run.checkpoint_path(0);
        trainer.checkpoint().save(&p)?;
        checkpoints.push(p);
    }
    let fresh_log = !run.metrics_path().exists();
    let mut log = OpenOptions::new().create(true).append(true).open(run.metrics_path())?;
    if fresh_log {
        writeln!(log, "{METRICS_HEADER}")?;
    }
    let mut order = EpochOrder::new(data.len(), config.seed);
    let mut metrics = Vec::new();
    while trainer.step < config.steps {
        let m = trainer.train_step(data, &mut order)?;
        writeln!(log, "{}", m.csv_row())?;
        on_step(&m);
        metrics.push(m);
        let due = config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0;
        if due || trainer.step == config.steps {
            let p = run.checkpoint_path(trainer.step);
            trainer.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
    }
    log.flush()?;
    Ok(TrainSummary {
        first_step,
        last_step: trainer.step,
        metrics,
        checkpoints,
    })
}
