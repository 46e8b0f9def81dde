//! Deterministic training loop: AdamW, warmup plus cosine schedule,
//! per-epoch probes and evaluation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::branch_grad_norms;
use crate::data::{gen_synth, load_cifar10, Batch, Dataset, Splits, SynthSpec};
use crate::error::{Error, Result};
use crate::masking::{MaskSpec, MaskStrategy};
use crate::objective::{
    build_sub_spec, probe_losses, DropRates, LossKind, LossWeights, Objective, ObjectiveKind,
    StepKeys, SubConfig, SubTarget,
};
use crate::rng::{permutation, Purpose, StreamKey};
use crate::tensor::{Real, Tape};
use crate::vit::{ParamStore, Vit, VitConfig};

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated blob images; the test split shares the class patterns.
    #[serde(rename_all = "kebab-case")]
    Synth {
        seed: u64,
        per_class: usize,
        test_per_class: usize,
        classes: usize,
        image_size: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_blobs")]
        blobs: usize,
        #[serde(default)]
        jitter: usize,
    },
    /// A CIFAR-10 binary directory, optionally truncated.
    #[serde(rename_all = "kebab-case")]
    Cifar10 {
        path: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Two record files in the CIFAR-10 layout.
    #[serde(rename_all = "kebab-case")]
    Files {
        train: PathBuf,
        test: PathBuf,
        image_size: usize,
        classes: usize,
    },
}

fn default_separation() -> f64 {
    4.0
}
fn default_noise() -> f64 {
    24.0
}
fn default_blobs() -> usize {
    3
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Splits> {
        match self {
            DatasetSpec::Synth {
                seed,
                per_class,
                test_per_class,
                classes,
                image_size,
                separation,
                noise,
                blobs,
                jitter,
            } => {
                let mut spec = SynthSpec {
                    seed: *seed,
                    per_class: *per_class,
                    classes: *classes,
                    image_size: *image_size,
                    separation: *separation,
                    noise: *noise,
                    blobs: *blobs,
                    jitter: *jitter,
                    split: 0,
                };
                let train = gen_synth(&spec)?;
                spec.per_class = *test_per_class;
                spec.split = 1;
                let test = gen_synth(&spec)?;
                Ok(Splits { train, test })
            }
            DatasetSpec::Cifar10 {
                path,
                train_limit,
                test_limit,
            } => {
                let s = load_cifar10(path)?;
                Ok(Splits {
                    train: s.train.truncate(train_limit.unwrap_or(usize::MAX)),
                    test: s.test.truncate(test_limit.unwrap_or(usize::MAX)),
                })
            }
            DatasetSpec::Files {
                train,
                test,
                image_size,
                classes,
            } => Ok(Splits {
                train: Dataset::load(train, *image_size, *classes)?,
                test: Dataset::load(test, *image_size, *classes)?,
            }),
        }
    }
}

/// A training run. Serialised as one JSON document with kebab-case keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub loss_weights: LossWeights,
    /// `null` trains the main branch alone.
    pub sub_spec: Option<SubConfig>,
    pub sub_target: SubTarget,
    pub loss_kind: LossKind,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub drop_path: f64,
    pub model: VitConfig,
    pub dataset: DatasetSpec,
    /// Leading training images used for the per-epoch probes.
    pub probe_size: usize,
    /// Mask ratio of the second probe loss.
    pub probe_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_epochs: 2,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            objective: ObjectiveKind::SubModel,
            loss_weights: LossWeights::default(),
            sub_spec: Some(SubConfig::masksub(0.5)),
            sub_target: SubTarget::Kd,
            loss_kind: LossKind::Ce,
            label_smoothing: 0.0,
            dropout: 0.0,
            drop_path: 0.1,
            model: VitConfig::default(),
            dataset: DatasetSpec::Synth {
                seed: 0,
                per_class: 500,
                test_per_class: 100,
                classes: 10,
                image_size: 32,
                separation: default_separation(),
                noise: default_noise(),
                blobs: default_blobs(),
                jitter: 0,
            },
            probe_size: 512,
            probe_ratio: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch-size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup-epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        let finite = [self.lr_max, self.lr_min, self.weight_decay, self.adam_eps];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.adam_eps == 0.0 {
            return Err(Error::Config("learning rates, weight decay and eps must be finite and non-negative".into()));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "lr-min {} exceeds lr-max {}",
                self.lr_min, self.lr_max
            )));
        }
        for (what, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Range {
                    what,
                    value: b,
                    range: "[0, 1)",
                });
            }
        }
        if !(0.0..1.0).contains(&self.probe_ratio) {
            return Err(Error::Range {
                what: "probe-ratio",
                value: self.probe_ratio,
                range: "[0, 1)",
            });
        }
        if self.probe_size == 0 {
            return Err(Error::Config("probe-size must be positive".into()));
        }
        self.model.validate()?;
        self.objective()?.validate()
    }

    pub fn main_drops(&self) -> DropRates {
        DropRates {
            dropout: self.dropout,
            drop_path: self.drop_path,
        }
    }

    pub fn objective(&self) -> Result<Objective> {
        let sub = self
            .sub_spec
            .as_ref()
            .map(|s| build_sub_spec(s, self.main_drops()))
            .transpose()?;
        Ok(Objective {
            kind: self.objective,
            weights: self.loss_weights,
            sub,
            sub_target: self.sub_target,
            loss: self.loss_kind,
            smoothing: self.label_smoothing,
            main_drops: self.main_drops(),
        })
    }
}

/// Learning rate at update `step`: linear warmup from 0 to `lr_max` over
/// `warmup` steps, then cosine decay to `lr_min` at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_max;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_min + (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment estimates for every parameter tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().map(|p| vec![T::zero(); p.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One AdamW update from the gradients stored on `params`. Tensors flagged
/// in `decay` are first shrunk by `1 - lr * weight_decay`.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    decay: &[bool],
    lr: f64,
    cfg: &AdamWConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (c1, c2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    for (i, p) in params.tensors_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = p.grad().to_vec();
        let apply_decay = decay.get(i).copied().unwrap_or(false);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            if apply_decay {
                *theta *= shrink;
            }
            m[j] = b1 * m[j] + c1 * g[j];
            v[j] = b2 * v[j] + c2 * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *theta -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_main: f64,
    pub loss_sub: f64,
    pub probe_eq1: f64,
    pub probe_eq2: f64,
    pub grad_norm_main: f64,
    pub grad_norm_sub: f64,
    pub lr: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

/// Index of the first maximum of each row.
pub fn argmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `data` classified correctly in evaluation mode. Chunks are
/// spread over `threads` scoped threads; the result does not depend on the
/// thread count.
pub fn evaluate<T: Real>(vit: &Vit, params: &ParamStore<T>, data: &Dataset, chunk: usize, threads: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(chunk.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    let count = |idx: &[usize]| -> Result<usize> {
        let b: Batch<T> = data.batch(idx);
        let logits = vit.predict(params, &b.images)?;
        Ok(argmax_rows(&logits, b.classes)
            .iter()
            .zip(&b.labels)
            .filter(|(p, y)| p == y)
            .count())
    };
    let threads = threads.clamp(1, chunks.len());
    let correct: usize = if threads == 1 {
        chunks.iter().map(|c| count(c)).sum::<Result<usize>>()?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let chunks = &chunks;
                    let count = &count;
                    s.spawn(move || {
                        chunks
                            .iter()
                            .skip(t)
                            .step_by(threads)
                            .map(|c| count(c))
                            .sum::<Result<usize>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / data.len() as f64)
}

/// Probe stream space, disjoint from the training steps.
fn probe_keys(seed: u64, epoch: usize, chunk: usize) -> StepKeys {
    StepKeys::new(seed, (1 << 63) | ((epoch as u64) << 20) | chunk as u64)
}

pub struct Trainer {
    config: TrainConfig,
    vit: Vit,
    objective: Objective,
    params: ParamStore<f32>,
    state: AdamState<f32>,
    decay: Vec<bool>,
    train: Dataset,
    test: Dataset,
    epoch: usize,
    step: usize,
    steps_per_epoch: usize,
    threads: usize,
    lr_trace: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Splits) -> Result<Self> {
        config.validate()?;
        let Splits { train, test } = data;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if test.is_empty() {
            return Err(Error::Config("test set is empty".into()));
        }
        let m = &config.model;
        if train.image_size() != m.image_size || train.classes() != m.classes || m.channels != 3 {
            return Err(Error::Config(format!(
                "dataset ({}px, {} classes) does not match the model ({}px, {} classes, {} channels)",
                train.image_size(),
                train.classes(),
                m.image_size,
                m.classes,
                m.channels
            )));
        }
        if test.image_size() != train.image_size() || test.classes() != train.classes() {
            return Err(Error::Config("train and test splits differ in geometry".into()));
        }
        let vit = Vit::new(config.model.clone())?;
        let params = vit.init_params(config.seed);
        let state = AdamState::new(&params);
        let decay = vit.decay_mask();
        let steps_per_epoch = train.len().div_ceil(config.batch_size);
        Ok(Trainer {
            objective: config.objective()?,
            config,
            vit,
            params,
            state,
            decay,
            train,
            test,
            epoch: 0,
            step: 0,
            steps_per_epoch,
            threads: 1,
            lr_trace: Vec::new(),
        })
    }

    pub fn from_config(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = config.dataset.load()?;
        Self::new(config, data)
    }

    /// Threads used for evaluation.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn vit(&self) -> &Vit {
        &self.vit
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn into_params(self) -> ParamStore<f32> {
        self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Learning rate of every update so far.
    pub fn lr_trace(&self) -> &[f64] {
        &self.lr_trace
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.epochs
    }

    pub fn warmup_steps(&self) -> usize {
        self.steps_per_epoch * self.config.warmup_epochs
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(
            step,
            self.warmup_steps(),
            self.total_steps(),
            self.config.lr_max,
            self.config.lr_min,
        )
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.config.weight_decay,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        }
    }

    /// One optimisation step on the given training records.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<(f64, f64, f64, usize)> {
        let batch: Batch<f32> = self.train.batch(indices);
        let keys = StepKeys::new(self.config.seed, self.step as u64);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self
            .objective
            .build_step(&mut tape, &self.vit, &bound, &batch, &keys)?;
        let (main, sub, total) = out.values(&tape);
        if !(main.is_finite() && sub.is_finite() && total.is_finite()) {
            return Err(Error::NonFinite {
                epoch: self.epoch + 1,
                step: self.step + 1,
                main,
                sub,
                total,
            });
        }
        let correct = argmax_rows(tape.value(out.logits_main), batch.classes)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        tape.backward(out.total)?;
        self.params.pull_grads(&tape, &bound);
        drop(tape);
        self.step += 1;
        let lr = self.lr_at(self.step);
        let cfg = self.adamw();
        adamw_step(&mut self.params, &mut self.state, &self.decay, lr, &cfg);
        self.params.zero_grad();
        self.lr_trace.push(lr);
        Ok((main, sub, total, correct))
    }

    /// Runs one epoch and its end-of-epoch probes.
    pub fn train_epoch(&mut self) -> Result<TrainRecord> {
        let order = permutation(
            self.train.len(),
            &mut StreamKey::new(self.config.seed, Purpose::Shuffle, self.epoch as u64).rng(),
        );
        let (mut sm, mut ss, mut st, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            let (m, s, t, c) = self.train_step(idx)?;
            let w = idx.len() as f64;
            sm += m * w;
            ss += s * w;
            st += t * w;
            correct += c;
        }
        let n = self.train.len() as f64;
        self.epoch += 1;
        let (probe_eq1, probe_eq2, grad_norm_main, grad_norm_sub) = self.probe()?;
        let eval_acc = evaluate(&self.vit, &self.params, &self.test, 256, self.threads)?;
        Ok(TrainRecord {
            epoch: self.epoch,
            step: self.step,
            loss_total: st / n,
            loss_main: sm / n,
            loss_sub: ss / n,
            probe_eq1,
            probe_eq2,
            grad_norm_main,
            grad_norm_sub,
            lr: self.lr_at(self.step),
            train_acc: correct as f64 / n,
            eval_acc,
        })
    }

    /// Probe losses and branch gradient norms on the leading training
    /// images, averaged over batches. Leaves parameters and optimiser
    /// state untouched.
    fn probe(&self) -> Result<(f64, f64, f64, f64)> {
        let n = self.config.probe_size.min(self.train.len());
        let idx: Vec<usize> = (0..n).collect();
        let (mut e1, mut e2, mut gm, mut gs) = (0.0, 0.0, 0.0, 0.0);
        for (c, chunk) in idx.chunks(self.config.batch_size).enumerate() {
            let batch: Batch<f32> = self.train.batch(chunk);
            let keys = probe_keys(self.config.seed, self.epoch, c);
            let mask = MaskSpec::new(MaskStrategy::TokenRemoval, self.config.probe_ratio, 0, keys.sub_mask())?;
            let (a, b) = probe_losses(&self.vit, &self.params, &batch, &mask)?;
            let report = branch_grad_norms(&self.vit, &self.params, &batch, &self.objective, &keys)?;
            let w = chunk.len() as f64;
            e1 += a * w;
            e2 += b * w;
            gm += report.grad_norm_main * w;
            gs += report.grad_norm_sub * w;
        }
        let n = n as f64;
        Ok((e1 / n, e2 / n, gm / n, gs / n))
    }

    pub fn run(&mut self) -> Result<Vec<TrainRecord>> {
        let mut records = Vec::with_capacity(self.config.epochs);
        while self.epoch < self.config.epochs {
            records.push(self.train_epoch()?);
        }
        Ok(records)
    }
}
