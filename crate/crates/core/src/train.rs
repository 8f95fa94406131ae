//! Optimizer, training loop, evaluation and timing harness.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::EncoderConfig;
use crate::autodiff::Tape;
use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::models::{ade, AnyModel, AttributedPointCloud, ClassifierConfig, FusionMode, Model, ModelConfig, Prediction, Target};
use crate::params::ParamSet;
use crate::rng::SplitMix64;
use crate::rotation::Rotation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Environment variable read by [`init_threads_from_env`].
pub const THREADS_ENV: &str = "VNT_THREADS";

/// Sizes the global worker pool from `VNT_THREADS` when set. Call once,
/// before any parallel work; later calls are ignored.
pub fn init_threads_from_env() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Decays linearly to zero at the last step.
    #[default]
    Linear,
    Constant,
}

/// Optimization settings (the `[train]` section of a run config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Random rotations about z applied to training samples.
    pub augment_z: bool,
    /// Fraction of the dataset used for training when no test file is given.
    pub train_frac: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            schedule: Schedule::Linear,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            augment_z: false,
            train_frac: 0.8,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("adam_eps must be positive and weight_decay non-negative"));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::config("train_frac must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Learning rate for `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Linear => self.lr * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

/// A complete run description: `[model]` plus `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.build::<f64>(0).map(|_| ())
    }

    /// Errors unless the dataset fits the model.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let mismatch = |what: String| Err(Error::config(format!("dataset does not match the model: {what}")));
        match (&self.model, ds.task) {
            (ModelConfig::Classifier(c), TaskKind::Classification) => {
                if c.classes != ds.k {
                    return mismatch(format!("{} classes vs {}", c.classes, ds.k));
                }
                if c.fusion != FusionMode::SpatialOnly && c.d_a != ds.d_a {
                    return mismatch(format!("{} attributes vs {}", c.d_a, ds.d_a));
                }
            }
            (ModelConfig::Forecaster(c), TaskKind::Forecasting) => {
                if c.t_out != ds.k {
                    return mismatch(format!("horizon {} vs {}", c.t_out, ds.k));
                }
            }
            (ModelConfig::Vanilla(v), TaskKind::Classification) if v.classes.is_some() => {
                if v.classes != Some(ds.k) || v.d_a != ds.d_a {
                    return mismatch("baseline classes or attributes".into());
                }
            }
            (ModelConfig::Vanilla(v), TaskKind::Forecasting) if v.t_out.is_some() => {
                if v.t_out != Some(ds.k) {
                    return mismatch("baseline horizon".into());
                }
            }
            _ => return mismatch("task kind".into()),
        }
        ds.validate()
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, opts: &TrainOptions) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            beta1: opts.beta1,
            beta2: opts.beta2,
            eps: opts.adam_eps,
            weight_decay: opts.weight_decay,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with gradients ordered like `params`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j].to_f64_lossy();
                let mj = self.beta1 * m[j].to_f64_lossy() + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j].to_f64_lossy() + (1.0 - self.beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let xf = x.to_f64_lossy();
                let upd = (mj / c1) / ((vj / c2).sqrt() + self.eps) + self.weight_decay * xf;
                *x = T::of(xf - lr * upd);
            }
        }
        Ok(())
    }
}

/// Mean loss and gradient over a batch. Samples are processed in parallel,
/// gradients summed in sample order, so results do not depend on the thread
/// count.
pub fn batch_gradients<T: Scalar>(model: &dyn Model<T>, batch: &[AttributedPointCloud]) -> Result<(f64, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let per_sample: Vec<(f64, Vec<Tensor<T>>)> = batch
        .par_iter()
        .map(|pc| {
            let tape = Tape::new();
            let p = model.params().bind(&tape);
            let loss = model.loss(&p, &tape, pc)?;
            let value = loss.value().item().to_f64_lossy();
            if !value.is_finite() {
                let origin = match tape.first_non_finite() {
                    Some((node, op)) => format!("first non-finite value produced by `{op}` (node {node})"),
                    None => "no non-finite intermediate found".to_string(),
                };
                return Err(Error::Numeric(format!("loss is {value}; {origin}")));
            }
            let mut grads = tape.backward(loss)?;
            Ok((value, p.collect(&mut grads)))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut acc) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    for a in &mut acc {
        *a = a.scale(T::of(scale));
        if !a.all_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
    }
    Ok((loss * scale, acc))
}

/// Test-set summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub ade: Option<f64>,
    pub predictions: Vec<Prediction>,
}

impl EvalMetrics {
    /// Predicted classes, if this is a classification run.
    pub fn classes(&self) -> Vec<Option<usize>> {
        self.predictions.iter().map(Prediction::argmax).collect()
    }

    /// Accuracy for classifiers, ADE otherwise.
    pub fn headline(&self) -> f64 {
        self.accuracy.or(self.ade).unwrap_or(f64::NAN)
    }
}

/// Accuracy or ADE of `model` on `ds`.
pub fn evaluate<T: Scalar>(model: &dyn Model<T>, ds: &Dataset) -> Result<EvalMetrics> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset"));
    }
    let predictions: Vec<Prediction> = ds.records.par_iter().map(|pc| model.predict(pc)).collect::<Result<_>>()?;
    let n = ds.len();
    let (mut correct, mut ade_sum) = (0usize, 0.0);
    for (pc, pred) in ds.records.iter().zip(&predictions) {
        match (&pc.target, pred) {
            (Target::Class(c), Prediction::Logits(_)) => correct += usize::from(pred.argmax() == Some(*c)),
            (Target::Trajectory(y), Prediction::Trajectory(yhat)) => ade_sum += ade(y, yhat)?,
            _ => return Err(Error::config("model output does not match the dataset task")),
        }
    }
    let classify = ds.task == TaskKind::Classification;
    Ok(EvalMetrics {
        n,
        accuracy: classify.then(|| correct as f64 / n as f64),
        ade: (!classify).then(|| ade_sum / n as f64),
        predictions,
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_ade: Option<f64>,
    pub lr: f64,
    pub wall_s: f64,
    pub steps_per_sec: f64,
}

/// First line of every metrics file.
pub const METRICS_SCHEMA: &str = "# vnt-metrics v1";
pub const METRICS_HEADER: &str = "epoch,step,train_loss,test_accuracy,test_ade,lr,wall_s,steps_per_sec";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.3},{:.3}",
            self.epoch,
            self.step,
            self.train_loss,
            opt(self.test_accuracy),
            opt(self.test_ade),
            self.lr,
            self.wall_s,
            self.steps_per_sec
        )
    }
}

/// Appends `row` to a metrics CSV, writing the schema line and header first
/// when the file is new. Refuses files with a different schema.
pub fn append_metrics(path: impl AsRef<Path>, row: &EpochMetrics) -> Result<()> {
    let path = path.as_ref();
    let fresh = match std::fs::read_to_string(path) {
        Ok(text) => {
            if text.lines().next() != Some(METRICS_SCHEMA) {
                return Err(Error::config(format!("{} is not a {METRICS_SCHEMA} file", path.display())));
            }
            false
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => true,
        Err(e) => return Err(e.into()),
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_SCHEMA}\n{METRICS_HEADER}")?;
    }
    writeln!(f, "{}", row.csv_row())?;
    Ok(())
}

/// Owns a model and its optimizer state.
pub struct Trainer<T> {
    pub model: AnyModel<T>,
    pub opts: TrainOptions,
    opt: AdamW<T>,
    rng: SplitMix64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model.build::<T>(cfg.train.seed)?;
        Ok(Self::from_model(model, cfg.train.clone()))
    }

    pub fn from_model(model: AnyModel<T>, opts: TrainOptions) -> Self {
        let opt = AdamW::new(model.params(), &opts);
        let rng = SplitMix64::stream(opts.seed, 0x747261696e);
        Trainer { model, opts, opt, rng }
    }

    /// Runs every epoch, calling `on_epoch` after each one (for logging and
    /// checkpointing). The test set, if any, is evaluated each epoch.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochMetrics, &AnyModel<T>) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training dataset"));
        }
        let per_epoch = train.len().div_ceil(self.opts.batch_size);
        let total = per_epoch * self.opts.epochs;
        let start = Instant::now();
        let mut history = Vec::with_capacity(self.opts.epochs);
        for epoch in 1..=self.opts.epochs {
            let epoch_start = Instant::now();
            let mut order: Vec<usize> = (0..train.len()).collect();
            self.rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut lr = self.opts.lr;
            for (b, chunk) in order.chunks(self.opts.batch_size).enumerate() {
                let batch: Vec<AttributedPointCloud> = chunk
                    .iter()
                    .map(|&i| {
                        let pc = &train.records[i];
                        if self.opts.augment_z {
                            pc.rotated(&Rotation::about_z(self.rng.uniform_in(0.0, std::f64::consts::TAU)))
                        } else {
                            Ok(pc.clone())
                        }
                    })
                    .collect::<Result<_>>()?;
                let (loss, grads) = batch_gradients(self.model.as_dyn(), &batch).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                    other => other,
                })?;
                lr = self.opts.lr_at(self.opt.steps() as usize, total);
                self.opt.step(self.model.params_mut(), &grads, lr)?;
                loss_sum += loss * batch.len() as f64;
            }
            let eval = test.map(|t| evaluate(self.model.as_dyn(), t)).transpose()?;
            let secs = epoch_start.elapsed().as_secs_f64();
            let m = EpochMetrics {
                epoch,
                step: self.opt.steps(),
                train_loss: loss_sum / train.len() as f64,
                test_accuracy: eval.as_ref().and_then(|e| e.accuracy),
                test_ade: eval.as_ref().and_then(|e| e.ade),
                lr,
                wall_s: start.elapsed().as_secs_f64(),
                steps_per_sec: per_epoch as f64 / secs.max(1e-9),
            };
            on_epoch(&m, &self.model)?;
            history.push(m);
        }
        Ok(history)
    }
}

/// Timing of one encoder configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub tokens: usize,
    pub latent: Option<usize>,
    pub steps_per_sec: f64,
    pub attention_flops: u64,
}

pub const BENCH_HEADER: &str = "label,tokens,latent,steps_per_sec,attention_flops";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{}",
            self.label,
            self.tokens,
            self.latent.map(|m| m.to_string()).unwrap_or_default(),
            self.steps_per_sec,
            self.attention_flops
        )
    }
}

/// Training steps per second of a spatial-only classifier on random clouds
/// of `n` points: forward, backward and an optimizer update per step.
pub fn bench_encoder(label: &str, encoder: &EncoderConfig, n: usize, steps: usize, seed: u64) -> Result<BenchRow> {
    if steps == 0 || n == 0 {
        return Err(Error::config("bench needs positive steps and tokens"));
    }
    let cfg = ModelConfig::Classifier(ClassifierConfig {
        classes: 2,
        fusion: FusionMode::SpatialOnly,
        d_a: 0,
        head_hidden: 64,
        attr_hidden: 32,
        encoder: encoder.clone(),
    });
    let opts = TrainOptions { seed, ..TrainOptions::default() };
    let mut model = cfg.build::<f64>(seed)?;
    let mut opt = AdamW::new(model.params(), &opts);
    let mut rng = SplitMix64::stream(seed, 0x62656e);
    let cloud = AttributedPointCloud::spatial(Tensor::from_fn(&[n, 3], |_| rng.normal()), Target::Class(0))?;
    let batch = [cloud];
    // One untimed warm-up step.
    let (_, g) = batch_gradients(model.as_dyn(), &batch)?;
    opt.step(model.params_mut(), &g, opts.lr)?;
    let start = Instant::now();
    for _ in 0..steps {
        let (_, g) = batch_gradients(model.as_dyn(), &batch)?;
        opt.step(model.params_mut(), &g, opts.lr)?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(BenchRow {
        label: label.to_string(),
        tokens: n,
        latent: encoder.latent,
        steps_per_sec: steps as f64 / secs.max(1e-9),
        attention_flops: encoder.attention_flops(n),
    })
}

/// Outcome of one low-precision training run.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRun {
    pub eps: f64,
    pub seed: u64,
    /// Final test accuracy, or `None` when training hit a non-finite value.
    pub accuracy: Option<f64>,
    pub failure: Option<String>,
}

/// Trains a classifier in single precision on clouds scaled by `scale`,
/// once per seed, with the encoder's bias size set to `eps`.
pub fn stability_run(cfg: &RunConfig, train: &Dataset, test: &Dataset, eps: f64, seeds: &[u64], scale: f64) -> Result<Vec<StabilityRun>> {
    let shrink = |ds: &Dataset| Dataset {
        records: ds
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.points = r.points.scale(scale);
                r
            })
            .collect(),
        ..ds.clone()
    };
    let (train, test) = (shrink(train), shrink(test));
    let mut model_cfg = cfg.model.clone();
    match &mut model_cfg {
        ModelConfig::Classifier(c) => c.encoder.eps = eps,
        ModelConfig::Forecaster(c) => c.encoder.eps = eps,
        ModelConfig::Vanilla(_) => return Err(Error::config("stability runs need a VN model")),
    }
    seeds
        .iter()
        .map(|&seed| {
            let run = RunConfig {
                model: model_cfg.clone(),
                train: TrainOptions { seed, ..cfg.train.clone() },
            };
            let mut trainer = Trainer::<f32>::new(&run)?;
            match trainer.fit(&train, None, |_, _| Ok(())) {
                Ok(_) => {
                    let m = evaluate(trainer.model.as_dyn(), &test);
                    match m {
                        Ok(m) if m.predictions.iter().all(finite_prediction) => Ok(StabilityRun {
                            eps,
                            seed,
                            accuracy: Some(m.headline()),
                            failure: None,
                        }),
                        Ok(_) => Ok(StabilityRun { eps, seed, accuracy: None, failure: Some("non-finite test output".into()) }),
                        Err(e) => Ok(StabilityRun { eps, seed, accuracy: None, failure: Some(e.to_string()) }),
                    }
                }
                Err(Error::Numeric(msg)) => Ok(StabilityRun { eps, seed, accuracy: None, failure: Some(msg) }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn finite_prediction(p: &Prediction) -> bool {
    match p {
        Prediction::Logits(v) => v.iter().all(|x| x.is_finite()),
        Prediction::Trajectory(t) => t.all_finite(),
    }
}
