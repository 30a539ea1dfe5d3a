//! Optimizer, learning-rate schedule, training loop and evaluation.

use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{resolve_image, Sample, Visual};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, mean_average_precision, MapReport};
use crate::model::{Model, ModelInput, Resources};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::text::TextInstance;
use crate::vision::{preprocess_eval, preprocess_train, read_ppm, ImageTensor, VisualInput};

/// Warmup length the defaults were tuned for, and the number of optimizer
/// steps per epoch assumed to go with it.
pub const REFERENCE_WARMUP: usize = 500;
pub const REFERENCE_STEPS_PER_EPOCH: usize = 1000;
pub const MIN_WARMUP: usize = 10;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

// rng stream tags
const STREAM_ORDER: u64 = 1;
const STREAM_TEXT: u64 = 2;
const STREAM_IMAGE: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `None` scales the reference warmup by steps per epoch.
    pub warmup_iters: Option<usize>,
    /// First cosine period in steps; `None` means one epoch.
    pub restart_period: Option<usize>,
    pub restart_mult: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 3e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_iters: None,
            restart_period: None,
            restart_mult: 2,
            epochs: 10,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.beta1, self.beta2, self.eps];
        if positive.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate, betas and eps must be positive, weight decay ≥ 0".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("betas must be below 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.restart_mult == 0 {
            return Err(Error::Config("epochs, batch_size and restart_mult must be positive".into()));
        }
        if self.warmup_iters == Some(0) || self.restart_period == Some(0) {
            return Err(Error::Config("warmup_iters and restart_period must be at least 1".into()));
        }
        Ok(())
    }

    /// Resolves the schedule for a run with `steps_per_epoch` optimizer steps per epoch.
    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        let scaled = (REFERENCE_WARMUP as f64 * steps_per_epoch as f64 / REFERENCE_STEPS_PER_EPOCH as f64).round();
        Schedule {
            learning_rate: self.learning_rate,
            warmup: self.warmup_iters.unwrap_or((scaled as usize).max(MIN_WARMUP)),
            period: self.restart_period.unwrap_or(steps_per_epoch.max(1)),
            mult: self.restart_mult,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub learning_rate: f64,
    pub warmup: usize,
    pub period: usize,
    pub mult: usize,
}

/// Linear warmup from 0, then cosine annealing to 0 with restarts whose
/// period grows by `mult` each time.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup {
        return s.learning_rate * step as f64 / s.warmup as f64;
    }
    let mut t = step - s.warmup;
    let mut period = s.period;
    while t >= period {
        t -= period;
        period = period.saturating_mul(s.mult);
    }
    0.5 * s.learning_rate * (1.0 + (PI * t as f64 / period as f64).cos())
}

/// AdamW moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        TrainState {
            step: 0,
            lr: 0.0,
            first: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            second: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One AdamW update of every parameter flagged in `trainable` from its accumulated gradient.
///
/// Nothing is modified when any trainable gradient is non-finite.
pub fn adamw_step(
    state: &mut TrainState,
    store: &mut ParamStore,
    cfg: &OptimConfig,
    lr: f64,
    trainable: &[bool],
) -> Result<()> {
    if state.first.len() != store.len() || trainable.len() != store.len() {
        return Err(Error::Usage("optimizer state does not match the parameter store".into()));
    }
    if let Some((_, p)) = store.iter().find(|(id, p)| trainable[id.index()] && !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient { param: p.name.clone() });
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, p) in store.iter_mut() {
        let i = id.index();
        if !trainable[i] {
            continue;
        }
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let g = p.grad.data();
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            *w -= lr * cfg.weight_decay * *w;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// All branches optimized jointly on the main loss.
    #[default]
    EndToEnd,
    /// Stage 1 trains the text and image branches through auxiliary heads;
    /// stage 2 freezes them and trains VKAC and the classifier.
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub regime: Regime,
    /// Permute scene-text instances before assembling the training sentence.
    pub shuffle_text: bool,
    /// Random crops for image inputs during training.
    pub augment_images: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            regime: Regime::EndToEnd,
            shuffle_text: true,
            augment_images: true,
        }
    }
}

/// A sample with its image (if any) decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub visual: RawVisual,
    pub texts: Vec<TextInstance>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawVisual {
    Feature(Tensor),
    Image(ImageTensor),
}

/// Decodes images, resolving relative paths against `dataset_path`.
pub fn load_examples(samples: &[Sample], dataset_path: &Path) -> Result<Vec<Example>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let visual = match &s.visual {
                Visual::Feature(t) => RawVisual::Feature(t.clone()),
                Visual::Image(p) => RawVisual::Image(
                    read_ppm(&resolve_image(dataset_path, p))
                        .map_err(|e| Error::Sample { index: i, msg: e.to_string() })?,
                ),
            };
            Ok(Example { visual, texts: s.texts.clone(), label: s.label })
        })
        .collect()
}

/// Samples with precomputed features only.
pub fn examples_from_features(samples: &[Sample]) -> Result<Vec<Example>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| match &s.visual {
            Visual::Feature(t) => Ok(Example { visual: RawVisual::Feature(t.clone()), texts: s.texts.clone(), label: s.label }),
            Visual::Image(_) => Err(Error::Sample { index: i, msg: "image sample needs load_examples".into() }),
        })
        .collect()
}

fn check_examples(model: &Model, examples: &[Example]) -> Result<()> {
    let cfg = &model.config;
    for (i, ex) in examples.iter().enumerate() {
        let bad = |msg: String| Err(Error::Sample { index: i, msg });
        if ex.label >= cfg.num_classes {
            return bad(format!("label {} out of range for {} classes", ex.label, cfg.num_classes));
        }
        match (&ex.visual, cfg.vision.use_precomputed) {
            (RawVisual::Feature(t), true) if t.shape() != [1, cfg.dim] => {
                return bad(format!("visual feature has shape {:?}, model dim is {}", t.shape(), cfg.dim));
            }
            (RawVisual::Feature(_), false) => return bad("model expects images, sample has a feature".into()),
            (RawVisual::Image(_), true) => return bad("model expects precomputed features, sample has an image".into()),
            (RawVisual::Image(img), false) if img.height() < 2 || img.width() < 2 => {
                return bad("image smaller than 2×2".into());
            }
            _ => {}
        }
    }
    Ok(())
}

fn visual_input(model: &Model, ex: &Example, augment_seed: Option<u64>) -> Result<VisualInput> {
    Ok(match &ex.visual {
        RawVisual::Feature(t) => VisualInput::Feature(t.clone()),
        RawVisual::Image(img) => {
            let size = model.config.vision.input_size;
            VisualInput::Image(match augment_seed {
                Some(seed) => preprocess_train(img, seed, size)?,
                None => preprocess_eval(img, size),
            })
        }
    })
}

/// Deterministic evaluation-mode input: spotting order, eval preprocessing.
pub fn eval_input(model: &Model, res: &Resources, ex: &Example) -> Result<ModelInput> {
    let visual = visual_input(model, ex, None)?;
    model.prepare(res, &ex.texts, visual, false, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub report: MapReport,
    pub accuracy: f64,
}

pub fn evaluate(model: &Model, res: &Resources, examples: &[Example]) -> Result<Evaluation> {
    check_examples(model, examples)?;
    let probs = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            eval_input(model, res, ex)
                .and_then(|input| model.predict(&input))
                .map_err(|e| Error::Sample { index: i, msg: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let report = mean_average_precision(&probs, &labels, model.config.num_classes)?;
    let accuracy = accuracy(&probs, &labels);
    Ok(Evaluation { probs, labels, report, accuracy })
}

pub fn evaluate_map(model: &Model, res: &Resources, examples: &[Example]) -> Result<MapReport> {
    evaluate(model, res, examples).map(|e| e.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub train_loss: f64,
    pub eval_map: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub per_class_ap: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Main,
    Aux,
}

struct Stage {
    index: usize,
    objective: Objective,
    trainable: Vec<bool>,
}

fn stages(model: &Model, regime: Regime) -> Result<Vec<Stage>> {
    let all = vec![true; model.store.len()];
    match regime {
        Regime::EndToEnd => Ok(vec![Stage { index: 0, objective: Objective::Main, trainable: all }]),
        Regime::TwoStage => {
            if model.aux.is_none() {
                return Err(Error::Config("two-stage training needs a model built with aux_heads".into()));
            }
            let mask = |prefixes: &[&str]| -> Vec<bool> {
                model.store.iter().map(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre))).collect()
            };
            Ok(vec![
                Stage { index: 1, objective: Objective::Aux, trainable: mask(&["text.", "vision.", "aux."]) },
                Stage { index: 2, objective: Objective::Main, trainable: mask(&["vkac.", "classifier."]) },
            ])
        }
    }
}

/// Trains `model` in place.
///
/// Per epoch the metrics record is appended to `out_dir/metrics.jsonl` and
/// the checkpoint rewritten to `out_dir/model.ckpt` when `out_dir` is given.
/// Results depend only on the model, data, options and `seed`.
pub fn train(
    model: &mut Model,
    res: &Resources,
    train_set: &[Example],
    eval_set: Option<&[Example]>,
    optim: &OptimConfig,
    opts: &TrainOptions,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    optim.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    check_examples(model, train_set)?;
    if let Some(e) = eval_set {
        check_examples(model, e)?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), "")?;
    }
    let steps_per_epoch = train_set.len().div_ceil(optim.batch_size);
    let schedule = optim.schedule(steps_per_epoch);
    let mut history = Vec::new();
    let mut epoch_counter = 0;

    for stage in stages(model, opts.regime)? {
        let mut state = TrainState::new(&model.store);
        for epoch in 0..optim.epochs {
            let tag = [stage.index as u64, epoch as u64];
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut rng::derive(seed, &[STREAM_ORDER, tag[0], tag[1]]));
            let mut loss_sum = 0.0;
            for batch in order.chunks(optim.batch_size) {
                model.store.zero_grad();
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let ex = &train_set[i];
                    let key = [tag[0], tag[1], i as u64];
                    let image_seed = opts
                        .augment_images
                        .then(|| rng::derive_seed(seed, &[STREAM_IMAGE, key[0], key[1], key[2]]));
                    let text_seed = rng::derive_seed(seed, &[STREAM_TEXT, key[0], key[1], key[2]]);
                    let sample_err = |e: Error| Error::Sample { index: i, msg: e.to_string() };
                    let visual = visual_input(model, ex, image_seed).map_err(sample_err)?;
                    let input = model
                        .prepare(res, &ex.texts, visual, opts.shuffle_text, text_seed)
                        .map_err(sample_err)?;
                    let grads = {
                        let mut tape = model.tape();
                        let l = match stage.objective {
                            Objective::Main => model.loss(&mut tape, &input, ex.label),
                            Objective::Aux => model.aux_loss(&mut tape, &input, ex.label),
                        }
                        .map_err(sample_err)?;
                        loss_sum += tape.value(l).data()[0];
                        tape.backward(l)?
                    };
                    grads.accumulate_into(&mut model.store, scale);
                }
                let lr = lr_at(state.step, &schedule);
                adamw_step(&mut state, &mut model.store, optim, lr, &stage.trainable)?;
            }
            model.store.zero_grad();

            let eval = eval_set.map(|e| evaluate(model, res, e)).transpose()?;
            let record = EpochMetrics {
                epoch: epoch_counter,
                stage: stage.index,
                train_loss: loss_sum / train_set.len() as f64,
                eval_map: eval.as_ref().map(|e| e.report.map),
                eval_accuracy: eval.as_ref().map(|e| e.accuracy),
                per_class_ap: eval.map(|e| e.report.per_class),
            };
            log::info!(
                "stage {} epoch {}: loss {:.6} mAP {:?}",
                record.stage,
                record.epoch,
                record.train_loss,
                record.eval_map
            );
            if let Some(dir) = out_dir {
                let line = serde_json::to_string(&record).map_err(|e| Error::Config(e.to_string()))?;
                let mut f = OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?;
                writeln!(f, "{line}")?;
                model.save(&dir.join(CHECKPOINT_FILE))?;
            }
            history.push(record);
            epoch_counter += 1;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, KarcConfig};
    use crate::kb::{EntityRecord, EntityStore, MentionPriorTable, PriorEntry};
    use crate::model::{Fusion, ModelConfig, TextBranch};
    use crate::text::{Vocab, UNK_TOKEN};
    use proptest::prelude::*;

    fn schedule() -> Schedule {
        Schedule { learning_rate: 0.1, warmup: 10, period: 20, mult: 2 }
    }

    #[test]
    fn warmup_and_cosine_points() {
        let s = schedule();
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(10, &s), 0.1);
        assert!((lr_at(20, &s) - 0.05).abs() < 1e-12);
        // restart at warmup + period, next period is 40
        assert_eq!(lr_at(30, &s), 0.1);
        assert!((lr_at(50, &s) - 0.05).abs() < 1e-12);
        assert_eq!(lr_at(70, &s), 0.1);
    }

    #[test]
    fn warmup_scaling() {
        let cfg = OptimConfig::default();
        assert_eq!(cfg.schedule(10).warmup, MIN_WARMUP);
        assert_eq!(cfg.schedule(25).warmup, 13);
        assert_eq!(cfg.schedule(1000).warmup, 500);
        assert_eq!(cfg.schedule(100).warmup, 50);
        assert_eq!(cfg.schedule(25).period, 25);
        let fixed = OptimConfig { warmup_iters: Some(3), restart_period: Some(7), ..cfg };
        assert_eq!(fixed.schedule(25).warmup, 3);
        assert_eq!(fixed.schedule(25).period, 7);
    }

    proptest! {
        #[test]
        fn lr_nonnegative_and_bounded(step in 0usize..10_000, warmup in 1usize..100, period in 1usize..100) {
            let s = Schedule { learning_rate: 0.3, warmup, period, mult: 2 };
            let lr = lr_at(step, &s);
            prop_assert!((0.0..=0.3).contains(&lr));
        }

        #[test]
        fn lr_continuous_at_warmup_end(warmup in 1usize..10_000, period in 1usize..10_000) {
            let s = Schedule { learning_rate: 1.0, warmup, period, mult: 2 };
            // ramp reaches lr exactly where the cosine starts at lr
            let before = lr_at(warmup - 1, &s);
            prop_assert!((lr_at(warmup, &s) - 1.0).abs() < 1e-15);
            prop_assert!((1.0 - before - 1.0 / warmup as f64).abs() < 1e-12);
        }
    }

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value)).unwrap();
        store.get_mut(id).grad = Tensor::scalar(grad);
        store
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut store = scalar_store(1.5, 0.0);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut st = TrainState::new(&store);
        adamw_step(&mut st, &mut store, &cfg, 0.1, &[true]).unwrap();
        assert_eq!(store.iter().next().unwrap().1.value.data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(2.0, 1.0);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut st = TrainState::new(&store);
        adamw_step(&mut st, &mut store, &cfg, 0.01, &[true]).unwrap();
        let w = store.iter().next().unwrap().1.value.data()[0];
        assert!((w - (2.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);

        // decay alone: w ← w − lr·wd·w, then the same moment step
        let mut store = scalar_store(2.0, 1.0);
        let cfg = OptimConfig { weight_decay: 0.5, ..OptimConfig::default() };
        let mut st = TrainState::new(&store);
        adamw_step(&mut st, &mut store, &cfg, 0.01, &[true]).unwrap();
        let w = store.iter().next().unwrap().1.value.data()[0];
        assert!((w - (2.0 * (1.0 - 0.005) - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = scalar_store(2.0, f64::NAN);
        let mut st = TrainState::new(&store);
        let err = adamw_step(&mut st, &mut store, &OptimConfig::default(), 0.01, &[true]).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient { param } if param == "w"));
        assert_eq!(store.iter().next().unwrap().1.value.data(), &[2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = scalar_store(2.0, 1.0);
        let mut st = TrainState::new(&store);
        adamw_step(&mut st, &mut store, &OptimConfig::default(), 0.01, &[false]).unwrap();
        assert_eq!(store.iter().next().unwrap().1.value.data(), &[2.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(w) = Σ (w_i - c_i)^2
        let target = [1.0, -2.0, 0.5];
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![0.0; 3])).unwrap();
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut st = TrainState::new(&store);
        let f = |w: &[f64]| w.iter().zip(target).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        let mut prev = f(store.value(id).data());
        for _ in 0..10 {
            let g: Vec<f64> = store.value(id).data().iter().zip(target).map(|(a, c)| 2.0 * (a - c)).collect();
            store.get_mut(id).grad = Tensor::row(g);
            adamw_step(&mut st, &mut store, &cfg, 0.1, &[true]).unwrap();
            let now = f(store.value(id).data());
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn update_independent_of_registration_order() {
        let a0 = Tensor::row(vec![0.3, -0.7]);
        let b0 = Tensor::row(vec![1.1]);
        let ga = Tensor::row(vec![0.2, 0.9]);
        let gb = Tensor::row(vec![-0.4]);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let run = |first_a: bool| {
            let mut store = ParamStore::new();
            let (ia, ib) = if first_a {
                (store.add("a", a0.clone()).unwrap(), store.add("b", b0.clone()).unwrap())
            } else {
                let ib = store.add("b", b0.clone()).unwrap();
                (store.add("a", a0.clone()).unwrap(), ib)
            };
            let mut st = TrainState::new(&store);
            for _ in 0..3 {
                store.get_mut(ia).grad = ga.clone();
                store.get_mut(ib).grad = gb.clone();
                adamw_step(&mut st, &mut store, &cfg, 0.05, &[true, true]).unwrap();
            }
            (store.value(ia).clone(), store.value(ib).clone())
        };
        assert_eq!(run(true), run(false));
    }

    fn tiny() -> (Model, Resources, Vec<Example>) {
        let vocab = Vocab::new([UNK_TOKEN, "apple", "pie"].iter().map(|s| s.to_string()).collect()).unwrap();
        let mut entities = EntityStore::new();
        entities.insert(EntityRecord::new("fruit", "fruit", vec![1.0, 0.0])).unwrap();
        let mut priors = MentionPriorTable::new();
        priors.insert("apple", vec![PriorEntry { entity_id: "fruit".into(), prior: 1.0 }]).unwrap();
        let config = ModelConfig {
            dim: 4,
            num_classes: 3,
            text_branch: TextBranch::Knowledge,
            fusion: Fusion::Vkac,
            encoder: EncoderConfig { num_layers: 2, insertion_layer: 1, heads: 1, vocab_size: 3, max_seq_len: 8 },
            karc: KarcConfig { entity_dim: 2, ..KarcConfig::default() },
            ..ModelConfig::default()
        };
        let ex = Example {
            visual: RawVisual::Feature(Tensor::row(vec![0.5, -0.5, 0.25, 0.0])),
            texts: vec![TextInstance::new("apple", 0).unwrap(), TextInstance::new("pie", 1).unwrap()],
            label: 2,
        };
        (Model::new(config, 1).unwrap(), Resources { vocab, entities, priors }, vec![ex])
    }

    #[test]
    fn memorizes_one_sample() {
        let (mut model, res, data) = tiny();
        let optim = OptimConfig { learning_rate: 1e-2, epochs: 300, batch_size: 1, ..OptimConfig::default() };
        let hist = train(&mut model, &res, &data, None, &optim, &TrainOptions::default(), 3, None).unwrap();
        let last = hist.last().unwrap().train_loss;
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn bad_sample_dims_name_the_index() {
        let (mut model, res, mut data) = tiny();
        data.push(Example { visual: RawVisual::Feature(Tensor::row(vec![1.0; 3])), texts: vec![], label: 0 });
        let err = train(&mut model, &res, &data, None, &OptimConfig::default(), &TrainOptions::default(), 0, None)
            .unwrap_err();
        assert!(matches!(err, Error::Sample { index: 1, .. }), "{err}");
    }

    #[test]
    fn two_stage_requires_aux_heads() {
        let (mut model, res, data) = tiny();
        let opts = TrainOptions { regime: Regime::TwoStage, ..TrainOptions::default() };
        assert!(train(&mut model, &res, &data, None, &OptimConfig::default(), &opts, 0, None).is_err());
    }

    #[test]
    fn two_stage_freezes_text_in_stage_two() {
        let (model, res, data) = tiny();
        let mut model = Model::new(ModelConfig { aux_heads: true, ..model.config }, 1).unwrap();
        let opts = TrainOptions { regime: Regime::TwoStage, ..TrainOptions::default() };
        let optim = OptimConfig { learning_rate: 1e-2, epochs: 2, batch_size: 1, ..OptimConfig::default() };
        let hist = train(&mut model, &res, &data, Some(&data), &optim, &opts, 0, None).unwrap();
        assert_eq!(hist.iter().map(|h| h.stage).collect::<Vec<_>>(), [1, 1, 2, 2]);
        assert_eq!(hist.iter().map(|h| h.epoch).collect::<Vec<_>>(), [0, 1, 2, 3]);
    }
}
