//! Training configuration, Adam, the training loop and ablation runs.
//!
//! Config files are flat `key = value` lines; `#` starts a comment. Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `dim` | representation width | 64 |
//! | `kernel_size` / `k` | Q/K conv window | 3 |
//! | `head_kernel` / `k2` | context-head window | 3 |
//! | `alpha` | self/context head mix | 0.8 |
//! | `lambda` | calibration weight | 0.0 |
//! | `num_blocks` | attention blocks | 2 |
//! | `max_len` | input window | 50 |
//! | `variant` | `C3SASR`, `C3CSASR`, `SASRec`, `FFN`, `NoCC`, `RawConv` | `C3SASR` |
//! | `dropout` | dropout rate | 0.2 |
//! | `block_ffn` | feed-forward sub-layer per block | true |
//! | `learning_rate` / `lr` | Adam step size | 0.001 |
//! | `batch_size` | windows per step | 256 |
//! | `epochs` | epoch budget | 20 |
//! | `seed` | RNG seed | 42 |
//! | `beta1`, `beta2`, `epsilon` | Adam constants | 0.9, 0.999, 1e-8 |
//! | `clip_norm` | global gradient norm cap, 0 disables | 5.0 |
//! | `patience` | epochs without validation gain before stopping | 3 |
//! | `validation_fraction` | trailing share of windows held for validation | 0.05 |
//! | `checkpoint`, `report` | output paths | unset |

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::weighted_loss_on_tape;
use crate::data::{
    assemble_batch, build_training_windows, test_split, DatasetBundle, TestCase, TrainingWindow,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, recall_at_k, recommend, EvalOptions, EvalReport};
use crate::model::{C3Model, Mode, ModelConfig, ParamStore, Variant};
use crate::tensor::Tape;

/// Windows recorded on one tape; batches are split into shards of this size.
const SHARD_SIZE: usize = 16;
const VALIDATION_CUTOFF: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 256,
            epochs: 20,
            seed: 42,
            clip_norm: 5.0,
            patience: 3,
            validation_fraction: 0.05,
            checkpoint: None,
            report: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "dim" => m.dim = parse_value(key, value)?,
            "kernel_size" | "k" => m.kernel_size = parse_value(key, value)?,
            "head_kernel" | "k2" => m.head_kernel = parse_value(key, value)?,
            "alpha" => m.alpha = parse_value(key, value)?,
            "lambda" => m.lambda = parse_value(key, value)?,
            "num_blocks" => m.num_blocks = parse_value(key, value)?,
            "max_len" => m.max_len = parse_value(key, value)?,
            "variant" => m.variant = value.parse::<Variant>()?,
            "dropout" => m.dropout = parse_value(key, value)?,
            "block_ffn" => m.block_ffn = parse_value(key, value)?,
            "learning_rate" | "lr" => self.adam.learning_rate = parse_value(key, value)?,
            "beta1" => self.adam.beta1 = parse_value(key, value)?,
            "beta2" => self.adam.beta2 = parse_value(key, value)?,
            "epsilon" => self.adam.epsilon = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "report" => self.report = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let a = &self.adam;
        if !(a.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                a.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Config(
                "Adam constants need 0 ≤ β < 1 and ε > 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "clip_norm {} must be nonnegative",
                self.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// First and second moments for every parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Parameters without a gradient buffer see a zero gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "Adam state for {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, name, t) in store.iter() {
        if state.m[id.index()].len() != t.numel() {
            return Err(Error::dim(
                "adam_step",
                &[state.m[id.index()].len()],
                t.shape(),
            ));
        }
        if t.grad().is_some_and(|g| g.iter().any(|x| x.is_nan())) {
            return Err(Error::Training(format!(
                "NaN gradient in parameter `{name}`"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let tensor = store.get_mut(id);
        let grad = tensor.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// Objective value and its two components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub loss: f64,
    pub accuracy: f64,
    pub calibration: f64,
}

impl LossValues {
    fn add_scaled(&mut self, other: LossValues, w: f64) {
        self.loss += w * other.loss;
        self.accuracy += w * other.accuracy;
        self.calibration += w * other.calibration;
    }
}

struct ShardResult {
    values: LossValues,
    grads: Vec<Option<Vec<f64>>>,
}

fn shard_pass(
    model: &C3Model,
    bundle: &DatasetBundle,
    windows: &[TrainingWindow],
    weight: f64,
    dropout_seed: Option<u64>,
) -> Result<ShardResult> {
    let cfg = model.config();
    let (batch, prefs) = assemble_batch(bundle, windows, cfg.max_len)?;
    let mut tape = Tape::new();
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut mode = match rng.as_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let trainable = dropout_seed.is_some();
    let out = model.forward_on_tape(&mut tape, &batch, trainable, &mut mode)?;
    let hist = tape.constant(prefs);
    let attrs = tape.constant(bundle.attribute_table.matrix());
    let terms = weighted_loss_on_tape(
        &mut tape,
        out.logits,
        out.probs,
        &batch.targets,
        hist,
        attrs,
        cfg.lambda,
    )?;
    let values = LossValues {
        loss: tape.value(terms.total).item()?,
        accuracy: tape.value(terms.accuracy).item()?,
        calibration: tape.value(terms.calibration).item()?,
    };
    let grads = if trainable {
        let scaled = tape.scale(terms.total, weight);
        tape.backward(scaled)?;
        out.params
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
            .collect()
    } else {
        Vec::new()
    };
    Ok(ShardResult { values, grads })
}

/// Mean objective over `windows` with dropout off.
pub fn evaluate_loss(
    model: &C3Model,
    bundle: &DatasetBundle,
    windows: &[TrainingWindow],
) -> Result<LossValues> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to score".into()));
    }
    let shards: Vec<Result<ShardResult>> = windows
        .par_chunks(SHARD_SIZE)
        .map(|w| shard_pass(model, bundle, w, 1.0, None))
        .collect();
    let mut total = LossValues::default();
    for (shard, w) in shards.into_iter().zip(windows.chunks(SHARD_SIZE)) {
        total.add_scaled(shard?.values, w.len() as f64 / windows.len() as f64);
    }
    Ok(total)
}

/// Forward, backward and one optimizer step on a batch of windows.
fn train_batch(
    model: &mut C3Model,
    state: &mut AdamState,
    cfg: &TrainConfig,
    bundle: &DatasetBundle,
    windows: &[TrainingWindow],
    rng: &mut ChaCha8Rng,
) -> Result<LossValues> {
    let seeds: Vec<u64> = windows.chunks(SHARD_SIZE).map(|_| rng.next_u64()).collect();
    let b = windows.len() as f64;
    let frozen: &C3Model = model;
    let shards: Vec<Result<ShardResult>> = windows
        .par_chunks(SHARD_SIZE)
        .zip(seeds)
        .map(|(w, seed)| shard_pass(frozen, bundle, w, w.len() as f64 / b, Some(seed)))
        .collect();

    let mut values = LossValues::default();
    let store = model.store_mut();
    store.zero_grads();
    for (shard, w) in shards.into_iter().zip(windows.chunks(SHARD_SIZE)) {
        let shard = shard?;
        values.add_scaled(shard.values, w.len() as f64 / b);
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(&shard.grads) {
            if let Some(g) = g {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
    }
    if !values.loss.is_finite() {
        return Err(Error::Training(format!(
            "loss diverged to {} (cross-entropy {}, calibration {})",
            values.loss, values.accuracy, values.calibration
        )));
    }
    model.clear_padding_row();
    clip_grad_norm(model.store_mut(), cfg.clip_norm);
    adam_step(model.store_mut(), state, &cfg.adam)?;
    model.clear_padding_row();
    Ok(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    #[serde(flatten)]
    pub values: LossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub values: LossValues,
    pub validation_recall: Option<f64>,
    /// Excluded from determinism comparisons.
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub batches: Vec<BatchLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// Epoch records as JSON lines.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub struct TrainOutcome {
    pub model: C3Model,
    pub log: TrainingLog,
}

fn window_cases(bundle: &DatasetBundle, windows: &[TrainingWindow]) -> Vec<TestCase> {
    windows
        .iter()
        .map(|w| TestCase {
            user_id: bundle.sequences[w.sequence].user_id,
            history: w.history(bundle).to_vec(),
            target: w.target(bundle),
        })
        .collect()
}

/// Recall@k of `model` over the given windows.
pub fn window_recall(
    model: &C3Model,
    bundle: &DatasetBundle,
    windows: &[TrainingWindow],
    k: usize,
) -> Result<f64> {
    let cases = window_cases(bundle, windows);
    let opts = EvalOptions {
        cutoffs: vec![k],
        ..EvalOptions::default()
    };
    let lists = recommend(model, &cases, &bundle.attribute_table, &opts)?;
    let targets: Vec<u32> = cases.iter().map(|c| c.target).collect();
    recall_at_k(&lists, &targets, k)
}

pub fn train(cfg: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainOutcome> {
    train_with(cfg, bundle, |_| {})
}

/// Trains from a fresh seeded initialisation, calling `on_epoch` after every
/// epoch. With a validation split, training stops after `patience` epochs
/// without a gain in validation recall and the best parameters are kept.
pub fn train_with(
    cfg: &TrainConfig,
    bundle: &DatasetBundle,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = C3Model::new(cfg.model.clone(), bundle.num_items(), cfg.seed)?;
    model.clear_padding_row();
    let windows = build_training_windows(bundle);
    let n_val = (windows.len() as f64 * cfg.validation_fraction).ceil() as usize;
    let (train_windows, val_windows) = windows.split_at(windows.len() - n_val.min(windows.len()));
    if train_windows.is_empty() && cfg.epochs > 0 {
        return Err(Error::Data("no training windows".into()));
    }
    let k_val = VALIDATION_CUTOFF.min(bundle.num_items());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.store());
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_values = LossValues::default();
        for (batch_no, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainingWindow> = idx.iter().map(|&i| train_windows[i]).collect();
            let values = train_batch(&mut model, &mut state, cfg, bundle, &batch, &mut rng)?;
            epoch_values.add_scaled(values, batch.len() as f64 / train_windows.len() as f64);
            log.batches.push(BatchLog {
                epoch,
                batch: batch_no,
                size: batch.len(),
                values,
            });
        }
        let validation_recall = if val_windows.is_empty() {
            None
        } else {
            Some(window_recall(&model, bundle, val_windows, k_val)?)
        };
        let entry = EpochLog {
            epoch,
            values: epoch_values,
            validation_recall,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);

        if let Some(recall) = validation_recall {
            if best.as_ref().is_none_or(|(b, _)| recall > *b) {
                best = Some((recall, model.store().clone()));
                log.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        *model.store_mut() = store;
    }
    model.store_mut().zero_grads();
    Ok(TrainOutcome { model, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: Variant,
    pub param_count: usize,
    pub epochs_run: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    /// Side-by-side table, one line per variant and cutoff.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>9} {:>4} {:>8} {:>8} {:>8}  {}\n",
            "variant", "params", "K", "recall", "mrr", "ckl", "fingerprint"
        );
        for e in &self.entries {
            for r in &e.report.rows {
                out.push_str(&format!(
                    "{:<8} {:>9} {:>4} {:>8.4} {:>8.4} {:>8.4}  {}\n",
                    e.variant.name(),
                    e.param_count,
                    r.k,
                    r.recall,
                    r.mrr,
                    r.ckl,
                    r.fingerprint
                ));
            }
        }
        out
    }
}

/// Trains and evaluates each variant under the same seed and data.
pub fn run_ablation(
    cfg: &TrainConfig,
    bundle: &DatasetBundle,
    variants: &[Variant],
    opts: &EvalOptions,
) -> Result<AblationReport> {
    let cases = test_split(bundle);
    let mut entries = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut vcfg = cfg.clone();
        vcfg.model.variant = variant;
        let outcome = train(&vcfg, bundle)?;
        let report = evaluate(&outcome.model, &cases, &bundle.attribute_table, opts)?
            .with_label(variant.name());
        entries.push(AblationEntry {
            variant,
            param_count: outcome.model.param_count(),
            epochs_run: outcome.log.epochs.len(),
            report,
        });
    }
    Ok(AblationReport { entries })
}
