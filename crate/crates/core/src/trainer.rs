//! Two-stage optimisation: supervised pre-training on the annotated source,
//! then the full objective over source and unlabeled target batches.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DomainDataset, UnlabeledDataset};
use crate::diff::Graph;
use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::inference::MomentBoundary;
use crate::losses::{LossWeights, MmdConfig, Negatives};
use crate::model::{Encoded, ModelParams};
use crate::objective::{final_objective, supervised_objective, LossRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub mmd: MmdConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the source held out for early stopping.
    pub validation_fraction: f64,
    /// Linear decay of the learning rate to zero over `epochs`.
    pub lr_decay: bool,
    /// Start stage two with fresh optimiser moments.
    pub fresh_optimizer: bool,
    /// Any parameter beyond this magnitude counts as divergence.
    pub max_param_magnitude: f64,
    /// Leading epochs of each stage that rank against all negatives instead
    /// of the hardest one. Validation always uses the hardest negative.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            epochs: 100,
            batch_size: 16,
            clip_norm: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            mmd: MmdConfig::default(),
            patience: 10,
            validation_fraction: 0.1,
            lr_decay: true,
            fresh_optimizer: true,
            max_param_magnitude: 1e4,
            warmup_epochs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} is below 2; ranking losses need negatives",
                self.batch_size
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.max_param_magnitude > 0.0) {
            return Err(Error::Config("max_param_magnitude must be positive".into()));
        }
        self.weights.validate()
    }
}

// ---------------------------------------------------------------------------
// Optimiser

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            actual: if grads.len() != params.len() {
                grads.len()
            } else {
                state.m.len()
            },
        });
    }
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

/// Rescales `grads` to `max_norm` when its global L2 norm is larger.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= k;
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Logs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossRecord,
    pub grad_norm: f64,
    pub lr: f64,
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were returned; 0 for the initialisation.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Serialize)]
struct CsvRow {
    epoch: usize,
    #[serde(rename = "L_final")]
    total: f64,
    #[serde(rename = "L_SL")]
    supervised: f64,
    #[serde(rename = "L_DA")]
    domain: f64,
    #[serde(rename = "L_M1")]
    consistency: f64,
    #[serde(rename = "L_M2")]
    distribution: f64,
    #[serde(rename = "L_SA")]
    specific: f64,
    grad_norm: f64,
    lr: f64,
}

pub fn write_log_csv<W: Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in log {
        w.serialize(CsvRow {
            epoch: e.epoch,
            total: e.losses.total,
            supervised: e.losses.supervised,
            domain: e.losses.domain,
            consistency: e.losses.consistency,
            distribution: e.losses.distribution,
            specific: e.losses.specific,
            grad_norm: e.grad_norm,
            lr: e.lr,
        })?;
    }
    if log.is_empty() {
        w.write_record([
            "epoch",
            "L_final",
            "L_SL",
            "L_DA",
            "L_M1",
            "L_M2",
            "L_SA",
            "grad_norm",
            "lr",
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn save_log_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log_csv(log, std::io::BufWriter::new(file))
}

// ---------------------------------------------------------------------------
// Training loops

struct Labeled<'a> {
    video: &'a FeatureSequence,
    query: &'a [usize],
    boundary: MomentBoundary,
}

fn labeled(source: &DomainDataset) -> Result<Vec<Labeled<'_>>> {
    source
        .samples
        .iter()
        .map(|s| {
            s.boundary
                .map(|boundary| Labeled {
                    video: &s.video,
                    query: &s.query,
                    boundary,
                })
                .ok_or_else(|| Error::MissingAnnotation(s.id.clone()))
        })
        .collect()
}

/// Seeds of the independent generators used by one training run.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

const SPLIT_STREAM: u64 = 1;
const SOURCE_STREAM: u64 = 2;
const TARGET_STREAM: u64 = 3;

/// Shuffled split of `0..n` into training and validation indices.
fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let held = (n as f64 * fraction).round() as usize;
    if held < 2 || n - held < 2 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, SPLIT_STREAM)));
    let val = idx.split_off(n - held);
    (idx, val)
}

/// Consecutive chunks of `batch`, dropping a trailing chunk smaller than 2.
fn batches(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Endless reshuffled stream of target indices.
struct TargetCycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl TargetCycle {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, TARGET_STREAM));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        TargetCycle { order, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss and flat gradient of one step.
fn evaluate(
    model: &ModelParams,
    source: &[&Labeled<'_>],
    target: Option<(&UnlabeledDataset, &[usize])>,
    config: &TrainConfig,
    negatives: Negatives,
    with_grad: bool,
) -> Result<(LossRecord, Option<Vec<f64>>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let enc = source
        .iter()
        .map(|s| model.encode_pair(&mut g, &b, s.video, s.query))
        .collect::<Result<Vec<Encoded>>>()?;
    let bounds: Vec<MomentBoundary> = source.iter().map(|s| s.boundary).collect();
    let (out, record) = match target {
        None => {
            let l = supervised_objective(
                &mut g,
                &b,
                model,
                &enc,
                &bounds,
                config.weights.margin_source,
                negatives,
            )?;
            (l, LossRecord::supervised_only(g.value(l).item()))
        }
        Some((t, idx)) => {
            let tenc = idx
                .iter()
                .map(|&i| model.encode_pair(&mut g, &b, &t.samples[i].video, &t.samples[i].query))
                .collect::<Result<Vec<Encoded>>>()?;
            let c = final_objective(
                &mut g,
                &b,
                model,
                &enc,
                &bounds,
                &tenc,
                &config.weights,
                config.mmd,
                negatives,
            )?;
            (c.total, LossRecord::read(&g, &c))
        }
    };
    if !record.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {}", record.total)));
    }
    if !with_grad {
        return Ok((record, None));
    }
    let grads = g.backward(out)?;
    Ok((record, Some(model.store.flat_gradients(&b, &grads))))
}

fn check_params(flat: &[f64], bound: f64) -> Result<()> {
    if let Some(v) = flat.iter().find(|v| !v.is_finite() || v.abs() > bound) {
        return Err(Error::NonFinite(format!(
            "parameter value {v} exceeds the divergence bound {bound}"
        )));
    }
    Ok(())
}

fn run(
    init: &ModelParams,
    source: &DomainDataset,
    target: Option<&UnlabeledDataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let items = labeled(source)?;
    if let Some(t) = target {
        if t.is_empty() {
            return Err(Error::Empty("target dataset"));
        }
    }
    let (train_idx, val_idx) = split(items.len(), config.validation_fraction, config.seed);
    if train_idx.len() < 2 {
        return Err(Error::BatchTooSmall {
            needed: 2,
            actual: train_idx.len(),
        });
    }
    let val_batches = batches(&val_idx, config.batch_size);
    let mut source_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, SOURCE_STREAM));
    let mut cycle = target.map(|t| TargetCycle::new(t.len(), config.seed));

    let mut model = init.clone();
    let mut flat = model.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut log = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let lr = if config.lr_decay {
            config.learning_rate * (1.0 - epoch as f64 / config.epochs as f64)
        } else {
            config.learning_rate
        };
        let negatives = if epoch < config.warmup_epochs {
            Negatives::All
        } else {
            Negatives::Hardest
        };
        let mut order = train_idx.clone();
        order.shuffle(&mut source_rng);
        let mut records = Vec::new();
        let mut norms = Vec::new();
        for batch in batches(&order, config.batch_size) {
            let src: Vec<&Labeled<'_>> = batch.iter().map(|&i| &items[i]).collect();
            let tgt_idx = cycle.as_mut().map(|c| c.take(batch.len()));
            let tgt = target.zip(tgt_idx.as_deref());
            let (record, grads) = evaluate(&model, &src, tgt, config, negatives, true)?;
            let mut grads = grads.expect("requested");
            if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient entry {bad} at epoch {}", epoch + 1)));
            }
            norms.push(clip_gradients(&mut grads, config.clip_norm));
            adam_step(&mut flat, &grads, &mut adam, lr)?;
            check_params(&flat, config.max_param_magnitude)?;
            model.set_flat(&flat)?;
            records.push(record);
        }
        let validation = if val_batches.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for (k, batch) in val_batches.iter().enumerate() {
                let src: Vec<&Labeled<'_>> = batch.iter().map(|&i| &items[i]).collect();
                // Validation pairs every held-out batch with a fixed slice of
                // the target so the criterion is comparable across epochs.
                let fixed: Vec<usize> = target
                    .map(|t| {
                        (0..batch.len())
                            .map(|j| (k * config.batch_size + j) % t.len())
                            .collect()
                    })
                    .unwrap_or_default();
                let tgt = target.map(|t| (t, fixed.as_slice()));
                total += evaluate(&model, &src, tgt, config, Negatives::Hardest, false)?.0.total;
            }
            Some(total / val_batches.len() as f64)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            losses: LossRecord::mean(&records),
            grad_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
            lr,
            validation,
        };
        log::info!(
            "epoch {} L_final {:.6} L_SL {:.6} val {:?}",
            entry.epoch,
            entry.losses.total,
            entry.losses.supervised,
            entry.validation
        );
        log.push(entry);
        match validation {
            Some(v) if v < best.0 => {
                best = (v, epoch + 1, model.clone());
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
            None => best = (f64::INFINITY, epoch + 1, model.clone()),
        }
    }
    let (_, best_epoch, best_model) = best;
    Ok(TrainOutcome {
        model: best_model,
        log,
        best_epoch,
        stopped_early,
    })
}

/// Stage one from a fresh initialisation.
pub fn pretrain(
    source: &DomainDataset,
    model: crate::model::ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let init = ModelParams::new(model)?;
    pretrain_from(&init, source, config)
}

/// Stage one from given parameters.
pub fn pretrain_from(init: &ModelParams, source: &DomainDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    run(init, source, None, config)
}

/// Stage two. The target arrives without boundaries, so they cannot
/// influence training.
pub fn main_train(
    source: &DomainDataset,
    target: &UnlabeledDataset,
    init: &ModelParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run(init, source, Some(target), config)
}
