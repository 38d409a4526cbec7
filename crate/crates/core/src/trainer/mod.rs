//! Desk-scale training: a synthetic dataset, the dual-head cross-entropy
//! loss and SGD with momentum.

mod data;

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::SyntheticDataset;

use crate::blocks::{HeadOutput, ParamKind, Params};
use crate::error::{LevitError, Result};
use crate::model::{Block, Model};
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};
use crate::Mode;

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Applied to conv and linear weights only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Replaces the spec's drop-path probability when set.
    pub drop_path: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 1e-4, batch_size: 32, steps: 500, seed: 0, drop_path: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LevitError::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LevitError::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(LevitError::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(LevitError::config("batch_size", "must be positive"));
        }
        if self.steps == 0 {
            return Err(LevitError::config("steps", "must be positive"));
        }
        if let Some(p) = self.drop_path {
            if !(0.0..1.0).contains(&p) {
                return Err(LevitError::InvalidProbability(p));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over both heads (or the single head when there is one).
pub fn loss<'t, E: Element>(logits: &HeadOutput<'t, E>, labels: &[usize]) -> Result<Var<'t, E>> {
    match *logits {
        HeadOutput::Single(v) => v.cross_entropy(labels),
        HeadOutput::Pair { classification, distillation } => {
            if classification.shape() != distillation.shape() {
                return Err(LevitError::shape(
                    "loss",
                    format!("{:?}", classification.shape()),
                    format!("{:?}", distillation.shape()),
                ));
            }
            let a = classification.cross_entropy(labels)?;
            let b = distillation.cross_entropy(labels)?;
            Ok(a.add(b)?.scale(E::from_f64(0.5)))
        }
    }
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == label
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// The loss became non-finite at this step; training stopped there.
    Diverged {
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub status: RunStatus,
    /// Training-mode loss and batch accuracy before each update.
    pub curve: Vec<CurvePoint>,
    /// Eval-mode accuracy over the whole dataset after training.
    pub final_accuracy: f64,
    /// Eval-mode mean loss over the whole dataset after training.
    pub final_loss: f64,
}

impl TrainReport {
    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn initial_loss(&self) -> f64 {
        self.curve.first().map_or(f64::NAN, |p| p.loss)
    }

    /// Mean training loss over the last `window` steps.
    pub fn tail_loss(&self, window: usize) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(window)..];
        tail.iter().map(|p| p.loss).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_curve(&self.curve, out)
    }
}

pub fn write_curve<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve<R: Read>(input: R) -> Result<Vec<CurvePoint>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(LevitError::from)).collect()
}

/// Maps tape gradients back to parameter names.
pub fn named_gradients<E: Element>(
    bindings: &[(String, Var<'_, E>)],
    grads: &Gradients<E>,
) -> HashMap<String, Tensor<E>> {
    let mut out: HashMap<String, Tensor<E>> = HashMap::new();
    for (name, var) in bindings {
        let g = grads.wrt(*var);
        match out.get_mut(name) {
            Some(acc) => *acc = acc.add(&g).expect("same parameter, same shape"),
            None => {
                out.insert(name.clone(), g);
            }
        }
    }
    out
}

/// Batch loss, combined logits and gradients keyed by parameter name.
pub type LossAndGradients<E> = (f64, Tensor<E>, HashMap<String, Tensor<E>>);

/// Loss and per-parameter gradients for one batch in the model's current mode.
pub fn loss_and_gradients<E: Element>(
    model: &mut Model<E>,
    images: &Tensor<E>,
    labels: &[usize],
    seed: u64,
) -> Result<LossAndGradients<E>> {
    let tape = Tape::new();
    let out = model.forward(&tape, images, seed)?;
    let l = loss(&out.logits, labels)?;
    let combined = out.logits.combined()?.value();
    let grads = tape.backward(l)?;
    Ok((l.value().item()?.as_f64(), combined, named_gradients(&out.bindings, &grads)))
}

/// SGD with momentum and L2 weight decay folded into the gradient.
pub struct Sgd<E: Element> {
    lr: E,
    momentum: E,
    weight_decay: E,
    velocity: HashMap<String, Tensor<E>>,
}

impl<E: Element> Sgd<E> {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: E::from_f64(config.lr),
            momentum: E::from_f64(config.momentum),
            weight_decay: E::from_f64(config.weight_decay),
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model<E>, grads: &HashMap<String, Tensor<E>>) {
        model.visit_mut(&mut |name, param, kind| {
            if kind != ParamKind::Learnable {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            // decay only matrices and kernels, never norms, biases or bias tables
            let decay = if param.ndim() >= 2 && !name.ends_with("bias_table") { self.weight_decay } else { E::zero() };
            let v = self.velocity.entry(name.to_owned()).or_insert_with(|| Tensor::zeros(param.shape()));
            let (m, lr) = (self.momentum, self.lr);
            let pd = param.data_mut();
            for ((v, &g), p) in v.data_mut().iter_mut().zip(g.data()).zip(pd.iter_mut()) {
                *v = m * *v + g + decay * *p;
                *p = *p - lr * *v;
            }
        });
    }
}

/// Eval-mode loss and accuracy over the whole dataset.
pub fn evaluate<E: Element>(model: &Model<E>, data: &SyntheticDataset, batch: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut hits = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, y) = data.batch::<E>(chunk);
        let logits = model.predict(&x)?;
        let (l, _) = crate::tensor::ops::cross_entropy(&logits, &y)?;
        loss_sum += l.as_f64() * chunk.len() as f64;
        hits += accuracy(&logits, &y) * chunk.len() as f64;
    }
    Ok((loss_sum / data.len() as f64, hits / data.len() as f64))
}

/// Trains in train mode and finishes with an eval-mode pass over the dataset.
pub fn train<E: Element>(model: &mut Model<E>, data: &SyntheticDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if model.spec().num_classes != data.num_classes {
        return Err(LevitError::config(
            "num_classes",
            format!("model predicts {} classes, dataset has {}", model.spec().num_classes, data.num_classes),
        ));
    }
    if let Some(p) = config.drop_path {
        model.set_drop_path(p)?;
    }
    model.set_mode(Mode::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut sgd = Sgd::new(config);
    let mut curve = Vec::with_capacity(config.steps);
    let mut status = RunStatus::Completed;
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (x, y) = data.batch::<E>(&batch);
        let step_seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64);
        let (l, logits, grads) = loss_and_gradients(model, &x, &y, step_seed)?;
        if !l.is_finite() {
            status = RunStatus::Diverged { step };
            curve.push(CurvePoint { step, loss: l, accuracy: accuracy(&logits, &y) });
            break;
        }
        curve.push(CurvePoint { step, loss: l, accuracy: accuracy(&logits, &y) });
        sgd.step(model, &grads);
    }
    model.set_mode(Mode::Eval)?;
    let (final_loss, final_accuracy) = match status {
        RunStatus::Completed => evaluate(model, data, config.batch_size)?,
        RunStatus::Diverged { .. } => (f64::NAN, 0.0),
    };
    Ok(TrainReport { status, curve, final_accuracy, final_loss })
}

/// Names of learnable parameters whose gradient is identically zero for an
/// eval-mode loss on the given batch.
///
/// Two groups are skipped because their gradient is exactly zero for any
/// loss. Key-projection shifts move each query's logits by the same amount,
/// which softmax ignores. In a block whose key grid is a single pixel the
/// softmax is identically 1, so queries, keys and the bias table have no
/// effect at all.
pub fn disconnected_parameters<E: Element>(
    model: &mut Model<E>,
    images: &Tensor<E>,
    labels: &[usize],
) -> Result<Vec<String>> {
    let previous = model.mode();
    model.set_mode(Mode::Eval)?;
    let result = loss_and_gradients(model, images, labels, 0);
    model.set_mode(previous)?;
    let (_, _, grads) = result?;
    let single_key: Vec<String> = model
        .blocks()
        .filter_map(|b| match b {
            Block::Attention(a) if a.grid.0 * a.grid.1 == 1 => Some(a.name.clone()),
            _ => None,
        })
        .collect();
    let logits_only = |name: &str| {
        single_key.iter().any(|block| {
            name.strip_prefix(block.as_str())
                .is_some_and(|rest| rest.starts_with(".q.") || rest.starts_with(".k.") || rest == ".bias_table")
        })
    };
    let mut dead = Vec::new();
    model.visit(&mut |name, _, kind| {
        if kind != ParamKind::Learnable || is_softmax_invariant(name) || logits_only(name) {
            return;
        }
        match grads.get(name) {
            Some(g) if g.sum_of_squares() > 0.0 => {}
            _ => dead.push(name.to_owned()),
        }
    });
    Ok(dead)
}

/// Parameters that only shift attention logits uniformly along the key axis.
pub fn is_softmax_invariant(name: &str) -> bool {
    name.ends_with(".k.bn.beta") || name.ends_with(".k.bias")
}
