use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Method, Model};
use super::stream::{Sample, SyntheticTask};
use crate::adapters::AdapterLayer;
use crate::error::{Error, Result};
use crate::routing::{select_freeze_set, FreezeLedger, FreezeMetric, FreezeRecord, UsageStats};
use crate::selector::{alignment_loss, select_task, total_loss};
use crate::tensor::{Matrix, OptimizerKind, OptimizerState, ParamId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub freeze_metric: FreezeMetric,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            freeze_metric: FreezeMetric::GateMass,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainReport {
    pub task: usize,
    /// Mean training loss per epoch (task loss plus weighted alignment loss).
    pub epoch_losses: Vec<f64>,
    /// Router usage per layer over the task's training set after training.
    pub usage: Vec<UsageStats>,
    /// Branches frozen per layer after this task.
    pub frozen: Vec<Vec<usize>>,
    pub batches: usize,
    #[serde(skip)]
    pub mean_batch_ms: f64,
}

pub(crate) fn stack(samples: &[&Sample]) -> (Matrix, Vec<usize>) {
    let dim = samples[0].x.len();
    let mut data = Vec::with_capacity(samples.len() * dim);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        data.extend_from_slice(&s.x);
        labels.push(s.label);
    }
    (
        Matrix::from_vec(samples.len(), dim, data).expect("shape"),
        labels,
    )
}

fn frozen_snapshot(model: &Model) -> Vec<(ParamId, Vec<u64>)> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(id, p)| (id, p.value.bits()))
        .collect()
}

/// One optimization step on a batch; returns the loss value.
pub(crate) fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    x: Matrix,
    labels: &[usize],
    task: Option<usize>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let half = model.dim / 2;
    let (img, txt) = (x.slice_cols(0, half), x.slice_cols(half, model.dim));
    let xv = tape.input(x);
    let (logits, _) = model.forward(&mut tape, xv, task)?;
    let task_loss = tape.cross_entropy(logits, labels)?;
    let loss = match (model.is_branch(), task) {
        (true, Some(t)) => {
            let keys = model.keys[t];
            let iv = tape.input(img);
            let tv = tape.input(txt);
            let ki = tape.param(&model.store, keys.img);
            let kt = tape.param(&model.store, keys.txt);
            let align = alignment_loss(&mut tape, iv, tv, ki, kt)?;
            total_loss(&mut tape, task_loss, align, model.hp.lambda)?
        }
        _ => task_loss,
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {value}")));
    }
    tape.backward(loss, &mut model.store)?;
    let updated = opt.step(&mut model.store)?;
    Ok((value, updated))
}

fn run_epochs(
    model: &mut Model,
    samples: &[&Sample],
    spec: &TrainSpec,
    task: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize, f64)> {
    let mut opt = OptimizerState::new(spec.optimizer, spec.lr)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    let mut batches = 0usize;
    let mut elapsed = 0.0;
    for _ in 0..spec.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(spec.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let (x, labels) = stack(&batch);
            let start = Instant::now();
            let (loss, _) = train_step(model, &mut opt, x, &labels, task)?;
            elapsed += start.elapsed().as_secs_f64() * 1e3;
            total += loss * chunk.len() as f64;
            n += chunk.len();
            batches += 1;
        }
        epoch_losses.push(total / n as f64);
    }
    Ok((epoch_losses, batches, elapsed / batches.max(1) as f64))
}

fn shuffle_rng(model: &Model, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(model.seed ^ 0x7368_7566 ^ ((task as u64) << 40))
}

/// Router usage per layer over `samples` with the task's routers.
fn usage_stats(model: &Model, samples: &[&Sample], task: Option<usize>) -> Result<Vec<UsageStats>> {
    let (x, _) = stack(samples);
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let (_, gates) = model.forward(&mut tape, xv, task)?;
    gates
        .iter()
        .map(|&g| {
            let gm = tape.value(g);
            let mut s = UsageStats::new(gm.cols());
            s.record_gate(gm)?;
            Ok(s)
        })
        .collect()
}

/// Trains `model` on one task of the stream. BranchLoRA registers a new router
/// and key pair, optimizes task loss plus weighted alignment loss, then freezes
/// the most used branches and closes the task. Every parameter that was frozen
/// before the task is checked to be bit-identical afterwards.
pub fn train_task(
    model: &mut Model,
    task: &SyntheticTask,
    spec: &TrainSpec,
    ledger: &mut FreezeLedger,
) -> Result<TaskTrainReport> {
    spec.validate()?;
    if model.method == Method::ZeroShot {
        return Ok(TaskTrainReport {
            task: task.id,
            epoch_losses: Vec::new(),
            usage: Vec::new(),
            frozen: Vec::new(),
            batches: 0,
            mean_batch_ms: 0.0,
        });
    }
    let route = if model.is_branch() {
        let t = model.begin_task()?;
        if t != task.id {
            return Err(Error::Contract(format!(
                "task {} trained as the {t}-th task",
                task.id
            )));
        }
        Some(t)
    } else {
        None
    };
    let before = frozen_snapshot(model);
    let samples: Vec<&Sample> = task.train.iter().collect();
    let mut rng = shuffle_rng(model, task.id);
    let (epoch_losses, batches, mean_batch_ms) =
        run_epochs(model, &samples, spec, route, &mut rng)?;

    let usage = usage_stats(model, &samples, route)?;
    let mut frozen = Vec::new();
    if model.is_branch() {
        let width = model.hp.freeze_width();
        for (l, (layer, stats)) in model.layers.iter_mut().zip(&usage).enumerate() {
            let AdapterLayer::BranchLora(b) = layer else {
                continue;
            };
            let picked = select_freeze_set(stats, width, b.freeze_mask(), spec.freeze_metric)?;
            b.apply_freeze(&mut model.store, &picked)?;
            ledger.append(FreezeRecord {
                task: task.id,
                layer: l,
                frozen: picked.clone(),
                normalized_mass: stats.normalized_mass(),
                selection_counts: stats.counts.clone(),
            })?;
            frozen.push(picked);
        }
        model.end_task();
    }

    for (id, bits) in &before {
        if model.store.get(*id).bits() != *bits {
            return Err(Error::Contract(format!(
                "frozen parameter `{}` changed while training task {}",
                model.store.param(*id).name,
                task.id
            )));
        }
    }

    Ok(TaskTrainReport {
        task: task.id,
        epoch_losses,
        usage,
        frozen,
        batches,
        mean_batch_ms,
    })
}

/// Joint training on the union of all tasks' training sets.
pub fn train_multitask(
    model: &mut Model,
    tasks: &[SyntheticTask],
    spec: &TrainSpec,
) -> Result<TaskTrainReport> {
    spec.validate()?;
    let samples: Vec<&Sample> = tasks.iter().flat_map(|t| t.train.iter()).collect();
    if samples.is_empty() {
        return Err(Error::Contract(
            "multi-task training on an empty stream".into(),
        ));
    }
    let mut rng = shuffle_rng(model, usize::MAX >> 40);
    let (epoch_losses, batches, mean_batch_ms) = run_epochs(model, &samples, spec, None, &mut rng)?;
    Ok(TaskTrainReport {
        task: tasks.len() - 1,
        epoch_losses,
        usage: Vec::new(),
        frozen: Vec::new(),
        batches,
        mean_batch_ms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Use the true task id (diagnostic upper bound).
    Oracle,
    /// Pick the router by key similarity, per sample.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// Fraction of samples routed to their own task (BranchLoRA, auto only).
    pub selector_accuracy: Option<f64>,
}

pub fn evaluate(model: &Model, task: &SyntheticTask, selection: Selection) -> Result<f64> {
    Ok(evaluate_detailed(model, task, selection)?.accuracy)
}

pub fn evaluate_detailed(
    model: &Model,
    task: &SyntheticTask,
    selection: Selection,
) -> Result<EvalOutcome> {
    let samples: Vec<&Sample> = task.test.iter().collect();
    if samples.is_empty() {
        return Err(Error::Contract("empty test split".into()));
    }
    let n = samples.len() as f64;
    if !model.is_branch() {
        let (x, labels) = stack(&samples);
        let pred = model.predict(&x, None)?;
        let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        return Ok(EvalOutcome {
            accuracy: hits as f64 / n,
            selector_accuracy: None,
        });
    }
    let trained = model.n_tasks_registered();
    if trained == 0 {
        return Err(Error::Routing(
            "BranchLoRA model has no trained task".into(),
        ));
    }
    let routes: Vec<usize> = match selection {
        Selection::Oracle => {
            if task.id >= trained {
                return Err(Error::Routing(format!("task {} not trained yet", task.id)));
            }
            vec![task.id; samples.len()]
        }
        Selection::Auto => {
            let keys = model.key_values();
            samples
                .iter()
                .map(|s| select_task(&s.embeddings()?, &keys))
                .collect::<Result<_>>()?
        }
    };
    let mut hits = 0usize;
    for t in 0..trained {
        let group: Vec<&Sample> = samples
            .iter()
            .zip(&routes)
            .filter(|(_, &r)| r == t)
            .map(|(s, _)| *s)
            .collect();
        if group.is_empty() {
            continue;
        }
        let (x, labels) = stack(&group);
        let pred = model.predict(&x, Some(t))?;
        hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let selector_accuracy = match selection {
        Selection::Auto => Some(routes.iter().filter(|&&r| r == task.id).count() as f64 / n),
        Selection::Oracle => None,
    };
    Ok(EvalOutcome {
        accuracy: hits as f64 / n,
        selector_accuracy,
    })
}
