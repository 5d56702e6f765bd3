//! Expert-similarity statistics over MoELoRA snapshots and trainable-parameter /
//! per-batch timing accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterLayer;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::{generate_stream, Method, Model, Sample};
use crate::tensor::{Matrix, OptimizerState};

/// Flattened `A` and `B` of one expert in one layer after one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSnapshot {
    pub task: usize,
    pub layer: usize,
    pub expert: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSimilarity {
    pub mean_sim_a: Option<f64>,
    pub mean_sim_b: Option<f64>,
    /// `mean_sim_a - mean_sim_b`; absent while every `B` is still zero.
    pub margin: Option<f64>,
    pub pairs_a: usize,
    pub pairs_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    #[serde(flatten)]
    pub stats: GroupSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub per_layer: Vec<LayerSimilarity>,
    pub pooled: GroupSimilarity,
}

/// Expert matrices from a sequence of MoELoRA snapshots, `snapshots[t]` taken after task `t`.
pub fn expert_snapshots(snapshots: &[Model]) -> Result<Vec<ExpertSnapshot>> {
    let mut out = Vec::new();
    for (task, model) in snapshots.iter().enumerate() {
        for (layer, l) in model.layers.iter().enumerate() {
            let AdapterLayer::MoeLora(m) = l else {
                return Err(Error::Analysis(format!(
                    "layer {layer} of the task-{task} snapshot is not a MoELoRA layer"
                )));
            };
            for (expert, &(a, b)) in m.experts.iter().enumerate() {
                out.push(ExpertSnapshot {
                    task,
                    layer,
                    expert,
                    a: model.store.get(a).data().to_vec(),
                    b: model.store.get(b).data().to_vec(),
                });
            }
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean cosine over unordered pairs of non-zero vectors, with the pair count.
pub fn mean_pairwise_cosine(vectors: &[&[f64]]) -> Option<(f64, usize)> {
    let live: Vec<(&[f64], f64)> = vectors
        .iter()
        .map(|v| (*v, norm(v)))
        .filter(|(_, n)| *n > 0.0)
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..live.len() {
        for j in i + 1..live.len() {
            let dot: f64 = live[i].0.iter().zip(live[j].0).map(|(a, b)| a * b).sum();
            total += (dot / (live[i].1 * live[j].1)).clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    (pairs > 0).then(|| (total / pairs as f64, pairs))
}

fn group(snaps: &[&ExpertSnapshot]) -> GroupSimilarity {
    let a: Vec<&[f64]> = snaps.iter().map(|s| s.a.as_slice()).collect();
    let b: Vec<&[f64]> = snaps.iter().map(|s| s.b.as_slice()).collect();
    let sa = mean_pairwise_cosine(&a);
    let sb = mean_pairwise_cosine(&b);
    GroupSimilarity {
        mean_sim_a: sa.map(|x| x.0),
        mean_sim_b: sb.map(|x| x.0),
        margin: sa.zip(sb).map(|(a, b)| a.0 - b.0),
        pairs_a: sa.map_or(0, |x| x.1),
        pairs_b: sb.map_or(0, |x| x.1),
    }
}

/// Pairwise cosine statistics among all `A`s and among all `B`s across
/// experts and task snapshots, per layer and pooled over layers.
pub fn expert_similarity(snaps: &[ExpertSnapshot]) -> Result<SimilarityReport> {
    let mut experts: Vec<usize> = snaps.iter().map(|s| s.expert).collect();
    experts.sort_unstable();
    experts.dedup();
    if experts.len() < 2 {
        return Err(Error::Analysis(
            "need at least two experts to compare".into(),
        ));
    }
    let mut layers: Vec<usize> = snaps.iter().map(|s| s.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let per_layer = layers
        .iter()
        .map(|&l| {
            let in_layer: Vec<&ExpertSnapshot> = snaps.iter().filter(|s| s.layer == l).collect();
            LayerSimilarity {
                layer: l,
                stats: group(&in_layer),
            }
        })
        .collect();
    let all: Vec<&ExpertSnapshot> = snaps.iter().collect();
    Ok(SimilarityReport {
        per_layer,
        pooled: group(&all),
    })
}

/// Flattened vectors as CSV rows: `layer,task,expert,matrix,v0,v1,...`.
pub fn vectors_csv(snaps: &[ExpertSnapshot], seed: u64) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["seed", "layer", "task", "expert", "matrix", "values..."])
        .map_err(io)?;
    for s in snaps {
        for (name, v) in [("A", &s.a), ("B", &s.b)] {
            let mut rec = vec![
                seed.to_string(),
                s.layer.to_string(),
                s.task.to_string(),
                s.expert.to_string(),
                name.to_string(),
            ];
            rec.extend(v.iter().map(|x| format!("{x}")));
            w.write_record(&rec).map_err(io)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
        .map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub method: Method,
    /// Adapter scalars receiving gradient on the first task.
    pub trainable_params: usize,
    /// Task-key scalars (BranchLoRA only).
    pub key_params: usize,
    /// Scalars the optimizer actually updated in one step.
    pub optimizer_scalars: usize,
    pub batches: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
}

impl EfficiencyReport {
    pub fn row(&self, m: Method) -> Option<&EfficiencyRow> {
        self.rows.iter().find(|r| r.method == m)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record([
            "method",
            "trainable_params",
            "key_params",
            "optimizer_scalars",
            "batches",
            "mean_ms",
            "std_ms",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.method.to_string(),
                r.trainable_params.to_string(),
                r.key_params.to_string(),
                r.optimizer_scalars.to_string(),
                r.batches.to_string(),
                format!("{:.6}", r.mean_ms),
                format!("{:.6}", r.std_ms),
            ])
            .map_err(io)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
            .map_err(|e| Error::Io(e.to_string()))
    }
}

/// Times forward+backward+update over `batches` batches of the first task for
/// every trainable method. Methods are interleaved batch by batch so machine
/// noise hits them evenly.
pub fn efficiency_report(
    cfg: &ExperimentConfig,
    methods: &[Method],
    seed: u64,
    batches: usize,
) -> Result<EfficiencyReport> {
    const WARMUP: usize = 5;
    let stream = generate_stream(&cfg.stream, seed)?;
    let task = &stream.tasks[0];
    let hp = cfg.adapter.hyperparams();
    let bs = cfg.training.batch_size.min(task.train.len());
    let batch_data: Vec<(Matrix, Vec<usize>)> = task
        .train
        .chunks(bs)
        .filter(|c| c.len() == bs)
        .map(|c| {
            let refs: Vec<&Sample> = c.iter().collect();
            crate::harness::stack_samples(&refs)
        })
        .collect();
    let methods: Vec<Method> = methods
        .iter()
        .copied()
        .filter(|m| *m != Method::ZeroShot)
        .collect();
    let mut models = Vec::new();
    let mut opts = Vec::new();
    for &m in &methods {
        let mut model = Model::new(
            m,
            stream.spec.dim,
            stream.spec.classes,
            &hp,
            cfg.adapter.layers,
            seed,
        )?;
        model.begin_task()?;
        models.push(model);
        opts.push(OptimizerState::new(
            cfg.training.optimizer,
            cfg.training.lr,
        )?);
    }
    let route = |m: &Model| m.is_branch().then_some(0);
    let mut times = vec![Vec::with_capacity(batches); methods.len()];
    let mut observed = vec![0usize; methods.len()];
    for b in 0..WARMUP + batches {
        let (x, labels) = &batch_data[b % batch_data.len()];
        for (i, model) in models.iter_mut().enumerate() {
            let r = route(model);
            let start = Instant::now();
            let (_, updated) =
                crate::harness::train_step_public(model, &mut opts[i], x.clone(), labels, r)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if b == 0 {
                observed[i] = updated;
            }
            if b >= WARMUP {
                times[i].push(ms);
            }
        }
    }
    let rows = methods
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let fresh = {
                let mut f = Model::new(
                    m,
                    stream.spec.dim,
                    stream.spec.classes,
                    &hp,
                    cfg.adapter.layers,
                    seed,
                )?;
                f.begin_task()?;
                f
            };
            let t = &times[i];
            let mean = t.iter().sum::<f64>() / t.len().max(1) as f64;
            let var = t.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (t.len().max(2) - 1) as f64;
            Ok(EfficiencyRow {
                method: m,
                trainable_params: fresh.adapter_trainable(),
                key_params: fresh.key_trainable(),
                optimizer_scalars: observed[i],
                batches: t.len(),
                mean_ms: mean,
                std_ms: var.sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EfficiencyReport { rows })
}
