use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, EvalMatrix, Metrics};
use super::model::{Method, Model};
use super::stream::{generate_stream, TaskStream};
use super::train::{evaluate_detailed, train_multitask, train_task, Selection, TaskTrainReport};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::parallel::{self, Parallelism};
use crate::routing::FreezeLedger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub stream_fingerprint: String,
    /// Accuracy table; BranchLoRA entries use automatic task selection.
    pub eval: EvalMatrix,
    pub metrics: Metrics,
    /// BranchLoRA with the true task id driving the routers.
    #[serde(default)]
    pub oracle_eval: Option<EvalMatrix>,
    #[serde(default)]
    pub oracle_metrics: Option<Metrics>,
    /// `A[i][i]` per task.
    pub just_trained: Vec<f64>,
    /// `A[T][i]` per task.
    pub final_row: Vec<f64>,
    /// Adapter scalars receiving gradient, per task.
    pub trainable_params: Vec<usize>,
    /// Selector accuracy per task after the last task (BranchLoRA).
    #[serde(default)]
    pub selector_accuracy: Option<Vec<f64>>,
    #[serde(default)]
    pub freeze_ledger: Option<FreezeLedger>,
    /// First and last epoch training loss per training phase.
    pub train_loss: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub stream_fingerprint: String,
    pub methods: Vec<MethodReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub acc_median: f64,
    pub maa_median: f64,
    pub bwt_median: f64,
    pub acc_mean: f64,
    pub maa_mean: f64,
    pub bwt_mean: f64,
}

/// Everything that is a pure function of config and seeds. Wall-clock timings
/// are kept out of it so two identical runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    pub summary: Vec<MethodSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub trainable_params: usize,
    pub mean_ms: f64,
}

/// Mean per-batch training time observed during the sequential runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

/// A single (seed, method) run with its per-task model snapshots.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub seed: u64,
    pub report: MethodReport,
    /// Model after each training phase (one per task; multi-task has one).
    pub snapshots: Vec<Model>,
    pub train_reports: Vec<TaskTrainReport>,
}

impl MethodRun {
    pub fn mean_batch_ms(&self) -> f64 {
        let (sum, n) = self
            .train_reports
            .iter()
            .filter(|r| r.batches > 0)
            .fold((0.0, 0usize), |(s, n), r| {
                (s + r.mean_batch_ms * r.batches as f64, n + r.batches)
            });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub runs: Vec<MethodRun>,
}

impl ExperimentOutput {
    pub fn timings(&self) -> TimingReport {
        let mut rows = Vec::new();
        for m in &self.report.config.methods {
            let runs: Vec<&MethodRun> =
                self.runs.iter().filter(|r| r.report.method == *m).collect();
            let mean_ms =
                runs.iter().map(|r| r.mean_batch_ms()).sum::<f64>() / runs.len().max(1) as f64;
            rows.push(TimingRow {
                method: *m,
                trainable_params: runs.first().map_or(0, |r| r.report.trainable_params[0]),
                mean_ms,
            });
        }
        TimingReport { rows }
    }
}

fn fill_eval(
    model: &Model,
    stream: &TaskStream,
    upto: usize,
    row: usize,
    selection: Selection,
    eval: &mut EvalMatrix,
) -> Result<Vec<Option<f64>>> {
    let mut sel = Vec::new();
    for k in 0..=upto {
        let out = evaluate_detailed(model, &stream.tasks[k], selection)?;
        eval.set(row, k, out.accuracy)?;
        sel.push(out.selector_accuracy);
    }
    Ok(sel)
}

/// Trains and evaluates one method on `stream`.
pub fn run_method(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    method: Method,
    seed: u64,
) -> Result<MethodRun> {
    let hp = cfg.adapter.hyperparams();
    let t = stream.tasks.len();
    let mut model = Model::new(
        method,
        stream.spec.dim,
        stream.spec.classes,
        &hp,
        cfg.adapter.layers,
        seed,
    )?;
    let mut eval = EvalMatrix::new(t);
    let mut oracle = (method == Method::BranchLora).then(|| EvalMatrix::new(t));
    let mut ledger = FreezeLedger::new();
    let mut snapshots = Vec::new();
    let mut train_reports = Vec::new();
    let mut trainable = Vec::new();
    let mut selector = None;

    match method {
        Method::ZeroShot => {
            trainable = vec![0; t];
            for i in 0..t {
                fill_eval(&model, stream, i, i, Selection::Oracle, &mut eval)?;
            }
            snapshots.push(model.clone());
        }
        Method::MultiTask => {
            trainable = vec![model.adapter_trainable(); t];
            train_reports.push(train_multitask(&mut model, &stream.tasks, &cfg.training)?);
            let mut last = EvalMatrix::new(t);
            fill_eval(&model, stream, t - 1, t - 1, Selection::Oracle, &mut last)?;
            for i in 0..t {
                for k in 0..=i {
                    eval.set(i, k, last.get(t - 1, k).expect("filled"))?;
                }
            }
            snapshots.push(model.clone());
        }
        Method::Lora | Method::MoeLora | Method::BranchLora => {
            for i in 0..t {
                if model.is_branch() {
                    // count with the new task's router registered
                    let mut probe = model.clone();
                    probe.begin_task()?;
                    trainable.push(probe.adapter_trainable());
                } else {
                    trainable.push(model.adapter_trainable());
                }
                train_reports.push(train_task(
                    &mut model,
                    &stream.tasks[i],
                    &cfg.training,
                    &mut ledger,
                )?);
                let sel = fill_eval(&model, stream, i, i, Selection::Auto, &mut eval)?;
                if let Some(o) = oracle.as_mut() {
                    fill_eval(&model, stream, i, i, Selection::Oracle, o)?;
                }
                if i == t - 1 && model.is_branch() {
                    selector = Some(sel.into_iter().map(|s| s.unwrap_or(0.0)).collect());
                }
                snapshots.push(model.clone());
            }
        }
    }

    let metrics = compute_metrics(&eval)?;
    let oracle_metrics = oracle.as_ref().map(compute_metrics).transpose()?;
    let rows = eval.dense_rows()?;
    Ok(MethodRun {
        seed,
        report: MethodReport {
            method,
            stream_fingerprint: stream.fingerprint(),
            just_trained: (0..t).map(|i| rows[i][i]).collect(),
            final_row: rows[t - 1].clone(),
            eval,
            metrics,
            oracle_eval: oracle,
            oracle_metrics,
            trainable_params: trainable,
            selector_accuracy: selector,
            freeze_ledger: (method == Method::BranchLora).then_some(ledger),
            train_loss: train_reports
                .iter()
                .map(|r| {
                    [
                        r.epoch_losses.first().copied().unwrap_or(f64::NAN),
                        r.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    ]
                })
                .collect(),
        },
        snapshots,
        train_reports,
    })
}

/// Runs every configured method on one seed's stream.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    par: Parallelism,
) -> Result<(SeedReport, Vec<MethodRun>)> {
    let stream = generate_stream(&cfg.stream, seed)?;
    let runs = parallel::map(&cfg.methods, par, |&m| run_method(cfg, &stream, m, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let fp = stream.fingerprint();
    if runs.iter().any(|r| r.report.stream_fingerprint != fp) {
        return Err(Error::Contract("methods saw different streams".into()));
    }
    Ok((
        SeedReport {
            seed,
            stream_fingerprint: fp,
            methods: runs.iter().map(|r| r.report.clone()).collect(),
        },
        runs,
    ))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn summarize(cfg: &ExperimentConfig, seeds: &[SeedReport]) -> Vec<MethodSummary> {
    cfg.methods
        .iter()
        .map(|&m| {
            let ms: Vec<Metrics> = seeds
                .iter()
                .flat_map(|s| {
                    s.methods
                        .iter()
                        .filter(|r| r.method == m)
                        .map(|r| r.metrics)
                })
                .collect();
            let pick = |f: fn(&Metrics) -> f64| ms.iter().map(f).collect::<Vec<f64>>();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (acc, maa, bwt) = (pick(|m| m.acc), pick(|m| m.maa), pick(|m| m.bwt));
            MethodSummary {
                method: m,
                acc_mean: mean(&acc),
                maa_mean: mean(&maa),
                bwt_mean: mean(&bwt),
                acc_median: median(&mut acc.clone()),
                maa_median: median(&mut maa.clone()),
                bwt_median: median(&mut bwt.clone()),
            }
        })
        .collect()
}

/// Runs all (seed, method) pairs, in parallel when allowed. Output order is
/// config order regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, par: Parallelism) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let jobs: Vec<(u64, Method)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.methods.iter().map(move |&m| (s, m)))
        .collect();
    let streams: Vec<TaskStream> =
        parallel::map(&cfg.seeds, par, |&s| generate_stream(&cfg.stream, s))
            .into_iter()
            .collect::<Result<_>>()?;
    let runs: Vec<MethodRun> = parallel::map(&jobs, par, |&(seed, m)| {
        let idx = cfg
            .seeds
            .iter()
            .position(|&s| s == seed)
            .expect("seed listed");
        run_method(cfg, &streams[idx], m, seed)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut seeds = Vec::new();
    for (idx, &seed) in cfg.seeds.iter().enumerate() {
        let fp = streams[idx].fingerprint();
        let methods: Vec<MethodReport> = runs
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| r.report.clone())
            .collect();
        if methods.iter().any(|m| m.stream_fingerprint != fp) {
            return Err(Error::Contract(format!(
                "seed {seed}: methods saw different streams"
            )));
        }
        seeds.push(SeedReport {
            seed,
            stream_fingerprint: fp,
            methods,
        });
    }
    let summary = summarize(cfg, &seeds);
    Ok(ExperimentOutput {
        report: ExperimentReport {
            config: cfg.clone(),
            seeds,
            summary,
        },
        runs,
    })
}

impl ExperimentReport {
    /// Parses a report; schema mismatches name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        crate::config::from_json_with_path(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_for(&self, m: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == m)
    }

    fn tasks(&self) -> usize {
        self.config.stream.tasks
    }

    fn reports_for(&self, m: Method) -> Vec<&MethodReport> {
        self.seeds
            .iter()
            .flat_map(|s| s.methods.iter().filter(move |r| r.method == m))
            .collect()
    }

    fn mean_over_seeds(
        reports: &[&MethodReport],
        f: impl Fn(&MethodReport) -> Vec<f64>,
        t: usize,
    ) -> Vec<f64> {
        let mut acc = vec![0.0; t];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(f(r)) {
                *a += v;
            }
        }
        acc.iter()
            .map(|a| a / reports.len().max(1) as f64)
            .collect()
    }

    /// Per-method table: `A[i][i]` and `A[T][i]` rows (means over seeds) with
    /// median ACC / MAA / BWT, all in percent.
    pub fn render_table(&self) -> String {
        let t = self.tasks();
        let mut out = format!("{:<11} {:<8}", "method", "row");
        for i in 0..t {
            out.push_str(&format!(" {:>7}", format!("T{}", i + 1)));
        }
        out.push_str(&format!(" {:>7} {:>7} {:>7}\n", "ACC", "MAA", "BWT"));
        for s in &self.summary {
            let reports = self.reports_for(s.method);
            let diag = Self::mean_over_seeds(&reports, |r| r.just_trained.clone(), t);
            let last = Self::mean_over_seeds(&reports, |r| r.final_row.clone(), t);
            for (label, row, metrics) in [("A[i][i]", &diag, false), ("A[T][i]", &last, true)] {
                let name = if metrics {
                    String::new()
                } else {
                    s.method.to_string()
                };
                out.push_str(&format!("{name:<11} {label:<8}"));
                for v in row {
                    out.push_str(&format!(" {:>7.2}", v * 100.0));
                }
                if metrics {
                    out.push_str(&format!(
                        " {:>7.2} {:>7.2} {:>7.2}",
                        s.acc_median * 100.0,
                        s.maa_median * 100.0,
                        s.bwt_median * 100.0
                    ));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Mean accuracy over seen tasks after each task, averaged over seeds:
    /// `T` rows per method.
    pub fn taskwise_maa_csv(&self) -> Result<String> {
        let t = self.tasks();
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["method", "after_task", "mean_seen_accuracy"])
            .map_err(io)?;
        for s in &self.summary {
            let reports = self.reports_for(s.method);
            let curve = Self::mean_over_seeds(
                &reports,
                |r| {
                    r.eval
                        .taskwise_maa()
                        .into_iter()
                        .map(|v| v.unwrap_or(f64::NAN))
                        .collect()
                },
                t,
            );
            for (i, v) in curve.iter().enumerate() {
                w.write_record([s.method.to_string(), (i + 1).to_string(), format!("{v}")])
                    .map_err(io)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf8"))
    }

    /// One row per (seed, method, metric), plus median rows with seed `median`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["seed", "method", "metric", "value"])
            .map_err(io)?;
        for s in &self.seeds {
            for m in &s.methods {
                for (name, v) in [
                    ("acc", m.metrics.acc),
                    ("maa", m.metrics.maa),
                    ("bwt", m.metrics.bwt),
                ] {
                    w.write_record([
                        s.seed.to_string(),
                        m.method.to_string(),
                        name.into(),
                        format!("{v}"),
                    ])
                    .map_err(io)?;
                }
            }
        }
        for s in &self.summary {
            for (name, v) in [
                ("acc", s.acc_median),
                ("maa", s.maa_median),
                ("bwt", s.bwt_median),
            ] {
                w.write_record([
                    "median".to_string(),
                    s.method.to_string(),
                    name.into(),
                    format!("{v}"),
                ])
                .map_err(io)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf8"))
    }
}
