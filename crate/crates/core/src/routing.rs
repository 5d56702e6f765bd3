//! Router usage statistics and the tuning-freezing policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Which usage statistic ranks branches for freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMetric {
    /// Accumulated post-softmax gate weight.
    #[default]
    GateMass,
    /// Number of times a branch was in the top-k support.
    SelectionCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub mass: Vec<f64>,
    pub counts: Vec<u64>,
    pub samples: u64,
}

impl UsageStats {
    pub fn new(n_experts: usize) -> Self {
        Self {
            mass: vec![0.0; n_experts],
            counts: vec![0; n_experts],
            samples: 0,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.mass.len()
    }

    /// Accumulates every row of `gate` as one sample's routing distribution.
    pub fn record_gate(&mut self, gate: &Matrix) -> Result<()> {
        if gate.cols() != self.n_experts() {
            return Err(Error::Dimension {
                op: "record_gate",
                lhs: gate.shape(),
                rhs: (1, self.n_experts()),
            });
        }
        for r in 0..gate.rows() {
            let row = gate.row(r);
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Contract(format!(
                    "gate row {r} is not a distribution (sum {total})"
                )));
            }
        }
        for r in 0..gate.rows() {
            for (j, &v) in gate.row(r).iter().enumerate() {
                self.mass[j] += v;
                if v > 0.0 {
                    self.counts[j] += 1;
                }
            }
            self.samples += 1;
        }
        Ok(())
    }

    /// Gate mass divided by samples seen.
    pub fn normalized_mass(&self) -> Vec<f64> {
        if self.samples == 0 {
            return vec![0.0; self.mass.len()];
        }
        self.mass.iter().map(|m| m / self.samples as f64).collect()
    }

    fn score(&self, metric: FreezeMetric) -> Vec<f64> {
        match metric {
            FreezeMetric::GateMass => self.mass.clone(),
            FreezeMetric::SelectionCount => self.counts.iter().map(|&c| c as f64).collect(),
        }
    }
}

/// Up to `k` not-yet-frozen branches with the highest usage, ties to the lower
/// index, returned in ascending index order.
pub fn select_freeze_set(
    stats: &UsageStats,
    k: usize,
    already_frozen: &[bool],
    metric: FreezeMetric,
) -> Result<Vec<usize>> {
    if stats.samples == 0 {
        return Err(Error::Policy("no samples recorded for this task".into()));
    }
    if already_frozen.len() != stats.n_experts() {
        return Err(Error::Policy(format!(
            "freeze mask has {} entries for {} experts",
            already_frozen.len(),
            stats.n_experts()
        )));
    }
    let score = stats.score(metric);
    let mut candidates: Vec<usize> = (0..score.len()).filter(|&j| !already_frozen[j]).collect();
    candidates.sort_by(|&a, &b| {
        score[b]
            .partial_cmp(&score[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    candidates.truncate(k);
    candidates.sort_unstable();
    Ok(candidates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub task: usize,
    pub layer: usize,
    pub frozen: Vec<usize>,
    pub normalized_mass: Vec<f64>,
    pub selection_counts: Vec<u64>,
}

/// Append-only log of the branches frozen after each task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeLedger {
    records: Vec<FreezeRecord>,
}

impl FreezeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects a record that would freeze a branch twice in the same layer.
    pub fn append(&mut self, record: FreezeRecord) -> Result<()> {
        for prev in self.records.iter().filter(|p| p.layer == record.layer) {
            if let Some(j) = record.frozen.iter().find(|j| prev.frozen.contains(j)) {
                return Err(Error::Policy(format!(
                    "branch {j} of layer {} already frozen after task {}",
                    record.layer, prev.task
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[FreezeRecord] {
        &self.records
    }

    pub fn total_frozen(&self, layer: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| r.frozen.len())
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}
