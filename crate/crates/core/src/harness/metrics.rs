use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy table: `get(i, k)` is the accuracy on task `k`
/// measured right after training task `i` (`k <= i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub maa: f64,
    pub bwt: f64,
}

impl EvalMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: (0..tasks).map(|i| vec![None; i + 1]).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Contract(format!(
                    "row {i} has {} entries, expected {}",
                    row.len(),
                    i + 1
                )));
            }
            for (k, &v) in row.iter().enumerate() {
                m.set(i, k, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, i: usize, k: usize, v: f64) -> Result<()> {
        if k > i || i >= self.rows.len() {
            return Err(Error::Contract(format!(
                "entry ({i}, {k}) outside lower triangle"
            )));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows[i][k] = Some(v);
        Ok(())
    }

    pub fn get(&self, i: usize, k: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(k)).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }

    /// `A[i][i]` for every task: accuracy right after learning it.
    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.tasks()).map(|i| self.get(i, i)).collect()
    }

    /// `A[T-1][i]`: accuracy after the whole stream.
    pub fn last_row(&self) -> Vec<Option<f64>> {
        self.rows.last().cloned().unwrap_or_default()
    }

    /// Mean accuracy over tasks seen so far, after each task.
    pub fn taskwise_maa(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let vals: Option<Vec<f64>> = r.iter().copied().collect();
                vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }

    pub fn dense_rows(&self) -> Result<Vec<Vec<f64>>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.iter()
                    .enumerate()
                    .map(|(k, v)| {
                        v.ok_or_else(|| Error::Contract(format!("entry ({i}, {k}) missing")))
                    })
                    .collect()
            })
            .collect()
    }
}

/// ACC = mean of the last row; MAA = mean of running row means; BWT = mean over
/// tasks of `A[T][i] - A[i][i]` (the last task contributes 0).
pub fn compute_metrics(e: &EvalMatrix) -> Result<Metrics> {
    let t = e.tasks();
    if t == 0 {
        return Err(Error::Contract("empty evaluation matrix".into()));
    }
    let rows = e.dense_rows()?;
    let tf = t as f64;
    let last = &rows[t - 1];
    let acc = last.iter().sum::<f64>() / tf;
    let maa = rows
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .sum::<f64>()
        / tf;
    let bwt = (0..t).map(|i| last[i] - rows[i][i]).sum::<f64>() / tf;
    Ok(Metrics { acc, maa, bwt })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_example() {
        let e = EvalMatrix::from_rows(&[vec![0.8], vec![0.6, 0.9]]).unwrap();
        let m = compute_metrics(&e).unwrap();
        assert!((m.acc - 0.75).abs() < 1e-12);
        assert!((m.maa - 0.775).abs() < 1e-12);
        assert!((m.bwt + 0.1).abs() < 1e-12);
    }

    #[test]
    fn constant_matrix_has_no_forgetting() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![0.37; i + 1]).collect();
        let m = compute_metrics(&EvalMatrix::from_rows(&rows).unwrap()).unwrap();
        assert!((m.acc - 0.37).abs() < 1e-12);
        assert!((m.maa - 0.37).abs() < 1e-12);
        assert!(m.bwt.abs() < 1e-12);
    }

    #[test]
    fn monotone_degradation_is_negative_bwt() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..=i).map(|k| 0.9 - 0.1 * (i - k) as f64).collect())
            .collect();
        let m = compute_metrics(&EvalMatrix::from_rows(&rows).unwrap()).unwrap();
        assert!(m.bwt < 0.0);
    }

    #[test]
    fn single_task_and_incomplete() {
        let e = EvalMatrix::from_rows(&[vec![0.4]]).unwrap();
        let m = compute_metrics(&e).unwrap();
        assert_eq!((m.acc, m.maa, m.bwt), (0.4, 0.4, 0.0));
        let mut e = EvalMatrix::new(2);
        e.set(0, 0, 0.5).unwrap();
        assert!(matches!(compute_metrics(&e), Err(Error::Contract(_))));
        assert!(e.set(0, 1, 0.5).is_err());
        assert!(e.set(1, 0, 1.5).is_err());
    }
}
