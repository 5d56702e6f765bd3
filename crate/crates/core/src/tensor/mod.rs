//! Dense `f64` matrices with a small tape-based reverse-mode engine.

mod gradcheck;
mod matrix;
mod optim;
mod tape;

pub use gradcheck::{check_gradients, GradCheck};
pub use matrix::{cosine_similarity, Matrix};
pub use optim::{OptimizerKind, OptimizerState};
pub use tape::{ParamId, ParamStore, Tape, Var, MASK_VALUE};

/// Indices of the `k` largest entries of `row`, ties broken by lowest index,
/// returned in ascending index order.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equal scores
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<usize> = idx.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}
