#![allow(dead_code)]

use branchlora::config::ExperimentConfig;
use branchlora::harness::StreamSpec;
use branchlora::tensor::{check_gradients, GradCheck, Matrix, ParamId, ParamStore, Tape, Var};
use branchlora::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every differentiable tape operation.
pub const OPS: [&str; 15] = [
    "matmul",
    "add",
    "offset",
    "scale",
    "tanh",
    "row_softmax",
    "topk_mask",
    "select_col",
    "first_row",
    "mul_col",
    "cosine_rows",
    "cross_entropy",
    "mse",
    "sum",
    "mean",
];

pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-6;

fn randm(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::randn(rows, cols, 1.0, rng)
}

/// Rows whose entries are spread at least 0.5 apart, so a finite-difference
/// step never changes the top-k selection.
fn separated(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut vals: Vec<f64> = (0..cols)
            .map(|j| j as f64 * 0.5 + rng.gen_range(-0.1..0.1))
            .collect();
        for i in (1..cols).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        data.extend(vals);
    }
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Checks the gradient of op `op` on a random small case drawn from `seed`.
pub fn check_op(op: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..5);
    let n = rng.gen_range(2..6);
    let p = rng.gen_range(1..5);
    let mut store = ParamStore::new();
    let target = randm(m, n, &mut rng);
    let a = store.add("a", randm(m, n, &mut rng), false);
    let ids: Vec<ParamId>;
    match op {
        "matmul" => {
            let b = store.add("b", randm(n, p, &mut rng), false);
            let t = randm(m, p, &mut rng);
            ids = vec![a, b];
            check_gradients(&mut store, &ids, FD_STEP, FD_FLOOR, move |tape, s| {
                let (x, y) = (tape.param(s, a), tape.param(s, b));
                let z = tape.matmul(x, y)?;
                tape.mse(z, &t)
            })
        }
        "add" => {
            let b = store.add("b", randm(m, n, &mut rng), false);
            ids = vec![a, b];
            check_gradients(&mut store, &ids, FD_STEP, FD_FLOOR, move |tape, s| {
                let (x, y) = (tape.param(s, a), tape.param(s, b));
                let z = tape.add(x, y)?;
                let z = tape.tanh(z);
                tape.mse(z, &target)
            })
        }
        "offset" | "scale" | "tanh" | "row_softmax" | "first_row" | "sum" | "mean" | "mse" => {
            let c: f64 = rng.gen_range(-2.0..2.0);
            let op = op.to_string();
            ids = vec![a];
            check_gradients(&mut store, &ids, FD_STEP, FD_FLOOR, move |tape, s| {
                let x = tape.param(s, a);
                unary(tape, &op, x, c, &target)
            })
        }
        "topk_mask" => {
            store
                .get_mut(a)
                .data_mut()
                .copy_from_slice(separated(m, n, &mut rng).data());
            let k = rng.gen_range(1..=n);
            ids = vec![a];
            check_gradients(&mut store, &ids, FD_STEP, FD_FLOOR, move |tape, s| {
                let x = tape.param(s, a);
                let z = tape.topk_mask(x, k)?;
                let z = tape.row_softmax(z)?;
                tape.mse(z, &target)
            })
        }
        "select_col" => {
            let j = rng.gen_range(0..n);
            let t = randm(m, 1, &mut rng);
            ids = vec![a];
            check_gradients(&mut store, &ids, FD_STEP, FD_FLOOR, move |tape, s| {
                let x = tape.param(s, a);
                let z = tape.select_col(x, j)?;
                tape.mse(z, &t)
            })
        }
        "mul_col" => {
            let rows = if rng.gen_bool(0.3) { 1 } else { m };
            let c = store.add("col", randm(rows, 1, &mut rng), false);
            ids = vec![a, c];
            check_gradients(&mut store, &ids, FD_STEP, FD_FLOOR, move |tape, s| {
                let (x, y) = (tape.param(s, a), tape.param(s, c));
                let z = tape.mul_col(x, y)?;
                tape.mse(z, &target)
            })
        }
        "cosine_rows" => {
            let k = store.add("key", randm(1, n, &mut rng), false);
            let t = randm(m, 1, &mut rng);
            ids = vec![a, k];
            check_gradients(&mut store, &ids, FD_STEP, FD_FLOOR, move |tape, s| {
                let (x, y) = (tape.param(s, a), tape.param(s, k));
                let z = tape.cosine_rows(x, y)?;
                tape.mse(z, &t)
            })
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            ids = vec![a];
            check_gradients(&mut store, &ids, FD_STEP, FD_FLOOR, move |tape, s| {
                let x = tape.param(s, a);
                let x = tape.scale(x, 2.0);
                tape.cross_entropy(x, &labels)
            })
        }
        other => panic!("unknown op {other}"),
    }
}

fn unary(tape: &mut Tape, op: &str, x: Var, c: f64, target: &Matrix) -> Result<Var> {
    Ok(match op {
        "offset" => {
            let z = tape.offset(x, c);
            tape.mse(z, target)?
        }
        "scale" => {
            let z = tape.scale(x, c);
            tape.mse(z, target)?
        }
        "tanh" => {
            let z = tape.tanh(x);
            tape.mse(z, target)?
        }
        "row_softmax" => {
            let z = tape.row_softmax(x)?;
            tape.mse(z, target)?
        }
        "first_row" => {
            let z = tape.first_row(x)?;
            let t = target.select_rows(&[0]);
            tape.mse(z, &t)?
        }
        "sum" => {
            let z = tape.tanh(x);
            tape.sum(z)
        }
        "mean" => {
            let z = tape.tanh(x);
            tape.mean(z)?
        }
        "mse" => tape.mse(x, target)?,
        other => panic!("unknown unary op {other}"),
    })
}

/// Default config restricted to the given seeds.
pub fn default_config(seeds: &[u64]) -> ExperimentConfig {
    ExperimentConfig {
        seeds: seeds.to_vec(),
        ..ExperimentConfig::default()
    }
}

/// A small, fast config for integration tests.
pub fn small_config(seeds: &[u64]) -> ExperimentConfig {
    let mut cfg = default_config(seeds);
    cfg.stream = StreamSpec {
        tasks: 3,
        train_per_task: 128,
        test_per_task: 64,
        dim: 16,
        ..StreamSpec::default()
    };
    cfg.training.epochs = 4;
    cfg.timing_batches = 10;
    cfg
}
