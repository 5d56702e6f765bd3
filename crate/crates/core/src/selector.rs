//! Per-task keys aligned to sample embeddings, and key-based task selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Matrix, ParamId, ParamStore, Tape, Var};

/// Two embedding views of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEmbeddings {
    pub img: Matrix,
    pub txt: Matrix,
}

impl SampleEmbeddings {
    pub fn new(img: Matrix, txt: Matrix) -> Result<Self> {
        if img.rows() != 1 || txt.rows() != 1 {
            return Err(Error::Parameter("embeddings must be single rows".into()));
        }
        if img.norm() == 0.0 || txt.norm() == 0.0 {
            return Err(Error::Degenerate("embedding view with zero norm".into()));
        }
        Ok(Self { img, txt })
    }

    /// First half of `x` as the image view, second half as the text view.
    pub fn split_halves(x: &[f64]) -> Result<Self> {
        let h = x.len() / 2;
        Self::new(
            Matrix::row_vector(x[..h].to_vec()),
            Matrix::row_vector(x[h..].to_vec()),
        )
    }
}

/// Trainable key pair of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskKeys {
    pub task: usize,
    pub img: ParamId,
    pub txt: ParamId,
}

/// Resolved key values, decoupled from any store.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValues {
    pub img: Matrix,
    pub txt: Matrix,
}

impl TaskKeys {
    pub fn values(&self, store: &ParamStore) -> KeyValues {
        KeyValues {
            img: store.get(self.img).clone(),
            txt: store.get(self.txt).clone(),
        }
    }
}

/// Σ_j (1 − cos(e_img_j, k_img)) + Σ_j (1 − cos(e_txt_j, k_txt)) for a batch whose
/// views are stacked row-wise in `img` and `txt`.
pub fn alignment_loss(tape: &mut Tape, img: Var, txt: Var, k_img: Var, k_txt: Var) -> Result<Var> {
    let n = tape.value(img).rows();
    if n == 0 || tape.value(txt).rows() != n {
        return Err(Error::Contract(
            "alignment loss needs a non-empty batch".into(),
        ));
    }
    let ci = tape.cosine_rows(img, k_img)?;
    let ct = tape.cosine_rows(txt, k_txt)?;
    let si = tape.sum(ci);
    let st = tape.sum(ct);
    let both = tape.add(si, st)?;
    let neg = tape.scale(both, -1.0);
    Ok(tape.offset(neg, 2.0 * n as f64))
}

/// Alignment loss of a batch of embeddings against stored keys.
pub fn alignment_loss_for(
    tape: &mut Tape,
    store: &ParamStore,
    batch: &[SampleEmbeddings],
    keys: &TaskKeys,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract(
            "alignment loss needs a non-empty batch".into(),
        ));
    }
    let stack = |f: fn(&SampleEmbeddings) -> &Matrix| -> Result<Matrix> {
        let cols = f(&batch[0]).cols();
        let mut data = Vec::with_capacity(batch.len() * cols);
        for s in batch {
            data.extend_from_slice(f(s).data());
        }
        Matrix::from_vec(batch.len(), cols, data)
    };
    let img = tape.input(stack(|s| &s.img)?);
    let txt = tape.input(stack(|s| &s.txt)?);
    let ki = tape.param(store, keys.img);
    let kt = tape.param(store, keys.txt);
    alignment_loss(tape, img, txt, ki, kt)
}

/// `L_task + λ · L_align`.
pub fn total_loss(tape: &mut Tape, task_loss: Var, align: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(task_loss);
    }
    let weighted = tape.scale(align, lambda);
    tape.add(task_loss, weighted)
}

/// Combined similarity cos(e_img, k_img) + cos(e_txt, k_txt).
pub fn key_score(sample: &SampleEmbeddings, keys: &KeyValues) -> Result<f64> {
    Ok(cosine_similarity(&sample.img, &keys.img)? + cosine_similarity(&sample.txt, &keys.txt)?)
}

/// Index of the task whose keys score highest; ties go to the lowest index.
pub fn select_task(sample: &SampleEmbeddings, keys: &[KeyValues]) -> Result<usize> {
    if keys.is_empty() {
        return Err(Error::Selector("no task keys trained yet".into()));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (t, k) in keys.iter().enumerate() {
        let s = key_score(sample, k)?;
        if s > best_score {
            best = t;
            best_score = s;
        }
    }
    Ok(best)
}

/// Fraction of samples routed to their true task.
pub fn selector_accuracy(samples: &[(SampleEmbeddings, usize)], keys: &[KeyValues]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (s, label) in samples {
        if select_task(s, keys)? == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(a: Vec<f64>, b: Vec<f64>) -> SampleEmbeddings {
        SampleEmbeddings::new(Matrix::row_vector(a), Matrix::row_vector(b)).unwrap()
    }

    fn keys_in(store: &mut ParamStore, a: Vec<f64>, b: Vec<f64>, task: usize) -> TaskKeys {
        TaskKeys {
            task,
            img: store.add("k_img", Matrix::row_vector(a), false),
            txt: store.add("k_txt", Matrix::row_vector(b), false),
        }
    }

    fn loss_value(store: &ParamStore, batch: &[SampleEmbeddings], keys: &TaskKeys) -> f64 {
        let mut tape = Tape::new();
        let l = alignment_loss_for(&mut tape, store, batch, keys).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn loss_zero_for_matching_keys_and_two_for_orthogonal() {
        let mut store = ParamStore::new();
        let k = keys_in(&mut store, vec![1.0, 2.0], vec![0.0, 3.0], 0);
        let batch = vec![
            emb(vec![2.0, 4.0], vec![0.0, 1.0]),
            emb(vec![0.5, 1.0], vec![0.0, 7.0]),
        ];
        assert!(loss_value(&store, &batch, &k).abs() < 1e-12);
        let k2 = keys_in(&mut store, vec![0.0, 1.0], vec![1.0, 0.0], 0);
        let one = vec![emb(vec![1.0, 0.0], vec![0.0, 1.0])];
        assert!((loss_value(&store, &one, &k2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ki = Matrix::randn(1, 5, 1.0, &mut rng);
        let kt = Matrix::randn(1, 5, 1.0, &mut rng);
        let keys = TaskKeys {
            task: 0,
            img: store.add("ki", ki.clone(), false),
            txt: store.add("kt", kt.clone(), false),
        };
        let batch: Vec<_> = (0..9)
            .map(|_| {
                SampleEmbeddings::new(
                    Matrix::randn(1, 5, 1.0, &mut rng),
                    Matrix::randn(1, 5, 1.0, &mut rng),
                )
                .unwrap()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut oracle = 0.0;
        for s in &batch {
            let (a, b) = (s.img.data(), ki.data());
            oracle += 1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
            let (a, b) = (s.txt.data(), kt.data());
            oracle += 1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
        }
        assert!((loss_value(&store, &batch, &keys) - oracle).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_embedding_rejected() {
        assert!(matches!(
            SampleEmbeddings::new(
                Matrix::row_vector(vec![0.0, 0.0]),
                Matrix::row_vector(vec![1.0, 0.0])
            ),
            Err(Error::Degenerate(_))
        ));
        let mut tape = Tape::new();
        let img = tape.input(Matrix::row_vector(vec![0.0, 0.0]));
        let txt = tape.input(Matrix::row_vector(vec![1.0, 0.0]));
        let k = tape.input(Matrix::row_vector(vec![1.0, 0.0]));
        assert!(matches!(
            alignment_loss(&mut tape, img, txt, k, k),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn total_loss_values() {
        let mut tape = Tape::new();
        let t = tape.input(Matrix::row_vector(vec![0.5]));
        let a = tape.input(Matrix::row_vector(vec![0.25]));
        let l0 = total_loss(&mut tape, t, a, 0.0).unwrap();
        assert_eq!(tape.value(l0).data()[0], 0.5);
        let l1 = total_loss(&mut tape, t, a, 1.0).unwrap();
        assert_eq!(tape.value(l1).data()[0], 0.75);
    }

    #[test]
    fn select_task_examples() {
        let kv = |a: Vec<f64>, b: Vec<f64>| KeyValues {
            img: Matrix::row_vector(a),
            txt: Matrix::row_vector(b),
        };
        let s = emb(vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 2.0]);
        assert_eq!(
            select_task(&s, &[kv(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0])]).unwrap(),
            0
        );
        let keys = vec![
            kv(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]),
            kv(vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]),
            kv(vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]),
        ];
        assert_eq!(select_task(&s, &keys).unwrap(), 2);
        // tie goes to the lowest index
        let tie = vec![keys[2].clone(), keys[2].clone()];
        assert_eq!(select_task(&s, &tie).unwrap(), 0);
        assert!(matches!(select_task(&s, &[]), Err(Error::Selector(_))));
        let acc = selector_accuracy(&[(s.clone(), 2), (s, 1)], &keys).unwrap();
        assert_eq!(acc, 0.5);
    }
}
