use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::selector::SampleEmbeddings;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub tasks: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Input width; must be even so it splits into two embedding views.
    pub dim: usize,
    pub classes: usize,
    /// Norm of each task's cluster center.
    #[serde(default = "default_center_norm")]
    pub center_norm: f64,
    /// Per-coordinate std of the within-cluster noise.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Width of the label subspace shared by all tasks; 0 gives each task an
    /// unconstrained `(dim, classes)` label map.
    #[serde(default = "default_latent_rank")]
    pub latent_rank: usize,
    /// Every task reuses task 0's generator (no interference between tasks).
    #[serde(default)]
    pub repeat_single_task: bool,
}

fn default_center_norm() -> f64 {
    6.0
}
fn default_noise_std() -> f64 {
    1.0
}
fn default_latent_rank() -> usize {
    4
}

const MAX_DRAWS_PER_SAMPLE: usize = 1000;

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            tasks: 4,
            train_per_task: 512,
            test_per_task: 256,
            dim: 32,
            classes: 4,
            center_norm: default_center_norm(),
            noise_std: default_noise_std(),
            latent_rank: default_latent_rank(),
            repeat_single_task: false,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.tasks == 0 {
            return bad("stream needs at least one task");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.train_per_task < self.classes || self.test_per_task < self.classes {
            return bad("samples per split must be at least the class count");
        }
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return bad("dim must be even and at least 2");
        }
        if !(self.center_norm > 0.0 && self.noise_std > 0.0) {
            return bad("center_norm and noise_std must be positive");
        }
        if self.latent_rank >= self.dim {
            return bad("latent_rank must be smaller than dim");
        }
        if self.latent_rank == 1 {
            return bad("latent_rank must be 0 or at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

impl Sample {
    /// Image view = first half of `x`, text view = second half.
    pub fn embeddings(&self) -> Result<SampleEmbeddings> {
        SampleEmbeddings::split_halves(&self.x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: usize,
    pub center: Vec<f64>,
    /// Hidden `(dim, classes)` map; the label is the argmax of `x · map`.
    pub target_map: Matrix,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        self.target_map.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub seed: u64,
    pub tasks: Vec<SyntheticTask>,
}

impl TaskStream {
    /// SHA-256 over every sample's bits and label, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tasks {
            for s in t.train.iter().chain(&t.test) {
                for v in &s.x {
                    h.update(v.to_le_bytes());
                }
                h.update((s.label as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn gaussian_vec<R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Draws `n` samples with a balanced label histogram by rejection on full classes.
fn draw_split<R: Rng>(
    n: usize,
    center: &[f64],
    map: &Matrix,
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let c = map.cols();
    let mut quota: Vec<usize> = (0..c).map(|j| n / c + usize::from(j < n % c)).collect();
    let mut out = Vec::with_capacity(n);
    let mut draws = 0usize;
    while out.len() < n {
        draws += 1;
        if draws > n * MAX_DRAWS_PER_SAMPLE {
            return Err(Error::Degenerate(
                "label map leaves a class almost empty; try another seed or latent_rank".into(),
            ));
        }
        let z = gaussian_vec(center.len(), noise_std, rng);
        let zm = Matrix::row_vector(z.clone()).matmul(map).expect("shape");
        let label = zm.argmax_rows()[0];
        if quota[label] == 0 {
            continue;
        }
        quota[label] -= 1;
        let x = center.iter().zip(&z).map(|(a, b)| a + b).collect();
        out.push(Sample { x, label });
    }
    Ok(out)
}

/// Orthonormal `(dim, rank)` basis by Gram-Schmidt on Gaussian columns.
fn orthonormal_basis<R: Rng>(dim: usize, rank: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian_vec(dim, 1.0, rng);
        project_out(&mut v, &basis);
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
    }
}

/// Label map `U V` with `V` columns on the unit sphere, so every class owns a
/// non-empty cone of the latent space.
fn latent_label_map<R: Rng>(basis: &[Vec<f64>], dim: usize, classes: usize, rng: &mut R) -> Matrix {
    let rank = basis.len();
    let mut v = Matrix::randn(rank, classes, 1.0, rng);
    for j in 0..classes {
        let n = (0..rank)
            .map(|i| v.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        for i in 0..rank {
            let val = v.get(i, j) / n;
            v.set(i, j, val);
        }
    }
    let mut map = Matrix::zeros(dim, classes);
    for (i, u) in basis.iter().enumerate() {
        for (d, &ud) in u.iter().enumerate() {
            for j in 0..classes {
                let val = map.get(d, j) + ud * v.get(i, j);
                map.set(d, j, val);
            }
        }
    }
    map
}

/// Builds `spec.tasks` tasks whose inputs are Gaussian clusters around random
/// centers, labelled by an independent random linear map per task. With a
/// non-zero `latent_rank` every label map reads the same shared subspace and
/// the centers lie in its orthogonal complement, so tasks agree on which
/// features matter but disagree on the labels.
pub fn generate_stream(spec: &StreamSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let task_seeds: Vec<u64> = (0..spec.tasks).map(|_| master.gen()).collect();
    let basis = orthonormal_basis(spec.dim, spec.latent_rank, &mut master);
    let mut tasks = Vec::with_capacity(spec.tasks);
    for (id, &ts) in task_seeds.iter().enumerate() {
        let gen_seed = if spec.repeat_single_task {
            task_seeds[0]
        } else {
            ts
        };
        let mut rng = ChaCha8Rng::seed_from_u64(gen_seed);
        let mut dir = gaussian_vec(spec.dim, 1.0, &mut rng);
        project_out(&mut dir, &basis);
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let center: Vec<f64> = dir.iter().map(|v| v / n * spec.center_norm).collect();
        let map = if basis.is_empty() {
            Matrix::randn(spec.dim, spec.classes, 1.0, &mut rng)
        } else {
            latent_label_map(&basis, spec.dim, spec.classes, &mut rng)
        };
        let train_seed: u64 = rng.gen();
        let test_seed: u64 = rng.gen();
        let train = draw_split(
            spec.train_per_task,
            &center,
            &map,
            spec.noise_std,
            &mut ChaCha8Rng::seed_from_u64(train_seed),
        )?;
        let test = draw_split(
            spec.test_per_task,
            &center,
            &map,
            spec.noise_std,
            &mut ChaCha8Rng::seed_from_u64(test_seed),
        )?;
        tasks.push(SyntheticTask {
            id,
            center,
            target_map: map,
            train,
            test,
        });
    }
    Ok(TaskStream {
        spec: spec.clone(),
        seed,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamSpec {
        StreamSpec {
            tasks: 3,
            train_per_task: 40,
            test_per_task: 24,
            dim: 8,
            classes: 4,
            ..StreamSpec::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_stream(&small(), 11).unwrap();
        let b = generate_stream(&small(), 11).unwrap();
        let c = generate_stream(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn every_class_in_both_splits() {
        let s = generate_stream(&small(), 3).unwrap();
        for t in &s.tasks {
            for split in [&t.train, &t.test] {
                let mut seen = [0; 4];
                for x in split.iter() {
                    assert!(x.label < 4);
                    seen[x.label] += 1;
                }
                assert!(seen.iter().all(|&c| c > 0));
            }
            assert_ne!(t.train[0].x, t.test[0].x);
        }
        let ids: Vec<usize> = s.tasks.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = small();
        s.dim = 7;
        assert!(generate_stream(&s, 0).is_err());
        let mut s = small();
        s.train_per_task = 2;
        assert!(generate_stream(&s, 0).is_err());
        let mut s = small();
        s.tasks = 0;
        assert!(generate_stream(&s, 0).is_err());
    }

    #[test]
    fn repeated_task_stream_has_identical_tasks() {
        let mut s = small();
        s.repeat_single_task = true;
        let st = generate_stream(&s, 5).unwrap();
        assert_eq!(st.tasks[0].train, st.tasks[2].train);
        assert_eq!(st.tasks[1].id, 1);
    }
}
