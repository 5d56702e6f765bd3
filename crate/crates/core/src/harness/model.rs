use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterHyperparams, AdapterKind, AdapterLayer, RouterInput};
use crate::error::{Error, Result};
use crate::selector::{KeyValues, TaskKeys};
use crate::tensor::{Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroShot,
    Lora,
    #[serde(rename = "moelora")]
    MoeLora,
    #[serde(rename = "branchlora")]
    BranchLora,
    #[serde(rename = "multitask")]
    MultiTask,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ZeroShot,
        Method::Lora,
        Method::MoeLora,
        Method::BranchLora,
        Method::MultiTask,
    ];

    pub fn adapter_kind(self) -> AdapterKind {
        match self {
            Method::ZeroShot | Method::Lora | Method::MultiTask => AdapterKind::Lora,
            Method::MoeLora => AdapterKind::MoeLora,
            Method::BranchLora => AdapterKind::BranchLora,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::Lora => "lora",
            Method::MoeLora => "moelora",
            Method::BranchLora => "branchlora",
            Method::MultiTask => "multitask",
        }
    }

    pub fn from_name(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stack of adapter layers over frozen backbone weights with `tanh` between
/// layers and a frozen linear readout to class logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub method: Method,
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    pub hp: AdapterHyperparams,
    pub layers: Vec<AdapterLayer>,
    pub head: ParamId,
    /// Task keys (BranchLoRA only), one pair per registered task.
    pub keys: Vec<TaskKeys>,
    #[serde(skip)]
    pub store: ParamStore,
}

/// Std of the perturbation applied to fresh task keys.
const KEY_INIT_STD: f64 = 0.01;

impl Model {
    /// Backbone and readout depend only on `seed`, so every method built with
    /// the same seed shares them bit for bit.
    pub fn new(
        method: Method,
        dim: usize,
        classes: usize,
        hp: &AdapterHyperparams,
        n_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        if n_layers == 0 {
            return Err(Error::Parameter(
                "model needs at least one adapter layer".into(),
            ));
        }
        let mut backbone_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_626f_6e65);
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6164_6170_7465_7273);
        let mut store = ParamStore::new();
        let std = 1.0 / (dim as f64).sqrt();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let w = Matrix::randn(dim, dim, std, &mut backbone_rng);
            layers.push(AdapterLayer::init(
                method.adapter_kind(),
                &format!("layer{l}"),
                w,
                hp,
                &mut store,
                &mut adapter_rng,
            )?);
        }
        let head = store.add(
            "head",
            Matrix::randn(dim, classes, std, &mut backbone_rng),
            true,
        );
        let mut model = Self {
            method,
            seed,
            dim,
            classes,
            hp: *hp,
            layers,
            head,
            keys: Vec::new(),
            store,
        };
        if method == Method::ZeroShot {
            model.freeze_all();
        }
        Ok(model)
    }

    pub fn freeze_all(&mut self) {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.store.freeze(id);
        }
    }

    pub fn is_branch(&self) -> bool {
        self.method == Method::BranchLora
    }

    pub fn n_tasks_registered(&self) -> usize {
        self.keys.len()
    }

    /// BranchLoRA: appends a router per layer and a key pair for a new task;
    /// earlier routers and keys become frozen.
    pub fn begin_task(&mut self) -> Result<usize> {
        if !self.is_branch() {
            return Ok(0);
        }
        let t = self.keys.len();
        for layer in &mut self.layers {
            if let AdapterLayer::BranchLora(b) = layer {
                b.register_task(&mut self.store);
            }
        }
        for k in &self.keys {
            self.store.freeze(k.img);
            self.store.freeze(k.txt);
        }
        let half = self.dim / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6b65_7973 ^ ((t as u64) << 32));
        let img = self.store.add(
            format!("key.{t}.img"),
            Matrix::randn(1, half, KEY_INIT_STD, &mut rng),
            false,
        );
        let txt = self.store.add(
            format!("key.{t}.txt"),
            Matrix::randn(1, self.dim - half, KEY_INIT_STD, &mut rng),
            false,
        );
        self.keys.push(TaskKeys { task: t, img, txt });
        Ok(t)
    }

    /// Freezes the current task's routers and keys.
    pub fn end_task(&mut self) {
        for layer in &mut self.layers {
            if let AdapterLayer::BranchLora(b) = layer {
                b.close_task(&mut self.store);
            }
        }
        if let Some(k) = self.keys.last() {
            self.store.freeze(k.img);
            self.store.freeze(k.txt);
        }
    }

    pub fn key_values(&self) -> Vec<KeyValues> {
        self.keys.iter().map(|k| k.values(&self.store)).collect()
    }

    /// Logits and per-layer gates for a batch of single-token samples.
    pub fn forward(&self, tape: &mut Tape, x: Var, task: Option<usize>) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut gates = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(tape, &self.store, h, task, RouterInput::PerRow)?;
            gates.extend(out.gate);
            h = if l < last { tape.tanh(out.h) } else { out.h };
        }
        let head = tape.param(&self.store, self.head);
        Ok((tape.matmul(h, head)?, gates))
    }

    pub fn predict(&self, x: &Matrix, task: Option<usize>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let (logits, _) = self.forward(&mut tape, xv, task)?;
        Ok(tape.value(logits).argmax_rows())
    }

    /// Adapter scalars currently receiving gradient (keys excluded).
    pub fn adapter_trainable(&self) -> usize {
        if self.method == Method::ZeroShot {
            return 0;
        }
        self.layers
            .iter()
            .map(|l| l.count_trainable_params(&self.store))
            .sum()
    }

    /// Scalars in the keys of the current task, if they are tunable.
    pub fn key_trainable(&self) -> usize {
        self.keys
            .iter()
            .flat_map(|k| [k.img, k.txt])
            .filter(|&id| !self.store.is_frozen(id))
            .map(|id| self.store.get(id).len())
            .sum()
    }
}
