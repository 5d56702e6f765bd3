//! LoRA, MoELoRA and BranchLoRA layers beside a frozen backbone weight.
//!
//! Layers only hold [`ParamId`]s; the values live in a [`ParamStore`] owned by
//! the surrounding model so a single tape/optimizer pair can drive every layer.
//!
//! Router input is the first token of a sample. [`RouterInput::PerRow`] treats
//! every row of `x` as its own single-token sample (the batched training path),
//! [`RouterInput::FirstRow`] treats `x` as one token sequence and routes all of
//! it by row 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterHyperparams {
    /// Total rank across experts.
    pub r: usize,
    pub alpha: f64,
    /// Number of experts / branches.
    pub n_experts: usize,
    /// Routing top-k width (BranchLoRA only).
    pub top_k: usize,
    /// Alignment-loss coefficient.
    pub lambda: f64,
    /// Branches frozen per finished task; `None` means `top_k`.
    #[serde(default)]
    pub freeze_width: Option<usize>,
}

impl AdapterHyperparams {
    /// Full-size hyperparameters.
    pub fn large_scale() -> Self {
        Self {
            r: 128,
            alpha: 256.0,
            n_experts: 8,
            top_k: 2,
            lambda: 1.0,
            freeze_width: None,
        }
    }

    /// Laptop-sized defaults with the same `alpha / r` ratio.
    pub fn desk_scale() -> Self {
        Self {
            r: 16,
            alpha: 32.0,
            n_experts: 4,
            top_k: 2,
            lambda: 1.0,
            freeze_width: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_experts == 0 {
            return bad("n_experts must be at least 1".into());
        }
        if self.r == 0 || !self.r.is_multiple_of(self.n_experts) {
            return bad(format!(
                "rank {} must be a positive multiple of n_experts {}",
                self.r, self.n_experts
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "top_k {} outside 1..={}",
                self.top_k, self.n_experts
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if let Some(w) = self.freeze_width {
            if w > self.n_experts {
                return bad(format!(
                    "freeze_width {w} exceeds n_experts {}",
                    self.n_experts
                ));
            }
        }
        Ok(())
    }

    pub fn per_expert_rank(&self) -> usize {
        self.r / self.n_experts
    }

    /// `alpha / r`, always with the total rank.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn freeze_width(&self) -> usize {
        self.freeze_width.unwrap_or(self.top_k)
    }
}

impl Default for AdapterHyperparams {
    fn default() -> Self {
        Self::desk_scale()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    MoeLora,
    BranchLora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RouterInput {
    #[default]
    PerRow,
    FirstRow,
}

/// Frozen `W_f` of shape `(d_in, d_out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub weight: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl FrozenBackbone {
    pub fn new(store: &mut ParamStore, name: &str, weight: Matrix) -> Self {
        let (d_in, d_out) = weight.shape();
        let weight = store.add(format!("{name}.w_f"), weight, true);
        Self {
            weight,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.matmul(x, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    pub backbone: FrozenBackbone,
    pub a: ParamId,
    pub b: ParamId,
    pub hp: AdapterHyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLoraLayer {
    pub backbone: FrozenBackbone,
    /// `(A_j, B_j)` per expert.
    pub experts: Vec<(ParamId, ParamId)>,
    pub router: ParamId,
    pub hp: AdapterHyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLoraLayer {
    pub backbone: FrozenBackbone,
    pub a_shared: ParamId,
    pub branches: Vec<ParamId>,
    freeze_mask: Vec<bool>,
    /// One router per task, in training order.
    routers: Vec<ParamId>,
    pub hp: AdapterHyperparams,
    name: String,
    router_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterLayer {
    Lora(LoraLayer),
    MoeLora(MoeLoraLayer),
    BranchLora(BranchLoraLayer),
}

/// Output of a layer forward: hidden state and (for routed kinds) the gate.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub h: Var,
    pub gate: Option<Var>,
}

fn check_width(tape: &Tape, x: Var, d_in: usize, op: &'static str) -> Result<()> {
    let shape = tape.value(x).shape();
    if shape.1 != d_in || shape.0 == 0 {
        return Err(Error::Dimension {
            op,
            lhs: shape,
            rhs: (d_in, 0),
        });
    }
    Ok(())
}

fn router_source(tape: &mut Tape, x: Var, mode: RouterInput) -> Result<Var> {
    match mode {
        RouterInput::PerRow => Ok(x),
        RouterInput::FirstRow => tape.first_row(x),
    }
}

impl LoraLayer {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_width(tape, x, self.backbone.d_in, "lora_forward")?;
        let base = self.backbone.forward(tape, store, x)?;
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let xa = tape.matmul(x, a)?;
        let xab = tape.matmul(xa, b)?;
        let delta = tape.scale(xab, self.hp.scaling());
        tape.add(base, delta)
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.a, self.b]
    }
}

impl MoeLoraLayer {
    /// Dense softmax gating over all experts.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: RouterInput,
    ) -> Result<(Var, Var)> {
        check_width(tape, x, self.backbone.d_in, "moelora_forward")?;
        let base = self.backbone.forward(tape, store, x)?;
        let src = router_source(tape, x, mode)?;
        let wr = tape.param(store, self.router);
        let scores = tape.matmul(src, wr)?;
        let gate = tape.row_softmax(scores)?;
        let mut acc: Option<Var> = None;
        for (j, &(a_id, b_id)) in self.experts.iter().enumerate() {
            let a = tape.param(store, a_id);
            let b = tape.param(store, b_id);
            let xa = tape.matmul(x, a)?;
            let e = tape.matmul(xa, b)?;
            let g = tape.select_col(gate, j)?;
            let weighted = tape.mul_col(e, g)?;
            acc = Some(match acc {
                Some(s) => tape.add(s, weighted)?,
                None => weighted,
            });
        }
        let mix = acc.expect("at least one expert");
        let delta = tape.scale(mix, self.hp.scaling());
        Ok((tape.add(base, delta)?, gate))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.experts.iter().flat_map(|&(a, b)| [a, b]).collect();
        v.push(self.router);
        v
    }
}

impl BranchLoraLayer {
    pub fn freeze_mask(&self) -> &[bool] {
        &self.freeze_mask
    }

    pub fn routers(&self) -> &[ParamId] {
        &self.routers
    }

    pub fn n_tasks(&self) -> usize {
        self.routers.len()
    }

    pub fn router(&self, task: usize) -> Result<ParamId> {
        self.routers.get(task).copied().ok_or_else(|| {
            Error::Routing(format!(
                "no router for task {task} ({} registered)",
                self.routers.len()
            ))
        })
    }

    /// Appends a randomly initialized router for a new task and freezes the previous one.
    pub fn register_task(&mut self, store: &mut ParamStore) -> usize {
        if let Some(&prev) = self.routers.last() {
            store.freeze(prev);
        }
        let t = self.routers.len();
        let d_in = self.backbone.d_in;
        let id = store.add(
            format!("{}.router.{t}", self.name),
            router_init(d_in, self.hp.n_experts, self.router_seed ^ (t as u64)),
            false,
        );
        self.routers.push(id);
        t
    }

    /// Freezes the current task's router so nothing of the layer except `A`
    /// and unfrozen branches remains tunable.
    pub fn close_task(&mut self, store: &mut ParamStore) {
        if let Some(&last) = self.routers.last() {
            store.freeze(last);
        }
    }

    /// Freezes the given branches. Re-freezing is a policy error.
    pub fn apply_freeze(&mut self, store: &mut ParamStore, indices: &[usize]) -> Result<()> {
        for &j in indices {
            if j >= self.branches.len() {
                return Err(Error::Policy(format!(
                    "branch {j} out of range ({} branches)",
                    self.branches.len()
                )));
            }
            if self.freeze_mask[j] {
                return Err(Error::Policy(format!("branch {j} is already frozen")));
            }
        }
        for &j in indices {
            self.freeze_mask[j] = true;
            store.freeze(self.branches[j]);
        }
        Ok(())
    }

    /// Gate from the task's router: softmax over top-k masked scores.
    pub fn gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        task: usize,
        mode: RouterInput,
    ) -> Result<Var> {
        let router = self.router(task)?;
        let src = router_source(tape, x, mode)?;
        let wr = tape.param(store, router);
        let scores = tape.matmul(src, wr)?;
        let masked = tape.topk_mask(scores, self.hp.top_k)?;
        tape.row_softmax(masked)
    }

    /// Sparse top-k forward; `x · A_shared` is computed once and reused by every branch.
    /// Branches with an all-zero gate column are skipped.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        task: usize,
        mode: RouterInput,
    ) -> Result<(Var, Var)> {
        check_width(tape, x, self.backbone.d_in, "branchlora_forward")?;
        if self.hp.top_k > self.hp.n_experts {
            return Err(Error::Parameter(format!(
                "top_k {} exceeds n_experts {}",
                self.hp.top_k, self.hp.n_experts
            )));
        }
        let gate = self.gate(tape, store, x, task, mode)?;
        let base = self.backbone.forward(tape, store, x)?;
        let a = tape.param(store, self.a_shared);
        let xa = tape.matmul(x, a)?;
        let mut acc: Option<Var> = None;
        for (j, &b_id) in self.branches.iter().enumerate() {
            let gm = tape.value(gate);
            let used = (0..gm.rows()).any(|r| gm.get(r, j) != 0.0);
            if !used {
                continue;
            }
            let g = tape.select_col(gate, j)?;
            let scaled = tape.mul_col(xa, g)?;
            let b = tape.param(store, b_id);
            let e = tape.matmul(scaled, b)?;
            acc = Some(match acc {
                Some(s) => tape.add(s, e)?,
                None => e,
            });
        }
        let mix = acc.expect("top_k >= 1 keeps at least one branch");
        let delta = tape.scale(mix, self.hp.scaling());
        Ok((tape.add(base, delta)?, gate))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.a_shared];
        v.extend(&self.branches);
        v.extend(&self.routers);
        v
    }
}

/// Task router initial weights: N(0, 1/d_in), drawn from a per-layer seed so
/// routers of later tasks do not depend on training-time RNG use.
fn router_init(d_in: usize, n_experts: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::randn(d_in, n_experts, 1.0 / (d_in as f64).sqrt(), &mut rng)
}

impl AdapterLayer {
    /// Builds an adapter of `kind` around `backbone`: `A` ~ N(0, 1/d_in), `B` = 0,
    /// MoELoRA router = 0. BranchLoRA starts with no task routers;
    /// each registered task router is drawn from N(0, 1/d_in).
    pub fn init<R: Rng + ?Sized>(
        kind: AdapterKind,
        name: &str,
        backbone: Matrix,
        hp: &AdapterHyperparams,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        hp.validate()?;
        let backbone = FrozenBackbone::new(store, name, backbone);
        let (d_in, d_out) = (backbone.d_in, backbone.d_out);
        let std = 1.0 / (d_in as f64).sqrt();
        let re = hp.per_expert_rank();
        Ok(match kind {
            AdapterKind::Lora => {
                let a = store.add(
                    format!("{name}.lora.a"),
                    Matrix::randn(d_in, hp.r, std, rng),
                    false,
                );
                let b = store.add(format!("{name}.lora.b"), Matrix::zeros(hp.r, d_out), false);
                AdapterLayer::Lora(LoraLayer {
                    backbone,
                    a,
                    b,
                    hp: *hp,
                })
            }
            AdapterKind::MoeLora => {
                let experts = (0..hp.n_experts)
                    .map(|j| {
                        let a = store.add(
                            format!("{name}.expert.{j}.a"),
                            Matrix::randn(d_in, re, std, rng),
                            false,
                        );
                        let b = store.add(
                            format!("{name}.expert.{j}.b"),
                            Matrix::zeros(re, d_out),
                            false,
                        );
                        (a, b)
                    })
                    .collect();
                let router = store.add(
                    format!("{name}.router"),
                    Matrix::zeros(d_in, hp.n_experts),
                    false,
                );
                AdapterLayer::MoeLora(MoeLoraLayer {
                    backbone,
                    experts,
                    router,
                    hp: *hp,
                })
            }
            AdapterKind::BranchLora => {
                let a_shared = store.add(
                    format!("{name}.a_shared"),
                    Matrix::randn(d_in, re, std, rng),
                    false,
                );
                let branches = (0..hp.n_experts)
                    .map(|j| {
                        store.add(
                            format!("{name}.branch.{j}"),
                            Matrix::zeros(re, d_out),
                            false,
                        )
                    })
                    .collect();
                AdapterLayer::BranchLora(BranchLoraLayer {
                    backbone,
                    a_shared,
                    branches,
                    freeze_mask: vec![false; hp.n_experts],
                    routers: Vec::new(),
                    hp: *hp,
                    name: name.to_string(),
                    router_seed: rng.gen(),
                })
            }
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterLayer::Lora(_) => AdapterKind::Lora,
            AdapterLayer::MoeLora(_) => AdapterKind::MoeLora,
            AdapterLayer::BranchLora(_) => AdapterKind::BranchLora,
        }
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        match self {
            AdapterLayer::Lora(l) => &l.backbone,
            AdapterLayer::MoeLora(l) => &l.backbone,
            AdapterLayer::BranchLora(l) => &l.backbone,
        }
    }

    /// Runs the layer. `task` is required for BranchLoRA and ignored otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        task: Option<usize>,
        mode: RouterInput,
    ) -> Result<LayerOutput> {
        match self {
            AdapterLayer::Lora(l) => Ok(LayerOutput {
                h: l.forward(tape, store, x)?,
                gate: None,
            }),
            AdapterLayer::MoeLora(l) => {
                let (h, g) = l.forward(tape, store, x, mode)?;
                Ok(LayerOutput { h, gate: Some(g) })
            }
            AdapterLayer::BranchLora(l) => {
                let task = task
                    .ok_or_else(|| Error::Routing("BranchLoRA forward needs a task id".into()))?;
                let (h, g) = l.forward(tape, store, x, task, mode)?;
                Ok(LayerOutput { h, gate: Some(g) })
            }
        }
    }

    /// Adapter parameters of this layer (backbone excluded).
    pub fn adapter_params(&self) -> Vec<ParamId> {
        match self {
            AdapterLayer::Lora(l) => l.params(),
            AdapterLayer::MoeLora(l) => l.params(),
            AdapterLayer::BranchLora(l) => l.params(),
        }
    }

    /// Scalars that receive gradient in the current task: frozen branches,
    /// closed task routers and the backbone are excluded.
    pub fn count_trainable_params(&self, store: &ParamStore) -> usize {
        self.adapter_params()
            .into_iter()
            .filter(|&id| !store.is_frozen(id))
            .map(|id| store.get(id).len())
            .sum()
    }
}

/// Convenience wrapper: evaluate one layer on a matrix without keeping the tape.
pub fn forward_once(
    layer: &AdapterLayer,
    store: &ParamStore,
    x: &Matrix,
    task: Option<usize>,
    mode: RouterInput,
) -> Result<(Matrix, Option<Matrix>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = layer.forward(&mut tape, store, xv, task, mode)?;
    Ok((
        tape.value(out.h).clone(),
        out.gate.map(|g| tape.value(g).clone()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp(r: usize, n: usize, k: usize) -> AdapterHyperparams {
        AdapterHyperparams {
            r,
            alpha: 2.0 * r as f64,
            n_experts: n,
            top_k: k,
            lambda: 1.0,
            freeze_width: None,
        }
    }

    fn build(
        kind: AdapterKind,
        d_in: usize,
        d_out: usize,
        hp: &AdapterHyperparams,
        seed: u64,
    ) -> (AdapterLayer, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = Matrix::randn(d_in, d_out, 0.3, &mut rng);
        let mut layer = AdapterLayer::init(kind, "l0", w, hp, &mut store, &mut rng).unwrap();
        if let AdapterLayer::BranchLora(b) = &mut layer {
            b.register_task(&mut store);
        }
        (layer, store)
    }

    fn backbone_out(layer: &AdapterLayer, store: &ParamStore, x: &Matrix) -> Matrix {
        x.matmul(store.get(layer.backbone().weight)).unwrap()
    }

    #[test]
    fn hyperparams_validation() {
        assert!(hp(16, 4, 2).validate().is_ok());
        assert!(hp(15, 4, 2).validate().is_err());
        assert!(hp(16, 4, 5).validate().is_err());
        assert!(hp(16, 4, 0).validate().is_err());
        let mut h = hp(16, 4, 2);
        h.alpha = 0.0;
        assert!(h.validate().is_err());
        h.alpha = 1.0;
        h.lambda = -1.0;
        assert!(h.validate().is_err());
        assert_eq!(AdapterHyperparams::large_scale().per_expert_rank(), 16);
        assert_eq!(AdapterHyperparams::large_scale().scaling(), 2.0);
    }

    #[test]
    fn fresh_adapters_equal_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::randn(5, 8, 1.0, &mut rng);
        for kind in [
            AdapterKind::Lora,
            AdapterKind::MoeLora,
            AdapterKind::BranchLora,
        ] {
            let (layer, store) = build(kind, 8, 6, &hp(8, 4, 2), 1);
            for mode in [RouterInput::PerRow, RouterInput::FirstRow] {
                let (h, _) = forward_once(&layer, &store, &x, Some(0), mode).unwrap();
                assert_eq!(
                    h.bits(),
                    backbone_out(&layer, &store, &x).bits(),
                    "{kind:?}"
                );
            }
        }
    }

    #[test]
    fn same_seed_same_init() {
        for kind in [
            AdapterKind::Lora,
            AdapterKind::MoeLora,
            AdapterKind::BranchLora,
        ] {
            let (_, s1) = build(kind, 8, 6, &hp(8, 4, 2), 42);
            let (_, s2) = build(kind, 8, 6, &hp(8, 4, 2), 42);
            for ((_, p1), (_, p2)) in s1.iter().zip(s2.iter()) {
                assert_eq!(p1.value.bits(), p2.value.bits());
            }
        }
    }

    #[test]
    fn init_rejects_bad_rank() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = AdapterLayer::init(
            AdapterKind::MoeLora,
            "x",
            Matrix::zeros(4, 4),
            &hp(6, 4, 2),
            &mut store,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn lora_identity_case() {
        // A = I, B = I, alpha = r: h = x W_f + x
        let d = 3;
        let (layer, mut store) = build(
            AdapterKind::Lora,
            d,
            d,
            &AdapterHyperparams {
                r: 3,
                alpha: 3.0,
                n_experts: 1,
                top_k: 1,
                lambda: 0.0,
                freeze_width: None,
            },
            3,
        );
        let AdapterLayer::Lora(l) = &layer else {
            unreachable!()
        };
        *store.get_mut(l.a) = Matrix::identity(d);
        *store.get_mut(l.b) = Matrix::identity(d);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]);
        let (h, _) = forward_once(&layer, &store, &x, None, RouterInput::PerRow).unwrap();
        let expect = backbone_out(&layer, &store, &x).add(&x).unwrap();
        for (a, b) in h.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = Matrix::zeros(1, 4);
        assert!(matches!(
            forward_once(&layer, &store, &bad, None, RouterInput::PerRow),
            Err(Error::Dimension { .. })
        ));
    }

    fn randomize_b(layer: &AdapterLayer, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ids: Vec<ParamId> = layer.adapter_params();
        for id in ids {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = Matrix::randn(r, c, 0.5, rng);
        }
    }

    #[test]
    fn moelora_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = hp(4, 2, 2);
        let (layer, mut store) = build(AdapterKind::MoeLora, 3, 2, &h, 2);
        randomize_b(&layer, &mut store, &mut rng);
        let AdapterLayer::MoeLora(m) = &layer else {
            unreachable!()
        };
        let x = Matrix::randn(3, 3, 1.0, &mut rng);
        let (out, gate) = forward_once(&layer, &store, &x, None, RouterInput::FirstRow).unwrap();
        let gate = gate.unwrap();
        // direct evaluation, gate from row 0 only
        let scores: Vec<f64> = (0..2)
            .map(|j| {
                (0..3)
                    .map(|i| x.get(0, i) * store.get(m.router).get(i, j))
                    .sum()
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let g: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        assert_eq!(gate.shape(), (1, 2));
        for j in 0..2 {
            assert!((gate.get(0, j) - g[j]).abs() < 1e-12);
        }
        let wf = store.get(m.backbone.weight);
        for row in 0..3 {
            for col in 0..2 {
                let mut v: f64 = (0..3).map(|i| x.get(row, i) * wf.get(i, col)).sum();
                for (j, &(a, b)) in m.experts.iter().enumerate() {
                    let (a, b) = (store.get(a), store.get(b));
                    let mut e = 0.0;
                    for q in 0..2 {
                        let xa: f64 = (0..3).map(|i| x.get(row, i) * a.get(i, q)).sum();
                        e += xa * b.get(q, col);
                    }
                    v += h.scaling() * g[j] * e;
                }
                assert!((out.get(row, col) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moelora_identical_experts_ignore_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (layer, mut store) = build(AdapterKind::MoeLora, 4, 3, &hp(4, 2, 2), 2);
        let AdapterLayer::MoeLora(m) = &layer else {
            unreachable!()
        };
        let a = Matrix::randn(4, 2, 1.0, &mut rng);
        let b = Matrix::randn(2, 3, 1.0, &mut rng);
        for &(ai, bi) in &m.experts {
            *store.get_mut(ai) = a.clone();
            *store.get_mut(bi) = b.clone();
        }
        let x = Matrix::randn(1, 4, 1.0, &mut rng);
        let (h1, _) = forward_once(&layer, &store, &x, None, RouterInput::PerRow).unwrap();
        *store.get_mut(m.router) = Matrix::randn(4, 2, 3.0, &mut rng);
        let (h2, _) = forward_once(&layer, &store, &x, None, RouterInput::PerRow).unwrap();
        for (p, q) in h1.data().iter().zip(h2.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn branchlora_hand_set_scores() {
        // d_in = 4 with x = e_0 so the scores equal router row 0
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = hp(4, 4, 2);
        let (layer, mut store) = build(AdapterKind::BranchLora, 4, 2, &h, 3);
        randomize_b(&layer, &mut store, &mut rng);
        let AdapterLayer::BranchLora(bl) = &layer else {
            unreachable!()
        };
        let router = bl.router(0).unwrap();
        let mut w = Matrix::zeros(4, 4);
        for (j, s) in [0.1, 0.5, 0.2, 0.9].into_iter().enumerate() {
            w.set(0, j, s);
        }
        *store.get_mut(router) = w;
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]);
        let (out, gate) = forward_once(&layer, &store, &x, Some(0), RouterInput::PerRow).unwrap();
        let gate = gate.unwrap();
        assert_eq!(gate.get(0, 0), 0.0);
        assert_eq!(gate.get(0, 2), 0.0);
        assert!((gate.get(0, 1) - 0.401_312_339_887_548).abs() < 1e-12);
        assert!((gate.get(0, 3) - 0.598_687_660_112_452).abs() < 1e-12);
        let xa = x.matmul(store.get(bl.a_shared)).unwrap();
        let e1 = xa.matmul(store.get(bl.branches[1])).unwrap();
        let e3 = xa.matmul(store.get(bl.branches[3])).unwrap();
        let base = backbone_out(&layer, &store, &x);
        for c in 0..2 {
            let v = base.get(0, c)
                + h.scaling() * (gate.get(0, 1) * e1.get(0, c) + gate.get(0, 3) * e3.get(0, c));
            assert!((out.get(0, c) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn branchlora_full_k_is_dense_over_shared_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = hp(6, 3, 3);
        let (layer, mut store) = build(AdapterKind::BranchLora, 5, 4, &h, 4);
        randomize_b(&layer, &mut store, &mut rng);
        let AdapterLayer::BranchLora(bl) = &layer else {
            unreachable!()
        };
        let x = Matrix::randn(4, 5, 1.0, &mut rng);
        let (out, gate) = forward_once(&layer, &store, &x, Some(0), RouterInput::PerRow).unwrap();
        let dense = x
            .matmul(store.get(bl.router(0).unwrap()))
            .unwrap()
            .row_softmax()
            .unwrap();
        let gate = gate.unwrap();
        for (a, b) in gate.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let base = backbone_out(&layer, &store, &x);
        for r in 0..4 {
            let xa = x.select_rows(&[r]).matmul(store.get(bl.a_shared)).unwrap();
            for c in 0..4 {
                let mut v = 0.0;
                for j in 0..3 {
                    v += dense.get(r, j) * xa.matmul(store.get(bl.branches[j])).unwrap().get(0, c);
                }
                assert!((out.get(r, c) - base.get(r, c) - h.scaling() * v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn branchlora_routing_errors() {
        let (layer, store) = build(AdapterKind::BranchLora, 4, 2, &hp(4, 4, 2), 3);
        let x = Matrix::zeros(1, 4);
        assert!(matches!(
            forward_once(&layer, &store, &x, Some(3), RouterInput::PerRow),
            Err(Error::Routing(_))
        ));
        assert!(matches!(
            forward_once(&layer, &store, &x, None, RouterInput::PerRow),
            Err(Error::Routing(_))
        ));
    }

    #[test]
    fn shared_a_factoring_is_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = hp(8, 4, 2);
        let (layer, mut store) = build(AdapterKind::BranchLora, 6, 5, &h, 4);
        randomize_b(&layer, &mut store, &mut rng);
        let AdapterLayer::BranchLora(bl) = &layer else {
            unreachable!()
        };
        let x = Matrix::randn(7, 6, 1.0, &mut rng);
        let (out, gate) = forward_once(&layer, &store, &x, Some(0), RouterInput::PerRow).unwrap();
        let gate = gate.unwrap();
        // recompute x·A per branch, same accumulation order
        let mut acc: Option<Matrix> = None;
        for (j, &b) in bl.branches.iter().enumerate() {
            if (0..7).all(|r| gate.get(r, j) == 0.0) {
                continue;
            }
            let xa = x.matmul(store.get(bl.a_shared)).unwrap();
            let mut scaled = xa.clone();
            for r in 0..7 {
                for c in 0..xa.cols() {
                    scaled.set(r, c, xa.get(r, c) * gate.get(r, j));
                }
            }
            let e = scaled.matmul(store.get(b)).unwrap();
            acc = Some(match acc {
                Some(s) => s.add(&e).unwrap(),
                None => e,
            });
        }
        let expect = backbone_out(&layer, &store, &x)
            .add(&acc.unwrap().scale(h.scaling()))
            .unwrap();
        assert_eq!(out.bits(), expect.bits());
    }

    #[test]
    fn trainable_counts() {
        let h = hp(16, 4, 2);
        let (moe, ms) = build(AdapterKind::MoeLora, 64, 64, &h, 0);
        assert_eq!(
            moe.count_trainable_params(&ms),
            4 * (64 * 4 + 4 * 64) + 64 * 4
        );
        assert_eq!(moe.count_trainable_params(&ms), 2304);
        let (mut br, mut bs) = build(AdapterKind::BranchLora, 64, 64, &h, 0);
        assert_eq!(br.count_trainable_params(&bs), 1536);
        assert!(br.count_trainable_params(&bs) < moe.count_trainable_params(&ms));
        let AdapterLayer::BranchLora(bl) = &mut br else {
            unreachable!()
        };
        bl.apply_freeze(&mut bs, &[0, 2]).unwrap();
        bl.register_task(&mut bs);
        assert_eq!(bl.n_tasks(), 2);
        // A + 2 unfrozen branches + current router only
        assert_eq!(br.count_trainable_params(&bs), 64 * 4 + 2 * 4 * 64 + 64 * 4);
        let (lora, ls) = build(AdapterKind::Lora, 64, 64, &h, 0);
        assert_eq!(lora.count_trainable_params(&ls), 64 * 16 * 2);
    }

    #[test]
    fn refreeze_is_policy_error() {
        let (mut br, mut bs) = build(AdapterKind::BranchLora, 4, 4, &hp(4, 4, 2), 0);
        let AdapterLayer::BranchLora(bl) = &mut br else {
            unreachable!()
        };
        bl.apply_freeze(&mut bs, &[1]).unwrap();
        assert!(matches!(
            bl.apply_freeze(&mut bs, &[1]),
            Err(Error::Policy(_))
        ));
        assert!(matches!(
            bl.apply_freeze(&mut bs, &[9]),
            Err(Error::Policy(_))
        ));
        assert_eq!(bl.freeze_mask(), &[false, true, false, false]);
    }
}
