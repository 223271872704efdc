//! Parameter storage and reusable network layers.
//!
//! Models keep their weights in a [`ParamStore`]: a flat, ordered list of
//! named tensors. Each training step binds the whole store onto a fresh
//! [`Tape`] (parameter `i` becomes tape node `i + base`), runs forward,
//! and reads gradients back by index. The flat layout is also what the
//! optimizer and the checkpoint format operate on, so parameter identity
//! is a name plus a shape, never a pointer.
//!
//! Layers here ([`Linear`], [`LayerNorm`], [`Mlp`], [`Attention`]) are
//! plain structs of parameter ids; the tensors live in the store.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Epsilon used by every layer norm in the models.
pub const LN_EPS: f64 = 1e-5;

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Frozen entries (e.g. the random Fourier matrix) are bound as
    /// constants and skipped by the optimizer.
    pub trainable: bool,
    /// Whether decoupled weight decay applies. Layer-norm gains/biases
    /// and the latent query grid opt out.
    pub decay: bool,
}

/// Ordered, named collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: &str, value: Tensor, trainable: bool, decay: bool) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Replace a parameter by name; shapes must match.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::config("ParamStore::set_by_name", format!("no parameter named {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::config(
                "ParamStore::set_by_name",
                format!(
                    "{name}: checkpoint shape {:?} does not match model shape {:?}",
                    value.shape(),
                    entry.value.shape()
                ),
            ));
        }
        entry.value = value;
        Ok(())
    }

    /// Total number of scalar elements across all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// All parameters concatenated in store order (for whole-model
    /// gradient checks).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for e in &self.entries {
            out.extend_from_slice(e.value.as_slice());
        }
        out
    }

    /// Load parameters back from a flat buffer in store order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::dim(
                "ParamStore::load_flat",
                format!("expected {} values, got {}", self.numel(), flat.len()),
            ));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.numel();
            e.value = Tensor::from_vec(e.value.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            offset += n;
        }
        Ok(())
    }

    /// Bitwise equality of every entry (used by freeze contracts and
    /// determinism tests).
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bitwise_eq(&b.value))
    }

    /// Register every entry on a tape. With `trainable = true`, entries
    /// marked trainable become differentiable leaves; otherwise the whole
    /// store is bound as constants (frozen).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> StoreBinding {
        let base = tape.len();
        for e in &self.entries {
            if trainable && e.trainable {
                tape.leaf(e.value.clone());
            } else {
                tape.constant(e.value.clone());
            }
        }
        StoreBinding {
            base,
            len: self.entries.len(),
        }
    }
}

/// Maps [`ParamId`]s to tape nodes for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StoreBinding {
    base: usize,
    len: usize,
}

impl StoreBinding {
    pub fn var(&self, id: ParamId) -> Var {
        debug_assert!(id.0 < self.len);
        Var(self.base + id.0)
    }

    /// Gradient of parameter `index` (store order) from a backward pass.
    pub fn grad<'a>(
        &self,
        grads: &'a crate::tensor::Gradients,
        index: usize,
    ) -> Option<&'a [f64]> {
        debug_assert!(index < self.len);
        grads.get(Var(self.base + index))
    }
}

/// Truncated-normal tensor (mean 0, clipped at two standard deviations).
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.next_trunc_gaussian(0.0, std)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("trunc_normal: shape/data agree")
}

/// Test-only: overwrite every all-zero trainable entry with small random
/// values, as if the model had taken a few optimizer steps. The velocity
/// network's gate projections start at zero, which keeps its residual
/// branches inactive; tests that exercise those paths call this first.
#[cfg(test)]
pub(crate) fn randomize_zeroed_store(store: &mut ParamStore, seed: u64) {
    let mut rng = Rng::from_seed(seed);
    let names: Vec<(String, Vec<usize>)> = store
        .entries()
        .iter()
        .filter(|e| e.trainable && e.value.as_slice().iter().all(|&v| v == 0.0))
        .map(|e| (e.name.clone(), e.value.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        store
            .set_by_name(&name, trunc_normal(&shape, 0.1, &mut rng))
            .expect("randomize_zeroed_store: name from this store");
    }
}

// ── Layers ──────────────────────────────────────────────────────────────

/// Affine map `x W + b` with `W: [fan_in, fan_out]`, `b: [fan_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Fan-in-scaled truncated-normal init (std `1/sqrt(fan_in)`), which
    /// keeps activations and attention logits at unit scale even for the
    /// narrow widths the small presets use.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = store.push(
            &format!("{name}.w"),
            trunc_normal(&[fan_in, fan_out], std, rng),
            true,
            true,
        );
        let b = store.push(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true, false);
        Linear { w, b }
    }

    /// Zero-initialized variant for the velocity network's modulation
    /// projections, whose gates must start closed.
    pub fn new_zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.push(
            &format!("{name}.w"),
            Tensor::zeros(&[fan_in, fan_out]),
            true,
            true,
        );
        let b = store.push(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true, false);
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &StoreBinding, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bind.var(self.w))?;
        tape.add_row(h, bind.var(self.b))
    }
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.push(
            &format!("{name}.gamma"),
            Tensor::from_vec(vec![dim], vec![1.0; dim]).expect("ones"),
            true,
            false,
        );
        let beta = store.push(&format!("{name}.beta"), Tensor::zeros(&[dim]), true, false);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &StoreBinding, x: Var) -> Result<Var> {
        tape.layer_norm_rows(x, bind.var(self.gamma), bind.var(self.beta), LN_EPS)
    }
}

/// Two-layer feedforward block: `fc2(gelu(fc1 x))`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    /// `zero_out` zero-initializes `fc2` (residual-branch convention).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), dim_in, hidden, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, dim_out, rng);
        Mlp { fc1, fc2 }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &StoreBinding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, bind, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, bind, h)
    }
}

/// Multi-head scaled dot-product attention. Queries may come from a
/// different set than keys/values (cross attention); self attention just
/// passes the same input for both.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(
                "Attention::new",
                format!("embed dim {dim} must be divisible by heads {heads}"),
            ));
        }
        Ok(Attention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            head_dim: dim / heads,
        })
    }

    /// `q_in: [n_q, D]`, `kv_in: [n_kv, D]` -> `[n_q, D]`.
    pub fn forward(&self, tape: &mut Tape, bind: &StoreBinding, q_in: Var, kv_in: Var) -> Result<Var> {
        let q = self.wq.forward(tape, bind, q_in)?;
        let k = self.wk.forward(tape, bind, kv_in)?;
        let v = self.wv.forward(tape, bind, kv_in)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = tape.slice_cols(q, start, self.head_dim)?;
            let kh = tape.slice_cols(k, start, self.head_dim)?;
            let vh = tape.slice_cols(v, start, self.head_dim)?;
            let kht = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kht)?;
            let scores = tape.affine(scores, scale, 0.0)?;
            let attn = tape.softmax_rows(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        self.wo.forward(tape, bind, merged)
    }
}
