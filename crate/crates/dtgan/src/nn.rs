//! Parameterized layers, pooling reductions, initialization, and the
//! parameter registry.
//!
//! All parameters live in a [`ParamStore`] keyed by dotted path
//! (`"gen.layer3.cam.w_kc"`). Layer structs are lightweight descriptors that
//! register their parameters once and fetch them by path at forward time, so
//! the store stays the single source of truth across optimizer updates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    ScaledUniform,
    Zeros,
    Ones,
}

/// Parameter initialization. Scaled-uniform draws from U(−b, b) with
/// b = sqrt(6 / fan_in), where fan_in is the product of all non-leading
/// dimensions (rank ≥ 2) or the length itself (vectors).
pub fn init_param(shape: &[usize], scheme: InitScheme, rng: &mut Rng) -> Result<Tensor> {
    if shape.is_empty() {
        return Err(Error::invalid("init_param: empty shape"));
    }
    match scheme {
        InitScheme::Zeros => Ok(Tensor::zeros(shape)),
        InitScheme::Ones => Ok(Tensor::ones(shape)),
        InitScheme::ScaledUniform => {
            let fan_in: usize = if shape.len() >= 2 {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let b = (6.0 / fan_in as f64).sqrt();
            Ok(Tensor::from_fn(shape, |_| rng.next_uniform(-b, b)))
        }
    }
}

struct Param {
    tensor: Tensor,
    trainable: bool,
}

/// Named map from parameter path to tensor, with deterministic (sorted)
/// iteration order.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter exactly once; re-registration is an error.
    pub fn register(&mut self, path: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(path) {
            return Err(Error::invalid(format!("parameter '{path}' registered twice")));
        }
        tensor.validate_finite(&format!("param {path}"))?;
        let tensor = tensor.requires_grad(trainable);
        self.params.insert(path.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<Tensor> {
        self.params
            .get(path)
            .map(|p| p.tensor.clone())
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{path}'")))
    }

    /// Replace the value of an existing parameter (optimizer step).
    pub fn set(&mut self, path: &str, tensor: Tensor) -> Result<()> {
        let param = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{path}'")))?;
        if param.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                detail: format!("'{path}': {:?} -> {:?}", param.tensor.shape(), tensor.shape()),
            });
        }
        param.tensor = tensor.requires_grad(param.trainable);
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    /// All (path, tensor) pairs in sorted path order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.tensor))
    }

    /// Trainable subset, sorted, optionally restricted to a path prefix.
    pub fn trainable_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|(k, p)| p.trainable && prefixes.iter().any(|pre| k.starts_with(pre)))
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elems(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn paths(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Attach every parameter to a tape so any forward pass records, even
    /// subgraphs fed only by constants. Call [`Self::detach_all`] before
    /// switching tapes.
    pub fn attach_all(&mut self, tape: &crate::tensor::Tape) {
        for p in self.params.values_mut() {
            p.tensor = tape.watch(&p.tensor);
        }
    }

    pub fn detach_all(&mut self) {
        for p in self.params.values_mut() {
            p.tensor = p.tensor.detach().requires_grad(p.trainable);
        }
    }
}

// ── Layers ──────────────────────────────────────────────────────────

/// Fully-connected layer; weight stored [out, in].
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear { prefix: prefix.into(), in_dim, out_dim, bias }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.register(
            &format!("{}.w", self.prefix),
            init_param(&[self.out_dim, self.in_dim], InitScheme::ScaledUniform, rng)?,
            true,
        )?;
        if self.bias {
            store.register(
                &format!("{}.b", self.prefix),
                init_param(&[self.out_dim], InitScheme::Zeros, rng)?,
                true,
            )?;
        }
        Ok(())
    }

    /// x: [N, in] -> [N, out]
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = store.get(&format!("{}.w", self.prefix))?;
        let y = x.matmul(&w.transpose()?)?;
        if self.bias {
            y.add(&store.get(&format!("{}.b", self.prefix))?)
        } else {
            Ok(y)
        }
    }
}

/// 2-D convolution layer over NCHW maps.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2dLayer {
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize, ksize: usize, stride: usize, pad: usize) -> Self {
        Conv2dLayer { prefix: prefix.into(), in_ch, out_ch, ksize, stride, pad, bias: true }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.register(
            &format!("{}.w", self.prefix),
            init_param(&[self.out_ch, self.in_ch, self.ksize, self.ksize], InitScheme::ScaledUniform, rng)?,
            true,
        )?;
        if self.bias {
            store.register(
                &format!("{}.b", self.prefix),
                init_param(&[self.out_ch], InitScheme::Zeros, rng)?,
                true,
            )?;
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = store.get(&format!("{}.w", self.prefix))?;
        let y = x.conv2d(&w, self.stride, self.pad)?;
        if self.bias {
            let b = store.get(&format!("{}.b", self.prefix))?;
            y.add(&b.reshape(&[self.out_ch, 1, 1])?)
        } else {
            Ok(y)
        }
    }
}

/// 1×1 convolution: a pointwise out×in projection applied at every spatial
/// site. No bias (pure projection).
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl PointwiseConv {
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        PointwiseConv { prefix: prefix.into(), in_ch, out_ch }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.register(
            &format!("{}.w", self.prefix),
            init_param(&[self.out_ch, self.in_ch, 1, 1], InitScheme::ScaledUniform, rng)?,
            true,
        )
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = store.get(&format!("{}.w", self.prefix))?;
        x.conv2d(&w, 1, 0)
    }
}

// ── Pooling ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Per-channel pooling over all spatial sites: [N,C,H,W] -> [N,C,1,1].
/// Max routes its subgradient to the first attaining element in row-major
/// order.
pub fn global_pool_channels(h: &Tensor, mode: PoolMode) -> Result<Tensor> {
    if h.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "global_pool_channels",
            detail: format!("expected NCHW, got {:?}", h.shape()),
        });
    }
    match mode {
        PoolMode::Avg => h.mean_axes(&[2, 3], true),
        PoolMode::Max => h.max_axes(&[2, 3], true),
    }
}

/// Per-pixel pooling across channels: [N,C,H,W] -> [N,1,H,W].
pub fn spatial_pool(h: &Tensor, mode: PoolMode) -> Result<Tensor> {
    if h.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "spatial_pool",
            detail: format!("expected NCHW, got {:?}", h.shape()),
        });
    }
    match mode {
        PoolMode::Avg => h.mean_axes(&[1], true),
        PoolMode::Max => h.max_axes(&[1], true),
    }
}

// ── Recurrent cells ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    /// Minimal gated cell: one update gate, one tanh candidate.
    Gated,
    /// Full LSTM cell; state carries [hidden; cell] side by side.
    Lstm,
}

#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub prefix: String,
    pub kind: CellKind,
    pub in_dim: usize,
    pub hidden: usize,
}

impl RecurrentCell {
    pub fn new(prefix: impl Into<String>, kind: CellKind, in_dim: usize, hidden: usize) -> Self {
        RecurrentCell { prefix: prefix.into(), kind, in_dim, hidden }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            CellKind::Gated => self.hidden,
            CellKind::Lstm => 2 * self.hidden,
        }
    }

    pub fn init_state(&self, batch: usize) -> Tensor {
        Tensor::zeros(&[batch, self.state_dim()])
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let gates = match self.kind {
            CellKind::Gated => 2,
            CellKind::Lstm => 4,
        };
        let rows = gates * self.hidden;
        store.register(
            &format!("{}.w_x", self.prefix),
            init_param(&[rows, self.in_dim], InitScheme::ScaledUniform, rng)?,
            true,
        )?;
        store.register(
            &format!("{}.w_h", self.prefix),
            init_param(&[rows, self.hidden], InitScheme::ScaledUniform, rng)?,
            true,
        )?;
        store.register(
            &format!("{}.b", self.prefix),
            init_param(&[rows], InitScheme::Zeros, rng)?,
            true,
        )
    }

    /// Hidden part of a state tensor; always bounded in (−1, 1).
    pub fn hidden_of(&self, state: &Tensor) -> Result<Tensor> {
        state.slice(1, 0, self.hidden)
    }

    /// One recurrence step: [N, state_dim] × [N, in] -> [N, state_dim].
    pub fn step(&self, store: &ParamStore, state: &Tensor, x: &Tensor) -> Result<Tensor> {
        if state.rank() != 2 || x.rank() != 2 || state.shape()[1] != self.state_dim() || x.shape()[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "recurrent_cell_step",
                detail: format!(
                    "state {:?} (want [N,{}]) input {:?} (want [N,{}])",
                    state.shape(),
                    self.state_dim(),
                    x.shape(),
                    self.in_dim
                ),
            });
        }
        let w_x = store.get(&format!("{}.w_x", self.prefix))?;
        let w_h = store.get(&format!("{}.w_h", self.prefix))?;
        let b = store.get(&format!("{}.b", self.prefix))?;
        let h = self.hidden_of(state)?;
        let z = x.matmul(&w_x.transpose()?)?.add(&h.matmul(&w_h.transpose()?)?)?.add(&b)?;
        let hd = self.hidden;
        match self.kind {
            CellKind::Gated => {
                let u = z.slice(1, 0, hd)?.sigmoid()?;
                let c = z.slice(1, hd, hd)?.tanh()?;
                // h' = (1-u)*h + u*c
                let keep = u.neg()?.add_scalar(1.0)?;
                keep.mul(&h)?.add(&u.mul(&c)?)
            }
            CellKind::Lstm => {
                let cell = state.slice(1, hd, hd)?;
                let i = z.slice(1, 0, hd)?.sigmoid()?;
                let f = z.slice(1, hd, hd)?.sigmoid()?;
                let g = z.slice(1, 2 * hd, hd)?.tanh()?;
                let o = z.slice(1, 3 * hd, hd)?.sigmoid()?;
                let cell_next = f.mul(&cell)?.add(&i.mul(&g)?)?;
                let h_next = o.mul(&cell_next.tanh()?)?;
                Tensor::concat(&[&h_next, &cell_next], 1)
            }
        }
    }
}
