//! Parameter storage and transformer building blocks.

use std::collections::HashMap;

use memstream_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};

/// Standard deviation for projection weights.
pub const PROJ_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in registration order.
///
/// Every tensor is initialized from a stream seeded by `(seed, name)`, so a
/// parameter's initial value does not depend on what else is registered.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// FNV-1a; stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn init_tensor(shape: &[usize], init: &Init, rng: &mut impl Rng) -> Tensor {
    match *init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::ones(shape.to_vec()),
        Init::TruncNormal(std) => Tensor::from_fn(shape.to_vec(), |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        }),
        Init::Uniform(bound) => Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound)),
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(name));
        let value = init_tensor(shape, &init, &mut rng);
        self.insert(name, value, true)
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Places every parameter on `graph`: trainable ones as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Binding<'g> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    graph.leaf(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        Binding { graph, vars }
    }

    /// Places every parameter on `graph` as a constant.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Binding<'g> {
        let vars = self.params.iter().map(|p| graph.constant(p.value.clone())).collect();
        Binding { graph, vars }
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let v = other.get(id);
                if v.shape() != p.value.shape() {
                    return contract(format!(
                        "parameter {} has shape {:?}, checkpoint has {:?}",
                        p.name,
                        p.value.shape(),
                        v.shape()
                    ));
                }
                p.value = v.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Parameters of a [`ParamStore`] placed on one graph.
pub struct Binding<'g> {
    graph: &'g Graph,
    vars: Vec<Var<'g>>,
}

impl<'g> Binding<'g> {
    /// Wraps externally created vars, one per store parameter in order.
    pub fn from_vars(graph: &'g Graph, vars: Vec<Var<'g>>) -> Self {
        Self { graph, vars }
    }

    pub fn set_var(&mut self, id: ParamId, v: Var<'g>) {
        self.vars[id.0] = v;
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Gradients after a backward pass, aligned with the store.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| self.graph.grad(*v)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_init(store, name, in_dim, out_dim, bias, Init::TruncNormal(PROJ_STD))
    }

    /// Weight and bias both start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_init(store, name, in_dim, out_dim, true, Init::Zeros)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), &[in_dim, out_dim], init);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[out_dim], Init::Zeros));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn forward<'g>(&self, b: &Binding<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return contract(format!("linear expects last dim {}, got {:?}", self.in_dim, shape));
        }
        let flat = if shape.len() == 2 {
            *x
        } else {
            x.reshape(&[shape.iter().product::<usize>() / self.in_dim, self.in_dim])?
        };
        let mut y = flat.matmul(&b.var(self.weight))?;
        if let Some(bias) = self.bias {
            y = y.add(&b.var(bias))?;
        }
        if shape.len() != 2 {
            let mut out = shape.clone();
            *out.last_mut().unwrap() = self.out_dim;
            y = y.reshape(&out)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), &[dim], Init::Ones),
            beta: store.add(&format!("{name}.beta"), &[dim], Init::Zeros),
            dim,
        }
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        Ok(x.layer_norm(&b.var(self.gamma), &b.var(self.beta), LN_EPS)?)
    }

    /// Normalization with externally supplied scale and shift.
    pub fn forward_modulated<'g>(&self, x: &Var<'g>, gamma: &Var<'g>, beta: &Var<'g>) -> Result<Var<'g>> {
        Ok(x.layer_norm(gamma, beta, LN_EPS)?)
    }
}

/// Transformer feed-forward: `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden_mult: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * hidden_mult, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * hidden_mult, dim, true),
        }
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.fc1.forward(b, x)?.gelu()?;
        self.fc2.forward(b, &h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub num_heads: usize,
    /// Frame-causal masking over the non-prepended keys.
    pub causal: bool,
    /// Number of leading key/value positions visible to every query.
    pub n_prepended: usize,
    /// Tokens per frame, used to group positions for the causal mask.
    pub tokens_per_frame: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return contract(format!("dim {} not divisible by {} heads", self.dim, self.num_heads));
        }
        if self.causal && self.tokens_per_frame == 0 {
            return contract("causal attention needs tokens_per_frame > 0");
        }
        Ok(())
    }

    pub fn with_prepended(mut self, n: usize) -> Self {
        self.n_prepended = n;
        self
    }

    /// Additive mask `[nq, nk]`: 0 where visible, a large negative value
    /// where hidden. `None` when everything is visible.
    pub fn mask(&self, nq: usize, nk: usize) -> Result<Option<Tensor>> {
        if !self.causal {
            return Ok(None);
        }
        if nk < self.n_prepended || nq != nk - self.n_prepended {
            return contract(format!(
                "causal attention needs aligned lengths: {nq} queries vs {nk} keys with {} prepended",
                self.n_prepended
            ));
        }
        let tpf = self.tokens_per_frame;
        let np = self.n_prepended;
        Ok(Some(Tensor::from_fn(vec![nq, nk], |i| {
            let (q, k) = (i / nk, i % nk);
            if k < np || (k - np) / tpf <= q / tpf {
                0.0
            } else {
                MASKED
            }
        })))
    }
}

const MASKED: f64 = -1e30;

/// Low-rank query/key modulation `ΔW = A·B` for both projections.
pub struct QkDelta<'g> {
    pub a_q: Var<'g>,
    pub b_q: Var<'g>,
    pub a_k: Var<'g>,
    pub b_k: Var<'g>,
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub dim: usize,
    pub num_heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, num_heads: usize) -> Self {
        Self::build(store, name, dim, kv_dim, num_heads, false)
    }

    /// Output projection starts at zero, so the block initially adds nothing.
    pub fn zero_output(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, num_heads: usize) -> Self {
        Self::build(store, name, dim, kv_dim, num_heads, true)
    }

    fn build(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, num_heads: usize, zero_out: bool) -> Self {
        let o = if zero_out {
            Linear::zeros(store, &format!("{name}.o"), dim, dim)
        } else {
            Linear::new(store, &format!("{name}.o"), dim, dim, true)
        };
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true),
            o,
            dim,
            num_heads,
        }
    }

    pub fn forward<'g>(
        &self,
        b: &Binding<'g>,
        q_src: &Var<'g>,
        kv_src: &Var<'g>,
        cfg: &AttentionConfig,
        qk_delta: Option<&QkDelta<'g>>,
    ) -> Result<Var<'g>> {
        Ok(self.forward_with_weights(b, q_src, kv_src, cfg, qk_delta)?.0)
    }

    /// Also returns the attention weights `[heads, nq, nk]`.
    pub fn forward_with_weights<'g>(
        &self,
        b: &Binding<'g>,
        q_src: &Var<'g>,
        kv_src: &Var<'g>,
        cfg: &AttentionConfig,
        qk_delta: Option<&QkDelta<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        cfg.validate()?;
        let (qs, ks) = (q_src.shape(), kv_src.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.dim || cfg.dim != self.dim || cfg.num_heads != self.num_heads {
            return contract(format!("attention got q {qs:?}, kv {ks:?} for dim {}", self.dim));
        }
        let (nq, nk) = (qs[0], ks[0]);
        let mask = cfg.mask(nq, nk)?;
        let (h, dh) = (self.num_heads, self.dim / self.num_heads);

        let mut q = self.q.forward(b, q_src)?;
        let mut k = self.k.forward(b, kv_src)?;
        if let Some(delta) = qk_delta {
            q = q.add(&q_src.matmul(&delta.a_q)?.matmul(&delta.b_q)?)?;
            k = k.add(&kv_src.matmul(&delta.a_k)?.matmul(&delta.b_k)?)?;
        }
        let v = self.v.forward(b, kv_src)?;

        let q = q.scale(1.0 / (dh as f64).sqrt())?.reshape(&[nq, h, dh])?.permute(&[1, 0, 2])?;
        let kt = k.reshape(&[nk, h, dh])?.permute(&[1, 2, 0])?;
        let v = v.reshape(&[nk, h, dh])?.permute(&[1, 0, 2])?;
        let mut scores = q.matmul(&kt)?;
        if let Some(m) = mask {
            scores = scores.add(&b.graph().constant(m))?;
        }
        let weights = scores.softmax(2)?;
        let ctx = weights.matmul(&v)?.permute(&[1, 0, 2])?.reshape(&[nq, self.dim])?;
        Ok((self.o.forward(b, &ctx)?, weights))
    }
}
