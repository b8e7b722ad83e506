//! Memory encoders: a FIFO frame cache, a diagonal selective state-space
//! recurrence, and a test-time trained neural memory.
//!
//! Each encoder turns the latent frames it has consumed into a
//! [`MemoryReadout`] of tokens for an injector. Encoder state is a plain
//! value (no graph references); readouts live on the caller's graph.

use std::collections::VecDeque;

use memstream_tensor::{Graph, Tensor, Var};

use crate::codec::LatentFrame;
use crate::error::{contract, Result};
use crate::nn::{Binding, Init, ParamId, ParamStore};

const L2_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    None,
    Cache,
    Ssm,
    Titans,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Cache, EncoderKind::Ssm, EncoderKind::Titans];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::None => "none",
            EncoderKind::Cache => "cache",
            EncoderKind::Ssm => "ssm",
            EncoderKind::Titans => "titans",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [EncoderKind::None, EncoderKind::Cache, EncoderKind::Ssm, EncoderKind::Titans]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// How cached frames are turned into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CachePool {
    /// Every latent patch is a token.
    Tokens,
    /// One mean-pooled token per frame.
    Mean,
    /// Non-overlapping `g × g` patch groups concatenated into one token.
    Group(usize),
}

impl CachePool {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tokens" => Some(Self::Tokens),
            "mean" => Some(Self::Mean),
            _ => s.strip_prefix("group").and_then(|g| g.parse().ok()).filter(|&g| g > 0).map(Self::Group),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Tokens => "tokens".into(),
            Self::Mean => "mean".into(),
            Self::Group(g) => format!("group{g}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TitansHyper {
    /// Surprise momentum.
    pub eta: f64,
    /// Step size on the associative-loss gradient.
    pub theta: f64,
    /// Forget gate.
    pub alpha: f64,
}

impl Default for TitansHyper {
    fn default() -> Self {
        Self {
            eta: 0.9,
            theta: 0.05,
            alpha: 0.01,
        }
    }
}

impl TitansHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) || !(0.0..=1.0).contains(&self.alpha) || self.theta.is_nan() || self.theta < 0.0 {
            return contract(format!("invalid neural-memory hyperparameters {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryConfig {
    pub kind: EncoderKind,
    pub d_lat: usize,
    /// Side of the latent token grid.
    pub grid: usize,
    pub cache_capacity: usize,
    pub cache_pool: CachePool,
    /// Readout tokens kept by the recurrent encoders.
    pub readout: usize,
    /// State/readout width of the recurrent encoders.
    pub d_mem: usize,
    /// Hidden width of the neural memory MLP.
    pub titans_hidden: usize,
    pub titans: TitansHyper,
}

impl MemoryConfig {
    /// Width of each readout token.
    pub fn width(&self) -> usize {
        match self.kind {
            EncoderKind::None => 0,
            EncoderKind::Cache => match self.cache_pool {
                CachePool::Tokens | CachePool::Mean => self.d_lat,
                CachePool::Group(g) => g * g * self.d_lat,
            },
            EncoderKind::Ssm | EncoderKind::Titans => self.d_mem,
        }
    }

    /// Readout tokens contributed by each remembered frame.
    pub fn tokens_per_frame(&self) -> usize {
        match (self.kind, self.cache_pool) {
            (EncoderKind::Cache, CachePool::Tokens) => self.grid * self.grid,
            (EncoderKind::Cache, CachePool::Group(g)) => (self.grid / g).pow(2),
            _ => 1,
        }
    }

    /// Upper bound on remembered frames in a readout.
    pub fn max_frames(&self) -> usize {
        match self.kind {
            EncoderKind::None => 0,
            EncoderKind::Cache => self.cache_capacity,
            EncoderKind::Ssm | EncoderKind::Titans => self.readout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let (EncoderKind::Cache, CachePool::Group(g)) = (self.kind, self.cache_pool) {
            if g == 0 || !self.grid.is_multiple_of(g) {
                return contract(format!("cache group {g} does not tile a {0}×{0} grid", self.grid));
            }
        }
        if self.kind == EncoderKind::Cache && self.cache_capacity == 0 {
            return contract("cache capacity must be positive");
        }
        if matches!(self.kind, EncoderKind::Ssm | EncoderKind::Titans) && (self.readout == 0 || self.d_mem == 0) {
            return contract("recurrent memory needs positive readout and width");
        }
        self.titans.validate()
    }
}

/// Groups `[grid², d]` row-major patch tokens into `[(grid/g)², g²·d]`.
pub fn group_tokens(tokens: &Tensor, grid: usize, g: usize) -> Tensor {
    let d = tokens.shape()[1];
    let n = grid / g;
    let mut out = Vec::with_capacity(tokens.numel());
    for bi in 0..n {
        for bj in 0..n {
            for a in 0..g {
                for b in 0..g {
                    let p = (bi * g + a) * grid + bj * g + b;
                    out.extend_from_slice(&tokens.data()[p * d..(p + 1) * d]);
                }
            }
        }
    }
    Tensor::new(vec![n * n, g * g * d], out).expect("grouping preserves size")
}

/// Inverse of [`group_tokens`].
pub fn ungroup_tokens(grouped: &Tensor, grid: usize, g: usize) -> Tensor {
    let d = grouped.shape()[1] / (g * g);
    let n = grid / g;
    let mut out = vec![0.0; grid * grid * d];
    let mut src = grouped.data().chunks(d);
    for bi in 0..n {
        for bj in 0..n {
            for a in 0..g {
                for b in 0..g {
                    let p = (bi * g + a) * grid + bj * g + b;
                    out[p * d..(p + 1) * d].copy_from_slice(src.next().unwrap());
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, d], out).expect("ungrouping preserves size")
}

fn mean_pool(tokens: &Tensor) -> Tensor {
    let (p, d) = (tokens.shape()[0], tokens.shape()[1]);
    let mut out = vec![0.0; d];
    for row in tokens.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_fn(vec![1, d], |i| out[i] / p as f64)
}

/// Memory tokens `[M, width]` handed to an injector.
pub struct MemoryReadout<'g> {
    pub tokens: Option<Var<'g>>,
    pub kind: EncoderKind,
    /// Set when no gradient can reach encoder state through the tokens.
    pub grad_barrier: bool,
    pub tokens_per_frame: usize,
}

impl<'g> MemoryReadout<'g> {
    pub fn empty(kind: EncoderKind) -> Self {
        Self {
            tokens: None,
            kind,
            grad_barrier: true,
            tokens_per_frame: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.len() / self.tokens_per_frame.max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheState {
    pub capacity: usize,
    pub slots: VecDeque<(usize, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    pub hidden: Tensor,
    /// Most recent readout vectors, oldest first.
    pub recent: VecDeque<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TitansState {
    pub w1: Tensor,
    pub w2: Tensor,
    pub s1: Tensor,
    pub s2: Tensor,
    pub hyper: TitansHyper,
    pub recent: VecDeque<Tensor>,
    /// Writes skipped by the stability guard.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MemoryKindState {
    None,
    Cache(CacheState),
    Ssm(SsmState),
    Titans(TitansState),
}

/// Encoder state plus the time of the newest consumed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub inner: MemoryKindState,
    pub last_time: Option<usize>,
}

impl MemoryState {
    pub fn kind(&self) -> EncoderKind {
        match self.inner {
            MemoryKindState::None => EncoderKind::None,
            MemoryKindState::Cache(_) => EncoderKind::Cache,
            MemoryKindState::Ssm(_) => EncoderKind::Ssm,
            MemoryKindState::Titans(_) => EncoderKind::Titans,
        }
    }

    /// Time stamp for the next consumed frame.
    pub fn next_time(&self) -> usize {
        self.last_time.map_or(0, |t| t + 1)
    }
}

pub fn cache_write(st: &mut CacheState, z: &LatentFrame) -> Result<()> {
    if let Some(&(newest, _)) = st.slots.back() {
        if z.source_time <= newest {
            return contract(format!("cache write at time {} after time {newest}", z.source_time));
        }
    }
    if st.slots.len() == st.capacity {
        st.slots.pop_front();
    }
    st.slots.push_back((z.source_time, z.tokens.clone()));
    Ok(())
}

/// Cached frames as constant tokens, oldest first. The context argument is
/// accepted for interface symmetry and ignored.
pub fn cache_read<'g>(
    st: &CacheState,
    graph: &'g Graph,
    pool: CachePool,
    grid: usize,
    _z_ctx: Option<&[LatentFrame]>,
) -> Result<MemoryReadout<'g>> {
    if st.slots.is_empty() {
        return Ok(MemoryReadout::empty(EncoderKind::Cache));
    }
    let frames: Vec<Tensor> = st
        .slots
        .iter()
        .map(|(_, t)| match pool {
            CachePool::Tokens => t.clone(),
            CachePool::Mean => mean_pool(t),
            CachePool::Group(g) => group_tokens(t, grid, g),
        })
        .collect();
    let per = frames[0].shape()[0];
    let width = frames[0].shape()[1];
    let data: Vec<f64> = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    let tokens = Tensor::new(vec![frames.len() * per, width], data)?;
    Ok(MemoryReadout {
        tokens: Some(graph.constant(tokens)),
        kind: EncoderKind::Cache,
        grad_barrier: true,
        tokens_per_frame: per,
    })
}

/// Parameters of the selective state-space encoder.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub w_in: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub a_log: ParamId,
    pub w_gate: ParamId,
    pub w_out: ParamId,
    pub d_mem: usize,
}

impl SsmParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_mem: usize) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let a_log = store.add(&format!("{name}.a_log"), &[d_mem], Init::Zeros);
        // Decay rates spread over [1, 16].
        *store.get_mut(a_log) = Tensor::from_fn(vec![d_mem], |i| {
            (1.0 + 15.0 * i as f64 / (d_mem.max(2) - 1) as f64).ln()
        });
        let b_delta = store.add(&format!("{name}.b_delta"), &[d_mem], Init::Zeros);
        // softplus(b) = 0.1 at init.
        *store.get_mut(b_delta) = Tensor::full(vec![d_mem], (0.1f64.exp() - 1.0).ln());
        Self {
            w_in: store.add(&format!("{name}.w_in"), &[d_in, d_mem], Init::TruncNormal(std)),
            w_delta: store.add(&format!("{name}.w_delta"), &[d_in, d_mem], Init::TruncNormal(0.02)),
            b_delta,
            w_b: store.add(&format!("{name}.w_b"), &[d_in, d_mem], Init::TruncNormal(std)),
            a_log,
            w_gate: store.add(&format!("{name}.w_gate"), &[d_in, d_mem], Init::TruncNormal(std)),
            w_out: store.add(&format!("{name}.w_out"), &[d_mem, d_mem], Init::TruncNormal(1.0 / (d_mem as f64).sqrt())),
            d_mem,
        }
    }
}

/// One step of the diagonal selective recurrence on a pooled frame
/// `z: [1, d_in]` with hidden `h: [1, d_mem]`. Returns `(h', readout)`.
pub fn ssm_step<'g>(p: &SsmParams, b: &Binding<'g>, h: &Var<'g>, z: &Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let delta = z.matmul(&b.var(p.w_delta))?.add(&b.var(p.b_delta))?.softplus()?;
    let rate = b.var(p.a_log).exp()?;
    let a = delta.mul(&rate)?.neg()?.exp()?;
    let bz = delta.mul(&z.matmul(&b.var(p.w_b))?)?;
    let zbar = z.matmul(&b.var(p.w_in))?;
    let h_next = a.mul(h)?.add(&bz.mul(&zbar)?)?;
    let gate = z.matmul(&b.var(p.w_gate))?.silu()?;
    let y = h_next.mul(&gate)?.matmul(&b.var(p.w_out))?;
    Ok((h_next, y))
}

/// Parameters of the neural memory: query projection (trained through
/// reads), key/value projections, and the initial memory MLP weights.
#[derive(Clone, Debug)]
pub struct TitansParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w1_init: ParamId,
    pub d_mem: usize,
    pub hidden: usize,
}

impl TitansParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_mem: usize, hidden: usize) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let p = Self {
            w_q: store.add(&format!("{name}.w_q"), &[d_in, d_mem], Init::TruncNormal(std)),
            w_k: store.add(&format!("{name}.w_k"), &[d_in, d_mem], Init::TruncNormal(std)),
            w_v: store.add(&format!("{name}.w_v"), &[d_in, d_mem], Init::TruncNormal(std)),
            w1_init: store.add(&format!("{name}.w1_init"), &[d_mem, hidden], Init::TruncNormal(1.0 / (d_mem as f64).sqrt())),
            d_mem,
            hidden,
        };
        // Writes are detached from the training loss, so these never
        // receive gradients.
        for id in [p.w_k, p.w_v, p.w1_init] {
            store.set_trainable(id, false);
        }
        p
    }
}

fn memory_mlp<'g>(x: &Var<'g>, w1: &Var<'g>, w2: &Var<'g>) -> Result<Var<'g>> {
    Ok(x.matmul(w1)?.gelu()?.matmul(w2)?)
}

/// Associative loss `‖M_W(k) − v‖²` and its gradients with respect to the
/// memory weights.
pub fn titans_loss_grad(w1: &Tensor, w2: &Tensor, k: &Tensor, v: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let g = Graph::new();
    let (w1v, w2v) = (g.leaf(w1.clone()), g.leaf(w2.clone()));
    let out = memory_mlp(&g.constant(k.clone()), &w1v, &w2v)?;
    let loss = out.sub(&g.constant(v.clone()))?.square()?.sum_all()?;
    let lv = loss.value().to_scalar()?;
    g.backward(loss)?;
    Ok((lv, w1v.grad().unwrap(), w2v.grad().unwrap()))
}

/// Global norm cap on the associative-loss gradient of one write. Without
/// it the memory MLP diverges within a few dozen writes of unit keys and
/// O(1) values at the default step size.
pub const TITANS_GRAD_CLIP: f64 = 1.0;

/// Momentum-surprise update of the memory weights with a forget gate. The
/// gradient is clipped to [`TITANS_GRAD_CLIP`]. A non-finite update resets
/// the momentum and leaves the weights alone.
pub fn titans_write(st: &mut TitansState, k: &Tensor, v: &Tensor) -> Result<()> {
    if !k.all_finite() || !v.all_finite() {
        return contract("neural memory write with non-finite key or value");
    }
    let TitansHyper { eta, theta, alpha } = st.hyper;
    let update = titans_loss_grad(&st.w1, &st.w2, k, v).ok().and_then(|(_, g1, g2)| {
        let norm = g1.data().iter().chain(g2.data()).map(|x| x * x).sum::<f64>().sqrt();
        let clip = if norm > TITANS_GRAD_CLIP { TITANS_GRAD_CLIP / norm } else { 1.0 };
        let step = |s: &Tensor, w: &Tensor, g: &Tensor| {
            let s_new = Tensor::from_fn(s.shape().to_vec(), |i| eta * s.data()[i] - theta * clip * g.data()[i]);
            let w_new = Tensor::from_fn(w.shape().to_vec(), |i| (1.0 - alpha) * w.data()[i] + s_new.data()[i]);
            (s_new, w_new)
        };
        let (s1, w1) = step(&st.s1, &st.w1, &g1);
        let (s2, w2) = step(&st.s2, &st.w2, &g2);
        [&s1, &w1, &s2, &w2].iter().all(|t| t.all_finite()).then_some((s1, w1, s2, w2))
    });
    match update {
        Some((s1, w1, s2, w2)) => {
            st.s1 = s1;
            st.w1 = w1;
            st.s2 = s2;
            st.w2 = w2;
        }
        None => {
            log::warn!("neural memory update was not finite; momentum reset and write skipped");
            st.s1 = Tensor::zeros(st.s1.shape().to_vec());
            st.s2 = Tensor::zeros(st.s2.shape().to_vec());
            st.skipped += 1;
        }
    }
    Ok(())
}

/// `M_W(q)` with the memory weights held constant.
pub fn titans_read<'g>(st: &TitansState, q: &Var<'g>) -> Result<Var<'g>> {
    let g = q.graph();
    memory_mlp(q, &g.constant(st.w1.clone()), &g.constant(st.w2.clone()))
}

/// Encoder kind plus its parameters inside a model's store.
#[derive(Clone, Debug)]
pub struct MemoryEncoder {
    pub cfg: MemoryConfig,
    pub ssm: Option<SsmParams>,
    pub titans: Option<TitansParams>,
}

impl MemoryEncoder {
    pub fn new(store: &mut ParamStore, cfg: MemoryConfig) -> Result<Self> {
        cfg.validate()?;
        let ssm = (cfg.kind == EncoderKind::Ssm).then(|| SsmParams::new(store, "mem.ssm", cfg.d_lat, cfg.d_mem));
        let titans = (cfg.kind == EncoderKind::Titans)
            .then(|| TitansParams::new(store, "mem.titans", cfg.d_lat, cfg.d_mem, cfg.titans_hidden));
        Ok(Self { cfg, ssm, titans })
    }

    /// Fresh state at the start of an episode.
    pub fn init_state(&self, store: &ParamStore) -> MemoryState {
        let inner = match self.cfg.kind {
            EncoderKind::None => MemoryKindState::None,
            EncoderKind::Cache => MemoryKindState::Cache(CacheState {
                capacity: self.cfg.cache_capacity,
                slots: VecDeque::new(),
            }),
            EncoderKind::Ssm => MemoryKindState::Ssm(SsmState {
                hidden: Tensor::zeros(vec![1, self.cfg.d_mem]),
                recent: VecDeque::new(),
            }),
            EncoderKind::Titans => {
                let p = self.titans.as_ref().expect("titans params");
                let w1 = store.get(p.w1_init).clone();
                let w2 = Tensor::zeros(vec![p.hidden, p.d_mem]);
                MemoryKindState::Titans(TitansState {
                    s1: Tensor::zeros(w1.shape().to_vec()),
                    s2: Tensor::zeros(w2.shape().to_vec()),
                    w1,
                    w2,
                    hyper: self.cfg.titans,
                    recent: VecDeque::new(),
                    skipped: 0,
                })
            }
        };
        MemoryState { inner, last_time: None }
    }

    /// Consumes `z_seq` (time ordered) and returns the advanced state with
    /// the readout built on `b`'s graph. Recurrent steps taken here are
    /// differentiable; earlier ones enter as constants.
    pub fn encode_history<'g>(
        &self,
        b: &Binding<'g>,
        st: &MemoryState,
        z_seq: &[LatentFrame],
    ) -> Result<(MemoryState, MemoryReadout<'g>)> {
        if st.kind() != self.cfg.kind {
            return contract(format!(
                "memory state of kind {} given to a {} encoder",
                st.kind().name(),
                self.cfg.kind.name()
            ));
        }
        let mut last_time = st.last_time;
        for z in z_seq {
            if last_time.is_some_and(|t| z.source_time <= t) {
                return contract(format!("memory frames out of order at time {}", z.source_time));
            }
            last_time = Some(z.source_time);
        }
        let g = b.graph();
        let (inner, readout) = match &st.inner {
            MemoryKindState::None => (MemoryKindState::None, MemoryReadout::empty(EncoderKind::None)),
            MemoryKindState::Cache(c) => {
                let mut c = c.clone();
                for z in z_seq {
                    cache_write(&mut c, z)?;
                }
                let r = cache_read(&c, g, self.cfg.cache_pool, self.cfg.grid, None)?;
                (MemoryKindState::Cache(c), r)
            }
            MemoryKindState::Ssm(s) => {
                let p = self.ssm.as_ref().expect("ssm params");
                let mut h = g.constant(s.hidden.clone());
                let mut fresh = Vec::with_capacity(z_seq.len());
                for z in z_seq {
                    let (h2, y) = ssm_step(p, b, &h, &g.constant(mean_pool(&z.tokens)))?;
                    h = h2;
                    fresh.push(y);
                }
                let mut next = s.clone();
                next.hidden = h.value().as_ref().clone();
                let r = self.recent_readout(g, &mut next.recent, fresh)?;
                (MemoryKindState::Ssm(next), r)
            }
            MemoryKindState::Titans(t) => {
                let p = self.titans.as_ref().expect("titans params");
                let mut next = t.clone();
                let (wk, wv) = (b.var(p.w_k).value(), b.var(p.w_v).value());
                let mut fresh = Vec::with_capacity(z_seq.len());
                for z in z_seq {
                    let pooled = mean_pool(&z.tokens);
                    let k = l2_normalize_rows(&matmul_plain(&pooled, &wk));
                    let v = matmul_plain(&pooled, &wv);
                    titans_write(&mut next, &k, &v)?;
                    let q = g.constant(pooled).matmul(&b.var(p.w_q))?.l2_normalize(L2_EPS)?;
                    fresh.push(titans_read(&next, &q)?);
                }
                let r = self.recent_readout(g, &mut next.recent, fresh)?;
                (MemoryKindState::Titans(next), r)
            }
        };
        Ok((MemoryState { inner, last_time }, readout))
    }

    /// Keeps the last `R` readout vectors: stored ones as constants, the
    /// ones computed in this call as live vars.
    fn recent_readout<'g>(
        &self,
        g: &'g Graph,
        recent: &mut VecDeque<Tensor>,
        fresh: Vec<Var<'g>>,
    ) -> Result<MemoryReadout<'g>> {
        let r = self.cfg.readout;
        let keep_fresh = fresh.len().min(r);
        let keep_old = (r - keep_fresh).min(recent.len());
        let mut parts: Vec<Var<'g>> = recent
            .iter()
            .skip(recent.len() - keep_old)
            .map(|t| g.constant(t.clone()))
            .collect();
        parts.extend_from_slice(&fresh[fresh.len() - keep_fresh..]);
        for y in &fresh {
            recent.push_back(y.value().as_ref().clone());
            if recent.len() > r {
                recent.pop_front();
            }
        }
        if parts.is_empty() {
            return Ok(MemoryReadout::empty(self.cfg.kind));
        }
        Ok(MemoryReadout {
            tokens: Some(Var::concat(&parts, 0)?),
            kind: self.cfg.kind,
            grad_barrier: self.cfg.kind != EncoderKind::Ssm,
            tokens_per_frame: 1,
        })
    }
}

fn matmul_plain(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(vec![m, n], |i| {
        let (r, c) = (i / n, i % n);
        (0..k).map(|j| a.data()[r * k + j] * b.data()[j * n + c]).sum()
    })
}

fn l2_normalize_rows(a: &Tensor) -> Tensor {
    let n = a.shape()[1];
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let norm = (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
        for v in row {
            *v /= norm;
        }
    }
    out
}
