//! Causal ViT latent dynamics model with pluggable memory.
//!
//! The residual stream entering the first layer is the sum of projected
//! window tokens, action embeddings and spatial/temporal position
//! embeddings; memory enters through the configured injector.

use memstream_tensor::{Graph, Tensor, Var};

use crate::codec::LatentFrame;
use crate::error::{contract, Error, Result};
use crate::inject::{
    inject_additive, inject_adanorm, inject_cross_attention, inject_lora, inject_prepend, Injector, InjectorKind,
    InjectorSpec, LayerAdapter,
};
use crate::maze::Action;
use crate::memory::{
    group_tokens, ungroup_tokens, CachePool, EncoderKind, MemoryConfig, MemoryEncoder, MemoryReadout, MemoryState,
    TitansHyper,
};
use crate::nn::{Attention, AttentionConfig, Binding, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::optim::{adam_step, OptimState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictorConfig {
    pub d_lat: usize,
    /// Side of the latent token grid.
    pub grid: usize,
    /// Latent patches per token side; tokens per frame is `(grid/patch)²`.
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_mult: usize,
    /// Context length in frames.
    pub context: usize,
    pub encoder: EncoderKind,
    pub injector: InjectorKind,
    pub cache_capacity: usize,
    pub cache_pool: CachePool,
    pub readout: usize,
    pub d_mem: usize,
    pub titans_hidden: usize,
    pub titans: TitansHyper,
    pub lora_rank: usize,
    pub seed: u64,
}

impl PredictorConfig {
    pub fn tokens_per_frame(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }

    /// Width of a grouped latent token.
    pub fn token_in(&self) -> usize {
        self.patch * self.patch * self.d_lat
    }

    pub fn memory(&self) -> MemoryConfig {
        MemoryConfig {
            kind: self.encoder,
            d_lat: self.d_lat,
            grid: self.grid,
            cache_capacity: self.cache_capacity,
            cache_pool: self.cache_pool,
            readout: self.readout,
            d_mem: self.d_mem,
            titans_hidden: self.titans_hidden,
            titans: self.titans,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.grid.is_multiple_of(self.patch) {
            return contract(format!("patch {} does not tile a {1}×{1} latent grid", self.patch, self.grid));
        }
        if self.context == 0 || self.layers == 0 {
            return contract("context and layers must be positive");
        }
        if (self.encoder == EncoderKind::None) != (self.injector == InjectorKind::None) {
            return contract(format!(
                "encoder {} and injector {} must both be none or both be set",
                self.encoder.name(),
                self.injector.name()
            ));
        }
        self.memory().validate()
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Frames with the actions between them: `actions[i]` leads from
/// `frames[i]` to `frames[i + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub frames: Vec<LatentFrame>,
    pub actions: Vec<Action>,
}

impl LatentSeq {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if !self.frames.is_empty() && self.actions.len() + 1 != self.frames.len() {
            return contract(format!("{} frames need {} actions, got {}", self.len(), self.len() - 1, self.actions.len()));
        }
        Ok(())
    }
}

pub struct WorldModel {
    pub cfg: PredictorConfig,
    pub store: ParamStore,
    pub memory: MemoryEncoder,
    pub injector: Injector,
    in_proj: Linear,
    action_emb: ParamId,
    spatial_pos: ParamId,
    temporal_pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Layer-1 input: window tokens and optional prepended memory tokens.
pub struct InputStream<'g> {
    pub window: Var<'g>,
    pub memory: Option<Var<'g>>,
}

impl WorldModel {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new(cfg.seed);
        let d = cfg.dim;
        let in_proj = Linear::new(&mut s, "tok.in_proj", cfg.token_in(), d, true);
        let action_emb = s.add("tok.action", &[Action::COUNT, d], Init::TruncNormal(0.02));
        let spatial_pos = s.add("tok.spatial", &[cfg.tokens_per_frame(), d], Init::TruncNormal(0.02));
        let temporal_pos = s.add("tok.temporal", &[cfg.context, d], Init::TruncNormal(0.02));
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                ln1: LayerNorm::new(&mut s, &format!("blocks.{l}.ln1"), d),
                attn: Attention::new(&mut s, &format!("blocks.{l}.attn"), d, d, cfg.heads),
                ln2: LayerNorm::new(&mut s, &format!("blocks.{l}.ln2"), d),
                mlp: Mlp::new(&mut s, &format!("blocks.{l}.mlp"), d, cfg.hidden_mult),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut s, "ln_f", d);
        let head = Linear::new(&mut s, "head", d, cfg.token_in(), true);
        let mcfg = cfg.memory();
        let memory = MemoryEncoder::new(&mut s, mcfg)?;
        let shares_tokenizer = mcfg.kind == EncoderKind::Cache
            && mcfg.width() == cfg.token_in()
            && mcfg.tokens_per_frame() == cfg.tokens_per_frame();
        let injector = Injector::new(
            &mut s,
            &InjectorSpec {
                kind: cfg.injector,
                layers: cfg.layers,
                dim: d,
                heads: cfg.heads,
                mem_width: mcfg.width(),
                mem_slots: mcfg.max_frames(),
                shares_tokenizer,
                lora_rank: cfg.lora_rank,
            },
        )?;
        Ok(Self {
            cfg,
            store: s,
            memory,
            injector,
            in_proj,
            action_emb,
            spatial_pos,
            temporal_pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn init_memory(&self) -> MemoryState {
        self.memory.init_state(&self.store)
    }

    pub fn group(&self, z: &LatentFrame) -> Tensor {
        group_tokens(&z.tokens, self.cfg.grid, self.cfg.patch)
    }

    pub fn ungroup(&self, grouped: &Tensor) -> Tensor {
        ungroup_tokens(grouped, self.cfg.grid, self.cfg.patch)
    }

    fn spatial_ids(&self, n: usize) -> Vec<usize> {
        let p = self.cfg.tokens_per_frame();
        (0..n).map(|i| i % p).collect()
    }

    /// Window tokens `[T·P', d]`: projected latent groups plus per-frame
    /// action embedding plus spatial and temporal position embeddings.
    pub fn tokenize<'g>(&self, b: &Binding<'g>, frames: &[LatentFrame], actions: &[usize]) -> Result<Var<'g>> {
        let t = frames.len();
        if t == 0 || t > self.cfg.context {
            return contract(format!("window of {t} frames, context is {}", self.cfg.context));
        }
        if actions.len() != t {
            return contract(format!("{t} frames need {t} actions, got {}", actions.len()));
        }
        if let Some(bad) = actions.iter().find(|&&a| a >= Action::COUNT) {
            return contract(format!("unknown action id {bad}"));
        }
        let p = self.cfg.tokens_per_frame();
        let data: Vec<f64> = frames.iter().flat_map(|z| self.group(z).into_data()).collect();
        let z = b.graph().constant(Tensor::new(vec![t * p, self.cfg.token_in()], data)?);
        let per_token = |f: &dyn Fn(usize) -> usize| (0..t * p).map(f).collect::<Vec<_>>();
        let x = self.in_proj.forward(b, &z)?;
        let x = x.add(&b.var(self.action_emb).gather_rows(&per_token(&|i| actions[i / p]))?)?;
        let x = x.add(&b.var(self.spatial_pos).gather_rows(&self.spatial_ids(t * p))?)?;
        Ok(x.add(&b.var(self.temporal_pos).gather_rows(&per_token(&|i| i / p))?)?)
    }

    /// Tokenizer path for memory tokens shaped like latent groups: patch
    /// projection plus spatial embedding.
    fn tokenize_memory<'g>(&self, b: &Binding<'g>, tokens: &Var<'g>) -> Result<Var<'g>> {
        let x = self.in_proj.forward(b, tokens)?;
        Ok(x.add(&b.var(self.spatial_pos).gather_rows(&self.spatial_ids(tokens.shape()[0]))?)?)
    }

    pub fn input_stream<'g>(
        &self,
        b: &Binding<'g>,
        frames: &[LatentFrame],
        actions: &[usize],
        readout: &MemoryReadout<'g>,
    ) -> Result<InputStream<'g>> {
        let window = self.tokenize(b, frames, actions)?;
        let memory = match &self.injector.prepend {
            Some(adapter) => inject_prepend(b, adapter, readout, |t| self.tokenize_memory(b, t))?,
            None => None,
        };
        Ok(InputStream { window, memory })
    }

    /// Teacher-forced forward over a window. Row block `i` of the result
    /// (grouped tokens `[T·P', token_in]`) predicts frame `i + 1`.
    pub fn forward<'g>(
        &self,
        b: &Binding<'g>,
        frames: &[LatentFrame],
        actions: &[usize],
        readout: &MemoryReadout<'g>,
    ) -> Result<Var<'g>> {
        Ok(self.forward_layers(b, frames, actions, readout, self.cfg.layers)?.1)
    }

    /// Forward with injection disabled from layer `inject_until` on.
    /// Returns the per-layer residual streams and the prediction.
    pub fn forward_layers<'g>(
        &self,
        b: &Binding<'g>,
        frames: &[LatentFrame],
        actions: &[usize],
        readout: &MemoryReadout<'g>,
        inject_until: usize,
    ) -> Result<(Vec<Var<'g>>, Var<'g>)> {
        let stream = self.input_stream(b, frames, actions, readout)?;
        let mut x = stream.window;
        let n_mem = stream.memory.map_or(0, |m| m.shape()[0]);
        let attn_cfg = AttentionConfig {
            dim: self.cfg.dim,
            num_heads: self.cfg.heads,
            causal: true,
            n_prepended: n_mem,
            tokens_per_frame: self.cfg.tokens_per_frame(),
        };
        let mut streams = Vec::with_capacity(self.blocks.len());
        for (l, (blk, adapter)) in self.blocks.iter().zip(&self.injector.layers).enumerate() {
            let inject = l < inject_until;
            let a_in = blk.ln1.forward(b, &x)?;
            let kv = match stream.memory {
                Some(m) => Var::concat(&[blk.ln1.forward(b, &m)?, a_in], 0)?,
                None => a_in,
            };
            let delta = match adapter {
                LayerAdapter::Lora { .. } if inject => inject_lora(b, adapter, readout)?,
                _ => None,
            };
            x = x.add(&blk.attn.forward(b, &a_in, &kv, &attn_cfg, delta.as_ref())?)?;
            match adapter {
                LayerAdapter::Additive(lin) if inject => x = inject_additive(b, lin, &x, readout)?,
                LayerAdapter::CrossAttention { norm, attn } if inject => {
                    x = inject_cross_attention(b, norm, attn, &x, readout)?
                }
                _ => {}
            }
            let f_in = match adapter {
                LayerAdapter::AdaNorm { gamma, beta } if inject => inject_adanorm(b, &blk.ln2, gamma, beta, &x, readout)?,
                _ => blk.ln2.forward(b, &x)?,
            };
            x = x.add(&blk.mlp.forward(b, &f_in)?)?;
            streams.push(x);
        }
        let delta = self.head.forward(b, &self.ln_f.forward(b, &x)?)?;
        let t = frames.len();
        let p = self.cfg.tokens_per_frame();
        let data: Vec<f64> = frames.iter().flat_map(|z| self.group(z).into_data()).collect();
        let last = b.graph().constant(Tensor::new(vec![t * p, self.cfg.token_in()], data)?);
        Ok((streams, last.add(&delta)?))
    }

    /// Advances memory by `frames` outside any training graph.
    pub fn consume(&self, mem: &MemoryState, frames: &[LatentFrame]) -> Result<MemoryState> {
        if frames.is_empty() {
            return Ok(mem.clone());
        }
        let g = Graph::new();
        let b = self.store.bind_frozen(&g);
        Ok(self.memory.encode_history(&b, mem, frames)?.0)
    }

    /// One-step prediction from a window of at most `context` frames. The
    /// predicted frame is consumed into memory, stamped with the next
    /// memory time.
    pub fn predict_next(&self, mem: &MemoryState, seq: &LatentSeq, a_next: Action) -> Result<(LatentFrame, MemoryState)> {
        seq.validate()?;
        if seq.is_empty() {
            return contract("predict_next needs at least one context frame");
        }
        let g = Graph::new();
        let b = self.store.bind_frozen(&g);
        let (mem, readout) = self.memory.encode_history(&b, mem, &[])?;
        let actions: Vec<usize> = seq.actions.iter().chain(std::iter::once(&a_next)).map(|&a| a as usize).collect();
        let out = self.forward(&b, &seq.frames, &actions, &readout)?;
        let p = self.cfg.tokens_per_frame();
        let rows = out.narrow(0, (seq.len() - 1) * p, p)?.value();
        let pred = LatentFrame {
            tokens: self.ungroup(&rows),
            source_time: mem.next_time(),
        };
        let mem = self.consume(&mem, std::slice::from_ref(&pred))?;
        Ok((pred, mem))
    }

    /// Open-loop rollout: each prediction joins the sliding window (oldest
    /// frame dropped beyond the context) and feeds the next step.
    /// `actions[0]` is taken at the last context frame.
    pub fn rollout_imagination(
        &self,
        mem: &MemoryState,
        context: &LatentSeq,
        actions: &[Action],
    ) -> Result<(Vec<LatentFrame>, MemoryState)> {
        context.validate()?;
        if context.len() != self.cfg.context {
            return contract(format!("rollout needs {} context frames, got {}", self.cfg.context, context.len()));
        }
        let mut window = context.clone();
        let mut mem = mem.clone();
        let mut out = Vec::with_capacity(actions.len());
        for &a in actions {
            let (pred, next) = self.predict_next(&mem, &window, a)?;
            mem = next;
            window.frames.push(pred.clone());
            window.actions.push(a);
            if window.len() > self.cfg.context {
                window.frames.remove(0);
                window.actions.remove(0);
            }
            out.push(pred);
        }
        Ok((out, mem))
    }
}

/// One episode's next training window plus its carried memory.
pub struct TrainItem {
    /// `context + 1` frames; the first `context` are inputs.
    pub frames: Vec<LatentFrame>,
    /// Actions taken at the input frames.
    pub actions: Vec<Action>,
    /// Frames of the previous window, consumed before this one.
    pub previous: Vec<LatentFrame>,
    pub memory: MemoryState,
}

/// Teacher-forced latent MSE on one window; returns the loss value and
/// leaves gradients on the binding's graph.
fn window_loss<'g>(model: &WorldModel, b: &Binding<'g>, item: &TrainItem) -> Result<(f64, MemoryState)> {
    let c = item.frames.len() - 1;
    let (mem, readout) = model.memory.encode_history(b, &item.memory, &item.previous)?;
    let actions: Vec<usize> = item.actions.iter().map(|&a| a as usize).collect();
    let pred = model.forward(b, &item.frames[..c], &actions, &readout)?;
    let target: Vec<f64> = item.frames[1..].iter().flat_map(|z| model.group(z).into_data()).collect();
    let target = b.graph().constant(Tensor::new(pred.shape(), target)?);
    let loss = pred.mse(&target)?;
    let lv = loss.value().to_scalar()?;
    if !lv.is_finite() {
        return Err(Error::Diverged(format!("latent loss is {lv}")));
    }
    b.graph().backward(loss)?;
    Ok((lv, mem))
}

/// Accumulates gradients over a batch of windows, then takes one optimizer
/// step. Memory states in `batch` advance past the consumed frames.
pub fn training_step(model: &mut WorldModel, batch: &mut [TrainItem], opt: &mut OptimState) -> Result<f64> {
    if batch.is_empty() {
        return contract("empty training batch");
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut total = 0.0;
    for item in batch.iter_mut() {
        if item.frames.len() < 2 || item.actions.len() + 1 != item.frames.len() {
            return contract("training windows need at least 2 frames and one action per input frame");
        }
        let g = Graph::new();
        let b = model.store.bind(&g);
        let (lv, mem) = window_loss(model, &b, item)?;
        total += lv;
        for (acc, gr) in grads.iter_mut().zip(b.grads()) {
            if let Some(gr) = gr {
                match acc {
                    Some(a) => a.add_assign(&gr)?,
                    None => *acc = Some(gr),
                }
            }
        }
        item.memory = mem;
    }
    let n = batch.len() as f64;
    for gr in grads.iter_mut().flatten() {
        *gr = gr.map(|v| v / n);
    }
    adam_step(&mut model.store, &grads, opt)?;
    Ok(total / n)
}
