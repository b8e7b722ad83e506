//! Memory injectors: the ways a memory readout enters the predictor's
//! residual stream.

use memstream_tensor::Var;

use crate::error::{contract, Result};
use crate::memory::MemoryReadout;
use crate::nn::{Attention, AttentionConfig, Binding, Init, LayerNorm, Linear, ParamId, ParamStore, QkDelta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InjectorKind {
    None,
    Prepend,
    Additive,
    CrossAttention,
    AdaNorm,
    Lora,
}

impl InjectorKind {
    pub const ALL: [InjectorKind; 5] = [
        InjectorKind::Prepend,
        InjectorKind::Additive,
        InjectorKind::CrossAttention,
        InjectorKind::AdaNorm,
        InjectorKind::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InjectorKind::None => "none",
            InjectorKind::Prepend => "prepend",
            InjectorKind::Additive => "additive",
            InjectorKind::CrossAttention => "xattn",
            InjectorKind::AdaNorm => "adanorm",
            InjectorKind::Lora => "lora",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [InjectorKind::None].into_iter().chain(Self::ALL).find(|k| k.name() == s)
    }

    /// Applied once at the input rather than at every layer.
    pub fn input_site_only(self) -> bool {
        self == InjectorKind::Prepend
    }
}

/// Per-layer adapter parameters of one injector.
#[derive(Clone, Debug)]
pub enum LayerAdapter {
    None,
    Additive(Linear),
    CrossAttention { norm: LayerNorm, attn: Attention },
    AdaNorm { gamma: Linear, beta: Linear },
    Lora { a_q: Linear, a_k: Linear, b_q: ParamId, b_k: ParamId, rank: usize },
}

/// Input-site adapter for prepended memory tokens.
#[derive(Clone, Debug)]
pub struct PrependAdapter {
    /// Maps readout tokens to the model width when they are not latent
    /// patch groups of the tokenizer's own shape.
    pub proj: Option<Linear>,
    /// Learned position embedding of memory slots, `[slots, d]`.
    pub past: ParamId,
}

#[derive(Clone, Debug)]
pub struct Injector {
    pub kind: InjectorKind,
    pub prepend: Option<PrependAdapter>,
    pub layers: Vec<LayerAdapter>,
    pub mem_width: usize,
    pub dim: usize,
}

pub struct InjectorSpec {
    pub kind: InjectorKind,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mem_width: usize,
    pub mem_slots: usize,
    /// Readout tokens share the tokenizer's input layout.
    pub shares_tokenizer: bool,
    pub lora_rank: usize,
}

impl Injector {
    pub fn new(store: &mut ParamStore, spec: &InjectorSpec) -> Result<Self> {
        let (d, w) = (spec.dim, spec.mem_width);
        if spec.kind != InjectorKind::None && w == 0 {
            return contract(format!("{} injector needs a memory encoder", spec.kind.name()));
        }
        if spec.kind == InjectorKind::Lora && (spec.lora_rank == 0 || spec.lora_rank > d) {
            return contract(format!("lora rank {} must be in 1..={d}", spec.lora_rank));
        }
        let prepend = (spec.kind == InjectorKind::Prepend).then(|| PrependAdapter {
            proj: (!spec.shares_tokenizer).then(|| Linear::new(store, "inject.prepend.proj", w, d, true)),
            past: store.add("inject.prepend.past", &[spec.mem_slots.max(1), d], Init::TruncNormal(0.02)),
        });
        let layers = (0..spec.layers)
            .map(|l| {
                let name = format!("inject.l{l}");
                match spec.kind {
                    InjectorKind::None | InjectorKind::Prepend => LayerAdapter::None,
                    InjectorKind::Additive => LayerAdapter::Additive(Linear::zeros(store, &format!("{name}.add"), w, d)),
                    InjectorKind::CrossAttention => LayerAdapter::CrossAttention {
                        norm: LayerNorm::new(store, &format!("{name}.xattn_ln"), d),
                        attn: Attention::zero_output(store, &format!("{name}.xattn"), d, w, spec.heads),
                    },
                    InjectorKind::AdaNorm => LayerAdapter::AdaNorm {
                        gamma: Linear::zeros(store, &format!("{name}.ada_gamma"), w, d),
                        beta: Linear::zeros(store, &format!("{name}.ada_beta"), w, d),
                    },
                    InjectorKind::Lora => {
                        let r = spec.lora_rank;
                        LayerAdapter::Lora {
                            a_q: Linear::new(store, &format!("{name}.lora_aq"), w, d * r, true),
                            a_k: Linear::new(store, &format!("{name}.lora_ak"), w, d * r, true),
                            b_q: store.add(&format!("{name}.lora_bq"), &[r, d], Init::Zeros),
                            b_k: store.add(&format!("{name}.lora_bk"), &[r, d], Init::Zeros),
                            rank: r,
                        }
                    }
                }
            })
            .collect();
        Ok(Self {
            kind: spec.kind,
            prepend,
            layers,
            mem_width: w,
            dim: d,
        })
    }
}

/// Mean over memory tokens, `[1, width]`.
pub fn pool_memory<'g>(m: &MemoryReadout<'g>) -> Result<Option<Var<'g>>> {
    m.tokens.map(|t| Ok(t.mean_axis(0)?.reshape(&[1, t.shape()[1]])?)).transpose()
}

/// Memory tokens to place before the context, `[M, d]`. `None` when the
/// readout is empty. `tokenize` maps tokenizer-shaped readouts through the
/// shared patch projection and spatial embedding.
pub fn inject_prepend<'g>(
    b: &Binding<'g>,
    adapter: &PrependAdapter,
    m: &MemoryReadout<'g>,
    tokenize: impl Fn(&Var<'g>) -> Result<Var<'g>>,
) -> Result<Option<Var<'g>>> {
    let Some(tokens) = m.tokens else { return Ok(None) };
    let projected = match &adapter.proj {
        Some(p) => p.forward(b, &tokens)?,
        None => tokenize(&tokens)?,
    };
    let per = m.tokens_per_frame.max(1);
    let slots: Vec<usize> = (0..m.len()).map(|i| i / per).collect();
    let past = b.var(adapter.past);
    let n_slots = past.shape()[0];
    if slots.last().is_some_and(|&s| s >= n_slots) {
        return contract(format!("{} memory frames exceed {n_slots} slots", m.frames()));
    }
    Ok(Some(projected.add(&past.gather_rows(&slots)?)?))
}

/// `h + W·pool(m) + b`, broadcast over tokens.
pub fn inject_additive<'g>(b: &Binding<'g>, lin: &Linear, h: &Var<'g>, m: &MemoryReadout<'g>) -> Result<Var<'g>> {
    match pool_memory(m)? {
        Some(p) => Ok(h.add(&lin.forward(b, &p)?.reshape(&[lin.out_dim])?)?),
        None => Ok(*h),
    }
}

/// `h + CrossAttn(q = LN(h), kv = m)`; identity for empty memory.
pub fn inject_cross_attention<'g>(
    b: &Binding<'g>,
    norm: &LayerNorm,
    attn: &Attention,
    h: &Var<'g>,
    m: &MemoryReadout<'g>,
) -> Result<Var<'g>> {
    let Some(kv) = m.tokens else { return Ok(*h) };
    let cfg = AttentionConfig {
        dim: attn.dim,
        num_heads: attn.num_heads,
        causal: false,
        n_prepended: 0,
        tokens_per_frame: 1,
    };
    let q = norm.forward(b, h)?;
    Ok(h.add(&attn.forward(b, &q, &kv, &cfg, None)?)?)
}

/// Layer norm with `γ' = γ·(1 + Δγ(m))` and `β' = β + Δβ(m)`.
pub fn inject_adanorm<'g>(
    b: &Binding<'g>,
    norm: &LayerNorm,
    gamma: &Linear,
    beta: &Linear,
    x: &Var<'g>,
    m: &MemoryReadout<'g>,
) -> Result<Var<'g>> {
    let Some(p) = pool_memory(m)? else { return norm.forward(b, x) };
    let d = norm.dim;
    let dg = gamma.forward(b, &p)?.reshape(&[d])?;
    let db = beta.forward(b, &p)?.reshape(&[d])?;
    let g = b.var(norm.gamma);
    let g_mod = g.add(&g.mul(&dg)?)?;
    let b_mod = b.var(norm.beta).add(&db)?;
    norm.forward_modulated(x, &g_mod, &b_mod)
}

/// Memory-conditioned low-rank query/key updates `ΔW = A(m)·B`.
pub fn inject_lora<'g>(b: &Binding<'g>, adapter: &LayerAdapter, m: &MemoryReadout<'g>) -> Result<Option<QkDelta<'g>>> {
    let LayerAdapter::Lora { a_q, a_k, b_q, b_k, rank } = adapter else {
        return contract("inject_lora called on a non-lora adapter");
    };
    let Some(p) = pool_memory(m)? else { return Ok(None) };
    let d = a_q.out_dim / rank;
    Ok(Some(QkDelta {
        a_q: a_q.forward(b, &p)?.reshape(&[d, *rank])?,
        b_q: b.var(*b_q),
        a_k: a_k.forward(b, &p)?.reshape(&[d, *rank])?,
        b_k: b.var(*b_k),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in [InjectorKind::None].into_iter().chain(InjectorKind::ALL) {
            assert_eq!(InjectorKind::parse(k.name()), Some(k));
        }
        assert_eq!(InjectorKind::parse("cross"), None);
        assert!(InjectorKind::ALL.iter().filter(|k| k.input_site_only()).eq([&InjectorKind::Prepend]));
    }
}
