use memstream::inject::*;
use memstream::memory::{EncoderKind, MemoryReadout};
use memstream::nn::{LayerNorm, ParamStore};
use memstream::Error;
use memstream_tensor::{grad_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;
const W: usize = 6;

fn injector(kind: InjectorKind, shares_tokenizer: bool) -> (ParamStore, Injector) {
    let mut store = ParamStore::new(3);
    let inj = Injector::new(
        &mut store,
        &InjectorSpec {
            kind,
            layers: 2,
            dim: D,
            heads: 2,
            mem_width: W,
            mem_slots: 4,
            shares_tokenizer,
            lora_rank: 2,
        },
    )
    .unwrap();
    (store, inj)
}

/// Replaces every parameter with small random values so zero-initialized
/// adapters contribute.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let t = store.get_mut(id);
        *t = t.map(|_| rng.gen_range(-0.5..0.5));
    }
}

fn readout<'g>(tokens: Var<'g>) -> MemoryReadout<'g> {
    MemoryReadout {
        tokens: Some(tokens),
        kind: EncoderKind::Ssm,
        grad_barrier: false,
        tokens_per_frame: 1,
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn apply<'g>(store: &ParamStore, inj: &Injector, g: &'g Graph, h: &Var<'g>, m: &MemoryReadout<'g>) -> Var<'g> {
    let b = store.bind_frozen(g);
    match &inj.layers[0] {
        LayerAdapter::Additive(lin) => inject_additive(&b, lin, h, m).unwrap(),
        LayerAdapter::CrossAttention { norm, attn } => inject_cross_attention(&b, norm, attn, h, m).unwrap(),
        LayerAdapter::AdaNorm { gamma, beta } => {
            let ln = LayerNorm {
                gamma: store.id("ln.gamma").unwrap(),
                beta: store.id("ln.beta").unwrap(),
                dim: D,
            };
            inject_adanorm(&b, &ln, gamma, beta, h, m).unwrap()
        }
        other => panic!("no direct application for {other:?}"),
    }
}

fn with_ln(mut store: ParamStore) -> ParamStore {
    LayerNorm::new(&mut store, "ln", D);
    store
}

#[test]
fn zero_initialized_adapters_are_identities() {
    for kind in [InjectorKind::Additive, InjectorKind::CrossAttention] {
        let (store, inj) = injector(kind, false);
        let g = Graph::new();
        let h = g.constant(rand_tensor(&[5, D], 1));
        let m = readout(g.constant(rand_tensor(&[3, W], 2)));
        assert_eq!(apply(&store, &inj, &g, &h, &m).value(), h.value(), "{kind:?}");
    }

    let (store, inj) = injector(InjectorKind::AdaNorm, false);
    let store = with_ln(store);
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    let h = g.constant(rand_tensor(&[5, D], 3));
    let m = readout(g.constant(rand_tensor(&[3, W], 4)));
    let plain = LayerNorm {
        gamma: store.id("ln.gamma").unwrap(),
        beta: store.id("ln.beta").unwrap(),
        dim: D,
    }
    .forward(&b, &h)
    .unwrap();
    assert_eq!(apply(&store, &inj, &g, &h, &m).value(), plain.value());

    let (store, inj) = injector(InjectorKind::Lora, false);
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    let delta = inject_lora(&b, &inj.layers[0], &readout(g.constant(rand_tensor(&[3, W], 5)))).unwrap().unwrap();
    let dq = delta.a_q.matmul(&delta.b_q).unwrap().value();
    assert!(dq.data().iter().all(|&v| v == 0.0));
}

#[test]
fn empty_memory_is_an_identity_for_every_injector() {
    for kind in [InjectorKind::Additive, InjectorKind::CrossAttention] {
        let (mut store, inj) = injector(kind, false);
        randomize(&mut store, 6);
        let g = Graph::new();
        let h = g.constant(rand_tensor(&[4, D], 7));
        let out = apply(&store, &inj, &g, &h, &MemoryReadout::empty(EncoderKind::Cache));
        assert_eq!(out.value(), h.value());
    }
    let (mut store, inj) = injector(InjectorKind::Lora, false);
    randomize(&mut store, 8);
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    assert!(inject_lora(&b, &inj.layers[0], &MemoryReadout::empty(EncoderKind::Ssm)).unwrap().is_none());
}

#[test]
fn injector_gradients_match_finite_differences() {
    for kind in [InjectorKind::Additive, InjectorKind::CrossAttention, InjectorKind::AdaNorm] {
        let (store, inj) = injector(kind, false);
        let mut store = with_ln(store);
        randomize(&mut store, 9);
        let inputs = [rand_tensor(&[4, D], 10), rand_tensor(&[3, W], 11)];
        let report = grad_check::<_, Error>(
            |g, v| Ok(apply(&store, &inj, g, &v[0], &readout(v[1])).square()?.sum_all()?),
            &inputs,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{kind:?}: {report:?}");
    }
}

#[test]
fn lora_gradients_match_finite_differences() {
    let (mut store, inj) = injector(InjectorKind::Lora, false);
    randomize(&mut store, 12);
    let inputs = [rand_tensor(&[4, D], 13), rand_tensor(&[3, W], 14)];
    let report = grad_check::<_, Error>(
        |g, v| {
            let b = store.bind_frozen(g);
            let d = inject_lora(&b, &inj.layers[0], &readout(v[1]))?.unwrap();
            let q = v[0].matmul(&d.a_q)?.matmul(&d.b_q)?;
            let k = v[0].matmul(&d.a_k)?.matmul(&d.b_k)?;
            Ok(q.mul(&k)?.sum_all()?)
        },
        &inputs,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn lora_factors_have_the_configured_rank() {
    let (store, inj) = injector(InjectorKind::Lora, false);
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    let d = inject_lora(&b, &inj.layers[1], &readout(g.constant(rand_tensor(&[2, W], 15)))).unwrap().unwrap();
    assert_eq!(d.a_q.shape(), vec![D, 2]);
    assert_eq!(d.b_q.shape(), vec![2, D]);
    assert_eq!(d.a_k.shape(), vec![D, 2]);
    assert_eq!(d.b_k.shape(), vec![2, D]);
    assert!(inject_lora(&b, &LayerAdapter::None, &readout(g.constant(rand_tensor(&[2, W], 15)))).is_err());

    let mut s = ParamStore::new(0);
    for rank in [0, D + 1] {
        let spec = InjectorSpec {
            kind: InjectorKind::Lora,
            layers: 1,
            dim: D,
            heads: 2,
            mem_width: W,
            mem_slots: 1,
            shares_tokenizer: false,
            lora_rank: rank,
        };
        assert!(Injector::new(&mut s, &spec).is_err());
    }
}

#[test]
fn prepend_emits_one_token_per_memory_token() {
    let (mut store, inj) = injector(InjectorKind::Prepend, false);
    randomize(&mut store, 16);
    let adapter = inj.prepend.as_ref().unwrap();
    assert!(inj.layers.iter().all(|l| matches!(l, LayerAdapter::None)));
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    for m in 1..=4 {
        let r = readout(g.constant(rand_tensor(&[m, W], m as u64)));
        let out = inject_prepend(&b, adapter, &r, |_| unreachable!()).unwrap().unwrap();
        assert_eq!(out.shape(), vec![m, D]);
    }
    let too_many = readout(g.constant(rand_tensor(&[5, W], 0)));
    assert!(inject_prepend(&b, adapter, &too_many, |_| unreachable!()).is_err());
    let none = inject_prepend(&b, adapter, &MemoryReadout::empty(EncoderKind::Cache), |_| unreachable!()).unwrap();
    assert!(none.is_none());
}

#[test]
fn prepend_with_shared_tokenizer_uses_the_callback() {
    let (store, inj) = injector(InjectorKind::Prepend, true);
    let adapter = inj.prepend.as_ref().unwrap();
    assert!(adapter.proj.is_none());
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    let r = MemoryReadout {
        tokens: Some(g.constant(rand_tensor(&[6, W], 17))),
        kind: EncoderKind::Cache,
        grad_barrier: true,
        tokens_per_frame: 2,
    };
    let out = inject_prepend(&b, adapter, &r, |t| Ok(g.constant(Tensor::zeros(vec![t.shape()[0], D])))).unwrap().unwrap();
    // Zero tokens leave only the slot embedding: rows of one frame share it.
    let v = out.value();
    let row = |i: usize| &v.data()[i * D..(i + 1) * D];
    assert_eq!(row(0), row(1));
    assert_eq!(row(2), row(3));
    assert_ne!(row(1), row(2));
}

#[test]
fn non_none_injector_requires_memory() {
    let mut s = ParamStore::new(0);
    let spec = InjectorSpec {
        kind: InjectorKind::Additive,
        layers: 1,
        dim: D,
        heads: 2,
        mem_width: 0,
        mem_slots: 0,
        shares_tokenizer: false,
        lora_rank: 1,
    };
    assert!(Injector::new(&mut s, &spec).is_err());
    for k in InjectorKind::ALL {
        assert_eq!(InjectorKind::parse(k.name()), Some(k));
    }
}
