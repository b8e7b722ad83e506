use std::collections::VecDeque;

use memstream::codec::LatentFrame;
use memstream::memory::*;
use memstream::nn::ParamStore;
use memstream_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID: usize = 4;
const D_LAT: usize = 3;

fn cfg(kind: EncoderKind) -> MemoryConfig {
    MemoryConfig {
        kind,
        d_lat: D_LAT,
        grid: GRID,
        cache_capacity: 3,
        cache_pool: CachePool::Tokens,
        readout: 4,
        d_mem: 5,
        titans_hidden: 6,
        titans: TitansHyper::default(),
    }
}

fn frame(t: usize, rng: &mut ChaCha8Rng) -> LatentFrame {
    LatentFrame {
        tokens: Tensor::from_fn(vec![GRID * GRID, D_LAT], |_| rng.gen_range(-1.0..1.0)),
        source_time: t,
    }
}

fn frames(n: usize, seed: u64) -> Vec<LatentFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|t| frame(t, &mut rng)).collect()
}

fn encoder(kind: EncoderKind, seed: u64) -> (ParamStore, MemoryEncoder) {
    let mut store = ParamStore::new(seed);
    let enc = MemoryEncoder::new(&mut store, cfg(kind)).unwrap();
    (store, enc)
}

fn pooled(z: &LatentFrame) -> Vec<f64> {
    let (p, d) = (z.tokens.shape()[0], z.tokens.shape()[1]);
    (0..d).map(|j| (0..p).map(|i| z.tokens.data()[i * d + j]).sum::<f64>() / p as f64).collect()
}

#[test]
fn cache_fifo_capacity_and_detach() {
    let mut st = CacheState {
        capacity: 2,
        slots: VecDeque::new(),
    };
    let fs = frames(3, 1);
    cache_write(&mut st, &fs[0]).unwrap();
    assert_eq!(st.slots.len(), 1);
    cache_write(&mut st, &fs[1]).unwrap();
    cache_write(&mut st, &fs[2]).unwrap();
    assert_eq!(st.slots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2]);
    assert!(cache_write(&mut st, &fs[1]).is_err());

    let g = Graph::new();
    let r = cache_read(&st, &g, CachePool::Tokens, GRID, None).unwrap();
    assert!(r.grad_barrier);
    assert!(!r.tokens.unwrap().requires_grad());
    assert_eq!(r.len(), 2 * GRID * GRID);
}

#[test]
fn cache_read_shapes_and_non_adaptivity() {
    let g = Graph::new();
    let empty = CacheState {
        capacity: 3,
        slots: VecDeque::new(),
    };
    assert_eq!(cache_read(&empty, &g, CachePool::Mean, GRID, None).unwrap().len(), 0);

    let mut st = empty.clone();
    for z in frames(3, 2) {
        cache_write(&mut st, &z).unwrap();
    }
    let mean = cache_read(&st, &g, CachePool::Mean, GRID, None).unwrap();
    assert_eq!(mean.tokens.unwrap().shape(), vec![3, D_LAT]);
    let ctx = frames(2, 9);
    let with_ctx = cache_read(&st, &g, CachePool::Mean, GRID, Some(&ctx)).unwrap();
    assert_eq!(mean.tokens.unwrap().value(), with_ctx.tokens.unwrap().value());
    let grouped = cache_read(&st, &g, CachePool::Group(2), GRID, None).unwrap();
    assert_eq!(grouped.tokens.unwrap().shape(), vec![3 * 4, 4 * D_LAT]);
    assert_eq!(grouped.tokens_per_frame, 4);
}

#[test]
fn cache_dispatch_equals_manual_composition() {
    let (store, enc) = encoder(EncoderKind::Cache, 0);
    let fs = frames(5, 3);
    let g = Graph::new();
    let b = store.bind(&g);
    let (st, r) = enc.encode_history(&b, &enc.init_state(&store), &fs).unwrap();
    let mut manual = CacheState {
        capacity: 3,
        slots: VecDeque::new(),
    };
    for z in &fs {
        cache_write(&mut manual, z).unwrap();
    }
    let m = cache_read(&manual, &g, CachePool::Tokens, GRID, None).unwrap();
    assert_eq!(st.inner, MemoryKindState::Cache(manual));
    assert_eq!(r.tokens.unwrap().value(), m.tokens.unwrap().value());
    assert_eq!(st.next_time(), 5);
}

#[test]
fn empty_history_leaves_state_unchanged() {
    for kind in EncoderKind::ALL {
        let (store, enc) = encoder(kind, 4);
        let g = Graph::new();
        let b = store.bind(&g);
        let s0 = enc.init_state(&store);
        let (s1, r) = enc.encode_history(&b, &s0, &[]).unwrap();
        assert_eq!(s1, s0, "{kind:?}");
        assert_eq!(r.len(), 0);
    }
}

#[test]
fn out_of_order_history_is_rejected() {
    for kind in EncoderKind::ALL {
        let (store, enc) = encoder(kind, 4);
        let g = Graph::new();
        let b = store.bind(&g);
        let mut fs = frames(3, 5);
        fs.swap(1, 2);
        assert!(enc.encode_history(&b, &enc.init_state(&store), &fs).is_err());
        let other = encoder(if kind == EncoderKind::Cache { EncoderKind::Ssm } else { EncoderKind::Cache }, 0);
        assert!(enc.encode_history(&b, &other.1.init_state(&other.0), &[]).is_err());
    }
}

/// Plain-loop evaluation of the selective recurrence.
struct SsmOracle {
    w_in: Vec<f64>,
    w_delta: Vec<f64>,
    b_delta: Vec<f64>,
    w_b: Vec<f64>,
    a_log: Vec<f64>,
    w_gate: Vec<f64>,
    w_out: Vec<f64>,
    d_in: usize,
    d: usize,
}

impl SsmOracle {
    fn from(store: &ParamStore, p: &SsmParams, d_in: usize) -> Self {
        let v = |id| store.get(id).data().to_vec();
        Self {
            w_in: v(p.w_in),
            w_delta: v(p.w_delta),
            b_delta: v(p.b_delta),
            w_b: v(p.w_b),
            a_log: v(p.a_log),
            w_gate: v(p.w_gate),
            w_out: v(p.w_out),
            d_in,
            d: p.d_mem,
        }
    }

    fn proj(&self, z: &[f64], w: &[f64], j: usize) -> f64 {
        (0..self.d_in).map(|i| z[i] * w[i * self.d + j]).sum()
    }

    fn step(&self, h: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h2 = vec![0.0; self.d];
        let mut gated = vec![0.0; self.d];
        for j in 0..self.d {
            let pre = self.proj(z, &self.w_delta, j) + self.b_delta[j];
            let delta = if pre > 30.0 { pre } else { pre.exp().ln_1p() };
            let a = (-delta * self.a_log[j].exp()).exp();
            h2[j] = a * h[j] + delta * self.proj(z, &self.w_b, j) * self.proj(z, &self.w_in, j);
            let g = self.proj(z, &self.w_gate, j);
            gated[j] = h2[j] * g / (1.0 + (-g).exp());
        }
        let y = (0..self.d).map(|k| (0..self.d).map(|j| gated[j] * self.w_out[j * self.d + k]).sum()).collect();
        (h2, y)
    }
}

#[test]
fn ssm_scan_matches_unrolled_steps() {
    let (store, enc) = encoder(EncoderKind::Ssm, 7);
    let oracle = SsmOracle::from(&store, enc.ssm.as_ref().unwrap(), D_LAT);
    for n in [3usize, 5] {
        let fs = frames(n, 10 + n as u64);
        let g = Graph::new();
        let b = store.bind(&g);
        let (st, r) = enc.encode_history(&b, &enc.init_state(&store), &fs).unwrap();
        let mut h = vec![0.0; oracle.d];
        let mut ys = Vec::new();
        for z in &fs {
            let (h2, y) = oracle.step(&h, &pooled(z));
            h = h2;
            ys.push(y);
        }
        let MemoryKindState::Ssm(s) = &st.inner else { panic!("ssm state") };
        for (a, e) in s.hidden.data().iter().zip(&h) {
            assert!((a - e).abs() <= 1e-12, "hidden {a} vs {e}");
        }
        let got = r.tokens.unwrap().value();
        let want: Vec<f64> = ys[n.saturating_sub(4)..].concat();
        assert_eq!(got.numel(), want.len());
        for (a, e) in got.data().iter().zip(&want) {
            assert!((a - e).abs() <= 1e-12, "readout {a} vs {e}");
        }
        assert!(!r.grad_barrier);
    }
}

#[test]
fn ssm_chunked_scan_equals_single_scan() {
    let (store, enc) = encoder(EncoderKind::Ssm, 8);
    let fs = frames(6, 21);
    let g = Graph::new();
    let b = store.bind(&g);
    let s0 = enc.init_state(&store);
    let (whole, _) = enc.encode_history(&b, &s0, &fs).unwrap();
    let (half, _) = enc.encode_history(&b, &s0, &fs[..2]).unwrap();
    let (rest, _) = enc.encode_history(&b, &half, &fs[2..]).unwrap();
    let (MemoryKindState::Ssm(a), MemoryKindState::Ssm(c)) = (&whole.inner, &rest.inner) else { panic!() };
    assert!(a.hidden.max_abs_diff(&c.hidden).unwrap() <= 1e-12);
}

#[test]
fn ssm_infinite_decay_forgets_the_past() {
    let (mut store, enc) = encoder(EncoderKind::Ssm, 9);
    let p = enc.ssm.clone().unwrap();
    *store.get_mut(p.a_log) = Tensor::full(vec![p.d_mem], 50.0);
    let g = Graph::new();
    let b = store.bind(&g);
    let z = g.constant(Tensor::from_fn(vec![1, D_LAT], |i| 0.3 - 0.2 * i as f64));
    let h1 = g.constant(Tensor::zeros(vec![1, p.d_mem]));
    let h2 = g.constant(Tensor::full(vec![1, p.d_mem], 7.0));
    let (a, _) = ssm_step(&p, &b, &h1, &z).unwrap();
    let (c, _) = ssm_step(&p, &b, &h2, &z).unwrap();
    assert_eq!(a.value(), c.value());
}

#[test]
fn ssm_hidden_state_stays_bounded() {
    let (store, enc) = encoder(EncoderKind::Ssm, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut st = enc.init_state(&store);
    let (mut sup_h, mut sup_z) = (0.0f64, 0.0f64);
    for t in 0..1000 {
        let z = frame(t, &mut rng);
        sup_z = sup_z.max(pooled(&z).iter().map(|v| v * v).sum::<f64>().sqrt());
        let g = Graph::new();
        let b = store.bind_frozen(&g);
        st = enc.encode_history(&b, &st, std::slice::from_ref(&z)).unwrap().0;
        let MemoryKindState::Ssm(s) = &st.inner else { panic!() };
        sup_h = sup_h.max(s.hidden.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    assert!(sup_h < 100.0 * sup_z, "sup |h| {sup_h} vs sup |z| {sup_z}");
}

fn titans_state(hyper: TitansHyper, seed: u64) -> TitansState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = Tensor::from_fn(vec![4, 6], |_| rng.gen_range(-0.5..0.5));
    let w2 = Tensor::from_fn(vec![6, 4], |_| rng.gen_range(-0.5..0.5));
    TitansState {
        s1: Tensor::zeros(vec![4, 6]),
        s2: Tensor::zeros(vec![6, 4]),
        w1,
        w2,
        hyper,
        recent: VecDeque::new(),
        skipped: 0,
    }
}

fn kv(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::from_fn(vec![1, 4], |_| rng.gen_range(-1.0..1.0)),
        Tensor::from_fn(vec![1, 4], |_| rng.gen_range(-1.0..1.0)),
    )
}

fn retrieval_error(st: &TitansState, k: &Tensor, v: &Tensor) -> f64 {
    titans_loss_grad(&st.w1, &st.w2, k, v).unwrap().0
}

#[test]
fn titans_full_forget_keeps_only_the_surprise() {
    let hyper = TitansHyper {
        eta: 0.0,
        theta: 0.3,
        alpha: 1.0,
    };
    let mut st = titans_state(hyper, 1);
    let (k, v) = kv(2);
    let (_, g1, g2) = titans_loss_grad(&st.w1, &st.w2, &k, &v).unwrap();
    let norm = g1.data().iter().chain(g2.data()).map(|x| x * x).sum::<f64>().sqrt();
    let clip = (TITANS_GRAD_CLIP / norm).min(1.0);
    titans_write(&mut st, &k, &v).unwrap();
    assert_eq!(st.w1, g1.map(|g| -0.3 * (clip * g)));
    assert_eq!(st.w2, g2.map(|g| -0.3 * (clip * g)));
}

#[test]
fn titans_large_surprise_is_clipped() {
    let hyper = TitansHyper {
        eta: 0.0,
        theta: 1.0,
        alpha: 1.0,
    };
    let mut st = titans_state(hyper, 1);
    let (k, v) = kv(2);
    let v = v.map(|x| 1e3 * x);
    titans_write(&mut st, &k, &v).unwrap();
    let norm = st.w1.data().iter().chain(st.w2.data()).map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - TITANS_GRAD_CLIP).abs() < 1e-12, "{norm}");
}

#[test]
fn titans_zero_step_is_a_no_op() {
    let hyper = TitansHyper {
        eta: 0.9,
        theta: 0.0,
        alpha: 0.0,
    };
    let mut st = titans_state(hyper, 3);
    let before = st.clone();
    let (k, v) = kv(4);
    titans_write(&mut st, &k, &v).unwrap();
    assert_eq!(st.w1, before.w1);
    assert_eq!(st.w2, before.w2);
}

#[test]
fn titans_repeated_writes_reduce_retrieval_error() {
    let mut st = titans_state(TitansHyper::default(), 5);
    let (k, v) = kv(6);
    let e0 = retrieval_error(&st, &k, &v);
    for _ in 0..50 {
        titans_write(&mut st, &k, &v).unwrap();
    }
    let e50 = retrieval_error(&st, &k, &v);
    assert!(e50 < e0, "error {e0} -> {e50}");

    let g = Graph::new();
    let read = titans_read(&st, &g.constant(k.clone())).unwrap().value();
    let err: f64 = read.data().iter().zip(v.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!(err < e0);
}

#[test]
fn titans_zero_output_weights_read_zero() {
    let mut st = titans_state(TitansHyper::default(), 7);
    st.w2 = Tensor::zeros(vec![6, 4]);
    let g = Graph::new();
    let q = g.leaf(Tensor::from_fn(vec![1, 4], |i| i as f64 - 1.5));
    let r = titans_read(&st, &q).unwrap();
    assert!(r.value().data().iter().all(|&x| x == 0.0));
    assert_eq!(titans_read(&st, &q).unwrap().value(), r.value());
}

#[test]
fn titans_guard_skips_non_finite_updates() {
    let hyper = TitansHyper {
        eta: 10.0,
        theta: 0.1,
        alpha: 0.0,
    };
    let mut st = titans_state(hyper, 8);
    st.s1 = Tensor::full(vec![4, 6], 1e308);
    let (k, v) = kv(9);
    let before = st.clone();
    titans_write(&mut st, &k, &v).unwrap();
    assert_eq!(st.skipped, 1);
    assert_eq!((&st.w1, &st.w2), (&before.w1, &before.w2));
    assert!(st.s1.data().iter().chain(st.s2.data()).all(|&x| x == 0.0));
    assert!(titans_write(&mut st, &k.map(|_| f64::NAN), &v).is_err());
}

#[test]
fn titans_readout_blocks_gradients_into_memory_state() {
    let (store, enc) = encoder(EncoderKind::Titans, 13);
    let p = enc.titans.clone().unwrap();
    let g = Graph::new();
    let b = store.bind(&g);
    let (_, r) = enc.encode_history(&b, &enc.init_state(&store), &frames(3, 14)).unwrap();
    assert!(r.grad_barrier);
    r.tokens.unwrap().sum_all().unwrap().backward().unwrap();
    assert!(b.var(p.w_q).grad().is_some());
    for id in [p.w_k, p.w_v, p.w1_init] {
        assert!(b.var(id).grad().is_none());
    }
}

#[test]
fn ssm_readout_passes_gradients_within_the_window() {
    let (store, enc) = encoder(EncoderKind::Ssm, 15);
    let p = enc.ssm.clone().unwrap();
    let g = Graph::new();
    let b = store.bind(&g);
    let (_, r) = enc.encode_history(&b, &enc.init_state(&store), &frames(3, 16)).unwrap();
    r.tokens.unwrap().sum_all().unwrap().backward().unwrap();
    let gw = b.var(p.w_in).grad().unwrap();
    assert!(gw.data().iter().any(|&x| x != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cache_holds_newest_frames_in_order(cap in 1usize..6, n in 0usize..20, seed in any::<u64>()) {
        let mut st = CacheState { capacity: cap, slots: VecDeque::new() };
        for z in frames(n, seed) {
            cache_write(&mut st, &z).unwrap();
            prop_assert!(st.slots.len() <= cap);
        }
        let times: Vec<usize> = st.slots.iter().map(|s| s.0).collect();
        let want: Vec<usize> = (n.saturating_sub(cap)..n).collect();
        prop_assert_eq!(times, want);
    }

    #[test]
    fn titans_random_writes_stay_finite(seed in any::<u64>()) {
        let mut st = titans_state(TitansHyper::default(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let k = Tensor::from_fn(vec![1, 4], |_| rng.gen_range(-3.0..3.0));
            let v = Tensor::from_fn(vec![1, 4], |_| rng.gen_range(-3.0..3.0));
            titans_write(&mut st, &k, &v).unwrap();
        }
        prop_assert!(st.w1.all_finite() && st.w2.all_finite());
    }
}
