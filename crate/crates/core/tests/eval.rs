#[path = "common/reference.rs"]
mod reference;

use memstream::codec::{Codec, CodecConfig, LatentFrame};
use memstream::eval::*;
use memstream::inject::InjectorKind;
use memstream::maze::{generate_episode, Episode, FRAME};
use memstream::memory::{CachePool, EncoderKind, TitansHyper};
use memstream::predictor::{PredictorConfig, WorldModel};
use memstream_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn table_ranks_are_reproduced() {
    let t = rank_aggregate(&reference::rows(), &Metric::RECON, &Metric::LATENT).unwrap();
    for (i, (recon, latent)) in reference::reference_ranks().into_iter().enumerate() {
        let label = t.rows[i].label();
        assert!((t.recon_rank[i] - recon).abs() <= 0.005, "{label} recon {} vs {recon}", t.recon_rank[i]);
        assert!((t.latent_rank[i] - latent).abs() <= 0.005, "{label} latent {} vs {latent}", t.latent_rank[i]);
    }
}

#[test]
fn ranks_are_within_bounds() {
    let t = rank_aggregate(&reference::rows(), &Metric::RECON, &Metric::LATENT).unwrap();
    for r in t.recon_rank.iter().chain(&t.latent_rank) {
        assert!((1.0..=16.0).contains(r));
    }
    for m in Metric::RECON.into_iter().chain(Metric::LATENT) {
        let mut ranks = ordinal_ranks(&t.rows, m).unwrap();
        ranks.sort_unstable();
        assert_eq!(ranks, (1..=16).collect::<Vec<_>>());
    }
}

fn episode(seed: u64, len: usize) -> Episode {
    generate_episode(seed, len).unwrap()
}

#[test]
fn ssim_falls_as_noise_grows() {
    let ep = episode(1, 4);
    let x = ep.frame_tensor(2);
    let sigmas = [0.02, 0.05, 0.1, 0.2, 0.4];
    let means: Vec<f64> = sigmas
        .iter()
        .map(|&sigma| {
            (0..20u64)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let n = Normal::new(0.0, sigma).unwrap();
                    let noisy = x.map(|v| (v + n.sample(&mut rng)).clamp(0.0, 1.0));
                    ssim(&x, &noisy).unwrap()
                })
                .sum::<f64>()
                / 20.0
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    assert!(means.iter().all(|s| (-1.0..=1.0).contains(s)));
}

#[test]
fn ssim_of_constant_images_follows_the_stability_constants() {
    let c1 = (0.01f64 * 1.0).powi(2);
    let s = ssim(&Tensor::zeros(vec![3, 16, 16]), &Tensor::ones(vec![3, 16, 16])).unwrap();
    assert!((s - c1 / (1.0 + c1)).abs() < 1e-12);
    assert!(s < 1e-3);
}

fn row(enc: EncoderKind, inj: InjectorKind, v: f64) -> MetricRow {
    MetricRow {
        encoder: enc,
        injector: inj,
        ssim: 0.5 + v,
        lpips: None,
        img_mse: 0.1 / (1.0 + v),
        latent_mse: 1.0 / 3.0 + v,
        cycle_mse: v * std::f64::consts::PI,
    }
}

fn sixteen_rows() -> Vec<MetricRow> {
    reference::TABLE.iter().enumerate().map(|(i, &(e, j, _))| row(e, j, i as f64 * 0.0137)).collect()
}

#[test]
fn report_round_trips_and_is_byte_stable() {
    let table = rank_aggregate(&sixteen_rows(), &Metric::RECON, &Metric::LATENT).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    emit_report(&table, &a).unwrap();
    emit_report(&table, &b).unwrap();
    assert_eq!(read_report(&a.join("report.csv")).unwrap(), table);
    for f in ["report.csv", "report.md"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let md = std::fs::read_to_string(a.join("report.md")).unwrap();
    let data_rows = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Encoding")).count();
    assert_eq!(data_rows, 16);
    let header = std::fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "encoder,injector,ssim,img_mse,latent_mse,cycle_mse,recon_rank,latent_rank");
}

#[test]
fn corrupt_report_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.csv");
    std::fs::write(&p, "encoder,injector\nnone,none\n").unwrap();
    assert!(read_report(&p).is_err());
    std::fs::write(&p, format!("{}\nnone,none,x,1,1,1,1,1\n", CSV_HEADER.join(","))).unwrap();
    assert!(read_report(&p).is_err());
}

fn decode_png(path: &std::path::Path) -> (usize, usize, Vec<u8>) {
    let dec = png::Decoder::new(std::fs::File::open(path).unwrap());
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.color_type, png::ColorType::Rgb);
    buf.truncate(info.buffer_size());
    (info.width as usize, info.height as usize, buf)
}

#[test]
fn strip_layout_and_truth_row() {
    let ep = episode(3, 20);
    let truth: Vec<Tensor> = (0..20).map(|i| ep.frame_tensor(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let preds: Vec<Vec<Tensor>> = (0..4)
        .map(|_| (0..20).map(|_| Tensor::from_fn(vec![3, FRAME, FRAME], |_| rng.gen())).collect())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
    emit_strip(&truth, &preds, &p1).unwrap();
    emit_strip(&truth, &preds, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let (w, h, px) = decode_png(&p1);
    assert_eq!((w, h), (20 * FRAME, 5 * FRAME));
    for (c, frame) in ep.frames.iter().enumerate() {
        for y in 0..FRAME {
            let at = (y * w + c * FRAME) * 3;
            assert_eq!(&px[at..at + FRAME * 3], &frame[y * FRAME * 3..(y + 1) * FRAME * 3], "tile {c} row {y}");
        }
    }
    assert!(emit_strip(&truth, &[preds[0][..19].to_vec()], &p1).is_err());
    assert!(emit_strip(&[], &[], &p1).is_err());
}

fn codec() -> Codec {
    Codec::new(
        CodecConfig {
            image: FRAME,
            c1: 4,
            c2: 4,
            d_lat: 3,
        },
        1,
    )
    .unwrap()
}

#[test]
fn cycle_error_flags_off_manifold_latents() {
    let c = codec();
    let ep = episode(5, 6);
    let real: Vec<LatentFrame> = (0..6).map(|i| c.encode_frame(&ep.frame_tensor(i), i).unwrap()).collect();
    let floor = cycle_mse(&real, &c).unwrap();
    let far: Vec<LatentFrame> = real
        .iter()
        .map(|z| LatentFrame {
            tokens: z.tokens.map(|_| 50.0),
            source_time: z.source_time,
        })
        .collect();
    let off = cycle_mse(&far, &c).unwrap();
    assert!(floor >= 0.0);
    assert!(off > 100.0 * floor, "floor {floor}, off-manifold {off}");
}

fn model(encoder: EncoderKind, injector: InjectorKind) -> WorldModel {
    WorldModel::new(PredictorConfig {
        d_lat: 3,
        grid: FRAME / 4,
        patch: 4,
        dim: 16,
        layers: 2,
        heads: 2,
        hidden_mult: 2,
        context: 9,
        encoder,
        injector,
        cache_capacity: 16,
        cache_pool: CachePool::Group(4),
        readout: 4,
        d_mem: 8,
        titans_hidden: 8,
        titans: TitansHyper::default(),
        lora_rank: 2,
        seed: 2,
    })
    .unwrap()
}

struct Data {
    codec: Codec,
    ep: EvalEpisode,
}

fn data(seed: u64) -> Data {
    let codec = codec();
    let e = episode(seed, 24);
    let frames: Vec<Tensor> = (0..e.len()).map(|i| e.frame_tensor(i)).collect();
    let latents = frames.iter().enumerate().map(|(i, f)| codec.encode_frame(f, i).unwrap()).collect();
    Data {
        codec,
        ep: EvalEpisode {
            frames,
            latents,
            actions: e.actions,
        },
    }
}

fn recall(m: &WorldModel, d: &Data, h: usize, phase1: Phase1) -> RecallOutput {
    let task = RecallTask::new(9, 9, h, d.ep.latents.len()).unwrap();
    run_recall(m, &d.codec, &d.ep.latents, &d.ep.actions, task, phase1).unwrap()
}

#[test]
fn burn_in_is_irrelevant_without_memory() {
    let d = data(6);
    let m = model(EncoderKind::None, InjectorKind::None);
    let a = recall(&m, &d, 5, Phase1::BurnIn);
    let b = recall(&m, &d, 5, Phase1::Skip);
    for (x, y) in a.latents.iter().zip(&b.latents) {
        assert!(x.tokens.max_abs_diff(&y.tokens).unwrap() <= 1e-12);
    }
}

#[test]
fn frozen_memory_reproduces_the_no_burn_in_run() {
    let d = data(7);
    for (enc, inj) in [
        (EncoderKind::Cache, InjectorKind::Prepend),
        (EncoderKind::Ssm, InjectorKind::Prepend),
        (EncoderKind::Titans, InjectorKind::Prepend),
    ] {
        let m = model(enc, inj);
        let frozen = recall(&m, &d, 5, Phase1::Frozen);
        let skip = recall(&m, &d, 5, Phase1::Skip);
        let burn = recall(&m, &d, 5, Phase1::BurnIn);
        assert_eq!(frozen.latents, skip.latents, "{enc:?}");
        assert_eq!(frozen.frames, skip.frames);
        assert_ne!(burn.latents, skip.latents, "{enc:?} burn-in had no effect");
    }
}

#[test]
fn recall_outputs_are_deterministic_and_sized() {
    let d = data(8);
    let m = model(EncoderKind::Cache, InjectorKind::Prepend);
    let a = recall(&m, &d, 6, Phase1::BurnIn);
    let b = recall(&m, &d, 6, Phase1::BurnIn);
    assert_eq!(a.latents, b.latents);
    assert_eq!(a.frames.len(), 6);
    assert!(a.frames.iter().all(|f| f.shape() == [3, FRAME, FRAME]));
    let empty = recall(&m, &d, 0, Phase1::BurnIn);
    assert!(empty.latents.is_empty() && empty.frames.is_empty());
    let bad = RecallTask {
        t: 20,
        context: 9,
        horizon: 10,
    };
    assert!(run_recall(&m, &d.codec, &d.ep.latents, &d.ep.actions, bad, Phase1::BurnIn).is_err());
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let d0 = data(9);
    let d1 = data(10);
    let m = model(EncoderKind::Ssm, InjectorKind::CrossAttention);
    let eps = vec![d0.ep, d1.ep];
    let one = evaluate(&m, &d0.codec, &eps, 9, 3, 1).unwrap();
    let two = evaluate(&m, &d0.codec, &eps, 9, 3, 2).unwrap();
    assert_eq!(one, two);
    assert!(one.ssim <= 1.0 && one.img_mse >= 0.0 && one.latent_mse >= 0.0 && one.cycle_mse >= 0.0);
    assert!(evaluate(&m, &d0.codec, &eps, 9, 0, 1).is_err());
}
