//! Two-phase state-recall evaluation, image and latent metrics, rank
//! aggregation and report emission.
//!
//! Phase 1 shows the model the context and the true query so its memory can
//! store them. Phase 2 restarts the sliding window at the context, keeps the
//! memory state, and imagines the query open loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use memstream_tensor::Tensor;

use crate::codec::{Codec, LatentFrame};
use crate::error::{contract, Error, IoContext, Result};
use crate::inject::InjectorKind;
use crate::maze::{Action, FRAME};
use crate::memory::EncoderKind;
use crate::predictor::{LatentSeq, WorldModel};

pub const HORIZONS: [usize; 4] = [5, 10, 20, 50];

const SSIM_WIN: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over channels and all 8×8 windows at stride 1, for `[c, h, w]`
/// images with values in `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return contract(format!("ssim needs equal [c, h, w] shapes, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WIN || w < SSIM_WIN {
        return contract(format!("ssim window {SSIM_WIN} exceeds image {h}×{w}"));
    }
    let n = (SSIM_WIN * SSIM_WIN) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let base = ch * h * w;
        for y0 in 0..=h - SSIM_WIN {
            for x0 in 0..=w - SSIM_WIN {
                let idx = |dy: usize, dx: usize| base + (y0 + dy) * w + x0 + dx;
                let (mut mx, mut my) = (0.0, 0.0);
                for dy in 0..SSIM_WIN {
                    for dx in 0..SSIM_WIN {
                        mx += ad[idx(dy, dx)];
                        my += bd[idx(dy, dx)];
                    }
                }
                mx /= n;
                my /= n;
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WIN {
                    for dx in 0..SSIM_WIN {
                        let (ex, ey) = (ad[idx(dy, dx)] - mx, bd[idx(dy, dx)] - my);
                        vx += ex * ex;
                        vy += ey * ey;
                        cov += ex * ey;
                    }
                }
                let (vx, vy, cov) = (vx / n, vy / n, cov / n);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return contract(format!("mse of shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel().max(1) as f64)
}

/// Mean of `(encode(decode(z)) − z)²` over every element of `preds`.
pub fn cycle_mse(preds: &[LatentFrame], codec: &Codec) -> Result<f64> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    let z = stack_latents(preds)?;
    let round = codec.encode_batch(&codec.decode_batch(&z)?)?;
    mse(&round, &z)
}

fn stack_latents(frames: &[LatentFrame]) -> Result<Tensor> {
    Ok(Tensor::stack(&frames.iter().map(|z| z.tokens.clone()).collect::<Vec<_>>())?)
}

/// Context `[t − context, t)`, query `[t, t + horizon)`, frame indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecallTask {
    pub t: usize,
    pub context: usize,
    pub horizon: usize,
}

impl RecallTask {
    pub fn new(t: usize, context: usize, horizon: usize, episode_len: usize) -> Result<Self> {
        if context == 0 || t < context || t + horizon > episode_len {
            return contract(format!(
                "recall task t={t}, context {context}, horizon {horizon} does not fit an episode of {episode_len} frames"
            ));
        }
        Ok(Self { t, context, horizon })
    }
}

/// What happens to memory during phase 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase1 {
    /// Context and query frames are consumed into memory.
    BurnIn,
    /// Phase 1 is skipped; phase 2 starts from fresh memory.
    Skip,
    /// Phase 1 runs, but its memory updates are discarded.
    Frozen,
}

pub struct RecallOutput {
    pub latents: Vec<LatentFrame>,
    pub frames: Vec<Tensor>,
}

/// Runs both phases on one episode. `latents[i]` encodes frame `i` and
/// `actions[i]` leads from frame `i` to `i + 1`; imagination uses the
/// recorded actions.
pub fn run_recall(
    model: &WorldModel,
    codec: &Codec,
    latents: &[LatentFrame],
    actions: &[Action],
    task: RecallTask,
    phase1: Phase1,
) -> Result<RecallOutput> {
    RecallTask::new(task.t, task.context, task.horizon, latents.len())?;
    if actions.len() + 1 < latents.len() {
        return contract(format!("{} frames need {} actions, got {}", latents.len(), latents.len() - 1, actions.len()));
    }
    if task.context != model.cfg.context {
        return contract(format!("task context {} differs from model context {}", task.context, model.cfg.context));
    }
    let (start, t, h) = (task.t - task.context, task.t, task.horizon);
    let fresh = model.init_memory();
    let mem = match phase1 {
        Phase1::Skip => fresh,
        Phase1::BurnIn => model.consume(&fresh, &latents[start..t + h])?,
        Phase1::Frozen => {
            model.consume(&fresh, &latents[start..t + h])?;
            fresh
        }
    };
    let context = LatentSeq {
        frames: latents[start..t].to_vec(),
        actions: actions[start..t - 1].to_vec(),
    };
    let (preds, _) = model.rollout_imagination(&mem, &context, &actions[t - 1..t - 1 + h])?;
    let frames = if preds.is_empty() {
        Vec::new()
    } else {
        let imgs = codec.decode_batch(&stack_latents(&preds)?)?;
        (0..preds.len()).map(|i| imgs.index0(i)).collect()
    };
    Ok(RecallOutput { latents: preds, frames })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Ssim,
    Lpips,
    ImgMse,
    LatentMse,
    CycleMse,
}

impl Metric {
    pub const RECON: [Metric; 3] = [Metric::Ssim, Metric::Lpips, Metric::ImgMse];
    pub const LATENT: [Metric; 2] = [Metric::LatentMse, Metric::CycleMse];

    pub fn higher_is_better(self) -> bool {
        self == Metric::Ssim
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub encoder: EncoderKind,
    pub injector: InjectorKind,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub img_mse: f64,
    pub latent_mse: f64,
    pub cycle_mse: f64,
}

impl MetricRow {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Ssim => Some(self.ssim),
            Metric::Lpips => self.lpips,
            Metric::ImgMse => Some(self.img_mse),
            Metric::LatentMse => Some(self.latent_mse),
            Metric::CycleMse => Some(self.cycle_mse),
        }
    }

    pub fn label(&self) -> String {
        format!("{}+{}", self.encoder.name(), self.injector.name())
    }
}

/// Per-episode metrics of one recall output against the true query.
pub fn score_recall(
    out: &RecallOutput,
    truth_frames: &[Tensor],
    truth_latents: &[LatentFrame],
    codec: &Codec,
    encoder: EncoderKind,
    injector: InjectorKind,
) -> Result<MetricRow> {
    let h = out.latents.len();
    if truth_frames.len() != h || truth_latents.len() != h || h == 0 {
        return contract(format!(
            "scoring {h} predictions against {} frames and {} latents",
            truth_frames.len(),
            truth_latents.len()
        ));
    }
    let (mut s, mut im, mut lm) = (0.0, 0.0, 0.0);
    for i in 0..h {
        s += ssim(&out.frames[i], &truth_frames[i])?;
        im += mse(&out.frames[i], &truth_frames[i])?;
        lm += mse(&out.latents[i].tokens, &truth_latents[i].tokens)?;
    }
    let n = h as f64;
    Ok(MetricRow {
        encoder,
        injector,
        ssim: s / n,
        lpips: None,
        img_mse: im / n,
        latent_mse: lm / n,
        cycle_mse: cycle_mse(&out.latents, codec)?,
    })
}

/// Element-wise mean of rows sharing one pairing.
pub fn mean_rows(rows: &[MetricRow]) -> Result<MetricRow> {
    let Some(first) = rows.first() else {
        return contract("mean of zero metric rows");
    };
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let lpips = rows.iter().map(|r| r.lpips).collect::<Option<Vec<_>>>().map(|v| v.iter().sum::<f64>() / n);
    Ok(MetricRow {
        encoder: first.encoder,
        injector: first.injector,
        ssim: avg(|r| r.ssim),
        lpips,
        img_mse: avg(|r| r.img_mse),
        latent_mse: avg(|r| r.latent_mse),
        cycle_mse: avg(|r| r.cycle_mse),
    })
}

/// One evaluation episode: true frames, their latents and the actions.
pub struct EvalEpisode {
    pub frames: Vec<Tensor>,
    pub latents: Vec<LatentFrame>,
    pub actions: Vec<Action>,
}

/// Mean metrics over `episodes` for a recall task at split `t`. Episodes
/// are split across `threads` workers; rows are averaged in episode order.
pub fn evaluate(
    model: &WorldModel,
    codec: &Codec,
    episodes: &[EvalEpisode],
    t: usize,
    horizon: usize,
    threads: usize,
) -> Result<MetricRow> {
    if horizon == 0 {
        return contract("evaluation horizon must be positive");
    }
    let one = |ep: &EvalEpisode| -> Result<MetricRow> {
        let task = RecallTask::new(t, model.cfg.context, horizon, ep.latents.len())?;
        let out = run_recall(model, codec, &ep.latents, &ep.actions, task, Phase1::BurnIn)?;
        score_recall(
            &out,
            &ep.frames[t..t + horizon],
            &ep.latents[t..t + horizon],
            codec,
            model.cfg.encoder,
            model.cfg.injector,
        )
    };
    let threads = threads.clamp(1, episodes.len().max(1));
    let chunk = episodes.len().div_ceil(threads).max(1);
    let rows: Vec<Result<MetricRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = episodes
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    mean_rows(&rows.into_iter().collect::<Result<Vec<_>>>()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub rows: Vec<MetricRow>,
    pub recon_rank: Vec<f64>,
    pub latent_rank: Vec<f64>,
}

/// Ordinal ranks (1 = best) of `rows` on one metric; ties keep row order.
pub fn ordinal_ranks(rows: &[MetricRow], metric: Metric) -> Option<Vec<usize>> {
    let vals: Vec<f64> = rows.iter().map(|r| r.get(metric)).collect::<Option<_>>()?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let o = vals[a].total_cmp(&vals[b]);
        if metric.higher_is_better() {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0; rows.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    Some(ranks)
}

/// Averages per-metric ordinal ranks into recon and latent ranks. Metrics
/// missing from any row are left out of their average.
pub fn rank_aggregate(rows: &[MetricRow], recon: &[Metric], latent: &[Metric]) -> Result<RankTable> {
    if recon.is_empty() || latent.is_empty() {
        return contract("rank aggregation needs at least one metric per group");
    }
    if rows.len() < 2 {
        return contract(format!("rank aggregation needs at least 2 rows, got {}", rows.len()));
    }
    let average = |metrics: &[Metric]| -> Result<Vec<f64>> {
        let per: Vec<Vec<usize>> = metrics.iter().filter_map(|&m| ordinal_ranks(rows, m)).collect();
        if per.is_empty() {
            return contract(format!("none of {metrics:?} is available on every row"));
        }
        Ok((0..rows.len())
            .map(|i| per.iter().map(|r| r[i] as f64).sum::<f64>() / per.len() as f64)
            .collect())
    };
    Ok(RankTable {
        rows: rows.to_vec(),
        recon_rank: average(recon)?,
        latent_rank: average(latent)?,
    })
}

pub const CSV_HEADER: [&str; 8] = [
    "encoder",
    "injector",
    "ssim",
    "img_mse",
    "latent_mse",
    "cycle_mse",
    "recon_rank",
    "latent_rank",
];

/// Writes `report.csv` (shortest round-trip doubles) and `report.md` into
/// `dir`.
pub fn emit_report(table: &RankTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).io_ctx(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(CSV_HEADER)?;
    for (i, r) in table.rows.iter().enumerate() {
        w.write_record([
            r.encoder.name().to_string(),
            r.injector.name().to_string(),
            r.ssim.to_string(),
            r.img_mse.to_string(),
            r.latent_mse.to_string(),
            r.cycle_mse.to_string(),
            table.recon_rank[i].to_string(),
            table.latent_rank[i].to_string(),
        ])?;
    }
    w.flush().io_ctx(|| format!("writing {}", csv_path.display()))?;

    let md_path = dir.join("report.md");
    let mut md = String::from(
        "| Encoding | Injection | SSIM | MSE | Latent MSE | Cycle MSE | Recon rank | Latent rank |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for (i, r) in table.rows.iter().enumerate() {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.3} | {:.3} |\n",
            r.encoder.name(),
            r.injector.name(),
            r.ssim,
            r.img_mse,
            r.latent_mse,
            r.cycle_mse,
            table.recon_rank[i],
            table.latent_rank[i]
        ));
    }
    std::fs::write(&md_path, md).io_ctx(|| format!("writing {}", md_path.display()))
}

/// Parses a `report.csv` written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<RankTable> {
    let shown = path.display().to_string();
    let bad = |msg: String| Error::Format {
        path: shown.clone(),
        msg,
    };
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let mut table = RankTable {
        rows: Vec::new(),
        recon_rank: Vec::new(),
        latent_rank: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| bad(format!("column {} is not a number: {:?}", CSV_HEADER[i], &rec[i])))
        };
        table.rows.push(MetricRow {
            encoder: EncoderKind::parse(&rec[0]).ok_or_else(|| bad(format!("unknown encoder {:?}", &rec[0])))?,
            injector: InjectorKind::parse(&rec[1]).ok_or_else(|| bad(format!("unknown injector {:?}", &rec[1])))?,
            ssim: num(2)?,
            lpips: None,
            img_mse: num(3)?,
            latent_mse: num(4)?,
            cycle_mse: num(5)?,
        });
        table.recon_rank.push(num(6)?);
        table.latent_rank.push(num(7)?);
    }
    Ok(table)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Filmstrip PNG: the truth row on top, then one row per model, one
/// `FRAME × FRAME` tile per step.
pub fn emit_strip(truth: &[Tensor], preds: &[Vec<Tensor>], path: &Path) -> Result<()> {
    let cols = truth.len();
    if cols == 0 {
        return contract("filmstrip needs at least one frame");
    }
    if let Some(bad) = preds.iter().find(|p| p.len() != cols) {
        return contract(format!("filmstrip rows of {} and {} frames", cols, bad.len()));
    }
    let rows: Vec<&[Tensor]> = std::iter::once(truth).chain(preds.iter().map(|p| p.as_slice())).collect();
    let (w, h) = (cols * FRAME, rows.len() * FRAME);
    let mut img = vec![0u8; w * h * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.shape() != [3, FRAME, FRAME] {
                return contract(format!("filmstrip tile of shape {:?}", tile.shape()));
            }
            let d = tile.data();
            for y in 0..FRAME {
                for x in 0..FRAME {
                    let o = ((r * FRAME + y) * w + c * FRAME + x) * 3;
                    for ch in 0..3 {
                        img[o + ch] = to_byte(d[ch * FRAME * FRAME + y * FRAME + x]);
                    }
                }
            }
        }
    }
    let file = File::create(path).io_ctx(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&img)?;
    writer.finish()?;
    Ok(())
}

/// Writes `s` to `path`, creating parent directories.
pub(crate) fn write_text(path: &Path, s: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).io_ctx(|| format!("creating {}", dir.display()))?;
    }
    let mut f = File::create(path).io_ctx(|| format!("creating {}", path.display()))?;
    f.write_all(s.as_bytes()).io_ctx(|| format!("writing {}", path.display()))
}
