//! Experiment configuration, the 16-configuration matrix and the stage
//! pipeline `gen-data → pretrain-codec → train → eval → report`.
//!
//! Configuration is plain `key = value` text. Values resolve in layers:
//! profile defaults, then a config file, then command-line overrides. Every
//! output directory receives `config.txt`, the fully resolved configuration;
//! a stage whose outputs exist with a matching frozen configuration is
//! skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use memstream_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::codec::{decoder_step, pretrain_autoencoder, Codec, CodecConfig, LatentFrame, PretrainConfig};
use crate::error::{contract, Error, IoContext, Result};
use crate::eval::{
    emit_report, emit_strip, evaluate, mean_rows, rank_aggregate, run_recall, write_text, EvalEpisode, Metric,
    MetricRow, Phase1, RankTable, RecallTask,
};
use crate::inject::InjectorKind;
use crate::maze::{bytes_to_chw, generate_episode, read_episodes, write_episodes, Episode, FRAME};
use crate::memory::{CachePool, EncoderKind, MemoryState, TitansHyper};
use crate::nn::stable_hash;
use crate::optim::OptimState;
use crate::predictor::{training_step, PredictorConfig, TrainItem, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
    Tiny,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
            Profile::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Profile::Desk, Profile::Paper, Profile::Tiny].into_iter().find(|p| p.name() == s)
    }
}

/// Which stage a key influences; decides when cached outputs are reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Run,
    Data,
    Codec,
    Model,
    Train,
    Eval,
}

const KEYS: &[(&str, Group)] = &[
    ("profile", Group::Run),
    ("seed", Group::Train),
    ("data_seed", Group::Data),
    ("train_episodes", Group::Data),
    ("eval_episodes", Group::Data),
    ("episode_len", Group::Data),
    ("c1", Group::Codec),
    ("c2", Group::Codec),
    ("d_lat", Group::Codec),
    ("codec_epochs", Group::Codec),
    ("codec_frames", Group::Codec),
    ("codec_batch", Group::Codec),
    ("codec_lr", Group::Codec),
    ("dim", Group::Model),
    ("layers", Group::Model),
    ("heads", Group::Model),
    ("hidden_mult", Group::Model),
    ("context", Group::Model),
    ("patch", Group::Model),
    ("cache_capacity", Group::Model),
    ("cache_pool", Group::Model),
    ("readout", Group::Model),
    ("d_mem", Group::Model),
    ("titans_hidden", Group::Model),
    ("titans_eta", Group::Model),
    ("titans_theta", Group::Model),
    ("titans_alpha", Group::Model),
    ("lora_rank", Group::Model),
    ("epochs", Group::Train),
    ("batch", Group::Train),
    ("window", Group::Train),
    ("lr", Group::Train),
    ("weight_decay", Group::Train),
    ("decoder_lr", Group::Train),
    ("horizons", Group::Eval),
    ("eval_t", Group::Eval),
    ("report_horizon", Group::Eval),
    ("strip_horizon", Group::Eval),
    ("encoder", Group::Run),
    ("injector", Group::Run),
    ("out", Group::Run),
    ("parallel", Group::Run),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Model initialization and data order.
    pub seed: u64,
    /// Episode generation and codec pretraining.
    pub data_seed: u64,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub episode_len: usize,
    pub c1: usize,
    pub c2: usize,
    pub d_lat: usize,
    pub codec_epochs: usize,
    /// Training frames sampled for codec pretraining.
    pub codec_frames: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_mult: usize,
    pub context: usize,
    pub patch: usize,
    pub cache_capacity: usize,
    pub cache_pool: CachePool,
    pub readout: usize,
    pub d_mem: usize,
    pub titans_hidden: usize,
    pub titans: TitansHyper,
    pub lora_rank: usize,
    pub epochs: usize,
    /// Episodes per optimizer step.
    pub batch: usize,
    /// Frames per training window, context plus one.
    pub window: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decoder_lr: f64,
    pub horizons: Vec<usize>,
    /// Split index of recall tasks.
    pub eval_t: usize,
    pub report_horizon: usize,
    pub strip_horizon: usize,
    pub encoder: EncoderKind,
    pub injector: InjectorKind,
    pub out: PathBuf,
    pub parallel: usize,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            data_seed: 0,
            train_episodes: 512,
            eval_episodes: 64,
            episode_len: 64,
            c1: 16,
            c2: 32,
            d_lat: 16,
            codec_epochs: 8,
            codec_frames: 4096,
            codec_batch: 16,
            codec_lr: 2e-3,
            dim: 32,
            layers: 4,
            heads: 4,
            hidden_mult: 4,
            context: 9,
            patch: 4,
            cache_capacity: 16,
            cache_pool: CachePool::Group(4),
            readout: 4,
            d_mem: 32,
            titans_hidden: 64,
            titans: TitansHyper::default(),
            lora_rank: 8,
            epochs: 5,
            batch: 8,
            window: 10,
            lr: 1e-3,
            weight_decay: 1e-2,
            decoder_lr: 3e-4,
            horizons: vec![5, 10, 20, 50],
            eval_t: 9,
            report_horizon: 10,
            strip_horizon: 20,
            encoder: EncoderKind::None,
            injector: InjectorKind::None,
            out: PathBuf::from("runs"),
            parallel: 1,
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            c1: 32,
            c2: 64,
            d_lat: 128,
            codec_frames: 32768,
            dim: 128,
            patch: 1,
            cache_pool: CachePool::Tokens,
            d_mem: 128,
            titans_hidden: 256,
            epochs: 20,
            ..Self::desk()
        }
    }

    /// Seconds-scale settings for pipeline checks.
    pub fn tiny() -> Self {
        Self {
            profile: Profile::Tiny,
            train_episodes: 6,
            eval_episodes: 3,
            c1: 4,
            c2: 4,
            d_lat: 4,
            codec_epochs: 1,
            codec_frames: 64,
            dim: 16,
            heads: 2,
            d_mem: 16,
            titans_hidden: 16,
            lora_rank: 2,
            epochs: 1,
            batch: 3,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
            Profile::Tiny => Self::tiny(),
        }
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|k| k.0)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "profile" => self.profile.name().into(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "train_episodes" => self.train_episodes.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "episode_len" => self.episode_len.to_string(),
            "c1" => self.c1.to_string(),
            "c2" => self.c2.to_string(),
            "d_lat" => self.d_lat.to_string(),
            "codec_epochs" => self.codec_epochs.to_string(),
            "codec_frames" => self.codec_frames.to_string(),
            "codec_batch" => self.codec_batch.to_string(),
            "codec_lr" => self.codec_lr.to_string(),
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "hidden_mult" => self.hidden_mult.to_string(),
            "context" => self.context.to_string(),
            "patch" => self.patch.to_string(),
            "cache_capacity" => self.cache_capacity.to_string(),
            "cache_pool" => self.cache_pool.name(),
            "readout" => self.readout.to_string(),
            "d_mem" => self.d_mem.to_string(),
            "titans_hidden" => self.titans_hidden.to_string(),
            "titans_eta" => self.titans.eta.to_string(),
            "titans_theta" => self.titans.theta.to_string(),
            "titans_alpha" => self.titans.alpha.to_string(),
            "lora_rank" => self.lora_rank.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "window" => self.window.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "decoder_lr" => self.decoder_lr.to_string(),
            "horizons" => list(&self.horizons),
            "eval_t" => self.eval_t.to_string(),
            "report_horizon" => self.report_horizon.to_string(),
            "strip_horizon" => self.strip_horizon.to_string(),
            "encoder" => self.encoder.name().into(),
            "injector" => self.injector.name().into(),
            "out" => self.out.display().to_string(),
            "parallel" => self.parallel.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form. The error message omits location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value {v:?} for {key}"))
        }
        let v = value.trim();
        match key {
            "profile" => self.profile = Profile::parse(v).ok_or_else(|| format!("unknown profile {v:?}"))?,
            "seed" => self.seed = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "train_episodes" => self.train_episodes = num(key, v)?,
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            "episode_len" => self.episode_len = num(key, v)?,
            "c1" => self.c1 = num(key, v)?,
            "c2" => self.c2 = num(key, v)?,
            "d_lat" => self.d_lat = num(key, v)?,
            "codec_epochs" => self.codec_epochs = num(key, v)?,
            "codec_frames" => self.codec_frames = num(key, v)?,
            "codec_batch" => self.codec_batch = num(key, v)?,
            "codec_lr" => self.codec_lr = num(key, v)?,
            "dim" => self.dim = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "hidden_mult" => self.hidden_mult = num(key, v)?,
            "context" => self.context = num(key, v)?,
            "patch" => self.patch = num(key, v)?,
            "cache_capacity" => self.cache_capacity = num(key, v)?,
            "cache_pool" => self.cache_pool = CachePool::parse(v).ok_or_else(|| format!("unknown cache_pool {v:?}"))?,
            "readout" => self.readout = num(key, v)?,
            "d_mem" => self.d_mem = num(key, v)?,
            "titans_hidden" => self.titans_hidden = num(key, v)?,
            "titans_eta" => self.titans.eta = num(key, v)?,
            "titans_theta" => self.titans.theta = num(key, v)?,
            "titans_alpha" => self.titans.alpha = num(key, v)?,
            "lora_rank" => self.lora_rank = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "window" => self.window = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "decoder_lr" => self.decoder_lr = num(key, v)?,
            "horizons" => {
                self.horizons = v
                    .split(',')
                    .map(|h| num::<usize>(key, h.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "eval_t" => self.eval_t = num(key, v)?,
            "report_horizon" => self.report_horizon = num(key, v)?,
            "strip_horizon" => self.strip_horizon = num(key, v)?,
            "encoder" => self.encoder = EncoderKind::parse(v).ok_or_else(|| format!("unknown encoder {v:?}"))?,
            "injector" => self.injector = InjectorKind::parse(v).ok_or_else(|| format!("unknown injector {v:?}"))?,
            "out" => self.out = PathBuf::from(v),
            "parallel" => self.parallel = num(key, v)?,
            _ => {
                return Err(format!(
                    "unknown key {key:?}; valid keys: {}",
                    Self::keys().collect::<Vec<_>>().join(", ")
                ))
            }
        }
        Ok(())
    }

    /// Resolved configuration as `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        self.text_for(|_| true)
    }

    fn text_for(&self, keep: impl Fn(Group) -> bool) -> String {
        let mut s = String::new();
        for &(k, g) in KEYS {
            if keep(g) {
                let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
            }
        }
        s
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            image: FRAME,
            c1: self.c1,
            c2: self.c2,
            d_lat: self.d_lat,
        }
    }

    pub fn predictor(&self, encoder: EncoderKind, injector: InjectorKind) -> PredictorConfig {
        PredictorConfig {
            d_lat: self.d_lat,
            grid: FRAME / 4,
            patch: self.patch,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            hidden_mult: self.hidden_mult,
            context: self.context,
            encoder,
            injector,
            cache_capacity: self.cache_capacity,
            cache_pool: self.cache_pool,
            readout: self.readout,
            d_mem: self.d_mem,
            titans_hidden: self.titans_hidden,
            titans: self.titans,
            lora_rank: self.lora_rank,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window != self.context + 1 {
            return bad(format!("window {} must equal context + 1 = {}", self.window, self.context + 1));
        }
        if self.episode_len < self.window {
            return bad(format!("episode_len {} is shorter than a window", self.episode_len));
        }
        if self.train_episodes == 0 || self.eval_episodes == 0 || self.batch == 0 || self.parallel == 0 {
            return bad("train_episodes, eval_episodes, batch and parallel must be positive".into());
        }
        if self.codec_frames == 0 || self.codec_batch == 0 {
            return bad("codec_frames and codec_batch must be positive".into());
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return bad("horizons must be a nonempty list of positive lengths".into());
        }
        let longest = self.horizons.iter().copied().max().unwrap_or(0).max(self.strip_horizon);
        if self.eval_t < self.context || self.eval_t + longest > self.episode_len {
            return bad(format!(
                "eval_t {} needs context {} before it and {longest} frames after it in episodes of {}",
                self.eval_t, self.context, self.episode_len
            ));
        }
        if !self.horizons.contains(&self.report_horizon) {
            return bad(format!("report_horizon {} is not one of the horizons", self.report_horizon));
        }
        if self.strip_horizon == 0 {
            return bad("strip_horizon must be positive".into());
        }
        for (e, i) in std::iter::once((self.encoder, self.injector)).chain(matrix()) {
            self.predictor(e, i).validate().map_err(|err| Error::Config(format!("{}+{}: {err}", e.name(), i.name())))?;
        }
        Ok(())
    }
}

/// Applies `key = value` lines. `#` starts a comment.
pub fn apply_text(cfg: &mut ExperimentConfig, text: &str, origin: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", i + 1)));
        };
        cfg.set(k.trim(), v).map_err(|m| Error::Config(format!("{origin}:{}: {m}", i + 1)))?;
    }
    Ok(())
}

fn profile_in(text: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let (k, v) = l.split('#').next()?.split_once('=')?;
        (k.trim() == "profile").then(|| v.trim().to_string())
    })
}

/// Resolves profile defaults, then `file`, then `overrides`.
pub fn load_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = match file {
        Some(p) => std::fs::read_to_string(p).io_ctx(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let profile = overrides
        .iter()
        .rev()
        .find(|(k, _)| k == "profile")
        .map(|(_, v)| v.clone())
        .or_else(|| profile_in(&text))
        .unwrap_or_else(|| "desk".into());
    let profile = Profile::parse(&profile).ok_or_else(|| Error::Config(format!("unknown profile {profile:?}")))?;
    let mut cfg = ExperimentConfig::for_profile(profile);
    if let Some(p) = file {
        apply_text(&mut cfg, &text, &p.display().to_string())?;
    }
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|m| Error::Config(format!("--{}: {m}", k.replace('_', "-"))))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Baseline first, then every encoder with every injector.
pub fn matrix() -> Vec<(EncoderKind, InjectorKind)> {
    std::iter::once((EncoderKind::None, InjectorKind::None))
        .chain(EncoderKind::ALL.into_iter().flat_map(|e| InjectorKind::ALL.into_iter().map(move |i| (e, i))))
        .collect()
}

pub fn tag(encoder: EncoderKind, injector: InjectorKind) -> String {
    format!("{}-{}", encoder.name(), injector.name())
}

/// Output file locations under the configured root.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { root: cfg.out.clone() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train_file(&self) -> PathBuf {
        self.data_dir().join("train.mmep")
    }

    pub fn eval_file(&self) -> PathBuf {
        self.data_dir().join("eval.mmep")
    }

    pub fn codec_dir(&self) -> PathBuf {
        self.root.join("codec")
    }

    pub fn codec_ckpt(&self) -> PathBuf {
        self.codec_dir().join("codec.ckpt")
    }

    pub fn model_dir(&self, seed: u64, e: EncoderKind, i: InjectorKind) -> PathBuf {
        self.root.join("models").join(format!("seed{seed}")).join(tag(e, i))
    }

    pub fn model_ckpt(&self, seed: u64, e: EncoderKind, i: InjectorKind) -> PathBuf {
        self.model_dir(seed, e, i).join("model.ckpt")
    }

    pub fn eval_dir(&self, seed: u64, e: EncoderKind, i: InjectorKind) -> PathBuf {
        self.root.join("eval").join(format!("seed{seed}")).join(tag(e, i))
    }

    pub fn metrics_file(&self, seed: u64, e: EncoderKind, i: InjectorKind) -> PathBuf {
        self.eval_dir(seed, e, i).join("metrics.csv")
    }

    pub fn report_dir(&self, seed: u64) -> PathBuf {
        self.root.join("report").join(format!("seed{seed}"))
    }
}

fn freeze(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.txt"), &cfg.to_text())
}

/// True when `outputs` exist and `dir/config.txt` agrees with `cfg` on
/// every key of `groups`.
fn up_to_date(dir: &Path, cfg: &ExperimentConfig, groups: &[Group], outputs: &[PathBuf]) -> bool {
    if !outputs.iter().all(|p| p.exists()) {
        return false;
    }
    let Ok(text) = std::fs::read_to_string(dir.join("config.txt")) else {
        return false;
    };
    let mut frozen = ExperimentConfig::desk();
    if apply_text(&mut frozen, &text, "frozen").is_err() {
        return false;
    }
    let keep = |g: Group| groups.contains(&g);
    frozen.text_for(keep) == cfg.text_for(keep)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing {
            path: path.to_path_buf(),
            hint: hint.into(),
        })
    }
}

fn episode_seed(data_seed: u64, split: &str, i: usize) -> u64 {
    stable_hash(&format!("{split}/{data_seed}/{i}"))
}

/// Runs `f` over `0..n` on `threads` workers, returning results in index
/// order.
fn par_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let l = Layout::new(cfg);
    let dir = l.data_dir();
    if up_to_date(&dir, cfg, &[Group::Data], &[l.train_file(), l.eval_file()]) {
        log::info!("data in {} is up to date", dir.display());
        return Ok(());
    }
    std::fs::create_dir_all(&dir).io_ctx(|| format!("creating {}", dir.display()))?;
    for (split, n, path) in [
        ("train", cfg.train_episodes, l.train_file()),
        ("eval", cfg.eval_episodes, l.eval_file()),
    ] {
        let eps = par_map(n, cfg.parallel, |i| generate_episode(episode_seed(cfg.data_seed, split, i), cfg.episode_len))?;
        write_episodes(&path, &eps)?;
        log::info!("wrote {n} {split} episodes to {}", path.display());
    }
    freeze(&dir, cfg)
}

fn frames_tensor(episodes: &[Episode], ids: &[(usize, usize)]) -> Result<Tensor> {
    let per = 3 * FRAME * FRAME;
    let mut data = Vec::with_capacity(ids.len() * per);
    for &(e, t) in ids {
        data.extend_from_slice(bytes_to_chw(&episodes[e].frames[t]).data());
    }
    Ok(Tensor::new(vec![ids.len(), 3, FRAME, FRAME], data)?)
}

fn sample_frames(episodes: &[Episode], n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> =
        episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(n);
    all
}

pub fn pretrain_codec(cfg: &ExperimentConfig) -> Result<()> {
    let l = Layout::new(cfg);
    let dir = l.codec_dir();
    if up_to_date(&dir, cfg, &[Group::Data, Group::Codec], &[l.codec_ckpt()]) {
        log::info!("codec in {} is up to date", dir.display());
        return Ok(());
    }
    require(&l.train_file(), "run `memstream gen-data` first")?;
    let train = read_episodes(&l.train_file())?;
    let frames = frames_tensor(&train, &sample_frames(&train, cfg.codec_frames, cfg.data_seed ^ stable_hash("codec")))?;
    let mut codec = Codec::new(cfg.codec(), cfg.data_seed)?;
    let history = pretrain_autoencoder(
        &mut codec,
        &frames,
        &PretrainConfig {
            epochs: cfg.codec_epochs,
            batch: cfg.codec_batch,
            lr: cfg.codec_lr,
            weight_decay: 0.0,
            seed: cfg.data_seed,
        },
    )?;
    let mut ck = Checkpoint::new(cfg.text_for(|g| matches!(g, Group::Data | Group::Codec)));
    ck.push_store("", &codec.store);
    ck.write(&l.codec_ckpt())?;
    let mut log_text = String::from("epoch,mse\n");
    for (i, v) in history.iter().enumerate() {
        let _ = writeln!(log_text, "{},{v}", i + 1);
    }
    write_text(&dir.join("pretrain_loss.csv"), &log_text)?;
    if l.eval_file().exists() {
        let mse = heldout_mse(&codec, &read_episodes(&l.eval_file())?, cfg.data_seed)?;
        log::info!("codec held-out reconstruction mse {mse:.5}");
        write_text(&dir.join("heldout_mse.txt"), &format!("{mse}\n"))?;
    }
    freeze(&dir, cfg)
}

/// Frames sampled from `episodes` for held-out reconstruction checks.
const HELDOUT_FRAMES: usize = 256;

/// Reconstruction MSE of `codec` on up to 256 frames sampled from `episodes`.
pub fn heldout_mse(codec: &Codec, episodes: &[Episode], seed: u64) -> Result<f64> {
    let ids = sample_frames(episodes, HELDOUT_FRAMES, seed ^ stable_hash("heldout"));
    let mut total = 0.0;
    for chunk in ids.chunks(32) {
        let x = frames_tensor(episodes, chunk)?;
        let y = codec.decode_batch(&codec.encode_batch(&x)?)?;
        total += crate::eval::mse(&x, &y)? * chunk.len() as f64;
    }
    Ok(total / ids.len().max(1) as f64)
}

pub fn load_codec(cfg: &ExperimentConfig) -> Result<Codec> {
    let l = Layout::new(cfg);
    let path = l.codec_ckpt();
    require(&path, "run `memstream pretrain-codec` first")?;
    let ck = Checkpoint::read(&path)?;
    let expected = cfg.text_for(|g| matches!(g, Group::Data | Group::Codec));
    if ck.header != expected {
        return Err(Error::Config(format!(
            "{} was built with different data or codec settings; rerun `memstream pretrain-codec`",
            path.display()
        )));
    }
    let mut codec = Codec::new(cfg.codec(), cfg.data_seed)?;
    ck.load_store("", &mut codec.store, &path)?;
    Ok(codec)
}

/// Episodes with their encoder latents.
pub struct EncodedSplit {
    pub episodes: Vec<Episode>,
    pub latents: Vec<Vec<LatentFrame>>,
}

pub fn encode_split(codec: &Codec, episodes: Vec<Episode>, threads: usize) -> Result<EncodedSplit> {
    let latents = par_map(episodes.len(), threads, |e| {
        let ep = &episodes[e];
        let ids: Vec<(usize, usize)> = (0..ep.len()).map(|t| (e, t)).collect();
        let z = codec.encode_batch(&frames_tensor(&episodes, &ids)?)?;
        Ok((0..ep.len())
            .map(|t| LatentFrame {
                tokens: z.index0(t),
                source_time: t,
            })
            .collect())
    })?;
    Ok(EncodedSplit { episodes, latents })
}

/// Loaded codec plus encoded training data shared by every configuration.
pub struct Prepared {
    pub codec: Codec,
    pub train: EncodedSplit,
}

pub fn prepare_training(cfg: &ExperimentConfig) -> Result<Prepared> {
    let l = Layout::new(cfg);
    require(&l.train_file(), "run `memstream gen-data` first")?;
    let codec = load_codec(cfg)?;
    let train = encode_split(&codec, read_episodes(&l.train_file())?, cfg.parallel)?;
    Ok(Prepared { codec, train })
}

pub struct Trained {
    pub model: WorldModel,
    /// Frozen encoder with the co-trained decoder.
    pub codec: Codec,
    pub epoch_loss: Vec<f64>,
}

/// Teacher-forced training over non-overlapping windows. Memory carries
/// across the windows of an episode and resets between episodes; the
/// decoder trains alongside on ground-truth latents.
pub fn train_world_model(
    cfg: &ExperimentConfig,
    encoder: EncoderKind,
    injector: InjectorKind,
    data: &Prepared,
) -> Result<Trained> {
    let mut model = WorldModel::new(cfg.predictor(encoder, injector))?;
    let mut codec = data.codec.clone();
    codec.store.set_trainable_prefix(Codec::encoder_prefix(), false);
    let (lat, eps) = (&data.train.latents, &data.train.episodes);
    let n = eps.len();
    let w = cfg.window;
    let windows = cfg.episode_len / w;
    let total = (n.div_ceil(cfg.batch) * windows * cfg.epochs) as u64;
    let mut opt = OptimState::new(cfg.lr, cfg.weight_decay, total);
    let mut dopt = OptimState::new(cfg.decoder_lr, cfg.weight_decay, total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_hash("train-order"));
    let mut order: Vec<usize> = (0..n).collect();
    let name = tag(encoder, injector);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mut mems: Vec<MemoryState> = chunk.iter().map(|_| model.init_memory()).collect();
            for k in 0..windows {
                let lo = k * w;
                let mut batch: Vec<TrainItem> = chunk
                    .iter()
                    .zip(mems)
                    .map(|(&e, memory)| TrainItem {
                        frames: lat[e][lo..lo + w].to_vec(),
                        actions: eps[e].actions[lo..lo + w - 1].to_vec(),
                        previous: if k == 0 { Vec::new() } else { lat[e][lo - w..lo].to_vec() },
                        memory,
                    })
                    .collect();
                let loss = training_step(&mut model, &mut batch, &mut opt).map_err(|err| match err {
                    Error::Diverged(m) => Error::Diverged(format!("{name}, epoch {}, step {}: {m}", epoch + 1, steps)),
                    other => other,
                })?;
                mems = batch.into_iter().map(|it| it.memory).collect();

                let last = lo + w - 1;
                let z = Tensor::stack(&chunk.iter().map(|&e| lat[e][last].tokens.clone()).collect::<Vec<_>>())?;
                let x = frames_tensor(eps, &chunk.iter().map(|&e| (e, last)).collect::<Vec<_>>())?;
                decoder_step(&mut codec, &z, &x, &mut dopt)?;
                sum += loss;
                steps += 1;
            }
        }
        let mean = sum / steps.max(1) as f64;
        log::info!("{name} seed {} epoch {}: latent mse {mean:.5}", cfg.seed, epoch + 1);
        epoch_loss.push(mean);
    }
    Ok(Trained {
        model,
        codec,
        epoch_loss,
    })
}

fn model_header(cfg: &ExperimentConfig, e: EncoderKind, i: InjectorKind) -> String {
    let mut s = cfg.text_for(|g| matches!(g, Group::Data | Group::Codec | Group::Model | Group::Train));
    let _ = writeln!(s, "encoder = {}\ninjector = {}", e.name(), i.name());
    s
}

pub fn save_model(cfg: &ExperimentConfig, t: &Trained) -> Result<()> {
    let (e, i) = (t.model.cfg.encoder, t.model.cfg.injector);
    let l = Layout::new(cfg);
    let mut ck = Checkpoint::new(model_header(cfg, e, i));
    ck.push_store("model/", &t.model.store);
    ck.push_store("codec/", &t.codec.store);
    ck.write(&l.model_ckpt(cfg.seed, e, i))?;
    let mut log_text = String::from("epoch,latent_mse\n");
    for (k, v) in t.epoch_loss.iter().enumerate() {
        let _ = writeln!(log_text, "{},{v}", k + 1);
    }
    let dir = l.model_dir(cfg.seed, e, i);
    write_text(&dir.join("train_loss.csv"), &log_text)?;
    freeze(&dir, cfg)
}

/// Loads a trained model and its codec (shared encoder, own decoder).
pub fn load_model(cfg: &ExperimentConfig, e: EncoderKind, i: InjectorKind) -> Result<(WorldModel, Codec)> {
    let path = Layout::new(cfg).model_ckpt(cfg.seed, e, i);
    require(&path, &format!("run `memstream train --encoder {} --injector {}` first", e.name(), i.name()))?;
    let ck = Checkpoint::read(&path)?;
    if ck.header != model_header(cfg, e, i) {
        return Err(Error::Config(format!(
            "{} was trained with different settings; rerun `memstream train`",
            path.display()
        )));
    }
    let mut model = WorldModel::new(cfg.predictor(e, i))?;
    ck.load_store("model/", &mut model.store, &path)?;
    let mut codec = Codec::new(cfg.codec(), cfg.data_seed)?;
    ck.load_store("codec/", &mut codec.store, &path)?;
    Ok((model, codec))
}

fn train_is_current(cfg: &ExperimentConfig, e: EncoderKind, i: InjectorKind) -> bool {
    let l = Layout::new(cfg);
    up_to_date(
        &l.model_dir(cfg.seed, e, i),
        cfg,
        &[Group::Data, Group::Codec, Group::Model, Group::Train],
        &[l.model_ckpt(cfg.seed, e, i)],
    )
}

/// Trains `configs`, skipping those with current checkpoints.
pub fn train_configs(cfg: &ExperimentConfig, configs: &[(EncoderKind, InjectorKind)]) -> Result<()> {
    let todo: Vec<_> = configs.iter().copied().filter(|&(e, i)| !train_is_current(cfg, e, i)).collect();
    if todo.is_empty() {
        log::info!("all requested models are up to date");
        return Ok(());
    }
    let data = prepare_training(cfg)?;
    par_map(todo.len(), cfg.parallel, |k| {
        let (e, i) = todo[k];
        let t = train_world_model(cfg, e, i, &data)?;
        save_model(cfg, &t)
    })?;
    Ok(())
}

pub fn load_eval_split(cfg: &ExperimentConfig, codec: &Codec) -> Result<Vec<EvalEpisode>> {
    let path = Layout::new(cfg).eval_file();
    require(&path, "run `memstream gen-data` first")?;
    let split = encode_split(codec, read_episodes(&path)?, cfg.parallel)?;
    Ok(split
        .episodes
        .into_iter()
        .zip(split.latents)
        .map(|(ep, latents)| EvalEpisode {
            frames: ep.frames.iter().map(|f| bytes_to_chw(f)).collect(),
            latents,
            actions: ep.actions,
        })
        .collect())
}

/// Metric rows at every configured horizon, in horizon order.
pub fn eval_config(
    cfg: &ExperimentConfig,
    e: EncoderKind,
    i: InjectorKind,
    episodes: &[EvalEpisode],
) -> Result<Vec<(usize, MetricRow)>> {
    let l = Layout::new(cfg);
    let (dir, file) = (l.eval_dir(cfg.seed, e, i), l.metrics_file(cfg.seed, e, i));
    let groups = [Group::Data, Group::Codec, Group::Model, Group::Train, Group::Eval];
    if up_to_date(&dir, cfg, &groups, std::slice::from_ref(&file)) {
        if let Ok(rows) = read_metrics(&file, e, i) {
            return Ok(rows);
        }
    }
    let (model, codec) = load_model(cfg, e, i)?;
    let mut rows = Vec::with_capacity(cfg.horizons.len());
    let mut text = String::from("horizon,ssim,img_mse,latent_mse,cycle_mse\n");
    for &h in &cfg.horizons {
        let r = evaluate(&model, &codec, episodes, cfg.eval_t, h, cfg.parallel)?;
        let _ = writeln!(text, "{h},{},{},{},{}", r.ssim, r.img_mse, r.latent_mse, r.cycle_mse);
        log::info!("{} seed {} H={h}: ssim {:.4}, latent mse {:.4}", tag(e, i), cfg.seed, r.ssim, r.latent_mse);
        rows.push((h, r));
    }
    write_text(&file, &text)?;
    freeze(&dir, cfg)?;
    Ok(rows)
}

pub fn read_metrics(path: &Path, e: EncoderKind, i: InjectorKind) -> Result<Vec<(usize, MetricRow)>> {
    let shown = path.display().to_string();
    let bad = |msg: String| Error::Format {
        path: shown.clone(),
        msg,
    };
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 columns, got {}", rec.len())));
        }
        let num = |k: usize| -> Result<f64> { rec[k].parse().map_err(|_| bad(format!("bad number {:?}", &rec[k]))) };
        let h = rec[0].parse().map_err(|_| bad(format!("bad horizon {:?}", &rec[0])))?;
        rows.push((
            h,
            MetricRow {
                encoder: e,
                injector: i,
                ssim: num(1)?,
                lpips: None,
                img_mse: num(2)?,
                latent_mse: num(3)?,
                cycle_mse: num(4)?,
            },
        ));
    }
    Ok(rows)
}

pub fn eval_configs(
    cfg: &ExperimentConfig,
    configs: &[(EncoderKind, InjectorKind)],
) -> Result<Vec<Vec<(usize, MetricRow)>>> {
    let codec = load_codec(cfg)?;
    let episodes = load_eval_split(cfg, &codec)?;
    configs.iter().map(|&(e, i)| eval_config(cfg, e, i, &episodes)).collect()
}

/// Rank table over every matrix configuration with metrics at the report
/// horizon, plus a filmstrip of the first evaluation episode.
pub fn report(cfg: &ExperimentConfig) -> Result<RankTable> {
    let l = Layout::new(cfg);
    let mut rows = Vec::new();
    for (e, i) in matrix() {
        let file = l.metrics_file(cfg.seed, e, i);
        if !file.exists() {
            continue;
        }
        let found = read_metrics(&file, e, i)?.into_iter().find(|(h, _)| *h == cfg.report_horizon);
        match found {
            Some((_, r)) => rows.push(r),
            None => return contract(format!("{} has no row for horizon {}", file.display(), cfg.report_horizon)),
        }
    }
    if rows.len() < 2 {
        return Err(Error::Missing {
            path: l.root.join("eval"),
            hint: format!("report needs metrics of at least 2 configurations for seed {}; run `memstream eval`", cfg.seed),
        });
    }
    let table = rank_aggregate(&rows, &Metric::RECON, &Metric::LATENT)?;
    let dir = l.report_dir(cfg.seed);
    emit_report(&table, &dir)?;

    let codec = load_codec(cfg)?;
    let episodes = load_eval_split(cfg, &codec)?;
    let ep = &episodes[0];
    let (t, h) = (cfg.eval_t, cfg.strip_horizon);
    let task = RecallTask::new(t, cfg.context, h, ep.latents.len())?;
    let mut strips = Vec::with_capacity(rows.len());
    let mut legend = String::from("row,model\n0,truth\n");
    for (k, r) in rows.iter().enumerate() {
        let (model, mcodec) = load_model(cfg, r.encoder, r.injector)?;
        strips.push(run_recall(&model, &mcodec, &ep.latents, &ep.actions, task, Phase1::BurnIn)?.frames);
        let _ = writeln!(legend, "{},{}", k + 1, r.label());
    }
    emit_strip(&ep.frames[t..t + h], &strips, &dir.join("strip.png"))?;
    write_text(&dir.join("strip_rows.csv"), &legend)?;
    freeze(&dir, cfg)?;
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    PretrainCodec,
    Train,
    Eval,
    Report,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::PretrainCodec => "pretrain-codec",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

pub fn run_stage(stage: Stage, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let single = [(cfg.encoder, cfg.injector)];
    match stage {
        Stage::GenData => gen_data(cfg),
        Stage::PretrainCodec => pretrain_codec(cfg),
        Stage::Train => train_configs(cfg, &single),
        Stage::Eval => eval_configs(cfg, &single).map(drop),
        Stage::Report => report(cfg).map(drop),
        Stage::All => {
            gen_data(cfg)?;
            pretrain_codec(cfg)?;
            let m = matrix();
            train_configs(cfg, &m)?;
            eval_configs(cfg, &m)?;
            report(cfg).map(drop)
        }
    }
}

/// Seed-averaged rows per configuration at `horizon`.
pub fn seed_average(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    configs: &[(EncoderKind, InjectorKind)],
    horizon: usize,
) -> Result<Vec<MetricRow>> {
    let mut out = Vec::with_capacity(configs.len());
    for &(e, i) in configs {
        let mut rows = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let c = ExperimentConfig { seed: s, ..cfg.clone() };
            let file = Layout::new(&c).metrics_file(s, e, i);
            require(&file, "run `memstream eval` for this seed first")?;
            match read_metrics(&file, e, i)?.into_iter().find(|(h, _)| *h == horizon) {
                Some((_, r)) => rows.push(r),
                None => return contract(format!("{} has no row for horizon {horizon}", file.display())),
            }
        }
        out.push(mean_rows(&rows)?);
    }
    Ok(out)
}
