//! Convolutional image codec: a three-layer encoder to a grid of latent
//! tokens and a transposed-convolution decoder back to RGB.

use memstream_tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::nn::{Binding, Init, ParamId, ParamStore};
use crate::optim::{adam_step, OptimState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    /// Square input side in pixels; must be divisible by 4.
    pub image: usize,
    pub c1: usize,
    pub c2: usize,
    pub d_lat: usize,
}

impl CodecConfig {
    pub fn grid(&self) -> usize {
        self.image / 4
    }

    /// Latent tokens per frame.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Latent token grid `[P, d_lat]` of one frame, tokens in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrame {
    pub tokens: Tensor,
    pub source_time: usize,
}

#[derive(Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, wshape: [usize; 4], fan_in: usize, bias: usize) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        Self {
            w: store.add(&format!("{name}.weight"), &wshape, Init::Uniform(bound)),
            b: store.add(&format!("{name}.bias"), &[bias], Init::Zeros),
        }
    }
}

/// Encoder and decoder weights in one store; encoder names start with
/// `enc.`, decoder names with `dec.`.
#[derive(Clone)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    enc: [ConvLayer; 3],
    dec: [ConvLayer; 3],
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        if cfg.image == 0 || !cfg.image.is_multiple_of(4) {
            return contract(format!("codec image side {} must be a positive multiple of 4", cfg.image));
        }
        let mut s = ParamStore::new(seed);
        let CodecConfig { c1, c2, d_lat, .. } = cfg;
        let enc = [
            ConvLayer::new(&mut s, "enc.conv1", [c1, 3, 4, 4], 3 * 16, c1),
            ConvLayer::new(&mut s, "enc.conv2", [c2, c1, 4, 4], c1 * 16, c2),
            ConvLayer::new(&mut s, "enc.conv3", [d_lat, c2, 3, 3], c2 * 9, d_lat),
        ];
        let dec = [
            ConvLayer::new(&mut s, "dec.up1", [d_lat, c2, 4, 4], d_lat * 4, c2),
            ConvLayer::new(&mut s, "dec.up2", [c2, c1, 4, 4], c2 * 4, c1),
            ConvLayer::new(&mut s, "dec.proj", [3, c1, 1, 1], c1, 3),
        ];
        Ok(Self { cfg, store: s, enc, dec })
    }

    /// Encoder forward on `[b, 3, H, W]`, returning tokens `[b, P, d_lat]`.
    pub fn encode_graph<'g>(&self, p: &Binding<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.image || s[3] != self.cfg.image {
            return contract(format!("codec expects [b, 3, {0}, {0}] images, got {s:?}", self.cfg.image));
        }
        let [l1, l2, l3] = &self.enc;
        let h = x.conv2d(&p.var(l1.w), Some(&p.var(l1.b)), 2, 1)?.gelu()?;
        let h = h.conv2d(&p.var(l2.w), Some(&p.var(l2.b)), 2, 1)?.gelu()?;
        let h = h.conv2d(&p.var(l3.w), Some(&p.var(l3.b)), 1, 1)?;
        let (b, n) = (s[0], self.cfg.grid());
        Ok(h.permute(&[0, 2, 3, 1])?.reshape(&[b, n * n, self.cfg.d_lat])?)
    }

    /// Decoder forward on tokens `[b, P, d_lat]`, returning unclamped
    /// images `[b, 3, H, W]`.
    pub fn decode_graph<'g>(&self, p: &Binding<'g>, z: &Var<'g>) -> Result<Var<'g>> {
        let s = z.shape();
        let n = self.cfg.grid();
        if s.len() != 3 || s[1] != n * n || s[2] != self.cfg.d_lat {
            return contract(format!("codec expects [b, {}, {}] latents, got {s:?}", n * n, self.cfg.d_lat));
        }
        let [l1, l2, l3] = &self.dec;
        let h = z.reshape(&[s[0], n, n, self.cfg.d_lat])?.permute(&[0, 3, 1, 2])?;
        let h = h.conv_transpose2d(&p.var(l1.w), Some(&p.var(l1.b)), 2, 1)?.gelu()?;
        let h = h.conv_transpose2d(&p.var(l2.w), Some(&p.var(l2.b)), 2, 1)?.gelu()?;
        Ok(h.conv2d(&p.var(l3.w), Some(&p.var(l3.b)), 1, 0)?)
    }

    /// Encodes a batch `[b, 3, H, W]` to `[b, P, d_lat]` outside any training graph.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        Ok(self.encode_graph(&p, &g.constant(images.clone()))?.value().as_ref().clone())
    }

    /// Decodes `[b, P, d_lat]` to images clamped to `[0, 1]`.
    pub fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let y = self.decode_graph(&p, &g.constant(latents.clone()))?;
        Ok(y.value().map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn encode_frame(&self, x: &Tensor, time: usize) -> Result<LatentFrame> {
        let s = x.shape();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
            return contract(format!("encode_frame expects [3, H, W] with H, W divisible by 4, got {s:?}"));
        }
        let z = self.encode_batch(&x.reshape(vec![1, s[0], s[1], s[2]])?)?;
        Ok(LatentFrame {
            tokens: z.index0(0),
            source_time: time,
        })
    }

    pub fn decode_latent(&self, z: &LatentFrame) -> Result<Tensor> {
        let s = z.tokens.shape();
        let y = self.decode_batch(&z.tokens.reshape(vec![1, s[0], s[1]])?)?;
        Ok(y.index0(0))
    }

    pub fn encoder_prefix() -> &'static str {
        "enc."
    }

    pub fn decoder_prefix() -> &'static str {
        "dec."
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Trains encoder and decoder end to end on image MSE and returns the mean
/// loss of every epoch. `frames` is `[n, 3, H, W]`.
pub fn pretrain_autoencoder(codec: &mut Codec, frames: &Tensor, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let n = frames.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return contract("pretrain_autoencoder needs a nonempty dataset");
    }
    let batch = cfg.batch.max(1);
    let steps_per_epoch = n.div_ceil(batch);
    let mut opt = OptimState::new(cfg.lr, cfg.weight_decay, (steps_per_epoch * cfg.epochs) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let x = gather_frames(frames, chunk)?;
            let g = Graph::new();
            let p = codec.store.bind(&g);
            let xv = g.constant(x);
            let z = codec.encode_graph(&p, &xv)?;
            let loss = codec.decode_graph(&p, &z)?.mse(&xv)?;
            let lv = loss.value().to_scalar()?;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("codec loss is {lv} in epoch {epoch}")));
            }
            g.backward(loss)?;
            adam_step(&mut codec.store, &p.grads(), &mut opt)?;
            total += lv * chunk.len() as f64;
        }
        let mean = total / n as f64;
        log::info!("codec epoch {}: mse {mean:.5}", epoch + 1);
        history.push(mean);
    }
    Ok(history)
}

/// One decoder update on ground-truth latents `[b, P, d_lat]` against
/// images `[b, 3, H, W]`. The latents enter as constants, so the loss can
/// only reach decoder weights. Returns the image MSE.
pub fn decoder_step(codec: &mut Codec, latents: &Tensor, images: &Tensor, opt: &mut OptimState) -> Result<f64> {
    let g = Graph::new();
    let mut p = codec.store.bind_frozen(&g);
    let dec: Vec<ParamId> = codec.dec.iter().flat_map(|l| [l.w, l.b]).collect();
    for &id in &dec {
        p.set_var(id, g.leaf(codec.store.get(id).clone()));
    }
    let loss = codec.decode_graph(&p, &g.constant(latents.clone()))?.mse(&g.constant(images.clone()))?;
    let lv = loss.value().to_scalar()?;
    if !lv.is_finite() {
        return Err(Error::Diverged(format!("decoder loss is {lv}")));
    }
    g.backward(loss)?;
    adam_step(&mut codec.store, &p.grads(), opt)?;
    Ok(lv)
}

/// Rows `ids` of a tensor along its first axis.
pub fn gather_frames(frames: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let s = frames.shape();
    let per: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(ids.len() * per);
    for &i in ids {
        data.extend_from_slice(&frames.data()[i * per..(i + 1) * per]);
    }
    let mut shape = s.to_vec();
    shape[0] = ids.len();
    Ok(Tensor::new(shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use memstream_tensor::grad_check;
    use rand::Rng;

    fn tiny() -> CodecConfig {
        CodecConfig {
            image: 8,
            c1: 2,
            c2: 3,
            d_lat: 2,
        }
    }

    fn rand_images(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, 3, side, side], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn token_count_for_32px() {
        let cfg = CodecConfig {
            image: 32,
            c1: 4,
            c2: 4,
            d_lat: 5,
        };
        let c = Codec::new(cfg, 0).unwrap();
        let x = rand_images(1, 32, 1).index0(0);
        let z = c.encode_frame(&x, 3).unwrap();
        assert_eq!(z.tokens.shape(), &[64, 5]);
        assert_eq!(cfg.tokens(), 64);
        assert_eq!(c.encode_frame(&x, 3).unwrap(), z);
        assert_eq!(c.decode_latent(&z).unwrap().shape(), &[3, 32, 32]);
    }

    #[test]
    fn bad_spatial_size_rejected() {
        let c = Codec::new(tiny(), 0).unwrap();
        assert!(c.encode_frame(&Tensor::zeros(vec![3, 6, 8]), 0).is_err());
        assert!(Codec::new(CodecConfig { image: 10, ..tiny() }, 0).is_err());
    }

    #[test]
    fn zero_latent_decodes_to_finite_image() {
        let c = Codec::new(tiny(), 0).unwrap();
        let y = c
            .decode_latent(&LatentFrame {
                tokens: Tensor::zeros(vec![4, 2]),
                source_time: 0,
            })
            .unwrap();
        assert!(y.all_finite());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn codec_gradcheck() {
        for seed in 0..2 {
            let c = Codec::new(tiny(), seed).unwrap();
            let mut inputs = vec![rand_images(1, 8, seed + 5)];
            inputs.extend(c.store.iter().map(|(_, p)| p.value.clone()));
            let r = grad_check(
                |g, v| {
                    let p = Binding::from_vars(g, v[1..].to_vec());
                    let z = c.encode_graph(&p, &v[0])?;
                    Ok::<_, Error>(c.decode_graph(&p, &z)?.mse(&v[0])?)
                },
                &inputs,
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut c = Codec::new(tiny(), 0).unwrap();
        let frames = rand_images(10, 8, 2);
        let cfg = PretrainConfig {
            epochs: 6,
            batch: 5,
            lr: 1e-2,
            weight_decay: 0.0,
            seed: 0,
        };
        let h = pretrain_autoencoder(&mut c, &frames, &cfg).unwrap();
        assert!(h.last().unwrap() < h.first().unwrap(), "{h:?}");
    }
}
