//! Convolutional autoencoder for a 16× compressed latent space and the
//! latent diffusion model trained inside it.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::conditioning::ConditionSpec;
use crate::dataset::ImageSet;
use crate::ddpm::{sample_ddpm, train_ddpm, DdpmCheckpoint, LatentLink, SampleOptions, TrainConfig, TrainHooks};
use crate::denoiser::DenoiserConfig;
use crate::error::{invalid, Error, Result};
use crate::metrics::{perceptual_graph, FeatureBackbone};
use crate::nn::layers::{Conv, GroupNorm, ResBlock};
use crate::nn::{clip_global_norm, AdamW, Graph, ParamStore, Tensor, Var};

/// Element-count ratio between images and latents for every shipped config.
pub const COMPRESSION_RATIO: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub spatial_dims: usize,
    pub in_channels: usize,
    pub extent: usize,
    /// Per-axis downsampling factor, a power of two.
    pub spatial_downsample: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    pub variational: bool,
    pub kl_weight: f64,
    #[serde(default)]
    pub lambda_perceptual: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            spatial_dims: 2,
            in_channels: 1,
            extent: 32,
            spatial_downsample: 4,
            latent_channels: 1,
            base_width: 16,
            variational: false,
            kl_weight: 1e-6,
            lambda_perceptual: 0.0,
        }
    }
}

impl AutoencoderConfig {
    pub fn latent_extent(&self) -> usize {
        self.extent / self.spatial_downsample
    }

    pub fn input_elements(&self) -> usize {
        self.in_channels * self.extent.pow(self.spatial_dims as u32)
    }

    pub fn latent_elements(&self) -> usize {
        self.latent_channels * self.latent_extent().pow(self.spatial_dims as u32)
    }

    pub fn item_shape(&self) -> Vec<usize> {
        let mut s = vec![self.in_channels];
        s.extend(std::iter::repeat_n(self.extent, self.spatial_dims));
        s
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        let mut s = vec![self.latent_channels];
        s.extend(std::iter::repeat_n(self.latent_extent(), self.spatial_dims));
        s
    }

    fn levels(&self) -> usize {
        self.spatial_downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.spatial_dims) {
            invalid!("spatial_dims must be 2 or 3");
        }
        let f = self.spatial_downsample;
        if f < 2 || !f.is_power_of_two() {
            invalid!("spatial_downsample must be a power of two >= 2, got {f}");
        }
        if self.extent == 0 || self.extent % f != 0 {
            invalid!("extent {} not divisible by downsample factor {f}", self.extent);
        }
        if self.in_channels == 0 || self.latent_channels == 0 || self.base_width == 0 {
            invalid!("channel counts must be positive");
        }
        if self.input_elements() != COMPRESSION_RATIO * self.latent_elements() {
            invalid!(
                "compression ratio must be exactly {COMPRESSION_RATIO}: {} input vs {} latent elements",
                self.input_elements(),
                self.latent_elements()
            );
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) || !(self.lambda_perceptual >= 0.0) {
            invalid!("kl_weight and lambda_perceptual must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Level {
    res: ResBlock,
    resample: Conv,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Net {
    enc_in: Conv,
    enc_levels: Vec<Level>,
    enc_mid: ResBlock,
    enc_norm: GroupNorm,
    enc_out: Conv,
    dec_in: Conv,
    dec_mid: ResBlock,
    dec_levels: Vec<Level>,
    dec_norm: GroupNorm,
    dec_out: Conv,
}

/// Encoder/decoder pair. Variational models encode to the posterior mean
/// outside training.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    net: Net,
    pub params: ParamStore<f32>,
}

/// Encoder outputs inside a graph.
pub struct Encoded {
    pub mean: Var,
    pub logvar: Option<Var>,
}

impl Autoencoder {
    pub fn init(config: &AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.spatial_dims;
        let w = config.base_width;
        let widths: Vec<usize> = (0..config.levels()).map(|l| w << l.min(1)).collect();
        let top = *widths.last().expect("at least one level");
        let enc_in = Conv::new(&mut s, "enc.in", d, config.in_channels, w, 3, 1, &mut rng);
        let mut enc_levels = Vec::new();
        let mut c = w;
        for (l, &wl) in widths.iter().enumerate() {
            let res = ResBlock::new(&mut s, &format!("enc.{l}.res"), d, c, wl, None, &mut rng);
            let resample = Conv::new(&mut s, &format!("enc.{l}.down"), d, wl, wl, 3, 2, &mut rng);
            enc_levels.push(Level { res, resample });
            c = wl;
        }
        let enc_mid = ResBlock::new(&mut s, "enc.mid", d, top, top, None, &mut rng);
        let enc_norm = GroupNorm::new(&mut s, "enc.norm", top);
        let zc = config.latent_channels * if config.variational { 2 } else { 1 };
        let enc_out = Conv::new(&mut s, "enc.out", d, top, zc, 3, 1, &mut rng);
        let dec_in = Conv::new(&mut s, "dec.in", d, config.latent_channels, top, 3, 1, &mut rng);
        let dec_mid = ResBlock::new(&mut s, "dec.mid", d, top, top, None, &mut rng);
        let mut dec_levels = Vec::new();
        let mut c = top;
        for (l, &wl) in widths.iter().enumerate().rev() {
            let resample = Conv::new(&mut s, &format!("dec.{l}.up"), d, c, wl, 3, 1, &mut rng);
            let res = ResBlock::new(&mut s, &format!("dec.{l}.res"), d, wl, wl, None, &mut rng);
            dec_levels.push(Level { res, resample });
            c = wl;
        }
        let dec_norm = GroupNorm::new(&mut s, "dec.norm", c);
        let dec_out = Conv::new(&mut s, "dec.out", d, c, config.in_channels, 3, 1, &mut rng);
        let net = Net { enc_in, enc_levels, enc_mid, enc_norm, enc_out, dec_in, dec_mid, dec_levels, dec_norm, dec_out };
        Ok(Self { config: config.clone(), net, params: s })
    }

    pub fn fingerprint(&self) -> String {
        self.params.hash_hex()
    }

    fn check_shape(&self, got: &[usize], item: &[usize], what: &str) -> Result<()> {
        if got.len() != item.len() + 1 || &got[1..] != item {
            return Err(Error::Validation(format!("{what} has shape {got:?}, expected [B, {item:?}]")));
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> Result<Encoded> {
        self.check_shape(g.shape(x), &self.config.item_shape(), "autoencoder input")?;
        let s = &self.params;
        let n = &self.net;
        let mut h = n.enc_in.forward(g, s, x);
        for l in &n.enc_levels {
            h = l.res.forward(g, s, h, None);
            h = l.resample.forward(g, s, h);
        }
        h = n.enc_mid.forward(g, s, h, None);
        h = n.enc_norm.forward(g, s, h);
        h = g.silu(h);
        let out = n.enc_out.forward(g, s, h);
        let c = self.config.latent_channels;
        if self.config.variational {
            Ok(Encoded { mean: g.narrow1(out, 0, c), logvar: Some(g.narrow1(out, c, c)) })
        } else {
            Ok(Encoded { mean: out, logvar: None })
        }
    }

    pub fn decode_graph(&self, g: &mut Graph<f32>, z: Var) -> Result<Var> {
        self.check_shape(g.shape(z), &self.config.latent_shape(), "latent")?;
        let s = &self.params;
        let n = &self.net;
        let mut h = n.dec_in.forward(g, s, z);
        h = n.dec_mid.forward(g, s, h, None);
        for l in &n.dec_levels {
            h = g.upsample2(h);
            h = l.resample.forward(g, s, h);
            h = l.res.forward(g, s, h, None);
        }
        h = n.dec_norm.forward(g, s, h);
        h = g.silu(h);
        Ok(n.dec_out.forward(g, s, h))
    }

    /// Reconstruction, sampling the posterior with `eps` when variational.
    fn forward_graph(&self, g: &mut Graph<f32>, x: Var, eps: Option<&Tensor<f32>>) -> Result<(Var, Option<Var>)> {
        let e = self.encode_graph(g, x)?;
        let (z, kl) = match e.logvar {
            Some(lv) => {
                let half = g.scale(lv, 0.5);
                let std = g.exp(half);
                let z = match eps {
                    Some(eps) => {
                        let ev = g.constant(eps.clone());
                        let noise = g.mul(std, ev);
                        g.add(e.mean, noise)
                    }
                    None => e.mean,
                };
                (z, Some(kl_graph(g, e.mean, lv)))
            }
            None => (e.mean, None),
        };
        Ok((self.decode_graph(g, z)?, kl))
    }
}

/// Shared interface of anything mapping images to latents and back.
pub trait LatentCodec {
    fn item_shape(&self) -> Vec<usize>;
    fn latent_shape(&self) -> Vec<usize>;
    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>>;
}

fn batched(x: &Tensor<f32>, f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Tensor<f32>> {
    let items = x.unstack();
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(64) {
        out.extend(f(&Tensor::stack(chunk))?.unstack());
    }
    Ok(Tensor::stack(&out))
}

impl LatentCodec for Autoencoder {
    fn item_shape(&self) -> Vec<usize> {
        self.config.item_shape()
    }

    fn latent_shape(&self) -> Vec<usize> {
        self.config.latent_shape()
    }

    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_shape(x.shape(), &self.config.item_shape(), "autoencoder input")?;
        batched(x, |b| {
            let mut g = Graph::inference();
            let xv = g.constant(b.clone());
            let e = self.encode_graph(&mut g, xv)?;
            Ok(g.value(e.mean).clone())
        })
    }

    fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_shape(z.shape(), &self.config.latent_shape(), "latent")?;
        batched(z, |b| {
            let mut g = Graph::inference();
            let zv = g.constant(b.clone());
            let y = self.decode_graph(&mut g, zv)?;
            Ok(g.value(y).clone())
        })
    }
}

/// `0.5 · mean(μ² + exp(log σ²) − 1 − log σ²)` over latent elements.
pub fn kl_graph(g: &mut Graph<f32>, mean: Var, logvar: Var) -> Var {
    let m2 = g.square(mean);
    let v = g.exp(logvar);
    let a = g.add(m2, v);
    let b = g.sub(a, logvar);
    let c = g.add_scalar(b, -1.0);
    let m = g.mean(c);
    g.scale(m, 0.5)
}

pub fn kl_diag_gaussian(mean: &[f64], logvar: &[f64]) -> f64 {
    assert_eq!(mean.len(), logvar.len());
    0.5 * mean.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>() / mean.len().max(1) as f64
}

/// Per-element reconstruction MSE of any codec.
pub fn reconstruction_mse<C: LatentCodec + ?Sized>(codec: &C, x: &Tensor<f32>) -> Result<f64> {
    let y = codec.decode(&codec.encode(x)?)?;
    if y.shape() != x.shape() {
        return Err(Error::Shape(format!("reconstruction {:?} vs input {:?}", y.shape(), x.shape())));
    }
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("reconstruction loss".into()));
    }
    Ok(mse)
}

/// Training objective for one batch: reconstruction MSE, the perceptual term
/// when enabled and the KL term for variational models.
pub fn ae_loss_graph(
    g: &mut Graph<f32>,
    ae: &Autoencoder,
    x: &Tensor<f32>,
    eps: Option<&Tensor<f32>>,
    backbone: Option<&dyn FeatureBackbone>,
) -> Result<Var> {
    let xv = g.constant(x.clone());
    let (y, kl) = ae.forward_graph(g, xv, eps)?;
    let mut loss = g.mse(y, xv);
    if ae.config.lambda_perceptual > 0.0 {
        let bb = backbone.ok_or_else(|| Error::Validation("perceptual term needs a feature backbone".into()))?;
        let p = perceptual_graph(g, bb, y, xv)?;
        let p = g.scale(p, ae.config.lambda_perceptual as f32);
        loss = g.add(loss, p);
    }
    if let Some(kl) = kl {
        if ae.config.kl_weight > 0.0 {
            let k = g.scale(kl, ae.config.kl_weight as f32);
            loss = g.add(loss, k);
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 16, max_epochs: 60, patience: 10, weight_decay: 0.0, seed: 0 }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            invalid!("autoencoder training needs lr > 0, batch_size, max_epochs and patience >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

/// Best-validation autoencoder with its history.
#[derive(Clone, Debug)]
pub struct AeCheckpoint {
    pub autoencoder: Autoencoder,
    pub train_config: AeTrainConfig,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub curve: Vec<AeEpochLog>,
}

#[derive(Serialize, Deserialize)]
struct AeMeta {
    kind: String,
    config: AutoencoderConfig,
    train_config: AeTrainConfig,
    best_epoch: usize,
    best_val_mse: f64,
    curve: Vec<AeEpochLog>,
    fingerprint: String,
}

impl AeCheckpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.put_json(
            "config.json",
            &AeMeta {
                kind: "autoencoder".into(),
                config: self.autoencoder.config.clone(),
                train_config: self.train_config.clone(),
                best_epoch: self.best_epoch,
                best_val_mse: self.best_val_mse,
                curve: self.curve.clone(),
                fingerprint: self.autoencoder.fingerprint(),
            },
        )?;
        a.put_store("params/autoencoder", &self.autoencoder.params)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta: AeMeta = a.get_json("config.json")?;
        if meta.kind != "autoencoder" {
            return Err(Error::Checkpoint(format!("expected an autoencoder checkpoint, found {}", meta.kind)));
        }
        let mut autoencoder = Autoencoder::init(&meta.config, 0)?;
        a.load_store("params/autoencoder", &mut autoencoder.params)?;
        if autoencoder.fingerprint() != meta.fingerprint {
            return Err(Error::Fingerprint { expected: meta.fingerprint, found: autoencoder.fingerprint() });
        }
        Ok(Self {
            autoencoder,
            train_config: meta.train_config,
            best_epoch: meta.best_epoch,
            best_val_mse: meta.best_val_mse,
            curve: meta.curve,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn set_mse(ae: &Autoencoder, set: &ImageSet) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    reconstruction_mse(ae, &set.batch(&idx))
}

/// Train with early stopping on validation reconstruction MSE.
pub fn train_autoencoder(
    train: &ImageSet,
    val: &ImageSet,
    tc: &AeTrainConfig,
    config: &AutoencoderConfig,
    backbone: Option<&dyn FeatureBackbone>,
) -> Result<AeCheckpoint> {
    tc.validate()?;
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        invalid!("autoencoder training needs non-empty train and validation splits");
    }
    let want = config.item_shape();
    if train.item_shape() != Some(want.as_slice()) || val.item_shape() != Some(want.as_slice()) {
        return Err(Error::Validation(format!("dataset items {:?}, autoencoder expects {want:?}", train.item_shape())));
    }
    if config.lambda_perceptual > 0.0 && backbone.is_none() {
        invalid!("lambda_perceptual > 0 requires a perceptual backbone");
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut ae = Autoencoder::init(config, seeds.next_u64())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.next_u64());
    let mut opt = AdamW::new(tc.learning_rate, tc.weight_decay);
    let initial = set_mse(&ae, val)?;
    let mut best = (ae.clone(), initial, 0usize);
    let mut stale = 0;
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tc.max_epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let x = train.batch(chunk);
            let eps = config.variational.then(|| {
                let mut s = vec![chunk.len()];
                s.extend(config.latent_shape());
                normal_tensor(s, &mut rng)
            });
            let mut g = Graph::new();
            let loss = ae_loss_graph(&mut g, &ae, &x, eps.as_ref(), backbone)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("autoencoder loss at epoch {epoch}")));
            }
            total += lv * chunk.len() as f64;
            let mut grads = vec![g.backward(loss).for_store(&ae.params)];
            clip_global_norm(&mut grads, 1.0);
            opt.step(&mut [&mut ae.params], &grads);
        }
        let val_mse = set_mse(&ae, val)?;
        let log = AeEpochLog { epoch, train_loss: total / train.len() as f64, val_mse };
        log::info!("ae epoch {epoch}: train {:.5} val {val_mse:.5}", log.train_loss);
        curve.push(log);
        if val_mse < best.1 {
            best = (ae.clone(), val_mse, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    let (autoencoder, best_val_mse, best_epoch) = best;
    Ok(AeCheckpoint { autoencoder, train_config: tc.clone(), best_epoch, best_val_mse, curve })
}

/// Encode a set, multiplying latents by `scale`; ids and conditions carry over.
pub fn encode_set<C: LatentCodec + ?Sized>(codec: &C, set: &ImageSet, scale: f64) -> Result<ImageSet> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let z = codec.encode(&set.batch(&idx))?;
    let mut out = ImageSet::default();
    for ((zi, id), spec) in z.unstack().into_iter().zip(&set.ids).zip(&set.specs) {
        out.push(id.clone(), zi.map(|v| (v as f64 * scale) as f32), spec.clone())?;
    }
    Ok(out)
}

/// Inverse of the empirical standard deviation of all latent elements.
pub fn latent_scale(latents: &ImageSet) -> Result<f64> {
    let vals: Vec<f64> = latents.items.iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect();
    if vals.len() < 2 {
        invalid!("latent scale needs at least two values");
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
    if !(sd > 1e-12) || !sd.is_finite() {
        return Err(Error::NonFinite(format!("latent standard deviation {sd}")));
    }
    Ok(1.0 / sd)
}

/// The denoiser layout adapted to the autoencoder's latent shape.
pub fn latent_denoiser_config(ae: &AutoencoderConfig, base: &DenoiserConfig) -> DenoiserConfig {
    DenoiserConfig { spatial_dims: ae.spatial_dims, in_channels: ae.latent_channels, extent: ae.latent_extent(), ..base.clone() }
}

/// DDPM training on scaled latents of a frozen autoencoder.
pub fn train_ldm(
    train: &ImageSet,
    val: &ImageSet,
    ae: &Autoencoder,
    tc: &TrainConfig,
    dc: &DenoiserConfig,
    hooks: TrainHooks<'_>,
) -> Result<DdpmCheckpoint> {
    if tc.lambda_perceptual > 0.0 {
        invalid!("the latent model trains on the noise objective only; set lambda_perceptual to 0");
    }
    let want = latent_denoiser_config(&ae.config, dc);
    if dc.in_channels != want.in_channels || dc.extent != want.extent || dc.spatial_dims != want.spatial_dims {
        return Err(Error::Shape(format!(
            "latent denoiser must take {:?}, got {:?}",
            want.input_shape(1)[1..].to_vec(),
            dc.input_shape(1)[1..].to_vec()
        )));
    }
    let before = ae.fingerprint();
    let raw = encode_set(ae, train, 1.0)?;
    let scale = latent_scale(&raw)?;
    let ztrain = encode_set(ae, train, scale)?;
    let zval = encode_set(ae, val, scale)?;
    let mut ck = train_ddpm(&ztrain, &zval, tc, dc, hooks)?;
    let after = ae.fingerprint();
    if after != before {
        return Err(Error::Fingerprint { expected: before, found: after });
    }
    ck.latent = Some(LatentLink { ae_fingerprint: before, scale });
    Ok(ck)
}

/// Sample latents, undo the scale and decode to image space.
pub fn sample_ldm<R: Rng + ?Sized>(
    ldm: &DdpmCheckpoint,
    ae: &Autoencoder,
    cond: Option<&ConditionSpec>,
    n: usize,
    rng: &mut R,
    opts: &SampleOptions,
) -> Result<Vec<Tensor<f32>>> {
    let link = ldm.latent.as_ref().ok_or_else(|| Error::Validation("checkpoint is not a latent model".into()))?;
    if link.ae_fingerprint != ae.fingerprint() {
        return Err(Error::Fingerprint { expected: link.ae_fingerprint.clone(), found: ae.fingerprint() });
    }
    let z = sample_ddpm(&ldm.denoiser, &ldm.schedule, cond, n, rng, opts)?;
    let inv = 1.0 / link.scale;
    let z: Vec<Tensor<f32>> = z.into_iter().map(|t| t.map(|v| (v as f64 * inv) as f32)).collect();
    let x = ae.decode(&Tensor::stack(&z))?;
    if !x.all_finite() {
        return Err(Error::NonFinite("decoded samples".into()));
    }
    Ok(x.unstack())
}

/// Finite samples within `margin` of the training intensity range.
pub fn range_gate(samples: &[Tensor<f32>], train: &ImageSet, margin: f64) -> Result<()> {
    let (lo, hi) = train
        .items
        .iter()
        .flat_map(|t| t.data().iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    for (i, s) in samples.iter().enumerate() {
        if !s.all_finite() {
            return Err(Error::NonFinite(format!("sample {i}")));
        }
        if let Some(v) = s.data().iter().map(|&v| v as f64).find(|&v| v < lo - margin || v > hi + margin) {
            invalid!("sample {i} value {v:.3} outside [{:.3}, {:.3}]", lo - margin, hi + margin);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{FieldStrength, OrientationClass, Sequence};
    use crate::ddpm::ddpm_loss;
    use crate::ddpm::EpsModel;
    use crate::schedule::ScheduleConfig;

    /// Block-mean encoder with nearest-neighbour decoder: exact on images
    /// that are constant over 4×4 blocks.
    struct BlockCodec;

    impl LatentCodec for BlockCodec {
        fn item_shape(&self) -> Vec<usize> {
            vec![1, 8, 8]
        }
        fn latent_shape(&self) -> Vec<usize> {
            vec![1, 2, 2]
        }
        fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
            let b = x.shape()[0];
            let mut out = vec![0f32; b * 4];
            for n in 0..b {
                for i in 0..8 {
                    for j in 0..8 {
                        out[n * 4 + (i / 4) * 2 + j / 4] += x.data()[n * 64 + i * 8 + j] / 16.0;
                    }
                }
            }
            Ok(Tensor::new(vec![b, 1, 2, 2], out))
        }
        fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
            let b = z.shape()[0];
            let out = (0..b * 64).map(|p| {
                let (n, i, j) = (p / 64, (p % 64) / 8, p % 8);
                z.data()[n * 4 + (i / 4) * 2 + j / 4]
            });
            Ok(Tensor::new(vec![b, 1, 8, 8], out.collect()))
        }
    }

    fn spec(k: usize) -> ConditionSpec {
        ConditionSpec::new(OrientationClass::ALL[k % 4], FieldStrength::T1_5, Sequence::Tse)
    }

    fn blob_set(n: usize, seed: u64) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ImageSet::default();
        for i in 0..n {
            let (cy, cx): (f64, f64) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
            let r: f64 = rng.random_range(4.0..8.0);
            let d = (0..1024).map(|p| {
                let (y, x) = ((p / 32) as f64, (p % 32) as f64);
                let q = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                (1.0 / (1.0 + ((q - r) * 1.5).exp()) * 2.0 - 0.5) as f32
            });
            set.push(format!("b{i}"), Tensor::new(vec![1, 32, 32], d.collect()), spec(i)).unwrap();
        }
        set
    }

    #[test]
    fn default_configs_compress_exactly_sixteen_times() {
        let c = AutoencoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.latent_shape(), vec![1, 8, 8]);
        assert_eq!(c.input_elements(), 16 * c.latent_elements());
        let big = AutoencoderConfig { extent: 64, ..c.clone() };
        assert_eq!(big.latent_shape(), vec![1, 16, 16]);
        big.validate().unwrap();
        let vol = AutoencoderConfig { spatial_dims: 3, latent_channels: 4, extent: 16, ..c.clone() };
        vol.validate().unwrap();
        assert!(AutoencoderConfig { latent_channels: 2, ..c.clone() }.validate().is_err());
        assert!(AutoencoderConfig { extent: 30, ..c }.validate().is_err());
    }

    #[test]
    fn shapes_roundtrip_and_extent_mismatch_is_rejected() {
        for variational in [false, true] {
            let ae = Autoencoder::init(&AutoencoderConfig { variational, ..Default::default() }, 1).unwrap();
            let x = blob_set(3, 0).batch(&[0, 1, 2]);
            let z = ae.encode(&x).unwrap();
            assert_eq!(z.shape(), &[3, 1, 8, 8]);
            assert_eq!(x.len() / z.len(), 16);
            assert_eq!(ae.decode(&z).unwrap().shape(), x.shape());
            let wrong = Tensor::<f32>::zeros(vec![1, 1, 16, 16]);
            assert!(matches!(ae.encode(&wrong), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn exact_codec_has_zero_loss() {
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|p| ((p / 64) * 4 + ((p % 64) / 32) * 2 + (p % 8) / 4) as f32).collect());
        assert!(reconstruction_mse(&BlockCodec, &x).unwrap() < 1e-10);
    }

    #[test]
    fn kl_vanishes_at_standard_normal() {
        assert_eq!(kl_diag_gaussian(&[0.0; 5], &[0.0; 5]), 0.0);
        assert!(kl_diag_gaussian(&[1.0], &[0.0]) > 0.0);
        let mut g = Graph::<f32>::new();
        let m = g.constant(Tensor::zeros(vec![2, 3]));
        let lv = g.constant(Tensor::zeros(vec![2, 3]));
        let k = kl_graph(&mut g, m, lv);
        assert_eq!(g.value(k).item(), 0.0);
    }

    #[test]
    fn zero_kl_weight_matches_plain_loss_on_equal_reconstructions() {
        let cfg = AutoencoderConfig { variational: true, kl_weight: 0.0, ..Default::default() };
        let ae = Autoencoder::init(&cfg, 4).unwrap();
        let x = blob_set(2, 1).batch(&[0, 1]);
        // No posterior noise: the reconstruction is the mean path.
        let mut g = Graph::new();
        let with = ae_loss_graph(&mut g, &ae, &x, None, None).unwrap();
        let a = g.value(with).item() as f64;
        let b = reconstruction_mse(&ae, &x).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn autoencoder_learns_blobs_and_checkpoint_roundtrips() {
        let train = blob_set(96, 2);
        let val = blob_set(24, 3);
        let tc = AeTrainConfig { max_epochs: 12, patience: 12, ..Default::default() };
        let ck = train_autoencoder(&train, &val, &tc, &AutoencoderConfig { base_width: 8, ..Default::default() }, None).unwrap();
        let var = {
            let v: Vec<f64> = val.items.iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(ck.best_val_mse < 0.2 * var, "mse {} var {var}", ck.best_val_mse);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ae.tar");
        ck.save(&p).unwrap();
        let back = AeCheckpoint::load(&p).unwrap();
        assert_eq!(back.autoencoder.fingerprint(), ck.autoencoder.fingerprint());
        let x = val.batch(&[0, 1]);
        assert_eq!(back.autoencoder.encode(&x).unwrap(), ck.autoencoder.encode(&x).unwrap());
    }

    fn tiny_ldm_config(ae: &AutoencoderConfig) -> DenoiserConfig {
        let base = DenoiserConfig { base_width: 8, depth: 2, attention_levels: vec![], time_embed_dim: 16, cond_embed_dim: 16, channel_mult: vec![1, 2], ..DenoiserConfig::tiny_2d(8) };
        latent_denoiser_config(ae, &base)
    }

    #[test]
    fn ldm_keeps_autoencoder_frozen_and_samples_deterministically() {
        let cfg = AutoencoderConfig { base_width: 8, ..Default::default() };
        let ae = Autoencoder::init(&cfg, 9).unwrap();
        let hash = ae.fingerprint();
        let train = blob_set(16, 4);
        let val = blob_set(8, 5);
        let tc = TrainConfig { max_epochs: 2, batch_size: 8, schedule: ScheduleConfig { steps: 20, ..Default::default() }, ..Default::default() };
        let dc = tiny_ldm_config(&cfg);
        let ck = train_ldm(&train, &val, &ae, &tc, &dc, TrainHooks::default()).unwrap();
        assert_eq!(ae.fingerprint(), hash);
        let link = ck.latent.clone().unwrap();
        assert_eq!(link.ae_fingerprint, hash);
        let z = encode_set(&ae, &train, link.scale).unwrap();
        let sd = 1.0 / latent_scale(&z).unwrap();
        assert!((sd - 1.0).abs() < 1e-4, "{sd}");

        assert_eq!(ck.denoiser.item_shape(), vec![1, 8, 8]);
        let opts = SampleOptions { batch_size: 4, ..Default::default() };
        let s = spec(1);
        let a = sample_ldm(&ck, &ae, Some(&s), 5, &mut ChaCha8Rng::seed_from_u64(3), &opts).unwrap();
        let b = sample_ldm(&ck, &ae, Some(&s), 5, &mut ChaCha8Rng::seed_from_u64(3), &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), &[1, 32, 32]);
        range_gate(&a, &train, 6.0).unwrap();

        let other = Autoencoder::init(&cfg, 10).unwrap();
        assert!(matches!(sample_ldm(&ck, &other, Some(&s), 1, &mut ChaCha8Rng::seed_from_u64(0), &opts), Err(Error::Fingerprint { .. })));
        let bad = DenoiserConfig { extent: 32, ..dc };
        assert!(train_ldm(&train, &val, &ae, &tc, &bad, TrainHooks::default()).is_err());
    }

    /// Noise predictor that knows the clean latent of a constant image.
    struct Oracle {
        x0: Tensor<f32>,
        schedule: crate::schedule::NoiseSchedule,
    }

    impl EpsModel for Oracle {
        fn item_shape(&self) -> Vec<usize> {
            self.x0.shape()[1..].to_vec()
        }
        fn is_conditional(&self) -> bool {
            false
        }
        fn eps(&self, x_t: &Tensor<f32>, t: &[usize], _: Option<&ConditionSpec>) -> Result<Tensor<f32>> {
            let ab = self.schedule.alpha_bars();
            let per = x_t.len() / t.len();
            let x0 = self.x0.data()[..per].to_vec();
            let mut out = Vec::with_capacity(x_t.len());
            for (i, &ti) in t.iter().enumerate() {
                for k in 0..per {
                    let v = (x_t.data()[i * per + k] as f64 - ab[ti].sqrt() * x0[k] as f64) / (1.0 - ab[ti]).sqrt();
                    out.push(v as f32);
                }
            }
            Ok(Tensor::new(x_t.shape().to_vec(), out))
        }
    }

    #[test]
    fn oracle_latent_loss_is_zero() {
        let ae = Autoencoder::init(&AutoencoderConfig { base_width: 8, ..Default::default() }, 2).unwrap();
        let set = blob_set(1, 7);
        let z = encode_set(&ae, &set, 1.0).unwrap().batch(&[0, 0, 0, 0]);
        let schedule = ScheduleConfig::default().build().unwrap();
        let o = Oracle { x0: z.clone(), schedule: schedule.clone() };
        let l = ddpm_loss(&o, &schedule, &z, None, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(l < 1e-12, "{l}");
    }
}
