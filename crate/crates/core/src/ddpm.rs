//! Noise-prediction objective, the training loop and ancestral sampling.

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::conditioning::{dropout_draw, ConditionSpec};
use crate::dataset::ImageSet;
use crate::denoiser::{Denoiser, DenoiserConfig, UNet};
use crate::error::{invalid, Error, Result};
use crate::metrics::{perceptual_graph, FeatureBackbone};
use crate::nn::{clip_global_norm, AdamW, Graph, ParamStore, Tensor, Var};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

fn default_clip() -> f64 {
    1.0
}

fn default_val_draws() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// 0 freezes the parameters (diagnostic runs); otherwise in [1e-5, 1e-3].
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// 0 disables the perceptual term; otherwise in [0.1, 1].
    #[serde(default)]
    pub lambda_perceptual: f64,
    #[serde(default)]
    pub cond_dropout_p: f64,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Fixed `(t, eps)` draws per validation image.
    #[serde(default = "default_val_draws")]
    pub val_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 16,
            max_epochs: 2000,
            patience: 50,
            lambda_perceptual: 0.0,
            cond_dropout_p: 0.1,
            seed: 0,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            schedule: ScheduleConfig::default(),
            val_draws: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate;
        if !(lr == 0.0 || (1e-5..=1e-3).contains(&lr)) {
            invalid!("learning_rate {lr} outside [1e-5, 1e-3]");
        }
        if self.batch_size == 0 {
            invalid!("batch_size must be positive");
        }
        if !(1..=2000).contains(&self.max_epochs) {
            invalid!("max_epochs {} outside 1..=2000", self.max_epochs);
        }
        if self.patience == 0 {
            invalid!("patience must be at least 1");
        }
        let lp = self.lambda_perceptual;
        if !(lp == 0.0 || (0.1..=1.0).contains(&lp)) {
            invalid!("lambda_perceptual {lp} outside [0.1, 1] (0 disables)");
        }
        if !(0.0..=0.2).contains(&self.cond_dropout_p) {
            invalid!("cond_dropout_p {} outside [0, 0.2]", self.cond_dropout_p);
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 || self.val_draws == 0 {
            invalid!("weight_decay must be >= 0, grad_clip > 0 and val_draws > 0");
        }
        Ok(())
    }
}

/// Draws each item from a uniformly chosen class, then uniformly within it.
#[derive(Clone, Debug)]
pub struct ClassWeightedSampler {
    members: Vec<Vec<usize>>,
}

impl ClassWeightedSampler {
    pub fn new(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                invalid!("label {l} outside 0..{n_classes}");
            }
            members[l].push(i);
        }
        if let Some(k) = members.iter().position(Vec::is_empty) {
            invalid!("class {k} has no members");
        }
        Ok(Self { members })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let c = rng.random_range(0..self.members.len());
        let m = &self.members[c];
        m[rng.random_range(0..m.len())]
    }
}

/// Per-item randomness of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
    /// Condition replaced by null.
    pub dropped: Vec<bool>,
}

impl NoiseDraw {
    /// `t` for every item, then `eps`, then one dropout draw per item.
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], steps: usize, drop_p: f64, rng: &mut R) -> Result<Self> {
        let b = shape[0];
        let t = (0..b).map(|_| rng.random_range(0..steps)).collect();
        let n: usize = shape.iter().product();
        let eps = Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect());
        let dropped = (0..b).map(|_| dropout_draw(drop_p, rng)).collect::<Result<_>>()?;
        Ok(Self { t, eps, dropped })
    }
}

/// `x_t` for a batch with per-item timesteps.
pub fn noisy_batch(s: &NoiseSchedule, x0: &Tensor<f32>, t: &[usize], eps: &Tensor<f32>) -> Result<Tensor<f32>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let b = x0.shape()[0];
    if t.len() != b {
        invalid!("{} timesteps for {b} items", t.len());
    }
    let per = x0.len() / b;
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..b {
        let xi = Tensor::new(vec![per], x0.data()[i * per..(i + 1) * per].to_vec());
        let ei = Tensor::new(vec![per], eps.data()[i * per..(i + 1) * per].to_vec());
        out.extend(s.forward_marginal(&xi, t[i], &ei)?.into_data());
    }
    Ok(Tensor::new(x0.shape().to_vec(), out))
}

/// Anything that predicts the noise of a batch under one shared condition.
pub trait EpsModel {
    fn item_shape(&self) -> Vec<usize>;
    fn is_conditional(&self) -> bool;
    fn eps(&self, x_t: &Tensor<f32>, t: &[usize], cond: Option<&ConditionSpec>) -> Result<Tensor<f32>>;
}

impl EpsModel for Denoiser {
    fn item_shape(&self) -> Vec<usize> {
        self.config.input_shape(1)[1..].to_vec()
    }

    fn is_conditional(&self) -> bool {
        self.cond.is_some()
    }

    fn eps(&self, x_t: &Tensor<f32>, t: &[usize], cond: Option<&ConditionSpec>) -> Result<Tensor<f32>> {
        let specs = vec![cond; t.len()];
        self.predict(x_t, t, &specs)
    }
}

/// Builds the objective inside a graph so it can be differentiated:
/// `mean((eps_theta(x_t, t, c) - eps)^2)` plus, when `lambda > 0`,
/// `lambda * d_perc(x0_hat, x0)` on the implied clean estimate.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph(
    g: &mut Graph<f32>,
    den: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &Tensor<f32>,
    specs: &[Option<&ConditionSpec>],
    draw: &NoiseDraw,
    lambda: f64,
    backbone: Option<&dyn FeatureBackbone>,
) -> Result<Var> {
    let xt = noisy_batch(schedule, x0, &draw.t, &draw.eps)?;
    let effective: Vec<Option<&ConditionSpec>> =
        specs.iter().zip(&draw.dropped).map(|(s, &d)| if d { None } else { *s }).collect();
    let xv = g.constant(xt.clone());
    let cv = den.cond_vars(g, &effective)?;
    let pred = den.unet.forward(g, &den.params, xv, &draw.t, cv.as_ref())?;
    let target = g.constant(draw.eps.clone());
    let mut loss = g.mse(pred, target);
    if lambda > 0.0 {
        let bb = backbone.ok_or_else(|| Error::Validation("perceptual term needs a feature backbone".into()))?;
        let ab = schedule.alpha_bars();
        let coef: Vec<f32> = draw.t.iter().map(|&t| (-(1.0 - ab[t]).sqrt() / ab[t].sqrt()) as f32).collect();
        let inv: Vec<f32> = draw.t.iter().map(|&t| (1.0 / ab[t].sqrt()) as f32).collect();
        let mut base = xt;
        let per = base.len() / inv.len();
        for (chunk, &s) in base.data_mut().chunks_mut(per).zip(&inv) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let scaled = g.mul_per_sample(pred, coef);
        let x0_hat = g.add_const(scaled, &base);
        let x0v = g.constant(x0.clone());
        let perc = perceptual_graph(g, bb, x0_hat, x0v)?;
        let perc = g.scale(perc, lambda as f32);
        loss = g.add(loss, perc);
    }
    Ok(loss)
}

/// Loss value for an arbitrary predictor with the draw taken from `rng`.
pub fn ddpm_loss<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &Tensor<f32>,
    cond: Option<&ConditionSpec>,
    drop_p: f64,
    rng: &mut R,
) -> Result<f64> {
    let draw = NoiseDraw::sample(x0.shape(), schedule.steps(), drop_p, rng)?;
    let xt = noisy_batch(schedule, x0, &draw.t, &draw.eps)?;
    // One shared condition per call; dropped items are evaluated separately.
    let mut pred = Tensor::zeros(x0.shape().to_vec());
    let b = x0.shape()[0];
    let per = x0.len() / b;
    for keep in [true, false] {
        let idx: Vec<usize> = (0..b).filter(|&i| draw.dropped[i] != keep).collect();
        if idx.is_empty() {
            continue;
        }
        let sub = Tensor::stack(&idx.iter().map(|&i| xt.slice_leading(i, 1).reshape(xt.shape()[1..].to_vec())).collect::<Vec<_>>());
        let ts: Vec<usize> = idx.iter().map(|&i| draw.t[i]).collect();
        let p = model.eps(&sub, &ts, if keep { cond } else { None })?;
        for (k, &i) in idx.iter().enumerate() {
            pred.data_mut()[i * per..(i + 1) * per].copy_from_slice(&p.data()[k * per..(k + 1) * per]);
        }
    }
    let mse = pred.data().iter().zip(draw.eps.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / pred.len() as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(mse)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
    pub improved: bool,
}

/// Result of a training run: the best-validation model and its history.
#[derive(Clone, Debug)]
pub struct DdpmCheckpoint {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub train_config: TrainConfig,
    /// Epoch of the best validation loss; 0 is the untrained network.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
    pub epochs_run: usize,
    pub curve: Vec<EpochLog>,
    pub rng: ChaCha8Rng,
    /// Latent models record the autoencoder they were trained against.
    pub latent: Option<LatentLink>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentLink {
    pub ae_fingerprint: String,
    pub scale: f64,
}

#[derive(Serialize, Deserialize)]
struct DdpmMeta {
    kind: String,
    denoiser_config: DenoiserConfig,
    train_config: TrainConfig,
    seed: u64,
    best_epoch: usize,
    best_val_loss: f64,
    initial_val_loss: f64,
    epochs_run: usize,
    curve: Vec<EpochLog>,
    latent: Option<LatentLink>,
}

impl DdpmCheckpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        let meta = DdpmMeta {
            kind: "ddpm".into(),
            denoiser_config: self.denoiser.config.clone(),
            train_config: self.train_config.clone(),
            seed: self.denoiser.seed,
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val_loss,
            initial_val_loss: self.initial_val_loss,
            epochs_run: self.epochs_run,
            curve: self.curve.clone(),
            latent: self.latent.clone(),
        };
        a.put_json("config.json", &meta)?;
        a.put_store("params/denoiser", &self.denoiser.params)?;
        a.put_store("params/cond", &self.denoiser.cond_params)?;
        a.put_bytes("schedule.bin", self.schedule.to_bytes());
        a.put_json("rng.json", &self.rng)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta: DdpmMeta = a.get_json("config.json")?;
        if meta.kind != "ddpm" {
            return Err(Error::Checkpoint(format!("expected a ddpm checkpoint, found {}", meta.kind)));
        }
        let mut denoiser = Denoiser::init(&meta.denoiser_config, meta.seed)?;
        a.load_store("params/denoiser", &mut denoiser.params)?;
        a.load_store("params/cond", &mut denoiser.cond_params)?;
        let schedule = NoiseSchedule::from_bytes(a.get_bytes("schedule.bin")?)?;
        let rng = a.get_json("rng.json")?;
        Ok(Self {
            denoiser,
            schedule,
            train_config: meta.train_config,
            best_epoch: meta.best_epoch,
            best_val_loss: meta.best_val_loss,
            initial_val_loss: meta.initial_val_loss,
            epochs_run: meta.epochs_run,
            curve: meta.curve,
            rng,
            latent: meta.latent,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Training curve as CSV.
    pub fn write_curve_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,grad_norm,improved")?;
        for e in &self.curve {
            writeln!(w, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.grad_norm, e.improved)?;
        }
        Ok(())
    }
}

/// Optional hooks for a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Frozen network for the perceptual term.
    pub backbone: Option<&'a dyn FeatureBackbone>,
    /// Called after every validation round.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

struct ValidationSet {
    x: Vec<Tensor<f32>>,
    t: Vec<Vec<usize>>,
    eps: Vec<Tensor<f32>>,
    specs: Vec<Vec<ConditionSpec>>,
}

impl ValidationSet {
    fn build(val: &ImageSet, steps: usize, draws: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order: Vec<usize> = (0..draws).flat_map(|_| 0..val.len()).collect();
        let mut out = Self { x: Vec::new(), t: Vec::new(), eps: Vec::new(), specs: Vec::new() };
        for chunk in order.chunks(32) {
            let x = val.batch(chunk);
            let d = NoiseDraw::sample(x.shape(), steps, 0.0, &mut rng)?;
            out.specs.push(chunk.iter().map(|&i| val.specs[i].clone()).collect());
            out.x.push(x);
            out.t.push(d.t);
            out.eps.push(d.eps);
        }
        Ok(out)
    }

    fn loss(&self, den: &Denoiser, schedule: &NoiseSchedule) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..self.x.len() {
            let xt = noisy_batch(schedule, &self.x[i], &self.t[i], &self.eps[i])?;
            let specs: Vec<Option<&ConditionSpec>> = self.specs[i].iter().map(Some).collect();
            let p = den.predict(&xt, &self.t[i], &specs)?;
            total += p.data().iter().zip(self.eps[i].data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            count += p.len();
        }
        Ok(total / count as f64)
    }
}

fn t_histogram(t: &[usize], steps: usize) -> Vec<usize> {
    let mut h = vec![0; 10];
    for &ti in t {
        h[(ti * 10 / steps).min(9)] += 1;
    }
    h
}

/// Train with class-weighted sampling and early stopping on a fixed
/// validation draw. Returns the best-validation checkpoint.
pub fn train_ddpm(
    train: &ImageSet,
    val: &ImageSet,
    tc: &TrainConfig,
    dc: &DenoiserConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<DdpmCheckpoint> {
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        invalid!("training needs non-empty train and validation splits");
    }
    let want = dc.input_shape(1)[1..].to_vec();
    if train.item_shape() != Some(want.as_slice()) || val.item_shape() != Some(want.as_slice()) {
        return Err(Error::Shape(format!("dataset items {:?}, denoiser expects {:?}", train.item_shape(), want)));
    }
    if tc.lambda_perceptual > 0.0 && hooks.backbone.is_none() {
        invalid!("lambda_perceptual > 0 requires a perceptual backbone");
    }
    let schedule = tc.schedule.build()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(tc.seed);
    let init_seed = seeds.next_u64();
    let val_seed = seeds.next_u64();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.next_u64());

    let mut den = Denoiser::init(dc, init_seed)?;
    let sampler = ClassWeightedSampler::new(&train.labels(), crate::conditioning::OrientationClass::COUNT)?;
    let vset = ValidationSet::build(val, schedule.steps(), tc.val_draws, val_seed)?;
    let mut opt = AdamW::new(tc.learning_rate, tc.weight_decay);

    let initial = vset.loss(&den, &schedule)?;
    if !initial.is_finite() {
        return Err(Error::NonFinite("initial validation loss".into()));
    }
    let mut best = (den.clone(), initial, 0usize);
    let mut stale = 0usize;
    let mut high_epochs = 0usize;
    let mut curve = Vec::new();
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let mut step = 0usize;
    let mut epochs_run = 0;
    for epoch in 1..=tc.max_epochs {
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        for _ in 0..steps_per_epoch {
            step += 1;
            let idx: Vec<usize> = (0..tc.batch_size).map(|_| sampler.draw(&mut rng)).collect();
            let x0 = train.batch(&idx);
            let draw = NoiseDraw::sample(x0.shape(), schedule.steps(), tc.cond_dropout_p, &mut rng)?;
            let specs: Vec<Option<&ConditionSpec>> = idx.iter().map(|&i| Some(&train.specs[i])).collect();
            let mut g = Graph::new();
            let loss = loss_graph(&mut g, &den, &schedule, &x0, &specs, &draw, tc.lambda_perceptual, hooks.backbone)?;
            let lv = g.value(loss).item() as f64;
            let grads = g.backward(loss);
            let mut gs = vec![grads.for_store(&den.params), grads.for_store(&den.cond_params)];
            let norm = clip_global_norm(&mut gs, tc.grad_clip);
            if !lv.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {step} (epoch {epoch}): loss {lv}, grad norm {norm}, t histogram by decile {:?}",
                    t_histogram(&draw.t, schedule.steps())
                )));
            }
            let Denoiser { params, cond_params, .. } = &mut den;
            opt.step(&mut [params, cond_params], &gs);
            loss_sum += lv;
            norm_sum += norm;
        }
        epochs_run = epoch;
        let train_loss = loss_sum / steps_per_epoch as f64;
        let val_loss = vset.loss(&den, &schedule)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss after epoch {epoch}")));
        }
        let improved = val_loss < best.1;
        if improved {
            best = (den.clone(), val_loss, epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        let log = EpochLog { epoch, train_loss, val_loss, grad_norm: norm_sum / steps_per_epoch as f64, improved };
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}{}", if improved { " *" } else { "" });
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&log);
        }
        curve.push(log);
        high_epochs = if train_loss > 10.0 * initial { high_epochs + 1 } else { 0 };
        if high_epochs >= 3 {
            return Err(Error::Divergence(format!(
                "training loss above 10x the initial {initial:.4} for 3 epochs (epoch {epoch}, last {train_loss:.4})"
            )));
        }
        if stale >= tc.patience {
            break;
        }
    }
    let (denoiser, best_val_loss, best_epoch) = best;
    Ok(DdpmCheckpoint {
        denoiser,
        schedule,
        train_config: tc.clone(),
        best_epoch,
        best_val_loss,
        initial_val_loss: initial,
        epochs_run,
        curve,
        rng,
        latent: None,
    })
}

/// One reverse step: posterior mean plus `sqrt(beta_tilde_t) z` for `t > 0`.
pub fn reverse_step(
    s: &NoiseSchedule,
    x_t: &Tensor<f32>,
    t: usize,
    eps_hat: &Tensor<f32>,
    z: Option<&Tensor<f32>>,
) -> Tensor<f32> {
    let beta = s.betas()[t];
    let c = beta / (1.0 - s.alpha_bars()[t]).sqrt();
    let inv = 1.0 / s.alphas()[t].sqrt();
    let sigma = s.posterior_variance(t).sqrt();
    let mut out = x_t.zip_map(eps_hat, |x, e| ((x as f64 - c * e as f64) * inv) as f32);
    if let (true, Some(z)) = (t > 0, z) {
        out = out.zip_map(z, |m, n| m + (sigma * n as f64) as f32);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// 1 = plain conditional prediction; 0 = unconditional.
    pub guidance_scale: f64,
    pub batch_size: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { guidance_scale: 1.0, batch_size: 50 }
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Ancestral sampling from `T - 1` down to 0. Each batch draws its own
/// stream seed from `rng`.
pub fn sample_ddpm<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: Option<&ConditionSpec>,
    n: usize,
    rng: &mut R,
    opts: &SampleOptions,
) -> Result<Vec<Tensor<f32>>> {
    if n == 0 {
        invalid!("sample count must be at least 1");
    }
    if !(opts.guidance_scale >= 0.0 && opts.guidance_scale.is_finite()) {
        invalid!("guidance_scale must be finite and >= 0");
    }
    if opts.batch_size == 0 {
        invalid!("batch_size must be positive");
    }
    let guided = model.is_conditional() && cond.is_some() && opts.guidance_scale != 1.0;
    let w = opts.guidance_scale as f32;
    let item = model.item_shape();
    let mut out = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let b = remaining.min(opts.batch_size);
        remaining -= b;
        let mut brng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let mut shape = vec![b];
        shape.extend_from_slice(&item);
        let mut x = normal_tensor(&shape, &mut brng);
        for t in (0..schedule.steps()).rev() {
            let ts = vec![t; b];
            let eps = if guided {
                let c = model.eps(&x, &ts, cond)?;
                let u = model.eps(&x, &ts, None)?;
                u.zip_map(&c, |u, c| u + w * (c - u))
            } else {
                model.eps(&x, &ts, cond)?
            };
            let z = (t > 0).then(|| normal_tensor(&shape, &mut brng));
            x = reverse_step(schedule, &x, t, &eps, z.as_ref());
            if !x.all_finite() {
                return Err(Error::NonFinite(format!("sampling produced non-finite values at step {t}")));
            }
        }
        out.extend(x.unstack());
    }
    Ok(out)
}

/// Parameters frozen from training: reuse the U-Net layout with another
/// store (used by the latent model).
pub fn unet_forward_frozen(
    g: &mut Graph<f32>,
    unet: &UNet,
    store: &ParamStore<f32>,
    x: Var,
    t: &[usize],
) -> Result<Var> {
    g.freeze(store);
    unet.forward(g, store, x, t, None)
}
