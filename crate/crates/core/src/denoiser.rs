//! Noise-prediction U-Net with timestep embedding, spatial self-attention
//! and cross-attention over condition tokens, in 2D or 3D.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{CondConfig, CondEmbedding, CondEncoder, CondVars, ConditionSpec};
use crate::error::{invalid, Error, Result};
use crate::nn::layers::{AttnBlock, Conv, GroupNorm, Linear, ResBlock};
use crate::nn::{Element, Graph, ParamStore, Tensor, Var};
use crate::schedule::NoiseSchedule;
use crate::volume::Volume;

fn default_mult() -> Vec<usize> {
    Vec::new()
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub spatial_dims: usize,
    pub in_channels: usize,
    /// Spatial extent per axis of the inputs.
    pub extent: usize,
    pub base_width: usize,
    pub depth: usize,
    #[serde(default)]
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    #[serde(default)]
    pub use_cross_attention: bool,
    /// Add the class vector to the timestep embedding.
    #[serde(default = "yes")]
    pub class_conditioning: bool,
    /// Width multiplier per level; empty means 1, 2, 2, ...
    #[serde(default = "default_mult")]
    pub channel_mult: Vec<usize>,
    #[serde(default = "one")]
    pub res_blocks_per_level: usize,
}

impl DenoiserConfig {
    /// Small 2D reference network.
    pub fn tiny_2d(extent: usize) -> Self {
        Self {
            spatial_dims: 2,
            in_channels: 1,
            extent,
            base_width: 16,
            depth: 3,
            attention_levels: vec![2],
            time_embed_dim: 32,
            cond_embed_dim: 32,
            use_cross_attention: false,
            class_conditioning: true,
            channel_mult: vec![1, 2, 2],
            res_blocks_per_level: 1,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| {
                let m = self.channel_mult.get(l).copied().unwrap_or(if l == 0 { 1 } else { 2 });
                self.base_width * m
            })
            .collect()
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch, self.in_channels];
        s.extend(std::iter::repeat_n(self.extent, self.spatial_dims));
        s
    }

    pub fn conditional(&self) -> bool {
        self.class_conditioning || self.use_cross_attention
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.spatial_dims) {
            invalid!("spatial_dims must be 2 or 3, got {}", self.spatial_dims);
        }
        if self.in_channels == 0 || self.base_width == 0 {
            invalid!("in_channels and base_width must be positive");
        }
        if self.depth == 0 {
            invalid!("depth must be at least 1");
        }
        if let Some(l) = self.attention_levels.iter().find(|l| **l >= self.depth) {
            invalid!("attention level {l} outside 0..{}", self.depth);
        }
        let div = 1usize << (self.depth - 1);
        if self.extent == 0 || self.extent % div != 0 {
            invalid!("extent {} not divisible by 2^(depth-1) = {div}", self.extent);
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            invalid!("time_embed_dim must be positive and even");
        }
        if self.conditional() && self.cond_embed_dim == 0 {
            invalid!("conditioning requires cond_embed_dim > 0");
        }
        if !self.channel_mult.is_empty() && self.channel_mult.len() != self.depth {
            invalid!("channel_mult needs one entry per level");
        }
        if self.channel_mult.contains(&0) || self.res_blocks_per_level == 0 {
            invalid!("channel multipliers and res_blocks_per_level must be positive");
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `sin(t f_i)` for the first half, `cos(t f_i)` for
/// the second, with `f_i = 10000^(-i / half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        invalid!("embedding width must be positive and even, got {dim}");
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Level {
    res: Vec<ResBlock>,
    attn: Option<AttnBlock>,
    cross: Option<AttnBlock>,
    down: Option<Conv>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UpLevel {
    res: Vec<ResBlock>,
    attn: Option<AttnBlock>,
    cross: Option<AttnBlock>,
    up: Option<Conv>,
}

/// The network layout; values live in a separate store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UNet {
    config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    class_proj: Option<Linear>,
    input: Conv,
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid_cross: Option<AttnBlock>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out: Conv,
}

impl UNet {
    pub fn new<E: Element, R: Rng>(s: &mut ParamStore<E>, config: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.spatial_dims;
        let te = c.time_embed_dim;
        let widths = c.widths();
        let ctx = c.use_cross_attention.then_some(c.cond_embed_dim);
        let any_attn = !c.attention_levels.is_empty();
        let time1 = Linear::new(s, "time.l1", te, te, rng);
        let time2 = Linear::new(s, "time.l2", te, te, rng);
        let class_proj = c.class_conditioning.then(|| Linear::new(s, "class_proj", c.cond_embed_dim, te, rng));
        let input = Conv::new(s, "input", d, c.in_channels, widths[0], 3, 1, rng);
        let mut down = Vec::new();
        let mut cin = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let res = (0..c.res_blocks_per_level)
                .map(|r| ResBlock::new(s, &format!("down.{l}.res.{r}"), d, if r == 0 { cin } else { w }, w, Some(te), rng))
                .collect();
            let has_attn = c.attention_levels.contains(&l);
            let attn = has_attn.then(|| AttnBlock::new(s, &format!("down.{l}.attn"), w, None, rng));
            let cross = (has_attn && ctx.is_some()).then(|| AttnBlock::new(s, &format!("down.{l}.cross"), w, ctx, rng));
            let dn = (l + 1 < c.depth).then(|| Conv::new(s, &format!("down.{l}.down"), d, w, w, 3, 2, rng));
            down.push(Level { res, attn, cross, down: dn });
            cin = w;
        }
        let wm = *widths.last().unwrap();
        let mid1 = ResBlock::new(s, "mid.res1", d, wm, wm, Some(te), rng);
        let mid_attn = any_attn.then(|| AttnBlock::new(s, "mid.attn", wm, None, rng));
        let mid_cross = (any_attn && ctx.is_some()).then(|| AttnBlock::new(s, "mid.cross", wm, ctx, rng));
        let mid2 = ResBlock::new(s, "mid.res2", d, wm, wm, Some(te), rng);
        let mut up = Vec::new();
        for l in (0..c.depth).rev() {
            let w = widths[l];
            let res = (0..c.res_blocks_per_level)
                .map(|r| ResBlock::new(s, &format!("up.{l}.res.{r}"), d, if r == 0 { 2 * w } else { w }, w, Some(te), rng))
                .collect();
            let has_attn = c.attention_levels.contains(&l);
            let attn = has_attn.then(|| AttnBlock::new(s, &format!("up.{l}.attn"), w, None, rng));
            let cross = (has_attn && ctx.is_some()).then(|| AttnBlock::new(s, &format!("up.{l}.cross"), w, ctx, rng));
            let upc = (l > 0).then(|| Conv::new(s, &format!("up.{l}.up"), d, w, widths[l - 1], 3, 1, rng));
            up.push(UpLevel { res, attn, cross, up: upc });
        }
        let out_norm = GroupNorm::new(s, "out.norm", widths[0]);
        let out = Conv::new(s, "out.conv", d, widths[0], c.in_channels, 3, 1, rng);
        Ok(Self { config: c.clone(), time1, time2, class_proj, input, down, mid1, mid_attn, mid_cross, mid2, up, out_norm, out })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn attend<E: Element>(
        g: &mut Graph<E>,
        s: &ParamStore<E>,
        h: Var,
        attn: &Option<AttnBlock>,
        cross: &Option<AttnBlock>,
        cond: Option<&CondVars>,
    ) -> Var {
        let mut h = h;
        if let Some(a) = attn {
            h = a.forward(g, s, h, None);
        }
        if let (Some(a), Some((tok, lens))) = (cross, cond.and_then(|c| c.tokens.as_ref())) {
            h = a.forward(g, s, h, Some((*tok, lens.as_slice())));
        }
        h
    }

    /// `x: [B, C, *S]`, one timestep per item.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        s: &ParamStore<E>,
        x: Var,
        t: &[usize],
        cond: Option<&CondVars>,
    ) -> Result<Var> {
        let c = &self.config;
        let want = c.input_shape(t.len());
        if g.shape(x) != want.as_slice() {
            return Err(Error::Shape(format!("denoiser input {:?}, expected {:?}", g.shape(x), want)));
        }
        if c.conditional() && cond.is_none() {
            invalid!("conditional denoiser needs condition vectors (use the null embedding)");
        }
        if c.use_cross_attention && cond.is_some_and(|v| v.tokens.is_none()) {
            invalid!("cross-attention denoiser needs condition tokens");
        }
        let te = c.time_embed_dim;
        let mut sin = Vec::with_capacity(t.len() * te);
        for &ti in t {
            sin.extend(timestep_embedding(ti, te)?.into_iter().map(E::from_f64));
        }
        let temb = g.constant(Tensor::new(vec![t.len(), te], sin));
        let h = self.time1.forward(g, s, temb);
        let h = g.silu(h);
        let mut emb = self.time2.forward(g, s, h);
        if let (Some(p), Some(cv)) = (&self.class_proj, cond) {
            let ce = p.forward(g, s, cv.class);
            emb = g.add(emb, ce);
        }
        let emb = g.silu(emb);

        let mut h = self.input.forward(g, s, x);
        let mut skips = Vec::with_capacity(c.depth);
        for lvl in &self.down {
            for r in &lvl.res {
                h = r.forward(g, s, h, Some(emb));
            }
            h = Self::attend(g, s, h, &lvl.attn, &lvl.cross, cond);
            skips.push(h);
            if let Some(dn) = &lvl.down {
                h = dn.forward(g, s, h);
            }
        }
        h = self.mid1.forward(g, s, h, Some(emb));
        h = Self::attend(g, s, h, &self.mid_attn, &self.mid_cross, cond);
        h = self.mid2.forward(g, s, h, Some(emb));
        for lvl in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat1(h, skip);
            for r in &lvl.res {
                h = r.forward(g, s, h, Some(emb));
            }
            h = Self::attend(g, s, h, &lvl.attn, &lvl.cross, cond);
            if let Some(u) = &lvl.up {
                h = g.upsample2(h);
                h = u.forward(g, s, h);
            }
        }
        let h = self.out_norm.forward(g, s, h);
        let h = g.silu(h);
        Ok(self.out.forward(g, s, h))
    }
}

/// A denoiser together with its condition encoder and their parameters.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub cond_config: Option<CondConfig>,
    pub unet: UNet,
    pub cond: Option<CondEncoder>,
    pub params: ParamStore<f32>,
    pub cond_params: ParamStore<f32>,
    pub seed: u64,
}

impl Denoiser {
    /// Deterministic initialisation. A conditional network derives its
    /// condition encoder from `config.cond_embed_dim` and `use_cross_attention`.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let unet = UNet::new(&mut params, config, &mut rng)?;
        let mut cond_params = ParamStore::new();
        let (cond_config, cond) = if config.conditional() {
            let cc = CondConfig { embed_dim: config.cond_embed_dim, use_text: config.use_cross_attention, max_tokens: 12 };
            let enc = CondEncoder::new(&mut cond_params, cc.clone(), &mut rng)?;
            (Some(cc), Some(enc))
        } else {
            (None, None)
        };
        Ok(Self { config: config.clone(), cond_config, unet, cond, params, cond_params, seed })
    }

    pub fn param_count(&self) -> usize {
        self.params.count() + self.cond_params.count()
    }

    /// Hash over both parameter stores.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.params.hash_hex());
        h.update(self.cond_params.hash_hex());
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.all_finite() && self.cond_params.all_finite()
    }

    /// Condition nodes for a batch; `None` for unconditional networks.
    pub fn cond_vars(&self, g: &mut Graph<f32>, specs: &[Option<&ConditionSpec>]) -> Result<Option<CondVars>> {
        match &self.cond {
            Some(enc) => Ok(Some(enc.encode_graph(g, &self.cond_params, specs)?)),
            None => Ok(None),
        }
    }

    pub fn null_embedding(&self) -> Option<CondEmbedding> {
        self.cond.as_ref().map(|e| e.null_embedding(&self.cond_params))
    }

    pub fn embed(&self, spec: Option<&ConditionSpec>) -> Result<Option<CondEmbedding>> {
        self.cond.as_ref().map(|e| e.embed(&self.cond_params, spec)).transpose()
    }

    fn check_input(&self, x: &Tensor<f32>, t: &[usize]) -> Result<()> {
        let want = self.config.input_shape(t.len());
        if x.shape() != want.as_slice() {
            return Err(Error::Shape(format!("input {:?}, expected {:?}", x.shape(), want)));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        Ok(())
    }

    /// Batched noise prediction from condition specs (`None` = null).
    pub fn predict(&self, x: &Tensor<f32>, t: &[usize], specs: &[Option<&ConditionSpec>]) -> Result<Tensor<f32>> {
        self.check_input(x, t)?;
        if specs.len() != t.len() {
            invalid!("{} conditions for {} items", specs.len(), t.len());
        }
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let cv = self.cond_vars(&mut g, specs)?;
        let y = self.unet.forward(&mut g, &self.params, xv, t, cv.as_ref())?;
        Ok(g.value(y).clone())
    }

    /// Batched noise prediction from precomputed embeddings.
    pub fn predict_embedded(&self, x: &Tensor<f32>, t: &[usize], embs: &[&CondEmbedding]) -> Result<Tensor<f32>> {
        self.check_input(x, t)?;
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let cv = match &self.cond {
            Some(enc) => {
                if embs.len() != t.len() {
                    invalid!("{} embeddings for {} items", embs.len(), t.len());
                }
                Some(enc.embeddings_to_vars(&mut g, embs)?)
            }
            None => None,
        };
        let y = self.unet.forward(&mut g, &self.params, xv, t, cv.as_ref())?;
        Ok(g.value(y).clone())
    }

    /// Single-volume prediction; `cond = None` selects the learned null
    /// condition for conditional networks.
    pub fn denoise_predict(&self, x_t: &Volume, t: usize, cond: Option<&CondEmbedding>) -> Result<Volume> {
        if self.config.in_channels != 1 {
            invalid!("volume prediction requires a single-channel network");
        }
        let mut shape = vec![1, 1];
        shape.extend_from_slice(x_t.shape());
        let x = x_t.to_tensor().reshape(shape);
        let null = self.null_embedding();
        let y = match (cond, &null) {
            (Some(c), _) => self.predict_embedded(&x, &[t], &[c])?,
            (None, Some(n)) => self.predict_embedded(&x, &[t], &[n])?,
            (None, None) => self.predict_embedded(&x, &[t], &[])?,
        };
        if !y.all_finite() {
            return Err(Error::NonFinite(format!("prediction at t={t}")));
        }
        let y = y.reshape(x_t.shape().to_vec());
        Ok(Volume::from_tensor(&y, x_t.spacing_mm.clone())?.with_meta(x_t.meta.clone()))
    }
}

/// Fixed inputs for a gradient check of the noise-prediction loss.
pub struct GradCheckBatch {
    pub x0: Tensor<f32>,
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
    pub specs: Vec<Option<ConditionSpec>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_param: String,
    pub passed: bool,
}

fn loss_f64(
    den: &Denoiser,
    p: &ParamStore<f64>,
    cp: &ParamStore<f64>,
    xt: &Tensor<f64>,
    eps: &Tensor<f64>,
    batch: &GradCheckBatch,
    record: bool,
) -> Result<(f64, Option<(Vec<Option<Tensor<f64>>>, Vec<Option<Tensor<f64>>>)>)> {
    let mut g = if record { Graph::new() } else { Graph::inference() };
    let x = g.constant(xt.clone());
    let specs: Vec<Option<&ConditionSpec>> = batch.specs.iter().map(Option::as_ref).collect();
    let cv = match &den.cond {
        Some(enc) => Some(enc.encode_graph(&mut g, cp, &specs)?),
        None => None,
    };
    let y = den.unet.forward(&mut g, p, x, &batch.t, cv.as_ref())?;
    let e = g.constant(eps.clone());
    let l = g.mse(y, e);
    let v = g.value(l).item();
    if !record {
        return Ok((v, None));
    }
    let grads = g.backward(l);
    Ok((v, Some((grads.for_store(p), grads.for_store(cp)))))
}

/// Compare analytic gradients of `mean((eps_theta(x_t, t, c) - eps)^2)` with
/// central finite differences in double precision on `n_probe` randomly
/// chosen scalar parameters (denoiser and condition encoder).
pub fn grad_check(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &GradCheckBatch,
    n_probe: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if batch.specs.len() != batch.t.len() {
        invalid!("one condition per batch item");
    }
    let mut p = den.params.cast::<f64>();
    let mut cp = den.cond_params.cast::<f64>();
    let x0 = batch.x0.cast::<f64>();
    let eps = batch.eps.cast::<f64>();
    let b = batch.t.len();
    let per = x0.len() / b;
    let mut xt = Vec::with_capacity(x0.len());
    for i in 0..b {
        let xi = Tensor::new(vec![per], x0.data()[i * per..(i + 1) * per].to_vec());
        let ei = Tensor::new(vec![per], eps.data()[i * per..(i + 1) * per].to_vec());
        xt.extend(schedule.forward_marginal(&xi, batch.t[i], &ei)?.into_data());
    }
    let xt = Tensor::new(x0.shape().to_vec(), xt);
    let (_, grads) = loss_f64(den, &p, &cp, &xt, &eps, batch, true)?;
    let (gp, gc) = grads.expect("recorded");

    // (store index, param id, flat offset) over every scalar.
    let mut slots = Vec::new();
    for (si, store) in [&p, &cp].into_iter().enumerate() {
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                slots.push((si, id, k));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, slots.len(), n_probe.min(slots.len()));
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    for pi in picks.iter() {
        let (si, id, k) = slots[pi];
        let ana = if si == 0 { &gp } else { &gc }[id.index()].as_ref().map_or(0.0, |t| t.data()[k]);
        let orig = if si == 0 { p.get(id).data()[k] } else { cp.get(id).data()[k] };
        let eval = |v: f64, p: &mut ParamStore<f64>, cp: &mut ParamStore<f64>| -> Result<f64> {
            if si == 0 {
                p.get_mut(id).data_mut()[k] = v;
            } else {
                cp.get_mut(id).data_mut()[k] = v;
            }
            Ok(loss_f64(den, p, cp, &xt, &eps, batch, false)?.0)
        };
        let lp = eval(orig + h, &mut p, &mut cp)?;
        let lm = eval(orig - h, &mut p, &mut cp)?;
        eval(orig, &mut p, &mut cp)?;
        let num = (lp - lm) / (2.0 * h);
        let err = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-6);
        if err > worst {
            worst = err;
            let name = if si == 0 { p.name(id) } else { cp.name(id) };
            worst_param = format!("{name}[{k}]");
        }
    }
    Ok(GradCheckReport { max_rel_error: worst, checked: picks.len(), worst_param, passed: worst < tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{FieldStrength, OrientationClass, Sequence};
    use rand_distr::{Distribution, StandardNormal};

    fn tiny(extent: usize, cross: bool) -> DenoiserConfig {
        DenoiserConfig {
            spatial_dims: 2,
            in_channels: 1,
            extent,
            base_width: 4,
            depth: 2,
            attention_levels: vec![1],
            time_embed_dim: 8,
            cond_embed_dim: 4,
            use_cross_attention: cross,
            class_conditioning: true,
            channel_mult: vec![1, 2],
            res_blocks_per_level: 1,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
    }

    #[test]
    fn timestep_embedding_edges() {
        let e = timestep_embedding(0, 16).unwrap();
        assert!(e[..8].iter().all(|v| *v == 0.0));
        assert!(e[8..].iter().all(|v| *v == 1.0));
        assert!(timestep_embedding(3, 7).is_err());
        for t in [1, 77, 999] {
            assert!(timestep_embedding(t, 64).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn timestep_embedding_injective_over_1000_steps() {
        let embs: Vec<Vec<f64>> = (0..1000).map(|t| timestep_embedding(t, 64).unwrap()).collect();
        for i in 0..1000 {
            for j in i + 1..1000 {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d > 1e-6, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = tiny(8, true);
        let a = Denoiser::init(&c, 1).unwrap();
        assert_eq!(a.params_hash(), Denoiser::init(&c, 1).unwrap().params_hash());
        assert_ne!(a.params_hash(), Denoiser::init(&c, 2).unwrap().params_hash());
        assert!(a.param_count() > 0 && a.all_finite());
    }

    #[test]
    fn rejects_unsatisfiable_configs() {
        let mut c = DenoiserConfig::tiny_2d(30);
        assert!(Denoiser::init(&c, 0).is_err());
        c.extent = 32;
        c.attention_levels = vec![3];
        assert!(Denoiser::init(&c, 0).is_err());
        c.attention_levels = vec![];
        c.depth = 0;
        assert!(Denoiser::init(&c, 0).is_err());
    }

    #[test]
    fn shape_preserved_2d_32_depth3() {
        let c = DenoiserConfig::tiny_2d(32);
        let d = Denoiser::init(&c, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, c.input_shape(2));
        let spec = ConditionSpec::new(OrientationClass::AfAv, FieldStrength::T3, Sequence::Tse);
        let y = d.predict(&x, &[0, 150], &[Some(&spec), None]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
        assert!(d.predict(&randn(&mut rng, vec![1, 1, 16, 16]), &[0], &[None]).is_err());
    }

    #[test]
    fn shape_preserved_3d() {
        let mut c = tiny(8, false);
        c.spatial_dims = 3;
        let d = Denoiser::init(&c, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, c.input_shape(1));
        let y = d.predict(&x, &[5], &[None]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8, 8]);
    }

    #[test]
    fn null_condition_is_deterministic_and_conditioning_is_live() {
        let d = Denoiser::init(&tiny(8, true), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, vec![8, 8]);
        let v = Volume::from_tensor(&x, vec![1.0, 1.0]).unwrap();
        let a = d.denoise_predict(&v, 10, None).unwrap();
        let b = d.denoise_predict(&v, 10, None).unwrap();
        assert_eq!(a.data, b.data);
        let spec = ConditionSpec::new(OrientationClass::RfRv, FieldStrength::T1_5, Sequence::Haste);
        let emb = d.embed(Some(&spec)).unwrap().unwrap();
        let c = d.denoise_predict(&v, 10, Some(&emb)).unwrap();
        assert_ne!(a.data, c.data);
        // Perturbing one condition parameter moves the conditional output.
        let mut d2 = d.clone();
        let id = d2.cond_params.id("cond.class.table").unwrap();
        let k = 3 * 4; // RF&RV row
        d2.cond_params.get_mut(id).data_mut()[k] += 0.5;
        let emb2 = d2.embed(Some(&spec)).unwrap().unwrap();
        let c2 = d2.denoise_predict(&v, 10, Some(&emb2)).unwrap();
        assert_ne!(c.data, c2.data);
    }

    #[test]
    fn gradient_check_tiny_network() {
        let c = tiny(4, true);
        let d = Denoiser::init(&c, 5).unwrap();
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConditionSpec::new(OrientationClass::AfRv, FieldStrength::T3, Sequence::Tse);
        let batch = GradCheckBatch {
            x0: randn(&mut rng, c.input_shape(2)),
            t: vec![3, 40],
            eps: randn(&mut rng, c.input_shape(2)),
            specs: vec![Some(spec), None],
        };
        let r = grad_check(&d, &s, &batch, 60, 1e-3, 1).unwrap();
        assert!(r.passed, "{r:?}");
        let r2 = grad_check(&d, &s, &batch, 60, 1e-3, 1).unwrap();
        assert_eq!(r.max_rel_error, r2.max_rel_error);
    }
}
