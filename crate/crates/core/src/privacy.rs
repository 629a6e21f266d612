//! Post-hoc privacy filter: a frozen contrastive encoder, a fingerprinted
//! embedding index of the training corpus, thresholded rejection of
//! near-copies and near-duplicate clustering.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Archive;
use crate::dataset::ImageSet;
use crate::error::{invalid, Error, Result};
use crate::nn::layers::{Conv, GroupNorm, Linear, ResBlock};
use crate::nn::{clip_global_norm, AdamW, Graph, ParamStore, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.95;
pub const DEFAULT_LINK_THRESHOLD: f64 = 0.9;

/// Encoder stages exposed for embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Projection head output.
    Final,
    /// First-stage feature map, spatially pooled.
    Mid,
}

impl Stage {
    pub const ALL: [Stage; 2] = [Stage::Final, Stage::Mid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Final => "final",
            Self::Mid => "mid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Self::Final),
            "mid" => Ok(Self::Mid),
            other => invalid!("unknown encoder stage {other:?}; expected \"final\" or \"mid\""),
        }
    }
}

/// `(a·b) / (‖a‖‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        invalid!("cosine similarity of a zero vector");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        invalid!("cannot normalise a zero or non-finite embedding");
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub spatial_dims: usize,
    pub in_channels: usize,
    pub extent: usize,
    pub widths: [usize; 2],
    pub embed_dim: usize,
    pub temperature: f64,
    /// Maximum translation of a training view, in pixels.
    pub augment_shift: usize,
    /// Standard deviation of additive noise on training views.
    pub augment_noise: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            spatial_dims: 2,
            in_channels: 1,
            extent: 32,
            widths: [16, 32],
            embed_dim: 64,
            temperature: 0.05,
            augment_shift: 0,
            augment_noise: 0.05,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent % 2 != 0 || self.widths.contains(&0) || self.embed_dim == 0 {
            invalid!("encoder needs an even extent and positive widths");
        }
        if !(self.temperature > 0.0) || !(self.learning_rate > 0.0) || self.batch_size < 2 || self.epochs == 0 {
            invalid!("encoder needs temperature > 0, lr > 0, batch_size >= 2 and epochs >= 1");
        }
        Ok(())
    }

    fn item_shape(&self) -> Vec<usize> {
        let mut s = vec![self.in_channels];
        s.extend(std::iter::repeat_n(self.extent, self.spatial_dims));
        s
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Net {
    input: Conv,
    res0: ResBlock,
    down: Conv,
    res1: ResBlock,
    norm: GroupNorm,
    head: Linear,
}

/// Small convolutional encoder trained by instance discrimination and then
/// frozen.
#[derive(Clone, Debug)]
pub struct ContrastiveEncoder {
    pub config: EncoderConfig,
    net: Net,
    pub params: ParamStore<f32>,
}

impl ContrastiveEncoder {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.spatial_dims;
        let [w0, w1] = config.widths;
        let net = Net {
            input: Conv::new(&mut s, "input", d, config.in_channels, w0, 3, 1, &mut rng),
            res0: ResBlock::new(&mut s, "res0", d, w0, w0, None, &mut rng),
            down: Conv::new(&mut s, "down", d, w0, w1, 3, 2, &mut rng),
            res1: ResBlock::new(&mut s, "res1", d, w1, w1, None, &mut rng),
            norm: GroupNorm::new(&mut s, "norm", w1),
            head: Linear::new(&mut s, "head", w1, config.embed_dim, &mut rng),
        };
        Ok(Self { config: config.clone(), net, params: s })
    }

    pub fn fingerprint(&self) -> String {
        format!("encoder:{}", self.params.hash_hex())
    }

    /// `(final, mid)` graph outputs, each `[B, d]`.
    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<(Var, Var)> {
        let want = self.config.item_shape();
        let got = g.shape(x).to_vec();
        if got.len() != want.len() + 1 || got[1..] != want[..] {
            return Err(Error::Shape(format!("encoder input {got:?}, expected [B, {want:?}]")));
        }
        let s = &self.params;
        let n = &self.net;
        let h = n.input.forward(g, s, x);
        let h0 = n.res0.forward(g, s, h, None);
        let mid = g.mean_spatial(h0);
        let h = n.down.forward(g, s, h0);
        let h = n.res1.forward(g, s, h, None);
        let h = n.norm.forward(g, s, h);
        let h = g.silu(h);
        let pooled = g.mean_spatial(h);
        Ok((n.head.forward(g, s, pooled), mid))
    }

    /// Embeddings of every item for one stage.
    pub fn embed(&self, items: &[Tensor<f32>], stage: Stage) -> Result<Vec<Vec<f64>>> {
        Ok(self.embed_all(items)?.remove(&stage).expect("all stages"))
    }

    pub fn embed_all(&self, items: &[Tensor<f32>]) -> Result<BTreeMap<Stage, Vec<Vec<f64>>>> {
        let mut out: BTreeMap<Stage, Vec<Vec<f64>>> = Stage::ALL.iter().map(|&s| (s, Vec::new())).collect();
        for chunk in items.chunks(64) {
            let mut g = Graph::inference();
            let xv = g.constant(Tensor::stack(chunk));
            let (f, m) = self.forward(&mut g, xv)?;
            for (stage, v) in [(Stage::Final, f), (Stage::Mid, m)] {
                let t = g.value(v);
                let d = t.shape()[1];
                let rows = out.get_mut(&stage).expect("stage present");
                rows.extend(t.data().chunks(d).map(|r| r.iter().map(|&x| x as f64).collect()));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        a.put_json("config.json", &serde_json::json!({"kind": "encoder", "config": self.config, "fingerprint": self.fingerprint()}))?;
        a.put_store("params/encoder", &self.params)?;
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let meta: serde_json::Value = a.get_json("config.json")?;
        if meta["kind"] != "encoder" {
            return Err(Error::Checkpoint(format!("expected an encoder checkpoint, found {}", meta["kind"])));
        }
        let config: EncoderConfig = serde_json::from_value(meta["config"].clone())?;
        let mut e = Self::init(&config, 0)?;
        a.load_store("params/encoder", &mut e.params)?;
        let want = meta["fingerprint"].as_str().unwrap_or_default();
        if e.fingerprint() != want {
            return Err(Error::Fingerprint { expected: want.to_string(), found: e.fingerprint() });
        }
        Ok(e)
    }
}

/// Random shift (edge replicated), intensity jitter and additive noise.
fn augment<R: Rng + ?Sized>(x: &Tensor<f32>, cfg: &EncoderConfig, rng: &mut R) -> Tensor<f32> {
    let s = x.shape();
    let gain = rng.random_range(0.9..1.1f32);
    let offset = rng.random_range(-0.1..0.1f32);
    if s.len() != 3 {
        return x.map(|v| v * gain + offset);
    }
    let (c, h, w) = (s[0], s[1] as i64, s[2] as i64);
    let m = cfg.augment_shift as i64;
    let dy = rng.random_range(-m..=m);
    let dx = rng.random_range(-m..=m);
    let sigma = cfg.augment_noise as f32;
    let mut out = Vec::with_capacity(x.len());
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = ((i - dy).clamp(0, h - 1), (j - dx).clamp(0, w - 1));
                let n: f32 = StandardNormal.sample(rng);
                out.push(x.data()[ci * (h * w) as usize + (si * w + sj) as usize] * gain + offset + sigma * n);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Normalised-temperature cross-entropy over `2B` views where rows `i` and
/// `i + B` are positives.
fn contrastive_loss(g: &mut Graph<f32>, z: Var, temperature: f64) -> Var {
    let n = g.shape(z)[0];
    let b = n / 2;
    let u = g.unit_norm1(z);
    let sim = g.matmul_nt(u, u);
    let sim = g.scale(sim, (1.0 / temperature) as f32);
    let mut mask = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = -1e4;
    }
    let logits = g.add_const(sim, &mask);
    let targets: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    g.cross_entropy(logits, &targets)
}

pub fn train_encoder(train: &ImageSet, cfg: &EncoderConfig) -> Result<ContrastiveEncoder> {
    cfg.validate()?;
    if train.len() < 2 {
        invalid!("contrastive training needs at least two images");
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = ContrastiveEncoder::init(cfg, seeds.random())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.random());
    let mut opt = AdamW::new(cfg.learning_rate, 1e-4);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut views: Vec<Tensor<f32>> = chunk.iter().map(|&i| augment(&train.items[i], cfg, &mut rng)).collect();
            views.extend(chunk.iter().map(|&i| augment(&train.items[i], cfg, &mut rng)).collect::<Vec<_>>());
            let mut g = Graph::new();
            let xv = g.constant(Tensor::stack(&views));
            let (z, _) = enc.forward(&mut g, xv)?;
            let loss = contrastive_loss(&mut g, z, cfg.temperature);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("contrastive loss at epoch {epoch}")));
            }
            total += lv as f64;
            steps += 1;
            let mut grads = vec![g.backward(loss).for_store(&enc.params)];
            clip_global_norm(&mut grads, 5.0);
            opt.step(&mut [&mut enc.params], &grads);
        }
        log::debug!("encoder epoch {epoch}: loss {:.4}", total / steps.max(1) as f64);
    }
    Ok(enc)
}

/// Per-dimension centring and scaling fitted on the training corpus and
/// applied to every embedding before comparison. Without it all raw
/// embeddings share a dominant common direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fit on rows; constant dimensions keep unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else { return Ok(Self::identity(0)) };
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("embeddings of unequal dimension".into()));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|k| {
                let v = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.mean.len() {
            return Err(Error::Shape(format!("embedding of dimension {}, expected {}", v.len(), self.mean.len())));
        }
        Ok(v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect())
    }
}

/// Embeddings of the training corpus for one encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub ids: Vec<String>,
    pub stage: Stage,
    pub dim: usize,
    pub standardizer: Standardizer,
    /// Standardised, unit-normalised rows, row-major.
    rows: Vec<f64>,
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    kind: String,
    ids: Vec<String>,
    stage: Stage,
    dim: usize,
    standardizer: Standardizer,
    fingerprint: String,
    matrix_hash: String,
}

impl EmbeddingIndex {
    /// Index with an explicit transform; [`Standardizer::identity`]
    /// compares raw embeddings.
    pub fn with_standardizer(
        ids: Vec<String>,
        embeddings: &[Vec<f64>],
        stage: Stage,
        fingerprint: String,
        standardizer: Standardizer,
    ) -> Result<Self> {
        if ids.len() != embeddings.len() {
            invalid!("{} ids for {} embeddings", ids.len(), embeddings.len());
        }
        let dim = standardizer.mean.len();
        let mut rows = Vec::with_capacity(dim * embeddings.len());
        for e in embeddings {
            rows.extend(normalized(&standardizer.apply(e)?)?);
        }
        Ok(Self { ids, stage, dim, standardizer, rows, fingerprint })
    }

    /// Index whose transform is fitted on the indexed embeddings.
    pub fn from_embeddings(ids: Vec<String>, embeddings: &[Vec<f64>], stage: Stage, fingerprint: String) -> Result<Self> {
        let st = Standardizer::fit(embeddings)?;
        Self::with_standardizer(ids, embeddings, stage, fingerprint, st)
    }

    pub fn build(encoder: &ContrastiveEncoder, train: &ImageSet, stage: Stage) -> Result<Self> {
        let e = encoder.embed(&train.items, stage)?;
        Self::from_embeddings(train.ids.clone(), &e, stage, encoder.fingerprint())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn matrix_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.rows {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn check_encoder(&self, encoder: &ContrastiveEncoder) -> Result<()> {
        if encoder.fingerprint() != self.fingerprint {
            return Err(Error::Fingerprint { expected: self.fingerprint.clone(), found: encoder.fingerprint() });
        }
        Ok(())
    }

    /// Most similar training row: `(index, similarity)`.
    pub fn nearest(&self, query: &[f64]) -> Result<(usize, f64)> {
        if self.is_empty() {
            invalid!("embedding index is empty");
        }
        let q = normalized(&self.standardizer.apply(query)?)?;
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..self.len() {
            let s: f64 = self.row(i).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok(best)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        a.put_json(
            "index.json",
            &IndexMeta {
                kind: "embedding_index".into(),
                ids: self.ids.clone(),
                stage: self.stage,
                dim: self.dim,
                standardizer: self.standardizer.clone(),
                fingerprint: self.fingerprint.clone(),
                matrix_hash: self.matrix_hash(),
            },
        )?;
        a.put_bytes("rows.bin", self.rows.iter().flat_map(|v| v.to_le_bytes()).collect());
        a.save(path)
    }

    /// Load and require that the index was built by `encoder`.
    pub fn load(path: &Path, encoder: &ContrastiveEncoder) -> Result<Self> {
        let idx = Self::load_unchecked(path)?;
        idx.check_encoder(encoder)?;
        Ok(idx)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let meta: IndexMeta = a.get_json("index.json")?;
        if meta.kind != "embedding_index" {
            return Err(Error::Checkpoint(format!("expected an embedding index, found {}", meta.kind)));
        }
        let bytes = a.get_bytes("rows.bin")?;
        if bytes.len() != 8 * meta.dim * meta.ids.len() {
            return Err(Error::Checkpoint("index matrix has the wrong size".into()));
        }
        let rows = bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let idx = Self { ids: meta.ids, stage: meta.stage, dim: meta.dim, standardizer: meta.standardizer, rows, fingerprint: meta.fingerprint };
        if idx.matrix_hash() != meta.matrix_hash {
            return Err(Error::Checkpoint("index matrix hash mismatch".into()));
        }
        Ok(idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterEntry {
    pub sample: String,
    pub max_similarity: f64,
    pub nearest_id: String,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub tau: f64,
    pub stage: Stage,
    pub fingerprint: String,
    pub entries: Vec<FilterEntry>,
    pub rejected_count: usize,
}

impl FilterReport {
    pub fn accepted(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].accepted).collect()
    }

    pub fn rejected(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| !self.entries[i].accepted).collect()
    }
}

/// Accept a sample iff its maximum similarity to the index is `<= tau`.
pub fn filter_embeddings(names: &[String], embeddings: &[Vec<f64>], index: &EmbeddingIndex, tau: f64) -> Result<FilterReport> {
    if index.is_empty() {
        invalid!("embedding index is empty");
    }
    if !tau.is_finite() {
        invalid!("tau must be finite");
    }
    if names.len() != embeddings.len() {
        invalid!("{} names for {} samples", names.len(), embeddings.len());
    }
    let mut entries = Vec::with_capacity(embeddings.len());
    for (name, e) in names.iter().zip(embeddings) {
        let (i, s) = index.nearest(e)?;
        entries.push(FilterEntry { sample: name.clone(), max_similarity: s, nearest_id: index.ids[i].clone(), accepted: s <= tau });
    }
    let rejected_count = entries.iter().filter(|e| !e.accepted).count();
    Ok(FilterReport { tau, stage: index.stage, fingerprint: index.fingerprint.clone(), entries, rejected_count })
}

/// Embed `samples` with the index's encoder and filter them.
pub fn filter_batch(
    encoder: &ContrastiveEncoder,
    names: &[String],
    samples: &[Tensor<f32>],
    index: &EmbeddingIndex,
    tau: f64,
) -> Result<FilterReport> {
    index.check_encoder(encoder)?;
    if index.is_empty() {
        invalid!("embedding index is empty");
    }
    let e = encoder.embed(samples, index.stage)?;
    filter_embeddings(names, &e, index, tau)
}

/// Neighbour search used to find linked pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NeighbourBackend {
    Exact,
    /// Random-hyperplane hashing; candidate pairs are verified exactly.
    SimHash { bits: usize, tables: usize, seed: u64 },
}

impl NeighbourBackend {
    pub fn simhash_default() -> Self {
        Self::SimHash { bits: 8, tables: 24, seed: 0 }
    }
}

/// Pairs `(i, j)`, `i < j`, with cosine similarity `>= threshold`.
pub fn similarity_edges(embeddings: &[Vec<f64>], threshold: f64, backend: NeighbourBackend) -> Result<Vec<(usize, usize)>> {
    let unit: Vec<Vec<f64>> = embeddings.iter().map(|e| normalized(e)).collect::<Result<_>>()?;
    let n = unit.len();
    let dot = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
    let mut edges = Vec::new();
    match backend {
        NeighbourBackend::Exact => {
            for i in 0..n {
                for j in i + 1..n {
                    if dot(i, j) >= threshold {
                        edges.push((i, j));
                    }
                }
            }
        }
        NeighbourBackend::SimHash { bits, tables, seed } => {
            if bits == 0 || bits > 63 || tables == 0 {
                invalid!("simhash needs 1..=63 bits and at least one table");
            }
            let d = unit.first().map(Vec::len).unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cand = std::collections::BTreeSet::new();
            for _ in 0..tables {
                let planes: Vec<Vec<f64>> = (0..bits).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
                let mut buckets: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
                for (i, u) in unit.iter().enumerate() {
                    let key = planes.iter().enumerate().fold(0u64, |k, (b, p)| {
                        let side = p.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() >= 0.0;
                        k | (u64::from(side) << b)
                    });
                    buckets.entry(key).or_default().push(i);
                }
                for members in buckets.values() {
                    for (a, &i) in members.iter().enumerate() {
                        for &j in &members[a + 1..] {
                            cand.insert((i, j));
                        }
                    }
                }
            }
            edges.extend(cand.into_iter().filter(|&(i, j)| dot(i, j) >= threshold));
        }
    }
    Ok(edges)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clusters of indices, each sorted, ordered by first member.
pub fn single_linkage(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Per-stage embeddings of one image collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageEmbeddings {
    pub stages: BTreeMap<String, Vec<Vec<f64>>>,
}

impl StageEmbeddings {
    pub fn from_encoder(encoder: &ContrastiveEncoder, items: &[Tensor<f32>]) -> Result<Self> {
        let all = encoder.embed_all(items)?;
        Ok(Self { stages: all.into_iter().map(|(s, v)| (s.name().to_string(), v)).collect() })
    }

    /// Apply per-stage transforms, e.g. those of the training-corpus indices.
    pub fn standardized(&self, by_stage: &BTreeMap<String, Standardizer>) -> Result<Self> {
        let mut stages = BTreeMap::new();
        for (name, rows) in &self.stages {
            let st = by_stage.get(name).ok_or_else(|| Error::Validation(format!("no transform for stage {name:?}")))?;
            stages.insert(name.clone(), rows.iter().map(|r| st.apply(r)).collect::<Result<_>>()?);
        }
        Ok(Self { stages })
    }
}

/// Near-duplicate groups at one encoder stage.
pub fn near_duplicate_clusters(
    embeddings: &StageEmbeddings,
    layer: &str,
    link_threshold: f64,
    backend: NeighbourBackend,
) -> Result<Vec<Vec<usize>>> {
    let Some(e) = embeddings.stages.get(layer) else {
        let known: Vec<&String> = embeddings.stages.keys().collect();
        invalid!("unknown encoder stage {layer:?}; available {known:?}");
    };
    if e.len() < 2 {
        invalid!("near-duplicate clustering needs at least two embeddings");
    }
    Ok(single_linkage(e.len(), &similarity_edges(e, link_threshold, backend)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{ConditionSpec, FieldStrength, OrientationClass, Sequence};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vecs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[0.3, -0.7], &[0.3, -0.7]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_bounded_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let s = cosine_sim(&a, &b).unwrap();
            prop_assert!((s - cosine_sim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s));
            let ca: Vec<f64> = a.iter().map(|v| v * c).collect();
            prop_assert!((cosine_sim(&a, &ca).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn threshold_monotonicity(seed in 0u64..1_000_000, t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let train = rand_vecs(30, 4, seed);
            let ids: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
            let idx = EmbeddingIndex::from_embeddings(ids, &train, Stage::Final, "fp".into()).unwrap();
            let samples = rand_vecs(20, 4, seed + 1);
            let names: Vec<String> = (0..20).map(|i| format!("s{i}")).collect();
            let a = filter_embeddings(&names, &samples, &idx, lo).unwrap().accepted();
            let b = filter_embeddings(&names, &samples, &idx, hi).unwrap().accepted();
            prop_assert!(a.iter().all(|i| b.contains(i)));
        }
    }

    #[test]
    fn filter_extremes_and_exact_copies() {
        let train = rand_vecs(50, 8, 1);
        let ids: Vec<String> = (0..50).map(|i| format!("t{i}")).collect();
        let idx = EmbeddingIndex::from_embeddings(ids, &train, Stage::Final, "fp".into()).unwrap();
        let mut samples = rand_vecs(20, 8, 2);
        samples[3] = train[7].clone();
        let names: Vec<String> = (0..20).map(|i| format!("s{i}")).collect();
        let r = filter_embeddings(&names, &samples, &idx, 0.95).unwrap();
        assert!(!r.entries[3].accepted);
        assert_eq!(r.entries[3].nearest_id, "t7");
        assert!((r.entries[3].max_similarity - 1.0).abs() < 1e-12);
        assert!(r.entries.iter().all(|e| e.accepted == (e.max_similarity <= 0.95)));
        assert_eq!(filter_embeddings(&names, &samples, &idx, 1.0).unwrap().rejected_count, 0);
        assert_eq!(filter_embeddings(&names, &samples, &idx, -1.0 - 1e-9).unwrap().rejected_count, 20);
        let empty = EmbeddingIndex::from_embeddings(vec![], &[], Stage::Final, "fp".into()).unwrap();
        assert!(filter_embeddings(&names, &samples, &empty, 0.95).is_err());
    }

    #[test]
    fn clusters_from_constructed_embeddings() {
        let same = StageEmbeddings { stages: [("final".to_string(), vec![vec![1.0, 2.0]; 5])].into() };
        assert_eq!(near_duplicate_clusters(&same, "final", 0.9, NeighbourBackend::Exact).unwrap().len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        for g in 0..2 {
            for _ in 0..10 {
                let mut v = vec![0.0; 4];
                v[g] = 1.0;
                v.iter_mut().for_each(|x| *x += 0.01 * rng.random::<f64>());
                pts.push(v);
            }
        }
        let two = StageEmbeddings { stages: [("mid".to_string(), pts.clone())].into() };
        for backend in [NeighbourBackend::Exact, NeighbourBackend::simhash_default()] {
            let c = near_duplicate_clusters(&two, "mid", 0.9, backend).unwrap();
            assert_eq!(c, vec![(0..10).collect::<Vec<_>>(), (10..20).collect()]);
        }
        let singles = near_duplicate_clusters(&two, "mid", 1.0 + 1e-9, NeighbourBackend::Exact).unwrap();
        assert_eq!(singles.len(), 20);
        assert!(near_duplicate_clusters(&two, "penultimate", 0.9, NeighbourBackend::Exact).is_err());
    }

    #[test]
    fn simhash_agrees_with_exact_search() {
        // Clustered data so there is a meaningful number of links.
        let centres = rand_vecs(40, 16, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pts: Vec<Vec<f64>> = (0..800)
            .map(|i| centres[i % 40].iter().map(|c| { let z: f64 = StandardNormal.sample(&mut rng); c + 0.25 * z }).collect())
            .collect();
        let exact = similarity_edges(&pts, 0.9, NeighbourBackend::Exact).unwrap();
        let approx = similarity_edges(&pts, 0.9, NeighbourBackend::simhash_default()).unwrap();
        assert!(exact.len() > 1000, "{}", exact.len());
        assert!(approx.iter().all(|e| exact.binary_search(e).is_ok()));
        let agree = approx.len() as f64 / exact.len() as f64;
        assert!(agree >= 0.99, "{agree}");
    }

    fn tiny_set(n: usize, seed: u64) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ImageSet::default();
        for i in 0..n {
            let (cy, cx) = (rng.random_range(4.0..12.0f64), rng.random_range(4.0..12.0f64));
            let d = (0..256).map(|p| {
                let (y, x) = ((p / 16) as f64, (p % 16) as f64);
                (-((y - cy).powi(2) + (x - cx).powi(2)) / 8.0).exp() as f32
            });
            let spec = ConditionSpec::new(OrientationClass::ALL[i % 4], FieldStrength::T3, Sequence::Tse);
            s.push(format!("img{i}"), Tensor::new(vec![1, 16, 16], d.collect()), spec).unwrap();
        }
        s
    }

    #[test]
    fn index_is_deterministic_persisted_and_fingerprinted() {
        let cfg = EncoderConfig { extent: 16, widths: [4, 8], embed_dim: 8, epochs: 2, batch_size: 8, ..Default::default() };
        let train = tiny_set(24, 1);
        let enc = train_encoder(&train, &cfg).unwrap();
        assert_eq!(enc.fingerprint(), train_encoder(&train, &cfg).unwrap().fingerprint());
        let a = EmbeddingIndex::build(&enc, &train, Stage::Final).unwrap();
        let b = EmbeddingIndex::build(&enc, &train, Stage::Final).unwrap();
        assert_eq!(a.len(), 24);
        assert_eq!(a.matrix_hash(), b.matrix_hash());
        let mid = StageEmbeddings::from_encoder(&enc, &train.items).unwrap();
        assert_eq!(mid.stages["mid"][0].len(), 4);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.tar");
        a.save(&p).unwrap();
        assert_eq!(EmbeddingIndex::load(&p, &enc).unwrap(), a);
        let retrained = train_encoder(&train, &EncoderConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(retrained.fingerprint(), enc.fingerprint());
        assert!(matches!(EmbeddingIndex::load(&p, &retrained), Err(Error::Fingerprint { .. })));
        let names = vec!["x".to_string()];
        assert!(filter_batch(&retrained, &names, &train.items[..1], &a, 0.95).is_err());

        let r = filter_batch(&enc, &names, &train.items[2..3], &a, 0.95).unwrap();
        assert!(!r.entries[0].accepted);
        assert_eq!(r.entries[0].nearest_id, "img2");

        let ep = dir.path().join("enc.tar");
        enc.save(&ep).unwrap();
        assert_eq!(ContrastiveEncoder::load(&ep).unwrap().fingerprint(), enc.fingerprint());
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert!(Stage::parse("layer3").is_err());
    }
}
