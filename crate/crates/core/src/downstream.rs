//! Orientation classifiers, training regimes, k-means and the experiment grid.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::conditioning::OrientationClass;
use crate::dataset::ImageSet;
use crate::error::{invalid, Error, Result};
use crate::metrics::{auc_ovr, delta_f1_vs_random, macro_f1, FeatureBackbone};
use crate::nn::layers::{Conv, GroupNorm, Linear, ResBlock};
use crate::nn::{clip_global_norm, AdamW, Graph, ParamStore, Tensor, Var};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub spatial_dims: usize,
    pub in_channels: usize,
    pub extent: usize,
    /// Channel width per stage; each stage after the first halves the grid.
    pub widths: Vec<usize>,
    pub n_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Maximum random translation in pixels applied to training items.
    pub augment_shift: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            spatial_dims: 2,
            in_channels: 1,
            extent: 32,
            widths: vec![16, 32, 64],
            n_classes: OrientationClass::COUNT,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            augment_shift: 2,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            invalid!("classifier needs at least one non-zero stage width");
        }
        let f = 1usize << (self.widths.len() - 1);
        if self.extent % f != 0 {
            invalid!("extent {} not divisible by {f}", self.extent);
        }
        if self.n_classes < 2 || self.batch_size == 0 || self.epochs == 0 {
            invalid!("classifier needs >= 2 classes, batch_size > 0 and epochs > 0");
        }
        if !(self.learning_rate > 0.0) {
            invalid!("classifier learning rate must be positive");
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
struct Stage {
    res: ResBlock,
    down: Option<Conv>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Net {
    input: Conv,
    stages: Vec<Stage>,
    norm: GroupNorm,
    head: Linear,
}

/// Small residual CNN producing softmax class scores.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    net: Net,
    pub params: ParamStore<f32>,
}

/// Graph outputs of one forward pass.
struct Forward {
    stages: Vec<Var>,
    pooled: Var,
    logits: Var,
}

impl Classifier {
    pub fn init(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.spatial_dims;
        let w = &config.widths;
        let input = Conv::new(&mut s, "input", d, config.in_channels, w[0], 3, 1, &mut rng);
        let mut stages = Vec::new();
        for (i, &wi) in w.iter().enumerate() {
            let cin = if i == 0 { w[0] } else { w[i - 1] };
            let res = ResBlock::new(&mut s, &format!("stage{i}.res"), d, cin, wi, None, &mut rng);
            let down = (i + 1 < w.len()).then(|| Conv::new(&mut s, &format!("stage{i}.down"), d, wi, wi, 3, 2, &mut rng));
            stages.push(Stage { res, down });
        }
        let last = *w.last().expect("validated");
        let norm = GroupNorm::new(&mut s, "norm", last);
        let head = Linear::new(&mut s, "head", last, config.n_classes, &mut rng);
        Ok(Self { config: config.clone(), net: Net { input, stages, norm, head }, params: s })
    }

    pub fn fingerprint(&self) -> String {
        self.params.hash_hex()
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<Forward> {
        let want = {
            let mut s = vec![g.shape(x)[0]];
            s.extend(self.config.item_shape());
            s
        };
        if g.shape(x) != want.as_slice() {
            return Err(Error::Shape(format!("classifier input {:?}, expected {:?}", g.shape(x), want)));
        }
        let s = &self.params;
        let mut h = self.net.input.forward(g, s, x);
        let mut stages = Vec::new();
        for st in &self.net.stages {
            h = st.res.forward(g, s, h, None);
            stages.push(h);
            if let Some(d) = &st.down {
                h = d.forward(g, s, h);
            }
        }
        let h = self.net.norm.forward(g, s, h);
        let h = g.silu(h);
        let pooled = g.mean_spatial(h);
        let logits = self.net.head.forward(g, s, pooled);
        Ok(Forward { stages, pooled, logits })
    }

    /// Softmax probabilities `[n][K]`.
    pub fn predict_proba(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(x.shape()[0]);
        for chunk in x.unstack().chunks(64) {
            let mut g = Graph::inference();
            let xv = g.constant(Tensor::stack(chunk));
            let f = self.forward(&mut g, xv)?;
            let l = g.value(f.logits);
            let k = self.config.n_classes;
            for row in l.data().chunks(k) {
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
                let z: f64 = e.iter().sum();
                out.push(e.into_iter().map(|v| v / z).collect());
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.iter().map(|r| argmax(r)).collect())
    }

    pub fn predict_set(&self, set: &ImageSet) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let p = self.predict_proba(&set.batch(&idx))?;
        Ok((p.iter().map(|r| argmax(r)).collect(), p))
    }

    pub fn accuracy(&self, set: &ImageSet) -> Result<f64> {
        let (pred, _) = self.predict_set(set)?;
        let labels = set.labels();
        Ok(pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        a.put_json("config.json", &serde_json::json!({"kind": "classifier", "config": self.config}))?;
        a.put_store("params/classifier", &self.params)?;
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let meta: serde_json::Value = a.get_json("config.json")?;
        if meta["kind"] != "classifier" {
            return Err(Error::Checkpoint(format!("expected a classifier checkpoint, found {}", meta["kind"])));
        }
        let config: ClassifierConfig = serde_json::from_value(meta["config"].clone())?;
        let mut c = Self::init(&config, 0)?;
        a.load_store("params/classifier", &mut c.params)?;
        Ok(c)
    }
}

impl FeatureBackbone for Classifier {
    fn fingerprint(&self) -> String {
        format!("classifier:{}", self.params.hash_hex())
    }

    /// The first two stage outputs.
    fn stage_features(&self, g: &mut Graph<f32>, x: Var) -> Result<Vec<Var>> {
        g.freeze(&self.params);
        let f = self.forward(g, x)?;
        Ok(f.stages.into_iter().take(2).collect())
    }

    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, xv)?;
        Ok(g.value(f.pooled).clone())
    }
}

fn argmax(r: &[f64]) -> usize {
    r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best })
}

/// Integer translation of a `[C, H, W]` item with edge replication.
fn shift2d(x: &Tensor<f32>, dy: i64, dx: i64) -> Tensor<f32> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1] as i64, s[2] as i64);
    let mut out = Vec::with_capacity(x.len());
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let si = (i - dy).clamp(0, h - 1);
                let sj = (j - dx).clamp(0, w - 1);
                out.push(x.data()[ci * (h * w) as usize + (si * w + sj) as usize]);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Training regimes of the downstream task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FullSupervised,
    PretrainedInit,
    Weak10pct,
    KmeansUnsupervised,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Self::FullSupervised, Self::PretrainedInit, Self::Weak10pct, Self::KmeansUnsupervised];

    pub fn name(self) -> &'static str {
        match self {
            Self::FullSupervised => "full_supervised",
            Self::PretrainedInit => "pretrained_init",
            Self::Weak10pct => "weak_10pct",
            Self::KmeansUnsupervised => "kmeans_unsupervised",
        }
    }

    pub fn default_label_fraction(self) -> f64 {
        if self == Self::Weak10pct {
            0.1
        } else {
            1.0
        }
    }
}

/// A regime with its label budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub label_fraction: f64,
}

impl RegimeSpec {
    pub fn new(regime: Regime) -> Self {
        Self { regime, label_fraction: regime.default_label_fraction() }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.regime.default_label_fraction();
        if self.label_fraction != want {
            invalid!("regime {} requires label_fraction {want}, got {}", self.regime.name(), self.label_fraction);
        }
        Ok(())
    }
}

/// Per class, `round(fraction · n_k)` items (at least one), seeded.
pub fn stratified_subsample(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        invalid!("label fraction {fraction} outside (0, 1]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if members.is_empty() {
            continue;
        }
        for i in (1..members.len()).rev() {
            members.swap(i, rng.random_range(0..=i));
        }
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

fn require_all_classes(set: &ImageSet, n_classes: usize) -> Result<()> {
    let present: BTreeSet<usize> = set.labels().into_iter().collect();
    if let Some(k) = (0..n_classes).find(|k| !present.contains(k)) {
        let name = OrientationClass::from_index(k).map(|c| c.name().to_string()).unwrap_or_else(|_| k.to_string());
        invalid!("training labels contain no example of class {name}");
    }
    Ok(())
}

/// Supervised training with cross-entropy. `init` warm-starts from another
/// classifier of the same layout.
pub fn fit_classifier(train: &ImageSet, cfg: &ClassifierConfig, init: Option<&Classifier>) -> Result<Classifier> {
    cfg.validate()?;
    if train.is_empty() {
        invalid!("empty training set");
    }
    require_all_classes(train, cfg.n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clf = Classifier::init(cfg, derive_seed(cfg.seed, "classifier-init"))?;
    if let Some(src) = init {
        if src.params.count() != clf.params.count() {
            invalid!("pretrained classifier layout does not match");
        }
        let named = src.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        clf.params.load_from(&named)?;
    }
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let labels = train.labels();
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let shift = cfg.augment_shift as i64;
    for epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| {
                    let x = &train.items[i];
                    if shift > 0 && cfg.spatial_dims == 2 {
                        shift2d(x, rng.random_range(-shift..=shift), rng.random_range(-shift..=shift))
                    } else {
                        x.clone()
                    }
                })
                .collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::stack(&items));
            let f = clf.forward(&mut g, xv)?;
            let loss = g.cross_entropy(f.logits, &targets);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
            }
            total += lv as f64 * chunk.len() as f64;
            let mut grads = vec![g.backward(loss).for_store(&clf.params)];
            clip_global_norm(&mut grads, 5.0);
            opt.step(&mut [&mut clf.params], &grads);
        }
        log::debug!("classifier epoch {epoch}: loss {:.4}", total / n as f64);
    }
    Ok(clf)
}

/// Train under a regime. `extra` items (e.g. synthetic data) join the
/// labelled pool after label subsampling.
pub fn train_classifier(
    train: &ImageSet,
    regime: RegimeSpec,
    cfg: &ClassifierConfig,
    pretrained: Option<&Classifier>,
    extra: Option<&ImageSet>,
) -> Result<Classifier> {
    regime.validate()?;
    require_all_classes(train, cfg.n_classes)?;
    let mut labelled = match regime.regime {
        Regime::Weak10pct => {
            train.subset(&stratified_subsample(&train.labels(), cfg.n_classes, regime.label_fraction, derive_seed(cfg.seed, "weak-labels"))?)
        }
        Regime::KmeansUnsupervised => invalid!("k-means regime does not train a classifier"),
        _ => train.clone(),
    };
    if let Some(e) = extra {
        labelled.extend(e)?;
    }
    let init = match regime.regime {
        Regime::PretrainedInit => {
            Some(pretrained.ok_or_else(|| Error::Validation("pretrained_init needs a pretrained checkpoint".into()))?)
        }
        _ => None,
    };
    fit_classifier(&labelled, cfg, init)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every Lloyd iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(k, c)| (k, sqdist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding and Lloyd iterations until the assignment is stable
/// or 300 iterations.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        invalid!("k-means needs 1 <= k <= n (k = {k}, n = {n})");
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        invalid!("k-means points must be finite with equal dimension");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sqdist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // All remaining points coincide with a centroid.
            (0..n).find(|i| !centroids.contains(&points[*i])).unwrap_or(centroids.len())
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(sqdist(p, centroids.last().expect("pushed")));
        }
    }
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..300 {
        iterations += 1;
        // Update step; empty clusters keep their centroid.
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        // Keep the current cluster on exact ties so the fixpoint is stable.
        let next_assign: Vec<usize> = next
            .iter()
            .zip(points.iter().zip(&assignments))
            .map(|(&(a, dn), (p, &cur))| if sqdist(p, &centroids[cur]) <= dn { cur } else { a })
            .collect();
        let changed = next_assign != assignments;
        assignments = next_assign;
        inertia.push(points.iter().zip(&assignments).map(|(p, &a)| sqdist(p, &centroids[a])).sum());
        if !changed {
            break;
        }
    }
    Ok(KMeansResult { assignments, centroids, inertia, iterations })
}

/// Average-pooled pixels as a flat feature vector per item.
pub fn pooled_pixel_features(set: &ImageSet, pool: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    for x in &set.items {
        let s = x.shape();
        if s.len() != 3 || s[1] % pool != 0 || s[2] % pool != 0 {
            return Err(Error::Shape(format!("pooled features need [C, H, W] divisible by {pool}, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut f = Vec::with_capacity(c * (h / pool) * (w / pool));
        for ci in 0..c {
            for bi in 0..h / pool {
                for bj in 0..w / pool {
                    let mut acc = 0.0;
                    for i in 0..pool {
                        for j in 0..pool {
                            acc += x.data()[ci * h * w + (bi * pool + i) * w + bj * pool + j] as f64;
                        }
                    }
                    f.push(acc / (pool * pool) as f64);
                }
            }
        }
        out.push(f);
    }
    Ok(out)
}

/// k-means on training features, clusters named by majority vote over the
/// mapping split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterClassifier {
    pub centroids: Vec<Vec<f64>>,
    pub cluster_class: Vec<usize>,
    pub pool: usize,
    pub n_classes: usize,
}

impl ClusterClassifier {
    pub fn fit(train: &ImageSet, mapping: &ImageSet, n_classes: usize, pool: usize, seed: u64) -> Result<Self> {
        if mapping.is_empty() {
            invalid!("cluster mapping needs a non-empty mapping split");
        }
        let km = kmeans(&pooled_pixel_features(train, pool)?, n_classes, seed)?;
        let mf = pooled_pixel_features(mapping, pool)?;
        let ml = mapping.labels();
        let mut votes = vec![vec![0usize; n_classes]; n_classes];
        for (f, &l) in mf.iter().zip(&ml) {
            votes[nearest(f, &km.centroids).0][l] += 1;
        }
        let mut overall = vec![0usize; n_classes];
        ml.iter().for_each(|&l| overall[l] += 1);
        let fallback = (0..n_classes).max_by_key(|&k| (overall[k], std::cmp::Reverse(k))).unwrap_or(0);
        let cluster_class = votes
            .iter()
            .map(|v| if v.iter().all(|&c| c == 0) { fallback } else { (0..n_classes).max_by_key(|&k| (v[k], std::cmp::Reverse(k))).unwrap_or(0) })
            .collect();
        Ok(Self { centroids: km.centroids, cluster_class, pool, n_classes })
    }

    /// Predicted classes and per-class scores (softmax over negative
    /// distance to the nearest centroid of each class).
    pub fn predict_set(&self, set: &ImageSet) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let feats = pooled_pixel_features(set, self.pool)?;
        let mut preds = Vec::with_capacity(feats.len());
        let mut scores = Vec::with_capacity(feats.len());
        for f in &feats {
            let (c, _) = nearest(f, &self.centroids);
            preds.push(self.cluster_class[c]);
            let mut best = vec![f64::INFINITY; self.n_classes];
            for (k, cen) in self.centroids.iter().enumerate() {
                let cls = self.cluster_class[k];
                best[cls] = best[cls].min(sqdist(f, cen));
            }
            let m = best.iter().cloned().fold(f64::INFINITY, f64::min);
            let e: Vec<f64> = best.iter().map(|d| if d.is_finite() { (-(d - m)).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            scores.push(e.into_iter().map(|v| v / z).collect());
        }
        Ok((preds, scores))
    }
}

/// One named dataset of the grid with its own evaluation split.
#[derive(Clone, Debug)]
pub struct GridDataset {
    pub name: String,
    pub train: ImageSet,
    pub mapping: ImageSet,
    pub test: ImageSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub regime: Regime,
    pub seed: u64,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub delta_f1: Option<f64>,
    pub runtime_s: f64,
    pub error: Option<String>,
}

/// Evaluation of predictions on labelled items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub f1: f64,
    pub auc: f64,
    pub delta_f1: f64,
}

pub fn evaluate(preds: &[usize], scores: &[Vec<f64>], labels: &[usize], n_classes: usize, seed: u64) -> Result<Evaluation> {
    let f1 = macro_f1(preds, labels, n_classes)?;
    Ok(Evaluation { f1, auc: auc_ovr(scores, labels, n_classes)?, delta_f1: delta_f1_vs_random(f1, labels, n_classes, seed)? })
}

/// Train and evaluate one grid cell.
pub fn run_cell(
    data: &GridDataset,
    regime: Regime,
    cfg: &ClassifierConfig,
    seed: u64,
    pretrained: Option<&Classifier>,
) -> Result<Evaluation> {
    let mut cfg = cfg.clone();
    cfg.seed = derive_seed(seed, &format!("{}/{}", data.name, regime.name()));
    let labels = data.test.labels();
    let (preds, scores) = match regime {
        Regime::KmeansUnsupervised => {
            ClusterClassifier::fit(&data.train, &data.mapping, cfg.n_classes, 4, cfg.seed)?.predict_set(&data.test)?
        }
        _ => train_classifier(&data.train, RegimeSpec::new(regime), &cfg, pretrained, None)?.predict_set(&data.test)?,
    };
    evaluate(&preds, &scores, &labels, cfg.n_classes, seed)
}

fn check_isolation(d: &GridDataset) -> Result<()> {
    let test: BTreeSet<&String> = d.test.ids.iter().collect();
    if let Some(id) = d.train.ids.iter().chain(&d.mapping.ids).find(|i| test.contains(i)) {
        invalid!("dataset {}: item {id} appears in both training and test splits", d.name);
    }
    Ok(())
}

/// Every dataset × regime × seed cell in that order. Cell failures are
/// recorded and the grid continues.
pub fn experiment_grid(
    datasets: &[GridDataset],
    regimes: &[Regime],
    seeds: &[u64],
    cfg: &ClassifierConfig,
    pretrained: Option<&Classifier>,
) -> Result<Vec<ExperimentResult>> {
    datasets.iter().try_for_each(check_isolation)?;
    let mut rows = Vec::new();
    for d in datasets {
        for &regime in regimes {
            for &seed in seeds {
                let t0 = Instant::now();
                let r = run_cell(d, regime, cfg, seed, pretrained);
                let runtime_s = t0.elapsed().as_secs_f64();
                let (f1, auc, delta_f1, error) = match r {
                    Ok(e) => (Some(e.f1), Some(e.auc), Some(e.delta_f1), None),
                    Err(e) => {
                        log::warn!("grid cell {}/{}/{seed} failed: {e}", d.name, regime.name());
                        (None, None, None, Some(e.to_string()))
                    }
                };
                rows.push(ExperimentResult { dataset: d.name.clone(), regime, seed, f1, auc, delta_f1, runtime_s, error });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub dataset: String,
    pub regime: Regime,
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_sd: f64,
    pub delta_f1_mean: f64,
    pub delta_f1_sd: f64,
    pub auc_mean: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt() } else { 0.0 };
    (m, sd)
}

/// Mean ± sd over seeds of successful runs, in first-appearance order.
pub fn summarize(rows: &[ExperimentResult]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, Regime)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(d, g)| d == &r.dataset && *g == r.regime) {
            keys.push((r.dataset.clone(), r.regime));
        }
    }
    keys.into_iter()
        .map(|(d, g)| {
            let cell: Vec<&ExperimentResult> = rows.iter().filter(|r| r.dataset == d && r.regime == g && r.error.is_none()).collect();
            let (f1_mean, f1_sd) = mean_sd(&cell.iter().filter_map(|r| r.f1).collect::<Vec<_>>());
            let (delta_f1_mean, delta_f1_sd) = mean_sd(&cell.iter().filter_map(|r| r.delta_f1).collect::<Vec<_>>());
            let (auc_mean, _) = mean_sd(&cell.iter().filter_map(|r| r.auc).collect::<Vec<_>>());
            CellSummary { dataset: d, regime: g, runs: cell.len(), f1_mean, f1_sd, delta_f1_mean, delta_f1_sd, auc_mean }
        })
        .collect()
}

/// CSV with one row per grid cell run; failed cells leave metrics empty.
pub fn write_results_csv<W: Write>(rows: &[ExperimentResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{ConditionSpec, FieldStrength, Sequence};
    use crate::preprocess::PhantomDatasetConfig;
    use crate::dataset::Split;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig { extent: 16, widths: vec![4, 8], epochs: 3, batch_size: 8, ..Default::default() }
    }

    /// Class k is a bright bar at angle 45°·k through the centre.
    fn bar_set(n: usize, seed: u64, prefix: &str) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ImageSet::default();
        for i in 0..n {
            let k = i % 4;
            let mut d = vec![0f32; 256];
            for (p, v) in d.iter_mut().enumerate() {
                let (r, c) = ((p / 16) as f64 - 7.5, (p % 16) as f64 - 7.5);
                let a = std::f64::consts::FRAC_PI_4 * k as f64;
                let off = (r * a.cos() - c * a.sin()).abs();
                *v = if off < 1.5 { 1.0 } else { 0.0 } + 0.2 * { let z: f64 = StandardNormal.sample(&mut rng); z as f32 };
            }
            let spec = ConditionSpec::new(OrientationClass::ALL[k], FieldStrength::T3, Sequence::Tse);
            set.push(format!("{prefix}{i}"), Tensor::new(vec![1, 16, 16], d), spec).unwrap();
        }
        set
    }

    #[test]
    fn stratified_subsample_keeps_proportions() {
        let labels: Vec<usize> = (0..500).map(|i| if i < 200 { 0 } else if i < 325 { 1 } else if i < 425 { 2 } else { 3 }).collect();
        let idx = stratified_subsample(&labels, 4, 0.1, 3).unwrap();
        for (k, n) in [200usize, 125, 100, 75].into_iter().enumerate() {
            let got = idx.iter().filter(|&&i| labels[i] == k).count() as f64;
            assert!((got - n as f64 * 0.1).abs() <= 1.0, "class {k}: {got}");
        }
        assert_eq!(idx, stratified_subsample(&labels, 4, 0.1, 3).unwrap());
        let tiny = stratified_subsample(&[0, 1, 1, 1], 2, 0.1, 0).unwrap();
        assert_eq!(tiny.len(), 2);
    }

    #[test]
    fn regime_fraction_is_validated() {
        assert!(RegimeSpec { regime: Regime::Weak10pct, label_fraction: 1.0 }.validate().is_err());
        RegimeSpec::new(Regime::Weak10pct).validate().unwrap();
        assert!(RegimeSpec { regime: Regime::FullSupervised, label_fraction: 0.1 }.validate().is_err());
    }

    #[test]
    fn classifier_learns_bars_deterministically() {
        let train = bar_set(64, 1, "tr");
        let test = bar_set(32, 2, "te");
        let cfg = ClassifierConfig { epochs: 25, learning_rate: 3e-3, ..tiny_cfg() };
        let a = fit_classifier(&train, &cfg, None).unwrap();
        let b = fit_classifier(&train, &cfg, None).unwrap();
        assert_eq!(a.predict_set(&test).unwrap(), b.predict_set(&test).unwrap());
        let acc = a.accuracy(&test).unwrap();
        assert!(acc > 0.9, "{acc}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.tar");
        a.save(&p).unwrap();
        let back = Classifier::load(&p).unwrap();
        assert_eq!(back.fingerprint(), a.fingerprint());
        assert_eq!(back.predict_set(&test).unwrap(), a.predict_set(&test).unwrap());
    }

    #[test]
    fn missing_class_is_rejected() {
        let all = bar_set(12, 1, "x");
        let three = all.subset(&(0..12).filter(|i| i % 4 != 3).collect::<Vec<_>>());
        let err = fit_classifier(&three, &tiny_cfg(), None).unwrap_err();
        assert!(err.to_string().contains("RF&RV"), "{err}");
    }

    #[test]
    fn backbone_features_are_frozen_and_shaped() {
        let clf = Classifier::init(&tiny_cfg(), 0).unwrap();
        let x = bar_set(3, 0, "a").batch(&[0, 1, 2]);
        let e = clf.embed(&x).unwrap();
        assert_eq!(e.shape(), &[3, 8]);
        let mut g = Graph::new();
        let xv = g.variable(x);
        let f = clf.stage_features(&mut g, xv).unwrap();
        assert_eq!(g.shape(f[0]), &[3, 4, 16, 16]);
        assert_eq!(g.shape(f[1]), &[3, 8, 8, 8]);
        let l = g.mean(f[1]);
        let grads = g.backward(l);
        assert!(grads.for_store(&clf.params).iter().all(Option::is_none));
        assert!(grads.of(xv).is_some());
    }

    #[test]
    fn kmeans_separated_clouds_and_k_equals_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pts = Vec::new();
        for i in 0..40 {
            let c = if i < 20 { 0.0 } else { 100.0 };
            pts.push(vec![c + rng.random::<f64>(), c + rng.random::<f64>()]);
        }
        let r = kmeans(&pts, 2, 1).unwrap();
        assert!(r.assignments[..20].iter().all(|&a| a == r.assignments[0]));
        assert!(r.assignments[20..].iter().all(|&a| a == r.assignments[20]));
        assert_ne!(r.assignments[0], r.assignments[20]);
        let small = vec![vec![0.0], vec![1.0], vec![5.0]];
        let r = kmeans(&small, 3, 0).unwrap();
        assert_eq!(*r.inertia.last().unwrap(), 0.0);
        assert!(kmeans(&small, 4, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn kmeans_inertia_never_increases(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            let r = kmeans(&pts, 4, seed).unwrap();
            for w in r.inertia.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }

    #[test]
    fn grid_cardinality_order_and_failures() {
        let train = bar_set(24, 1, "tr");
        let mapping = bar_set(8, 3, "mp");
        let test = bar_set(16, 2, "te");
        let ds = |name: &str| GridDataset { name: name.into(), train: train.clone(), mapping: mapping.clone(), test: test.clone() };
        let datasets = vec![ds("real"), ds("synth"), ds("synth_roi")];
        let cfg = ClassifierConfig { epochs: 1, ..tiny_cfg() };
        let pre = fit_classifier(&train, &cfg, None).unwrap();
        let rows = experiment_grid(&datasets, &Regime::ALL, &[0, 1, 2], &cfg, Some(&pre)).unwrap();
        assert_eq!(rows.len(), 36);
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert_eq!((rows[0].dataset.as_str(), rows[0].regime, rows[0].seed), ("real", Regime::FullSupervised, 0));
        assert_eq!((rows[35].dataset.as_str(), rows[35].regime, rows[35].seed), ("synth_roi", Regime::KmeansUnsupervised, 2));
        assert_eq!(summarize(&rows).len(), 12);
        let mut csv = Vec::new();
        write_results_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 37);
        assert_eq!(text.lines().next().unwrap(), "dataset,regime,seed,f1,auc,delta_f1,runtime_s,error");
        assert!(text.lines().nth(1).unwrap().starts_with("real,full_supervised,0,"));
        // Without a pretrained checkpoint those cells fail but the grid completes.
        let rows = experiment_grid(&datasets[..1], &Regime::ALL, &[0], &cfg, None).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[1].error.is_some() && rows[0].error.is_none());
        let mut leaky = ds("leak");
        leaky.test.ids[0] = leaky.train.ids[0].clone();
        assert!(experiment_grid(&[leaky], &Regime::ALL, &[0], &cfg, None).is_err());
    }

    #[test]
    fn kmeans_on_uninformative_features_is_near_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| {
            let mut s = ImageSet::default();
            for i in 0..n {
                let d: Vec<f32> = (0..64).map(|_| { let z: f64 = StandardNormal.sample(rng); z as f32 }).collect();
                let spec = ConditionSpec::new(OrientationClass::ALL[i % 4], FieldStrength::T3, Sequence::Tse);
                s.push(format!("{prefix}{i}"), Tensor::new(vec![1, 8, 8], d), spec).unwrap();
            }
            s
        };
        let data = GridDataset { name: "noise".into(), train: noise(200, "a", &mut rng), mapping: noise(80, "m", &mut rng), test: noise(400, "t", &mut rng) };
        let mut deltas = Vec::new();
        for seed in 0..3 {
            deltas.push(run_cell(&data, Regime::KmeansUnsupervised, &tiny_cfg(), seed, None).unwrap().delta_f1);
        }
        let m = deltas.iter().sum::<f64>() / 3.0;
        assert!(m.abs() < 0.08, "{deltas:?}");
    }

    #[test]
    fn phantom_sets_keep_splits_disjoint() {
        let cfg = PhantomDatasetConfig { n_train: 8, n_val: 4, n_test: 4, n_mapping: 4, ..Default::default() };
        let ids = |s| cfg.specs().into_iter().filter(|(_, sp, _)| *sp == s).map(|(id, _, _)| id).collect::<BTreeSet<_>>();
        assert!(ids(Split::Train).is_disjoint(&ids(Split::Test)));
        assert!(ids(Split::Mapping).is_disjoint(&ids(Split::Test)));
    }
}
