//! Generation and classification metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// A frozen network exposing intermediate feature maps and a pooled
/// embedding. Parameters must not receive gradients.
pub trait FeatureBackbone {
    /// Identifies the exact parameters; features from different
    /// fingerprints are never compared.
    fn fingerprint(&self) -> String;

    /// Feature maps `[B, C, *S]` of the selected stages for input `x`.
    fn stage_features(&self, g: &mut Graph<f32>, x: Var) -> Result<Vec<Var>>;

    /// Pooled per-item feature vectors `[B, d]`.
    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Sum over stages of the mean squared difference of channel-normalised
/// feature maps, as a graph node (differentiable in both inputs).
pub fn perceptual_graph(g: &mut Graph<f32>, bb: &dyn FeatureBackbone, x: Var, y: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::Shape(format!("perceptual inputs {:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    let fx = bb.stage_features(g, x)?;
    let fy = bb.stage_features(g, y)?;
    let mut total: Option<Var> = None;
    for (a, b) in fx.into_iter().zip(fy) {
        let a = g.unit_norm1(a);
        let b = g.unit_norm1(b);
        let d = g.mse(a, b);
        total = Some(match total {
            Some(t) => g.add(t, d),
            None => d,
        });
    }
    total.ok_or_else(|| Error::Validation("backbone exposes no stages".into()))
}

/// Perceptual distance between two equally-shaped batches `[B, C, *S]`,
/// averaged over the batch.
pub fn perceptual_distance(bb: &dyn FeatureBackbone, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("perceptual inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let d = perceptual_graph(&mut g, bb, xv, yv)?;
    Ok((g.value(d).item() as f64).max(0.0))
}

/// Row-major feature matrix tagged with the extractor that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub fingerprint: String,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, fingerprint: impl Into<String>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape(format!("{} values for {n} x {d} features", data.len())));
        }
        Ok(Self { n, d, data, fingerprint: fingerprint.into() })
    }

    pub fn from_tensor(t: &Tensor<f32>, fingerprint: impl Into<String>) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("features must be [n, d], got {:?}", t.shape())));
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().iter().map(|&v| v as f64).collect(), fingerprint)
    }

    /// Embed images in batches through a backbone.
    pub fn extract(bb: &dyn FeatureBackbone, images: &[Tensor<f32>], batch: usize) -> Result<Self> {
        if images.is_empty() {
            invalid!("no images to embed");
        }
        let mut data = Vec::new();
        let mut d = 0;
        for chunk in images.chunks(batch.max(1)) {
            let e = bb.embed(&Tensor::stack(chunk))?;
            d = e.shape()[1];
            data.extend(e.data().iter().map(|&v| v as f64));
        }
        Self::new(images.len(), d, data, bb.fingerprint())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }

    fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.matrix();
        let mu = DVector::from_iterator(self.d, m.column_iter().map(|c| c.mean()));
        let mut centred = m;
        for mut r in centred.row_iter_mut() {
            r -= mu.transpose();
        }
        let cov = centred.transpose() * &centred / (self.n as f64 - 1.0);
        (mu, cov)
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
    if real.fingerprint != fake.fingerprint {
        return Err(Error::Fingerprint { expected: real.fingerprint.clone(), found: fake.fingerprint.clone() });
    }
    if real.d != fake.d {
        return Err(Error::Shape(format!("feature dims {} vs {}", real.d, fake.d)));
    }
    if real.n < 2 || fake.n < 2 {
        invalid!("FID needs at least 2 samples per set ({} and {})", real.n, fake.n);
    }
    if real.data.iter().chain(&fake.data).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("FID features".into()));
    }
    let (mr, cr) = real.mean_cov();
    let (mf, cf) = fake.mean_cov();
    let sr = sqrt_psd(&cr);
    let inner = &sr * &cf * &sr;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let v = (mr - mf).norm_squared() + cr.trace() + cf.trace() - 2.0 * cross;
    Ok(v.max(0.0))
}

/// Binary AUC as the normalised Mann–Whitney statistic (ties count ½).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        invalid!("{} scores for {} labels", scores.len(), labels.len());
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        invalid!("AUC needs both classes present ({pos} positive, {neg} negative)");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mid-ranks over tie blocks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// One-vs-rest macro AUC from `[n, K]` class scores. Classes absent from
/// the labels are skipped.
pub fn auc_ovr(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        invalid!("{} score rows for {} labels", scores.len(), labels.len());
    }
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..n_classes {
        let bin: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        if bin.iter().all(|&b| b) || !bin.iter().any(|&b| b) {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        total += auc(&s, &bin)?;
        used += 1;
    }
    if used == 0 {
        invalid!("one-vs-rest AUC needs at least two label classes");
    }
    Ok(total / used as f64)
}

/// Unweighted mean of per-class F1; a class with no true positives
/// (including one absent from both inputs) scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        invalid!("macro-F1 needs equal, non-empty inputs ({} vs {})", predictions.len(), labels.len());
    }
    if n_classes == 0 {
        invalid!("n_classes must be positive");
    }
    let mut tp = vec![0usize; n_classes];
    let mut pc = vec![0usize; n_classes];
    let mut lc = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            invalid!("class index outside 0..{n_classes}");
        }
        pc[p] += 1;
        lc[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let f1: f64 = (0..n_classes)
        .map(|k| if tp[k] == 0 { 0.0 } else { 2.0 * tp[k] as f64 / (pc[k] + lc[k]) as f64 })
        .sum();
    Ok(f1 / n_classes as f64)
}

pub const RANDOM_BASELINE_DRAWS: usize = 1000;

/// Expected macro-F1 of a predictor drawing classes uniformly at random,
/// estimated over seeded simulations on the given labels.
pub fn random_f1_baseline(labels: &[usize], n_classes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = vec![0; labels.len()];
    let mut total = 0.0;
    for _ in 0..RANDOM_BASELINE_DRAWS {
        preds.iter_mut().for_each(|p| *p = rng.random_range(0..n_classes));
        total += macro_f1(&preds, labels, n_classes)?;
    }
    Ok(total / RANDOM_BASELINE_DRAWS as f64)
}

/// `f1` minus the simulated random baseline.
pub fn delta_f1_vs_random(f1: f64, labels: &[usize], n_classes: usize, seed: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f1) {
        invalid!("F1 {f1} outside [0, 1]");
    }
    Ok(f1 - random_f1_baseline(labels, n_classes, seed)?)
}

/// Mean pairwise cosine distance between rows.
pub fn diversity_score(set: &FeatureSet) -> Result<f64> {
    if set.n < 2 {
        invalid!("diversity needs at least 2 embeddings");
    }
    let norms: Vec<f64> = (0..set.n).map(|i| set.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0) {
        invalid!("zero embedding has no direction");
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..set.n {
        for j in i + 1..set.n {
            let dot: f64 = set.row(i).iter().zip(set.row(j)).map(|(a, b)| a * b).sum();
            total += 1.0 - dot / (norms[i] * norms[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn set(n: usize, d: usize, data: Vec<f64>) -> FeatureSet {
        FeatureSet::new(n, d, data, "test").unwrap()
    }

    fn gaussian(n: usize, mu: &[f64], sd: &[f64], seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = mu.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu[k] + sd[k] * z);
            }
        }
        set(n, d, data)
    }

    #[test]
    fn fid_identity_constants_and_fingerprint() {
        let a = gaussian(200, &[0.0, 1.0, 2.0], &[1.0, 0.5, 2.0], 1);
        assert!(fid(&a, &a).unwrap() < 1e-8);
        let z = set(5, 1, vec![0.0; 5]);
        let o = set(5, 1, vec![1.0; 5]);
        assert!((fid(&z, &o).unwrap() - 1.0).abs() < 1e-12);
        let mut other = a.clone();
        other.fingerprint = "other".into();
        assert!(matches!(fid(&a, &other), Err(Error::Fingerprint { .. })));
        let mut bad = a.clone();
        bad.data[0] = f64::NAN;
        assert!(fid(&a, &bad).is_err());
        assert!(fid(&set(1, 1, vec![0.0]), &z).is_err());
    }

    #[test]
    fn fid_matches_closed_form_for_diagonal_gaussians() {
        // Diagonal covariances: ||mu1 - mu2||^2 + sum (s1 - s2)^2.
        let (m1, s1) = ([0.0, 1.0, -1.0, 0.5], [1.0, 2.0, 0.5, 1.0]);
        let (m2, s2) = ([1.0, 1.0, 0.0, 0.5], [2.0, 1.0, 0.5, 3.0]);
        let want: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            + s1.iter().zip(&s2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let got = fid(&gaussian(10_000, &m1, &s1, 2), &gaussian(10_000, &m2, &s2, 3)).unwrap();
        assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
    }

    #[test]
    fn fid_sqrt_handles_correlated_covariances() {
        // Same covariance, shifted mean: only the mean term survives.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n {
            let (x, y): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            a.extend([x, 0.8 * x + 0.6 * y]);
            let (x, y): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            b.extend([x + 2.0, 0.8 * x + 0.6 * y]);
        }
        let got = fid(&set(n, 2, a), &set(n, 2, b)).unwrap();
        assert!((got - 4.0).abs() < 0.1, "{got}");
    }

    proptest! {
        #[test]
        fn fid_is_symmetric_and_nonnegative(seed in 0u64..1000, n in 3usize..30) {
            let a = gaussian(n, &[0.0, 0.0], &[1.0, 2.0], seed);
            let b = gaussian(n + 2, &[0.5, -0.5], &[1.5, 0.5], seed + 7);
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6);
        }

        #[test]
        fn auc_equals_pair_counting(scores in prop::collection::vec(0u8..10, 2..200), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if labels[i] && !labels[j] {
                        den += 1.0;
                        num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            prop_assert!((auc(&s, &labels).unwrap() - num / den).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_permutation_invariant(labels in prop::collection::vec(0usize..3, 3..60), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<usize> = labels.iter().map(|_| rng.random_range(0..3)).collect();
            let scores: Vec<f64> = labels.iter().map(|_| rng.random()).collect();
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.reverse();
            idx.rotate_left(seed as usize % labels.len());
            let p2: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
            let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(macro_f1(&preds, &labels, 3).unwrap(), macro_f1(&p2, &l2, 3).unwrap());
            let bin: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
            if bin.iter().any(|&b| b) && bin.iter().any(|&b| !b) {
                let b2: Vec<bool> = idx.iter().map(|&i| bin[i]).collect();
                let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                prop_assert!((auc(&scores, &bin).unwrap() - auc(&s2, &b2).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.0, 1.0], &[false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[3.0; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        let rows = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
        assert_eq!(auc_ovr(&rows, &[0, 1, 0], 2).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap(), 0.5);
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        assert!((macro_f1(&[2; 400], &labels, 4).unwrap() - 0.1).abs() < 1e-15);
        // Absent class counts as 0.
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 2.0 / 3.0);
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(macro_f1(&[0, 5], &[0, 1], 2).is_err());
    }

    #[test]
    fn random_baseline_matches_balanced_analytic_value() {
        // Uniform guessing on K balanced classes has precision and recall
        // 1/K per class in expectation, so macro-F1 -> 1/K for large n.
        let labels: Vec<usize> = (0..4000).map(|i| i % 4).collect();
        let b = random_f1_baseline(&labels, 4, 11).unwrap();
        assert!((b - 0.25).abs() / 0.25 < 0.01, "{b}");
        let d = delta_f1_vs_random(b, &labels, 4, 11).unwrap();
        assert!(d.abs() < 1e-15);
        let perfect = delta_f1_vs_random(1.0, &labels, 4, 11).unwrap();
        assert!((perfect - (1.0 - b)).abs() < 1e-15);
        assert!(delta_f1_vs_random(1.5, &labels, 4, 0).is_err());
    }

    #[test]
    fn diversity_cases() {
        assert!(diversity_score(&set(3, 2, vec![1.0, 2.0, 1.0, 2.0, 2.0, 4.0])).unwrap().abs() < 1e-12);
        assert!((diversity_score(&set(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap() - 1.0).abs() < 1e-12);
        assert!((diversity_score(&set(2, 2, vec![1.0, 0.0, -1.0, 0.0])).unwrap() - 2.0).abs() < 1e-12);
        assert!(diversity_score(&set(1, 2, vec![1.0, 0.0])).is_err());
    }
}
