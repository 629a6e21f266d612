use std::f64::consts::PI;
use std::path::Path;

use ndarray::{ArrayD, Dimension, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{preprocess_chain, ChainConfig};
use crate::conditioning::{ConditionSpec, FieldStrength, OrientationClass, Sequence};
use crate::dataset::{ImageSet, Manifest, ManifestRecord, SlicePolicy, Split};
use crate::error::{invalid, Result};
use crate::seed::derive_seed;
use crate::volume::{Volume, VolumeMeta};

/// Parameters of one procedurally rendered pelvis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub orientation_class: OrientationClass,
    /// Magnitude range of the body–cervix angle; the sign follows the class.
    pub flexion_range_deg: (f64, f64),
    /// Magnitude range of the cervix–vagina angle; the sign follows the class.
    pub version_range_deg: (f64, f64),
    pub extent: usize,
    /// 1 renders a 2D sagittal image; more renders `[H, W, slices]`.
    pub slices: usize,
    pub field_strength: FieldStrength,
    pub sequence: Sequence,
    /// Relative organ-size jitter.
    pub size_jitter: f64,
    pub texture_amplitude: f64,
    pub bias_amplitude: f64,
    /// Noise at 1.5 T; scaled by field strength.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn for_class(orientation_class: OrientationClass, seed: u64) -> Self {
        Self {
            orientation_class,
            flexion_range_deg: (20.0, 50.0),
            version_range_deg: (20.0, 50.0),
            extent: 64,
            slices: 1,
            field_strength: FieldStrength::T1_5,
            sequence: Sequence::Tse,
            size_jitter: 0.1,
            texture_amplitude: 0.05,
            bias_amplitude: 0.3,
            noise_sigma: 0.03,
            seed,
        }
    }

    pub fn condition(&self) -> ConditionSpec {
        ConditionSpec::new(self.orientation_class, self.field_strength, self.sequence)
    }

    fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.flexion_range_deg, self.version_range_deg] {
            if !(0.0..=90.0).contains(&lo) || !(lo..=90.0).contains(&hi) {
                invalid!("angle range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 90");
            }
        }
        if self.extent < 8 || self.slices == 0 {
            invalid!("phantom extent must be >= 8 and slices >= 1");
        }
        if self.size_jitter < 0.0 || self.size_jitter >= 0.5 || self.noise_sigma < 0.0 || self.bias_amplitude < 0.0 {
            invalid!("phantom jitter, noise and bias parameters out of range");
        }
        Ok(())
    }
}

/// Key points of a rendered phantom in pixel coordinates `(row, col)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub flexion_deg: f64,
    pub version_deg: f64,
    /// Where the cervix meets the vagina.
    pub cervix_base: (f64, f64),
    pub fundus: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    /// Uterus (cervix and body) mask.
    pub mask: Volume,
    pub condition: ConditionSpec,
    pub geometry: PhantomGeometry,
}

/// Ellipse (ellipsoid in 3D) with its long axis along `dir`.
struct Organ {
    centre: (f64, f64),
    dir: (f64, f64),
    semi_long: f64,
    semi_short: f64,
    semi_lateral: f64,
    intensity: f64,
}

impl Organ {
    /// Normalised radius; ≤ 1 inside.
    fn radius(&self, p: (f64, f64), lateral: f64) -> f64 {
        let d = (p.0 - self.centre.0, p.1 - self.centre.1);
        let along = d.0 * self.dir.0 + d.1 * self.dir.1;
        let across = -d.0 * self.dir.1 + d.1 * self.dir.0;
        ((along / self.semi_long).powi(2) + (across / self.semi_short).powi(2) + (lateral / self.semi_lateral).powi(2))
            .sqrt()
    }

    /// Soft membership for anti-aliased edges.
    fn weight(&self, p: (f64, f64), lateral: f64, edge: f64) -> f64 {
        ((1.0 - self.radius(p, lateral)) / edge + 0.5).clamp(0.0, 1.0)
    }
}

/// Rotate a `(row, col)` direction; positive angles turn an upward vector
/// toward the anterior (low column) side.
fn rotate(v: (f64, f64), deg: f64) -> (f64, f64) {
    let (s, c) = (deg * PI / 180.0).sin_cos();
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

fn add(a: (f64, f64), b: (f64, f64), k: f64) -> (f64, f64) {
    (a.0 + k * b.0, a.1 + k * b.1)
}

/// Render a phantom. Identical specs give identical output.
pub fn generate_phantom(spec: &PhantomSpec) -> Phantom {
    spec.validate().expect("valid phantom spec");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let class = spec.orientation_class;
    let flexion = draw(spec.flexion_range_deg.0, spec.flexion_range_deg.1) * if class.anteflexed() { 1.0 } else { -1.0 };
    let version = draw(spec.version_range_deg.0, spec.version_range_deg.1) * if class.anteverted() { 1.0 } else { -1.0 };
    let j = spec.size_jitter;
    let scale = 1.0 + draw(-j, j);
    let shift = (draw(-0.03, 0.03), draw(-0.03, 0.03));
    let vag_tilt = draw(15.0, 25.0);
    let body_width = draw(0.1, 0.12) * scale;
    let bladder_fill = draw(0.85, 1.15);
    let contrast = if spec.sequence == Sequence::Haste { 0.85 } else { 1.0 };

    // Up is decreasing row; the vagina leans posterior going up.
    let dv = rotate((-1.0, 0.0), -vag_tilt);
    let v0 = (0.84 + shift.0, 0.55 + shift.1);
    let v1 = add(v0, dv, 0.16 * scale);
    let dc = rotate(dv, version);
    let c1 = add(v1, dc, 0.12 * scale);
    let db = rotate(dc, flexion);
    let body_len = 0.28 * scale;
    let fundus = add(c1, db, body_len);

    let vagina = Organ { centre: add(v0, dv, 0.08 * scale), dir: dv, semi_long: 0.09 * scale, semi_short: 0.025, semi_lateral: 0.05, intensity: 0.25 };
    let cervix = Organ { centre: add(v1, dc, 0.06 * scale), dir: dc, semi_long: 0.07 * scale, semi_short: 0.05 * scale, semi_lateral: 0.06, intensity: 0.2 };
    let body = Organ { centre: add(c1, db, body_len / 2.0), dir: db, semi_long: body_len / 2.0 + 0.01, semi_short: body_width, semi_lateral: 0.09, intensity: 0.7 };
    let endometrium = Organ { centre: body.centre, dir: db, semi_long: body_len * 0.36, semi_short: 0.028 * scale, semi_lateral: 0.03, intensity: 1.0 };
    let bladder = Organ { centre: (0.6 + shift.0, 0.24 + shift.1), dir: (0.0, 1.0), semi_long: 0.13 * bladder_fill, semi_short: 0.11 * bladder_fill, semi_lateral: 0.14, intensity: 1.0 };
    let rectum = Organ { centre: (0.62 + shift.0, 0.84 + shift.1), dir: (1.0, 0.0), semi_long: 0.2, semi_short: 0.065, semi_lateral: 0.06, intensity: 0.22 };
    let pelvis = Organ { centre: (0.55, 0.5), dir: (1.0, 0.0), semi_long: 0.5, semi_short: 0.52, semi_lateral: 0.6, intensity: 0.4 };

    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| (draw(1.0, 4.0), draw(0.0, 2.0 * PI), draw(0.0, 2.0 * PI), draw(0.5, 1.0)))
        .collect();
    let bias_dir = draw(0.0, 2.0 * PI);
    let bias_quad = draw(-0.5, 0.5);
    let sigma = spec.noise_sigma * (1.5 / spec.field_strength.tesla()).sqrt();

    let n = spec.extent;
    let shape: Vec<usize> = if spec.slices > 1 { vec![n, n, spec.slices] } else { vec![n, n] };
    let edge = 1.5 / n as f64;
    let mut img = ArrayD::<f32>::zeros(IxDyn(&shape));
    let mut mask = ArrayD::<f32>::zeros(IxDyn(&shape));
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut nrng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let over = |o: f64, w: f64, v: f64| o * (1.0 - w) + v * w;
    for (idx, px) in img.indexed_iter_mut() {
        let p = ((idx[0] as f64 + 0.5) / n as f64, (idx[1] as f64 + 0.5) / n as f64);
        let lateral = if spec.slices > 1 { ((idx[2] as f64 + 0.5) / spec.slices as f64 - 0.5) * 0.3 } else { 0.0 };
        let mut v = 0.04;
        for organ in [&pelvis, &rectum, &bladder, &vagina, &cervix, &body, &endometrium] {
            let w = organ.weight(p, lateral, edge);
            v = over(v, w, organ.intensity * contrast + (1.0 - contrast) * 0.5);
        }
        let tex: f64 = waves
            .iter()
            .map(|&(f, a, ph, amp)| amp * (2.0 * PI * f * (p.0 * a.cos() + p.1 * a.sin()) + ph).cos())
            .sum::<f64>()
            / waves.len() as f64;
        v *= 1.0 + spec.texture_amplitude * tex;
        let q = (p.0 - 0.5) * bias_dir.cos() + (p.1 - 0.5) * bias_dir.sin();
        v *= (spec.bias_amplitude * (q + bias_quad * q * q)).exp();
        v += sigma * noise.sample(&mut nrng);
        *px = v.max(0.0) as f32;
        if cervix.radius(p, lateral) <= 1.0 || body.radius(p, lateral) <= 1.0 {
            mask[IxDyn(idx.slice())] = 1.0;
        }
    }
    let spacing = vec![1.0; shape.len()];
    let condition = spec.condition();
    let meta = VolumeMeta { condition: Some(condition.clone()), source_id: None, intensity_shift: None };
    let px = |u: (f64, f64)| (u.0 * n as f64 - 0.5, u.1 * n as f64 - 0.5);
    Phantom {
        volume: Volume::new(img, spacing.clone()).expect("finite phantom").with_meta(meta.clone()),
        mask: Volume::new(mask, spacing).expect("finite mask").with_meta(meta),
        condition,
        geometry: PhantomGeometry { flexion_deg: flexion, version_deg: version, cervix_base: px(v1), fundus: px(fundus) },
    }
}

/// Dataset of preprocessed phantoms with per-split class proportions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomDatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default)]
    pub n_mapping: usize,
    /// Class shares in `OrientationClass::ALL` order.
    pub class_proportions: [f64; 4],
    pub seed: u64,
    pub extent: usize,
    pub slices: usize,
    /// Field strength and sequence are drawn per item when true.
    pub vary_acquisition: bool,
    pub chain: ChainConfig,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    #[serde(default = "default_texture")]
    pub texture_amplitude: f64,
}

fn default_texture() -> f64 {
    0.05
}

impl Default for PhantomDatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_val: 60,
            n_test: 200,
            n_mapping: 0,
            class_proportions: [0.4, 0.25, 0.2, 0.15],
            seed: 0,
            extent: 64,
            slices: 1,
            vary_acquisition: true,
            chain: ChainConfig::default(),
            noise_sigma: 0.03,
            bias_amplitude: 0.3,
            texture_amplitude: default_texture(),
        }
    }
}

/// Split `n` into per-class counts by largest remainder, at least one each
/// when `n` allows.
fn class_counts(n: usize, p: &[f64; 4]) -> Vec<usize> {
    let total: f64 = p.iter().sum();
    let raw: Vec<f64> = p.iter().map(|v| v / total * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    if n >= 4 {
        while let Some(z) = counts.iter().position(|&c| c == 0) {
            let big = (0..4).max_by_key(|&k| counts[k]).expect("four classes");
            counts[big] -= 1;
            counts[z] += 1;
        }
    }
    counts
}

impl PhantomDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_proportions.iter().any(|&p| !(p >= 0.0 && p.is_finite())) || self.class_proportions.iter().sum::<f64>() <= 0.0 {
            invalid!("class proportions must be non-negative with a positive sum");
        }
        if !(self.texture_amplitude >= 0.0 && self.noise_sigma >= 0.0 && self.bias_amplitude >= 0.0) {
            invalid!("texture, noise and bias amplitudes must be non-negative");
        }
        if self.n_train == 0 || self.n_val == 0 {
            invalid!("phantom dataset needs train and validation items");
        }
        Ok(())
    }

    /// Every item's id, split and render spec, in a fixed order.
    pub fn specs(&self) -> Vec<(String, Split, PhantomSpec)> {
        let mut out = Vec::new();
        for (split, n) in [(Split::Train, self.n_train), (Split::Val, self.n_val), (Split::Test, self.n_test), (Split::Mapping, self.n_mapping)] {
            let name = format!("{split:?}").to_lowercase();
            let mut classes: Vec<OrientationClass> = class_counts(n, &self.class_proportions)
                .into_iter()
                .enumerate()
                .flat_map(|(k, c)| std::iter::repeat_n(OrientationClass::ALL[k], c))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("phantom-order-{name}")));
            for i in (1..classes.len()).rev() {
                classes.swap(i, rng.random_range(0..=i));
            }
            for (i, class) in classes.into_iter().enumerate() {
                let id = format!("{name}-{i:04}");
                let mut spec = PhantomSpec::for_class(class, derive_seed(self.seed, &id));
                spec.extent = self.extent;
                spec.slices = self.slices;
                spec.noise_sigma = self.noise_sigma;
                spec.bias_amplitude = self.bias_amplitude;
                spec.texture_amplitude = self.texture_amplitude;
                if self.vary_acquisition {
                    spec.field_strength = FieldStrength::ALL[rng.random_range(0..3)];
                    spec.sequence = Sequence::ALL[rng.random_range(0..2)];
                }
                out.push((id, split, spec));
            }
        }
        out
    }

    /// Render and preprocess one split in memory.
    pub fn image_set(&self, split: Split) -> Result<ImageSet> {
        self.validate()?;
        let mut set = ImageSet::default();
        for (id, s, spec) in self.specs() {
            if s != split {
                continue;
            }
            let p = generate_phantom(&spec);
            let v = preprocess_chain(&p.volume, &p.mask, &self.chain)?;
            let mut shape = vec![1];
            shape.extend_from_slice(v.shape());
            set.push(id, v.to_tensor().reshape(shape), p.condition)?;
        }
        Ok(set)
    }

    /// Write raw phantoms and masks plus a manifest; returns the manifest.
    pub fn write_raw(&self, dir: &Path) -> Result<Manifest> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let mut m = Manifest::new(dir);
        for (id, split, spec) in self.specs() {
            let p = generate_phantom(&spec);
            let mut vol = p.volume;
            vol.meta.source_id = Some(id.clone());
            let path = vol.save(&dir.join(&id))?;
            let mask_path = p.mask.save(&dir.join(format!("{id}_mask")))?;
            m.records.push(ManifestRecord {
                id,
                path: path.strip_prefix(dir).unwrap_or(&path).to_path_buf(),
                orientation_class: spec.orientation_class,
                field_strength: spec.field_strength,
                sequence: spec.sequence,
                split,
                spacing_mm: vol.spacing_mm.clone(),
                slice_policy: SlicePolicy::Whole,
                extra_keywords: Vec::new(),
                mask_path: Some(mask_path.strip_prefix(dir).unwrap_or(&mask_path).to_path_buf()),
            });
        }
        m.save(&dir.join("manifest.jsonl"))?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bend direction from first moments of the mask: the turn from the
    /// cervix axis (base to the centroid of nearby pixels) to the body axis
    /// (that centroid to the centroid of the remaining pixels).
    fn bend_sign(p: &Phantom) -> f64 {
        let base = p.geometry.cervix_base;
        let n = p.mask.shape()[0] as f64;
        let mut near = (0.0, 0.0, 0.0);
        let mut far = (0.0, 0.0, 0.0);
        for (i, &m) in p.mask.data.indexed_iter() {
            if m <= 0.0 {
                continue;
            }
            let q = (i[0] as f64, i[1] as f64);
            let d = ((q.0 - base.0).powi(2) + (q.1 - base.1).powi(2)).sqrt();
            let acc = if d < 0.1 * n { &mut near } else { &mut far };
            acc.0 += q.0;
            acc.1 += q.1;
            acc.2 += 1.0;
        }
        let cn = (near.0 / near.2, near.1 / near.2);
        let cf = (far.0 / far.2, far.1 / far.2);
        let d1 = (cn.0 - base.0, cn.1 - base.1);
        let d2 = (cf.0 - cn.0, cf.1 - cn.1);
        (d1.0 * d2.1 - d1.1 * d2.0).signum()
    }

    fn connected(mask: &ArrayD<f32>) -> bool {
        let s = mask.shape().to_vec();
        let on: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &v)| v > 0.0).map(|(i, _)| (i[0], i[1])).collect();
        let Some(&start) = on.first() else { return false };
        let mut seen = vec![false; s[0] * s[1]];
        let mut stack = vec![start];
        seen[start.0 * s[1] + start.1] = true;
        let mut count = 0;
        while let Some((i, j)) = stack.pop() {
            count += 1;
            for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (a, b) = (i as i64 + di, j as i64 + dj);
                if a < 0 || b < 0 || a >= s[0] as i64 || b >= s[1] as i64 {
                    continue;
                }
                let (a, b) = (a as usize, b as usize);
                if mask[[a, b]] > 0.0 && !seen[a * s[1] + b] {
                    seen[a * s[1] + b] = true;
                    stack.push((a, b));
                }
            }
        }
        count == on.len()
    }

    #[test]
    fn same_seed_same_phantom() {
        let s = PhantomSpec::for_class(OrientationClass::RfAv, 9);
        assert_eq!(generate_phantom(&s).volume.content_hash(), generate_phantom(&s).volume.content_hash());
        let other = PhantomSpec { seed: 10, ..s };
        assert_ne!(generate_phantom(&other).volume.content_hash(), generate_phantom(&s).volume.content_hash());
    }

    #[test]
    fn flexion_sign_is_recoverable_from_the_mask() {
        let quiet = |c, seed| PhantomSpec { noise_sigma: 0.0, bias_amplitude: 0.0, ..PhantomSpec::for_class(c, seed) };
        for seed in 0..20 {
            let af = generate_phantom(&quiet(OrientationClass::AfAv, seed));
            let rf = generate_phantom(&quiet(OrientationClass::RfRv, seed));
            assert_ne!(af.volume.data, rf.volume.data);
            for class in OrientationClass::ALL {
                let p = generate_phantom(&quiet(class, seed));
                assert_eq!(p.geometry.flexion_deg > 0.0, class.anteflexed());
                // Turning an upward axis toward low columns is a positive
                // (row, col) cross product.
                let want = if class.anteflexed() { 1.0 } else { -1.0 };
                assert_eq!(bend_sign(&p), want, "{class} seed {seed}");
            }
        }
    }

    #[test]
    fn masks_are_nonempty_and_connected() {
        for class in OrientationClass::ALL {
            for seed in 0..20 {
                let p = generate_phantom(&PhantomSpec::for_class(class, seed));
                assert!(connected(&p.mask.data), "{class} seed {seed}");
            }
        }
    }

    #[test]
    fn three_d_phantoms_have_slices() {
        let p = generate_phantom(&PhantomSpec { slices: 5, extent: 32, ..PhantomSpec::for_class(OrientationClass::AfAv, 1) });
        assert_eq!(p.volume.shape(), &[32, 32, 5]);
        let central: f32 = p.mask.data.index_axis(ndarray::Axis(2), 2).sum();
        let edge: f32 = p.mask.data.index_axis(ndarray::Axis(2), 0).sum();
        assert!(central > edge);
    }

    #[test]
    fn dataset_counts_follow_proportions() {
        assert_eq!(class_counts(20, &[0.4, 0.25, 0.2, 0.15]), vec![8, 5, 4, 3]);
        assert_eq!(class_counts(4, &[1.0, 0.0, 0.0, 0.0]), vec![1, 1, 1, 1]);
        assert_eq!(class_counts(10, &[1.0; 4]).iter().sum::<usize>(), 10);
        let cfg = PhantomDatasetConfig { n_train: 12, n_val: 4, n_test: 4, extent: 32, ..Default::default() };
        let specs = cfg.specs();
        assert_eq!(specs.len(), 20);
        assert_eq!(specs, cfg.specs());
        let set = cfg.image_set(Split::Val).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.item_shape(), Some(&[1usize, 32, 32][..]));
        let dir = tempfile::tempdir().unwrap();
        let m = cfg.write_raw(dir.path()).unwrap();
        let back = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.records, m.records);
        back.check_paths().unwrap();
    }
}
