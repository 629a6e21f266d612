//! Intensity and geometry preprocessing of volumes, plus the procedural
//! phantom generator used as stand-in data.

mod phantom;

pub use phantom::{
    generate_phantom, Phantom, PhantomDatasetConfig, PhantomGeometry, PhantomSpec,
};

use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayD, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::Volume;

/// Exponents of every monomial in `ndim` variables with total degree ≤ `order`.
fn monomials(ndim: usize, order: usize) -> Vec<Vec<usize>> {
    fn rec(ndim: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == ndim {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(ndim, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(ndim, order, &mut Vec::new(), &mut out);
    out
}

/// Normalised coordinate in [-1, 1] of index `i` on an axis of length `n`.
fn unit_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

fn basis_row(idx: &[usize], shape: &[usize], terms: &[Vec<usize>], row: &mut [f64]) {
    for (r, exps) in row.iter_mut().zip(terms) {
        *r = exps
            .iter()
            .enumerate()
            .map(|(a, &e)| unit_coord(idx[a], shape[a]).powi(e as i32))
            .product();
    }
}

/// Multiplicative field estimate: `exp` of a least-squares polynomial in
/// the log intensities, scaled to unit mean. Intensities must be positive.
///
/// Only voxels above a fifth of the mean intensity enter the fit, so dark
/// background does not dominate the log domain.
pub fn estimate_bias_field(data: &ArrayD<f32>, poly_order: usize) -> Result<ArrayD<f32>> {
    let shape = data.shape().to_vec();
    if poly_order > 0 {
        if let Some(axis) = shape.iter().position(|&n| n <= poly_order) {
            return Err(Error::Degenerate {
                axis,
                detail: format!("extent {} cannot support a degree-{poly_order} fit", shape[axis]),
            });
        }
    }
    if data.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        invalid!("bias estimation needs strictly positive, finite intensities");
    }
    let terms = monomials(shape.len(), poly_order);
    let k = terms.len();
    let mut ata = DMatrix::<f64>::zeros(k, k);
    let mut aty = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    let floor = 0.2 * data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
    for (idx, &v) in data.indexed_iter() {
        if (v as f64) < floor {
            continue;
        }
        basis_row(idx.slice(), &shape, &terms, &mut row);
        let y = (v as f64).ln();
        for i in 0..k {
            aty[i] += row[i] * y;
            for j in 0..k {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    let svd = ata.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= smax * 1e-12 {
        // Identify the first axis whose terms alone are rank deficient.
        let axis = (0..shape.len()).find(|&a| shape[a] <= poly_order).unwrap_or(0);
        return Err(Error::Degenerate { axis, detail: "rank-deficient polynomial fit".into() });
    }
    let coef = svd.solve(&aty, 1e-14).map_err(|e| Error::Singular(e.to_string()))?;
    let mut field = ArrayD::<f64>::zeros(IxDyn(&shape));
    for (idx, f) in field.indexed_iter_mut() {
        basis_row(idx.slice(), &shape, &terms, &mut row);
        *f = row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>().exp();
    }
    let mean = field.mean().unwrap_or(1.0);
    Ok(field.mapv(|f| (f / mean) as f32))
}

/// Divide out a smooth multiplicative field. Non-positive inputs are
/// shifted first; the shift is recorded in the metadata.
pub fn correct_bias_field(v: &Volume, poly_order: usize) -> Result<Volume> {
    v.validate()?;
    let min = v.min() as f64;
    let mut out = v.clone();
    if min <= 0.0 {
        let range = (v.max() as f64 - min).max(1.0);
        let shift = -min + 1e-3 * range;
        out.data.mapv_inplace(|x| (x as f64 + shift) as f32);
        out.meta.intensity_shift = Some(out.meta.intensity_shift.unwrap_or(0.0) + shift);
    }
    let field = estimate_bias_field(&out.data, poly_order)?;
    out.data.zip_mut_with(&field, |x, f| *x /= f);
    Ok(out)
}

/// Zero mean and unit variance per scan.
pub fn znormalize(v: &Volume) -> Result<Volume> {
    v.validate()?;
    let mean = v.mean();
    let std = v.std();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        invalid!("cannot z-normalise a constant image");
    }
    let mut out = v.clone();
    out.data.mapv_inplace(|x| ((x as f64 - mean) / std) as f32);
    Ok(out)
}

/// Crop window of [`extract_roi`] in source voxel indices (end exclusive).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub start: Vec<usize>,
    pub end: Vec<usize>,
}

/// Bounding box of `mask > 0`, widened by `round(margin_frac · extent)` per
/// side, clamped to the grid, then padded with the image minimum so the
/// first two axes are square.
pub fn extract_roi(v: &Volume, mask: &Volume, margin_frac: f64) -> Result<(Volume, RoiBox)> {
    if v.shape() != mask.shape() {
        return Err(Error::Shape(format!("mask {:?} does not match image {:?}", mask.shape(), v.shape())));
    }
    if !(margin_frac >= 0.0 && margin_frac.is_finite()) {
        invalid!("margin_frac must be a finite value >= 0");
    }
    if v.ndim() < 2 {
        invalid!("ROI extraction needs at least 2 axes");
    }
    let nd = v.ndim();
    let mut lo = vec![usize::MAX; nd];
    let mut hi = vec![0usize; nd];
    let mut any = false;
    for (idx, &m) in mask.data.indexed_iter() {
        if m > 0.0 {
            any = true;
            for a in 0..nd {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a]);
            }
        }
    }
    if !any {
        invalid!("ROI mask is empty");
    }
    let mut start = vec![0; nd];
    let mut end = vec![0; nd];
    for a in 0..nd {
        let extent = hi[a] - lo[a] + 1;
        let m = (margin_frac * extent as f64).round() as usize;
        start[a] = lo[a].saturating_sub(m);
        end[a] = (hi[a] + 1 + m).min(v.shape()[a]);
    }
    let crop_shape: Vec<usize> = (0..nd).map(|a| end[a] - start[a]).collect();
    let side = crop_shape[0].max(crop_shape[1]);
    let mut out_shape = crop_shape.clone();
    out_shape[0] = side;
    out_shape[1] = side;
    let off0 = (side - crop_shape[0]) / 2;
    let off1 = (side - crop_shape[1]) / 2;
    let fill = v.min();
    let mut out = ArrayD::from_elem(IxDyn(&out_shape), fill);
    let mut src = vec![0; nd];
    let mut dst = vec![0; nd];
    for idx in ndarray::indices(IxDyn(&crop_shape)) {
        for a in 0..nd {
            src[a] = start[a] + idx[a];
            dst[a] = idx[a];
        }
        dst[0] += off0;
        dst[1] += off1;
        out[IxDyn(&dst)] = v.data[IxDyn(&src)];
    }
    let vol = Volume::new(out, v.spacing_mm.clone())?.with_meta(v.meta.clone());
    Ok((vol, RoiBox { start, end }))
}

/// Multilinear sample at fractional source positions (inside the grid).
fn interpolate(data: &ArrayD<f32>, pos: &[f64]) -> f32 {
    let nd = pos.len();
    let shape = data.shape();
    let mut base = vec![0usize; nd];
    let mut frac = vec![0.0f64; nd];
    for a in 0..nd {
        let p = pos[a].clamp(0.0, (shape[a] - 1) as f64);
        let f = p.floor() as usize;
        base[a] = f.min(shape[a].saturating_sub(2));
        frac[a] = if shape[a] == 1 { 0.0 } else { p - base[a] as f64 };
    }
    let mut acc = 0.0f64;
    let mut corner = vec![0usize; nd];
    for mask in 0..(1usize << nd) {
        let mut w = 1.0;
        for a in 0..nd {
            let up = (mask >> a) & 1 == 1;
            if up && shape[a] == 1 {
                w = 0.0;
                break;
            }
            corner[a] = base[a] + usize::from(up);
            w *= if up { frac[a] } else { 1.0 - frac[a] };
        }
        if w != 0.0 {
            acc += w * data[IxDyn(&corner)] as f64;
        }
    }
    acc as f32
}

fn resample_grid(v: &Volume, out_shape: &[usize], step: &[f64], spacing: Vec<f64>) -> Result<Volume> {
    let mut out = ArrayD::<f32>::zeros(IxDyn(out_shape));
    let mut pos = vec![0.0; out_shape.len()];
    for (idx, o) in out.indexed_iter_mut() {
        for a in 0..pos.len() {
            pos[a] = idx[a] as f64 * step[a];
        }
        *o = interpolate(&v.data, &pos);
    }
    Ok(Volume::new(out, spacing)?.with_meta(v.meta.clone()))
}

/// Linear resampling onto `target_spacing_mm`. Voxel 0 keeps its position
/// and the output covers the input's span `(n - 1) · spacing` without
/// extrapolating.
pub fn resample(v: &Volume, target_spacing_mm: &[f64]) -> Result<Volume> {
    v.validate()?;
    if target_spacing_mm.len() != v.ndim() {
        invalid!("{} target spacings for a {}-D volume", target_spacing_mm.len(), v.ndim());
    }
    if target_spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        invalid!("target spacing must be positive");
    }
    let mut shape = Vec::with_capacity(v.ndim());
    let mut step = Vec::with_capacity(v.ndim());
    for a in 0..v.ndim() {
        let n = v.shape()[a];
        let ratio = v.spacing_mm[a] / target_spacing_mm[a];
        // Tolerate representation error so equal spans keep their end voxel.
        shape.push(((n - 1) as f64 * ratio + 1e-9).floor() as usize + 1);
        step.push(target_spacing_mm[a] / v.spacing_mm[a]);
    }
    resample_grid(v, &shape, &step, target_spacing_mm.to_vec())
}

/// Linear resampling onto a fixed grid with the end voxels aligned; the
/// spacing is adjusted to keep the physical span.
pub fn resample_to_shape(v: &Volume, shape: &[usize]) -> Result<Volume> {
    v.validate()?;
    if shape.len() != v.ndim() || shape.contains(&0) {
        invalid!("target shape {shape:?} does not fit a {}-D volume", v.ndim());
    }
    let mut step = Vec::with_capacity(shape.len());
    let mut spacing = Vec::with_capacity(shape.len());
    for a in 0..shape.len() {
        let n = v.shape()[a];
        if shape[a] == 1 || n == 1 {
            step.push(0.0);
            spacing.push(v.spacing_mm[a] * n as f64 / shape[a] as f64);
        } else {
            let s = (n - 1) as f64 / (shape[a] - 1) as f64;
            step.push(s);
            spacing.push(v.spacing_mm[a] * s);
        }
    }
    resample_grid(v, shape, &step, spacing)
}

/// Parameters of the full preprocessing chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub poly_order: usize,
    pub margin_frac: f64,
    /// In-plane output grid (the slice axis is kept as-is).
    pub output_extent: usize,
    /// Crop to the mask bounding box; false keeps the full field of view.
    #[serde(default = "yes")]
    pub roi: bool,
}

fn yes() -> bool {
    true
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { poly_order: 2, margin_frac: 0.25, output_extent: 32, roi: true }
    }
}

/// Bias correction, z-normalisation, ROI crop and resampling to a fixed
/// in-plane grid, followed by a final z-normalisation of the crop.
pub fn preprocess_chain(v: &Volume, mask: &Volume, cfg: &ChainConfig) -> Result<Volume> {
    let b = correct_bias_field(v, cfg.poly_order)?;
    let z = znormalize(&b)?;
    let roi = if cfg.roi { extract_roi(&z, mask, cfg.margin_frac)?.0 } else { z };
    let mut shape = roi.shape().to_vec();
    shape[0] = cfg.output_extent;
    shape[1] = cfg.output_extent;
    let r = resample_to_shape(&roi, &shape)?;
    znormalize(&r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::OrientationClass;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn vol(shape: &[usize], mut f: impl FnMut(&[usize]) -> f32) -> Volume {
        let data = ArrayD::from_shape_fn(IxDyn(shape), |i| f(i.slice()));
        Volume::new(data, vec![1.0; shape.len()]).unwrap()
    }

    fn corr(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().map(|&v| v as f64).sum::<f64>() / n, b.iter().map(|&v| v as f64).sum::<f64>() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64 - ma, y as f64 - mb);
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(2, 0), vec![vec![0, 0]]);
    }

    #[test]
    fn bias_correction_constant_and_order_zero() {
        let c = vol(&[16, 16], |_| 3.5);
        let out = correct_bias_field(&c, 2).unwrap();
        assert!(out.data.iter().all(|&v| (v - 3.5).abs() < 1e-6));
        let r = vol(&[12, 10], |i| 1.0 + (i[0] * 10 + i[1]) as f32 * 0.01);
        let out = correct_bias_field(&r, 0).unwrap();
        // A unit-mean constant field leaves the image unchanged.
        let ratio: Vec<f32> = out.data.iter().zip(r.data.iter()).map(|(a, b)| a / b).collect();
        assert!(ratio.iter().all(|&q| (q - ratio[0]).abs() < 1e-6));
    }

    #[test]
    fn bias_correction_removes_known_ramp() {
        let p = generate_phantom(&PhantomSpec { bias_amplitude: 0.0, noise_sigma: 0.0, ..PhantomSpec::for_class(OrientationClass::AfAv, 3) });
        let clean = p.volume.data.clone();
        let biased = vol(p.volume.shape(), |i| clean[IxDyn(i)] * (1.2 * (i[0] as f32 / 63.0 - 0.5) + 0.6 * (i[1] as f32 / 63.0)).exp());
        let fixed = correct_bias_field(&biased, 1).unwrap();
        let before = corr(&biased.data, &clean);
        let after = corr(&fixed.data, &clean);
        assert!(after > before, "{after} <= {before}");
        let f = estimate_bias_field(&fixed.data, 1).unwrap();
        assert!((f.mean().unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn bias_correction_names_degenerate_axis() {
        let thin = vol(&[16, 2], |_| 1.0);
        match correct_bias_field(&thin, 2) {
            Err(Error::Degenerate { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn bias_correction_shifts_nonpositive_images() {
        let v = vol(&[8, 8], |i| i[0] as f32 - 3.0);
        let out = correct_bias_field(&v, 1).unwrap();
        assert!(out.meta.intensity_shift.unwrap() > 3.0);
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn znormalize_moments_and_affine_invariance(seed in 0u64..500, a in 0.1f32..10.0, b in -5.0f32..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = vol(&[9, 7], |_| StandardNormal.sample(&mut rng));
            let z = znormalize(&v).unwrap();
            prop_assert!(z.mean().abs() < 1e-5);
            prop_assert!((z.std() - 1.0).abs() < 1e-5);
            let mut w = v.clone();
            w.data.mapv_inplace(|x| a * x + b);
            let zw = znormalize(&w).unwrap();
            for (p, q) in z.data.iter().zip(zw.data.iter()) {
                prop_assert!((p - q).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn znormalize_rejects_constant() {
        assert!(znormalize(&vol(&[4, 4], |_| 2.0)).is_err());
    }

    #[test]
    fn roi_cases() {
        let img = vol(&[64, 64], |i| (i[0] * 64 + i[1]) as f32);
        let full = vol(&[64, 64], |_| 1.0);
        let (same, b) = extract_roi(&img, &full, 0.0).unwrap();
        assert_eq!(same.data, img.data);
        assert_eq!(b, RoiBox { start: vec![0, 0], end: vec![64, 64] });

        let centred = vol(&[64, 64], |i| f32::from((27..37).contains(&i[0]) && (27..37).contains(&i[1])));
        let (crop, b) = extract_roi(&img, &centred, 0.1).unwrap();
        // 10 px box + round(1.0) px per side.
        assert_eq!(crop.shape(), &[12, 12]);
        assert_eq!(b.start, vec![26, 26]);
        assert_eq!(crop.data[[0, 0]], img.data[[26, 26]]);

        let corner = vol(&[64, 64], |i| f32::from(i[0] < 4 && i[1] < 10));
        let (crop, b) = extract_roi(&img, &corner, 0.5).unwrap();
        assert_eq!(b.start, vec![0, 0]);
        assert_eq!(b.end, vec![6, 15]);
        assert_eq!(crop.shape(), &[15, 15]);
        // Padding rows take the image minimum.
        assert_eq!(crop.data[[0, 0]], 0.0);
        assert_eq!(crop.data[[4, 0]], img.data[[0, 0]]);
        assert_eq!(crop.data[[14, 14]], 0.0);

        assert!(extract_roi(&img, &vol(&[64, 64], |_| 0.0), 0.1).is_err());
    }

    #[test]
    fn resample_identity_constant_and_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = vol(&[10, 13], |_| StandardNormal.sample(&mut rng));
        let same = resample(&v, &[1.0, 1.0]).unwrap();
        assert_eq!(same.shape(), v.shape());
        assert!(same.data.iter().zip(v.data.iter()).all(|(a, b)| (a - b).abs() < 1e-6));

        let c = vol(&[7, 5], |_| 4.25);
        let r = resample(&c, &[0.3, 0.7]).unwrap();
        assert!(r.data.iter().all(|&x| x == 4.25));

        let mut ramp = vol(&[16, 8], |i| 0.5 + 0.25 * (2.0 * i[0] as f32) - 0.1 * (2.0 * i[1] as f32));
        ramp.spacing_mm = vec![2.0, 2.0];
        let fine = resample(&ramp, &[1.0, 1.0]).unwrap();
        assert_eq!(fine.spacing_mm, vec![1.0, 1.0]);
        assert_eq!(fine.shape(), &[31, 15]);
        for (idx, &x) in fine.data.indexed_iter() {
            let want = 0.5 + 0.25 * idx[0] as f32 - 0.1 * idx[1] as f32;
            assert!((x - want).abs() < 1e-6);
        }
        // Physical span agrees within one output voxel.
        assert!(((31.0 - 1.0) * 1.0 - 15.0 * 2.0f64).abs() <= 1.0);
        assert!(resample(&ramp, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn resample_roundtrip_on_smooth_phantom() {
        let p = generate_phantom(&PhantomSpec { noise_sigma: 0.0, texture_amplitude: 0.0, ..PhantomSpec::for_class(OrientationClass::RfRv, 1) });
        let mut smooth = p.volume.clone();
        // Blur to the smoothness the claim refers to.
        for _ in 0..8 {
            let d = smooth.data.clone();
            let s = d.shape().to_vec();
            for (idx, o) in smooth.data.indexed_iter_mut() {
                let (i, j) = (idx[0], idx[1]);
                let mut acc = 0.0;
                let mut n = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a >= 0 && b >= 0 && (a as usize) < s[0] && (b as usize) < s[1] {
                            acc += d[[a as usize, b as usize]];
                            n += 1.0;
                        }
                    }
                }
                *o = acc / n;
            }
        }
        let coarse = resample(&smooth, &[0.8, 0.8]).unwrap();
        let back = resample(&coarse, &[1.0, 1.0]).unwrap();
        let std = smooth.std() as f32;
        let mut worst = 0.0f32;
        for (idx, &x) in back.data.indexed_iter() {
            worst = worst.max((x - smooth.data[[idx[0], idx[1]]]).abs());
        }
        assert!(worst < 0.05 * std, "{worst} vs std {std}");
    }

    #[test]
    fn resample_to_shape_keeps_span() {
        let v = vol(&[64, 64, 3], |i| i[0] as f32 + i[2] as f32);
        let r = resample_to_shape(&v, &[32, 32, 3]).unwrap();
        assert_eq!(r.shape(), &[32, 32, 3]);
        assert!((r.spacing_mm[0] * 31.0 - 63.0).abs() < 1e-9);
        assert!((r.data[[31, 0, 2]] - 65.0).abs() < 1e-5);
    }

    #[test]
    fn chain_is_deterministic_and_pinned() {
        let spec = PhantomSpec::for_class(OrientationClass::AfRv, 42);
        let run = || {
            let p = generate_phantom(&spec);
            preprocess_chain(&p.volume, &p.mask, &ChainConfig::default()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.shape(), &[32, 32]);
        assert!(a.mean().abs() < 1e-5 && (a.std() - 1.0).abs() < 1e-5);
        let golden = include_str!("../../tests/data/chain_golden.txt").trim();
        assert_eq!(a.content_hash(), golden);
    }
}
