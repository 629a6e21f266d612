//! In-memory image volumes and their on-disk formats.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{ArrayD, IxDyn, ShapeBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::ConditionSpec;
use crate::error::{invalid, Error, Result};
use crate::nn::Tensor;

/// Acquisition descriptors and provenance carried with a volume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<ConditionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    /// Positive shift applied before log-domain processing, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity_shift: Option<f64>,
}

/// A 2D slice or 3D volume with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: ArrayD<f32>,
    pub spacing_mm: Vec<f64>,
    pub meta: VolumeMeta,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    spacing_mm: Vec<f64>,
    #[serde(default)]
    meta: VolumeMeta,
}

impl Volume {
    pub fn new(data: ArrayD<f32>, spacing_mm: Vec<f64>) -> Result<Self> {
        let v = Self { data, spacing_mm, meta: VolumeMeta::default() };
        v.validate()?;
        Ok(v)
    }

    pub fn with_meta(mut self, meta: VolumeMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing_mm.len() != self.data.ndim() {
            invalid!("{} spacings for a {}-d volume", self.spacing_mm.len(), self.data.ndim());
        }
        if let Some(s) = self.spacing_mm.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            invalid!("voxel spacing must be positive, got {s}");
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume contains NaN or infinite voxels".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn ndim(&self) -> usize {
        self.data.ndim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.len() as f64).sqrt()
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Row-major copy as an engine tensor of the same shape.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(self.shape().to_vec(), self.data.iter().copied().collect())
    }

    pub fn from_tensor(t: &Tensor<f32>, spacing_mm: Vec<f64>) -> Result<Self> {
        let data = ArrayD::from_shape_vec(IxDyn(t.shape()), t.data().to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data, spacing_mm)
    }

    /// SHA-256 over shape, spacing and voxel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for s in &self.spacing_mm {
            h.update(s.to_le_bytes());
        }
        for v in self.data.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Write `<stem>.raw` (little-endian f32, row-major) and `<stem>.json`.
    /// Returns the path of the raw file.
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        let raw = stem.with_extension("raw");
        let side = stem.with_extension("json");
        if let Some(dir) = raw.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = vec![0u8; self.len() * 4];
        let flat: Vec<f32> = self.data.iter().copied().collect();
        LittleEndian::write_f32_into(&flat, &mut bytes);
        fs::File::create(&raw)?.write_all(&bytes)?;
        let sc = Sidecar { shape: self.shape().to_vec(), spacing_mm: self.spacing_mm.clone(), meta: self.meta.clone() };
        fs::write(&side, serde_json::to_vec_pretty(&sc)?)?;
        Ok(raw)
    }

    /// Load from either the `.raw` or the `.json` path of a saved volume.
    pub fn load(path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        let mut bytes = Vec::new();
        fs::File::open(path.with_extension("raw"))?.read_to_end(&mut bytes)?;
        let n: usize = side.shape.iter().product();
        if bytes.len() != n * 4 {
            invalid!("{}: {} bytes for shape {:?}", path.display(), bytes.len(), side.shape);
        }
        let mut flat = vec![0f32; n];
        LittleEndian::read_f32_into(&bytes, &mut flat);
        let data = ArrayD::from_shape_vec(IxDyn(&side.shape), flat).map_err(|e| Error::Shape(e.to_string()))?;
        let v = Self { data, spacing_mm: side.spacing_mm, meta: side.meta };
        v.validate()?;
        Ok(v)
    }

    /// Central slice along the last axis for 3D volumes; the image itself
    /// for 2D.
    pub fn preview_slice(&self) -> (usize, usize, Vec<f32>) {
        let s = self.shape();
        match s.len() {
            2 => (s[0], s[1], self.data.iter().copied().collect()),
            3 => {
                let k = s[2] / 2;
                let sl = self.data.index_axis(ndarray::Axis(2), k);
                (s[0], s[1], sl.iter().copied().collect())
            }
            _ => (1, self.len(), self.data.iter().copied().collect()),
        }
    }

    /// 8-bit grayscale PNG of [`Volume::preview_slice`], min-max scaled.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, vals) = self.preview_slice();
        let (lo, hi) = vals.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels: Vec<u8> = vals.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8).collect();
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Validation(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::Validation(e.to_string()))?;
        Ok(())
    }
}

/// Read a NIfTI-1 single file (`.nii` or `.nii.gz`). Supports the common
/// integer and float datatypes and applies the scaling slope/intercept.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        bytes = out;
    }
    parse_nifti(&bytes)
}

fn parse_nifti(b: &[u8]) -> Result<Volume> {
    if b.len() < 352 {
        invalid!("NIfTI file shorter than its header");
    }
    let little = i32::from_le_bytes(b[0..4].try_into().unwrap()) == 348;
    if !little && i32::from_be_bytes(b[0..4].try_into().unwrap()) != 348 {
        invalid!("not a NIfTI-1 file (sizeof_hdr != 348)");
    }
    if &b[344..347] != b"n+1" {
        invalid!("only single-file NIfTI-1 (magic n+1) is supported");
    }
    let i16_at = |o: usize| {
        let a = [b[o], b[o + 1]];
        if little { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a: [u8; 4] = b[o..o + 4].try_into().unwrap();
        if little { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
    };
    let ndim = i16_at(40) as usize;
    if !(1..=7).contains(&ndim) {
        invalid!("NIfTI dim[0] = {ndim}");
    }
    let dims: Vec<usize> = (0..ndim).map(|i| i16_at(42 + 2 * i).max(1) as usize).collect();
    let spacing: Vec<f64> = (0..ndim).map(|i| f32_at(80 + 4 * i).abs().max(1e-6) as f64).collect();
    let datatype = i16_at(70);
    let offset = f32_at(108) as usize;
    let (slope, inter) = (f32_at(112), f32_at(116));
    let n: usize = dims.iter().product();
    let width = match datatype {
        2 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => invalid!("unsupported NIfTI datatype {other}"),
    };
    if b.len() < offset + n * width {
        invalid!("NIfTI payload truncated");
    }
    let p = &b[offset..offset + n * width];
    let val = |i: usize| -> f32 {
        let c = &p[i * width..(i + 1) * width];
        match datatype {
            2 => c[0] as f32,
            4 => (if little { i16::from_le_bytes([c[0], c[1]]) } else { i16::from_be_bytes([c[0], c[1]]) }) as f32,
            512 => (if little { u16::from_le_bytes([c[0], c[1]]) } else { u16::from_be_bytes([c[0], c[1]]) }) as f32,
            8 => {
                let a: [u8; 4] = c.try_into().unwrap();
                (if little { i32::from_le_bytes(a) } else { i32::from_be_bytes(a) }) as f32
            }
            16 => {
                let a: [u8; 4] = c.try_into().unwrap();
                if little { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
            }
            _ => {
                let a: [u8; 8] = c.try_into().unwrap();
                (if little { f64::from_le_bytes(a) } else { f64::from_be_bytes(a) }) as f32
            }
        }
    };
    let scale = |v: f32| if slope != 0.0 { v * slope + inter } else { v };
    let flat: Vec<f32> = (0..n).map(|i| scale(val(i))).collect();
    // NIfTI stores the first axis fastest.
    let fortran = ArrayD::from_shape_vec(IxDyn(&dims).f(), flat).map_err(|e| Error::Shape(e.to_string()))?;
    let data = fortran.as_standard_layout().into_owned();
    Volume::new(data, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Volume {
        let n: usize = shape.iter().product();
        let data = ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap();
        Volume::new(data, vec![1.0; shape.len()]).unwrap()
    }

    #[test]
    fn raw_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = ramp(&[3, 4, 2]);
        v.spacing_mm = vec![0.7, 0.7, 3.0];
        v.meta.source_id = Some("x".into());
        let raw = v.save(&dir.path().join("vol")).unwrap();
        let back = Volume::load(&raw).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        v.save_png(&dir.path().join("vol.png")).unwrap();
    }

    #[test]
    fn rejects_bad_spacing_and_nan() {
        let d = ArrayD::zeros(IxDyn(&[2, 2]));
        assert!(Volume::new(d.clone(), vec![1.0, 0.0]).is_err());
        assert!(Volume::new(d.clone(), vec![1.0]).is_err());
        let mut bad = d;
        bad[[0, 1]] = f32::NAN;
        assert!(Volume::new(bad, vec![1.0, 1.0]).is_err());
    }

    fn nifti_bytes(dims: &[i16], data: &[i16], slope: f32) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
            h[80 + 4 * i..84 + 4 * i].copy_from_slice(&(1.5f32 + i as f32).to_le_bytes());
        }
        h[70..72].copy_from_slice(&4i16.to_le_bytes());
        h[72..74].copy_from_slice(&16i16.to_le_bytes());
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for v in data {
            h.extend_from_slice(&v.to_le_bytes());
        }
        h
    }

    #[test]
    fn nifti_uses_first_axis_fastest_and_scaling() {
        // dims (x=2, y=3): stored order x fastest.
        let stored: Vec<i16> = (0..6).collect();
        let v = parse_nifti(&nifti_bytes(&[2, 3], &stored, 2.0)).unwrap();
        assert_eq!(v.shape(), &[2, 3]);
        assert_eq!(v.spacing_mm, vec![1.5, 2.5]);
        for x in 0..2 {
            for y in 0..3 {
                assert_eq!(v.data[[x, y]], 2.0 * (x + 2 * y) as f32);
            }
        }
    }

    #[test]
    fn nifti_gzip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nii.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&nifti_bytes(&[2, 2, 2], &[1, 2, 3, 4, 5, 6, 7, 8], 0.0)).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        let v = read_nifti(&path).unwrap();
        assert_eq!(v.shape(), &[2, 2, 2]);
        assert_eq!(v.data[[1, 1, 1]], 8.0);
        assert!(parse_nifti(&[0u8; 10]).is_err());
    }
}
