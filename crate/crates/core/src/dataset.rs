//! Sample manifests (JSON Lines) and in-memory image sets.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionSpec, FieldStrength, OrientationClass, Sequence};
use crate::error::{invalid, Error, Result};
use crate::nn::Tensor;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Labelled items used only to map clusters to classes.
    Mapping,
}

/// Which slices of a 3D volume become 2D training items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlicePolicy {
    /// Use the volume as stored (2D images, or whole 3D volumes).
    #[default]
    Whole,
    /// Every slice along the last axis.
    AllSlices,
    /// The three central slices along the last axis.
    Central3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub orientation_class: OrientationClass,
    pub field_strength: FieldStrength,
    pub sequence: Sequence,
    pub split: Split,
    pub spacing_mm: Vec<f64>,
    #[serde(default)]
    pub slice_policy: SlicePolicy,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_keywords: Vec<String>,
    /// Region mask used by the preprocessing chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl ManifestRecord {
    pub fn condition(&self) -> ConditionSpec {
        ConditionSpec {
            orientation_class: self.orientation_class,
            field_strength_tesla: self.field_strength,
            sequence: self.sequence,
            extra_keywords: self.extra_keywords.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self { records: Vec::new(), base_dir: base_dir.into() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::Validation(format!("manifest {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        let m = Self { records, base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default() };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                invalid!("duplicate manifest id {}", r.id);
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, r: &ManifestRecord) -> PathBuf {
        self.resolve_path(&r.path)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every referenced volume exists on disk.
    pub fn check_paths(&self) -> Result<()> {
        for r in &self.records {
            for p in std::iter::once(self.resolve(r)).chain(r.mask_path.as_deref().map(|m| self.resolve_path(m))) {
                if !p.with_extension("raw").exists() || !p.with_extension("json").exists() {
                    invalid!("manifest entry {} points at missing volume {}", r.id, p.display());
                }
            }
        }
        Ok(())
    }

    /// Load the images of one split as single-channel items.
    pub fn load_split(&self, split: Split) -> Result<ImageSet> {
        let mut set = ImageSet::default();
        for r in self.split(split) {
            let v = Volume::load(&self.resolve(r))?;
            for (k, item) in slices(&v, r.slice_policy)?.into_iter().enumerate() {
                let id = if r.slice_policy == SlicePolicy::Whole { r.id.clone() } else { format!("{}#{k}", r.id) };
                set.push(id, item, r.condition())?;
            }
        }
        Ok(set)
    }
}

fn slices(v: &Volume, policy: SlicePolicy) -> Result<Vec<Tensor<f32>>> {
    let whole = || {
        let mut shape = vec![1];
        shape.extend_from_slice(v.shape());
        v.to_tensor().reshape(shape)
    };
    if policy == SlicePolicy::Whole || v.ndim() == 2 {
        return Ok(vec![whole()]);
    }
    if v.ndim() != 3 {
        invalid!("slice policy needs a 3D volume");
    }
    let depth = v.shape()[2];
    let ks: Vec<usize> = match policy {
        SlicePolicy::AllSlices => (0..depth).collect(),
        _ => {
            let c = depth / 2;
            (c.saturating_sub(1)..(c + 2).min(depth)).collect()
        }
    };
    Ok(ks
        .into_iter()
        .map(|k| {
            let s = v.data.index_axis(ndarray::Axis(2), k);
            let mut shape = vec![1];
            shape.extend_from_slice(s.shape());
            Tensor::new(shape, s.iter().copied().collect())
        })
        .collect())
}

/// Equally shaped items `[C, *S]` with their conditions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageSet {
    pub ids: Vec<String>,
    pub items: Vec<Tensor<f32>>,
    pub specs: Vec<ConditionSpec>,
}

impl ImageSet {
    pub fn push(&mut self, id: String, item: Tensor<f32>, spec: ConditionSpec) -> Result<()> {
        if let Some(first) = self.items.first() {
            if first.shape() != item.shape() {
                return Err(Error::Shape(format!("item {id} has shape {:?}, set uses {:?}", item.shape(), first.shape())));
            }
        }
        self.ids.push(id);
        self.items.push(item);
        self.specs.push(spec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_shape(&self) -> Option<&[usize]> {
        self.items.first().map(Tensor::shape)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.orientation_class.index()).collect()
    }

    /// Stacked `[idx.len(), C, *S]` batch.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let picked: Vec<Tensor<f32>> = idx.iter().map(|&i| self.items[i].clone()).collect();
        Tensor::stack(&picked)
    }

    pub fn subset(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
            specs: idx.iter().map(|&i| self.specs[i].clone()).collect(),
        }
    }

    pub fn extend(&mut self, other: &ImageSet) -> Result<()> {
        for i in 0..other.len() {
            self.push(other.ids[i].clone(), other.items[i].clone(), other.specs[i].clone())?;
        }
        Ok(())
    }
}
