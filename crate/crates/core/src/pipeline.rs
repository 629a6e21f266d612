//! Declarative end-to-end runs: phantom generation through the
//! classification grid, with per-stage seeds, provenance stamps and resume.
//!
//! Every stage writes a stamp under `stamps/` naming its seed, a config
//! hash chained with the upstream stamp, and the content hashes of its
//! artifacts. A resumed run skips a stage whose stamp matches and whose
//! artifacts are intact, and reruns it and everything after it otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::conditioning::{ConditionSpec, FieldStrength, OrientationClass, Sequence};
use crate::dataset::{ImageSet, Manifest, ManifestRecord, Split};
use crate::ddpm::{sample_ddpm, train_ddpm, DdpmCheckpoint, SampleOptions, TrainConfig, TrainHooks};
use crate::denoiser::DenoiserConfig;
use crate::downstream::{
    experiment_grid, fit_classifier, summarize, train_classifier, write_results_csv, CellSummary, Classifier,
    ClassifierConfig, GridDataset, Regime, RegimeSpec,
};
use crate::error::{Error, Result};
use crate::latent::{latent_denoiser_config, sample_ldm, train_autoencoder, train_ldm, AeCheckpoint, AeTrainConfig, Autoencoder, AutoencoderConfig};
use crate::metrics::{diversity_score, fid, macro_f1, FeatureSet};
use crate::nn::Tensor;
use crate::preprocess::{preprocess_chain, ChainConfig, PhantomDatasetConfig};
use crate::privacy::{
    filter_batch, near_duplicate_clusters, train_encoder, ContrastiveEncoder, EmbeddingIndex, EncoderConfig,
    FilterReport, NeighbourBackend, Stage, StageEmbeddings, DEFAULT_LINK_THRESHOLD, DEFAULT_TAU,
};
use crate::schedule::ScheduleConfig;
use crate::seed::derive_seed;
use crate::volume::Volume;

/// Version of the pipeline config schema and output layout.
pub const PIPELINE_FORMAT_VERSION: u32 = 1;

/// Environment variable selecting the compute device; only `cpu` exists.
pub const DEVICE_ENV: &str = "UTERODIFF_DEVICE";

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fail unless the requested device is available.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.is_empty() && !d.eq_ignore_ascii_case("cpu") => {
            Err(Error::Config(format!("{DEVICE_ENV}={d} is not available; this build runs on cpu only")))
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    PhantomGen,
    Preprocess,
    TrainOracle,
    TrainAe,
    TrainDdpm,
    TrainLdm,
    TrainEncoder,
    Sample,
    PrivacyFilter,
    Metrics,
    Classify,
    Report,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 12] = [
        Self::PhantomGen,
        Self::Preprocess,
        Self::TrainOracle,
        Self::TrainAe,
        Self::TrainDdpm,
        Self::TrainLdm,
        Self::TrainEncoder,
        Self::Sample,
        Self::PrivacyFilter,
        Self::Metrics,
        Self::Classify,
        Self::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PhantomGen => "phantom_gen",
            Self::Preprocess => "preprocess",
            Self::TrainOracle => "train_oracle",
            Self::TrainAe => "train_ae",
            Self::TrainDdpm => "train_ddpm",
            Self::TrainLdm => "train_ldm",
            Self::TrainEncoder => "train_encoder",
            Self::Sample => "sample",
            Self::PrivacyFilter => "privacy_filter",
            Self::Metrics => "metrics",
            Self::Classify => "classify",
            Self::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected one of {:?}", Self::ALL.map(Self::name))))
    }
}

/// Image representation a model family is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cropped to the uterus bounding box.
    Roi,
    /// The whole field of view.
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Roi => "roi",
            Self::Full => "full",
        }
    }

    pub fn chain(self, base: &ChainConfig) -> ChainConfig {
        ChainConfig { roi: self == Self::Roi, ..base.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStageConfig {
    /// Samples per orientation class, spread evenly over acquisitions.
    pub per_class: usize,
    /// Classifier-free guidance; 1 is the plain conditional prediction.
    pub guidance_scale: f64,
    pub batch_size: usize,
    /// PNG previews written per class.
    pub previews_per_class: usize,
}

impl Default for SampleStageConfig {
    fn default() -> Self {
        Self { per_class: 200, guidance_scale: 4.0, batch_size: 50, previews_per_class: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyStageConfig {
    pub tau: f64,
    pub stage: Stage,
    /// Cosine threshold linking near-duplicate samples.
    pub link_threshold: f64,
    pub cluster_stage: Stage,
}

impl Default for PrivacyStageConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, stage: Stage::Final, link_threshold: DEFAULT_LINK_THRESHOLD, cluster_stage: Stage::Mid }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsStageConfig {
    pub batch_size: usize,
}

impl Default for MetricsStageConfig {
    fn default() -> Self {
        Self { batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyStageConfig {
    pub classifier: ClassifierConfig,
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    /// Phantoms with another texture, used only to pretrain the
    /// initialisation of the pretrained regime.
    pub pretrain: PhantomDatasetConfig,
}

impl Default for ClassifyStageConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            seeds: vec![0, 1, 2],
            regimes: Regime::ALL.to_vec(),
            pretrain: PhantomDatasetConfig { n_train: 300, n_val: 20, n_test: 0, texture_amplitude: 0.2, ..Default::default() },
        }
    }
}

/// Everything one run needs. Seed fields inside component configs are
/// replaced by seeds derived from `master_seed` and the stage name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub format_version: u32,
    pub master_seed: u64,
    pub output_root: PathBuf,
    pub stages: Vec<PipelineStage>,
    pub variants: Vec<Variant>,
    /// Raw manifest (with masks) to use instead of generated phantoms.
    pub input_manifest: Option<PathBuf>,
    pub phantoms: PhantomDatasetConfig,
    pub oracle: ClassifierConfig,
    /// Train the autoencoder and latent model on the ROI variant.
    pub ldm_enabled: bool,
    pub autoencoder: AutoencoderConfig,
    pub ae_train: AeTrainConfig,
    pub denoiser: DenoiserConfig,
    pub ddpm_train: TrainConfig,
    /// Base for the latent denoiser; channels and extent follow the
    /// autoencoder.
    pub ldm_denoiser: DenoiserConfig,
    pub ldm_train: TrainConfig,
    pub encoder: EncoderConfig,
    pub sample: SampleStageConfig,
    pub privacy: PrivacyStageConfig,
    pub metrics: MetricsStageConfig,
    pub classify: ClassifyStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ddpm_train = TrainConfig {
            max_epochs: 60,
            patience: 10,
            schedule: ScheduleConfig { steps: 200, ..Default::default() },
            ..Default::default()
        };
        Self {
            format_version: PIPELINE_FORMAT_VERSION,
            master_seed: 0,
            output_root: PathBuf::from("runs/default"),
            stages: PipelineStage::ALL.to_vec(),
            variants: vec![Variant::Roi, Variant::Full],
            input_manifest: None,
            phantoms: PhantomDatasetConfig { n_mapping: 60, ..Default::default() },
            oracle: ClassifierConfig::default(),
            ldm_enabled: true,
            autoencoder: AutoencoderConfig::default(),
            ae_train: AeTrainConfig::default(),
            denoiser: DenoiserConfig::tiny_2d(32),
            ddpm_train: ddpm_train.clone(),
            ldm_denoiser: DenoiserConfig { depth: 2, attention_levels: vec![1], channel_mult: vec![1, 2], ..DenoiserConfig::tiny_2d(8) },
            ldm_train: TrainConfig { lambda_perceptual: 0.0, ..ddpm_train },
            encoder: EncoderConfig::default(),
            sample: SampleStageConfig::default(),
            privacy: PrivacyStageConfig::default(),
            metrics: MetricsStageConfig::default(),
            classify: ClassifyStageConfig::default(),
        }
    }
}

/// Overlay `over` onto `base`. Unknown keys are errors; an object whose
/// `kind` tag differs from the default replaces it wholesale.
fn merge(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            if matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y) {
                *b = o.clone();
                return Ok(());
            }
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_null() => *slot = v.clone(),
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown config field {here:?}"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

fn config_err(what: &str, e: Error) -> Error {
    Error::Config(format!("{what}: {e}"))
}

impl PipelineConfig {
    /// Parse a (possibly partial) JSON config on top of the defaults.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(s).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !over.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, &over, "")?;
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s)
    }

    /// Minimal sizes for smoke runs; every stage executes in seconds.
    pub fn smoke(output_root: impl Into<PathBuf>) -> Self {
        let extent = 16;
        let chain = ChainConfig { output_extent: extent, ..Default::default() };
        let tiny_train = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 1,
            patience: 1,
            val_draws: 1,
            schedule: ScheduleConfig { steps: 8, ..Default::default() },
            ..Default::default()
        };
        let tiny_den = |e: usize| DenoiserConfig {
            base_width: 4,
            depth: 2,
            attention_levels: vec![],
            time_embed_dim: 8,
            cond_embed_dim: 8,
            channel_mult: vec![1, 2],
            ..DenoiserConfig::tiny_2d(e)
        };
        let clf = ClassifierConfig { extent, widths: vec![4, 8], epochs: 1, batch_size: 8, ..Default::default() };
        Self {
            output_root: output_root.into(),
            phantoms: PhantomDatasetConfig {
                n_train: 16,
                n_val: 4,
                n_test: 8,
                n_mapping: 8,
                extent: 32,
                chain: chain.clone(),
                ..Default::default()
            },
            oracle: clf.clone(),
            autoencoder: AutoencoderConfig { extent, base_width: 4, ..Default::default() },
            ae_train: AeTrainConfig { batch_size: 8, max_epochs: 1, patience: 1, ..Default::default() },
            denoiser: tiny_den(extent),
            ddpm_train: tiny_train.clone(),
            ldm_denoiser: tiny_den(4),
            ldm_train: tiny_train,
            encoder: EncoderConfig { extent, widths: [4, 8], embed_dim: 8, epochs: 1, batch_size: 8, ..Default::default() },
            sample: SampleStageConfig { per_class: 2, batch_size: 8, previews_per_class: 1, ..Default::default() },
            classify: ClassifyStageConfig {
                classifier: clf,
                seeds: vec![0],
                regimes: Regime::ALL.to_vec(),
                pretrain: PhantomDatasetConfig {
                    n_train: 8,
                    n_val: 4,
                    n_test: 0,
                    extent: 32,
                    chain,
                    texture_amplitude: 0.2,
                    ..Default::default()
                },
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != PIPELINE_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "config format_version {} is not supported (expected {PIPELINE_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.stages.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("stages and variants must be non-empty".into()));
        }
        let mut vs = self.variants.clone();
        vs.sort();
        vs.dedup();
        if vs.len() != self.variants.len() {
            return Err(Error::Config("variants must be unique".into()));
        }
        self.phantoms.validate().map_err(|e| config_err("phantoms", e))?;
        self.oracle.validate().map_err(|e| config_err("oracle", e))?;
        self.denoiser.validate().map_err(|e| config_err("denoiser", e))?;
        self.ddpm_train.validate().map_err(|e| config_err("ddpm_train", e))?;
        self.encoder.validate().map_err(|e| config_err("encoder", e))?;
        self.classify.classifier.validate().map_err(|e| config_err("classify.classifier", e))?;
        self.classify.pretrain.validate().map_err(|e| config_err("classify.pretrain", e))?;
        if self.ldm_enabled {
            self.autoencoder.validate().map_err(|e| config_err("autoencoder", e))?;
            self.ae_train.validate().map_err(|e| config_err("ae_train", e))?;
            self.ldm_train.validate().map_err(|e| config_err("ldm_train", e))?;
            if self.ldm_train.lambda_perceptual > 0.0 {
                return Err(Error::Config("ldm_train.lambda_perceptual must be 0".into()));
            }
            latent_denoiser_config(&self.autoencoder, &self.ldm_denoiser)
                .validate()
                .map_err(|e| config_err("ldm_denoiser", e))?;
        }
        let e = self.phantoms.chain.output_extent;
        for (name, got) in [
            ("oracle", self.oracle.extent),
            ("denoiser", self.denoiser.extent),
            ("encoder", self.encoder.extent),
            ("classify.classifier", self.classify.classifier.extent),
            ("classify.pretrain.chain", self.classify.pretrain.chain.output_extent),
        ] {
            if got != e {
                return Err(Error::Config(format!("{name} extent {got} differs from the preprocessed extent {e}")));
            }
        }
        if self.ldm_enabled && self.autoencoder.extent != e {
            return Err(Error::Config(format!("autoencoder extent {} differs from the preprocessed extent {e}", self.autoencoder.extent)));
        }
        if self.sample.per_class == 0 || self.sample.batch_size == 0 || self.metrics.batch_size == 0 {
            return Err(Error::Config("sample.per_class, sample.batch_size and metrics.batch_size must be positive".into()));
        }
        if !(self.sample.guidance_scale >= 0.0 && self.sample.guidance_scale.is_finite()) {
            return Err(Error::Config("sample.guidance_scale must be finite and >= 0".into()));
        }
        for (name, v) in [("privacy.tau", self.privacy.tau), ("privacy.link_threshold", self.privacy.link_threshold)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [-1, 1]")));
            }
        }
        if self.classify.seeds.is_empty() || self.classify.regimes.is_empty() {
            return Err(Error::Config("classify.seeds and classify.regimes must be non-empty".into()));
        }
        Ok(())
    }

    /// Checks that need the filesystem; run before any computation.
    pub fn check_inputs(&self) -> Result<()> {
        if let Some(p) = &self.input_manifest {
            if !p.exists() {
                return Err(Error::Config(format!("input manifest {} does not exist", p.display())));
            }
            let m = Manifest::load(p).map_err(|e| config_err("input manifest", e))?;
            m.check_paths().map_err(|e| config_err("input manifest", e))?;
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: PipelineStage) -> u64 {
        derive_seed(self.master_seed, stage.name())
    }

    fn has_variant(&self, v: Variant) -> bool {
        self.variants.contains(&v)
    }

    /// Sample sources: one DDPM per variant plus the latent model.
    pub fn sources(&self) -> Vec<Source> {
        let mut out: Vec<Source> = self.variants.iter().map(|&v| Source { name: format!("ddpm_{}", v.name()), variant: v, latent: false }).collect();
        if self.ldm_enabled && self.has_variant(Variant::Roi) {
            out.push(Source { name: "ldm_roi".into(), variant: Variant::Roi, latent: true });
        }
        out
    }

    /// The config slice each stage depends on.
    fn section(&self, stage: PipelineStage) -> Value {
        match stage {
            PipelineStage::PhantomGen => json!({"phantoms": self.phantoms, "input_manifest": self.input_manifest}),
            PipelineStage::Preprocess => json!({"chain": self.phantoms.chain, "variants": self.variants}),
            PipelineStage::TrainOracle => json!({"oracle": self.oracle}),
            PipelineStage::TrainAe => json!({"enabled": self.ldm_enabled, "autoencoder": self.autoencoder, "ae_train": self.ae_train}),
            PipelineStage::TrainDdpm => json!({"denoiser": self.denoiser, "ddpm_train": self.ddpm_train}),
            PipelineStage::TrainLdm => json!({"enabled": self.ldm_enabled, "ldm_denoiser": self.ldm_denoiser, "ldm_train": self.ldm_train}),
            PipelineStage::TrainEncoder => json!({"encoder": self.encoder}),
            PipelineStage::Sample => json!({"sample": self.sample}),
            PipelineStage::PrivacyFilter => json!({"privacy": self.privacy}),
            PipelineStage::Metrics => json!({"metrics": self.metrics}),
            PipelineStage::Classify => json!({"classify": self.classify}),
            PipelineStage::Report => json!({}),
        }
    }

    /// SHA-256 of the effective config, excluding where outputs go and
    /// which stages this invocation runs.
    pub fn hash(&self) -> String {
        let c = Self { output_root: PathBuf::new(), stages: Vec::new(), ..self.clone() };
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub name: String,
    pub variant: Variant,
    pub latent: bool,
}

/// Seed and config identity embedded in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactStamp {
    /// Relative to the output root.
    pub path: PathBuf,
    pub sha256: String,
    /// False for artifacts that record wall-clock times.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: PipelineStage,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub format_version: u32,
    pub artifacts: Vec<ArtifactStamp>,
}

impl StageStamp {
    /// Identity passed downstream: config plus deterministic outputs.
    fn chain_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        for a in self.artifacts.iter().filter(|a| a.deterministic) {
            h.update(a.path.to_string_lossy().as_bytes());
            h.update(a.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// SHA-256 of a file, or of the sorted (path, hash) list of a directory.
pub fn path_hash(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return Ok(hex::encode(Sha256::digest(fs::read(path)?)));
    }
    let mut h = Sha256::new();
    for e in walkdir::WalkDir::new(path).sort_by_file_name() {
        let e = e.map_err(|e| Error::Io(e.into()))?;
        if e.file_type().is_file() {
            let rel = e.path().strip_prefix(path).expect("inside root");
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(hex::encode(Sha256::digest(fs::read(e.path())?)).as_bytes());
            h.update([b'\n']);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing {what} at {}", path.display())))
    }
}

/// Raw records → preprocessed volumes under `out_dir` plus their manifest.
/// Records need a mask when the chain crops to the ROI.
pub fn preprocess_manifest(raw: &Manifest, chain: &ChainConfig, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new(out_dir);
    for r in &raw.records {
        let v = Volume::load(&raw.resolve(r))?;
        let mask = match &r.mask_path {
            Some(p) => Volume::load(&raw.resolve_path(p))?,
            None if chain.roi => {
                return Err(Error::Validation(format!("record {} has no mask_path; the ROI crop needs one", r.id)));
            }
            None => v.clone(),
        };
        let mut out = preprocess_chain(&v, &mask, chain)?;
        out.meta.source_id = Some(r.id.clone());
        out.meta.condition = Some(r.condition());
        let path = out.save(&out_dir.join(&r.id))?;
        m.records.push(ManifestRecord {
            path: path.strip_prefix(out_dir).unwrap_or(&path).to_path_buf(),
            spacing_mm: out.spacing_mm.clone(),
            mask_path: None,
            ..r.clone()
        });
    }
    m.save(&out_dir.join("manifest.jsonl"))?;
    Ok(m)
}

/// How many samples each condition receives: acquisitions cycle within a
/// class, classes in canonical order.
pub fn sample_plan(per_class: usize) -> Vec<(ConditionSpec, usize)> {
    let combos: Vec<(FieldStrength, Sequence)> =
        FieldStrength::ALL.iter().flat_map(|&f| Sequence::ALL.iter().map(move |&s| (f, s))).collect();
    let mut plan = Vec::new();
    for class in OrientationClass::ALL {
        for (j, &(f, s)) in combos.iter().enumerate() {
            let n = per_class / combos.len() + usize::from(j < per_class % combos.len());
            if n > 0 {
                plan.push((ConditionSpec::new(class, f, s), n));
            }
        }
    }
    plan
}

/// A trained generator.
pub enum Generator<'a> {
    Ddpm(&'a DdpmCheckpoint),
    Latent(&'a DdpmCheckpoint, &'a Autoencoder),
}

impl Generator<'_> {
    pub fn generate(&self, cond: &ConditionSpec, n: usize, rng: &mut ChaCha8Rng, opts: &SampleOptions) -> Result<Vec<Tensor<f32>>> {
        match self {
            Self::Ddpm(ck) => sample_ddpm(&ck.denoiser, &ck.schedule, Some(cond), n, rng, opts),
            Self::Latent(ck, ae) => sample_ldm(ck, ae, Some(cond), n, rng, opts),
        }
    }
}

/// Generate the plan into `out_dir` as volumes plus a manifest. Each
/// condition draws from its own seed, so counts for one condition do not
/// shift the others.
#[allow(clippy::too_many_arguments)]
pub fn write_samples(
    generator: &Generator<'_>,
    plan: &[(ConditionSpec, usize)],
    name: &str,
    seed: u64,
    spacing_mm: &[f64],
    opts: &SampleOptions,
    previews_per_class: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new(out_dir);
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for (cond, n) in plan {
        let k = cond.orientation_class.index();
        let label = format!("{name}/{k}/{}/{}", cond.field_strength_tesla.token(), cond.sequence.token());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &label));
        for item in generator.generate(cond, *n, &mut rng, opts)? {
            let count = per_class.entry(k).or_default();
            let id = format!("{name}-c{k}-{:04}", *count);
            *count += 1;
            let inner = item.shape()[1..].to_vec();
            let mut v = Volume::from_tensor(&item.reshape(inner), spacing_mm.to_vec())?;
            v.meta.condition = Some(cond.clone());
            v.meta.source_id = Some(id.clone());
            let path = v.save(&out_dir.join(&id))?;
            if *count <= previews_per_class {
                fs::create_dir_all(out_dir.join("previews"))?;
                v.save_png(&out_dir.join("previews").join(format!("{id}.png")))?;
            }
            m.records.push(ManifestRecord {
                id,
                path: path.strip_prefix(out_dir).unwrap_or(&path).to_path_buf(),
                orientation_class: cond.orientation_class,
                field_strength: cond.field_strength_tesla,
                sequence: cond.sequence,
                split: Split::Train,
                spacing_mm: spacing_mm.to_vec(),
                slice_policy: Default::default(),
                extra_keywords: cond.extra_keywords.clone(),
                mask_path: None,
            });
        }
    }
    m.save(&out_dir.join("manifest.jsonl"))?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub stage: Stage,
    pub link_threshold: f64,
    pub clusters: usize,
    pub largest: usize,
    /// Items in clusters of size at least 2.
    pub duplicated_items: usize,
}

/// Filter the samples of `samples` against `index`, writing
/// `report.json` and the accepted `manifest.jsonl` to `out_dir`.
pub fn filter_manifest(
    encoder: &ContrastiveEncoder,
    index: &EmbeddingIndex,
    samples: &Manifest,
    tau: f64,
    out_dir: &Path,
) -> Result<FilterReport> {
    let set = samples.load_split(Split::Train)?;
    let report = filter_batch(encoder, &set.ids, &set.items, index, tau)?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("report.json"), &report)?;
    let sample_dir = fs::canonicalize(&samples.base_dir)?;
    let out_abs = fs::canonicalize(out_dir)?;
    let mut kept = Manifest::new(out_dir);
    for i in report.accepted() {
        let r = &samples.records[i];
        let abs = sample_dir.join(&r.path);
        let path = relative_to(&abs, &out_abs);
        kept.records.push(ManifestRecord { path, ..r.clone() });
    }
    kept.save(&out_dir.join("manifest.jsonl"))?;
    Ok(report)
}

/// `target` expressed relative to `base` (both absolute).
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}

/// Near-duplicate structure of a sample set at one encoder stage, in the
/// training index's standardized space.
pub fn cluster_summary(
    encoder: &ContrastiveEncoder,
    index: &EmbeddingIndex,
    items: &[Tensor<f32>],
    link_threshold: f64,
) -> Result<ClusterSummary> {
    index.check_encoder(encoder)?;
    let stage = index.stage;
    if items.len() < 2 {
        return Ok(ClusterSummary { stage, link_threshold, clusters: items.len(), largest: items.len(), duplicated_items: 0 });
    }
    let emb = StageEmbeddings::from_encoder(encoder, items)?;
    let by_stage: BTreeMap<String, _> = [(stage.name().to_string(), index.standardizer().clone())].into();
    let only = StageEmbeddings { stages: emb.stages.into_iter().filter(|(k, _)| k == stage.name()).collect() };
    let clusters = near_duplicate_clusters(&only.standardized(&by_stage)?, stage.name(), link_threshold, NeighbourBackend::Exact)?;
    Ok(ClusterSummary {
        stage,
        link_threshold,
        clusters: clusters.len(),
        largest: clusters.iter().map(Vec::len).max().unwrap_or(0),
        duplicated_items: clusters.iter().filter(|c| c.len() > 1).map(Vec::len).sum(),
    })
}

/// Quality of one generated set against real data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub source: String,
    pub n: usize,
    pub fid_vs_test: f64,
    /// Fraction of samples the oracle assigns to the requested class.
    pub oracle_agreement: f64,
    pub oracle_macro_f1: f64,
    pub diversity: f64,
}

pub fn generation_metrics(oracle: &Classifier, real: &FeatureSet, samples: &ImageSet, source: &str, batch: usize) -> Result<GenerationMetrics> {
    if samples.len() < 2 {
        return Err(Error::Validation(format!("{source}: metrics need at least two samples, found {}", samples.len())));
    }
    let feats = FeatureSet::extract(oracle, &samples.items, batch)?;
    let (preds, _) = oracle.predict_set(samples)?;
    let labels = samples.labels();
    let agree = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    Ok(GenerationMetrics {
        source: source.to_string(),
        n: samples.len(),
        fid_vs_test: fid(real, &feats)?,
        oracle_agreement: agree,
        oracle_macro_f1: macro_f1(&preds, &labels, oracle.config.n_classes)?,
        diversity: diversity_score(&feats)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: Variant,
    pub oracle_test_accuracy: f64,
    /// Real training split against real test split.
    pub fid_real_train: f64,
    /// Standard-normal noise images against the real test split.
    pub fid_noise: f64,
    pub sources: Vec<GenerationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Provenance,
    pub variants: Vec<VariantMetrics>,
}

/// Weak-label real data against the same labels plus filtered synthetic
/// images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRun {
    pub seed: u64,
    pub baseline_f1: f64,
    pub baseline_delta_f1: f64,
    pub augmented_f1: f64,
    pub augmented_delta_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub provenance: Provenance,
    pub synthetic_source: String,
    pub synthetic_items: usize,
    pub runs: Vec<AugmentationRun>,
    pub baseline_delta_f1_mean: f64,
    pub augmented_delta_f1_mean: f64,
}

/// Weak-label (10 %) real training alone and with `synthetic` appended,
/// evaluated on `test` for each seed. Both arms see the same labelled
/// subset.
pub fn augmentation_comparison(
    real_train: &ImageSet,
    synthetic: &ImageSet,
    test: &ImageSet,
    cfg: &ClassifierConfig,
    seeds: &[u64],
) -> Result<Vec<AugmentationRun>> {
    let labels = test.labels();
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = derive_seed(seed, "augmentation/weak_10pct");
        let spec = RegimeSpec::new(Regime::Weak10pct);
        let eval = |clf: &Classifier| -> Result<crate::downstream::Evaluation> {
            let (p, s) = clf.predict_set(test)?;
            crate::downstream::evaluate(&p, &s, &labels, c.n_classes, seed)
        };
        let base = eval(&train_classifier(real_train, spec, &c, None, None)?)?;
        let aug = eval(&train_classifier(real_train, spec, &c, None, Some(synthetic))?)?;
        runs.push(AugmentationRun {
            seed,
            baseline_f1: base.f1,
            baseline_delta_f1: base.delta_f1,
            augmented_f1: aug.f1,
            augmented_delta_f1: aug.delta_f1,
        });
    }
    Ok(runs)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Skip stages whose stamps match and whose artifacts are intact.
    pub resume: bool,
    /// Fail the named stage deliberately; used to exercise recovery.
    pub inject_failure: Option<PipelineStage>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub executed: Vec<PipelineStage>,
    pub skipped: Vec<PipelineStage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: PipelineStage,
    pub seed: u64,
    pub config_hash: String,
    pub error: String,
}

/// Output layout rooted at the config's `output_root`.
pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn root(&self) -> &Path {
        &self.config.output_root
    }

    pub fn raw_manifest_path(&self) -> PathBuf {
        match &self.config.input_manifest {
            Some(p) => p.clone(),
            None => self.root().join("phantoms/manifest.jsonl"),
        }
    }

    pub fn data_manifest_path(&self, v: Variant) -> PathBuf {
        self.root().join("data").join(v.name()).join("manifest.jsonl")
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.root().join("models").join(format!("{name}.ckpt"))
    }

    pub fn index_path(&self, v: Variant, stage: Stage) -> PathBuf {
        self.root().join("models").join(format!("index_{}_{}.idx", v.name(), stage.name()))
    }

    pub fn samples_dir(&self, source: &str) -> PathBuf {
        self.root().join("samples").join(source)
    }

    pub fn filtered_dir(&self, source: &str) -> PathBuf {
        self.root().join("filtered").join(source)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root().join("reports")
    }

    pub fn stamp_path(&self, stage: PipelineStage) -> PathBuf {
        self.root().join("stamps").join(format!("{}.json", stage.name()))
    }

    pub fn failure_path(&self, stage: PipelineStage) -> PathBuf {
        self.root().join("failures").join(format!("{}.json", stage.name()))
    }

    pub fn read_stamp(&self, stage: PipelineStage) -> Option<StageStamp> {
        let bytes = fs::read(self.stamp_path(stage)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn stamp_intact(&self, stamp: &StageStamp) -> bool {
        stamp.format_version == PIPELINE_FORMAT_VERSION
            && stamp.code_version == CODE_VERSION
            && stamp.artifacts.iter().all(|a| path_hash(&self.root().join(&a.path)).is_ok_and(|h| h == a.sha256))
    }

    fn stage_hash(&self, stage: PipelineStage, upstream: &str) -> String {
        let body = json!({
            "stage": stage.name(),
            "seed": self.config.stage_seed(stage),
            "code_version": CODE_VERSION,
            "section": self.config.section(stage),
            "upstream": upstream,
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&body).expect("json")))
    }

    fn provenance(&self, stage: PipelineStage, config_hash: &str) -> Provenance {
        Provenance {
            stage: stage.name().into(),
            seed: self.config.stage_seed(stage),
            config_hash: config_hash.into(),
            code_version: CODE_VERSION.into(),
        }
    }

    /// Run the selected stages in order.
    pub fn run(&self, opts: &RunOptions) -> Result<RunSummary> {
        check_device()?;
        self.config.check_inputs()?;
        fs::create_dir_all(self.root())?;
        write_json(&self.root().join("effective_config.json"), &self.config)?;
        let mut summary = RunSummary::default();
        let mut upstream = String::new();
        let mut dirty = !opts.resume;
        for stage in PipelineStage::ALL {
            if !self.config.stages.contains(&stage) {
                if let Some(s) = self.read_stamp(stage) {
                    upstream = s.chain_hash();
                }
                continue;
            }
            let hash = self.stage_hash(stage, &upstream);
            if !dirty {
                if let Some(s) = self.read_stamp(stage).filter(|s| s.config_hash == hash && self.stamp_intact(s)) {
                    log::info!("stage {}: up to date, skipping", stage.name());
                    upstream = s.chain_hash();
                    summary.skipped.push(stage);
                    continue;
                }
                dirty = true;
            }
            let _ = fs::remove_file(self.stamp_path(stage));
            log::info!("stage {}: running (seed {})", stage.name(), self.config.stage_seed(stage));
            let result = if opts.inject_failure == Some(stage) {
                Err(Error::Validation(format!("injected failure in stage {}", stage.name())))
            } else {
                self.execute(stage, &hash)
            };
            let artifacts = match result {
                Ok(a) => a,
                Err(e) => {
                    let rec = FailureRecord { stage, seed: self.config.stage_seed(stage), config_hash: hash, error: e.to_string() };
                    write_json(&self.failure_path(stage), &rec)?;
                    log::error!("stage {} failed: {e}", stage.name());
                    return Err(e);
                }
            };
            let mut stamped = Vec::new();
            for (path, deterministic) in artifacts {
                let rel = path.strip_prefix(self.root()).unwrap_or(&path).to_path_buf();
                stamped.push(ArtifactStamp { sha256: path_hash(&path)?, path: rel, deterministic });
            }
            let stamp = StageStamp {
                stage,
                seed: self.config.stage_seed(stage),
                config_hash: hash,
                code_version: CODE_VERSION.into(),
                format_version: PIPELINE_FORMAT_VERSION,
                artifacts: stamped,
            };
            write_json(&self.stamp_path(stage), &stamp)?;
            let _ = fs::remove_file(self.failure_path(stage));
            upstream = stamp.chain_hash();
            summary.executed.push(stage);
        }
        Ok(summary)
    }

    /// Run one stage; returns `(artifact path, deterministic)` pairs.
    fn execute(&self, stage: PipelineStage, hash: &str) -> Result<Vec<(PathBuf, bool)>> {
        match stage {
            PipelineStage::PhantomGen => self.phantom_gen(),
            PipelineStage::Preprocess => self.preprocess(),
            PipelineStage::TrainOracle => self.train_oracles(),
            PipelineStage::TrainAe => self.train_ae(),
            PipelineStage::TrainDdpm => self.train_ddpms(),
            PipelineStage::TrainLdm => self.train_latent(),
            PipelineStage::TrainEncoder => self.train_encoders(),
            PipelineStage::Sample => self.sample(),
            PipelineStage::PrivacyFilter => self.privacy_filter(),
            PipelineStage::Metrics => self.metrics(hash),
            PipelineStage::Classify => self.classify(hash),
            PipelineStage::Report => self.report(hash),
        }
    }

    fn phantom_gen(&self) -> Result<Vec<(PathBuf, bool)>> {
        if let Some(p) = &self.config.input_manifest {
            log::info!("using input manifest {}", p.display());
            return Ok(vec![(p.clone(), true)]);
        }
        let dir = self.root().join("phantoms");
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let cfg = PhantomDatasetConfig { seed: self.config.stage_seed(PipelineStage::PhantomGen), ..self.config.phantoms.clone() };
        cfg.write_raw(&dir)?;
        Ok(vec![(dir, true)])
    }

    fn preprocess(&self) -> Result<Vec<(PathBuf, bool)>> {
        let raw_path = self.raw_manifest_path();
        require(&raw_path, "raw manifest (run phantom_gen first)")?;
        let raw = Manifest::load(&raw_path)?;
        let mut out = Vec::new();
        for &v in &self.config.variants {
            let dir = self.root().join("data").join(v.name());
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            preprocess_manifest(&raw, &v.chain(&self.config.phantoms.chain), &dir)?;
            out.push((dir, true));
        }
        Ok(out)
    }

    fn data(&self, v: Variant, split: Split) -> Result<ImageSet> {
        let p = self.data_manifest_path(v);
        require(&p, "preprocessed manifest (run preprocess first)")?;
        Manifest::load(&p)?.load_split(split)
    }

    fn load_model_checked(&self, name: &str, stage: PipelineStage) -> Result<PathBuf> {
        let p = self.model_path(name);
        require(&p, &format!("{name} checkpoint (run {} first)", stage.name()))?;
        Ok(p)
    }

    fn train_oracles(&self) -> Result<Vec<(PathBuf, bool)>> {
        let seed = self.config.stage_seed(PipelineStage::TrainOracle);
        let mut out = Vec::new();
        for &v in &self.config.variants {
            let train = self.data(v, Split::Train)?;
            let test = self.data(v, Split::Test)?;
            let cfg = ClassifierConfig { seed: derive_seed(seed, v.name()), ..self.config.oracle.clone() };
            let clf = fit_classifier(&train, &cfg, None)?;
            if !test.is_empty() {
                log::info!("oracle {}: test accuracy {:.3}", v.name(), clf.accuracy(&test)?);
            }
            let p = self.model_path(&format!("oracle_{}", v.name()));
            clf.save(&p)?;
            out.push((p, true));
        }
        Ok(out)
    }

    fn train_ae(&self) -> Result<Vec<(PathBuf, bool)>> {
        if !self.config.ldm_enabled || !self.config.has_variant(Variant::Roi) {
            return Ok(Vec::new());
        }
        let train = self.data(Variant::Roi, Split::Train)?;
        let val = self.data(Variant::Roi, Split::Val)?;
        let tc = AeTrainConfig { seed: self.config.stage_seed(PipelineStage::TrainAe), ..self.config.ae_train.clone() };
        let ck = train_autoencoder(&train, &val, &tc, &self.config.autoencoder, None)?;
        log::info!("autoencoder: best val mse {:.5} at epoch {}", ck.best_val_mse, ck.best_epoch);
        let p = self.model_path("autoencoder");
        ck.save(&p)?;
        Ok(vec![(p, true)])
    }

    fn train_ddpms(&self) -> Result<Vec<(PathBuf, bool)>> {
        let seed = self.config.stage_seed(PipelineStage::TrainDdpm);
        let mut out = Vec::new();
        for &v in &self.config.variants {
            let train = self.data(v, Split::Train)?;
            let val = self.data(v, Split::Val)?;
            let tc = TrainConfig { seed: derive_seed(seed, v.name()), ..self.config.ddpm_train.clone() };
            let (oracle, hooks);
            if tc.lambda_perceptual > 0.0 {
                let p = self.load_model_checked(&format!("oracle_{}", v.name()), PipelineStage::TrainOracle)?;
                oracle = Classifier::load(&p)?;
                hooks = TrainHooks { backbone: Some(&oracle), on_epoch: None };
            } else {
                hooks = TrainHooks::default();
            }
            let ck = train_ddpm(&train, &val, &tc, &self.config.denoiser, hooks)?;
            log::info!("ddpm {}: best val loss {:.5} at epoch {}", v.name(), ck.best_val_loss, ck.best_epoch);
            let p = self.model_path(&format!("ddpm_{}", v.name()));
            ck.save(&p)?;
            out.push((p, true));
        }
        Ok(out)
    }

    fn train_latent(&self) -> Result<Vec<(PathBuf, bool)>> {
        if !self.config.ldm_enabled || !self.config.has_variant(Variant::Roi) {
            return Ok(Vec::new());
        }
        let ae = AeCheckpoint::load(&self.load_model_checked("autoencoder", PipelineStage::TrainAe)?)?.autoencoder;
        let train = self.data(Variant::Roi, Split::Train)?;
        let val = self.data(Variant::Roi, Split::Val)?;
        let tc = TrainConfig { seed: self.config.stage_seed(PipelineStage::TrainLdm), ..self.config.ldm_train.clone() };
        let dc = latent_denoiser_config(&ae.config, &self.config.ldm_denoiser);
        let ck = train_ldm(&train, &val, &ae, &tc, &dc, TrainHooks::default())?;
        let p = self.model_path("ldm_roi");
        ck.save(&p)?;
        Ok(vec![(p, true)])
    }

    fn train_encoders(&self) -> Result<Vec<(PathBuf, bool)>> {
        let seed = self.config.stage_seed(PipelineStage::TrainEncoder);
        let mut out = Vec::new();
        for &v in &self.config.variants {
            let train = self.data(v, Split::Train)?;
            let cfg = EncoderConfig { seed: derive_seed(seed, v.name()), ..self.config.encoder.clone() };
            let enc = train_encoder(&train, &cfg)?;
            let p = self.model_path(&format!("encoder_{}", v.name()));
            enc.save(&p)?;
            out.push((p, true));
            for stage in Stage::ALL {
                let idx = EmbeddingIndex::build(&enc, &train, stage)?;
                let ip = self.index_path(v, stage);
                idx.save(&ip)?;
                out.push((ip, true));
            }
        }
        Ok(out)
    }

    fn sample(&self) -> Result<Vec<(PathBuf, bool)>> {
        let seed = self.config.stage_seed(PipelineStage::Sample);
        let plan = sample_plan(self.config.sample.per_class);
        let opts = SampleOptions { guidance_scale: self.config.sample.guidance_scale, batch_size: self.config.sample.batch_size };
        let mut out = Vec::new();
        for src in self.config.sources() {
            let dm = Manifest::load(&{
                let p = self.data_manifest_path(src.variant);
                require(&p, "preprocessed manifest (run preprocess first)")?;
                p
            })?;
            let spacing = dm.records.first().map(|r| r.spacing_mm.clone()).ok_or_else(|| Error::Validation("empty data manifest".into()))?;
            let dir = self.samples_dir(&src.name);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            if src.latent {
                let ck = DdpmCheckpoint::load(&self.load_model_checked(&src.name, PipelineStage::TrainLdm)?)?;
                let ae = AeCheckpoint::load(&self.load_model_checked("autoencoder", PipelineStage::TrainAe)?)?.autoencoder;
                let g = Generator::Latent(&ck, &ae);
                write_samples(&g, &plan, &src.name, seed, &spacing, &opts, self.config.sample.previews_per_class, &dir)?;
            } else {
                let ck = DdpmCheckpoint::load(&self.load_model_checked(&src.name, PipelineStage::TrainDdpm)?)?;
                let g = Generator::Ddpm(&ck);
                write_samples(&g, &plan, &src.name, seed, &spacing, &opts, self.config.sample.previews_per_class, &dir)?;
            }
            log::info!("sampled {} images from {}", plan.iter().map(|p| p.1).sum::<usize>(), src.name);
            out.push((dir, true));
        }
        Ok(out)
    }

    fn load_encoder_index(&self, v: Variant, stage: Stage) -> Result<(ContrastiveEncoder, EmbeddingIndex)> {
        let enc = ContrastiveEncoder::load(&self.load_model_checked(&format!("encoder_{}", v.name()), PipelineStage::TrainEncoder)?)?;
        let ip = self.index_path(v, stage);
        require(&ip, "embedding index (run train_encoder first)")?;
        let idx = EmbeddingIndex::load(&ip, &enc)?;
        Ok((enc, idx))
    }

    fn privacy_filter(&self) -> Result<Vec<(PathBuf, bool)>> {
        let pc = &self.config.privacy;
        let mut out = Vec::new();
        for src in self.config.sources() {
            let sm = self.samples_dir(&src.name).join("manifest.jsonl");
            require(&sm, &format!("{} samples (run sample first)", src.name))?;
            let samples = Manifest::load(&sm)?;
            let (enc, idx) = self.load_encoder_index(src.variant, pc.stage)?;
            let dir = self.filtered_dir(&src.name);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            let report = filter_manifest(&enc, &idx, &samples, pc.tau, &dir)?;
            log::info!("{}: rejected {}/{} at tau {}", src.name, report.rejected_count, report.entries.len(), pc.tau);
            let accepted = Manifest::load(&dir.join("manifest.jsonl"))?.load_split(Split::Train)?;
            let (_, cidx) = self.load_encoder_index(src.variant, pc.cluster_stage)?;
            let clusters = cluster_summary(&enc, &cidx, &accepted.items, pc.link_threshold)?;
            write_json(&dir.join("clusters.json"), &clusters)?;
            out.push((dir, true));
        }
        Ok(out)
    }

    fn filtered(&self, source: &str) -> Result<ImageSet> {
        let p = self.filtered_dir(source).join("manifest.jsonl");
        require(&p, &format!("filtered {source} manifest (run privacy_filter first)"))?;
        Manifest::load(&p)?.load_split(Split::Train)
    }

    fn metrics(&self, hash: &str) -> Result<Vec<(PathBuf, bool)>> {
        let batch = self.config.metrics.batch_size;
        let seed = self.config.stage_seed(PipelineStage::Metrics);
        let mut variants = Vec::new();
        for &v in &self.config.variants {
            let oracle = Classifier::load(&self.load_model_checked(&format!("oracle_{}", v.name()), PipelineStage::TrainOracle)?)?;
            let train = self.data(v, Split::Train)?;
            let test = self.data(v, Split::Test)?;
            let real = FeatureSet::extract(&oracle, &test.items, batch)?;
            let train_f = FeatureSet::extract(&oracle, &train.items, batch)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, v.name()));
            let shape = test.item_shape().ok_or_else(|| Error::Validation("empty test split".into()))?.to_vec();
            let n_el: usize = shape.iter().product();
            let noise: Vec<Tensor<f32>> = (0..test.len())
                .map(|_| Tensor::new(shape.clone(), (0..n_el).map(|_| StandardNormal.sample(&mut rng)).collect()))
                .collect();
            let noise_f = FeatureSet::extract(&oracle, &noise, batch)?;
            let mut sources = Vec::new();
            for src in self.config.sources().into_iter().filter(|s| s.variant == v) {
                sources.push(generation_metrics(&oracle, &real, &self.filtered(&src.name)?, &src.name, batch)?);
            }
            variants.push(VariantMetrics {
                variant: v,
                oracle_test_accuracy: oracle.accuracy(&test)?,
                fid_real_train: fid(&real, &train_f)?,
                fid_noise: fid(&real, &noise_f)?,
                sources,
            });
        }
        let report = MetricsReport { provenance: self.provenance(PipelineStage::Metrics, hash), variants };
        let p = self.reports_dir().join("metrics.json");
        write_json(&p, &report)?;
        Ok(vec![(p, true)])
    }

    fn grid_dataset(&self, name: &str, v: Variant, train: ImageSet) -> Result<GridDataset> {
        Ok(GridDataset { name: name.into(), train, mapping: self.data(v, Split::Mapping)?, test: self.data(v, Split::Test)? })
    }

    fn pretrained(&self, v: Variant, cfg: &ClassifierConfig) -> Result<Classifier> {
        let seed = derive_seed(self.config.stage_seed(PipelineStage::Classify), &format!("pretrain/{}", v.name()));
        let pc = &self.config.classify.pretrain;
        let data = PhantomDatasetConfig { seed, chain: v.chain(&pc.chain), ..pc.clone() };
        let c = ClassifierConfig { seed, ..cfg.clone() };
        fit_classifier(&data.image_set(Split::Train)?, &c, None)
    }

    fn classify(&self, hash: &str) -> Result<Vec<(PathBuf, bool)>> {
        let cc = &self.config.classify;
        let cfg = &cc.classifier;
        let real_variant = if self.config.has_variant(Variant::Full) { Variant::Full } else { Variant::Roi };
        let mut datasets = vec![(self.grid_dataset("real", real_variant, self.data(real_variant, Split::Train)?)?, real_variant)];
        if self.config.has_variant(Variant::Full) {
            datasets.push((self.grid_dataset("synth", Variant::Full, self.filtered("ddpm_full")?)?, Variant::Full));
        }
        if self.config.has_variant(Variant::Roi) {
            datasets.push((self.grid_dataset("synth_roi", Variant::Roi, self.filtered("ddpm_roi")?)?, Variant::Roi));
        }
        let needs_pretrained = cc.regimes.contains(&Regime::PretrainedInit);
        let mut pretrained: BTreeMap<Variant, Classifier> = BTreeMap::new();
        let mut rows = Vec::new();
        for (d, v) in &datasets {
            if needs_pretrained && !pretrained.contains_key(v) {
                pretrained.insert(*v, self.pretrained(*v, cfg)?);
            }
            rows.extend(experiment_grid(std::slice::from_ref(d), &cc.regimes, &cc.seeds, cfg, pretrained.get(v))?);
        }
        let dir = self.reports_dir();
        fs::create_dir_all(&dir)?;
        let csv_path = dir.join("grid.csv");
        write_results_csv(&rows, fs::File::create(&csv_path)?)?;
        let json_path = dir.join("grid.json");
        write_json(&json_path, &json!({"provenance": self.provenance(PipelineStage::Classify, hash), "rows": rows}))?;
        let summary: Vec<CellSummary> = summarize(&rows);
        let sum_path = dir.join("grid_summary.json");
        write_json(&sum_path, &json!({"provenance": self.provenance(PipelineStage::Classify, hash), "cells": summary}))?;
        let mut out = vec![(csv_path, false), (json_path, false), (sum_path, true)];
        if self.config.has_variant(Variant::Roi) {
            let synth = self.filtered("ddpm_roi")?;
            let runs = augmentation_comparison(&self.data(Variant::Roi, Split::Train)?, &synth, &self.data(Variant::Roi, Split::Test)?, cfg, &cc.seeds)?;
            let report = AugmentationReport {
                provenance: self.provenance(PipelineStage::Classify, hash),
                synthetic_source: "ddpm_roi".into(),
                synthetic_items: synth.len(),
                baseline_delta_f1_mean: mean(runs.iter().map(|r| r.baseline_delta_f1)),
                augmented_delta_f1_mean: mean(runs.iter().map(|r| r.augmented_delta_f1)),
                runs,
            };
            let p = dir.join("augmentation.json");
            write_json(&p, &report)?;
            out.push((p, true));
        }
        Ok(out)
    }

    fn report(&self, hash: &str) -> Result<Vec<(PathBuf, bool)>> {
        let dir = self.reports_dir();
        let read = |name: &str| -> Result<Option<Value>> {
            let p = dir.join(name);
            if !p.exists() {
                return Ok(None);
            }
            Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
        };
        let mut filters = BTreeMap::new();
        for src in self.config.sources() {
            let p = self.filtered_dir(&src.name).join("report.json");
            if p.exists() {
                let r: FilterReport = serde_json::from_slice(&fs::read(&p)?)?;
                let clusters: Option<ClusterSummary> = fs::read(self.filtered_dir(&src.name).join("clusters.json"))
                    .ok()
                    .and_then(|b| serde_json::from_slice(&b).ok());
                filters.insert(src.name.clone(), json!({"total": r.entries.len(), "rejected": r.rejected_count, "tau": r.tau, "clusters": clusters}));
            }
        }
        let metrics = read("metrics.json")?;
        let grid = read("grid_summary.json")?;
        let aug = read("augmentation.json")?;
        let report = json!({
            "provenance": self.provenance(PipelineStage::Report, hash),
            "config_hash": self.config.hash(),
            "master_seed": self.config.master_seed,
            "privacy": filters,
            "metrics": metrics.as_ref().map(|m| &m["variants"]),
            "grid": grid.as_ref().map(|g| &g["cells"]),
            "augmentation": aug.as_ref().map(|a| json!({
                "baseline_delta_f1_mean": a["baseline_delta_f1_mean"],
                "augmented_delta_f1_mean": a["augmented_delta_f1_mean"],
            })),
        });
        let jp = dir.join("report.json");
        write_json(&jp, &report)?;
        let mp = dir.join("report.md");
        fs::write(&mp, render_markdown(&report))?;
        Ok(vec![(jp, true), (mp, true)])
    }
}

fn fmt_num(v: &Value) -> String {
    v.as_f64().map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into())
}

fn render_markdown(r: &Value) -> String {
    let mut s = String::from("# Run report\n\n");
    s += &format!(
        "- config hash: `{}`\n- master seed: {}\n- code version: {}\n\n",
        r["config_hash"].as_str().unwrap_or(""),
        r["master_seed"],
        r["provenance"]["code_version"].as_str().unwrap_or("")
    );
    if let Some(p) = r["privacy"].as_object().filter(|p| !p.is_empty()) {
        s += "## Privacy filter\n\n| source | rejected | total | tau |\n|---|---|---|---|\n";
        for (k, v) in p {
            s += &format!("| {k} | {} | {} | {} |\n", v["rejected"], v["total"], v["tau"]);
        }
        s += "\n";
    }
    if let Some(vs) = r["metrics"].as_array() {
        s += "## Generation\n\n| variant | source | n | FID vs test | oracle agreement | diversity |\n|---|---|---|---|---|---|\n";
        for v in vs {
            for src in v["sources"].as_array().into_iter().flatten() {
                s += &format!(
                    "| {} | {} | {} | {} | {} | {} |\n",
                    v["variant"].as_str().unwrap_or(""),
                    src["source"].as_str().unwrap_or(""),
                    src["n"],
                    fmt_num(&src["fid_vs_test"]),
                    fmt_num(&src["oracle_agreement"]),
                    fmt_num(&src["diversity"])
                );
            }
            s += &format!(
                "\nReal-vs-real FID ({}): {}; noise FID: {}; oracle test accuracy: {}\n\n",
                v["variant"].as_str().unwrap_or(""),
                fmt_num(&v["fid_real_train"]),
                fmt_num(&v["fid_noise"]),
                fmt_num(&v["oracle_test_accuracy"])
            );
        }
    }
    if let Some(cells) = r["grid"].as_array() {
        s += "## Classification grid\n\n| dataset | regime | runs | F1 | ΔF1 | AUC |\n|---|---|---|---|---|---|\n";
        for c in cells {
            s += &format!(
                "| {} | {} | {} | {} ± {} | {} ± {} | {} |\n",
                c["dataset"].as_str().unwrap_or(""),
                c["regime"].as_str().unwrap_or(""),
                c["runs"],
                fmt_num(&c["f1_mean"]),
                fmt_num(&c["f1_sd"]),
                fmt_num(&c["delta_f1_mean"]),
                fmt_num(&c["delta_f1_sd"]),
                fmt_num(&c["auc_mean"])
            );
        }
        s += "\n";
    }
    if r["augmentation"].is_object() {
        s += &format!(
            "## Weak labels with synthetic ROI images\n\nΔF1 real only: {}; with synthetic: {}\n",
            fmt_num(&r["augmentation"]["baseline_delta_f1_mean"]),
            fmt_num(&r["augmentation"]["augmented_delta_f1_mean"])
        );
    }
    s
}
