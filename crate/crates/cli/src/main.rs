use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uterodiff::dataset::{Manifest, Split};
use uterodiff::ddpm::{DdpmCheckpoint, SampleOptions};
use uterodiff::latent::AeCheckpoint;
use uterodiff::pipeline::{
    check_device, filter_manifest, sample_plan, write_samples, Generator, Pipeline, PipelineConfig, PipelineStage, RunOptions,
};
use uterodiff::privacy::{ContrastiveEncoder, EmbeddingIndex, Stage, DEFAULT_TAU};
use uterodiff::Error;

#[derive(Parser)]
#[command(name = "uterodiff", version, about = "Synthetic pelvic MRI: generation, privacy filtering and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (JSON); missing fields take their defaults.
    #[arg(long, env = "UTERODIFF_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stages in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip stages whose stamps and artifacts are intact.
        #[arg(long)]
        resume: bool,
        /// Print the merged config and exit.
        #[arg(long)]
        print_effective_config: bool,
        /// Comma-separated subset of stages.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
    /// Render phantoms and masks with a manifest.
    PhantomGen(Common),
    /// Bias correction, normalisation, ROI crop and resampling.
    Preprocess(Common),
    /// Train the classifier used for FID features and oracle agreement.
    TrainOracle(Common),
    TrainAe(Common),
    TrainDdpm(Common),
    TrainLdm(Common),
    /// Train the contrastive encoder and build the training-set indices.
    TrainEncoder(Common),
    /// Build an embedding index for a manifest's training split.
    BuildIndex {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "final")]
        stage: String,
        #[arg(long)]
        index: PathBuf,
        /// Accepted for uniformity; index building draws no randomness.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate samples; standalone with --checkpoint, else the pipeline stage.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "into")]
        checkpoint: Option<PathBuf>,
        /// Autoencoder for latent checkpoints.
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 4.0)]
        guidance: f64,
        /// Destination directory for standalone sampling.
        #[arg(long)]
        into: Option<PathBuf>,
    },
    /// Reject samples too similar to the training set; standalone with
    /// --index, else the pipeline stage.
    PrivacyFilter {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires_all = ["encoder", "input", "report"])]
        index: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Sample manifest to filter.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for the accepted manifest (defaults to the report's).
        #[arg(long)]
        accepted: Option<PathBuf>,
    },
    Metrics(Common),
    /// Dataset × regime × seed classification grid.
    Classify(Common),
    Report(Common),
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(s) => f.write_str(s),
            Self::Core(e) => e.fmt(f),
        }
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_root = o.clone();
    }
    Ok(cfg)
}

fn run_stages(c: &Common, stages: &[PipelineStage]) -> Result<(), CliError> {
    let mut cfg = load_config(c)?;
    cfg.stages = stages.to_vec();
    let s = Pipeline::new(cfg)?.run(&RunOptions::default())?;
    for st in s.executed {
        println!("{}: done", st.name());
    }
    Ok(())
}

fn parse_stage(s: &str) -> Result<Stage, CliError> {
    Ok(Stage::parse(s)?)
}

fn sample_standalone(
    common: &Common,
    checkpoint: &Path,
    autoencoder: Option<&Path>,
    per_class: usize,
    guidance: f64,
    into: &Path,
) -> Result<(), CliError> {
    let ck = DdpmCheckpoint::load(checkpoint)?;
    let ae = match (ck.latent.is_some(), autoencoder) {
        (true, Some(p)) => Some(AeCheckpoint::load(p)?.autoencoder),
        (true, None) => return Err(CliError::Usage("latent checkpoint needs --autoencoder".into())),
        (false, _) => None,
    };
    let g = match &ae {
        Some(ae) => Generator::Latent(&ck, ae),
        None => Generator::Ddpm(&ck),
    };
    let ndim = ck.denoiser.config.spatial_dims;
    let opts = SampleOptions { guidance_scale: guidance, ..Default::default() };
    let seed = common.seed.unwrap_or(0);
    let name = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "samples".into());
    let m = write_samples(&g, &sample_plan(per_class), &name, seed, &vec![1.0; ndim], &opts, 0, into)?;
    println!("wrote {} samples to {}", m.records.len(), into.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    check_device()?;
    match cli.command {
        Command::Run { common, resume, print_effective_config, stages } => {
            let mut cfg = load_config(&common)?;
            if !stages.is_empty() {
                cfg.stages = stages.iter().map(|s| PipelineStage::parse(s)).collect::<Result<_, _>>()?;
            }
            if print_effective_config {
                cfg.validate()?;
                println!("{}", serde_json::to_string_pretty(&cfg).map_err(Error::from)?);
                return Ok(());
            }
            let s = Pipeline::new(cfg)?.run(&RunOptions { resume, inject_failure: None })?;
            for st in &s.skipped {
                println!("{}: up to date", st.name());
            }
            for st in &s.executed {
                println!("{}: done", st.name());
            }
            Ok(())
        }
        Command::PhantomGen(c) => run_stages(&c, &[PipelineStage::PhantomGen]),
        Command::Preprocess(c) => run_stages(&c, &[PipelineStage::Preprocess]),
        Command::TrainOracle(c) => run_stages(&c, &[PipelineStage::TrainOracle]),
        Command::TrainAe(c) => run_stages(&c, &[PipelineStage::TrainAe]),
        Command::TrainDdpm(c) => run_stages(&c, &[PipelineStage::TrainDdpm]),
        Command::TrainLdm(c) => run_stages(&c, &[PipelineStage::TrainLdm]),
        Command::TrainEncoder(c) => run_stages(&c, &[PipelineStage::TrainEncoder]),
        Command::Metrics(c) => run_stages(&c, &[PipelineStage::Metrics]),
        Command::Classify(c) => run_stages(&c, &[PipelineStage::Classify]),
        Command::Report(c) => run_stages(&c, &[PipelineStage::Report]),
        Command::BuildIndex { encoder, manifest, stage, index, seed: _ } => {
            let enc = ContrastiveEncoder::load(&encoder)?;
            let set = Manifest::load(&manifest)?.load_split(Split::Train)?;
            let idx = EmbeddingIndex::build(&enc, &set, parse_stage(&stage)?)?;
            idx.save(&index)?;
            println!("indexed {} images at stage {stage} into {}", idx.len(), index.display());
            Ok(())
        }
        Command::Sample { common, checkpoint, autoencoder, per_class, guidance, into } => match checkpoint {
            Some(ck) => {
                let into = into.expect("clap enforces --into");
                sample_standalone(&common, &ck, autoencoder.as_deref(), per_class, guidance, &into)
            }
            None => run_stages(&common, &[PipelineStage::Sample]),
        },
        Command::PrivacyFilter { common, index, encoder, input, tau, report, accepted } => match index {
            Some(index) => {
                let (encoder, input, report) = (encoder.expect("clap"), input.expect("clap"), report.expect("clap"));
                let enc = ContrastiveEncoder::load(&encoder)?;
                let idx = EmbeddingIndex::load(&index, &enc)?;
                let samples = Manifest::load(&input)?;
                let dir = accepted.unwrap_or_else(|| report.parent().map(Path::to_path_buf).unwrap_or_default());
                let r = filter_manifest(&enc, &idx, &samples, tau, &dir)?;
                let written = dir.join("report.json");
                if written != report {
                    std::fs::copy(&written, &report).map_err(Error::from)?;
                }
                println!("rejected {}/{} samples at tau {tau}", r.rejected_count, r.entries.len());
                Ok(())
            }
            None => run_stages(&common, &[PipelineStage::PrivacyFilter]),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) | CliError::Core(Error::Config(_) | Error::Validation(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
