//! Command-line surface. Flags mirror the configuration fields and override
//! values read from `--config`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mnp_core::attention::{DistanceScaling, Normalisation, Similarity};
use mnp_core::config::{default_extractor, DatasetSpec, ExperimentConfig};
use mnp_core::encoding::Aggregation;
use mnp_core::memory::{UpdateKind, UpdateScope};
use serde::de::DeserializeOwned;

/// Environment variable naming the directory that relative run paths are
/// resolved against.
pub const ARTIFACT_ROOT_ENV: &str = "MNP_ARTIFACT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "mnp", version, about = "Multimodal neural processes: training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write config.json, checkpoint.bin and metrics.csv.
    Train(TrainArgs),
    /// Test-set accuracy, ECE and NLL of a trained run (eval.json).
    Eval(RunArgs),
    /// Accuracy under Gaussian noise on half of the modalities (noise_sweep.csv).
    NoiseSweep(RunArgs),
    /// Predictive probability over a 2-D grid and attention at probe points.
    Grid(GridArgs),
    /// AUROC of in- versus out-of-distribution uncertainty (report.json).
    Ood(OodArgs),
    /// Train one run per variant of an ablation axis (ablation_<axis>.csv).
    Ablate(AblateArgs),
}

/// Parses an enum through its serde names, accepting `-` for `_`.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Moons,
    Views,
}

#[derive(Debug, Args, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic dataset kind; feature files are configured in the JSON file.
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Number of views for the views dataset.
    #[arg(long)]
    pub modalities: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Standard deviation of the moons generator noise.
    #[arg(long)]
    pub data_noise: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Memory slots per modality.
    #[arg(long)]
    pub context_size: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// rbf | dot
    #[arg(long, value_parser = serde_enum::<Similarity>)]
    pub similarity: Option<Similarity>,
    /// sparsemax | softmax
    #[arg(long, value_parser = serde_enum::<Normalisation>)]
    pub normalisation: Option<Normalisation>,
    /// lengthscale-squared | lengthscale
    #[arg(long, value_parser = serde_enum::<DistanceScaling>)]
    pub scaling: Option<DistanceScaling>,
    /// mse | ce | fifo | random | frozen
    #[arg(long, value_parser = serde_enum::<UpdateKind>)]
    pub memory: Option<UpdateKind>,
    /// class-consistent | literal
    #[arg(long, value_parser = serde_enum::<UpdateScope>)]
    pub memory_scope: Option<UpdateScope>,
    /// mba | mean | concat
    #[arg(long, value_parser = serde_enum::<Aggregation>)]
    pub aggregation: Option<Aggregation>,
    /// Drop the contrastive term; the RBF loss keeps only the lengthscale penalty.
    #[arg(long)]
    pub no_rbf_loss: bool,
    #[arg(long)]
    pub freeze_lengthscale: bool,
    #[arg(long)]
    pub lengthscale_init: Option<f64>,
    /// Feed raw inputs to attention and encoders.
    #[arg(long)]
    pub no_extractor: bool,
}

impl Overrides {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(kind) = self.dataset {
            let (n_train, n_test, noise) = match &c.dataset {
                DatasetSpec::Moons { n_train, n_test, noise } | DatasetSpec::Views { n_train, n_test, noise, .. } => {
                    (*n_train, *n_test, *noise)
                }
                DatasetSpec::FeatureFiles { .. } => (1000, 200, 0.15),
            };
            c.dataset = match kind {
                DatasetKind::Moons => DatasetSpec::Moons { n_train, n_test, noise },
                DatasetKind::Views => DatasetSpec::Views {
                    modalities: 2,
                    n_train,
                    n_test,
                    noise,
                },
            };
            c.model.extractor = default_extractor(&c.dataset);
        }
        match &mut c.dataset {
            DatasetSpec::Moons { n_train, n_test, noise } => {
                set(n_train, self.n_train);
                set(n_test, self.n_test);
                set(noise, self.data_noise);
            }
            DatasetSpec::Views {
                modalities,
                n_train,
                n_test,
                noise,
            } => {
                set(modalities, self.modalities);
                set(n_train, self.n_train);
                set(n_test, self.n_test);
                set(noise, self.data_noise);
            }
            DatasetSpec::FeatureFiles { .. } => {}
        }
        let t = &mut c.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.learning_rate);
        let m = &mut c.model;
        set(&mut m.context_size, self.context_size);
        set(&mut m.latent_dim, self.latent_dim);
        set(&mut m.mc_samples, self.mc_samples);
        set(&mut m.alpha, self.alpha);
        set(&mut m.beta, self.beta);
        set(&mut m.tau, self.tau);
        set(&mut m.attention.similarity, self.similarity);
        set(&mut m.attention.normalisation, self.normalisation);
        set(&mut m.attention.scaling, self.scaling);
        set(&mut m.memory.kind, self.memory);
        set(&mut m.memory.scope, self.memory_scope);
        set(&mut m.aggregation, self.aggregation);
        set(&mut m.lengthscale_init, self.lengthscale_init);
        if self.no_rbf_loss {
            m.rbf_loss = false;
        }
        if self.freeze_lengthscale {
            m.learn_lengthscale = false;
        }
        if self.no_extractor {
            m.extractor = None;
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory; relative paths resolve against the artifact root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory of a trained run.
    #[arg(long)]
    pub run: PathBuf,
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y but got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(x)?, p(y)?))
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub nx: usize,
    #[arg(long, default_value_t = 100)]
    pub ny: usize,
    /// Probe point `x,y` for the attention dump; repeatable. Defaults to a
    /// training point and eight points 5 units beyond the data bounding box.
    #[arg(long = "probe", value_parser = parse_point, allow_hyphen_values = true)]
    pub probes: Vec<(f64, f64)>,
    /// Also write grid.svg.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Translation applied to every coordinate of the synthetic test set.
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub shift: f64,
    /// Headerless CSV per modality holding OOD inputs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ood_features: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Memory,
    Aggregation,
    Attention,
    RbfLoss,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Memory => "memory",
            Axis::Aggregation => "aggregation",
            Axis::Attention => "attention",
            Axis::RbfLoss => "rbf-loss",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
