//! The experiment commands. Each one is a pure function of the configuration,
//! the checkpoint and the seed, so re-running reproduces every file byte for
//! byte.

use std::fs;
use std::path::{Path, PathBuf};

use mnp_core::checkpoint;
use mnp_core::config::{DatasetSpec, ExperimentConfig};
use mnp_core::data::{inject_noise, mesh_grid, noise_levels, noise_subsets, Bounds, MultimodalBatch, NoiseSpec};
use mnp_core::encoding::Aggregation;
use mnp_core::memory::UpdateKind;
use mnp_core::metrics::{accuracy, auroc, ece, uncertainty, UncertaintyKind, ECE_BINS};
use mnp_core::model::{stream_rng, Mnp, Trainer, PROB_CLAMP};
use mnp_core::tensor::Tensor;
use mnp_core::MnpError;
use serde::Serialize;

use crate::args::{Axis, ConfigArgs, ARTIFACT_ROOT_ENV};
use crate::dataset::{self, Splits};
use crate::error::{CliError, Result};
use crate::svg;

const STREAM_EVAL: u64 = 101;
const STREAM_NOISE: u64 = 102;
const STREAM_GRID: u64 = 103;
const STREAM_OOD: u64 = 104;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const NOISE_FILE: &str = "noise_sweep.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const GRID_SVG_FILE: &str = "grid.svg";
pub const PROBE_FILE: &str = "attention_probe.csv";
pub const REPORT_FILE: &str = "report.json";

/// Distance beyond the data bounding box of the default far-field probes.
pub const FAR_PROBE_OFFSET: f64 = 5.0;

/// `$MNP_ARTIFACT_ROOT`, or `runs` when unset.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Absolute paths are kept; relative ones are placed under the artifact root.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        artifact_root().join(path)
    }
}

pub fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut c = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| MnpError::Ingestion(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    args.overrides.apply(&mut c);
    Ok(c)
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Per-epoch means of the step losses plus test metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub nll: f64,
    pub contrastive: f64,
    pub rbf: f64,
    pub total: f64,
    pub test_accuracy: f64,
    pub test_ece: f64,
}

pub const METRICS_HEADER: [&str; 7] = ["epoch", "nll", "contrastive", "rbf", "total", "test_accuracy", "test_ece"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub unimodal_accuracy: Vec<f64>,
    pub n_test: usize,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochRow>,
    pub eval: EvalSummary,
    pub model: Mnp,
    pub splits: Splits,
}

pub fn evaluate(model: &Mnp, test: &MultimodalBatch, seed: u64) -> Result<EvalSummary> {
    let pred = model.predict(test.features(), &mut stream_rng(seed, STREAM_EVAL))?;
    let truth = test.one_hot();
    let n = test.len().max(1) as f64;
    let nll = test
        .labels()
        .iter()
        .enumerate()
        .fold(0.0, |acc, (i, &y)| acc - pred.unified.get(i, y).max(PROB_CLAMP).ln())
        / n;
    Ok(EvalSummary {
        accuracy: accuracy(&pred.unified, &truth)?,
        ece: ece(&pred.unified, &truth, ECE_BINS)?,
        nll,
        unimodal_accuracy: pred.unimodal.iter().map(|p| accuracy(p, &truth)).collect::<mnp_core::Result<_>>()?,
        n_test: test.len(),
    })
}

/// Trains `config` into `dir`, writing the config echo, per-epoch metrics and
/// the final checkpoint.
pub fn train_run(config: &ExperimentConfig, dir: &Path) -> Result<TrainSummary> {
    let splits = dataset::build(&config.dataset, config.seed)?;
    config.validate(splits.train.num_classes())?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_json() + "\n")?;
    let mut model = Mnp::new(&config.model, &splits.train, config.seed)?;
    let mut trainer = Trainer::new(&model, config.train.learning_rate, config.seed);
    let mut w = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    w.write_record(METRICS_HEADER)?;
    let mut rows = Vec::with_capacity(config.train.epochs);
    let mut eval = evaluate(&model, &splits.test, config.seed)?;
    for epoch in 1..=config.train.epochs {
        let reports = trainer.epoch(&mut model, &splits.train, config.train.batch_size)?;
        let k = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&mnp_core::model::LossReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        eval = evaluate(&model, &splits.test, config.seed)?;
        let row = EpochRow {
            epoch,
            nll: mean(&|r| r.nll),
            contrastive: mean(&|r| r.contrastive.iter().sum::<f64>() / r.contrastive.len().max(1) as f64),
            rbf: mean(&|r| r.rbf),
            total: mean(&|r| r.total),
            test_accuracy: eval.accuracy,
            test_ece: eval.ece,
        };
        w.write_record([
            row.epoch.to_string(),
            num(row.nll),
            num(row.contrastive),
            num(row.rbf),
            num(row.total),
            num(row.test_accuracy),
            num(row.test_ece),
        ])?;
        rows.push(row);
    }
    w.flush()?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), config, &model)?;
    Ok(TrainSummary {
        dir: dir.to_path_buf(),
        config: config.clone(),
        epochs: rows,
        eval,
        model,
        splits,
    })
}

/// A trained run loaded back from its directory, with its data regenerated.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub model: Mnp,
    pub splits: Splits,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let (config, model) = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let splits = dataset::build(&config.dataset, config.seed)?;
    if splits.train.dims() != model.input_dims() {
        return Err(MnpError::Ingestion("dataset dimensions no longer match the checkpoint".into()).into());
    }
    Ok(LoadedRun { config, model, splits })
}

pub fn eval_run(run: &LoadedRun, dir: &Path) -> Result<EvalSummary> {
    let summary = evaluate(&run.model, &run.splits.test, run.config.seed)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    fs::write(dir.join(EVAL_FILE), json + "\n")?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub level: usize,
    pub std: f64,
    pub accuracy: f64,
    pub combinations: usize,
}

/// Test accuracy at each noise level, averaged over every choice of
/// `ceil(M/2)` noisy modalities.
pub fn noise_sweep(model: &Mnp, test: &MultimodalBatch, seed: u64) -> Result<Vec<NoiseRow>> {
    let m = test.num_modalities();
    if m < 2 {
        return Err(MnpError::Protocol(format!("the noise sweep needs at least 2 modalities, found {m}")).into());
    }
    let subsets = noise_subsets(m);
    let truth = test.one_hot();
    let mut rng = stream_rng(seed, STREAM_NOISE);
    let mut rows = Vec::new();
    for (level, &std) in noise_levels().iter().enumerate() {
        let mut total = 0.0;
        for (c, subset) in subsets.iter().enumerate() {
            let spec = NoiseSpec {
                level,
                modalities: subset.clone(),
            };
            let noise_seed = seed ^ (((level as u64) << 32) | c as u64);
            let noisy = inject_noise(test, &spec, noise_seed)?;
            let pred = model.predict(noisy.features(), &mut rng)?;
            total += accuracy(&pred.unified, &truth)?;
        }
        rows.push(NoiseRow {
            level,
            std,
            accuracy: total / subsets.len() as f64,
            combinations: subsets.len(),
        });
    }
    Ok(rows)
}

pub fn write_noise_sweep(rows: &[NoiseRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["level", "std", "accuracy", "combinations"])?;
    for r in rows {
        w.write_record([r.level.to_string(), num(r.std), num(r.accuracy), r.combinations.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn mean_accuracy(rows: &[NoiseRow]) -> f64 {
    rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct GridOutput {
    pub bounds: Bounds,
    pub points: Tensor,
    pub p_class1: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub probes: Vec<(f64, f64)>,
    /// One attention row per probe over the memory slots.
    pub attention: Tensor,
    /// Max-class unified probability per probe.
    pub probe_confidence: Vec<f64>,
}

/// Eight probes `offset` beyond the data bounding box: one past each edge
/// midpoint and one past each corner.
pub fn far_probes(train: &MultimodalBatch, offset: f64) -> Vec<(f64, f64)> {
    let b = Bounds::of_points(&train.features()[0], 0.0);
    let (cx, cy) = ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0);
    let xs = [b.x_min - offset, cx, b.x_max + offset];
    let ys = [b.y_min - offset, cy, b.y_max + offset];
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .filter(|&(x, y)| x != cx || y != cy)
        .collect()
}

/// The default probes: the first training point followed by
/// [`far_probes`] at [`FAR_PROBE_OFFSET`].
pub fn default_probes(train: &MultimodalBatch) -> Vec<(f64, f64)> {
    let x = &train.features()[0];
    let mut probes = vec![(x.get(0, 0), x.get(0, 1))];
    probes.extend(far_probes(train, FAR_PROBE_OFFSET));
    probes
}

pub fn grid(run: &LoadedRun, nx: usize, ny: usize, probes: &[(f64, f64)]) -> Result<GridOutput> {
    if !dataset::is_planar(&run.config.dataset) || run.model.input_dims() != [2] {
        return Err(MnpError::Protocol("the grid needs a single 2-D input modality".into()).into());
    }
    if nx < 2 || ny < 2 {
        return Err(CliError::Usage("the grid needs at least 2 points per axis".into()));
    }
    let bounds = Bounds::of_points(&run.splits.train.features()[0], 1.0);
    let points = mesh_grid(nx, ny, bounds)?;
    let mut rng = stream_rng(run.config.seed, STREAM_GRID);
    let pred = run.model.predict(std::slice::from_ref(&points), &mut rng)?;
    let p_class1 = (0..points.rows()).map(|i| pred.unified.get(i, 1.min(pred.unified.cols() - 1))).collect();
    let unc = uncertainty(&pred.unified, &pred.unified_draws, UncertaintyKind::Entropy)?;
    let probes = if probes.is_empty() {
        default_probes(&run.splits.train)
    } else {
        probes.to_vec()
    };
    let probe_t = Tensor::from_rows(&probes.iter().map(|&(x, y)| vec![x, y]).collect::<Vec<_>>()).map_err(MnpError::from)?;
    let attention = run.model.attention_probe(0, &probe_t)?;
    let probe_pred = run.model.predict(&[probe_t], &mut rng)?;
    let probe_confidence = (0..probes.len())
        .map(|i| probe_pred.unified.row_slice(i).iter().copied().fold(0.0, f64::max))
        .collect();
    Ok(GridOutput {
        bounds,
        points,
        p_class1,
        uncertainty: unc,
        probes,
        attention,
        probe_confidence,
    })
}

pub fn write_grid(out: &GridOutput, run: &LoadedRun, dir: &Path, nx: usize, ny: usize, with_svg: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(GRID_FILE))?;
    w.write_record(["x", "y", "p_class1", "uncertainty"])?;
    for i in 0..out.points.rows() {
        w.write_record([
            num(out.points.get(i, 0)),
            num(out.points.get(i, 1)),
            num(out.p_class1[i]),
            num(out.uncertainty[i]),
        ])?;
    }
    w.flush()?;
    let slots = out.attention.cols();
    let mut w = csv::Writer::from_path(dir.join(PROBE_FILE))?;
    let mut header = vec!["probe".to_string(), "x".into(), "y".into(), "max_probability".into()];
    header.extend((0..slots).map(|j| format!("w_{j}")));
    w.write_record(&header)?;
    for (i, &(x, y)) in out.probes.iter().enumerate() {
        let mut rec = vec![i.to_string(), num(x), num(y), num(out.probe_confidence[i])];
        rec.extend(out.attention.row_slice(i).iter().map(|&v| num(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    if with_svg {
        let memory = run.model.memory();
        let classes = memory.row_classes();
        let mem = memory.features(0);
        let pts: Vec<(f64, f64, usize)> = (0..mem.rows()).map(|i| (mem.get(i, 0), mem.get(i, 1), classes[i])).collect();
        let b = out.bounds;
        let doc = svg::heatmap(nx, ny, (b.x_min, b.x_max), (b.y_min, b.y_max), &out.p_class1, &pts);
        fs::write(dir.join(GRID_SVG_FILE), doc)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OodReport {
    pub auroc_entropy: f64,
    /// Absent for aggregations that draw no Monte Carlo samples.
    pub auroc_mc_variance: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn ood(run: &LoadedRun, shift: f64, files: &[String]) -> Result<OodReport> {
    let test = &run.splits.test;
    let ood = dataset::ood_features(&run.config.dataset, run.config.seed, test, shift, files)?;
    for (m, (a, b)) in ood.iter().zip(test.features()).enumerate() {
        if a.cols() != b.cols() {
            return Err(MnpError::Ingestion(format!("OOD modality {m} has {} columns, expected {}", a.cols(), b.cols())).into());
        }
    }
    let mut rng = stream_rng(run.config.seed, STREAM_OOD);
    let id_pred = run.model.predict(test.features(), &mut rng)?;
    let ood_pred = run.model.predict(&ood, &mut rng)?;
    let score = |kind| -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            uncertainty(&id_pred.unified, &id_pred.unified_draws, kind)?,
            uncertainty(&ood_pred.unified, &ood_pred.unified_draws, kind)?,
        ))
    };
    let (id_h, ood_h) = score(UncertaintyKind::Entropy)?;
    let auroc_mc_variance = if id_pred.unified_draws.len() >= 2 {
        let (id_v, ood_v) = score(UncertaintyKind::McVariance)?;
        Some(auroc(&id_v, &ood_v)?)
    } else {
        None
    };
    Ok(OodReport {
        auroc_entropy: auroc(&id_h, &ood_h)?,
        auroc_mc_variance,
        n_id: test.len(),
        n_ood: ood[0].rows(),
    })
}

pub fn write_report(report: &OodReport, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    fs::write(dir.join(REPORT_FILE), json + "\n")?;
    Ok(())
}

/// Variant name and configuration for every arm of an ablation axis.
pub fn ablation_variants(axis: Axis, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Memory => [UpdateKind::Random, UpdateKind::Fifo, UpdateKind::Ce, UpdateKind::Mse]
            .into_iter()
            .map(|k| (serde_name(&k), with(&|c| c.model.memory.kind = k)))
            .collect(),
        Axis::Aggregation => [Aggregation::Mba, Aggregation::Mean, Aggregation::Concat]
            .into_iter()
            .map(|a| (serde_name(&a), with(&|c| c.model.aggregation = a)))
            .collect(),
        Axis::Attention => mnp_core::attention::AttentionConfig::grid()
            .into_iter()
            .map(|a| {
                let name = format!("{}+{}", serde_name(&a.similarity), serde_name(&a.normalisation));
                (name, with(&|c| c.model.attention = a))
            })
            .collect(),
        Axis::RbfLoss => [true, false]
            .into_iter()
            .map(|on| (if on { "with" } else { "without" }.to_string(), with(&|c| c.model.rbf_loss = on)))
            .collect(),
    }
}

fn serde_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("enum serialises") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub base_config_hash: String,
    pub config_hash: String,
    pub accuracy: f64,
    pub ece: f64,
    /// Mean accuracy over the noise sweep; only for multimodal data.
    pub noise_mean_accuracy: Option<f64>,
    /// Entropy AUROC against the shifted test set; only for synthetic data.
    pub auroc_entropy: Option<f64>,
}

pub fn ablate(axis: Axis, base: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let base_hash = base.hash();
    let mut rows = Vec::new();
    for (variant, cfg) in ablation_variants(axis, base) {
        let dir = out.join(variant.replace('+', "-"));
        let summary = train_run(&cfg, &dir)?;
        let run = LoadedRun {
            config: summary.config.clone(),
            model: summary.model,
            splits: summary.splits,
        };
        let noise_mean_accuracy = if run.splits.test.num_modalities() >= 2 {
            let sweep = noise_sweep(&run.model, &run.splits.test, cfg.seed)?;
            write_noise_sweep(&sweep, &dir.join(NOISE_FILE))?;
            Some(mean_accuracy(&sweep))
        } else {
            None
        };
        let auroc_entropy = if matches!(cfg.dataset, DatasetSpec::FeatureFiles { .. }) {
            None
        } else {
            let report = ood(&run, 10.0, &[])?;
            write_report(&report, &dir)?;
            Some(report.auroc_entropy)
        };
        rows.push(AblationRow {
            axis: axis.name().to_string(),
            variant,
            base_config_hash: base_hash.clone(),
            config_hash: cfg.hash(),
            accuracy: summary.eval.accuracy,
            ece: summary.eval.ece,
            noise_mean_accuracy,
            auroc_entropy,
        });
    }
    let mut w = csv::Writer::from_path(out.join(format!("ablation_{}.csv", axis.name())))?;
    w.write_record([
        "axis",
        "variant",
        "base_config_hash",
        "config_hash",
        "accuracy",
        "ece",
        "noise_mean_accuracy",
        "auroc_entropy",
    ])?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.axis.clone(),
            r.variant.clone(),
            r.base_config_hash.clone(),
            r.config_hash.clone(),
            num(r.accuracy),
            num(r.ece),
            opt(r.noise_mean_accuracy),
            opt(r.auroc_entropy),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
