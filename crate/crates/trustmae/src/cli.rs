//! Command-line entry point: dataset generation, training, evaluation,
//! scoring, noise sweeps, memory diagnostics and the gradient-check suite.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{distance_name, parse_distance, ConfigError, RunConfig};
use crate::data::{self, DataError};
use crate::eval::{self, EvalError, Variant};
use crate::gradsuite;
use crate::model::{self, ModelError};
use crate::perceptual::{self, ExtractorKind, FeaturePyramidExtractor, PerceptualError};
use crate::training::{self, CheckpointError, TrainError};

/// Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ErrorClass {
    Usage = 1,
    Io = 2,
    Numerical = 3,
}

#[derive(Debug)]
struct CliError {
    class: ErrorClass,
    message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self { class: ErrorClass::Usage, message: msg.into() }
    }

    fn io(msg: impl Into<String>) -> Self {
        Self { class: ErrorClass::Io, message: msg.into() }
    }

    fn numerical(msg: impl Into<String>) -> Self {
        Self { class: ErrorClass::Numerical, message: msg.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::File { .. } => Self::io(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => Self::usage(e.to_string()),
            DataError::Substrate(ref s) => classify_substrate(s, &e.to_string()),
            _ => Self::io(e.to_string()),
        }
    }
}

fn classify_substrate(e: &crate::substrate::SubstrateError, msg: &str) -> CliError {
    match e {
        crate::substrate::SubstrateError::NonFinite { .. } => CliError::numerical(msg.to_string()),
        _ => CliError::usage(msg.to_string()),
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InputRange(_) => Self::numerical(e.to_string()),
            ModelError::Substrate(ref s) => classify_substrate(s, &e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => {
                Self::numerical(e.to_string())
            }
            TrainError::Checkpoint(c) => c.into(),
            TrainError::InvalidConfig(_) | TrainError::EmptyDataset => Self::usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => Self::numerical(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::io(e.to_string())
    }
}

impl From<PerceptualError> for CliError {
    fn from(e: PerceptualError) -> Self {
        match e {
            PerceptualError::Io { .. } => Self::io(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => Self::io(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Data(d) => d.into(),
            EvalError::Perceptual(p) => p.into(),
            _ => Self::usage(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "trustmae",
    about = "Noise-resilient defect detection with a memory-augmented auto-encoder",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set model.latent_dim=128 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed (overrides config file and TRUSTMAE_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for evaluation; 1 is the deterministic mode.
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_env_seed();
        cfg.apply_overrides(&self.sets)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads.max(1);
        }
        cfg.resolve()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic defect dataset in MVTec folder layout.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset root directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root (MVTec layout).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, loss log and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Disable top-k sparse addressing (ablation).
        #[arg(long)]
        no_sparse_addressing: bool,
        /// Disable trust-region memory updates (ablation).
        #[arg(long)]
        no_trust_region: bool,
        /// Bypass the memory module entirely (plain auto-encoder ablation).
        #[arg(long)]
        no_memory: bool,
    },
    /// Evaluate a checkpoint over a dataset's test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        report: PathBuf,
        /// Error map: mse, pd, mse-pd or ssim.
        #[arg(long)]
        distance: Option<String>,
        /// Write per-image heatmap PNGs under this directory.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Score a single image and write its heatmap.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        distance: Option<String>,
        /// Heatmap output path (defaults next to the image).
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Train + evaluate the ablation variants across noise levels.
    NoiseSweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated noise fractions, e.g. 0.05,0.1,0.3.
        #[arg(long)]
        levels: String,
        /// Comma-separated variants: full,wo-tr,wo-sp,wo-pd,plain-ae.
        #[arg(long, default_value = "full,wo-tr,wo-sp,wo-pd,plain-ae")]
        variants: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Memory access statistics of a checkpoint over a dataset.
    MemoryStats {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Statistics CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        /// Comma-separated seeds (default 1,2,3).
        #[arg(long)]
        seeds: Option<String>,
    },
}

/// Parse and run; returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful outputs, not usage errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("error: usage: {}", first_line(&e.to_string()));
            eprint!("{}", e.render());
            return ErrorClass::Usage as i32;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", class_name(e.class), first_line(&e.message));
            e.class as i32
        }
    }
}

fn class_name(c: ErrorClass) -> &'static str {
    match c {
        ErrorClass::Usage => "usage",
        ErrorClass::Io => "io",
        ErrorClass::Numerical => "numerical",
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").to_string()
}

fn build_extractor_for(
    cfg: &RunConfig,
    model: &model::TrustMAEModel,
) -> Result<FeaturePyramidExtractor, CliError> {
    match cfg.eval.extractor_kind {
        ExtractorKind::RandomConvPyramid => Ok(perceptual::build_extractor(
            ExtractorKind::RandomConvPyramid,
            cfg.eval.extractor_seed,
            cfg.eval.extractor_depth,
            model.config.channels,
        )?),
        ExtractorKind::TrainedEncoder => {
            Ok(FeaturePyramidExtractor::from_trained_encoder(model.clone()))
        }
    }
}

fn configure_rayon(threads: usize) {
    if threads > 1 {
        // Ignore the error if a pool already exists (e.g. repeated dispatch
        // in tests); the pool size is best-effort.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenerateData { config, out } => {
            let cfg = config.load()?;
            let (train, test) = data::generate_dataset(&cfg.data)?;
            data::write_dataset(&out, &cfg.category, &train, &test)?;
            cfg.write_resolved(&out)?;
            println!(
                "wrote {} train / {} test samples to {}",
                train.len(),
                test.len(),
                out.join(&cfg.category).display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data: data_dir,
            out,
            no_sparse_addressing,
            no_trust_region,
            no_memory,
        } => {
            let mut cfg = config.load()?;
            if no_sparse_addressing {
                cfg.train.sparse_addressing = false;
            }
            if no_trust_region {
                cfg.train.trust_region = false;
            }
            if no_memory {
                cfg.train.memory_enabled = false;
            }
            let (train_set, _) = data::load_folder_dataset(
                &data_dir,
                &cfg.category,
                cfg.model.channels,
                cfg.model.input_size,
            )?;
            let mut model = model::build(&cfg.model, cfg.model_seed())?;
            let report = training::train(&mut model, &train_set, &cfg.train, &cfg.loss, Some(&out))?;
            training::write_loss_log(&report.log, &out.join("loss_log.csv"))
                .map_err(|e| CliError::io(format!("loss log: {e}")))?;
            cfg.write_resolved(&out)?;
            println!(
                "trained {} epochs over {} samples; effective delta2 {:.4}; checkpoint {}",
                report.epochs_run,
                train_set.len(),
                report.effective_delta2,
                out.join("model.ckpt").display()
            );
            Ok(())
        }
        Command::Eval {
            config,
            ckpt,
            data: data_dir,
            report,
            distance,
            heatmaps,
        } => {
            let mut cfg = config.load()?;
            if let Some(d) = &distance {
                cfg.eval.distance =
                    parse_distance(d).ok_or_else(|| CliError::usage(format!("unknown distance '{d}'")))?;
            }
            configure_rayon(cfg.threads);
            let (loaded, _state) = training::load_checkpoint(&ckpt)?;
            let (_, test_set) = data::load_folder_dataset(
                &data_dir,
                &cfg.category,
                loaded.config.channels,
                loaded.config.input_size,
            )?;
            let extractor = build_extractor_for(&cfg, &loaded)?;
            let result = eval::evaluate(
                &loaded,
                &test_set,
                cfg.eval.distance,
                &extractor,
                &cfg.loss,
                cfg.threads,
            )?;
            eval::write_report_csv(&result, &report)?;
            if let Some(dir) = heatmaps {
                let mut bounds = Vec::new();
                for sample in &test_set {
                    let map = eval::error_map_for(&loaded, sample, cfg.eval.distance, &extractor, &cfg.loss)?;
                    let path = dir.join(&sample.source_id);
                    let (lo, hi) = perceptual::write_error_map_png(&map, &path)?;
                    bounds.push((sample.source_id.clone(), lo, hi));
                }
                write_bounds_csv(&dir.join("bounds.csv"), &bounds)?;
            }
            println!(
                "image_auc_max {:.4} image_auc_mean {:.4} pixel_auc {} distance {}",
                result.image_auc_max,
                result.image_auc_mean,
                result
                    .pixel_auc
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into()),
                distance_name(cfg.eval.distance),
            );
            Ok(())
        }
        Command::Score {
            config,
            ckpt,
            image,
            distance,
            heatmap,
        } => {
            let mut cfg = config.load()?;
            if let Some(d) = &distance {
                cfg.eval.distance =
                    parse_distance(d).ok_or_else(|| CliError::usage(format!("unknown distance '{d}'")))?;
            }
            let (loaded, _) = training::load_checkpoint(&ckpt)?;
            let decoded = image::open(&image)
                .map_err(|e| CliError::io(format!("cannot read {}: {e}", image.display())))?;
            let tensor = data::preprocess(&decoded, loaded.config.channels, loaded.config.input_size)?;
            let sample = data::Sample {
                image: tensor,
                is_defective: false,
                mask: None,
                source_id: image.display().to_string(),
            };
            let extractor = build_extractor_for(&cfg, &loaded)?;
            let map = eval::error_map_for(&loaded, &sample, cfg.eval.distance, &extractor, &cfg.loss)?;
            let score_max = eval::defect_score(&map, eval::Pooling::Max);
            let score_mean = eval::defect_score(&map, eval::Pooling::Mean);
            let heatmap_path = heatmap.unwrap_or_else(|| image.with_extension("heatmap.png"));
            perceptual::write_error_map_png(&map, &heatmap_path)?;
            println!("score_max {score_max:.6} score_mean {score_mean:.6} heatmap {}", heatmap_path.display());
            Ok(())
        }
        Command::NoiseSweep {
            config,
            levels,
            variants,
            out,
        } => {
            let cfg = config.load()?;
            configure_rayon(cfg.threads);
            let levels = parse_levels(&levels)?;
            let variants = parse_variants(&variants)?;
            let template = model::build(&cfg.model, cfg.model_seed())?;
            let extractor = build_extractor_for(&cfg, &template)?;
            let rows = eval::noise_sweep(
                &cfg.data,
                &levels,
                &variants,
                &cfg.model,
                &cfg.train,
                &cfg.loss,
                &extractor,
                cfg.threads,
            )?;
            eval::write_sweep_csv(&rows, &out.join("sweep.csv"))?;
            cfg.write_resolved(&out)?;
            for r in &rows {
                println!(
                    "noise {:.2} variant {:<9} auc_max {:.4} auc_mean {:.4}",
                    r.noise_pct, r.variant, r.image_auc_max, r.image_auc_mean
                );
            }
            Ok(())
        }
        Command::MemoryStats {
            config,
            ckpt,
            data: data_dir,
            out,
        } => {
            let cfg = config.load()?;
            let (mut loaded, _) = training::load_checkpoint(&ckpt)?;
            let (train_set, _) = data::load_folder_dataset(
                &data_dir,
                &cfg.category,
                loaded.config.channels,
                loaded.config.input_size,
            )?;
            let images: Vec<_> = train_set.iter().map(|s| s.image.clone()).collect();
            let report = eval::memory_access_report(&mut loaded, &images)?;
            eval::write_memory_report_csv(&report, &out)?;
            println!(
                "slots {} accessed {} entropy {:.4}",
                report.rows.len(),
                report.rows.iter().filter(|(_, c, _)| *c > 0).count(),
                report.entropy
            );
            Ok(())
        }
        Command::GradCheck { seeds } => {
            let seeds: Vec<u64> = match seeds {
                Some(s) => s
                    .split(',')
                    .map(|p| p.trim().parse::<u64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::usage(format!("bad seed list: {e}")))?,
                None => gradsuite::DEFAULT_SEEDS.to_vec(),
            };
            let rows = gradsuite::run(&seeds);
            let mut all_pass = true;
            for row in &rows {
                println!(
                    "{} {:<40} max_rel_err {:.3e}",
                    if row.pass { "PASS" } else { "FAIL" },
                    row.name,
                    row.max_rel_error
                );
                all_pass &= row.pass;
            }
            if all_pass {
                println!("all {} gradient checks passed (tolerance {:.0e})", rows.len(), gradsuite::TOLERANCE);
                Ok(())
            } else {
                Err(CliError::numerical("gradient checks failed"))
            }
        }
    }
}

fn parse_levels(s: &str) -> Result<Vec<f64>, CliError> {
    let levels: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let levels = levels.map_err(|e| CliError::usage(format!("bad noise level list: {e}")))?;
    if levels.is_empty() {
        return Err(CliError::usage("empty noise level list"));
    }
    for &l in &levels {
        if !(0.0..1.0).contains(&l) {
            return Err(CliError::usage(format!("noise level {l} outside [0, 1)")));
        }
    }
    Ok(levels)
}

fn parse_variants(s: &str) -> Result<Vec<Variant>, CliError> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.push(
            Variant::parse(part)
                .ok_or_else(|| CliError::usage(format!("unknown variant '{part}'")))?,
        );
    }
    if out.is_empty() {
        return Err(CliError::usage("empty variant list"));
    }
    Ok(out)
}

fn write_bounds_csv(path: &Path, rows: &[(String, f64, f64)]) -> Result<(), CliError> {
    use std::io::Write as _;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    (|| -> std::io::Result<()> {
        writeln!(f, "image,min,max")?;
        for (id, lo, hi) in rows {
            writeln!(f, "{id},{lo},{hi}")?;
        }
        Ok(())
    })()
    .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_exits_with_usage_code() {
        let code = dispatch(["trustmae", "train", "--frobnicate"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn unknown_subcommand_exits_with_usage_code() {
        let code = dispatch(["trustmae", "explode"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn help_is_success() {
        assert_eq!(dispatch(["trustmae", "--help"]), 0);
    }

    #[test]
    fn level_and_variant_parsing() {
        assert_eq!(parse_levels("0.05, 0.1").unwrap(), vec![0.05, 0.1]);
        assert!(parse_levels("1.5").is_err());
        assert!(parse_levels("abc").is_err());
        assert_eq!(parse_variants("full,wo-tr").unwrap(), vec![Variant::Full, Variant::WoTr]);
        assert!(parse_variants("nope").is_err());
    }
}
