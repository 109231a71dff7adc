//! Defect scoring, image- and pixel-level AUC, threshold segmentation,
//! noise sweeps, ablation presets and memory-access diagnostics.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{generate_dataset, DataError, DatasetSpec, Sample};
use crate::losses::{self, LossConfig};
use crate::memory;
use crate::model::{self, ModelConfig, ModelError, TrustMAEModel};
use crate::perceptual::{
    combined_error_map, mse_map, perceptual_distance_map, ErrorMap, ErrorMapSource,
    FeaturePyramidExtractor, PerceptualError,
};
use crate::substrate::{SubstrateError, Tensor};
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels must contain both classes")]
    SingleClass,
    #[error("scores and labels length mismatch: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("sample {0} has no mask")]
    MissingMask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Perceptual(#[from] PerceptualError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Max,
    Mean,
}

/// Spatial pooling of an error map into a single defect score.
pub fn defect_score(map: &ErrorMap, pooling: Pooling) -> f64 {
    match pooling {
        Pooling::Max => map.values.max(),
        Pooling::Mean => map.values.mean(),
    }
}

/// ROC-AUC via the Mann–Whitney U statistic with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // Average ranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = positives as f64;
    let nn = negatives as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// Pixel-level AUC: pools every pixel of every map against its mask value.
pub fn pixel_auc(maps: &[ErrorMap], masks: &[Tensor]) -> Result<f64, EvalError> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(EvalError::Empty("pixel_auc inputs"));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, mask) in maps.iter().zip(masks) {
        if m.values.shape() != mask.shape() {
            return Err(EvalError::LengthMismatch {
                scores: m.values.len(),
                labels: mask.len(),
            });
        }
        scores.extend_from_slice(m.values.data());
        labels.extend(mask.data().iter().map(|&v| if v > 0.0 { 1u8 } else { 0u8 }));
    }
    roc_auc(&scores, &labels)
}

/// Mean of per-image pixel AUCs over images that contain both classes.
pub fn pixel_auc_per_image(maps: &[ErrorMap], masks: &[Tensor]) -> Result<f64, EvalError> {
    let mut aucs = Vec::new();
    for (m, mask) in maps.iter().zip(masks) {
        let labels: Vec<u8> = mask.data().iter().map(|&v| if v > 0.0 { 1 } else { 0 }).collect();
        if labels.iter().any(|&l| l == 1) && labels.iter().any(|&l| l == 0) {
            aucs.push(roc_auc(m.values.data(), &labels)?);
        }
    }
    if aucs.is_empty() {
        return Err(EvalError::Empty("no image with both classes"));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Binary segmentation: values strictly above the threshold.
pub fn segment(map: &ErrorMap, threshold: f64) -> Tensor {
    map.values.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

/// Per-image evaluation row.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub source_id: String,
    pub score_max: f64,
    pub score_mean: f64,
    pub is_defective: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub image_auc_max: f64,
    pub image_auc_mean: f64,
    pub pixel_auc: Option<f64>,
    pub rows: Vec<ReportRow>,
    pub fingerprint: String,
}

/// Compute the error map of one sample under the selected distance.
pub fn error_map_for(
    model: &TrustMAEModel,
    sample: &Sample,
    source: ErrorMapSource,
    extractor: &FeaturePyramidExtractor,
    loss_cfg: &LossConfig,
) -> Result<ErrorMap, EvalError> {
    let (h, w) = model.config.input_size;
    let c = model.config.channels;
    let batch = sample.image.clone().reshape(&[1, c, h, w])?;
    let out = model.forward_eval(&batch)?;
    let x = sample.image.clone();
    let x_hat = out.reconstruction.reshape(&[c, h, w])?;
    let map = match source {
        ErrorMapSource::Mse => mse_map(&x, &x_hat)?,
        ErrorMapSource::Pd => perceptual_distance_map(&x, &x_hat, extractor)?,
        ErrorMapSource::MsePd => combined_error_map(&x, &x_hat, extractor)?,
        ErrorMapSource::Ssim => {
            let ssim = losses::ssim_map(&x, &x_hat, loss_cfg)?;
            ErrorMap {
                values: ssim.map(|v| 1.0 - v),
                source: ErrorMapSource::Ssim,
            }
        }
    };
    Ok(map)
}

/// Stable fingerprint of the model + evaluation configuration.
pub fn config_fingerprint(model_cfg: &ModelConfig, source: ErrorMapSource) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(model_cfg).unwrap_or_default());
    hasher.update(serde_json::to_vec(&source).unwrap_or_default());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Evaluate a trained model over a test set. Error maps are computed per
/// image (in parallel when `threads > 1`; results are order-stable either
/// way), then pooled into image scores and AUCs.
pub fn evaluate(
    model: &TrustMAEModel,
    test: &[Sample],
    source: ErrorMapSource,
    extractor: &FeaturePyramidExtractor,
    loss_cfg: &LossConfig,
    threads: usize,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty("test set"));
    }
    let maps: Vec<Result<ErrorMap, EvalError>> = if threads > 1 {
        test.par_iter()
            .map(|s| error_map_for(model, s, source, extractor, loss_cfg))
            .collect()
    } else {
        test.iter()
            .map(|s| error_map_for(model, s, source, extractor, loss_cfg))
            .collect()
    };
    let maps: Vec<ErrorMap> = maps.into_iter().collect::<Result<_, _>>()?;

    let rows: Vec<ReportRow> = test
        .iter()
        .zip(&maps)
        .map(|(s, m)| ReportRow {
            source_id: s.source_id.clone(),
            score_max: defect_score(m, Pooling::Max),
            score_mean: defect_score(m, Pooling::Mean),
            is_defective: s.is_defective,
        })
        .collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.is_defective as u8).collect();
    let max_scores: Vec<f64> = rows.iter().map(|r| r.score_max).collect();
    let mean_scores: Vec<f64> = rows.iter().map(|r| r.score_mean).collect();
    let image_auc_max = roc_auc(&max_scores, &labels)?;
    let image_auc_mean = roc_auc(&mean_scores, &labels)?;

    // Pixel AUC over all test images that carry masks (normal images count
    // with all-zero masks).
    let (h, w) = model.config.input_size;
    let zero_mask = Tensor::zeros(&[h, w]);
    let masks: Vec<Tensor> = test
        .iter()
        .map(|s| s.mask.clone().unwrap_or_else(|| zero_mask.clone()))
        .collect();
    let pixel = pixel_auc(&maps, &masks).ok();

    Ok(EvalReport {
        image_auc_max,
        image_auc_mean,
        pixel_auc: pixel,
        rows,
        fingerprint: config_fingerprint(&model.config, source),
    })
}

/// Write the per-image report CSV; summary metrics are repeated per row so
/// the file is self-contained.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut f = std::fs::File::create(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let write = |f: &mut std::fs::File| -> std::io::Result<()> {
        writeln!(
            f,
            "source_id,score_max,score_mean,is_defective,image_auc_max,image_auc_mean,pixel_auc,fingerprint"
        )?;
        for r in &report.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.source_id,
                r.score_max,
                r.score_mean,
                r.is_defective as u8,
                report.image_auc_max,
                report.image_auc_mean,
                report.pixel_auc.map(|v| v.to_string()).unwrap_or_default(),
                report.fingerprint
            )?;
        }
        Ok(())
    };
    write(&mut f).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Ablation presets and the noise sweep
// ---------------------------------------------------------------------------

/// Named model/score variants mirroring the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Memory + sparse addressing + trust region, scored with MSE × PD.
    Full,
    /// Without trust-region updates.
    WoTr,
    /// Without sparse addressing (dense softmax weights).
    WoSp,
    /// Full model scored with plain MSE (no perceptual distance).
    WoPd,
    /// Plain auto-encoder (memory bypassed) scored with MSE.
    PlainAe,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "wo-tr" => Some(Self::WoTr),
            "wo-sp" => Some(Self::WoSp),
            "wo-pd" => Some(Self::WoPd),
            "plain-ae" => Some(Self::PlainAe),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoTr => "wo-tr",
            Self::WoSp => "wo-sp",
            Self::WoPd => "wo-pd",
            Self::PlainAe => "plain-ae",
        }
    }

    /// Ablation switches this variant applies on top of a base train config.
    pub fn apply(&self, cfg: &mut TrainConfig) {
        match self {
            Self::Full | Self::WoPd => {}
            Self::WoTr => cfg.trust_region = false,
            Self::WoSp => cfg.sparse_addressing = false,
            Self::PlainAe => {
                cfg.memory_enabled = false;
                cfg.trust_region = false;
            }
        }
    }

    pub fn distance(&self) -> ErrorMapSource {
        match self {
            Self::Full | Self::WoTr | Self::WoSp => ErrorMapSource::MsePd,
            Self::WoPd | Self::PlainAe => ErrorMapSource::Mse,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub noise_pct: f64,
    pub variant: &'static str,
    pub image_auc_max: f64,
    pub image_auc_mean: f64,
    pub pixel_auc: Option<f64>,
}

/// Train + evaluate one (noise level, variant) cell from a fixed seed.
pub fn sweep_cell(
    base_spec: &DatasetSpec,
    noise: f64,
    variant: Variant,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    extractor: &FeaturePyramidExtractor,
    threads: usize,
) -> Result<(SweepRow, TrustMAEModel), EvalError> {
    let mut spec = base_spec.clone();
    spec.noise_fraction = noise;
    let (train_set, test_set) = generate_dataset(&spec)?;
    let mut cfg = *train_cfg;
    variant.apply(&mut cfg);
    let mut model = model::build(model_cfg, derive_model_seed(train_cfg.seed))?;
    train(&mut model, &train_set, &cfg, loss_cfg, None)?;
    let report = evaluate(&model, &test_set, variant.distance(), extractor, loss_cfg, threads)?;
    Ok((
        SweepRow {
            noise_pct: noise,
            variant: variant.name(),
            image_auc_max: report.image_auc_max,
            image_auc_mean: report.image_auc_mean,
            pixel_auc: report.pixel_auc,
        },
        model,
    ))
}

fn derive_model_seed(seed: u64) -> u64 {
    crate::seeding::derive_seed(seed, "model-init")
}

/// Full cross product of noise levels × variants.
#[allow(clippy::too_many_arguments)]
pub fn noise_sweep(
    base_spec: &DatasetSpec,
    noise_levels: &[f64],
    variants: &[Variant],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    extractor: &FeaturePyramidExtractor,
    threads: usize,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::with_capacity(noise_levels.len() * variants.len());
    for &noise in noise_levels {
        for &variant in variants {
            let (row, _) = sweep_cell(
                base_spec, noise, variant, model_cfg, train_cfg, loss_cfg, extractor, threads,
            )?;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut f = std::fs::File::create(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let write = |f: &mut std::fs::File| -> std::io::Result<()> {
        writeln!(f, "noise_pct,variant,image_auc_max,image_auc_mean,pixel_auc")?;
        for r in rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.noise_pct,
                r.variant,
                r.image_auc_max,
                r.image_auc_mean,
                r.pixel_auc.map(|v| v.to_string()).unwrap_or_default()
            )?;
        }
        Ok(())
    };
    write(&mut f).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Memory diagnostics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MemoryReport {
    /// (slot_index, access_count, mean_assigned_distance)
    pub rows: Vec<(usize, u64, f64)>,
    pub entropy: f64,
}

/// One statistics pass over the dataset; resets previous statistics first.
pub fn memory_access_report(
    model: &mut TrustMAEModel,
    images: &[Tensor],
) -> Result<MemoryReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::Empty("dataset"));
    }
    model.bank.reset_stats();
    model.record_dataset_access(images)?;
    Ok(MemoryReport {
        rows: model.bank.stats_rows(),
        entropy: model.bank.access_entropy(),
    })
}

pub fn write_memory_report_csv(report: &MemoryReport, path: &Path) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut f = std::fs::File::create(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let write = |f: &mut std::fs::File| -> std::io::Result<()> {
        writeln!(f, "slot_index,access_count,mean_assigned_distance")?;
        for (i, c, d) in &report.rows {
            writeln!(f, "{i},{c},{d}")?;
        }
        Ok(())
    };
    write(&mut f).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Prune and verify: reconstruction on the statistics set changes by at most
/// `tolerance` because dropped slots carried zero addressing weight.
pub fn prune_and_verify(
    model: &TrustMAEModel,
    images: &[Tensor],
    tolerance: f64,
) -> Result<(TrustMAEModel, f64), EvalError> {
    let pruned_bank = memory::prune(&model.bank).map_err(ModelError::from)?;
    let mut pruned = model.clone_with_bank(pruned_bank);
    pruned.config.memory_slots = pruned.bank.slot_count();
    if pruned.config.addressing.k > pruned.config.memory_slots {
        pruned.config.addressing.k = pruned.config.memory_slots;
    }
    let mut worst: f64 = 0.0;
    let (h, w) = model.config.input_size;
    let c = model.config.channels;
    for img in images {
        let batch = img.clone().reshape(&[1, c, h, w])?;
        let a = model.forward_eval(&batch)?.reconstruction;
        let b = pruned.forward_eval(&batch)?.reconstruction;
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(diff);
    }
    if worst > tolerance {
        return Err(EvalError::Empty("pruned reconstruction diverged"));
    }
    Ok((pruned, worst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfectly_separated_scores_give_auc_one() {
        let auc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn spec_examples_for_roc() {
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0, 4.0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0, 4.0], &[0, 1, 0, 1]).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(roc_auc(&[1.0, 2.0], &[1, 1]), Err(EvalError::SingleClass)));
    }

    /// Exhaustive pairwise counting: P(score+ > score−) + 0.5·P(equal).
    pub(crate) fn pair_counting_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut won = 0.0;
        let mut total = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                total += 1.0;
                if si > sj {
                    won += 1.0;
                } else if si == sj {
                    won += 0.5;
                }
            }
        }
        won / total
    }

    #[test]
    fn rank_auc_matches_pair_counting_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..200 {
            let n = rng.gen_range(2..10);
            // Coarse grid forces ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let a = roc_auc(&scores, &labels).unwrap();
            let b = pair_counting_auc(&scores, &labels);
            assert!((a - b).abs() < 1e-12, "{scores:?} {labels:?}: {a} vs {b}");
        }
    }

    #[test]
    fn random_scores_give_auc_near_half() {
        // Monte-Carlo oracle: expectation 0.5 for label-independent scores.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let trials = 10_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels = [0u8, 0, 0, 0, 1, 1, 1, 1];
            sum += roc_auc(&scores, &labels).unwrap();
        }
        let mean = sum / trials as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean AUC {mean}");
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms_and_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<u8> = (0..12).map(|_| rng.gen_range(0..2) as u8).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let base = roc_auc(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp()).collect();
            assert!((roc_auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
            let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
            assert!((roc_auc(&scores, &flipped).unwrap() + base - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_auc_examples() {
        let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let exact = ErrorMap {
            values: mask.clone(),
            source: ErrorMapSource::Mse,
        };
        assert_eq!(pixel_auc(&[exact.clone()], &[mask.clone()]).unwrap(), 1.0);
        let inverted = ErrorMap {
            values: mask.map(|v| 1.0 - v),
            source: ErrorMapSource::Mse,
        };
        assert_eq!(pixel_auc(&[inverted], &[mask.clone()]).unwrap(), 0.0);
        let constant = ErrorMap {
            values: Tensor::full(&[2, 2], 0.7),
            source: ErrorMapSource::Mse,
        };
        assert_eq!(pixel_auc(&[constant], &[mask]).unwrap(), 0.5);
    }

    #[test]
    fn pixel_auc_equals_flattened_roc_on_small_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let maps: Vec<ErrorMap> = (0..2)
                .map(|_| ErrorMap {
                    values: Tensor::from_fn(&[3, 3], |_| rng.gen_range(0..5) as f64),
                    source: ErrorMapSource::Mse,
                })
                .collect();
            let masks: Vec<Tensor> = (0..2)
                .map(|_| Tensor::from_fn(&[3, 3], |_| rng.gen_range(0..2) as f64))
                .collect();
            let labels: Vec<u8> = masks
                .iter()
                .flat_map(|m| m.data().iter().map(|&v| if v > 0.0 { 1u8 } else { 0 }))
                .collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            let scores: Vec<f64> = maps.iter().flat_map(|m| m.values.data().to_vec()).collect();
            let direct = pair_counting_auc(&scores, &labels);
            let pooled = pixel_auc(&maps, &masks).unwrap();
            assert!((direct - pooled).abs() < 1e-12);
        }
    }

    #[test]
    fn segmentation_threshold_behavior() {
        let map = ErrorMap {
            values: Tensor::from_fn(&[2, 3], |i| i as f64),
            source: ErrorMapSource::Mse,
        };
        assert!(segment(&map, 10.0).data().iter().all(|&v| v == 0.0));
        assert!(segment(&map, -1.0).data().iter().all(|&v| v == 1.0));
        let mut last = usize::MAX;
        for t in [0.0, 1.5, 3.0, 4.5] {
            let count = segment(&map, t).data().iter().filter(|&&v| v > 0.0).count();
            assert!(count <= last, "raising the threshold added pixels");
            last = count;
        }
    }

    #[test]
    fn max_pooling_dominates_mean_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let map = ErrorMap {
                values: Tensor::from_fn(&[4, 4], |_| rng.gen_range(0.0..2.0)),
                source: ErrorMapSource::Mse,
            };
            assert!(defect_score(&map, Pooling::Max) >= defect_score(&map, Pooling::Mean));
        }
    }

    #[test]
    fn spike_map_scores() {
        let mut values = vec![0.0; 16];
        values[5] = 2.0;
        let map = ErrorMap {
            values: Tensor::new(&[4, 4], values).unwrap(),
            source: ErrorMapSource::Mse,
        };
        assert_eq!(defect_score(&map, Pooling::Max), 2.0);
        assert!((defect_score(&map, Pooling::Mean) - 2.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in [Variant::Full, Variant::WoTr, Variant::WoSp, Variant::WoPd, Variant::PlainAe] {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("bogus"), None);
    }
}
