//! Memory bank with soft addressing, top-k sparse addressing, margin
//! separation, trust-region updates, access statistics and pruning.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::substrate::ops::{self, TrustBatchInfo};
use crate::substrate::{Parameter, SubstrateError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("feature dimension {feature} does not match bank latent dimension {bank}")]
    DimensionMismatch { feature: usize, bank: usize },
    #[error("k={k} out of range 1..={m}")]
    KOutOfRange { k: usize, m: usize },
    #[error("operation requires at least {required} memory slots, bank has {m}")]
    TooFewSlots { required: usize, m: usize },
    #[error("empty feature batch")]
    EmptyBatch,
    #[error("invalid addressing weights: {0}")]
    BadWeights(String),
    #[error("pruning would remove every slot (no access recorded)")]
    AllSlotsUnused,
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
}

/// Top-k sparse addressing configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AddressingConfig {
    pub k: usize,
    pub sparse_enabled: bool,
}

impl Default for AddressingConfig {
    fn default() -> Self {
        Self { k: 3, sparse_enabled: true }
    }
}

/// Trust-region configuration; δ1 is adaptive per batch, never stored.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrustConfig {
    pub delta2: f64,
    pub enabled: bool,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self { delta2: 20.0, enabled: true }
    }
}

/// M learned feature prototypes of dimension Z plus access statistics.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub slots: Parameter,
    pub access_counts: Vec<u64>,
    assigned_counts: Vec<u64>,
    assigned_distance_sum: Vec<f64>,
}

impl MemoryBank {
    /// Slots initialized i.i.d. uniform in [-0.1, 0.1].
    pub fn new(slot_count: usize, latent_dim: usize, rng: &mut impl Rng) -> Self {
        let slots = Parameter::new(Tensor::rand_uniform(&[slot_count, latent_dim], -0.1, 0.1, rng));
        Self {
            slots,
            access_counts: vec![0; slot_count],
            assigned_counts: vec![0; slot_count],
            assigned_distance_sum: vec![0.0; slot_count],
        }
    }

    pub fn from_slots(slots: Tensor) -> Result<Self, MemoryError> {
        let m = match *slots.shape() {
            [m, _] => m,
            _ => {
                return Err(MemoryError::BadWeights(format!(
                    "slot tensor must be rank 2, got {:?}",
                    slots.shape()
                )))
            }
        };
        Ok(Self {
            slots: Parameter::new(slots),
            access_counts: vec![0; m],
            assigned_counts: vec![0; m],
            assigned_distance_sum: vec![0.0; m],
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slots.value.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.slots.value.shape()[1]
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        let z = self.latent_dim();
        &self.slots.value.data()[i * z..(i + 1) * z]
    }

    pub fn reset_stats(&mut self) {
        self.access_counts.fill(0);
        self.assigned_counts.fill(0);
        self.assigned_distance_sum.fill(0.0);
    }

    /// Shannon entropy (nats) of the normalized access-count histogram.
    pub fn access_entropy(&self) -> f64 {
        let total: u64 = self.access_counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let mut h = 0.0;
        for &c in &self.access_counts {
            if c > 0 {
                let p = c as f64 / total as f64;
                h -= p * p.ln();
            }
        }
        h
    }

    /// Per-slot statistics rows: (slot_index, access_count, mean_assigned_distance).
    pub fn stats_rows(&self) -> Vec<(usize, u64, f64)> {
        (0..self.slot_count())
            .map(|i| {
                let mean = if self.assigned_counts[i] > 0 {
                    self.assigned_distance_sum[i] / self.assigned_counts[i] as f64
                } else {
                    0.0
                };
                (i, self.access_counts[i], mean)
            })
            .collect()
    }
}

/// Soft-addressing outcome for one feature vector.
#[derive(Clone, Debug)]
pub struct AddressingResult {
    /// Addressing weights; dense after [`address`], sparse after [`sparsify`].
    pub weights: Tensor,
    /// Euclidean distance to every slot.
    pub distances: Tensor,
    pub nearest_index: usize,
    pub second_index: usize,
}

/// Softmax of negative euclidean distances against every slot (Eq. 2 form).
pub fn address(z: &Tensor, bank: &MemoryBank) -> Result<AddressingResult, MemoryError> {
    if z.shape() != [bank.latent_dim()] {
        return Err(MemoryError::DimensionMismatch {
            feature: z.len(),
            bank: bank.latent_dim(),
        });
    }
    z.check_finite("addressing feature")?;
    let m = bank.slot_count();
    let mut distances = vec![0.0; m];
    for i in 0..m {
        distances[i] = ops::euclidean(z.data(), bank.slot(i));
    }
    let mut neg = vec![0.0; m];
    for (n, &d) in neg.iter_mut().zip(&distances) {
        *n = -d;
    }
    let mut weights = vec![0.0; m];
    ops::softmax_row(&neg, &mut weights);
    let (nearest_index, second_index) = if m >= 2 {
        ops::two_nearest(&distances)
    } else {
        (0, 0)
    };
    Ok(AddressingResult {
        weights: Tensor::new(&[m], weights)?,
        distances: Tensor::new(&[m], distances)?,
        nearest_index,
        second_index,
    })
}

/// Keep the k largest weights (ties toward the lower index), renormalize to
/// sum 1. The degenerate flag reports the all-kept-mass-zero fallback, where
/// the result is one-hot at index 0.
pub fn sparsify(w: &Tensor, k: usize) -> Result<(Tensor, bool), MemoryError> {
    let m = w.len();
    if w.rank() != 1 || m == 0 {
        return Err(MemoryError::BadWeights(format!("expected rank-1 weights, got {:?}", w.shape())));
    }
    if k == 0 || k > m {
        return Err(MemoryError::KOutOfRange { k, m });
    }
    if w.data().iter().any(|&v| v < 0.0) {
        return Err(MemoryError::BadWeights("negative weight".into()));
    }
    let sum = w.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(MemoryError::BadWeights(format!("weights sum to {sum}, expected 1")));
    }
    let kept = ops::topk_indices(w.data(), k);
    let mass: f64 = kept.iter().map(|&i| w.data()[i]).sum();
    let mut out = vec![0.0; m];
    if mass <= 0.0 {
        out[0] = 1.0;
        return Ok((Tensor::new(&[m], out)?, true));
    }
    for &i in &kept {
        out[i] = w.data()[i] / mass;
    }
    Ok((Tensor::new(&[m], out)?, false))
}

/// ẑ = ŵ · M, the convex combination of slot rows.
pub fn retrieve(w_hat: &Tensor, bank: &MemoryBank) -> Result<Tensor, MemoryError> {
    let m = bank.slot_count();
    if w_hat.shape() != [m] {
        return Err(MemoryError::DimensionMismatch {
            feature: w_hat.len(),
            bank: m,
        });
    }
    let z = bank.latent_dim();
    let mut out = vec![0.0; z];
    for (i, &w) in w_hat.data().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &s) in out.iter_mut().zip(bank.slot(i)) {
            *o += w * s;
        }
    }
    Ok(Tensor::new(&[z], out)?)
}

/// Hinge [d⁽¹⁾ − d⁽²⁾ + 1]₊ between the two closest slots.
pub fn margin_loss(z: &Tensor, bank: &MemoryBank) -> Result<f64, MemoryError> {
    if bank.slot_count() < 2 {
        return Err(MemoryError::TooFewSlots {
            required: 2,
            m: bank.slot_count(),
        });
    }
    let result = address(z, bank)?;
    let d1 = result.distances.data()[result.nearest_index];
    let d2 = result.distances.data()[result.second_index];
    Ok((d1 - d2 + 1.0).max(0.0))
}

/// Region label of Eq. 5: +1 for d ≤ δ1, −1 for δ1 < d ≤ δ2, else 0.
pub fn trust_label(distance: f64, delta1: f64, delta2: f64) -> i8 {
    ops::trust_label(distance, delta1, delta2)
}

/// Trust-region loss over a feature batch with the per-slot adaptive δ1
/// (mean distance of the features assigned to each slot this batch).
pub fn trust_loss_batch(
    features: &[Tensor],
    bank: &MemoryBank,
    cfg: &TrustConfig,
) -> Result<(f64, TrustBatchInfo), MemoryError> {
    if features.is_empty() {
        return Err(MemoryError::EmptyBatch);
    }
    let zdim = bank.latent_dim();
    let mut flat = Vec::with_capacity(features.len() * zdim);
    for f in features {
        if f.shape() != [zdim] {
            return Err(MemoryError::DimensionMismatch {
                feature: f.len(),
                bank: zdim,
            });
        }
        flat.extend_from_slice(f.data());
    }
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(&[features.len(), zdim], flat)?);
    let slots = tape.leaf(bank.slots.value.clone());
    let d = ops::pairwise_distance(&mut tape, z, slots)?;
    let (loss, info) = ops::trust_from_distances(&mut tape, d, cfg.delta2)?;
    Ok((tape.value(loss).as_scalar()?, info))
}

/// Differentiable margin + trust losses over a (P, Z) feature matrix already
/// on a tape; used by the training loop.
pub fn memory_losses_on_tape(
    tape: &mut Tape,
    features: Var,
    slots: Var,
    trust_cfg: &TrustConfig,
) -> Result<(Var, Var, TrustBatchInfo), SubstrateError> {
    let d = ops::pairwise_distance(tape, features, slots)?;
    let margin = ops::margin_from_distances(tape, d)?;
    let (trust, info) = ops::trust_from_distances(tape, d, trust_cfg.delta2)?;
    Ok((margin, trust, info))
}

/// Record one addressing into the bank statistics: every slot with strictly
/// positive weight counts as accessed; the nearest slot accumulates its
/// distance for the mean-assigned-distance report.
pub fn record_access(result: &AddressingResult, bank: &mut MemoryBank) {
    for (i, &w) in result.weights.data().iter().enumerate() {
        if w > 0.0 {
            bank.access_counts[i] += 1;
        }
    }
    bank.assigned_counts[result.nearest_index] += 1;
    bank.assigned_distance_sum[result.nearest_index] +=
        result.distances.data()[result.nearest_index];
}

/// Drop slots that were never selected; errors if that would empty the bank.
pub fn prune(bank: &MemoryBank) -> Result<MemoryBank, MemoryError> {
    let keep: Vec<usize> = (0..bank.slot_count())
        .filter(|&i| bank.access_counts[i] > 0)
        .collect();
    if keep.is_empty() {
        return Err(MemoryError::AllSlotsUnused);
    }
    let z = bank.latent_dim();
    let mut data = Vec::with_capacity(keep.len() * z);
    for &i in &keep {
        data.extend_from_slice(bank.slot(i));
    }
    let mut pruned = MemoryBank::from_slots(Tensor::new(&[keep.len(), z], data)?)?;
    for (new_i, &old_i) in keep.iter().enumerate() {
        pruned.access_counts[new_i] = bank.access_counts[old_i];
        pruned.assigned_counts[new_i] = bank.assigned_counts[old_i];
        pruned.assigned_distance_sum[new_i] = bank.assigned_distance_sum[old_i];
    }
    Ok(pruned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank_from(rows: &[&[f64]]) -> MemoryBank {
        let z = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        MemoryBank::from_slots(Tensor::new(&[rows.len(), z], data).unwrap()).unwrap()
    }

    #[test]
    fn equidistant_slots_address_uniformly() {
        let bank = bank_from(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let z = Tensor::zeros(&[2]);
        let r = address(&z, &bank).unwrap();
        for &w in r.weights.data() {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn address_matches_direct_softmax_of_negative_distances() {
        let bank = bank_from(&[&[0.0], &[2.0]]);
        let z = Tensor::zeros(&[1]);
        let r = address(&z, &bank).unwrap();
        assert!((r.weights.data()[0] - 0.8808).abs() < 1e-4);
        assert!((r.weights.data()[1] - 0.1192).abs() < 1e-4);
        assert_eq!(r.nearest_index, 0);
        assert_eq!(r.second_index, 1);
    }

    #[test]
    fn exact_slot_match_dominates_when_others_are_far() {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for i in 0..6 {
            if i == 3 {
                rows.push(vec![0.5, 0.5]);
            } else {
                rows.push(vec![30.0 + i as f64, -20.0]);
            }
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let bank = bank_from(&refs);
        let z = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        let r = address(&z, &bank).unwrap();
        assert!(r.weights.data()[3] >= 1.0 - 1e-8);
    }

    #[test]
    fn address_rejects_dimension_mismatch() {
        let bank = bank_from(&[&[0.0, 0.0]]);
        let z = Tensor::zeros(&[3]);
        assert!(matches!(address(&z, &bank), Err(MemoryError::DimensionMismatch { .. })));
    }

    #[test]
    fn sparsify_examples() {
        let w = Tensor::new(&[4], vec![0.5, 0.3, 0.1, 0.1]).unwrap();
        let (s, degenerate) = sparsify(&w, 2).unwrap();
        assert!(!degenerate);
        assert_eq!(s.data()[2], 0.0);
        assert!((s.data()[0] - 0.625).abs() < 1e-12 && (s.data()[1] - 0.375).abs() < 1e-12);

        let (s, _) = sparsify(&w, 4).unwrap();
        for (a, b) in s.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let (s, _) = sparsify(&w, 1).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 0.0]);

        assert!(matches!(sparsify(&w, 0), Err(MemoryError::KOutOfRange { .. })));
        assert!(matches!(sparsify(&w, 5), Err(MemoryError::KOutOfRange { .. })));
    }

    #[test]
    fn retrieve_one_hot_and_uniform() {
        let bank = bank_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let one_hot = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(retrieve(&one_hot, &bank).unwrap().data(), &[3.0, 4.0]);
        let uniform = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        assert_eq!(retrieve(&uniform, &bank).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn margin_loss_examples() {
        // Equal nearest distances -> hinge at its max of 1.
        let bank = bank_from(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let z = Tensor::zeros(&[2]);
        assert!((margin_loss(&z, &bank).unwrap() - 1.0).abs() < 1e-9);

        // Separated by more than the margin -> 0.
        let bank = bank_from(&[&[0.1, 0.0], &[5.0, 0.0]]);
        assert_eq!(margin_loss(&z, &bank).unwrap(), 0.0);

        let single = bank_from(&[&[0.0, 0.0]]);
        assert!(matches!(margin_loss(&z, &single), Err(MemoryError::TooFewSlots { .. })));
    }

    #[test]
    fn trust_loss_batch_hand_example() {
        // Slot at origin; features at distances 1 and 3; second slot far away.
        let bank = bank_from(&[&[0.0, 0.0], &[100.0, 100.0]]);
        let features = vec![
            Tensor::new(&[2], vec![1.0, 0.0]).unwrap(),
            Tensor::new(&[2], vec![3.0, 0.0]).unwrap(),
        ];
        let cfg = TrustConfig { delta2: 20.0, enabled: true };
        let (loss, info) = trust_loss_batch(&features, &bank, &cfg).unwrap();
        assert!((loss - (-1.0)).abs() < 1e-9);
        assert_eq!(info.labels, vec![1, -1]);
    }

    #[test]
    fn trust_loss_degenerate_cluster_is_zero() {
        let bank = bank_from(&[&[0.5, -0.5], &[9.0, 9.0]]);
        let features = vec![Tensor::new(&[2], vec![0.5, -0.5]).unwrap(); 3];
        let cfg = TrustConfig::default();
        let (loss, info) = trust_loss_batch(&features, &bank, &cfg).unwrap();
        assert!(loss.abs() < 1e-5, "loss {loss}");
        assert!(info.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn trust_loss_rejects_empty_batch() {
        let bank = bank_from(&[&[0.0]]);
        assert!(matches!(
            trust_loss_batch(&[], &bank, &TrustConfig::default()),
            Err(MemoryError::EmptyBatch)
        ));
    }

    #[test]
    fn record_access_counts_positive_weights_only() {
        let mut bank = bank_from(&[&[0.0], &[1.0], &[2.0]]);
        let r = AddressingResult {
            weights: Tensor::new(&[3], vec![0.7, 0.3, 0.0]).unwrap(),
            distances: Tensor::new(&[3], vec![0.1, 0.5, 2.0]).unwrap(),
            nearest_index: 0,
            second_index: 1,
        };
        for _ in 0..5 {
            record_access(&r, &mut bank);
        }
        assert_eq!(bank.access_counts, vec![5, 5, 0]);
        let rows = bank.stats_rows();
        assert!((rows[0].2 - 0.1).abs() < 1e-12);
        assert_eq!(rows[2].1, 0);
    }

    #[test]
    fn prune_keeps_only_accessed_slots() {
        let mut bank = bank_from(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, 5.0]]);
        bank.access_counts = vec![5, 0, 2];
        let pruned = prune(&bank).unwrap();
        assert_eq!(pruned.slot_count(), 2);
        assert_eq!(pruned.slot(0), &[0.0, 1.0]);
        assert_eq!(pruned.slot(1), &[4.0, 5.0]);

        bank.access_counts = vec![0, 0, 0];
        assert!(matches!(prune(&bank), Err(MemoryError::AllSlotsUnused)));

        bank.access_counts = vec![1, 1, 1];
        assert_eq!(prune(&bank).unwrap().slot_count(), 3);
    }

    #[test]
    fn trust_gradient_step_pulls_and_pushes() {
        // One gradient step on the trust loss must strictly decrease the
        // distance of a +1 feature and strictly increase that of a -1 one.
        let bank = bank_from(&[&[0.0, 0.0], &[50.0, 50.0]]);
        let features = Tensor::new(&[2, 2], vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(features.clone());
        let slots = tape.leaf(bank.slots.value.clone());
        let d = ops::pairwise_distance(&mut tape, z, slots).unwrap();
        let (loss, info) = ops::trust_from_distances(&mut tape, d, 20.0).unwrap();
        assert_eq!(info.labels, vec![1, -1]);
        let mut grads = tape.backward(loss).unwrap();
        let gz = grads.take(z).unwrap();
        let eta = 1e-3;
        let stepped = features.zip(&gz, |v, g| v - eta * g).unwrap();
        let d0_before = ops::euclidean(&features.data()[0..2], bank.slot(0));
        let d0_after = ops::euclidean(&stepped.data()[0..2], bank.slot(0));
        let d1_before = ops::euclidean(&features.data()[2..4], bank.slot(0));
        let d1_after = ops::euclidean(&stepped.data()[2..4], bank.slot(0));
        assert!(d0_after < d0_before, "+1 feature must move closer");
        assert!(d1_after > d1_before, "-1 feature must move away");
    }

    proptest! {
        #[test]
        fn address_weights_sum_to_one(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(2usize..12);
            let zdim = rng.gen_range(1usize..6);
            let bank = MemoryBank::new(m, zdim, &mut rng);
            let z = Tensor::rand_uniform(&[zdim], -2.0, 2.0, &mut rng);
            let r = address(&z, &bank).unwrap();
            let sum: f64 = r.weights.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(r.weights.data().iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn sparsify_preserves_sum_and_support(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let m = rng.gen_range(2usize..12);
            let k = rng.gen_range(1usize..=m);
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let w = Tensor::new(&[m], raw.iter().map(|v| v / total).collect()).unwrap();
            let (s, _) = sparsify(&w, k).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.data().iter().filter(|&&v| v > 0.0).count() <= k);
        }

        #[test]
        fn decreasing_a_distance_never_decreases_its_weight(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7777));
            let m = rng.gen_range(2usize..10);
            let distances: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..5.0)).collect();
            let idx = rng.gen_range(0..m);
            let mut closer = distances.clone();
            closer[idx] *= 0.5;
            let soft = |d: &[f64]| {
                let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                let mut out = vec![0.0; d.len()];
                ops::softmax_row(&neg, &mut out);
                out
            };
            let w0 = soft(&distances);
            let w1 = soft(&closer);
            prop_assert!(w1[idx] >= w0[idx] - 1e-12);
        }

        #[test]
        fn retrieve_sparse_equals_restricted_dense_sum(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31337));
            let m = rng.gen_range(2usize..10);
            let zdim = rng.gen_range(1usize..6);
            let k = rng.gen_range(1usize..=m);
            let bank = MemoryBank::new(m, zdim, &mut rng);
            let z = Tensor::rand_uniform(&[zdim], -1.0, 1.0, &mut rng);
            let r = address(&z, &bank).unwrap();
            let (s, _) = sparsify(&r.weights, k).unwrap();
            let got = retrieve(&s, &bank).unwrap();
            // Brute force restricted to the support.
            let mut expect = vec![0.0; zdim];
            for (i, &w) in s.data().iter().enumerate() {
                if w > 0.0 {
                    for (e, &v) in expect.iter_mut().zip(bank.slot(i)) {
                        *e += w * v;
                    }
                }
            }
            prop_assert_eq!(got.data(), expect.as_slice());
        }

        #[test]
        fn trust_label_matches_region_rules_on_boundary_grid(
            delta1 in 0.0f64..10.0, gap in 0.0f64..10.0
        ) {
            let delta2 = delta1 + gap;
            let eps = 1e-9;
            prop_assert_eq!(trust_label(delta1 - eps, delta1, delta2), 1);
            prop_assert_eq!(trust_label(delta1, delta1, delta2), 1);
            if delta1 + eps <= delta2 {
                prop_assert_eq!(trust_label(delta1 + eps, delta1, delta2), -1);
            }
            prop_assert_eq!(trust_label(delta2, delta1, delta2), if gap == 0.0 { 1 } else { -1 });
            prop_assert_eq!(trust_label(delta2 + eps, delta1, delta2), 0);
        }

        #[test]
        fn margin_loss_is_in_unit_interval(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(555));
            let m = rng.gen_range(2usize..8);
            let zdim = rng.gen_range(1usize..5);
            let bank = MemoryBank::new(m, zdim, &mut rng);
            let z = Tensor::rand_uniform(&[zdim], -3.0, 3.0, &mut rng);
            let l = margin_loss(&z, &bank).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }
    }
}
