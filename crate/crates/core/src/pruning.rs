//! Unstructured global magnitude pruning.
//!
//! Masks rank every weight of the model together (biases are never pruned)
//! and drop the smallest magnitudes. One-shot pruning fires once; iterative
//! pruning reaches the same target over several cycles, each removing a
//! constant fraction of the weights still alive.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layout, ParameterVector};

/// Bytes per stored weight in size reports (32-bit floats), independent of
/// the 64-bit arithmetic used in training.
pub const BYTES_PER_WEIGHT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    keep: Vec<bool>,
    layout: Arc<Layout>,
}

impl PruneMask {
    pub fn all_keep(layout: Arc<Layout>) -> Self {
        PruneMask {
            keep: vec![true; layout.len()],
            layout,
        }
    }

    /// Fails if lengths disagree or if any bias is marked as dropped.
    pub fn from_keep(keep: Vec<bool>, layout: Arc<Layout>) -> Result<Self> {
        if keep.len() != layout.len() {
            return Err(Error::Layout {
                expected: layout.len(),
                actual: keep.len(),
            });
        }
        let prunable = layout.prunable_flags();
        if let Some(i) = (0..keep.len()).find(|&i| !keep[i] && !prunable[i]) {
            return Err(Error::Domain(format!("bias index {i} cannot be pruned")));
        }
        Ok(PruneMask { keep, layout })
    }

    pub fn keep_flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, index: usize) -> bool {
        self.keep[index]
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn dropped_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn prunable_count(&self) -> usize {
        self.layout.prunable_count()
    }

    /// Flat little-endian format: `u64` count, then `ceil(count/8)` bytes with
    /// bit `i % 8` of byte `i / 8` set when index `i` is kept.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.keep.len();
        let mut out = Vec::with_capacity(8 + n.div_ceil(8));
        out.extend_from_slice(&(n as u64).to_le_bytes());
        let mut bits = vec![0u8; n.div_ceil(8)];
        for (i, _) in self.keep.iter().enumerate().filter(|(_, k)| **k) {
            bits[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bits);
        out
    }

    pub fn from_bytes(bytes: &[u8], layout: Arc<Layout>) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: "<mask>".into(),
            message,
        };
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| bad("missing 8-byte count".into()))?;
        let n = u64::from_le_bytes(header) as usize;
        let body = &bytes[8..];
        if body.len() != n.div_ceil(8) {
            return Err(bad(format!(
                "count {n} needs {} occupancy bytes, found {}",
                n.div_ceil(8),
                body.len()
            )));
        }
        let keep = (0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
        PruneMask::from_keep(keep, layout)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, layout: Arc<Layout>) -> Result<Self> {
        let bytes = fs::read(path)?;
        PruneMask::from_bytes(&bytes, layout).map_err(|e| match e {
            Error::Format { message, .. } => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }
}

/// Fraction of prunable parameters that are dropped.
pub fn sparsity(mask: &PruneMask) -> Result<f64> {
    let prunable = mask.prunable_count();
    if prunable == 0 {
        return Err(Error::UndefinedSparsity);
    }
    Ok(mask.dropped_count() as f64 / prunable as f64)
}

/// Number of weights to drop for a target sparsity. The small slack absorbs
/// representation error such as `0.29 * 100 = 28.999999999999996`.
pub fn drop_count(target_sparsity: f64, prunable: usize) -> usize {
    ((target_sparsity * prunable as f64) + 1e-9).floor() as usize
}

fn check_target(target_sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::Domain(format!(
            "target sparsity must lie in [0, 1), got {target_sparsity}"
        )));
    }
    Ok(())
}

/// Drops the `floor(target * N_prunable)` smallest-magnitude weights across
/// all layers. Indices already dropped by `prior` stay dropped and count
/// toward the target. Ties go to the lowest flat index.
pub fn compute_magnitude_mask(
    params: &ParameterVector,
    target_sparsity: f64,
    prior: Option<&PruneMask>,
) -> Result<PruneMask> {
    check_target(target_sparsity)?;
    let layout = Arc::clone(params.layout());
    let mut keep = match prior {
        Some(p) => {
            if p.layout.as_ref() != layout.as_ref() {
                return Err(Error::Layout {
                    expected: layout.len(),
                    actual: p.len(),
                });
            }
            let prior_sparsity = sparsity(p)?;
            if drop_count(target_sparsity, p.prunable_count()) < p.dropped_count() {
                return Err(Error::Monotonicity {
                    requested: target_sparsity,
                    prior: prior_sparsity,
                });
            }
            p.keep.clone()
        }
        None => vec![true; layout.len()],
    };

    let prunable = layout.prunable_flags();
    let already = keep.iter().filter(|k| !**k).count();
    let budget = drop_count(target_sparsity, layout.prunable_count()) - already;
    if budget > 0 {
        let values = params.values();
        let mut candidates: Vec<usize> = (0..values.len()).filter(|&i| prunable[i] && keep[i]).collect();
        candidates.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
        for &i in &candidates[..budget] {
            keep[i] = false;
        }
    }
    Ok(PruneMask { keep, layout })
}

/// Cumulative sparsity after each of `cycles` pruning rounds, removing the
/// same fraction of the surviving weights every cycle. The last entry is
/// exactly `target_sparsity`.
pub fn imp_fraction_schedule(target_sparsity: f64, cycles: usize) -> Result<Vec<f64>> {
    if cycles == 0 {
        return Err(Error::Domain("iterative pruning needs at least one cycle".into()));
    }
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(Error::Domain(format!(
            "iterative target sparsity must lie in (0, 1), got {target_sparsity}"
        )));
    }
    let remaining = 1.0 - target_sparsity;
    let mut schedule: Vec<f64> = (1..=cycles)
        .map(|k| 1.0 - remaining.powf(k as f64 / cycles as f64))
        .collect();
    schedule[cycles - 1] = target_sparsity;
    Ok(schedule)
}

/// Zeroes dropped coordinates; kept coordinates are copied bit-for-bit.
pub fn apply_mask(params: &ParameterVector, mask: &PruneMask) -> Result<ParameterVector> {
    if params.layout().as_ref() != mask.layout.as_ref() {
        return Err(Error::Layout {
            expected: params.len(),
            actual: mask.len(),
        });
    }
    let mut out = params.clone();
    for (w, &keep) in out.values_mut().iter_mut().zip(&mask.keep) {
        if !keep {
            *w = 0.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningMode {
    #[default]
    None,
    OneShot,
    Iterative,
}

/// When and how far the federated run prunes.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    mode: PruningMode,
    target_sparsity: f64,
    cycles: usize,
    /// `(round, cumulative sparsity)` pairs, strictly increasing in round.
    events: Vec<(usize, f64)>,
}

impl PruningPlan {
    pub fn none() -> Self {
        PruningPlan {
            mode: PruningMode::None,
            target_sparsity: 0.0,
            cycles: 0,
            events: Vec::new(),
        }
    }

    /// One pruning event at `round`.
    pub fn one_shot(target_sparsity: f64, round: usize) -> Result<Self> {
        check_target(target_sparsity)?;
        Ok(PruningPlan {
            mode: PruningMode::OneShot,
            target_sparsity,
            cycles: 1,
            events: vec![(round, target_sparsity)],
        })
    }

    /// `cycles` events at the given strictly increasing rounds, following
    /// [`imp_fraction_schedule`].
    pub fn iterative(target_sparsity: f64, rounds: Vec<usize>) -> Result<Self> {
        let schedule = imp_fraction_schedule(target_sparsity, rounds.len())?;
        if rounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "prune rounds must be strictly increasing, got {rounds:?}"
            )));
        }
        Ok(PruningPlan {
            mode: PruningMode::Iterative,
            target_sparsity,
            cycles: rounds.len(),
            events: rounds.into_iter().zip(schedule).collect(),
        })
    }

    /// Default placement for a run of `total_rounds`: one-shot at
    /// `osp_round` (or halfway), iterative cycles evenly spaced through the
    /// first half with the last at the halfway point. Rounds after the final
    /// event fine-tune the pruned model.
    pub fn for_budget(
        mode: PruningMode,
        target_sparsity: f64,
        cycles: usize,
        total_rounds: usize,
        osp_round: Option<usize>,
    ) -> Result<Self> {
        let half = total_rounds / 2;
        match mode {
            PruningMode::None => Ok(PruningPlan::none()),
            PruningMode::OneShot => PruningPlan::one_shot(target_sparsity, osp_round.unwrap_or(half)),
            PruningMode::Iterative => {
                if cycles == 0 {
                    return Err(Error::Domain("iterative pruning needs at least one cycle".into()));
                }
                if total_rounds > 0 && half < cycles {
                    return Err(Error::Domain(format!(
                        "{cycles} pruning cycles do not fit in the first half of {total_rounds} rounds"
                    )));
                }
                let span = half.max(cycles);
                let rounds = (1..=cycles).map(|k| k * span / cycles).collect();
                PruningPlan::iterative(target_sparsity, rounds)
            }
        }
    }

    pub fn mode(&self) -> PruningMode {
        self.mode
    }

    pub fn target_sparsity(&self) -> f64 {
        self.target_sparsity
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    pub fn prune_rounds(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.0).collect()
    }

    /// Cumulative sparsity to prune to at `round`, if an event fires there.
    pub fn sparsity_at(&self, round: usize) -> Option<f64> {
        self.events.iter().find(|e| e.0 == round).map(|e| e.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparsityReport {
    pub total_params: u64,
    pub prunable_params: u64,
    pub zeros: u64,
    pub sparsity: f64,
    /// Every parameter stored as a 32-bit float.
    pub size_bytes_dense: u64,
    /// Nonzero values plus a one-bit occupancy map over all parameters.
    pub size_bytes_sparse: u64,
    /// Nonzero values only, ignoring index overhead.
    pub size_bytes_values: u64,
}

impl SparsityReport {
    pub fn sparse_ratio(&self) -> f64 {
        self.size_bytes_sparse as f64 / self.size_bytes_dense as f64
    }

    pub fn values_ratio(&self) -> f64 {
        self.size_bytes_values as f64 / self.size_bytes_dense as f64
    }
}

pub fn model_size_bytes(total_params: u64, prunable_params: u64, zeros: u64) -> Result<SparsityReport> {
    if zeros > prunable_params || prunable_params > total_params {
        return Err(Error::Domain(format!(
            "need zeros <= prunable <= total, got {zeros}, {prunable_params}, {total_params}"
        )));
    }
    let sparsity = if prunable_params == 0 {
        0.0
    } else {
        zeros as f64 / prunable_params as f64
    };
    let values = BYTES_PER_WEIGHT * (total_params - zeros);
    Ok(SparsityReport {
        total_params,
        prunable_params,
        zeros,
        sparsity,
        size_bytes_dense: BYTES_PER_WEIGHT * total_params,
        size_bytes_sparse: values + total_params.div_ceil(8),
        size_bytes_values: values,
    })
}

pub fn mask_report(mask: &PruneMask) -> SparsityReport {
    model_size_bytes(
        mask.len() as u64,
        mask.prunable_count() as u64,
        mask.dropped_count() as u64,
    )
    .expect("mask counts are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    /// Single 4x1 layer: weights are indices 0..4, bias is index 4.
    fn params(weights: &[f64]) -> ParameterVector {
        let spec = ModelSpec::new(vec![weights.len(), 1]).unwrap();
        let mut v = weights.to_vec();
        v.push(0.0);
        ParameterVector::new(v, Arc::new(spec.layout())).unwrap()
    }

    fn dropped(mask: &PruneMask) -> Vec<usize> {
        (0..mask.len()).filter(|&i| !mask.is_kept(i)).collect()
    }

    #[test]
    fn drops_smallest_magnitudes() {
        let m = compute_magnitude_mask(&params(&[0.5, -0.1, 0.9, 0.05]), 0.5, None).unwrap();
        assert_eq!(dropped(&m), vec![1, 3]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let m = compute_magnitude_mask(&params(&[0.2, -0.2, 0.3]), 1.0 / 3.0, None).unwrap();
        assert_eq!(dropped(&m), vec![0]);
    }

    #[test]
    fn zero_target_keeps_everything() {
        let m = compute_magnitude_mask(&params(&[0.5, -0.1, 0.9, 0.05]), 0.0, None).unwrap();
        assert_eq!(m.dropped_count(), 0);
    }

    #[test]
    fn prior_drops_are_kept_and_shrinking_is_rejected() {
        let p = params(&[0.5, -0.1, 0.9, 0.05]);
        let layout = p.layout().clone();
        let prior = PruneMask::from_keep(vec![true, true, false, true, true], layout).unwrap();
        let m = compute_magnitude_mask(&p, 0.5, Some(&prior)).unwrap();
        assert_eq!(dropped(&m), vec![2, 3]);
        let err = compute_magnitude_mask(&p, 0.0, Some(&prior)).unwrap_err();
        assert!(matches!(err, Error::Monotonicity { .. }));
    }

    #[test]
    fn bias_cannot_be_dropped() {
        let p = params(&[1.0, 2.0]);
        assert!(PruneMask::from_keep(vec![true, true, false], p.layout().clone()).is_err());
    }

    #[test]
    fn target_out_of_range() {
        assert!(compute_magnitude_mask(&params(&[1.0]), 1.0, None).is_err());
        assert!(compute_magnitude_mask(&params(&[1.0]), -0.1, None).is_err());
    }

    #[test]
    fn schedule_closed_form() {
        let s = imp_fraction_schedule(0.9, 5).unwrap();
        let per_cycle = 1.0 - 0.1f64.powf(0.2);
        assert!((per_cycle - 0.36904).abs() < 1e-5);
        assert!(((1.0 - per_cycle).powi(5) - 0.1).abs() < 1e-12);
        for (got, want) in s.iter().zip([0.36904, 0.60189, 0.74881, 0.84151, 0.9]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
        assert_eq!(s[4], 0.9);
        assert_eq!(imp_fraction_schedule(0.37, 1).unwrap(), vec![0.37]);
        let two = imp_fraction_schedule(0.5, 2).unwrap();
        assert!((two[0] - (1.0 - 0.5f64.sqrt())).abs() < 1e-15);
        assert_eq!(two[1], 0.5);
        assert!(imp_fraction_schedule(0.0, 3).is_err());
        assert!(imp_fraction_schedule(0.5, 0).is_err());
    }

    #[test]
    fn apply_mask_examples() {
        let p = params(&[0.5, -0.1, 0.9, 0.05]);
        let mut with_bias = p.clone();
        with_bias.values_mut()[4] = 0.25;
        let keep = PruneMask::all_keep(p.layout().clone());
        assert_eq!(apply_mask(&with_bias, &keep).unwrap(), with_bias);

        let none = PruneMask::from_keep(vec![false, false, false, false, true], p.layout().clone()).unwrap();
        let out = apply_mask(&with_bias, &none).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0, 0.0, 0.0, 0.25]);
        assert_eq!(apply_mask(&out, &none).unwrap(), out);
    }

    #[test]
    fn size_report_examples() {
        let r = model_size_bytes(1000, 1000, 0).unwrap();
        assert_eq!((r.size_bytes_dense, r.size_bytes_sparse), (4000, 4125));
        let r = model_size_bytes(1000, 1000, 900).unwrap();
        assert_eq!(r.size_bytes_sparse, 525);
        assert_eq!(r.size_bytes_values, 400);
        assert!((r.sparse_ratio() - 0.13125).abs() < 1e-15);
        assert!((r.values_ratio() - 0.1).abs() < 1e-15);
        assert!(model_size_bytes(10, 5, 6).is_err());
    }

    #[test]
    fn sparsity_counts() {
        let spec = ModelSpec::new(vec![10, 1]).unwrap();
        let layout = Arc::new(spec.layout());
        let mut keep = vec![true; 11];
        keep[1] = false;
        keep[4] = false;
        keep[7] = false;
        let m = PruneMask::from_keep(keep, layout.clone()).unwrap();
        assert!((sparsity(&m).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(sparsity(&PruneMask::all_keep(layout)).unwrap(), 0.0);
    }

    #[test]
    fn plan_placement() {
        let osp = PruningPlan::for_budget(PruningMode::OneShot, 0.9, 5, 150, None).unwrap();
        assert_eq!(osp.prune_rounds(), vec![75]);
        let imp = PruningPlan::for_budget(PruningMode::Iterative, 0.9, 5, 150, None).unwrap();
        assert_eq!(imp.prune_rounds(), vec![15, 30, 45, 60, 75]);
        assert_eq!(imp.sparsity_at(75), Some(0.9));
        assert_eq!(imp.sparsity_at(16), None);
        assert!(PruningPlan::for_budget(PruningMode::Iterative, 0.9, 5, 8, None).is_err());
        assert!(PruningPlan::iterative(0.5, vec![3, 3]).is_err());
        assert!(PruningPlan::none().prune_rounds().is_empty());
    }

    #[test]
    fn mask_bytes_layout() {
        let spec = ModelSpec::new(vec![9, 1]).unwrap();
        let layout = Arc::new(spec.layout());
        let mut keep = vec![true; 10];
        keep[0] = false;
        keep[8] = false;
        let m = PruneMask::from_keep(keep, layout.clone()).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], &10u64.to_le_bytes());
        assert_eq!(&bytes[8..], &[0b1111_1110, 0b0000_0010]);
        assert_eq!(PruneMask::from_bytes(&bytes, layout.clone()).unwrap(), m);
        assert!(PruneMask::from_bytes(&bytes[..9], layout).is_err());
    }
}
