//! Output perturbation of single-query attention under cache eviction, and
//! the closed-form upper bounds used to steer selection.
//!
//! Notation in the docs below: `a` is a query's attention distribution over
//! the `n` cache entries, the mask keeps entries with `keep[i] == true`, and
//! the projected values are `V · W_O` (one row per entry, model width). The
//! bounds only see the row norms of the projected values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{row_l1_norms, row_l2_norms, softmax_scaled, Matrix};

/// Distance used for the output perturbation, and matching row norm used in
/// every bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L1,
    L2,
}

impl Metric {
    pub fn row_norms(self, m: &Matrix) -> Vec<f64> {
        match self {
            Metric::L1 => row_l1_norms(m),
            Metric::L2 => row_l2_norms(m),
        }
    }

    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            Metric::L1 => v.iter().map(|x| x.abs()).sum(),
            Metric::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// Binary keep/evict mask over cache entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionMask {
    keep: Vec<bool>,
    budget: usize,
}

impl SelectionMask {
    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self> {
        let mut keep = vec![false; len];
        for &i in indices {
            if i >= len {
                return Err(Error::InvalidArgument(format!(
                    "mask index {i} out of range for {len} entries"
                )));
            }
            if keep[i] {
                return Err(Error::InvalidArgument(format!("duplicate mask index {i}")));
            }
            keep[i] = true;
        }
        Ok(Self {
            keep,
            budget: indices.len(),
        })
    }

    pub fn from_keep(keep: Vec<bool>) -> Self {
        let budget = keep.iter().filter(|&&k| k).count();
        Self { keep, budget }
    }

    pub fn all(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            budget: len,
        }
    }

    pub fn empty(len: usize) -> Self {
        Self {
            keep: vec![false; len],
            budget: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Kept indices in ascending order.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    /// First index kept by both masks, if any.
    pub fn first_overlap(&self, other: &SelectionMask) -> Option<usize> {
        self.keep
            .iter()
            .zip(&other.keep)
            .position(|(&a, &b)| a && b)
    }

    pub fn union(&self, other: &SelectionMask) -> Result<SelectionMask> {
        check_len(self.len(), other.len(), "mask")?;
        Ok(SelectionMask::from_keep(
            self.keep.iter().zip(&other.keep).map(|(&a, &b)| a || b).collect(),
        ))
    }

    /// Σ over kept entries of `weights`.
    pub fn kept_sum(&self, weights: &[f64]) -> f64 {
        self.keep
            .iter()
            .zip(weights)
            .filter(|(&k, _)| k)
            .map(|(_, &w)| w)
            .sum()
    }
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!(
            "{what} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// Attention after eviction: `keep ⊙ a / Σ_kept a`.
pub fn masked_attention(a: &[f64], mask: &SelectionMask) -> Result<Vec<f64>> {
    check_len(a.len(), mask.len(), "mask")?;
    let kept = mask.kept_sum(a);
    if kept <= 0.0 {
        return Err(Error::DegenerateMask);
    }
    Ok(a.iter()
        .zip(mask.keep())
        .map(|(&w, &k)| if k { w / kept } else { 0.0 })
        .collect())
}

/// Logit assigned to evicted entries by [`masked_softmax`].
pub const EVICTED_LOGIT: f64 = -1e30;

/// Softmax with an additive mask: evicted positions get [`EVICTED_LOGIT`].
/// This is the direct route that [`masked_attention`] rewrites.
pub fn masked_softmax(logits: &[f64], mask: &SelectionMask, scale_divisor: f64) -> Result<Vec<f64>> {
    check_len(logits.len(), mask.len(), "mask")?;
    if mask.budget() == 0 {
        return Err(Error::DegenerateMask);
    }
    let masked: Vec<f64> = logits
        .iter()
        .zip(mask.keep())
        .map(|(&l, &k)| if k { l } else { EVICTED_LOGIT })
        .collect();
    softmax_scaled(&masked, scale_divisor)
}

/// `‖(a − a')·𝒱‖` under `metric`, where `a'` is the masked attention.
pub fn output_perturbation(
    a: &[f64],
    mask: &SelectionMask,
    projected_values: &Matrix,
    metric: Metric,
) -> Result<f64> {
    check_len(a.len(), projected_values.rows(), "attention")?;
    let masked = masked_attention(a, mask)?;
    let diff: Vec<f64> = a.iter().zip(&masked).map(|(x, y)| x - y).collect();
    let delta = projected_values.weighted_row_sum(&diff)?;
    Ok(metric.norm(&delta))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaBound {
    pub theta: f64,
    /// `C = Σ a_i·‖𝒱_i‖`, independent of the mask.
    pub c_const: f64,
    /// Attention mass kept by the mask.
    pub kept_mass: f64,
}

/// Worst-case perturbation of a single mask:
/// `θ = C − (2 − 1/Σ_kept a)·Σ_kept a_i‖𝒱_i‖`.
///
/// Not clipped at zero; with tiny kept mass the factor goes negative and θ can
/// exceed C, which is still a valid bound.
pub fn theta_bound(a: &[f64], mask: &SelectionMask, value_norms: &[f64]) -> Result<ThetaBound> {
    check_len(a.len(), mask.len(), "mask")?;
    check_len(a.len(), value_norms.len(), "value norms")?;
    let kept_mass = mask.kept_sum(a);
    if kept_mass <= 0.0 {
        return Err(Error::DegenerateMask);
    }
    let weighted: Vec<f64> = a.iter().zip(value_norms).map(|(x, v)| x * v).collect();
    let c_const: f64 = weighted.iter().sum();
    let kept_weighted = mask.kept_sum(&weighted);
    Ok(ThetaBound {
        theta: c_const - (2.0 - 1.0 / kept_mass) * kept_weighted,
        c_const,
        kept_mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaHatBound {
    pub theta_hat: f64,
    pub c_prime: f64,
    /// Attention mass captured by stage 1.
    pub sigma: f64,
    /// False when `sigma <= 0.5`; the bound is still reported.
    pub assumption_holds: bool,
}

struct StageTerms {
    sigma: f64,
    c_prime: f64,
    factor: f64,
}

fn stage_terms(
    a: &[f64],
    stage1: &SelectionMask,
    stage2: &SelectionMask,
    value_norms: &[f64],
) -> Result<StageTerms> {
    check_len(a.len(), stage1.len(), "stage-1 mask")?;
    check_len(a.len(), stage2.len(), "stage-2 mask")?;
    check_len(a.len(), value_norms.len(), "value norms")?;
    if let Some(i) = stage1.first_overlap(stage2) {
        return Err(Error::OverlappingMasks(i));
    }
    let sigma = stage1.kept_sum(a);
    if sigma <= 0.0 {
        return Err(Error::DegenerateMask);
    }
    let weighted: Vec<f64> = a.iter().zip(value_norms).map(|(x, v)| x * v).collect();
    let c_const: f64 = weighted.iter().sum();
    let factor = 2.0 - 1.0 / sigma;
    Ok(StageTerms {
        sigma,
        c_prime: c_const - factor * stage1.kept_sum(&weighted),
        factor,
    })
}

/// Stage-2 objective given a fixed stage-1 selection:
/// `θ̂ = C' − (2 − 1/σ)·Σ_stage2 a_i‖𝒱_i‖` with `σ = Σ_stage1 a`.
pub fn theta_hat_bound(
    a: &[f64],
    stage1: &SelectionMask,
    stage2: &SelectionMask,
    value_norms: &[f64],
) -> Result<ThetaHatBound> {
    let terms = stage_terms(a, stage1, stage2, value_norms)?;
    let weighted: Vec<f64> = a.iter().zip(value_norms).map(|(x, v)| x * v).collect();
    Ok(ThetaHatBound {
        theta_hat: terms.c_prime - terms.factor * stage2.kept_sum(&weighted),
        c_prime: terms.c_prime,
        sigma: terms.sigma,
        assumption_holds: terms.sigma > 0.5,
    })
}

/// Relaxation of θ̂ that replaces every norm in the stage-2 sum by the
/// smallest norm over all entries: `C' − M·(2 − 1/σ)·Σ_stage2 a_i`.
pub fn theta_relax_bound(
    a: &[f64],
    stage1: &SelectionMask,
    stage2: &SelectionMask,
    value_norms: &[f64],
) -> Result<f64> {
    let terms = stage_terms(a, stage1, stage2, value_norms)?;
    let min_norm = value_norms.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(terms.c_prime - min_norm * terms.factor * stage2.kept_sum(a))
}

/// Every perturbation quantity for one query and one selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub actual_l: f64,
    pub theta: f64,
    pub theta_hat: Option<f64>,
    pub theta_relax: Option<f64>,
    pub sigma: f64,
    pub c_const: f64,
    pub c_prime: Option<f64>,
}

impl BoundReport {
    /// `ℒ ≤ θ` up to `1e-5` relative slack.
    pub fn bound_holds(&self) -> bool {
        self.actual_l <= self.theta + 1e-5 * self.theta.abs().max(1.0)
    }

    /// `θ ≤ θ̂ ≤ θ̂_relax` (each with `1e-5` slack); vacuous unless `σ > 0.5`
    /// and the staged bounds are present.
    pub fn chain_holds(&self) -> bool {
        match (self.theta_hat, self.theta_relax) {
            (Some(hat), Some(relax)) if self.sigma > 0.5 => {
                self.theta < hat + 1e-5 && hat <= relax + 1e-5
            }
            _ => true,
        }
    }
}

/// Evaluates ℒ, θ and, when a stage split is given, θ̂ and θ̂_relax.
///
/// Without a split, `sigma` is the kept mass of the whole mask.
pub fn bound_report(
    a: &[f64],
    projected_values: &Matrix,
    value_norms: &[f64],
    mask: &SelectionMask,
    stages: Option<(&SelectionMask, &SelectionMask)>,
    metric: Metric,
) -> Result<BoundReport> {
    let actual_l = output_perturbation(a, mask, projected_values, metric)?;
    let theta = theta_bound(a, mask, value_norms)?;
    let mut report = BoundReport {
        actual_l,
        theta: theta.theta,
        theta_hat: None,
        theta_relax: None,
        sigma: theta.kept_mass,
        c_const: theta.c_const,
        c_prime: None,
    };
    if let Some((stage1, stage2)) = stages {
        let hat = theta_hat_bound(a, stage1, stage2, value_norms)?;
        report.theta_hat = Some(hat.theta_hat);
        report.theta_relax = Some(theta_relax_bound(a, stage1, stage2, value_norms)?);
        report.sigma = hat.sigma;
        report.c_prime = Some(hat.c_prime);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(n: usize, idx: &[usize]) -> SelectionMask {
        SelectionMask::from_indices(n, idx).unwrap()
    }

    fn column(values: &[f32]) -> Matrix {
        Matrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    const A3: [f64; 3] = [0.7, 0.2, 0.1];
    const E2: [f64; 3] = [0.6, 0.25, 0.15];

    #[test]
    fn masked_attention_examples() {
        assert_eq!(masked_attention(&[0.5, 0.5], &mask(2, &[0])).unwrap(), vec![1.0, 0.0]);
        let out = masked_attention(&A3, &mask(3, &[0, 1])).unwrap();
        assert!((out[0] - 0.7 / 0.9).abs() < 1e-12);
        assert!((out[1] - 0.2 / 0.9).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
        assert!((out[0] - 0.7778).abs() < 1e-4 && (out[1] - 0.2222).abs() < 1e-4);
        let full = masked_attention(&A3, &SelectionMask::all(3)).unwrap();
        assert!(full.iter().zip(&A3).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn masked_attention_rejects_zero_mass() {
        let err = masked_attention(&[1.0, 0.0], &mask(2, &[1])).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask));
        assert!(masked_attention(&[1.0, 0.0], &SelectionMask::empty(2)).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let v = column(&[1.0, -2.0, 3.0]);
        // o = 0.7 − 0.4 + 0.3 = 0.6, ô = (0.7 − 0.4)/0.9 = 1/3
        let l = output_perturbation(&A3, &mask(3, &[0, 1]), &v, Metric::L1).unwrap();
        assert!((l - (0.6 - 1.0 / 3.0)).abs() < 1e-9);
        // ô = 0.875·1 + 0.125·3 = 1.25
        let l = output_perturbation(&A3, &mask(3, &[0, 2]), &v, Metric::L1).unwrap();
        assert!((l - 0.65).abs() < 1e-9);
        let l = output_perturbation(&A3, &SelectionMask::all(3), &v, Metric::L1).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn theta_examples() {
        let norms = [1.0, 2.0, 3.0];
        let t = theta_bound(&A3, &mask(3, &[0, 1]), &norms).unwrap();
        assert!((t.c_const - 1.4).abs() < 1e-12);
        assert!((t.theta - (1.4 - (2.0 - 1.0 / 0.9) * 1.1)).abs() < 1e-12);
        assert!((t.theta - 0.4222).abs() < 1e-3);
        let t = theta_bound(&A3, &mask(3, &[0, 2]), &norms).unwrap();
        assert!((t.theta - (1.4 - 0.75 * 1.0)).abs() < 1e-12);
        let t = theta_bound(&A3, &SelectionMask::all(3), &norms).unwrap();
        assert!(t.theta.abs() < 1e-12);
    }

    #[test]
    fn theta_hat_examples() {
        let norms = [1.0, 1.0, 10.0];
        let s1 = mask(3, &[0]);
        let t = theta_hat_bound(&E2, &s1, &mask(3, &[2]), &norms).unwrap();
        assert!((t.sigma - 0.6).abs() < 1e-12);
        assert!((t.c_prime - 2.15).abs() < 1e-9);
        assert!((t.theta_hat - 1.65).abs() < 1e-9);
        assert!(t.assumption_holds);
        let t = theta_hat_bound(&E2, &s1, &mask(3, &[1]), &norms).unwrap();
        assert!((t.theta_hat - (2.15 - 0.25 / 3.0)).abs() < 1e-9);
        let t = theta_hat_bound(&E2, &s1, &SelectionMask::empty(3), &norms).unwrap();
        assert_eq!(t.theta_hat, t.c_prime);
    }

    #[test]
    fn theta_hat_flags_violated_assumption() {
        let t = theta_hat_bound(&E2, &mask(3, &[1]), &mask(3, &[2]), &[1.0; 3]).unwrap();
        assert!(!t.assumption_holds);
        assert!(t.theta_hat.is_finite());
    }

    #[test]
    fn overlapping_stages_rejected() {
        let err = theta_hat_bound(&E2, &mask(3, &[0, 1]), &mask(3, &[1]), &[1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::OverlappingMasks(1)));
        assert!(theta_relax_bound(&E2, &mask(3, &[2]), &mask(3, &[2]), &[1.0; 3]).is_err());
    }

    #[test]
    fn theta_relax_examples() {
        let norms = [1.0, 1.0, 10.0];
        let s1 = mask(3, &[0]);
        let r = theta_relax_bound(&E2, &s1, &mask(3, &[1]), &norms).unwrap();
        assert!((r - (2.15 - 0.25 / 3.0)).abs() < 1e-9);
        let r = theta_relax_bound(&E2, &s1, &mask(3, &[2]), &norms).unwrap();
        assert!((r - 2.10).abs() < 1e-9);
        let uniform = [2.5; 3];
        for s2 in [[1usize], [2]] {
            let s2 = mask(3, &s2);
            let hat = theta_hat_bound(&E2, &s1, &s2, &uniform).unwrap().theta_hat;
            let relax = theta_relax_bound(&E2, &s1, &s2, &uniform).unwrap();
            assert!((hat - relax).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_matches_rewrite_on_example() {
        let logits = [2.0, -1.0, 0.5, 0.0];
        let a = softmax_scaled(&logits, 2.0).unwrap();
        let m = mask(4, &[0, 2]);
        let direct = masked_softmax(&logits, &m, 2.0).unwrap();
        let rewrite = masked_attention(&a, &m).unwrap();
        for (x, y) in direct.iter().zip(&rewrite) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f32>, usize, Vec<bool>)> {
        (1usize..24, 1usize..6).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(-8.0f64..8.0, n),
                prop::collection::vec(-4.0f32..4.0, n * d),
                Just(d),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn l2_bound_holds((logits, vals, d, keep) in instance()) {
            let n = logits.len();
            let mut keep = keep;
            keep[0] = true;
            let a = softmax_scaled(&logits, 1.0).unwrap();
            let v = Matrix::new(n, d, vals).unwrap();
            let m = SelectionMask::from_keep(keep);
            for metric in [Metric::L1, Metric::L2] {
                let norms = metric.row_norms(&v);
                let r = bound_report(&a, &v, &norms, &m, None, metric).unwrap();
                prop_assert!(r.bound_holds(), "{:?}", r);
            }
        }

        #[test]
        fn mask_budget_counts_kept(keep in prop::collection::vec(any::<bool>(), 0..40)) {
            let m = SelectionMask::from_keep(keep.clone());
            prop_assert_eq!(m.budget(), keep.iter().filter(|&&k| k).count());
            prop_assert_eq!(m.kept_indices().len(), m.budget());
            let rebuilt = SelectionMask::from_indices(keep.len(), &m.kept_indices()).unwrap();
            prop_assert_eq!(rebuilt, m);
        }
    }
}
