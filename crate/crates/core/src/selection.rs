//! Critical-entry selectors and their brute-force oracles.
//!
//! The perturbation-constrained selector runs in two stages. Stage 1 spends
//! `b' = max(1, floor(b·α))` of the budget on the largest attention weights,
//! which secures the kept mass `σ`. Stage 2 spends the remaining `b''` on the
//! largest `(a_i + ε)·‖𝒱_i‖` among the entries stage 1 left behind; with the
//! stage-1 set fixed, that greedy pick minimizes θ̂ exactly because θ̂ is
//! linear in the stage-2 mask.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturbation::{
    output_perturbation, theta_hat_bound, theta_relax_bound, Metric, SelectionMask,
};
use crate::tensor::{rank_order, top_k_indices, Matrix};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Largest instance the enumeration oracles accept.
pub const ORACLE_MAX_ENTRIES: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub budget: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub metric: Metric,
}

impl SelectionConfig {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            metric: Metric::L1,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be a nonnegative real, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// `(b', b'')`.
    pub fn stage_budgets(&self) -> (usize, usize) {
        stage_budgets(self.budget, self.alpha)
    }
}

/// Splits `budget` into stage-1 and stage-2 shares. Stage 1 always gets at
/// least one entry when the budget is nonzero.
pub fn stage_budgets(budget: usize, alpha: f64) -> (usize, usize) {
    if budget == 0 {
        return (0, 0);
    }
    // slack absorbs products like 10 × 0.3 landing a hair under an integer
    let first = ((budget as f64 * alpha + 1e-9).floor() as usize).clamp(1, budget);
    (first, budget - first)
}

/// A selection with its stage split retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagedSelection {
    pub stage1: SelectionMask,
    pub stage2: SelectionMask,
    pub combined: SelectionMask,
}

impl StagedSelection {
    fn from_stages(stage1: SelectionMask, stage2: SelectionMask) -> Result<Self> {
        let combined = stage1.union(&stage2)?;
        Ok(Self {
            stage1,
            stage2,
            combined,
        })
    }
}

/// Keeps the `budget` largest attention weights.
pub fn select_attention_only(a: &[f64], budget: usize) -> Result<SelectionMask> {
    let kept = top_k_indices(a, budget)?;
    SelectionMask::from_indices(a.len(), &kept)
}

/// Top-`k` by `scores` among entries not in `exclude`, ties to lower index.
fn top_k_excluding(scores: &[f64], exclude: &SelectionMask, k: usize) -> Result<SelectionMask> {
    let mut rest: Vec<usize> = (0..scores.len()).filter(|&i| !exclude.is_kept(i)).collect();
    if k > rest.len() {
        return Err(Error::BudgetExceedsEntries {
            budget: k + exclude.budget(),
            entries: scores.len(),
        });
    }
    rest.sort_by(|&x, &y| rank_order(scores, x, y));
    rest.truncate(k);
    SelectionMask::from_indices(scores.len(), &rest)
}

/// Two-stage perturbation-constrained selection.
pub fn select_perturbation_constrained(
    a: &[f64],
    value_norms: &[f64],
    cfg: &SelectionConfig,
) -> Result<StagedSelection> {
    cfg.validate()?;
    if value_norms.len() != a.len() {
        return Err(Error::Shape(format!(
            "{} value norms for {} entries",
            value_norms.len(),
            a.len()
        )));
    }
    if cfg.budget > a.len() {
        return Err(Error::BudgetExceedsEntries {
            budget: cfg.budget,
            entries: a.len(),
        });
    }
    let (first, second) = cfg.stage_budgets();
    let stage1 = select_attention_only(a, first)?;
    let scores: Vec<f64> = a
        .iter()
        .zip(value_norms)
        .map(|(&w, &norm)| (w + cfg.epsilon) * norm)
        .collect();
    let stage2 = top_k_excluding(&scores, &stage1, second)?;
    StagedSelection::from_stages(stage1, stage2)
}

/// Stage-2 completion the attention-only selector implies: the next
/// `b_stage2` entries by attention weight after `stage1`.
pub fn attention_only_completion(
    a: &[f64],
    stage1: &SelectionMask,
    b_stage2: usize,
) -> Result<SelectionMask> {
    top_k_excluding(a, stage1, b_stage2)
}

fn oracle_guard(n: usize) -> Result<()> {
    if n > ORACLE_MAX_ENTRIES {
        return Err(Error::OracleTooLarge {
            n,
            limit: ORACLE_MAX_ENTRIES,
        });
    }
    Ok(())
}

/// Exhaustive search for the mask of size `budget` with the smallest actual
/// perturbation. Masks are visited in lexicographic order of their index
/// sets and only a strictly smaller value replaces the incumbent.
pub fn brute_force_min_perturbation(
    a: &[f64],
    projected_values: &Matrix,
    budget: usize,
    metric: Metric,
) -> Result<(SelectionMask, f64)> {
    let n = a.len();
    oracle_guard(n)?;
    if budget > n {
        return Err(Error::BudgetExceedsEntries { budget, entries: n });
    }
    let mut best: Option<(SelectionMask, f64)> = None;
    for combo in (0..n).combinations(budget) {
        let mask = SelectionMask::from_indices(n, &combo)?;
        let loss = match output_perturbation(a, &mask, projected_values, metric) {
            Ok(loss) => loss,
            Err(Error::DegenerateMask) => continue,
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(_, l)| loss < *l) {
            best = Some((mask, loss));
        }
    }
    best.ok_or(Error::DegenerateMask)
}

fn brute_force_stage2(
    a: &[f64],
    stage1: &SelectionMask,
    b_stage2: usize,
    objective: impl Fn(&SelectionMask) -> Result<f64>,
) -> Result<(SelectionMask, f64)> {
    let n = a.len();
    oracle_guard(n)?;
    let rest: Vec<usize> = (0..n).filter(|&i| !stage1.is_kept(i)).collect();
    if b_stage2 > rest.len() {
        return Err(Error::BudgetExceedsEntries {
            budget: stage1.budget() + b_stage2,
            entries: n,
        });
    }
    let mut best: Option<(SelectionMask, f64)> = None;
    for combo in rest.iter().copied().combinations(b_stage2) {
        let mask = SelectionMask::from_indices(n, &combo)?;
        let value = objective(&mask)?;
        if best.as_ref().is_none_or(|(_, v)| value < *v) {
            best = Some((mask, value));
        }
    }
    Ok(best.expect("at least the empty completion exists"))
}

/// Exhaustive minimizer of θ̂ over stage-2 completions of `stage1`.
pub fn brute_force_min_theta_hat(
    a: &[f64],
    value_norms: &[f64],
    stage1: &SelectionMask,
    b_stage2: usize,
) -> Result<(SelectionMask, f64)> {
    brute_force_stage2(a, stage1, b_stage2, |s2| {
        Ok(theta_hat_bound(a, stage1, s2, value_norms)?.theta_hat)
    })
}

/// Exhaustive minimizer of the relaxed bound over stage-2 completions.
pub fn brute_force_min_theta_relax(
    a: &[f64],
    value_norms: &[f64],
    stage1: &SelectionMask,
    b_stage2: usize,
) -> Result<(SelectionMask, f64)> {
    brute_force_stage2(a, stage1, b_stage2, |s2| {
        theta_relax_bound(a, stage1, s2, value_norms)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E2: [f64; 3] = [0.6, 0.25, 0.15];
    const E2_NORMS: [f64; 3] = [1.0, 1.0, 10.0];

    fn e2_values() -> Matrix {
        Matrix::new(3, 1, vec![1.0, 1.0, 10.0]).unwrap()
    }

    #[test]
    fn stage_split() {
        assert_eq!(stage_budgets(2, 0.5), (1, 1));
        assert_eq!(stage_budgets(1, 0.5), (1, 0));
        assert_eq!(stage_budgets(7, 0.5), (3, 4));
        assert_eq!(stage_budgets(10, 0.3), (3, 7));
        assert_eq!(stage_budgets(5, 1.0), (5, 0));
        assert_eq!(stage_budgets(0, 0.5), (0, 0));
    }

    #[test]
    fn attention_only_examples() {
        assert_eq!(select_attention_only(&E2, 2).unwrap().kept_indices(), vec![0, 1]);
        assert_eq!(select_attention_only(&E2, 3).unwrap().kept_indices(), vec![0, 1, 2]);
        assert_eq!(select_attention_only(&[0.25; 4], 1).unwrap().kept_indices(), vec![0]);
        assert!(select_attention_only(&E2, 4).is_err());
    }

    #[test]
    fn perturbation_constrained_examples() {
        let cfg = SelectionConfig::new(2);
        let s = select_perturbation_constrained(&E2, &E2_NORMS, &cfg).unwrap();
        assert_eq!(s.stage1.kept_indices(), vec![0]);
        assert_eq!(s.stage2.kept_indices(), vec![2]);
        assert_eq!(s.combined.kept_indices(), vec![0, 2]);

        let s = select_perturbation_constrained(&[0.7, 0.2, 0.1], &[1.0, 2.0, 3.0], &cfg).unwrap();
        assert_eq!(s.combined.kept_indices(), vec![0, 1]);
    }

    #[test]
    fn perturbation_constrained_errors() {
        assert!(matches!(
            select_perturbation_constrained(&E2, &E2_NORMS, &SelectionConfig::new(4)),
            Err(Error::BudgetExceedsEntries { .. })
        ));
        assert!(select_perturbation_constrained(&E2, &E2_NORMS, &SelectionConfig::new(2).with_alpha(0.0))
            .is_err());
        assert!(select_perturbation_constrained(&E2, &[1.0], &SelectionConfig::new(2)).is_err());
    }

    #[test]
    fn oracle_examples() {
        let (m, l) = brute_force_min_perturbation(&E2, &e2_values(), 2, Metric::L1).unwrap();
        assert_eq!(m.kept_indices(), vec![0, 2]);
        assert!((l - 0.45).abs() < 1e-9);
        let (m, l) = brute_force_min_perturbation(&E2, &e2_values(), 3, Metric::L1).unwrap();
        assert_eq!(m.budget(), 3);
        assert_eq!(l, 0.0);
        let one = Matrix::new(1, 1, vec![4.0]).unwrap();
        let (m, l) = brute_force_min_perturbation(&[1.0], &one, 1, Metric::L1).unwrap();
        assert_eq!(m.kept_indices(), vec![0]);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn oracle_enumerates_all_e2_masks() {
        // {0,1} → 1.35, {0,2} → 0.45, {1,2} → 2.025
        let v = e2_values();
        for (idx, expected) in [([0, 1], 1.35), ([0, 2], 0.45), ([1, 2], 2.025)] {
            let m = SelectionMask::from_indices(3, &idx).unwrap();
            let l = output_perturbation(&E2, &m, &v, Metric::L1).unwrap();
            assert!((l - expected).abs() < 1e-9, "{idx:?}: {l}");
        }
    }

    #[test]
    fn oracle_guard_rejects_large_instances() {
        let a = vec![1.0 / 23.0; 23];
        let v = Matrix::zeros(23, 1);
        assert!(matches!(
            brute_force_min_perturbation(&a, &v, 2, Metric::L1),
            Err(Error::OracleTooLarge { n: 23, .. })
        ));
        let s1 = SelectionMask::from_indices(23, &[0]).unwrap();
        assert!(brute_force_min_theta_hat(&a, &[1.0; 23], &s1, 1).is_err());
    }

    #[test]
    fn theta_hat_oracle_examples() {
        let s1 = SelectionMask::from_indices(3, &[0]).unwrap();
        let (m, v) = brute_force_min_theta_hat(&E2, &E2_NORMS, &s1, 1).unwrap();
        assert_eq!(m.kept_indices(), vec![2]);
        assert!((v - 1.65).abs() < 1e-9);
        let (m, _) = brute_force_min_theta_hat(&E2, &E2_NORMS, &s1, 0).unwrap();
        assert_eq!(m.budget(), 0);
        let (m, _) = brute_force_min_theta_hat(&E2, &E2_NORMS, &s1, 2).unwrap();
        assert_eq!(m.kept_indices(), vec![1, 2]);
    }

    #[test]
    fn alpha_one_degenerates_to_attention_only() {
        let cfg = SelectionConfig::new(2).with_alpha(1.0);
        let s = select_perturbation_constrained(&E2, &E2_NORMS, &cfg).unwrap();
        assert_eq!(s.combined, select_attention_only(&E2, 2).unwrap());
        assert_eq!(s.stage2.budget(), 0);
    }

    fn instance(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
        (1usize..max_n).prop_flat_map(|n| {
            (
                prop::collection::vec(0.001f64..1.0, n),
                prop::collection::vec(0.01f64..20.0, n),
                1..=n,
            )
        })
    }

    fn normalize(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn budget_is_conserved((raw, norms, b) in instance(40), alpha in 0.05f64..=1.0) {
            let a = normalize(&raw);
            let cfg = SelectionConfig::new(b).with_alpha(alpha);
            let s = select_perturbation_constrained(&a, &norms, &cfg).unwrap();
            prop_assert_eq!(s.combined.budget(), b);
            prop_assert_eq!(s.stage1.budget() + s.stage2.budget(), b);
            prop_assert!(s.stage1.first_overlap(&s.stage2).is_none());
            prop_assert!(s.stage1.budget() >= 1);
        }

        #[test]
        fn positive_scale_invariance((raw, norms, b) in instance(40), c in 1e-3f64..1e3) {
            let a = normalize(&raw);
            let cfg = SelectionConfig::new(b);
            let base = select_perturbation_constrained(&a, &norms, &cfg).unwrap();
            let scaled: Vec<f64> = norms.iter().map(|x| x * c).collect();
            let other = select_perturbation_constrained(&a, &scaled, &cfg).unwrap();
            prop_assert_eq!(base.combined, other.combined);
        }

        #[test]
        fn permutation_equivariance((raw, norms, b) in instance(30), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let a = normalize(&raw);
            let n = a.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            // distinct values keep the tie-break out of the picture
            let a: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + i as f64 * 1e-9).collect();
            let norms: Vec<f64> = norms.iter().enumerate().map(|(i, x)| x + i as f64 * 1e-7).collect();
            let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
            let pn: Vec<f64> = perm.iter().map(|&i| norms[i]).collect();
            let cfg = SelectionConfig::new(b);
            let base = select_perturbation_constrained(&a, &norms, &cfg).unwrap().combined;
            let permuted = select_perturbation_constrained(&pa, &pn, &cfg).unwrap().combined;
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(permuted.is_kept(j), base.is_kept(i));
            }
        }

        #[test]
        fn stage_two_beats_attention_completion((raw, norms, b) in instance(40)) {
            let a = normalize(&raw);
            let ours = select_perturbation_constrained(&a, &norms, &SelectionConfig::new(b).with_epsilon(0.0)).unwrap();
            let theirs = attention_only_completion(&a, &ours.stage1, ours.stage2.budget()).unwrap();
            let hat_ours = theta_hat_bound(&a, &ours.stage1, &ours.stage2, &norms).unwrap();
            let hat_theirs = theta_hat_bound(&a, &ours.stage1, &theirs, &norms).unwrap();
            if hat_ours.sigma >= 0.5 {
                prop_assert!(hat_ours.theta_hat <= hat_theirs.theta_hat + 1e-12);
            }
        }
    }
}
