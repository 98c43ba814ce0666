//! Observation-window cache eviction across the heads of one layer.
//!
//! Each head's importance signal is the mean softmax attention of its last
//! `window` queries, max-pooled along the sequence. A layer-wide budget is
//! split across heads (flat or adaptive), the trailing `window` entries of
//! every head are always kept, and the selector fills the rest of the head's
//! budget from the prefix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturbation::{Metric, SelectionMask};
use crate::selection::{
    select_attention_only, select_perturbation_constrained, SelectionConfig, StagedSelection,
    DEFAULT_ALPHA, DEFAULT_EPSILON,
};
use crate::tensor::{max_pool_1d, rank_order, softmax_scaled, Matrix};

pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_POOL_KERNEL: usize = 7;

/// One attention head's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSnapshot {
    pub layer: u32,
    pub head: u32,
    /// Trailing query states, `n' × d_h`.
    pub q_window: Matrix,
    /// `n × d_h`
    pub keys: Matrix,
    /// `n × d_h`
    pub values: Matrix,
    /// This head's block of the output projection, `d_h × d`.
    pub w_o_slice: Matrix,
}

impl HeadSnapshot {
    pub fn new(
        layer: u32,
        head: u32,
        q_window: Matrix,
        keys: Matrix,
        values: Matrix,
        w_o_slice: Matrix,
    ) -> Result<Self> {
        let snap = Self {
            layer,
            head,
            q_window,
            keys,
            values,
            w_o_slice,
        };
        snap.validate()?;
        Ok(snap)
    }

    pub fn validate(&self) -> Result<()> {
        let dh = self.keys.cols();
        if self.keys.rows() != self.values.rows() {
            return Err(Error::Shape(format!(
                "keys have {} rows but values have {}",
                self.keys.rows(),
                self.values.rows()
            )));
        }
        if self.q_window.cols() != dh || self.values.cols() != dh || self.w_o_slice.rows() != dh {
            return Err(Error::Shape(format!(
                "head dims disagree: q {}, k {}, v {}, w_o rows {}",
                self.q_window.cols(),
                dh,
                self.values.cols(),
                self.w_o_slice.rows()
            )));
        }
        if self.keys.rows() == 0 || dh == 0 || self.w_o_slice.cols() == 0 {
            return Err(Error::Shape("head has an empty dimension".into()));
        }
        if self.q_window.rows() > self.keys.rows() {
            return Err(Error::WindowExceedsEntries {
                window: self.q_window.rows(),
                entries: self.keys.rows(),
            });
        }
        for (name, m) in [
            ("q_window", &self.q_window),
            ("keys", &self.keys),
            ("values", &self.values),
            ("w_o_slice", &self.w_o_slice),
        ] {
            if !m.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    /// Cache length `n`.
    pub fn entries(&self) -> usize {
        self.keys.rows()
    }

    pub fn window_rows(&self) -> usize {
        self.q_window.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn model_dim(&self) -> usize {
        self.w_o_slice.cols()
    }

    /// `V · W_O`
    pub fn projected_values(&self) -> Result<Matrix> {
        self.values.matmul(&self.w_o_slice)
    }

    /// Copy with only the kept cache rows. Query rows are trimmed to the most
    /// recent ones when fewer entries than queries remain.
    pub fn compact(&self, mask: &SelectionMask) -> Result<HeadSnapshot> {
        if mask.len() != self.entries() {
            return Err(Error::Shape(format!(
                "mask over {} entries for a head with {}",
                mask.len(),
                self.entries()
            )));
        }
        let kept = mask.kept_indices();
        let q_rows = self.q_window.rows();
        let q_window = self.q_window.row_range(q_rows - q_rows.min(kept.len()), q_rows);
        Ok(HeadSnapshot {
            layer: self.layer,
            head: self.head,
            q_window,
            keys: self.keys.select_rows(&kept),
            values: self.values.select_rows(&kept),
            w_o_slice: self.w_o_slice.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// Equal per-head budgets.
    #[default]
    Flat,
    /// Budgets follow a layer-wide ranking of pooled scores.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    AttentionOnly,
    #[default]
    PerturbationConstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LogitScale {
    /// Divide logits by `√d_h`.
    #[default]
    SqrtHeadDim,
    /// Raw `q·k`.
    None,
}

impl LogitScale {
    pub fn divisor(self, head_dim: usize) -> f64 {
        match self {
            LogitScale::SqrtHeadDim => (head_dim as f64).sqrt(),
            LogitScale::None => 1.0,
        }
    }
}

/// Per-head cache budget, as a fraction of the cache length or an absolute
/// entry count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Fraction(f64),
    Count(usize),
}

impl Budget {
    /// Entries kept out of `entries`; fractions round to nearest.
    pub fn resolve(self, entries: usize) -> Result<usize> {
        match self {
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "budget fraction must lie in (0, 1], got {f}"
                    )));
                }
                Ok(((entries as f64 * f).round() as usize).clamp(1, entries))
            }
            Budget::Count(c) if c > entries => Err(Error::BudgetExceedsEntries {
                budget: c,
                entries,
            }),
            Budget::Count(0) => Err(Error::InvalidArgument("budget count must be positive".into())),
            Budget::Count(c) => Ok(c),
        }
    }
}

impl std::str::FromStr for Budget {
    type Err = Error;

    /// `0.2`, `1.0` and `20%` are fractions, bare integers are counts.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("cannot parse budget {s:?}"));
        if let Some(pct) = s.strip_suffix('%') {
            let p: f64 = pct.trim().parse().map_err(|_| bad())?;
            return Ok(Budget::Fraction(p / 100.0));
        }
        if let Ok(c) = s.parse::<usize>() {
            return Ok(Budget::Count(c));
        }
        s.parse::<f64>().map(Budget::Fraction).map_err(|_| bad())
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::Fraction(x) => write!(f, "{x}"),
            Budget::Count(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvictionConfig {
    /// Per-head budget; a layer's total is this times the head count.
    pub budget: Budget,
    pub window: usize,
    pub pool_kernel: usize,
    pub allocation: Allocation,
    pub selector: Selector,
    pub alpha: f64,
    pub epsilon: f64,
    pub metric: Metric,
    pub logit_scale: LogitScale,
    /// Minimum per-head budget under adaptive allocation; `None` means the
    /// window size.
    pub floor: Option<usize>,
}

impl Default for EvictionConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Fraction(0.2),
            window: DEFAULT_WINDOW,
            pool_kernel: DEFAULT_POOL_KERNEL,
            allocation: Allocation::Flat,
            selector: Selector::PerturbationConstrained,
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            metric: Metric::L1,
            logit_scale: LogitScale::SqrtHeadDim,
            floor: None,
        }
    }
}

impl EvictionConfig {
    pub fn selection(&self, budget: usize) -> SelectionConfig {
        SelectionConfig::new(budget)
            .with_alpha(self.alpha)
            .with_epsilon(self.epsilon)
            .with_metric(self.metric)
    }

    pub fn floor(&self) -> usize {
        self.floor.unwrap_or(self.window).max(self.window)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return Err(Error::InvalidKernel(self.pool_kernel));
        }
        if self.window == 0 {
            return Err(Error::InvalidArgument("observation window must be at least 1".into()));
        }
        self.selection(1).validate()
    }
}

/// Mean softmax attention of the last `cfg.window` queries over all entries,
/// then max-pooled.
pub fn accumulate_window_attention(snap: &HeadSnapshot, cfg: &EvictionConfig) -> Result<Vec<f64>> {
    let mean = mean_window_attention(snap, cfg.window, cfg.logit_scale)?;
    max_pool_1d(&mean, cfg.pool_kernel)
}

/// Unpooled mean attention of the last `window` query rows.
pub fn mean_window_attention(
    snap: &HeadSnapshot,
    window: usize,
    logit_scale: LogitScale,
) -> Result<Vec<f64>> {
    let n = snap.entries();
    if window > n {
        return Err(Error::WindowExceedsEntries { window, entries: n });
    }
    let rows = snap.window_rows();
    if window == 0 {
        return Err(Error::InvalidArgument("observation window must be positive".into()));
    }
    if window > rows {
        return Err(Error::WindowExceedsQueries { window, rows });
    }
    let divisor = logit_scale.divisor(snap.head_dim());
    let mut mean = vec![0.0f64; n];
    for j in rows - window..rows {
        let logits = snap.keys.row_dots(snap.q_window.row(j), 1.0)?;
        let weights = softmax_scaled(&logits, divisor)?;
        mean.iter_mut().zip(&weights).for_each(|(m, w)| *m += w);
    }
    mean.iter_mut().for_each(|m| *m /= window as f64);
    Ok(mean)
}

/// Per-head budgets for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub per_head: Vec<usize>,
    pub total: usize,
}

/// Splits `total` entries across heads.
///
/// Flat gives every head `total / heads`, remainder to the lowest indices.
/// Adaptive starts every head at `floor` and hands out the rest following a
/// layer-wide ranking of all scores (score descending, then head, then
/// entry); a head never receives more than it has scores.
pub fn allocate_budgets(
    layer_scores: &[Vec<f64>],
    total: usize,
    mode: Allocation,
    floor: usize,
) -> Result<BudgetAllocation> {
    let heads = layer_scores.len();
    if heads == 0 {
        return Err(Error::InfeasibleAllocation("no heads".into()));
    }
    let capacity: usize = layer_scores.iter().map(Vec::len).sum();
    if total < heads * floor {
        return Err(Error::InfeasibleAllocation(format!(
            "total {total} below {heads} heads × floor {floor}"
        )));
    }
    if total > capacity {
        return Err(Error::InfeasibleAllocation(format!(
            "total {total} exceeds {capacity} available entries"
        )));
    }
    if let Some(h) = layer_scores.iter().position(|s| s.len() < floor) {
        return Err(Error::InfeasibleAllocation(format!(
            "head {h} has {} entries, below floor {floor}",
            layer_scores[h].len()
        )));
    }
    let per_head = match mode {
        Allocation::Flat => {
            let base = total / heads;
            let extra = total % heads;
            let per_head: Vec<usize> = (0..heads).map(|h| base + usize::from(h < extra)).collect();
            if let Some(h) = (0..heads).find(|&h| per_head[h] > layer_scores[h].len()) {
                return Err(Error::InfeasibleAllocation(format!(
                    "flat share {} exceeds head {h}'s {} entries",
                    per_head[h],
                    layer_scores[h].len()
                )));
            }
            per_head
        }
        Allocation::Adaptive => {
            let flat: Vec<(usize, f64)> = layer_scores
                .iter()
                .enumerate()
                .flat_map(|(h, s)| s.iter().map(move |&v| (h, v)))
                .collect();
            let scores: Vec<f64> = flat.iter().map(|&(_, v)| v).collect();
            // concatenation order is (head, entry), so index order is the tie-break
            let mut order: Vec<usize> = (0..flat.len()).collect();
            order.sort_by(|&x, &y| rank_order(&scores, x, y));
            let mut per_head = vec![floor; heads];
            let mut remaining = total - heads * floor;
            for idx in order {
                if remaining == 0 {
                    break;
                }
                let h = flat[idx].0;
                if per_head[h] < layer_scores[h].len() {
                    per_head[h] += 1;
                    remaining -= 1;
                }
            }
            per_head
        }
    };
    Ok(BudgetAllocation { per_head, total })
}

/// Per-head quantities reused across budgets and selectors.
#[derive(Debug, Clone)]
pub struct PreparedHead {
    /// Pooled window attention over all `n` entries.
    pub scores: Vec<f64>,
    /// `V · W_O`
    pub projected: Matrix,
    /// Row norms of `projected` under the configured metric.
    pub value_norms: Vec<f64>,
    pub window: usize,
}

impl PreparedHead {
    pub fn new(snap: &HeadSnapshot, cfg: &EvictionConfig) -> Result<Self> {
        cfg.validate()?;
        let scores = accumulate_window_attention(snap, cfg)?;
        let projected = snap.projected_values()?;
        let value_norms = cfg.metric.row_norms(&projected);
        Ok(Self {
            scores,
            projected,
            value_norms,
            window: cfg.window,
        })
    }

    pub fn entries(&self) -> usize {
        self.scores.len()
    }

    pub fn prefix_len(&self) -> usize {
        self.entries() - self.window
    }

    pub fn prefix_scores(&self) -> &[f64] {
        &self.scores[..self.prefix_len()]
    }

    /// Keeps the window plus `budget − window` prefix entries chosen by
    /// `selector`.
    pub fn select(&self, budget: usize, selector: Selector, cfg: &EvictionConfig) -> Result<HeadSelection> {
        let n = self.entries();
        if budget > n {
            return Err(Error::BudgetExceedsEntries { budget, entries: n });
        }
        if budget < self.window {
            return Err(Error::BudgetBelowWindow {
                budget,
                window: self.window,
            });
        }
        let prefix = self.prefix_len();
        let prefix_budget = budget - self.window;
        let (prefix_mask, staged) = match selector {
            Selector::AttentionOnly => (select_attention_only(self.prefix_scores(), prefix_budget)?, None),
            Selector::PerturbationConstrained if prefix_budget == 0 => (SelectionMask::empty(prefix), None),
            Selector::PerturbationConstrained => {
                let staged = select_perturbation_constrained(
                    self.prefix_scores(),
                    &self.value_norms[..prefix],
                    &cfg.selection(prefix_budget),
                )?;
                (staged.combined.clone(), Some(staged))
            }
        };
        let mut keep = prefix_mask.keep().to_vec();
        keep.resize(n, true);
        Ok(HeadSelection {
            mask: SelectionMask::from_keep(keep),
            prefix_stages: staged,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSelection {
    /// Mask over all `n` entries, window included.
    pub mask: SelectionMask,
    /// Stage split over the prefix, for the perturbation-constrained selector.
    pub prefix_stages: Option<StagedSelection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadEviction {
    pub layer: u32,
    pub head: u32,
    pub budget: usize,
    pub selection: HeadSelection,
    /// The snapshot with only kept cache rows, original order preserved.
    pub compacted: HeadSnapshot,
}

impl HeadEviction {
    pub fn mask(&self) -> &SelectionMask {
        &self.selection.mask
    }
}

pub fn evict_head(snap: &HeadSnapshot, budget: usize, cfg: &EvictionConfig) -> Result<HeadEviction> {
    let prepared = PreparedHead::new(snap, cfg)?;
    evict_prepared(snap, &prepared, budget, cfg)
}

fn evict_prepared(
    snap: &HeadSnapshot,
    prepared: &PreparedHead,
    budget: usize,
    cfg: &EvictionConfig,
) -> Result<HeadEviction> {
    let selection = prepared.select(budget, cfg.selector, cfg)?;
    let compacted = snap.compact(&selection.mask)?;
    Ok(HeadEviction {
        layer: snap.layer,
        head: snap.head,
        budget,
        selection,
        compacted,
    })
}

/// Per-head budgets for a layer from prepared heads. Every head must have
/// the same cache length.
pub fn allocate_layer(prepared: &[PreparedHead], cfg: &EvictionConfig) -> Result<BudgetAllocation> {
    let first = prepared
        .first()
        .ok_or_else(|| Error::InvalidArgument("layer has no heads".into()))?;
    let n = first.entries();
    if prepared.iter().any(|p| p.entries() != n) {
        return Err(Error::Shape("heads in a layer must share the cache length".into()));
    }
    let per_head = cfg.budget.resolve(n)?;
    if per_head < cfg.window {
        return Err(Error::BudgetBelowWindow {
            budget: per_head,
            window: cfg.window,
        });
    }
    let heads = prepared.len();
    let total = per_head * heads;
    match cfg.allocation {
        Allocation::Flat => allocate_budgets(
            &vec![vec![0.0; n]; heads],
            total,
            Allocation::Flat,
            cfg.window,
        ),
        Allocation::Adaptive => {
            // window entries are kept regardless, so only prefixes compete
            let prefixes: Vec<Vec<f64>> = prepared.iter().map(|p| p.prefix_scores().to_vec()).collect();
            let floor = cfg.floor().min(per_head) - cfg.window;
            let inner = allocate_budgets(&prefixes, total - heads * cfg.window, Allocation::Adaptive, floor)?;
            Ok(BudgetAllocation {
                per_head: inner.per_head.iter().map(|b| b + cfg.window).collect(),
                total,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEviction {
    pub allocation: BudgetAllocation,
    pub heads: Vec<HeadEviction>,
}

/// Accumulate, allocate, then evict every head of one layer.
pub fn evict_layer(snaps: &[HeadSnapshot], cfg: &EvictionConfig) -> Result<LayerEviction> {
    let prepared: Vec<PreparedHead> = snaps
        .par_iter()
        .map(|s| PreparedHead::new(s, cfg))
        .collect::<Result<_>>()?;
    let allocation = allocate_layer(&prepared, cfg)?;
    let heads = snaps
        .par_iter()
        .zip(&prepared)
        .zip(&allocation.per_head)
        .map(|((snap, prep), &budget)| evict_prepared(snap, prep, budget, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerEviction { allocation, heads })
}
