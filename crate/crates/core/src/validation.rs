//! Empirical harnesses: the stage-1 mass check over many heads and the
//! head/layer/budget perturbation sweep comparing both selectors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eviction::{allocate_layer, Budget, EvictionConfig, HeadSnapshot, PreparedHead, Selector};
use crate::perturbation::{output_perturbation, theta_bound, SelectionMask};
use crate::tensor::{softmax_scaled, top_k_indices, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Stage-1 attention mass per head, in input order.
    pub sigma: Vec<f64>,
    pub fraction_satisfied: f64,
    pub budget_fraction: f64,
    pub alpha: f64,
}

impl AssumptionReport {
    pub fn satisfied(&self, head: usize) -> bool {
        self.sigma[head] > 0.5
    }
}

/// Stage-1 size used by the mass check: `max(1, floor(n·fraction·α))`.
pub fn stage1_size(n: usize, budget_fraction: f64, alpha: f64) -> usize {
    ((n as f64 * budget_fraction * alpha + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// For each head, the mass its top `stage1_size` weights capture, and the
/// share of heads where that mass exceeds one half.
pub fn validate_assumption(heads: &[Vec<f64>], budget_fraction: f64, alpha: f64) -> Result<AssumptionReport> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "budget fraction must lie in (0, 1], got {budget_fraction}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let sigma = heads
        .iter()
        .map(|a| {
            let k = stage1_size(a.len(), budget_fraction, alpha).min(a.len());
            Ok(top_k_indices(a, k)?.iter().map(|&i| a[i]).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    let satisfied = sigma.iter().filter(|&&s| s > 0.5).count();
    let fraction_satisfied = if sigma.is_empty() {
        0.0
    } else {
        satisfied as f64 / sigma.len() as f64
    };
    Ok(AssumptionReport {
        sigma,
        fraction_satisfied,
        budget_fraction,
        alpha,
    })
}

/// A head plus the held-out queries used to measure post-eviction
/// perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepHead {
    pub snapshot: HeadSnapshot,
    pub probes: Matrix,
}

impl SweepHead {
    pub fn new(snapshot: HeadSnapshot, probes: Matrix) -> Result<Self> {
        if probes.cols() != snapshot.head_dim() {
            return Err(Error::Shape(format!(
                "probe width {} does not match head dim {}",
                probes.cols(),
                snapshot.head_dim()
            )));
        }
        Ok(Self { snapshot, probes })
    }

    /// Moves the last `probe_steps` query rows of the snapshot out of the
    /// observation window and uses them as probes.
    pub fn hold_out(snapshot: HeadSnapshot, probe_steps: usize) -> Result<Self> {
        let rows = snapshot.window_rows();
        if probe_steps >= rows {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {probe_steps} of {rows} query rows"
            )));
        }
        let probes = snapshot.q_window.row_range(rows - probe_steps, rows);
        let mut snapshot = snapshot;
        snapshot.q_window = snapshot.q_window.row_range(0, rows - probe_steps);
        Ok(Self { snapshot, probes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: u32,
    pub head: u32,
    pub token_step: u32,
    pub budget_fraction: f64,
    pub l_baseline: f64,
    pub l_ours: f64,
    pub theta_baseline: f64,
    pub theta_ours: f64,
    pub improved: bool,
}

impl ReportRow {
    pub fn bounds_hold(&self) -> bool {
        let ok = |l: f64, t: f64| l <= t + 1e-5 * t.abs().max(1.0);
        ok(self.l_baseline, self.theta_baseline) && ok(self.l_ours, self.theta_ours)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub budget_fraction: f64,
    pub heads: usize,
    pub mean_l_baseline: f64,
    pub mean_l_ours: f64,
    /// Heads whose probe-averaged ℒ drops under the perturbation-constrained
    /// selector.
    pub head_improved_fraction: f64,
    pub row_improved_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: u32,
    pub budget_fraction: f64,
    pub mean_l_baseline: f64,
    pub mean_l_ours: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn budget_key(b: f64) -> u64 {
    b.to_bits()
}

impl PerturbationReport {
    pub fn bound_violations(&self) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| !r.bounds_hold()).collect()
    }

    /// Budgets in first-seen order.
    fn budgets(&self) -> Vec<f64> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.iter().any(|&b: &f64| budget_key(b) == budget_key(r.budget_fraction)) {
                seen.push(r.budget_fraction);
            }
        }
        seen
    }

    pub fn by_budget(&self) -> Vec<BudgetSummary> {
        self.budgets()
            .into_iter()
            .map(|b| {
                let rows: Vec<&ReportRow> = self
                    .rows
                    .iter()
                    .filter(|r| budget_key(r.budget_fraction) == budget_key(b))
                    .collect();
                let mut per_head: BTreeMap<(u32, u32), (f64, f64, usize)> = BTreeMap::new();
                for r in &rows {
                    let e = per_head.entry((r.layer, r.head)).or_default();
                    e.0 += r.l_baseline;
                    e.1 += r.l_ours;
                    e.2 += 1;
                }
                let improved_heads = per_head.values().filter(|(base, ours, _)| ours < base).count();
                BudgetSummary {
                    budget_fraction: b,
                    heads: per_head.len(),
                    mean_l_baseline: mean(rows.iter().map(|r| r.l_baseline)),
                    mean_l_ours: mean(rows.iter().map(|r| r.l_ours)),
                    head_improved_fraction: improved_heads as f64 / per_head.len().max(1) as f64,
                    row_improved_fraction: rows.iter().filter(|r| r.improved).count() as f64
                        / rows.len().max(1) as f64,
                }
            })
            .collect()
    }

    pub fn by_layer(&self) -> Vec<LayerSummary> {
        let mut groups: BTreeMap<(u32, usize), Vec<&ReportRow>> = BTreeMap::new();
        let budgets = self.budgets();
        for r in &self.rows {
            let bi = budgets
                .iter()
                .position(|&b| budget_key(b) == budget_key(r.budget_fraction))
                .expect("budget seen");
            groups.entry((r.layer, bi)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((layer, bi), rows)| LayerSummary {
                layer,
                budget_fraction: budgets[bi],
                mean_l_baseline: mean(rows.iter().map(|r| r.l_baseline)),
                mean_l_ours: mean(rows.iter().map(|r| r.l_ours)),
            })
            .collect()
    }
}

struct ProbeAttention {
    weights: Vec<Vec<f64>>,
}

fn probe_attention(head: &SweepHead, cfg: &EvictionConfig, steps: usize) -> Result<ProbeAttention> {
    let snap = &head.snapshot;
    let divisor = cfg.logit_scale.divisor(snap.head_dim());
    let weights = (0..steps)
        .map(|t| {
            let logits = snap.keys.row_dots(head.probes.row(t), 1.0)?;
            softmax_scaled(&logits, divisor)
        })
        .collect::<Result<_>>()?;
    Ok(ProbeAttention { weights })
}

fn measure(
    prepared: &PreparedHead,
    probe: &[f64],
    mask: &SelectionMask,
    cfg: &EvictionConfig,
) -> Result<(f64, f64)> {
    let l = output_perturbation(probe, mask, &prepared.projected, cfg.metric)?;
    let theta = theta_bound(probe, mask, &prepared.value_norms)?.theta;
    Ok((l, theta))
}

/// Runs both selectors on every head at every budget fraction and measures
/// ℒ and θ against the first `probe_steps` probe queries of each head.
///
/// Heads are grouped by layer for budget allocation. Rows come back sorted by
/// layer, head, budget (input order) and probe step, independent of thread
/// scheduling.
pub fn reduction_sweep(
    heads: &[SweepHead],
    budgets: &[f64],
    cfg: &EvictionConfig,
    probe_steps: usize,
) -> Result<PerturbationReport> {
    if let Some(&b) = budgets.iter().find(|&&b| !(b > 0.0 && b <= 1.0)) {
        return Err(Error::InvalidArgument(format!("budget fraction {b} outside (0, 1]")));
    }
    if let Some(h) = heads.iter().find(|h| h.probes.rows() < probe_steps) {
        return Err(Error::InvalidArgument(format!(
            "head ({}, {}) has {} probes, {probe_steps} requested",
            h.snapshot.layer,
            h.snapshot.head,
            h.probes.rows()
        )));
    }
    let mut layers: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, h) in heads.iter().enumerate() {
        layers.entry(h.snapshot.layer).or_default().push(i);
    }

    let mut rows = Vec::with_capacity(heads.len() * budgets.len() * probe_steps);
    for members in layers.values() {
        let prepared: Vec<(PreparedHead, ProbeAttention)> = members
            .par_iter()
            .map(|&i| {
                Ok((
                    PreparedHead::new(&heads[i].snapshot, cfg)?,
                    probe_attention(&heads[i], cfg, probe_steps)?,
                ))
            })
            .collect::<Result<_>>()?;
        let only_prepared: Vec<PreparedHead> = prepared.iter().map(|(p, _)| p.clone()).collect();

        let mut layer_rows: Vec<(usize, usize, ReportRow)> = Vec::new();
        for (bi, &fraction) in budgets.iter().enumerate() {
            let budget_cfg = EvictionConfig {
                budget: Budget::Fraction(fraction),
                ..*cfg
            };
            let allocation = allocate_layer(&only_prepared, &budget_cfg)?;
            let head_rows = members
                .par_iter()
                .zip(&prepared)
                .zip(&allocation.per_head)
                .map(|((&i, (prep, probes)), &budget)| {
                    let snap = &heads[i].snapshot;
                    let base = prep.select(budget, Selector::AttentionOnly, &budget_cfg)?.mask;
                    let ours = prep.select(budget, Selector::PerturbationConstrained, &budget_cfg)?.mask;
                    probes
                        .weights
                        .iter()
                        .enumerate()
                        .map(|(t, a)| {
                            let (l_baseline, theta_baseline) = measure(prep, a, &base, &budget_cfg)?;
                            let (l_ours, theta_ours) = measure(prep, a, &ours, &budget_cfg)?;
                            Ok((
                                i,
                                bi,
                                ReportRow {
                                    layer: snap.layer,
                                    head: snap.head,
                                    token_step: t as u32,
                                    budget_fraction: fraction,
                                    l_baseline,
                                    l_ours,
                                    theta_baseline,
                                    theta_ours,
                                    improved: l_ours < l_baseline,
                                },
                            ))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            layer_rows.extend(head_rows.into_iter().flatten());
        }
        layer_rows.sort_by_key(|(i, bi, r)| (heads[*i].snapshot.head, *i, *bi, r.token_step));
        rows.extend(layer_rows.into_iter().map(|(_, _, r)| r));
    }
    Ok(PerturbationReport { rows })
}
