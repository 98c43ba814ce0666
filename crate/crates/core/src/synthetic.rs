//! Deterministic synthetic attention heads with power-law attention.
//!
//! Every head draws a random permutation of Zipf ranks over its cache
//! entries and builds keys so that `q·k/√d_h = s·ln(1/rank) + noise` for
//! every window or probe query. The noise comes from query components
//! orthogonal to a shared signal direction, so different queries of one head
//! agree on which entries matter but not on exact weights. Value rows carry
//! log-normal scales, which spreads the projected value norms over more than
//! an order of magnitude.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eviction::HeadSnapshot;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Cache entries per head.
    pub n: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    /// Query rows stored with each head.
    pub window: usize,
    pub zipf_exponent: f64,
    pub value_scale: f64,
    /// Standard deviation of the per-query logit noise.
    pub logit_noise: f64,
    /// Log-space standard deviation of the value row scales.
    pub norm_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 256,
            head_dim: 16,
            model_dim: 64,
            n_heads: 8,
            window: 32,
            zipf_exponent: 1.0,
            value_scale: 1.0,
            logit_noise: 0.1,
            norm_spread: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.head_dim == 0 || self.model_dim == 0 || self.n_heads == 0 || self.window == 0 {
            return Err(Error::InvalidArgument("synthetic dimensions must be positive".into()));
        }
        if self.window > self.n {
            return Err(Error::WindowExceedsEntries {
                window: self.window,
                entries: self.n,
            });
        }
        for (name, v) in [
            ("zipf exponent", self.zipf_exponent),
            ("value scale", self.value_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("logit noise", self.logit_noise), ("norm spread", self.norm_spread)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

// probe queries come from a disjoint stream so adding probes never perturbs
// the snapshot itself
const PROBE_STREAM_BIT: u64 = 1 << 63;

fn rng_for(spec: &SyntheticSpec, layer: u32, head: u32, probe: bool) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stream = (u64::from(layer) << 32) | u64::from(head);
    rng.set_stream(if probe { stream | PROBE_STREAM_BIT } else { stream });
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Target logits `s·ln(1/rank)` over a random rank permutation, and the
/// orthogonal key components that the query noise couples to.
struct KeyLayout {
    targets: Vec<f64>,
    ortho: Vec<Vec<f64>>,
}

fn key_layout(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> KeyLayout {
    let mut ranks: Vec<usize> = (1..=spec.n).collect();
    ranks.shuffle(rng);
    let targets = ranks
        .iter()
        .map(|&r| -spec.zipf_exponent * (r as f64).ln())
        .collect();
    let ortho = (0..spec.n)
        .map(|_| (1..spec.head_dim).map(|_| normal(rng)).collect())
        .collect();
    KeyLayout { targets, ortho }
}

/// Queries `u + τ·η` with `η ⟂ u`, scaled so `η·w` has unit variance.
fn draw_queries(spec: &SyntheticSpec, rows: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let dh = spec.head_dim;
    let scale = if dh > 1 {
        spec.logit_noise / ((dh - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(rows * dh);
    for _ in 0..rows {
        data.push(1.0f32);
        data.extend((1..dh).map(|_| (scale * normal(rng)) as f32));
    }
    Matrix::new(rows, dh, data).expect("query shape")
}

/// Synthetic head `(layer, head)`; identical inputs give identical output.
pub fn generate_head_at(spec: &SyntheticSpec, layer: u32, head: u32) -> Result<HeadSnapshot> {
    spec.validate()?;
    let (n, dh, d) = (spec.n, spec.head_dim, spec.model_dim);
    let mut rng = rng_for(spec, layer, head, false);
    let layout = key_layout(spec, &mut rng);

    let sqrt_dh = (dh as f64).sqrt();
    let mut keys = Vec::with_capacity(n * dh);
    for (t, w) in layout.targets.iter().zip(&layout.ortho) {
        keys.push((sqrt_dh * t) as f32);
        keys.extend(w.iter().map(|&x| (sqrt_dh * x) as f32));
    }

    let row_scale = LogNormal::new(0.0, spec.norm_spread).expect("valid lognormal");
    let mut values = Vec::with_capacity(n * dh);
    for _ in 0..n {
        let r = spec.value_scale * row_scale.sample(&mut rng);
        values.extend((0..dh).map(|_| (r * normal(&mut rng)) as f32));
    }
    let w_o: Vec<f32> = (0..dh * d)
        .map(|_| (normal(&mut rng) / sqrt_dh) as f32)
        .collect();
    let q_window = draw_queries(spec, spec.window, &mut rng);

    HeadSnapshot::new(
        layer,
        head,
        q_window,
        Matrix::new(n, dh, keys)?,
        Matrix::new(n, dh, values)?,
        Matrix::new(dh, d, w_o)?,
    )
}

/// Layer 0, head 0.
pub fn generate_head(spec: &SyntheticSpec) -> Result<HeadSnapshot> {
    generate_head_at(spec, 0, 0)
}

/// All `n_heads` heads of one layer.
pub fn generate_layer(spec: &SyntheticSpec, layer: u32) -> Result<Vec<HeadSnapshot>> {
    (0..spec.n_heads as u32)
        .map(|h| generate_head_at(spec, layer, h))
        .collect()
}

/// Held-out queries drawn like the window queries of head `(layer, head)`.
pub fn generate_probes(spec: &SyntheticSpec, layer: u32, head: u32, count: usize) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = rng_for(spec, layer, head, true);
    Ok(draw_queries(spec, count, &mut rng))
}
