//! Stage two: drop merged visual tokens that the last instruction token barely
//! attends to, once, at a middle decoder layer.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{round_half_up, top_k_indices, Tensor};
use crate::trace_io::DecoderTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// 1-based decoder layer whose text attention ranks the visual tokens;
    /// layers `1..=k` see every merged token, later layers only the kept ones.
    pub k: usize,
    /// Fraction of merged visual tokens kept after layer `k`.
    pub r2: f64,
    /// Total decoder layers.
    #[serde(rename = "K")]
    pub n_layers: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            k: 16,
            r2: 0.333,
            n_layers: 32,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::config("K", "need at least one decoder layer"));
        }
        if self.k < 1 || self.k > self.n_layers {
            return Err(Error::config(
                "k",
                format!("{} not in 1..={}", self.k, self.n_layers),
            ));
        }
        if !(0.0..=1.0).contains(&self.r2) {
            return Err(Error::config("r2", format!("{} not in [0, 1]", self.r2)));
        }
        Ok(())
    }
}

/// Visual tokens alive at each decoder layer after stage-two pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTokenProfile {
    /// `counts[j]` is the visual-token count at layer `j + 1`.
    pub counts: Vec<usize>,
    /// Merged-token positions that survive past layer `k`, ascending.
    pub retained: Vec<usize>,
    pub prune_layer: usize,
    pub n_merged: usize,
}

impl LayerTokenProfile {
    /// `(1/K) Σ n_j`.
    pub fn mean_tokens(&self) -> f64 {
        self.counts.iter().sum::<usize>() as f64 / self.counts.len() as f64
    }

    /// A profile with no stage-two pruning.
    pub fn unpruned(n_merged: usize, n_layers: usize) -> Self {
        LayerTokenProfile {
            counts: vec![n_merged; n_layers],
            retained: (0..n_merged).collect(),
            prune_layer: n_layers,
            n_merged,
        }
    }
}

/// Head-averaged attention from the last instruction token onto
/// `visual_span` at 1-based `layer`.
pub fn text_attention_scores(
    dec: &DecoderTrace,
    layer: usize,
    visual_span: Range<usize>,
) -> Result<Tensor> {
    let layout = dec.layout();
    if visual_span.is_empty() || visual_span.end > layout.seq_len() {
        return Err(Error::Layout(format!(
            "visual span {visual_span:?} outside sequence of length {}",
            layout.seq_len()
        )));
    }
    if visual_span.end >= layout.seq_len() {
        return Err(Error::Layout(
            "visual span covers the last instruction token".into(),
        ));
    }
    let attn = dec.layer(layer)?;
    let mut scores = vec![0.0; visual_span.len()];
    for row in attn.rows() {
        for (s, v) in scores.iter_mut().zip(&row[visual_span.clone()]) {
            *s += v;
        }
    }
    let heads = dec.n_heads() as f64;
    scores.iter_mut().for_each(|s| *s /= heads);
    Tensor::vector(scores)
}

/// Retained count `round_half_up(r2 * n_merged)`.
pub fn stage2_count(r2: f64, n_merged: usize) -> usize {
    round_half_up(r2 * n_merged as f64).min(n_merged)
}

pub fn prune_at_layer(
    scores: &[f64],
    cfg: &PruneConfig,
    n_merged: usize,
) -> Result<LayerTokenProfile> {
    cfg.validate()?;
    if scores.len() != n_merged {
        return Err(Error::Shape(format!(
            "{} text scores for {n_merged} merged tokens",
            scores.len()
        )));
    }
    let keep = stage2_count(cfg.r2, n_merged);
    let retained = top_k_indices(scores, keep)?;
    let counts = (1..=cfg.n_layers)
        .map(|j| if j <= cfg.k { n_merged } else { keep })
        .collect();
    Ok(LayerTokenProfile {
        counts,
        retained,
        prune_layer: cfg.k,
        n_merged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvUsage {
    /// Cached tokens (visual + text) per layer.
    pub per_layer: Vec<usize>,
    /// Cached tokens relative to keeping every original visual token at
    /// every layer.
    pub fraction: f64,
}

/// KV-cache size under `profile`, counting text tokens on both sides of the
/// ratio.
pub fn kv_cache_entries(
    profile: &LayerTokenProfile,
    n_visual_original: usize,
    n_text_total: usize,
) -> KvUsage {
    let per_layer: Vec<usize> = profile.counts.iter().map(|&n| n + n_text_total).collect();
    let kept: usize = per_layer.iter().sum();
    let full = profile.counts.len() * (n_visual_original + n_text_total);
    let fraction = if full == 0 {
        1.0
    } else {
        kept as f64 / full as f64
    };
    KvUsage {
        per_layer,
        fraction,
    }
}
