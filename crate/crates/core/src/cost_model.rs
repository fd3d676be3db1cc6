//! Prefill FLOPs over the decoder, retention/budget arithmetic, and cost
//! report assembly.
//!
//! Per layer with `n` visual tokens, hidden size `d` and FFN size `m`:
//! `4 n d² + 2 n² d + 3 n d m` (projections, causal attention, FFN). Text
//! tokens are not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder_prune::{kv_cache_entries, LayerTokenProfile};
use crate::encoder_scan::{ScoreSource, TokenSelection};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    #[serde(rename = "K")]
    pub n_layers: usize,
    pub d: usize,
    pub m: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("K", self.n_layers), ("d", self.d), ("m", self.m)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Known model families with their decoder dims and default scan/prune layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "llava15")]
    Llava15,
    #[serde(rename = "llava-next")]
    LlavaNext,
    #[serde(rename = "qwen25vl")]
    Qwen25Vl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetInfo {
    pub dims: ModelDims,
    /// Visual tokens per image, when fixed by the model.
    pub visual_tokens: Option<usize>,
    pub encoder_layers: usize,
    pub local_layer: usize,
    pub output_layer: usize,
    pub prune_layer: usize,
    pub score_source: ScoreSource,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Llava15, Preset::LlavaNext, Preset::Qwen25Vl];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Llava15 => "llava15",
            Preset::LlavaNext => "llava-next",
            Preset::Qwen25Vl => "qwen25vl",
        }
    }

    pub fn info(self) -> PresetInfo {
        let llama7b = ModelDims {
            n_layers: 32,
            d: 4096,
            m: 11008,
        };
        match self {
            Preset::Llava15 => PresetInfo {
                dims: llama7b,
                visual_tokens: Some(576),
                encoder_layers: 24,
                local_layer: 6,
                output_layer: 23,
                prune_layer: 16,
                score_source: ScoreSource::Cls,
            },
            Preset::LlavaNext => PresetInfo {
                dims: llama7b,
                visual_tokens: Some(2880),
                encoder_layers: 24,
                local_layer: 6,
                output_layer: 23,
                prune_layer: 16,
                score_source: ScoreSource::Cls,
            },
            Preset::Qwen25Vl => PresetInfo {
                dims: ModelDims {
                    n_layers: 28,
                    d: 3584,
                    m: 18944,
                },
                visual_tokens: None,
                encoder_layers: 32,
                local_layer: 8,
                output_layer: 32,
                prune_layer: 14,
                score_source: ScoreSource::SelfAvg,
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "llava15" | "llava-1.5" | "llava-1.5-7b" => Ok(Preset::Llava15),
            "llava-next" | "llavanext" | "llava-next-7b" => Ok(Preset::LlavaNext),
            "qwen25vl" | "qwen2.5-vl" | "qwen-2.5-vl-7b" => Ok(Preset::Qwen25Vl),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }
}

/// FLOPs of one decoder layer over `n` (possibly fractional) visual tokens.
pub fn layer_flops(n: f64, dims: &ModelDims) -> f64 {
    let (d, m) = (dims.d as f64, dims.m as f64);
    4.0 * n * d * d + 2.0 * n * n * d + 3.0 * n * d * m
}

/// Sum of [`layer_flops`] over a per-layer token profile.
pub fn flops_total(tokens_per_layer: &[usize], dims: &ModelDims) -> Result<f64> {
    if tokens_per_layer.len() != dims.n_layers {
        return Err(Error::Shape(format!(
            "{} layer counts for a {}-layer model",
            tokens_per_layer.len(),
            dims.n_layers
        )));
    }
    Ok(tokens_per_layer
        .iter()
        .map(|&n| layer_flops(n as f64, dims))
        .sum())
}

/// FLOPs with the same `avg_tokens` at every layer.
pub fn flops_uniform(avg_tokens: f64, dims: &ModelDims) -> f64 {
    dims.n_layers as f64 * layer_flops(avg_tokens, dims)
}

fn check_fractions(r1: f64, r2: f64, k: usize, n_layers: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&r1) {
        return Err(Error::config("r1", format!("{r1} not in [0, 1]")));
    }
    if !(0.0..=1.0).contains(&r2) {
        return Err(Error::config("r2", format!("{r2} not in [0, 1]")));
    }
    if k < 1 || k > n_layers {
        return Err(Error::config("k", format!("{k} not in 1..={n_layers}")));
    }
    Ok(())
}

/// Layer-averaged fraction of visual tokens kept: `r1 (k + (K - k) r2) / K`.
pub fn average_retention(r1: f64, r2: f64, k: usize, n_layers: usize) -> Result<f64> {
    check_fractions(r1, r2, k, n_layers)?;
    let kf = k as f64;
    let big_k = n_layers as f64;
    Ok(r1 * (kf + (big_k - kf) * r2) / big_k)
}

/// Stage-one retention that yields `target_avg` for a given stage-two setting.
pub fn solve_r1(target_avg: f64, r2: f64, k: usize, n_layers: usize) -> Result<f64> {
    if !(target_avg > 0.0 && target_avg <= 1.0) {
        return Err(Error::Budget(format!("target {target_avg} not in (0, 1]")));
    }
    check_fractions(1.0, r2, k, n_layers)?;
    let kf = k as f64;
    let big_k = n_layers as f64;
    let share = (kf + (big_k - kf) * r2) / big_k;
    let r1 = target_avg / share;
    if r1 > 1.0 + 1e-12 {
        return Err(Error::Budget(format!(
            "target {target_avg} needs r1 = {r1} > 1 with r2 = {r2}, k = {k}"
        )));
    }
    Ok(r1.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub n_visual_original: usize,
    pub n_merged: usize,
    pub n_retained: usize,
    pub prune_layer: usize,
    pub n_text_total: usize,
    pub dims: ModelDims,
    pub tokens_per_layer: Vec<usize>,
    pub kv_tokens_per_layer: Vec<usize>,
    /// FLOPs of the stepped per-layer profile.
    pub total_flops: f64,
    /// Layer-mean visual tokens.
    pub uniform_avg_tokens: f64,
    /// FLOPs with every layer at `uniform_avg_tokens`, the usual way a
    /// "retain N tokens on average" setting is costed.
    pub total_flops_uniform: f64,
    pub baseline_flops: f64,
    pub avg_retention_overall: f64,
    pub kv_fraction: f64,
    /// `baseline_flops / total_flops`.
    pub prefill_speedup_estimate: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    n_visual_original: usize,
    n_merged: usize,
    n_retained: usize,
    prune_layer: usize,
    n_text_total: usize,
    total_flops: f64,
    uniform_avg_tokens: f64,
    total_flops_uniform: f64,
    baseline_flops: f64,
    avg_retention_overall: f64,
    kv_fraction: f64,
    prefill_speedup_estimate: f64,
    dims: &'a ModelDims,
}

impl CostReport {
    /// `layer,visual_tokens,kv_tokens,flops`, one row per decoder layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,visual_tokens,kv_tokens,flops\n");
        for (i, (&n, &kv)) in self
            .tokens_per_layer
            .iter()
            .zip(&self.kv_tokens_per_layer)
            .enumerate()
        {
            let f = layer_flops(n as f64, &self.dims);
            writeln!(out, "{},{n},{kv},{f:e}", i + 1).unwrap();
        }
        out
    }

    pub fn to_summary(&self) -> String {
        let s = Summary {
            n_visual_original: self.n_visual_original,
            n_merged: self.n_merged,
            n_retained: self.n_retained,
            prune_layer: self.prune_layer,
            n_text_total: self.n_text_total,
            total_flops: self.total_flops,
            uniform_avg_tokens: self.uniform_avg_tokens,
            total_flops_uniform: self.total_flops_uniform,
            baseline_flops: self.baseline_flops,
            avg_retention_overall: self.avg_retention_overall,
            kv_fraction: self.kv_fraction,
            prefill_speedup_estimate: self.prefill_speedup_estimate,
            dims: &self.dims,
        };
        toml::to_string(&s).expect("summary is always serializable")
    }
}

pub fn build_report(
    selection: &TokenSelection,
    profile: &LayerTokenProfile,
    dims: &ModelDims,
    n_text_total: usize,
) -> Result<CostReport> {
    dims.validate()?;
    if profile.n_merged != selection.budget() {
        return Err(Error::Shape(format!(
            "profile covers {} merged tokens, selection kept {}",
            profile.n_merged,
            selection.budget()
        )));
    }
    let n0 = selection.n_tokens;
    let total_flops = flops_total(&profile.counts, dims)?;
    if total_flops <= 0.0 {
        return Err(Error::Budget(
            "profile keeps no visual tokens at any layer".into(),
        ));
    }
    let baseline_flops = flops_uniform(n0 as f64, dims);
    let avg = profile.mean_tokens();
    let kv = kv_cache_entries(profile, n0, n_text_total);
    Ok(CostReport {
        n_visual_original: n0,
        n_merged: profile.n_merged,
        n_retained: profile.retained.len(),
        prune_layer: profile.prune_layer,
        n_text_total,
        dims: *dims,
        tokens_per_layer: profile.counts.clone(),
        kv_tokens_per_layer: kv.per_layer,
        total_flops,
        uniform_avg_tokens: avg,
        total_flops_uniform: flops_uniform(avg, dims),
        baseline_flops,
        avg_retention_overall: avg / n0 as f64,
        kv_fraction: kv.fraction,
        prefill_speedup_estimate: baseline_flops / total_flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder_prune::{prune_at_layer, PruneConfig};
    use std::collections::BTreeMap;

    const LLAVA: ModelDims = ModelDims {
        n_layers: 32,
        d: 4096,
        m: 11008,
    };

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b
    }

    #[test]
    fn flops_headers() {
        // exact integer evaluation: 32 * (4*576*4096^2 + 2*576^2*4096 + 3*576*4096*11008)
        assert_eq!(
            flops_total(&[576; 32], &LLAVA).unwrap(),
            3_817_152_184_320.0
        );
        assert!(rel(flops_uniform(576.0, &LLAVA), 3.817e12) < 0.005);
        assert!(rel(flops_uniform(192.0, &LLAVA), 1.253e12) < 0.005);
        assert!(rel(flops_uniform(64.0, &LLAVA), 0.415e12) < 0.005);
        assert_eq!(flops_total(&[0; 32], &LLAVA).unwrap(), 0.0);
        assert!(flops_total(&[1; 3], &LLAVA).is_err());
    }

    #[test]
    fn quadratic_term_scales_by_four() {
        let dims = ModelDims {
            n_layers: 1,
            d: 8,
            m: 16,
        };
        let n = 10.0;
        let linear = |n: f64| 4.0 * n * 64.0 + 3.0 * n * 8.0 * 16.0;
        let quad = |n: f64| layer_flops(n, &dims) - linear(n);
        assert_eq!(quad(2.0 * n), 4.0 * quad(n));
        assert_eq!(linear(2.0 * n), 2.0 * linear(n));
    }

    #[test]
    fn retention_examples() {
        assert!((average_retention(0.167, 0.333, 16, 32).unwrap() - 0.111).abs() < 0.002);
        assert!((average_retention(1.0, 0.733, 2, 32).unwrap() - 0.75).abs() < 0.001);
        assert_eq!(average_retention(1.0, 0.0, 24, 32).unwrap(), 0.75);
        assert_eq!(average_retention(0.4, 1.0, 7, 32).unwrap(), 0.4);
        assert!(average_retention(0.4, 1.0, 33, 32).is_err());
    }

    #[test]
    fn solve_r1_examples() {
        let r1 = solve_r1(0.111, 0.333, 16, 32).unwrap();
        assert!((r1 - 0.1665).abs() < 1e-3);
        assert!((r1 - 0.111 * 32.0 / (16.0 + 16.0 * 0.333)).abs() < 1e-15);
        assert_eq!(solve_r1(0.3, 1.0, 5, 32).unwrap(), 0.3);
        assert_eq!(solve_r1(0.75, 0.5, 16, 32).unwrap(), 1.0);
        assert!(matches!(solve_r1(0.9, 0.5, 16, 32), Err(Error::Budget(_))));
        assert!(solve_r1(0.0, 0.5, 16, 32).is_err());
    }

    fn selection(n: usize, kept: usize) -> TokenSelection {
        TokenSelection {
            n_tokens: n,
            global_indices: (0..kept).collect(),
            local_indices: vec![],
            selected: (0..kept).collect(),
            merge_assignment: BTreeMap::new(),
            merged_embeddings: None,
        }
    }

    #[test]
    fn identity_report() {
        let sel = selection(576, 576);
        let profile = LayerTokenProfile::unpruned(576, 32);
        let r = build_report(&sel, &profile, &LLAVA, 63).unwrap();
        assert_eq!(r.prefill_speedup_estimate, 1.0);
        assert_eq!(r.kv_fraction, 1.0);
        assert_eq!(r.avg_retention_overall, 1.0);
        assert!(r
            .to_csv()
            .starts_with("layer,visual_tokens,kv_tokens,flops\n1,576,639,"));
        assert_eq!(r.to_csv().lines().count(), 33);
        assert!(r.to_summary().contains("kv_fraction = 1.0"));
    }

    #[test]
    fn reduced_report_matches_uniform_convention() {
        let sel = selection(576, 96);
        let cfg = PruneConfig {
            k: 16,
            r2: 0.333,
            n_layers: 32,
        };
        let profile = prune_at_layer(&vec![1.0; 96], &cfg, 96).unwrap();
        let r = build_report(&sel, &profile, &LLAVA, 63).unwrap();
        assert_eq!(r.uniform_avg_tokens, 64.0);
        assert!(rel(r.total_flops_uniform, 0.415e12) < 0.005);
        assert!(r.total_flops > r.total_flops_uniform);
        assert!(r.prefill_speedup_estimate > 1.0);
        assert!(build_report(&selection(576, 95), &profile, &LLAVA, 63).is_err());
    }

    #[test]
    fn preset_lookup() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        let next = Preset::LlavaNext.info();
        assert!(rel(flops_uniform(2880.0, &next.dims), 20.825e12) < 0.005);
        assert!(rel(flops_uniform(320.0, &next.dims), 2.099e12) < 0.005);
        assert!("gpt".parse::<Preset>().is_err());
    }
}
