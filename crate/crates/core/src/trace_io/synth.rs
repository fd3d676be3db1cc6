//! Seeded synthetic traces with known, constructed attention phenomena.
//!
//! Every component draws from its own [`XorShift64Star`] stream seeded with
//! `seed ^ (tag * 0x9E3779B97F4A7C15)` (wrapping), so disabling one component
//! does not shift the others. Draw order is layer-major, then head, then
//! query row, then key column.
//!
//! | tag | stream                          |
//! |-----|---------------------------------|
//! | 1   | encoder [CLS] logits            |
//! | 2   | encoder self-attention logits   |
//! | 3   | encoder embeddings              |
//! | 4   | decoder last-instruction logits |

use crate::error::{Error, Result};
use crate::numerics::{norm, softmax_slice, Tensor};
use crate::rng::XorShift64Star;

use super::trace::{DecoderTrace, EncoderLayer, EncoderTrace, SeqLayout};

fn stream(seed: u64, tag: u64) -> XorShift64Star {
    XorShift64Star::new(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSynthParams {
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Weight of the distance-decay term at layer 1; falls linearly to zero at
    /// the last layer.
    pub locality_strength: f64,
    pub with_cls: bool,
    pub with_self_attention: bool,
}

impl Default for EncoderSynthParams {
    fn default() -> Self {
        EncoderSynthParams {
            seed: 0,
            grid_h: 6,
            grid_w: 6,
            layers: 4,
            heads: 2,
            embed_dim: 8,
            locality_strength: 0.0,
            with_cls: true,
            with_self_attention: true,
        }
    }
}

/// Distance-kernel weight for 1-based `layer` out of `layers`.
pub fn locality_weight(strength: f64, layer: usize, layers: usize) -> f64 {
    if layers <= 1 {
        strength
    } else {
        strength * (layers - layer) as f64 / (layers - 1) as f64
    }
}

pub fn generate_synthetic_encoder(p: &EncoderSynthParams) -> Result<EncoderTrace> {
    if p.grid_h == 0 || p.grid_w == 0 || p.layers == 0 || p.heads == 0 || p.embed_dim == 0 {
        return Err(Error::config("encoder dims", "all dims must be at least 1"));
    }
    if !(p.locality_strength.is_finite() && p.locality_strength >= 0.0) {
        return Err(Error::config(
            "locality_strength",
            "must be a finite nonnegative number",
        ));
    }
    if !p.with_cls && !p.with_self_attention {
        return Err(Error::config(
            "attention",
            "at least one attention kind must be generated",
        ));
    }
    let n = p.grid_h * p.grid_w;
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|i| ((i / p.grid_w) as f64, (i % p.grid_w) as f64))
        .collect();

    let mut cls_rng = stream(p.seed, 1);
    let mut self_rng = stream(p.seed, 2);
    let mut layers = Vec::with_capacity(p.layers);
    for layer in 1..=p.layers {
        let cls_attention = if p.with_cls {
            let mut data: Vec<f64> = (0..p.heads * n).map(|_| cls_rng.normal()).collect();
            data.chunks_exact_mut(n).for_each(softmax_slice);
            Some(Tensor::matrix(p.heads, n, data)?)
        } else {
            None
        };
        let self_attention = if p.with_self_attention {
            let w = locality_weight(p.locality_strength, layer, p.layers);
            let mut data = Vec::with_capacity(p.heads * n * n);
            for _ in 0..p.heads {
                for &(qi, qj) in &coords {
                    let start = data.len();
                    for &(ki, kj) in &coords {
                        let dist = ((qi - ki).powi(2) + (qj - kj).powi(2)).sqrt();
                        data.push(self_rng.normal() - w * dist);
                    }
                    softmax_slice(&mut data[start..]);
                }
            }
            Some(Tensor::new(vec![p.heads, n, n], data)?)
        } else {
            None
        };
        layers.push(EncoderLayer {
            cls_attention,
            self_attention,
        });
    }

    let mut emb_rng = stream(p.seed, 3);
    let mut emb = Vec::with_capacity(n * p.embed_dim);
    for _ in 0..n {
        let start = emb.len();
        emb.extend((0..p.embed_dim).map(|_| emb_rng.normal()));
        let row = &mut emb[start..];
        let mut len = norm(row);
        if len == 0.0 {
            row[0] = 1.0;
            len = 1.0;
        }
        row.iter_mut().for_each(|v| *v /= len);
    }
    let embeddings = Tensor::matrix(n, p.embed_dim, emb)?;
    EncoderTrace::new(p.grid_h, p.grid_w, p.heads, layers, embeddings)
}

/// Extra logit added to every visual position over an inclusive layer band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualBoost {
    pub first_layer: usize,
    pub last_layer: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSynthParams {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub layout: SeqLayout,
    /// Recency bonus at layer 1, scaled by normalized sequence position and
    /// fading to zero by layer `layers / 2`.
    pub position_bias_strength: f64,
    pub visual_boost: Option<VisualBoost>,
}

impl Default for DecoderSynthParams {
    fn default() -> Self {
        DecoderSynthParams {
            seed: 0,
            layers: 8,
            heads: 2,
            layout: SeqLayout {
                n_pre_text: 5,
                n_visual: 36,
                n_post_text: 10,
            },
            position_bias_strength: 0.0,
            visual_boost: None,
        }
    }
}

/// Recency-bias weight for 1-based `layer` out of `layers`.
pub fn recency_weight(strength: f64, layer: usize, layers: usize) -> f64 {
    let half = layers as f64 / 2.0;
    strength * (1.0 - (layer - 1) as f64 / half).max(0.0)
}

pub fn generate_synthetic_decoder(p: &DecoderSynthParams) -> Result<DecoderTrace> {
    let l = p.layout;
    if p.layers == 0 || p.heads == 0 || l.n_visual == 0 || l.n_post_text == 0 {
        return Err(Error::config(
            "decoder dims",
            "layers, heads, visual and post-text counts must be at least 1",
        ));
    }
    if !(p.position_bias_strength.is_finite() && p.position_bias_strength >= 0.0) {
        return Err(Error::config(
            "position_bias_strength",
            "must be a finite nonnegative number",
        ));
    }
    if let Some(b) = p.visual_boost {
        if b.first_layer == 0 || b.first_layer > b.last_layer || !b.strength.is_finite() {
            return Err(Error::config(
                "visual_boost",
                "need 1 <= first <= last and finite strength",
            ));
        }
    }
    let len = l.seq_len();
    let span = l.visual_span();
    let denom = (len - 1) as f64;
    let mut rng = stream(p.seed, 4);
    let mut layers = Vec::with_capacity(p.layers);
    for layer in 1..=p.layers {
        let recency = recency_weight(p.position_bias_strength, layer, p.layers);
        let boost = match p.visual_boost {
            Some(b) if (b.first_layer..=b.last_layer).contains(&layer) => b.strength,
            _ => 0.0,
        };
        let mut data = Vec::with_capacity(p.heads * len);
        for _ in 0..p.heads {
            let start = data.len();
            for pos in 0..len {
                let mut logit = rng.normal() + recency * pos as f64 / denom;
                if span.contains(&pos) {
                    logit += boost;
                }
                data.push(logit);
            }
            softmax_slice(&mut data[start..]);
        }
        layers.push(Tensor::matrix(p.heads, len, data)?);
    }
    DecoderTrace::new(p.heads, l, layers)
}
