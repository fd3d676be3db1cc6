use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Attention rows are stored post-softmax; each must sum to one within this.
pub const ROW_SUM_TOL: f64 = 1e-5;

fn check_rows(t: &Tensor, what: &str) -> Result<()> {
    for (r, row) in t.rows().enumerate() {
        if let Some(j) = row.iter().position(|&v| v < 0.0) {
            return Err(Error::Trace(format!(
                "{what}: row {r} has negative entry at {j}"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Trace(format!("{what}: row {r} sums to {sum}")));
        }
    }
    Ok(())
}

/// Per-layer attention emitted by a visual encoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncoderLayer {
    /// `[heads, n_tokens]`, the [CLS] query row per head.
    pub cls_attention: Option<Tensor>,
    /// `[heads, n_tokens, n_tokens]`, patch-to-patch attention.
    pub self_attention: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    grid_h: usize,
    grid_w: usize,
    n_heads: usize,
    layers: Vec<EncoderLayer>,
    embeddings: Tensor,
}

impl EncoderTrace {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        n_heads: usize,
        layers: Vec<EncoderLayer>,
        embeddings: Tensor,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || n_heads == 0 || layers.is_empty() {
            return Err(Error::Trace("encoder dims must all be at least 1".into()));
        }
        let n = grid_h * grid_w;
        for (i, layer) in layers.iter().enumerate() {
            let l = i + 1;
            if let Some(cls) = &layer.cls_attention {
                if cls.shape() != [n_heads, n] {
                    return Err(Error::Trace(format!(
                        "layer {l} cls attention has shape {:?}, expected [{n_heads}, {n}]",
                        cls.shape()
                    )));
                }
                check_rows(cls, &format!("layer {l} cls attention"))?;
            }
            if let Some(sa) = &layer.self_attention {
                if sa.shape() != [n_heads, n, n] {
                    return Err(Error::Trace(format!(
                        "layer {l} self attention has shape {:?}, expected [{n_heads}, {n}, {n}]",
                        sa.shape()
                    )));
                }
                check_rows(sa, &format!("layer {l} self attention"))?;
            }
        }
        if embeddings.ndim() != 2 || embeddings.shape()[0] != n {
            return Err(Error::Trace(format!(
                "embeddings have shape {:?}, expected [{n}, D]",
                embeddings.shape()
            )));
        }
        Ok(EncoderTrace {
            grid_h,
            grid_w,
            n_heads,
            layers,
            embeddings,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    /// 1-based layer lookup.
    pub fn layer(&self, layer: usize) -> Result<&EncoderLayer> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| {
                Error::Trace(format!(
                    "layer {layer} outside encoder depth 1..={}",
                    self.layers.len()
                ))
            })
    }
}

/// Token positions of one prompt: `[pre-text | visual | post-text]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub n_pre_text: usize,
    pub n_visual: usize,
    pub n_post_text: usize,
}

impl SeqLayout {
    pub fn seq_len(&self) -> usize {
        self.n_pre_text + self.n_visual + self.n_post_text
    }

    pub fn visual_span(&self) -> Range<usize> {
        self.n_pre_text..self.n_pre_text + self.n_visual
    }

    pub fn n_text(&self) -> usize {
        self.n_pre_text + self.n_post_text
    }

    fn validate(&self) -> Result<()> {
        if self.n_visual == 0 {
            return Err(Error::Layout(
                "layout needs at least one visual token".into(),
            ));
        }
        if self.n_post_text == 0 {
            return Err(Error::Layout(
                "layout needs at least one post-visual text token (the last instruction token)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Last-instruction-token attention rows across decoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    n_heads: usize,
    layout: SeqLayout,
    layers: Vec<Tensor>,
}

impl DecoderTrace {
    /// `layers[j]` is `[heads, seq_len]` for decoder layer `j + 1`.
    pub fn new(n_heads: usize, layout: SeqLayout, layers: Vec<Tensor>) -> Result<Self> {
        layout.validate()?;
        if n_heads == 0 || layers.is_empty() {
            return Err(Error::Trace("decoder dims must all be at least 1".into()));
        }
        let len = layout.seq_len();
        for (i, t) in layers.iter().enumerate() {
            if t.shape() != [n_heads, len] {
                return Err(Error::Trace(format!(
                    "decoder layer {} has shape {:?}, expected [{n_heads}, {len}]",
                    i + 1,
                    t.shape()
                )));
            }
            check_rows(t, &format!("decoder layer {}", i + 1))?;
        }
        Ok(DecoderTrace {
            n_heads,
            layout,
            layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn layout(&self) -> SeqLayout {
        self.layout
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// 1-based layer lookup.
    pub fn layer(&self, layer: usize) -> Result<&Tensor> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| {
                Error::Trace(format!(
                    "layer {layer} outside decoder depth 1..={}",
                    self.layers.len()
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(rows: usize, n: usize) -> Tensor {
        Tensor::matrix(rows, n, vec![1.0 / n as f64; rows * n]).unwrap()
    }

    #[test]
    fn encoder_validation() {
        let emb = Tensor::matrix(4, 3, vec![1.0; 12]).unwrap();
        let layer = EncoderLayer {
            cls_attention: Some(uniform(2, 4)),
            self_attention: None,
        };
        let t = EncoderTrace::new(2, 2, 2, vec![layer.clone()], emb.clone()).unwrap();
        assert_eq!(t.n_tokens(), 4);
        assert!(t.layer(1).is_ok());
        assert!(t.layer(0).is_err());
        assert!(t.layer(2).is_err());

        let bad = EncoderLayer {
            cls_attention: Some(Tensor::matrix(2, 4, vec![0.5; 8]).unwrap()),
            self_attention: None,
        };
        assert!(matches!(
            EncoderTrace::new(2, 2, 2, vec![bad], emb.clone()),
            Err(Error::Trace(_))
        ));
        assert!(EncoderTrace::new(2, 3, 2, vec![layer], emb).is_err());
    }

    #[test]
    fn decoder_validation() {
        let layout = SeqLayout {
            n_pre_text: 2,
            n_visual: 4,
            n_post_text: 4,
        };
        assert_eq!(layout.visual_span(), 2..6);
        let t = DecoderTrace::new(1, layout, vec![uniform(1, 10)]).unwrap();
        assert_eq!(t.n_layers(), 1);
        assert!(DecoderTrace::new(1, layout, vec![uniform(1, 9)]).is_err());
        let no_post = SeqLayout {
            n_post_text: 0,
            ..layout
        };
        assert!(matches!(
            DecoderTrace::new(1, no_post, vec![uniform(1, 6)]),
            Err(Error::Layout(_))
        ));
    }
}
