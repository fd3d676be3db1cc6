//! Measurements over decoder traces: where text-guided selection lands on
//! the image grid, and how much attention the visual span receives per layer.

use std::fmt::Write as _;

use crate::decoder_prune::{prune_at_layer, text_attention_scores, PruneConfig};
use crate::error::{Error, Result};
use crate::trace_io::DecoderTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct BiasHistogram {
    pub layer: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub retention: f64,
    /// Row-major retained-token counts per grid cell (0 or 1 each).
    pub counts: Vec<usize>,
    pub retained: Vec<usize>,
}

impl BiasHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn row_counts(&self) -> Vec<usize> {
        self.counts
            .chunks_exact(self.grid_w)
            .map(|r| r.iter().sum())
            .collect()
    }

    /// Share of retained tokens in rows `ceil(grid_h / 2)..grid_h`; the
    /// middle row of an odd grid counts as neither half.
    pub fn bottom_half_share(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let start = self.grid_h.div_ceil(2);
        let bottom: usize = self.row_counts()[start..].iter().sum();
        bottom as f64 / total as f64
    }

    /// `layer,row,col,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,row,col,count\n");
        self.write_csv_rows(&mut out);
        out
    }

    pub(crate) fn write_csv_rows(&self, out: &mut String) {
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{c}",
                self.layer,
                i / self.grid_w,
                i % self.grid_w
            )
            .unwrap();
        }
    }
}

/// Top `round_half_up(retention * n_visual)` visual tokens by head-averaged
/// last-instruction attention at `layer`, binned on the patch grid. Shares
/// its selection path with stage-two pruning.
pub fn position_bias_histogram(
    dec: &DecoderTrace,
    layer: usize,
    retention: f64,
    grid_h: usize,
    grid_w: usize,
) -> Result<BiasHistogram> {
    let layout = dec.layout();
    if grid_h * grid_w != layout.n_visual {
        return Err(Error::Layout(format!(
            "{grid_h}x{grid_w} grid does not match {} visual tokens",
            layout.n_visual
        )));
    }
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(Error::config(
            "retention",
            format!("{retention} not in (0, 1]"),
        ));
    }
    let scores = text_attention_scores(dec, layer, layout.visual_span())?;
    let cfg = PruneConfig {
        k: layer,
        r2: retention,
        n_layers: dec.n_layers(),
    };
    let profile = prune_at_layer(scores.data(), &cfg, layout.n_visual)?;
    let mut counts = vec![0; layout.n_visual];
    for &i in &profile.retained {
        counts[i] += 1;
    }
    Ok(BiasHistogram {
        layer,
        grid_h,
        grid_w,
        retention,
        counts,
        retained: profile.retained,
    })
}

/// CSV for several layers under one header.
pub fn bias_histograms_csv(hists: &[BiasHistogram]) -> String {
    let mut out = String::from("layer,row,col,count\n");
    for h in hists {
        h.write_csv_rows(&mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSumCurve {
    /// `sums[layer][head]`: last-instruction attention mass on the visual span.
    pub sums: Vec<Vec<f64>>,
    /// Head mean per layer.
    pub head_mean: Vec<f64>,
}

impl AttentionSumCurve {
    /// `layer,head,sum`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,sum\n");
        for (l, heads) in self.sums.iter().enumerate() {
            for (h, s) in heads.iter().enumerate() {
                writeln!(out, "{},{},{s}", l + 1, h + 1).unwrap();
            }
        }
        out
    }

    /// `layer,mean_sum`.
    pub fn head_mean_csv(&self) -> String {
        let mut out = String::from("layer,mean_sum\n");
        for (l, s) in self.head_mean.iter().enumerate() {
            writeln!(out, "{},{s}", l + 1).unwrap();
        }
        out
    }

    /// 1-based layer with the largest head-mean sum (earliest on ties).
    pub fn peak_layer(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.head_mean.iter().enumerate() {
            if *v > self.head_mean[best] {
                best = i;
            }
        }
        best + 1
    }
}

pub fn attention_sum_per_layer(dec: &DecoderTrace) -> AttentionSumCurve {
    let span = dec.layout().visual_span();
    let sums: Vec<Vec<f64>> = dec
        .layers()
        .iter()
        .map(|t| {
            t.rows()
                .map(|row| row[span.clone()].iter().sum::<f64>().clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    let head_mean = sums
        .iter()
        .map(|h| h.iter().sum::<f64>() / h.len() as f64)
        .collect();
    AttentionSumCurve { sums, head_mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::trace_io::SeqLayout;

    fn uniform_trace(layers: usize, heads: usize, layout: SeqLayout) -> DecoderTrace {
        let len = layout.seq_len();
        let t = Tensor::matrix(heads, len, vec![1.0 / len as f64; heads * len]).unwrap();
        DecoderTrace::new(heads, layout, vec![t; layers]).unwrap()
    }

    #[test]
    fn full_retention_histogram_is_all_ones() {
        let layout = SeqLayout {
            n_pre_text: 2,
            n_visual: 6,
            n_post_text: 2,
        };
        let dec = uniform_trace(3, 2, layout);
        let h = position_bias_histogram(&dec, 2, 1.0, 2, 3).unwrap();
        assert_eq!(h.counts, vec![1; 6]);
        assert_eq!(h.total(), 6);
        let csv = h.to_csv();
        assert!(csv.starts_with("layer,row,col,count\n2,0,0,1\n"));
        assert!(position_bias_histogram(&dec, 2, 1.0, 3, 3).is_err());
        assert!(position_bias_histogram(&dec, 2, 0.0, 2, 3).is_err());
    }

    #[test]
    fn uniform_sums() {
        let layout = SeqLayout {
            n_pre_text: 3,
            n_visual: 5,
            n_post_text: 2,
        };
        let c = attention_sum_per_layer(&uniform_trace(4, 3, layout));
        for layer in &c.sums {
            for s in layer {
                assert!((s - 0.5).abs() < 1e-12);
            }
        }
        assert_eq!(c.head_mean.len(), 4);
        assert_eq!(c.to_csv().lines().count(), 1 + 12);
    }

    #[test]
    fn mass_on_last_token_gives_zero() {
        let layout = SeqLayout {
            n_pre_text: 1,
            n_visual: 3,
            n_post_text: 1,
        };
        let t = Tensor::matrix(1, 5, vec![0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let dec = DecoderTrace::new(1, layout, vec![t]).unwrap();
        let c = attention_sum_per_layer(&dec);
        assert_eq!(c.sums, vec![vec![0.0]]);
    }

    #[test]
    fn bottom_half_share_counts_rows() {
        let h = BiasHistogram {
            layer: 1,
            grid_h: 4,
            grid_w: 2,
            retention: 0.5,
            counts: vec![1, 0, 0, 0, 1, 1, 0, 1],
            retained: vec![0, 4, 5, 7],
        };
        assert_eq!(h.row_counts(), vec![1, 0, 2, 1]);
        assert_eq!(h.bottom_half_share(), 0.75);
    }
}
