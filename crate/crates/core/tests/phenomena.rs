mod common;

use vtr_core::analysis::{attention_sum_per_layer, position_bias_histogram};
use vtr_core::decoder_prune::text_attention_scores;
use vtr_core::trace_io::{
    generate_synthetic_decoder, generate_synthetic_encoder, DecoderSynthParams, EncoderSynthParams,
    SeqLayout, VisualBoost,
};

fn biased_decoder(
    seed: u64,
    bias: f64,
    boost: Option<VisualBoost>,
) -> vtr_core::trace_io::DecoderTrace {
    generate_synthetic_decoder(&DecoderSynthParams {
        seed,
        layers: 16,
        heads: 2,
        layout: SeqLayout {
            n_pre_text: 5,
            n_visual: 64,
            n_post_text: 10,
        },
        position_bias_strength: bias,
        visual_boost: boost,
    })
    .unwrap()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(xs: &[f64]) -> f64 {
    let rx = ranks(xs);
    let n = xs.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let (mut cov, mut vx, mut vp) = (0.0, 0.0, 0.0);
    for (p, r) in rx.iter().enumerate() {
        let dp = p as f64 - mean;
        let dr = r - mean;
        cov += dp * dr;
        vx += dr * dr;
        vp += dp * dp;
    }
    cov / (vx * vp).sqrt()
}

#[test]
fn recency_bias_orders_scores_by_position() {
    for seed in 0..10 {
        let dec = biased_decoder(seed, 5.0, None);
        let s = text_attention_scores(&dec, 1, dec.layout().visual_span()).unwrap();
        assert!(spearman(s.data()) > 0.0, "seed {seed}");
    }
}

#[test]
fn bias_fades_by_middle_layers() {
    let (mut early, mut late) = (0.0, 0.0);
    for seed in 0..20 {
        let dec = biased_decoder(seed, 5.0, None);
        early += position_bias_histogram(&dec, 1, 0.5, 8, 8)
            .unwrap()
            .bottom_half_share();
        late += position_bias_histogram(&dec, 12, 0.5, 8, 8)
            .unwrap()
            .bottom_half_share();
    }
    assert!(early / 20.0 > 0.6);
    assert!(
        (late / 20.0 - 0.5).abs() < 0.1,
        "late share {}",
        late / 20.0
    );
}

#[test]
fn unbiased_generator_spreads_retained_rows() {
    let grid_h = 8;
    let mut rows = vec![0usize; grid_h];
    for seed in 0..20 {
        let dec = biased_decoder(seed, 0.0, None);
        let h = position_bias_histogram(&dec, 1, 0.5, grid_h, 8).unwrap();
        for (acc, c) in rows.iter_mut().zip(h.row_counts()) {
            *acc += c;
        }
    }
    let total: usize = rows.iter().sum();
    assert_eq!(total, 20 * 32);
    let limit = 1.0 / grid_h as f64 + 0.15;
    for (r, &c) in rows.iter().enumerate() {
        let share = c as f64 / total as f64;
        assert!(share <= limit, "row {r} holds {share}");
    }
}

#[test]
fn visual_boost_band_raises_attention_sum() {
    let boost = VisualBoost {
        first_layer: 6,
        last_layer: 9,
        strength: 4.0,
    };
    for seed in 0..5 {
        let curve = attention_sum_per_layer(&biased_decoder(seed, 0.0, Some(boost)));
        let peak = curve.peak_layer();
        assert!((6..=9).contains(&peak), "seed {seed} peaked at {peak}");
        let inside: f64 = curve.head_mean[5..9].iter().sum::<f64>() / 4.0;
        let outside: f64 = curve.head_mean[..5].iter().sum::<f64>() / 5.0;
        assert!(inside > outside);
    }
}

fn encoder_near(seed: u64, strength: f64) -> (f64, f64) {
    let enc = generate_synthetic_encoder(&EncoderSynthParams {
        seed,
        grid_h: 6,
        grid_w: 6,
        layers: 6,
        heads: 2,
        locality_strength: strength,
        with_cls: false,
        ..Default::default()
    })
    .unwrap();
    let near =
        |l: usize| common::near_mass(enc.layer(l).unwrap().self_attention.as_ref().unwrap(), 6, 6);
    (near(1), near(6))
}

#[test]
fn locality_decays_with_depth() {
    for seed in 0..10 {
        let (first, last) = encoder_near(seed, 10.0);
        assert!(first > last, "seed {seed}: {first} vs {last}");
        assert!(first > 0.5);
    }
}

#[test]
fn zero_locality_keeps_layers_alike() {
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..20 {
        let (f, l) = encoder_near(seed, 0.0);
        first += f;
        last += l;
    }
    assert!((first / last - 1.0).abs() < 0.1, "{first} vs {last}");
}
