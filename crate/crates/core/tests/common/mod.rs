//! Brute-force reference implementations shared by the integration tests.
//! Written from the selection rules directly, without calling the library's
//! own helpers.

#![allow(dead_code)]

use vtr_core::Tensor;

/// Best size-`m` subset of `candidates` by total score; among equal totals
/// the lexicographically smallest ascending index list. Scores should be
/// small integers so the sums compare exactly.
pub fn best_subset(scores: &[f64], candidates: &[usize], m: usize) -> Vec<usize> {
    let c = candidates.len();
    assert!(c <= 20, "oracle is exponential");
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << c) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let mut pick: Vec<usize> = (0..c)
            .filter(|b| mask >> b & 1 == 1)
            .map(|b| candidates[b])
            .collect();
        pick.sort_unstable();
        let total: f64 = pick.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((bt, bp)) => total > *bt || (total == *bt && pick < *bp),
        };
        if better {
            best = Some((total, pick));
        }
    }
    best.map(|(_, p)| p).unwrap_or_default()
}

/// Near-equal split with the larger pieces first.
pub fn extents(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| (total + parts - 1 - i) / parts)
        .collect()
}

pub fn windows(gh: usize, gw: usize, wr: usize, wc: usize) -> Vec<Vec<usize>> {
    let (hs, ws) = (extents(gh, wr), extents(gw, wc));
    let mut out = Vec::new();
    let mut top = 0;
    for h in hs {
        let mut left = 0;
        for &w in &ws {
            let mut cells = Vec::new();
            for r in top..top + h {
                for col in left..left + w {
                    cells.push(r * gw + col);
                }
            }
            out.push(cells);
            left += w;
        }
        top += h;
    }
    out
}

/// Even split, remainder to the first windows, overflow pushed to the next
/// window with room, walking forward and wrapping around once.
pub fn window_budgets(sizes: &[usize], budget: usize) -> Vec<usize> {
    let w = sizes.len();
    let mut b: Vec<usize> = (0..w)
        .map(|i| budget / w + usize::from(i < budget % w))
        .collect();
    let mut carry = 0;
    for step in 0..2 * w {
        let i = step % w;
        b[i] += carry;
        carry = b[i].saturating_sub(sizes[i]);
        b[i] -= carry;
    }
    assert_eq!(carry, 0);
    b
}

pub fn stage1_total(r1: f64, n: usize) -> usize {
    ((r1 * n as f64 + 0.5).floor() as usize).min(n)
}

/// Expected (global, local) picks for a grid with an even global/local
/// split (global takes the odd token).
pub fn selection(
    local_scores: &[f64],
    global_scores: &[f64],
    gh: usize,
    gw: usize,
    wr: usize,
    wc: usize,
    r1: f64,
) -> (Vec<usize>, Vec<usize>) {
    let n = gh * gw;
    let t = stage1_total(r1, n);
    let bg = t.div_ceil(2);
    let bl = t - bg;
    let wins = windows(gh, gw, wr, wc);
    let sizes: Vec<usize> = wins.iter().map(Vec::len).collect();
    let budgets = window_budgets(&sizes, bl);
    let mut local: Vec<usize> = wins
        .iter()
        .zip(&budgets)
        .flat_map(|(w, &b)| best_subset(local_scores, w, b))
        .collect();
    local.sort_unstable();
    let rest: Vec<usize> = (0..n).filter(|i| !local.contains(i)).collect();
    let global = best_subset(global_scores, &rest, bg);
    (global, local)
}

/// Mean over heads and queries of the attention mass a query places on keys
/// within Chebyshev distance 1 of itself (itself included).
pub fn near_mass(self_attention: &Tensor, gh: usize, gw: usize) -> f64 {
    let n = gh * gw;
    let heads = self_attention.shape()[0];
    let data = self_attention.data();
    let mut total = 0.0;
    for h in 0..heads {
        for q in 0..n {
            let (qr, qc) = (q / gw, q % gw);
            let row = &data[(h * n + q) * n..(h * n + q + 1) * n];
            for (k, &a) in row.iter().enumerate() {
                let (kr, kc) = (k / gw, k % gw);
                if qr.abs_diff(kr) <= 1 && qc.abs_diff(kc) <= 1 {
                    total += a;
                }
            }
        }
    }
    total / (heads * n) as f64
}

pub fn int_scores(rng: &mut impl rand::Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..levels) as f64).collect()
}

/// A retention drawn from `[lo, 1]` that keeps at least one of `n` tokens.
pub fn feasible_r1(rng: &mut impl rand::Rng, n: usize, lo: f64) -> f64 {
    loop {
        let r: f64 = rng.random_range(lo..=1.0);
        if stage1_total(r, n) >= 1 {
            return r;
        }
    }
}
