//! Stage one: pick visually important tokens on the encoder side and fold the
//! rest into them.
//!
//! A *local scan* takes the top tokens inside each spatial window at a shallow
//! encoder layer; a *global scan* then takes the top tokens over the whole
//! image at the output layer, skipping anything the local scan already took.
//! Every unselected token is merged into its most cosine-similar selected
//! token and each group is averaged.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, round_half_up, top_k_among, Tensor};
use crate::trace_io::EncoderTrace;

/// Where per-token importance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Head-averaged attention from the [CLS] token.
    #[default]
    Cls,
    /// Head-averaged attention each token receives from the other tokens.
    SelfAvg,
}

impl std::str::FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(ScoreSource::Cls),
            "self_avg" | "self-avg" => Ok(ScoreSource::SelfAvg),
            other => Err(Error::config(
                "score_source",
                format!("unknown source `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// Fraction of visual tokens kept by stage one, in `(0, 1]`.
    pub r1: f64,
    /// Share of the stage-one budget given to the global scan.
    pub global_fraction: f64,
    /// 1-based encoder layer for the local scan.
    pub local_layer: usize,
    /// 1-based encoder layer for the global scan.
    pub output_layer: usize,
    pub window_rows: usize,
    pub window_cols: usize,
    pub score_source: ScoreSource,
}

impl Default for ScanConfig {
    /// Shallow layer 6 and penultimate layer 23 of a 24-layer encoder, 4x4
    /// windows, an even global/local split.
    fn default() -> Self {
        ScanConfig {
            r1: 0.5,
            global_fraction: 0.5,
            local_layer: 6,
            output_layer: 23,
            window_rows: 4,
            window_cols: 4,
            score_source: ScoreSource::Cls,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self, grid_h: usize, grid_w: usize, n_layers: usize) -> Result<()> {
        if !(self.r1 > 0.0 && self.r1 <= 1.0) {
            return Err(Error::config("r1", format!("{} not in (0, 1]", self.r1)));
        }
        if !(0.0..=1.0).contains(&self.global_fraction) {
            return Err(Error::config(
                "global_fraction",
                format!("{} not in [0, 1]", self.global_fraction),
            ));
        }
        if self.local_layer < 1 || self.local_layer > self.output_layer {
            return Err(Error::config(
                "local_layer",
                format!(
                    "need 1 <= {} <= output_layer {}",
                    self.local_layer, self.output_layer
                ),
            ));
        }
        if self.output_layer > n_layers {
            return Err(Error::config(
                "output_layer",
                format!("{} exceeds encoder depth {n_layers}", self.output_layer),
            ));
        }
        if self.window_rows < 1 || self.window_rows > grid_h {
            return Err(Error::config(
                "window_rows",
                format!("{} not in 1..={grid_h}", self.window_rows),
            ));
        }
        if self.window_cols < 1 || self.window_cols > grid_w {
            return Err(Error::config(
                "window_cols",
                format!("{} not in 1..={grid_w}", self.window_cols),
            ));
        }
        Ok(())
    }
}

/// Outcome of stage one. `merge_assignment` and `merged_embeddings` are
/// filled by [`merge_tokens`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelection {
    pub n_tokens: usize,
    pub global_indices: Vec<usize>,
    pub local_indices: Vec<usize>,
    pub selected: Vec<usize>,
    /// unselected token -> selected token it was merged into
    pub merge_assignment: BTreeMap<usize, usize>,
    pub merged_embeddings: Option<Tensor>,
}

#[derive(Serialize)]
struct SelectionReport<'a> {
    n_tokens: usize,
    budget: usize,
    n_global: usize,
    n_local: usize,
    global_indices: &'a [usize],
    local_indices: &'a [usize],
    selected: &'a [usize],
    merge_assignment: Vec<[usize; 2]>,
}

impl TokenSelection {
    pub fn budget(&self) -> usize {
        self.selected.len()
    }

    /// Token count of every merge group, in ascending selected-index order.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes: BTreeMap<usize, usize> = self.selected.iter().map(|&s| (s, 1)).collect();
        for s in self.merge_assignment.values() {
            *sizes
                .get_mut(s)
                .expect("assignment targets a selected token") += 1;
        }
        sizes.into_values().collect()
    }

    /// TOML report with the index lists and `[unselected, selected]` pairs.
    pub fn to_report(&self) -> String {
        let report = SelectionReport {
            n_tokens: self.n_tokens,
            budget: self.budget(),
            n_global: self.global_indices.len(),
            n_local: self.local_indices.len(),
            global_indices: &self.global_indices,
            local_indices: &self.local_indices,
            selected: &self.selected,
            merge_assignment: self
                .merge_assignment
                .iter()
                .map(|(&u, &s)| [u, s])
                .collect(),
        };
        toml::to_string(&report).expect("selection report is always serializable")
    }
}

/// Per-token importance at a 1-based encoder `layer`.
pub fn head_averaged_scores(
    trace: &EncoderTrace,
    layer: usize,
    source: ScoreSource,
) -> Result<Tensor> {
    let n = trace.n_tokens();
    let heads = trace.n_heads();
    let entry = trace.layer(layer)?;
    let mut scores = vec![0.0; n];
    match source {
        ScoreSource::Cls => {
            let cls = entry
                .cls_attention
                .as_ref()
                .ok_or_else(|| Error::Trace(format!("layer {layer} has no [CLS] attention")))?;
            for row in cls.rows() {
                for (s, v) in scores.iter_mut().zip(row) {
                    *s += v;
                }
            }
            scores.iter_mut().for_each(|s| *s /= heads as f64);
        }
        ScoreSource::SelfAvg => {
            let sa = entry
                .self_attention
                .as_ref()
                .ok_or_else(|| Error::Trace(format!("layer {layer} has no self attention")))?;
            for (r, row) in sa.rows().enumerate() {
                let query = r % n;
                for (key, (s, v)) in scores.iter_mut().zip(row).enumerate() {
                    if key != query {
                        *s += v;
                    }
                }
            }
            // a lone token has no other queries; its score stays 0
            if n > 1 {
                let denom = (heads * (n - 1)) as f64;
                scores.iter_mut().for_each(|s| *s /= denom);
            }
        }
    }
    Tensor::vector(scores)
}

/// Top-`budget` over all indices not in `excluded`, ascending.
pub fn global_scan(scores: &[f64], budget: usize, excluded: &[usize]) -> Result<Vec<usize>> {
    let mut mask = vec![false; scores.len()];
    for &e in excluded {
        if e >= scores.len() {
            return Err(Error::Budget(format!(
                "excluded index {e} outside {} scores",
                scores.len()
            )));
        }
        mask[e] = true;
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !mask[i]).collect();
    if budget > candidates.len() {
        return Err(Error::Budget(format!(
            "global budget {budget} exceeds {} available tokens",
            candidates.len()
        )));
    }
    Ok(top_k_among(scores, &mut candidates, budget))
}

/// Near-equal integer split of `total` into `parts`, larger pieces first.
fn split_extent(total: usize, parts: usize) -> Vec<usize> {
    let (base, rem) = (total / parts, total % parts);
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

/// Tiles the patch grid into `window_rows x window_cols` disjoint windows,
/// listed row-major, each holding ascending token indices.
pub fn partition_windows(
    grid_h: usize,
    grid_w: usize,
    window_rows: usize,
    window_cols: usize,
) -> Result<Vec<Vec<usize>>> {
    if window_rows == 0 || window_cols == 0 || window_rows > grid_h || window_cols > grid_w {
        return Err(Error::config(
            "windows",
            format!("{window_rows}x{window_cols} windows do not fit a {grid_h}x{grid_w} grid"),
        ));
    }
    let heights = split_extent(grid_h, window_rows);
    let widths = split_extent(grid_w, window_cols);
    let mut windows = Vec::with_capacity(window_rows * window_cols);
    let mut r0 = 0;
    for &h in &heights {
        let mut c0 = 0;
        for &w in &widths {
            let cells = (r0..r0 + h)
                .flat_map(|r| (c0..c0 + w).map(move |c| r * grid_w + c))
                .collect();
            windows.push(cells);
            c0 += w;
        }
        r0 += h;
    }
    Ok(windows)
}

/// Splits `budget` evenly over windows, remainder one each in row-major
/// order, then pushes any excess over a window's size onward (wrapping once).
pub fn window_budgets(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    let capacity: usize = sizes.iter().sum();
    if budget > capacity {
        return Err(Error::Budget(format!(
            "local budget {budget} exceeds {capacity} tokens"
        )));
    }
    if sizes.is_empty() {
        return Ok(Vec::new());
    }
    let mut budgets = split_extent(budget, sizes.len());
    let mut carry = 0;
    for (b, &size) in budgets.iter_mut().zip(sizes) {
        *b += carry;
        carry = b.saturating_sub(size);
        *b = (*b).min(size);
    }
    for (b, &size) in budgets.iter_mut().zip(sizes) {
        if carry == 0 {
            break;
        }
        let add = carry.min(size - *b);
        *b += add;
        carry -= add;
    }
    debug_assert_eq!(carry, 0);
    Ok(budgets)
}

/// Per-window top-k, union returned ascending.
pub fn local_scan(scores: &[f64], windows: &[Vec<usize>], budget: usize) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = windows.iter().map(Vec::len).collect();
    let budgets = window_budgets(&sizes, budget)?;
    if let Some(&bad) = windows.iter().flatten().find(|&&i| i >= scores.len()) {
        return Err(Error::Budget(format!(
            "window index {bad} outside {} scores",
            scores.len()
        )));
    }
    let mut picked: Vec<usize> = windows
        .par_iter()
        .zip(budgets.par_iter())
        .flat_map_iter(|(w, &b)| {
            let mut cand = w.clone();
            top_k_among(scores, &mut cand, b)
        })
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Stage-one budget `round_half_up(r1 * n)`; must be at least one token.
pub fn stage1_budget(r1: f64, n_tokens: usize) -> Result<usize> {
    let t = round_half_up(r1 * n_tokens as f64).min(n_tokens);
    if t == 0 {
        return Err(Error::Budget(format!(
            "r1 = {r1} keeps no tokens out of {n_tokens}"
        )));
    }
    Ok(t)
}

/// `(global, local)` split of `total`; the global side rounds up.
pub fn split_budget(total: usize, global_fraction: f64) -> (usize, usize) {
    // shave float noise so 10 * 0.3 doesn't ceil to 4
    let g = ((total as f64 * global_fraction) - 1e-9).ceil().max(0.0) as usize;
    let g = g.min(total);
    (g, total - g)
}

/// Runs both scans from precomputed score vectors. Local first, then global
/// with the local picks excluded.
pub fn select_from_scores(
    local_scores: &[f64],
    global_scores: &[f64],
    grid_h: usize,
    grid_w: usize,
    cfg: &ScanConfig,
) -> Result<TokenSelection> {
    let n = grid_h * grid_w;
    if local_scores.len() != n || global_scores.len() != n {
        return Err(Error::Shape(format!(
            "score vectors must have {n} entries for a {grid_h}x{grid_w} grid"
        )));
    }
    let total = stage1_budget(cfg.r1, n)?;
    let (budget_g, budget_l) = split_budget(total, cfg.global_fraction);
    let windows = partition_windows(grid_h, grid_w, cfg.window_rows, cfg.window_cols)?;
    let local_indices = local_scan(local_scores, &windows, budget_l)?;
    let global_indices = global_scan(global_scores, budget_g, &local_indices)?;
    let mut selected: Vec<usize> = local_indices
        .iter()
        .chain(&global_indices)
        .copied()
        .collect();
    selected.sort_unstable();
    Ok(TokenSelection {
        n_tokens: n,
        global_indices,
        local_indices,
        selected,
        merge_assignment: BTreeMap::new(),
        merged_embeddings: None,
    })
}

/// Global and local token selection over an encoder trace. Merging is a
/// separate step, see [`merge_tokens`].
pub fn select_tokens(trace: &EncoderTrace, cfg: &ScanConfig) -> Result<TokenSelection> {
    let (gh, gw) = trace.grid();
    cfg.validate(gh, gw, trace.n_layers())?;
    let local = head_averaged_scores(trace, cfg.local_layer, cfg.score_source)?;
    let global = head_averaged_scores(trace, cfg.output_layer, cfg.score_source)?;
    select_from_scores(local.data(), global.data(), gh, gw, cfg)
}

/// Assigns each unselected token to the selected token of highest cosine
/// similarity, lowest selected index on ties.
pub fn assign_to_selected(
    embeddings: &Tensor,
    selected: &[usize],
) -> Result<BTreeMap<usize, usize>> {
    if embeddings.ndim() != 2 {
        return Err(Error::Shape(format!(
            "embeddings must be 2-D, got {:?}",
            embeddings.shape()
        )));
    }
    let n = embeddings.shape()[0];
    if selected.is_empty() {
        return Err(Error::Budget("nothing selected to merge into".into()));
    }
    let mut is_selected = vec![false; n];
    for &s in selected {
        if s >= n {
            return Err(Error::Shape(format!(
                "selected index {s} outside {n} tokens"
            )));
        }
        is_selected[s] = true;
    }
    let unselected: Vec<usize> = (0..n).filter(|&i| !is_selected[i]).collect();
    if unselected.is_empty() {
        return Ok(BTreeMap::new());
    }

    let norms: Vec<f64> = embeddings.rows().map(norm).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!(
            "token {i} has a zero-norm embedding"
        )));
    }
    let mut sorted_sel = selected.to_vec();
    sorted_sel.sort_unstable();

    let pairs: Vec<(usize, usize)> = unselected
        .par_iter()
        .map(|&u| {
            let eu = embeddings.row(u);
            let mut best = sorted_sel[0];
            let mut best_sim = f64::NEG_INFINITY;
            for &s in &sorted_sel {
                let dot: f64 = eu.iter().zip(embeddings.row(s)).map(|(a, b)| a * b).sum();
                let sim = (dot / (norms[u] * norms[s])).clamp(-1.0, 1.0);
                if sim > best_sim {
                    best_sim = sim;
                    best = s;
                }
            }
            (u, best)
        })
        .collect();
    Ok(pairs.into_iter().collect())
}

/// Fills `merge_assignment` and `merged_embeddings`. Row `r` of the output is
/// the unweighted mean of selected token `selected[r]` and everything
/// assigned to it.
pub fn merge_tokens(embeddings: &Tensor, selection: &mut TokenSelection) -> Result<()> {
    if embeddings.ndim() != 2 || embeddings.shape()[0] != selection.n_tokens {
        return Err(Error::Shape(format!(
            "embeddings {:?} do not match {} tokens",
            embeddings.shape(),
            selection.n_tokens
        )));
    }
    let assignment = assign_to_selected(embeddings, &selection.selected)?;
    let dim = embeddings.shape()[1];
    let slot: BTreeMap<usize, usize> = selection
        .selected
        .iter()
        .enumerate()
        .map(|(r, &s)| (s, r))
        .collect();

    let mut sums: Vec<f64> = selection
        .selected
        .iter()
        .flat_map(|&s| embeddings.row(s).iter().copied())
        .collect();
    let mut counts = vec![1usize; selection.selected.len()];
    for (&u, &s) in &assignment {
        let r = slot[&s];
        counts[r] += 1;
        for (acc, v) in sums[r * dim..(r + 1) * dim]
            .iter_mut()
            .zip(embeddings.row(u))
        {
            *acc += v;
        }
    }
    for (row, &c) in sums.chunks_exact_mut(dim).zip(&counts) {
        if c > 1 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    selection.merged_embeddings = Some(Tensor::matrix(selection.selected.len(), dim, sums)?);
    selection.merge_assignment = assignment;
    Ok(())
}

/// [`select_tokens`] followed by [`merge_tokens`] on the trace embeddings.
pub fn reduce_encoder(trace: &EncoderTrace, cfg: &ScanConfig) -> Result<TokenSelection> {
    let mut sel = select_tokens(trace, cfg)?;
    merge_tokens(trace.embeddings(), &mut sel)?;
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_io::{EncoderLayer, EncoderTrace};

    fn cls_trace(grid_h: usize, grid_w: usize, rows: Vec<Vec<f64>>) -> EncoderTrace {
        let n = grid_h * grid_w;
        let heads = rows.len();
        let cls = Tensor::matrix(heads, n, rows.concat()).unwrap();
        let emb = Tensor::matrix(n, 2, [1.0, 0.5].repeat(n)).unwrap();
        EncoderTrace::new(
            grid_h,
            grid_w,
            heads,
            vec![EncoderLayer {
                cls_attention: Some(cls),
                self_attention: None,
            }],
            emb,
        )
        .unwrap()
    }

    #[test]
    fn cls_scores_average_heads() {
        let t = cls_trace(1, 3, vec![vec![0.2, 0.3, 0.5]]);
        let s = head_averaged_scores(&t, 1, ScoreSource::Cls).unwrap();
        assert_eq!(s.data(), &[0.2, 0.3, 0.5]);

        let t = cls_trace(1, 2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = head_averaged_scores(&t, 1, ScoreSource::Cls).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        assert!(matches!(
            head_averaged_scores(&t, 1, ScoreSource::SelfAvg),
            Err(Error::Trace(_))
        ));
    }

    #[test]
    fn self_avg_excludes_diagonal() {
        let sa = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let emb = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let t = EncoderTrace::new(
            1,
            2,
            1,
            vec![EncoderLayer {
                cls_attention: None,
                self_attention: Some(sa),
            }],
            emb,
        )
        .unwrap();
        let s = head_averaged_scores(&t, 1, ScoreSource::SelfAvg).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0]);

        // 3 tokens, 2 heads; column means over off-diagonal entries
        let sa = Tensor::new(
            vec![2, 3, 3],
            vec![
                0.5, 0.25, 0.25, 0.2, 0.6, 0.2, 0.1, 0.1, 0.8, //
                0.4, 0.4, 0.2, 0.3, 0.3, 0.4, 0.6, 0.2, 0.2,
            ],
        )
        .unwrap();
        let emb = Tensor::matrix(3, 1, vec![1.0; 3]).unwrap();
        let t = EncoderTrace::new(
            1,
            3,
            2,
            vec![EncoderLayer {
                cls_attention: None,
                self_attention: Some(sa),
            }],
            emb,
        )
        .unwrap();
        let s = head_averaged_scores(&t, 1, ScoreSource::SelfAvg).unwrap();
        let expect = [
            (0.2 + 0.1 + 0.3 + 0.6) / 4.0,
            (0.25 + 0.1 + 0.4 + 0.2) / 4.0,
            (0.25 + 0.2 + 0.2 + 0.4) / 4.0,
        ];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn global_scan_examples() {
        let s = [0.9, 0.8, 0.1, 0.7];
        assert_eq!(global_scan(&s, 2, &[]).unwrap(), vec![0, 1]);
        assert_eq!(global_scan(&s, 2, &[0]).unwrap(), vec![1, 3]);
        assert!(global_scan(&s, 0, &[]).unwrap().is_empty());
        assert!(matches!(global_scan(&s, 4, &[1]), Err(Error::Budget(_))));
    }

    #[test]
    fn partition_examples() {
        let w = partition_windows(4, 4, 2, 2).unwrap();
        assert_eq!(
            w,
            vec![
                vec![0, 1, 4, 5],
                vec![2, 3, 6, 7],
                vec![8, 9, 12, 13],
                vec![10, 11, 14, 15]
            ]
        );
        let w = partition_windows(3, 3, 2, 2).unwrap();
        assert_eq!(w.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 2, 2, 1]);
        assert_eq!(w[0], vec![0, 1, 3, 4]);
        assert_eq!(w[3], vec![8]);
        let w = partition_windows(1, 7, 1, 1).unwrap();
        assert_eq!(w, vec![(0..7).collect::<Vec<_>>()]);
        assert!(partition_windows(3, 3, 4, 1).is_err());
    }

    #[test]
    fn window_budget_rules() {
        assert_eq!(window_budgets(&[4; 4], 8).unwrap(), vec![2, 2, 2, 2]);
        assert_eq!(window_budgets(&[4; 4], 6).unwrap(), vec![2, 2, 1, 1]);
        assert_eq!(window_budgets(&[1, 5], 4).unwrap(), vec![1, 3]);
        // excess from the last window wraps to the front
        assert_eq!(window_budgets(&[5, 1], 4).unwrap(), vec![3, 1]);
        assert_eq!(window_budgets(&[4, 2, 2, 1], 9).unwrap(), vec![4, 2, 2, 1]);
        assert!(matches!(window_budgets(&[1, 1], 3), Err(Error::Budget(_))));
    }

    #[test]
    fn local_scan_picks_per_window() {
        let windows = partition_windows(2, 4, 1, 2).unwrap();
        let scores = [0.1, 0.9, 0.5, 0.2, 0.3, 0.8, 0.7, 0.6];
        assert_eq!(local_scan(&scores, &windows, 2).unwrap(), vec![1, 6]);
        assert_eq!(local_scan(&scores, &windows, 3).unwrap(), vec![1, 5, 6]);
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(stage1_budget(0.5, 576).unwrap(), 288);
        assert_eq!(split_budget(288, 0.5), (144, 144));
        assert_eq!(stage1_budget(0.3, 16).unwrap(), 5);
        assert_eq!(split_budget(5, 0.5), (3, 2));
        assert_eq!(split_budget(10, 0.3), (3, 7));
        assert_eq!(split_budget(7, 0.0), (0, 7));
        assert_eq!(split_budget(7, 1.0), (7, 0));
        assert!(matches!(stage1_budget(0.01, 10), Err(Error::Budget(_))));
    }

    #[test]
    fn full_retention_selects_everything() {
        let t = cls_trace(2, 2, vec![vec![0.1, 0.2, 0.3, 0.4]]);
        let cfg = ScanConfig {
            r1: 1.0,
            local_layer: 1,
            output_layer: 1,
            window_rows: 1,
            window_cols: 2,
            ..Default::default()
        };
        let sel = reduce_encoder(&t, &cfg).unwrap();
        assert_eq!(sel.selected, vec![0, 1, 2, 3]);
        assert!(sel.merge_assignment.is_empty());
        assert_eq!(sel.merged_embeddings.as_ref().unwrap(), t.embeddings());
    }

    #[test]
    fn config_errors_name_fields() {
        let cfg = ScanConfig {
            output_layer: 30,
            ..Default::default()
        };
        match cfg.validate(24, 24, 24) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "output_layer"),
            other => panic!("{other:?}"),
        }
        let cfg = ScanConfig {
            window_rows: 5,
            ..Default::default()
        };
        assert!(cfg.validate(4, 4, 24).is_err());
        let cfg = ScanConfig {
            r1: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate(24, 24, 24).is_err());
    }

    fn selection_of(n: usize, selected: Vec<usize>) -> TokenSelection {
        TokenSelection {
            n_tokens: n,
            global_indices: selected.clone(),
            local_indices: Vec::new(),
            selected,
            merge_assignment: BTreeMap::new(),
            merged_embeddings: None,
        }
    }

    #[test]
    fn merge_examples() {
        let emb = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut sel = selection_of(2, vec![0]);
        merge_tokens(&emb, &mut sel).unwrap();
        assert_eq!(sel.merged_embeddings.unwrap().data(), &[0.5, 0.5]);
        assert_eq!(sel.merge_assignment, BTreeMap::from([(1, 0)]));

        let emb = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 3.0, 0.0]).unwrap();
        let mut sel = selection_of(3, vec![0, 1]);
        merge_tokens(&emb, &mut sel).unwrap();
        assert_eq!(sel.merge_assignment, BTreeMap::from([(2, 0)]));
        assert_eq!(
            sel.merged_embeddings.as_ref().unwrap().data(),
            &[2.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(sel.group_sizes(), vec![2, 1]);

        let emb = Tensor::matrix(3, 2, vec![0.3, 0.7, -1.0, 2.0, 5.0, 5.0]).unwrap();
        let mut sel = selection_of(3, vec![0, 1, 2]);
        merge_tokens(&emb, &mut sel).unwrap();
        assert_eq!(sel.merged_embeddings.unwrap(), emb);
    }

    #[test]
    fn merge_ties_go_to_lowest_selected() {
        // token 2 is equally similar to 0 and 1
        let emb = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let mut sel = selection_of(3, vec![0, 1]);
        merge_tokens(&emb, &mut sel).unwrap();
        assert_eq!(sel.merge_assignment[&2], 0);
    }

    #[test]
    fn zero_norm_embedding_is_named() {
        let emb = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let mut sel = selection_of(3, vec![0]);
        match merge_tokens(&emb, &mut sel) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("token 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_lists_pairs() {
        let emb = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut sel = selection_of(2, vec![0]);
        merge_tokens(&emb, &mut sel).unwrap();
        let text = sel.to_report();
        assert!(text.contains("selected = [0]"));
        assert!(text.contains("merge_assignment = [[1, 0]]"));
    }
}
