//! Small dense-array kernels shared by the scan, prune and analysis stages.
//!
//! Everything here is a pure function over immutable inputs. Reductions run
//! in index order so results are bit-reproducible.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting empty shapes, zero-sized dims, length
    /// mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape(
                "tensor shape must have at least one dim".into(),
            ));
        }
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "dim {axis} of shape {shape:?} is zero"
            )));
        }
        let len = checked_numel(&shape)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows usize")))?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at flat index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the trailing axis.
    pub fn row_len(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of rows when viewed as `[numel / row_len, row_len]`.
    pub fn n_rows(&self) -> usize {
        self.data.len() / self.row_len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.row_len())
    }

    fn expect_2d(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape(format!(
                "{what} must be 2-D, got shape {other:?}"
            ))),
        }
    }

    fn expect_1d(&self, what: &str) -> Result<usize> {
        match self.shape.as_slice() {
            &[n] => Ok(n),
            other => Err(Error::Shape(format!(
                "{what} must be 1-D, got shape {other:?}"
            ))),
        }
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// `floor(x + 0.5)` clamped at zero; the budget rounding rule used everywhere
/// a fraction of a token count becomes a count.
pub fn round_half_up(x: f64) -> usize {
    let r = (x + 0.5).floor();
    if r <= 0.0 {
        0
    } else {
        r as usize
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable row-wise softmax of a 2-D tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.expect_2d("softmax input")?;
    let mut data = logits.data.clone();
    for row in data.chunks_exact_mut(logits.row_len()) {
        softmax_in_place(row);
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data,
    })
}

/// Applies softmax to a plain slice; used by the trace generators.
pub(crate) fn softmax_slice(row: &mut [f64]) {
    softmax_in_place(row);
}

/// `softmax(query · keysᵀ / sqrt(D))` for `query: [q, D]`, `keys: [n, D]`.
pub fn scaled_attention(query: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let (q, dq) = query.expect_2d("query")?;
    let (n, dk) = keys.expect_2d("keys")?;
    if dq != dk {
        return Err(Error::Shape(format!(
            "query dim {dq} does not match key dim {dk}"
        )));
    }
    let scale = (dq as f64).sqrt().recip();
    let mut logits = Vec::with_capacity(q * n);
    for qr in query.rows() {
        for kr in keys.rows() {
            let dot: f64 = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
            logits.push(dot * scale);
        }
    }
    softmax_rows(&Tensor::matrix(q, n, logits)?)
}

/// Orders `(score, index)` pairs best-first: higher score, then lower index.
pub(crate) fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top-k over a subset of candidate positions of `scores`, returned ascending.
pub(crate) fn top_k_among(scores: &[f64], candidates: &mut [usize], k: usize) -> Vec<usize> {
    debug_assert!(k <= candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
    }
    let mut out = candidates[..k].to_vec();
    out.sort_unstable();
    out
}

/// Indices of the `k` largest scores, ascending by index. Equal scores favour
/// the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Budget(format!(
            "cannot keep {k} of {} scores",
            scores.len()
        )));
    }
    let mut candidates: Vec<usize> = (0..scores.len()).collect();
    Ok(top_k_among(scores, &mut candidates, k))
}

/// Tensor-typed wrapper over [`top_k_indices`].
pub fn top_k_tensor(scores: &Tensor, k: usize) -> Result<Vec<usize>> {
    scores.expect_1d("scores")?;
    top_k_indices(scores.data(), k)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "cosine needs equal non-empty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "zero-norm vector in cosine similarity".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
