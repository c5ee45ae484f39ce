//! Exact causal attention: the 64-bit reference every sparse result is
//! checked against.

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};

/// One self-attention head with `S` tokens of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub head_id: usize,
}

impl AttentionHead {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, head_id: usize) -> Result<Self> {
        if q.rows() != k.rows() || q.rows() != v.rows() {
            return Err(Error::shape(format!(
                "q/k/v must share the sequence length (got {}, {}, {}); cross-attention is not supported",
                q.rows(),
                k.rows(),
                v.rows()
            )));
        }
        if q.cols() != k.cols() || q.cols() != v.cols() {
            return Err(Error::shape(format!(
                "q/k/v must share the head width (got {}, {}, {})",
                q.cols(),
                k.cols(),
                v.cols()
            )));
        }
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::invalid("a head needs S >= 1 and d >= 1"));
        }
        Ok(Self { q, k, v, head_id })
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    #[inline]
    pub(crate) fn scale(&self) -> f64 {
        1.0 / (self.dim() as f64).sqrt()
    }
}

/// Heads sharing one sequence length and width.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet {
    heads: Vec<AttentionHead>,
    seq_len: usize,
    dim: usize,
}

impl HeadSet {
    pub fn new(heads: Vec<AttentionHead>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::invalid("a head set needs at least one head"))?;
        let (seq_len, dim) = (first.seq_len(), first.dim());
        if let Some(h) = heads
            .iter()
            .find(|h| h.seq_len() != seq_len || h.dim() != dim)
        {
            return Err(Error::shape(format!(
                "head {} is {}x{}, expected {seq_len}x{dim}",
                h.head_id,
                h.seq_len(),
                h.dim()
            )));
        }
        Ok(Self {
            heads,
            seq_len,
            dim,
        })
    }

    pub fn heads(&self) -> &[AttentionHead] {
        &self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn into_heads(self) -> Vec<AttentionHead> {
        self.heads
    }
}

/// `q kᵀ / √d` for every (query, key) pair.
pub fn scaled_scores(q: &Matrix, k: &Matrix, d: usize) -> Result<Matrix> {
    if q.cols() != d || k.cols() != d {
        return Err(Error::shape(format!(
            "scores need q.cols == k.cols == d (got {}, {}, d={d})",
            q.cols(),
            k.cols()
        )));
    }
    if d == 0 {
        return Err(Error::invalid("d must be at least 1"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(q.rows() * k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        out.extend((0..k.rows()).map(|j| dot(qi, k.row(j)) * scale));
    }
    Ok(Matrix::from_vec_unchecked(q.rows(), k.rows(), out))
}

/// Row softmax of a square score matrix under the causal mask `j <= i`.
pub fn causal_row_softmax(scores: &Matrix) -> Result<Matrix> {
    if scores.rows() != scores.cols() {
        return Err(Error::shape(format!(
            "square scores expected, got {}x{}; use causal_row_softmax_at for slices",
            scores.rows(),
            scores.cols()
        )));
    }
    let positions: Vec<usize> = (0..scores.rows()).collect();
    causal_row_softmax_at(scores, &positions)
}

/// Row softmax of a score slice whose row `r` belongs to global query
/// position `positions[r]`; keys after that position get probability 0.
pub fn causal_row_softmax_at(scores: &Matrix, positions: &[usize]) -> Result<Matrix> {
    if positions.len() != scores.rows() {
        return Err(Error::shape(format!(
            "{} query positions for {} score rows",
            positions.len(),
            scores.rows()
        )));
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for (r, &pos) in positions.iter().enumerate() {
        if pos >= scores.cols() {
            return Err(Error::shape(format!(
                "query position {pos} outside {} keys",
                scores.cols()
            )));
        }
        let row = out.row_mut(r);
        row[..=pos].copy_from_slice(&scores.row(r)[..=pos]);
        softmax_in_place(&mut row[..=pos]);
    }
    Ok(out)
}

/// Max-subtracted softmax over the whole slice. Returns `(max, normalizer)`
/// where the normalizer is `Σ exp(x − max)`.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    (max, sum)
}

/// Fills `buf[..=i]` with the scaled scores of query `i` against keys `0..=i`.
#[inline]
pub(crate) fn causal_scores_row(head: &AttentionHead, i: usize, buf: &mut Vec<f64>) {
    let scale = head.scale();
    let qi = head.q.row(i);
    buf.clear();
    buf.extend((0..=i).map(|j| dot(qi, head.k.row(j)) * scale));
}

/// Exact probability row `P[i][0..=i]` of the dense causal attention.
pub(crate) fn probability_row(head: &AttentionHead, i: usize, buf: &mut Vec<f64>) {
    causal_scores_row(head, i, buf);
    softmax_in_place(buf);
}

/// Dense causal attention `softmax(QKᵀ/√d + causal) V` in 64-bit.
///
/// Rows are produced one at a time, so memory stays at `O(S)` besides the
/// output; the arithmetic is that of `causal_row_softmax(scaled_scores(..)) · V`.
pub fn dense_causal_attention(head: &AttentionHead) -> Matrix {
    let (s, d) = (head.seq_len(), head.dim());
    let mut out = Matrix::zeros(s, d);
    let mut buf = Vec::with_capacity(s);
    for i in 0..s {
        probability_row(head, i, &mut buf);
        let oi = out.row_mut(i);
        for (j, &p) in buf.iter().enumerate() {
            axpy(oi, p, head.v.row(j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_dot_product() {
        let s = scaled_scores(&m(&[&[1.0]]), &m(&[&[0.0]]), 1).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
    }

    #[test]
    fn orthogonal_rows() {
        let s = scaled_scores(
            &m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &m(&[&[2.0, 0.0], &[0.0, 2.0]]),
            2,
        )
        .unwrap();
        let r = 2.0 / 2f64.sqrt();
        assert!((s.get(0, 0) - r).abs() < 1e-15);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);
        assert!((s.get(1, 1) - r).abs() < 1e-15);
    }

    #[test]
    fn scores_reject_width_mismatch() {
        assert!(scaled_scores(&m(&[&[1.0, 2.0]]), &m(&[&[1.0]]), 2).is_err());
        assert!(scaled_scores(&m(&[&[1.0]]), &m(&[&[1.0]]), 2).is_err());
    }

    #[test]
    fn uniform_logits() {
        let p = causal_row_softmax(&m(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(p.to_rows(), vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
    }

    #[test]
    fn outlier_does_not_overflow() {
        let scores = m(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 1000.0, -3.0]]);
        let p = causal_row_softmax(&scores).unwrap();
        assert!((p.get(2, 1) - 1.0).abs() < 1e-12);
        assert!(p.get(2, 0) < 1e-300 && p.get(2, 2) < 1e-300);
        assert!(p.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn slice_softmax_uses_global_positions() {
        let scores = m(&[&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0]]);
        let p = causal_row_softmax_at(&scores, &[2, 3]).unwrap();
        assert_eq!(p.row(0), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(p.row(1), &[0.25; 4]);
        assert!(causal_row_softmax_at(&scores, &[4, 0]).is_err());
        assert!(causal_row_softmax(&scores).is_err());
    }

    #[test]
    fn uniform_causal_weights() {
        let head = AttentionHead::new(
            m(&[&[1.0], &[1.0]]),
            m(&[&[0.0], &[0.0]]),
            m(&[&[2.0], &[4.0]]),
            0,
        )
        .unwrap();
        let o = dense_causal_attention(&head);
        assert_eq!(o.to_rows(), vec![vec![2.0], vec![3.0]]);
    }

    #[test]
    fn single_token_returns_value_row() {
        let head = AttentionHead::new(
            m(&[&[0.3, -1.0]]),
            m(&[&[2.0, 0.5]]),
            m(&[&[7.25, -0.125]]),
            0,
        )
        .unwrap();
        assert_eq!(dense_causal_attention(&head).row(0), &[7.25, -0.125]);
    }

    #[test]
    fn cross_attention_rejected() {
        let q = Matrix::zeros(3, 2);
        let k = Matrix::zeros(4, 2);
        let v = Matrix::zeros(4, 2);
        assert!(matches!(AttentionHead::new(q, k, v, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn head_set_requires_matching_shapes() {
        let a = AttentionHead::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::zeros(2, 2), 0)
            .unwrap();
        let b = AttentionHead::new(Matrix::zeros(3, 2), Matrix::zeros(3, 2), Matrix::zeros(3, 2), 1)
            .unwrap();
        assert!(HeadSet::new(vec![a.clone(), b]).is_err());
        assert!(HeadSet::new(vec![]).is_err());
        assert_eq!(HeadSet::new(vec![a]).unwrap().seq_len(), 2);
    }
}
