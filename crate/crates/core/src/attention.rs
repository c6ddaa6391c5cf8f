//! Multi-head causal self-attention in block-matrix form.
//!
//! A `n × d_model` matrix is split into `h` column blocks of width `d_k`, one
//! per head. Scores for head `i` only ever see the `i`-th blocks of the query
//! and key projections; `W_O` is the only place heads mix.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    d_model: usize,
    heads: usize,
    d_k: usize,
}

impl HeadLayout {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 {
            return Err(Error::InvalidConfig(format!("d_model ({d_model}) and h ({heads}) must both be at least 1")));
        }
        if d_model % heads != 0 {
            return Err(Error::InvalidConfig(format!("d_model ({d_model}) must be divisible by h ({heads})")));
        }
        Ok(Self { d_model, heads, d_k: d_model / heads })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    /// Column range of head `i`.
    pub fn block(&self, i: usize) -> core::ops::Range<usize> {
        i * self.d_k..(i + 1) * self.d_k
    }

    /// The usual `1/√d_k` logit scale.
    pub fn default_scale(&self) -> f64 {
        1.0 / libm::sqrt(self.d_k as f64)
    }
}

/// `W_Q, W_K, W_V, W_O`, each `d_model × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl AttnWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix) -> Result<Self> {
        let w = Self { w_q, w_k, w_v, w_o };
        let d = w.w_q.rows();
        w.check(d)?;
        Ok(w)
    }

    pub fn check(&self, d_model: usize) -> Result<()> {
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if m.shape() != (d_model, d_model) {
                return Err(Error::shape(format!("{name} is {}x{}, expected {d_model}x{d_model}", m.rows(), m.cols())));
            }
        }
        Ok(())
    }
}

/// Block-wise product: head `i` gets `W_i · V_i`, where `W_i` is the `i`-th
/// column block of `w` (`n × d_k`) and `V_i` the `i`-th row block of `v`
/// (`d_k × n'`).
pub fn blockwise_product(w: &Matrix, v: &Matrix, layout: &HeadLayout) -> Result<Vec<Matrix>> {
    if w.cols() != layout.d_model() || v.rows() != layout.d_model() {
        return Err(Error::shape(format!(
            "blockwise product of {}x{} and {}x{} under d_model = {}",
            w.rows(),
            w.cols(),
            v.rows(),
            v.cols(),
            layout.d_model()
        )));
    }
    (0..layout.heads()).map(|i| w.col_block(layout.block(i)).matmul(&v.row_block(layout.block(i)))).collect()
}

/// Per-head row softmax restricted to the causal prefix `j ≤ i`.
///
/// Masked entries are exactly zero; they never enter the max or the sum, so
/// no `-inf` is materialized.
pub fn causal_block_softmax(logits: &[Matrix]) -> Result<Vec<Matrix>> {
    logits
        .iter()
        .map(|a| {
            if !a.is_square() {
                return Err(Error::shape(format!("head logits must be square, got {}x{}", a.rows(), a.cols())));
            }
            let n = a.rows();
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let row = &a.row(i)[..=i];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let out = &mut p.row_mut(i)[..=i];
                let mut sum = 0.0;
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = libm::exp(x - max);
                    sum += *o;
                }
                out.iter_mut().for_each(|o| *o /= sum);
            }
            Ok(p)
        })
        .collect()
}

/// Attention output from precomputed projections `Q = XW_Q`, `K = XW_K`,
/// `V = XW_V` (each `n × d_model`). Returns the concatenated head outputs.
pub fn scores_from_projections(q: &Matrix, k: &Matrix, v: &Matrix, layout: &HeadLayout, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("attention scale must be positive, got {scale}")));
    }
    let n = q.rows();
    for (name, m) in [("Q", q), ("K", k), ("V", v)] {
        if m.shape() != (n, layout.d_model()) {
            return Err(Error::shape(format!(
                "{name} is {}x{}, expected {n}x{}",
                m.rows(),
                m.cols(),
                layout.d_model()
            )));
        }
    }
    let logits: Vec<Matrix> =
        blockwise_product(q, &k.transpose(), layout)?.into_iter().map(|a| a.scale(scale)).collect();
    let probs = causal_block_softmax(&logits)?;
    let mut out = Matrix::zeros(n, layout.d_model());
    for (i, p) in probs.iter().enumerate() {
        let head = p.matmul(&v.col_block(layout.block(i)))?;
        out.set_col_block(layout.block(i).start, &head);
    }
    Ok(out)
}

/// `𝒮_c(X, W_Q, W_K, W_V)`: causal multi-head scores mixed into the values,
/// before the output projection.
pub fn mha_scores(x: &Matrix, w: &AttnWeights, layout: &HeadLayout, scale: f64) -> Result<Matrix> {
    check_input(x, w, layout)?;
    let q = x.matmul(&w.w_q)?;
    let k = x.matmul(&w.w_k)?;
    let v = x.matmul(&w.w_v)?;
    scores_from_projections(&q, &k, &v, layout, scale)
}

/// `Attn(X) = 𝒮_c(X, W_Q, W_K, W_V) · W_O`.
pub fn attn_forward(x: &Matrix, w: &AttnWeights, layout: &HeadLayout, scale: f64) -> Result<Matrix> {
    mha_scores(x, w, layout, scale)?.matmul(&w.w_o)
}

fn check_input(x: &Matrix, w: &AttnWeights, layout: &HeadLayout) -> Result<()> {
    if x.cols() != layout.d_model() {
        return Err(Error::shape(format!("input has {} columns, expected d_model = {}", x.cols(), layout.d_model())));
    }
    if x.rows() == 0 {
        return Err(Error::shape("attention needs at least one position"));
    }
    w.check(layout.d_model())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use crate::rng::Rng;

    fn random_weights(d: usize, rng: &mut Rng) -> AttnWeights {
        let s = 1.0 / libm::sqrt(d as f64);
        AttnWeights::new(
            gaussian_matrix(d, d, s, rng).unwrap(),
            gaussian_matrix(d, d, s, rng).unwrap(),
            gaussian_matrix(d, d, s, rng).unwrap(),
            gaussian_matrix(d, d, s, rng).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn layout_validation() {
        assert!(HeadLayout::new(8, 3).is_err());
        assert!(HeadLayout::new(8, 0).is_err());
        let l = HeadLayout::new(12, 3).unwrap();
        assert_eq!(l.d_k(), 4);
        assert_eq!(l.block(2), 8..12);
    }

    #[test]
    fn blockwise_single_head_is_matmul() {
        let mut rng = Rng::seed_from(1);
        let w = gaussian_matrix(3, 4, 1.0, &mut rng).unwrap();
        let v = gaussian_matrix(4, 3, 1.0, &mut rng).unwrap();
        let l = HeadLayout::new(4, 1).unwrap();
        let out = blockwise_product(&w, &v, &l).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].max_abs_diff(&w.matmul(&v).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn blockwise_blocks_sum_to_full_product() {
        let mut rng = Rng::seed_from(2);
        let w = gaussian_matrix(5, 6, 1.0, &mut rng).unwrap();
        let v = gaussian_matrix(6, 5, 1.0, &mut rng).unwrap();
        let l = HeadLayout::new(6, 3).unwrap();
        let blocks = blockwise_product(&w, &v, &l).unwrap();
        let mut sum = Matrix::zeros(5, 5);
        for b in &blocks {
            sum.add_assign(b).unwrap();
        }
        assert!(sum.max_abs_diff(&w.matmul(&v).unwrap()).unwrap() < 1e-13);
    }

    #[test]
    fn blockwise_shape_error() {
        let l = HeadLayout::new(4, 2).unwrap();
        assert!(blockwise_product(&Matrix::zeros(2, 3), &Matrix::zeros(4, 2), &l).is_err());
    }

    #[test]
    fn softmax_single_element_and_uniform() {
        let p = causal_block_softmax(&[Matrix::from_diag(&[3.7])]).unwrap();
        assert_eq!(p[0][(0, 0)], 1.0);
        let p = causal_block_softmax(&[Matrix::zeros(3, 3)]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((p[0][(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_even_with_huge_logits() {
        let mut rng = Rng::seed_from(3);
        let a = gaussian_matrix(6, 6, 400.0, &mut rng).unwrap();
        let p = causal_block_softmax(&[a]).unwrap();
        for i in 0..6 {
            let s: f64 = p[0].row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            assert!(p[0].row(i)[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_position_returns_first_value_row() {
        let mut rng = Rng::seed_from(4);
        let l = HeadLayout::new(4, 2).unwrap();
        let w = random_weights(4, &mut rng);
        let x = gaussian_matrix(1, 4, 1.0, &mut rng).unwrap();
        let s = mha_scores(&x, &w, &l, l.default_scale()).unwrap();
        let xv = x.matmul(&w.w_v).unwrap();
        assert!(s.max_abs_diff(&xv).unwrap() < 1e-15);
    }

    #[test]
    fn identity_output_projection_and_zero_values() {
        let mut rng = Rng::seed_from(5);
        let l = HeadLayout::new(6, 2).unwrap();
        let mut w = random_weights(6, &mut rng);
        let x = gaussian_matrix(4, 6, 1.0, &mut rng).unwrap();
        w.w_o = Matrix::identity(6);
        let s = mha_scores(&x, &w, &l, 0.3).unwrap();
        assert_eq!(attn_forward(&x, &w, &l, 0.3).unwrap(), s);
        w.w_v = Matrix::zeros(6, 6);
        assert_eq!(attn_forward(&x, &w, &l, 0.3).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn causal_perturbation() {
        let mut rng = Rng::seed_from(6);
        let l = HeadLayout::new(8, 4).unwrap();
        let w = random_weights(8, &mut rng);
        let x = gaussian_matrix(7, 8, 1.0, &mut rng).unwrap();
        let base = attn_forward(&x, &w, &l, l.default_scale()).unwrap();
        for j in 0..7 {
            let mut y = x.clone();
            for c in 0..8 {
                y[(j, c)] += 0.5;
            }
            let out = attn_forward(&y, &w, &l, l.default_scale()).unwrap();
            for i in 0..j {
                assert_eq!(out.row(i), base.row(i), "row {i} changed when perturbing {j}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive_scale() {
        let l = HeadLayout::new(2, 1).unwrap();
        let w = AttnWeights::new(Matrix::identity(2), Matrix::identity(2), Matrix::identity(2), Matrix::identity(2))
            .unwrap();
        assert!(mha_scores(&Matrix::identity(2), &w, &l, 0.0).is_err());
    }
}
