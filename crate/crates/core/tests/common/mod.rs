//! Independent reference implementations used as test oracles. Written with
//! plain loops and std math, sharing no code with the library beyond the
//! `Matrix` container.

#![allow(dead_code, clippy::needless_range_loop)]

use qelim_core::model::{ArchConfig, LmHead, ModelWeights, NormMode, SkipMode};
use qelim_core::Matrix;

/// Singular values, descending, by one-sided Jacobi rotations.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let a = if a.rows() < a.cols() { a.transpose() } else { a.clone() };
    let (m, n) = a.shape();
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = c * x - s * y;
                    u[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

pub fn svd_norm(a: &Matrix) -> f64 {
    singular_values(a)[0]
}

pub fn svd_cond(a: &Matrix) -> f64 {
    let s = singular_values(a);
    s[0] / s[s.len() - 1]
}

pub fn svd_rank(a: &Matrix, rel_tol: f64) -> usize {
    let s = singular_values(a);
    s.iter().filter(|&&x| x > rel_tol * s[0]).count()
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// `𝒮_c(X, W_Q, W_K, W_V)` by per-head, per-row loops.
pub fn naive_scores(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, heads: usize, scale: f64) -> Matrix {
    let q = naive_matmul(x, wq);
    let k = naive_matmul(x, wk);
    let v = naive_matmul(x, wv);
    naive_scores_from(&q, &k, &v, heads, scale)
}

pub fn naive_scores_from(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, scale: f64) -> Matrix {
    let (n, d) = (q.rows(), q.cols());
    let dk = d / heads;
    let mut out = Matrix::zeros(n, d);
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..n {
            let logits: Vec<f64> =
                (0..=i).map(|j| scale * cols.clone().map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                out[(i, c)] = (0..=i).map(|j| w[j] / z * v[(j, c)]).sum();
            }
        }
    }
    out
}

pub fn naive_layernorm(x: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    x.iter().map(|v| (v - mu) / (var + eps).sqrt()).collect()
}

fn naive_norm_rows(x: &Matrix, cfg: &ArchConfig, scale: &Option<Vec<f64>>) -> Matrix {
    match (cfg.norm, scale) {
        (NormMode::LayerNorm { eps }, Some(s)) => {
            let mut out = x.clone();
            for i in 0..x.rows() {
                let z = naive_layernorm(x.row(i), eps);
                for c in 0..x.cols() {
                    out[(i, c)] = z[c] * s[c];
                }
            }
            out
        }
        _ => x.clone(),
    }
}

/// Layer-by-layer model evaluation with loops only.
pub fn naive_forward(tokens: &[usize], m: &ModelWeights, cfg: &ArchConfig) -> Matrix {
    let d = cfg.d_model();
    let mut x = Matrix::from_fn(tokens.len(), d, |i, c| m.e[(tokens[i], c)] + m.e_p[(i, c)]);
    for layer in 0..cfg.n_layers {
        let b = m.block_at(layer, cfg);
        let a_in = naive_norm_rows(&x, cfg, &b.ln1_scale);
        let s = naive_scores(&a_in, &b.attn.w_q, &b.attn.w_k, &b.attn.w_v, cfg.layout.heads(), cfg.attn_scale);
        let attn = naive_matmul(&s, &b.attn.w_o);
        let y = Matrix::from_fn(x.rows(), d, |i, c| x[(i, c)] + attn[(i, c)]);
        let m_in = naive_norm_rows(&y, cfg, &b.ln2_scale);
        let hidden = naive_matmul(&m_in, &b.w_up);
        let hidden = Matrix::from_fn(hidden.rows(), hidden.cols(), |i, j| gelu(hidden[(i, j)]));
        let mlp = naive_matmul(&hidden, &b.w_down);
        x = match cfg.skips {
            SkipMode::AttnOnly => mlp,
            SkipMode::Both => Matrix::from_fn(y.rows(), d, |i, c| y[(i, c)] + mlp[(i, c)]),
        };
    }
    let w_lm = match &m.lm_head {
        LmHead::Tied => m.e.transpose(),
        LmHead::Untied(w) => w.clone(),
    };
    naive_matmul(&x, &w_lm)
}

/// `max |a − b| / (1 + |a|)`.
pub fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs() / (1.0 + x.abs())).fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.max_abs_diff(b).unwrap()
}
