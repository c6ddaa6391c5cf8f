//! Weight rewrites that remove or reshape query matrices without changing
//! what the network computes.
//!
//! * [`reparametrize_triplet`]: scores depend on `(W_Q, W_K, W_V)` only through
//!   `X W_Q`, `W_Q⁻¹ W_K` and `W_Q⁻¹ W_V`.
//! * [`merge_qk_single_head`] and [`gauge_transform`]: the `W_Q W_Kᵀ`
//!   redundancy within one head and across block-diagonal changes of basis.
//! * [`eliminate_query_attn_skip`] and [`eliminate_query_weight_shared`]:
//!   model-level rewrites that set every `W_Q` to the identity.
//! * [`verify_equivalence`]: compares logits of two models on random inputs.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{AttnWeights, HeadLayout};
use crate::error::{Error, Result};
use crate::linalg::{invert, spectral_norm, Lu, Matrix};
use crate::model::{forward, ArchConfig, BlockWeights, LmHead, ModelWeights, NormMode, Sharing, SkipMode, TokenSeq};
use crate::rng::Rng;

/// Conditioning ceiling for [`reparametrize_triplet`].
pub const TRIPLET_MAX_COND: f64 = 1e6;
/// Default conditioning ceiling for the model-level eliminations.
pub const ELIMINATION_MAX_COND: f64 = 1e4;

/// `W⁻¹` and `cond₂(W)`, failing when the condition number exceeds `max_cond`.
pub fn gated_inverse(w: &Matrix, max_cond: f64) -> Result<(Matrix, f64)> {
    let inv = invert(w)?;
    let cond = spectral_norm(w) * spectral_norm(&inv);
    if !(cond <= max_cond) {
        let pivot = Lu::factor(w)?.min_pivot();
        return Err(Error::SingularMatrix { pivot, cond_estimate: cond });
    }
    Ok((inv, cond))
}

/// `(Θ, W̃_K, W̃_V) = (W_Q, W_Q⁻¹ W_K, W_Q⁻¹ W_V)`, so that
/// `𝒮_c(XΘ, I, W̃_K, W̃_V) = 𝒮_c(X, W_Q, W_K, W_V)`.
pub fn reparametrize_triplet(w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let (inv, _) = gated_inverse(w_q, TRIPLET_MAX_COND)?;
    Ok((w_q.clone(), inv.matmul(w_k)?, inv.matmul(w_v)?))
}

/// `W_K W_Qᵀ`: a single-head attention with query `I` and this key matrix
/// produces the same logits as `(W_Q, W_K)`.
pub fn merge_qk_single_head(w_q: &Matrix, w_k: &Matrix) -> Result<Matrix> {
    if !w_q.is_square() || w_q.shape() != w_k.shape() {
        return Err(Error::shape(format!(
            "merge needs equal square W_Q and W_K, got {}x{} and {}x{}",
            w_q.rows(),
            w_q.cols(),
            w_k.rows(),
            w_k.cols()
        )));
    }
    w_k.matmul_t(w_q)
}

/// `(W_Q D, W_K (Dᵀ)⁻¹, W_V, W_O)` for a block-diagonal `D` aligned with the
/// heads. Every per-head logit matrix is unchanged.
pub fn gauge_transform(w: &AttnWeights, d: &Matrix, layout: &HeadLayout) -> Result<AttnWeights> {
    let n = layout.d_model();
    w.check(n)?;
    if d.shape() != (n, n) {
        return Err(Error::shape(format!("D is {}x{}, expected {n}x{n}", d.rows(), d.cols())));
    }
    let head_of = |i: usize| i / layout.d_k();
    for i in 0..n {
        for j in 0..n {
            if head_of(i) != head_of(j) && d[(i, j)] != 0.0 {
                return Err(Error::shape(format!(
                    "D has a nonzero entry at ({i}, {j}) outside the {} head blocks",
                    layout.heads()
                )));
            }
        }
    }
    let mut d_inv_t = Matrix::zeros(n, n);
    for h in 0..layout.heads() {
        let r = layout.block(h);
        let blk = d.row_block(r.clone()).col_block(r.clone());
        let inv_t = invert(&blk)?.transpose();
        for (a, i) in r.clone().enumerate() {
            for (b, j) in r.clone().enumerate() {
                d_inv_t[(i, j)] = inv_t[(a, b)];
            }
        }
    }
    AttnWeights::new(w.w_q.matmul(d)?, w.w_k.matmul(&d_inv_t)?, w.w_v.clone(), w.w_o.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EliminationMode {
    AttnSkipOnly,
    WeightShared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliminationOptions {
    /// Largest `cond₂(W_Q)` accepted.
    pub max_cond: f64,
    /// Random sequences used to check the result; 0 skips the check.
    pub verify_trials: usize,
    /// Longest verification sequence; 0 means `max_seq`.
    pub verify_seq_len: usize,
    pub seed: u64,
}

impl Default for EliminationOptions {
    fn default() -> Self {
        Self { max_cond: ELIMINATION_MAX_COND, verify_trials: 32, verify_seq_len: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliminationReport {
    pub mode: EliminationMode,
    /// `cond₂(W_Qⁱ)` per stored block.
    pub per_layer_cond: Vec<f64>,
    /// Measured by [`verify_equivalence`]; `None` when no trials ran.
    pub max_logit_rel_err: Option<f64>,
    pub trials: usize,
    pub original_tied: bool,
}

/// Reduced model, its configuration (always untied) and the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Elimination {
    pub weights: ModelWeights,
    pub config: ArchConfig,
    pub report: EliminationReport,
}

fn conjugate_block(b: &BlockWeights, theta: &Matrix, theta_inv: &Matrix, theta_next: &Matrix) -> Result<BlockWeights> {
    let d = theta.rows();
    Ok(BlockWeights {
        attn: AttnWeights::new(
            Matrix::identity(d),
            theta_inv.matmul(&b.attn.w_k)?,
            theta_inv.matmul(&b.attn.w_v)?,
            b.attn.w_o.matmul(theta)?,
        )?,
        w_up: theta_inv.matmul(&b.w_up)?,
        w_down: b.w_down.matmul(theta_next)?,
        ln1_scale: None,
        ln2_scale: None,
    })
}

fn finish(
    original: &ModelWeights,
    cfg: &ArchConfig,
    weights: ModelWeights,
    mode: EliminationMode,
    per_layer_cond: Vec<f64>,
    opts: &EliminationOptions,
) -> Result<Elimination> {
    let config = ArchConfig { tied_lm_head: false, ..cfg.clone() };
    weights.check(&config)?;
    let max_logit_rel_err = if opts.verify_trials > 0 {
        let len = if opts.verify_seq_len == 0 { cfg.max_seq } else { opts.verify_seq_len };
        Some(verify_equivalence(original, cfg, &weights, &config, opts.verify_trials, len, opts.seed)?)
    } else {
        None
    };
    Ok(Elimination {
        weights,
        config,
        report: EliminationReport {
            mode,
            per_layer_cond,
            max_logit_rel_err,
            trials: opts.verify_trials,
            original_tied: cfg.tied_lm_head,
        },
    })
}

/// Remove every `W_Q` from a per-layer model whose blocks skip only around
/// attention and carry no normalization.
///
/// With `Θᵢ = W_Qⁱ` the residual stream entering block `i` is carried as
/// `XᵢΘᵢ`. A tied input head becomes an explicit `Θ₁ᵀEᵀ`.
pub fn eliminate_query_attn_skip(m: &ModelWeights, cfg: &ArchConfig, opts: &EliminationOptions) -> Result<Elimination> {
    m.check(cfg)?;
    if cfg.skips != SkipMode::AttnOnly {
        return Err(Error::ConfigMismatch("attention-skip-only elimination needs skips = attn_only".into()));
    }
    if cfg.norm != NormMode::None {
        return Err(Error::ConfigMismatch("elimination is exact only without normalization".into()));
    }
    if cfg.sharing != Sharing::PerLayer {
        return Err(Error::ConfigMismatch(
            "attention-skip-only elimination needs per-layer weights; use the weight-shared transform".into(),
        ));
    }
    let d = cfg.d_model();
    let mut thetas = Vec::with_capacity(cfg.n_layers);
    let mut conds = Vec::with_capacity(cfg.n_layers);
    for b in &m.blocks {
        let (inv, cond) = gated_inverse(&b.attn.w_q, opts.max_cond)?;
        thetas.push((b.attn.w_q.clone(), inv));
        conds.push(cond);
    }
    let theta_last = if cfg.tied_lm_head { invert(&thetas[0].0.transpose())? } else { Matrix::identity(d) };
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for (i, b) in m.blocks.iter().enumerate() {
        let next = thetas.get(i + 1).map_or(&theta_last, |t| &t.0);
        blocks.push(conjugate_block(b, &thetas[i].0, &thetas[i].1, next)?);
    }
    let e = m.e.matmul(&thetas[0].0)?;
    let lm_head = match &m.lm_head {
        // Θ₁ᵀEᵀ = (EΘ₁)ᵀ, taken from Ẽ so the two stay bit-identical.
        LmHead::Tied => LmHead::Untied(e.transpose()),
        LmHead::Untied(w) => LmHead::Untied(w.clone()),
    };
    let weights = ModelWeights { e_p: m.e_p.matmul(&thetas[0].0)?, e, blocks, lm_head };
    finish(m, cfg, weights, EliminationMode::AttnSkipOnly, conds, opts)
}

/// Remove `W_Q` from a weight-shared model with both skips and no
/// normalization by conjugating the one block with `Θ = W_Q`. The result is
/// valid at any depth.
pub fn eliminate_query_weight_shared(
    m: &ModelWeights,
    cfg: &ArchConfig,
    opts: &EliminationOptions,
) -> Result<Elimination> {
    m.check(cfg)?;
    if cfg.sharing != Sharing::Shared {
        return Err(Error::ConfigMismatch("weight-shared elimination needs sharing = shared".into()));
    }
    if cfg.skips != SkipMode::Both {
        return Err(Error::ConfigMismatch("weight-shared elimination needs skips = both".into()));
    }
    if cfg.norm != NormMode::None {
        return Err(Error::ConfigMismatch("elimination is exact only without normalization".into()));
    }
    let b = &m.blocks[0];
    let theta = &b.attn.w_q;
    let (theta_inv, cond) = gated_inverse(theta, opts.max_cond)?;
    let block = conjugate_block(b, theta, &theta_inv, theta)?;
    let weights = ModelWeights {
        e: m.e.matmul(theta)?,
        e_p: m.e_p.matmul(theta)?,
        blocks: alloc::vec![block],
        lm_head: LmHead::Untied(theta_inv.matmul(&m.lm_head_matrix())?),
    };
    finish(m, cfg, weights, EliminationMode::WeightShared, alloc::vec![cond], opts)
}

/// Largest `|Δlogit| / (1 + |logit|)` over positions and vocabulary for one
/// random sequence, or infinity if any logit is NaN. Trial `t` is seeded
/// with `seed ^ t` and has a uniform length in `1..=seq_len`.
pub fn verify_trial(
    m1: &ModelWeights,
    cfg1: &ArchConfig,
    m2: &ModelWeights,
    cfg2: &ArchConfig,
    seq_len: usize,
    seed: u64,
    trial: u64,
) -> Result<f64> {
    check_comparable(cfg1, cfg2, seq_len)?;
    let mut rng = Rng::seed_from(seed ^ trial);
    let len = 1 + rng.below(seq_len);
    let tokens = TokenSeq::random(len, cfg1, &mut rng)?;
    let a = forward(&tokens, m1, cfg1)?;
    let b = forward(&tokens, m2, cfg2)?;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs() / (1.0 + x.abs())).fold(0.0, |m, r| {
        if r.is_nan() {
            f64::INFINITY
        } else {
            m.max(r)
        }
    }))
}

fn check_comparable(cfg1: &ArchConfig, cfg2: &ArchConfig, seq_len: usize) -> Result<()> {
    if cfg1.vocab != cfg2.vocab || cfg1.max_seq != cfg2.max_seq {
        return Err(Error::ConfigMismatch(format!(
            "models differ in vocab/max_seq: {}/{} vs {}/{}",
            cfg1.vocab, cfg1.max_seq, cfg2.vocab, cfg2.max_seq
        )));
    }
    if seq_len == 0 || seq_len > cfg1.max_seq {
        return Err(Error::InvalidArgument(format!("seq_len must be in 1..={}, got {seq_len}", cfg1.max_seq)));
    }
    Ok(())
}

/// Maximum of [`verify_trial`] over `trials` sequences (0 when `trials = 0`).
pub fn verify_equivalence(
    m1: &ModelWeights,
    cfg1: &ArchConfig,
    m2: &ModelWeights,
    cfg2: &ArchConfig,
    trials: usize,
    seq_len: usize,
    seed: u64,
) -> Result<f64> {
    check_comparable(cfg1, cfg2, seq_len)?;
    let mut worst = 0.0f64;
    for t in 0..trials as u64 {
        worst = worst.max(verify_trial(m1, cfg1, m2, cfg2, seq_len, seed, t)?);
    }
    Ok(worst)
}
