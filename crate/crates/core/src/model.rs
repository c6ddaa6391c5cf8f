//! Decoder-only transformer without biases.
//!
//! A block is one of
//!
//! * `AttnOnly`: `MLP(N₂(X + Attn(N₁(X))))`, with no skip around the MLP;
//! * `Both`: `Y + MLP(N₂(Y))` with `Y = X + Attn(N₁(X))`;
//!
//! where `MLP(Y) = GELU(Y W_up) W_down` and `Nᵢ` is either the identity or
//! an ε-LayerNorm followed by a learned positive diagonal scale.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{attn_forward, AttnWeights, HeadLayout};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_conditioned, gaussian_matrix, Matrix};
use crate::mlpexp::gelu;
use crate::normconj::layernorm_eps;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    None,
    LayerNorm { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    AttnOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    PerLayer,
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub layout: HeadLayout,
    pub n_layers: usize,
    pub norm: NormMode,
    pub skips: SkipMode,
    pub sharing: Sharing,
    pub attn_scale: f64,
    pub vocab: usize,
    pub max_seq: usize,
    pub tied_lm_head: bool,
}

impl ArchConfig {
    /// Per-layer, attention-skip-only, un-normalized, untied, default scale.
    pub fn new(layout: HeadLayout, n_layers: usize, vocab: usize, max_seq: usize) -> Self {
        Self {
            layout,
            n_layers,
            norm: NormMode::None,
            skips: SkipMode::AttnOnly,
            sharing: Sharing::PerLayer,
            attn_scale: layout.default_scale(),
            vocab,
            max_seq,
            tied_lm_head: false,
        }
    }

    pub fn d_model(&self) -> usize {
        self.layout.d_model()
    }

    /// Number of stored blocks: 1 when shared.
    pub fn stored_blocks(&self) -> usize {
        match self.sharing {
            Sharing::PerLayer => self.n_layers,
            Sharing::Shared => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let NormMode::LayerNorm { eps } = self.norm {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(Error::InvalidConfig(format!("LayerNorm eps must be > 0, got {eps}")));
            }
        }
        if !(self.attn_scale > 0.0) || !self.attn_scale.is_finite() {
            return Err(Error::InvalidConfig(format!("attn_scale must be > 0, got {}", self.attn_scale)));
        }
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("n_layers must be at least 1".into()));
        }
        if self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::InvalidConfig("vocab and max_seq must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn: AttnWeights,
    /// `d_model × 4·d_model`
    pub w_up: Matrix,
    /// `4·d_model × d_model`
    pub w_down: Matrix,
    pub ln1_scale: Option<Vec<f64>>,
    pub ln2_scale: Option<Vec<f64>>,
}

impl BlockWeights {
    pub fn check(&self, cfg: &ArchConfig) -> Result<()> {
        let d = cfg.d_model();
        self.attn.check(d)?;
        if self.w_up.shape() != (d, 4 * d) || self.w_down.shape() != (4 * d, d) {
            return Err(Error::shape(format!(
                "MLP weights {}x{} / {}x{}, expected {d}x{} / {}x{d}",
                self.w_up.rows(),
                self.w_up.cols(),
                self.w_down.rows(),
                self.w_down.cols(),
                4 * d,
                4 * d
            )));
        }
        let want_ln = matches!(cfg.norm, NormMode::LayerNorm { .. });
        for (name, s) in [("ln1", &self.ln1_scale), ("ln2", &self.ln2_scale)] {
            match (want_ln, s) {
                (true, Some(v)) => {
                    if v.len() != d {
                        return Err(Error::shape(format!("{name} scale has {} entries, expected {d}", v.len())));
                    }
                    if v.iter().any(|&x| !(x > 0.0)) {
                        return Err(Error::InvalidConfig(format!("{name} scale entries must be positive")));
                    }
                }
                (true, None) => return Err(Error::shape(format!("{name} scale missing for LayerNorm config"))),
                (false, Some(_)) => {
                    return Err(Error::shape(format!("{name} scale present but config has no normalization")))
                }
                (false, None) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LmHead {
    /// `W_LM = Eᵀ`, never stored separately.
    Tied,
    /// Explicit `d_model × vocab` head.
    Untied(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab × d_model`
    pub e: Matrix,
    /// `max_seq × d_model`
    pub e_p: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub lm_head: LmHead,
}

impl ModelWeights {
    pub fn check(&self, cfg: &ArchConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d_model();
        if self.e.shape() != (cfg.vocab, d) {
            return Err(Error::shape(format!("E is {}x{}, expected {}x{d}", self.e.rows(), self.e.cols(), cfg.vocab)));
        }
        if self.e_p.shape() != (cfg.max_seq, d) {
            return Err(Error::shape(format!(
                "E_P is {}x{}, expected {}x{d}",
                self.e_p.rows(),
                self.e_p.cols(),
                cfg.max_seq
            )));
        }
        if self.blocks.len() != cfg.stored_blocks() {
            return Err(Error::shape(format!(
                "{} blocks stored, config needs {}",
                self.blocks.len(),
                cfg.stored_blocks()
            )));
        }
        for b in &self.blocks {
            b.check(cfg)?;
        }
        match (&self.lm_head, cfg.tied_lm_head) {
            (LmHead::Tied, true) => Ok(()),
            (LmHead::Untied(w), false) if w.shape() == (d, cfg.vocab) => Ok(()),
            (LmHead::Untied(w), false) => {
                Err(Error::shape(format!("W_LM is {}x{}, expected {d}x{}", w.rows(), w.cols(), cfg.vocab)))
            }
            _ => Err(Error::InvalidConfig("LM head tying disagrees with config".into())),
        }
    }

    /// Block used at layer `layer` (0-based).
    pub fn block_at(&self, layer: usize, cfg: &ArchConfig) -> &BlockWeights {
        match cfg.sharing {
            Sharing::PerLayer => &self.blocks[layer],
            Sharing::Shared => &self.blocks[0],
        }
    }

    /// `W_LM` as an owned matrix (`Eᵀ` when tied).
    pub fn lm_head_matrix(&self) -> Matrix {
        match &self.lm_head {
            LmHead::Tied => self.e.transpose(),
            LmHead::Untied(w) => w.clone(),
        }
    }
}

/// Validated token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>, cfg: &ArchConfig) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > cfg.max_seq {
            return Err(Error::SequenceTooLong { len: ids.len(), max: cfg.max_seq });
        }
        if let Some(&t) = ids.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab });
        }
        Ok(Self(ids))
    }

    /// Uniformly random sequence of length `len`.
    pub fn random(len: usize, cfg: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        let ids = (0..len).map(|_| rng.below(cfg.vocab)).collect();
        Self::new(ids, cfg)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Row-wise ε-LayerNorm followed by the diagonal scale.
pub fn normalize_rows(x: &Matrix, eps: f64, scale: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let z = layernorm_eps(x.row(i), eps);
        for ((o, zi), s) in out.row_mut(i).iter_mut().zip(z).zip(scale) {
            *o = zi * s;
        }
    }
    out
}

fn pre_norm(x: &Matrix, scale: &Option<Vec<f64>>, cfg: &ArchConfig) -> Matrix {
    match (cfg.norm, scale) {
        (NormMode::LayerNorm { eps }, Some(s)) => normalize_rows(x, eps, s),
        _ => x.clone(),
    }
}

/// `GELU(Y W_up) W_down`.
pub fn mlp_forward(y: &Matrix, w_up: &Matrix, w_down: &Matrix) -> Result<Matrix> {
    y.matmul(w_up)?.map(gelu).matmul(w_down)
}

pub fn block_forward(x: &Matrix, b: &BlockWeights, cfg: &ArchConfig) -> Result<Matrix> {
    b.check(cfg)?;
    let attn_in = pre_norm(x, &b.ln1_scale, cfg);
    let attn = attn_forward(&attn_in, &b.attn, &cfg.layout, cfg.attn_scale)?;
    let y = x.add(&attn)?;
    let mlp_in = pre_norm(&y, &b.ln2_scale, cfg);
    let mlp = mlp_forward(&mlp_in, &b.w_up, &b.w_down)?;
    match cfg.skips {
        SkipMode::AttnOnly => Ok(mlp),
        SkipMode::Both => y.add(&mlp),
    }
}

/// `X₀ = E[x] + E_P[0..n]`.
pub fn embed(tokens: &TokenSeq, m: &ModelWeights) -> Matrix {
    let d = m.e.cols();
    let mut x = Matrix::zeros(tokens.len(), d);
    for (pos, &t) in tokens.ids().iter().enumerate() {
        for ((o, e), p) in x.row_mut(pos).iter_mut().zip(m.e.row(t)).zip(m.e_p.row(pos)) {
            *o = e + p;
        }
    }
    x
}

/// Logits (`n × vocab`) for a token sequence.
pub fn forward(tokens: &TokenSeq, m: &ModelWeights, cfg: &ArchConfig) -> Result<Matrix> {
    m.check(cfg)?;
    // Revalidate: the sequence may have been built against another config.
    let tokens = TokenSeq::new(tokens.ids().to_vec(), cfg)?;
    let mut x = embed(&tokens, m);
    for layer in 0..cfg.n_layers {
        x = block_forward(&x, m.block_at(layer, cfg), cfg)?;
    }
    match &m.lm_head {
        LmHead::Tied => x.matmul_t(&m.e),
        LmHead::Untied(w) => x.matmul(w),
    }
}

/// Default conditioning ceiling for sampled query matrices.
pub const DEFAULT_MAX_COND: f64 = 100.0;

/// Random weights scaled by `1/√fan_in`; embeddings are unit-variance.
///
/// Each `W_Q` is redrawn until its spectral condition number is at most
/// `max_cond`, so the elimination transforms stay well posed.
pub fn random_model(cfg: &ArchConfig, rng: &mut Rng, max_cond: f64) -> Result<ModelWeights> {
    cfg.validate()?;
    if !(max_cond >= 1.0) {
        return Err(Error::InvalidArgument(format!("max_cond must be >= 1, got {max_cond}")));
    }
    let d = cfg.d_model();
    let s_d = 1.0 / libm::sqrt(d as f64);
    let s_4d = 1.0 / libm::sqrt(4.0 * d as f64);
    let e = gaussian_matrix(cfg.vocab, d, 1.0, rng)?;
    let e_p = gaussian_matrix(cfg.max_seq, d, 1.0, rng)?;
    let mut blocks = Vec::with_capacity(cfg.stored_blocks());
    for _ in 0..cfg.stored_blocks() {
        let w_q = gaussian_conditioned(d, s_d, max_cond, rng)?;
        let w_k = gaussian_matrix(d, d, s_d, rng)?;
        let w_v = gaussian_matrix(d, d, s_d, rng)?;
        let w_o = gaussian_matrix(d, d, s_d, rng)?;
        let w_up = gaussian_matrix(d, 4 * d, s_d, rng)?;
        let w_down = gaussian_matrix(4 * d, d, s_4d, rng)?;
        let (ln1_scale, ln2_scale) = match cfg.norm {
            NormMode::None => (None, None),
            NormMode::LayerNorm { .. } => {
                let mut scale = || (0..d).map(|_| libm::exp(0.1 * rng.normal())).collect::<Vec<_>>();
                (Some(scale()), Some(scale()))
            }
        };
        blocks.push(BlockWeights { attn: AttnWeights::new(w_q, w_k, w_v, w_o)?, w_up, w_down, ln1_scale, ln2_scale });
    }
    let lm_head =
        if cfg.tied_lm_head { LmHead::Tied } else { LmHead::Untied(gaussian_matrix(d, cfg.vocab, s_d, rng)?) };
    Ok(ModelWeights { e, e_p, blocks, lm_head })
}
