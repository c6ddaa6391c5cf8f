//! Absorbing the skip connection of a ReLU MLP into its weights.
//!
//! `W₂ ReLU(W₁x) + x = V₂ ReLU(V₁x)` holds for all `x` with
//! `V₁ = (I − 2Π_J) W₁`, `V₂ = W₂` whenever `W₂[:,J] W₁[J,:] = −I`, since
//! flipping the sign of a hidden unit turns `ReLU(u)` into `ReLU(u) − u`.
//! This module builds such pairs, plants instances that admit them, and
//! searches all index sets `J` of small networks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, numerical_rank, Matrix};
use crate::rng::Rng;

/// Default tolerance on `‖W₂[:,J] W₁[J,:] + I‖_max` for construction.
pub const CONSTRUCT_TOL: f64 = 1e-9;
/// Default tolerance for the subset search.
pub const SEARCH_TOL: f64 = 1e-6;
/// Widest hidden layer searched exhaustively.
pub const MAX_SEARCH_WIDTH: usize = 20;
const RANK_TOL: f64 = 1e-10;
const MAX_PLANT_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionInstance {
    /// `m × h`
    pub w1: Matrix,
    /// `h × m`
    pub w2: Matrix,
    pub planted_j: Option<Vec<usize>>,
}

impl AbsorptionInstance {
    /// Checks shapes, `m ≥ h` and that both weights have rank `h`.
    pub fn new(w1: Matrix, w2: Matrix, planted_j: Option<Vec<usize>>) -> Result<Self> {
        let (m, h) = w1.shape();
        if w2.shape() != (h, m) {
            return Err(Error::shape(format!("w1 is {m}x{h}, so w2 must be {h}x{m}, got {}x{}", w2.rows(), w2.cols())));
        }
        if h == 0 {
            return Err(Error::DimensionTooSmall { dim: 0, min: 1 });
        }
        if m < h {
            return Err(Error::InvalidArgument(format!("width m = {m} is smaller than h = {h}")));
        }
        for (name, w) in [("w1", &w1), ("w2", &w2)] {
            let r = numerical_rank(w, RANK_TOL);
            if r != h {
                return Err(Error::InvalidArgument(format!("{name} has rank {r}, expected {h}")));
            }
        }
        if let Some(j) = &planted_j {
            check_index_set(j, m)?;
        }
        Ok(Self { w1, w2, planted_j })
    }

    pub fn h(&self) -> usize {
        self.w1.cols()
    }

    pub fn m(&self) -> usize {
        self.w1.rows()
    }

    /// `W₂ ReLU(W₁x) + x`
    pub fn eval_with_skip(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = relu_mlp(&self.w1, &self.w2, x)?;
        Ok(y.into_iter().zip(x).map(|(a, b)| a + b).collect())
    }
}

fn check_index_set(j: &[usize], m: usize) -> Result<()> {
    for (k, &idx) in j.iter().enumerate() {
        if idx >= m {
            return Err(Error::InvalidArgument(format!("index {idx} out of range for width {m}")));
        }
        if j[..k].contains(&idx) {
            return Err(Error::InvalidArgument(format!("index {idx} repeated in J")));
        }
    }
    Ok(())
}

/// `V₂ ReLU(V₁x)`
pub fn relu_mlp(v1: &Matrix, v2: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    let hidden: Vec<f64> = v1.mul_vec(x)?.into_iter().map(|u| u.max(0.0)).collect();
    v2.mul_vec(&hidden)
}

/// Instance with `W₁[j,:] = I` and `W₂[:,j] = −I`; every other entry is
/// standard normal. Redrawn until both weights have full rank.
pub fn plant_instance(h: usize, m: usize, j: &[usize], rng: &mut Rng) -> Result<AbsorptionInstance> {
    if h < 2 {
        return Err(Error::DimensionTooSmall { dim: h, min: 2 });
    }
    if m < h {
        return Err(Error::InvalidArgument(format!("width m = {m} is smaller than h = {h}")));
    }
    if j.len() != h {
        return Err(Error::InvalidArgument(format!("planted J has {} entries, expected h = {h}", j.len())));
    }
    check_index_set(j, m)?;
    for _ in 0..MAX_PLANT_DRAWS {
        let mut w1 = gaussian_matrix(m, h, 1.0, rng)?;
        let mut w2 = gaussian_matrix(h, m, 1.0, rng)?;
        for (k, &idx) in j.iter().enumerate() {
            for c in 0..h {
                w1[(idx, c)] = if c == k { 1.0 } else { 0.0 };
                w2[(c, idx)] = if c == k { -1.0 } else { 0.0 };
            }
        }
        if let Ok(inst) = AbsorptionInstance::new(w1, w2, Some(j.to_vec())) {
            return Ok(inst);
        }
    }
    Err(Error::InvalidArgument("could not draw a full-rank planted instance".into()))
}

/// Gaussian instance with no planted structure.
pub fn random_instance(h: usize, m: usize, rng: &mut Rng) -> Result<AbsorptionInstance> {
    for _ in 0..MAX_PLANT_DRAWS {
        let w1 = gaussian_matrix(m, h, 1.0, rng)?;
        let w2 = gaussian_matrix(h, m, 1.0, rng)?;
        match AbsorptionInstance::new(w1, w2, None) {
            Ok(inst) => return Ok(inst),
            Err(Error::InvalidArgument(msg)) if msg.contains("rank") => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidArgument("could not draw a full-rank instance".into()))
}

/// `‖W₂[:,J] W₁[J,:] + I‖_max`
pub fn subset_residual(inst: &AbsorptionInstance, j: &[usize]) -> Result<f64> {
    check_index_set(j, inst.m())?;
    let h = inst.h();
    let mut worst = 0.0f64;
    for r in 0..h {
        for c in 0..h {
            let mut s = if r == c { 1.0 } else { 0.0 };
            for &k in j {
                s += inst.w2[(r, k)] * inst.w1[(k, c)];
            }
            worst = worst.max(s.abs());
        }
    }
    Ok(worst)
}

/// `(I − 2Π_J) W₁`: rows of `W₁` in `J` negated.
pub fn sign_flip(w1: &Matrix, j: &[usize]) -> Matrix {
    let mut v1 = w1.clone();
    for &k in j {
        v1.row_mut(k).iter_mut().for_each(|v| *v = -*v);
    }
    v1
}

/// `(V₁, V₂) = ((I − 2Π_J) W₁, W₂)` after checking that `J` satisfies the
/// absorption condition within `tol`.
pub fn absorb_construct(inst: &AbsorptionInstance, j: &[usize], tol: f64) -> Result<(Matrix, Matrix)> {
    check_index_set(j, inst.m())?;
    if j.len() < inst.h() {
        return Err(Error::SubsetTooSmall { size: j.len(), min: inst.h() });
    }
    let residual = subset_residual(inst, j)?;
    if !(residual <= tol) {
        return Err(Error::ConditionNotSatisfied { residual, tol });
    }
    Ok((sign_flip(&inst.w1, j), inst.w2.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetHit {
    /// Ascending hidden-unit indices.
    pub indices: Vec<usize>,
    pub residual: f64,
}

/// Gray-code positions are re-summed from scratch this often to bound the
/// drift of the running sum.
const RESYNC_EVERY: u64 = 4096;

fn gray(i: u64) -> u64 {
    i ^ (i >> 1)
}

fn mask_indices(mask: u64, m: usize) -> Vec<usize> {
    (0..m).filter(|&k| mask >> k & 1 == 1).collect()
}

fn sum_for_mask(inst: &AbsorptionInstance, mask: u64) -> Vec<f64> {
    let h = inst.h();
    let mut s = vec![0.0; h * h];
    for k in mask_indices(mask, inst.m()) {
        add_outer(&mut s, inst, k, 1.0);
    }
    s
}

fn add_outer(s: &mut [f64], inst: &AbsorptionInstance, k: usize, sign: f64) {
    let h = inst.h();
    for r in 0..h {
        let a = sign * inst.w2[(r, k)];
        for c in 0..h {
            s[r * h + c] += a * inst.w1[(k, c)];
        }
    }
}

fn check_width(inst: &AbsorptionInstance) -> Result<()> {
    if inst.m() > MAX_SEARCH_WIDTH {
        return Err(Error::WidthTooLargeForExhaustiveSearch { m: inst.m(), max: MAX_SEARCH_WIDTH });
    }
    Ok(())
}

/// Number of Gray-code positions (`2^m`) for the exhaustive search.
pub fn search_space(inst: &AbsorptionInstance) -> Result<u64> {
    check_width(inst)?;
    Ok(1u64 << inst.m())
}

/// Absorbing subsets among Gray-code positions `range` (a sub-range of
/// `0..2^m`), unsorted. Candidates from the running sum are confirmed by
/// direct recomputation.
pub fn search_gray_range(inst: &AbsorptionInstance, tol: f64, range: Range<u64>) -> Result<Vec<SubsetHit>> {
    let total = search_space(inst)?;
    if range.end > total {
        return Err(Error::InvalidArgument(format!("range end {} exceeds 2^m = {total}", range.end)));
    }
    let (h, m) = (inst.h(), inst.m());
    let screen = 10.0 * tol + 1e-9;
    let mut hits = Vec::new();
    let mut s = Vec::new();
    for i in range.clone() {
        let mask = gray(i);
        if i == range.start || (i - range.start) % RESYNC_EVERY == 0 {
            s = sum_for_mask(inst, mask);
        } else {
            let flipped = (mask ^ gray(i - 1)).trailing_zeros() as usize;
            let sign = if mask >> flipped & 1 == 1 { 1.0 } else { -1.0 };
            add_outer(&mut s, inst, flipped, sign);
        }
        if (mask.count_ones() as usize) < h {
            continue;
        }
        let near = (0..h * h).all(|idx| {
            let id = if idx / h == idx % h { 1.0 } else { 0.0 };
            (s[idx] + id).abs() <= screen
        });
        if near {
            let indices = mask_indices(mask, m);
            let residual = subset_residual(inst, &indices)?;
            if residual <= tol {
                hits.push(SubsetHit { indices, residual });
            }
        }
    }
    Ok(hits)
}

/// Lexicographic order of the index lists.
pub fn sort_hits(hits: &mut [SubsetHit]) {
    hits.sort_by(|a, b| a.indices.cmp(&b.indices));
}

/// Every `J` with `|J| ≥ h` and `‖W₂[:,J] W₁[J,:] + I‖_max ≤ tol`, in
/// lexicographic order. Only for `m ≤ MAX_SEARCH_WIDTH`.
pub fn find_absorbing_subsets(inst: &AbsorptionInstance, tol: f64) -> Result<Vec<SubsetHit>> {
    let total = search_space(inst)?;
    let mut hits = search_gray_range(inst, tol, 0..total)?;
    sort_hits(&mut hits);
    Ok(hits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorptionCheck {
    pub max_abs: f64,
    /// No samples were drawn; `max_abs` is 0 by convention.
    pub degenerate: bool,
}

/// Input scales cycled through by [`verify_absorption`].
pub const SAMPLE_SCALES: [f64; 3] = [0.1, 1.0, 10.0];

/// Largest `‖W₂ ReLU(W₁x) + x − V₂ ReLU(V₁x)‖_max` over Gaussian samples,
/// drawn in turn at each of [`SAMPLE_SCALES`]. NaN counts as infinite.
pub fn verify_absorption(
    inst: &AbsorptionInstance,
    v1: &Matrix,
    v2: &Matrix,
    samples: usize,
    rng: &mut Rng,
) -> Result<AbsorptionCheck> {
    let h = inst.h();
    if v1.cols() != h || v2.rows() != h || v1.rows() != v2.cols() {
        return Err(Error::shape(format!(
            "V1 is {}x{}, V2 is {}x{}, h = {h}",
            v1.rows(),
            v1.cols(),
            v2.rows(),
            v2.cols()
        )));
    }
    let mut max_abs = 0.0f64;
    for s in 0..samples {
        let scale = SAMPLE_SCALES[s % SAMPLE_SCALES.len()];
        let x: Vec<f64> = (0..h).map(|_| scale * rng.normal()).collect();
        let lhs = inst.eval_with_skip(&x)?;
        let rhs = relu_mlp(v1, v2, &x)?;
        for (a, b) in lhs.iter().zip(&rhs) {
            let gap = (a - b).abs();
            max_abs = if gap.is_nan() { f64::INFINITY } else { max_abs.max(gap) };
        }
    }
    Ok(AbsorptionCheck { max_abs, degenerate: samples == 0 })
}

/// Best sign-flip candidate over every `J ⊆ {0..m}`: the smallest
/// verification deviation of `((I − 2Π_J) W₁, W₂)`. Each `J` is checked
/// against the same sample seed.
pub fn best_sign_flip(inst: &AbsorptionInstance, samples: usize, seed: u64) -> Result<(Vec<usize>, f64)> {
    let total = search_space(inst)?;
    let mut best = (Vec::new(), f64::INFINITY);
    for mask in 0..total {
        let j = mask_indices(mask, inst.m());
        let v1 = sign_flip(&inst.w1, &j);
        let dev = verify_absorption(inst, &v1, &inst.w2, samples, &mut Rng::seed_from(seed))?.max_abs;
        if dev < best.1 {
            best = (j, dev);
        }
    }
    Ok(best)
}
