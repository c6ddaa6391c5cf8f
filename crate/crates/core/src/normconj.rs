//! Passing a basis change through ε-LayerNorm.
//!
//! `L_ε(x) = (x − μ(x)𝟙) / √(σ₀²(x) + ε)` maps ℝᵈ onto the open ball of
//! radius `√d` inside the zero-mean hyperplane `H`. On that ball it has a
//! zero-mean inverse, and any matrix `M₀` that preserves `H` with unit
//! operator norm there can be conjugated through it:
//! `L_ε(L_ε⁻¹(M₀ L_ε(x))) = M₀ L_ε(x)`.
//!
//! [`construct_m0`] builds such an `M₀ = λ₀·Diag(v)·A` from any invertible
//! `A`, and [`mlp_prime_eval`] evaluates the replacement MLP that carries
//! `Θ·D` through a normalized residual branch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{
    condition_number, dot, gaussian_conditioned, gaussian_matrix, invert, norm2, orthonormal_basis_zero_mean,
    solve_spd, spectral_norm, Lu, Matrix,
};
use crate::mlpexp::gelu;
use crate::rng::{derive_seed, Rng};

/// Default relative margin kept from the image-ball boundary.
pub const DEFAULT_DELTA_GUARD: f64 = 1e-9;
/// Largest |mean| accepted by [`layernorm_inverse`].
pub const ZERO_MEAN_TOL: f64 = 1e-10;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// ε-LayerNorm with ε added to the variance.
///
/// The output is zero-mean with norm strictly below `√d`; when `σ₀² + ε`
/// rounds to `σ₀²` (huge inputs) the result is pulled inside by a few ulps
/// to keep that bound.
pub fn layernorm_eps(x: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len();
    if d == 0 {
        return Vec::new();
    }
    let mu = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let var = dot(&centered, &centered) / d as f64;
    let mut inv_sigma = 1.0 / libm::sqrt(var + eps);
    let limit = d as f64;
    loop {
        let out: Vec<f64> = centered.iter().map(|c| c * inv_sigma).collect();
        if dot(&out, &out) < limit {
            return out;
        }
        inv_sigma *= 1.0 - f64::EPSILON;
    }
}

/// Zero-mean pre-image `√(dε / (d − ‖z‖²)) · z`.
pub fn layernorm_inverse(z: &[f64], eps: f64, delta_guard: f64) -> Result<Vec<f64>> {
    let d = z.len();
    if d == 0 {
        return Err(Error::DimensionTooSmall { dim: 0, min: 1 });
    }
    let mu = mean(z);
    if mu.abs() > ZERO_MEAN_TOL {
        return Err(Error::NotZeroMean { mean: mu });
    }
    let norm_sq = dot(z, z);
    let d = d as f64;
    let limit = d * (1.0 - delta_guard);
    if !(norm_sq <= limit) {
        return Err(Error::OutsideImageBall { norm_sq, limit });
    }
    let s = libm::sqrt(d * eps / (d - norm_sq));
    Ok(z.iter().map(|v| s * v).collect())
}

/// Output of [`construct_m0`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugacyData {
    pub a: Matrix,
    /// `(Aᵀ)⁻¹𝟙`, normalized.
    pub v: Vec<f64>,
    pub lambda0: f64,
    /// `λ₀ · Diag(v) · A`
    pub m0: Matrix,
    /// Diagonal of `D' = (λ₀ Diag(v))⁻¹`.
    pub d_prime: Vec<f64>,
    pub eps: f64,
}

impl ConjugacyData {
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// `‖Qᵀ M₀ Q‖₂` for an orthonormal basis `Q` of `H` (1 by construction).
    pub fn restricted_norm(&self) -> f64 {
        let q = orthonormal_basis_zero_mean(self.dim()).expect("dim >= 2 checked at construction");
        let r = q.t_matmul(&self.m0.matmul(&q).expect("square")).expect("shapes");
        spectral_norm(&r)
    }
}

/// Relative size below which an entry of `v` counts as zero.
const ZERO_ENTRY_TOL: f64 = 1e-12;

pub fn construct_m0(a: &Matrix, eps: f64) -> Result<ConjugacyData> {
    if !a.is_square() {
        return Err(Error::shape(format!("A must be square, got {}x{}", a.rows(), a.cols())));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let d = a.rows();
    if d < 2 {
        return Err(Error::DimensionTooSmall { dim: d, min: 2 });
    }
    // Reject singular / ill-conditioned A with the same gate as `invert`.
    invert(a)?;
    let lu = Lu::factor(a)?;
    let v_tilde = lu.solve_transpose_vec(&vec![1.0; d]);
    let n = norm2(&v_tilde);
    let v: Vec<f64> = v_tilde.iter().map(|x| x / n).collect();
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(index) = v.iter().position(|x| x.abs() <= ZERO_ENTRY_TOL * vmax) {
        return Err(Error::ZeroEntryInV { index });
    }
    let dva = Matrix::from_fn(d, d, |i, j| v[i] * a[(i, j)]);
    let q = orthonormal_basis_zero_mean(d)?;
    let restricted = q.t_matmul(&dva.matmul(&q)?)?;
    let lambda0 = 1.0 / spectral_norm(&restricted);
    let m0 = dva.scale(lambda0);
    let d_prime = v.iter().map(|vi| 1.0 / (lambda0 * vi)).collect();
    Ok(ConjugacyData { a: a.clone(), v, lambda0, m0, d_prime, eps })
}

/// `L_ε⁻¹(M₀ L_ε(x)) + shift·𝟙`.
pub fn conjugate_map(x: &[f64], cd: &ConjugacyData, mean_shift: f64) -> Result<Vec<f64>> {
    if x.len() != cd.dim() {
        return Err(Error::shape(format!("x has length {}, expected {}", x.len(), cd.dim())));
    }
    let z = cd.m0.mul_vec(&layernorm_eps(x, cd.eps))?;
    // M₀ keeps H only up to rounding; project the drift out before inverting.
    let mu = mean(&z);
    let z: Vec<f64> = z.iter().map(|v| v - mu).collect();
    let c = layernorm_inverse(&z, cd.eps, DEFAULT_DELTA_GUARD)?;
    Ok(c.into_iter().map(|v| v + mean_shift).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Column-vector MLP `x ↦ W_down · φ(W_up · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMlp {
    /// `m × d`
    pub w_up: Matrix,
    /// `d × m`
    pub w_down: Matrix,
    pub activation: Activation,
}

impl VectorMlp {
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let hidden: Vec<f64> = self.w_up.mul_vec(x)?.into_iter().map(|v| self.activation.apply(v)).collect();
        self.w_down.mul_vec(&hidden)
    }
}

/// `MLP'(x) = L_ε⁻¹(M₀ L_ε(x + MLP(x))) − x + shift·𝟙`, with `cd` built from
/// `A = Θ·D`. It satisfies `D'·L_ε(x + MLP'(x)) = Θ·D·L_ε(x + MLP(x))`.
pub fn mlp_prime_eval(x: &[f64], mlp: &VectorMlp, cd: &ConjugacyData, mean_shift: f64) -> Result<Vec<f64>> {
    let y: Vec<f64> = x.iter().zip(mlp.eval(x)?).map(|(a, b)| a + b).collect();
    let f = conjugate_map(&y, cd, mean_shift)?;
    Ok(f.iter().zip(x).map(|(fi, xi)| fi - xi).collect())
}

/// `f_M(x) = √(dε / (‖x‖² + dε − ‖Mx‖²)) · Mx`, or `None` where the
/// denominator is not positive.
pub fn f_m(m: &Matrix, x: &[f64], eps: f64) -> Option<Vec<f64>> {
    let mx = m.mul_vec(x).ok()?;
    let d = x.len() as f64;
    let denom = dot(x, x) + d * eps - dot(&mx, &mx);
    if !(denom > 0.0) {
        return None;
    }
    let s = libm::sqrt(d * eps / denom);
    Some(mx.into_iter().map(|v| s * v).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub d: usize,
    pub eps: f64,
    pub samples: usize,
    /// Samples where `f_M` was defined and entered the fit.
    pub valid_samples: usize,
    pub mean_rel_dev: f64,
    pub max_rel_dev: f64,
    pub seed: u64,
}

/// Relative deviation of `f_M` from its least-squares linear fit over unit
/// vectors `xs` (columns). Returns `(mean, max, used)`.
pub fn linear_fit_deviation(m: &Matrix, xs: &[Vec<f64>], eps: f64) -> Result<(f64, f64, usize)> {
    let d = m.rows();
    let pairs: Vec<(&Vec<f64>, Vec<f64>)> = xs.iter().filter_map(|x| f_m(m, x, eps).map(|f| (x, f))).collect();
    if pairs.len() < d {
        return Err(Error::InvalidArgument(format!(
            "{} usable samples cannot determine a {d}x{d} linear fit",
            pairs.len()
        )));
    }
    // Normal equations: (Σ x xᵀ) M̂ᵀ = Σ x fᵀ.
    let x_mat = Matrix::from_fn(pairs.len(), d, |s, i| pairs[s].0[i]);
    let f_mat = Matrix::from_fn(pairs.len(), d, |s, i| pairs[s].1[i]);
    let gram = x_mat.t_matmul(&x_mat)?;
    let cross = x_mat.t_matmul(&f_mat)?;
    let fit_t = solve_spd(&gram, &cross)?;
    let pred = x_mat.matmul(&fit_t)?;
    let (mut sum, mut max) = (0.0, 0.0f64);
    for s in 0..pairs.len() {
        let r: Vec<f64> = pred.row(s).iter().zip(f_mat.row(s)).map(|(p, f)| p - f).collect();
        let dev = norm2(&r) / norm2(f_mat.row(s));
        sum += dev;
        max = max.max(dev);
    }
    Ok((sum / pairs.len() as f64, max, pairs.len()))
}

/// For each `d`, draw `M` with i.i.d. `N(0, 1/d)` entries and `samples`
/// uniform unit vectors, then measure how far `f_M` is from linear.
pub fn linearity_probe(dims: &[usize], eps: f64, samples: usize, seed: u64) -> Result<Vec<ProbeRow>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("linearity probe needs samples > 0".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    dims.iter()
        .map(|&d| {
            if d < 4 {
                return Err(Error::DimensionTooSmall { dim: d, min: 4 });
            }
            let mut rng = Rng::seed_from(derive_seed(seed, d as u64));
            let m = gaussian_matrix(d, d, 1.0 / libm::sqrt(d as f64), &mut rng)?;
            let xs: Vec<Vec<f64>> = (0..samples).map(|_| unit_vector(d, &mut rng)).collect();
            let (mean_rel_dev, max_rel_dev, valid_samples) = linear_fit_deviation(&m, &xs, eps)?;
            Ok(ProbeRow { d, eps, samples, valid_samples, mean_rel_dev, max_rel_dev, seed })
        })
        .collect()
}

pub fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = norm2(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Worst-case residuals of the conjugacy identities on one random instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugacyCheck {
    pub d: usize,
    pub eps: f64,
    pub samples: usize,
    pub seed: u64,
    /// `cond₂(Θ)` of the sampled basis change.
    pub cond_theta: f64,
    pub lambda0: f64,
    /// `max ‖L_ε(f(x)) − M₀L_ε(x)‖_max`
    pub conjugacy_err: f64,
    /// `max ‖D'·L_ε(x + MLP'(x)) − ΘD·L_ε(x + MLP(x))‖_max`
    pub mlp_prime_err: f64,
    /// `max ‖L_ε(f(x) + c𝟙) − L_ε(f(x))‖_max` over random shifts `c`
    pub shift_err: f64,
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).fold(0.0, f64::max)
}

/// Sample `Θ` with `cond₂ ≤ max_cond`, a positive diagonal `D` and a GELU
/// MLP of width `4d`, then evaluate both sides of the conjugacy and MLP'
/// identities on `samples` inputs. Inputs cycle through scales 0.5, 1, 2 and
/// carry a random mean offset.
pub fn conjugacy_check(d: usize, eps: f64, samples: usize, seed: u64, max_cond: f64) -> Result<ConjugacyCheck> {
    let mut rng = Rng::seed_from(seed);
    let s = 1.0 / libm::sqrt(d as f64);
    let theta = gaussian_conditioned(d, s, max_cond, &mut rng)?;
    let cond_theta = condition_number(&theta)?;
    let diag: Vec<f64> = (0..d).map(|_| libm::exp(0.3 * rng.normal())).collect();
    let a = theta.matmul(&Matrix::from_diag(&diag))?;
    let cd = construct_m0(&a, eps)?;
    let mlp = VectorMlp {
        w_up: gaussian_matrix(4 * d, d, s, &mut rng)?,
        w_down: gaussian_matrix(d, 4 * d, 0.5 * s, &mut rng)?,
        activation: Activation::Gelu,
    };
    let (mut conjugacy_err, mut mlp_prime_err, mut shift_err) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..samples {
        let scale = [0.5, 1.0, 2.0][k % 3];
        let offset = 3.0 * rng.normal();
        let x: Vec<f64> = (0..d).map(|_| scale * rng.normal() + offset).collect();
        let shift = 5.0 * rng.normal();

        let f = conjugate_map(&x, &cd, 0.0)?;
        let lf = layernorm_eps(&f, eps);
        conjugacy_err = conjugacy_err.max(max_abs_gap(&lf, &cd.m0.mul_vec(&layernorm_eps(&x, eps))?));
        let shifted: Vec<f64> = f.iter().map(|v| v + shift).collect();
        shift_err = shift_err.max(max_abs_gap(&layernorm_eps(&shifted, eps), &lf));

        let mp = mlp_prime_eval(&x, &mlp, &cd, shift)?;
        let left: Vec<f64> = x.iter().zip(&mp).map(|(a, b)| a + b).collect();
        let lhs: Vec<f64> = layernorm_eps(&left, eps).iter().zip(&cd.d_prime).map(|(z, dp)| z * dp).collect();
        let right: Vec<f64> = x.iter().zip(mlp.eval(&x)?).map(|(a, b)| a + b).collect();
        let rhs = a.mul_vec(&layernorm_eps(&right, eps))?;
        mlp_prime_err = mlp_prime_err.max(max_abs_gap(&lhs, &rhs));
    }
    Ok(ConjugacyCheck {
        d,
        eps,
        samples,
        seed,
        cond_theta,
        lambda0: cd.lambda0,
        conjugacy_err,
        mlp_prime_err,
        shift_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layernorm_of_constant_is_zero() {
        assert!(layernorm_eps(&[3.0; 5], 0.1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_hand_value() {
        let out = layernorm_eps(&[1.0, -1.0], 1.0);
        let s = 1.0 / libm::sqrt(2.0);
        assert!((out[0] - s).abs() < 1e-15 && (out[1] + s).abs() < 1e-15);
    }

    #[test]
    fn layernorm_stays_inside_ball_for_huge_inputs() {
        let mut rng = Rng::seed_from(1);
        for &mag in &[1e4, 1e6, 1e8] {
            for d in [2, 4, 16] {
                let x: Vec<f64> = (0..d).map(|_| mag * rng.normal()).collect();
                let out = layernorm_eps(&x, 0.01);
                assert!(dot(&out, &out) < d as f64);
                assert!(mean(&out).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inverse_of_zero_and_boundary() {
        assert_eq!(layernorm_inverse(&[0.0; 4], 0.5, DEFAULT_DELTA_GUARD).unwrap(), vec![0.0; 4]);
        // ‖z‖² = d exactly
        let z = [1.0, -1.0, 1.0, -1.0];
        assert!(matches!(layernorm_inverse(&z, 0.5, DEFAULT_DELTA_GUARD), Err(Error::OutsideImageBall { .. })));
        assert!(matches!(layernorm_inverse(&[1.0, 0.0], 0.5, 1e-9), Err(Error::NotZeroMean { .. })));
    }

    #[test]
    fn identity_a_gives_identity_m0() {
        for d in [2, 3, 8] {
            let cd = construct_m0(&Matrix::identity(d), 0.1).unwrap();
            let sd = libm::sqrt(d as f64);
            assert!((cd.lambda0 - sd).abs() < 1e-12);
            for &vi in &cd.v {
                assert!((vi - 1.0 / sd).abs() < 1e-15);
            }
            assert!(cd.m0.max_abs_diff(&Matrix::identity(d)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_entry_in_v_is_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![2.0, 3.0, 5.0], vec![0.0, 0.0, 1.0]]).unwrap();
        // Aᵀ (1,0,1) = (1, 1, 1)
        assert!(matches!(construct_m0(&a, 0.1), Err(Error::ZeroEntryInV { index: 1 })));
    }

    #[test]
    fn conjugate_map_with_identity_centers() {
        let cd = construct_m0(&Matrix::identity(4), 0.3).unwrap();
        let x = [1.0, 2.0, -0.5, 4.0];
        let mu = mean(&x);
        let f = conjugate_map(&x, &cd, 0.0).unwrap();
        for (fi, xi) in f.iter().zip(&x) {
            assert!((fi - (xi - mu)).abs() < 1e-12);
        }
        let g = conjugate_map(&x, &cd, 2.5).unwrap();
        for (gi, fi) in g.iter().zip(&f) {
            assert!((gi - fi - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_prime_zero_mlp_identity_basis() {
        let d = 4;
        let cd = construct_m0(&Matrix::identity(d), 0.2).unwrap();
        let mlp = VectorMlp { w_up: Matrix::zeros(8, d), w_down: Matrix::zeros(d, 8), activation: Activation::Gelu };
        let x = [0.3, -1.2, 2.0, 0.1];
        let mu = mean(&x);
        for shift in [0.0, -1.5] {
            let out = mlp_prime_eval(&x, &mlp, &cd, shift).unwrap();
            for &o in &out {
                assert!((o - (shift - mu)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isometry_makes_f_m_linear() {
        // A permutation is orthogonal.
        let d = 6;
        let m = Matrix::from_fn(d, d, |i, j| if j == (i + 1) % d { 1.0 } else { 0.0 });
        let mut rng = Rng::seed_from(4);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| unit_vector(d, &mut rng)).collect();
        let (mean_dev, max_dev, used) = linear_fit_deviation(&m, &xs, 0.1).unwrap();
        assert_eq!(used, 50);
        assert!(max_dev <= 1e-10 && mean_dev <= 1e-10);
    }

    #[test]
    fn probe_rejects_degenerate_input() {
        assert!(linearity_probe(&[8], 0.1, 0, 1).is_err());
        assert!(matches!(linearity_probe(&[3], 0.1, 10, 1), Err(Error::DimensionTooSmall { .. })));
    }
}
