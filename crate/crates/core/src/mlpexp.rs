//! Training a GELU MLP with a skip connection to imitate a basis-changed
//! skip-MLP, against the best linear map as a baseline.
//!
//! Everything here uses the column convention: a batch is an `h × B`
//! matrix whose columns are samples. The target is
//! `Y = W₂·GELU(W₁·X) + Z·X − X` and the model is `Ŷ = W₂'·GELU(W₁'·X) + X`,
//! trained on the mean per-sample relative squared error.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, solve_spd, Matrix};
use crate::rng::{derive_seed, Rng};

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

// tanh via one exp: several times faster than libm::tanh, and exact to a
// few ulps in absolute terms, which is all GELU needs.
fn tanh_fast(u: f64) -> f64 {
    1.0 - 2.0 / (libm::exp(2.0 * u) + 1.0)
}

fn gelu_tanh(x: f64) -> f64 {
    tanh_fast(GELU_C * (x + GELU_A * x * x * x))
}

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// Exact derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    gelu_and_grad(x).1
}

/// `(gelu(x), gelu_grad(x))` sharing one tanh.
pub fn gelu_and_grad(x: f64) -> (f64, f64) {
    let t = gelu_tanh(x);
    let g = 0.5 * x * (1.0 + t);
    (g, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

/// Columns whose target norm falls below this are left out of the loss.
pub const DEGENERATE_TARGET_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub h: usize,
    /// `4h × h`
    pub w1t: Matrix,
    /// `h × 4h`
    pub w2t: Matrix,
    /// `h × h`
    pub z: Matrix,
    pub seed: u64,
}

impl TargetSpec {
    pub fn random(h: usize, seed: u64) -> Result<Self> {
        if h == 0 {
            return Err(Error::DimensionTooSmall { dim: 0, min: 1 });
        }
        let mut rng = Rng::seed_from(seed);
        let s4 = 1.0 / libm::sqrt(4.0 * h as f64);
        let w1t = gaussian_matrix(4 * h, h, s4, &mut rng)?;
        let w2t = gaussian_matrix(h, 4 * h, s4, &mut rng)?;
        let z = gaussian_matrix(h, h, 1.0 / libm::sqrt(h as f64), &mut rng)?;
        Ok(Self { h, w1t, w2t, z, seed })
    }

    fn check(&self) -> Result<()> {
        let h = self.h;
        if self.w1t.shape() != (4 * h, h) || self.w2t.shape() != (h, 4 * h) || self.z.shape() != (h, h) {
            return Err(Error::shape(format!("target weights do not match h={h}")));
        }
        Ok(())
    }
}

/// `w2t·GELU(w1t·x) + z·x − x` for every column of `x`.
pub fn target_eval(x: &Matrix, spec: &TargetSpec) -> Result<Matrix> {
    spec.check()?;
    if x.rows() != spec.h {
        return Err(Error::shape(format!("batch has {} rows, target dimension is {}", x.rows(), spec.h)));
    }
    let g = spec.w1t.matmul(x)?.map(gelu);
    let mut y = spec.w2t.matmul(&g)?;
    y.add_assign(&spec.z.matmul(x)?)?;
    y.sub(x)
}

/// Trainable weights of `Ŷ = W₂'·GELU(W₁'·X) + X`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// `4h × h`
    pub w1: Matrix,
    /// `h × 4h`
    pub w2: Matrix,
}

impl MlpParams {
    /// Gaussian init at the same scales as the target's `W₁`, `W₂`.
    pub fn init(h: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed_from(seed);
        let s4 = 1.0 / libm::sqrt(4.0 * h as f64);
        Ok(Self { w1: gaussian_matrix(4 * h, h, s4, &mut rng)?, w2: gaussian_matrix(h, 4 * h, s4, &mut rng)? })
    }

    pub fn h(&self) -> usize {
        self.w1.cols()
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        let (m, h) = self.w1.shape();
        if self.w2.shape() != (h, m) {
            return Err(Error::shape(format!("w1 is {m}x{h} but w2 is {}x{}", self.w2.rows(), self.w2.cols())));
        }
        if x.rows() != h {
            return Err(Error::shape(format!("batch has {} rows, model dimension is {h}", x.rows())));
        }
        Ok(())
    }
}

pub fn model_forward(x: &Matrix, p: &MlpParams) -> Result<Matrix> {
    p.check(x)?;
    let g = p.w1.matmul(x)?.map(gelu);
    p.w2.matmul(&g)?.add(x)
}

fn column_sq_norms(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v * v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub w2: Matrix,
    pub loss: f64,
    /// Columns that entered the loss.
    pub used: usize,
}

/// Loss `mean_b ‖ŷ_b − y_b‖² / ‖y_b‖²` and its exact gradients.
pub fn model_backward(x: &Matrix, y: &Matrix, p: &MlpParams) -> Result<Gradients> {
    p.check(x)?;
    if y.shape() != x.shape() {
        return Err(Error::shape(format!("targets are {}x{}, batch is {}x{}", y.rows(), y.cols(), x.rows(), x.cols())));
    }
    // `a` is overwritten with GELU'(W₁'X) once GELU(W₁'X) is taken.
    let mut a = p.w1.matmul(x)?;
    let mut g = Matrix::zeros(a.rows(), a.cols());
    for (av, gv) in a.as_mut_slice().iter_mut().zip(g.as_mut_slice()) {
        let (f, df) = gelu_and_grad(*av);
        *gv = f;
        *av = df;
    }
    let resid = p.w2.matmul(&g)?.add(x)?.sub(y)?;

    let y_sq = column_sq_norms(y);
    let used = y_sq.iter().filter(|&&n| libm::sqrt(n) >= DEGENERATE_TARGET_NORM).count();
    if used == 0 {
        return Err(Error::AllTargetsDegenerate);
    }
    let r_sq = column_sq_norms(&resid);
    let mut loss = 0.0;
    let coef: Vec<f64> = y_sq
        .iter()
        .zip(&r_sq)
        .map(|(&ny, &nr)| {
            if libm::sqrt(ny) >= DEGENERATE_TARGET_NORM {
                loss += nr / ny;
                2.0 / (used as f64 * ny)
            } else {
                0.0
            }
        })
        .collect();
    loss /= used as f64;

    let mut d_out = resid;
    for i in 0..d_out.rows() {
        for (v, c) in d_out.row_mut(i).iter_mut().zip(&coef) {
            *v *= c;
        }
    }
    let w2 = d_out.matmul_t(&g)?;
    let mut d_a = p.w2.t_matmul(&d_out)?;
    for (da, dg) in d_a.as_mut_slice().iter_mut().zip(a.as_slice()) {
        *da *= dg;
    }
    let w1 = d_a.matmul_t(x)?;
    Ok(Gradients { w1, w2, loss, used })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 2048,
            lr_peak: 5e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip_norm: 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `steps = 0` is allowed and leaves the model at its init.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be > 0");
        }
        if !(self.lr_peak >= 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr_peak and weight_decay must be >= 0, adam_eps > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `lr_peak · ½(1 + cos(π t / steps))`, reaching 0 at `t = steps`.
pub fn cosine_lr(t: usize, steps: usize, lr_peak: f64) -> f64 {
    if steps == 0 {
        return lr_peak;
    }
    lr_peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t as f64 / steps as f64))
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn from_config(sizes: &[usize], cfg: &TrainConfig) -> Self {
        Self::new(sizes, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("parameter group count differs from optimizer state"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::shape("parameter size differs from optimizer state"));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (libm::sqrt(v_hat) + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// `h × n` batch of standard normal columns.
pub fn gaussian_batch(h: usize, n: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(h, n, |_, _| rng.normal())
}

/// Ridge regression of `y` on `x` accumulated chunk by chunk:
/// `A* = ((Σ x xᵀ + λI)⁻¹ Σ x yᵀ)ᵀ`.
pub fn ridge_fit_streaming(spec: &TargetSpec, n_samples: usize, lambda: f64, rng: &mut Rng) -> Result<Matrix> {
    const CHUNK: usize = 4096;
    let h = spec.h;
    if n_samples < h {
        return Err(Error::InvalidArgument(format!("ridge fit needs at least {h} samples, got {n_samples}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut gram = Matrix::zeros(h, h);
    let mut cross = Matrix::zeros(h, h);
    let mut done = 0;
    while done < n_samples {
        let n = CHUNK.min(n_samples - done);
        let x = gaussian_batch(h, n, rng);
        let y = target_eval(&x, spec)?;
        gram.add_assign(&x.matmul_t(&x)?)?;
        cross.add_assign(&x.matmul_t(&y)?)?;
        done += n;
    }
    for i in 0..h {
        gram[(i, i)] += lambda;
    }
    Ok(solve_spd(&gram, &cross)?.transpose())
}

/// Per-sample relative error `‖ŷ − y‖ / ‖y‖` and cosine similarity.
pub fn per_sample_metrics(pred: &Matrix, y: &Matrix) -> Result<Vec<(f64, f64)>> {
    if pred.shape() != y.shape() {
        return Err(Error::shape("prediction and target shapes differ"));
    }
    let mut acc = vec![(0.0, 0.0, 0.0); y.cols()]; // (‖r‖², ‖y‖², ⟨ŷ, y⟩)
    let mut pred_sq = vec![0.0; y.cols()];
    for i in 0..y.rows() {
        for (b, (p, t)) in pred.row(i).iter().zip(y.row(i)).enumerate() {
            let r = p - t;
            acc[b].0 += r * r;
            acc[b].1 += t * t;
            acc[b].2 += p * t;
            pred_sq[b] += p * p;
        }
    }
    Ok(acc
        .iter()
        .zip(&pred_sq)
        .map(|(&(rr, yy, py), &pp)| {
            let rel = if yy > 0.0 {
                libm::sqrt(rr / yy)
            } else if rr == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            let denom = libm::sqrt(pp * yy);
            let cos = if denom > 0.0 {
                (py / denom).clamp(-1.0, 1.0)
            } else if rr == 0.0 {
                1.0
            } else {
                0.0
            };
            (rel, cos)
        })
        .collect())
}

/// Linear-interpolation quantile of sorted data (`p` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles {
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            p5: quantile_sorted(&s, 0.05),
            p25: quantile_sorted(&s, 0.25),
            p50: quantile_sorted(&s, 0.50),
            p75: quantile_sorted(&s, 0.75),
            p95: quantile_sorted(&s, 0.95),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    pub mean_cos: f64,
}

impl Summary {
    fn of(rows: &[(f64, f64)]) -> Self {
        let n = rows.len() as f64;
        Self {
            mean_rel_err: rows.iter().map(|r| r.0).sum::<f64>() / n,
            max_rel_err: rows.iter().map(|r| r.0).fold(0.0, f64::max),
            mean_cos: rows.iter().map(|r| r.1).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub target: u64,
    pub model: u64,
    pub train: u64,
    pub baseline: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        Self {
            target: derive_seed(seed, 1),
            model: derive_seed(seed, 2),
            train: derive_seed(seed, 3),
            baseline: derive_seed(seed, 4),
            eval: derive_seed(seed, 5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub h: usize,
    pub train: TrainConfig,
    pub eval_samples: usize,
    pub baseline_samples: usize,
    pub ridge_lambda: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { h: 64, train: TrainConfig::default(), eval_samples: 4096, baseline_samples: 131_072, ridge_lambda: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub rel_err_trained: f64,
    pub cos_trained: f64,
    pub rel_err_linear: f64,
    pub cos_linear: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub trained: Summary,
    pub linear: Summary,
    /// Quantiles of the trained model's per-sample relative error.
    pub quantiles: Quantiles,
    pub quantiles_linear: Quantiles,
    pub seeds: Seeds,
    pub samples: Vec<SampleRow>,
    /// Training loss at every step.
    pub loss_history: Vec<f64>,
}

impl ExperimentReport {
    pub fn h(&self) -> usize {
        self.config.h
    }
}

/// Train the model for `cfg.train.steps` steps on fresh Gaussian batches.
/// `on_step` sees `(step, loss)` after each update.
pub fn train(
    spec: &TargetSpec,
    params: &mut MlpParams,
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = AdamW::from_config(&[params.w1.as_slice().len(), params.w2.as_slice().len()], cfg);
    let mut history = Vec::with_capacity(cfg.steps);
    for t in 1..=cfg.steps {
        let x = gaussian_batch(spec.h, cfg.batch, rng);
        let y = target_eval(&x, spec)?;
        let mut g = model_backward(&x, &y, params)?;
        clip_grad_norm(&mut [g.w1.as_mut_slice(), g.w2.as_mut_slice()], cfg.grad_clip_norm);
        let lr = cosine_lr(t, cfg.steps, cfg.lr_peak);
        opt.step(&mut [params.w1.as_mut_slice(), params.w2.as_mut_slice()], &[g.w1.as_slice(), g.w2.as_slice()], lr)?;
        history.push(g.loss);
        on_step(t, g.loss);
    }
    Ok(history)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, |_, _| {})
}

pub fn run_experiment_with(cfg: &ExperimentConfig, on_step: impl FnMut(usize, f64)) -> Result<ExperimentReport> {
    cfg.train.validate()?;
    if cfg.eval_samples == 0 {
        return Err(Error::InvalidConfig("eval_samples must be >= 1".into()));
    }
    let seeds = Seeds::derive(cfg.train.seed);
    let spec = TargetSpec::random(cfg.h, seeds.target)?;
    let mut params = MlpParams::init(cfg.h, seeds.model)?;
    let loss_history = train(&spec, &mut params, &cfg.train, &mut Rng::seed_from(seeds.train), on_step)?;
    let a_star =
        ridge_fit_streaming(&spec, cfg.baseline_samples, cfg.ridge_lambda, &mut Rng::seed_from(seeds.baseline))?;

    let x = gaussian_batch(cfg.h, cfg.eval_samples, &mut Rng::seed_from(seeds.eval));
    let y = target_eval(&x, &spec)?;
    let trained_rows = per_sample_metrics(&model_forward(&x, &params)?, &y)?;
    let linear_rows = per_sample_metrics(&a_star.matmul(&x)?, &y)?;
    let samples: Vec<SampleRow> = trained_rows
        .iter()
        .zip(&linear_rows)
        .map(|(t, l)| SampleRow { rel_err_trained: t.0, cos_trained: t.1, rel_err_linear: l.0, cos_linear: l.1 })
        .collect();
    let trained_err: Vec<f64> = trained_rows.iter().map(|r| r.0).collect();
    let linear_err: Vec<f64> = linear_rows.iter().map(|r| r.0).collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        trained: Summary::of(&trained_rows),
        linear: Summary::of(&linear_rows),
        quantiles: Quantiles::of(&trained_err),
        quantiles_linear: Quantiles::of(&linear_err),
        seeds,
        samples,
        loss_history,
    })
}
