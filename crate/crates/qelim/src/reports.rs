//! JSON and CSV shapes of everything the CLI writes.

use std::collections::BTreeMap;

use qelim_core::mlpexp::{ExperimentReport, Quantiles, Seeds, Summary};
use qelim_core::normconj::{ConjugacyCheck, ProbeRow};
use qelim_core::reluskip::{AbsorptionInstance, SubsetHit};
use qelim_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digest {
    pub path: String,
    /// Lower-case hex CRC32 of the file contents, or for checkpoints of
    /// everything before the trailing checksum.
    pub crc32: String,
}

impl Digest {
    pub fn new(path: &std::path::Path, bytes: &[u8]) -> Self {
        Self::with_crc(path, crate::files::crc32(bytes))
    }

    /// Uses the checkpoint's stored checksum, the CRC32 of everything before
    /// the trailer.
    pub fn checkpoint(path: &std::path::Path, bytes: &[u8]) -> Self {
        Self::with_crc(path, crate::checkpoint::stored_crc(bytes))
    }

    fn with_crc(path: &std::path::Path, crc: u32) -> Self {
        Self { path: path.display().to_string(), crc32: format!("{crc:08x}") }
    }
}

/// One per run: enough to repeat it and check the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Digest>,
    pub outputs: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub mode: String,
    pub input: String,
    pub output: String,
    pub original_tied: bool,
    pub max_cond: f64,
    pub per_layer_cond: Vec<f64>,
    pub trials: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub max_logit_rel_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub a: String,
    pub b: String,
    pub trials: usize,
    pub seq_len: usize,
    pub tol: f64,
    pub seed: u64,
    pub max_logit_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnconjReport {
    pub d: usize,
    pub eps: f64,
    pub samples: usize,
    pub seed: u64,
    pub max_cond: f64,
    pub cond_theta: f64,
    pub lambda0: f64,
    pub max_conjugacy_err: f64,
    pub max_mlp_prime_err: f64,
    pub max_shift_err: f64,
}

impl LnconjReport {
    pub fn new(c: &ConjugacyCheck, max_cond: f64) -> Self {
        Self {
            d: c.d,
            eps: c.eps,
            samples: c.samples,
            seed: c.seed,
            max_cond,
            cond_theta: c.cond_theta,
            lambda0: c.lambda0,
            max_conjugacy_err: c.conjugacy_err,
            max_mlp_prime_err: c.mlp_prime_err,
            max_shift_err: c.shift_err,
        }
    }
}

pub const PROBE_HEADER: [&str; 6] = ["d", "eps", "samples", "mean_rel_dev", "max_rel_dev", "seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCsvRow {
    pub d: usize,
    pub eps: f64,
    pub samples: usize,
    pub mean_rel_dev: f64,
    pub max_rel_dev: f64,
    pub seed: u64,
}

impl From<&ProbeRow> for ProbeCsvRow {
    fn from(r: &ProbeRow) -> Self {
        Self {
            d: r.d,
            eps: r.eps,
            samples: r.samples,
            mean_rel_dev: r.mean_rel_dev,
            max_rel_dev: r.max_rel_dev,
            seed: r.seed,
        }
    }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// A skip-ReLU MLP `x ↦ W₂ReLU(W₁x) + x`, matrices stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceJson {
    pub h: usize,
    pub m: usize,
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
    pub planted_j: Option<Vec<usize>>,
}

impl InstanceJson {
    pub fn new(inst: &AbsorptionInstance) -> Self {
        Self {
            h: inst.h(),
            m: inst.m(),
            w1: rows_of(&inst.w1),
            w2: rows_of(&inst.w2),
            planted_j: inst.planted_j.clone(),
        }
    }

    pub fn to_instance(&self) -> Result<AbsorptionInstance> {
        let inst = AbsorptionInstance::new(
            Matrix::from_rows(&self.w1)?,
            Matrix::from_rows(&self.w2)?,
            self.planted_j.clone(),
        )?;
        if inst.h() != self.h || inst.m() != self.m {
            return Err(crate::Error::Config(format!(
                "instance declares h={}, m={} but W1 is {}x{}",
                self.h,
                self.m,
                inst.m(),
                inst.h()
            )));
        }
        Ok(inst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub h: usize,
    pub m: usize,
    pub tol: f64,
    pub subsets_found: Vec<Vec<usize>>,
    pub residuals: Vec<f64>,
}

impl SearchReport {
    pub fn new(h: usize, m: usize, tol: f64, hits: &[SubsetHit]) -> Self {
        Self {
            h,
            m,
            tol,
            subsets_found: hits.iter().map(|x| x.indices.clone()).collect(),
            residuals: hits.iter().map(|x| x.residual).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    pub h: usize,
    pub m: usize,
    pub subset: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    /// `max ‖W₂ReLU(W₁x) + x − V₂ReLU(V₁x)‖_max`
    pub max_abs_dev: f64,
    /// `‖V₂V₁ − W₂W₁ − 2I‖_max`
    pub algebraic_err: f64,
    pub degenerate: bool,
    pub pass: bool,
    pub v1: Vec<Vec<f64>>,
    pub v2: Vec<Vec<f64>>,
}

impl AbsorptionReport {
    pub fn matrices(v1: &Matrix, v2: &Matrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (rows_of(v1), rows_of(v2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    pub mean_cos: f64,
}

impl From<Summary> for SummaryJson {
    fn from(s: Summary) -> Self {
        Self { mean_rel_err: s.mean_rel_err, max_rel_err: s.max_rel_err, mean_cos: s.mean_cos }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilesJson {
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

impl From<Quantiles> for QuantilesJson {
    fn from(q: Quantiles) -> Self {
        Self { p5: q.p5, p25: q.p25, p50: q.p50, p75: q.p75, p95: q.p95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedsJson {
    pub target: u64,
    pub model: u64,
    pub train: u64,
    pub baseline: u64,
    pub eval: u64,
}

impl From<Seeds> for SeedsJson {
    fn from(s: Seeds) -> Self {
        Self { target: s.target, model: s.model, train: s.train, baseline: s.baseline, eval: s.eval }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpexpConfigJson {
    pub steps: usize,
    pub batch: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub eval_samples: usize,
    pub baseline_samples: usize,
    pub ridge_lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpexpReport {
    pub h: usize,
    pub config: MlpexpConfigJson,
    pub trained: SummaryJson,
    pub linear: SummaryJson,
    /// Quantiles of the trained model's per-sample relative error.
    pub quantiles: QuantilesJson,
    pub quantiles_linear: QuantilesJson,
    pub seeds: SeedsJson,
    pub final_train_loss: Option<f64>,
    /// Wall-clock seconds; only recorded on request so reports stay reproducible.
    pub runtime_s: Option<f64>,
}

impl MlpexpReport {
    pub fn new(r: &ExperimentReport, runtime_s: Option<f64>) -> Self {
        let c = &r.config;
        Self {
            h: c.h,
            config: MlpexpConfigJson {
                steps: c.train.steps,
                batch: c.train.batch,
                lr_peak: c.train.lr_peak,
                weight_decay: c.train.weight_decay,
                beta1: c.train.beta1,
                beta2: c.train.beta2,
                adam_eps: c.train.adam_eps,
                grad_clip_norm: c.train.grad_clip_norm,
                eval_samples: c.eval_samples,
                baseline_samples: c.baseline_samples,
                ridge_lambda: c.ridge_lambda,
                seed: c.train.seed,
            },
            trained: r.trained.into(),
            linear: r.linear.into(),
            quantiles: r.quantiles.into(),
            quantiles_linear: r.quantiles_linear.into(),
            seeds: r.seeds.into(),
            final_train_loss: r.loss_history.last().copied(),
            runtime_s,
        }
    }
}

pub const SAMPLE_HEADER: [&str; 4] = ["rel_err_trained", "cos_trained", "rel_err_linear", "cos_linear"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCsvRow {
    pub rel_err_trained: f64,
    pub cos_trained: f64,
    pub rel_err_linear: f64,
    pub cos_linear: f64,
}
