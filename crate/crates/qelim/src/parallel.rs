//! Thread-parallel drivers for the embarrassingly parallel core routines.
//! Every result is independent of the thread count.

use qelim_core::model::{ArchConfig, ModelWeights};
use qelim_core::normconj::{linearity_probe, ProbeRow};
use qelim_core::reluskip::{search_gray_range, search_space, sort_hits, AbsorptionInstance, SubsetHit};
use qelim_core::reparam::verify_trial;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "QELIM_THREADS";

/// Pool sized by `QELIM_THREADS`; unset or 0 means one thread per logical core.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?,
        _ => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))
}

/// Same value as `reparam::verify_equivalence`, with trials spread over threads.
pub fn verify_equivalence(
    m1: &ModelWeights,
    cfg1: &ArchConfig,
    m2: &ModelWeights,
    cfg2: &ArchConfig,
    trials: usize,
    seq_len: usize,
    seed: u64,
) -> Result<f64> {
    // Argument checks only; zero trials.
    qelim_core::reparam::verify_equivalence(m1, cfg1, m2, cfg2, 0, seq_len, seed)?;
    let errs = (0..trials as u64)
        .into_par_iter()
        .map(|t| verify_trial(m1, cfg1, m2, cfg2, seq_len, seed, t))
        .collect::<qelim_core::Result<Vec<f64>>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

const SEARCH_CHUNK: u64 = 1 << 14;

/// Same hits as `reluskip::find_absorbing_subsets`, searched in ranges.
pub fn find_absorbing_subsets(inst: &AbsorptionInstance, tol: f64) -> Result<Vec<SubsetHit>> {
    let total = search_space(inst)?;
    let chunks: Vec<(u64, u64)> =
        (0..total.div_ceil(SEARCH_CHUNK)).map(|c| (c * SEARCH_CHUNK, ((c + 1) * SEARCH_CHUNK).min(total))).collect();
    let parts = chunks
        .into_par_iter()
        .map(|(a, b)| search_gray_range(inst, tol, a..b))
        .collect::<qelim_core::Result<Vec<_>>>()?;
    let mut hits: Vec<SubsetHit> = parts.into_iter().flatten().collect();
    sort_hits(&mut hits);
    Ok(hits)
}

/// `normconj::linearity_probe` with one task per dimension.
pub fn probe(dims: &[usize], eps: f64, samples: usize, seed: u64) -> Result<Vec<ProbeRow>> {
    let rows = dims
        .par_iter()
        .map(|&d| linearity_probe(&[d], eps, samples, seed).map(|mut r| r.remove(0)))
        .collect::<qelim_core::Result<Vec<_>>>()?;
    Ok(rows)
}
