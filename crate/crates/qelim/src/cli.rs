//! Command-line front end. Each subcommand parses its flags, calls into
//! `qelim-core`, writes its outputs atomically and records a [`Manifest`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qelim_core::mlpexp::{run_experiment, ExperimentConfig, TrainConfig};
use qelim_core::model::{random_model, ArchConfig, ModelWeights};
use qelim_core::normconj::conjugacy_check;
use qelim_core::reluskip::{absorb_construct, plant_instance, random_instance, verify_absorption};
use qelim_core::reparam::{
    eliminate_query_attn_skip, eliminate_query_weight_shared, EliminationOptions, ELIMINATION_MAX_COND,
};
use qelim_core::Rng;
use serde::Serialize;

use crate::error::{exit, Error, Result};
use crate::reports::*;
use crate::{arch, checkpoint, files, parallel};

#[derive(Debug, Parser)]
#[command(name = "qelim", version, about = "Query-weight elimination for multi-head attention")]
pub struct Cli {
    /// Where to write the run manifest (default: `<output>.manifest.json`,
    /// or standard error when writing to standard output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a random model from an architecture JSON.
    Gen(GenArgs),
    /// Remove every W_Q from a checkpoint.
    Transform(TransformArgs),
    /// Compare the logits of two checkpoints on random sequences.
    Verify(VerifyArgs),
    /// Check the LayerNorm conjugacy identities on a random instance.
    Lnconj(LnconjArgs),
    /// Measure how far f_M is from linear across dimensions.
    Probe(ProbeArgs),
    /// Skip-connection absorption for ReLU MLPs.
    #[command(subcommand)]
    Reluskip(ReluskipCommand),
    /// Train an MLP to approximate a GELU MLP with a skip, against a linear baseline.
    Mlpexp(MlpexpArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest condition number accepted for each sampled W_Q.
    #[arg(long, default_value_t = qelim_core::model::DEFAULT_MAX_COND)]
    pub max_cond: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    AttnSkip,
    WeightShared,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::AttnSkip => "attn-skip",
            Mode::WeightShared => "weight-shared",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TransformArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Seed of the post-transform verification.
    #[arg(long)]
    pub seed: u64,
    /// Report path (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = ELIMINATION_MAX_COND)]
    pub max_cond: f64,
    #[arg(long, default_value_t = 10)]
    pub verify_trials: usize,
    /// Longest verification sequence (default: max_seq).
    #[arg(long)]
    pub verify_seq_len: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Longest sequence (default: max_seq).
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LnconjArgs {
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100.0)]
    pub max_cond: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    #[arg(long)]
    pub seed: u64,
    /// CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ReluskipCommand {
    /// Write a random instance, optionally with a planted absorbing subset.
    Gen(ReluGenArgs),
    /// Exhaustively list every absorbing subset.
    Search(ReluSearchArgs),
    /// Build the residual-free MLP for a subset and check it on random inputs.
    Verify(ReluVerifyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ReluGenArgs {
    #[arg(long)]
    pub h: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub seed: u64,
    /// Plant an absorbing subset (random unless `--subset` is given).
    #[arg(long)]
    pub planted: bool,
    #[arg(long, value_delimiter = ',', requires = "planted")]
    pub subset: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReluSearchArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, default_value_t = qelim_core::reluskip::SEARCH_TOL)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReluVerifyArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub subset: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long)]
    pub seed: u64,
    /// Pass threshold on the sampled deviation; also bounds the subset residual.
    #[arg(long, default_value_t = qelim_core::reluskip::CONSTRUCT_TOL)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MlpexpArgs {
    #[arg(long, default_value_t = 64)]
    pub h: usize,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 2048)]
    pub batch: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.95)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 3.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 4096)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = 131_072)]
    pub baseline_samples: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub ridge_lambda: f64,
    #[arg(long)]
    pub seed: u64,
    /// Report JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-sample CSV (default: the report path with a `.csv` extension).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Store wall-clock time in the report (makes it non-reproducible).
    #[arg(long)]
    pub record_runtime: bool,
}

/// Bookkeeping for one invocation.
struct Run {
    manifest: Manifest,
    primary: Option<PathBuf>,
}

impl Run {
    fn new(subcommand: &str, args: &impl Serialize) -> Self {
        Self {
            manifest: Manifest {
                subcommand: subcommand.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: serde_json::to_value(args).expect("arguments serialize"),
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
            primary: None,
        }
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.into(), value);
    }

    fn config(&mut self, key: &str, value: impl Serialize) {
        if let serde_json::Value::Object(map) = &mut self.manifest.config {
            map.insert(key.into(), serde_json::to_value(value).expect("config serializes"));
        }
    }

    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = files::read(path)?;
        self.manifest.inputs.push(Digest::new(path, &bytes));
        Ok(bytes)
    }

    fn input_checkpoint(&mut self, path: &Path) -> Result<(ModelWeights, ArchConfig)> {
        let bytes = files::read(path)?;
        self.manifest.inputs.push(Digest::checkpoint(path, &bytes));
        let sidecar = self.input(&checkpoint::sidecar_path(path))?;
        checkpoint::from_bytes(path, &bytes, &sidecar)
    }

    /// Write to `path`, or to standard output when `None`.
    fn output(&mut self, path: Option<&Path>, bytes: &[u8]) -> Result<()> {
        match path {
            Some(p) => {
                files::write_atomic(p, bytes)?;
                self.manifest.outputs.push(Digest::new(p, bytes));
                self.primary.get_or_insert_with(|| p.to_path_buf());
            }
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))?;
            }
        }
        Ok(())
    }

    fn output_checkpoint(&mut self, path: &Path, m: &ModelWeights, cfg: &ArchConfig) -> Result<()> {
        let (bytes, sidecar) = checkpoint::save(m, cfg, path)?;
        self.manifest.outputs.push(Digest::checkpoint(path, &bytes));
        self.manifest.outputs.push(Digest::new(&checkpoint::sidecar_path(path), &sidecar));
        self.primary.get_or_insert_with(|| path.to_path_buf());
        Ok(())
    }

    fn finish(self, explicit: Option<&Path>) -> Result<()> {
        let bytes = files::to_json(&self.manifest);
        let target =
            explicit.map(Path::to_path_buf).or_else(|| self.primary.map(|p| files::with_suffix(&p, ".manifest.json")));
        match target {
            Some(p) => files::write_atomic(&p, &bytes),
            None => std::io::stderr().write_all(&bytes).map_err(|e| Error::io("<stderr>", e)),
        }
    }
}

/// Run a parsed command line and return the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let pool = parallel::thread_pool()?;
    pool.install(|| {
        let (run, code) = match &cli.command {
            Command::Gen(a) => gen(a)?,
            Command::Transform(a) => transform(a)?,
            Command::Verify(a) => verify(a)?,
            Command::Lnconj(a) => lnconj(a)?,
            Command::Probe(a) => probe(a)?,
            Command::Reluskip(ReluskipCommand::Gen(a)) => relu_gen(a)?,
            Command::Reluskip(ReluskipCommand::Search(a)) => relu_search(a)?,
            Command::Reluskip(ReluskipCommand::Verify(a)) => relu_verify(a)?,
            Command::Mlpexp(a) => mlpexp(a)?,
        };
        run.finish(cli.manifest.as_deref())?;
        Ok(code)
    })
}

fn gen(a: &GenArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("gen", a);
    run.seed("model", a.seed);
    run.input(&a.config)?;
    let cfg = arch::load_config(&a.config)?;
    run.config("arch", arch::ArchJson::from_config(&cfg));
    let m = random_model(&cfg, &mut Rng::seed_from(a.seed), a.max_cond)?;
    run.output_checkpoint(&a.out, &m, &cfg)?;
    eprintln!(
        "gen: d_model={} h={} layers={} vocab={} -> {}",
        cfg.d_model(),
        cfg.layout.heads(),
        cfg.n_layers,
        cfg.vocab,
        a.out.display()
    );
    Ok((run, exit::OK))
}

fn transform(a: &TransformArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("transform", a);
    run.seed("verify", a.seed);
    let (m, cfg) = run.input_checkpoint(&a.input)?;
    let opts = EliminationOptions { max_cond: a.max_cond, verify_trials: 0, verify_seq_len: 0, seed: a.seed };
    let out = match a.mode {
        Mode::AttnSkip => eliminate_query_attn_skip(&m, &cfg, &opts)?,
        Mode::WeightShared => eliminate_query_weight_shared(&m, &cfg, &opts)?,
    };
    let seq_len = a.verify_seq_len.unwrap_or(cfg.max_seq);
    let err = if a.verify_trials > 0 {
        Some(parallel::verify_equivalence(&m, &cfg, &out.weights, &out.config, a.verify_trials, seq_len, a.seed)?)
    } else {
        None
    };
    run.output_checkpoint(&a.out, &out.weights, &out.config)?;
    let report = TransformReport {
        mode: a.mode.name().into(),
        input: a.input.display().to_string(),
        output: a.out.display().to_string(),
        original_tied: out.report.original_tied,
        max_cond: a.max_cond,
        per_layer_cond: out.report.per_layer_cond.clone(),
        trials: a.verify_trials,
        seq_len,
        seed: a.seed,
        max_logit_rel_err: err,
    };
    let report_path = a.report.clone().unwrap_or_else(|| files::with_suffix(&a.out, ".report.json"));
    run.output(Some(&report_path), &files::to_json(&report))?;
    match err {
        Some(e) => {
            eprintln!("transform {}: max relative logit error {e:.3e} over {} trials", a.mode.name(), a.verify_trials)
        }
        None => eprintln!("transform {}: verification skipped", a.mode.name()),
    }
    Ok((run, exit::OK))
}

fn verify(a: &VerifyArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("verify", a);
    run.seed("verify", a.seed);
    let (ma, ca) = run.input_checkpoint(&a.a)?;
    let (mb, cb) = run.input_checkpoint(&a.b)?;
    let seq_len = a.seq_len.unwrap_or(ca.max_seq);
    let err = parallel::verify_equivalence(&ma, &ca, &mb, &cb, a.trials, seq_len, a.seed)?;
    let pass = err <= a.tol;
    let report = VerifyReport {
        a: a.a.display().to_string(),
        b: a.b.display().to_string(),
        trials: a.trials,
        seq_len,
        tol: a.tol,
        seed: a.seed,
        max_logit_rel_err: err,
        pass,
    };
    run.output(a.out.as_deref(), &files::to_json(&report))?;
    eprintln!("verify: max relative logit error {err:.3e} (tol {:.1e}): {}", a.tol, if pass { "PASS" } else { "FAIL" });
    Ok((run, if pass { exit::OK } else { exit::VERIFY_FAILED }))
}

fn lnconj(a: &LnconjArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("lnconj", a);
    run.seed("instance", a.seed);
    let check = conjugacy_check(a.dim, a.eps, a.samples, a.seed, a.max_cond)?;
    let report = LnconjReport::new(&check, a.max_cond);
    run.output(a.out.as_deref(), &files::to_json(&report))?;
    eprintln!(
        "lnconj: d={} eps={} conjugacy {:.2e}, MLP' {:.2e}, shift {:.2e}",
        a.dim, a.eps, check.conjugacy_err, check.mlp_prime_err, check.shift_err
    );
    Ok((run, exit::OK))
}

fn probe(a: &ProbeArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("probe", a);
    run.seed("probe", a.seed);
    let rows = parallel::probe(&a.dims, a.eps, a.samples, a.seed)?;
    let csv = files::to_csv(&PROBE_HEADER, rows.iter().map(ProbeCsvRow::from));
    run.output(a.out.as_deref(), &csv)?;
    for r in &rows {
        eprintln!(
            "probe: d={} mean deviation {:.4e} ({} of {} samples usable)",
            r.d, r.mean_rel_dev, r.valid_samples, r.samples
        );
    }
    Ok((run, exit::OK))
}

fn relu_gen(a: &ReluGenArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("reluskip gen", a);
    run.seed("instance", a.seed);
    let mut rng = Rng::seed_from(a.seed);
    let inst = if a.planted {
        let j = match &a.subset {
            Some(j) => j.clone(),
            None => random_subset(a.h, a.m, &mut rng)?,
        };
        plant_instance(a.h, a.m, &j, &mut rng)?
    } else {
        random_instance(a.h, a.m, &mut rng)?
    };
    run.output(a.out.as_deref(), &files::to_json(&InstanceJson::new(&inst)))?;
    eprintln!("reluskip gen: h={} m={} planted={:?}", a.h, a.m, inst.planted_j);
    Ok((run, exit::OK))
}

/// `h` distinct sorted indices below `m`.
fn random_subset(h: usize, m: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if h > m {
        return Err(Error::Config(format!("cannot plant {h} indices among m = {m}")));
    }
    let mut pool: Vec<usize> = (0..m).collect();
    for i in 0..h {
        let k = i + rng.below(m - i);
        pool.swap(i, k);
    }
    let mut j = pool[..h].to_vec();
    j.sort_unstable();
    Ok(j)
}

fn read_instance(run: &mut Run, path: &Path) -> Result<qelim_core::reluskip::AbsorptionInstance> {
    let bytes = run.input(path)?;
    let json: InstanceJson =
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    json.to_instance()
}

fn relu_search(a: &ReluSearchArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("reluskip search", a);
    let inst = read_instance(&mut run, &a.instance)?;
    let hits = parallel::find_absorbing_subsets(&inst, a.tol)?;
    let report = SearchReport::new(inst.h(), inst.m(), a.tol, &hits);
    run.output(a.out.as_deref(), &files::to_json(&report))?;
    eprintln!("reluskip search: {} absorbing subset(s) at tol {:.1e}", hits.len(), a.tol);
    Ok((run, exit::OK))
}

fn relu_verify(a: &ReluVerifyArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("reluskip verify", a);
    run.seed("samples", a.seed);
    let inst = read_instance(&mut run, &a.instance)?;
    let mut subset = a.subset.clone();
    subset.sort_unstable();
    let (v1, v2) = absorb_construct(&inst, &subset, a.tol)?;
    let check = verify_absorption(&inst, &v1, &v2, a.samples, &mut Rng::seed_from(a.seed))?;
    let mut want = inst.w2.matmul(&inst.w1)?;
    for i in 0..inst.h() {
        want[(i, i)] += 2.0;
    }
    let algebraic_err = v2.matmul(&v1)?.max_abs_diff(&want)?;
    let pass = check.max_abs <= a.tol;
    let (v1_rows, v2_rows) = AbsorptionReport::matrices(&v1, &v2);
    let report = AbsorptionReport {
        h: inst.h(),
        m: inst.m(),
        subset,
        samples: a.samples,
        seed: a.seed,
        tol: a.tol,
        max_abs_dev: check.max_abs,
        algebraic_err,
        degenerate: check.degenerate,
        pass,
        v1: v1_rows,
        v2: v2_rows,
    };
    run.output(a.out.as_deref(), &files::to_json(&report))?;
    eprintln!(
        "reluskip verify: max deviation {:.2e}, |V2V1 - W2W1 - 2I| {:.2e}: {}",
        check.max_abs,
        algebraic_err,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok((run, if pass { exit::OK } else { exit::VERIFY_FAILED }))
}

fn mlpexp(a: &MlpexpArgs) -> Result<(Run, i32)> {
    let mut run = Run::new("mlpexp", a);
    let cfg = ExperimentConfig {
        h: a.h,
        train: TrainConfig {
            steps: a.steps,
            batch: a.batch,
            lr_peak: a.lr,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.adam_eps,
            grad_clip_norm: a.clip,
            seed: a.seed,
        },
        eval_samples: a.eval_samples,
        baseline_samples: a.baseline_samples,
        ridge_lambda: a.ridge_lambda,
    };
    let start = Instant::now();
    let r = run_experiment(&cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    run.seed("seed", a.seed);
    run.seed("target", r.seeds.target);
    run.seed("model", r.seeds.model);
    run.seed("train", r.seeds.train);
    run.seed("baseline", r.seeds.baseline);
    run.seed("eval", r.seeds.eval);
    let report = MlpexpReport::new(&r, a.record_runtime.then_some(elapsed));
    run.output(a.out.as_deref(), &files::to_json(&report))?;
    let csv_path = a.csv.clone().or_else(|| a.out.as_ref().map(|p| p.with_extension("csv")));
    if let Some(p) = csv_path {
        let rows = r.samples.iter().map(|s| SampleCsvRow {
            rel_err_trained: s.rel_err_trained,
            cos_trained: s.cos_trained,
            rel_err_linear: s.rel_err_linear,
            cos_linear: s.cos_linear,
        });
        run.output(Some(&p), &files::to_csv(&SAMPLE_HEADER, rows))?;
    }
    eprintln!(
        "mlpexp h={}: trained {:.4} (cos {:.5}) vs linear {:.4} (cos {:.5}) in {elapsed:.1}s",
        a.h, r.trained.mean_rel_err, r.trained.mean_cos, r.linear.mean_rel_err, r.linear.mean_cos
    );
    Ok((run, exit::OK))
}
