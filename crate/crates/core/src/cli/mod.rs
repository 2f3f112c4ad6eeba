//! Seeded experiment runners that write CSV/JSON artifacts and a run
//! manifest, plus the oracle validation suite.

mod validate;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use validate::{run_validate, validate_with, Check, ValidationReport};

use crate::autodiff::{Activation, AdamConfig, Init, MlpSpec, Tensor};
use crate::error::{invalid, Error, Result};
use crate::genmodel::{evaluation_mmd2, mode_coverage, train_dgm, GanConfig, GaussianRing, PointSampler};
use crate::hklearn::{HeatKernelLearner, HkConfig, Trajectory};
use crate::kernels::{eval, DeepRbfKernel};
use crate::oracles::{a_t_line, heat_kernel_line, l2_kernel_distance, uniform_grid};
use crate::svgd::{
    bnn_regression, hk_svgd, synthetic_dataset, vanilla_svgd, BnnConfig, BnnMethod, Dataset, GaussianTarget,
    ParticleSet, SvgdConfig, SyntheticKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Toy1d,
    SvgdGauss,
    SvgdBnn,
    Gan2d,
    Validate,
}

impl Experiment {
    pub fn tag(self) -> &'static str {
        match self {
            Experiment::Toy1d => "toy1d",
            Experiment::SvgdGauss => "svgd-gauss",
            Experiment::SvgdBnn => "svgd-bnn",
            Experiment::Gan2d => "gan2d",
            Experiment::Validate => "validate",
        }
    }
}

/// Learning the heat kernel of the real line from uniform samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toy1dConfig {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    pub iterations: usize,
    pub checkpoints: Vec<usize>,
    /// Flow time represented by one outer update.
    pub time_per_iteration: f64,
    pub grid_step: f64,
    pub hidden: Vec<usize>,
    /// Initial kernel width at the origin, set by rescaling the last layer.
    pub initial_width: Option<f64>,
    pub hk: HkConfig,
}

impl Default for Toy1dConfig {
    fn default() -> Self {
        Toy1dConfig {
            points: 512,
            lo: -10.0,
            hi: 10.0,
            iterations: 50,
            checkpoints: vec![1, 5, 20, 50],
            time_per_iteration: 0.01,
            grid_step: 0.02,
            hidden: vec![32, 32],
            initial_width: Some(0.6),
            hk: HkConfig {
                alpha: 1.0,
                beta: 5.0,
                lambda: 4.0,
                outer_steps: 50,
                inner_opt_steps: 1,
                adam: AdamConfig::with_lr(1e-3),
                ..HkConfig::default()
            },
        }
    }
}

/// Sampling a 1-D Gaussian with plain and learned-kernel SVGD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvgdGaussConfig {
    pub particles: usize,
    pub init_mean: f64,
    pub init_std: f64,
    pub target_mean: f64,
    pub target_std: f64,
    pub svgd: SvgdConfig,
    pub hk: HkConfig,
    pub feature_widths: Vec<usize>,
}

impl Default for SvgdGaussConfig {
    fn default() -> Self {
        SvgdGaussConfig {
            particles: 10,
            init_mean: 5.0,
            init_std: 1.0,
            target_mean: 0.0,
            target_std: 1.0,
            svgd: SvgdConfig {
                step_size: 0.1,
                iterations: 500,
                ..SvgdConfig::default()
            },
            hk: HkConfig {
                outer_steps: 1,
                ..HkConfig::default()
            },
            feature_widths: vec![1, 32, 32, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic {
        generator: SyntheticKind,
        n: usize,
        noise: f64,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnnRunConfig {
    pub dataset: DatasetSource,
    pub methods: Vec<BnnMethod>,
    pub bnn: BnnConfig,
}

impl Default for BnnRunConfig {
    fn default() -> Self {
        BnnRunConfig {
            dataset: DatasetSource::Synthetic {
                generator: SyntheticKind::Sinusoid,
                n: 200,
                noise: 0.1,
            },
            methods: vec![BnnMethod::Svgd, BnnMethod::HkSvgd],
            bnn: BnnConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Gan2dConfig {
    pub ring: GaussianRing,
    pub gan: GanConfig,
    pub eval_samples: usize,
}

impl Default for Gan2dConfig {
    fn default() -> Self {
        Gan2dConfig {
            ring: GaussianRing::default(),
            gan: GanConfig::default(),
            eval_samples: 1000,
        }
    }
}

/// One JSON document per run. Missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    pub seed: u64,
    /// Consecutive seeds starting at `seed`, each written to its own
    /// subdirectory when more than one.
    pub num_seeds: usize,
    pub out_dir: PathBuf,
    pub toy1d: Toy1dConfig,
    pub svgd_gauss: SvgdGaussConfig,
    pub svgd_bnn: BnnRunConfig,
    pub gan2d: Gan2dConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: None,
            seed: 0,
            num_seeds: 1,
            out_dir: PathBuf::from("runs"),
            toy1d: Toy1dConfig::default(),
            svgd_gauss: SvgdGaussConfig::default(),
            svgd_bnn: BnnRunConfig::default(),
            gan2d: Gan2dConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "experiment config".into(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_seeds == 0 {
            return Err(invalid("num_seeds must be at least 1"));
        }
        let t = &self.toy1d;
        if t.points == 0 || !(t.hi > t.lo) || t.checkpoints.iter().any(|&c| c == 0 || c > t.iterations) {
            return Err(invalid("toy1d needs points, lo < hi and checkpoints within 1..=iterations"));
        }
        t.hk.validate()?;
        let g = &self.svgd_gauss;
        if g.particles == 0 || !(g.init_std > 0.0) || !(g.target_std > 0.0) {
            return Err(invalid("svgd_gauss needs particles and positive standard deviations"));
        }
        if g.feature_widths.first() != Some(&1) {
            return Err(invalid("svgd_gauss feature net must take one input"));
        }
        self.svgd_gauss.svgd.validate()?;
        self.svgd_gauss.hk.validate()?;
        self.svgd_bnn.bnn.svgd.validate()?;
        self.svgd_bnn.bnn.hk.validate()?;
        self.svgd_bnn.bnn.spec.validate()?;
        if self.gan2d.eval_samples == 0 {
            return Err(invalid("gan2d needs eval_samples"));
        }
        self.gan2d.gan.validate()
    }
}

/// Written next to every run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub version: String,
    pub wallclock_s: f64,
    pub files: Vec<String>,
    /// `None` on success, otherwise the error that ended the run.
    pub error: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|source| Error::Io { path, source })?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        self.write(name, &csv_table(header, rows)?)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| invalid(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r.iter().map(|v| fmt_f64(*v))).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

/// Header and numeric rows of a CSV document.
pub fn parse_csv_table(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let err = |detail: String| Error::Parse {
        what: "csv table".into(),
        detail,
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| err(e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        rows.push(
            rec.iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| err(format!("{s:?}: {e}"))))
                .collect::<Result<_>>()?,
        );
    }
    Ok((header, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCheckpoint {
    pub iteration: usize,
    pub t: f64,
    pub l2: f64,
    /// `l2` divided by the grid span.
    pub mse: f64,
    #[serde(skip)]
    pub grid: Vec<f64>,
    #[serde(skip)]
    pub learned: Vec<f64>,
    #[serde(skip)]
    pub oracle: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Toy1dResult {
    pub checkpoints: Vec<ToyCheckpoint>,
    pub trajectory: Trajectory,
}

/// Trains on uniform points and compares `a_t k(0, .)` with the line heat
/// kernel at each checkpoint, with `t = time_per_iteration * iteration`.
pub fn toy1d(cfg: &Toy1dConfig, seed: u64) -> Result<Toy1dResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(cfg.points, 1, |_, _| rng.random_range(cfg.lo..cfg.hi));
    let mut widths = vec![1];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut spec = MlpSpec::new(widths, Activation::Relu);
    spec.init = Init::HeUniform;
    let mut kernel = DeepRbfKernel::new(spec, None, &mut rng)?;
    if let Some(w) = cfg.initial_width {
        kernel.calibrate_width(&x, w)?;
    }
    let mut learner = HeatKernelLearner::new(kernel, cfg.hk.clone())?;
    let grid = uniform_grid(cfg.lo, cfg.hi, cfg.grid_step)?;
    let span = cfg.hi - cfg.lo;
    let mut checkpoints = Vec::new();
    for it in 1..=cfg.iterations {
        learner.step(&x, &mut rng)?;
        if cfg.checkpoints.contains(&it) {
            let t = cfg.time_per_iteration * it as f64;
            let a = a_t_line(t)?;
            let learned: Vec<f64> = grid
                .iter()
                .map(|&g| Ok(a * eval(&learner.kernel, &[0.0], &[g])?))
                .collect::<Result<_>>()?;
            let oracle: Vec<f64> = grid.iter().map(|&g| heat_kernel_line(t, 0.0, g)).collect::<Result<_>>()?;
            let l2 = l2_kernel_distance(&learned, &oracle, &grid)?;
            checkpoints.push(ToyCheckpoint {
                iteration: it,
                t,
                l2,
                mse: l2 / span,
                grid: grid.clone(),
                learned,
                oracle,
            });
        }
    }
    Ok(Toy1dResult {
        checkpoints,
        trajectory: learner.trajectory,
    })
}

fn trajectory_rows(t: &Trajectory) -> Vec<Vec<f64>> {
    t.entries
        .iter()
        .map(|e| {
            vec![
                e.step as f64,
                e.objective_start,
                e.objective,
                e.entropy,
                e.wasserstein,
                e.penalty,
            ]
        })
        .collect()
}

const TRAJECTORY_HEADER: [&str; 6] = ["step", "objective_start", "objective", "entropy", "wasserstein", "penalty"];

fn write_toy1d(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Result<()> {
    let r = toy1d(&cfg.toy1d, seed)?;
    for c in &r.checkpoints {
        let rows: Vec<Vec<f64>> = (0..c.grid.len()).map(|i| vec![c.grid[i], c.learned[i], c.oracle[i]]).collect();
        out.csv(&format!("toy1d_iter{:03}.csv", c.iteration), &["x", "learned", "oracle"], &rows)?;
    }
    let rows: Vec<Vec<f64>> = r
        .checkpoints
        .iter()
        .map(|c| vec![c.iteration as f64, c.t, c.l2, c.mse])
        .collect();
    out.csv("toy1d_l2.csv", &["iteration", "t", "l2", "mse"], &rows)?;
    out.csv("trajectory.csv", &TRAJECTORY_HEADER, &trajectory_rows(&r.trajectory))?;
    out.json("metrics.json", &r.checkpoints)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSummary {
    pub method: String,
    pub seed: u64,
    pub mean: f64,
    pub variance: f64,
    pub wallclock_s: f64,
}

/// Final particles of both samplers from the same initial set.
pub fn svgd_gauss(cfg: &SvgdGaussConfig, seed: u64) -> Result<Vec<(SamplerSummary, ParticleSet, Option<Trajectory>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = GaussianTarget::new(vec![cfg.target_mean], cfg.target_std)?;
    let init = ParticleSet::gaussian(cfg.particles, &[cfg.init_mean], cfg.init_std, &mut rng)?;
    let summary = |method: BnnMethod, p: &ParticleSet, t: Instant| SamplerSummary {
        method: method.tag().into(),
        seed,
        mean: p.mean()[0],
        variance: p.variance()[0],
        wallclock_s: t.elapsed().as_secs_f64(),
    };
    let t0 = Instant::now();
    let plain = vanilla_svgd(&target, init.clone(), &cfg.svgd)?;
    let s_plain = summary(BnnMethod::Svgd, &plain, t0);

    let t0 = Instant::now();
    let kernel = DeepRbfKernel::new(MlpSpec::new(cfg.feature_widths.clone(), Activation::Relu), None, &mut rng)?;
    let (learned, _, traj) = hk_svgd(&target, init, kernel, &cfg.hk, &cfg.svgd, &mut rng)?;
    let s_learned = summary(BnnMethod::HkSvgd, &learned, t0);
    Ok(vec![(s_plain, plain, None), (s_learned, learned, Some(traj))])
}

fn write_svgd_gauss(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Result<()> {
    let runs = svgd_gauss(&cfg.svgd_gauss, seed)?;
    let mut summaries = Vec::new();
    for (s, p, traj) in runs {
        let rows: Vec<Vec<f64>> = (0..p.len()).map(|i| p.particles().row(i).to_vec()).collect();
        out.csv(&format!("particles_{}.csv", s.method), &["x"], &rows)?;
        if let Some(t) = traj {
            out.csv("trajectory.csv", &TRAJECTORY_HEADER, &trajectory_rows(&t))?;
        }
        summaries.push(s);
    }
    out.json("metrics.json", &summaries)
}

/// Metric record for one BNN run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnnRecord {
    pub method: String,
    pub seed: u64,
    pub rmse: f64,
    pub test_ll: f64,
    pub wallclock_s: f64,
}

pub fn load_dataset(src: &DatasetSource, rng: &mut impl Rng) -> Result<Dataset> {
    match src {
        DatasetSource::Synthetic { generator, n, noise } => synthetic_dataset(*generator, *n, *noise, rng),
        DatasetSource::Csv { path } => Dataset::from_csv(path),
    }
}

/// Every requested method on the same data, split and initial particles.
pub fn svgd_bnn(cfg: &BnnRunConfig, seed: u64) -> Result<Vec<BnnRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = load_dataset(&cfg.dataset, &mut rng)?;
    let mut out = Vec::new();
    for &m in &cfg.methods {
        let mut r = rng.clone();
        let t0 = Instant::now();
        let metrics = bnn_regression(&data, &cfg.bnn, m, &mut r)?;
        out.push(BnnRecord {
            method: m.tag().into(),
            seed,
            rmse: metrics.rmse,
            test_ll: metrics.test_ll,
            wallclock_s: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

fn write_svgd_bnn(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Result<()> {
    let records = svgd_bnn(&cfg.svgd_bnn, seed)?;
    out.json("metrics.json", &records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gan2dSummary {
    pub seed: u64,
    pub mode_coverage: Vec<f64>,
    pub min_coverage: f64,
    pub heldout_mmd2: f64,
    pub divergence: Option<String>,
    pub wallclock_s: f64,
}

pub fn gan2d(cfg: &Gan2dConfig, seed: u64) -> Result<(Gan2dSummary, crate::genmodel::DgmRun, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = Instant::now();
    let run = train_dgm(&cfg.ring, &cfg.gan, &mut rng)?;
    let samples = run.generator.sample(cfg.eval_samples, &mut rng)?;
    let held = cfg.ring.sample(cfg.eval_samples, &mut rng);
    let coverage = mode_coverage(&samples, &cfg.ring.centers())?;
    let summary = Gan2dSummary {
        seed,
        min_coverage: coverage.iter().copied().fold(f64::INFINITY, f64::min),
        mode_coverage: coverage,
        heldout_mmd2: evaluation_mmd2(&samples, &held)?,
        divergence: run.divergence.clone(),
        wallclock_s: t0.elapsed().as_secs_f64(),
    };
    Ok((summary, run, samples))
}

fn write_gan2d(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Result<()> {
    let (summary, run, samples) = gan2d(&cfg.gan2d, seed)?;
    out.write("trajectory.csv", &run.metrics_csv())?;
    let rows: Vec<Vec<f64>> = (0..samples.rows()).map(|i| samples.row(i).to_vec()).collect();
    out.csv("samples.csv", &["x", "y"], &rows)?;
    out.json("metrics.json", &summary)
}

fn write_validate(out: &mut Artifacts) -> Result<bool> {
    let report = run_validate();
    out.write("validate.txt", &report.table())?;
    out.json("metrics.json", &report.checks)?;
    Ok(report.passed())
}

/// Outcome of one seed of one experiment.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// False when a validation check failed.
    pub passed: bool,
}

/// Runs one seed into `dir`. Errors are recorded in the manifest, which is
/// always written; I/O errors on the manifest itself are returned.
pub fn run_seed(cfg: &ExperimentConfig, experiment: Experiment, seed: u64, dir: &Path) -> Result<RunOutcome> {
    let t0 = Instant::now();
    let mut out = Artifacts::new(dir)?;
    let result = match experiment {
        Experiment::Toy1d => write_toy1d(cfg, seed, &mut out).map(|_| true),
        Experiment::SvgdGauss => write_svgd_gauss(cfg, seed, &mut out).map(|_| true),
        Experiment::SvgdBnn => write_svgd_bnn(cfg, seed, &mut out).map(|_| true),
        Experiment::Gan2d => write_gan2d(cfg, seed, &mut out).map(|_| true),
        Experiment::Validate => write_validate(&mut out),
    };
    let (passed, error) = match &result {
        Ok(p) => (*p, None),
        Err(e) => (false, Some(e.to_string())),
    };
    let mut snapshot = cfg.clone();
    snapshot.experiment = Some(experiment);
    snapshot.seed = seed;
    let manifest = RunManifest {
        experiment: experiment.tag().into(),
        seed,
        config: snapshot,
        version: env!("CARGO_PKG_VERSION").into(),
        wallclock_s: t0.elapsed().as_secs_f64(),
        files: out.files.clone(),
        error,
    };
    out.json(MANIFEST_FILE, &manifest)?;
    result?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
        passed,
    })
}

/// Runs every configured seed, up to `jobs` at a time. With several seeds
/// each one writes to `out_dir/seed-<n>`.
pub fn run_experiment(cfg: &ExperimentConfig, experiment: Experiment, jobs: usize) -> Result<Vec<RunOutcome>> {
    if let Some(e) = cfg.experiment {
        if e != experiment {
            return Err(invalid(format!(
                "config is for {} but {} was requested",
                e.tag(),
                experiment.tag()
            )));
        }
    }
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.num_seeds as u64).map(|k| cfg.seed + k).collect();
    let dir_for = |s: u64| {
        if seeds.len() > 1 {
            cfg.out_dir.join(format!("seed-{s}"))
        } else {
            cfg.out_dir.clone()
        }
    };
    let run = |s: u64| run_seed(cfg, experiment, s, &dir_for(s));
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| run(s)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid(e.to_string()))?;
    pool.install(|| seeds.par_iter().map(|&s| run(s)).collect())
}

/// Exit status for the command line: 0 success, 1 failed checks or a run
/// that stopped on a numerical error, 2 configuration or I/O problems.
pub fn exit_code(result: &Result<Vec<RunOutcome>>) -> i32 {
    match result {
        Ok(outs) if outs.iter().all(|o| o.passed) => 0,
        Ok(_) => 1,
        Err(Error::Io { .. } | Error::Parse { .. } | Error::InvalidArgument(_)) => 2,
        Err(_) => 1,
    }
}
