//! Config-driven experiment runner: sweep execution with per-run CSV
//! artifacts, verification suites with JSON reports, and deterministic SVG
//! plots. Everything is a pure function of the config file and seeds;
//! re-running a config reproduces every artifact byte-for-byte.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::construct::{
    build_fit_function, construct_two_layer_wstar, symmetric_difference_measure,
    verify_fit_function, FitReport, IntervalPartition,
};
use crate::diagnostics::{count_sign_flips, flip_budget_perturbation, norm_ratio, CouplingReport};
use crate::error::{LabError, Result};
use crate::nets::{ntk_kernel, BiasMode, InitProfile, NtkPoint, SignAt, ThreeLayerNet, TwoLayerNet};
use crate::numerics::{norm2, sample_gaussian_matrix, Matrix, RngStream};
use crate::targets::{
    builtin_experiment_target, generate_dataset, Dataset, PaddingMode, SmoothActivation,
    TwoLayerTarget,
};
use crate::train::{
    train_kernel_sgd, train_linear_sgd, train_three_layer_experiment, train_two_layer_experiment,
    ExperimentReg, KernelProblem, LinearProblem, LossFn, SGDConfig, TrainLog,
};

/// Version string stamped into every CSV row.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"), "-overparam-lab");

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "fig1a-sweep-m")]
    Fig1aSweepM,
    #[serde(rename = "fig1b-sweep-n", alias = "fig1b-sweep-N")]
    Fig1bSweepN,
    #[serde(rename = "fig6-tanh")]
    Fig6Tanh,
    #[serde(rename = "fig7-regularizer")]
    Fig7Regularizer,
    #[serde(rename = "coupling-suite")]
    CouplingSuite,
    #[serde(rename = "construct-suite")]
    ConstructSuite,
}

impl Task {
    pub fn label(self) -> &'static str {
        match self {
            Task::Fig1aSweepM => "fig1a-sweep-m",
            Task::Fig1bSweepN => "fig1b-sweep-n",
            Task::Fig6Tanh => "fig6-tanh",
            Task::Fig7Regularizer => "fig7-regularizer",
            Task::CouplingSuite => "coupling-suite",
            Task::ConstructSuite => "construct-suite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "2layer")]
    TwoLayer,
    #[serde(rename = "2layer-last")]
    TwoLayerLast,
    #[serde(rename = "2layer-ntk")]
    TwoLayerNtk,
    #[serde(rename = "3layer")]
    ThreeLayer,
    #[serde(rename = "3layer-last")]
    ThreeLayerLast,
    #[serde(rename = "3layer-ntk")]
    ThreeLayerNtk,
}

impl Arch {
    pub fn label(self) -> &'static str {
        match self {
            Arch::TwoLayer => "2layer",
            Arch::TwoLayerLast => "2layer-last",
            Arch::TwoLayerNtk => "2layer-ntk",
            Arch::ThreeLayer => "3layer",
            Arch::ThreeLayerLast => "3layer-last",
            Arch::ThreeLayerNtk => "3layer-ntk",
        }
    }

    fn index(self) -> u64 {
        match self {
            Arch::TwoLayer => 0,
            Arch::TwoLayerLast => 1,
            Arch::TwoLayerNtk => 2,
            Arch::ThreeLayer => 3,
            Arch::ThreeLayerLast => 4,
            Arch::ThreeLayerNtk => 5,
        }
    }
}

fn default_arches() -> Vec<Arch> {
    vec![
        Arch::TwoLayer,
        Arch::TwoLayerLast,
        Arch::TwoLayerNtk,
        Arch::ThreeLayer,
        Arch::ThreeLayerLast,
        Arch::ThreeLayerNtk,
    ]
}
fn default_m_grid() -> Vec<usize> {
    vec![100, 2000]
}
fn default_n_grid() -> Vec<usize> {
    vec![1000]
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_d() -> usize {
    4
}
fn default_target() -> String {
    "sin-fig1".into()
}
fn default_batch() -> usize {
    50
}
fn default_momentum() -> f64 {
    0.9
}
fn default_eval_subsample() -> usize {
    500
}
fn default_test_factor() -> usize {
    10
}
fn default_tau_w() -> f64 {
    0.02
}
fn default_coupling_m2() -> usize {
    8
}
fn default_fit_degree() -> usize {
    20
}
fn default_fit_eps() -> f64 {
    0.05
}

/// One declarative sweep description. Unknown keys in the TOML file are
/// rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default = "default_arches")]
    pub arches: Vec<Arch>,
    /// Learner widths (m₁ = m₂ for three-layer nets; m₁ values for the
    /// coupling suite).
    #[serde(default = "default_m_grid")]
    pub m_grid: Vec<usize>,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub paper_scale: bool,
    /// Override the scale profile's epoch count.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub lr_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub wd_grid: Option<Vec<f64>>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Per-epoch test-set evaluation cap (final evaluation is always full).
    #[serde(default = "default_eval_subsample")]
    pub eval_subsample: usize,
    /// Fresh test set size = test_factor · N per seed.
    #[serde(default = "default_test_factor")]
    pub test_factor: usize,
    /// Coupling suite: (2,4)-norm budget of the first-layer perturbation.
    #[serde(default = "default_tau_w")]
    pub tau_w: f64,
    /// Coupling suite: second-layer width.
    #[serde(default = "default_coupling_m2")]
    pub coupling_m2: usize,
    #[serde(default = "default_fit_degree")]
    pub fit_degree: usize,
    #[serde(default = "default_fit_eps")]
    pub fit_eps: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| LabError::Usage(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_grid.is_empty() || self.n_grid.is_empty() {
            return Err(LabError::Usage("m/N grids must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Usage("need at least one seed".into()));
        }
        if self.arches.is_empty() {
            return Err(LabError::Usage("need at least one arch".into()));
        }
        if self.test_factor == 0 {
            return Err(LabError::Usage("test_factor must be ≥ 1".into()));
        }
        match self.task {
            Task::Fig1aSweepM | Task::Fig1bSweepN | Task::Fig6Tanh | Task::Fig7Regularizer => {
                builtin_experiment_target(&self.target)?;
                if self.d != 4 {
                    return Err(LabError::Usage(
                        "benchmark targets are defined on d = 4".into(),
                    ));
                }
            }
            Task::CouplingSuite | Task::ConstructSuite => {}
        }
        Ok(())
    }

    /// Short hex digest of the canonical serialized config.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// The hyperparameter grid after resolving the scale profile.
#[derive(Debug, Clone)]
pub struct ResolvedGrid {
    pub epochs: usize,
    pub lr_drop: Option<usize>,
    pub lrs: Vec<f64>,
    pub wds: Vec<f64>,
}

pub fn resolve_grid(cfg: &ExperimentConfig) -> ResolvedGrid {
    let (epochs, lrs, wds) = if cfg.paper_scale {
        let mut lrs = Vec::new();
        for k in 1..=4 {
            for f in [1.0, 2.0, 5.0] {
                lrs.push(f * 10f64.powi(-k));
            }
        }
        (800, lrs, vec![0.0, 1e-4, 1e-3])
    } else {
        (200, vec![1e-1, 1e-2, 1e-3, 1e-4], vec![0.0, 1e-4])
    };
    let epochs = cfg.epochs.unwrap_or(epochs);
    ResolvedGrid {
        epochs,
        lr_drop: Some((epochs / 2).max(1)),
        lrs: cfg.lr_grid.clone().unwrap_or(lrs),
        wds: cfg.wd_grid.clone().unwrap_or(wds),
    }
}

// ---------------------------------------------------------------------------
// Parallel map
// ---------------------------------------------------------------------------

/// Index-stable parallel map over `count` units with at most `jobs` worker
/// threads. Results land in input order regardless of scheduling.
pub fn parallel_map<T, F>(count: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let jobs = jobs.max(1).min(count.max(1));
    if jobs == 1 {
        return (0..count).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let v = f(i);
                *slots[i].lock().unwrap() = Some(v);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

// ---------------------------------------------------------------------------
// Sweep execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Sgd,
    FrobeniusDecay,
    RowNorm24,
}

impl Variant {
    fn label(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::FrobeniusDecay => "frobenius-wd",
            Variant::RowNorm24 => "rownorm24",
        }
    }
}

#[derive(Debug, Clone)]
struct CellSpec {
    arch: Arch,
    variant: Variant,
    m: usize,
    n: usize,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub arch: Arch,
    pub variant: &'static str,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub lr: f64,
    pub wd: f64,
    pub log: Option<TrainLog>,
    pub diverged: Option<String>,
    pub ratio_w: Option<f64>,
    pub ratio_v: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellSummary {
    pub task: String,
    pub arch: String,
    pub variant: String,
    pub m: usize,
    pub n: usize,
    pub lr: f64,
    pub wd: f64,
    pub median_test_loss: f64,
    pub best_test_loss: f64,
    pub median_train_loss: f64,
    pub generalization_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub task: String,
    pub config_hash: String,
    pub version: String,
    pub cells: Vec<CellSummary>,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.12e}")
}

fn median(sorted: &mut Vec<f64>) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn dataset_pair(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let target = builtin_experiment_target(&cfg.target)?;
    let eval = |x: &[f64]| Ok(vec![target.eval(x)?]);
    let mut rng = RngStream::new(seed, 0xDA7A).child(n as u64);
    let train = generate_dataset(cfg.d, n, eval, PaddingMode::Raw, &mut rng)?;
    let test = generate_dataset(cfg.d, cfg.test_factor * n, eval, PaddingMode::Raw, &mut rng)?;
    Ok((train, test))
}

fn sgd_config(grid: &ResolvedGrid, cfg: &ExperimentConfig, lr: f64, wd: f64) -> SGDConfig {
    SGDConfig {
        eta: lr,
        epochs: grid.epochs,
        batch_size: cfg.batch_size,
        momentum: cfg.momentum,
        weight_decay: wd,
        lr_drop_epoch: grid.lr_drop,
        eval_subsample: cfg.eval_subsample,
        ..SGDConfig::default()
    }
}

fn run_id(task: Task, cell: &CellSpec, lr: f64, wd: f64) -> String {
    format!(
        "{}-{}-{}-m{}-n{}-s{}-lr{:e}-wd{:e}",
        task.label(),
        cell.arch.label(),
        cell.variant.label(),
        cell.m,
        cell.n,
        cell.seed,
        lr,
        wd
    )
}

fn linear_problem_from_features(
    feats: impl Fn(&[f64]) -> Result<Vec<f64>>,
    init_theta: Vec<f64>,
    train: &Dataset,
    test: &Dataset,
) -> Result<LinearProblem> {
    let dim = init_theta.len();
    let mut train_feats = Matrix::zeros(train.len(), dim);
    for (i, x) in train.inputs.iter().enumerate() {
        train_feats.row_mut(i).copy_from_slice(&feats(x)?);
    }
    let mut test_feats = Matrix::zeros(test.len(), dim);
    for (i, x) in test.inputs.iter().enumerate() {
        test_feats.row_mut(i).copy_from_slice(&feats(x)?);
    }
    Ok(LinearProblem {
        train_feats,
        train_offsets: vec![0.0; train.len()],
        train_labels: train.labels.iter().map(|y| y[0]).collect(),
        test_feats,
        test_offsets: vec![0.0; test.len()],
        test_labels: test.labels.iter().map(|y| y[0]).collect(),
        init_theta,
    })
}

fn kernel_problem_from_points(
    point: impl Fn(&[f64]) -> Result<NtkPoint>,
    train: &Dataset,
    test: &Dataset,
) -> Result<KernelProblem> {
    let train_points: Vec<NtkPoint> = train
        .inputs
        .iter()
        .map(|x| point(x))
        .collect::<Result<_>>()?;
    let n = train_points.len();
    let mut k_train = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = ntk_kernel(&train_points[i], &train_points[j]);
            k_train.set(i, j, v);
            k_train.set(j, i, v);
        }
    }
    // Test rows streamed so only one test-side point is alive at a time.
    let mut k_test = Matrix::zeros(test.len(), n);
    let mut test_offsets = Vec::with_capacity(test.len());
    for (i, x) in test.inputs.iter().enumerate() {
        let p = point(x)?;
        test_offsets.push(p.f0);
        let row = k_test.row_mut(i);
        for (j, tp) in train_points.iter().enumerate() {
            row[j] = ntk_kernel(&p, tp);
        }
    }
    Ok(KernelProblem {
        k_train,
        k_test,
        train_offsets: train_points.iter().map(|p| p.f0).collect(),
        train_labels: train.labels.iter().map(|y| y[0]).collect(),
        test_offsets,
        test_labels: test.labels.iter().map(|y| y[0]).collect(),
    })
}

fn train_rng(cell: &CellSpec, li: usize, wi: usize) -> RngStream {
    RngStream::new(cell.seed, 0x7124)
        .child(cell.arch.index())
        .child(cell.m as u64)
        .child(cell.n as u64)
        .child((li * 64 + wi) as u64)
}

fn net_rng(cell: &CellSpec) -> RngStream {
    RngStream::new(cell.seed, 0x4E70)
        .child(cell.arch.index())
        .child(cell.m as u64)
}

/// Execute one (arch, m, N, seed) cell across the (lr, wd) grid. Problem
/// setup (datasets, init, feature/Gram matrices) is shared across the grid.
fn run_cell(
    cfg: &ExperimentConfig,
    grid: &ResolvedGrid,
    cell: &CellSpec,
) -> Result<Vec<RunOutcome>> {
    let (train, test) = dataset_pair(cfg, cell.n, cell.seed)?;
    let loss = LossFn::squared();
    let mut outcomes = Vec::new();
    let push = |li: usize,
                    wi: usize,
                    res: Result<TrainLog>,
                    ratio_w: Option<f64>,
                    ratio_v: Option<f64>,
                    outcomes: &mut Vec<RunOutcome>|
     -> Result<()> {
        let (lr, wd) = (grid.lrs[li], grid.wds[wi]);
        let (log, diverged) = match res {
            Ok(log) => (Some(log), None),
            Err(LabError::Diverged { step, detail }) => {
                (None, Some(format!("step {step}: {detail}")))
            }
            Err(e) => return Err(e),
        };
        outcomes.push(RunOutcome {
            run_id: run_id(cfg.task, cell, lr, wd),
            arch: cell.arch,
            variant: cell.variant.label(),
            m: cell.m,
            n: cell.n,
            seed: cell.seed,
            lr,
            wd,
            log,
            diverged,
            ratio_w,
            ratio_v,
        });
        Ok(())
    };

    match cell.arch {
        Arch::TwoLayer => {
            let mut rng = net_rng(cell);
            let base = TwoLayerNet::init(cell.m, cfg.d, 1, 1.0, InitProfile::Experiment, &mut rng)?;
            for li in 0..grid.lrs.len() {
                for wi in 0..grid.wds.len() {
                    let mut net = base.clone();
                    let sgd = sgd_config(grid, cfg, grid.lrs[li], grid.wds[wi]);
                    let mut trng = train_rng(cell, li, wi);
                    let res =
                        train_two_layer_experiment(&mut net, &train, Some(&test), &loss, &sgd, &mut trng);
                    push(li, wi, res, None, None, &mut outcomes)?;
                }
            }
        }
        Arch::ThreeLayer => {
            let mut rng = net_rng(cell);
            let base =
                ThreeLayerNet::init(cell.m, cell.m, cfg.d, 1, InitProfile::Experiment, &mut rng)?;
            for li in 0..grid.lrs.len() {
                for wi in 0..grid.wds.len() {
                    let mut net = base.clone();
                    let wd = grid.wds[wi];
                    let reg = match cell.variant {
                        Variant::RowNorm24 => ExperimentReg::RowNorm24(wd),
                        _ => ExperimentReg::WeightDecay(wd),
                    };
                    let mut sgd = sgd_config(grid, cfg, grid.lrs[li], 0.0);
                    sgd.weight_decay = 0.0; // decay handled by the regularizer
                    let mut trng = train_rng(cell, li, wi);
                    let res = train_three_layer_experiment(
                        &mut net,
                        &train,
                        Some(&test),
                        &loss,
                        reg,
                        &sgd,
                        &mut trng,
                    );
                    let (rw, rv) = if cell.variant == Variant::Sgd {
                        (None, None)
                    } else {
                        (
                            norm_ratio(&net.effective_w()).ok(),
                            norm_ratio(&net.effective_v()).ok(),
                        )
                    };
                    push(li, wi, res, rw, rv, &mut outcomes)?;
                }
            }
        }
        Arch::TwoLayerLast | Arch::ThreeLayerLast => {
            let mut rng = net_rng(cell);
            let prob = if cell.arch == Arch::TwoLayerLast {
                let net =
                    TwoLayerNet::init(cell.m, cfg.d, 1, 1.0, InitProfile::Experiment, &mut rng)?;
                let theta: Vec<f64> = (0..net.m).map(|i| net.a.get(0, i)).collect();
                linear_problem_from_features(|x| net.conjugate_features(x), theta, &train, &test)?
            } else {
                let net = ThreeLayerNet::init(
                    cell.m,
                    cell.m,
                    cfg.d,
                    1,
                    InitProfile::Experiment,
                    &mut rng,
                )?;
                let theta: Vec<f64> = (0..net.m2).map(|i| net.a.get(0, i)).collect();
                linear_problem_from_features(|x| net.conjugate_features(x), theta, &train, &test)?
            };
            for li in 0..grid.lrs.len() {
                for wi in 0..grid.wds.len() {
                    let sgd = sgd_config(grid, cfg, grid.lrs[li], grid.wds[wi]);
                    let mut trng = train_rng(cell, li, wi);
                    let res = train_linear_sgd(&prob, &loss, &sgd, &mut trng).map(|(log, _)| log);
                    push(li, wi, res, None, None, &mut outcomes)?;
                }
            }
        }
        Arch::TwoLayerNtk | Arch::ThreeLayerNtk => {
            let mut rng = net_rng(cell);
            let prob = if cell.arch == Arch::TwoLayerNtk {
                let net =
                    TwoLayerNet::init(cell.m, cfg.d, 1, 1.0, InitProfile::Experiment, &mut rng)?;
                kernel_problem_from_points(|x| net.ntk_point(x), &train, &test)?
            } else {
                let net = ThreeLayerNet::init(
                    cell.m,
                    cell.m,
                    cfg.d,
                    1,
                    InitProfile::Experiment,
                    &mut rng,
                )?;
                kernel_problem_from_points(|x| net.ntk_point(x), &train, &test)?
            };
            for li in 0..grid.lrs.len() {
                for wi in 0..grid.wds.len() {
                    let sgd = sgd_config(grid, cfg, grid.lrs[li], grid.wds[wi]);
                    let mut trng = train_rng(cell, li, wi);
                    let res = train_kernel_sgd(&prob, &loss, &sgd, &mut trng).map(|(log, _)| log);
                    push(li, wi, res, None, None, &mut outcomes)?;
                }
            }
        }
    }
    Ok(outcomes)
}

const RUN_CSV_HEADER: &str = "run_id,config_hash,version,seed,arch,variant,m,n,epoch,train_loss,test_loss,lambda,reg_value,lr,wd";

fn run_rows(outcome: &RunOutcome, hash: &str) -> String {
    let mut s = String::new();
    let m_field = match outcome.arch {
        Arch::ThreeLayer | Arch::ThreeLayerLast | Arch::ThreeLayerNtk => {
            format!("{}/{}", outcome.m, outcome.m)
        }
        _ => outcome.m.to_string(),
    };
    if let Some(log) = &outcome.log {
        for rec in &log.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                outcome.run_id,
                hash,
                VERSION,
                outcome.seed,
                outcome.arch.label(),
                outcome.variant,
                m_field,
                outcome.n,
                rec.epoch,
                fmt_f(rec.train_loss),
                rec.test_loss.map(fmt_f).unwrap_or_default(),
                fmt_f(rec.lambda),
                fmt_f(rec.reg_value),
                fmt_f(rec.lr),
                fmt_f(outcome.wd),
            ));
        }
    } else {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},diverged,,,,,{},{}\n",
            outcome.run_id,
            hash,
            VERSION,
            outcome.seed,
            outcome.arch.label(),
            outcome.variant,
            m_field,
            outcome.n,
            fmt_f(outcome.lr),
            fmt_f(outcome.wd),
        ));
    }
    s
}

fn summarize(
    task: Task,
    grid: &ResolvedGrid,
    outcomes: &[RunOutcome],
    hash: &str,
) -> SweepSummary {
    // Group by (arch, variant, m, n), preserving first-seen order.
    let mut keys: Vec<(Arch, &'static str, usize, usize)> = Vec::new();
    for o in outcomes {
        let k = (o.arch, o.variant, o.m, o.n);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut cells = Vec::new();
    for (arch, variant, m, n) in keys {
        let mut best: Option<(f64, f64, f64, f64, f64, f64)> = None;
        // (median_test, lr, wd, best_test, median_train, gap)
        for &lr in &grid.lrs {
            for &wd in &grid.wds {
                let runs: Vec<&RunOutcome> = outcomes
                    .iter()
                    .filter(|o| {
                        o.arch == arch
                            && o.variant == variant
                            && o.m == m
                            && o.n == n
                            && o.lr == lr
                            && o.wd == wd
                            && o.log.is_some()
                    })
                    .collect();
                if runs.is_empty() {
                    continue; // all seeds diverged at this grid point
                }
                let mut tests: Vec<f64> = runs
                    .iter()
                    .filter_map(|o| o.log.as_ref().unwrap().final_test_loss)
                    .collect();
                if tests.is_empty() {
                    continue;
                }
                let med_test = median(&mut tests);
                let best_test = tests.iter().cloned().fold(f64::INFINITY, f64::min);
                let mut trains: Vec<f64> = runs
                    .iter()
                    .map(|o| o.log.as_ref().unwrap().final_train_loss)
                    .collect();
                let med_train = median(&mut trains);
                let cand = (med_test, lr, wd, best_test, med_train, med_test - med_train);
                if best.map(|b| med_test < b.0).unwrap_or(true) {
                    best = Some(cand);
                }
            }
        }
        if let Some((med, lr, wd, best_test, med_train, gap)) = best {
            cells.push(CellSummary {
                task: task.label().into(),
                arch: arch.label().into(),
                variant: variant.into(),
                m,
                n,
                lr,
                wd,
                median_test_loss: med,
                best_test_loss: best_test,
                median_train_loss: med_train,
                generalization_gap: gap,
            });
        }
    }
    SweepSummary {
        task: task.label().into(),
        config_hash: hash.into(),
        version: VERSION.into(),
        cells,
    }
}

const SUMMARY_CSV_HEADER: &str =
    "task,arch,variant,m,n,lr,wd,median_test_loss,best_test_loss,median_train_loss,generalization_gap,config_hash,version";

pub fn summary_to_csv(summary: &SweepSummary) -> String {
    let mut s = String::from(SUMMARY_CSV_HEADER);
    s.push('\n');
    for c in &summary.cells {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.task,
            c.arch,
            c.variant,
            c.m,
            c.n,
            fmt_f(c.lr),
            fmt_f(c.wd),
            fmt_f(c.median_test_loss),
            fmt_f(c.best_test_loss),
            fmt_f(c.median_train_loss),
            fmt_f(c.generalization_gap),
            summary.config_hash,
            summary.version,
        ));
    }
    s
}

pub fn summary_from_csv(text: &str) -> Result<SweepSummary> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LabError::Usage("empty summary CSV".into()))?;
    if header != SUMMARY_CSV_HEADER {
        return Err(LabError::Usage("unrecognized summary CSV header".into()));
    }
    let mut cells = Vec::new();
    let mut hash = String::new();
    let mut version = String::new();
    let mut task = String::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(LabError::Usage(format!("bad summary row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| LabError::Usage(format!("bad float '{s}': {e}")))
        };
        task = f[0].into();
        cells.push(CellSummary {
            task: f[0].into(),
            arch: f[1].into(),
            variant: f[2].into(),
            m: f[3]
                .parse()
                .map_err(|e| LabError::Usage(format!("bad m: {e}")))?,
            n: f[4]
                .parse()
                .map_err(|e| LabError::Usage(format!("bad n: {e}")))?,
            lr: parse(f[5])?,
            wd: parse(f[6])?,
            median_test_loss: parse(f[7])?,
            best_test_loss: parse(f[8])?,
            median_train_loss: parse(f[9])?,
            generalization_gap: parse(f[10])?,
        });
        hash = f[11].into();
        version = f[12].into();
    }
    Ok(SweepSummary {
        task,
        config_hash: hash,
        version,
        cells,
    })
}

/// Run the configured task, writing all CSV/JSON artifacts under `out`.
/// Returns the summary (empty-celled for the non-sweep suites).
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<SweepSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    std::fs::create_dir_all(out)?;
    match cfg.task {
        Task::Fig1aSweepM | Task::Fig6Tanh | Task::Fig1bSweepN | Task::Fig7Regularizer => {
            let grid = resolve_grid(cfg);
            let mut cell_specs = Vec::new();
            let variants: &[Variant] = if cfg.task == Task::Fig7Regularizer {
                &[Variant::FrobeniusDecay, Variant::RowNorm24]
            } else {
                &[Variant::Sgd]
            };
            let (ms, ns): (Vec<usize>, Vec<usize>) = if cfg.task == Task::Fig1bSweepN {
                (vec![cfg.m_grid[0]], cfg.n_grid.clone())
            } else {
                (cfg.m_grid.clone(), vec![cfg.n_grid[0]])
            };
            let arches: Vec<Arch> = if cfg.task == Task::Fig7Regularizer {
                vec![Arch::ThreeLayer]
            } else {
                cfg.arches.clone()
            };
            for &arch in &arches {
                for &variant in variants {
                    for &m in &ms {
                        for &n in &ns {
                            for &seed in &cfg.seeds {
                                cell_specs.push(CellSpec {
                                    arch,
                                    variant,
                                    m,
                                    n,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
            let results = parallel_map(cell_specs.len(), jobs, |i| run_cell(cfg, &grid, &cell_specs[i]));
            let mut outcomes = Vec::new();
            for r in results {
                outcomes.extend(r?);
            }

            let runs_dir = out.join("runs");
            std::fs::create_dir_all(&runs_dir)?;
            let mut merged = String::from(RUN_CSV_HEADER);
            merged.push('\n');
            for o in &outcomes {
                let rows = run_rows(o, &hash);
                let mut file = String::from(RUN_CSV_HEADER);
                file.push('\n');
                file.push_str(&rows);
                std::fs::write(runs_dir.join(format!("{}.csv", o.run_id)), file)?;
                merged.push_str(&rows);
            }
            std::fs::write(out.join("sweep.csv"), merged)?;

            let summary = summarize(cfg.task, &grid, &outcomes, &hash);
            std::fs::write(out.join("summary.csv"), summary_to_csv(&summary))?;

            if cfg.task == Task::Fig7Regularizer {
                let mut s = String::from(
                    "m,regularizer,seed,lr,wd,test_loss,ratio_w,ratio_v,config_hash,version\n",
                );
                for o in &outcomes {
                    if let (Some(log), Some(rw), Some(rv)) = (&o.log, o.ratio_w, o.ratio_v) {
                        s.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{},{}\n",
                            o.m,
                            o.variant,
                            o.seed,
                            fmt_f(o.lr),
                            fmt_f(o.wd),
                            log.final_test_loss.map(fmt_f).unwrap_or_default(),
                            fmt_f(rw),
                            fmt_f(rv),
                            hash,
                            VERSION,
                        ));
                    }
                }
                std::fs::write(out.join("fig7_ratio.csv"), s)?;
            }
            Ok(summary)
        }
        Task::CouplingSuite => {
            let reports = coupling_reports(cfg, jobs)?;
            let mut s = String::from(
                "m1,m2,tau_w,tau_v,seed,flips1,flips2,output_gap,config_hash,version\n",
            );
            for r in &reports {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.m1,
                    r.m2,
                    fmt_f(r.tau_w),
                    fmt_f(r.tau_v),
                    r.seed,
                    r.flips1,
                    r.flips2,
                    fmt_f(r.output_gap),
                    hash,
                    VERSION,
                ));
            }
            std::fs::write(out.join("coupling.csv"), s)?;
            let slope = flip_slope(&reports);
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "task": "coupling-suite",
                "config_hash": hash,
                "version": VERSION,
                "tau_w": cfg.tau_w,
                "m1_grid": cfg.m_grid,
                "flip_slope": slope,
                "note": "exponent test only; hidden polylog factors are not modeled",
            }))
            .map_err(|e| LabError::Serde(e.to_string()))?;
            std::fs::write(out.join("coupling_summary.json"), json)?;
            Ok(SweepSummary {
                task: cfg.task.label().into(),
                config_hash: hash,
                version: VERSION.into(),
                cells: Vec::new(),
            })
        }
        Task::ConstructSuite => {
            for (name, act) in [
                ("sin3", SmoothActivation::sin(3.0)),
                ("cos7", SmoothActivation::cos(7.0)),
            ] {
                let fit = build_fit_function(&act, cfg.fit_eps, 1e14, cfg.fit_degree)?;
                let grid: Vec<f64> = (0..=20).map(|g| -1.0 + g as f64 / 10.0).collect();
                let mut rng = RngStream::new(cfg.seeds[0], 0xF17);
                let report = verify_fit_function(&fit, &act, &grid, 1_000_000, &mut rng)?;
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| LabError::Serde(e.to_string()))?;
                std::fs::write(out.join(format!("fit-{name}.json")), json)?;
            }
            let wstar = wstar_probe(200_000, 2000, cfg.fit_degree, cfg.fit_eps, cfg.seeds[0])?;
            let json = serde_json::to_string_pretty(&wstar)
                .map_err(|e| LabError::Serde(e.to_string()))?;
            std::fs::write(out.join("wstar.json"), json)?;
            Ok(SweepSummary {
                task: cfg.task.label().into(),
                config_hash: hash,
                version: VERSION.into(),
                cells: Vec::new(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Coupling and construction probes shared by tasks and verify suites
// ---------------------------------------------------------------------------

/// Flip-count reports over the m₁ grid × seeds using the budgeted extremal
/// perturbation at the config's τ_w.
pub fn coupling_reports(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<CouplingReport>> {
    let mut units = Vec::new();
    for &m1 in &cfg.m_grid {
        for &seed in &cfg.seeds {
            units.push((m1, seed));
        }
    }
    let results = parallel_map(units.len(), jobs, |i| -> Result<CouplingReport> {
        let (m1, seed) = units[i];
        let mut rng = RngStream::new(seed, 0xC0);
        let net = ThreeLayerNet::init(m1, cfg.coupling_m2, cfg.d, 1, InitProfile::Experiment, &mut rng)?;
        let mut x: Vec<f64> = (0..cfg.d).map(|_| rng.standard_normal()).collect();
        let nrm = norm2(&x);
        for v in &mut x {
            *v /= nrm;
        }
        let wpert = flip_budget_perturbation(&net, &x, cfg.tau_w)?;
        let vpert = Matrix::zeros(cfg.coupling_m2, m1);
        let mut rep = count_sign_flips(&net, &x, &wpert, &vpert)?;
        rep.seed = seed;
        Ok(rep)
    });
    results.into_iter().collect()
}

/// Least-squares log-log slope of median flips1 vs m₁.
pub fn flip_slope(reports: &[CouplingReport]) -> f64 {
    let mut m1s: Vec<usize> = reports.iter().map(|r| r.m1).collect();
    m1s.sort_unstable();
    m1s.dedup();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &m1 in &m1s {
        let mut flips: Vec<f64> = reports
            .iter()
            .filter(|r| r.m1 == m1)
            .map(|r| r.flips1 as f64)
            .collect();
        if flips.is_empty() {
            continue;
        }
        let med = median(&mut flips);
        if med > 0.0 {
            xs.push((m1 as f64).ln());
            ys.push(med.ln());
        }
    }
    if xs.len() < 2 {
        return f64::NAN;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WstarReport {
    pub m: usize,
    pub inputs: usize,
    pub fit_grid_residual: f64,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    pub row_norm_report: f64,
}

/// Build the existential two-layer weights for f*(x) = sin(3⟨e₁,x⟩)·⟨e₂,x⟩
/// and measure the bias-free pseudo-network approximation error on fresh
/// sphere inputs.
pub fn wstar_probe(
    m: usize,
    inputs: usize,
    degree: usize,
    eps: f64,
    seed: u64,
) -> Result<WstarReport> {
    let d = 4usize;
    let act = SmoothActivation::sin(3.0);
    let fit = build_fit_function(&act, eps, 1e14, degree)?;
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    let mut e2 = vec![0.0; d];
    e2[1] = 1.0;
    let target = TwoLayerTarget::new(
        vec![e1],
        vec![e2],
        vec![vec![1.0]],
        vec![SmoothActivation::sin(3.0)],
    )?;
    let mut nrng = RngStream::new(seed, 0x57A);
    let net = TwoLayerNet::init(m, d, 1, 0.1, InitProfile::Theory, &mut nrng)?;
    let wstar = construct_two_layer_wstar(&target, &net, std::slice::from_ref(&fit))?;
    let row_norm_report = crate::construct::wstar_row_norm_report(&wstar, &net, target.p);

    let mut zero_net = net.clone();
    for v in zero_net.wdelta.data_mut() {
        *v = 0.0;
    }
    let mut star_net = net.clone();
    star_net.wdelta = wstar;

    let mut xrng = RngStream::new(seed, 0x57B);
    let mut sum_abs = 0.0;
    let mut max_abs = 0.0f64;
    for _ in 0..inputs {
        let mut x: Vec<f64> = (0..d).map(|_| xrng.standard_normal()).collect();
        let nrm = norm2(&x);
        for v in &mut x {
            *v /= nrm;
        }
        let frozen = net.sign_pattern(&x, SignAt::Init)?;
        let g1 = star_net.pseudo_forward(&x, &frozen, BiasMode::None)?;
        let g0 = zero_net.pseudo_forward(&x, &frozen, BiasMode::None)?;
        let err = ((g1[0] - g0[0]) - target.eval(&x)?[0]).abs();
        sum_abs += err;
        max_abs = max_abs.max(err);
    }
    Ok(WstarReport {
        m,
        inputs,
        fit_grid_residual: fit.grid_residual,
        mean_abs_error: sum_abs / inputs as f64,
        max_abs_error: max_abs,
        row_norm_report,
    })
}

// ---------------------------------------------------------------------------
// Verification suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: String,
    pub passed: bool,
    pub version: String,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Execute a named verification suite and write its JSON report under `out`.
pub fn run_verification(suite: &str, out: &Path, jobs: usize) -> Result<VerifyReport> {
    let checks = match suite {
        "hermite" => verify_hermite(),
        "interval" => verify_interval(),
        "fit" => verify_fit(jobs),
        "wstar" => verify_wstar(),
        "coupling" => verify_coupling(jobs),
        "gradients" => verify_gradients(),
        other => {
            return Err(LabError::Usage(format!(
                "unknown verification suite '{other}' (expected hermite, interval, fit, wstar, coupling, or gradients)"
            )))
        }
    };
    let report = VerifyReport {
        suite: suite.into(),
        passed: checks.iter().all(|c| c.passed),
        version: VERSION.into(),
        checks,
    };
    std::fs::create_dir_all(out)?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| LabError::Serde(e.to_string()))?;
    std::fs::write(out.join(format!("verify-{suite}.json")), json)?;
    Ok(report)
}

fn verify_hermite() -> Vec<CheckResult> {
    // E[h_i(g)h_j(g)] = δ_ij·i! for degrees ≤ 8, computed exactly from the
    // coefficient tables and Gaussian moments E[g^k] = (k−1)!! — a code path
    // independent of the three-term evaluation recurrence.
    let dmax = 8usize;
    let basis = crate::construct::HermiteBasis::new(dmax);
    let mut moments = vec![0.0f64; 2 * dmax + 1];
    moments[0] = 1.0;
    for k in (2..=2 * dmax).step_by(2) {
        moments[k] = moments[k - 2] * (k as f64 - 1.0);
    }
    let mut worst_rel: f64 = 0.0;
    let mut ok = true;
    for i in 0..=dmax {
        for j in i..=dmax {
            let mut inner = 0.0;
            for (a, &ca) in basis.coeffs[i].iter().enumerate() {
                for (b, &cb) in basis.coeffs[j].iter().enumerate() {
                    inner += ca * cb * moments[a + b];
                }
            }
            let expect = if i == j {
                (1..=i).map(|v| v as f64).product::<f64>()
            } else {
                0.0
            };
            let scale = ((1..=i).map(|v| v as f64).product::<f64>()
                * (1..=j).map(|v| v as f64).product::<f64>())
            .sqrt();
            let rel = (inner - expect).abs() / scale;
            worst_rel = worst_rel.max(rel);
            if rel > 1e-9 {
                ok = false;
            }
        }
    }
    let mut checks = vec![check(
        "orthogonality-moments-deg8",
        ok,
        format!("worst normalized deviation {worst_rel:.2e} (limit 1e-9)"),
    )];
    // Recurrence evaluation agrees with the explicit polynomial expansion.
    let mut worst_eval: f64 = 0.0;
    for i in 0..=dmax {
        for step in 0..=40 {
            let x = -2.0 + step as f64 / 10.0;
            let direct: f64 = basis.coeffs[i]
                .iter()
                .enumerate()
                .map(|(k, &c)| c * x.powi(k as i32))
                .sum();
            let rec = crate::construct::hermite_eval(i, x);
            let rel = (direct - rec).abs() / direct.abs().max(1.0);
            worst_eval = worst_eval.max(rel);
        }
    }
    checks.push(check(
        "recurrence-vs-expansion",
        worst_eval < 1e-10,
        format!("worst relative gap {worst_eval:.2e} on x ∈ [−2, 2]"),
    ));
    checks
}

fn verify_interval() -> Vec<CheckResult> {
    let tau = 0.01;
    let part = match IntervalPartition::new(tau) {
        Ok(p) => p,
        Err(e) => return vec![check("construct", false, e.to_string())],
    };
    let mut checks = Vec::new();
    let mut worst_measure: f64 = 0.0;
    let mut worst_sign: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    let mut worst_span: f64 = 0.0;
    let mut failed: Option<String> = None;
    for gi in 0..=40 {
        let y = -1.0 + gi as f64 / 20.0;
        match part.build(y) {
            Ok(p) => {
                worst_measure = worst_measure.max((p.measure() - tau).abs());
                worst_sign = worst_sign.max((p.prob_sign(1) - p.prob_sign(-1)).abs());
                worst_mean = worst_mean.max((p.signed_mass() - tau * y).abs());
                worst_span = worst_span.max(p.signed_span());
            }
            Err(e) => failed = Some(format!("y = {y}: {e}")),
        }
    }
    checks.push(check(
        "grid-built",
        failed.is_none(),
        failed.unwrap_or_else(|| "41 points".into()),
    ));
    checks.push(check(
        "balanced",
        worst_measure < 1e-6,
        format!("worst |measure − τ| = {worst_measure:.2e}"),
    ));
    checks.push(check(
        "symmetric",
        worst_sign < 1e-6,
        format!("worst sign-probability gap = {worst_sign:.2e}"),
    ));
    checks.push(check(
        "unbiased",
        worst_mean < 1e-6,
        format!("worst |E[s·g·𝕀] − τy| = {worst_mean:.2e}"),
    ));
    checks.push(check(
        "bounded",
        worst_span <= 10.0 * tau,
        format!("worst span = {worst_span:.4e} (limit {})", 10.0 * tau),
    ));
    let cont = (|| -> Result<f64> {
        let y0 = part.y_turn;
        let a = part.build(y0 * 0.999)?;
        let b = part.build(y0 * 1.001)?;
        Ok(symmetric_difference_measure(&a, &b))
    })();
    match cont {
        Ok(sd) => checks.push(check(
            "turning-point-continuity",
            sd.is_finite() && sd < 1e-3,
            format!("symmetric difference {sd:.2e} across the turning point"),
        )),
        Err(e) => checks.push(check("turning-point-continuity", false, e.to_string())),
    }
    checks
}

fn verify_fit(jobs: usize) -> Vec<CheckResult> {
    let cases = [("sin3", SmoothActivation::sin(3.0)), ("cos7", SmoothActivation::cos(7.0))];
    let results = parallel_map(cases.len(), jobs, |i| -> (String, Result<FitReport>) {
        let (name, act) = &cases[i];
        let r = (|| {
            let fit = build_fit_function(act, 0.05, 1e14, 20)?;
            let grid: Vec<f64> = (0..=20).map(|g| -1.0 + g as f64 / 10.0).collect();
            let mut rng = RngStream::new(1234, i as u64);
            verify_fit_function(&fit, act, &grid, 1_000_000, &mut rng)
        })();
        (name.to_string(), r)
    });
    results
        .into_iter()
        .map(|(name, r)| match r {
            Ok(rep) => {
                let ok = rep
                    .residual
                    .iter()
                    .zip(&rep.std_err)
                    .all(|(res, se)| *res <= 0.05 + 3.0 * se);
                check(
                    &format!("identity-{name}"),
                    ok,
                    format!(
                        "max residual {:.4e}, max std-err {:.4e}, E[h²] {:.3e}",
                        rep.max_residual, rep.max_std_err, rep.second_moment
                    ),
                )
            }
            Err(e) => check(&format!("identity-{name}"), false, e.to_string()),
        })
        .collect()
}

fn verify_wstar() -> Vec<CheckResult> {
    match wstar_probe(200_000, 2000, 20, 0.05, 77) {
        Ok(rep) => vec![check(
            "wstar-approximation",
            rep.mean_abs_error <= 0.1,
            format!(
                "mean abs error {:.4} (limit 0.1), max {:.4}, fit residual {:.2e}",
                rep.mean_abs_error, rep.max_abs_error, rep.fit_grid_residual
            ),
        )],
        Err(e) => vec![check("wstar-approximation", false, e.to_string())],
    }
}

fn verify_coupling(jobs: usize) -> Vec<CheckResult> {
    let cfg = ExperimentConfig {
        task: Task::CouplingSuite,
        m_grid: vec![1000, 4000, 16000],
        seeds: (0..20).map(|s| 100 + s).collect(),
        ..base_config(Task::CouplingSuite)
    };
    let mut checks = Vec::new();
    match coupling_reports(&cfg, jobs) {
        Ok(reports) => {
            let slope = flip_slope(&reports);
            checks.push(check(
                "flip-slope",
                (1.05..=1.35).contains(&slope),
                format!("log-log slope {slope:.3} (band [1.05, 1.35], target 1.2)"),
            ));
            // Monotone in the budget at fixed m₁.
            let mono = (|| -> Result<bool> {
                let mut rng = RngStream::new(7, 0xC0);
                let net =
                    ThreeLayerNet::init(2000, 8, 4, 1, InitProfile::Experiment, &mut rng)?;
                let mut x: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
                let nrm = norm2(&x);
                for v in &mut x {
                    *v /= nrm;
                }
                let vz = Matrix::zeros(8, 2000);
                let mut prev = 0usize;
                for &tau in &[0.01, 0.02, 0.04] {
                    let wp = flip_budget_perturbation(&net, &x, tau)?;
                    let rep = count_sign_flips(&net, &x, &wp, &vz)?;
                    if rep.flips1 < prev {
                        return Ok(false);
                    }
                    prev = rep.flips1;
                }
                Ok(prev > 0)
            })();
            match mono {
                Ok(ok) => checks.push(check("flip-monotone-in-tau", ok, "τ ∈ {0.01, 0.02, 0.04}".into())),
                Err(e) => checks.push(check("flip-monotone-in-tau", false, e.to_string())),
            }
        }
        Err(e) => checks.push(check("flip-slope", false, e.to_string())),
    }
    checks
}

fn verify_gradients() -> Vec<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    let count = 100usize;
    for c in 0..count {
        let rel = gradient_check_one(c as u64);
        match rel {
            Ok(r) => {
                worst = worst.max(r);
                if r > 1e-4 {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    vec![check(
        "central-fd",
        failures == 0,
        format!("{count} configs, worst relative error {worst:.2e}, {failures} failures"),
    )]
}

/// Analytic vs central-FD gradient on one random small config (two-layer for
/// even labels, three-layer for odd). Returns the relative error over all
/// trainable coordinates at a kink-free input.
fn gradient_check_one(label: u64) -> Result<f64> {
    let mut rng = RngStream::new(0xF00D, label);
    let d = 2 + rng.index(3);
    let k = 1 + rng.index(2);
    let h = 1e-5;
    let loss = LossFn::huber();
    let y: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
    if label % 2 == 0 {
        let m = 3 + rng.index(5);
        let mut net = TwoLayerNet::init(m, d, k, 1.0, InitProfile::Experiment, &mut rng)?;
        net.wdelta = sample_gaussian_matrix(m, d, 0.04, &mut rng)?;
        let x = kink_free_input(
            |x| {
                let c = net.forward_cache(x)?;
                Ok(c.pre)
            },
            d,
            &mut rng,
        )?;
        let out = net.forward(&x)?;
        let g = loss.grad(&out, &y);
        let analytic = net.backward(&x, &g)?;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..m {
            for j in 0..d {
                let base = net.wdelta.get(i, j);
                net.wdelta.set(i, j, base + h);
                let lp = loss.eval(&net.forward(&x)?, &y);
                net.wdelta.set(i, j, base - h);
                let lm = loss.eval(&net.forward(&x)?, &y);
                net.wdelta.set(i, j, base);
                let fd = (lp - lm) / (2.0 * h);
                num += (fd - analytic.get(i, j)).powi(2);
                den += analytic.get(i, j).powi(2);
            }
        }
        Ok((num / den.max(1e-12)).sqrt())
    } else {
        let m1 = 3 + rng.index(4);
        let m2 = 2 + rng.index(4);
        let mut net = ThreeLayerNet::init(m1, m2, d, k, InitProfile::Experiment, &mut rng)?;
        net.wdelta = sample_gaussian_matrix(m1, d, 0.01, &mut rng)?;
        net.vdelta = sample_gaussian_matrix(m2, m1, 0.01, &mut rng)?;
        let x = kink_free_input(
            |x| {
                let c = net.forward_cache(x)?;
                let mut pre = c.pre1.clone();
                pre.extend_from_slice(&c.pre2);
                Ok(pre)
            },
            d,
            &mut rng,
        )?;
        let out = net.forward(&x)?;
        let g = loss.grad(&out, &y);
        let (aw, av) = net.backward(&x, &g)?;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        {
            let mut probe = |mat: fn(&mut ThreeLayerNet) -> &mut Matrix,
                             an: &Matrix,
                             net: &mut ThreeLayerNet|
             -> Result<()> {
                let (rows, cols) = (an.rows, an.cols);
                for i in 0..rows {
                    for j in 0..cols {
                        let base = mat(net).get(i, j);
                        mat(net).set(i, j, base + h);
                        let lp = loss.eval(&net.forward(&x)?, &y);
                        mat(net).set(i, j, base - h);
                        let lm = loss.eval(&net.forward(&x)?, &y);
                        mat(net).set(i, j, base);
                        let fd = (lp - lm) / (2.0 * h);
                        num += (fd - an.get(i, j)).powi(2);
                        den += an.get(i, j).powi(2);
                    }
                }
                Ok(())
            };
            probe(|n| &mut n.wdelta, &aw, &mut net)?;
            probe(|n| &mut n.vdelta, &av, &mut net)?;
        }
        Ok((num / den.max(1e-12)).sqrt())
    }
}

/// Draw inputs until every pre-activation stays at least 1e−3 from the ReLU
/// kink (so the finite-difference stencil never crosses it).
fn kink_free_input<F>(mut pres: F, d: usize, rng: &mut RngStream) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    for _ in 0..200 {
        let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let p = pres(&x)?;
        if p.iter().all(|v| v.abs() > 1e-3) {
            return Ok(x);
        }
    }
    Err(LabError::ConstructionFailure(
        "no kink-free input found in 200 draws".into(),
    ))
}

/// A config with sane defaults for the given task (used by suites and tests).
pub fn base_config(task: Task) -> ExperimentConfig {
    ExperimentConfig {
        task,
        arches: default_arches(),
        m_grid: default_m_grid(),
        n_grid: default_n_grid(),
        seeds: default_seeds(),
        d: default_d(),
        target: default_target(),
        out_dir: None,
        paper_scale: false,
        epochs: None,
        lr_grid: None,
        wd_grid: None,
        batch_size: default_batch(),
        momentum: default_momentum(),
        eval_subsample: default_eval_subsample(),
        test_factor: default_test_factor(),
        tau_w: default_tau_w(),
        coupling_m2: default_coupling_m2(),
        fit_degree: default_fit_degree(),
        fit_eps: default_fit_eps(),
    }
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Minimal deterministic line chart. Series are drawn in order with a fixed
/// palette; all numbers are formatted with fixed precision so identical data
/// yields identical bytes.
fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    log_x: bool,
    log_y: bool,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<String> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(LabError::Usage("nothing to plot".into()));
    }
    let tx = |v: f64| if log_x { v.max(1e-300).log10() } else { v };
    let ty = |v: f64| if log_y { v.max(1e-300).log10() } else { v };
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            xmin = xmin.min(tx(x));
            xmax = xmax.max(tx(x));
            ymin = ymin.min(ty(y));
            ymax = ymax.max(ty(y));
        }
    }
    if xmax - xmin < 1e-12 {
        xmax = xmin + 1.0;
    }
    if ymax - ymin < 1e-12 {
        ymax = ymin + 1.0;
    }
    let (w, hgt, ml, mr, mt, mb) = (640.0, 480.0, 70.0, 20.0, 40.0, 50.0);
    let px = |x: f64| ml + (tx(x) - xmin) / (xmax - xmin) * (w - ml - mr);
    let py = |y: f64| hgt - mb - (ty(y) - ymin) / (ymax - ymin) * (hgt - mt - mb);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{hgt}\" viewBox=\"0 0 {w} {hgt}\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{w}\" height=\"{hgt}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    // Axes.
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        hgt - mb,
        w - mr,
        hgt - mb
    ));
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        hgt - mb
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        (ml + w - mr) / 2.0,
        hgt - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>\n",
        (mt + hgt - mb) / 2.0,
        (mt + hgt - mb) / 2.0
    ));
    // Tick marks at each distinct x value of the first nonempty series.
    let mut xticks: Vec<f64> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|&(x, _)| x))
        .collect();
    xticks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xticks.dedup();
    for x in &xticks {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{x}</text>\n",
            px(*x),
            hgt - mb + 16.0
        ));
    }
    for frac in [0.0, 0.5, 1.0] {
        let yv = ymin + frac * (ymax - ymin);
        let shown = if log_y { 10f64.powf(yv) } else { yv };
        let ypix = hgt - mb - frac * (hgt - mt - mb);
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{shown:.3e}</text>\n",
            ml - 6.0,
            ypix + 4.0
        ));
    }
    for (si, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in pts {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            w - mr - 150.0,
            mt + 16.0 * si as f64 + 12.0
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Render the figure-style SVGs for a sweep summary (plus the fig7 ratio CSV
/// when present). Returns the written paths.
pub fn emit_plots(summary: &SweepSummary, out: &Path) -> Result<Vec<PathBuf>> {
    if summary.cells.is_empty() && summary.task != "fig7-regularizer" {
        return Err(LabError::Usage("empty summary: nothing to plot".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let by_arch = |key: fn(&CellSummary) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
        let mut arches: Vec<String> = Vec::new();
        for c in &summary.cells {
            let label = if c.variant == "sgd" {
                c.arch.clone()
            } else {
                format!("{}-{}", c.arch, c.variant)
            };
            if !arches.contains(&label) {
                arches.push(label);
            }
        }
        arches
            .into_iter()
            .map(|label| {
                let mut pts: Vec<(f64, f64)> = summary
                    .cells
                    .iter()
                    .filter(|c| {
                        let l = if c.variant == "sgd" {
                            c.arch.clone()
                        } else {
                            format!("{}-{}", c.arch, c.variant)
                        };
                        l == label
                    })
                    .map(|c| (key(c), c.median_test_loss))
                    .collect();
                pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                (label, pts)
            })
            .collect()
    };
    match summary.task.as_str() {
        "fig1a-sweep-m" | "fig6-tanh" | "fig7-regularizer" => {
            let svg = svg_line_chart(
                &format!("{}: median test loss vs m", summary.task),
                "m",
                "median test loss",
                true,
                true,
                &by_arch(|c| c.m as f64),
            )?;
            let p = out.join("test-loss-vs-m.svg");
            std::fs::write(&p, svg)?;
            written.push(p);
        }
        "fig1b-sweep-n" => {
            let svg = svg_line_chart(
                "fig1b-sweep-n: median test loss vs N",
                "N",
                "median test loss",
                true,
                true,
                &by_arch(|c| c.n as f64),
            )?;
            let p = out.join("test-loss-vs-n.svg");
            std::fs::write(&p, svg)?;
            written.push(p);
        }
        other => {
            return Err(LabError::Usage(format!(
                "task '{other}' has no figure output"
            )))
        }
    }
    // Ratio curves if the fig7 artifact exists.
    let ratio_path = out.join("fig7_ratio.csv");
    if ratio_path.exists() {
        let text = std::fs::read_to_string(&ratio_path)?;
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 8 {
                continue;
            }
            let m: f64 = f[0].parse().unwrap_or(f64::NAN);
            let reg = f[1].to_string();
            let ratio: f64 = f[6].parse().unwrap_or(f64::NAN);
            match series.iter_mut().find(|(n, _)| *n == reg) {
                Some((_, pts)) => pts.push((m, ratio)),
                None => series.push((reg, vec![(m, ratio)])),
            }
        }
        // Median per m within each regularizer.
        for (_, pts) in &mut series {
            let mut by_m: Vec<(f64, Vec<f64>)> = Vec::new();
            for &(m, r) in pts.iter() {
                match by_m.iter_mut().find(|(bm, _)| *bm == m) {
                    Some((_, v)) => v.push(r),
                    None => by_m.push((m, vec![r])),
                }
            }
            *pts = by_m
                .into_iter()
                .map(|(m, mut v)| (m, median(&mut v)))
                .collect();
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        if !series.is_empty() {
            let svg = svg_line_chart(
                "fig7: first-layer norm ratio vs m",
                "m",
                "m·‖W‖₂,₄⁴/‖W‖_F⁴",
                true,
                false,
                &series,
            )?;
            let p = out.join("ratio-vs-m.svg");
            std::fs::write(&p, svg)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let err = ExperimentConfig::from_toml("task = \"fig1a-sweep-m\"\nbogus = 3\n");
        assert!(matches!(err, Err(LabError::Usage(_))), "{err:?}");
        let err = ExperimentConfig::from_toml("task = \"fig1a-sweep-m\"\nseeds = []\n");
        assert!(err.is_err());
        let err = ExperimentConfig::from_toml("task = \"fig1a-sweep-m\"\nd = 7\n");
        assert!(err.is_err());
        let ok = ExperimentConfig::from_toml("task = \"coupling-suite\"\nd = 7\n");
        assert!(ok.is_ok());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml("task = \"fig1a-sweep-m\"\n").unwrap();
        let b = ExperimentConfig::from_toml("task = \"fig1a-sweep-m\"\n").unwrap();
        let c = ExperimentConfig::from_toml("task = \"fig1a-sweep-m\"\nseeds = [9]\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn grid_profiles() {
        let mut cfg = base_config(Task::Fig1aSweepM);
        let desk = resolve_grid(&cfg);
        assert_eq!(desk.epochs, 200);
        assert_eq!(desk.lrs, vec![1e-1, 1e-2, 1e-3, 1e-4]);
        cfg.paper_scale = true;
        let paper = resolve_grid(&cfg);
        assert_eq!(paper.epochs, 800);
        assert_eq!(paper.lr_drop, Some(400));
        assert_eq!(paper.lrs.len(), 12);
        cfg.epochs = Some(10);
        cfg.lr_grid = Some(vec![0.05]);
        let over = resolve_grid(&cfg);
        assert_eq!(over.epochs, 10);
        assert_eq!(over.lrs, vec![0.05]);
    }

    #[test]
    fn parallel_map_is_order_stable() {
        let out = parallel_map(50, 4, |i| i * i);
        assert_eq!(out, (0..50).map(|i| i * i).collect::<Vec<_>>());
        let empty: Vec<usize> = parallel_map(0, 4, |i| i);
        assert!(empty.is_empty());
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            arches: vec![Arch::TwoLayer, Arch::TwoLayerLast],
            m_grid: vec![8, 32],
            n_grid: vec![40],
            seeds: vec![1, 2, 3],
            epochs: Some(3),
            lr_grid: Some(vec![0.05, 0.01]),
            wd_grid: Some(vec![0.0]),
            eval_subsample: 50,
            test_factor: 2,
            ..base_config(Task::Fig1aSweepM)
        }
    }

    #[test]
    fn sweep_is_byte_deterministic() {
        let cfg = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_sweep(&cfg, d1.path(), 1).unwrap();
        run_sweep(&cfg, d2.path(), 2).unwrap();
        for name in ["sweep.csv", "summary.csv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs/job counts");
        }
        // Rows carry provenance.
        let sweep = std::fs::read_to_string(d1.path().join("sweep.csv")).unwrap();
        let hash = cfg.hash();
        assert!(sweep.lines().skip(1).all(|l| l.contains(&hash) && l.contains(VERSION)));
    }

    #[test]
    fn sweep_summary_round_trips_and_plots() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let summary = run_sweep(&cfg, dir.path(), 1).unwrap();
        assert_eq!(summary.cells.len(), 4); // 2 arches × 2 widths
        let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let back = summary_from_csv(&text).unwrap();
        // CSV floats are 12-digit, so compare via re-serialization.
        assert_eq!(summary_to_csv(&back), text);
        assert_eq!(back.config_hash, summary.config_hash);
        let written = emit_plots(&summary, dir.path()).unwrap();
        assert_eq!(written.len(), 1);
        let svg1 = std::fs::read(&written[0]).unwrap();
        emit_plots(&back, dir.path()).unwrap();
        let svg2 = std::fs::read(&written[0]).unwrap();
        assert_eq!(svg1, svg2, "SVG not deterministic");
        // Empty summaries refuse to plot.
        let empty = SweepSummary {
            task: "fig1a-sweep-m".into(),
            config_hash: "x".into(),
            version: VERSION.into(),
            cells: Vec::new(),
        };
        assert!(emit_plots(&empty, dir.path()).is_err());
    }

    #[test]
    fn divergent_runs_are_excluded_from_best() {
        // A huge learning rate overflows the linear model; the summary must
        // fall back to the stable grid point. (The ReLU nets instead die
        // silently at huge rates, so the linear arch is the reliable probe.)
        let cfg = ExperimentConfig {
            arches: vec![Arch::TwoLayerLast],
            m_grid: vec![16],
            n_grid: vec![30],
            seeds: vec![1],
            epochs: Some(5),
            lr_grid: Some(vec![1e30, 0.01]),
            wd_grid: Some(vec![0.0]),
            batch_size: 10,
            test_factor: 2,
            ..base_config(Task::Fig1aSweepM)
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = run_sweep(&cfg, dir.path(), 1).unwrap();
        assert_eq!(summary.cells.len(), 1);
        assert_eq!(summary.cells[0].lr, 0.01);
        let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert!(sweep.contains("diverged"), "diverged run not recorded");
    }

    #[test]
    fn verification_rejects_unknown_suite() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_verification("nonsense", dir.path(), 1),
            Err(LabError::Usage(_))
        ));
    }

    #[test]
    fn interval_suite_passes() {
        let dir = tempfile::tempdir().unwrap();
        let rep = run_verification("interval", dir.path(), 1).unwrap();
        assert!(rep.passed, "{:?}", rep.checks);
        assert!(dir.path().join("verify-interval.json").exists());
    }

    #[test]
    fn coupling_task_emits_csv_with_slope() {
        let cfg = ExperimentConfig {
            m_grid: vec![200, 800],
            seeds: vec![1, 2, 3],
            ..base_config(Task::CouplingSuite)
        };
        let dir = tempfile::tempdir().unwrap();
        run_sweep(&cfg, dir.path(), 1).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("coupling.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
        let json = std::fs::read_to_string(dir.path().join("coupling_summary.json")).unwrap();
        assert!(json.contains("flip_slope"));
    }

    #[test]
    fn gradient_suite_single_config() {
        // Full 100-config sweep runs in the verification suite; spot-check a
        // handful here.
        for label in 0..6 {
            let rel = gradient_check_one(label).unwrap();
            assert!(rel <= 1e-4, "config {label}: relative error {rel}");
        }
    }
}
