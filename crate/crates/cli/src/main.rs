mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lora_landscape::experiments::{self, SweepResult};
use lora_landscape::landscape::{self, Tolerances};
use lora_landscape::model::LoraPoint;
use lora_landscape::optimizer::{self, RunResult, TracePoint};
use lora_landscape::stats::{self, StatsOptions};
use lora_landscape::synthetic::{self, LossKind, ProblemInstance};
use lora_landscape::{theory, Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use config::CliConfig;

#[derive(Parser, Debug)]
#[command(name = "lora-landscape", version, about = "Loss-landscape analysis for low-rank adapters on synthetic linearized models")]
struct Cli {
    /// TOML config; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GenFlags {
    /// Rows of the adapted weight [default: 16]
    #[arg(long)]
    m: Option<usize>,
    /// Columns of the adapted weight [default: 16]
    #[arg(long)]
    n: Option<usize>,
    /// Outputs per sample [default: 2]
    #[arg(long = "K")]
    k: Option<usize>,
    /// Samples [default: 32]
    #[arg(long = "N")]
    samples: Option<usize>,
    /// Instance seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Rank of the planted target [default: 1]
    #[arg(long)]
    target_rank: Option<usize>,
    /// Label noise standard deviation (MSE only) [default: 0.01]
    #[arg(long)]
    noise_std: Option<f64>,
    /// mse or ce [default: mse]
    #[arg(long)]
    loss: Option<LossKind>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic instance and save it to a directory.
    Gen {
        #[command(flatten)]
        gen: GenFlags,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train adapters from several initializations.
    Train {
        /// Saved instance directory; when absent one is generated from the gen settings.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[command(flatten)]
        gen: GenFlags,
        /// Adapter rank [default: 1]
        #[arg(long)]
        rank: Option<usize>,
        /// Iteration cap per λ stage [default: 200000]
        #[arg(long)]
        max_iters: Option<usize>,
        /// Comma-separated seeds [default: 0..49]
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify trained points as global minima, spurious SOSPs or saddles.
    Analyze {
        /// Run files written by `train`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Reference loss; defaults to the best converged data loss among the given runs.
        #[arg(long)]
        floor: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the capacity ratio across sample counts and locate the spurious-minimum boundary.
    SweepBoundary {
        /// Comma-separated KN values [default: 8,16,24,32,64,96,128]
        #[arg(long, value_delimiter = ',')]
        kn: Option<Vec<usize>>,
        /// Initializations per cell [default: 50]
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit C*(KN) = C*_inf + b KN^(-2/3) to a boundary summary.
    FitCstar {
        /// Tab-separated file with `KN` and `Cstar` columns (as written by sweep-boundary).
        summary: PathBuf,
    },
    /// Minimal ranks under the classical and capacity-based conditions.
    Thresholds {
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long = "N")]
        samples: Option<usize>,
        /// Capacity constant [default: 1.35]
        #[arg(long)]
        cstar: Option<f64>,
    },
    /// Empirical PL constant along a recorded trajectory.
    PlEstimate {
        run: PathBuf,
        /// Reference loss; defaults to the last recorded loss.
        #[arg(long)]
        l_star: Option<f64>,
    },
    /// Held-out accuracy of cross-entropy adapters across ranks.
    RankSelect {
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-entropy runs across ranks: spurious counts and PL constants.
    CeConsistency {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distributional statistics of the per-sample Jacobians of a saved instance.
    Jstats {
        instance: PathBuf,
        /// JSON list of index lists partitioning 0..m*n (row-major).
        #[arg(long)]
        blocks: Option<PathBuf>,
        /// Effective-rank eigenvalue fraction [default: 0.01]
        #[arg(long)]
        erank_fraction: Option<f64>,
    },
}

/// One trained point plus its trajectory, as persisted by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunFile {
    instance: PathBuf,
    loss_kind: LossKind,
    seed: u64,
    m: usize,
    n: usize,
    rank: usize,
    lambda: f64,
    /// Column-major.
    u: Vec<f64>,
    v: Vec<f64>,
    data_loss: f64,
    total_loss: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    diagnostic: Option<String>,
    trace: Vec<TracePoint>,
}

impl RunFile {
    fn from_run(run: &RunResult, instance: &Path, kind: LossKind) -> Self {
        let p = &run.point;
        Self {
            instance: instance.to_path_buf(),
            loss_kind: kind,
            seed: run.seed,
            m: p.u.nrows(),
            n: p.v.nrows(),
            rank: p.rank(),
            lambda: p.lambda,
            u: p.u.as_slice().to_vec(),
            v: p.v.as_slice().to_vec(),
            data_loss: run.loss.data_loss,
            total_loss: run.loss.total,
            grad_norm: run.grad_norm,
            iterations: run.iterations,
            converged: run.converged,
            diagnostic: run.diagnostic.clone(),
            trace: run.trace.clone(),
        }
    }

    fn point(&self, path: &Path) -> Result<LoraPoint> {
        if self.u.len() != self.m * self.rank || self.v.len() != self.n * self.rank {
            return Err(format_err(path, "factor lengths do not match m, n, rank"));
        }
        LoraPoint::new(
            DMatrix::from_column_slice(self.m, self.rank, &self.u),
            DMatrix::from_column_slice(self.n, self.rank, &self.v),
            self.lambda,
        )
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn apply_gen(cfg: &mut CliConfig, g: &GenFlags) {
    let gc = &mut cfg.gen;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(x) = g.$f { gc.$f = x; })* };
    }
    set!(m, n, k, samples, seed, target_rank, noise_std, loss);
}

fn generate(cfg: &CliConfig) -> Result<ProblemInstance> {
    let g = &cfg.gen;
    let op = synthetic::gen_operator_capped(g.m, g.n, g.k, g.samples, g.seed, cfg.global.max_operator_entries)?;
    synthetic::gen_instance(op, g.target_rank, g.noise_std, g.loss, g.seed)
}

fn resolve_out(flag: Option<PathBuf>, cfg: &CliConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| cfg.global.out.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(w) = cli.workers {
        cfg.global.workers = w;
    }
    if cfg.global.workers > 0 {
        // a second build only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.global.workers).build_global();
    }

    match cli.command {
        Command::Gen { gen, out } => {
            apply_gen(&mut cfg, &gen);
            let out = resolve_out(out, &cfg, "instance");
            let inst = generate(&cfg)?;
            synthetic::save_instance(&inst, &out)?;
            cfg.snapshot(&out)?;
            println!(
                "instance m={} n={} K={} N={} loss={} -> {}",
                inst.rows(),
                inst.cols(),
                inst.outputs(),
                inst.samples(),
                inst.loss_kind,
                out.display()
            );
        }
        Command::Train { instance, gen, rank, max_iters, seeds, out } => {
            apply_gen(&mut cfg, &gen);
            if let Some(r) = rank {
                cfg.train.rank = r;
            }
            if let Some(it) = max_iters {
                cfg.train.max_iters = it;
            }
            if let Some(s) = seeds {
                cfg.train.seeds = s;
            }
            let out = resolve_out(out, &cfg, "train");
            let (inst, inst_dir) = match instance {
                Some(dir) => (synthetic::load_instance(&dir)?, dir),
                None => {
                    let inst = generate(&cfg)?;
                    let dir = out.join("instance");
                    synthetic::save_instance(&inst, &dir)?;
                    (inst, dir)
                }
            };
            let kind = inst.loss_kind;
            let runs = optimizer::multi_seed(&inst, &cfg.train, kind)?;
            cfg.snapshot(&out)?;
            for run in &runs {
                let path = out.join("runs").join(format!("seed_{:05}.json", run.seed));
                write_json(&path, &RunFile::from_run(run, &inst_dir, kind))?;
                println!(
                    "seed={} converged={} iterations={} data_loss={:.6e} grad_norm={:.3e}",
                    run.seed, run.converged, run.iterations, run.loss.data_loss, run.grad_norm
                );
            }
        }
        Command::Analyze { runs, floor, out } => {
            let files: Vec<(PathBuf, RunFile)> =
                runs.iter().map(|p| read_json::<RunFile>(p).map(|f| (p.clone(), f))).collect::<Result<_>>()?;
            let floor = match floor {
                Some(f) => f,
                None => files
                    .iter()
                    .filter(|(_, f)| f.converged)
                    .map(|(_, f)| f.data_loss)
                    .fold(f64::INFINITY, f64::min),
            };
            if !floor.is_finite() {
                return Err(Error::InvalidArgument("no converged run to take the floor from; pass --floor".into()));
            }
            let tol = Tolerances::default();
            let mut reports = Vec::new();
            for (path, f) in &files {
                let inst = synthetic::load_instance(&f.instance)?;
                let p = f.point(path)?;
                let analysis = landscape::analyze_point(&inst, &p, f.loss_kind, &tol)?;
                let report = landscape::classify(analysis, f.converged, floor, &tol);
                println!(
                    "{} seed={} {} data_loss={:.6e} min_eig={:.3e} grad_norm={:.3e}",
                    path.display(),
                    f.seed,
                    report.classification,
                    report.analysis.loss.data_loss,
                    report.analysis.min_hessian_eig,
                    report.analysis.grad_norm
                );
                reports.push(report);
            }
            if let Some(out) = out.or(cfg.global.out.clone()) {
                write_json(&out.join("analysis.json"), &reports)?;
            }
        }
        Command::SweepBoundary { kn, seeds, out } => {
            if let Some(kn) = kn {
                cfg.sweep.kn_grid = kn;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds_per_cell = s;
            }
            let out = resolve_out(out, &cfg, "sweep");
            cfg.snapshot(&out)?;
            let res: SweepResult = experiments::boundary_sweep(&cfg.sweep, Some(&out))?;
            write_text(&out.join("summary.tsv"), &res.summary_tsv())?;
            write_text(&out.join("fits.txt"), &res.fits_text())?;
            print!("{}", res.summary_tsv());
            print!("{}", res.fits_text());
        }
        Command::FitCstar { summary } => {
            let points = read_summary(&summary)?;
            let fit = theory::tracy_widom_fit(&points)?;
            println!("Cstar_inf {:.6}", fit.cstar_inf);
            println!("b {:.6}", fit.b);
            println!("residual {:.3e}", fit.residual);
            println!("points {}", fit.points);
        }
        Command::Thresholds { m, n, k, samples, cstar } => {
            let t = &mut cfg.thresholds;
            t.m = m.unwrap_or(t.m);
            t.n = n.unwrap_or(t.n);
            t.k = k.unwrap_or(t.k);
            t.samples = samples.unwrap_or(t.samples);
            t.cstar = cstar.unwrap_or(t.cstar);
            let report = theory::threshold_report(t.m, t.n, t.k, t.samples, t.cstar, &t.ranks)?;
            print!("{}", report.render());
        }
        Command::PlEstimate { run, l_star } => {
            let f: RunFile = read_json(&run)?;
            let last_stage = f.trace.iter().map(|t| t.stage).max().unwrap_or(0);
            let traj: Vec<(f64, f64)> =
                f.trace.iter().filter(|t| t.stage == last_stage).map(|t| (t.loss, t.grad_norm)).collect();
            let l_star = l_star.unwrap_or(f.total_loss);
            let est = theory::pl_estimate(&traj, l_star)?;
            println!("mu_hat {:.6e}", est.mu_hat);
            println!("l_star {:.12e}", est.l_star_used);
            println!("points {} used {}", est.trajectory_len, est.used);
        }
        Command::RankSelect { ranks, seeds, out } => {
            if let Some(r) = ranks {
                cfg.rank_select.ranks = r;
            }
            if let Some(s) = seeds {
                cfg.rank_select.seeds = s;
            }
            let res = experiments::rank_selection_experiment(&cfg.rank_select)?;
            println!("rank\tmean_test_accuracy");
            for (r, acc) in res.mean_test_accuracy() {
                println!("{r}\t{acc:.4}");
            }
            if let Some(out) = out.or(cfg.global.out.clone()) {
                cfg.snapshot(&out)?;
                write_json(&out.join("rank_select.json"), &res)?;
            }
        }
        Command::CeConsistency { out } => {
            let res = experiments::ce_consistency_sweep(&cfg.ce)?;
            println!("rank\tseed\tclass\tdata_loss\tmu_hat");
            for r in &res.runs {
                let mu = r.mu_hat.map_or("undefined".to_string(), |m| format!("{m:.4e}"));
                println!("{}\t{}\t{}\t{:.6e}\t{mu}", r.rank, r.seed, r.classification, r.data_loss);
            }
            println!("spurious {} all_mu_positive {}", res.spurious, res.all_mu_positive);
            if let Some(out) = out.or(cfg.global.out.clone()) {
                cfg.snapshot(&out)?;
                write_json(&out.join("ce_consistency.json"), &res)?;
            }
        }
        Command::Jstats { instance, blocks, erank_fraction } => {
            if let Some(f) = erank_fraction {
                cfg.jstats.effective_rank_fraction = f;
            }
            let op = synthetic::load_operator(&instance)?;
            let blocks = blocks.map(|p| read_json::<Vec<Vec<usize>>>(&p)).transpose()?;
            let opts = StatsOptions {
                effective_rank_fraction: cfg.jstats.effective_rank_fraction,
                blocks,
                seed: cfg.jstats.seed,
            };
            print!("{}", stats::jacobian_stats(&op, &opts)?.render());
        }
    }
    Ok(())
}

/// `(KN, C*)` pairs from a summary; rows whose `Cstar` is not a number are skipped.
fn read_summary(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| format_err(path, "empty summary"))?.split('\t').collect();
    let col = |name: &str| header.iter().position(|h| h.trim() == name).ok_or_else(|| format_err(path, format!("missing column `{name}`")));
    let (kn_col, c_col) = (col("KN")?, col("Cstar")?);
    let mut points = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |i: usize| fields.get(i).map(|s| s.trim()).ok_or_else(|| format_err(path, format!("short row `{line}`")));
        let kn: f64 = get(kn_col)?.parse().map_err(|_| format_err(path, format!("bad KN in `{line}`")))?;
        if let Ok(c) = get(c_col)?.parse::<f64>() {
            points.push((kn, c));
        }
    }
    Ok(points)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::DimensionMismatch(_) | Error::Infeasible { .. } => 2,
        Error::CapExceeded(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn kind_name(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::CapExceeded(_) => "cap_exceeded",
        Error::RankDeficient { .. } => "rank_deficient",
        Error::NonFinite(_) => "non_finite",
        Error::Diverged(_) => "diverged",
        Error::Infeasible { .. } => "infeasible",
        Error::Undefined(_) => "undefined",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", kind_name(&e), e.to_string());
            ExitCode::from(exit_code(&e))
        }
    }
}
