//! Boundary sweep, cross-entropy consistency sweep and synthetic rank selection.
//!
//! Sweep cells are persisted as self-describing `key=value` lines under
//! `records/`, one file per `(KN, m, n)` cell written atomically, so an
//! interrupted sweep resumes by skipping cells whose config hash matches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::landscape::{self, Classification, Tolerances};
use crate::model;
use crate::optimizer::{self, TrainConfig};
use crate::rng::{self, GENERATOR_ID};
use crate::synthetic::{gen_instance, gen_operator, LossKind};
use crate::theory::{self, FiniteSizeFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimsRule {
    /// `m = n` = smallest integer with `r(m + n) − r² ≥ ρ·KN`.
    SquareAnyInteger,
    /// `m = n` = smallest even integer with `r(m + n) − r² ≥ ρ·KN`.
    SquareEven,
}

impl DimsRule {
    /// Square dims realizing at least `rho` at rank `r` for `kn` targets.
    pub fn realize(self, rho: f64, r: usize, kn: usize) -> Result<usize> {
        if !(rho > 0.0) || r == 0 || kn == 0 {
            return Err(Error::InvalidArgument(format!("cannot realize rho = {rho} at r = {r}, KN = {kn}")));
        }
        let need = rho * kn as f64;
        let mut m = r.max(1);
        // guard against ρ·KN rounding just above an attainable integer
        while (theory::capacity(m, m, r) as f64) < need - 1e-9 * need {
            m += 1;
        }
        if self == DimsRule::SquareEven && m % 2 == 1 {
            m += 1;
        }
        Ok(m)
    }
}

/// `0.8, 0.875, …, 2.0`.
pub fn default_rho_grid() -> Vec<f64> {
    (0..17).map(|i| (800 + 75 * i) as f64 / 1000.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kn_grid: Vec<usize>,
    /// Output classes `K`; `N = KN/K`.
    pub outputs: usize,
    pub rho_grid: Vec<f64>,
    pub rank: usize,
    pub seeds_per_cell: usize,
    pub noise_std: f64,
    pub spurious_threshold: f64,
    pub dims_rule: DimsRule,
    /// Parent seed for per-cell instances.
    pub instance_seed: u64,
    pub train: TrainConfig,
    pub tolerances: Tolerances,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kn_grid: vec![8, 16, 24, 32, 64, 96, 128],
            outputs: 2,
            rho_grid: default_rho_grid(),
            rank: 1,
            seeds_per_cell: 50,
            noise_std: 0.01,
            spurious_threshold: 0.05,
            dims_rule: DimsRule::SquareAnyInteger,
            instance_seed: 0,
            train: TrainConfig::default(),
            tolerances: Tolerances::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kn_grid.is_empty() || self.rho_grid.is_empty() {
            return Err(Error::InvalidArgument("KN and rho grids must be nonempty".into()));
        }
        if self.rho_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("rho grid must be strictly ascending".into()));
        }
        if self.outputs == 0 || self.kn_grid.iter().any(|&kn| kn == 0 || kn % self.outputs != 0) {
            return Err(Error::InvalidArgument(format!("every KN must be a positive multiple of K = {}", self.outputs)));
        }
        if self.seeds_per_cell == 0 {
            return Err(Error::InvalidArgument("seeds_per_cell must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.spurious_threshold) {
            return Err(Error::InvalidArgument("spurious_threshold must lie in [0, 1]".into()));
        }
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rank: self.rank,
            seeds: (0..self.seeds_per_cell as u64).collect(),
            ..self.train.clone()
        }
    }
}

/// Non-finite floats travel as the strings `nan`, `inf`, `-inf`.
mod lenient_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string().to_lowercase())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(x),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One training run inside a sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kn: usize,
    pub m: usize,
    pub n: usize,
    /// Realized `(r(m + n) − r²)/KN`.
    #[serde(with = "lenient_float")]
    pub rho: f64,
    pub seed: u64,
    pub instance_seed: u64,
    pub classification: Classification,
    #[serde(with = "lenient_float")]
    pub data_loss: f64,
    #[serde(with = "lenient_float")]
    pub total_loss: f64,
    #[serde(with = "lenient_float")]
    pub grad_norm: f64,
    #[serde(with = "lenient_float")]
    pub min_eig: f64,
    #[serde(with = "lenient_float")]
    pub balance: f64,
    /// `‖uᵀu‖_F`, the scale of the balancedness bound.
    #[serde(with = "lenient_float")]
    pub gram_norm: f64,
    pub effective_rank: usize,
    #[serde(with = "lenient_float")]
    pub r11_deviation: f64,
    #[serde(with = "lenient_float")]
    pub r12_norm: f64,
    #[serde(with = "lenient_float")]
    pub r21_norm: f64,
    #[serde(with = "lenient_float")]
    pub sigma1_r22: f64,
    #[serde(with = "lenient_float")]
    pub residual_norm: f64,
    #[serde(with = "lenient_float")]
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(with = "lenient_float")]
    pub global_floor: f64,
    #[serde(with = "lenient_float")]
    pub ls_floor: f64,
    pub config_hash: String,
    pub generator: String,
}

impl RunRecord {
    pub fn to_line(&self) -> String {
        let value = serde_json::to_value(self).expect("record serializes");
        let obj = value.as_object().expect("record is an object");
        let mut parts = Vec::with_capacity(obj.len());
        for (k, v) in obj {
            let text = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            parts.push(format!("{k}={text}"));
        }
        parts.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let mut obj = serde_json::Map::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed record field `{part}`")))?;
            let parsed = match k {
                "classification" | "config_hash" | "generator" => serde_json::Value::String(v.to_string()),
                // std parsing is correctly rounded, so floats round-trip exactly
                _ => {
                    if let Ok(x) = v.parse::<u64>() {
                        x.into()
                    } else if let Ok(b) = v.parse::<bool>() {
                        b.into()
                    } else {
                        match v.parse::<f64>() {
                            Ok(x) if x.is_finite() => x.into(),
                            _ => serde_json::Value::String(v.to_string()),
                        }
                    }
                }
            };
            obj.insert(k.to_string(), parsed);
        }
        serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| Error::InvalidArgument(format!("record: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub kn: usize,
    pub m: usize,
    pub n: usize,
    /// Grid points mapped to this cell.
    pub grid_rho: Vec<f64>,
    pub rho: f64,
    pub spurious: usize,
    pub saddles: usize,
    pub not_converged: usize,
    pub runs: usize,
    pub spurious_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub kn: usize,
    /// Realized `ρ` of the boundary cell.
    pub cstar: f64,
    /// The first grid point that maps to it.
    pub grid_rho: f64,
    pub m: usize,
    pub c_emp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_hash: String,
    pub records: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    /// One entry per KN; `None` when no cell falls below the threshold.
    pub boundaries: Vec<(usize, Option<Boundary>)>,
    /// Mean `c_emp` over KN ≥ 32.
    pub c_bar: Option<f64>,
    pub cstar_theory: Option<f64>,
    pub fit: Option<FiniteSizeFit>,
    /// Spearman correlation of realized `ρ` against spurious fraction, per KN.
    pub spearman: Vec<(usize, Option<f64>)>,
}

fn cell_seed(parent: u64, kn: usize, m: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(parent, kn as u64), m as u64)
}

fn failed_record(kn: usize, m: usize, r: usize, seed: u64, instance_seed: u64, hash: &str) -> RunRecord {
    RunRecord {
        kn,
        m,
        n: m,
        rho: theory::dim_fraction(m, m, r, kn),
        seed,
        instance_seed,
        classification: Classification::NotConverged,
        data_loss: f64::NAN,
        total_loss: f64::NAN,
        grad_norm: f64::NAN,
        min_eig: f64::NAN,
        balance: f64::NAN,
        gram_norm: f64::NAN,
        effective_rank: 0,
        r11_deviation: f64::NAN,
        r12_norm: f64::NAN,
        r21_norm: f64::NAN,
        sigma1_r22: f64::NAN,
        residual_norm: f64::NAN,
        lambda: f64::NAN,
        iterations: 0,
        converged: false,
        global_floor: f64::NAN,
        ls_floor: f64::NAN,
        config_hash: hash.to_string(),
        generator: GENERATOR_ID.to_string(),
    }
}

/// Trains and classifies every seed of one `(KN, m)` cell.
pub fn run_cell(cfg: &SweepConfig, kn: usize, m: usize, hash: &str) -> Vec<RunRecord> {
    let instance_seed = cell_seed(cfg.instance_seed, kn, m);
    let tcfg = cfg.train_config();
    let attempt = || -> Result<Vec<RunRecord>> {
        let op = gen_operator(m, m, cfg.outputs, kn / cfg.outputs, instance_seed)?;
        let inst = gen_instance(op, 1, cfg.noise_std, LossKind::Mse, instance_seed)?;
        let ls_floor = landscape::least_squares_floor(&inst);
        let runs: Vec<Result<optimizer::RunResult>> =
            tcfg.seeds.par_iter().map(|&s| optimizer::train(&inst, &tcfg, LossKind::Mse, s)).collect();
        let floor = runs
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .filter(|r| r.converged)
            .map(|r| r.loss.data_loss)
            .fold(f64::INFINITY, f64::min);
        let records = runs
            .into_par_iter()
            .zip(tcfg.seeds.par_iter())
            .map(|(run, &seed)| {
                let Ok(run) = run else {
                    return failed_record(kn, m, cfg.rank, seed, instance_seed, hash);
                };
                let Ok(analysis) = landscape::analyze_point(&inst, &run.point, LossKind::Mse, &cfg.tolerances) else {
                    return failed_record(kn, m, cfg.rank, seed, instance_seed, hash);
                };
                let report = landscape::classify(analysis, run.converged, floor, &cfg.tolerances);
                let a = &report.analysis;
                let nan = f64::NAN;
                let b = a.blocks.as_ref();
                RunRecord {
                    kn,
                    m,
                    n: m,
                    rho: theory::dim_fraction(m, m, cfg.rank, kn),
                    seed,
                    instance_seed,
                    classification: report.classification,
                    data_loss: a.loss.data_loss,
                    total_loss: a.loss.total,
                    grad_norm: a.grad_norm,
                    min_eig: a.min_hessian_eig,
                    balance: a.balance_residual,
                    gram_norm: (run.point.u.transpose() * &run.point.u).norm(),
                    effective_rank: a.effective_rank,
                    r11_deviation: b.map_or(nan, |b| b.r11_deviation),
                    r12_norm: b.map_or(nan, |b| b.r12_norm),
                    r21_norm: b.map_or(nan, |b| b.r21_norm),
                    sigma1_r22: b.map_or(nan, |b| b.sigma1_r22),
                    residual_norm: b.map_or(nan, |b| b.residual_norm),
                    lambda: run.point.lambda,
                    iterations: run.iterations,
                    converged: run.converged,
                    global_floor: floor,
                    ls_floor,
                    config_hash: hash.to_string(),
                    generator: GENERATOR_ID.to_string(),
                }
            })
            .collect();
        Ok(records)
    };
    attempt().unwrap_or_else(|_| {
        tcfg.seeds
            .iter()
            .map(|&s| failed_record(kn, m, cfg.rank, s, instance_seed, hash))
            .collect()
    })
}

fn record_path(out: &Path, kn: usize, m: usize) -> PathBuf {
    out.join("records").join(format!("kn{kn:05}_m{m:05}.rec"))
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Previously persisted cell, if complete and produced under the same config.
fn load_cell(path: &Path, hash: &str, expected: usize) -> Option<Vec<RunRecord>> {
    let text = fs::read_to_string(path).ok()?;
    let records: Vec<RunRecord> = text.lines().filter(|l| !l.trim().is_empty()).map(RunRecord::from_line).collect::<Result<_>>().ok()?;
    (records.len() == expected && records.iter().all(|r| r.config_hash == hash)).then_some(records)
}

/// Spearman rank correlation (average ranks for ties); `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Cell layout of the sweep: for each KN, the distinct `m` values and the grid points mapping to each.
pub fn sweep_cells(cfg: &SweepConfig) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut cells = Vec::new();
    for &kn in &cfg.kn_grid {
        let mut by_m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &rho in &cfg.rho_grid {
            by_m.entry(cfg.dims_rule.realize(rho, cfg.rank, kn)?).or_default().push(rho);
        }
        cells.extend(by_m.into_iter().map(|(m, g)| (kn, m, g)));
    }
    Ok(cells)
}

/// Runs (or resumes) the boundary sweep, persisting into `out` when given.
pub fn boundary_sweep(cfg: &SweepConfig, out: Option<&Path>) -> Result<SweepResult> {
    cfg.validate()?;
    let hash = cfg.hash();
    if let Some(dir) = out {
        let rec = dir.join("records");
        fs::create_dir_all(&rec).map_err(|e| Error::io(&rec, e))?;
    }
    let layout = sweep_cells(cfg)?;
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for (kn, m, grid) in &layout {
        let existing = out.and_then(|d| load_cell(&record_path(d, *kn, *m), &hash, cfg.seeds_per_cell));
        let cell = match existing {
            Some(c) => c,
            None => {
                let c = run_cell(cfg, *kn, *m, &hash);
                if let Some(dir) = out {
                    let text: String = c.iter().map(|r| r.to_line() + "\n").collect();
                    write_atomic(&record_path(dir, *kn, *m), &text)?;
                }
                c
            }
        };
        let count = |class: Classification| cell.iter().filter(|r| r.classification == class).count();
        let spurious = count(Classification::SpuriousSosp);
        cells.push(CellSummary {
            kn: *kn,
            m: *m,
            n: *m,
            grid_rho: grid.clone(),
            rho: theory::dim_fraction(*m, *m, cfg.rank, *kn),
            spurious,
            saddles: count(Classification::StrictSaddle),
            not_converged: count(Classification::NotConverged),
            runs: cell.len(),
            spurious_fraction: spurious as f64 / cell.len() as f64,
        });
        records.extend(cell);
    }
    let result = summarize(cfg, hash, records, cells)?;
    if let Some(dir) = out {
        write_atomic(&dir.join("summary.tsv"), &result.summary_tsv())?;
        write_atomic(&dir.join("fits.txt"), &result.fits_text())?;
    }
    Ok(result)
}

fn summarize(cfg: &SweepConfig, hash: String, records: Vec<RunRecord>, cells: Vec<CellSummary>) -> Result<SweepResult> {
    let mut boundaries = Vec::new();
    let mut spearman_per_kn = Vec::new();
    for &kn in &cfg.kn_grid {
        let mine: Vec<&CellSummary> = cells.iter().filter(|c| c.kn == kn).collect();
        let boundary = mine.iter().find(|c| c.spurious_fraction < cfg.spurious_threshold).map(|c| Boundary {
            kn,
            cstar: c.rho,
            grid_rho: c.grid_rho[0],
            m: c.m,
            c_emp: theory::c_from_cstar(c.rho.max(1.0)).expect("rho >= 1"),
        });
        boundaries.push((kn, boundary));
        let (xs, ys): (Vec<f64>, Vec<f64>) = mine.iter().map(|c| (c.rho, c.spurious_fraction)).unzip();
        spearman_per_kn.push((kn, spearman(&xs, &ys)));
    }
    let large: Vec<f64> = boundaries.iter().filter(|(kn, _)| *kn >= 32).filter_map(|(_, b)| b.as_ref().map(|b| b.c_emp)).collect();
    let c_bar = (!large.is_empty()).then(|| large.iter().sum::<f64>() / large.len() as f64);
    let cstar_theory = c_bar.and_then(|c| theory::cstar_from_c(c).ok());
    let points: Vec<(f64, f64)> = boundaries.iter().filter_map(|(kn, b)| b.as_ref().map(|b| (*kn as f64, b.cstar))).collect();
    let fit = theory::tracy_widom_fit(&points).ok();
    Ok(SweepResult {
        config_hash: hash,
        records,
        cells,
        boundaries,
        c_bar,
        cstar_theory,
        fit,
        spearman: spearman_per_kn,
    })
}

impl SweepResult {
    pub fn boundary(&self, kn: usize) -> Option<&Boundary> {
        self.boundaries.iter().find(|(k, _)| *k == kn).and_then(|(_, b)| b.as_ref())
    }

    /// Columns `KN, Cstar, c_emp` followed by the boundary cell's grid point and dims.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("KN\tCstar\tc_emp\tgrid_rho\tm\tn\n");
        for (kn, b) in &self.boundaries {
            match b {
                Some(b) => out += &format!("{kn}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\n", b.cstar, b.c_emp, b.grid_rho, b.m, b.m),
                None => out += &format!("{kn}\tnone\tnone\tnone\t-\t-\n"),
            }
        }
        out
    }

    pub fn fits_text(&self) -> String {
        let mut out = format!("config_hash {}\ngenerator {GENERATOR_ID}\n", self.config_hash);
        match self.c_bar {
            Some(c) => out += &format!("c_bar (KN >= 32) {c:.6}\n"),
            None => out += "c_bar (KN >= 32) undefined\n",
        }
        if let Some(c) = self.cstar_theory {
            out += &format!("Cstar from c_bar {c:.6}\n");
        }
        match &self.fit {
            Some(f) => {
                out += &format!(
                    "finite-size fit Cstar(KN) = {:.6} + ({:.6}) KN^(-2/3), residual {:.3e}, {} points\n",
                    f.cstar_inf, f.b, f.residual, f.points
                )
            }
            None => out += "finite-size fit undefined (fewer than 3 boundaries)\n",
        }
        for (kn, s) in &self.spearman {
            match s {
                Some(s) => out += &format!("spearman(rho, spurious fraction) KN={kn} {s:.4}\n"),
                None => out += &format!("spearman(rho, spurious fraction) KN={kn} undefined\n"),
            }
        }
        out += "cells (KN, m, rho, spurious/runs, saddles, not converged)\n";
        for c in &self.cells {
            out += &format!(
                "{}\t{}\t{:.4}\t{}/{}\t{}\t{}\n",
                c.kn, c.m, c.rho, c.spurious, c.runs, c.saddles, c.not_converged
            );
        }
        out
    }
}

/// The default instance keeps `r(m + n) − r² ≥ KN` at every rank from 1 up,
/// the capacity hypothesis under which PL is expected for cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeSweepConfig {
    pub m: usize,
    pub n: usize,
    pub outputs: usize,
    pub samples: usize,
    pub target_rank: usize,
    pub ranks: Vec<usize>,
    pub seeds: usize,
    pub instance_seed: u64,
    pub train: TrainConfig,
    pub tolerances: Tolerances,
}

impl Default for CeSweepConfig {
    fn default() -> Self {
        Self {
            m: 64,
            n: 64,
            outputs: 2,
            samples: 32,
            target_rank: 1,
            ranks: (1..=7).collect(),
            seeds: 5,
            instance_seed: 0,
            train: TrainConfig { record_every: 1, ..TrainConfig::default() },
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeRun {
    pub rank: usize,
    pub seed: u64,
    pub classification: Classification,
    pub data_loss: f64,
    pub total_loss: f64,
    pub min_eig: f64,
    /// `None` when the estimate is undefined.
    pub mu_hat: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeSweepSummary {
    pub runs: Vec<CeRun>,
    pub spurious: usize,
    pub all_mu_positive: bool,
}

/// Cross-entropy runs over ranks × seeds on one binary instance.
///
/// The floor for classification and the `L*` for the PL estimate are the
/// best values among the seeds at the same rank; the PL ratio uses the
/// final-stage trajectory, where the loss function is fixed.
pub fn ce_consistency_sweep(cfg: &CeSweepConfig) -> Result<CeSweepSummary> {
    let op = gen_operator(cfg.m, cfg.n, cfg.outputs, cfg.samples, cfg.instance_seed)?;
    let inst = gen_instance(op, cfg.target_rank, 0.0, LossKind::Ce, cfg.instance_seed)?;
    let mut out = Vec::new();
    for &rank in &cfg.ranks {
        let tcfg = TrainConfig { rank, seeds: (0..cfg.seeds as u64).collect(), ..cfg.train.clone() };
        let runs = optimizer::multi_seed(&inst, &tcfg, LossKind::Ce)?;
        let floor = optimizer::best_data_loss(&runs).unwrap_or(f64::NAN);
        let last_stage = tcfg.stages().len() - 1;
        let l_star = runs.iter().map(|r| r.loss.total).fold(f64::INFINITY, f64::min);
        for run in runs {
            let analysis = landscape::analyze_point(&inst, &run.point, LossKind::Ce, &cfg.tolerances)?;
            let report = landscape::classify(analysis, run.converged, floor, &cfg.tolerances);
            let traj: Vec<(f64, f64)> = run.trace.iter().filter(|t| t.stage == last_stage).map(|t| (t.loss, t.grad_norm)).collect();
            let mu_hat = theory::pl_estimate(&traj, l_star).ok().map(|p| p.mu_hat);
            out.push(CeRun {
                rank,
                seed: run.seed,
                classification: report.classification,
                data_loss: report.analysis.loss.data_loss,
                total_loss: report.analysis.loss.total,
                min_eig: report.analysis.min_hessian_eig,
                mu_hat,
                converged: run.converged,
            });
        }
    }
    let spurious = out.iter().filter(|r| r.classification == Classification::SpuriousSosp).count();
    let all_mu_positive = out.iter().all(|r| r.mu_hat.is_some_and(|m| m > 0.0));
    Ok(CeSweepSummary { runs: out, spurious, all_mu_positive })
}

/// With Gaussian features, an instance where rank one out-counts the
/// targets leaves every rank near chance, so the defaults keep N above
/// the rank-one capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankSelectionConfig {
    pub m: usize,
    pub n: usize,
    pub outputs: usize,
    pub planted_rank: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub ranks: Vec<usize>,
    pub seeds: usize,
    pub instance_seed: u64,
    pub train: TrainConfig,
}

impl Default for RankSelectionConfig {
    fn default() -> Self {
        Self {
            m: 16,
            n: 16,
            outputs: 2,
            planted_rank: 1,
            n_train: 64,
            n_test: 3200,
            ranks: vec![1, 2, 4, 8],
            seeds: 5,
            instance_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRun {
    pub rank: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelectionResult {
    pub outputs: usize,
    pub planted_rank: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub runs: Vec<RankRun>,
}

impl RankSelectionResult {
    /// Mean test accuracy per rank, in the order the ranks were run.
    pub fn mean_test_accuracy(&self) -> Vec<(usize, f64)> {
        let mut ranks: Vec<usize> = self.runs.iter().map(|r| r.rank).collect();
        ranks.dedup();
        ranks
            .into_iter()
            .map(|rank| {
                let accs: Vec<f64> = self.runs.iter().filter(|r| r.rank == rank).map(|r| r.test_accuracy).collect();
                (rank, accs.iter().sum::<f64>() / accs.len() as f64)
            })
            .collect()
    }
}

fn accuracy(inst: &crate::ProblemInstance, p: &model::LoraPoint) -> Result<f64> {
    let preds = model::predict(inst, p)?;
    let k = inst.outputs();
    let hits = preds
        .as_slice()
        .chunks(k)
        .zip(inst.labels.as_slice().chunks(k))
        .filter(|(z, y)| y[crate::synthetic::argmax_low(z)] == 1.0)
        .count();
    Ok(hits as f64 / inst.samples() as f64)
}

/// Trains on the first `n_train` samples and scores the held-out remainder.
pub fn rank_selection_experiment(cfg: &RankSelectionConfig) -> Result<RankSelectionResult> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::InvalidArgument("train and test splits must be nonempty".into()));
    }
    let op = gen_operator(cfg.m, cfg.n, cfg.outputs, cfg.n_train + cfg.n_test, cfg.instance_seed)?;
    let full = gen_instance(op, cfg.planted_rank, 0.0, LossKind::Ce, cfg.instance_seed)?;
    let train = full.select_samples(0..cfg.n_train)?;
    let test = full.select_samples(cfg.n_train..cfg.n_train + cfg.n_test)?;
    let mut runs = Vec::new();
    for &rank in &cfg.ranks {
        let tcfg = TrainConfig { rank, seeds: (0..cfg.seeds as u64).collect(), ..cfg.train.clone() };
        for run in optimizer::multi_seed(&train, &tcfg, LossKind::Ce)? {
            runs.push(RankRun {
                rank,
                seed: run.seed,
                train_loss: run.loss.data_loss,
                test_loss: model::loss(&test, &run.point, LossKind::Ce)?.data_loss,
                train_accuracy: accuracy(&train, &run.point)?,
                test_accuracy: accuracy(&test, &run.point)?,
            });
        }
    }
    Ok(RankSelectionResult {
        outputs: cfg.outputs,
        planted_rank: cfg.planted_rank,
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        runs,
    })
}
