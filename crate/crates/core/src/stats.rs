//! Entry-wise and spectral diagnostics of a feature operator.
//!
//! Marginals are compared against the moment-fitted normal, not `N(0, 1)`.

use nalgebra::SymmetricEigen;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::synthetic::FeatureOperator;

/// Moments and KS use at most this many entries per block.
pub const SUBSAMPLE_LIMIT: usize = 10_000_000;
/// Gram spectra are skipped above this many targets.
pub const GRAM_CAP: usize = 4096;
/// Entry pairs sampled per pair of blocks for the correlation statistics.
pub const CORRELATION_PAIRS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsOptions {
    /// Eigenvalues above `effective_rank_fraction · λ_max` count toward the effective rank.
    pub effective_rank_fraction: f64,
    /// Row-major entry indices `a·n + b`; must partition `0..mn`. `None` means one block.
    pub blocks: Option<Vec<Vec<usize>>>,
    pub seed: u64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self { effective_rank_fraction: 0.01, blocks: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub entries: usize,
    /// Entries actually used (equals `entries` unless subsampled).
    pub used: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSpectrum {
    pub top: f64,
    pub smallest_nonzero: f64,
    pub condition_number: f64,
    pub effective_rank: usize,
    pub numerical_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossBlockStats {
    pub pairs: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rows: usize,
    pub cols: usize,
    pub targets: usize,
    pub blocks: Vec<BlockStats>,
    /// `None` when `KN` exceeds the dense cap.
    pub gram: Option<GramSpectrum>,
    pub cross_block: Option<CrossBlockStats>,
    pub effective_rank_fraction: f64,
}

fn check_blocks(blocks: &[Vec<usize>], slice_len: usize) -> Result<()> {
    let mut seen = vec![false; slice_len];
    for block in blocks {
        if block.is_empty() {
            return Err(Error::InvalidArgument("empty parameter block".into()));
        }
        for &i in block {
            if i >= slice_len || seen[i] {
                return Err(Error::InvalidArgument(format!("blocks must partition 0..{slice_len}; bad index {i}")));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidArgument(format!("blocks do not cover 0..{slice_len}")));
    }
    Ok(())
}

/// Sample moments (two passes) and KS distance against `N(mean, std²)`.
pub fn sample_stats(values: &mut [f64]) -> Result<BlockStats> {
    let len = values.len();
    if len < 2 {
        return Err(Error::InvalidArgument("need at least two values".into()));
    }
    let nf = len as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in values.iter() {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if !(m2 > 0.0) {
        return Err(Error::Undefined("zero variance".into()));
    }
    let std = m2.sqrt();
    let normal = Normal::new(mean, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    values.sort_unstable_by(f64::total_cmp);
    let mut ks = 0.0f64;
    for (i, &x) in values.iter().enumerate() {
        let f = normal.cdf(x);
        ks = ks.max((f - i as f64 / nf).abs()).max(((i + 1) as f64 / nf - f).abs());
    }
    Ok(BlockStats {
        entries: len,
        used: len,
        mean,
        std,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        ks_distance: ks,
    })
}

fn block_values(op: &FeatureOperator, block: &[usize], seed: u64, block_idx: usize, limit: usize) -> (usize, Vec<f64>) {
    let slice_len = op.rows() * op.cols();
    let total = block.len() * op.len_targets();
    let data = op.data();
    let at = |k: usize| data[(k / block.len()) * slice_len + block[k % block.len()]];
    if total <= limit {
        return (total, (0..total).map(at).collect());
    }
    let mut rng = rng::stream(rng::derive_seed(seed, block_idx as u64), streams::SUBSAMPLE);
    let picks = index::sample(&mut rng, total, limit);
    (total, picks.into_iter().map(at).collect())
}

pub fn gram_spectrum(op: &FeatureOperator, fraction: f64) -> Option<GramSpectrum> {
    if op.len_targets() > GRAM_CAP {
        return None;
    }
    let eig = SymmetricEigen::new(op.gram()).eigenvalues;
    let top = eig.iter().copied().fold(0.0, f64::max);
    let zero = top * 1e-12 * eig.len() as f64;
    let nonzero: Vec<f64> = eig.iter().copied().filter(|&x| x > zero).collect();
    let smallest = nonzero.iter().copied().fold(f64::INFINITY, f64::min);
    let effective = eig.iter().filter(|&&x| x > fraction * top).count();
    Some(GramSpectrum {
        top,
        smallest_nonzero: if nonzero.is_empty() { 0.0 } else { smallest },
        condition_number: if nonzero.is_empty() { f64::INFINITY } else { top / smallest },
        effective_rank: effective,
        numerical_rank: nonzero.len(),
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Correlation across the `KN` targets between entries drawn from different blocks.
fn cross_block(op: &FeatureOperator, blocks: &[Vec<usize>], seed: u64) -> Option<CrossBlockStats> {
    if blocks.len() < 2 || op.len_targets() < 3 {
        return None;
    }
    let slice_len = op.rows() * op.cols();
    let kn = op.len_targets();
    let column = |i: usize| -> Vec<f64> { (0..kn).map(|t| op.data()[t * slice_len + i]).collect() };
    let mut rng = rng::stream(seed, streams::SUBSAMPLE);
    let (mut sum, mut max, mut count) = (0.0, 0.0f64, 0usize);
    for p in 0..blocks.len() {
        for q in p + 1..blocks.len() {
            for _ in 0..CORRELATION_PAIRS {
                let i = blocks[p][rng.random_range(0..blocks[p].len())];
                let j = blocks[q][rng.random_range(0..blocks[q].len())];
                if let Some(rho) = pearson(&column(i), &column(j)) {
                    sum += rho.abs();
                    max = max.max(rho.abs());
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| CrossBlockStats { pairs: count, mean_abs: sum / count as f64, max_abs: max })
}

pub fn jacobian_stats(op: &FeatureOperator, opts: &StatsOptions) -> Result<StatsReport> {
    let slice_len = op.rows() * op.cols();
    if !(opts.effective_rank_fraction > 0.0 && opts.effective_rank_fraction < 1.0) {
        return Err(Error::InvalidArgument("effective rank fraction must lie in (0, 1)".into()));
    }
    let blocks = match &opts.blocks {
        Some(b) => {
            check_blocks(b, slice_len)?;
            b.clone()
        }
        None => vec![(0..slice_len).collect()],
    };
    let block_stats = blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let (total, mut values) = block_values(op, b, opts.seed, i, SUBSAMPLE_LIMIT);
            let mut s = sample_stats(&mut values)?;
            s.entries = total;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StatsReport {
        rows: op.rows(),
        cols: op.cols(),
        targets: op.len_targets(),
        blocks: block_stats,
        gram: gram_spectrum(op, opts.effective_rank_fraction),
        cross_block: cross_block(op, &blocks, opts.seed),
        effective_rank_fraction: opts.effective_rank_fraction,
    })
}

impl StatsReport {
    /// Plain-text table, one statistic per row and one block per column.
    pub fn render(&self) -> String {
        let mut out = format!("operator {}x{}, KN = {}\n", self.rows, self.cols, self.targets);
        let row = |name: &str, f: &dyn Fn(&BlockStats) -> String| {
            let cells: Vec<String> = self.blocks.iter().map(f).collect();
            format!("{name:<20}{}\n", cells.join("\t"))
        };
        out += &row("entries", &|b| format!("{} ({} used)", b.entries, b.used));
        out += &row("mean", &|b| format!("{:.4e}", b.mean));
        out += &row("std", &|b| format!("{:.4e}", b.std));
        out += &row("skewness", &|b| format!("{:.4}", b.skewness));
        out += &row("excess kurtosis", &|b| format!("{:.4}", b.excess_kurtosis));
        out += &row("KS vs fitted normal", &|b| format!("{:.4}", b.ks_distance));
        match &self.gram {
            Some(g) => {
                out += &format!("gram top eigenvalue  {:.4e}\n", g.top);
                out += &format!("smallest nonzero     {:.4e}\n", g.smallest_nonzero);
                out += &format!("condition number     {:.4e}\n", g.condition_number);
                out += &format!(
                    "effective rank       {} (> {}% of max)\n",
                    g.effective_rank,
                    self.effective_rank_fraction * 100.0
                );
            }
            None => out += &format!("gram spectrum        skipped (KN > {GRAM_CAP})\n"),
        }
        if let Some(c) = &self.cross_block {
            out += &format!("cross-block |rho|    mean {:.4}, max {:.4} over {} pairs\n", c.mean_abs, c.max_abs, c.pairs);
        }
        out
    }
}
