//! Feature operators, planted problem instances and their on-disk format.
//!
//! A [`FeatureOperator`] stores `N·K` Jacobian slices `G⁽ʲ⁾(Xᵢ) ∈ ℝ^{m×n}` in one
//! flat buffer laid out as `[sample][output][row][col]`. Output coordinate
//! `(i, j)` lives at flat index `i·K + j`, and every KN-vector in the crate
//! (predictions, labels, residuals) uses the same ordering.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Default cap on `m·n·K·N` (1 GiB of f64).
pub const DEFAULT_MAX_OPERATOR_ENTRIES: usize = 1 << 27;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const JACOBIANS: &str = "jacobians.f64";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Ce,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Ce => "ce",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "ce" => Ok(LossKind::Ce),
            other => Err(Error::InvalidArgument(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// The linear map `𝒜: ℝ^{m×n} → ℝ^{KN}` given by per-sample, per-output Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOperator {
    rows: usize,
    cols: usize,
    outputs: usize,
    samples: usize,
    entry_scale: f64,
    data: Vec<f64>,
}

impl FeatureOperator {
    /// Builds an operator from a flat `[sample][output][row][col]` buffer.
    pub fn from_raw(
        rows: usize,
        cols: usize,
        outputs: usize,
        samples: usize,
        entry_scale: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || outputs == 0 || samples == 0 {
            return Err(Error::InvalidArgument("operator dimensions must be >= 1".into()));
        }
        let expected = checked_len(rows, cols, outputs, samples)?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "buffer holds {} entries, expected m·n·K·N = {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("operator entry {pos}")));
        }
        Ok(Self {
            rows,
            cols,
            outputs,
            samples,
            entry_scale,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    /// Output dimension `K`.
    pub fn outputs(&self) -> usize {
        self.outputs
    }
    /// Sample count `N`.
    pub fn samples(&self) -> usize {
        self.samples
    }
    /// Number of scalar targets `K·N`.
    pub fn len_targets(&self) -> usize {
        self.outputs * self.samples
    }
    pub fn entry_scale(&self) -> f64 {
        self.entry_scale
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn slice_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major `m×n` slice for output coordinate `t = i·K + j`.
    pub fn slice(&self, t: usize) -> &[f64] {
        let len = self.slice_len();
        &self.data[t * len..(t + 1) * len]
    }

    pub fn slice_matrix(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, self.slice(t))
    }

    fn check_update(&self, delta: &DMatrix<f64>) -> Result<()> {
        if delta.nrows() != self.rows || delta.ncols() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "update is {}x{}, operator expects {}x{}",
                delta.nrows(),
                delta.ncols(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    /// `𝒜(Δ)`: the KN-vector of inner products `⟨G_t, Δ⟩`.
    pub fn apply(&self, delta: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_update(delta)?;
        let row_major = delta.transpose();
        let flat = row_major.as_slice();
        Ok(DVector::from_iterator(
            self.len_targets(),
            self.data.chunks_exact(self.slice_len()).map(|g| dot(g, flat)),
        ))
    }

    /// `𝒜*(w) = Σ_t w_t G_t`.
    pub fn adjoint(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        if w.len() != self.len_targets() {
            return Err(Error::DimensionMismatch(format!(
                "adjoint input has length {}, expected KN = {}",
                w.len(),
                self.len_targets()
            )));
        }
        let mut acc = vec![0.0; self.slice_len()];
        for (g, &wt) in self.data.chunks_exact(self.slice_len()).zip(w.iter()) {
            if wt != 0.0 {
                axpy(wt, g, &mut acc);
            }
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &acc))
    }

    /// Dense `KN × mn` matrix whose rows are the flattened (row-major) slices.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len_targets(), self.slice_len(), &self.data)
    }

    /// `KN × KN` Gram matrix of flattened slices.
    pub fn gram(&self) -> DMatrix<f64> {
        let t = self.len_targets();
        let len = self.slice_len();
        let mut g = DMatrix::zeros(t, t);
        for a in 0..t {
            let ga = &self.data[a * len..(a + 1) * len];
            for b in 0..=a {
                let v = dot(ga, &self.data[b * len..(b + 1) * len]);
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        g
    }

    /// Largest spectral norm over slices, `max_t ‖G_t‖_op`.
    pub fn max_slice_op_norm(&self) -> f64 {
        (0..self.len_targets())
            .map(|t| {
                let s = self.slice_matrix(t);
                s.singular_values().max()
            })
            .fold(0.0, f64::max)
    }

    /// Operator restricted to a contiguous range of samples.
    pub fn select_samples(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.samples {
            return Err(Error::InvalidArgument(format!(
                "sample range {range:?} outside 0..{}",
                self.samples
            )));
        }
        let per_sample = self.outputs * self.slice_len();
        let data = self.data[range.start * per_sample..range.end * per_sample].to_vec();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            outputs: self.outputs,
            samples: range.end - range.start,
            entry_scale: self.entry_scale,
            data,
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators keep the loop vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn checked_len(m: usize, n: usize, k: usize, samples: usize) -> Result<usize> {
    m.checked_mul(n)
        .and_then(|x| x.checked_mul(k))
        .and_then(|x| x.checked_mul(samples))
        .ok_or_else(|| Error::CapExceeded("m·n·K·N overflows usize".into()))
}

/// Gaussian-iid operator with unit entry variance, so `Var⟨G, Δ⟩ = 1` for unit-Frobenius `Δ`.
pub fn gen_operator(m: usize, n: usize, k: usize, samples: usize, seed: u64) -> Result<FeatureOperator> {
    gen_operator_capped(m, n, k, samples, seed, DEFAULT_MAX_OPERATOR_ENTRIES)
}

pub fn gen_operator_capped(
    m: usize,
    n: usize,
    k: usize,
    samples: usize,
    seed: u64,
    max_entries: usize,
) -> Result<FeatureOperator> {
    if m == 0 || n == 0 || k == 0 || samples == 0 {
        return Err(Error::InvalidArgument("m, n, K, N must all be >= 1".into()));
    }
    let len = checked_len(m, n, k, samples)?;
    if len > max_entries {
        return Err(Error::CapExceeded(format!(
            "operator needs {len} entries ({:.1} MiB), cap is {max_entries} entries; reduce m, n, K or N",
            len as f64 * 8.0 / (1024.0 * 1024.0)
        )));
    }
    let entry_scale = 1.0;
    let mut data = vec![0.0; len];
    let mut rng = rng::stream(seed, streams::OPERATOR);
    rng::fill_normal(&mut rng, &mut data, entry_scale);
    FeatureOperator::from_raw(m, n, k, samples, entry_scale, data)
}

/// Operator plus labels, planted target and the noise realization behind the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub operator: FeatureOperator,
    /// `f₀(Xᵢ)` stacked as a KN-vector; zero for synthetic instances.
    pub baseline: DVector<f64>,
    pub labels: DVector<f64>,
    pub planted_target: DMatrix<f64>,
    pub target_rank: usize,
    /// Recorded `ξ` (zero for CE instances).
    pub noise: DVector<f64>,
    pub noise_std: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl ProblemInstance {
    pub fn rows(&self) -> usize {
        self.operator.rows()
    }
    pub fn cols(&self) -> usize {
        self.operator.cols()
    }
    pub fn samples(&self) -> usize {
        self.operator.samples()
    }
    pub fn outputs(&self) -> usize {
        self.operator.outputs()
    }

    /// Checks that every sample's label block is a one-hot vector.
    pub fn labels_are_one_hot(&self) -> bool {
        self.labels.as_slice().chunks(self.outputs()).all(|block| {
            let ones = block.iter().filter(|&&x| x == 1.0).count();
            let zeros = block.iter().filter(|&&x| x == 0.0).count();
            ones == 1 && zeros + 1 == block.len()
        })
    }

    /// Restricts the instance to a contiguous sample range (train/test splits).
    pub fn select_samples(&self, range: Range<usize>) -> Result<Self> {
        let k = self.outputs();
        let coords = range.start * k..range.end * k;
        let operator = self.operator.select_samples(range)?;
        Ok(Self {
            operator,
            baseline: self.baseline.rows(coords.start, coords.len()).into_owned(),
            labels: self.labels.rows(coords.start, coords.len()).into_owned(),
            planted_target: self.planted_target.clone(),
            target_rank: self.target_rank,
            noise: self.noise.rows(coords.start, coords.len()).into_owned(),
            noise_std: self.noise_std,
            loss_kind: self.loss_kind,
            seed: self.seed,
        })
    }
}

/// Rank-`target_rank` planted target with orthonormal factors and unit Frobenius norm.
pub fn planted_target(m: usize, n: usize, target_rank: usize, seed: u64) -> Result<DMatrix<f64>> {
    if target_rank == 0 || target_rank > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "target rank {target_rank} outside 1..={}",
            m.min(n)
        )));
    }
    let mut rng = rng::stream(seed, streams::TARGET);
    let left = rng::haar_orthonormal(&mut rng, m, target_rank);
    let right = rng::haar_orthonormal(&mut rng, n, target_rank);
    let delta = &left * right.transpose();
    let norm = delta.norm();
    Ok(delta / norm)
}

pub fn gen_instance(
    op: FeatureOperator,
    target_rank: usize,
    noise_std: f64,
    loss_kind: LossKind,
    seed: u64,
) -> Result<ProblemInstance> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    let target = planted_target(op.rows(), op.cols(), target_rank, seed)?;
    let clean = op.apply(&target)?;
    let kn = op.len_targets();
    let k = op.outputs();
    let (labels, noise) = match loss_kind {
        LossKind::Mse => {
            let mut xi = vec![0.0; kn];
            if noise_std > 0.0 {
                let mut rng = rng::stream(seed, streams::NOISE);
                rng::fill_normal(&mut rng, &mut xi, noise_std);
            }
            let xi = DVector::from_vec(xi);
            (&clean + &xi, xi)
        }
        LossKind::Ce => {
            let mut y = DVector::zeros(kn);
            for (i, block) in clean.as_slice().chunks(k).enumerate() {
                y[i * k + argmax_low(block)] = 1.0;
            }
            (y, DVector::zeros(kn))
        }
    };
    Ok(ProblemInstance {
        baseline: DVector::zeros(kn),
        labels,
        planted_target: target,
        target_rank,
        noise,
        noise_std,
        loss_kind,
        seed,
        operator: op,
    })
}

/// Index of the maximum, ties broken toward the lower index.
pub fn argmax_low(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

/// Orthogonal projections `P_L ∈ ℝ^{D×m}`, `P_R ∈ ℝ^{D×n}` with orthonormal rows.
pub fn projection_pair(m: usize, n: usize, dim: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if dim == 0 || dim > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "projection dimension {dim} outside 1..={}",
            m.min(n)
        )));
    }
    let mut rng = rng::stream(seed, streams::PROJECTION);
    let left = rng::haar_orthonormal(&mut rng, m, dim).transpose();
    let right = rng::haar_orthonormal(&mut rng, n, dim).transpose();
    Ok((left, right))
}

/// Slices `G′ = P_L G P_Rᵀ` of size `D×D`.
pub fn project_operator(op: &FeatureOperator, dim: usize, seed: u64) -> Result<FeatureOperator> {
    let (pl, pr) = projection_pair(op.rows(), op.cols(), dim, seed)?;
    let prt = pr.transpose();
    let mut data = Vec::with_capacity(op.len_targets() * dim * dim);
    for t in 0..op.len_targets() {
        let projected = &pl * op.slice_matrix(t) * &prt;
        data.extend_from_slice(projected.transpose().as_slice());
    }
    FeatureOperator::from_raw(dim, dim, op.outputs(), op.samples(), op.entry_scale(), data)
}

// ---------------------------------------------------------------------------
// persistence

/// Plain `key = value` manifest, one pair per line, `#` comments allowed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", lineno + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn require<T: FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::format(path, format!("missing manifest key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("cannot parse `{key} = {raw}`")))
    }
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let want = expected * 8;
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!("tensor holds {} bytes, manifest implies {want} bytes ({expected} f64 values)", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn operator_manifest(op: &FeatureOperator, kind: &str) -> Manifest {
    let mut m = Manifest::default();
    m.set("format", kind);
    m.set("version", FORMAT_VERSION);
    m.set("m", op.rows());
    m.set("n", op.cols());
    m.set("K", op.outputs());
    m.set("N", op.samples());
    m.set("entry_scale", op.entry_scale());
    m.set("endianness", "little");
    m.set("dtype", "f64");
    m.set("layout", "sample,output,row,col");
    m
}

fn read_operator_dir(dir: &Path) -> Result<(Manifest, FeatureOperator)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::parse(&text, &mpath)?;
    let version: u32 = manifest.require("version", &mpath)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unknown version {version}, this build reads {FORMAT_VERSION}")));
    }
    if let Some(e) = manifest.get("endianness") {
        if e != "little" {
            return Err(Error::format(&mpath, format!("unsupported endianness `{e}`")));
        }
    }
    let m: usize = manifest.require("m", &mpath)?;
    let n: usize = manifest.require("n", &mpath)?;
    let k: usize = manifest.require("K", &mpath)?;
    let samples: usize = manifest.require("N", &mpath)?;
    let entry_scale: f64 = manifest.require("entry_scale", &mpath)?;
    let len = checked_len(m, n, k, samples)?;
    let data = read_f64s(&dir.join(JACOBIANS), len)?;
    let op = FeatureOperator::from_raw(m, n, k, samples, entry_scale, data)?;
    Ok((manifest, op))
}

pub fn save_operator(op: &FeatureOperator, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_f64s(&dir.join(JACOBIANS), op.data())?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, operator_manifest(op, "operator").render()).map_err(|e| Error::io(&mpath, e))
}

pub fn load_operator(dir: impl AsRef<Path>) -> Result<FeatureOperator> {
    read_operator_dir(dir.as_ref()).map(|(_, op)| op)
}

pub fn save_instance(inst: &ProblemInstance, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let op = &inst.operator;
    write_f64s(&dir.join(JACOBIANS), op.data())?;
    write_f64s(&dir.join("labels.f64"), inst.labels.as_slice())?;
    write_f64s(&dir.join("baseline.f64"), inst.baseline.as_slice())?;
    write_f64s(&dir.join("noise.f64"), inst.noise.as_slice())?;
    write_f64s(&dir.join("target.f64"), inst.planted_target.transpose().as_slice())?;
    let mut manifest = operator_manifest(op, "instance");
    manifest.set("loss_kind", inst.loss_kind);
    manifest.set("noise_std", inst.noise_std);
    manifest.set("seed", inst.seed);
    manifest.set("target_rank", inst.target_rank);
    manifest.set("generator", rng::GENERATOR_ID);
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest.render()).map_err(|e| Error::io(&mpath, e))
}

pub fn load_instance(dir: impl AsRef<Path>) -> Result<ProblemInstance> {
    let dir = dir.as_ref();
    let (manifest, op) = read_operator_dir(dir)?;
    let mpath = dir.join(MANIFEST);
    let loss_kind: LossKind = manifest.require("loss_kind", &mpath)?;
    let noise_std: f64 = manifest.require("noise_std", &mpath)?;
    let seed: u64 = manifest.require("seed", &mpath)?;
    let target_rank: usize = manifest.require("target_rank", &mpath)?;
    let kn = op.len_targets();
    let labels = DVector::from_vec(read_f64s(&dir.join("labels.f64"), kn)?);
    let baseline = DVector::from_vec(read_f64s(&dir.join("baseline.f64"), kn)?);
    let noise = DVector::from_vec(read_f64s(&dir.join("noise.f64"), kn)?);
    let target = read_f64s(&dir.join("target.f64"), op.rows() * op.cols())?;
    let planted_target = DMatrix::from_row_slice(op.rows(), op.cols(), &target);
    Ok(ProblemInstance {
        operator: op,
        baseline,
        labels,
        planted_target,
        target_rank,
        noise,
        noise_std,
        loss_kind,
        seed,
    })
}
