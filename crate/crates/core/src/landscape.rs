//! Structural checks and classification of converged points.
//!
//! At a balanced rank-`r` critical point with `ûv̂ᵀ = U_u Σ U_vᵀ`, the residual
//! decomposes as `R = −λ U_u U_vᵀ + U_u⊥ R₂₂ U_v⊥ᵀ`, and the cross term of the
//! Hessian restricted to the off-space blocks `(Q, T)` has eigenvalues
//! `λ ± σᵢ(R₂₂)`, each `r` times. Rank-deficient second-order points carry a
//! nuclear-norm subgradient certificate of global optimality.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Evaluation, LoraPoint, LossReport, DEFAULT_DENSE_CAP};
use crate::rng::{self, streams};
use crate::synthetic::{LossKind, ProblemInstance};

/// Analyzer tolerances; recorded in every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// SOSP gradient threshold is `grad_rel · (1 + |loss|)`.
    pub grad_rel: f64,
    /// Eigenvalue threshold is `eig_rel · ‖H‖_op`.
    pub eig_rel: f64,
    /// Numerical rank threshold is `rank_rel · max(σ_max(uvᵀ), 1)`.
    pub rank_rel: f64,
    pub gap_abs: f64,
    pub gap_rel: f64,
    /// Relative tolerance for the certificate residuals and `‖R‖_op ≤ λ(1 + tol)`.
    pub certificate: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            grad_rel: 1e-8,
            eig_rel: 1e-6,
            rank_rel: 1e-8,
            gap_abs: 1e-6,
            gap_rel: 1e-3,
            certificate: 1e-6,
        }
    }
}

/// `‖uᵀu − vᵀv‖_F`.
pub fn balancedness_residual(p: &LoraPoint) -> f64 {
    (p.u.transpose() * &p.u - p.v.transpose() * &p.v).norm()
}

/// SVD-aligned frame of a rank-`r` point.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPoint {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    /// Descending singular values of `uvᵀ`.
    pub sigma: DVector<f64>,
    /// Gauge-fixed factors `û = U_u Σ^{1/2}`, `v̂ = U_v Σ^{1/2}`.
    pub point: LoraPoint,
}

/// Thin SVD of `uvᵀ` computed through QR of the factors; returns all `r` triples.
fn factored_svd(p: &LoraPoint) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let r = p.rank();
    let qu = p.u.clone().qr();
    let qv = p.v.clone().qr();
    let core = qu.r() * qv.r().transpose();
    let svd = core.svd(true, true);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let a = svd.u.expect("u requested");
    let bt = svd.v_t.expect("v_t requested");
    let left_q = qu.q();
    let right_q = qv.q();
    let mut left = DMatrix::zeros(p.u.nrows(), r);
    let mut right = DMatrix::zeros(p.v.nrows(), r);
    let mut sigma = DVector::zeros(r);
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = svd.singular_values[src];
        left.column_mut(dst).copy_from(&(&left_q * a.column(src)));
        right.column_mut(dst).copy_from(&(&right_q * bt.row(src).transpose()));
    }
    (left, sigma, right)
}

fn rank_threshold(sigma: &DVector<f64>, rank_rel: f64) -> f64 {
    rank_rel * sigma.iter().copied().fold(1.0, f64::max)
}

/// Number of singular values of `uvᵀ` above the rank tolerance.
pub fn effective_rank(p: &LoraPoint, rank_rel: f64) -> usize {
    let (_, sigma, _) = factored_svd(p);
    let thr = rank_threshold(&sigma, rank_rel);
    sigma.iter().filter(|&&s| s > thr).count()
}

pub fn svd_align(p: &LoraPoint, rank_rel: f64) -> Result<AlignedPoint> {
    let r = p.rank();
    let (left, sigma, right) = factored_svd(p);
    let thr = rank_threshold(&sigma, rank_rel);
    let effective = sigma.iter().filter(|&&s| s > thr).count();
    if effective < r {
        return Err(Error::RankDeficient { effective, requested: r });
    }
    let root = sigma.map(f64::sqrt);
    let u = &left * DMatrix::from_diagonal(&root);
    let v = &right * DMatrix::from_diagonal(&root);
    Ok(AlignedPoint {
        point: p.with_factors(u, v),
        left,
        right,
        sigma,
    })
}

/// Orthonormal complement of the orthonormal columns of `basis`.
///
/// Built from a QR factorization of `[basis | G]` with a fixed-seed Gaussian `G`.
pub fn orthonormal_complement(basis: &DMatrix<f64>, seed: u64) -> DMatrix<f64> {
    let (dim, r) = basis.shape();
    if r >= dim {
        return DMatrix::zeros(dim, 0);
    }
    let mut rng = rng::stream(seed, streams::COMPLETION);
    let fill = rng::normal_matrix(&mut rng, dim, dim - r, 1.0);
    let mut stacked = DMatrix::zeros(dim, dim);
    stacked.columns_mut(0, r).copy_from(basis);
    stacked.columns_mut(r, dim - r).copy_from(&fill);
    let q = stacked.qr().q();
    q.columns(r, dim - r).into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlocks {
    /// `‖U_uᵀ R U_v + λI_r‖_F`
    pub r11_deviation: f64,
    pub r12_norm: f64,
    pub r21_norm: f64,
    #[serde(skip)]
    pub r22: DMatrix<f64>,
    pub sigma1_r22: f64,
    pub residual_norm: f64,
}

/// Four-block decomposition of `R` in the frame `(U_u, U_u⊥) × (U_v, U_v⊥)`.
pub fn blocks_of(residual: &DMatrix<f64>, aligned: &AlignedPoint, lambda: f64, completion_seed: u64) -> ResidualBlocks {
    let r = aligned.sigma.len();
    let left_perp = orthonormal_complement(&aligned.left, completion_seed);
    let right_perp = orthonormal_complement(&aligned.right, completion_seed.wrapping_add(1));
    let lt = aligned.left.transpose();
    let lpt = left_perp.transpose();
    let r11 = &lt * residual * &aligned.right + DMatrix::identity(r, r) * lambda;
    let r12 = &lt * residual * &right_perp;
    let r21 = &lpt * residual * &aligned.right;
    let r22 = &lpt * residual * &right_perp;
    let sigma1 = if r22.is_empty() { 0.0 } else { r22.singular_values().max() };
    ResidualBlocks {
        r11_deviation: r11.norm(),
        r12_norm: r12.norm(),
        r21_norm: r21.norm(),
        r22,
        sigma1_r22: sigma1,
        residual_norm: residual.norm(),
    }
}

pub fn residual_blocks(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind, rank_rel: f64) -> Result<ResidualBlocks> {
    let aligned = svd_align(p, rank_rel)?;
    let residual = model::residual_matrix(inst, p, kind)?;
    Ok(blocks_of(&residual, &aligned, p.lambda, 0))
}

/// Spectrum of the block kernel `[[λI, R₂₂], [R₂₂ᵀ, λI]]`, ascending.
///
/// This is `λ ± σᵢ(R₂₂)` for `i ≤ min(p, q)` plus `λ` for the `|p − q|`
/// unpaired coordinates.
pub fn q_kernel_spectrum(r22: &DMatrix<f64>, lambda: f64) -> Vec<f64> {
    let (p, q) = r22.shape();
    let sv: Vec<f64> = if p.min(q) == 0 {
        Vec::new()
    } else {
        r22.singular_values().iter().copied().collect()
    };
    let mut out = Vec::with_capacity(p + q);
    for s in &sv {
        out.push(lambda + s);
        out.push(lambda - s);
    }
    out.extend(std::iter::repeat_n(lambda, p.max(q) - p.min(q)));
    out.sort_by(f64::total_cmp);
    out
}

/// Eigenvalues of the cross-term form `𝒬(Q, T)`: the kernel spectrum, each `r` times.
pub fn q_spectrum(r22: &DMatrix<f64>, lambda: f64, r: usize) -> Vec<f64> {
    let mut out: Vec<f64> = q_kernel_spectrum(r22, lambda)
        .into_iter()
        .flat_map(|x| std::iter::repeat_n(x, r))
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Dense block kernel `[[λI, R₂₂], [R₂₂ᵀ, λI]]`.
pub fn q_kernel_matrix(r22: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let (p, q) = r22.shape();
    let mut k = DMatrix::identity(p + q, p + q) * lambda;
    k.view_mut((0, p), (p, q)).copy_from(r22);
    k.view_mut((p, 0), (q, p)).copy_from(&r22.transpose());
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigMethod {
    Dense,
    Lanczos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremeEig {
    pub min: f64,
    /// `‖H‖_op` estimate (largest |eigenvalue|).
    pub op_norm: f64,
    /// Residual `‖Hx − θx‖` of the returned Ritz pair (0 for the dense path).
    pub residual: f64,
    pub method: EigMethod,
}

/// Hessian–vector product `H·(Δu, Δv)` without forming `H`.
pub fn hessian_vector_product(
    inst: &ProblemInstance,
    p: &LoraPoint,
    eval: &Evaluation,
    du: &DMatrix<f64>,
    dv: &DMatrix<f64>,
    kind: LossKind,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let nsamp = inst.samples() as f64;
    let tangent = du * p.v.transpose() + &p.u * dv.transpose();
    let mut z = inst.operator.apply(&tangent)?;
    if kind == LossKind::Ce {
        let k = inst.outputs();
        let probs = model::softmax_blocks(&eval.predictions, k);
        for (zi, pi) in z.as_mut_slice().chunks_mut(k).zip(probs.as_slice().chunks(k)) {
            let mean: f64 = zi.iter().zip(pi).map(|(a, b)| a * b).sum();
            for (a, b) in zi.iter_mut().zip(pi) {
                *a = b * (*a - mean);
            }
        }
    }
    let back = inst.operator.adjoint(&z)? / nsamp;
    let res = &eval.residual;
    let hu = &back * &p.v + res * dv + du * p.lambda;
    let hv = back.transpose() * &p.u + res.transpose() * du + dv * p.lambda;
    Ok((hu, hv))
}

/// Smallest Hessian eigenvalue: dense eigendecomposition within the cap, Lanczos beyond it.
pub fn min_hessian_eig(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind) -> Result<ExtremeEig> {
    min_hessian_eig_capped(inst, p, kind, DEFAULT_DENSE_CAP)
}

pub fn min_hessian_eig_capped(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind, cap: usize) -> Result<ExtremeEig> {
    let eval = model::evaluate(inst, p, kind)?;
    if p.dim() <= cap {
        let h = model::hessian_from_evaluation(inst, p, &eval, kind)?;
        let eig = h.symmetric_eigenvalues();
        let min = eig.min();
        let op_norm = eig.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        return Ok(ExtremeEig { min, op_norm, residual: 0.0, method: EigMethod::Dense });
    }
    lanczos_min_eig(inst, p, &eval, kind, 400.min(p.dim()), 1e-8)
}

fn lanczos_min_eig(
    inst: &ProblemInstance,
    p: &LoraPoint,
    eval: &Evaluation,
    kind: LossKind,
    max_steps: usize,
    tol: f64,
) -> Result<ExtremeEig> {
    let (m, n, r) = (inst.rows(), inst.cols(), p.rank());
    let d = p.dim();
    let apply = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let (du, dv) = model::split_direction(x, m, n, r);
        let (hu, hv) = hessian_vector_product(inst, p, eval, &du, &dv, kind)?;
        Ok(LoraPoint { u: hu, v: hv, lambda: 0.0 }.to_vector())
    };
    let mut rng = rng::stream(0, streams::FIXTURE);
    let start = rng::normal_matrix(&mut rng, d, 1, 1.0).column(0).into_owned();
    let mut basis: Vec<DVector<f64>> = vec![start.normalize()];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut best = ExtremeEig { min: f64::NAN, op_norm: 0.0, residual: f64::INFINITY, method: EigMethod::Lanczos };
    for step in 0..max_steps {
        let q = basis[step].clone();
        let mut w = apply(&q)?;
        let alpha = q.dot(&w);
        alphas.push(alpha);
        // full reorthogonalization
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let beta = w.norm();
        let k = alphas.len();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alphas[i];
            if i + 1 < k {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let (imin, &theta) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        let op_norm = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        // residual of the Ritz pair is |β_k · s_k|
        let resid = (beta * eig.eigenvectors[(k - 1, imin)]).abs();
        best = ExtremeEig { min: theta, op_norm, residual: resid, method: EigMethod::Lanczos };
        if resid <= tol * op_norm.max(1.0) || beta < 1e-14 || k == d {
            break;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    GlobalMin,
    SpuriousSosp,
    StrictSaddle,
    NotConverged,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Classification::GlobalMin => "global_min",
            Classification::SpuriousSosp => "spurious_sosp",
            Classification::StrictSaddle => "strict_saddle",
            Classification::NotConverged => "not_converged",
        })
    }
}

impl std::str::FromStr for Classification {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "global_min" => Classification::GlobalMin,
            "spurious_sosp" => Classification::SpuriousSosp,
            "strict_saddle" => Classification::StrictSaddle,
            "not_converged" => Classification::NotConverged,
            other => return Err(Error::InvalidArgument(format!("unknown classification `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub effective_rank: usize,
    pub op_norm_r: f64,
    pub op_norm_ok: bool,
    /// `(‖U₀ᵀW‖_F, ‖WV₀‖_F, max(0, ‖W‖_op − 1))`
    pub subgrad_residuals: [f64; 3],
    pub certified_global: bool,
    pub advisory: Option<String>,
}

/// Nuclear-norm subgradient certificate `−R/λ ∈ ∂‖ûv̂ᵀ‖_*`.
pub fn nuclear_certificate(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind, tol: &Tolerances) -> Result<CertificateReport> {
    let residual = model::residual_matrix(inst, p, kind)?;
    certificate_from_residual(&residual, p, tol)
}

pub fn certificate_from_residual(residual: &DMatrix<f64>, p: &LoraPoint, tol: &Tolerances) -> Result<CertificateReport> {
    let lambda = p.lambda;
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("the nuclear-norm certificate needs λ > 0".into()));
    }
    let (left, sigma, right) = factored_svd(p);
    let thr = rank_threshold(&sigma, tol.rank_rel);
    let s = sigma.iter().filter(|&&x| x > thr).count();
    let advisory = (s == p.rank()).then(|| {
        format!("point has full rank {s}; the certificate covers rank-deficient second-order points only")
    });
    let u0 = left.columns(0, s).into_owned();
    let v0 = right.columns(0, s).into_owned();
    let w = -residual / lambda - &u0 * v0.transpose();
    let op_norm_r = residual.singular_values().max();
    let op_norm_ok = op_norm_r <= lambda * (1.0 + tol.certificate);
    let w_op = w.singular_values().max();
    let residuals = [
        (u0.transpose() * &w).norm(),
        (&w * &v0).norm(),
        (w_op - 1.0).max(0.0),
    ];
    let certified = op_norm_ok && residuals.iter().all(|&x| x <= tol.certificate);
    Ok(CertificateReport {
        effective_rank: s,
        op_norm_r,
        op_norm_ok,
        subgrad_residuals: residuals,
        certified_global: certified,
        advisory,
    })
}

/// Frobenius-orthonormal basis of the tangent space `{Δu v̂ᵀ + û Δvᵀ}`.
pub fn tangent_basis(p: &LoraPoint, rank_rel: f64) -> Result<Vec<DMatrix<f64>>> {
    let aligned = svd_align(p, rank_rel)?;
    let r = aligned.sigma.len();
    let left_perp = orthonormal_complement(&aligned.left, 0);
    let right_perp = orthonormal_complement(&aligned.right, 1);
    let (m, n) = (p.u.nrows(), p.v.nrows());
    let mut out = Vec::with_capacity(r * (m + n) - r * r);
    for i in 0..r {
        let a = aligned.left.column(i);
        for j in 0..r {
            out.push(a * aligned.right.column(j).transpose());
        }
        for j in 0..right_perp.ncols() {
            out.push(a * right_perp.column(j).transpose());
        }
    }
    for i in 0..left_perp.ncols() {
        let a = left_perp.column(i);
        for j in 0..r {
            out.push(a * aligned.right.column(j).transpose());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentSpectrum {
    /// Singular values of `𝒜|_T`, descending.
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
    pub smallest_nonzero: f64,
    pub tangent_dim: usize,
    pub targets: usize,
}

/// Matrix of `𝒜` applied to a tangent basis (one column per basis element).
pub fn tangent_operator_matrix(inst: &ProblemInstance, basis: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let kn = inst.operator.len_targets();
    let mut mat = DMatrix::zeros(kn, basis.len());
    for (c, b) in basis.iter().enumerate() {
        mat.column_mut(c).copy_from(&inst.operator.apply(b)?);
    }
    Ok(mat)
}

pub fn spectrum_of(mat: &DMatrix<f64>) -> TangentSpectrum {
    let (kn, dim) = mat.shape();
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let thr = top * 1e-10 * (kn.max(dim) as f64);
    let numerical_rank = sv.iter().filter(|&&s| s > thr).count();
    let smallest_nonzero = if numerical_rank > 0 { sv[numerical_rank - 1] } else { 0.0 };
    TangentSpectrum {
        singular_values: sv,
        numerical_rank,
        smallest_nonzero,
        tangent_dim: dim,
        targets: kn,
    }
}

pub fn tangent_operator_spectrum(inst: &ProblemInstance, p: &LoraPoint, rank_rel: f64) -> Result<TangentSpectrum> {
    let (m, n, r) = (inst.rows(), inst.cols(), p.rank());
    let dim = r * (m + n) - r * r;
    if dim > DEFAULT_DENSE_CAP {
        return Err(Error::CapExceeded(format!("tangent dimension {dim} exceeds dense cap {DEFAULT_DENSE_CAP}")));
    }
    let basis = tangent_basis(p, rank_rel)?;
    Ok(spectrum_of(&tangent_operator_matrix(inst, &basis)?))
}

/// Lower Marchenko–Pastur edge `α(1 − 1/√ρ)²`.
pub fn mp_edge(rho: f64, alpha: f64) -> Result<f64> {
    if !(rho > 1.0) {
        return Err(Error::InvalidArgument(format!("MP edge needs rho > 1, got {rho}")));
    }
    Ok(alpha * (1.0 - 1.0 / rho.sqrt()).powi(2))
}

/// Hessian quadratic form rewritten in SVD-frame coordinates:
/// `(1/N)‖𝒜(V)‖² + λ‖P − S‖² + 𝒬(Q, T)`.
pub fn decomposed_quadratic_form(
    inst: &ProblemInstance,
    aligned: &AlignedPoint,
    residual_blocks: &ResidualBlocks,
    left_perp: &DMatrix<f64>,
    right_perp: &DMatrix<f64>,
    du: &DMatrix<f64>,
    dv: &DMatrix<f64>,
) -> Result<f64> {
    let p = &aligned.point;
    let lambda = p.lambda;
    let pc = aligned.left.transpose() * du;
    let qc = left_perp.transpose() * du;
    let sc = aligned.right.transpose() * dv;
    let tc = right_perp.transpose() * dv;
    let v = du * p.v.transpose() + &p.u * dv.transpose();
    let fit = inst.operator.apply(&v)?.norm_squared() / inst.samples() as f64;
    let gauge = lambda * (&pc - &sc).norm_squared();
    let cross = lambda * (qc.norm_squared() + tc.norm_squared()) + 2.0 * residual_blocks.r22.dot(&(&qc * tc.transpose()));
    Ok(fit + gauge + cross)
}

/// Measurements taken at a point, before classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnalysis {
    pub grad_norm: f64,
    pub balance_residual: f64,
    pub effective_rank: usize,
    pub blocks: Option<ResidualBlocks>,
    pub q_eigs: Vec<f64>,
    pub min_hessian_eig: f64,
    pub hessian_op_norm: f64,
    pub eig_method: EigMethod,
    pub eig_residual: f64,
    pub loss: LossReport,
    pub certificate: Option<CertificateReport>,
}

pub fn analyze_point(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind, tol: &Tolerances) -> Result<PointAnalysis> {
    let eval = model::evaluate(inst, p, kind)?;
    let eig = min_hessian_eig(inst, p, kind)?;
    let rank = effective_rank(p, tol.rank_rel);
    let (blocks, q_eigs, certificate) = if rank == p.rank() {
        let aligned = svd_align(p, tol.rank_rel)?;
        let blocks = blocks_of(&eval.residual, &aligned, p.lambda, 0);
        let q = q_spectrum(&blocks.r22, p.lambda, p.rank());
        (Some(blocks), q, None)
    } else {
        let cert = if p.lambda > 0.0 {
            Some(certificate_from_residual(&eval.residual, p, tol)?)
        } else {
            None
        };
        (None, Vec::new(), cert)
    };
    Ok(PointAnalysis {
        grad_norm: eval.grad_norm(),
        balance_residual: balancedness_residual(p),
        effective_rank: rank,
        blocks,
        q_eigs,
        min_hessian_eig: eig.min,
        hessian_op_norm: eig.op_norm,
        eig_method: eig.method,
        eig_residual: eig.residual,
        loss: eval.loss,
        certificate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointReport {
    pub analysis: PointAnalysis,
    pub grad_tol: f64,
    pub eig_tol: f64,
    pub global_floor: f64,
    pub classification: Classification,
    pub tolerances: Tolerances,
}

/// SOSP test followed by the loss-gap test against `global_floor`.
pub fn classify(analysis: PointAnalysis, converged: bool, global_floor: f64, tol: &Tolerances) -> CriticalPointReport {
    let grad_tol = tol.grad_rel * (1.0 + analysis.loss.total.abs());
    let eig_tol = tol.eig_rel * analysis.hessian_op_norm;
    let classification = if !converged || analysis.grad_norm > grad_tol {
        Classification::NotConverged
    } else if analysis.min_hessian_eig < -eig_tol {
        Classification::StrictSaddle
    } else if analysis.loss.data_loss > global_floor + tol.gap_abs + tol.gap_rel * global_floor.abs() {
        Classification::SpuriousSosp
    } else {
        Classification::GlobalMin
    };
    CriticalPointReport {
        analysis,
        grad_tol,
        eig_tol,
        global_floor,
        classification,
        tolerances: *tol,
    }
}

/// Unrestricted least-squares floor `min_Δ ‖𝒜(Δ) − y‖²/2N`.
pub fn least_squares_floor(inst: &ProblemInstance) -> f64 {
    let target = &inst.labels - &inst.baseline;
    let gram = inst.operator.gram();
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let thr = top * 1e-12 * eig.eigenvalues.len() as f64;
    // the component of y outside range(𝒜) is unreachable
    let coeffs = eig.eigenvectors.transpose() * &target;
    let mut unreachable = 0.0;
    for (c, &ev) in coeffs.iter().zip(eig.eigenvalues.iter()) {
        if ev <= thr {
            unreachable += c * c;
        }
    }
    0.5 * unreachable / inst.samples() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{train, LambdaStage, TrainConfig};
    use crate::synthetic::{gen_instance, gen_operator};

    fn fixture_point(m: usize, n: usize, r: usize, seed: u64) -> LoraPoint {
        let mut rng = rng::stream(seed, streams::FIXTURE);
        LoraPoint::new(rng::normal_matrix(&mut rng, m, r, 1.0), rng::normal_matrix(&mut rng, n, r, 1.0), 0.1).unwrap()
    }

    #[test]
    fn balanced_pair_has_zero_residual() {
        let p = fixture_point(5, 5, 2, 0);
        let q = p.with_factors(p.u.clone(), p.u.clone());
        assert_eq!(balancedness_residual(&q), 0.0);
    }

    #[test]
    fn rescaled_pair_residual() {
        let u = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]);
        let p = LoraPoint::new(&u * 2.0, &u * 0.5, 0.0).unwrap();
        let s = (u.transpose() * &u)[(0, 0)];
        assert!((balancedness_residual(&p) - 15.0 * s / 4.0).abs() < 1e-12);
    }

    #[test]
    fn svd_align_recovers_known_svd() {
        let mut rng = rng::stream(3, streams::FIXTURE);
        let left = rng::haar_orthonormal(&mut rng, 6, 2);
        let right = rng::haar_orthonormal(&mut rng, 5, 2);
        let sig = [3.0, 0.5];
        let u = &left * DMatrix::from_diagonal(&DVector::from_vec(vec![sig[0], sig[1]]));
        let p = LoraPoint::new(u, right.clone(), 0.0).unwrap();
        let a = svd_align(&p, 1e-8).unwrap();
        assert!((a.sigma[0] - 3.0).abs() < 1e-12 && (a.sigma[1] - 0.5).abs() < 1e-12);
        assert!((a.left.transpose() * &a.left - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!((a.point.product() - p.product()).amax() < 1e-10);
        assert!(balancedness_residual(&a.point) < 1e-12);
    }

    #[test]
    fn collapsed_column_is_rank_deficient() {
        let mut p = fixture_point(5, 4, 2, 1);
        p.v.column_mut(1).fill(0.0);
        assert!(matches!(svd_align(&p, 1e-8), Err(Error::RankDeficient { effective: 1, requested: 2 })));
    }

    #[test]
    fn constructed_residual_blocks_are_recovered() {
        let p = fixture_point(6, 5, 2, 2);
        let a = svd_align(&p, 1e-8).unwrap();
        let lp = orthonormal_complement(&a.left, 0);
        let rp = orthonormal_complement(&a.right, 1);
        let mut rng = rng::stream(9, streams::FIXTURE);
        let m22 = rng::normal_matrix(&mut rng, 4, 3, 1.0);
        let lambda = 0.3;
        let residual = -(&a.left * a.right.transpose()) * lambda + &lp * &m22 * rp.transpose();
        let b = blocks_of(&residual, &a, lambda, 0);
        assert!(b.r11_deviation < 1e-12 && b.r12_norm < 1e-12 && b.r21_norm < 1e-12);
        assert!((&b.r22 - &m22).amax() < 1e-12);
        // another completion changes R₂₂ by a rotation only
        let b2 = blocks_of(&residual, &a, lambda, 77);
        assert!((b.sigma1_r22 - b2.sigma1_r22).abs() < 1e-12);
        assert!((b.r22.norm() - b2.r22.norm()).abs() < 1e-12);
    }

    #[test]
    fn q_spectrum_small_cases() {
        let r22 = DMatrix::from_element(1, 1, 0.3);
        let q = q_spectrum(&r22, 0.5, 1);
        assert!((q[0] - 0.2).abs() < 1e-15 && (q[1] - 0.8).abs() < 1e-15);
        let zero = DMatrix::zeros(3, 2);
        let q = q_spectrum(&zero, 0.7, 2);
        assert_eq!(q.len(), 2 * 5);
        assert!(q.iter().all(|&x| x == 0.7));
    }

    #[test]
    fn q_spectrum_matches_dense_kernel() {
        let mut rng = rng::stream(4, streams::FIXTURE);
        for (p, q) in [(3, 5), (4, 4), (6, 2)] {
            let r22 = rng::normal_matrix(&mut rng, p, q, 1.0);
            let lambda = 0.8;
            let mut dense: Vec<f64> = q_kernel_matrix(&r22, lambda).symmetric_eigenvalues().iter().copied().collect();
            dense.sort_by(f64::total_cmp);
            let analytic = q_kernel_spectrum(&r22, lambda);
            for (a, b) in dense.iter().zip(&analytic) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tangent_basis_dimensions_and_orthonormality() {
        let p = fixture_point(3, 3, 1, 5);
        let basis = tangent_basis(&p, 1e-8).unwrap();
        assert_eq!(basis.len(), 5);
        let p = fixture_point(8, 6, 2, 6);
        let basis = tangent_basis(&p, 1e-8).unwrap();
        assert_eq!(basis.len(), 24);
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((a.dot(b) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tangent_basis_spans_factor_directions() {
        let p = fixture_point(5, 4, 2, 7);
        let basis = tangent_basis(&p, 1e-8).unwrap();
        let d = fixture_point(5, 4, 2, 8);
        let v = &d.u * p.v.transpose() + &p.u * d.v.transpose();
        let proj: f64 = basis.iter().map(|b| b.dot(&v).powi(2)).sum();
        assert!((proj - v.norm_squared()).abs() < 1e-9 * v.norm_squared());
    }

    #[test]
    fn tangent_spectrum_is_basis_invariant() {
        let op = gen_operator(6, 5, 2, 4, 2).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Mse, 2).unwrap();
        let p = fixture_point(6, 5, 1, 3);
        let basis = tangent_basis(&p, 1e-8).unwrap();
        let base = spectrum_of(&tangent_operator_matrix(&inst, &basis).unwrap());
        let mut rng = rng::stream(1, streams::FIXTURE);
        let rot = rng::haar_orthonormal(&mut rng, basis.len(), basis.len());
        let rotated: Vec<DMatrix<f64>> = (0..basis.len())
            .map(|j| {
                basis
                    .iter()
                    .enumerate()
                    .fold(DMatrix::zeros(6, 5), |acc, (i, b)| acc + b * rot[(i, j)])
            })
            .collect();
        let other = spectrum_of(&tangent_operator_matrix(&inst, &rotated).unwrap());
        for (a, b) in base.singular_values.iter().zip(&other.singular_values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn underdetermined_tangent_has_full_column_rank() {
        // ρ = 9/16 ≤ 1
        let op = gen_operator(5, 5, 2, 8, 4).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Mse, 4).unwrap();
        let p = fixture_point(5, 5, 1, 4);
        let spec = tangent_operator_spectrum(&inst, &p, 1e-8).unwrap();
        assert_eq!(spec.numerical_rank, 9);
    }

    #[test]
    fn mp_edge_values() {
        assert!((mp_edge(4.0, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(mp_edge(1.0 + 1e-6, 1.0).unwrap() < 1e-12);
        let edge = mp_edge(1.35, 1.0).unwrap();
        assert!((edge - 0.0195).abs() < 2e-4, "{edge}");
        assert!(mp_edge(1.0, 1.0).is_err());
        assert!(mp_edge(0.5, 1.0).is_err());
    }

    #[test]
    fn zero_instance_origin_has_zero_min_eig() {
        let op = gen_operator(4, 3, 2, 3, 0).unwrap();
        let mut inst = gen_instance(op, 1, 0.0, LossKind::Mse, 0).unwrap();
        inst.labels.fill(0.0);
        let p = LoraPoint::zeros(4, 3, 1, 0.0);
        let e = min_hessian_eig(&inst, &p, LossKind::Mse).unwrap();
        assert_eq!(e.min, 0.0);
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        let op = gen_operator(6, 5, 2, 4, 1).unwrap();
        let inst = gen_instance(op, 1, 0.1, LossKind::Mse, 1).unwrap();
        let p = fixture_point(6, 5, 2, 9);
        for kind in [LossKind::Mse] {
            let dense = min_hessian_eig(&inst, &p, kind).unwrap();
            let iterative = min_hessian_eig_capped(&inst, &p, kind, 0).unwrap();
            assert_eq!(iterative.method, EigMethod::Lanczos);
            assert!((dense.min - iterative.min).abs() < 1e-8 * dense.op_norm, "{dense:?} {iterative:?}");
        }
        let op = gen_operator(5, 4, 3, 4, 1).unwrap();
        let inst = gen_instance(op, 2, 0.0, LossKind::Ce, 1).unwrap();
        let p = fixture_point(5, 4, 2, 10);
        let dense = min_hessian_eig(&inst, &p, LossKind::Ce).unwrap();
        let iterative = min_hessian_eig_capped(&inst, &p, LossKind::Ce, 0).unwrap();
        assert!((dense.min - iterative.min).abs() < 1e-8 * dense.op_norm.max(1.0));
    }

    #[test]
    fn strict_saddle_fixture_hits_cross_term_bound() {
        // origin with λ < ‖R(0)‖_op: worst direction gives λ − σ₁
        let op = gen_operator(5, 4, 2, 6, 3).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Mse, 3).unwrap();
        let r0 = -inst.operator.adjoint(&inst.labels).unwrap() / inst.samples() as f64;
        let s1 = r0.singular_values().max();
        let p = LoraPoint::zeros(5, 4, 1, 0.5 * s1);
        let e = min_hessian_eig(&inst, &p, LossKind::Mse).unwrap();
        assert!(e.min <= 0.5 * s1 - s1 + 1e-10);
    }

    #[test]
    fn classification_rules() {
        let base = PointAnalysis {
            grad_norm: 1e-10,
            balance_residual: 0.0,
            effective_rank: 1,
            blocks: None,
            q_eigs: vec![],
            min_hessian_eig: 1e-3,
            hessian_op_norm: 1.0,
            eig_method: EigMethod::Dense,
            eig_residual: 0.0,
            loss: LossReport { data_loss: 1e-9, reg_loss: 0.0, total: 1e-9, loss_kind: LossKind::Mse },
            certificate: None,
        };
        let tol = Tolerances::default();
        assert_eq!(classify(base.clone(), true, 0.0, &tol).classification, Classification::GlobalMin);
        let saddle = PointAnalysis { min_hessian_eig: -0.1, ..base.clone() };
        assert_eq!(classify(saddle, true, 0.0, &tol).classification, Classification::StrictSaddle);
        let high = PointAnalysis {
            loss: LossReport { data_loss: 1e-2, reg_loss: 0.0, total: 1e-2, loss_kind: LossKind::Mse },
            ..base.clone()
        };
        assert_eq!(classify(high, true, 1e-5, &tol).classification, Classification::SpuriousSosp);
        assert_eq!(classify(base, false, 0.0, &tol).classification, Classification::NotConverged);
    }

    #[test]
    fn shrinkage_fixture_is_certified() {
        let op = gen_operator(8, 7, 2, 5, 6).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Mse, 6).unwrap();
        let r0 = inst.operator.adjoint(&inst.labels).unwrap() / inst.samples() as f64;
        let lam = 1.5 * r0.singular_values().max();
        let cfg = TrainConfig {
            rank: 2,
            init_scale: Some(0.1),
            lambda_schedule: vec![LambdaStage { lambda: lam, grad_tol: 1e-12 }],
            ..Default::default()
        };
        let run = train(&inst, &cfg, LossKind::Mse, 0).unwrap();
        let tol = Tolerances::default();
        let cert = nuclear_certificate(&inst, &run.point, LossKind::Mse, &tol).unwrap();
        assert_eq!(cert.effective_rank, 0);
        assert!(cert.certified_global, "{cert:?}");
        assert!(cert.op_norm_r <= lam * (1.0 + 1e-6));
    }

    #[test]
    fn planted_violation_fails_operator_norm_check() {
        let mut rng = rng::stream(2, streams::FIXTURE);
        let lambda = 0.2;
        let mut residual = rng::normal_matrix(&mut rng, 5, 4, 1.0);
        let s = residual.singular_values().max();
        residual *= 1.2 * lambda / s;
        let p = LoraPoint::zeros(5, 4, 1, lambda);
        let cert = certificate_from_residual(&residual, &p, &Tolerances::default()).unwrap();
        assert!(!cert.op_norm_ok);
        assert!(!cert.certified_global);
    }

    #[test]
    fn zero_point_certificate_uses_scaled_residual() {
        let op = gen_operator(5, 5, 2, 4, 1).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Mse, 1).unwrap();
        let r0 = inst.operator.adjoint(&inst.labels).unwrap() / inst.samples() as f64;
        let lam = r0.singular_values().max() * 1.01;
        let p = LoraPoint::zeros(5, 5, 1, lam);
        let cert = nuclear_certificate(&inst, &p, LossKind::Mse, &Tolerances::default()).unwrap();
        assert_eq!(cert.effective_rank, 0);
        assert!(cert.certified_global);
        assert_eq!(cert.subgrad_residuals[0], 0.0);
    }

    #[test]
    fn full_rank_point_gets_advisory() {
        let op = gen_operator(5, 5, 2, 4, 1).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Mse, 1).unwrap();
        let p = fixture_point(5, 5, 1, 1);
        let cert = nuclear_certificate(&inst, &p, LossKind::Mse, &Tolerances::default()).unwrap();
        assert!(cert.advisory.is_some());
    }

    #[test]
    fn least_squares_floor_cases() {
        // surjective: KN ≤ mn
        let op = gen_operator(4, 4, 2, 3, 0).unwrap();
        let inst = gen_instance(op, 1, 0.1, LossKind::Mse, 0).unwrap();
        assert!(least_squares_floor(&inst) < 1e-20);
        // overdetermined: KN > mn, floor equals the projection residual
        let op = gen_operator(2, 2, 2, 6, 0).unwrap();
        let inst = gen_instance(op, 1, 0.1, LossKind::Mse, 0).unwrap();
        let a = inst.operator.as_matrix();
        let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
        let fit = &a * (pinv * &inst.labels);
        let expected = 0.5 * (&inst.labels - fit).norm_squared() / inst.samples() as f64;
        assert!((least_squares_floor(&inst) - expected).abs() < 1e-12);
    }

    fn trained_mse(m: usize, n: usize, k: usize, nsamp: usize, seed: u64) -> (ProblemInstance, LoraPoint) {
        let op = gen_operator(m, n, k, nsamp, seed).unwrap();
        let inst = gen_instance(op, 1, 0.01, LossKind::Mse, seed).unwrap();
        let cfg = TrainConfig { rank: 1, ..Default::default() };
        let run = train(&inst, &cfg, LossKind::Mse, seed).unwrap();
        assert!(run.converged, "{:?}", run.diagnostic);
        (inst, run.point)
    }

    #[test]
    fn converged_point_has_block_residual_structure() {
        let (inst, p) = trained_mse(12, 12, 2, 16, 21);
        let b = residual_blocks(&inst, &p, LossKind::Mse, 1e-8).unwrap();
        assert!(b.r11_deviation <= 1e-4 * p.lambda, "{b:?}");
        let off = 1e-6 * (1.0 + b.residual_norm);
        assert!(b.r12_norm <= off && b.r21_norm <= off, "{b:?}");
    }

    #[test]
    fn decomposed_form_matches_quadratic_form_at_converged_point() {
        let (inst, p) = trained_mse(10, 9, 2, 12, 22);
        let aligned = svd_align(&p, 1e-8).unwrap();
        let residual = model::residual_matrix(&inst, &aligned.point, LossKind::Mse).unwrap();
        let blocks = blocks_of(&residual, &aligned, p.lambda, 0);
        let lp = orthonormal_complement(&aligned.left, 0);
        let rp = orthonormal_complement(&aligned.right, 1);
        let mut rng = rng::stream(5, streams::FIXTURE);
        for _ in 0..20 {
            let du = rng::normal_matrix(&mut rng, 10, 1, 1.0);
            let dv = rng::normal_matrix(&mut rng, 9, 1, 1.0);
            let direct = model::hessian_quadratic_form(&inst, &aligned.point, &du, &dv, LossKind::Mse).unwrap();
            let split = decomposed_quadratic_form(&inst, &aligned, &blocks, &lp, &rp, &du, &dv).unwrap();
            assert!((direct - split).abs() <= 1e-8 * direct.abs().max(1e-12), "{direct} {split}");
        }
    }

    #[test]
    fn analysis_is_gauge_invariant() {
        let (inst, p) = trained_mse(8, 8, 2, 10, 23);
        let tol = Tolerances::default();
        let a = analyze_point(&inst, &p, LossKind::Mse, &tol).unwrap();
        let mut rng = rng::stream(6, streams::FIXTURE);
        let o = rng::haar_orthonormal(&mut rng, 1, 1);
        let q = p.with_factors(&p.u * &o, &p.v * &o);
        let b = analyze_point(&inst, &q, LossKind::Mse, &tol).unwrap();
        assert!((a.loss.total - b.loss.total).abs() < 1e-14);
        assert!((a.min_hessian_eig - b.min_hessian_eig).abs() < 1e-10);
        let (ba, bb) = (a.blocks.unwrap(), b.blocks.unwrap());
        assert!((ba.sigma1_r22 - bb.sigma1_r22).abs() < 1e-12);
    }

    #[test]
    fn analysis_report_round_trips_through_json() {
        let (inst, p) = trained_mse(6, 6, 2, 6, 24);
        let tol = Tolerances::default();
        let a = analyze_point(&inst, &p, LossKind::Mse, &tol).unwrap();
        let report = classify(a, true, 0.0, &tol);
        let text = serde_json::to_string(&report).unwrap();
        let back: CriticalPointReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.classification, report.classification);
    }
}
