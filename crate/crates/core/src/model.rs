//! Linearized LoRA objective `L̂_λ(u, v) = L̂(uvᵀ) + (λ/2)(‖u‖² + ‖v‖²)`.
//!
//! Hessian coordinates are ordered `[vec(u); vec(v)]` with each factor
//! vectorized column-major, i.e. `u[(a, k)]` sits at `k·m + a` and `v[(b, k)]`
//! at `r·m + k·n + b`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::{LossKind, ProblemInstance};

/// Default cap on `r(m+n)` for dense Hessian work.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Factor pair `(u, v)` of rank `r` with its weight-decay strength.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPoint {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub lambda: f64,
}

impl LoraPoint {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "u has {} columns, v has {}",
                u.ncols(),
                v.ncols()
            )));
        }
        let r = u.ncols();
        if r == 0 || r > u.nrows().min(v.nrows()) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} outside 1..={}",
                u.nrows().min(v.nrows())
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("factor entries".into()));
        }
        Ok(Self { u, v, lambda })
    }

    pub fn zeros(m: usize, n: usize, r: usize, lambda: f64) -> Self {
        Self {
            u: DMatrix::zeros(m, r),
            v: DMatrix::zeros(n, r),
            lambda,
        }
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// The update `Δ = uvᵀ`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    pub fn dim(&self) -> usize {
        self.rank() * (self.u.nrows() + self.v.nrows())
    }

    /// Flattened `[vec(u); vec(v)]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(self.u.as_slice());
        out.extend_from_slice(self.v.as_slice());
        DVector::from_vec(out)
    }

    pub fn with_factors(&self, u: DMatrix<f64>, v: DMatrix<f64>) -> Self {
        Self {
            u,
            v,
            lambda: self.lambda,
        }
    }
}

/// Splits a `[vec(u); vec(v)]` vector back into factor-shaped blocks.
pub fn split_direction(d: &DVector<f64>, m: usize, n: usize, r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    assert_eq!(d.len(), r * (m + n), "direction length");
    let du = DMatrix::from_column_slice(m, r, &d.as_slice()[..m * r]);
    let dv = DMatrix::from_column_slice(n, r, &d.as_slice()[m * r..]);
    (du, dv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub loss_kind: LossKind,
}

fn check_point(inst: &ProblemInstance, p: &LoraPoint) -> Result<()> {
    if p.u.nrows() != inst.rows() || p.v.nrows() != inst.cols() {
        return Err(Error::DimensionMismatch(format!(
            "point is ({}x{}, {}x{}), instance expects m = {}, n = {}",
            p.u.nrows(),
            p.u.ncols(),
            p.v.nrows(),
            p.v.ncols(),
            inst.rows(),
            inst.cols()
        )));
    }
    Ok(())
}

/// `f₀ + ⟨G, uvᵀ⟩` for every output coordinate.
pub fn predict(inst: &ProblemInstance, p: &LoraPoint) -> Result<DVector<f64>> {
    check_point(inst, p)?;
    Ok(inst.operator.apply(&p.product())? + &inst.baseline)
}

/// Row-wise softmax over each sample's `K` logits, with max subtraction.
pub fn softmax_blocks(logits: &DVector<f64>, k: usize) -> DVector<f64> {
    let mut out = logits.clone();
    for block in out.as_mut_slice().chunks_mut(k) {
        let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in block.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in block.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Data loss and the per-coordinate residual (`ŷ − y` or `p − y`).
fn data_terms(inst: &ProblemInstance, preds: &DVector<f64>, kind: LossKind) -> Result<(f64, DVector<f64>)> {
    let n = inst.samples() as f64;
    match kind {
        LossKind::Mse => {
            let resid = preds - &inst.labels;
            Ok((0.5 * resid.norm_squared() / n, resid))
        }
        LossKind::Ce => {
            if preds.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("logits".into()));
            }
            if !inst.labels_are_one_hot() {
                return Err(Error::InvalidArgument("cross-entropy requires one-hot labels".into()));
            }
            let k = inst.outputs();
            let mut total = 0.0;
            for (z, y) in preds.as_slice().chunks(k).zip(inst.labels.as_slice().chunks(k)) {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += z.iter().zip(y).map(|(zj, yj)| yj * (lse - zj)).sum::<f64>();
            }
            let probs = softmax_blocks(preds, k);
            Ok((total / n, probs - &inst.labels))
        }
    }
}

fn reg_loss(p: &LoraPoint) -> f64 {
    0.5 * p.lambda * (p.u.norm_squared() + p.v.norm_squared())
}

pub fn loss(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind) -> Result<LossReport> {
    let preds = predict(inst, p)?;
    let (data_loss, _) = data_terms(inst, &preds, kind)?;
    let reg = reg_loss(p);
    Ok(LossReport {
        data_loss,
        reg_loss: reg,
        total: data_loss + reg,
        loss_kind: kind,
    })
}

/// Everything first-order at a point, computed from a single forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossReport,
    pub predictions: DVector<f64>,
    /// `ŷ − y` for MSE, `p − y` for CE.
    pub output_residual: DVector<f64>,
    /// `R = (1/N) 𝒜*(output_residual)`.
    pub residual: DMatrix<f64>,
    pub grad_u: DMatrix<f64>,
    pub grad_v: DMatrix<f64>,
}

impl Evaluation {
    pub fn grad_norm(&self) -> f64 {
        (self.grad_u.norm_squared() + self.grad_v.norm_squared()).sqrt()
    }
}

pub fn evaluate(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind) -> Result<Evaluation> {
    let predictions = predict(inst, p)?;
    let (data_loss, output_residual) = data_terms(inst, &predictions, kind)?;
    let residual = inst.operator.adjoint(&output_residual)? / inst.samples() as f64;
    let grad_u = &residual * &p.v + &p.u * p.lambda;
    let grad_v = residual.transpose() * &p.u + &p.v * p.lambda;
    let reg = reg_loss(p);
    Ok(Evaluation {
        loss: LossReport {
            data_loss,
            reg_loss: reg,
            total: data_loss + reg,
            loss_kind: kind,
        },
        predictions,
        output_residual,
        residual,
        grad_u,
        grad_v,
    })
}

/// `R = (1/N)𝒜*(ŷ − y)` (MSE) or `(1/N)𝒜*(p − y)` (CE).
pub fn residual_matrix(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind) -> Result<DMatrix<f64>> {
    evaluate(inst, p, kind).map(|e| e.residual)
}

/// `(∂u, ∂v) = (Rv + λu, Rᵀu + λv)`.
pub fn gradient(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    evaluate(inst, p, kind).map(|e| (e.grad_u, e.grad_v))
}

/// Second directional derivative `d²/dt² L̂_λ(u + tΔu, v + tΔv)` at `t = 0`.
pub fn hessian_quadratic_form(
    inst: &ProblemInstance,
    p: &LoraPoint,
    du: &DMatrix<f64>,
    dv: &DMatrix<f64>,
    kind: LossKind,
) -> Result<f64> {
    if du.shape() != p.u.shape() || dv.shape() != p.v.shape() {
        return Err(Error::DimensionMismatch("direction shape differs from the point".into()));
    }
    let eval = evaluate(inst, p, kind)?;
    Ok(quadratic_form_at(inst, p, &eval, du, dv, kind)?)
}

pub(crate) fn quadratic_form_at(
    inst: &ProblemInstance,
    p: &LoraPoint,
    eval: &Evaluation,
    du: &DMatrix<f64>,
    dv: &DMatrix<f64>,
    kind: LossKind,
) -> Result<f64> {
    let n = inst.samples() as f64;
    let tangent = du * p.v.transpose() + &p.u * dv.transpose();
    let z = inst.operator.apply(&tangent)?;
    let data_fit = match kind {
        LossKind::Mse => z.norm_squared() / n,
        LossKind::Ce => {
            let k = inst.outputs();
            let probs = softmax_blocks(&eval.predictions, k);
            let mut acc = 0.0;
            for (zi, pi) in z.as_slice().chunks(k).zip(probs.as_slice().chunks(k)) {
                let mean: f64 = zi.iter().zip(pi).map(|(a, b)| a * b).sum();
                let second: f64 = zi.iter().zip(pi).map(|(a, b)| a * a * b).sum();
                acc += second - mean * mean;
            }
            acc / n
        }
    };
    let cross = 2.0 * eval.residual.dot(&(du * dv.transpose()));
    let reg = p.lambda * (du.norm_squared() + dv.norm_squared());
    Ok(data_fit + cross + reg)
}

/// Jacobian of the KN predictions with respect to `[vec(u); vec(v)]`.
pub fn prediction_jacobian(inst: &ProblemInstance, p: &LoraPoint) -> Result<DMatrix<f64>> {
    check_point(inst, p)?;
    let (m, n, r) = (inst.rows(), inst.cols(), p.rank());
    let op = &inst.operator;
    let kn = op.len_targets();
    let mut jac = DMatrix::zeros(kn, r * (m + n));
    let mut gv = vec![0.0; m];
    let mut gtu = vec![0.0; n];
    for t in 0..kn {
        let g = op.slice(t);
        for k in 0..r {
            let vk = p.v.column(k);
            let uk = p.u.column(k);
            gtu.iter_mut().for_each(|x| *x = 0.0);
            for a in 0..m {
                let row = &g[a * n..(a + 1) * n];
                gv[a] = row.iter().zip(vk.iter()).map(|(x, y)| x * y).sum();
                let ua = uk[a];
                for (acc, x) in gtu.iter_mut().zip(row) {
                    *acc += ua * x;
                }
            }
            for a in 0..m {
                jac[(t, k * m + a)] = gv[a];
            }
            for b in 0..n {
                jac[(t, r * m + k * n + b)] = gtu[b];
            }
        }
    }
    Ok(jac)
}

/// Whether a rank-`r` Hessian for this instance is within the dense cap.
pub fn dense_hessian_fits(inst: &ProblemInstance, r: usize) -> bool {
    r * (inst.rows() + inst.cols()) <= DEFAULT_DENSE_CAP
}

pub fn assemble_hessian(inst: &ProblemInstance, p: &LoraPoint, kind: LossKind) -> Result<DMatrix<f64>> {
    assemble_hessian_capped(inst, p, kind, DEFAULT_DENSE_CAP)
}

/// Dense Hessian: Gauss–Newton block, bilinear cross block and `λI`.
pub fn assemble_hessian_capped(
    inst: &ProblemInstance,
    p: &LoraPoint,
    kind: LossKind,
    cap: usize,
) -> Result<DMatrix<f64>> {
    check_point(inst, p)?;
    let d = p.dim();
    if d > cap {
        return Err(Error::CapExceeded(format!(
            "Hessian dimension r(m+n) = {d} exceeds dense cap {cap}; use quadratic-form analysis instead"
        )));
    }
    let eval = evaluate(inst, p, kind)?;
    Ok(hessian_from_evaluation(inst, p, &eval, kind)?)
}

pub(crate) fn hessian_from_evaluation(
    inst: &ProblemInstance,
    p: &LoraPoint,
    eval: &Evaluation,
    kind: LossKind,
) -> Result<DMatrix<f64>> {
    let (m, n, r) = (inst.rows(), inst.cols(), p.rank());
    let nsamp = inst.samples() as f64;
    let jac = prediction_jacobian(inst, p)?;
    let weighted = match kind {
        LossKind::Mse => jac.clone(),
        LossKind::Ce => {
            let k = inst.outputs();
            let probs = softmax_blocks(&eval.predictions, k);
            let mut w = DMatrix::zeros(jac.nrows(), jac.ncols());
            for i in 0..inst.samples() {
                let pi = probs.rows(i * k, k);
                let ji = jac.rows(i * k, k);
                // (diag(p) − ppᵀ) J_i
                let pj = pi.transpose() * ji;
                let mut block = w.rows_mut(i * k, k);
                for j in 0..k {
                    let row = (ji.row(j) - &pj) * pi[j];
                    block.row_mut(j).copy_from(&row);
                }
            }
            w
        }
    };
    let mut h = jac.transpose() * weighted / nsamp;
    let res = &eval.residual;
    for k in 0..r {
        for a in 0..m {
            for b in 0..n {
                let val = res[(a, b)];
                h[(k * m + a, r * m + k * n + b)] += val;
                h[(r * m + k * n + b, k * m + a)] += val;
            }
        }
    }
    for i in 0..h.nrows() {
        h[(i, i)] += p.lambda;
    }
    let sym = (&h + h.transpose()) * 0.5;
    Ok(sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, streams};
    use crate::synthetic::{gen_instance, gen_operator};

    fn mse_instance(seed: u64) -> ProblemInstance {
        let op = gen_operator(5, 4, 2, 6, seed).unwrap();
        gen_instance(op, 1, 0.05, LossKind::Mse, seed).unwrap()
    }

    fn ce_instance(seed: u64) -> ProblemInstance {
        let op = gen_operator(5, 4, 3, 6, seed).unwrap();
        gen_instance(op, 2, 0.0, LossKind::Ce, seed).unwrap()
    }

    fn random_point(m: usize, n: usize, r: usize, lambda: f64, seed: u64) -> LoraPoint {
        let mut rng = rng::stream(seed, streams::FIXTURE);
        let u = rng::normal_matrix(&mut rng, m, r, 0.5);
        let v = rng::normal_matrix(&mut rng, n, r, 0.5);
        LoraPoint::new(u, v, lambda).unwrap()
    }

    #[test]
    fn zero_update_predicts_baseline() {
        let inst = mse_instance(1);
        let p = LoraPoint::zeros(5, 4, 2, 0.0);
        assert_eq!(predict(&inst, &p).unwrap(), inst.baseline);
    }

    #[test]
    fn planted_point_interpolates_noiseless_labels() {
        let op = gen_operator(5, 4, 2, 6, 3).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Mse, 3).unwrap();
        let svd = inst.planted_target.clone().svd(true, true);
        let s = svd.singular_values[0].sqrt();
        let u = svd.u.unwrap().columns(0, 1) * s;
        let v = svd.v_t.unwrap().rows(0, 1).transpose() * s;
        let p = LoraPoint::new(u, v, 0.0).unwrap();
        let preds = predict(&inst, &p).unwrap();
        assert!((preds - &inst.labels).amax() < 1e-12);
        assert!(loss(&inst, &p, LossKind::Mse).unwrap().data_loss < 1e-24);
        assert!(residual_matrix(&inst, &p, LossKind::Mse).unwrap().amax() < 1e-12);
    }

    #[test]
    fn rank_padding_matches_lower_rank() {
        let inst = mse_instance(2);
        let p1 = random_point(5, 4, 1, 0.0, 4);
        let mut u = DMatrix::zeros(5, 2);
        let mut v = DMatrix::zeros(4, 2);
        u.column_mut(0).copy_from(&p1.u.column(0));
        v.column_mut(0).copy_from(&p1.v.column(0));
        let p2 = LoraPoint::new(u, v, 0.0).unwrap();
        assert!((predict(&inst, &p1).unwrap() - predict(&inst, &p2).unwrap()).amax() < 1e-14);
    }

    #[test]
    fn uniform_logits_give_log_two() {
        let op = gen_operator(3, 3, 2, 4, 0).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Ce, 0).unwrap();
        let p = LoraPoint::zeros(3, 3, 1, 0.0);
        let l = loss(&inst, &p, LossKind::Ce).unwrap();
        assert!((l.data_loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reg_loss_counts_unit_columns() {
        let inst = mse_instance(0);
        let u = DMatrix::identity(5, 2);
        let v = DMatrix::identity(4, 2);
        let p = LoraPoint::new(u, v, 0.1).unwrap();
        let l = loss(&inst, &p, LossKind::Mse).unwrap();
        assert!((l.reg_loss - 0.2).abs() < 1e-15);
        assert!((l.total - (l.data_loss + l.reg_loss)).abs() <= 1e-14 * l.total);
    }

    #[test]
    fn ce_requires_one_hot_labels() {
        let inst = mse_instance(0);
        let p = LoraPoint::zeros(5, 4, 1, 0.0);
        assert!(loss(&inst, &p, LossKind::Ce).is_err());
    }

    #[test]
    fn origin_is_critical_without_decay() {
        let inst = mse_instance(5);
        let p = LoraPoint::zeros(5, 4, 2, 0.0);
        let (gu, gv) = gradient(&inst, &p, LossKind::Mse).unwrap();
        assert_eq!(gu.amax(), 0.0);
        assert_eq!(gv.amax(), 0.0);
    }

    #[test]
    fn residual_matches_gradient_identity() {
        // R v + λu = ∂u must hold with R from the definition
        let inst = mse_instance(7);
        let p = random_point(5, 4, 2, 0.3, 7);
        let preds = inst.operator.apply(&p.product()).unwrap();
        let direct = inst.operator.adjoint(&(preds - &inst.labels)).unwrap() / inst.samples() as f64;
        let (gu, gv) = gradient(&inst, &p, LossKind::Mse).unwrap();
        assert!((&direct * &p.v + &p.u * 0.3 - gu).amax() < 1e-12);
        assert!((direct.transpose() * &p.u + &p.v * 0.3 - gv).amax() < 1e-12);
    }

    #[test]
    fn saturated_ce_residual_vanishes() {
        // scale the planted target up so that every margin is large
        let op = gen_operator(4, 4, 2, 5, 9).unwrap();
        let inst = gen_instance(op, 1, 0.0, LossKind::Ce, 9).unwrap();
        let svd = inst.planted_target.clone().svd(true, true);
        let u0 = svd.u.unwrap().columns(0, 1).into_owned();
        let v0 = svd.v_t.unwrap().rows(0, 1).transpose();
        let logits = inst.operator.apply(&inst.planted_target).unwrap();
        let min_margin = logits
            .as_slice()
            .chunks(2)
            .map(|z| (z[0] - z[1]).abs())
            .fold(f64::INFINITY, f64::min);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0] {
            let scale = (margin / min_margin).sqrt();
            let p = LoraPoint::new(&u0 * scale, &v0 * scale, 0.0).unwrap();
            let r = residual_matrix(&inst, &p, LossKind::Ce).unwrap().norm();
            assert!(r < prev);
            prev = r;
        }
        assert!(prev < 1e-6, "residual at margin 20: {prev}");
    }

    #[test]
    fn ce_loss_is_shift_invariant() {
        let op = gen_operator(3, 3, 3, 4, 2).unwrap();
        let mut inst = gen_instance(op, 1, 0.0, LossKind::Ce, 2).unwrap();
        let p = random_point(3, 3, 1, 0.0, 2);
        let base = loss(&inst, &p, LossKind::Ce).unwrap().data_loss;
        for (i, x) in inst.baseline.iter_mut().enumerate() {
            *x += 7.5 * (i / 3) as f64;
        }
        let shifted = loss(&inst, &p, LossKind::Ce).unwrap().data_loss;
        assert!((base - shifted).abs() < 1e-12);
    }

    fn fd_gradient_check(inst: &ProblemInstance, kind: LossKind, seed: u64) {
        let p = random_point(inst.rows(), inst.cols(), 2, 0.2, seed);
        let (gu, gv) = gradient(inst, &p, kind).unwrap();
        let analytic = LoraPoint::new(gu, gv, 0.0).unwrap().to_vector();
        let x = p.to_vector();
        let h = 1e-5;
        let mut fd = DVector::zeros(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let (up, vp) = split_direction(&xp, inst.rows(), inst.cols(), 2);
            let (um, vm) = split_direction(&xm, inst.rows(), inst.cols(), 2);
            let lp = loss(inst, &p.with_factors(up, vp), kind).unwrap().total;
            let lm = loss(inst, &p.with_factors(um, vm), kind).unwrap().total;
            fd[i] = (lp - lm) / (2.0 * h);
        }
        let rel = (&fd - &analytic).norm() / analytic.norm();
        assert!(rel < 1e-6, "{kind} gradient rel error {rel}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for s in 0..20 {
            fd_gradient_check(&mse_instance(s), LossKind::Mse, s);
            fd_gradient_check(&ce_instance(s), LossKind::Ce, s);
        }
    }

    fn second_difference(inst: &ProblemInstance, p: &LoraPoint, du: &DMatrix<f64>, dv: &DMatrix<f64>, kind: LossKind, h: f64) -> f64 {
        let at = |t: f64| loss(inst, &p.with_factors(&p.u + du * t, &p.v + dv * t), kind).unwrap().total;
        (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h)
    }

    #[test]
    fn quadratic_form_matches_second_differences() {
        for s in 0..10 {
            for (inst, kind) in [(mse_instance(s), LossKind::Mse), (ce_instance(s), LossKind::Ce)] {
                let p = random_point(inst.rows(), inst.cols(), 2, 0.1, s + 50);
                let d = random_point(inst.rows(), inst.cols(), 2, 0.0, s + 80);
                let q = hessian_quadratic_form(&inst, &p, &d.u, &d.v, kind).unwrap();
                let fd = second_difference(&inst, &p, &d.u, &d.v, kind, 1e-4);
                assert!((q - fd).abs() <= 1e-5 * q.abs().max(1.0), "{kind}: {q} vs {fd}");
            }
        }
    }

    #[test]
    fn origin_form_reduces_to_cross_term() {
        let inst = mse_instance(3);
        let p = LoraPoint::zeros(5, 4, 1, 0.0);
        let d = random_point(5, 4, 1, 0.0, 9);
        let r0 = -inst.operator.adjoint(&inst.labels).unwrap() / inst.samples() as f64;
        let q = hessian_quadratic_form(&inst, &p, &d.u, &d.v, LossKind::Mse).unwrap();
        let expected = 2.0 * r0.dot(&(&d.u * d.v.transpose()));
        assert!((q - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn one_sided_direction_has_no_cross_term() {
        let inst = mse_instance(4);
        let p = random_point(5, 4, 2, 0.25, 4);
        let d = random_point(5, 4, 2, 0.0, 5);
        let zero = DMatrix::zeros(4, 2);
        let q = hessian_quadratic_form(&inst, &p, &d.u, &zero, LossKind::Mse).unwrap();
        let fit = inst.operator.apply(&(&d.u * p.v.transpose())).unwrap().norm_squared() / inst.samples() as f64;
        let expected = fit + 0.25 * d.u.norm_squared();
        assert!((q - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn mse_loss_is_exactly_quadratic_along_one_factor() {
        // L̂ is quadratic in Δ = uvᵀ, hence exactly quadratic when only one factor moves
        let inst = mse_instance(6);
        let p = random_point(5, 4, 2, 0.1, 6);
        let d = random_point(5, 4, 2, 0.0, 60);
        let zero = DMatrix::zeros(4, 2);
        let eval = evaluate(&inst, &p, LossKind::Mse).unwrap();
        let slope = eval.grad_u.dot(&d.u);
        let curv = hessian_quadratic_form(&inst, &p, &d.u, &zero, LossKind::Mse).unwrap();
        for t in [-1.0, -0.3, 0.5, 1.0] {
            let l = loss(&inst, &p.with_factors(&p.u + &d.u * t, p.v.clone()), LossKind::Mse).unwrap().total;
            let taylor = eval.loss.total + slope * t + 0.5 * curv * t * t;
            assert!((l - taylor).abs() < 1e-10, "t = {t}");
        }
    }

    #[test]
    fn assembled_hessian_matches_quadratic_form() {
        for (inst, kind) in [(mse_instance(8), LossKind::Mse), (ce_instance(8), LossKind::Ce)] {
            let p = random_point(inst.rows(), inst.cols(), 2, 0.05, 8);
            let h = assemble_hessian(&inst, &p, kind).unwrap();
            assert!((&h - h.transpose()).amax() < 1e-12);
            for s in 0..50 {
                let d = random_point(inst.rows(), inst.cols(), 2, 0.0, 100 + s);
                let x = d.to_vector();
                let via_matrix = x.dot(&(&h * &x));
                let direct = hessian_quadratic_form(&inst, &p, &d.u, &d.v, kind).unwrap();
                assert!((via_matrix - direct).abs() <= 1e-10 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn large_decay_makes_hessian_positive_definite() {
        let inst = mse_instance(9);
        let p0 = random_point(5, 4, 2, 0.0, 9);
        let r = residual_matrix(&inst, &p0, LossKind::Mse).unwrap();
        let op_norm = r.singular_values().max();
        // ‖R‖_op does not depend on λ
        let p = LoraPoint::new(p0.u.clone(), p0.v.clone(), 10.0 * op_norm).unwrap();
        let h = assemble_hessian(&inst, &p, LossKind::Mse).unwrap();
        let min = h.symmetric_eigenvalues().min();
        assert!(min > 0.0, "min eigenvalue {min}");
    }

    #[test]
    fn dense_cap_is_enforced() {
        let inst = mse_instance(0);
        let p = LoraPoint::zeros(5, 4, 2, 0.0);
        assert!(matches!(
            assemble_hessian_capped(&inst, &p, LossKind::Mse, 10),
            Err(Error::CapExceeded(_))
        ));
    }
}
