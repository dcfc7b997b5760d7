//! Generating functions, constrained conjugates, dual maps, Bregman
//! divergences and Fenchel-Young losses.
//!
//! A [`GeneratingFunction`] is `Φ = Ω + I_C` where `Ω` is one of three
//! strictly convex kinds and `C = {y : Gy = b}` is an optional affine set.
//! With a constraint, `Φ*(ν) = Ω*(ν + Gᵀλ*) − ⟨λ*, b⟩` where `λ*` solves
//! `G ∇Ω*(ν + Gᵀλ) = b`; the solve is a damped Newton iteration unless the
//! constraint is the probability simplex and `Ω` is an entropy, in which case
//! a closed form is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf, row_rank, solve, Mat};

/// Feasibility tolerance on `‖Gy − b‖∞`.
pub const FEASIBILITY_TOL: f64 = 1e-9;
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaKind {
    /// `½‖y‖²`
    HalfSquaredNorm,
    /// `Σ pᵢ log pᵢ`
    NegativeShannonEntropy,
    /// `Σ (pᵢ log pᵢ − pᵢ)`
    UnnormalizedEntropy,
}

impl OmegaKind {
    pub fn is_entropy(self) -> bool {
        !matches!(self, OmegaKind::HalfSquaredNorm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    g: Mat,
    b: Vec<f64>,
    simplex: bool,
}

impl AffineConstraint {
    pub fn new(g: Mat, b: Vec<f64>) -> Result<Self> {
        if g.rows() != b.len() {
            return Err(Error::Shape(format!(
                "G has {} rows but b has {} entries",
                g.rows(),
                b.len()
            )));
        }
        let rank = row_rank(&g)?;
        if rank < g.rows() {
            return Err(Error::Rank { rank, rows: g.rows() });
        }
        let simplex = g.rows() == 1 && g.as_slice().iter().all(|&v| v == 1.0) && b[0] == 1.0;
        Ok(Self { g, b, simplex })
    }

    /// `{y : Σ yᵢ = 1}`
    pub fn simplex(d: usize) -> Self {
        Self {
            g: Mat::from_vec(1, d, vec![1.0; d]).expect("shape"),
            b: vec![1.0],
            simplex: true,
        }
    }

    pub fn matrix_g(&self) -> &Mat {
        &self.g
    }

    pub fn vector_b(&self) -> &[f64] {
        &self.b
    }

    pub fn is_simplex(&self) -> bool {
        self.simplex
    }

    pub fn residual(&self, y: &[f64]) -> f64 {
        let gy = self.g.matvec(y);
        gy.iter().zip(&self.b).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingFunction {
    pub kind: OmegaKind,
    pub constraint: Option<AffineConstraint>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conjugate {
    pub value: f64,
    /// Empty when no constraint is attached.
    pub lambda_star: Vec<f64>,
}

/// A primal point and a dual point related by the dual map.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPair {
    pub primal_mu: Vec<f64>,
    pub dual_nu: Vec<f64>,
}

impl DualPair {
    pub fn from_dual(gf: &GeneratingFunction, nu: &[f64]) -> Result<Self> {
        Ok(Self {
            primal_mu: gf.dual_map(nu)?,
            dual_nu: nu.to_vec(),
        })
    }

    /// Uses the unconstrained gradient `∇Ω(μ)` as the dual representative.
    pub fn from_primal(gf: &GeneratingFunction, mu: &[f64]) -> Result<Self> {
        Ok(Self {
            primal_mu: mu.to_vec(),
            dual_nu: gf.grad_omega(mu)?,
        })
    }
}

impl GeneratingFunction {
    pub fn new(kind: OmegaKind, dim: usize, constraint: Option<AffineConstraint>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("dimension must be positive".into()));
        }
        if let Some(c) = &constraint {
            if c.g.cols() != dim {
                return Err(Error::Shape(format!(
                    "constraint has {} columns, dimension is {dim}",
                    c.g.cols()
                )));
            }
        }
        Ok(Self { kind, constraint, dim })
    }

    pub fn half_squared_norm(dim: usize) -> Self {
        Self {
            kind: OmegaKind::HalfSquaredNorm,
            constraint: None,
            dim,
        }
    }

    /// Negative Shannon entropy restricted to the simplex: its Fenchel-Young
    /// loss is softmax cross entropy against one-hot targets.
    pub fn simplex_entropy(dim: usize) -> Self {
        Self {
            kind: OmegaKind::NegativeShannonEntropy,
            constraint: Some(AffineConstraint::simplex(dim)),
            dim,
        }
    }

    pub fn with_kind_on_simplex(kind: OmegaKind, dim: usize) -> Self {
        Self {
            kind,
            constraint: Some(AffineConstraint::simplex(dim)),
            dim,
        }
    }

    /// Entropy kind constrained to the probability simplex.
    pub fn is_simplex_entropy(&self) -> bool {
        self.kind.is_entropy() && self.constraint.as_ref().is_some_and(|c| c.simplex)
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of length {} for dimension {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn check_feasible(&self, y: &[f64]) -> Result<()> {
        if let Some(c) = &self.constraint {
            let residual = c.residual(y);
            if residual > FEASIBILITY_TOL {
                return Err(Error::Infeasible { residual });
            }
        }
        Ok(())
    }

    /// `Ω(y)` on the strict domain, or `+∞` if the constraint is violated.
    pub fn eval_phi(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        if self.kind.is_entropy() {
            if let Some(i) = y.iter().position(|v| !(*v > 0.0)) {
                return Err(Error::Domain(format!(
                    "coordinate {i} is {} outside the open positive orthant",
                    y[i]
                )));
            }
        }
        if let Some(c) = &self.constraint {
            if c.residual(y) > FEASIBILITY_TOL {
                return Ok(f64::INFINITY);
            }
        }
        Ok(omega(self.kind, y))
    }

    /// `Φ(y)` for a target, admitting exact zeros with `0 log 0 = 0`.
    pub fn eval_target(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        if self.kind.is_entropy() {
            if let Some(i) = y.iter().position(|v| !(*v >= 0.0)) {
                return Err(Error::Domain(format!("coordinate {i} is {} below zero", y[i])));
            }
        }
        self.check_feasible(y)?;
        Ok(omega(self.kind, y))
    }

    /// Unconstrained gradient `∇Ω(μ)`; `μ` must be strictly interior for entropy kinds.
    pub fn grad_omega(&self, mu: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(mu)?;
        match self.kind {
            OmegaKind::HalfSquaredNorm => Ok(mu.to_vec()),
            kind => {
                if let Some(i) = mu.iter().position(|v| !(*v > 0.0)) {
                    return Err(Error::Domain(format!(
                        "gradient at boundary coordinate {i} ({})",
                        mu[i]
                    )));
                }
                let shift = if kind == OmegaKind::NegativeShannonEntropy {
                    1.0
                } else {
                    0.0
                };
                Ok(mu.iter().map(|p| p.ln() + shift).collect())
            }
        }
    }

    pub fn conjugate(&self, nu: &[f64]) -> Result<Conjugate> {
        self.check_dim(nu)?;
        check_finite(nu)?;
        if self.is_simplex_entropy() {
            return Ok(self.simplex_conjugate(nu));
        }
        self.conjugate_newton(nu)
    }

    /// The general dual solve, bypassing any closed form.
    pub fn conjugate_newton(&self, nu: &[f64]) -> Result<Conjugate> {
        self.check_dim(nu)?;
        check_finite(nu)?;
        match &self.constraint {
            None => Ok(Conjugate {
                value: omega_star(self.kind, nu),
                lambda_star: Vec::new(),
            }),
            Some(c) => {
                let lambda = self.solve_lambda(c, nu)?;
                let u = shifted(c, nu, &lambda);
                Ok(Conjugate {
                    value: omega_star(self.kind, &u) - dot(&lambda, &c.b),
                    lambda_star: lambda,
                })
            }
        }
    }

    fn simplex_conjugate(&self, nu: &[f64]) -> Conjugate {
        let lse = log_sum_exp(nu);
        match self.kind {
            OmegaKind::UnnormalizedEntropy => Conjugate {
                value: 1.0 + lse,
                lambda_star: vec![-lse],
            },
            _ => Conjugate {
                value: lse,
                lambda_star: vec![1.0 - lse],
            },
        }
    }

    fn solve_lambda(&self, c: &AffineConstraint, nu: &[f64]) -> Result<Vec<f64>> {
        let m = c.g.rows();
        let mut lambda = vec![0.0; m];
        let mut r = self.kkt_residual(c, nu, &lambda);
        let mut rnorm = norm_inf(&r);
        for _ in 0..NEWTON_MAX_ITER {
            if rnorm <= NEWTON_TOL {
                return Ok(lambda);
            }
            let u = shifted(c, nu, &lambda);
            let h = omega_star_hess_diag(self.kind, &u);
            // Jacobian of the residual: G diag(h) Gᵀ
            let mut jac = Mat::zeros(m, m);
            for i in 0..m {
                for j in i..m {
                    let v: f64 = (0..self.dim).map(|t| c.g[(i, t)] * h[t] * c.g[(j, t)]).sum();
                    jac[(i, j)] = v;
                    jac[(j, i)] = v;
                }
            }
            let step = solve(&jac, &r)?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = lambda.iter().zip(&step).map(|(l, s)| l - t * s).collect();
                let rt = self.kkt_residual(c, nu, &trial);
                let nt = norm_inf(&rt);
                if nt.is_finite() && nt < rnorm {
                    lambda = trial;
                    r = rt;
                    rnorm = nt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if rnorm <= NEWTON_TOL {
            return Ok(lambda);
        }
        Err(Error::NewtonDivergence {
            iterations: NEWTON_MAX_ITER,
            residual: rnorm,
        })
    }

    fn kkt_residual(&self, c: &AffineConstraint, nu: &[f64], lambda: &[f64]) -> Vec<f64> {
        let u = shifted(c, nu, lambda);
        let grad = omega_star_grad(self.kind, &u);
        let gg = c.g.matvec(&grad);
        gg.iter().zip(&c.b).map(|(a, b)| a - b).collect()
    }

    /// `∇Φ*(ν)`, the structured prediction for logits `ν`.
    pub fn dual_map(&self, nu: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(nu)?;
        check_finite(nu)?;
        if self.is_simplex_entropy() {
            return Ok(softmax(nu));
        }
        match &self.constraint {
            None => Ok(omega_star_grad(self.kind, nu)),
            Some(c) => {
                let lambda = self.solve_lambda(c, nu)?;
                Ok(omega_star_grad(self.kind, &shifted(c, nu, &lambda)))
            }
        }
    }

    /// `d_Φ(y, ν) = Φ(y) + Φ*(ν) − ⟨y, ν⟩`.
    pub fn fy_loss(&self, y: &[f64], nu: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        if self.is_simplex_entropy() {
            self.eval_target(y)?;
            check_finite(nu)?;
            // KL(y ‖ softmax ν) summed coordinatewise, which avoids the
            // cancellation between Φ*(ν) and ⟨y, ν⟩ for large logits.
            let lse = log_sum_exp(nu);
            return Ok(y
                .iter()
                .zip(nu)
                .filter(|(yi, _)| **yi > 0.0)
                .map(|(yi, ni)| yi * (yi.ln() - (ni - lse)))
                .sum());
        }
        let phi = self.eval_target(y)?;
        let conj = self.conjugate(nu)?;
        Ok(phi + conj.value - dot(y, nu))
    }

    /// `Φ(y) − Φ(μ) − ⟨∇Φ(μ), y − μ⟩`; `μ` must be strictly interior for entropy kinds.
    pub fn bregman(&self, y: &[f64], mu: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        self.check_dim(mu)?;
        let grad = self.grad_omega(mu)?;
        self.check_feasible(mu)?;
        let py = self.eval_target(y)?;
        let pm = omega(self.kind, mu);
        let lin: f64 = grad.iter().zip(y.iter().zip(mu)).map(|(g, (a, b))| g * (a - b)).sum();
        Ok(py - pm - lin)
    }

    /// Bregman divergence allowing boundary `μ` wherever `y` is zero too
    /// (`0 log 0/0 = 0`); used for conditional-mean ensembles.
    pub(crate) fn bregman_lenient(&self, y: &[f64], mu: &[f64]) -> Result<f64> {
        match self.kind {
            OmegaKind::HalfSquaredNorm => Ok(0.5 * y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()),
            _ => {
                let mut total = 0.0;
                for (i, (&a, &b)) in y.iter().zip(mu).enumerate() {
                    if a < 0.0 || b < 0.0 {
                        return Err(Error::Domain(format!("negative coordinate {i}")));
                    }
                    if b == 0.0 {
                        if a > 0.0 {
                            return Err(Error::Domain(format!("divergence to a point with zero coordinate {i}")));
                        }
                        continue;
                    }
                    let t = if a > 0.0 { a * (a / b).ln() } else { 0.0 };
                    total += t - a + b;
                }
                Ok(total)
            }
        }
    }

    /// Hessian of `Φ*` at `ν` (the matrix `G_x` of the Hessian bridge).
    pub fn phi_star_hessian(&self, nu: &[f64]) -> Result<Mat> {
        self.check_dim(nu)?;
        check_finite(nu)?;
        let c = match &self.constraint {
            None => return Ok(Mat::diag(&omega_star_hess_diag(self.kind, nu))),
            Some(c) => c,
        };
        if self.is_simplex_entropy() {
            // diag(p) − ppᵀ
            let p = softmax(nu);
            let mut h = Mat::diag(&p);
            for i in 0..self.dim {
                for j in 0..self.dim {
                    h[(i, j)] -= p[i] * p[j];
                }
            }
            return Ok(h);
        }
        let lambda = self.solve_lambda(c, nu)?;
        let d = omega_star_hess_diag(self.kind, &shifted(c, nu, &lambda));
        // D − D Gᵀ (G D Gᵀ)⁻¹ G D
        let m = c.g.rows();
        let mut gd = c.g.clone();
        for i in 0..m {
            for (t, v) in gd.row_mut(i).iter_mut().enumerate() {
                *v *= d[t];
            }
        }
        let s = gd.matmul(&c.g.transpose())?;
        let mut x = Mat::zeros(m, self.dim);
        for t in 0..self.dim {
            let col: Vec<f64> = (0..m).map(|i| gd[(i, t)]).collect();
            for (i, v) in solve(&s, &col)?.into_iter().enumerate() {
                x[(i, t)] = v;
            }
        }
        let corr = gd.transpose().matmul(&x)?;
        let mut h = Mat::diag(&d);
        for i in 0..self.dim {
            for j in 0..self.dim {
                h[(i, j)] -= corr[(i, j)];
            }
        }
        Ok(h)
    }

    /// Eigenvalues of `∇²Ω` at `μ`, as `(min, max)`.
    pub fn curvature_range(&self, mu: &[f64]) -> (f64, f64) {
        match self.kind {
            OmegaKind::HalfSquaredNorm => (1.0, 1.0),
            _ => {
                let hi = mu.iter().fold(0.0f64, |m, v| m.max(*v));
                let lo = mu.iter().fold(f64::INFINITY, |m, v| m.min(*v));
                (1.0 / hi, 1.0 / lo)
            }
        }
    }

    /// Cross entropy offset identity for softmax logits:
    /// `CE(q, softmax ν) − CE(q, q)` against `d_Φ(q, ν)`.
    pub fn ce_offset_check(&self, q: &[f64], logits: &[f64]) -> Result<(f64, f64)> {
        if !self.is_simplex_entropy() {
            return Err(Error::Domain(
                "cross entropy offset needs an entropy on the simplex".into(),
            ));
        }
        self.check_dim(q)?;
        if q.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("q must be strictly positive".into()));
        }
        self.check_feasible(q)?;
        let lse = log_sum_exp(logits);
        let ce_qp: f64 = -q.iter().zip(logits).map(|(a, n)| a * (n - lse)).sum::<f64>();
        let ce_qq: f64 = -q.iter().map(|a| a * a.ln()).sum::<f64>();
        let lhs = ce_qp - ce_qq;
        let rhs = self.fy_loss(q, logits)?;
        Ok((lhs, rhs))
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite coordinate {i}")));
    }
    Ok(())
}

fn shifted(c: &AffineConstraint, nu: &[f64], lambda: &[f64]) -> Vec<f64> {
    let gl = c.g.t_matvec(lambda);
    nu.iter().zip(gl).map(|(a, b)| a + b).collect()
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn omega(kind: OmegaKind, y: &[f64]) -> f64 {
    match kind {
        OmegaKind::HalfSquaredNorm => 0.5 * dot(y, y),
        OmegaKind::NegativeShannonEntropy => y.iter().map(|&p| xlogx(p)).sum(),
        OmegaKind::UnnormalizedEntropy => y.iter().map(|&p| xlogx(p) - p).sum(),
    }
}

fn omega_star(kind: OmegaKind, u: &[f64]) -> f64 {
    match kind {
        OmegaKind::HalfSquaredNorm => 0.5 * dot(u, u),
        OmegaKind::NegativeShannonEntropy => u.iter().map(|v| (v - 1.0).exp()).sum(),
        OmegaKind::UnnormalizedEntropy => u.iter().map(|v| v.exp()).sum(),
    }
}

fn omega_star_grad(kind: OmegaKind, u: &[f64]) -> Vec<f64> {
    match kind {
        OmegaKind::HalfSquaredNorm => u.to_vec(),
        OmegaKind::NegativeShannonEntropy => u.iter().map(|v| (v - 1.0).exp()).collect(),
        OmegaKind::UnnormalizedEntropy => u.iter().map(|v| v.exp()).collect(),
    }
}

fn omega_star_hess_diag(kind: OmegaKind, u: &[f64]) -> Vec<f64> {
    match kind {
        OmegaKind::HalfSquaredNorm => vec![1.0; u.len()],
        _ => omega_star_grad(kind, u),
    }
}

/// `log Σ exp(vᵢ)`, shifted by the maximum.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unnorm_simplex(d: usize) -> GeneratingFunction {
        GeneratingFunction::with_kind_on_simplex(OmegaKind::UnnormalizedEntropy, d)
    }

    #[test]
    fn eval_phi_examples() {
        let q = GeneratingFunction::half_squared_norm(2);
        assert_eq!(q.eval_phi(&[3.0, 4.0]).unwrap(), 12.5);
        let s = GeneratingFunction::simplex_entropy(2);
        assert_abs_diff_eq!(s.eval_phi(&[0.5, 0.5]).unwrap(), -(2f64.ln()), epsilon = 1e-15);
        let u = GeneratingFunction::new(OmegaKind::UnnormalizedEntropy, 2, None).unwrap();
        let direct: f64 = [1.0f64, 1.0].iter().map(|p| p * p.ln() - p).sum();
        assert_eq!(u.eval_phi(&[1.0, 1.0]).unwrap(), -2.0);
        assert_eq!(direct, -2.0);
    }

    #[test]
    fn eval_phi_rejects_boundary_and_flags_infeasible() {
        let s = GeneratingFunction::simplex_entropy(2);
        assert!(matches!(s.eval_phi(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(s.eval_phi(&[0.5, -0.1]), Err(Error::Domain(_))));
        assert_eq!(s.eval_phi(&[0.5, 0.6]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn conjugate_examples() {
        let u = unnorm_simplex(2);
        let c = u.conjugate(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(c.value, 1.0 + 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.lambda_star[0], -(2f64.ln()), epsilon = 1e-12);
        let n = u.conjugate_newton(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(n.value, c.value, epsilon = 1e-9);
        assert_abs_diff_eq!(n.lambda_star[0], c.lambda_star[0], epsilon = 1e-9);

        let c = u.conjugate(&[1.0, 0.0]).unwrap();
        let expected = 1.0 + (1f64.exp() + 1.0).ln();
        assert_abs_diff_eq!(c.value, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(u.conjugate_newton(&[1.0, 0.0]).unwrap().value, expected, epsilon = 1e-9);

        let q = GeneratingFunction::half_squared_norm(2);
        let c = q.conjugate(&[3.0, 4.0]).unwrap();
        assert_eq!(c.value, 12.5);
        assert!(c.lambda_star.is_empty());
    }

    #[test]
    fn negative_entropy_simplex_conjugate_has_no_offset() {
        let s = GeneratingFunction::simplex_entropy(3);
        let nu = [0.3, -1.2, 2.0];
        let fast = s.conjugate(&nu).unwrap();
        let newton = s.conjugate_newton(&nu).unwrap();
        assert_abs_diff_eq!(fast.value, log_sum_exp(&nu), epsilon = 1e-14);
        assert_abs_diff_eq!(newton.value, fast.value, epsilon = 1e-9);
        assert_abs_diff_eq!(newton.lambda_star[0], fast.lambda_star[0], epsilon = 1e-9);
    }

    #[test]
    fn dual_map_examples() {
        let s = unnorm_simplex(2);
        assert_eq!(s.dual_map(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = s.dual_map(&[3f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
        let q = GeneratingFunction::half_squared_norm(2);
        assert_eq!(q.dual_map(&[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = softmax(&[700.0, -700.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(log_sum_exp(&[700.0, 700.0]), 700.0 + 2f64.ln(), epsilon = 1e-12);
        let s = GeneratingFunction::simplex_entropy(2);
        let l = s.fy_loss(&[0.0, 1.0], &[700.0, -700.0]).unwrap();
        assert_abs_diff_eq!(l, 1400.0, epsilon = 1e-9);
    }

    #[test]
    fn fy_loss_examples() {
        let s = GeneratingFunction::simplex_entropy(2);
        assert_abs_diff_eq!(s.fy_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let q = GeneratingFunction::half_squared_norm(2);
        assert_eq!(q.fy_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let direct = 0.5 * ((0.0f64 - 3.0).powi(2) + (0.0f64 - 4.0).powi(2));
        assert_eq!(q.fy_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), direct);
    }

    #[test]
    fn fy_loss_on_unnormalized_simplex_matches_generic_path() {
        let u = unnorm_simplex(3);
        let y = [0.2, 0.5, 0.3];
        let nu = [1.0, -0.5, 0.25];
        let p = softmax(&nu);
        let kl: f64 = y.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
        assert_abs_diff_eq!(u.fy_loss(&y, &nu).unwrap(), kl, epsilon = 1e-12);
    }

    #[test]
    fn bregman_examples() {
        let q = GeneratingFunction::half_squared_norm(2);
        assert_eq!(q.bregman(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        let s = GeneratingFunction::simplex_entropy(2);
        assert_abs_diff_eq!(s.bregman(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0, epsilon = 1e-15);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert_abs_diff_eq!(s.bregman(&[0.9, 0.1], &[0.5, 0.5]).unwrap(), expected, epsilon = 1e-12);
        assert!(matches!(s.bregman(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn ce_offset_examples() {
        let s = GeneratingFunction::simplex_entropy(2);
        let (l, r) = s.ce_offset_check(&[0.5, 0.5], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-15);
        let e = 1f64.exp();
        let expected = ((e + 1.0) / (2.0 * e.sqrt())).ln();
        let (l, r) = s.ce_offset_check(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-12);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let (l, r) = s.ce_offset_check(&[0.9, 0.1], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-12);
        assert!(s.ce_offset_check(&[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn rank_deficient_constraint_is_rejected() {
        let g = Mat::from_rows(&[vec![1.0, 1.0, 0.0], vec![2.0, 2.0, 0.0]]).unwrap();
        assert!(matches!(
            AffineConstraint::new(g, vec![1.0, 2.0]),
            Err(Error::Rank { rank: 1, rows: 2 })
        ));
    }

    #[test]
    fn general_affine_constraint_with_quadratic() {
        // ½‖y‖² on {y₀ + y₁ = 1, y₂ = 0.5}: the dual map is a projection.
        let g = Mat::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let c = AffineConstraint::new(g, vec![1.0, 0.5]).unwrap();
        let gf = GeneratingFunction::new(OmegaKind::HalfSquaredNorm, 3, Some(c)).unwrap();
        let nu = [2.0, 0.0, -3.0];
        let p = gf.dual_map(&nu).unwrap();
        assert_abs_diff_eq!(p[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 0.5, epsilon = 1e-12);
        // Φ*(ν) = ⟨ν, p⟩ − ½‖p‖² at the maximizer
        let expected = dot(&nu, &p) - 0.5 * dot(&p, &p);
        assert_abs_diff_eq!(gf.conjugate(&nu).unwrap().value, expected, epsilon = 1e-12);
    }

    #[test]
    fn phi_star_hessian_general_path_matches_softmax_form() {
        let nu = [0.4, -1.0, 2.2, 0.0];
        let fast = GeneratingFunction::simplex_entropy(4).phi_star_hessian(&nu).unwrap();
        // Same Φ written with an explicit (non-flagged) constraint so the
        // general projection formula is exercised.
        let g = Mat::from_rows(&[vec![2.0; 4]]).unwrap();
        let c = AffineConstraint::new(g, vec![2.0]).unwrap();
        let gf = GeneratingFunction::new(OmegaKind::NegativeShannonEntropy, 4, Some(c)).unwrap();
        assert!(!gf.is_simplex_entropy());
        let general = gf.phi_star_hessian(&nu).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(fast[(i, j)], general[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn phi_star_hessian_matches_finite_differences_of_dual_map() {
        let g = Mat::from_rows(&[vec![1.0, 2.0, 0.5]]).unwrap();
        let c = AffineConstraint::new(g, vec![1.5]).unwrap();
        let gf = GeneratingFunction::new(OmegaKind::UnnormalizedEntropy, 3, Some(c)).unwrap();
        let nu = [0.1, -0.4, 0.3];
        let h = gf.phi_star_hessian(&nu).unwrap();
        let step = 1e-6;
        for j in 0..3 {
            let mut a = nu;
            let mut b = nu;
            a[j] += step;
            b[j] -= step;
            let pa = gf.dual_map(&a).unwrap();
            let pb = gf.dual_map(&b).unwrap();
            for i in 0..3 {
                let fd = (pa[i] - pb[i]) / (2.0 * step);
                assert_abs_diff_eq!(h[(i, j)], fd, epsilon = 1e-7);
            }
        }
    }

    fn kinds() -> Vec<GeneratingFunction> {
        vec![
            GeneratingFunction::half_squared_norm(4),
            GeneratingFunction::new(OmegaKind::UnnormalizedEntropy, 4, None).unwrap(),
            GeneratingFunction::new(OmegaKind::NegativeShannonEntropy, 4, None).unwrap(),
            GeneratingFunction::simplex_entropy(4),
            unnorm_simplex(4),
        ]
    }

    proptest! {
        #[test]
        fn strict_convexity_spot_check(
            a in prop::collection::vec(0.05f64..3.0, 4),
            b in prop::collection::vec(0.05f64..3.0, 4),
            t in 0.05f64..0.95,
        ) {
            prop_assume!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
            for kind in [OmegaKind::HalfSquaredNorm, OmegaKind::NegativeShannonEntropy, OmegaKind::UnnormalizedEntropy] {
                let gf = GeneratingFunction::new(kind, 4, None).unwrap();
                let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
                let lhs = gf.eval_phi(&mid).unwrap();
                let rhs = t * gf.eval_phi(&a).unwrap() + (1.0 - t) * gf.eval_phi(&b).unwrap();
                prop_assert!(lhs < rhs);
            }
        }

        #[test]
        fn fenchel_young_nonnegative_and_tight_on_pairs(
            nu in prop::collection::vec(-5.0f64..5.0, 4),
            y in prop::collection::vec(0.01f64..2.0, 4),
        ) {
            for gf in kinds() {
                let target = if gf.constraint.is_some() {
                    let s: f64 = y.iter().sum();
                    y.iter().map(|v| v / s).collect::<Vec<_>>()
                } else {
                    y.clone()
                };
                prop_assert!(gf.fy_loss(&target, &nu).unwrap() >= -1e-10);
                let pair = DualPair::from_dual(&gf, &nu).unwrap();
                prop_assert!(gf.fy_loss(&pair.primal_mu, &pair.dual_nu).unwrap().abs() <= 1e-8);
            }
        }

        #[test]
        fn dual_map_round_trip(nu in prop::collection::vec(-5.0f64..5.0, 4)) {
            for gf in kinds() {
                let mu = gf.dual_map(&nu).unwrap();
                let grad = gf.grad_omega(&mu).unwrap();
                let conj = gf.conjugate(&nu).unwrap();
                let correction = match &gf.constraint {
                    Some(c) => c.matrix_g().t_matvec(&conj.lambda_star),
                    None => vec![0.0; 4],
                };
                for i in 0..4 {
                    prop_assert!((grad[i] - correction[i] - nu[i]).abs() <= 1e-7);
                }
                if let Some(c) = &gf.constraint {
                    prop_assert!(c.residual(&mu) <= 1e-8);
                }
            }
        }

        #[test]
        fn kl_identity_on_simplex(
            nu in prop::collection::vec(-8.0f64..8.0, 5),
            y in prop::collection::vec(0.01f64..1.0, 5),
        ) {
            let s: f64 = y.iter().sum();
            let y: Vec<f64> = y.iter().map(|v| v / s).collect();
            let p = softmax(&nu);
            let kl: f64 = y.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
            for gf in [GeneratingFunction::simplex_entropy(5), unnorm_simplex(5)] {
                prop_assert!((gf.fy_loss(&y, &nu).unwrap() - kl).abs() <= 1e-9);
                let b = gf.bregman(&y, &p).unwrap();
                prop_assert!((b - kl).abs() <= 1e-9);
            }
        }
    }
}
