//! Computable risk, fitting, convergence and generalization bounds.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::convex::{log_sum_exp, GeneratingFunction};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::info::{absolute_info_loss, gen_cond_entropy, relative_info_loss, DiscreteJoint, FeatureKey};
use crate::linalg::{norm_sq, sym_eigenvalues};
use crate::net::{forward, loss_hessian, top_eigenvalue, NetSpec, ParamVector, StructureSpectrum};
use crate::optim::sample_terms_with_jacobian;
use crate::rng::{derive_seed, CounterRng, SplitMix64};

/// Predicted probabilities are floored here before `γ` and the CE sandwich.
pub const P_MIN_CLAMP: f64 = 1e-12;
/// Structure spectra with `λ_min` at or below this are degenerate.
pub const DEGENERATE_LAMBDA: f64 = 1e-12;
/// Decimal digits kept when grouping real-valued model outputs.
pub const OUTPUT_DIGITS: i32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleDiagnostics {
    pub loss: f64,
    /// `‖y − ∇Φ*(f(x))‖²`
    pub std_risk: f64,
    pub grad_norm_sq: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Smallest predicted probability (entropy-on-simplex losses only), clamped.
    pub p_min: Option<f64>,
    /// Largest `∇²Φ` eigenvalue at this sample's prediction.
    pub h_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    pub risk: f64,
    pub std_risk: f64,
    pub grad_energy: f64,
    pub lambda_min_s: f64,
    pub lambda_max_s: f64,
    /// Extremes of `∇²Φ` eigenvalues over the observed predictions.
    pub h_min: f64,
    pub h_max: f64,
    /// Curvature floor valid between any target and prediction; the lower
    /// risk bound uses this rather than `h_min`.
    pub h_floor: f64,
    pub gamma: f64,
    pub p_min: Option<f64>,
    /// `Ent_Φ(Y'|X')` of the empirical joint.
    pub ent_lower: f64,
    pub degenerate: bool,
    pub samples: Vec<SampleDiagnostics>,
}

impl RiskReport {
    /// `(E‖∇‖²/λ_max, E‖∇‖²/λ_min)` around the standardized risk.
    pub fn std_sandwich(&self) -> Option<(f64, f64)> {
        if self.degenerate {
            return None;
        }
        Some((
            self.grad_energy / self.lambda_max_s,
            self.grad_energy / self.lambda_min_s,
        ))
    }

    /// Risk sandwich `h_floor·E‖∇‖²/(2λ_max) ≤ R ≤ h_max·E‖∇‖²/λ_min`.
    ///
    /// The lower side carries the second-order factor ½ and a global
    /// curvature floor; with `h_min` from the observed predictions and no ½
    /// the inequality fails even for a linear model under squared loss.
    pub fn risk_sandwich(&self) -> Option<(f64, f64)> {
        if self.degenerate {
            return None;
        }
        Some((
            self.h_floor * self.grad_energy / (2.0 * self.lambda_max_s),
            self.h_max * self.grad_energy / self.lambda_min_s,
        ))
    }

    /// The risk sandwich for one sample's loss, with that sample's own
    /// spectrum and curvature ceiling.
    pub fn sample_risk_sandwich(&self, d: &SampleDiagnostics) -> Option<(f64, f64)> {
        if d.lambda_min <= DEGENERATE_LAMBDA {
            return None;
        }
        Some((
            self.h_floor * d.grad_norm_sq / (2.0 * d.lambda_max),
            d.h_max * d.grad_norm_sq / d.lambda_min,
        ))
    }

    /// `Ent_Φ(Y'|X') ≤ R ≤ γ` within `tol`.
    /// `tol` scales with `max(1, R)`.
    pub fn fitting_holds(&self, tol: f64) -> bool {
        let tol = tol * self.risk.abs().max(1.0);
        self.ent_lower - tol <= self.risk && self.risk <= self.gamma + tol
    }
}

/// `γ_Φ(θ)`: the largest loss over inputs `xs` and candidate targets `ys`.
/// For an entropy on the simplex this is `log 1/p_min` over all classes.
pub fn loss_upper_bound(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
) -> Result<f64> {
    let mut gamma = f64::NEG_INFINITY;
    for x in xs {
        let f = forward(spec, theta, x)?;
        gamma = gamma.max(gamma_at_output(gf, &f, ys)?);
    }
    Ok(gamma)
}

fn gamma_at_output(gf: &GeneratingFunction, f: &[f64], ys: &[Vec<f64>]) -> Result<f64> {
    if gf.is_simplex_entropy() {
        let lse = log_sum_exp(f);
        let min_logp = f.iter().map(|v| v - lse).fold(f64::INFINITY, f64::min);
        return Ok(-(min_logp.max(P_MIN_CLAMP.ln())));
    }
    let mut g = f64::NEG_INFINITY;
    for y in ys {
        g = g.max(gf.fy_loss(y, f)?);
    }
    Ok(g)
}

fn distinct_targets(data: &Dataset) -> Vec<Vec<f64>> {
    let mut seen = std::collections::HashSet::new();
    data.samples
        .iter()
        .filter(|s| seen.insert(s.y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .map(|s| s.y.clone())
        .collect()
}

pub fn risk_report(spec: &NetSpec, theta: &ParamVector, gf: &GeneratingFunction, data: &Dataset) -> Result<RiskReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let simplex = gf.is_simplex_entropy();
    let per: Vec<(SampleDiagnostics, Vec<f64>)> = data
        .samples
        .par_iter()
        .map(|s| {
            let (t, j) = sample_terms_with_jacobian(spec, theta, gf, &s.x, &s.y)?;
            let sp = StructureSpectrum::of_matrix(&j.gram_rows())?;
            let p_min = simplex.then(|| t.dual.iter().fold(f64::INFINITY, |m, v| m.min(*v)).max(P_MIN_CLAMP));
            let h_max = if gf.kind.is_entropy() {
                let lo = t.dual.iter().fold(f64::INFINITY, |m, v| m.min(*v));
                1.0 / lo.max(P_MIN_CLAMP)
            } else {
                1.0
            };
            let diag = SampleDiagnostics {
                h_max,
                loss: t.loss,
                std_risk: norm_sq(&t.residual),
                grad_norm_sq: norm_sq(&t.grad),
                lambda_min: sp.lambda_min,
                lambda_max: sp.lambda_max,
                p_min,
            };
            Ok((diag, t.dual))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: fn(&SampleDiagnostics) -> f64| per.iter().map(|(d, _)| f(d)).sum::<f64>() / n;
    let risk = mean(|d| d.loss);
    let std_risk = mean(|d| d.std_risk);
    let grad_energy = mean(|d| d.grad_norm_sq);
    let lambda_min_s = per.iter().fold(f64::INFINITY, |m, (d, _)| m.min(d.lambda_min));
    let lambda_max_s = per.iter().fold(0.0f64, |m, (d, _)| m.max(d.lambda_max));

    let dual_max = per
        .iter()
        .flat_map(|(_, p)| p.iter())
        .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let dual_min = per
        .iter()
        .flat_map(|(_, p)| p.iter())
        .fold(f64::INFINITY, |m, v| m.min(*v));
    let (h_min, h_max, h_floor, p_min) = if !gf.kind.is_entropy() {
        (1.0, 1.0, 1.0, None)
    } else if simplex {
        let p_min = dual_min.max(P_MIN_CLAMP);
        (1.0 / dual_max, 1.0 / p_min, 1.0, Some(p_min))
    } else {
        let target_max = data
            .samples
            .iter()
            .flat_map(|s| s.y.iter())
            .fold(0.0f64, |m, v| m.max(*v));
        (1.0 / dual_max, 1.0 / dual_min, 1.0 / dual_max.max(target_max), None)
    };

    let ys = distinct_targets(data);
    let gamma = if simplex {
        -(p_min.expect("simplex").ln())
    } else {
        loss_upper_bound(spec, theta, gf, &data.inputs(), &ys)?
    };
    let ent_lower = gen_cond_entropy(gf, &data.joint()?)?;
    Ok(RiskReport {
        risk,
        std_risk,
        grad_energy,
        lambda_min_s,
        lambda_max_s,
        h_min,
        h_max,
        h_floor,
        gamma,
        p_min,
        ent_lower,
        degenerate: lambda_min_s <= DEGENERATE_LAMBDA,
        samples: per.into_iter().map(|(d, _)| d).collect(),
    })
}

/// Squared-loss sandwich `E‖∇‖²/(2λ_max) ≤ R ≤ E‖∇‖²/(2λ_min)`.
pub fn mse_sandwich(report: &RiskReport) -> Result<(f64, f64)> {
    if report.degenerate {
        return Err(Error::DegenerateSpectrum {
            lambda_min: report.lambda_min_s,
        });
    }
    Ok((
        report.grad_energy / (2.0 * report.lambda_max_s),
        report.grad_energy / (2.0 * report.lambda_min_s),
    ))
}

/// Cross-entropy sandwich `E‖∇‖²/(2 ln2 λ_max) ≤ R ≤ E‖∇‖²/(p_min λ_min)`.
pub fn ce_sandwich(report: &RiskReport) -> Result<(f64, f64)> {
    if report.degenerate {
        return Err(Error::DegenerateSpectrum {
            lambda_min: report.lambda_min_s,
        });
    }
    let p_min = report
        .p_min
        .ok_or_else(|| Error::Domain("cross-entropy sandwich needs predicted probabilities".into()))?;
    Ok((
        report.grad_energy / (2.0 * std::f64::consts::LN_2 * report.lambda_max_s),
        report.grad_energy / (p_min * report.lambda_min_s),
    ))
}

/// Per-sample versions of the two loss sandwiches, keyed by whether the loss
/// is cross entropy.
pub fn sample_loss_sandwich(d: &SampleDiagnostics) -> Option<(f64, f64)> {
    if d.lambda_min <= DEGENERATE_LAMBDA {
        return None;
    }
    Some(match d.p_min {
        Some(p) => (
            d.grad_norm_sq / (2.0 * std::f64::consts::LN_2 * d.lambda_max),
            d.grad_norm_sq / (p * d.lambda_min),
        ),
        None => (
            d.grad_norm_sq / (2.0 * d.lambda_max),
            d.grad_norm_sq / (2.0 * d.lambda_min),
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UbLb {
    /// `log₂‖∇‖² − log₂λ_min`, unavailable on degenerate spectra.
    pub ub: Option<f64>,
    /// `log₂‖∇‖² − log₂λ_max`
    pub lb: Option<f64>,
    pub log2_std_risk: Option<f64>,
}

impl UbLb {
    pub fn holds(&self, tol: f64) -> Option<bool> {
        let s = self.log2_std_risk?;
        let ub_ok = self.ub.is_none_or(|u| s <= u + tol);
        let lb_ok = self.lb.is_none_or(|l| l - tol <= s);
        Some(ub_ok && lb_ok)
    }
}

pub fn ub_lb(grad_norm_sq: f64, lambda_min: f64, lambda_max: f64, std_risk: f64) -> UbLb {
    let lg = (grad_norm_sq > 0.0).then(|| grad_norm_sq.log2());
    UbLb {
        ub: lg
            .filter(|_| lambda_min > DEGENERATE_LAMBDA)
            .map(|g| g - lambda_min.log2()),
        lb: lg.filter(|_| lambda_max > 0.0).map(|g| g - lambda_max.log2()),
        log2_std_risk: (std_risk > 0.0).then(|| std_risk.log2()),
    }
}

pub fn ub_lb_curves(samples: &[SampleDiagnostics]) -> Vec<UbLb> {
    samples
        .iter()
        .map(|d| ub_lb(d.grad_norm_sq, d.lambda_min, d.lambda_max, d.std_risk))
        .collect()
}

/// `(4L(n−1)M/λ_min, same × h_max)`.
pub fn achievable_risk_bound(l_hat: f64, m_hat: f64, n: usize, lambda_min_s: f64, h_max: f64) -> Result<(f64, f64)> {
    if lambda_min_s <= DEGENERATE_LAMBDA {
        return Err(Error::DegenerateSpectrum {
            lambda_min: lambda_min_s,
        });
    }
    let std = 4.0 * l_hat * (n as f64 - 1.0) * m_hat / lambda_min_s;
    Ok((std, std * h_max))
}

/// `ζ(m, k) + 1` with `ζ = 2|y|√(6 log k)/√(m−1) · (1 − 2 log k / m)²`, natural log.
pub fn condition_bound(m: usize, k: usize, y_norm_bound: f64) -> Result<f64> {
    condition_bound_with_base(m, k, y_norm_bound, std::f64::consts::E)
}

pub fn condition_bound_with_base(m: usize, k: usize, y_norm_bound: f64, log_base: f64) -> Result<f64> {
    if k < 2 || m < k + 1 {
        return Err(Error::Range(format!("need k ≥ 2 and m ≥ k + 1, got m={m}, k={k}")));
    }
    if !(log_base > 1.0) {
        return Err(Error::Range(format!("log base {log_base} must exceed 1")));
    }
    let lk = (k as f64).ln() / log_base.ln();
    let m = m as f64;
    let zeta = 2.0 * y_norm_bound * (6.0 * lk).sqrt() / (m - 1.0).sqrt() * (1.0 - 2.0 * lk / m).powi(2);
    Ok(zeta + 1.0)
}

/// Where `condition_bound` stops increasing in `m`: the larger root of
/// `m² − 5cm + 4c = 0` with `c = 2 log k`. The bound rises below this point.
pub fn condition_bound_peak(k: usize, log_base: f64) -> f64 {
    let c = 2.0 * (k as f64).ln() / log_base.ln();
    let disc = (25.0 * c * c - 16.0 * c).max(0.0);
    (5.0 * c + disc.sqrt()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BridgeCheck {
    /// `λ_max` of the expected per-sample loss Hessian.
    pub h_top: f64,
    pub lo: f64,
    pub hi: f64,
    /// `‖∇Φ*(f(x)) − Ȳ|x‖∞`
    pub gap: f64,
}

impl BridgeCheck {
    pub fn holds(&self, rel_slack: f64) -> bool {
        let slack = rel_slack * self.hi.abs();
        self.lo - slack <= self.h_top && self.h_top <= self.hi + slack
    }
}

/// At a fitted point, `λ_min(G)λ_max(A) ≤ λ_max(E[H]) ≤ λ_max(G)λ_max(A)`
/// with `G = ∇²Φ*(f(x))`. The expected Hessian over `Y|x` equals the Hessian
/// at the conditional mean because the loss is affine in `y` apart from
/// `Φ(y)`, which does not depend on `θ`.
pub fn hessian_bridge_check(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    x: &[f64],
    cond_mean: &[f64],
) -> Result<BridgeCheck> {
    let f = forward(spec, theta, x)?;
    let dual = gf.dual_map(&f)?;
    let gap = dual
        .iter()
        .zip(cond_mean)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if gap > 1e-6 {
        return Err(Error::NotConverged { gap });
    }
    let h = loss_hessian(spec, theta, gf, x, cond_mean)?;
    let h_top = top_eigenvalue(&h)?;
    let g_eig = sym_eigenvalues(&gf.phi_star_hessian(&f)?)?;
    let a = crate::net::structure_spectrum(spec, theta, x)?;
    let g_min = g_eig[0].max(0.0);
    let g_max = *g_eig.last().expect("nonempty");
    Ok(BridgeCheck {
        h_top,
        lo: g_min * a.lambda_max,
        hi: g_max * a.lambda_max,
        gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GenCase {
    /// Population risk at least the empirical one.
    PopulationAbove,
    EmpiricalAbove,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetGenBound {
    /// `R(q) − R(q̂)`
    pub gen: f64,
    pub risk_true: f64,
    pub risk_emp: f64,
    pub gamma: f64,
    /// `γ − Ent_Φ(Y'|X') − L_Φ(Y'|f(X'))` on the empirical joint.
    pub bound_case1: f64,
    /// The same on the population joint.
    pub bound_case2: f64,
    pub case: GenCase,
}

impl DetGenBound {
    pub fn applicable(&self) -> f64 {
        match self.case {
            GenCase::PopulationAbove => self.bound_case1,
            GenCase::EmpiricalAbove => self.bound_case2,
        }
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.gen.abs() <= self.applicable() + tol
    }
}

/// Model outputs over a finite input space, looked up by feature key.
pub type ModelEval<'a> = dyn Fn(&FeatureKey) -> Result<Vec<f64>> + Sync + 'a;

/// Joint-level risk `Σ q(x, y) d_Φ(y, f(x))`.
pub fn joint_risk(gf: &GeneratingFunction, model: &ModelEval, joint: &DiscreteJoint) -> Result<f64> {
    let mut r = 0.0;
    for (x, row) in joint.x_support().iter().zip(joint.prob()) {
        let f = model(x)?;
        for (y, p) in joint.y_support().iter().zip(row) {
            if *p > 0.0 {
                r += p * gf.fy_loss(y, &f)?;
            }
        }
    }
    Ok(r)
}

/// Grouping of a joint's inputs by quantized model output.
pub fn output_grouping(model: &ModelEval, joint: &DiscreteJoint) -> Result<HashMap<FeatureKey, FeatureKey>> {
    joint
        .x_support()
        .iter()
        .map(|x| Ok((x.clone(), FeatureKey::quantized(&model(x)?, OUTPUT_DIGITS))))
        .collect()
}

/// `|X| − |f(X)|` under the output quantization.
pub fn model_abs_info_loss(model: &ModelEval, joint: &DiscreteJoint) -> Result<usize> {
    let g = output_grouping(model, joint)?;
    let distinct: std::collections::HashSet<&FeatureKey> = g.values().collect();
    absolute_info_loss(joint.x_support().len(), distinct.len())
}

pub fn det_gen_bound(
    gf: &GeneratingFunction,
    model: &ModelEval,
    train_joint: &DiscreteJoint,
    test_joint: &DiscreteJoint,
) -> Result<DetGenBound> {
    if train_joint.y_dim() != test_joint.y_dim() {
        return Err(Error::Shape("joints differ in target dimension".into()));
    }
    let mut xs: Vec<&FeatureKey> = train_joint.x_support().iter().collect();
    for x in test_joint.x_support() {
        if !xs.contains(&x) {
            xs.push(x);
        }
    }
    let mut ys: Vec<Vec<f64>> = train_joint.y_support().to_vec();
    for y in test_joint.y_support() {
        if !ys.iter().any(|v| v == y) {
            ys.push(y.clone());
        }
    }
    let mut gamma = f64::NEG_INFINITY;
    for x in xs {
        gamma = gamma.max(gamma_at_output(gf, &model(x)?, &ys)?);
    }
    let risk_true = joint_risk(gf, model, test_joint)?;
    let risk_emp = joint_risk(gf, model, train_joint)?;
    let side = |j: &DiscreteJoint| -> Result<f64> {
        let ent = gen_cond_entropy(gf, j)?;
        let loss = relative_info_loss(gf, j, &output_grouping(model, j)?)?;
        Ok(gamma - ent - loss)
    };
    let gen = risk_true - risk_emp;
    Ok(DetGenBound {
        gen,
        risk_true,
        risk_emp,
        gamma,
        bound_case1: side(train_joint)?,
        bound_case2: side(test_joint)?,
        case: if gen >= 0.0 {
            GenCase::PopulationAbove
        } else {
            GenCase::EmpiricalAbove
        },
    })
}

/// `(|X| − L)|Y|γ²(1 − ‖q‖²) / (4nε²)`, capped at 1.
pub fn prob_gen_bound(
    x_card: usize,
    y_card: usize,
    abs_loss: usize,
    gamma: f64,
    q_norm_sq: f64,
    n: usize,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Range(format!("eps must be positive, got {eps}")));
    }
    if abs_loss >= x_card {
        return Err(Error::Range(format!("information loss {abs_loss} with |X| = {x_card}")));
    }
    if !(0.0..=1.0).contains(&q_norm_sq) {
        return Err(Error::Range(format!("‖q‖² = {q_norm_sq} outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::Range("n must be positive".into()));
    }
    let b =
        (x_card - abs_loss) as f64 * y_card as f64 * gamma * gamma * (1.0 - q_norm_sq) / (4.0 * n as f64 * eps * eps);
    Ok(b.min(1.0))
}

/// Empirical `Pr(|R(q) − R(q̂)| ≥ ε)` over `resamples` i.i.d. size-`n`
/// samples from `q`, one counter-based stream per resample.
pub fn monte_carlo_gen(
    gf: &GeneratingFunction,
    model: &ModelEval,
    q: &DiscreteJoint,
    n: usize,
    eps: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 || resamples == 0 {
        return Err(Error::Range("n and resamples must be positive".into()));
    }
    let mut cdf = Vec::new();
    let mut losses = Vec::new();
    let mut acc = 0.0;
    for (x, row) in q.x_support().iter().zip(q.prob()) {
        let f = model(x)?;
        for (y, p) in q.y_support().iter().zip(row) {
            if *p > 0.0 {
                acc += p;
                cdf.push(acc);
                losses.push(gf.fy_loss(y, &f)?);
            }
        }
    }
    let last = cdf.len() - 1;
    cdf[last] = f64::INFINITY;
    let risk_true: f64 = {
        let mut prev = 0.0;
        let mut r = 0.0;
        for (c, l) in cdf.iter().zip(&losses) {
            let p = if c.is_finite() { c - prev } else { acc - prev };
            r += p * l;
            prev = *c;
        }
        r
    };
    let key = CounterRng::new(seed);
    let counts = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.stream(r as u64);
            let mut total = 0.0;
            for _ in 0..n {
                let u = rng.uniform() * acc;
                let c = cdf.partition_point(|&v| v <= u);
                total += losses[c.min(last)];
            }
            let gen = (risk_true - total / n as f64).abs();
            eps.iter().map(|e| (gen >= *e) as u64).collect::<Vec<u64>>()
        })
        .reduce(
            || vec![0u64; eps.len()],
            |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect(),
        );
    Ok(counts.into_iter().map(|c| c as f64 / resamples as f64).collect())
}

/// Worst-case loss over the dataset inputs and every class, for an entropy
/// on the simplex: `max_x (lse f(x) − min_c f_c(x))`.
pub fn simplex_gamma(spec: &NetSpec, theta: &ParamVector, xs: &[Vec<f64>]) -> Result<f64> {
    let mut g = f64::NEG_INFINITY;
    for x in xs {
        let f = forward(spec, theta, x)?;
        let lo = f.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        g = g.max(log_sum_exp(&f) - lo);
    }
    Ok(g)
}

/// Mean `γ_Φ` over `seeds` random directions scaled to each radius. The
/// same directions are reused across radii.
pub fn regularization_gamma_curve(
    spec: &NetSpec,
    gf: &GeneratingFunction,
    data: &Dataset,
    radii: &[f64],
    seeds: usize,
) -> Result<Vec<(f64, f64)>> {
    if !gf.is_simplex_entropy() {
        return Err(Error::Domain("the radius curve needs an entropy on the simplex".into()));
    }
    if seeds == 0 {
        return Err(Error::Range("need at least one direction".into()));
    }
    let xs = data.inputs();
    let zero = ParamVector::zeros(spec);
    let mut max_abs = 0.0f64;
    for x in &xs {
        for v in forward(spec, &zero, x)? {
            max_abs = max_abs.max(v.abs());
        }
    }
    if max_abs != 0.0 {
        return Err(Error::ZeroOutputViolation { max_abs });
    }
    let m = spec.param_count();
    let dirs: Vec<Vec<f64>> = (0..seeds)
        .map(|s| {
            let mut rng = SplitMix64::new(derive_seed(s as u64, 0x7ad));
            let v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let n = norm_sq(&v).sqrt();
            v.into_iter().map(|a| a / n).collect()
        })
        .collect();
    radii
        .iter()
        .map(|&r| {
            let gammas: Vec<f64> = dirs
                .par_iter()
                .map(|d| {
                    let theta = ParamVector::from_theta(spec, d.iter().map(|a| a * r).collect())?;
                    simplex_gamma(spec, &theta, &xs)
                })
                .collect::<Result<_>>()?;
            Ok((r, gammas.iter().sum::<f64>() / seeds as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{one_hot, Sample};
    use crate::info::shannon_quantities;
    use crate::net::{init, Activation, Normalization};
    use approx::assert_abs_diff_eq;

    fn two_sample_linear() -> (NetSpec, ParamVector, Dataset) {
        let spec = NetSpec::linear(2, 2, false);
        let theta = ParamVector::from_theta(&spec, vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        let data = Dataset::new(vec![
            Sample {
                x: vec![1.0, 2.0],
                y: vec![1.0, 0.0],
            },
            Sample {
                x: vec![-1.0, 0.5],
                y: vec![0.0, 1.0],
            },
        ])
        .unwrap();
        (spec, theta, data)
    }

    #[test]
    fn linear_mse_report_matches_hand_computation() {
        let (spec, theta, data) = two_sample_linear();
        let gf = GeneratingFunction::half_squared_norm(2);
        let r = risk_report(&spec, &theta, &gf, &data).unwrap();
        // f(x) = W x by hand
        let f1: [f64; 2] = [0.5 * 1.0 - 0.25 * 2.0, 1.0 * 1.0 + 0.75 * 2.0];
        let f2: [f64; 2] = [-0.5 - 0.25 * 0.5, -1.0 + 0.75 * 0.5];
        let e1 = (f1[0] - 1.0f64).powi(2) + f1[1].powi(2);
        let e2 = f2[0].powi(2) + (f2[1] - 1.0f64).powi(2);
        assert_abs_diff_eq!(r.risk, 0.25 * (e1 + e2), epsilon = 1e-14);
        assert_abs_diff_eq!(r.std_risk, 0.5 * (e1 + e2), epsilon = 1e-14);
        // ‖∇‖² = ‖x‖² ‖f − y‖² for a linear map
        let ge = 0.5 * (5.0 * e1 + 1.25 * e2);
        assert_abs_diff_eq!(r.grad_energy, ge, epsilon = 1e-12);
        assert_abs_diff_eq!(r.lambda_min_s, 1.25, epsilon = 1e-12);
        assert_abs_diff_eq!(r.lambda_max_s, 5.0, epsilon = 1e-12);
        assert_eq!((r.h_min, r.h_max), (1.0, 1.0));
        let g1 = [
            0.5 * (f1[0] - 1.0f64).powi(2) + 0.5 * f1[1].powi(2),
            0.5 * f1[0].powi(2) + 0.5 * (f1[1] - 1.0f64).powi(2),
        ];
        let g2 = [
            0.5 * (f2[0] - 1.0f64).powi(2) + 0.5 * f2[1].powi(2),
            0.5 * f2[0].powi(2) + 0.5 * (f2[1] - 1.0f64).powi(2),
        ];
        let gamma = g1.iter().chain(&g2).fold(0.0f64, |m, v| m.max(*v));
        assert_abs_diff_eq!(r.gamma, gamma, epsilon = 1e-14);
        assert_eq!(r.ent_lower, 0.0);
        let (lb, ub) = mse_sandwich(&r).unwrap();
        assert!(lb <= r.risk && r.risk <= ub);
    }

    #[test]
    fn single_input_collapses_mse_sandwich() {
        let spec = NetSpec::linear(2, 2, false);
        let theta = init(&spec, 3);
        let data = Dataset::new(vec![Sample {
            x: vec![3.0, 4.0],
            y: vec![0.2, -0.1],
        }])
        .unwrap();
        let r = risk_report(&spec, &theta, &GeneratingFunction::half_squared_norm(2), &data).unwrap();
        let (lb, ub) = mse_sandwich(&r).unwrap();
        assert_abs_diff_eq!(lb, r.risk, epsilon = 1e-12);
        assert_abs_diff_eq!(ub, r.risk, epsilon = 1e-12);
    }

    #[test]
    fn perfect_fit_report_is_zero() {
        let (spec, theta, data) = two_sample_linear();
        let gf = GeneratingFunction::simplex_entropy(2);
        let soft = Dataset::new(
            data.samples
                .iter()
                .map(|s| Sample {
                    x: s.x.clone(),
                    y: gf.dual_map(&forward(&spec, &theta, &s.x).unwrap()).unwrap(),
                })
                .collect(),
        )
        .unwrap();
        let r = risk_report(&spec, &theta, &gf, &soft).unwrap();
        assert!(r.risk.abs() < 1e-15);
        assert!(r.grad_energy < 1e-28);
        let (lb, ub) = ce_sandwich(&r).unwrap();
        assert!(lb < 1e-27 && ub < 1e-27);
        let (lb, ub) = mse_sandwich(&r).unwrap();
        assert!(lb < 1e-27 && ub < 1e-27);
    }

    #[test]
    fn uniform_predictor_over_ten_classes() {
        let spec = NetSpec {
            input_dim: 3,
            output_dim: 10,
            width: 4,
            depth_blocks: 1,
            skip: false,
            activation: Activation::Relu,
            normalization: Normalization::None,
            bias: true,
            embed: true,
        };
        let theta = ParamVector::zeros(&spec);
        let data = Dataset::new(
            (0..10)
                .map(|c| Sample {
                    x: vec![c as f64, 1.0, -1.0],
                    y: one_hot(c, 10),
                })
                .collect(),
        )
        .unwrap();
        let r = risk_report(&spec, &theta, &GeneratingFunction::simplex_entropy(10), &data).unwrap();
        assert_abs_diff_eq!(r.risk, 10f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_min.unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(r.gamma, 10f64.ln(), epsilon = 1e-12);
        assert!(r.ent_lower <= 10f64.ln());
        assert!(r.fitting_holds(1e-9));
    }

    #[test]
    fn confident_wrong_prediction_keeps_ce_sandwich() {
        let spec = NetSpec::linear(1, 2, true);
        // logits (7, −7) → p ≈ (1 − 8e-7, 8.3e-7), label is class 1
        let theta = ParamVector::from_theta(&spec, vec![7.0, -7.0, 0.0, 0.0]).unwrap();
        let data = Dataset::new(vec![Sample {
            x: vec![1.0],
            y: one_hot(1, 2),
        }])
        .unwrap();
        let r = risk_report(&spec, &theta, &GeneratingFunction::simplex_entropy(2), &data).unwrap();
        assert!(r.p_min.unwrap() < 1e-6);
        let (lb, ub) = ce_sandwich(&r).unwrap();
        assert!(lb <= r.risk && r.risk <= ub);
        assert!(ub > 1e5);
        let (lb, ub) = r.risk_sandwich().unwrap();
        assert!(lb <= r.risk && r.risk <= ub);
    }

    #[test]
    fn ub_lb_examples() {
        let c = ub_lb(4.0, 1.0, 2.0, 3.0);
        assert_eq!(c.ub, Some(2.0));
        assert_eq!(c.lb, Some(1.0));
        assert_abs_diff_eq!(c.log2_std_risk.unwrap(), 3f64.log2(), epsilon = 1e-15);
        assert_eq!(c.holds(1e-6), Some(true));
        let c = ub_lb(8.0, 2.0, 2.0, 4.0);
        assert_eq!((c.ub, c.lb, c.log2_std_risk), (Some(2.0), Some(2.0), Some(2.0)));
        let c = ub_lb(8.0, 0.0, 2.0, 4.0);
        assert_eq!(c.ub, None);
    }

    #[test]
    fn achievable_bound_examples() {
        assert_eq!(achievable_risk_bound(1.0, 0.0, 17, 0.5, 2.0).unwrap(), (0.0, 0.0));
        let (s, r) = achievable_risk_bound(1.0, 0.01, 17, 0.5, 2.0).unwrap();
        assert_abs_diff_eq!(s, 1.28, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 2.56, epsilon = 1e-12);
        assert!(achievable_risk_bound(1.0, 0.01, 17, 0.0, 2.0).is_err());
    }

    #[test]
    fn condition_bound_examples() {
        let b = condition_bound(10001, 10, 1.0).unwrap();
        let expected = 1.0 + 2.0 * (6.0 * 10f64.ln()).sqrt() / 100.0 * (1.0 - 2.0 * 10f64.ln() / 10001.0).powi(2);
        assert_abs_diff_eq!(b, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(b, 1.0743, epsilon = 1e-4);
        assert!(condition_bound(100_000_000, 10, 1.0).unwrap() - 1.0 < 1e-3);
        assert!(condition_bound(10, 10, 1.0).is_err());
        assert!(condition_bound(10, 1, 1.0).is_err());
    }

    #[test]
    fn condition_bound_rises_before_its_peak() {
        let peak = condition_bound_peak(10, std::f64::consts::E);
        assert!((22.0..23.0).contains(&peak), "{peak}");
        // below the peak the bound increases with m
        assert!(condition_bound(13, 10, 1.0).unwrap() < condition_bound(14, 10, 1.0).unwrap());
        // beyond it, it decreases on a fine grid
        let start = peak.ceil() as usize;
        let mut prev = condition_bound(start, 10, 1.0).unwrap();
        for m in start + 1..start + 5000 {
            let b = condition_bound(m, 10, 1.0).unwrap();
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn condition_bound_increases_with_k() {
        for m in [1000, 10_000, 100_000] {
            let mut prev = 0.0;
            for k in 2..50 {
                let b = condition_bound(m, k, 1.0).unwrap();
                assert!(b > prev);
                prev = b;
            }
        }
    }

    #[test]
    fn prob_bound_examples() {
        assert_eq!(prob_gen_bound(4, 2, 0, 1.0, 1.0, 100, 0.3).unwrap(), 0.0);
        let b = prob_gen_bound(4, 2, 0, 1.0, 0.25, 100, 0.3).unwrap();
        assert_abs_diff_eq!(b, 6.0 / 36.0, epsilon = 1e-12);
        assert_eq!(prob_gen_bound(4, 2, 0, 10.0, 0.25, 1, 0.01).unwrap(), 1.0);
        assert!(prob_gen_bound(4, 2, 4, 1.0, 0.25, 100, 0.3).is_err());
        assert!(prob_gen_bound(4, 2, 0, 1.0, 0.25, 100, 0.0).is_err());
        assert!(prob_gen_bound(4, 2, 0, 1.0, 1.5, 100, 0.3).is_err());
    }

    #[test]
    fn prob_bound_monotonicity_grid() {
        let base = |n: usize, eps: f64, g: f64| prob_gen_bound(6, 3, 1, g, 0.2, n, eps).unwrap();
        for &n in &[500usize, 1000, 5000] {
            for &eps in &[0.2, 0.4, 0.8] {
                for &g in &[0.5, 1.0, 1.5] {
                    let b = base(n, eps, g);
                    assert!(base(n * 2, eps, g) <= b);
                    assert!(base(n, eps * 1.5, g) <= b);
                    assert!(base(n, eps, g * 1.2) >= b);
                }
            }
        }
    }

    fn table_model(outputs: HashMap<FeatureKey, Vec<f64>>) -> impl Fn(&FeatureKey) -> Result<Vec<f64>> + Sync {
        move |k: &FeatureKey| {
            outputs
                .get(k)
                .cloned()
                .ok_or_else(|| Error::MissingKey(format!("{k:?}")))
        }
    }

    fn two_by_two() -> (DiscreteJoint, DiscreteJoint) {
        let xs = vec![FeatureKey::from_index(0), FeatureKey::from_index(1)];
        let ys = vec![one_hot(0, 2), one_hot(1, 2)];
        let q = DiscreteJoint::new(xs.clone(), ys.clone(), vec![vec![0.3, 0.2], vec![0.1, 0.4]]).unwrap();
        let qh = DiscreteJoint::new(xs, ys, vec![vec![0.5, 0.0], vec![0.25, 0.25]]).unwrap();
        (qh, q)
    }

    #[test]
    fn identical_joints_have_zero_gap() {
        let (qh, _) = two_by_two();
        let gf = GeneratingFunction::simplex_entropy(2);
        let m = table_model(
            qh.x_support()
                .iter()
                .cloned()
                .zip([vec![0.3, -0.2], vec![1.0, 0.0]])
                .collect(),
        );
        let d = det_gen_bound(&gf, &m, &qh, &qh).unwrap();
        assert_eq!(d.gen, 0.0);
        assert!(d.holds(1e-9));
    }

    #[test]
    fn constant_model_gap_is_entropy_difference() {
        let (qh, q) = two_by_two();
        let gf = GeneratingFunction::simplex_entropy(2);
        let logits = vec![0.4, -0.1];
        let m = table_model(qh.x_support().iter().map(|x| (x.clone(), logits.clone())).collect());
        let d = det_gen_bound(&gf, &m, &qh, &q).unwrap();
        // constant prediction p: R = CE(q_Y, p); differences are label-marginal only
        let p = crate::convex::softmax(&logits);
        let ce = |qy: &[f64]| -(qy[0] * p[0].ln() + qy[1] * p[1].ln());
        assert_abs_diff_eq!(d.gen, ce(&[0.4, 0.6]) - ce(&[0.75, 0.25]), epsilon = 1e-12);
        // hand check of the bound terms: both groupings collapse to one group
        let gamma = -(p[1].ln());
        assert_abs_diff_eq!(d.gamma, gamma, epsilon = 1e-12);
        let s = shannon_quantities(&qh).unwrap();
        // γ − H(Y'|X') − I(Y';X') = γ − H(Y')
        assert_abs_diff_eq!(d.bound_case1, gamma - s.h_y, epsilon = 1e-12);
        assert!(d.holds(1e-9));
    }

    #[test]
    fn classification_form_matches() {
        let (qh, q) = two_by_two();
        let gf = GeneratingFunction::simplex_entropy(2);
        let outs = vec![vec![0.8, -0.3], vec![-0.5, 0.9]];
        let m = table_model(qh.x_support().iter().cloned().zip(outs.clone()).collect());
        let d = det_gen_bound(&gf, &m, &qh, &q).unwrap();
        let p_min = outs
            .iter()
            .flat_map(|o| crate::convex::softmax(o))
            .fold(1.0f64, f64::min);
        let s = shannon_quantities(&qh).unwrap();
        let loss = relative_info_loss(&gf, &qh, &output_grouping(&m, &qh).unwrap()).unwrap();
        let cor = (1.0 / p_min).ln() - s.h_y + s.mi - loss;
        assert_abs_diff_eq!(d.bound_case1, cor, epsilon = 1e-10);
    }

    #[test]
    fn monte_carlo_point_mass_never_deviates() {
        let q = DiscreteJoint::new(vec![FeatureKey::from_index(0)], vec![one_hot(0, 2)], vec![vec![1.0]]).unwrap();
        let gf = GeneratingFunction::simplex_entropy(2);
        let m = table_model([(FeatureKey::from_index(0), vec![0.0, 0.0])].into_iter().collect());
        let p = monte_carlo_gen(&gf, &m, &q, 10, &[1e-9], 200, 1).unwrap();
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let (_, q) = two_by_two();
        let gf = GeneratingFunction::simplex_entropy(2);
        let m = table_model(
            q.x_support()
                .iter()
                .cloned()
                .zip([vec![0.3, -0.2], vec![1.0, 0.0]])
                .collect(),
        );
        let a = monte_carlo_gen(&gf, &m, &q, 50, &[0.05, 0.1], 2000, 4).unwrap();
        let b = monte_carlo_gen(&gf, &m, &q, 50, &[0.05, 0.1], 2000, 4).unwrap();
        assert_eq!(a, b);
        assert!(a[0] >= a[1]);
    }

    fn radius_setup() -> (NetSpec, Dataset) {
        let spec = NetSpec {
            input_dim: 4,
            output_dim: 10,
            width: 6,
            depth_blocks: 1,
            skip: false,
            activation: Activation::Tanh,
            normalization: Normalization::None,
            bias: true,
            embed: true,
        };
        let data = crate::data::GaussianClusters {
            n: 20,
            classes: 10,
            dim: 4,
            separation: 1.0,
            noise: 0.5,
            seed: 2,
        }
        .generate()
        .unwrap();
        (spec, data)
    }

    #[test]
    fn radius_zero_gives_log_classes() {
        let (spec, data) = radius_setup();
        let gf = GeneratingFunction::simplex_entropy(10);
        let c = regularization_gamma_curve(&spec, &gf, &data, &[0.0, 0.1, 0.5, 1.0], 8).unwrap();
        assert!((c[0].1 - 10f64.ln()).abs() <= 1e-12);
        for w in c.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn quadratic_envelope_for_centered_linear_logits() {
        // W = [w; −w] so f = (w·x, −w·x) and Φ*(f) − Φ*(0) = ln cosh(w·x)
        let spec = NetSpec::linear(3, 2, false);
        let gf = GeneratingFunction::simplex_entropy(2);
        let x = [0.5, -1.0, 2.0];
        let xn = norm_sq(&x);
        let mut rng = SplitMix64::new(17);
        for _ in 0..50 {
            let w: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let wn = norm_sq(&w).sqrt();
            let t_dir: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / wn;
            let rmax = 2.0;
            // on ‖w‖ ≤ rmax: ln cosh t ≥ t²/(2 cosh²(t_max)) gives a > 0
            let a = t_dir * t_dir / (4.0 * (t_dir.abs() * rmax).cosh().powi(2));
            let b = xn / 4.0;
            for i in 1..=20 {
                let r = rmax * i as f64 / 20.0;
                let ws: Vec<f64> = w.iter().map(|v| v / wn * r).collect();
                let theta =
                    ParamVector::from_theta(&spec, ws.iter().copied().chain(ws.iter().map(|v| -v)).collect()).unwrap();
                let f = forward(&spec, &theta, &x).unwrap();
                let diff = gf.conjugate(&f).unwrap().value - gf.conjugate(&[0.0, 0.0]).unwrap().value;
                let tn = norm_sq(&theta.theta);
                assert!(a * tn <= diff + 1e-12, "lower: {} > {}", a * tn, diff);
                assert!(diff <= b * tn + 1e-12, "upper: {} > {}", diff, b * tn);
            }
        }
    }

    #[test]
    fn radius_curve_rejects_nonzero_origin() {
        let (spec, data) = radius_setup();
        assert!(
            regularization_gamma_curve(&spec, &GeneratingFunction::half_squared_norm(10), &data, &[0.0], 1).is_err()
        );
    }

    #[test]
    fn bridge_on_fitted_linear_models() {
        // quadratic Φ: any point is a fit for the target f(x)
        let spec = NetSpec::linear(3, 2, true);
        let theta = init(&spec, 5);
        let x = [0.2, -0.4, 1.0];
        let gf = GeneratingFunction::half_squared_norm(2);
        let f = forward(&spec, &theta, &x).unwrap();
        let b = hessian_bridge_check(&spec, &theta, &gf, &x, &f).unwrap();
        assert_abs_diff_eq!(b.lo, b.hi, epsilon = 1e-12);
        assert!((b.h_top - b.hi).abs() <= 1e-6 * b.hi);

        let gf = GeneratingFunction::simplex_entropy(2);
        let zero = ParamVector::zeros(&spec);
        let b = hessian_bridge_check(&spec, &zero, &gf, &x, &[0.5, 0.5]).unwrap();
        assert_eq!(b.lo, 0.0);
        let a = crate::net::structure_spectrum(&spec, &zero, &x).unwrap();
        assert_abs_diff_eq!(b.hi, 0.5 * a.lambda_max, epsilon = 1e-12);
        assert!(b.holds(1e-3));
        assert!(matches!(
            hessian_bridge_check(&spec, &zero, &gf, &x, &[0.6, 0.4]),
            Err(Error::NotConverged { .. })
        ));
    }
}
