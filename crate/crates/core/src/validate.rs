//! Randomized invariant suites. `validate` runs them at small sizes; the
//! acceptance harness runs the same code at full size.

use serde::Serialize;

use crate::bounds::{
    condition_bound, det_gen_bound, joint_risk, model_abs_info_loss, monte_carlo_gen, prob_gen_bound,
    regularization_gamma_curve, risk_report,
};
use crate::convex::{log_sum_exp, softmax, GeneratingFunction, OmegaKind};
use crate::data::{one_hot, Dataset, GaussianClusters, Sample};
use crate::error::{Error, Result};
use crate::experiments::spearman;
use crate::info::{gen_cond_entropy, DiscreteJoint, FeatureKey};
use crate::linalg::{dot, norm_sq};
use crate::net::{forward, init, jacobian, Activation, NetSpec, Normalization};
use crate::optim::{sample_loss, sample_terms_with_jacobian};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed value of the checked error metric.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} cases, {} failures, worst {:.3e} (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.failures,
            self.worst,
            self.tolerance
        )
    }
}

/// Accumulates one error metric against a tolerance.
struct Tally {
    name: &'static str,
    tol: f64,
    cases: usize,
    failures: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str, tol: f64) -> Self {
        Self {
            name,
            tol,
            cases: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        if !(err <= self.tol) {
            self.failures += 1;
        }
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
    }

    fn fail(&mut self) {
        self.cases += 1;
        self.failures += 1;
        self.worst = f64::INFINITY;
    }

    fn done(self) -> CheckResult {
        CheckResult {
            name: self.name.into(),
            cases: self.cases,
            failures: self.failures,
            worst: self.worst,
            tolerance: self.tol,
        }
    }
}

fn random_simplex(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|a| a / s).collect()
}

fn kl_nats(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Closed form of `½‖·‖²` restricted to `Σy = 1`: `y* = ν − λ1` with `λ = (Σν − 1)/d`.
fn quadratic_hyperplane_conjugate(nu: &[f64]) -> f64 {
    let d = nu.len() as f64;
    let lambda = (nu.iter().sum::<f64>() - 1.0) / d;
    let y: Vec<f64> = nu.iter().map(|v| v - lambda).collect();
    dot(&y, nu) - 0.5 * norm_sq(&y)
}

/// Fenchel-Young nonnegativity, dual-pair zeros, Newton against closed forms,
/// the KL identity, Pinsker (bits) and the chi-square KL ceiling.
pub fn convex_identity_suite(cases: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = SplitMix64::new(derive_seed(seed, 100));
    let mut nonneg = Tally::new("fy_nonnegativity", 1e-10);
    let mut zero = Tally::new("dual_pair_zero_loss", 1e-8);
    let mut newton = Tally::new("newton_vs_closed_form", 1e-8);
    let mut kl = Tally::new("kl_identity", 1e-9);
    let mut pinsker = Tally::new("pinsker_bits", 0.0);
    let mut kl_upper = Tally::new("kl_chi_square_ceiling", 0.0);
    let kinds = [
        OmegaKind::HalfSquaredNorm,
        OmegaKind::NegativeShannonEntropy,
        OmegaKind::UnnormalizedEntropy,
    ];
    for i in 0..cases {
        let kind = kinds[i % 3];
        let dim = [2, 10, 100][(i / 3) % 3];
        let on_simplex = (i / 9) % 2 == 1;
        let scale = 0.1 + 3.0 * rng.uniform();
        let nu: Vec<f64> = (0..dim).map(|_| scale * rng.normal()).collect();
        let gf = if on_simplex {
            GeneratingFunction::with_kind_on_simplex(kind, dim)
        } else {
            GeneratingFunction::new(kind, dim, None).expect("valid")
        };
        let y: Vec<f64> = if on_simplex {
            random_simplex(&mut rng, dim)
        } else if kind.is_entropy() {
            (0..dim).map(|_| 0.01 + 2.0 * rng.uniform()).collect()
        } else {
            (0..dim).map(|_| rng.normal()).collect()
        };
        match gf.fy_loss(&y, &nu) {
            Ok(l) => nonneg.record((-l).max(0.0)),
            Err(_) => nonneg.fail(),
        }
        match gf.dual_map(&nu).and_then(|mu| gf.fy_loss(&mu, &nu)) {
            Ok(l) => zero.record(l.abs()),
            Err(_) => zero.fail(),
        }
        if on_simplex {
            let closed = match kind {
                OmegaKind::HalfSquaredNorm => quadratic_hyperplane_conjugate(&nu),
                OmegaKind::NegativeShannonEntropy => log_sum_exp(&nu),
                OmegaKind::UnnormalizedEntropy => 1.0 + log_sum_exp(&nu),
            };
            match gf.conjugate_newton(&nu) {
                Ok(c) => newton.record((c.value - closed).abs() / closed.abs().max(1.0)),
                Err(_) => newton.fail(),
            }
            if kind == OmegaKind::NegativeShannonEntropy {
                // generic Φ + Φ* − ⟨y, ν⟩ through the Newton solve against KL(y ‖ softmax ν)
                let generic = gf
                    .eval_target(&y)
                    .and_then(|p| Ok(p + gf.conjugate_newton(&nu)?.value - dot(&y, &nu)));
                match generic {
                    Ok(g) => kl.record((g - kl_nats(&y, &softmax(&nu))).abs()),
                    Err(_) => kl.fail(),
                }
                let p = random_simplex(&mut rng, dim);
                let q = random_simplex(&mut rng, dim);
                let d_bits = kl_nats(&p, &q) / std::f64::consts::LN_2;
                let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
                pinsker.record((l1 * l1 / (2.0 * std::f64::consts::LN_2) - d_bits).max(0.0));
                let l2: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                let qmin = q.iter().fold(f64::INFINITY, |m, v| m.min(*v));
                kl_upper.record((kl_nats(&p, &q) - l2 / qmin).max(0.0));
            }
        }
    }
    vec![
        nonneg.done(),
        zero.done(),
        newton.done(),
        kl.done(),
        pinsker.done(),
        kl_upper.done(),
    ]
}

/// A random small network; `smooth` restricts to differentiable activations.
pub fn random_net(rng: &mut SplitMix64, smooth: bool) -> NetSpec {
    let acts = if smooth {
        &[Activation::Tanh, Activation::Identity][..]
    } else {
        &[Activation::Tanh, Activation::Identity, Activation::Relu][..]
    };
    NetSpec {
        input_dim: 1 + rng.below(4),
        output_dim: 2 + rng.below(3),
        width: 2 + rng.below(5),
        depth_blocks: rng.below(3),
        skip: rng.below(2) == 1,
        activation: acts[rng.below(acts.len())],
        normalization: if rng.below(2) == 1 {
            Normalization::LayerNorm
        } else {
            Normalization::None
        },
        bias: rng.below(4) != 0,
        embed: true,
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Jacobians and per-sample gradients against central differences, and the
/// gradient-energy identity `‖∇‖² = rᵀ A_x r`.
pub fn gradient_suite(nets: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::new(derive_seed(seed, 200));
    let mut jac = Tally::new("jacobian_vs_central_difference", 1e-5);
    let mut grad = Tally::new("sample_gradient_vs_central_difference", 1e-5);
    let mut energy = Tally::new("gradient_energy_identity", 1e-8);
    let h = 1e-5;
    for i in 0..nets {
        let spec = random_net(&mut rng, true);
        let theta = init(&spec, rng.next_u64());
        let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
        let gf = if i % 2 == 0 {
            GeneratingFunction::simplex_entropy(spec.output_dim)
        } else {
            GeneratingFunction::half_squared_norm(spec.output_dim)
        };
        let y = if i % 2 == 0 {
            one_hot(rng.below(spec.output_dim), spec.output_dim)
        } else {
            (0..spec.output_dim).map(|_| rng.normal()).collect()
        };
        let j = jacobian(&spec, &theta, &x)?;
        let m = theta.len();
        let mut fd_j = vec![0.0; spec.output_dim * m];
        let mut fd_g = vec![0.0; m];
        for p in 0..m {
            let mut plus = theta.clone();
            plus.theta[p] += h;
            let mut minus = theta.clone();
            minus.theta[p] -= h;
            let fp = forward(&spec, &plus, &x)?;
            let fm = forward(&spec, &minus, &x)?;
            for k in 0..spec.output_dim {
                fd_j[k * m + p] = (fp[k] - fm[k]) / (2.0 * h);
            }
            fd_g[p] = (sample_loss(&spec, &plus, &gf, &x, &y)? - sample_loss(&spec, &minus, &gf, &x, &y)?) / (2.0 * h);
        }
        jac.record(rel_err(j.as_slice(), &fd_j));
        let (t, _) = sample_terms_with_jacobian(&spec, &theta, &gf, &x, &y)?;
        grad.record(rel_err(&t.grad, &fd_g));
    }
    // the identity is exact, so kinked activations are fine here
    for i in 0..nets {
        let spec = random_net(&mut rng, false);
        let theta = init(&spec, rng.next_u64());
        let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
        let gf = if i % 2 == 0 {
            GeneratingFunction::simplex_entropy(spec.output_dim)
        } else {
            GeneratingFunction::half_squared_norm(spec.output_dim)
        };
        let y = one_hot(rng.below(spec.output_dim), spec.output_dim);
        let (t, j) = sample_terms_with_jacobian(&spec, &theta, &gf, &x, &y)?;
        let a = j.gram_rows();
        let ar = a.matvec(&t.residual);
        let quad = dot(&t.residual, &ar);
        let gn = norm_sq(&t.grad);
        energy.record((gn - quad).abs() / gn.abs().max(1e-300).max(quad.abs()).max(1e-12));
    }
    Ok(vec![jac.done(), grad.done(), energy.done()])
}

/// Risk sandwiches and fitting bounds at random parameters of random nets.
pub fn sandwich_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::new(derive_seed(seed, 300));
    let mut log_sw = Tally::new("std_risk_sandwich", 1e-6);
    let mut risk_sw = Tally::new("risk_sandwich", 1e-6);
    let mut fit = Tally::new("fitting_bounds", 1e-9);
    for i in 0..instances {
        let spec = random_net(&mut rng, false);
        let mut theta = init(&spec, rng.next_u64());
        let s = 0.5 + 2.0 * rng.uniform();
        theta.theta.iter_mut().for_each(|t| *t *= s);
        let n = 2 + rng.below(6);
        let data = Dataset::new(
            (0..n)
                .map(|_| Sample {
                    x: (0..spec.input_dim).map(|_| rng.normal()).collect(),
                    y: one_hot(rng.below(spec.output_dim), spec.output_dim),
                })
                .collect(),
        )?;
        let gf = if i % 2 == 0 {
            GeneratingFunction::simplex_entropy(spec.output_dim)
        } else {
            GeneratingFunction::half_squared_norm(spec.output_dim)
        };
        let r = risk_report(&spec, &theta, &gf, &data)?;
        if let Some((lb, ub)) = r.std_sandwich() {
            log_sw.record((lb - r.std_risk).max(r.std_risk - ub).max(0.0) / r.std_risk.max(1e-300).max(1.0));
        }
        if let Some((lb, ub)) = r.risk_sandwich() {
            risk_sw.record((lb - r.risk).max(r.risk - ub).max(0.0));
        }
        for d in &r.samples {
            if let Some((lb, ub)) = r.sample_risk_sandwich(d) {
                risk_sw.record((lb - d.loss).max(d.loss - ub).max(0.0));
            }
        }
        fit.record((r.ent_lower - r.risk).max(r.risk - r.gamma).max(0.0));
    }
    Ok(vec![log_sw.done(), risk_sw.done(), fit.done()])
}

/// Random joint over `nx × ny` with one-hot targets; cells are zero with
/// probability `sparsity`, but every row keeps at least one positive cell.
pub fn random_joint(rng: &mut SplitMix64, nx: usize, ny: usize, sparsity: f64) -> Result<DiscreteJoint> {
    let mut w: Vec<Vec<f64>> = (0..nx)
        .map(|_| {
            let mut row: Vec<f64> = (0..ny)
                .map(|_| {
                    if rng.uniform() < sparsity {
                        0.0
                    } else {
                        0.05 + rng.uniform()
                    }
                })
                .collect();
            if row.iter().all(|v| *v == 0.0) {
                row[rng.below(ny)] = 0.05 + rng.uniform();
            }
            row
        })
        .collect();
    let total: f64 = w.iter().flatten().sum();
    w.iter_mut().flatten().for_each(|v| *v /= total);
    DiscreteJoint::new(
        (0..nx as u64).map(FeatureKey::from_index).collect(),
        (0..ny).map(|c| one_hot(c, ny)).collect(),
        w,
    )
}

/// Empirical joint of `n` draws from `q`.
pub fn empirical_from(rng: &mut SplitMix64, q: &DiscreteJoint, n: usize) -> Result<DiscreteJoint> {
    let mut cells = Vec::new();
    let mut cdf = Vec::new();
    let mut acc = 0.0;
    for (x, row) in q.x_support().iter().zip(q.prob()) {
        for (y, p) in q.y_support().iter().zip(row) {
            if *p > 0.0 {
                acc += p;
                cdf.push(acc);
                cells.push((x.clone(), y.clone()));
            }
        }
    }
    let pairs: Vec<(FeatureKey, Vec<f64>)> = (0..n)
        .map(|_| {
            let u = rng.uniform() * acc;
            let c = cdf.partition_point(|&v| v <= u).min(cells.len() - 1);
            cells[c].clone()
        })
        .collect();
    DiscreteJoint::from_samples(&pairs)
}

fn key_index(k: &FeatureKey) -> Result<usize> {
    let bytes: [u8; 8] =
        k.0.as_slice()
            .try_into()
            .map_err(|_| Error::MissingKey(format!("{k:?}")))?;
    Ok(u64::from_le_bytes(bytes) as usize)
}

/// Deterministic generalization bounds on random (population, model,
/// sample) triples with `|X| ≤ 8` and `|Y| ≤ 4`.
pub fn det_gen_suite(triples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = SplitMix64::new(derive_seed(seed, 400));
    let mut t = Tally::new("deterministic_generalization_bound", 1e-9);
    for _ in 0..triples {
        let nx = 1 + rng.below(8);
        let ny = 2 + rng.below(3);
        let q = random_joint(&mut rng, nx, ny, 0.3)?;
        let draws = 1 + rng.below(30);
        let qh = empirical_from(&mut rng, &q, draws)?;
        // a small pool of outputs so that several inputs can share one
        let pool: Vec<Vec<f64>> = (0..1 + rng.below(nx))
            .map(|_| (0..ny).map(|_| 2.0 * rng.normal()).collect())
            .collect();
        let table: Vec<Vec<f64>> = (0..nx).map(|_| pool[rng.below(pool.len())].clone()).collect();
        let model = |k: &FeatureKey| -> Result<Vec<f64>> { Ok(table[key_index(k)?].clone()) };
        let gf = GeneratingFunction::simplex_entropy(ny);
        let d = det_gen_bound(&gf, &model, &qh, &q)?;
        t.record((d.gen.abs() - d.applicable()).max(0.0));
    }
    Ok(t.done())
}

/// `R − Ent_Φ(Y'|X')` for a table model predicting each conditional mean.
pub fn table_model_gap(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(derive_seed(seed, 500));
    let q = random_joint(&mut rng, 5, 3, 0.0)?;
    let means = q.conditional_mean_rows();
    let model = |k: &FeatureKey| -> Result<Vec<f64>> { Ok(means[key_index(k)?].iter().map(|p| p.ln()).collect()) };
    let gf = GeneratingFunction::simplex_entropy(3);
    Ok(joint_risk(&gf, &model, &q)? - gen_cond_entropy(&gf, &q)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub eps: f64,
    pub empirical: f64,
    pub analytic: f64,
}

/// Monte Carlo `Pr(|gen| ≥ ε)` against the analytic bound on a fixed
/// `|X| = 2, |Y| = 2, n = 1000` instance.
pub fn monte_carlo_suite(resamples: usize, eps: &[f64], seed: u64) -> Result<Vec<McRow>> {
    let xs: Vec<FeatureKey> = (0..2).map(FeatureKey::from_index).collect();
    let ys = vec![one_hot(0, 2), one_hot(1, 2)];
    let q = DiscreteJoint::new(xs, ys, vec![vec![0.3, 0.2], vec![0.1, 0.4]])?;
    let table = [vec![0.4, -0.4], vec![-0.7, 0.7]];
    let model = |k: &FeatureKey| -> Result<Vec<f64>> { Ok(table[key_index(k)?].clone()) };
    let gf = GeneratingFunction::simplex_entropy(2);
    let n = 1000;
    let gamma = table
        .iter()
        .map(|l| {
            let lse = log_sum_exp(l);
            l.iter().map(|v| lse - v).fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let abs_loss = model_abs_info_loss(&model, &q)?;
    let emp = monte_carlo_gen(&gf, &model, &q, n, eps, resamples, seed)?;
    eps.iter()
        .zip(emp)
        .map(|(&e, p)| {
            Ok(McRow {
                eps: e,
                empirical: p,
                analytic: prob_gen_bound(2, 2, abs_loss, gamma, q.norm_sq(), n, e)?,
            })
        })
        .collect()
}

/// `(radius, γ)` points and their Spearman correlation.
pub type RadiusCurve = (Vec<(f64, f64)>, Option<f64>);

/// Radius curve on a bias-free tanh net: monotone trend and `ln|Y|` at zero.
pub fn radius_suite(seed: u64) -> Result<RadiusCurve> {
    let spec = NetSpec {
        input_dim: 4,
        output_dim: 10,
        width: 8,
        depth_blocks: 1,
        skip: false,
        activation: Activation::Tanh,
        normalization: Normalization::None,
        bias: false,
        embed: true,
    };
    let data = GaussianClusters {
        n: 20,
        classes: 10,
        dim: 4,
        separation: 1.0,
        noise: 0.5,
        seed,
    }
    .generate()?;
    let radii: Vec<f64> = (0..=20).map(|i| i as f64 * 0.25).collect();
    let curve = regularization_gamma_curve(&spec, &GeneratingFunction::simplex_entropy(10), &data, &radii, 16)?;
    let (r, g): (Vec<f64>, Vec<f64>) = curve.iter().copied().unzip();
    let rho = spearman(&r, &g)?;
    Ok((curve, rho))
}

/// `condition_bound` decreasing in `m` on a grid starting past its peak.
pub fn condition_suite() -> Result<CheckResult> {
    let mut t = Tally::new("condition_bound_decreasing", 0.0);
    for k in [2usize, 10, 100] {
        let start = crate::bounds::condition_bound_peak(k, std::f64::consts::E).ceil() as usize;
        let start = start.max(k + 1);
        let mut prev = condition_bound(start, k, 1.0)?;
        let mut m = start;
        while m < 10_000_000 {
            m = (m as f64 * 1.3).ceil() as usize;
            let b = condition_bound(m, k, 1.0)?;
            t.record((b - prev).max(0.0));
            prev = b;
        }
    }
    Ok(t.done())
}

/// The `validate` subcommand: every suite at a size that runs in seconds.
pub fn quick_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = convex_identity_suite(2000, seed);
    out.extend(gradient_suite(20, seed)?);
    out.extend(sandwich_suite(40, seed)?);
    out.push(det_gen_suite(100, seed)?);
    out.push(condition_suite()?);
    let mut gap = Tally::new("table_model_equality", 1e-9);
    for s in 0..5 {
        gap.record(table_model_gap(seed.wrapping_add(s))?.abs());
    }
    out.push(gap.done());
    let mut mc = Tally::new("monte_carlo_below_analytic", 0.0);
    for row in monte_carlo_suite(20_000, &[0.05, 0.1, 0.2], seed)? {
        mc.record((row.empirical - row.analytic).max(0.0));
    }
    out.push(mc.done());
    let (curve, rho) = radius_suite(seed)?;
    let mut radius = Tally::new("radius_curve_origin_and_trend", 1e-12);
    radius.record((curve[0].1 - 10f64.ln()).abs());
    radius.record(if rho.is_some_and(|r| r >= 0.9) { 0.0 } else { 1.0 });
    out.push(radius.done());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for c in quick_suite(0).unwrap() {
            assert!(c.passed(), "{}", c.line());
        }
    }

    #[test]
    fn empirical_joint_sums_to_one() {
        let mut rng = SplitMix64::new(1);
        let q = random_joint(&mut rng, 4, 3, 0.5).unwrap();
        let e = empirical_from(&mut rng, &q, 17).unwrap();
        let total: f64 = e.prob().iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for x in e.x_support() {
            assert!(q.x_support().contains(x));
        }
    }

    #[test]
    fn table_model_reaches_the_entropy() {
        assert!(table_model_gap(3).unwrap().abs() < 1e-9);
    }

    #[test]
    fn failing_tally_reports_failure() {
        let mut t = Tally::new("x", 1e-3);
        t.record(1.0);
        t.record(f64::NAN);
        let r = t.done();
        assert_eq!(r.failures, 2);
        assert!(!r.passed());
        assert!(r.line().starts_with("FAIL"));
    }
}
