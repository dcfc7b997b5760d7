//! Mini-batch SGD with heavy-ball momentum, coupled weight decay and an
//! optional cosine schedule, instrumented with the quantities the
//! convergence analysis needs: batch gradient norms, gradient energy and
//! out-of-batch risk before and after every update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::GeneratingFunction;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{norm_sq, Mat};
use crate::net::{backward, forward, forward_tape, jacobian_from_tape, NetSpec, ParamVector};
use crate::rng::{CounterRng, SplitMix64};

pub const POWER_ITERATIONS: usize = 50;
pub const POWER_REL_TOL: f64 = 1e-6;
pub const HVP_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_true")]
    pub cosine_anneal: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_true() -> bool {
    true
}

impl SgdConfig {
    /// Vanilla SGD: constant step, no momentum, no decay.
    pub fn theorem(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            lr0: lr,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size,
            epochs,
            cosine_anneal: false,
            seed,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |field: &str, message: String| Error::Validation {
            field: field.into(),
            message,
        };
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(bad("lr0", format!("must be finite and nonnegative, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(bad(
                "batch_size",
                format!("must lie in 1..={n}, got {}", self.batch_size),
            ));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    /// `lr0 (1 + cos(π t / T)) / 2` when annealing, else `lr0`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        if self.cosine_anneal && total > 0 {
            self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
        } else {
            self.lr0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub batch_indices: Vec<usize>,
    pub batch_loss: f64,
    pub batch_grad_norm_sq: f64,
    /// Mean squared per-sample gradient norm over the full set; logged steps only.
    pub grad_energy: Option<f64>,
    /// `None` when the batch covers the whole set.
    pub out_batch_risk_before: Option<f64>,
    pub out_batch_risk_after: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub theta: ParamVector,
    pub records: Vec<StepRecord>,
}

/// Per-sample forward/backward products.
#[derive(Debug, Clone)]
pub struct SampleTerms {
    pub output: Vec<f64>,
    pub dual: Vec<f64>,
    pub loss: f64,
    /// `dual − y`, the loss gradient with respect to the output.
    pub residual: Vec<f64>,
    pub grad: Vec<f64>,
}

pub fn sample_terms(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    x: &[f64],
    y: &[f64],
) -> Result<SampleTerms> {
    let tape = forward_tape(spec, theta, x)?;
    let output = tape.output().to_vec();
    let dual = gf.dual_map(&output)?;
    let loss = gf.fy_loss(y, &output)?;
    let residual: Vec<f64> = dual.iter().zip(y).map(|(a, b)| a - b).collect();
    let grad = backward(spec, theta, &tape, &residual);
    Ok(SampleTerms {
        output,
        dual,
        loss,
        residual,
        grad,
    })
}

/// Per-sample terms plus the Jacobian, for instrumentation.
pub fn sample_terms_with_jacobian(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    x: &[f64],
    y: &[f64],
) -> Result<(SampleTerms, Mat)> {
    let tape = forward_tape(spec, theta, x)?;
    let output = tape.output().to_vec();
    let dual = gf.dual_map(&output)?;
    let loss = gf.fy_loss(y, &output)?;
    let residual: Vec<f64> = dual.iter().zip(y).map(|(a, b)| a - b).collect();
    let grad = backward(spec, theta, &tape, &residual);
    let jac = jacobian_from_tape(spec, theta, &tape)?;
    Ok((
        SampleTerms {
            output,
            dual,
            loss,
            residual,
            grad,
        },
        jac,
    ))
}

/// `∇_θ d_Φ(y, f_θ(x)) = Jᵀ (∇Φ*(f_θ(x)) − y)`.
pub fn per_sample_grad(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    x: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    let tape = forward_tape(spec, theta, x)?;
    let dual = gf.dual_map(tape.output())?;
    let residual: Vec<f64> = dual.iter().zip(y).map(|(a, b)| a - b).collect();
    Ok(backward(spec, theta, &tape, &residual))
}

pub fn sample_loss(spec: &NetSpec, theta: &ParamVector, gf: &GeneratingFunction, x: &[f64], y: &[f64]) -> Result<f64> {
    gf.fy_loss(y, &forward(spec, theta, x)?)
}

/// Mean loss over the given sample indices (summed in index order).
pub fn risk_on(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    data: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for &i in indices {
        let s = &data.samples[i];
        total += sample_loss(spec, theta, gf, &s.x, &s.y)?;
    }
    Ok(total / indices.len() as f64)
}

pub fn risk(spec: &NetSpec, theta: &ParamVector, gf: &GeneratingFunction, data: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    risk_on(spec, theta, gf, data, &all)
}

/// Mean loss and mean gradient over a batch. Per-sample work runs in
/// parallel; the reduction is sequential in index order.
pub fn batch_loss_grad(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let terms: Vec<SampleTerms> = if indices.len() >= 4 {
        indices
            .par_iter()
            .map(|&i| sample_terms(spec, theta, gf, &data.samples[i].x, &data.samples[i].y))
            .collect::<Result<_>>()?
    } else {
        indices
            .iter()
            .map(|&i| sample_terms(spec, theta, gf, &data.samples[i].x, &data.samples[i].y))
            .collect::<Result<_>>()?
    };
    let inv = 1.0 / indices.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    for t in &terms {
        loss += t.loss;
        for (g, v) in grad.iter_mut().zip(&t.grad) {
            *g += v;
        }
    }
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// `E_Z ‖∇_θ d_Φ(Y, f_θ(X))‖²` over the full set.
pub fn grad_energy(spec: &NetSpec, theta: &ParamVector, gf: &GeneratingFunction, data: &Dataset) -> Result<f64> {
    let norms: Vec<f64> = data
        .samples
        .par_iter()
        .map(|s| per_sample_grad(spec, theta, gf, &s.x, &s.y).map(|g| norm_sq(&g)))
        .collect::<Result<_>>()?;
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

pub fn sgd_run(
    spec: &NetSpec,
    theta0: &ParamVector,
    gf: &GeneratingFunction,
    data: &Dataset,
    cfg: &SgdConfig,
    log_every: usize,
) -> Result<SgdOutcome> {
    sgd_run_observed(spec, theta0, gf, data, cfg, log_every, |_, _| Ok(()))
}

/// SGD with an observer called on the parameters before the update of every
/// logged step (`step % log_every == 0`) and once more on the final
/// parameters with `step = total_steps`.
pub fn sgd_run_observed<F>(
    spec: &NetSpec,
    theta0: &ParamVector,
    gf: &GeneratingFunction,
    data: &Dataset,
    cfg: &SgdConfig,
    log_every: usize,
    mut observer: F,
) -> Result<SgdOutcome>
where
    F: FnMut(usize, &ParamVector) -> Result<()>,
{
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(n)?;
    let log_every = log_every.max(1);
    let total = cfg.total_steps(n);
    let mut theta = theta0.clone();
    let mut velocity = vec![0.0; theta.len()];
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let logged = step % log_every == 0;
            if logged {
                observer(step, &theta)?;
            }
            let mut batch_indices = batch.to_vec();
            batch_indices.sort_unstable();
            let mut in_batch = vec![false; n];
            batch_indices.iter().for_each(|&i| in_batch[i] = true);
            let out: Vec<usize> = (0..n).filter(|&i| !in_batch[i]).collect();

            let (batch_loss, grad) = batch_loss_grad(spec, &theta, gf, data, &batch_indices)?;
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            let energy = if logged {
                Some(grad_energy(spec, &theta, gf, data)?)
            } else {
                None
            };
            let before = if out.is_empty() {
                None
            } else {
                Some(risk_on(spec, &theta, gf, data, &out)?)
            };
            let lr = cfg.lr_at(step, total);
            for ((v, g), t) in velocity.iter_mut().zip(&grad).zip(&theta.theta) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * t;
            }
            for (t, v) in theta.theta.iter_mut().zip(&velocity) {
                *t -= lr * v;
            }
            let after = if out.is_empty() {
                None
            } else {
                let r = risk_on(spec, &theta, gf, data, &out)?;
                if !r.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                Some(r)
            };
            records.push(StepRecord {
                step,
                lr,
                batch_indices,
                batch_loss,
                batch_grad_norm_sq: norm_sq(&grad),
                grad_energy: energy,
                out_batch_risk_before: before,
                out_batch_risk_after: after,
            });
            step += 1;
        }
    }
    observer(step, &theta)?;
    Ok(SgdOutcome { theta, records })
}

/// `max_k |R(θ_{k+1}, s∖s_k) − R(θ_k, s∖s_k)|`.
pub fn estimate_m(records: &[StepRecord]) -> Result<f64> {
    let mut m: Option<f64> = None;
    for r in records {
        if let (Some(b), Some(a)) = (r.out_batch_risk_before, r.out_batch_risk_after) {
            m = Some(m.unwrap_or(0.0).max((a - b).abs()));
        }
    }
    m.ok_or(Error::NoOutBatch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LEstimate {
    pub value: f64,
    pub probes: usize,
}

/// Hessian-vector product by central differences of the per-sample gradient.
pub fn hessian_vector_product(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    x: &[f64],
    y: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    let mut plus = theta.clone();
    let mut minus = theta.clone();
    for ((p, m), d) in plus.theta.iter_mut().zip(minus.theta.iter_mut()).zip(v) {
        *p += HVP_STEP * d;
        *m -= HVP_STEP * d;
    }
    let gp = per_sample_grad(spec, &plus, gf, x, y)?;
    let gm = per_sample_grad(spec, &minus, gf, x, y)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * HVP_STEP)).collect())
}

fn power_iteration<F>(m: usize, shift: f64, mut hvp: F) -> Result<(f64, f64)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let rng = CounterRng::new(0x5eed);
    let mut v: Vec<f64> = (0..m).map(|i| rng.uniform_range(i as u64, -1.0, 1.0)).collect();
    let nv = norm_sq(&v).sqrt();
    v.iter_mut().for_each(|a| *a /= nv);
    let mut rayleigh = 0.0;
    let mut radius = 0.0;
    for it in 0..POWER_ITERATIONS {
        let mut hv = hvp(&v)?;
        for (h, a) in hv.iter_mut().zip(&v) {
            *h += shift * a;
        }
        let next: f64 = hv.iter().zip(&v).map(|(a, b)| a * b).sum();
        let norm = norm_sq(&hv).sqrt();
        if norm == 0.0 {
            return Ok((0.0, 0.0));
        }
        v = hv.into_iter().map(|a| a / norm).collect();
        let done = it > 0
            && (next - rayleigh).abs() <= POWER_REL_TOL * next.abs()
            && (norm - radius).abs() <= POWER_REL_TOL * norm;
        rayleigh = next;
        radius = norm;
        if done {
            break;
        }
    }
    Ok((rayleigh, radius))
}

/// Top Hessian eigenvalue of one sample's loss by power iteration on
/// finite-difference Hessian-vector products. When the dominant eigenvalue
/// is negative (or a ± pair), a second pass runs on `H + ρI` with `ρ` the
/// spectral radius from the first.
pub fn top_hessian_eigenvalue(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    let hvp = |v: &[f64]| hessian_vector_product(spec, theta, gf, x, y, v);
    let (rayleigh, radius) = power_iteration(theta.len(), 0.0, hvp)?;
    if rayleigh >= (1.0 - 1e-4) * radius {
        return Ok(rayleigh);
    }
    let (shifted, _) = power_iteration(theta.len(), radius, hvp)?;
    Ok(shifted - radius)
}

/// Maximum top Hessian eigenvalue over the first `probes` pairs of
/// `thetas × samples` (parameter-major order).
pub fn estimate_l(
    spec: &NetSpec,
    thetas: &[ParamVector],
    gf: &GeneratingFunction,
    data: &Dataset,
    probes: usize,
) -> Result<LEstimate> {
    if thetas.is_empty() || data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probes = probes.max(1).min(thetas.len() * data.len());
    let values: Vec<f64> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let theta = &thetas[p / data.len()];
            let s = &data.samples[p % data.len()];
            top_hessian_eigenvalue(spec, theta, gf, &s.x, &s.y)
        })
        .collect::<Result<_>>()?;
    Ok(LEstimate {
        value: values.into_iter().fold(f64::NEG_INFINITY, f64::max),
        probes,
    })
}
