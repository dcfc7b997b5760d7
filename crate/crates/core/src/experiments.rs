//! Desk-scale experiment drivers: bound tracking during training, structure
//! spectra at initialization across depth/width/skip, and a bounds report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    achievable_risk_bound, condition_bound, det_gen_bound, hessian_bridge_check, model_abs_info_loss, monte_carlo_gen,
    prob_gen_bound, regularization_gamma_curve, risk_report, BridgeCheck, DetGenBound, RiskReport, DEGENERATE_LAMBDA,
};
use crate::convex::GeneratingFunction;
use crate::data::{one_hot, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::info::{DiscreteJoint, FeatureKey};
use crate::linalg::norm_sq;
use crate::net::{init, structure_spectrum, Activation, NetSpec, Normalization, ParamVector};
use crate::optim::{estimate_l, estimate_m, risk, risk_on, sgd_run, sgd_run_observed, SgdConfig};
use crate::rng::{derive_seed, SplitMix64};

/// Window variance below which a correlation is undefined.
pub const PEARSON_VAR_FLOOR: f64 = 1e-18;
/// Row-wise slack on log₂ and risk sandwiches.
pub const SANDWICH_TOL: f64 = 1e-6;
pub const FITTING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    Mse,
}

impl LossKind {
    pub fn generating_function(self, dim: usize) -> GeneratingFunction {
        match self {
            LossKind::SoftmaxCe => GeneratingFunction::simplex_entropy(dim),
            LossKind::Mse => GeneratingFunction::half_squared_norm(dim),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::Mse => "mse",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweeps {
    pub depth: Option<Vec<usize>>,
    pub width: Option<Vec<usize>>,
    pub skip: Option<Vec<bool>>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_terminal")]
    pub terminal_pearson: f64,
    #[serde(default = "default_sustained")]
    pub sustained_pearson: f64,
}

fn default_terminal() -> f64 {
    0.95
}

fn default_sustained() -> f64 {
    0.9
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            terminal_pearson: default_terminal(),
            sustained_pearson: default_sustained(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenPlan {
    #[serde(default = "default_two")]
    pub x_card: usize,
    #[serde(default = "default_two")]
    pub y_card: usize,
    #[serde(default = "default_gen_n")]
    pub n: usize,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_two() -> usize {
    2
}

fn default_gen_n() -> usize {
    1000
}

fn default_eps() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}

fn default_resamples() -> usize {
    100_000
}

impl Default for GenPlan {
    fn default() -> Self {
        Self {
            x_card: 2,
            y_card: 2,
            n: default_gen_n(),
            eps: default_eps(),
            resamples: default_resamples(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsPlan {
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default = "default_directions")]
    pub radius_directions: usize,
    #[serde(default = "default_four")]
    pub l_probes: usize,
    #[serde(default)]
    pub generalization: GenPlan,
}

fn default_radii() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.25).collect()
}

fn default_directions() -> usize {
    8
}

fn default_four() -> usize {
    4
}

fn default_one() -> usize {
    1
}

fn default_window() -> usize {
    4
}

impl Default for BoundsPlan {
    fn default() -> Self {
        Self {
            radii: default_radii(),
            radius_directions: default_directions(),
            l_probes: 4,
            generalization: GenPlan::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    /// Run seed; initialization and shuffling streams derive from it. The
    /// dataset carries its own seed.
    #[serde(default)]
    pub seed: u64,
    pub loss: LossKind,
    #[serde(default = "default_window")]
    pub pearson_window: usize,
    #[serde(default = "default_one")]
    pub log_every: usize,
    #[serde(default = "default_four")]
    pub tracked_samples: usize,
    /// Inputs averaged over in spectrum sweeps.
    #[serde(default = "default_four")]
    pub probe_batch: usize,
    pub dataset: DatasetSpec,
    pub net: NetSpec,
    pub sgd: Option<SgdConfig>,
    pub sweep: Option<Sweeps>,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub bounds: Option<BoundsPlan>,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentPlan {
    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(invalid("name", "must be nonempty"));
        }
        if self.pearson_window < 2 {
            return Err(invalid("pearson_window", "must be at least 2"));
        }
        if self.log_every == 0 {
            return Err(invalid("log_every", "must be positive"));
        }
        if self.probe_batch == 0 {
            return Err(invalid("probe_batch", "must be positive"));
        }
        self.net.validate().map_err(|e| invalid("net", e.to_string()))?;
        if let Some(s) = &self.sweep {
            let empty = [
                ("sweep.depth", s.depth.as_ref().map(Vec::is_empty)),
                ("sweep.width", s.width.as_ref().map(Vec::is_empty)),
                ("sweep.skip", s.skip.as_ref().map(Vec::is_empty)),
                ("sweep.seeds", s.seeds.as_ref().map(Vec::is_empty)),
            ];
            if let Some((field, _)) = empty.iter().find(|(_, e)| *e == Some(true)) {
                return Err(invalid(field, "sweep lists must be nonempty"));
            }
            if s.depth.iter().flatten().any(|&d| d == 0) {
                return Err(invalid("sweep.depth", "depths must be positive"));
            }
            if s.width.iter().flatten().any(|&w| w == 0) {
                return Err(invalid("sweep.width", "widths must be positive"));
            }
        }
        if let Some(b) = &self.bounds {
            if b.radii.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                return Err(invalid("bounds.radii", "radii must be finite and nonnegative"));
            }
            if b.radius_directions == 0 {
                return Err(invalid("bounds.radius_directions", "must be positive"));
            }
            let g = &b.generalization;
            if g.x_card == 0 || g.y_card < 2 || g.n == 0 || g.resamples == 0 {
                return Err(invalid(
                    "bounds.generalization",
                    "need x_card ≥ 1, y_card ≥ 2, n ≥ 1, resamples ≥ 1",
                ));
            }
            if g.eps.iter().any(|e| !(*e > 0.0)) {
                return Err(invalid("bounds.generalization.eps", "must be positive"));
            }
        }
        Ok(())
    }

    /// Checks against the loaded data.
    pub fn validate_with(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if self.net.input_dim != data.input_dim() {
            return Err(invalid(
                "net.input_dim",
                format!("dataset has {} features", data.input_dim()),
            ));
        }
        if self.net.output_dim != data.target_dim() {
            return Err(invalid(
                "net.output_dim",
                format!("dataset has {} targets", data.target_dim()),
            ));
        }
        if let Some(sgd) = &self.sgd {
            sgd.validate(data.len()).map_err(|e| match e {
                Error::Validation { field, message } => invalid(&format!("sgd.{field}"), message),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    /// The optimizer config with its shuffle stream tied to the run seed.
    pub fn resolved_sgd(&self) -> Result<SgdConfig> {
        let mut sgd = self
            .sgd
            .ok_or_else(|| invalid("sgd", "section required for training"))?;
        sgd.seed = derive_seed(derive_seed(self.seed, 2), sgd.seed);
        Ok(sgd)
    }

    pub fn generating_function(&self) -> GeneratingFunction {
        self.loss.generating_function(self.net.output_dim)
    }
}

/// Pearson correlation, `None` when either side has variance below the floor.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Ok(None);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa / n < PEARSON_VAR_FLOOR || sbb / n < PEARSON_VAR_FLOOR {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// Pearson over each trailing window. Entries before the first full window
/// are `None`, so the output has the input length.
pub fn rolling_pearson(a: &[f64], b: &[f64], window: usize) -> Result<Vec<Option<f64>>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { a: a.len(), b: b.len() });
    }
    if window < 2 || a.len() < window {
        return Err(Error::Range(format!(
            "window {window} needs at least 2 and at most the series length {}",
            a.len()
        )));
    }
    let mut out = vec![None; window - 1];
    for end in window..=a.len() {
        out.push(pearson(&a[end - window..end], &b[end - window..end])?);
    }
    Ok(out)
}

/// Rolling Pearson over series with missing entries; a window containing a
/// missing value yields `None`.
pub fn rolling_pearson_opt(a: &[Option<f64>], b: &[Option<f64>], window: usize) -> Result<Vec<Option<f64>>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { a: a.len(), b: b.len() });
    }
    let mut out = Vec::with_capacity(a.len());
    for end in 1..=a.len() {
        if end < window {
            out.push(None);
            continue;
        }
        let wa: Option<Vec<f64>> = a[end - window..end].iter().copied().collect();
        let wb: Option<Vec<f64>> = b[end - window..end].iter().copied().collect();
        out.push(match (wa, wb) {
            (Some(x), Some(y)) => pearson(&x, &y)?,
            _ => None,
        });
    }
    Ok(out)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { a: a.len(), b: b.len() });
    }
    pearson(&ranks(a), &ranks(b))
}

/// `log₂ λ_max` changed by less than 5% relative over the trailing 10 values.
pub fn eigen_stabilized(log2_lambda_max: &[f64]) -> bool {
    if log2_lambda_max.len() < 10 {
        return false;
    }
    let tail = &log2_lambda_max[log2_lambda_max.len() - 10..];
    let last = tail[9];
    let spread = tail.iter().fold(0.0f64, |m, v| m.max((v - last).abs()));
    spread < 0.05 * last.abs().max(1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    /// Tracked sample index; `None` marks the dataset-level row.
    pub sample: Option<usize>,
    pub loss: f64,
    pub std_risk: f64,
    pub log2_std_risk: Option<f64>,
    pub grad_energy: f64,
    pub log2_grad_energy: Option<f64>,
    pub log2_lambda_min: Option<f64>,
    pub log2_lambda_max: Option<f64>,
    pub ub: Option<f64>,
    pub lb: Option<f64>,
    pub cor_lb: Option<f64>,
    pub cor_ub: Option<f64>,
    pub ent_lower: Option<f64>,
    pub gamma: Option<f64>,
    pub pearson_std_ub: Option<f64>,
    pub pearson_std_lb: Option<f64>,
    pub pearson_std_ge: Option<f64>,
    pub pearson_risk_std: Option<f64>,
    pub degenerate: bool,
}

impl TraceRow {
    pub const HEADER: [&'static str; 20] = [
        "step",
        "sample",
        "loss",
        "std_risk",
        "log2_std_risk",
        "grad_energy",
        "log2_grad_energy",
        "log2_lambda_min",
        "log2_lambda_max",
        "ub",
        "lb",
        "cor_lb",
        "cor_ub",
        "ent_lower",
        "gamma",
        "pearson_std_ub",
        "pearson_std_lb",
        "pearson_std_ge",
        "pearson_risk_std",
        "degenerate",
    ];

    /// `Lb ≤ log₂R° ≤ Ub` within `tol` wherever both sides are defined.
    pub fn log_sandwich_holds(&self, tol: f64) -> bool {
        let Some(s) = self.log2_std_risk else {
            return true;
        };
        self.ub.is_none_or(|u| s <= u + tol) && self.lb.is_none_or(|l| l - tol <= s)
    }

    /// Risk-scale checks use `tol · max(1, |loss|)`: a diverging run can put
    /// the loss near 1e8, where an equality case differs by roundoff alone.
    pub fn risk_sandwich_holds(&self, tol: f64) -> bool {
        let tol = tol * self.loss.abs().max(1.0);
        self.cor_lb.is_none_or(|l| l - tol <= self.loss) && self.cor_ub.is_none_or(|u| self.loss <= u + tol)
    }

    pub fn fitting_holds(&self, tol: f64) -> bool {
        let tol = tol * self.loss.abs().max(1.0);
        self.ent_lower.is_none_or(|e| e - tol <= self.loss) && self.gamma.is_none_or(|g| self.loss <= g + tol)
    }
}

fn log2_pos(v: f64) -> Option<f64> {
    (v > 0.0 && v.is_finite()).then(|| v.log2())
}

struct Observation {
    step: usize,
    report: RiskReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracking {
    pub rows: Vec<TraceRow>,
    pub final_theta: ParamVector,
}

/// Train per the plan and record bounds at every logged step for the first
/// `tracked_samples` samples and for the whole set.
pub fn run_bound_tracking(plan: &ExperimentPlan, data: &Dataset) -> Result<Tracking> {
    plan.validate_with(data)?;
    let sgd = plan.resolved_sgd()?;
    let gf = plan.generating_function();
    let theta0 = init(&plan.net, plan.init_seed());
    let mut obs: Vec<Observation> = Vec::new();
    let outcome = sgd_run_observed(&plan.net, &theta0, &gf, data, &sgd, plan.log_every, |step, theta| {
        obs.push(Observation {
            step,
            report: risk_report(&plan.net, theta, &gf, data)?,
        });
        Ok(())
    })?;
    let rows = trace_rows(&obs, plan.tracked_samples.min(data.len()), plan.pearson_window)?;
    Ok(Tracking {
        rows,
        final_theta: outcome.theta,
    })
}

struct Series {
    loss: Vec<f64>,
    std: Vec<f64>,
    log_std: Vec<Option<f64>>,
    log_ge: Vec<Option<f64>>,
    ub: Vec<Option<f64>>,
    lb: Vec<Option<f64>>,
}

impl Series {
    fn correlations(&self, window: usize) -> Result<[Vec<Option<f64>>; 4]> {
        let n = self.loss.len();
        if n < window {
            return Ok([vec![None; n], vec![None; n], vec![None; n], vec![None; n]]);
        }
        let loss: Vec<Option<f64>> = self.loss.iter().map(|v| Some(*v)).collect();
        let std: Vec<Option<f64>> = self.std.iter().map(|v| Some(*v)).collect();
        Ok([
            rolling_pearson_opt(&self.log_std, &self.ub, window)?,
            rolling_pearson_opt(&self.log_std, &self.lb, window)?,
            rolling_pearson_opt(&self.log_std, &self.log_ge, window)?,
            rolling_pearson_opt(&loss, &std, window)?,
        ])
    }
}

fn trace_rows(obs: &[Observation], tracked: usize, window: usize) -> Result<Vec<TraceRow>> {
    // one block of rows per logged step: tracked samples, then the aggregate
    let mut blocks: Vec<Vec<TraceRow>> = obs
        .iter()
        .map(|o| {
            let r = &o.report;
            let mut rows: Vec<TraceRow> = r.samples[..tracked]
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let degenerate = d.lambda_min <= DEGENERATE_LAMBDA;
                    let lg = log2_pos(d.grad_norm_sq);
                    let sw = r.sample_risk_sandwich(d);
                    TraceRow {
                        step: o.step,
                        sample: Some(i),
                        loss: d.loss,
                        std_risk: d.std_risk,
                        log2_std_risk: log2_pos(d.std_risk),
                        grad_energy: d.grad_norm_sq,
                        log2_grad_energy: lg,
                        log2_lambda_min: log2_pos(d.lambda_min),
                        log2_lambda_max: log2_pos(d.lambda_max),
                        ub: lg.filter(|_| !degenerate).map(|g| g - d.lambda_min.log2()),
                        lb: lg.zip(log2_pos(d.lambda_max)).map(|(g, l)| g - l),
                        cor_lb: sw.map(|s| s.0),
                        cor_ub: sw.map(|s| s.1),
                        ent_lower: None,
                        gamma: None,
                        pearson_std_ub: None,
                        pearson_std_lb: None,
                        pearson_std_ge: None,
                        pearson_risk_std: None,
                        degenerate,
                    }
                })
                .collect();
            let lg = log2_pos(r.grad_energy);
            let sw = r.risk_sandwich();
            rows.push(TraceRow {
                step: o.step,
                sample: None,
                loss: r.risk,
                std_risk: r.std_risk,
                log2_std_risk: log2_pos(r.std_risk),
                grad_energy: r.grad_energy,
                log2_grad_energy: lg,
                log2_lambda_min: log2_pos(r.lambda_min_s),
                log2_lambda_max: log2_pos(r.lambda_max_s),
                ub: lg.filter(|_| !r.degenerate).map(|g| g - r.lambda_min_s.log2()),
                lb: lg.zip(log2_pos(r.lambda_max_s)).map(|(g, l)| g - l),
                cor_lb: sw.map(|s| s.0),
                cor_ub: sw.map(|s| s.1),
                ent_lower: Some(r.ent_lower),
                gamma: Some(r.gamma),
                pearson_std_ub: None,
                pearson_std_lb: None,
                pearson_std_ge: None,
                pearson_risk_std: None,
                degenerate: r.degenerate,
            });
            rows
        })
        .collect();
    for col in 0..=tracked {
        let pick =
            |f: &dyn Fn(&TraceRow) -> Option<f64>| -> Vec<Option<f64>> { blocks.iter().map(|b| f(&b[col])).collect() };
        let series = Series {
            loss: blocks.iter().map(|b| b[col].loss).collect(),
            std: blocks.iter().map(|b| b[col].std_risk).collect(),
            log_std: pick(&|r| r.log2_std_risk),
            log_ge: pick(&|r| r.log2_grad_energy),
            ub: pick(&|r| r.ub),
            lb: pick(&|r| r.lb),
        };
        let [ub, lb, ge, rs] = series.correlations(window)?;
        for (k, b) in blocks.iter_mut().enumerate() {
            b[col].pearson_std_ub = ub[k];
            b[col].pearson_std_lb = lb[k];
            b[col].pearson_std_ge = ge[k];
            b[col].pearson_risk_std = rs[k];
        }
    }
    Ok(blocks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackingSummary {
    pub rows: usize,
    pub sample_rows: usize,
    pub log_sandwich_violations: usize,
    pub risk_sandwich_violations: usize,
    pub fitting_violations: usize,
    pub degenerate_rows: usize,
    /// Last rolling Pearson of (log₂ std risk, Ub) on the dataset-level rows.
    pub terminal_pearson_std_ub: Option<f64>,
    /// Pearson of (risk, std risk) over the final half of the dataset-level rows.
    pub final_half_pearson_risk_std: Option<f64>,
}

impl TrackingSummary {
    pub fn pearson_pass(&self, t: &Thresholds) -> bool {
        self.terminal_pearson_std_ub.is_some_and(|p| p >= t.terminal_pearson)
            && self
                .final_half_pearson_risk_std
                .is_some_and(|p| p >= t.sustained_pearson)
    }
}

pub fn summarize(rows: &[TraceRow]) -> Result<TrackingSummary> {
    let live = rows.iter().filter(|r| !r.degenerate);
    let agg: Vec<&TraceRow> = rows.iter().filter(|r| r.sample.is_none()).collect();
    let half = &agg[agg.len() / 2..];
    let risk: Vec<f64> = half.iter().map(|r| r.loss).collect();
    let std: Vec<f64> = half.iter().map(|r| r.std_risk).collect();
    Ok(TrackingSummary {
        rows: rows.len(),
        sample_rows: rows.iter().filter(|r| r.sample.is_some()).count(),
        log_sandwich_violations: live.clone().filter(|r| !r.log_sandwich_holds(SANDWICH_TOL)).count(),
        risk_sandwich_violations: live.filter(|r| !r.risk_sandwich_holds(SANDWICH_TOL)).count(),
        fitting_violations: rows.iter().filter(|r| !r.fitting_holds(FITTING_TOL)).count(),
        degenerate_rows: rows.iter().filter(|r| r.degenerate).count(),
        terminal_pearson_std_ub: agg.last().and_then(|r| r.pearson_std_ub),
        final_half_pearson_risk_std: pearson(&risk, &std)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub depth: usize,
    pub width: usize,
    pub skip: bool,
    pub seed: u64,
    pub log2_lambda_min: Option<f64>,
    pub log2_lambda_max: Option<f64>,
    pub log2_frob: Option<f64>,
    pub log2_diag_norm: Option<f64>,
    pub gap: Option<f64>,
}

impl SpectrumRow {
    pub const HEADER: [&'static str; 9] = [
        "depth",
        "width",
        "skip",
        "seed",
        "log2_lambda_min",
        "log2_lambda_max",
        "log2_frob",
        "log2_diag_norm",
        "gap",
    ];
}

/// Structure spectra at initialization over the sweep grid, each metric the
/// mean of its log₂ over the first `probe_batch` inputs. Rows come out in
/// grid order `(skip, depth, width, seed)`.
pub fn run_spectrum_sweep(plan: &ExperimentPlan, data: &Dataset) -> Result<Vec<SpectrumRow>> {
    plan.validate()?;
    let sweep = plan
        .sweep
        .as_ref()
        .ok_or_else(|| invalid("sweep", "section required for spectrum sweeps"))?;
    if plan.net.input_dim != data.input_dim() {
        return Err(invalid(
            "net.input_dim",
            format!("dataset has {} features", data.input_dim()),
        ));
    }
    let skips = sweep.skip.clone().unwrap_or_else(|| vec![plan.net.skip]);
    let depths = sweep.depth.clone().unwrap_or_else(|| vec![plan.net.depth_blocks]);
    let widths = sweep.width.clone().unwrap_or_else(|| vec![plan.net.width]);
    let seeds = sweep.seeds.clone().unwrap_or_else(|| vec![plan.seed]);
    let mut cells = Vec::new();
    for &skip in &skips {
        for &depth in &depths {
            for &width in &widths {
                for &seed in &seeds {
                    cells.push((skip, depth, width, seed));
                }
            }
        }
    }
    let probes: Vec<Vec<f64>> = data
        .samples
        .iter()
        .take(plan.probe_batch)
        .map(|s| s.x.clone())
        .collect();
    cells
        .par_iter()
        .map(|&(skip, depth, width, seed)| {
            let spec = NetSpec {
                skip,
                depth_blocks: depth,
                width,
                ..plan.net
            };
            let theta = init(&spec, derive_seed(seed, 1));
            let mut acc = [Some(0.0); 4];
            for x in &probes {
                let s = structure_spectrum(&spec, &theta, x)?;
                for (a, v) in acc
                    .iter_mut()
                    .zip([s.lambda_min, s.lambda_max, s.frob_norm, s.diag_norm])
                {
                    *a = a.zip(log2_pos(v)).map(|(t, l)| t + l);
                }
            }
            let k = probes.len() as f64;
            let [lmin, lmax, frob, diag] = acc.map(|a| a.map(|t| t / k));
            Ok(SpectrumRow {
                depth,
                width,
                skip,
                seed,
                log2_lambda_min: lmin,
                log2_lambda_max: lmax,
                log2_frob: frob,
                log2_diag_norm: diag,
                gap: lmax.zip(lmin).map(|(a, b)| a - b),
            })
        })
        .collect()
}

/// Median of the defined values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenRow {
    pub eps: f64,
    pub empirical: f64,
    pub analytic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsOutput {
    /// `(name, value)` with `None` where a quantity is undefined.
    pub summary: Vec<(String, Option<f64>)>,
    pub radius_curve: Vec<(f64, f64)>,
    pub det: DetGenBound,
    pub prob: Vec<GenRow>,
}

/// A random `|X| × |Y|` joint with one-hot targets and a random logit table,
/// plus an empirical joint from `n` draws.
pub fn tiny_instance(g: &GenPlan) -> Result<(DiscreteJoint, DiscreteJoint, Vec<Vec<f64>>)> {
    let mut rng = SplitMix64::new(derive_seed(g.seed, 5));
    let xs: Vec<FeatureKey> = (0..g.x_card as u64).map(FeatureKey::from_index).collect();
    let ys: Vec<Vec<f64>> = (0..g.y_card).map(|c| one_hot(c, g.y_card)).collect();
    let mut w: Vec<Vec<f64>> = (0..g.x_card)
        .map(|_| (0..g.y_card).map(|_| 0.1 + rng.uniform()).collect())
        .collect();
    let total: f64 = w.iter().flatten().sum();
    w.iter_mut().flatten().for_each(|v| *v /= total);
    let q = DiscreteJoint::new(xs.clone(), ys.clone(), w.clone())?;
    let mut counts = vec![vec![0usize; g.y_card]; g.x_card];
    let flat: Vec<f64> = w.iter().flatten().copied().collect();
    for _ in 0..g.n {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut cell = flat.len() - 1;
        for (i, p) in flat.iter().enumerate() {
            acc += p;
            if u < acc {
                cell = i;
                break;
            }
        }
        counts[cell / g.y_card][cell % g.y_card] += 1;
    }
    let emp: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| r.iter().map(|&c| c as f64 / g.n as f64).collect())
        .collect();
    let keep: Vec<usize> = (0..g.x_card).filter(|&i| emp[i].iter().sum::<f64>() > 0.0).collect();
    let qh = DiscreteJoint::new(
        keep.iter().map(|&i| xs[i].clone()).collect(),
        ys,
        keep.iter().map(|&i| emp[i].clone()).collect(),
    )?;
    let logits = (0..g.x_card)
        .map(|_| (0..g.y_card).map(|_| rng.normal()).collect())
        .collect();
    Ok((qh, q, logits))
}

/// Train per the plan, then report fitting, convergence and generalization
/// bounds at the final parameters.
pub fn run_bounds_report(plan: &ExperimentPlan, data: &Dataset) -> Result<BoundsOutput> {
    plan.validate_with(data)?;
    let bp = plan.bounds.clone().unwrap_or_default();
    let sgd = plan.resolved_sgd()?;
    let gf = plan.generating_function();
    let theta0 = init(&plan.net, plan.init_seed());
    let out = sgd_run(&plan.net, &theta0, &gf, data, &sgd, plan.log_every)?;
    let report = risk_report(&plan.net, &out.theta, &gf, data)?;
    let m_hat = estimate_m(&out.records).ok();
    let l_hat = estimate_l(&plan.net, &[theta0, out.theta.clone()], &gf, data, bp.l_probes)?.value;
    let achievable =
        m_hat.and_then(|m| achievable_risk_bound(l_hat, m, data.len(), report.lambda_min_s, report.h_max).ok());
    let y_norm = data.samples.iter().map(|s| norm_sq(&s.y).sqrt()).fold(0.0f64, f64::max);
    let cond = condition_bound(data.len(), data.target_dim(), y_norm).ok();
    let std_sw = report.std_sandwich();
    let risk_sw = report.risk_sandwich();
    let summary: Vec<(String, Option<f64>)> = vec![
        ("risk", Some(report.risk)),
        ("std_risk", Some(report.std_risk)),
        ("grad_energy", Some(report.grad_energy)),
        ("lambda_min_s", Some(report.lambda_min_s)),
        ("lambda_max_s", Some(report.lambda_max_s)),
        ("ent_lower", Some(report.ent_lower)),
        ("gamma", Some(report.gamma)),
        ("std_lb", std_sw.map(|s| s.0)),
        ("std_ub", std_sw.map(|s| s.1)),
        ("risk_lb", risk_sw.map(|s| s.0)),
        ("risk_ub", risk_sw.map(|s| s.1)),
        ("l_hat", Some(l_hat)),
        ("m_hat", m_hat),
        ("achievable_std_risk", achievable.map(|a| a.0)),
        ("achievable_risk", achievable.map(|a| a.1)),
        ("condition_bound", cond),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let radius_curve = if gf.is_simplex_entropy() {
        regularization_gamma_curve(&plan.net, &gf, data, &bp.radii, bp.radius_directions)?
    } else {
        Vec::new()
    };

    let g = &bp.generalization;
    let (qh, q, logits) = tiny_instance(g)?;
    let ce = GeneratingFunction::simplex_entropy(g.y_card);
    let table = |k: &FeatureKey| -> Result<Vec<f64>> {
        let i = u64::from_le_bytes(
            k.0.as_slice()
                .try_into()
                .map_err(|_| Error::MissingKey(format!("{k:?}")))?,
        );
        logits
            .get(i as usize)
            .cloned()
            .ok_or_else(|| Error::MissingKey(format!("{k:?}")))
    };
    let det = det_gen_bound(&ce, &table, &qh, &q)?;
    let abs_loss = model_abs_info_loss(&table, &q)?;
    let empirical = monte_carlo_gen(&ce, &table, &q, g.n, &g.eps, g.resamples, derive_seed(g.seed, 6))?;
    let prob = g
        .eps
        .iter()
        .zip(empirical)
        .map(|(&eps, emp)| {
            Ok(GenRow {
                eps,
                empirical: emp,
                analytic: prob_gen_bound(g.x_card, g.y_card, abs_loss, det.gamma, q.norm_sq(), g.n, eps)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BoundsOutput {
        summary,
        radius_curve,
        det,
        prob,
    })
}

/// Vanilla batch-1 SGD at `α = 1/(2L̂)` with the step budget fixed in
/// advance, compared against the neighborhood it must reach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceCheck {
    pub n: usize,
    pub l_hat: f64,
    /// Out-of-batch risk drift, recomputed from stored parameters.
    pub m_hat: f64,
    /// The same quantity from the step records.
    pub m_hat_records: f64,
    pub eps_sq: f64,
    pub steps: usize,
    pub running_min_grad_sq: f64,
    pub neighborhood: f64,
    pub final_std_risk: f64,
    pub lambda_min_s: f64,
    /// `4L̂(n−1)M̂/λ_min(A_s)`
    pub std_risk_bound: f64,
}

impl ConvergenceCheck {
    pub fn reaches_neighborhood(&self) -> bool {
        self.running_min_grad_sq <= self.neighborhood
    }

    pub fn std_risk_within_bound(&self) -> bool {
        self.final_std_risk <= self.std_risk_bound
    }
}

/// `T = ⌈4L̂nR(θ₀)/ε²⌉` is pinned to `budget`, which fixes `ε`. Parameters
/// are kept at every step so `M̂` can be replayed independently of the
/// optimizer's own bookkeeping.
pub fn run_convergence_check(
    spec: &NetSpec,
    data: &Dataset,
    loss: LossKind,
    budget: usize,
    seed: u64,
) -> Result<ConvergenceCheck> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Range("need at least two samples".into()));
    }
    let gf = loss.generating_function(spec.output_dim);
    let theta0 = init(spec, derive_seed(seed, 1));
    let l_hat = estimate_l(spec, std::slice::from_ref(&theta0), &gf, data, n)?.value;
    let r0 = risk(spec, &theta0, &gf, data)?;
    let epochs = budget / n;
    let steps = epochs * n;
    let eps_sq = 4.0 * l_hat * n as f64 * r0 / steps as f64;
    let cfg = SgdConfig::theorem(1.0 / (2.0 * l_hat), 1, epochs, derive_seed(seed, 2));
    let mut thetas = Vec::with_capacity(steps + 1);
    let out = sgd_run_observed(spec, &theta0, &gf, data, &cfg, 1, |_, t| {
        thetas.push(t.clone());
        Ok(())
    })?;
    let m_hat = out
        .records
        .par_iter()
        .map(|r| {
            let rest: Vec<usize> = (0..n).filter(|i| !r.batch_indices.contains(i)).collect();
            let before = risk_on(spec, &thetas[r.step], &gf, data, &rest)?;
            let after = risk_on(spec, &thetas[r.step + 1], &gf, data, &rest)?;
            Ok((after - before).abs())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let running_min_grad_sq = out
        .records
        .iter()
        .map(|r| r.batch_grad_norm_sq)
        .fold(f64::INFINITY, f64::min);
    let report = risk_report(spec, &out.theta, &gf, data)?;
    let drift = 4.0 * l_hat * (n - 1) as f64 * m_hat;
    Ok(ConvergenceCheck {
        n,
        l_hat,
        m_hat,
        m_hat_records: estimate_m(&out.records)?,
        eps_sq,
        steps,
        running_min_grad_sq,
        neighborhood: eps_sq + drift,
        final_std_risk: report.std_risk,
        lambda_min_s: report.lambda_min_s,
        std_risk_bound: drift / report.lambda_min_s,
    })
}

/// Fit `data`, whose samples share one input, by full-batch gradient
/// descent until the dual output is within 1e-9 of `target` or `max_steps`
/// pass.
fn fit_to_mean(
    spec: &NetSpec,
    gf: &GeneratingFunction,
    data: &Dataset,
    target: &[f64],
    seed: u64,
    lr: f64,
    max_steps: usize,
) -> Result<ParamVector> {
    let mut theta = init(spec, seed);
    let x = &data.samples[0].x;
    let all: Vec<usize> = (0..data.len()).collect();
    for _ in 0..max_steps {
        let dual = gf.dual_map(&crate::net::forward(spec, &theta, x)?)?;
        if dual.iter().zip(target).all(|(a, b)| (a - b).abs() <= 1e-9) {
            break;
        }
        let (_, g) = crate::optim::batch_loss_grad(spec, &theta, gf, data, &all)?;
        theta.theta.iter_mut().zip(&g).for_each(|(t, g)| *t -= lr * g);
    }
    Ok(theta)
}

/// Bridge checks on two fitted instances: a linear model under squared
/// error and a small tanh net under 2-class softmax. Each has one input
/// seen with several labels, so the fit is the conditional mean.
pub fn bridge_instances(seed: u64) -> Result<Vec<(String, BridgeCheck)>> {
    let mut rng = SplitMix64::new(derive_seed(seed, 0xb1d));
    let mut out = Vec::new();

    let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let ys: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.normal(), rng.normal()]).collect();
    let mean: Vec<f64> = (0..2)
        .map(|k| ys.iter().map(|y| y[k]).sum::<f64>() / ys.len() as f64)
        .collect();
    let data = Dataset::new(
        ys.iter()
            .map(|y| crate::data::Sample {
                x: x.clone(),
                y: y.clone(),
            })
            .collect(),
    )?;
    let spec = NetSpec::linear(3, 2, true);
    let gf = GeneratingFunction::half_squared_norm(2);
    let lr = 0.5 / (norm_sq(&x) + 1.0);
    let theta = fit_to_mean(&spec, &gf, &data, &mean, derive_seed(seed, 1), lr, 10_000)?;
    out.push((
        "linear_quadratic".to_string(),
        hessian_bridge_check(&spec, &theta, &gf, &x, &mean)?,
    ));

    let spec = NetSpec {
        input_dim: 3,
        output_dim: 2,
        width: 6,
        depth_blocks: 1,
        skip: false,
        activation: Activation::Tanh,
        normalization: Normalization::None,
        bias: true,
        embed: true,
    };
    let labels = [0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
    let data = Dataset::new(
        labels
            .iter()
            .map(|&c| crate::data::Sample {
                x: x.clone(),
                y: one_hot(c, 2),
            })
            .collect(),
    )?;
    let gf = GeneratingFunction::simplex_entropy(2);
    let theta = fit_to_mean(&spec, &gf, &data, &[0.7, 0.3], derive_seed(seed, 2), 0.2, 200_000)?;
    out.push((
        "softmax_two_class".to_string(),
        hessian_bridge_check(&spec, &theta, &gf, &x, &[0.7, 0.3])?,
    ));
    Ok(out)
}
