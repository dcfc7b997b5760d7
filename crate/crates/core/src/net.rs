//! Small feedforward networks with exact per-sample parameter Jacobians.
//!
//! Layout: an optional embedding `Linear(input→width) + act`, then
//! `depth_blocks` repeated blocks `z = norm(act(W h + b))` with `h ← z + h`
//! when skips are on (else `h ← z`), then a head `Linear(width→output)`.
//! Parameters live in one flat vector; each linear layer owns a weight
//! segment (row-major `out × in`) followed by an optional bias segment.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::GeneratingFunction;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, sym_eigenvalues_dense, Mat};
use crate::rng::CounterRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MAX_HESSIAN_PARAMS: usize = 2000;
pub const HESSIAN_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    /// Derivative given the pre-activation `a` and output `s`; ReLU'(0) = 0.
    fn deriv(self, a: f64, s: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - s * s,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Identity,
            _ => return Err(Error::Snapshot(format!("unknown activation code {c}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    LayerNorm,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub depth_blocks: usize,
    #[serde(default)]
    pub skip: bool,
    pub activation: Activation,
    #[serde(default = "default_norm")]
    pub normalization: Normalization,
    /// Whether linear layers carry bias vectors.
    #[serde(default = "default_true")]
    pub bias: bool,
    /// Whether an input embedding layer precedes the blocks; without one the
    /// width must equal the input dimension.
    #[serde(default = "default_true")]
    pub embed: bool,
}

fn default_norm() -> Normalization {
    Normalization::None
}

impl NetSpec {
    /// `f(x) = W x (+ b)`.
    pub fn linear(input_dim: usize, output_dim: usize, bias: bool) -> Self {
        Self {
            input_dim,
            output_dim,
            width: input_dim,
            depth_blocks: 0,
            skip: false,
            activation: Activation::Identity,
            normalization: Normalization::None,
            bias,
            embed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.width == 0 {
            return Err(Error::Shape("dimensions must be positive".into()));
        }
        if !self.embed && self.width != self.input_dim {
            return Err(Error::Shape(format!(
                "without an embedding the width ({}) must equal the input dimension ({})",
                self.width, self.input_dim
            )));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut v = Vec::new();
        if self.embed {
            v.push(LayerShape {
                role: Role::Embed,
                fan_in: self.input_dim,
                fan_out: self.width,
            });
        }
        for i in 0..self.depth_blocks {
            v.push(LayerShape {
                role: Role::Block(i),
                fan_in: self.width,
                fan_out: self.width,
            });
        }
        v.push(LayerShape {
            role: Role::Head,
            fan_in: self.width,
            fan_out: self.output_dim,
        });
        v
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut offset = 0;
        for l in self.layers() {
            let name = l.role.name();
            out.push(Segment {
                name: format!("{name}.weight"),
                rows: l.fan_out,
                cols: l.fan_in,
                offset,
                fan_in: l.fan_in,
            });
            offset += l.fan_out * l.fan_in;
            if self.bias {
                out.push(Segment {
                    name: format!("{name}.bias"),
                    rows: l.fan_out,
                    cols: 1,
                    offset,
                    fan_in: l.fan_in,
                });
                offset += l.fan_out;
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.fan_out * l.fan_in + if self.bias { l.fan_out } else { 0 })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Embed,
    Block(usize),
    Head,
}

impl Role {
    fn name(self) -> String {
        match self {
            Role::Embed => "embed".into(),
            Role::Block(i) => format!("block{i}"),
            Role::Head => "head".into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    role: Role,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub fan_in: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub layout: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            theta: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        }
    }

    pub fn from_theta(spec: &NetSpec, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                theta.len(),
                spec.param_count()
            )));
        }
        Ok(Self {
            theta,
            layout: spec.layout(),
        })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.theta[s.offset..s.offset + s.len()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.layout.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.theta[s.offset..s.offset + s.len()])
    }
}

/// Uniform `[−1/√fan_in, 1/√fan_in]` for every weight and bias; entry `i` of
/// the flat vector is the `i`-th draw of a counter-based stream keyed by `seed`.
pub fn init(spec: &NetSpec, seed: u64) -> ParamVector {
    let rng = CounterRng::new(seed);
    let mut p = ParamVector::zeros(spec);
    for seg in &p.layout {
        let a = 1.0 / (seg.fan_in as f64).sqrt();
        for i in seg.offset..seg.offset + seg.len() {
            p.theta[i] = rng.uniform_range(i as u64, -a, a);
        }
    }
    p
}

struct LayerTape {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    /// `(normalized output, 1/σ̂)` when LayerNorm applies.
    norm: Option<(Vec<f64>, f64)>,
}

pub struct Tape {
    layers: Vec<LayerTape>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn affine(theta: &[f64], spec: &NetSpec, offset: usize, l: &LayerShape, x: &[f64]) -> Vec<f64> {
    let w = &theta[offset..offset + l.fan_out * l.fan_in];
    let mut out: Vec<f64> = w
        .chunks_exact(l.fan_in)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    if spec.bias {
        let b = &theta[offset + l.fan_out * l.fan_in..offset + l.fan_out * (l.fan_in + 1)];
        for (o, bi) in out.iter_mut().zip(b) {
            *o += bi;
        }
    }
    out
}

fn layer_norm(s: &[f64]) -> (Vec<f64>, f64) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (s.iter().map(|v| (v - mean) * inv).collect(), inv)
}

fn layer_norm_backward(z: &[f64], inv: f64, g: &[f64]) -> Vec<f64> {
    let n = z.len() as f64;
    let mg = g.iter().sum::<f64>() / n;
    let mgz = g.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n;
    g.iter().zip(z).map(|(gi, zi)| inv * (gi - mg - zi * mgz)).collect()
}

fn check_input(spec: &NetSpec, theta: &ParamVector, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::Shape(format!(
            "input of length {} for input_dim {}",
            x.len(),
            spec.input_dim
        )));
    }
    if theta.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "{} parameters for a network with {}",
            theta.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Forward pass recording everything the backward sweep needs.
pub fn forward_tape(spec: &NetSpec, theta: &ParamVector, x: &[f64]) -> Result<Tape> {
    check_input(spec, theta, x)?;
    spec.validate()?;
    let t = &theta.theta;
    let mut h = x.to_vec();
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut output = Vec::new();
    for l in spec.layers() {
        let pre = affine(t, spec, offset, &l, &h);
        offset += l.fan_out * l.fan_in + if spec.bias { l.fan_out } else { 0 };
        match l.role {
            Role::Head => {
                output = pre.clone();
                layers.push(LayerTape {
                    input: h.clone(),
                    pre,
                    act: Vec::new(),
                    norm: None,
                });
            }
            Role::Embed => {
                let act: Vec<f64> = pre.iter().map(|&a| spec.activation.apply(a)).collect();
                let next = act.clone();
                layers.push(LayerTape {
                    input: std::mem::replace(&mut h, next),
                    pre,
                    act,
                    norm: None,
                });
            }
            Role::Block(_) => {
                let act: Vec<f64> = pre.iter().map(|&a| spec.activation.apply(a)).collect();
                let norm = match spec.normalization {
                    Normalization::LayerNorm => Some(layer_norm(&act)),
                    Normalization::None => None,
                };
                let z = norm.as_ref().map_or(&act, |(z, _)| z);
                let next: Vec<f64> = if spec.skip {
                    z.iter().zip(&h).map(|(a, b)| a + b).collect()
                } else {
                    z.clone()
                };
                layers.push(LayerTape {
                    input: std::mem::replace(&mut h, next),
                    pre,
                    act,
                    norm,
                });
            }
        }
    }
    Ok(Tape { layers, output })
}

pub fn forward(spec: &NetSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_tape(spec, theta, x)?.output)
}

/// Hidden state entering the head.
pub fn hidden(spec: &NetSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let tape = forward_tape(spec, theta, x)?;
    Ok(tape.layers.last().expect("head layer").input.clone())
}

/// Vector-Jacobian product `Jᵀ g` for an output cotangent `g`.
pub fn backward(spec: &NetSpec, theta: &ParamVector, tape: &Tape, g: &[f64]) -> Vec<f64> {
    let t = &theta.theta;
    let layers = spec.layers();
    let mut grad = vec![0.0; t.len()];
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for l in &layers {
        offsets.push(off);
        off += l.fan_out * l.fan_in + if spec.bias { l.fan_out } else { 0 };
    }
    let mut gh = g.to_vec();
    for (idx, l) in layers.iter().enumerate().rev() {
        let lt = &tape.layers[idx];
        let ga: Vec<f64> = match l.role {
            Role::Head => gh.clone(),
            Role::Embed => gh
                .iter()
                .zip(lt.pre.iter().zip(&lt.act))
                .map(|(gi, (a, s))| gi * spec.activation.deriv(*a, *s))
                .collect(),
            Role::Block(_) => {
                let gs = match &lt.norm {
                    Some((z, inv)) => layer_norm_backward(z, *inv, &gh),
                    None => gh.clone(),
                };
                gs.iter()
                    .zip(lt.pre.iter().zip(&lt.act))
                    .map(|(gi, (a, s))| gi * spec.activation.deriv(*a, *s))
                    .collect()
            }
        };
        let o = offsets[idx];
        for (r, gr) in ga.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            let row = &mut grad[o + r * l.fan_in..o + (r + 1) * l.fan_in];
            for (dst, xi) in row.iter_mut().zip(&lt.input) {
                *dst += gr * xi;
            }
        }
        if spec.bias {
            let bo = o + l.fan_out * l.fan_in;
            for (r, gr) in ga.iter().enumerate() {
                grad[bo + r] += gr;
            }
        }
        if idx == 0 {
            break;
        }
        let w = &t[o..o + l.fan_out * l.fan_in];
        let mut gin = vec![0.0; l.fan_in];
        for (r, gr) in ga.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            for (dst, wv) in gin.iter_mut().zip(&w[r * l.fan_in..(r + 1) * l.fan_in]) {
                *dst += gr * wv;
            }
        }
        if matches!(l.role, Role::Block(_)) && spec.skip {
            for (a, b) in gin.iter_mut().zip(&gh) {
                *a += b;
            }
        }
        gh = gin;
    }
    grad
}

/// `∇_θ f_θ(x)` as a `k × m` matrix, one backward sweep per output.
pub fn jacobian(spec: &NetSpec, theta: &ParamVector, x: &[f64]) -> Result<Mat> {
    let tape = forward_tape(spec, theta, x)?;
    jacobian_from_tape(spec, theta, &tape)
}

pub fn jacobian_from_tape(spec: &NetSpec, theta: &ParamVector, tape: &Tape) -> Result<Mat> {
    let k = spec.output_dim;
    let m = theta.len();
    let mut data = Vec::with_capacity(k * m);
    let mut e = vec![0.0; k];
    for i in 0..k {
        e[i] = 1.0;
        data.extend(backward(spec, theta, tape, &e));
        e[i] = 0.0;
    }
    Mat::from_vec(k, m, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureSpectrum {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub frob_norm: f64,
    pub diag_norm: f64,
}

impl StructureSpectrum {
    /// Spectrum of a symmetric PSD structure matrix; negative round-off is clamped to 0.
    pub fn of_matrix(a: &Mat) -> Result<Self> {
        let eig = sym_eigenvalues(a)?;
        let diag_norm = (0..a.rows()).map(|i| a[(i, i)] * a[(i, i)]).sum::<f64>().sqrt();
        Ok(Self {
            lambda_min: eig.first().copied().unwrap_or(0.0).max(0.0),
            lambda_max: eig.last().copied().unwrap_or(0.0).max(0.0),
            frob_norm: a.frobenius(),
            diag_norm,
        })
    }
}

/// `A_x = J Jᵀ` (k × k).
pub fn structure_matrix(spec: &NetSpec, theta: &ParamVector, x: &[f64]) -> Result<Mat> {
    Ok(jacobian(spec, theta, x)?.gram_rows())
}

pub fn structure_spectrum(spec: &NetSpec, theta: &ParamVector, x: &[f64]) -> Result<StructureSpectrum> {
    StructureSpectrum::of_matrix(&structure_matrix(spec, theta, x)?)
}

/// `(min_x λ_min(A_x), max_x λ_max(A_x))` over a batch.
pub fn dataset_spectrum(spec: &NetSpec, theta: &ParamVector, xs: &[Vec<f64>]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spectra: Vec<StructureSpectrum> = xs
        .par_iter()
        .map(|x| structure_spectrum(spec, theta, x))
        .collect::<Result<_>>()?;
    Ok(spectra.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), s| {
        (lo.min(s.lambda_min), hi.max(s.lambda_max))
    }))
}

/// Finite-difference Hessian of `θ ↦ d_Φ(y, f_θ(x))` before symmetrization.
pub fn loss_hessian_raw(
    spec: &NetSpec,
    theta: &ParamVector,
    gf: &GeneratingFunction,
    x: &[f64],
    y: &[f64],
) -> Result<Mat> {
    let m = theta.len();
    if m > MAX_HESSIAN_PARAMS {
        return Err(Error::TooManyParameters {
            m,
            limit: MAX_HESSIAN_PARAMS,
        });
    }
    let cols: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus.theta[j] += HESSIAN_FD_STEP;
            minus.theta[j] -= HESSIAN_FD_STEP;
            let gp = crate::optim::per_sample_grad(spec, &plus, gf, x, y)?;
            let gm = crate::optim::per_sample_grad(spec, &minus, gf, x, y)?;
            Ok(gp
                .iter()
                .zip(&gm)
                .map(|(a, b)| (a - b) / (2.0 * HESSIAN_FD_STEP))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut h = Mat::zeros(m, m);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            h[(i, j)] = *v;
        }
    }
    Ok(h)
}

/// Symmetrized finite-difference loss Hessian, `(H + Hᵀ)/2`.
pub fn loss_hessian(spec: &NetSpec, theta: &ParamVector, gf: &GeneratingFunction, x: &[f64], y: &[f64]) -> Result<Mat> {
    let raw = loss_hessian_raw(spec, theta, gf, x, y)?;
    let m = raw.rows();
    let mut h = raw.clone();
    for i in 0..m {
        for j in 0..m {
            h[(i, j)] = 0.5 * (raw[(i, j)] + raw[(j, i)]);
        }
    }
    Ok(h)
}

pub fn top_eigenvalue(h: &Mat) -> Result<f64> {
    Ok(sym_eigenvalues_dense(h)?.last().copied().unwrap_or(0.0))
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"CJLBSNAP";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub spec: NetSpec,
    pub seed: u64,
    pub params: ParamVector,
}

/// Header (magic, version, spec fields, seed, count) followed by
/// little-endian f64 parameters.
pub fn write_snapshot<W: Write>(mut w: W, spec: &NetSpec, seed: u64, params: &ParamVector) -> std::io::Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    for v in [spec.input_dim, spec.output_dim, spec.width, spec.depth_blocks] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let norm = match spec.normalization {
        Normalization::None => 0u8,
        Normalization::LayerNorm => 1,
    };
    w.write_all(&[
        spec.skip as u8,
        spec.activation.code(),
        norm,
        spec.bias as u8,
        spec.embed as u8,
    ])?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in &params.theta {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn snapshot_bytes(spec: &NetSpec, seed: u64, params: &ParamVector) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * params.len());
    write_snapshot(&mut buf, spec, seed, params).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<Snapshot> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::Snapshot(e.to_string()))?;
    let mut cur = &buf[..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::TruncatedFile("snapshot".into()));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    }
    let flags = take(5)?.to_vec();
    let flag = |b: u8| -> Result<bool> {
        match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Snapshot(format!("bad flag byte {b}"))),
        }
    };
    let spec = NetSpec {
        input_dim: dims[0],
        output_dim: dims[1],
        width: dims[2],
        depth_blocks: dims[3],
        skip: flag(flags[0])?,
        activation: Activation::from_code(flags[1])?,
        normalization: if flag(flags[2])? {
            Normalization::LayerNorm
        } else {
            Normalization::None
        },
        bias: flag(flags[3])?,
        embed: flag(flags[4])?,
    };
    spec.validate()?;
    let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if count != spec.param_count() {
        return Err(Error::Snapshot(format!(
            "{count} parameters recorded for a network with {}",
            spec.param_count()
        )));
    }
    let theta = take(8 * count)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if !cur.is_empty() {
        return Err(Error::Snapshot("trailing bytes".into()));
    }
    Ok(Snapshot {
        spec,
        seed,
        params: ParamVector::from_theta(&spec, theta)?,
    })
}
