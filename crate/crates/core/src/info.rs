//! Generalized entropies and information losses over finite joint
//! distributions. All entropies are in nats.

use std::collections::{BTreeMap, HashMap};

use crate::convex::GeneratingFunction;
use crate::error::{Error, Result};

/// Exact byte encoding of a raw input; feature equality is bitwise.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKey(pub Vec<u8>);

impl FeatureKey {
    pub fn from_f64s(x: &[f64]) -> Self {
        Self(x.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn from_label(s: &str) -> Self {
        Self(s.as_bytes().to_vec())
    }

    pub fn from_index(i: u64) -> Self {
        Self(i.to_le_bytes().to_vec())
    }

    /// Key of a vector rounded to `digits` decimals (used to group real-valued
    /// model outputs). Negative zero is folded into zero.
    pub fn quantized(x: &[f64], digits: i32) -> Self {
        let scale = 10f64.powi(digits);
        Self(
            x.iter()
                .flat_map(|v| {
                    let q = (v * scale).round();
                    let q = if q == 0.0 { 0.0 } else { q };
                    q.to_le_bytes()
                })
                .collect(),
        )
    }
}

fn vec_bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    x_support: Vec<FeatureKey>,
    y_support: Vec<Vec<f64>>,
    /// Row-major `|X| × |Y|`.
    prob: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMeanTable {
    pub mean_given_x: BTreeMap<FeatureKey, Vec<f64>>,
    pub marginal_mean: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShannonQuantities {
    pub h_y: f64,
    pub h_y_given_x: f64,
    pub mi: f64,
}

impl DiscreteJoint {
    pub fn new(x_support: Vec<FeatureKey>, y_support: Vec<Vec<f64>>, prob: Vec<Vec<f64>>) -> Result<Self> {
        if x_support.is_empty() || y_support.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if prob.len() != x_support.len() || prob.iter().any(|r| r.len() != y_support.len()) {
            return Err(Error::Shape("probability table does not match supports".into()));
        }
        let d = y_support[0].len();
        if y_support.iter().any(|y| y.len() != d) {
            return Err(Error::Shape("targets differ in dimension".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !x_support.iter().all(|k| seen.insert(k.clone())) {
            return Err(Error::Shape("duplicate feature key".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !y_support.iter().all(|y| seen.insert(vec_bits(y))) {
            return Err(Error::Shape("duplicate target vector".into()));
        }
        if prob.iter().flatten().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Range("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = prob.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Range(format!("probabilities sum to {total}")));
        }
        Ok(Self {
            x_support,
            y_support,
            prob,
        })
    }

    /// Empirical distribution of a sample; supports appear in first-seen order.
    pub fn from_samples(pairs: &[(FeatureKey, Vec<f64>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = pairs[0].1.len();
        let mut xs: Vec<FeatureKey> = Vec::new();
        let mut x_index: HashMap<FeatureKey, usize> = HashMap::new();
        let mut ys: Vec<Vec<f64>> = Vec::new();
        let mut y_index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut cells: Vec<(usize, usize)> = Vec::with_capacity(pairs.len());
        for (key, y) in pairs {
            if y.len() != d {
                return Err(Error::Shape("targets differ in dimension".into()));
            }
            let xi = *x_index.entry(key.clone()).or_insert_with(|| {
                xs.push(key.clone());
                xs.len() - 1
            });
            let yi = *y_index.entry(vec_bits(y)).or_insert_with(|| {
                ys.push(y.clone());
                ys.len() - 1
            });
            cells.push((xi, yi));
        }
        let mut counts = vec![vec![0usize; ys.len()]; xs.len()];
        for (xi, yi) in cells {
            counts[xi][yi] += 1;
        }
        let n = pairs.len() as f64;
        let prob = counts
            .into_iter()
            .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
            .collect();
        Self::new(xs, ys, prob)
    }

    pub fn x_support(&self) -> &[FeatureKey] {
        &self.x_support
    }

    pub fn y_support(&self) -> &[Vec<f64>] {
        &self.y_support
    }

    pub fn prob(&self) -> &[Vec<f64>] {
        &self.prob
    }

    pub fn y_dim(&self) -> usize {
        self.y_support[0].len()
    }

    pub fn cell(&self, x: &FeatureKey, y: &[f64]) -> f64 {
        let bits = vec_bits(y);
        match (
            self.x_support.iter().position(|k| k == x),
            self.y_support.iter().position(|v| vec_bits(v) == bits),
        ) {
            (Some(i), Some(j)) => self.prob[i][j],
            _ => 0.0,
        }
    }

    pub fn x_marginal(&self) -> Vec<f64> {
        self.prob.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn y_marginal(&self) -> Vec<f64> {
        (0..self.y_support.len())
            .map(|j| self.prob.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// `‖q‖²` over all cells.
    pub fn norm_sq(&self) -> f64 {
        self.prob.iter().flatten().map(|p| p * p).sum()
    }

    /// `Ȳ|x` for each x in support order (zero vector for probability-zero rows).
    pub fn conditional_mean_rows(&self) -> Vec<Vec<f64>> {
        let d = self.y_dim();
        self.prob
            .iter()
            .map(|row| {
                let qx: f64 = row.iter().sum();
                let mut mean = vec![0.0; d];
                if qx > 0.0 {
                    for (p, y) in row.iter().zip(&self.y_support) {
                        for (m, v) in mean.iter_mut().zip(y) {
                            *m += p / qx * v;
                        }
                    }
                }
                mean
            })
            .collect()
    }

    pub fn conditional_means(&self) -> ConditionalMeanTable {
        let rows = self.conditional_mean_rows();
        let qx = self.x_marginal();
        let d = self.y_dim();
        let mut marginal_mean = vec![0.0; d];
        for (row, q) in rows.iter().zip(&qx) {
            for (m, v) in marginal_mean.iter_mut().zip(row) {
                *m += q * v;
            }
        }
        ConditionalMeanTable {
            mean_given_x: self.x_support.iter().cloned().zip(rows).collect(),
            marginal_mean,
        }
    }

    fn is_one_hot(&self) -> bool {
        self.y_support
            .iter()
            .all(|y| y.iter().filter(|&&v| v == 1.0).count() == 1 && y.iter().all(|&v| v == 0.0 || v == 1.0))
    }
}

/// `E[Φ(Y)] − Φ(Ȳ)` for a finite distribution given as atoms with probabilities.
pub fn gen_entropy(gf: &GeneratingFunction, dist: &[(Vec<f64>, f64)]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = dist.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Range(format!("probabilities sum to {total}")));
    }
    let mut mean = vec![0.0; gf.dim];
    let mut expected = 0.0;
    for (y, p) in dist {
        if *p == 0.0 {
            continue;
        }
        expected += p * gf.eval_target(y)?;
        for (m, v) in mean.iter_mut().zip(y) {
            *m += p * v;
        }
    }
    Ok(expected - gf.eval_target(&mean)?)
}

/// `E_X[Ent_Φ(Y | X = x)]`.
pub fn gen_cond_entropy(gf: &GeneratingFunction, joint: &DiscreteJoint) -> Result<f64> {
    let mut total = 0.0;
    for row in &joint.prob {
        let qx: f64 = row.iter().sum();
        if qx == 0.0 {
            continue;
        }
        let dist: Vec<(Vec<f64>, f64)> = joint
            .y_support
            .iter()
            .zip(row)
            .map(|(y, p)| (y.clone(), p / qx))
            .collect();
        total += qx * gen_entropy(gf, &dist)?;
    }
    Ok(total)
}

fn shannon(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

pub fn shannon_quantities(joint: &DiscreteJoint) -> Result<ShannonQuantities> {
    if !joint.is_one_hot() {
        return Err(Error::Shape("Shannon quantities need one-hot targets".into()));
    }
    let h_y = shannon(joint.y_marginal());
    let h_xy = shannon(joint.prob.iter().flatten().copied());
    let h_x = shannon(joint.x_marginal());
    let h_y_given_x = h_xy - h_x;
    Ok(ShannonQuantities {
        h_y,
        h_y_given_x,
        mi: h_y - h_y_given_x,
    })
}

/// `|X| − |W|`: how many support points a map collapses.
pub fn absolute_info_loss(x_count: usize, distinct_outputs: usize) -> Result<usize> {
    if distinct_outputs == 0 || distinct_outputs > x_count {
        return Err(Error::Range(format!(
            "{distinct_outputs} distinct outputs from {x_count} inputs"
        )));
    }
    Ok(x_count - distinct_outputs)
}

/// Conditional-mean ensembles before and after grouping:
/// `(Ȳ|x, q(x))` per input and `(Ȳ|w, q(w))` per group, with each input's
/// group index.
pub struct GroupedMeans {
    pub by_x: Vec<(Vec<f64>, f64)>,
    pub by_group: Vec<(Vec<f64>, f64)>,
    pub group_of: Vec<usize>,
}

pub fn grouped_means(joint: &DiscreteJoint, grouping: &HashMap<FeatureKey, FeatureKey>) -> Result<GroupedMeans> {
    let rows = joint.conditional_mean_rows();
    let qx = joint.x_marginal();
    let d = joint.y_dim();
    let mut group_ids: HashMap<&FeatureKey, usize> = HashMap::new();
    let mut by_group: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut group_of = Vec::with_capacity(rows.len());
    for (i, key) in joint.x_support.iter().enumerate() {
        let g = grouping
            .get(key)
            .ok_or_else(|| Error::MissingKey(format!("{:02x?}", key.0)))?;
        let id = *group_ids.entry(g).or_insert_with(|| {
            by_group.push((vec![0.0; d], 0.0));
            by_group.len() - 1
        });
        group_of.push(id);
        let (acc, mass) = &mut by_group[id];
        for (a, v) in acc.iter_mut().zip(&rows[i]) {
            *a += qx[i] * v;
        }
        *mass += qx[i];
    }
    for (acc, mass) in &mut by_group {
        if *mass > 0.0 {
            for a in acc.iter_mut() {
                *a /= *mass;
            }
        }
    }
    Ok(GroupedMeans {
        by_x: rows.into_iter().zip(qx).collect(),
        by_group,
        group_of,
    })
}

/// `E_X[B_Φ(Ȳ|X, Ȳ|g(X))]`.
pub fn relative_info_loss(
    gf: &GeneratingFunction,
    joint: &DiscreteJoint,
    grouping: &HashMap<FeatureKey, FeatureKey>,
) -> Result<f64> {
    let gm = grouped_means(joint, grouping)?;
    let mut total = 0.0;
    for ((mean_x, q), g) in gm.by_x.iter().zip(&gm.group_of) {
        if *q == 0.0 {
            continue;
        }
        total += q * gf.bregman_lenient(mean_x, &gm.by_group[*g].0)?;
    }
    Ok(total)
}
