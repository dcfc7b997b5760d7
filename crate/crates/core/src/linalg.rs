//! Small dense linear algebra: a row-major matrix, a cyclic Jacobi
//! eigensolver for symmetric matrices, and a pivoted solver for the small
//! systems the dual Newton iteration produces.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, b) in out.row_mut(r).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v`
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ * v`
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "t_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, vr) in v.iter().enumerate() {
            if *vr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    /// `self * selfᵀ`, exactly symmetric.
    pub fn gram_rows(&self) -> Mat {
        let n = self.rows;
        let mut g = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
///
/// Iterates until the largest off-diagonal magnitude is at most
/// `1e-12 * ‖A‖_F`. Only the upper triangle is trusted to be symmetric with
/// the lower one; callers should pass exactly symmetric input.
pub fn sym_eigenvalues(a: &Mat) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::Shape(format!("eigenvalues of a {}x{} matrix", a.rows, a.cols)));
    }
    let n = a.rows;
    let mut m = a.clone();
    let tol = 1e-12 * a.frobenius();
    let mut sweeps = 0;
    loop {
        let off = off_diag_max(&m);
        if off <= tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::EigenNoConvergence { sweeps });
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut m, p, q);
            }
        }
        sweeps += 1;
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

fn off_diag_max(m: &Mat) -> f64 {
    let mut off = 0.0f64;
    for i in 0..m.rows {
        for j in i + 1..m.cols {
            off = off.max(m[(i, j)].abs());
        }
    }
    off
}

fn rotate(m: &mut Mat, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let app = m[(p, p)];
    let aqq = m[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = m.rows;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        m[(k, p)] = new_kp;
        m[(p, k)] = new_kp;
        m[(k, q)] = new_kq;
        m[(q, k)] = new_kq;
    }
    m[(p, p)] = app - t * apq;
    m[(q, q)] = aqq + t * apq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
}

/// Eigenvalues of a large symmetric matrix (parameter-space Hessians), ascending.
pub fn sym_eigenvalues_dense(a: &Mat) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::Shape(format!("eigenvalues of a {}x{} matrix", a.rows, a.cols)));
    }
    let n = a.rows;
    let m = nalgebra::DMatrix::from_row_slice(n, n, &a.data);
    let mut eig: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if !a.is_square() || b.len() != n {
        return Err(Error::Shape("solve needs a square system".into()));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap_or(col);
        if m[(piv, col)].abs() <= 1e-14 * scale {
            return Err(Error::Rank { rank: col, rows: n });
        }
        if piv != col {
            for c in 0..n {
                let tmp = m[(col, c)];
                m[(col, c)] = m[(piv, c)];
                m[(piv, c)] = tmp;
            }
            x.swap(col, piv);
        }
        for r in col + 1..n {
            let f = m[(r, col)] / m[(col, col)];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[(r, c)] -= f * m[(col, c)];
            }
            x[r] -= f * x[col];
        }
    }
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[(r, c)] * x[c]).sum();
        x[r] = (x[r] - s) / m[(r, r)];
    }
    Ok(x)
}

/// Numerical rank of the rows of `g`, from the spectrum of `g gᵀ`.
pub fn row_rank(g: &Mat) -> Result<usize> {
    let eig = sym_eigenvalues(&g.gram_rows())?;
    let top = eig.last().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Ok(0);
    }
    let tol = top * 1e-12 * g.rows.max(g.cols) as f64;
    Ok(eig.iter().filter(|&&e| e > tol).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    /// Number of eigenvalues strictly below `x`, by Sylvester's law of inertia
    /// on an LDLᵀ factorization of `A - xI`.
    fn count_below(a: &Mat, x: f64) -> usize {
        let n = a.rows();
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] -= x;
        }
        let mut count = 0;
        // symmetric Gaussian elimination without pivoting; perturb exact zeros
        for k in 0..n {
            let mut d = m[(k, k)];
            if d == 0.0 {
                d = 1e-300;
            }
            if d < 0.0 {
                count += 1;
            }
            for i in k + 1..n {
                let f = m[(i, k)] / d;
                for j in k + 1..n {
                    m[(i, j)] -= f * m[(k, j)];
                }
            }
        }
        count
    }

    fn bisection_eigenvalues(a: &Mat) -> Vec<f64> {
        let n = a.rows();
        let r = a.frobenius() + 1.0;
        (0..n)
            .map(|i| {
                let (mut lo, mut hi) = (-r, r);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if count_below(a, mid) > i {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect()
    }

    fn random_sym(n: usize, rng: &mut SplitMix64) -> Mat {
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.uniform_range(-2.0, 2.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn two_by_two_hand_spectrum() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = sym_eigenvalues(&a).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-14);
        assert!((e[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix_has_zero_spectrum() {
        let e = sym_eigenvalues(&Mat::zeros(3, 3)).unwrap();
        assert_eq!(e, vec![0.0; 3]);
    }

    #[test]
    fn jacobi_matches_inertia_bisection() {
        let mut rng = SplitMix64::new(5);
        for n in 1..=16 {
            let a = random_sym(n, &mut rng);
            let jac = sym_eigenvalues(&a).unwrap();
            let bis = bisection_eigenvalues(&a);
            for (x, y) in jac.iter().zip(&bis) {
                assert!((x - y).abs() < 1e-8, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn dense_solver_agrees_with_jacobi() {
        let mut rng = SplitMix64::new(8);
        let a = random_sym(12, &mut rng);
        let j = sym_eigenvalues(&a).unwrap();
        let d = sym_eigenvalues_dense(&a).unwrap();
        for (x, y) in j.iter().zip(&d) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = Mat::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 1.0]]).unwrap();
        let x = vec![1.0, -2.0, 0.5];
        let b = a.matvec(&x);
        let got = solve(&a, &b).unwrap();
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_detects_dependent_rows() {
        let g = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        assert_eq!(row_rank(&g).unwrap(), 1);
        let g = Mat::from_rows(&[vec![1.0, 0.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        assert_eq!(row_rank(&g).unwrap(), 2);
    }

    proptest! {
        #[test]
        fn eigenvalues_sum_to_trace(seed in any::<u64>(), n in 1usize..10) {
            let mut rng = SplitMix64::new(seed);
            let a = random_sym(n, &mut rng);
            let e = sym_eigenvalues(&a).unwrap();
            let s: f64 = e.iter().sum();
            prop_assert!((s - a.trace()).abs() <= 1e-9 * (1.0 + a.frobenius()));
        }

        #[test]
        fn gram_matrix_is_psd(seed in any::<u64>(), k in 1usize..6, m in 1usize..12) {
            let mut rng = SplitMix64::new(seed);
            let data = (0..k * m).map(|_| rng.normal()).collect();
            let j = Mat::from_vec(k, m, data).unwrap();
            let e = sym_eigenvalues(&j.gram_rows()).unwrap();
            prop_assert!(e[0] >= -1e-9);
        }
    }
}
