//! Dense row-major matrices, Cholesky with a jitter ladder, triangular
//! solves and the forward-mode derivative of the Cholesky factor.

use std::ops::{Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite even with jitter {0:e}")]
    NotPositiveDefinite(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn try_cholesky(a: &Mat, jitter: f64) -> Option<Mat> {
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut s = a[(j, j)] + jitter;
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > 0.0) || !s.is_finite() {
            return None;
        }
        let ljj = s.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Lower Cholesky factor of `a + j I` for the smallest `j` in
/// `{0, jitter, 10 jitter, ..., 1e6 jitter}` that succeeds.
/// Returns the factor together with the jitter that was used.
pub fn cholesky(a: &Mat, jitter: f64) -> Result<(Mat, f64), LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if let Some(l) = try_cholesky(a, 0.0) {
        return Ok((l, 0.0));
    }
    let mut j = jitter;
    let mut last = 0.0;
    if jitter > 0.0 {
        for _ in 0..7 {
            if let Some(l) = try_cholesky(a, j) {
                return Ok((l, j));
            }
            last = j;
            j *= 10.0;
        }
    }
    Err(LinalgError::NotPositiveDefinite(last))
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    if !l.is_square() || l.rows != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "solve_lower: L is {}x{}, B is {}x{}",
            l.rows, l.cols, b.rows, b.cols
        )));
    }
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == 0.0 {
                continue;
            }
            for c in 0..m {
                let v = x[(k, c)];
                x[(i, c)] -= lik * v;
            }
        }
        let d = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= d;
        }
    }
    Ok(x)
}

/// Solves `L x = b` in place for a single right-hand side.
pub fn solve_lower_vec(l: &Mat, b: &mut [f64]) {
    let n = l.rows;
    for i in 0..n {
        let s = b[i] - dot(&l.row(i)[..i], &b[..i]);
        b[i] = s / l[(i, i)];
    }
}

/// Solves `Lᵀ x = b` in place for a single right-hand side.
pub fn solve_upper_t_vec(l: &Mat, b: &mut [f64]) {
    let n = l.rows;
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `L Lᵀ x = b`.
pub fn cho_solve_vec(l: &Mat, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    solve_lower_vec(l, &mut x);
    solve_upper_t_vec(l, &mut x);
    x
}

/// `(L Lᵀ)⁻¹` assembled column by column.
pub fn cho_inverse(l: &Mat) -> Mat {
    let n = l.rows;
    let mut inv = Mat::zeros(n, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        let col = cho_solve_vec(l, &e);
        for r in 0..n {
            inv[(r, c)] = col[r];
        }
    }
    inv
}

/// `log det(L Lᵀ)`.
pub fn logdet(l: &Mat) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Directional derivative of the Cholesky factor:
/// `dL = L Φ(L⁻¹ dΣ L⁻ᵀ)` where Φ keeps the strict lower triangle and
/// halves the diagonal.
pub fn chol_pushforward(l: &Mat, dsigma: &Mat) -> Result<Mat, LinalgError> {
    if !l.is_square() || dsigma.rows != l.rows || dsigma.cols != l.cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "chol_pushforward: L is {}x{}, dΣ is {}x{}",
            l.rows, l.cols, dsigma.rows, dsigma.cols
        )));
    }
    let n = l.rows;
    let x = solve_lower(l, dsigma)?;
    let mut p = solve_lower(l, &x.transpose())?;
    for i in 0..n {
        p[(i, i)] *= 0.5;
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
    }
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in j..=i {
                s += l[(i, k)] * p[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> Mat {
        let b = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut a = b.matmul(&b.transpose());
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        a
    }

    fn to_na(m: &Mat) -> DMatrix<f64> {
        DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
    }

    #[test]
    fn identity_factor_is_identity() {
        let (l, j) = cholesky(&Mat::identity(4), 1e-6).unwrap();
        assert_eq!(j, 0.0);
        assert!(l.max_abs_diff(&Mat::identity(4)) < 1e-15);
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = Mat::from_vec(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
        let (l, _) = cholesky(&a, 0.0).unwrap();
        let expect = Mat::from_vec(2, 2, vec![2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert!(l.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn singular_rank_one_needs_jitter() {
        let a = Mat::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let (l, j) = cholesky(&a, 1e-6).unwrap();
        assert!(j > 0.0);
        let back = l.matmul(&l.transpose());
        let mut target = a.clone();
        target[(0, 0)] += j;
        target[(1, 1)] += j;
        assert!(back.max_abs_diff(&target) < 1e-12);
    }

    #[test]
    fn negative_definite_fails() {
        let mut a = Mat::identity(3);
        a[(2, 2)] = -1.0;
        assert!(matches!(cholesky(&a, 1e-6), Err(LinalgError::NotPositiveDefinite(_))));
    }

    #[test]
    fn non_square_rejected() {
        assert!(matches!(
            cholesky(&Mat::zeros(2, 3), 0.0),
            Err(LinalgError::DimensionMismatch(_))
        ));
        assert!(matches!(
            solve_lower(&Mat::identity(3), &Mat::zeros(2, 1)),
            Err(LinalgError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn logdet_and_inverse_match_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..8 {
            let a = random_spd(n, &mut rng);
            let (l, _) = cholesky(&a, 0.0).unwrap();
            let na = to_na(&a);
            let det = na.clone().determinant();
            assert!((logdet(&l) - det.ln()).abs() < 1e-10);
            let inv = na.try_inverse().unwrap();
            let mine = cho_inverse(&l);
            for i in 0..n {
                for j in 0..n {
                    assert!((mine[(i, j)] - inv[(i, j)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn solve_lower_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(5, &mut rng);
        let (l, _) = cholesky(&a, 0.0).unwrap();
        let b = Mat::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let x = solve_lower(&l, &b).unwrap();
        assert!(l.matmul(&x).max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn pushforward_zero_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(4, &mut rng);
        let (l, _) = cholesky(&a, 0.0).unwrap();
        let dl = chol_pushforward(&l, &Mat::zeros(4, 4)).unwrap();
        assert!(dl.max_abs_diff(&Mat::zeros(4, 4)) == 0.0);
    }

    proptest! {
        #[test]
        fn factor_is_lower_with_positive_diagonal(seed in 0u64..10_000, n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let (l, j) = cholesky(&a, 1e-6).unwrap();
            for i in 0..n {
                prop_assert!(l[(i, i)] > 0.0);
                for k in (i + 1)..n {
                    prop_assert_eq!(l[(i, k)], 0.0);
                }
            }
            let mut target = a.clone();
            for i in 0..n {
                target[(i, i)] += j;
            }
            prop_assert!(l.matmul(&l.transpose()).max_abs_diff(&target) < 1e-10);
        }

        #[test]
        fn pushforward_matches_central_differences(seed in 0u64..10_000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let e = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let d = Mat::from_fn(n, n, |i, j| e[(i, j)] + e[(j, i)]);
            let (l, _) = cholesky(&a, 0.0).unwrap();
            let dl = chol_pushforward(&l, &d).unwrap();
            let h = 1e-6;
            let shift = |s: f64| Mat::from_fn(n, n, |i, j| a[(i, j)] + s * d[(i, j)]);
            let (lp, _) = cholesky(&shift(h), 0.0).unwrap();
            let (lm, _) = cholesky(&shift(-h), 0.0).unwrap();
            let fd = Mat::from_fn(n, n, |i, j| (lp[(i, j)] - lm[(i, j)]) / (2.0 * h));
            let scale = 1.0 + fd.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(dl.max_abs_diff(&fd) < 1e-6 * scale);
        }
    }
}
