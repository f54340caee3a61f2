//! Small numerical helpers shared across modules: quadrature, interpolation,
//! and symmetric factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// `n` equidistant points on [0, 1].
pub fn unit_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Trapezoid quadrature weights for an increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 1..n {
        let h = grid[i] - grid[i - 1];
        w[i - 1] += 0.5 * h;
        w[i] += 0.5 * h;
    }
    w
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    trapezoid_weights(grid).iter().zip(values).map(|(w, v)| w * v).sum()
}

/// Piecewise linear interpolation on an increasing grid; constant extrapolation.
pub fn interp_linear(grid: &[f64], values: &[f64], t: f64) -> f64 {
    let n = grid.len();
    debug_assert_eq!(n, values.len());
    if n == 1 || t <= grid[0] {
        return values[0];
    }
    if t >= grid[n - 1] {
        return values[n - 1];
    }
    let hi = grid.partition_point(|&g| g <= t);
    let lo = hi - 1;
    if grid[lo] == t {
        return values[lo];
    }
    let frac = (t - grid[lo]) / (grid[hi] - grid[lo]);
    values[lo] + frac * (values[hi] - values[lo])
}

/// Cholesky factorization; on failure retries once with a ridge of
/// `1e-10 * trace` added to the diagonal.
pub fn cholesky_ridge(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let ridge = 1e-10 * m.trace().abs().max(f64::MIN_POSITIVE);
    let mut r = m.clone();
    for i in 0..r.nrows() {
        r[(i, i)] += ridge;
    }
    r.cholesky()
        .ok_or_else(|| Error::Singular(format!("{}x{} system after ridge", m.nrows(), m.ncols())))
}

/// Cholesky factorization that rejects numerically singular matrices.
/// Factorizations with a pivot ratio below 1e-14 fall back to an eigenvalue
/// check; matrices that pass it are factored with the ridge fallback.
pub fn cholesky_strict(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() == 0 {
        return m.clone().cholesky().ok_or_else(|| Error::Singular(what.to_string()));
    }
    if let Some(c) = m.clone().cholesky() {
        let l = c.l_dirty();
        let piv: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
        let hi = piv.iter().cloned().fold(0.0, f64::max);
        let lo = piv.iter().cloned().fold(f64::INFINITY, f64::min);
        if lo > 1e-14 * hi {
            return Ok(c);
        }
    }
    let (values, _) = sym_eigen_desc(m);
    let top = values[0];
    let bottom = *values.last().expect("non-empty");
    if top <= 0.0 || bottom <= 1e-13 * top {
        return Err(Error::Singular(format!(
            "{what}: smallest eigenvalue {bottom:.3e} vs largest {top:.3e}"
        )));
    }
    cholesky_ridge(m)
}

pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order (columns of the returned matrix follow the same order).
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (j, &i) in order.iter().enumerate() {
        vectors.set_column(j, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Numerical rank of a symmetric PSD matrix (relative eigenvalue tolerance).
pub fn psd_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let (values, _) = sym_eigen_desc(m);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    if top == 0.0 {
        return 0;
    }
    values.iter().filter(|&&v| v > rel_tol * top).count()
}

/// Flip `v` so that its entry of largest absolute value is positive.
pub fn orient_by_max_abs(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolated quantile (type 7), `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn dvec(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}
