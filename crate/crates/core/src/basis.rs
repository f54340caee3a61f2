//! B-spline bases on [0, 1], difference penalties and tensor-product helpers.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::psd_rank;

/// Marginal spline basis with equidistant interior knots and boundary knots
/// replicated `degree + 1` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub degree: usize,
    pub num_basis: usize,
    pub penalty_order: usize,
}

impl SplineSpec {
    pub fn new(degree: usize, num_basis: usize, penalty_order: usize) -> Result<Self> {
        let spec = SplineSpec {
            degree,
            num_basis,
            penalty_order,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn cubic(num_basis: usize, penalty_order: usize) -> Result<Self> {
        Self::new(3, num_basis, penalty_order)
    }

    pub fn check(&self) -> Result<()> {
        if self.num_basis < self.degree + 1 {
            return Err(Error::InvalidArgument(format!(
                "num_basis {} must be at least degree + 1 = {}",
                self.num_basis,
                self.degree + 1
            )));
        }
        if self.penalty_order >= self.num_basis {
            return Err(Error::InvalidArgument(format!(
                "penalty order {} must be below num_basis {}",
                self.penalty_order, self.num_basis
            )));
        }
        Ok(())
    }

    pub fn knots(&self) -> Vec<f64> {
        let p = self.degree;
        let segments = self.num_basis - p;
        let mut knots = vec![0.0; p + 1];
        knots.extend((1..segments).map(|k| k as f64 / segments as f64));
        knots.extend(std::iter::repeat_n(1.0, p + 1));
        knots
    }

    pub fn penalty(&self) -> Result<PenaltyBlock> {
        difference_penalty(self.num_basis, self.penalty_order)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
}

impl PenaltyBlock {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Non-zero basis values at `t`: returns the index of the first non-zero
/// function and the `degree + 1` values starting there.
pub fn bspline_local(spec: &SplineSpec, knots: &[f64], t: f64) -> (usize, Vec<f64>) {
    let p = spec.degree;
    let n = spec.num_basis;
    // Knot span with knots[span] <= t < knots[span + 1]; t = 1 uses the last span.
    let span = if t >= 1.0 {
        n - 1
    } else {
        let hi = knots.partition_point(|&k| k <= t);
        (hi - 1).clamp(p, n - 1)
    };
    let mut values = vec![0.0; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    values[0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { values[r] / denom } else { 0.0 };
            values[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        values[j] = saved;
    }
    (span - p, values)
}

/// Design matrix of basis evaluations, one row per point.
pub fn bspline_design(spec: &SplineSpec, points: &[f64]) -> Result<DMatrix<f64>> {
    spec.check()?;
    let knots = spec.knots();
    let mut out = DMatrix::zeros(points.len(), spec.num_basis);
    for (i, &t) in points.iter().enumerate() {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                what: "spline evaluation point".into(),
                value: t,
            });
        }
        let (first, values) = bspline_local(spec, &knots, t);
        for (k, v) in values.into_iter().enumerate() {
            out[(i, first + k)] = v;
        }
    }
    Ok(out)
}

/// `DᵀD` for the `order`-th difference operator on `num_basis` coefficients.
pub fn difference_penalty(num_basis: usize, order: usize) -> Result<PenaltyBlock> {
    if order >= num_basis {
        return Err(Error::InvalidArgument(format!(
            "difference order {order} must be below the number of coefficients {num_basis}"
        )));
    }
    let mut d = DMatrix::<f64>::identity(num_basis, num_basis);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        d = DMatrix::from_fn(rows, num_basis, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(PenaltyBlock {
        matrix: d.transpose() * &d,
        rank: num_basis - order,
    })
}

/// Row-wise tensor product: column `j * b + k` is `A[:, j] .* B[:, k]`.
pub fn row_tensor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "row tensor of {} and {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let (na, nb) = (a.ncols(), b.ncols());
    Ok(DMatrix::from_fn(a.nrows(), na * nb, |i, c| {
        a[(i, c / nb)] * b[(i, c % nb)]
    }))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `lx * (Px ⊗ I) + lt * (I ⊗ Pt)`, matching the column order of [`row_tensor`].
pub fn tensor_penalty(px: &PenaltyBlock, pt: &PenaltyBlock, lx: f64, lt: f64) -> Result<PenaltyBlock> {
    if lx < 0.0 || lt < 0.0 || !lx.is_finite() || !lt.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "smoothing parameters must be finite and non-negative (got {lx}, {lt})"
        )));
    }
    let ix = DMatrix::<f64>::identity(px.dim(), px.dim());
    let it = DMatrix::<f64>::identity(pt.dim(), pt.dim());
    let matrix = kron(&px.matrix, &it) * lx + kron(&ix, &pt.matrix) * lt;
    let rank = psd_rank(&matrix, 1e-10);
    Ok(PenaltyBlock { matrix, rank })
}
