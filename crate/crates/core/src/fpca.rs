//! Univariate eigendecomposition of smoothed covariance operators and
//! univariate score prediction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covsmooth::CovarianceModel;
use crate::error::{Error, Result};
use crate::fundata::FunDataset;
use crate::numeric::{interp_linear, orient_by_max_abs, sym_eigen_desc, trapezoid_weights, unit_grid};
use crate::pls::{BlockDesign, DesignBlock, PenaltyTerm, PlsProblem};

/// Default number of equidistant grid points for operator evaluation.
pub const DEFAULT_GRID: usize = 101;

/// Relative eigenvalue cut-off below which components are dropped.
pub const POSITIVITY_TOL: f64 = 1e-10;

/// Eigenpairs of one process on one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniEigenSet {
    pub process: String,
    pub dim: String,
    pub grid: Vec<f64>,
    /// `grid.len() x m`, orthonormal under trapezoid quadrature.
    pub eigenfunctions: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl UniEigenSet {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Eigenfunction `k` at `t` by linear interpolation on the grid.
    pub fn eval(&self, k: usize, t: f64) -> f64 {
        let col = self.eigenfunctions.column(k);
        interp_linear(&self.grid, col.as_slice(), t)
    }
}

fn check_equidistant(grid: &[f64]) -> Result<()> {
    if grid.len() < 20 {
        return Err(Error::InvalidArgument(format!(
            "operator grid needs at least 20 points, got {}",
            grid.len()
        )));
    }
    let h = grid[1] - grid[0];
    let bad = grid
        .windows(2)
        .any(|w| !(w[1] > w[0]) || ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(1e-300));
    if bad {
        return Err(Error::InvalidArgument(
            "operator grid must be equidistant and increasing".into(),
        ));
    }
    Ok(())
}

/// Eigenpairs of the integral operator with kernel `k` (evaluated on
/// `grid x grid`), discretized by trapezoid quadrature.
pub fn univariate_fpca(k: &DMatrix<f64>, grid: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    check_equidistant(grid)?;
    let n = grid.len();
    if k.nrows() != n || k.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "kernel is {}x{}, grid has {n} points",
            k.nrows(),
            k.ncols()
        )));
    }
    let asym = (k - k.transpose()).amax();
    if asym > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "kernel is not symmetric (max deviation {asym:.3e})"
        )));
    }
    let w = trapezoid_weights(grid);
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let a = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]);
    let (values, vectors) = sym_eigen_desc(&a);
    let top = values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Ok((DMatrix::zeros(n, 0), Vec::new()));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| values[i] > POSITIVITY_TOL * top).collect();
    let mut phi = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let mut v: Vec<f64> = (0..n).map(|r| vectors[(r, i)] / sw[r]).collect();
        orient_by_max_abs(&mut v);
        phi.set_column(c, &DVector::from_vec(v));
    }
    Ok((phi, keep.iter().map(|&i| values[i]).collect()))
}

/// Univariate eigensets for every process and dimension of a covariance
/// model, indexed `[process][dim]`.
pub fn eigensets(cm: &CovarianceModel, grid_points: usize) -> Result<Vec<Vec<UniEigenSet>>> {
    let grid = unit_grid(grid_points);
    use rayon::prelude::*;
    (0..cm.processes.len())
        .map(|g| {
            (0..cm.dims.len())
                .into_par_iter()
                .map(|d| {
                    let k = cm.surface_on_grid(g, d, &grid)?;
                    let (phi, nu) = univariate_fpca(&k, &grid)?;
                    Ok(UniEigenSet {
                        process: cm.processes[g].clone(),
                        dim: cm.dims[d].clone(),
                        grid: grid.clone(),
                        eigenfunctions: phi,
                        eigenvalues: nu,
                    })
                })
                .collect()
        })
        .collect()
}

/// Predicted univariate scores of one process: one row per level, columns
/// grouped by dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub process: String,
    pub levels: Vec<String>,
    /// `(dimension index, component index)` per column.
    pub columns: Vec<(usize, usize)>,
    pub scores: DMatrix<f64>,
}

/// Joint best linear prediction of all processes' univariate scores, one
/// penalized solve per dimension with score penalties `1/ν` and observation
/// weights `1/σ²`.
pub fn predict_scores(
    centered: &FunDataset,
    sets: &[Vec<UniEigenSet>],
    cm: &CovarianceModel,
) -> Result<Vec<ScoreMatrix>> {
    if sets.len() != cm.processes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} eigenset groups for {} processes",
            sets.len(),
            cm.processes.len()
        )));
    }
    if sets.iter().all(|s| s.iter().all(UniEigenSet::is_empty)) {
        return Err(Error::InvalidArgument("no process has any eigenfunctions".into()));
    }
    let layer_of: Vec<usize> = cm
        .processes
        .iter()
        .map(|p| centered.layer_index(p))
        .collect::<Result<_>>()?;
    let mut out: Vec<ScoreMatrix> = cm
        .processes
        .iter()
        .zip(&layer_of)
        .enumerate()
        .map(|(g, (p, &j))| {
            let levels = centered.layers[j].levels.clone();
            let columns: Vec<(usize, usize)> = (0..cm.dims.len())
                .flat_map(|d| (0..sets[g][d].len()).map(move |k| (d, k)))
                .collect();
            ScoreMatrix {
                process: p.clone(),
                scores: DMatrix::zeros(levels.len(), columns.len()),
                levels,
                columns,
            }
        })
        .collect();

    let dim_pos = |d: usize| -> Result<usize> { centered.dim_index(&cm.dims[d]) };
    for d in 0..cm.dims.len() {
        let active: Vec<usize> = (0..sets.len()).filter(|&g| !sets[g][d].is_empty()).collect();
        if active.is_empty() {
            continue;
        }
        let dd = dim_pos(d)?;
        let mut y = Vec::new();
        let mut obs: Vec<(usize, f64)> = Vec::new();
        for (i, c) in centered.curves().iter().enumerate() {
            for (t, v) in c.points[dd].t.iter().zip(&c.points[dd].y) {
                obs.push((i, *t));
                y.push(*v);
            }
        }
        if y.is_empty() {
            continue;
        }
        let sigma2 = cm.sigma2[d];
        let blocks: Vec<DesignBlock> = active
            .iter()
            .map(|&g| {
                let set = &sets[g][d];
                let j = layer_of[g];
                let level: Vec<usize> = obs.iter().map(|&(i, _)| centered.curves()[i].levels[j]).collect();
                let values = DMatrix::from_fn(obs.len(), set.len(), |r, k| set.eval(k, obs[r].1));
                let pen = DMatrix::from_diagonal(&DVector::from_iterator(
                    set.len(),
                    set.eigenvalues.iter().map(|nu| 1.0 / nu),
                ));
                DesignBlock {
                    name: cm.processes[g].clone(),
                    design: BlockDesign::Grouped {
                        level,
                        n_levels: centered.layers[j].levels.len(),
                        values,
                    },
                    penalties: vec![PenaltyTerm::new(pen, "scores")],
                }
            })
            .collect();
        let n = y.len();
        let problem = PlsProblem::new(DVector::from_vec(y), DVector::from_element(n, 1.0 / sigma2), blocks)?;
        let lambda: BTreeMap<String, f64> = [("scores".to_string(), 1.0)].into();
        let coef = problem.gram()?.solve_coefficients(&lambda)?;
        let mut off = 0;
        for &g in &active {
            let m = sets[g][d].len();
            let sm = &mut out[g];
            let first = sm
                .columns
                .iter()
                .position(|&(dc, _)| dc == d)
                .expect("dimension columns");
            for v in 0..sm.levels.len() {
                for k in 0..m {
                    sm.scores[(v, first + k)] = coef[off + v * m + k];
                }
            }
            off += sm.levels.len() * m;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineSpec;
    use crate::fundata::{CurveInput, DimPoints, CURVE_LAYER};
    use proptest::prelude::*;
    use std::f64::consts::{PI, SQRT_2};

    fn fourier(k: usize, t: f64) -> f64 {
        match k {
            0 => SQRT_2 * (2.0 * PI * t).sin(),
            1 => SQRT_2 * (2.0 * PI * t).cos(),
            _ => SQRT_2 * (4.0 * PI * t).sin(),
        }
    }

    fn kernel(grid: &[f64], nus: &[f64]) -> DMatrix<f64> {
        let n = grid.len();
        DMatrix::from_fn(n, n, |i, j| {
            nus.iter()
                .enumerate()
                .map(|(k, nu)| nu * fourier(k, grid[i]) * fourier(k, grid[j]))
                .sum()
        })
    }

    #[test]
    fn rank_one_kernel() {
        let grid = unit_grid(101);
        let (phi, nu) = univariate_fpca(&kernel(&grid, &[2.0]), &grid).unwrap();
        assert_eq!(nu.len(), 1);
        assert!((nu[0] - 2.0).abs() < 1e-3);
        let w = trapezoid_weights(&grid);
        let sign = if phi[(25, 0)] > 0.0 { 1.0 } else { -1.0 };
        let err: f64 = (0..101)
            .map(|i| w[i] * (sign * phi[(i, 0)] - fourier(0, grid[i])).powi(2))
            .sum();
        assert!(err.sqrt() < 1e-3);
    }

    #[test]
    fn zero_kernel_is_empty() {
        let grid = unit_grid(101);
        let (phi, nu) = univariate_fpca(&DMatrix::zeros(101, 101), &grid).unwrap();
        assert!(nu.is_empty());
        assert_eq!(phi.ncols(), 0);
    }

    #[test]
    fn three_component_kernel() {
        let grid = unit_grid(101);
        let k = kernel(&grid, &[3.0, 2.0, 1.0]);
        let (phi, nu) = univariate_fpca(&k, &grid).unwrap();
        assert_eq!(nu.len(), 3);
        for (a, b) in nu.iter().zip([3.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-3);
        }
        let w = DMatrix::from_diagonal(&DVector::from_vec(trapezoid_weights(&grid)));
        let gram = phi.transpose() * w * &phi;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-6);
        let trace: f64 = crate::numeric::trapezoid(&grid, &(0..101).map(|i| k[(i, i)]).collect::<Vec<_>>());
        assert!((nu.iter().sum::<f64>() - trace).abs() / trace < 0.02);
    }

    #[test]
    fn rejects_asymmetric_or_coarse_input() {
        let grid = unit_grid(101);
        let mut k = kernel(&grid, &[1.0]);
        k[(0, 1)] += 1e-6;
        assert!(univariate_fpca(&k, &grid).is_err());
        let g = unit_grid(10);
        assert!(univariate_fpca(&DMatrix::zeros(10, 10), &g).is_err());
    }

    fn single_process_model(sigma2: f64) -> CovarianceModel {
        CovarianceModel {
            basis: SplineSpec::cubic(5, 2).unwrap(),
            dims: vec!["a".into()],
            processes: vec![CURVE_LAYER.into()],
            surfaces: vec![vec![DMatrix::zeros(5, 5)]],
            sigma2: vec![sigma2],
            lambda: vec![BTreeMap::new()],
            warnings: vec![],
        }
    }

    fn set_from(nus: &[f64]) -> UniEigenSet {
        let grid = unit_grid(101);
        UniEigenSet {
            process: CURVE_LAYER.into(),
            dim: "a".into(),
            eigenfunctions: DMatrix::from_fn(101, nus.len(), |i, k| fourier(k, grid[i])),
            grid,
            eigenvalues: nus.to_vec(),
        }
    }

    fn one_curve(t: Vec<f64>, y: Vec<f64>) -> FunDataset {
        FunDataset::new(
            vec!["a".into()],
            vec![],
            vec![],
            vec![CurveInput {
                id: "c".into(),
                points: vec![DimPoints { t, y }],
                covariates: vec![],
                labels: vec![],
            }],
        )
        .unwrap()
    }

    #[test]
    fn dense_noiseless_projection() {
        let grid = unit_grid(101);
        let y: Vec<f64> = grid.iter().map(|&t| 1.5 * fourier(0, t)).collect();
        let ds = one_curve(grid.clone(), y.clone());
        let s = predict_scores(&ds, &[vec![set_from(&[1.0])]], &single_process_model(1e-10)).unwrap();
        let proj = crate::numeric::trapezoid(
            &grid,
            &y.iter().zip(&grid).map(|(v, &t)| v * fourier(0, t)).collect::<Vec<_>>(),
        );
        assert!(((s[0].scores[(0, 0)] - proj) / proj).abs() < 1e-3);
    }

    #[test]
    fn infinite_noise_shrinks_to_zero() {
        let ds = one_curve(vec![0.1, 0.5, 0.8], vec![1.0, -2.0, 0.5]);
        let s = predict_scores(&ds, &[vec![set_from(&[1.0, 0.5])]], &single_process_model(1e12)).unwrap();
        assert!(s[0].scores.amax() < 1e-9);
    }

    #[test]
    fn sparse_curve_closed_form() {
        let t = vec![0.13, 0.5, 0.77];
        let y = vec![0.4, -1.1, 0.9];
        let ds = one_curve(t.clone(), y.clone());
        let sigma2 = 0.3;
        let nus = [1.0, 0.4];
        let set = set_from(&nus);
        let s = predict_scores(&ds, &[vec![set.clone()]], &single_process_model(sigma2)).unwrap();
        let phi = DMatrix::from_fn(3, 2, |i, k| set.eval(k, t[i]));
        let lhs = phi.transpose() * &phi / sigma2
            + DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / nus[0], 1.0 / nus[1]]));
        let rhs = phi.transpose() * DVector::from_vec(y) / sigma2;
        let oracle = lhs.lu().solve(&rhs).unwrap();
        for k in 0..2 {
            assert!((s[0].scores[(0, k)] - oracle[k]).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn scores_are_equivariant(c in -5.0f64..5.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut t: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            let y: Vec<f64> = t.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let sets = [vec![set_from(&[1.0, 0.5])]];
            let cm = single_process_model(0.2);
            let a = predict_scores(&one_curve(t.clone(), y.clone()), &sets, &cm).unwrap();
            let b = predict_scores(&one_curve(t, y.iter().map(|v| c * v).collect()), &sets, &cm).unwrap();
            prop_assert!((&a[0].scores * c - &b[0].scores).amax() < 1e-9);
        }
    }
}
