//! Multivariate FPCA from univariate scores, truncation selection and
//! variance decomposition.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::{ScoreMatrix, UniEigenSet};
use crate::numeric::{interp_linear, orient_by_max_abs, sym_eigen_desc, trapezoid_weights};

/// Weighted multivariate scalar product on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarProduct {
    pub weights: Vec<f64>,
    pub grid: Vec<f64>,
}

impl ScalarProduct {
    pub fn new(weights: Vec<f64>, grid: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument(
                "scalar-product weights must be finite and positive".into(),
            ));
        }
        if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("scalar-product grid must be increasing".into()));
        }
        Ok(ScalarProduct { weights, grid })
    }

    pub fn unit(n_dims: usize, grid: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0; n_dims], grid)
    }

    /// Weights `1/σ²_d`.
    pub fn inverse_variance(sigma2: &[f64], grid: Vec<f64>) -> Result<Self> {
        Self::new(sigma2.iter().map(|s| 1.0 / s).collect(), grid)
    }

    pub fn n_dims(&self) -> usize {
        self.weights.len()
    }
}

/// `Σ_d w_d ∫ f_d g_d` by trapezoid quadrature.
pub fn weighted_inner(f: &[Vec<f64>], g: &[Vec<f64>], sp: &ScalarProduct) -> Result<f64> {
    if f.len() != sp.n_dims() || g.len() != sp.n_dims() {
        return Err(Error::DimensionMismatch(format!(
            "functions with {} and {} dimensions for a {}-dimensional scalar product",
            f.len(),
            g.len(),
            sp.n_dims()
        )));
    }
    let w = trapezoid_weights(&sp.grid);
    let mut total = 0.0;
    for d in 0..sp.n_dims() {
        if f[d].len() != w.len() || g[d].len() != w.len() {
            return Err(Error::DimensionMismatch(format!(
                "dimension {d}: values do not match the grid"
            )));
        }
        let s: f64 = (0..w.len()).map(|i| w[i] * f[d][i] * g[d][i]).sum();
        total += sp.weights[d] * s;
    }
    Ok(total)
}

/// Multivariate eigenbasis of one random process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiEigenBasis {
    pub process: String,
    pub dims: Vec<String>,
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Per dimension, `grid.len() x M` values of the eigenfunctions.
    pub functions: Vec<DMatrix<f64>>,
    /// Unweighted squared L2 norms, `M x D`.
    pub norms: DMatrix<f64>,
    /// Number of components used in the model.
    pub truncation: usize,
}

impl MultiEigenBasis {
    pub fn empty(process: &str, dims: Vec<String>, sp: &ScalarProduct) -> Self {
        let g = sp.grid.len();
        MultiEigenBasis {
            process: process.to_string(),
            functions: vec![DMatrix::zeros(g, 0); dims.len()],
            norms: DMatrix::zeros(0, dims.len()),
            dims,
            grid: sp.grid.clone(),
            weights: sp.weights.clone(),
            eigenvalues: Vec::new(),
            truncation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Component `m` on dimension `d` at `t`, linearly interpolated.
    pub fn eval(&self, m: usize, d: usize, t: f64) -> f64 {
        interp_linear(&self.grid, self.functions[d].column(m).as_slice(), t)
    }

    /// Component `m` as per-dimension grid vectors.
    pub fn component(&self, m: usize) -> Vec<Vec<f64>> {
        self.functions
            .iter()
            .map(|f| f.column(m).iter().copied().collect())
            .collect()
    }

    pub fn summary(&self) -> ComponentSummary {
        ComponentSummary {
            process: self.process.clone(),
            eigenvalues: self.eigenvalues.clone(),
            norms: (0..self.len())
                .map(|m| self.norms.row(m).iter().copied().collect())
                .collect(),
            truncation: self.truncation,
        }
    }
}

/// Multivariate FPCA of one process from its univariate scores and
/// eigenfunctions (`sets` indexed by dimension).
pub fn mfpca(scores: &ScoreMatrix, sets: &[UniEigenSet], sp: &ScalarProduct) -> Result<MultiEigenBasis> {
    let n_dims = sets.len();
    if n_dims != sp.n_dims() {
        return Err(Error::DimensionMismatch(format!(
            "{n_dims} eigensets for a {}-dimensional scalar product",
            sp.n_dims()
        )));
    }
    for s in sets {
        if s.grid.len() != sp.grid.len() || s.grid.iter().zip(&sp.grid).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::DimensionMismatch(format!(
                "eigenset '{}' on '{}' uses a different grid",
                s.process, s.dim
            )));
        }
    }
    let dims: Vec<String> = sets.iter().map(|s| s.dim.clone()).collect();
    let p = scores.columns.len();
    if p == 0 {
        return Ok(MultiEigenBasis::empty(&scores.process, dims, sp));
    }
    let v = scores.scores.nrows();
    if v < 2 {
        return Err(Error::InvalidArgument(format!(
            "process '{}' needs at least 2 levels, has {v}",
            scores.process
        )));
    }
    let mean = scores.scores.row_mean();
    let mut centered = scores.scores.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let mut z = centered.tr_mul(&centered) / (v as f64 - 1.0);
    for a in 0..p {
        for b in 0..p {
            z[(a, b)] *= (sp.weights[scores.columns[a].0] * sp.weights[scores.columns[b].0]).sqrt();
        }
    }
    let (values, vectors) = sym_eigen_desc(&z);
    let top = values[0];
    if !(top > 0.0) {
        return Err(Error::Numeric(format!(
            "scores of process '{}' have no variation",
            scores.process
        )));
    }
    let keep: Vec<usize> = (0..p)
        .filter(|&i| values[i] > crate::fpca::POSITIVITY_TOL * top)
        .collect();
    let g = sp.grid.len();
    let w = trapezoid_weights(&sp.grid);
    let mut functions = vec![DMatrix::zeros(g, keep.len()); n_dims];
    let mut norms = DMatrix::zeros(keep.len(), n_dims);
    for (m, &i) in keep.iter().enumerate() {
        let mut c: Vec<f64> = vectors.column(i).iter().copied().collect();
        orient_by_max_abs(&mut c);
        for (a, &(d, k)) in scores.columns.iter().enumerate() {
            let scale = c[a] / sp.weights[d].sqrt();
            let phi = sets[d].eigenfunctions.column(k);
            let mut col = functions[d].column_mut(m);
            col.axpy(scale, &phi, 1.0);
        }
        let total: f64 = (0..n_dims)
            .map(|d| sp.weights[d] * (0..g).map(|r| w[r] * functions[d][(r, m)].powi(2)).sum::<f64>())
            .sum();
        let s = total.sqrt();
        for d in 0..n_dims {
            functions[d].column_mut(m).scale_mut(1.0 / s);
            norms[(m, d)] = (0..g).map(|r| w[r] * functions[d][(r, m)].powi(2)).sum();
        }
    }
    let len = keep.len();
    Ok(MultiEigenBasis {
        process: scores.process.clone(),
        dims,
        grid: sp.grid.clone(),
        weights: sp.weights.clone(),
        eigenvalues: keep.iter().map(|&i| values[i]).collect(),
        functions,
        norms,
        truncation: len,
    })
}

/// Eigenvalues and per-dimension norms of one process, independent of the
/// eigenfunction values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub process: String,
    pub eigenvalues: Vec<f64>,
    /// `norms[m][d]`: squared L2 norm of component `m` on dimension `d`.
    pub norms: Vec<Vec<f64>>,
    pub truncation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationCriterion {
    /// Share of the weighted total variation.
    Tv,
    /// Share of univariate variation on every dimension.
    Uv,
}

/// Truncation orders for every process.
pub fn select_truncation(
    bases: &[MultiEigenBasis],
    sigma2: &[f64],
    sp: &ScalarProduct,
    criterion: TruncationCriterion,
    level: f64,
) -> Result<Vec<usize>> {
    let comps: Vec<ComponentSummary> = bases.iter().map(MultiEigenBasis::summary).collect();
    select_truncation_components(&comps, sigma2, &sp.weights, criterion, level)
}

pub fn select_truncation_components(
    comps: &[ComponentSummary],
    sigma2: &[f64],
    weights: &[f64],
    criterion: TruncationCriterion,
    level: f64,
) -> Result<Vec<usize>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "truncation level must lie in (0, 1), got {level}"
        )));
    }
    if comps.is_empty() {
        return Err(Error::InvalidArgument("no eigenbases to truncate".into()));
    }
    if sigma2.len() != weights.len() {
        return Err(Error::DimensionMismatch(
            "error variances and weights differ in length".into(),
        ));
    }
    let mut order: Vec<(usize, usize)> = comps
        .iter()
        .enumerate()
        .flat_map(|(g, c)| (0..c.eigenvalues.len()).map(move |m| (g, m)))
        .collect();
    order.sort_by(|a, b| {
        comps[b.0].eigenvalues[b.1]
            .total_cmp(&comps[a.0].eigenvalues[a.1])
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut m_sel = vec![0usize; comps.len()];
    let take = |m_sel: &mut Vec<usize>, (g, m): (usize, usize)| -> Result<()> {
        if m != m_sel[g] {
            return Err(Error::Numeric(format!(
                "non-contiguous selection for process '{}': component {} before {}",
                comps[g].process,
                m + 1,
                m_sel[g] + 1
            )));
        }
        m_sel[g] += 1;
        Ok(())
    };
    match criterion {
        TruncationCriterion::Tv => {
            let noise: f64 = weights.iter().zip(sigma2).map(|(w, s)| w * s).sum();
            let all: f64 = comps.iter().flat_map(|c| c.eigenvalues.iter()).sum::<f64>() + noise;
            let mut taken = noise;
            let mut next = order.iter();
            while all > 0.0 && taken / all < level {
                let Some(&(g, m)) = next.next() else { break };
                take(&mut m_sel, (g, m))?;
                taken += comps[g].eigenvalues[m];
            }
        }
        TruncationCriterion::Uv => {
            let n_dims = sigma2.len();
            for c in comps {
                if c.norms.iter().any(|n| n.len() != n_dims) {
                    return Err(Error::DimensionMismatch(format!(
                        "norms of '{}' have the wrong width",
                        c.process
                    )));
                }
            }
            let explained = |m_sel: &[usize], d: usize| -> f64 {
                comps
                    .iter()
                    .zip(m_sel)
                    .map(|(c, &mg)| (0..mg).map(|m| c.eigenvalues[m] * c.norms[m][d]).sum::<f64>())
                    .sum::<f64>()
                    + sigma2[d]
            };
            let all_sel: Vec<usize> = comps.iter().map(|c| c.eigenvalues.len()).collect();
            let totals: Vec<f64> = (0..n_dims).map(|d| explained(&all_sel, d)).collect();
            let ok =
                |m_sel: &[usize]| (0..n_dims).all(|d| totals[d] <= 0.0 || explained(m_sel, d) / totals[d] >= level);
            let mut next = order.iter();
            while !ok(&m_sel) {
                let Some(&(g, m)) = next.next() else { break };
                take(&mut m_sel, (g, m))?;
            }
            // Drop trailing components that turned out to be unnecessary,
            // smallest eigenvalue first.
            loop {
                let mut cands: Vec<usize> = (0..comps.len()).filter(|&g| m_sel[g] > 0).collect();
                cands.sort_by(|&a, &b| {
                    comps[a].eigenvalues[m_sel[a] - 1].total_cmp(&comps[b].eigenvalues[m_sel[b] - 1])
                });
                let removable = cands.into_iter().find(|&g| {
                    let mut trial = m_sel.clone();
                    trial[g] -= 1;
                    ok(&trial)
                });
                match removable {
                    Some(g) => m_sel[g] -= 1,
                    None => break,
                }
            }
        }
    }
    Ok(m_sel)
}

/// One eigencomponent's contribution to the variance decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub process: String,
    /// 1-based component index.
    pub component: usize,
    pub nu: f64,
    pub norms: Vec<f64>,
    pub pi_dim: Vec<f64>,
    pub pi: f64,
    pub included: bool,
}

/// Variance decomposition: component shares per dimension and overall.
/// Denominators use all estimated components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTable {
    pub dims: Vec<String>,
    pub weights: Vec<f64>,
    pub components: Vec<VarianceRow>,
    pub sigma2: Vec<f64>,
    pub sigma_pi_dim: Vec<f64>,
    pub sigma_pi: Vec<f64>,
    pub total: f64,
    pub total_dim: Vec<f64>,
    pub explained: f64,
    pub explained_dim: Vec<f64>,
}

pub fn variance_table(
    bases: &[MultiEigenBasis],
    sigma2: &[f64],
    sp: &ScalarProduct,
    dims: &[String],
) -> Result<VarianceTable> {
    let comps: Vec<ComponentSummary> = bases.iter().map(MultiEigenBasis::summary).collect();
    variance_table_components(&comps, sigma2, &sp.weights, dims)
}

fn share(x: f64, total: f64) -> f64 {
    if total > 0.0 {
        x / total
    } else {
        0.0
    }
}

pub fn variance_table_components(
    comps: &[ComponentSummary],
    sigma2: &[f64],
    weights: &[f64],
    dims: &[String],
) -> Result<VarianceTable> {
    let n_dims = dims.len();
    if sigma2.len() != n_dims || weights.len() != n_dims {
        return Err(Error::DimensionMismatch(
            "dimensions, error variances and weights differ in length".into(),
        ));
    }
    let total = comps.iter().flat_map(|c| c.eigenvalues.iter()).sum::<f64>()
        + weights.iter().zip(sigma2).map(|(w, s)| w * s).sum::<f64>();
    let total_dim: Vec<f64> = (0..n_dims)
        .map(|d| {
            comps
                .iter()
                .map(|c| c.eigenvalues.iter().zip(&c.norms).map(|(nu, n)| nu * n[d]).sum::<f64>())
                .sum::<f64>()
                + sigma2[d]
        })
        .collect();
    let mut components = Vec::new();
    for c in comps {
        for (m, &nu) in c.eigenvalues.iter().enumerate() {
            let norms = c.norms[m].clone();
            components.push(VarianceRow {
                process: c.process.clone(),
                component: m + 1,
                nu,
                pi_dim: (0..n_dims).map(|d| share(nu * norms[d], total_dim[d])).collect(),
                pi: share(nu, total),
                norms,
                included: m < c.truncation,
            });
        }
    }
    let sigma_pi_dim: Vec<f64> = (0..n_dims).map(|d| share(sigma2[d], total_dim[d])).collect();
    let sigma_pi: Vec<f64> = (0..n_dims).map(|d| share(weights[d] * sigma2[d], total)).collect();
    let inc = components.iter().filter(|r| r.included);
    let explained = inc.clone().map(|r| r.pi).sum::<f64>() + sigma_pi.iter().sum::<f64>();
    let explained_dim = (0..n_dims)
        .map(|d| inc.clone().map(|r| r.pi_dim[d]).sum::<f64>() + sigma_pi_dim[d])
        .collect();
    Ok(VarianceTable {
        dims: dims.to_vec(),
        weights: weights.to_vec(),
        components,
        sigma2: sigma2.to_vec(),
        sigma_pi_dim,
        sigma_pi,
        total,
        total_dim,
        explained,
        explained_dim,
    })
}

impl VarianceTable {
    /// CSV with one column per included component, one per error variance
    /// and a total column; rows are the variation, per-dimension norms,
    /// per-dimension shares and overall shares.
    pub fn to_csv(&self) -> String {
        let inc: Vec<&VarianceRow> = self.components.iter().filter(|r| r.included).collect();
        let nd = self.dims.len();
        let mut out = String::new();
        let mut header = vec![String::new()];
        header.extend(inc.iter().map(|r| format!("{}{}", r.process, r.component)));
        header.extend(self.dims.iter().map(|d| format!("sigma2_{d}")));
        header.push("total".into());
        out.push_str(&header.join(","));
        out.push('\n');
        let fmt = |x: f64| format!("{x:.6}");
        let mut row = |label: String, comp: Vec<String>, sig: Vec<String>, tot: String| {
            let mut f = vec![label];
            f.extend(comp);
            f.extend(sig);
            f.push(tot);
            out.push_str(&f.join(","));
            out.push('\n');
        };
        row(
            "variation".into(),
            inc.iter().map(|r| fmt(r.nu)).collect(),
            self.sigma2.iter().map(|&s| fmt(s)).collect(),
            fmt(self.total),
        );
        for d in 0..nd {
            row(
                format!("norm_{}", self.dims[d]),
                inc.iter().map(|r| fmt(r.norms[d])).collect(),
                vec![String::new(); nd],
                String::new(),
            );
        }
        for d in 0..nd {
            let sig = (0..nd)
                .map(|e| {
                    if e == d {
                        fmt(self.sigma_pi_dim[d])
                    } else {
                        String::new()
                    }
                })
                .collect();
            row(
                format!("pi_{}", self.dims[d]),
                inc.iter().map(|r| fmt(r.pi_dim[d])).collect(),
                sig,
                fmt(self.explained_dim[d]),
            );
        }
        row(
            "pi".into(),
            inc.iter().map(|r| fmt(r.pi)).collect(),
            self.sigma_pi.iter().map(|&s| fmt(s)).collect(),
            fmt(self.explained),
        );
        out
    }

    pub fn write_csv(&self, path: &Path, preamble: &str) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(preamble.as_bytes())
            .and_then(|_| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpca::univariate_fpca;
    use crate::numeric::unit_grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, SQRT_2};

    fn fourier(k: usize, t: f64) -> f64 {
        let f = (k / 2 + 1) as f64;
        if k % 2 == 0 {
            SQRT_2 * (2.0 * PI * f * t).sin()
        } else {
            SQRT_2 * (2.0 * PI * f * t).cos()
        }
    }

    fn eigenset(dim: &str, ks: &[usize]) -> UniEigenSet {
        let grid = unit_grid(101);
        UniEigenSet {
            process: "g".into(),
            dim: dim.into(),
            eigenfunctions: DMatrix::from_fn(101, ks.len(), |i, c| fourier(ks[c], grid[i])),
            grid,
            eigenvalues: vec![1.0; ks.len()],
        }
    }

    fn score_matrix(scores: DMatrix<f64>, columns: Vec<(usize, usize)>) -> ScoreMatrix {
        ScoreMatrix {
            process: "g".into(),
            levels: (0..scores.nrows()).map(|i| format!("l{i}")).collect(),
            columns,
            scores,
        }
    }

    #[test]
    fn inner_product_fixtures() {
        let grid = unit_grid(101);
        let ones = vec![vec![1.0; 101], vec![1.0; 101]];
        assert!(
            (weighted_inner(&ones, &ones, &ScalarProduct::unit(2, grid.clone()).unwrap()).unwrap() - 2.0).abs() < 1e-12
        );
        let sp = ScalarProduct::new(vec![0.25, 0.5], grid.clone()).unwrap();
        assert!((weighted_inner(&ones, &ones, &sp).unwrap() - 0.75).abs() < 1e-12);
        let f = vec![
            grid.iter().map(|&t| SQRT_2 * (2.0 * PI * t).sin()).collect(),
            vec![0.0; 101],
        ];
        let g = vec![
            grid.iter().map(|&t| SQRT_2 * (2.0 * PI * t).cos()).collect(),
            vec![0.0; 101],
        ];
        assert!(
            weighted_inner(&f, &g, &ScalarProduct::unit(2, grid.clone()).unwrap())
                .unwrap()
                .abs()
                < 1e-6
        );
        assert!(weighted_inner(&f, &g[..1], &ScalarProduct::unit(2, grid).unwrap()).is_err());
    }

    fn random_scores(rng: &mut ChaCha8Rng, v: usize, p: usize) -> DMatrix<f64> {
        let mix = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        DMatrix::from_fn(v, p, |_, _| rng.random_range(-1.0..1.0)) * mix
    }

    fn check_orthonormal(b: &MultiEigenBasis) -> f64 {
        let sp = ScalarProduct::new(b.weights.clone(), b.grid.clone()).unwrap();
        let mut worst = 0.0f64;
        for m in 0..b.len() {
            for n in 0..b.len() {
                let ip = weighted_inner(&b.component(m), &b.component(n), &sp).unwrap();
                worst = worst.max((ip - if m == n { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    fn fitted_sets() -> Vec<UniEigenSet> {
        let grid = unit_grid(101);
        (0..2)
            .map(|d| {
                let k = DMatrix::from_fn(101, 101, |i, j| {
                    (0..3)
                        .map(|c| (3 - c) as f64 * fourier(c + d, grid[i]) * fourier(c + d, grid[j]))
                        .sum::<f64>()
                        + 0.1 * (-((grid[i] - grid[j]) / 0.3).powi(2)).exp()
                });
                let (phi, nu) = univariate_fpca(&k, &grid).unwrap();
                let keep = 4;
                UniEigenSet {
                    process: "g".into(),
                    dim: format!("d{d}"),
                    grid: grid.clone(),
                    eigenfunctions: phi.columns(0, keep).into_owned(),
                    eigenvalues: nu[..keep].to_vec(),
                }
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn orthonormal_for_any_weights(seed in 0u64..1000, w0 in 0.05f64..20.0, w1 in 0.05f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets = fitted_sets();
            let cols: Vec<(usize, usize)> = (0..2).flat_map(|d| (0..4).map(move |k| (d, k))).collect();
            let sm = score_matrix(random_scores(&mut rng, 30, 8), cols);
            let sp = ScalarProduct::new(vec![w0, w1], unit_grid(101)).unwrap();
            let b = mfpca(&sm, &sets, &sp).unwrap();
            prop_assert!(check_orthonormal(&b) < 1e-8);
            for m in 0..b.len() {
                let s: f64 = (0..2).map(|d| sp.weights[d] * b.norms[(m, d)]).sum();
                prop_assert!((s - 1.0).abs() < 1e-8);
            }
        }

        #[test]
        fn weight_scaling(seed in 0u64..1000, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets = fitted_sets();
            let cols: Vec<(usize, usize)> = (0..2).flat_map(|d| (0..4).map(move |k| (d, k))).collect();
            let sm = score_matrix(random_scores(&mut rng, 30, 8), cols);
            let a = mfpca(&sm, &sets, &ScalarProduct::new(vec![1.0, 2.0], unit_grid(101)).unwrap()).unwrap();
            let b = mfpca(&sm, &sets, &ScalarProduct::new(vec![c, 2.0 * c], unit_grid(101)).unwrap()).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for m in 0..a.len() {
                prop_assert!((b.eigenvalues[m] - c * a.eigenvalues[m]).abs() < 1e-9 * a.eigenvalues[0] * c);
                // Same directions; the unit-norm scaling absorbs the factor.
                for d in 0..2 {
                    let fa = a.functions[d].column(m) / c.sqrt();
                    let fb = b.functions[d].column(m);
                    prop_assert!((fa - fb).amax() < 1e-6 * (1.0 + a.functions[d].amax()));
                }
            }
        }
    }

    #[test]
    fn eigenvalue_sum_is_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets = fitted_sets();
        let cols: Vec<(usize, usize)> = (0..2).flat_map(|d| (0..4).map(move |k| (d, k))).collect();
        let sm = score_matrix(random_scores(&mut rng, 40, 8), cols);
        let sp = ScalarProduct::new(vec![0.5, 3.0], unit_grid(101)).unwrap();
        let b = mfpca(&sm, &sets, &sp).unwrap();
        let mean = sm.scores.row_mean();
        let trace: f64 = (0..8)
            .map(|a| {
                let d = sm.columns[a].0;
                let var: f64 = sm.scores.column(a).iter().map(|x| (x - mean[a]).powi(2)).sum::<f64>() / 39.0;
                sp.weights[d] * var
            })
            .sum();
        assert!((b.eigenvalues.iter().sum::<f64>() - trace).abs() < 1e-10 * trace.max(1.0));
    }

    #[test]
    fn single_dimension_recovers_univariate_basis() {
        let sets = vec![eigenset("a", &[0, 1])];
        let scores = DMatrix::from_row_slice(4, 2, &[3.0, 1.0, -3.0, 1.0, 0.0, -1.0, 0.0, -1.0]);
        let b = mfpca(
            &score_matrix(scores, vec![(0, 0), (0, 1)]),
            &sets,
            &ScalarProduct::unit(1, unit_grid(101)).unwrap(),
        )
        .unwrap();
        assert_eq!(b.len(), 2);
        let w = trapezoid_weights(&unit_grid(101));
        let f = b.functions[0].column(0);
        let phi = sets[0].eigenfunctions.column(0);
        let sign = f.dot(&phi).signum();
        let err: f64 = (0..101).map(|i| w[i] * (sign * f[i] - phi[i]).powi(2)).sum();
        assert!(err.sqrt() < 1e-6);
    }

    #[test]
    fn block_diagonal_scores_separate_dimensions() {
        let sets = vec![eigenset("a", &[0]), eigenset("b", &[1])];
        let scores = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0]);
        let b = mfpca(
            &score_matrix(scores, vec![(0, 0), (1, 0)]),
            &sets,
            &ScalarProduct::unit(2, unit_grid(101)).unwrap(),
        )
        .unwrap();
        assert_eq!(b.len(), 2);
        for m in 0..2 {
            let minor = b.norms[(m, 0)].min(b.norms[(m, 1)]);
            assert!(minor < 1e-8);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let sets = vec![eigenset("a", &[0])];
        let sp = ScalarProduct::unit(1, unit_grid(101)).unwrap();
        let one = score_matrix(DMatrix::from_element(1, 1, 1.0), vec![(0, 0)]);
        assert!(mfpca(&one, &sets, &sp).is_err());
        let zero = score_matrix(DMatrix::zeros(3, 1), vec![(0, 0)]);
        assert!(mfpca(&zero, &sets, &sp).is_err());
        assert!(ScalarProduct::new(vec![0.0], unit_grid(5)).is_err());
    }

    fn comp(process: &str, nu: &[f64], norms: &[Vec<f64>]) -> ComponentSummary {
        ComponentSummary {
            process: process.into(),
            eigenvalues: nu.to_vec(),
            norms: norms.to_vec(),
            truncation: nu.len(),
        }
    }

    #[test]
    fn total_variation_arithmetic() {
        let c = comp("g", &[4.0, 3.0, 2.0, 1.0], &vec![vec![1.0]; 4]);
        let m = select_truncation_components(&[c], &[0.0], &[1.0], TruncationCriterion::Tv, 0.9).unwrap();
        assert_eq!(m, vec![3]);
    }

    #[test]
    fn tv_ties_prefer_first_process() {
        let a = comp("a", &[2.0, 1.0], &vec![vec![1.0]; 2]);
        let b = comp("b", &[2.0, 1.0], &vec![vec![1.0]; 2]);
        let m = select_truncation_components(&[a, b], &[0.0], &[1.0], TruncationCriterion::Tv, 0.6).unwrap();
        assert_eq!(m, vec![1, 1]);
        let a = comp("a", &[2.0, 1.0], &vec![vec![1.0]; 2]);
        let b = comp("b", &[2.0, 1.0], &vec![vec![1.0]; 2]);
        let m = select_truncation_components(&[a, b], &[0.0], &[1.0], TruncationCriterion::Tv, 0.3).unwrap();
        assert_eq!(m, vec![1, 0]);
    }

    #[test]
    fn level_must_be_a_fraction() {
        let c = comp("g", &[1.0], &[vec![1.0]]);
        assert!(select_truncation_components(&[c.clone()], &[0.0], &[1.0], TruncationCriterion::Tv, 1.0).is_err());
        assert!(select_truncation_components(&[], &[0.0], &[1.0], TruncationCriterion::Tv, 0.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn uv_selection_is_minimal(seed in 0u64..10_000, level in 0.5f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let comps: Vec<ComponentSummary> = (0..3)
                .map(|g| {
                    let m = rng.random_range(1..5);
                    let mut nu: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..2.0)).collect();
                    nu.sort_by(|a, b| b.total_cmp(a));
                    let norms = (0..m)
                        .map(|_| {
                            let a: f64 = rng.random_range(0.0..1.0);
                            vec![a, 1.0 - a]
                        })
                        .collect::<Vec<_>>();
                    comp(&format!("g{g}"), &nu, &norms)
                })
                .collect();
            let sigma2 = [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)];
            let m = select_truncation_components(&comps, &sigma2, &[1.0, 1.0], TruncationCriterion::Uv, level).unwrap();
            let frac = |m: &[usize], d: usize| {
                let num: f64 = comps.iter().zip(m).map(|(c, &k)| (0..k).map(|j| c.eigenvalues[j] * c.norms[j][d]).sum::<f64>()).sum::<f64>() + sigma2[d];
                let den: f64 = comps.iter().map(|c| c.eigenvalues.iter().zip(&c.norms).map(|(v, n)| v * n[d]).sum::<f64>()).sum::<f64>() + sigma2[d];
                num / den
            };
            prop_assert!((0..2).all(|d| frac(&m, d) >= level));
            for g in 0..3 {
                if m[g] > 0 {
                    let mut t = m.clone();
                    t[g] -= 1;
                    prop_assert!((0..2).any(|d| frac(&t, d) < level));
                }
            }
        }
    }

    #[test]
    fn all_zero_eigenvalues_table() {
        let c = comp("g", &[0.0, 0.0], &vec![vec![0.5, 0.5]; 2]);
        let t = variance_table_components(&[c], &[0.1, 0.3], &[1.0, 1.0], &["a".into(), "b".into()]).unwrap();
        assert!(t
            .components
            .iter()
            .all(|r| r.pi == 0.0 && r.pi_dim.iter().all(|&p| p == 0.0)));
        assert!((t.sigma_pi.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_shares() {
        let c = comp("g", &[2.0, 1.0], &[vec![0.75, 0.25], vec![0.5, 0.5]]);
        let t = variance_table_components(&[c], &[0.5, 0.25], &[1.0, 1.0], &["a".into(), "b".into()]).unwrap();
        // dim a: 1.5 + 0.5 + 0.5 = 2.5; dim b: 0.5 + 0.5 + 0.25 = 1.25; total 3.75
        assert_eq!(t.total_dim, vec![2.5, 1.25]);
        assert_eq!(t.total, 3.75);
        assert_eq!(t.components[0].pi_dim, vec![1.5 / 2.5, 0.5 / 1.25]);
        assert_eq!(t.components[1].pi_dim, vec![0.5 / 2.5, 0.5 / 1.25]);
        assert_eq!(t.components[0].pi, 2.0 / 3.75);
        assert!((t.explained - 1.0).abs() < 1e-15);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with(",g1,g2,sigma2_a,sigma2_b,total"));
    }
}
