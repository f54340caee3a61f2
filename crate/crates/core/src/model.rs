//! Multivariate functional additive mixed model: stacked design, joint
//! penalized fit with FPC random effects, effect estimates and random-effect
//! predictions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::bspline_design;
use crate::error::{Error, Result};
use crate::fundata::FunDataset;
use crate::mean::{dim_rows, BoundFormula, FixedFormula, SmoothingOptions, TermKind};
use crate::mfpca::MultiEigenBasis;
use crate::numeric::unit_grid;
use crate::pls::{BlockDesign, DesignBlock, Gram, PenaltyTerm, PlsFit, PlsProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scedasticity {
    Homoscedastic,
    PerDimension,
}

/// Everything needed to fit the model besides the data.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub formula: FixedFormula,
    /// Eigenbases of the included processes; `truncation` sets `M_g`.
    pub bases: Vec<MultiEigenBasis>,
    pub scedasticity: Scedasticity,
    /// Error variances per dimension (dataset order), used as inverse weights.
    pub sigma2: Vec<f64>,
    pub smoothing: SmoothingOptions,
}

/// Predicted scores of one process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessScores {
    pub process: String,
    pub levels: Vec<String>,
    /// `levels x M_g`.
    pub scores: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelFit {
    pub formula: BoundFormula,
    pub dims: Vec<String>,
    /// Fixed-effect coefficients per dimension (all terms, formula order).
    pub theta: Vec<DVector<f64>>,
    pub scores: Vec<ProcessScores>,
    pub bases: Vec<MultiEigenBasis>,
    pub lambda: BTreeMap<String, f64>,
    pub sigma2: Vec<f64>,
    /// Residual variance per dimension.
    pub sigma_hat: Vec<f64>,
    /// Fitted values per curve per dimension.
    pub fitted: Vec<Vec<DVector<f64>>>,
    pub edf: f64,
    pls: Vec<PlsFit>,
    dim_fit: Vec<usize>,
}

fn fixed_prefix(dim: &str) -> String {
    format!("{dim}:")
}

fn random_group(process: &str) -> String {
    format!("re:{process}")
}

/// Stacked observation index: dimension, then curve, then point.
fn stacked_rows(ds: &FunDataset) -> Vec<(usize, usize, f64, f64)> {
    let mut out = Vec::with_capacity(ds.n_observations());
    for d in 0..ds.n_dims() {
        let (rows, y) = dim_rows(ds, d);
        out.extend(rows.into_iter().zip(y).map(|((i, t), v)| (d, i, t, v)));
    }
    out
}

struct Layout {
    problem: PlsProblem,
    /// Processes with `M_g > 0`: (basis index, layer index, basis dim map).
    active: Vec<(usize, usize, Vec<usize>)>,
}

fn basis_dims(ds: &FunDataset, b: &MultiEigenBasis) -> Result<Vec<usize>> {
    ds.dims
        .iter()
        .map(|d| {
            b.dims.iter().position(|x| x == d).ok_or_else(|| {
                Error::DimensionMismatch(format!("eigenbasis of '{}' has no dimension '{d}'", b.process))
            })
        })
        .collect()
}

fn check_basis(b: &MultiEigenBasis) -> Result<()> {
    let g = &b.grid;
    if g.is_empty() || g[0] > 1e-12 || (g[g.len() - 1] - 1.0).abs() > 1e-12 {
        return Err(Error::DimensionMismatch(format!(
            "eigenbasis grid of '{}' does not cover [0, 1]",
            b.process
        )));
    }
    if b.truncation > b.len() {
        return Err(Error::InvalidArgument(format!(
            "truncation {} exceeds the {} components of '{}'",
            b.truncation,
            b.len(),
            b.process
        )));
    }
    Ok(())
}

fn observation_weights(ds: &FunDataset, spec: &ModelSpec) -> Result<Vec<f64>> {
    if spec.sigma2.len() != ds.n_dims() {
        return Err(Error::DimensionMismatch(format!(
            "{} error variances for {} dimensions",
            spec.sigma2.len(),
            ds.n_dims()
        )));
    }
    match spec.scedasticity {
        Scedasticity::Homoscedastic => Ok(vec![1.0; ds.n_dims()]),
        Scedasticity::PerDimension => spec
            .sigma2
            .iter()
            .map(|&s| {
                if s.is_finite() && s > 0.0 {
                    Ok(1.0 / s)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "error variance {s} cannot be used as a weight"
                    )))
                }
            })
            .collect(),
    }
}

fn assemble_layout(ds: &FunDataset, spec: &ModelSpec) -> Result<Layout> {
    let bound = BoundFormula::bind(&spec.formula, ds)?;
    let rows = stacked_rows(ds);
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty design: no observations".into()));
    }
    let wd = observation_weights(ds, spec)?;
    let mut blocks = Vec::new();
    for d in 0..ds.n_dims() {
        let (drows, _) = dim_rows(ds, d);
        let start = rows.iter().position(|r| r.0 == d).unwrap_or(0);
        for mut b in bound.blocks(ds, &drows, &fixed_prefix(&ds.dims[d]))? {
            let BlockDesign::Dense(m) = &b.design else {
                unreachable!("fixed blocks are dense")
            };
            let mut full = DMatrix::zeros(rows.len(), m.ncols());
            full.view_mut((start, 0), (m.nrows(), m.ncols())).copy_from(m);
            b.design = BlockDesign::Dense(full);
            blocks.push(b);
        }
    }
    let mut active = Vec::new();
    for (bi, b) in spec.bases.iter().enumerate() {
        check_basis(b)?;
        if b.truncation == 0 {
            continue;
        }
        let j = ds.layer_index(&b.process)?;
        let dmap = basis_dims(ds, b)?;
        let m = b.truncation;
        let level: Vec<usize> = rows.iter().map(|r| ds.curves()[r.1].levels[j]).collect();
        let values = DMatrix::from_fn(rows.len(), m, |r, k| b.eval(k, dmap[rows[r].0], rows[r].2));
        let pen = DMatrix::from_diagonal(&DVector::from_iterator(m, b.eigenvalues[..m].iter().map(|nu| 1.0 / nu)));
        if b.eigenvalues[..m].iter().any(|nu| !(*nu > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "non-positive eigenvalue in '{}'",
                b.process
            )));
        }
        blocks.push(DesignBlock {
            name: b.process.clone(),
            design: BlockDesign::Grouped {
                level,
                n_levels: ds.layers[j].levels.len(),
                values,
            },
            penalties: vec![PenaltyTerm::new(pen, random_group(&b.process))],
        });
        active.push((bi, j, dmap));
    }
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.3));
    let w = DVector::from_iterator(rows.len(), rows.iter().map(|r| wd[r.0]));
    Ok(Layout {
        problem: PlsProblem::new(y, w, blocks)?,
        active,
    })
}

/// The stacked penalized regression problem of the model.
pub fn assemble(ds: &FunDataset, spec: &ModelSpec) -> Result<PlsProblem> {
    Ok(assemble_layout(ds, spec)?.problem)
}

/// Fits the model. Without random effects the dimensions decouple and are
/// fitted separately.
pub fn fit(ds: &FunDataset, spec: &ModelSpec) -> Result<ModelFit> {
    let bound = BoundFormula::bind(&spec.formula, ds)?;
    let layout = assemble_layout(ds, spec)?;
    let nd = ds.n_dims();
    let (pls, dim_fit) = if layout.active.is_empty() {
        let wd = observation_weights(ds, spec)?;
        let fits = (0..nd)
            .map(|d| {
                let (rows, y) = dim_rows(ds, d);
                let blocks = bound.blocks(ds, &rows, &fixed_prefix(&ds.dims[d]))?;
                let n = y.len();
                // A constant weight cancels from the solution; fit unweighted
                // and report smoothing parameters on the weighted scale.
                let p = PlsProblem::new(DVector::from_vec(y), DVector::from_element(n, 1.0), blocks)?;
                let gram = Gram::from_problem(&p)?;
                gram.check_identifiability()?;
                let mut f = gram.select(spec.smoothing.criterion, &spec.smoothing.search)?;
                for l in f.lambda.values_mut() {
                    *l *= wd[d];
                }
                f.rss *= wd[d];
                f.scale *= wd[d];
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        (fits, (0..nd).collect::<Vec<_>>())
    } else {
        let gram = layout.problem.gram()?;
        gram.check_identifiability()?;
        (
            vec![gram.select(spec.smoothing.criterion, &spec.smoothing.search)?],
            vec![0; nd],
        )
    };

    let mut theta: Vec<DVector<f64>> = (0..nd)
        .map(|d| {
            let f = &pls[dim_fit[d]];
            let parts: Vec<DVector<f64>> = bound
                .terms
                .iter()
                .map(|t| f.block_coefficients(&format!("{}{}", fixed_prefix(&ds.dims[d]), t.term.name)))
                .collect::<Result<_>>()?;
            let mut all = Vec::new();
            for p in parts {
                all.extend(p.iter().copied());
            }
            Ok(DVector::from_vec(all))
        })
        .collect::<Result<_>>()?;

    let mut scores = Vec::new();
    let mut bases = spec.bases.clone();
    for b in &mut bases {
        b.truncation = b.truncation.min(b.len());
    }
    for (bi, j, _) in &layout.active {
        let b = &spec.bases[*bi];
        let m = b.truncation;
        let v = ds.layers[*j].levels.len();
        let coef = pls[0].block_coefficients(&b.process)?;
        scores.push(ProcessScores {
            process: b.process.clone(),
            levels: ds.layers[*j].levels.clone(),
            scores: DMatrix::from_fn(v, m, |l, k| coef[l * m + k]),
        });
    }

    // Sum-to-zero over levels; the removed mean moves into the intercept.
    let intercept = bound
        .terms
        .iter()
        .position(|t| matches!(t.term.kind, TermKind::Intercept))
        .ok_or_else(|| Error::Config("formula needs an intercept".into()))?;
    let int_off = bound.term_offsets()[intercept];
    let int_basis = bound.terms[intercept].term.t_basis;
    let grid = unit_grid(crate::fpca::DEFAULT_GRID);
    let phi = bspline_design(&int_basis, &grid)?;
    let phi_gram = phi.tr_mul(&phi);
    let phi_chol = crate::numeric::cholesky_ridge(&phi_gram)?;
    let mut shift = vec![vec![0.0; grid.len()]; nd];
    for (s, (bi, _, dmap)) in scores.iter_mut().zip(&layout.active) {
        let b = &spec.bases[*bi];
        for k in 0..s.scores.ncols() {
            let mean = s.scores.column(k).mean();
            s.scores.column_mut(k).add_scalar_mut(-mean);
            for d in 0..nd {
                for (gi, &t) in grid.iter().enumerate() {
                    shift[d][gi] += mean * b.eval(k, dmap[d], t);
                }
            }
        }
    }
    for d in 0..nd {
        let rhs = phi.tr_mul(&DVector::from_column_slice(&shift[d]));
        let beta = phi_chol.solve(&rhs);
        let mut seg = theta[d].rows_mut(int_off, int_basis.num_basis);
        seg += beta;
    }

    let mut out = ModelFit {
        formula: bound,
        dims: ds.dims.clone(),
        theta,
        scores,
        bases,
        lambda: pls.iter().flat_map(|f| f.lambda.clone()).collect(),
        sigma2: spec.sigma2.clone(),
        sigma_hat: vec![0.0; nd],
        fitted: Vec::new(),
        edf: pls.iter().map(|f| f.edf).sum(),
        pls,
        dim_fit,
    };
    out.fitted = out.predict_dataset(ds)?;
    for d in 0..nd {
        let mut ss = 0.0;
        let mut n = 0usize;
        for (c, f) in ds.curves().iter().zip(&out.fitted) {
            for (y, yh) in c.points[d].y.iter().zip(f[d].iter()) {
                ss += (y - yh).powi(2);
                n += 1;
            }
        }
        out.sigma_hat[d] = if n > 0 { ss / n as f64 } else { 0.0 };
    }
    Ok(out)
}

impl ModelFit {
    fn dim(&self, name: &str) -> Result<usize> {
        self.dims.iter().position(|d| d == name).ok_or_else(|| Error::Unknown {
            kind: "dimension",
            name: name.to_string(),
        })
    }

    fn process(&self, name: &str) -> Result<(usize, usize)> {
        let s = self
            .scores
            .iter()
            .position(|s| s.process == name)
            .ok_or_else(|| Error::Unknown {
                kind: "process",
                name: name.to_string(),
            })?;
        let b = self
            .bases
            .iter()
            .position(|b| b.process == name)
            .expect("basis of fitted process");
        Ok((s, b))
    }

    /// Fixed-effect part of dimension `d` for covariates `cov` at `t`.
    pub fn predict_mean(
        &self,
        d: usize,
        covariate_names: &[String],
        covariates: &[f64],
        t: &[f64],
    ) -> Result<DVector<f64>> {
        Ok(self.formula.curve_design(covariate_names, covariates, t)? * &self.theta[d])
    }

    /// Fixed effects plus predicted random effects at every observation.
    pub fn predict_dataset(&self, ds: &FunDataset) -> Result<Vec<Vec<DVector<f64>>>> {
        let dmap: Vec<usize> = ds.dims.iter().map(|n| self.dim(n)).collect::<Result<_>>()?;
        let mut proc = Vec::new();
        for s in &self.scores {
            let (_, bi) = self.process(&s.process)?;
            let j = ds.layer_index(&s.process)?;
            let level_map: Vec<Option<usize>> = ds.layers[j]
                .levels
                .iter()
                .map(|l| s.levels.iter().position(|x| x == l))
                .collect();
            proc.push((s, &self.bases[bi], j, level_map));
        }
        ds.curves()
            .iter()
            .map(|c| {
                c.points
                    .iter()
                    .enumerate()
                    .map(|(d, p)| {
                        let md = dmap[d];
                        let mut v = self.predict_mean(md, &ds.covariate_names, &c.covariates, &p.t)?;
                        for (s, b, j, level_map) in &proc {
                            let Some(l) = level_map[c.levels[*j]] else { continue };
                            let bd = b
                                .dims
                                .iter()
                                .position(|x| *x == self.dims[md])
                                .expect("basis dimension");
                            for (k, &t) in p.t.iter().enumerate() {
                                v[k] += (0..s.scores.ncols())
                                    .map(|m| s.scores[(l, m)] * b.eval(m, bd, t))
                                    .sum::<f64>();
                            }
                        }
                        Ok(v)
                    })
                    .collect()
            })
            .collect()
    }

    /// Effect of `term` on dimension `dim` over `grid` with pointwise
    /// standard errors. Smooth covariate terms need `x`.
    pub fn effect_estimates(
        &self,
        term: &str,
        dim: &str,
        grid: &[f64],
        x: Option<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let j = self.formula.formula.term_index(term)?;
        let d = self.dim(dim)?;
        let design = self.formula.effect_design(j, grid, x)?;
        let off = self.formula.term_offsets()[j];
        let value = &design * self.theta[d].rows(off, design.ncols());
        let fit = &self.pls[self.dim_fit[d]];
        let block = fit.block(&format!("{}{}", fixed_prefix(dim), term))?;
        let mut row = vec![0.0; fit.covariance.dim()];
        let mut se = DVector::zeros(grid.len());
        for i in 0..grid.len() {
            for k in 0..design.ncols() {
                row[block.offset + k] = design[(i, k)];
            }
            se[i] = fit.covariance.variance(&row)?.sqrt();
        }
        Ok((value, se))
    }

    /// `Σ_m ρ_m ψ_m` for one level of one process on `grid`.
    pub fn random_effect_curves(&self, process: &str, level: &str, dim: &str, grid: &[f64]) -> Result<DVector<f64>> {
        let (si, bi) = self.process(process)?;
        let s = &self.scores[si];
        let l = s.levels.iter().position(|x| x == level).ok_or_else(|| Error::Unknown {
            kind: "level",
            name: level.to_string(),
        })?;
        let b = &self.bases[bi];
        let bd = b.dims.iter().position(|x| x == dim).ok_or_else(|| Error::Unknown {
            kind: "dimension",
            name: dim.to_string(),
        })?;
        Ok(DVector::from_iterator(
            grid.len(),
            grid.iter()
                .map(|&t| (0..s.scores.ncols()).map(|m| s.scores[(l, m)] * b.eval(m, bd, t)).sum()),
        ))
    }

    /// Coefficient covariance fit backing dimension `d`.
    pub fn pls_fit(&self, d: usize) -> &PlsFit {
        &self.pls[self.dim_fit[d]]
    }

    pub fn summary(&self) -> FitSummary {
        let mut theta = BTreeMap::new();
        let offs = self.formula.term_offsets();
        for (j, t) in self.formula.terms.iter().enumerate() {
            let mut per_dim = BTreeMap::new();
            for (d, name) in self.dims.iter().enumerate() {
                per_dim.insert(
                    name.clone(),
                    self.theta[d].rows(offs[j], t.ncols()).iter().copied().collect(),
                );
            }
            theta.insert(t.term.name.clone(), per_dim);
        }
        let mut rho = BTreeMap::new();
        for s in &self.scores {
            let mut per_level = BTreeMap::new();
            for (l, name) in s.levels.iter().enumerate() {
                per_level.insert(name.clone(), s.scores.row(l).iter().copied().collect());
            }
            rho.insert(s.process.clone(), per_level);
        }
        FitSummary {
            dims: self.dims.clone(),
            theta,
            rho,
            lambda: self.lambda.clone(),
            sigma2: self.sigma2.clone(),
            sigma_hat: self.sigma_hat.clone(),
            edf: self.edf,
            eigenbases: self
                .bases
                .iter()
                .map(|b| BasisRef {
                    process: b.process.clone(),
                    eigenvalues: b.eigenvalues.clone(),
                    truncation: b.truncation,
                    weights: b.weights.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisRef {
    pub process: String,
    pub eigenvalues: Vec<f64>,
    pub truncation: usize,
    pub weights: Vec<f64>,
}

/// Serializable view of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub dims: Vec<String>,
    /// term → dimension → coefficients.
    pub theta: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// process → level → scores.
    pub rho: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    pub lambda: BTreeMap<String, f64>,
    pub sigma2: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub edf: f64,
    pub eigenbases: Vec<BasisRef>,
}

/// Writes `t,value,se,lower,upper` rows of a pointwise band at `level`.
pub fn write_effect_csv(
    path: &Path,
    preamble: &str,
    grid: &[f64],
    value: &DVector<f64>,
    se: &DVector<f64>,
    level: f64,
) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "band level must lie in (0, 1), got {level}"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut s = String::from(preamble);
    s.push_str("t,value,se,lower,upper\n");
    for i in 0..grid.len() {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            grid[i],
            value[i],
            se[i],
            value[i] - z * se[i],
            value[i] + z * se[i]
        ));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineSpec;
    use crate::fundata::{CurveInput, DimPoints, LayerDecl};
    use crate::mean::fit_univariate_means;
    use crate::pls::{Criterion, LambdaSearch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn grid() -> Vec<f64> {
        unit_grid(101)
    }

    /// Two-dimensional subject basis with two components.
    fn subject_basis(nu: [f64; 2], truncation: usize) -> MultiEigenBasis {
        let g = grid();
        let f = |m: usize, d: usize, t: f64| -> f64 {
            let base = if m == 0 { (PI * t).sin() } else { (2.0 * PI * t).cos() };
            base * if d == 0 {
                1.0
            } else if m == 0 {
                1.0
            } else {
                -1.0
            }
        };
        let mut functions: Vec<DMatrix<f64>> = (0..2).map(|d| DMatrix::from_fn(101, 2, |i, m| f(m, d, g[i]))).collect();
        let w = crate::numeric::trapezoid_weights(&g);
        let mut norms = DMatrix::zeros(2, 2);
        for m in 0..2 {
            let tot: f64 = (0..2)
                .map(|d| (0..101).map(|i| w[i] * functions[d][(i, m)].powi(2)).sum::<f64>())
                .sum();
            for d in 0..2 {
                functions[d].column_mut(m).scale_mut(1.0 / tot.sqrt());
                norms[(m, d)] = (0..101).map(|i| w[i] * functions[d][(i, m)].powi(2)).sum();
            }
        }
        MultiEigenBasis {
            process: "subject".into(),
            dims: vec!["a".into(), "b".into()],
            grid: g,
            weights: vec![1.0, 1.0],
            eigenvalues: nu.to_vec(),
            functions,
            norms,
            truncation,
        }
    }

    fn simulate(seed: u64, n_subj: usize, per: usize, nu: [f64; 2], sigma: f64) -> (FunDataset, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = subject_basis(nu, 2);
        let scores = DMatrix::from_fn(n_subj, 2, |_, m| rng.sample::<f64, _>(StandardNormal) * nu[m].sqrt());
        let mut curves = Vec::new();
        for s in 0..n_subj {
            for r in 0..per {
                let x = (r % 2) as f64;
                let points = (0..2)
                    .map(|d| {
                        let n = rng.random_range(10..20);
                        let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                        t.sort_by(f64::total_cmp);
                        t.dedup();
                        let y = t
                            .iter()
                            .map(|&tt| {
                                let mu = if d == 0 {
                                    (2.0 * PI * tt).sin() + x * tt
                                } else {
                                    tt * tt - 0.5 * x
                                };
                                let re: f64 = (0..2).map(|m| scores[(s, m)] * basis.eval(m, d, tt)).sum();
                                mu + re + sigma * rng.sample::<f64, _>(StandardNormal)
                            })
                            .collect();
                        DimPoints { t, y }
                    })
                    .collect();
                curves.push(CurveInput {
                    id: format!("s{s}r{r}"),
                    points,
                    covariates: vec![x],
                    labels: vec![format!("s{s:02}")],
                });
            }
        }
        let ds = FunDataset::new(
            vec!["a".into(), "b".into()],
            vec!["x".into()],
            vec![LayerDecl::crossed("subject")],
            curves,
        )
        .unwrap();
        (ds, scores)
    }

    fn formula() -> FixedFormula {
        let s = SplineSpec::cubic(8, 2).unwrap();
        FixedFormula::intercept_only(s).with_linear("x", "x", s)
    }

    fn spec(basis: MultiEigenBasis, sigma: f64) -> ModelSpec {
        ModelSpec {
            formula: formula(),
            bases: vec![basis],
            scedasticity: Scedasticity::PerDimension,
            sigma2: vec![sigma * sigma; 2],
            smoothing: SmoothingOptions::default(),
        }
    }

    #[test]
    fn random_block_width() {
        let (ds, _) = simulate(1, 3, 2, [1.0, 0.5], 0.1);
        let p = assemble(&ds, &spec(subject_basis([1.0, 0.5], 2), 0.1)).unwrap();
        let b = p.blocks.iter().find(|b| b.name == "subject").unwrap();
        assert_eq!(b.ncols(), 6);
        assert_eq!(p.n_obs(), ds.n_observations());
    }

    #[test]
    fn single_dimension_without_random_effects_matches_mean_design() {
        let (ds, _) = simulate(2, 4, 2, [1.0, 0.5], 0.1);
        let inputs: Vec<CurveInput> = ds
            .to_inputs()
            .into_iter()
            .map(|mut c| {
                c.points.truncate(1);
                c
            })
            .collect();
        let ds1 = FunDataset::new(
            vec!["a".into()],
            vec!["x".into()],
            vec![LayerDecl::crossed("subject")],
            inputs,
        )
        .unwrap();
        let sp = ModelSpec {
            formula: formula(),
            bases: vec![],
            scedasticity: Scedasticity::Homoscedastic,
            sigma2: vec![1.0],
            smoothing: SmoothingOptions::default(),
        };
        let p = assemble(&ds1, &sp).unwrap();
        let bound = BoundFormula::bind(&formula(), &ds1).unwrap();
        let (rows, _) = dim_rows(&ds1, 0);
        let mean_blocks = bound.blocks(&ds1, &rows, "a:").unwrap();
        assert_eq!(p.blocks, mean_blocks);
    }

    #[test]
    fn interpolation_hits_grid_nodes() {
        let b = subject_basis([1.0, 0.5], 2);
        for i in [0, 17, 50, 100] {
            assert_eq!(b.eval(1, 0, b.grid[i]), b.functions[0][(i, 1)]);
        }
    }

    #[test]
    fn decomposition_and_constraint() {
        let (ds, _) = simulate(3, 8, 4, [1.0, 0.3], 0.2);
        let fit = fit(&ds, &spec(subject_basis([1.0, 0.3], 2), 0.2)).unwrap();
        for k in 0..2 {
            assert!(fit.scores[0].scores.column(k).sum().abs() < 1e-8);
        }
        for (ci, c) in ds.curves().iter().enumerate() {
            let level = &ds.layers[0].levels[c.levels[0]];
            for d in 0..2 {
                let t = &c.points[d].t;
                let mean = fit.predict_mean(d, &ds.covariate_names, &c.covariates, t).unwrap();
                let re = fit.random_effect_curves("subject", level, &ds.dims[d], t).unwrap();
                assert!((&mean + &re - &fit.fitted[ci][d]).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn random_effect_curve_cases() {
        let (ds, _) = simulate(4, 4, 2, [1.0, 0.3], 0.2);
        let mut fit = fit(&ds, &spec(subject_basis([1.0, 0.3], 2), 0.2)).unwrap();
        let g = grid();
        fit.scores[0].scores.fill(0.0);
        assert_eq!(fit.random_effect_curves("subject", "s00", "a", &g).unwrap().amax(), 0.0);
        fit.scores[0].scores[(1, 0)] = 1.0;
        let curve = fit.random_effect_curves("subject", "s01", "b", &g).unwrap();
        let truth = fit.bases[0].functions[1].column(0);
        assert!((curve - truth).amax() < 1e-14);
        assert!(fit.random_effect_curves("subject", "nope", "a", &g).is_err());
    }

    #[test]
    fn no_random_effects_reproduces_mean_fit() {
        let (ds, _) = simulate(5, 6, 4, [1.0, 0.3], 0.2);
        let mean = fit_univariate_means(&ds, &formula(), &SmoothingOptions::default()).unwrap();
        let fit = fit(&ds, &spec(subject_basis([1.0, 0.3], 0), 0.2)).unwrap();
        for d in 0..2 {
            assert!((&fit.theta[d] - &mean.fits[d].coefficients).amax() < 1e-6);
        }
    }

    #[test]
    fn permutation_invariance() {
        let (ds, _) = simulate(6, 6, 2, [1.0, 0.3], 0.2);
        let mut inputs = ds.to_inputs();
        inputs.reverse();
        let rev = ds.with_curves(inputs).unwrap();
        let sp = spec(subject_basis([1.0, 0.3], 2), 0.2);
        let a = fit(&ds, &sp).unwrap();
        let b = fit(&rev, &sp).unwrap();
        for d in 0..2 {
            assert!(
                (&a.theta[d] - &b.theta[d]).amax() < 1e-8,
                "{}",
                (&a.theta[d] - &b.theta[d]).amax()
            );
        }
        assert!((&a.scores[0].scores - &b.scores[0].scores).amax() < 1e-8);
    }

    #[test]
    fn score_penalty_invariance() {
        let (ds, _) = simulate(7, 6, 2, [1.0, 0.3], 0.2);
        let lam = |l: f64| -> BTreeMap<String, f64> {
            let mut m: BTreeMap<String, f64> = ["a:intercept:t", "a:x:t", "b:intercept:t", "b:x:t"]
                .iter()
                .map(|k| (k.to_string(), 0.5))
                .collect();
            m.insert("re:subject".into(), l);
            m
        };
        let a = assemble(&ds, &spec(subject_basis([1.0, 0.3], 2), 0.2)).unwrap();
        let b = assemble(&ds, &spec(subject_basis([2.0, 0.6], 2), 0.2)).unwrap();
        let ca = a.gram().unwrap().solve_coefficients(&lam(1.0)).unwrap();
        let cb = b.gram().unwrap().solve_coefficients(&lam(2.0)).unwrap();
        assert!((ca - cb).amax() < 1e-9);
    }

    #[test]
    fn effect_se_matches_direct_product() {
        let (ds, _) = simulate(8, 5, 2, [1.0, 0.3], 0.2);
        let fit = fit(&ds, &spec(subject_basis([1.0, 0.3], 2), 0.2)).unwrap();
        let g = unit_grid(7);
        let (_, se) = fit.effect_estimates("x", "b", &g, None).unwrap();
        let cov = fit.pls_fit(1).covariance.to_dense();
        let block = fit.pls_fit(1).block("b:x").unwrap().clone();
        let design = fit.formula.effect_design(1, &g, None).unwrap();
        for i in 0..g.len() {
            let mut x = DVector::zeros(cov.nrows());
            x.rows_mut(block.offset, block.ncols)
                .copy_from(&design.row(i).transpose());
            let v = x.dot(&(&cov * &x));
            assert!((se[i] - v.sqrt()).abs() < 1e-8 * (1.0 + se[i]));
        }
        assert!(fit.effect_estimates("nope", "a", &g, None).is_err());
    }

    #[test]
    fn intercept_only_constant_data() {
        let curves = (0..6)
            .map(|i| CurveInput {
                id: format!("c{i}"),
                points: vec![DimPoints {
                    t: vec![0.0, 0.3, 0.6, 1.0],
                    y: vec![2.0 + 0.01 * (i as f64 - 2.5); 4],
                }],
                covariates: vec![],
                labels: vec![],
            })
            .collect();
        let ds = FunDataset::new(vec!["a".into()], vec![], vec![], curves).unwrap();
        let sp = ModelSpec {
            formula: FixedFormula::intercept_only(SplineSpec::cubic(6, 2).unwrap()),
            bases: vec![],
            scedasticity: Scedasticity::Homoscedastic,
            sigma2: vec![1.0],
            smoothing: SmoothingOptions::default(),
        };
        let fit = fit(&ds, &sp).unwrap();
        let (v, se) = fit.effect_estimates("intercept", "a", &unit_grid(11), None).unwrap();
        assert!(v.iter().all(|x| (x - 2.0).abs() < 1e-6));
        assert!(se.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn zero_variance_process_is_shrunk() {
        let search = LambdaSearch::default();
        let opts = SmoothingOptions {
            criterion: Criterion::Reml,
            search,
        };
        let run = |nu_true: [f64; 2]| {
            let (ds, _) = simulate(9, 10, 4, nu_true, 0.2);
            let mut sp = spec(subject_basis([1.0, 0.3], 2), 0.2);
            sp.smoothing = opts.clone();
            let f = fit(&ds, &sp).unwrap();
            f.scores[0].scores.iter().map(|x| x.abs()).sum::<f64>() / 20.0
        };
        let zero = run([1e-12, 1e-12]);
        let live = run([1.0, 0.3]);
        assert!(zero < 0.1 * live, "{zero} vs {live}");
    }

    #[test]
    fn homoscedastic_close_to_weighted_on_homoscedastic_data() {
        let (ds, _) = simulate(10, 6, 4, [1.0, 0.3], 0.2);
        let a = fit(&ds, &spec(subject_basis([1.0, 0.3], 2), 0.2)).unwrap();
        let mut sp = spec(subject_basis([1.0, 0.3], 2), 0.2);
        sp.scedasticity = Scedasticity::Homoscedastic;
        let b = fit(&ds, &sp).unwrap();
        let mut ss = 0.0;
        let mut n = 0.0;
        for (fa, fb) in a.fitted.iter().zip(&b.fitted) {
            for d in 0..2 {
                ss += (&fa[d] - &fb[d]).norm_squared();
                n += fa[d].len() as f64;
            }
        }
        assert!((ss / n).sqrt() < 1e-2);
    }

    #[test]
    fn summary_serializes() {
        let (ds, _) = simulate(11, 3, 2, [1.0, 0.3], 0.2);
        let fit = fit(&ds, &spec(subject_basis([1.0, 0.3], 2), 0.2)).unwrap();
        let json = serde_json::to_string(&fit.summary()).unwrap();
        let back: FitSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rho["subject"].len(), 3);
        assert_eq!(back.theta["x"]["a"].len(), 8);
    }
}
