//! Crossproduct construction and symmetric additive covariance smoothing.
//!
//! Products of centred observations are regressed on symmetric tensor-spline
//! surfaces, one per random process, switched on by the pair's group
//! indicators, plus a white-noise variance on the same-observation indicator.
//! Each surface is parameterized by the upper triangle of its coefficient
//! matrix, so it is symmetric by construction.
//!
//! Two routes build the normal equations. [`smooth_covariance_direct`]
//! aggregates per-cell basis moments and never materializes pairs;
//! [`build_crossproducts`] + [`smooth_covariance`] go through an explicit
//! pair table and exist for auditing and cross-checking.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{bspline_design, difference_penalty, kron, SplineSpec};
use crate::error::{Error, Result};
use crate::fundata::{FunDataset, LayerKind};
use crate::mean::SmoothingOptions;
use crate::pls::{Gram, GramBlock, PenaltyTerm};

/// Matrix mapping upper-triangle coefficients to `vec` of a symmetric
/// `b x b` matrix (row-major, index `k * b + l`).
pub fn symmetric_map(b: usize) -> DMatrix<f64> {
    let q = b * (b + 1) / 2;
    let mut t = DMatrix::zeros(b * b, q);
    let mut idx = 0;
    for k in 0..b {
        for l in k..b {
            t[(k * b + l, idx)] = 1.0;
            t[(l * b + k, idx)] = 1.0;
            idx += 1;
        }
    }
    t
}

fn unpack_symmetric(c: &[f64], b: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(b, b);
    let mut idx = 0;
    for k in 0..b {
        for l in k..b {
            m[(k, l)] = c[idx];
            m[(l, k)] = c[idx];
            idx += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CovSmoothOptions {
    pub basis: SplineSpec,
    /// Non-curve layers modeled as random processes; `None` models all.
    pub layers: Option<Vec<String>>,
    pub smoothing: SmoothingOptions,
}

impl Default for CovSmoothOptions {
    fn default() -> Self {
        CovSmoothOptions {
            basis: SplineSpec {
                degree: 3,
                num_basis: 5,
                penalty_order: 2,
            },
            layers: None,
            smoothing: SmoothingOptions::default(),
        }
    }
}

/// One stored pair of observations (`t <= t2`). Off-diagonal pairs stand for
/// both orders and carry weight 2.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossRow {
    pub dim: usize,
    pub t: f64,
    pub t2: f64,
    pub product: f64,
    pub same_group: Vec<bool>,
    pub same_curve: bool,
    pub same_point: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossproductTable {
    pub dims: Vec<String>,
    /// Modeled non-curve layers, aligned with `CrossRow::same_group`.
    pub layers: Vec<String>,
    pub rows: Vec<CrossRow>,
}

fn resolve_layers(ds: &FunDataset, requested: Option<&[String]>) -> Result<Vec<usize>> {
    match requested {
        Some(names) => names
            .iter()
            .map(|n| {
                let j = ds.layer_index(n)?;
                if ds.layers[j].kind == LayerKind::Curve {
                    return Err(Error::Config(format!("layer '{n}' is the implicit curve layer")));
                }
                Ok(j)
            })
            .collect(),
        None => Ok((0..ds.layers.len())
            .filter(|&j| ds.layers[j].kind != LayerKind::Curve)
            .collect()),
    }
}

/// All within-curve pairs and all cross-curve pairs of curves sharing a level
/// of at least one modeled layer, per dimension.
pub fn build_crossproducts(centered: &FunDataset, layers: &[String]) -> Result<CrossproductTable> {
    let lj = resolve_layers(centered, Some(layers))?;
    let curves = centered.curves();
    let mut rows = Vec::new();
    for d in 0..centered.n_dims() {
        for i in 0..curves.len() {
            for i2 in i..curves.len() {
                let same_curve = i == i2;
                let same_group: Vec<bool> = lj
                    .iter()
                    .map(|&j| curves[i].levels[j] == curves[i2].levels[j])
                    .collect();
                if !same_curve && !same_group.iter().any(|&s| s) {
                    continue;
                }
                let (p1, p2) = (&curves[i].points[d], &curves[i2].points[d]);
                for a in 0..p1.len() {
                    let start = if same_curve { a } else { 0 };
                    for b in start..p2.len() {
                        let same_point = same_curve && a == b;
                        let (t, t2) = if p1.t[a] <= p2.t[b] {
                            (p1.t[a], p2.t[b])
                        } else {
                            (p2.t[b], p1.t[a])
                        };
                        rows.push(CrossRow {
                            dim: d,
                            t,
                            t2,
                            product: p1.y[a] * p2.y[b],
                            same_group: same_group.clone(),
                            same_curve,
                            same_point,
                            weight: if same_point { 1.0 } else { 2.0 },
                        });
                    }
                }
            }
        }
    }
    Ok(CrossproductTable {
        dims: centered.dims.clone(),
        layers: lj.iter().map(|&j| centered.layers[j].name.clone()).collect(),
        rows,
    })
}

impl CrossproductTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut header = vec![
            "dim".to_string(),
            "t".into(),
            "t2".into(),
            "product".into(),
            "weight".into(),
        ];
        header.extend(self.layers.iter().map(|l| format!("same_{l}")));
        header.extend(["same_curve".to_string(), "same_point".to_string()]);
        writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for r in &self.rows {
            let mut f = vec![
                self.dims[r.dim].clone(),
                r.t.to_string(),
                r.t2.to_string(),
                r.product.to_string(),
                r.weight.to_string(),
            ];
            f.extend(r.same_group.iter().map(|&b| (b as u8).to_string()));
            f.push((r.same_curve as u8).to_string());
            f.push((r.same_point as u8).to_string());
            writeln!(w, "{}", f.join(",")).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Smoothed auto-covariance surfaces per process and dimension plus
/// per-dimension error variances.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    pub basis: SplineSpec,
    pub dims: Vec<String>,
    /// Modeled processes: non-curve layers in dataset order, then the curve
    /// layer (smooth residual).
    pub processes: Vec<String>,
    /// `surfaces[g][d]`: symmetric coefficient matrix of process `g` on `d`.
    pub surfaces: Vec<Vec<DMatrix<f64>>>,
    pub sigma2: Vec<f64>,
    pub lambda: Vec<BTreeMap<String, f64>>,
    pub warnings: Vec<String>,
}

impl CovarianceModel {
    pub fn process_index(&self, name: &str) -> Result<usize> {
        self.processes
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::Unknown {
                kind: "process",
                name: name.to_string(),
            })
    }

    pub fn dim_index(&self, name: &str) -> Result<usize> {
        self.dims.iter().position(|p| p == name).ok_or_else(|| Error::Unknown {
            kind: "dimension",
            name: name.to_string(),
        })
    }

    /// Surface of process `g` on dimension `d` evaluated on `grid` x `grid`.
    /// Only the upper triangle is computed; the lower one is mirrored.
    pub fn surface_on_grid(&self, g: usize, d: usize, grid: &[f64]) -> Result<DMatrix<f64>> {
        if g >= self.processes.len() || d >= self.dims.len() {
            return Err(Error::Unknown {
                kind: "process/dimension",
                name: format!("{g}/{d}"),
            });
        }
        let phi = bspline_design(&self.basis, grid)?;
        let pc = &phi * &self.surfaces[g][d];
        let n = grid.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = pc.row(i).dot(&phi.row(j));
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }
}

pub fn evaluate_surface(cm: &CovarianceModel, process: &str, dim: &str, grid: &[f64]) -> Result<DMatrix<f64>> {
    cm.surface_on_grid(cm.process_index(process)?, cm.dim_index(dim)?, grid)
}

/// Normal equations of one dimension in the symmetric parameterization.
struct DimSystem {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n_pairs: f64,
    mean_square: f64,
}

fn fit_dimension(
    sys: DimSystem,
    processes: &[String],
    basis: &SplineSpec,
    opts: &SmoothingOptions,
    dim_name: &str,
) -> Result<(Vec<DMatrix<f64>>, f64, BTreeMap<String, f64>, Vec<String>)> {
    let b = basis.num_basis;
    let q = b * (b + 1) / 2;
    let t = symmetric_map(b);
    let p = difference_penalty(b, basis.penalty_order)?.matrix;
    let i = DMatrix::<f64>::identity(b, b);
    let pen = t.transpose() * (kron(&p, &i) + kron(&i, &p)) * &t;
    let mut blocks: Vec<GramBlock> = processes
        .iter()
        .map(|g| GramBlock {
            name: g.clone(),
            ncols: q,
            penalties: vec![PenaltyTerm::new(pen.clone(), g.clone())],
        })
        .collect();
    blocks.push(GramBlock {
        name: "sigma2".into(),
        ncols: 1,
        penalties: vec![],
    });
    let gram = Gram::from_dense(blocks, sys.xtx, sys.xty, sys.yty, sys.n_pairs)?;
    let fit = gram.select(opts.criterion, &opts.search)?;
    let surfaces = (0..processes.len())
        .map(|g| unpack_symmetric(fit.coefficients.rows(g * q, q).as_slice(), b))
        .collect();
    let mut warnings = Vec::new();
    let raw = fit.coefficients[processes.len() * q];
    let floor = 1e-8 * sys.mean_square.max(f64::MIN_POSITIVE);
    let sigma2 = if raw < floor {
        let w = format!("dimension '{dim_name}': error variance estimate {raw:.3e} floored at {floor:.3e}");
        log::warn!("{w}");
        warnings.push(w);
        floor
    } else {
        raw
    };
    Ok((surfaces, sigma2, fit.lambda, warnings))
}

/// Normal equations from an explicit pair table.
fn table_system(tbl: &CrossproductTable, d: usize, active: &[usize], basis: &SplineSpec) -> Result<DimSystem> {
    let b = basis.num_basis;
    let q = b * (b + 1) / 2;
    let t = symmetric_map(b);
    let np = active.len() + 1;
    let p = np * q + 1;
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let (mut yty, mut n_pairs, mut sq, mut n_sq) = (0.0, 0.0, 0.0, 0.0);
    let rows: Vec<&CrossRow> = tbl.rows.iter().filter(|r| r.dim == d).collect();
    let t1: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let t2: Vec<f64> = rows.iter().map(|r| r.t2).collect();
    let b1 = bspline_design(basis, &t1)?;
    let b2 = bspline_design(basis, &t2)?;
    for (k, r) in rows.iter().enumerate() {
        let outer = DVector::from_fn(b * b, |idx, _| b1[(k, idx / b)] * b2[(k, idx % b)]);
        let base = t.tr_mul(&outer);
        let mut x = DVector::zeros(p);
        for (g, &j) in active.iter().enumerate() {
            if r.same_group[j] {
                x.rows_mut(g * q, q).copy_from(&base);
            }
        }
        if r.same_curve {
            x.rows_mut(active.len() * q, q).copy_from(&base);
        }
        if r.same_point {
            x[p - 1] = 1.0;
            sq += r.product;
            n_sq += 1.0;
        }
        xtx.ger(r.weight, &x, &x, 1.0);
        xty.axpy(r.weight * r.product, &x, 1.0);
        yty += r.weight * r.product * r.product;
        n_pairs += r.weight;
    }
    Ok(DimSystem {
        xtx,
        xty,
        yty,
        n_pairs,
        mean_square: if n_sq > 0.0 { sq / n_sq } else { 0.0 },
    })
}

/// Fits the additive covariance model from a pair table.
pub fn smooth_covariance(tbl: &CrossproductTable, opts: &CovSmoothOptions) -> Result<CovarianceModel> {
    opts.basis.check()?;
    let mut warnings = Vec::new();
    let active: Vec<usize> = (0..tbl.layers.len())
        .filter(|&j| {
            let ok = tbl.rows.iter().any(|r| r.same_group[j] && !r.same_curve);
            if !ok {
                warnings.push(format!(
                    "layer '{}' has no cross-curve pairs; its surface is set to zero",
                    tbl.layers[j]
                ));
            }
            ok
        })
        .collect();
    let mut processes: Vec<String> = active.iter().map(|&j| tbl.layers[j].clone()).collect();
    processes.push(crate::fundata::CURVE_LAYER.to_string());
    let per_dim = (0..tbl.dims.len())
        .into_par_iter()
        .map(|d| {
            let sys = table_system(tbl, d, &active, &opts.basis)?;
            fit_dimension(sys, &processes, &opts.basis, &opts.smoothing, &tbl.dims[d])
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_model(tbl.dims.clone(), processes, opts.basis, per_dim, warnings, None)
}

fn assemble_model(
    dims: Vec<String>,
    mut processes: Vec<String>,
    basis: SplineSpec,
    per_dim: Vec<(Vec<DMatrix<f64>>, f64, BTreeMap<String, f64>, Vec<String>)>,
    mut warnings: Vec<String>,
    dropped: Option<(Vec<String>, Vec<usize>)>,
) -> Result<CovarianceModel> {
    let np = processes.len();
    let b = basis.num_basis;
    let mut surfaces = vec![Vec::with_capacity(dims.len()); np];
    let mut sigma2 = Vec::new();
    let mut lambda = Vec::new();
    for (s, sg, l, w) in per_dim {
        for (g, m) in s.into_iter().enumerate() {
            surfaces[g].push(m);
        }
        sigma2.push(sg);
        lambda.push(l);
        warnings.extend(w);
    }
    // Layers dropped for lack of cross-curve pairs keep a zero surface so that
    // process order still follows the layer order.
    if let Some((all_names, active_pos)) = dropped {
        let mut full = Vec::new();
        let mut it = surfaces.into_iter();
        let mut pos_iter = active_pos.iter().peekable();
        for (k, _) in all_names.iter().enumerate() {
            if pos_iter.peek() == Some(&&k) {
                pos_iter.next();
                full.push(it.next().expect("surface"));
            } else {
                full.push(vec![DMatrix::zeros(b, b); dims.len()]);
            }
        }
        full.push(it.next().expect("curve surface"));
        surfaces = full;
        processes = all_names;
        processes.push(crate::fundata::CURVE_LAYER.to_string());
    }
    Ok(CovarianceModel {
        basis,
        dims,
        processes,
        surfaces,
        sigma2,
        lambda,
        warnings,
    })
}

/// Per-cell basis moments for one dimension.
#[derive(Clone)]
struct CellMoments {
    m: DMatrix<f64>,
    a: DVector<f64>,
    sq: f64,
    n: f64,
}

impl CellMoments {
    fn zero(b: usize) -> Self {
        CellMoments {
            m: DMatrix::zeros(b, b),
            a: DVector::zeros(b),
            sq: 0.0,
            n: 0.0,
        }
    }

    fn add(&mut self, o: &CellMoments) {
        self.m += &o.m;
        self.a += &o.a;
        self.sq += o.sq;
        self.n += o.n;
    }
}

fn aggregate<K: std::hash::Hash + Eq + Ord + Clone>(
    curves: &[CellMoments],
    key: impl Fn(usize) -> K,
    b: usize,
) -> Vec<CellMoments> {
    let mut cells: BTreeMap<K, CellMoments> = BTreeMap::new();
    for (i, c) in curves.iter().enumerate() {
        cells.entry(key(i)).or_insert_with(|| CellMoments::zero(b)).add(c);
    }
    cells.into_values().collect()
}

/// Fits the additive covariance model directly from centred data, using
/// per-cell moments instead of enumerating pairs.
pub fn smooth_covariance_direct(centered: &FunDataset, opts: &CovSmoothOptions) -> Result<CovarianceModel> {
    opts.basis.check()?;
    let lj = resolve_layers(centered, opts.layers.as_deref())?;
    let curves = centered.curves();
    let mut warnings = Vec::new();
    // A layer whose levels each hold a single curve is indistinguishable from
    // the curve-level process.
    let active: Vec<usize> = lj
        .iter()
        .copied()
        .filter(|&j| {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for c in curves {
                *counts.entry(c.levels[j]).or_default() += 1;
            }
            let ok = counts.values().any(|&n| n > 1);
            if !ok {
                warnings.push(format!(
                    "layer '{}' has no cross-curve pairs; its surface is set to zero",
                    centered.layers[j].name
                ));
            }
            ok
        })
        .collect();
    let all_names: Vec<String> = lj.iter().map(|&j| centered.layers[j].name.clone()).collect();
    let active_pos: Vec<usize> = active
        .iter()
        .map(|j| lj.iter().position(|x| x == j).expect("subset"))
        .collect();
    let mut processes: Vec<String> = active.iter().map(|&j| centered.layers[j].name.clone()).collect();
    processes.push(crate::fundata::CURVE_LAYER.to_string());

    let b = opts.basis.num_basis;
    let q = b * (b + 1) / 2;
    let t = symmetric_map(b);
    let np = processes.len();
    let na = active.len();

    let per_dim = (0..centered.n_dims())
        .into_par_iter()
        .map(|d| {
            let per_curve: Vec<CellMoments> = curves
                .iter()
                .map(|c| {
                    let p = &c.points[d];
                    let phi = bspline_design(&opts.basis, &p.t)?;
                    let y = DVector::from_column_slice(&p.y);
                    Ok(CellMoments {
                        m: phi.tr_mul(&phi),
                        a: phi.tr_mul(&y),
                        sq: y.norm_squared(),
                        n: p.len() as f64,
                    })
                })
                .collect::<Result<_>>()?;

            // Process g's cell key per curve; the curve process uses the curve index.
            let key = |g: usize, i: usize| -> usize {
                if g < na {
                    curves[i].levels[active[g]]
                } else {
                    i
                }
            };
            let kron_sum = |cells: &[CellMoments]| -> DMatrix<f64> {
                let mut s = DMatrix::zeros(b * b, b * b);
                for c in cells {
                    s += kron(&c.m, &c.m);
                }
                t.transpose() * s * &t
            };

            let p_tot = np * q + 1;
            let mut xtx = DMatrix::zeros(p_tot, p_tot);
            let mut xty = DVector::zeros(p_tot);
            for g in 0..np {
                let cells_g = aggregate(&per_curve, |i| key(g, i), b);
                let mut v = DVector::zeros(b * b);
                for c in &cells_g {
                    for k in 0..b {
                        for l in 0..b {
                            v[k * b + l] += c.a[k] * c.a[l];
                        }
                    }
                }
                xty.rows_mut(g * q, q).copy_from(&t.tr_mul(&v));
                for h in g..np {
                    let blk = if h == np - 1 {
                        kron_sum(&per_curve)
                    } else if h == g {
                        kron_sum(&cells_g)
                    } else {
                        kron_sum(&aggregate(&per_curve, |i| (key(g, i), key(h, i)), b))
                    };
                    xtx.view_mut((g * q, h * q), (q, q)).copy_from(&blk);
                    if h != g {
                        xtx.view_mut((h * q, g * q), (q, q)).copy_from(&blk.transpose());
                    }
                }
            }
            let mut total = CellMoments::zero(b);
            for c in &per_curve {
                total.add(c);
            }
            let m_vec = DVector::from_fn(b * b, |idx, _| total.m[(idx / b, idx % b)]);
            let cross = t.tr_mul(&m_vec);
            for g in 0..np {
                xtx.view_mut((g * q, p_tot - 1), (q, 1)).copy_from(&cross);
                xtx.view_mut((p_tot - 1, g * q), (1, q)).copy_from(&cross.transpose());
            }
            xtx[(p_tot - 1, p_tot - 1)] = total.n;
            xty[p_tot - 1] = total.sq;

            // Pairs in the union of modeled-layer cells, by inclusion-exclusion.
            let (mut yty, mut n_pairs) = (0.0, 0.0);
            if na == 0 {
                for c in &per_curve {
                    yty += c.sq * c.sq;
                    n_pairs += c.n * c.n;
                }
            } else {
                for mask in 1u32..(1 << na) {
                    let members: Vec<usize> = (0..na).filter(|g| mask & (1 << g) != 0).collect();
                    let sign = if members.len() % 2 == 1 { 1.0 } else { -1.0 };
                    let cells = aggregate(
                        &per_curve,
                        |i| members.iter().map(|&g| key(g, i)).collect::<Vec<usize>>(),
                        b,
                    );
                    for c in &cells {
                        yty += sign * c.sq * c.sq;
                        n_pairs += sign * c.n * c.n;
                    }
                }
            }
            let sys = DimSystem {
                xtx,
                xty,
                yty,
                n_pairs,
                mean_square: if total.n > 0.0 { total.sq / total.n } else { 0.0 },
            };
            if total.n == 0.0 {
                return Err(Error::Data(format!(
                    "dimension '{}' has no observations",
                    centered.dims[d]
                )));
            }
            fit_dimension(sys, &processes, &opts.basis, &opts.smoothing, &centered.dims[d])
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_model(
        centered.dims.clone(),
        processes,
        opts.basis,
        per_dim,
        warnings,
        Some((all_names, active_pos)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fundata::{CurveInput, DimPoints, LayerDecl};
    use crate::numeric::{trapezoid_weights, unit_grid};
    use crate::pls::Criterion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn curve(id: &str, t: Vec<f64>, y: Vec<f64>, labels: Vec<String>) -> CurveInput {
        CurveInput {
            id: id.into(),
            points: vec![DimPoints { t, y }],
            covariates: vec![],
            labels,
        }
    }

    #[test]
    fn single_curve_pair_count() {
        let ds = FunDataset::new(
            vec!["a".into()],
            vec![],
            vec![],
            vec![curve("c", vec![0.1, 0.4, 0.6, 0.9], vec![1.0, 2.0, 3.0, 4.0], vec![])],
        )
        .unwrap();
        let tbl = build_crossproducts(&ds, &[]).unwrap();
        assert_eq!(tbl.rows.len(), 10);
        assert!(tbl.rows.iter().all(|r| r.same_curve && r.t <= r.t2));
    }

    #[test]
    fn unrelated_and_related_curves() {
        let mk = |g1: &str, g2: &str| {
            FunDataset::new(
                vec!["a".into()],
                vec![],
                vec![LayerDecl::crossed("g")],
                vec![
                    curve("c1", vec![0.1, 0.5, 0.9], vec![1.0, 1.0, 1.0], vec![g1.into()]),
                    curve("c2", vec![0.2, 0.6, 0.8], vec![1.0, 1.0, 1.0], vec![g2.into()]),
                ],
            )
            .unwrap()
        };
        let tbl = build_crossproducts(&mk("a", "b"), &["g".into()]).unwrap();
        assert!(tbl.rows.iter().all(|r| r.same_curve));
        let tbl = build_crossproducts(&mk("a", "a"), &["g".into()]).unwrap();
        let cross: Vec<_> = tbl.rows.iter().filter(|r| !r.same_curve).collect();
        assert_eq!(cross.len(), 9);
        assert!(cross.iter().all(|r| r.same_group[0]));
    }

    #[test]
    fn symmetric_map_roundtrip() {
        let t = symmetric_map(3);
        let c = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let full = &t * DVector::from_column_slice(&c);
        let m = unpack_symmetric(&c, 3);
        for k in 0..3 {
            for l in 0..3 {
                assert_eq!(full[k * 3 + l], m[(k, l)]);
            }
        }
    }

    /// Grouped dataset with known kernels: subject process with one FPC,
    /// curve process with one FPC, white noise.
    fn simulate_grouped(n_subj: usize, per_subj: usize, seed: u64, nu_u: f64, nu_e: f64, sigma: f64) -> FunDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi_u = |t: f64| std::f64::consts::SQRT_2 * (std::f64::consts::PI * t).cos();
        let phi_e = |t: f64| std::f64::consts::SQRT_2 * (std::f64::consts::PI * t).sin();
        let mut curves = Vec::new();
        for s in 0..n_subj {
            let u: f64 = rng.sample::<f64, _>(StandardNormal) * nu_u.sqrt();
            for r in 0..per_subj {
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * nu_e.sqrt();
                let m = rng.random_range(8..20);
                let mut t: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
                t.sort_by(f64::total_cmp);
                t.dedup();
                let y = t
                    .iter()
                    .map(|&tt| u * phi_u(tt) + e * phi_e(tt) + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                curves.push(curve(&format!("s{s}r{r}"), t, y, vec![format!("s{s}")]));
            }
        }
        FunDataset::new(vec!["a".into()], vec![], vec![LayerDecl::crossed("subject")], curves).unwrap()
    }

    #[test]
    fn direct_route_matches_table_route() {
        let ds = simulate_grouped(6, 4, 1, 1.0, 0.5, 0.3);
        let opts = CovSmoothOptions::default();
        let direct = smooth_covariance_direct(&ds, &opts).unwrap();
        let tbl = build_crossproducts(&ds, &["subject".into()]).unwrap();
        let table = smooth_covariance(&tbl, &opts).unwrap();
        assert_eq!(direct.processes, table.processes);
        for g in 0..2 {
            assert!((&direct.surfaces[g][0] - &table.surfaces[g][0]).amax() < 1e-8);
        }
        assert!((direct.sigma2[0] - table.sigma2[0]).abs() < 1e-10);
    }

    fn rel_l2(est: &DMatrix<f64>, truth: &DMatrix<f64>, grid: &[f64]) -> f64 {
        let w = trapezoid_weights(grid);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                num += w[i] * w[j] * (est[(i, j)] - truth[(i, j)]).powi(2);
                den += w[i] * w[j] * truth[(i, j)].powi(2);
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn recovers_known_curve_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nu: f64 = 2.0;
        let phi = |t: f64| std::f64::consts::SQRT_2 * (std::f64::consts::PI * t).sin();
        let curves = (0..200)
            .map(|i| {
                let s: f64 = rng.sample::<f64, _>(StandardNormal) * nu.sqrt();
                let m = rng.random_range(10..20);
                let mut t: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
                t.sort_by(f64::total_cmp);
                t.dedup();
                let y = t
                    .iter()
                    .map(|&tt| s * phi(tt) + 0.2 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                curve(&format!("c{i}"), t, y, vec![])
            })
            .collect();
        let ds = FunDataset::new(vec!["a".into()], vec![], vec![], curves).unwrap();
        let cm = smooth_covariance_direct(&ds, &CovSmoothOptions::default()).unwrap();
        let grid = unit_grid(51);
        let est = evaluate_surface(&cm, crate::fundata::CURVE_LAYER, "a", &grid).unwrap();
        let truth = DMatrix::from_fn(51, 51, |i, j| nu * phi(grid[i]) * phi(grid[j]));
        let err = rel_l2(&est, &truth, &grid);
        assert!(err < 0.15, "relative error {err}");
    }

    #[test]
    fn white_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sigma2: f64 = 0.5;
        let curves = (0..500)
            .map(|i| {
                let t: Vec<f64> = (0..20)
                    .map(|k| (k as f64 + rng.random_range(0.0..0.9)) / 20.0)
                    .collect();
                let y = t
                    .iter()
                    .map(|_| sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                curve(&format!("c{i}"), t, y, vec![])
            })
            .collect();
        let ds = FunDataset::new(vec!["a".into()], vec![], vec![], curves).unwrap();
        let cm = smooth_covariance_direct(&ds, &CovSmoothOptions::default()).unwrap();
        assert!(
            ((cm.sigma2[0] - sigma2) / sigma2).abs() < 0.1,
            "sigma2 {}",
            cm.sigma2[0]
        );
    }

    #[test]
    fn diagonal_lower_bound() {
        let ds = simulate_grouped(50, 10, 13, 0.0, 1.0, 0.5);
        let opts = CovSmoothOptions {
            layers: Some(vec![]),
            ..CovSmoothOptions::default()
        };
        let cm = smooth_covariance_direct(&ds, &opts).unwrap();
        let mut sq = 0.0;
        let mut n = 0.0;
        let mut est = 0.0;
        for c in ds.curves() {
            let k = cm.surface_on_grid(0, 0, &c.points[0].t).unwrap();
            for (i, y) in c.points[0].y.iter().enumerate() {
                sq += y * y;
                n += 1.0;
                est += k[(i, i)] + cm.sigma2[0];
            }
        }
        assert!(est / n >= 0.9 * sq / n, "{} vs {}", est / n, sq / n);
    }

    #[test]
    fn doubling_curves_keeps_surfaces() {
        let ds = simulate_grouped(5, 4, 14, 1.0, 0.5, 0.3);
        let mut inputs = ds.to_inputs();
        let copies: Vec<CurveInput> = inputs
            .iter()
            .map(|c| {
                let mut c2 = c.clone();
                c2.id = format!("{}_copy", c.id);
                c2.labels = c.labels.iter().map(|l| format!("{l}_copy")).collect();
                c2
            })
            .collect();
        inputs.extend(copies);
        let doubled = ds.with_curves(inputs).unwrap();
        let fixed = |lam: f64| CovSmoothOptions {
            smoothing: SmoothingOptions {
                criterion: Criterion::Gcv,
                search: crate::pls::LambdaSearch {
                    lower: lam,
                    upper: lam,
                    grid_points: 1,
                    ..Default::default()
                },
            },
            ..CovSmoothOptions::default()
        };
        let a = smooth_covariance_direct(&ds, &fixed(1.0)).unwrap();
        let b = smooth_covariance_direct(&doubled, &fixed(1.0)).unwrap();
        // Grid scales follow the Gram trace, so equal relative lambdas match.
        for g in 0..2 {
            assert!((&a.surfaces[g][0] - &b.surfaces[g][0]).amax() < 1e-6);
        }
        assert!((a.sigma2[0] - b.sigma2[0]).abs() < 1e-6);
    }

    #[test]
    fn curve_only_fit_ignores_layers() {
        let ds = simulate_grouped(5, 4, 15, 1.0, 0.5, 0.3);
        let opts = CovSmoothOptions {
            layers: Some(vec![]),
            ..CovSmoothOptions::default()
        };
        let a = smooth_covariance_direct(&ds, &opts).unwrap();
        let stripped = FunDataset::new(
            ds.dims.clone(),
            vec![],
            vec![],
            ds.to_inputs()
                .into_iter()
                .map(|mut c| {
                    c.labels.clear();
                    c
                })
                .collect(),
        )
        .unwrap();
        let b = smooth_covariance_direct(&stripped, &CovSmoothOptions::default()).unwrap();
        assert_eq!(a.processes, vec![crate::fundata::CURVE_LAYER.to_string()]);
        assert!((&a.surfaces[0][0] - &b.surfaces[0][0]).amax() < 1e-12);
    }

    #[test]
    fn singleton_layer_is_dropped_with_warning() {
        let ds = simulate_grouped(8, 1, 16, 1.0, 0.5, 0.3);
        let cm = smooth_covariance_direct(&ds, &CovSmoothOptions::default()).unwrap();
        assert_eq!(
            cm.processes,
            vec!["subject".to_string(), crate::fundata::CURVE_LAYER.to_string()]
        );
        assert_eq!(cm.surfaces[0][0], DMatrix::zeros(5, 5));
        assert!(!cm.warnings.is_empty());
    }

    #[test]
    fn surface_evaluation() {
        let ds = simulate_grouped(6, 4, 17, 1.0, 0.5, 0.3);
        let cm = smooth_covariance_direct(&ds, &CovSmoothOptions::default()).unwrap();
        let one = cm.surface_on_grid(1, 0, &[0.3]).unwrap();
        assert_eq!(one.shape(), (1, 1));
        let grid = unit_grid(13);
        let s = cm.surface_on_grid(0, 0, &grid).unwrap();
        assert_eq!(s, s.transpose());
        let phi = bspline_design(&cm.basis, &[0.11, 0.87]).unwrap();
        let oracle = (phi.row(0) * &cm.surfaces[0][0] * phi.row(1).transpose())[(0, 0)];
        let direct = cm.surface_on_grid(0, 0, &[0.11, 0.87]).unwrap();
        assert!((direct[(0, 1)] - oracle).abs() < 1e-12);
        assert!(evaluate_surface(&cm, "nope", "a", &grid).is_err());
    }
}
