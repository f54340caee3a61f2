//! Sparse multivariate functional data with grouping structure.
//!
//! Curves are observed on per-dimension grids that may differ between
//! dimensions and between curves. Each curve carries scalar covariates and one
//! label per grouping layer. A curve-level layer (one level per curve) is
//! always present and named [`CURVE_LAYER`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::median;

pub const CURVE_LAYER: &str = "curve";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Crossed,
    Nested { parent: String },
    Curve,
}

/// Declaration of a grouping layer before levels are known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDecl {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerDecl {
    pub fn crossed(name: &str) -> Self {
        LayerDecl {
            name: name.to_string(),
            kind: LayerKind::Crossed,
        }
    }

    pub fn nested(name: &str, parent: &str) -> Self {
        LayerDecl {
            name: name.to_string(),
            kind: LayerKind::Nested {
                parent: parent.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingLayer {
    pub name: String,
    pub kind: LayerKind,
    /// Sorted effective level keys. For nested layers a key joins the parent
    /// key and the raw label with `/`, so a nested level is identified by the
    /// product of parent and child indicators.
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DimPoints {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl DimPoints {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunCurve {
    pub id: String,
    /// One entry per dataset dimension, possibly empty.
    pub points: Vec<DimPoints>,
    /// Aligned with [`FunDataset::covariate_names`].
    pub covariates: Vec<f64>,
    /// Raw labels aligned with [`FunDataset::layers`].
    pub labels: Vec<String>,
    /// Effective level index per layer.
    pub levels: Vec<usize>,
}

/// Curve description used to build a dataset.
#[derive(Debug, Clone)]
pub struct CurveInput {
    pub id: String,
    pub points: Vec<DimPoints>,
    pub covariates: Vec<f64>,
    /// Raw labels for the declared (non-curve) layers, in declaration order.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunDataset {
    pub dims: Vec<String>,
    pub covariate_names: Vec<String>,
    pub layers: Vec<GroupingLayer>,
    curves: Vec<FunCurve>,
}

impl FunDataset {
    /// Builds and validates a dataset. The curve-level layer is appended to
    /// `layer_decls` automatically.
    pub fn new(
        dims: Vec<String>,
        covariate_names: Vec<String>,
        layer_decls: Vec<LayerDecl>,
        curves: Vec<CurveInput>,
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Data("dataset needs at least one dimension".into()));
        }
        let mut seen = BTreeSet::new();
        for d in &dims {
            if !seen.insert(d) {
                return Err(Error::Data(format!("duplicate dimension name '{d}'")));
            }
        }
        for decl in &layer_decls {
            if decl.name == CURVE_LAYER || decl.kind == LayerKind::Curve {
                return Err(Error::Data(format!(
                    "layer '{}': the curve-level layer is implicit",
                    decl.name
                )));
            }
        }
        let decl_index: HashMap<&str, usize> = layer_decls
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.as_str(), i))
            .collect();
        if decl_index.len() != layer_decls.len() {
            return Err(Error::Data("duplicate layer names".into()));
        }
        for decl in &layer_decls {
            if let LayerKind::Nested { parent } = &decl.kind {
                if !decl_index.contains_key(parent.as_str()) {
                    return Err(Error::Unknown {
                        kind: "parent layer",
                        name: parent.clone(),
                    });
                }
            }
        }

        let mut ids = BTreeSet::new();
        for c in &curves {
            if !ids.insert(c.id.clone()) {
                return Err(Error::Data(format!("duplicate curve id '{}'", c.id)));
            }
            if c.points.len() != dims.len() {
                return Err(Error::Data(format!(
                    "curve '{}' has {} dimensions, expected {}",
                    c.id,
                    c.points.len(),
                    dims.len()
                )));
            }
            if c.covariates.len() != covariate_names.len() {
                return Err(Error::Data(format!(
                    "curve '{}' has {} covariates, expected {}",
                    c.id,
                    c.covariates.len(),
                    covariate_names.len()
                )));
            }
            if c.labels.len() != layer_decls.len() {
                return Err(Error::Data(format!(
                    "curve '{}' has {} group labels, expected {}",
                    c.id,
                    c.labels.len(),
                    layer_decls.len()
                )));
            }
            if c.points.iter().all(|p| p.is_empty()) {
                return Err(Error::Data(format!("curve '{}' has no observations", c.id)));
            }
            for (d, p) in c.points.iter().enumerate() {
                if p.t.len() != p.y.len() {
                    return Err(Error::Data(format!(
                        "curve '{}' dim {}: t/y length mismatch",
                        c.id, dims[d]
                    )));
                }
                for (k, &t) in p.t.iter().enumerate() {
                    if !(0.0..=1.0).contains(&t) {
                        return Err(Error::Domain {
                            what: format!("t of curve '{}' dim '{}'", c.id, dims[d]),
                            value: t,
                        });
                    }
                    if k > 0 && t <= p.t[k - 1] {
                        return Err(Error::Data(format!(
                            "curve '{}' dim '{}': t values must be strictly increasing",
                            c.id, dims[d]
                        )));
                    }
                }
                if p.y.iter().any(|y| !y.is_finite()) {
                    return Err(Error::Data(format!("curve '{}' dim '{}': non-finite y", c.id, dims[d])));
                }
            }
        }

        // Effective keys, resolving nested parents recursively.
        let n_decl = layer_decls.len();
        let effective_key = |labels: &[String]| -> Vec<String> {
            let mut keys: Vec<Option<String>> = vec![None; n_decl];
            fn resolve(
                i: usize,
                decls: &[LayerDecl],
                idx: &HashMap<&str, usize>,
                labels: &[String],
                keys: &mut Vec<Option<String>>,
                depth: usize,
            ) -> String {
                if let Some(k) = &keys[i] {
                    return k.clone();
                }
                let key = match &decls[i].kind {
                    LayerKind::Nested { parent } if depth <= decls.len() => {
                        let p = idx[parent.as_str()];
                        let pk = resolve(p, decls, idx, labels, keys, depth + 1);
                        format!("{pk}/{}", labels[i])
                    }
                    _ => labels[i].clone(),
                };
                keys[i] = Some(key.clone());
                key
            }
            (0..n_decl)
                .map(|i| resolve(i, &layer_decls, &decl_index, labels, &mut keys, 0))
                .collect()
        };
        let curve_keys: Vec<Vec<String>> = curves.iter().map(|c| effective_key(&c.labels)).collect();

        let mut layers: Vec<GroupingLayer> = layer_decls
            .iter()
            .enumerate()
            .map(|(j, decl)| {
                let levels: BTreeSet<&String> = curve_keys.iter().map(|k| &k[j]).collect();
                GroupingLayer {
                    name: decl.name.clone(),
                    kind: decl.kind.clone(),
                    levels: levels.into_iter().cloned().collect(),
                }
            })
            .collect();
        layers.push(GroupingLayer {
            name: CURVE_LAYER.to_string(),
            kind: LayerKind::Curve,
            levels: ids.iter().cloned().collect(),
        });

        let built = curves
            .into_iter()
            .zip(curve_keys)
            .map(|(c, keys)| {
                let mut levels: Vec<usize> = keys
                    .iter()
                    .enumerate()
                    .map(|(j, k)| layers[j].levels.binary_search(k).expect("level present"))
                    .collect();
                levels.push(layers[n_decl].levels.binary_search(&c.id).expect("id present"));
                let mut labels = c.labels;
                labels.push(c.id.clone());
                FunCurve {
                    id: c.id,
                    points: c.points,
                    covariates: c.covariates,
                    labels,
                    levels,
                }
            })
            .collect();

        Ok(FunDataset {
            dims,
            covariate_names,
            layers,
            curves: built,
        })
    }

    pub fn curves(&self) -> &[FunCurve] {
        &self.curves
    }

    pub fn n_curves(&self) -> usize {
        self.curves.len()
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn n_observations(&self) -> usize {
        self.curves
            .iter()
            .map(|c| c.points.iter().map(DimPoints::len).sum::<usize>())
            .sum()
    }

    pub fn n_observations_dim(&self, d: usize) -> usize {
        self.curves.iter().map(|c| c.points[d].len()).sum()
    }

    pub fn dim_index(&self, name: &str) -> Result<usize> {
        self.dims.iter().position(|d| d == name).ok_or_else(|| Error::Unknown {
            kind: "dimension",
            name: name.to_string(),
        })
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Unknown {
                kind: "covariate",
                name: name.to_string(),
            })
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Unknown {
                kind: "layer",
                name: name.to_string(),
            })
    }

    pub fn curve_layer_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Declarations of the non-curve layers, in order.
    pub fn layer_decls(&self) -> Vec<LayerDecl> {
        self.layers
            .iter()
            .filter(|l| l.kind != LayerKind::Curve)
            .map(|l| LayerDecl {
                name: l.name.clone(),
                kind: l.kind.clone(),
            })
            .collect()
    }

    /// Copy of the dataset with every response replaced by `f(curve, dim, t, y)`.
    pub fn map_values<F>(&self, mut f: F) -> Result<FunDataset>
    where
        F: FnMut(&FunCurve, usize, f64, f64) -> Result<f64>,
    {
        let mut out = self.clone();
        for (c_new, c) in out.curves.iter_mut().zip(&self.curves) {
            for (d, p) in c.points.iter().enumerate() {
                for (k, (&t, &y)) in p.t.iter().zip(&p.y).enumerate() {
                    c_new.points[d].y[k] = f(c, d, t, y)?;
                }
            }
        }
        Ok(out)
    }

    /// Keep only the curves for which `keep` returns true.
    pub fn filter_curves<F: Fn(&FunCurve) -> bool>(&self, keep: F) -> Result<FunDataset> {
        let decls = self.layer_decls();
        let n_decl = decls.len();
        let curves = self
            .curves
            .iter()
            .filter(|c| keep(c))
            .map(|c| CurveInput {
                id: c.id.clone(),
                points: c.points.clone(),
                covariates: c.covariates.clone(),
                labels: c.labels[..n_decl].to_vec(),
            })
            .collect();
        FunDataset::new(self.dims.clone(), self.covariate_names.clone(), decls, curves)
    }

    /// Rebuilds the dataset from curve inputs with the same schema.
    pub fn with_curves(&self, curves: Vec<CurveInput>) -> Result<FunDataset> {
        FunDataset::new(
            self.dims.clone(),
            self.covariate_names.clone(),
            self.layer_decls(),
            curves,
        )
    }

    /// Curve inputs equivalent to this dataset (inverse of [`FunDataset::new`]).
    pub fn to_inputs(&self) -> Vec<CurveInput> {
        let n_decl = self.layers.len() - 1;
        self.curves
            .iter()
            .map(|c| CurveInput {
                id: c.id.clone(),
                points: c.points.clone(),
                covariates: c.covariates.clone(),
                labels: c.labels[..n_decl].to_vec(),
            })
            .collect()
    }
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Layer columns of the meta file. When `None`, every non-numeric meta
    /// column is taken as a crossed layer and every numeric one as a covariate.
    pub layers: Option<Vec<LayerDecl>>,
    /// Min-max rescale all t values to [0, 1] before validation.
    #[serde(default)]
    pub rescale: bool,
}

/// Curves of a long-format points file, in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTable {
    /// Dimension names in order of first appearance.
    pub dims: Vec<String>,
    /// Curve id and per-dimension points sorted by `t`.
    pub curves: Vec<(String, Vec<DimPoints>)>,
}

impl PointTable {
    /// Writes the table in long format after `preamble`.
    pub fn write_csv(&self, path: &Path, preamble: &str) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(preamble.as_bytes()).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["curve_id", "dim", "t", "y"])?;
        for (id, points) in &self.curves {
            for (d, p) in points.iter().enumerate() {
                for (t, y) in p.t.iter().zip(&p.y) {
                    w.write_record([id.as_str(), self.dims[d].as_str(), &t.to_string(), &y.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn n_points(&self) -> usize {
        self.curves.iter().flat_map(|c| c.1.iter()).map(DimPoints::len).sum()
    }
}

/// Reads a long-format points CSV with columns `curve_id,dim,t,y`.
pub fn read_points(points_file: &Path) -> Result<PointTable> {
    let mut dims: Vec<String> = Vec::new();
    let mut raw: BTreeMap<String, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    let mut curve_order: Vec<String> = Vec::new();

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(points_file)
        .map_err(|e| with_path(e, points_file))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("points file lacks column '{name}'")))
    };
    let (ci, di, ti, yi) = (col("curve_id")?, col("dim")?, col("t")?, col("y")?);
    for (row_no, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row_no + 2;
        let id = rec.get(ci).unwrap_or("").to_string();
        let dim = rec.get(di).unwrap_or("").to_string();
        let t: f64 = rec
            .get(ti)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: non-numeric t")))?;
        let y: f64 = rec
            .get(yi)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: non-numeric y '{}'", rec.get(yi).unwrap_or(""))))?;
        if !y.is_finite() || !t.is_finite() {
            return Err(Error::Data(format!("line {line}: non-finite value")));
        }
        let d = match dims.iter().position(|x| *x == dim) {
            Some(d) => d,
            None => {
                dims.push(dim);
                dims.len() - 1
            }
        };
        let entry = raw.entry(id.clone()).or_insert_with(|| {
            curve_order.push(id.clone());
            Vec::new()
        });
        if entry.len() <= d {
            entry.resize(d + 1, Vec::new());
        }
        entry[d].push((t, y));
    }

    let mut curves = Vec::with_capacity(curve_order.len());
    for id in curve_order {
        let per_dim = raw.remove(&id).expect("present");
        let mut points = Vec::with_capacity(dims.len());
        for d in 0..dims.len() {
            let mut pts = per_dim.get(d).cloned().unwrap_or_default();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pts.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Data(format!(
                        "duplicate observation for curve '{id}', dim '{}', t={}",
                        dims[d], w[0].0
                    )));
                }
            }
            points.push(DimPoints {
                t: pts.iter().map(|p| p.0).collect(),
                y: pts.iter().map(|p| p.1).collect(),
            });
        }
        curves.push((id, points));
    }
    Ok(PointTable { dims, curves })
}

fn with_path(e: csv::Error, path: &Path) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Loads a long-format points CSV (`curve_id,dim,t,y`) and a per-curve meta
/// CSV (`curve_id,<covariates...>,<layers...>`). Dimension order is the order
/// of first appearance in the points file.
pub fn load_dataset(points_file: &Path, meta_file: &Path, opts: &LoadOptions) -> Result<FunDataset> {
    let mut table = read_points(points_file)?;
    if opts.rescale {
        let all_t = table
            .curves
            .iter()
            .flat_map(|c| c.1.iter())
            .flat_map(|p| p.t.iter().copied());
        let (lo, hi) = all_t.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
        if hi > lo {
            for p in table.curves.iter_mut().flat_map(|c| c.1.iter_mut()) {
                p.t.iter_mut().for_each(|t| *t = (*t - lo) / (hi - lo));
            }
        }
    }
    let dims = table.dims;

    // Meta file.
    let mut mrdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(meta_file)
        .map_err(|e| with_path(e, meta_file))?;
    let mheaders: Vec<String> = mrdr.headers()?.iter().map(str::to_string).collect();
    let id_col = mheaders
        .iter()
        .position(|h| h == "curve_id")
        .ok_or_else(|| Error::Data("meta file lacks column 'curve_id'".into()))?;
    let mut meta_rows: HashMap<String, Vec<String>> = HashMap::new();
    for rec in mrdr.records() {
        let rec = rec?;
        let fields: Vec<String> = rec.iter().map(str::to_string).collect();
        let id = fields[id_col].clone();
        if meta_rows.insert(id.clone(), fields).is_some() {
            return Err(Error::Data(format!("meta file lists curve '{id}' twice")));
        }
    }
    let other_cols: Vec<usize> = (0..mheaders.len()).filter(|&i| i != id_col).collect();

    let layer_decls: Vec<LayerDecl> = match &opts.layers {
        Some(l) => {
            for decl in l {
                if !mheaders.contains(&decl.name) {
                    return Err(Error::Data(format!("meta file lacks layer column '{}'", decl.name)));
                }
            }
            l.clone()
        }
        None => other_cols
            .iter()
            .filter(|&&i| meta_rows.values().any(|r| r[i].parse::<f64>().is_err()))
            .map(|&i| LayerDecl::crossed(&mheaders[i]))
            .collect(),
    };
    let layer_cols: Vec<usize> = layer_decls
        .iter()
        .map(|decl| mheaders.iter().position(|h| *h == decl.name).expect("checked"))
        .collect();
    let cov_cols: Vec<usize> = other_cols.iter().copied().filter(|i| !layer_cols.contains(i)).collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&i| mheaders[i].clone()).collect();

    let mut curves = Vec::with_capacity(table.curves.len());
    for (id, points) in table.curves {
        let meta = meta_rows
            .get(&id)
            .ok_or_else(|| Error::Data(format!("curve '{id}' missing from meta file")))?;
        let covariates = cov_cols
            .iter()
            .map(|&i| {
                meta[i].parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "curve '{id}': covariate '{}' is not numeric ('{}')",
                        mheaders[i], meta[i]
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let labels = layer_cols.iter().map(|&i| meta[i].clone()).collect();
        curves.push(CurveInput {
            id,
            points,
            covariates,
            labels,
        });
    }
    FunDataset::new(dims, covariate_names, layer_decls, curves)
}

/// Writes a dataset in the format read by [`load_dataset`].
pub fn write_dataset(ds: &FunDataset, points_file: &Path, meta_file: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(points_file)?;
    w.write_record(["curve_id", "dim", "t", "y"])?;
    for c in ds.curves() {
        for (d, p) in c.points.iter().enumerate() {
            for (t, y) in p.t.iter().zip(&p.y) {
                w.write_record([c.id.as_str(), ds.dims[d].as_str(), &t.to_string(), &y.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(points_file, e))?;

    let mut m = csv::Writer::from_path(meta_file)?;
    let n_decl = ds.layers.len() - 1;
    let mut header = vec!["curve_id".to_string()];
    header.extend(ds.covariate_names.iter().cloned());
    header.extend(ds.layers[..n_decl].iter().map(|l| l.name.clone()));
    m.write_record(&header)?;
    for c in ds.curves() {
        let mut row = vec![c.id.clone()];
        row.extend(c.covariates.iter().map(|v| v.to_string()));
        row.extend(c.labels[..n_decl].iter().cloned());
        m.write_record(&row)?;
    }
    m.flush().map_err(|e| Error::io(meta_file, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimCounts {
    pub dim: String,
    pub curves_observed: usize,
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_curves: usize,
    pub n_observations: usize,
    pub per_dim: Vec<DimCounts>,
    pub per_layer: Vec<(String, usize)>,
    /// `layer:label` pairs whose raw label appears under more than one parent.
    pub nested_inconsistencies: Vec<String>,
    /// `(curve, dim)` pairs without any observation.
    pub missing_dims: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty() && self.nested_inconsistencies.is_empty()
    }
}

pub fn validate(ds: &FunDataset) -> ValidationReport {
    let mut warnings = Vec::new();
    if ds.n_curves() == 0 {
        warnings.push("dataset contains no curves".to_string());
    }
    let mut missing_dims = Vec::new();
    let per_dim = ds
        .dims
        .iter()
        .enumerate()
        .map(|(d, name)| {
            let counts: Vec<usize> = ds
                .curves()
                .iter()
                .map(|c| c.points[d].len())
                .filter(|&n| n > 0)
                .collect();
            for c in ds.curves() {
                if c.points[d].is_empty() {
                    missing_dims.push((c.id.clone(), name.clone()));
                }
            }
            let as_f: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
            DimCounts {
                dim: name.clone(),
                curves_observed: counts.len(),
                min: counts.iter().copied().min().unwrap_or(0),
                median: if counts.is_empty() { 0.0 } else { median(&as_f) },
                max: counts.iter().copied().max().unwrap_or(0),
            }
        })
        .collect();
    if !missing_dims.is_empty() {
        warnings.push(format!(
            "{} curve/dimension pairs have no observations; they contribute no crossproducts",
            missing_dims.len()
        ));
    }

    let mut nested_inconsistencies = Vec::new();
    for (j, layer) in ds.layers.iter().enumerate() {
        if let LayerKind::Nested { parent } = &layer.kind {
            let p = ds.layer_index(parent).expect("validated at construction");
            let mut parents: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
            for c in ds.curves() {
                parents
                    .entry(c.labels[j].as_str())
                    .or_default()
                    .insert(c.labels[p].as_str());
            }
            for (label, ps) in parents {
                if ps.len() > 1 {
                    nested_inconsistencies.push(format!("{}:{}", layer.name, label));
                }
            }
        }
    }

    ValidationReport {
        n_curves: ds.n_curves(),
        n_observations: ds.n_observations(),
        per_dim,
        per_layer: ds.layers.iter().map(|l| (l.name.clone(), l.levels.len())).collect(),
        nested_inconsistencies,
        missing_dims,
        warnings,
    }
}

/// One-hot membership matrix (curves x levels) with sorted level order.
pub fn indicator_matrix(ds: &FunDataset, layer: &str) -> Result<DMatrix<f64>> {
    let j = ds.layer_index(layer)?;
    let mut z = DMatrix::zeros(ds.n_curves(), ds.layers[j].levels.len());
    for (i, c) in ds.curves().iter().enumerate() {
        z[(i, c.levels[j])] = 1.0;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(id: &str, labels: &[&str], x: f64) -> CurveInput {
        CurveInput {
            id: id.into(),
            points: vec![
                DimPoints {
                    t: vec![0.0, 0.5, 1.0],
                    y: vec![1.0, 2.0, 3.0],
                },
                DimPoints {
                    t: vec![0.1, 0.2, 0.9],
                    y: vec![0.0, -1.0, 1.0],
                },
            ],
            covariates: vec![x],
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn dims() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn counts_observations() {
        let ds = FunDataset::new(
            dims(),
            vec!["x".into()],
            vec![],
            vec![curve("c1", &[], 0.0), curve("c2", &[], 1.0)],
        )
        .unwrap();
        assert_eq!(ds.n_dims(), 2);
        assert_eq!(ds.n_observations(), 12);
        assert_eq!(ds.layers.len(), 1);
        assert_eq!(ds.layers[0].kind, LayerKind::Curve);
    }

    #[test]
    fn indicator_two_groups() {
        let ds = FunDataset::new(
            dims(),
            vec!["x".into()],
            vec![LayerDecl::crossed("g")],
            vec![
                curve("c1", &["a"], 0.0),
                curve("c2", &["a"], 0.0),
                curve("c3", &["b"], 0.0),
                curve("c4", &["b"], 0.0),
            ],
        )
        .unwrap();
        let z = indicator_matrix(&ds, "g").unwrap();
        assert_eq!(z, DMatrix::from_row_slice(4, 2, &[1., 0., 1., 0., 0., 1., 0., 1.]));
        let zc = indicator_matrix(&ds, CURVE_LAYER).unwrap();
        assert_eq!(zc, DMatrix::identity(4, 4));
        assert!(matches!(indicator_matrix(&ds, "nope"), Err(Error::Unknown { .. })));
    }

    #[test]
    fn nested_indicator_uses_label_pairs() {
        // Enumerate subject x session pairs: sessions "1","2" repeat across subjects.
        let pairs = [("s1", "1"), ("s1", "2"), ("s2", "1"), ("s2", "2")];
        let curves = pairs
            .iter()
            .enumerate()
            .map(|(i, (s, k))| curve(&format!("c{i}"), &[s, k], 0.0))
            .collect();
        let ds = FunDataset::new(
            dims(),
            vec!["x".into()],
            vec![LayerDecl::crossed("subject"), LayerDecl::nested("session", "subject")],
            curves,
        )
        .unwrap();
        let z = indicator_matrix(&ds, "session").unwrap();
        assert_eq!(z.ncols(), 4);
        for i in 0..4 {
            assert_eq!(z.row(i).sum(), 1.0);
        }
        assert_eq!(z.column_sum(), nalgebra::DVector::from_element(4, 1.0));
        let report = validate(&ds);
        // Raw session labels recur under both subjects.
        assert_eq!(report.nested_inconsistencies.len(), 2);
    }

    #[test]
    fn rejects_out_of_domain_t() {
        let mut c = curve("c1", &[], 0.0);
        c.points[0].t[2] = 1.2;
        let err = FunDataset::new(dims(), vec!["x".into()], vec![], vec![c]).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn empty_dataset_report_warns() {
        let ds = FunDataset::new(dims(), vec![], vec![], vec![]).unwrap();
        let r = validate(&ds);
        assert_eq!(r.n_curves, 0);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn missing_dimension_is_flagged() {
        let mut c = curve("c1", &[], 0.0);
        c.points[1] = DimPoints::default();
        let ds = FunDataset::new(dims(), vec!["x".into()], vec![], vec![c]).unwrap();
        let r = validate(&ds);
        assert_eq!(r.missing_dims, vec![("c1".to_string(), "b".to_string())]);
        assert_eq!(r.per_dim[1].curves_observed, 0);
    }
}
