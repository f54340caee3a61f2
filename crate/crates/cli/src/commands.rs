//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use multifamm::coarsen::{coarsen_dataset, coarsen_table, StopRule};
use multifamm::fundata::{load_dataset, read_points, validate};
use multifamm::mean::TermKind;
use multifamm::model::write_effect_csv;
use multifamm::numeric::unit_grid;
use multifamm::pipeline::{step_one, step_two, StepOne};
use multifamm::simeval::run_replicates;
use multifamm::{Error, FunDataset, Result};
use serde_json::json;

use crate::config::{hash_text, preamble, Loaded};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory '{}': {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("cannot write '{}': {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Human-readable run log collected alongside the artifacts.
struct RunLog {
    text: String,
    start: Instant,
}

impl RunLog {
    fn new(preamble: &str) -> Self {
        RunLog {
            text: preamble.to_string(),
            start: Instant::now(),
        }
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        log::info!("{}", msg.as_ref());
        let _ = writeln!(self.text, "{}", msg.as_ref());
    }

    fn record(&mut self, msg: impl AsRef<str>) {
        let _ = writeln!(self.text, "{}", msg.as_ref());
    }

    fn stage(&mut self, name: &str) {
        let s = self.start.elapsed().as_secs_f64();
        self.line(format!("stage {name}: {s:.3}s"));
        self.start = Instant::now();
    }
}

fn ingest(cfg: &Loaded, log: &mut RunLog) -> Result<FunDataset> {
    let (points, meta) = cfg.data_paths()?;
    let ds = load_dataset(&points, &meta, &cfg.load_options())?;
    let report = validate(&ds);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    log.line(format!(
        "loaded {} curves, {} observations, dimensions {:?}",
        ds.n_curves(),
        ds.n_observations(),
        ds.dims
    ));
    log.stage("ingest");
    let ds = match &cfg.config.coarsen {
        Some(c) => {
            let before = ds.n_observations();
            let (out, _) = coarsen_dataset(&ds, [&c.lead_dims[0], &c.lead_dims[1]], c.stop)?;
            log.line(format!("coarsened {before} -> {} observations", out.n_observations()));
            log.stage("coarsen");
            out
        }
        None => ds,
    };
    Ok(ds)
}

fn write_step_one(dir: &Path, pre: &str, ds: &FunDataset, s1: &StepOne, log: &mut RunLog) -> Result<()> {
    s1.variance.write_csv(&dir.join("variance_table.csv"), pre)?;
    log.line("variance decomposition:");
    for l in s1.variance.to_csv().lines() {
        log.line(format!("  {l}"));
    }
    let mut eig = String::from(pre);
    eig.push_str("process,component,dim,t,value\n");
    for b in &s1.bases {
        for m in 0..b.len() {
            for (d, name) in ds.dims.iter().enumerate() {
                for (i, t) in b.grid.iter().enumerate() {
                    let _ = writeln!(eig, "{},{},{},{},{}", b.process, m + 1, name, t, b.functions[d][(i, m)]);
                }
            }
        }
    }
    write_text(&dir.join("eigenfunctions.csv"), &eig)?;
    let bases: Vec<_> = s1
        .bases
        .iter()
        .map(|b| {
            json!({
                "process": b.process,
                "eigenvalues": b.eigenvalues,
                "truncation": b.truncation,
                "weights": b.weights,
            })
        })
        .collect();
    write_json(
        &dir.join("step1.json"),
        &json!({
            "preamble": pre.trim_end(),
            "dims": ds.dims,
            "sigma2": s1.covariance.sigma2,
            "covariance_lambda": s1.covariance.lambda,
            "bases": bases,
            "warnings": s1.warnings,
        }),
    )
}

/// Step 1 only: mean, covariance decomposition and multivariate FPCA.
pub fn run_fpca(cfg: &Loaded) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let pre = cfg.preamble();
    let mut log = RunLog::new(&pre);
    let ds = ingest(cfg, &mut log)?;
    let s1 = step_one(&ds, &cfg.config.fit)?;
    for (stage, secs) in &s1.timings {
        log.record(format!("stage {stage}: {secs:.3}s"));
    }
    log.stage("step-1");
    write_step_one(&dir, &pre, &ds, &s1, &mut log)?;
    write_text(&dir.join("run.log"), &log.text)?;
    Ok(dir)
}

/// Full two-step fit with effect bands.
pub fn run_fit(cfg: &Loaded) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let pre = cfg.preamble();
    let mut log = RunLog::new(&pre);
    let ds = ingest(cfg, &mut log)?;
    let s1 = step_one(&ds, &cfg.config.fit)?;
    for (stage, secs) in &s1.timings {
        log.record(format!("stage {stage}: {secs:.3}s"));
    }
    log.stage("step-1");
    write_step_one(&dir, &pre, &ds, &s1, &mut log)?;
    let fit = step_two(&ds, &cfg.config.fit, &s1)?;
    log.stage("step-2");

    let effects = dir.join("effects");
    create_dir(&effects)?;
    let grid = unit_grid(cfg.config.report.grid_points);
    for term in &fit.formula.formula.terms {
        if matches!(term.kind, TermKind::Smooth { .. }) {
            log.line(format!(
                "effect '{}' depends on a covariate value; no band written",
                term.name
            ));
            continue;
        }
        for dim in &ds.dims {
            let (value, se) = fit.effect_estimates(&term.name, dim, &grid, None)?;
            let file = effects.join(format!("{}_{}.csv", sanitize(&term.name), sanitize(dim)));
            write_effect_csv(&file, &pre, &grid, &value, &se, cfg.config.report.level)?;
        }
    }
    write_json(
        &dir.join("fit.json"),
        &json!({
            "preamble": pre.trim_end(),
            "fit": fit.summary(),
        }),
    )?;
    log.stage("reports");
    write_text(&dir.join("run.log"), &log.text)?;
    Ok(dir)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Simulation replicates with metric report.
pub fn run_simulate(cfg: &Loaded) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let pre = cfg.preamble();
    let mut log = RunLog::new(&pre);
    let sim = &cfg.config.simulate;
    let setting = sim.setting(cfg.config.seed)?;
    let opts = if sim.true_model {
        setting.true_model_options()
    } else {
        cfg.config.fit.clone()
    };
    log.line(format!(
        "setting '{}': {} replicates, seed {}",
        setting.name, setting.replicates, setting.seed
    ));
    let report = run_replicates(&setting, &opts, cfg.config.report.level)?;
    log.stage("replicates");
    for (i, e) in &report.failures {
        log.line(format!("replicate {i} failed: {e}"));
    }
    report.write_csv(&dir.join("metrics.csv"), &pre)?;
    write_json(
        &dir.join("summary.json"),
        &report.summary_json(json!({ "preamble": pre.trim_end(), "level": cfg.config.report.level })),
    )?;
    write_text(&dir.join("run.log"), &log.text)?;
    Ok(dir)
}

pub struct CoarsenArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub lead: [String; 2],
    pub stop: StopRule,
}

/// Coarsens every curve of a points file; returns (before, after) counts.
pub fn run_coarsen(args: &CoarsenArgs) -> Result<(usize, usize)> {
    let mut table = read_points(&args.input)?;
    let before = table.n_points();
    let results = coarsen_table(&mut table, [&args.lead[0], &args.lead[1]], args.stop)?;
    let after = table.n_points();
    let canonical = format!(
        "coarsen lead={},{} stop={:?} input={}",
        args.lead[0],
        args.lead[1],
        args.stop,
        args.input.display()
    );
    let pre = preamble(&hash_text(&canonical), 0);
    table.write_csv(&args.output, &pre)?;
    let removed: usize = results.iter().map(|r| r.removed.len()).sum();
    log::info!(
        "coarsened {} curves: {before} -> {after} points ({removed} lead-pair removals)",
        results.len()
    );
    Ok((before, after))
}
