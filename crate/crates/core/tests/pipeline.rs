use multifamm::coarsen::{coarsen_dataset, StopRule};
use multifamm::fundata::{load_dataset, write_dataset, LoadOptions};
use multifamm::pipeline::{step_one, step_two, TruncationRule};
use multifamm::simeval::{preset, simulate, SimSetting};
use tempfile::TempDir;

fn small() -> SimSetting {
    let mut s = preset("setting1-desk").unwrap();
    s.design.subjects = 5;
    s.design.reps = 1;
    s
}

#[test]
fn csv_round_trip_preserves_fit() {
    let setting = small();
    let (ds, _) = simulate(&setting, 1).unwrap();
    let dir = TempDir::new().unwrap();
    let (p, m) = (dir.path().join("points.csv"), dir.path().join("meta.csv"));
    write_dataset(&ds, &p, &m).unwrap();
    let opts = LoadOptions {
        layers: Some(ds.layer_decls().into_iter().filter(|l| l.name != "curve").collect()),
        rescale: false,
    };
    let back = load_dataset(&p, &m, &opts).unwrap();
    assert_eq!(back.n_curves(), ds.n_curves());
    assert_eq!(back.n_observations(), ds.n_observations());

    let fit_opts = setting.true_model_options();
    let a = step_one(&ds, &fit_opts).unwrap();
    let b = step_one(&back, &fit_opts).unwrap();
    for (x, y) in a.bases.iter().zip(&b.bases) {
        for (u, v) in x.eigenvalues.iter().zip(&y.eigenvalues) {
            assert!((u - v).abs() <= 1e-10 * u.abs().max(1e-12), "{u} vs {v}");
        }
    }
}

#[test]
fn truncation_rules_are_consistent() {
    let setting = small();
    let (ds, _) = simulate(&setting, 2).unwrap();
    let mut opts = setting.true_model_options();
    opts.truncation.rule = TruncationRule::Tv;
    let tv = step_one(&ds, &opts).unwrap();
    assert!(tv.variance.explained >= 0.95 - 1e-12);
    opts.truncation.rule = TruncationRule::Uv;
    let uv = step_one(&ds, &opts).unwrap();
    assert!(uv.variance.explained_dim.iter().all(|&e| e >= 0.95 - 1e-12));

    opts.truncation.rule = TruncationRule::Fixed;
    opts.truncation.fixed.insert("subject".into(), 99);
    let fixed = step_one(&ds, &opts).unwrap();
    let subject = fixed.bases.iter().find(|b| b.process == "subject").unwrap();
    assert_eq!(subject.truncation, subject.len());
    assert!(fixed.warnings.iter().any(|w| w.contains("subject")));
}

#[test]
fn fit_reconstructs_data_better_than_mean() {
    let setting = small();
    let (ds, _) = simulate(&setting, 4).unwrap();
    let opts = setting.true_model_options();
    let s1 = step_one(&ds, &opts).unwrap();
    let fit = step_two(&ds, &opts, &s1).unwrap();
    for d in 0..ds.n_dims() {
        // Residual variance of the full model sits near the true error variance.
        let ratio = fit.sigma_hat[d] / setting.sigma2[d];
        assert!(ratio > 0.5 && ratio < 1.5, "dimension {d}: ratio {ratio}");
    }
}

#[test]
fn coarsened_dataset_still_fits() {
    let mut setting = small();
    setting.points = (60, 80);
    setting.shared_times = true;
    let (ds, _) = simulate(&setting, 5).unwrap();
    let (coarse, results) = coarsen_dataset(&ds, ["dim1", "dim2"], StopRule::Relative(0.01)).unwrap();
    assert_eq!(results.len(), ds.n_curves());
    assert!(coarse.n_observations() < ds.n_observations());
    for (a, b) in coarse.curves().iter().zip(ds.curves()) {
        assert_eq!(a.points[0].t.first(), b.points[0].t.first());
        assert_eq!(a.points[0].t.last(), b.points[0].t.last());
    }
    step_one(&coarse, &setting.true_model_options()).unwrap();
}
