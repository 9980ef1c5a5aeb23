use dpsde::harness::{
    detect_crossing, expand_cells, read_results_csv, run_experiment, run_protocol_b, run_scaling, run_sde_validation,
    run_stationary, run_sweep, select_best, summarize, write_results, write_results_csv, Cell, CurvePoint, Report,
    ResultRow, RunContext, SweepSpec, RESULTS_HEADER,
};
use dpsde::{Method, RunRecord, Source};
use serde_json::{json, Value};

fn base() -> Value {
    json!({
        "experiment": "scaling",
        "objective": {"kind": "quadratic", "diag": {"d": 4, "value": 1.0}},
        "x0": {"fill": 1.0},
        "methods": ["dpsgd", "dpsignsgd"],
        "eta": [0.01],
        "C": [1.0],
        "B": [1],
        "epsilon": ["inf", 1.0, 4.0],
        "n": 1000,
        "delta": 1e-5,
        "sigma_gamma": 0.5,
        "steps": 40,
        "record_every": 10,
        "reps": 6,
        "seed": 3
    })
}

fn spec(v: Value) -> SweepSpec {
    SweepSpec::from_json(&v.to_string()).unwrap()
}

fn with(mut v: Value, key: &str, val: Value) -> Value {
    v[key] = val;
    v
}

fn ctx(workers: usize) -> RunContext {
    RunContext {
        workers: Some(workers),
        ..Default::default()
    }
}

fn csv_bytes(rows: &[ResultRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_results(&mut out, rows).unwrap();
    out
}

fn tmpdir(tag: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("dpsde-harness-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn cells_expand_method_eta_clip_batch_privacy() {
    let v = with(with(base(), "eta", json!([0.01, 0.02])), "B", json!([1, 2]));
    let cells = expand_cells(&spec(v)).unwrap();
    assert_eq!(cells.len(), 2 * 2 * 2 * 3);
    assert_eq!(cells[0].method, Method::DpSgd);
    assert_eq!(cells[12].method, Method::DpSignSgd);
    assert_eq!((cells[0].eta, cells[6].eta), (0.01, 0.02));
    assert_eq!((cells[0].batch, cells[3].batch), (1, 2));
    assert_eq!(cells[0..3].iter().map(|c| c.privacy_index).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(cells[0].epsilon.is_infinite() && cells[0].sigma_dp == 0.0);
    assert!(cells[1].sigma_dp > cells[2].sigma_dp);
    for (i, c) in cells.iter().enumerate() {
        assert_eq!(c.index, i);
        assert_eq!(c.stream, i as u64);
    }
}

#[test]
fn common_random_numbers_share_streams_within_a_group() {
    let v = with(base(), "common_random_numbers", json!(true));
    let cells = expand_cells(&spec(v)).unwrap();
    assert_eq!(cells.iter().map(|c| c.stream).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
}

#[test]
fn outputs_do_not_depend_on_the_worker_count() {
    let s = spec(base());
    let a = run_experiment(&s, &ctx(1)).unwrap();
    let b = run_experiment(&s, &ctx(4)).unwrap();
    assert_eq!(csv_bytes(a.rows()), csv_bytes(b.rows()));
    let c = run_experiment(&spec(with(base(), "seed", json!(4))), &ctx(2)).unwrap();
    assert_ne!(csv_bytes(a.rows()), csv_bytes(c.rows()));
}

#[test]
fn non_private_column_matches_the_baseline() {
    let r = run_scaling(&spec(base()), &ctx(2)).unwrap();
    for f in &r.fits {
        let inf = r
            .cells
            .iter()
            .find(|c| c.cell.method == f.method && c.cell.epsilon.is_infinite())
            .unwrap();
        assert_eq!(inf.final_loss.mean, f.baseline);
    }
    assert!(r.rows.iter().any(|x| x.metric == "theory_loss_bound"));
}

fn pts(eps: &[f64], f: impl Fn(f64) -> f64) -> Vec<CurvePoint> {
    eps.iter()
        .map(|&e| CurvePoint {
            epsilon: e,
            value: f(e),
            se: 0.0,
        })
        .collect()
}

#[test]
fn crossing_of_inverse_square_and_inverse() {
    let eps = [0.25, 0.5, 1.0, 2.0, 4.0];
    let r = detect_crossing(&pts(&eps, |e| 1.0 / (e * e)), &pts(&eps, |e| 1.0 / e)).unwrap();
    assert_eq!(r.first(), Some(1.0));
    assert!(!r.non_monotone);
    let eps = [0.3, 0.7, 1.3, 3.0];
    let r = detect_crossing(&pts(&eps, |e| 1.0 / (e * e)), &pts(&eps, |e| 1.0 / e)).unwrap();
    let x = r.first().unwrap();
    assert!(x > 0.7 && x < 1.3);
    assert!(r.crossings[0].significant);
}

#[test]
fn curves_that_never_cross() {
    let eps = [0.5, 1.0, 2.0];
    let r = detect_crossing(&pts(&eps, |e| 2.0 / e), &pts(&eps, |e| 1.0 / e)).unwrap();
    assert_eq!(r.first(), None);
    assert!(detect_crossing(&pts(&eps, |e| e), &pts(&eps[..2], |e| e)).is_err());
    assert!(detect_crossing(&pts(&eps[..1], |e| e), &pts(&eps[..1], |e| e)).is_err());
}

#[test]
fn noisy_crossings_are_not_significant() {
    let eps = [0.5, 1.0, 2.0];
    let mut a = pts(&eps, |e| 1.0 / (e * e));
    let b = pts(&eps, |e| 1.0 / e);
    a.iter_mut().for_each(|p| p.se = 10.0);
    let r = detect_crossing(&a, &b).unwrap();
    assert!(!r.crossings[0].significant);
}

fn fake_cell(index: usize, eta: f64, clip: f64) -> Cell {
    Cell {
        index,
        stream: index as u64,
        method: Method::DpSgd,
        privacy_index: 0,
        epsilon: 1.0,
        sigma_dp: 1.0,
        eta,
        clip,
        batch: 1,
        steps: 1,
        extension: false,
    }
}

fn fake_record(loss: f64, diverged: bool) -> RunRecord {
    let mut r = RunRecord::new("dpsgd", Source::Optimizer, 0, 0.1);
    r.steps = vec![0, 1];
    r.loss = vec![10.0, loss];
    r.grad_norm_sq = vec![1.0, 1.0];
    r.diverged = diverged;
    r
}

#[test]
fn best_cell_ties_break_on_eta_then_clip() {
    let s = [
        summarize(&fake_cell(0, 0.1, 2.0), &[fake_record(1.0, false)], 1),
        summarize(&fake_cell(1, 0.05, 2.0), &[fake_record(1.0, false)], 1),
        summarize(&fake_cell(2, 0.05, 1.0), &[fake_record(1.0, false)], 1),
        summarize(&fake_cell(3, 0.01, 1.0), &[fake_record(0.5, true)], 1),
    ];
    let best = select_best(s.iter()).unwrap();
    assert_eq!(best.cell.index, 2);
    let only_bad = [summarize(&fake_cell(0, 0.1, 1.0), &[fake_record(0.1, true)], 1)];
    assert!(select_best(only_bad.iter()).is_none());
}

#[test]
fn tail_mean_is_the_final_loss() {
    let s = summarize(&fake_cell(0, 0.1, 1.0), &[fake_record(2.0, false), fake_record(4.0, false)], 1);
    assert_eq!(s.final_loss.mean, 3.0);
    let s = summarize(&fake_cell(0, 0.1, 1.0), &[fake_record(2.0, false)], 5);
    assert_eq!(s.final_loss.mean, 6.0);
}

#[test]
fn single_point_grid_selects_that_point() {
    let v = json!({
        "experiment": "protocol_b",
        "objective": {"kind": "quadratic", "diag": {"d": 2, "value": 1.0}},
        "x0": {"fill": 1.0},
        "methods": ["dpsgd"],
        "eta": [0.05],
        "C": [0.5],
        "B": [1],
        "epsilon": [1.0],
        "n": 1000,
        "delta": 1e-5,
        "sigma_gamma": 0.1,
        "steps": 20,
        "reps": 3
    });
    let r = run_protocol_b(&spec(v), &ctx(1)).unwrap();
    assert_eq!(r.best.len(), 1);
    assert_eq!((r.best[0].best_eta, r.best[0].best_clip), (0.05, 0.5));
}

#[test]
fn extending_the_eta_grid_never_hurts() {
    let v = json!({
        "experiment": "protocol_b",
        "objective": {"kind": "quadratic", "diag": {"d": 4, "value": 1.0}},
        "x0": {"fill": 1.0},
        "methods": ["dpsgd"],
        "eta": [0.5],
        "eta_extension": [0.05, 0.01],
        "C": [1.0],
        "B": [1],
        "epsilon": [0.5, 2.0],
        "n": 100,
        "delta": 1e-5,
        "sigma_gamma": 0.1,
        "steps": 50,
        "reps": 4
    });
    let r = run_protocol_b(&spec(v), &ctx(2)).unwrap();
    for base in r.best.iter().filter(|b| b.variant == "dpsgd") {
        let tuned = r
            .best
            .iter()
            .find(|b| b.variant == "dpsgd_tuned" && b.epsilon == base.epsilon)
            .unwrap();
        assert!(tuned.best_loss <= base.best_loss);
    }
}

#[test]
fn stationary_first_checkpoint_is_exact() {
    let v = json!({
        "experiment": "stationary",
        "objective": {"kind": "quadratic", "diag": [2.0, 1.0]},
        "x0": [0.01, 0.005],
        "methods": ["dpsgd", "dpsignsgd"],
        "eta": [0.001],
        "C": [5.0],
        "B": [1],
        "sigma": [0.1],
        "n": 1000,
        "delta": 1e-5,
        "sigma_gamma": 0.1,
        "steps": 100,
        "record_every": 50,
        "reps": 50
    });
    let r = run_stationary(&spec(v), &ctx(2)).unwrap();
    for d in r.detail.iter().filter(|d| d.step == 0) {
        assert_eq!(d.mean, [0.01, 0.005][d.mode]);
        assert_eq!(d.var, 0.0);
        assert_eq!(d.z_mean, 0.0);
    }
    assert_eq!(r.fraction_within.len(), 2);
}

#[test]
fn zero_noise_sde_validation_is_exact() {
    let v = json!({
        "experiment": "sde_validate",
        "objective": {"kind": "quadratic", "diag": [1.0, 2.0]},
        "x0": {"fill": 1.0},
        "methods": ["dpsgd"],
        "eta": [0.01],
        "C": [100.0],
        "B": [1],
        "epsilon": ["inf"],
        "n": 1000,
        "delta": 1e-5,
        "sigma_gamma": 0.0,
        "steps": 200,
        "record_every": 20,
        "reps": 2
    });
    let r = run_sde_validation(&spec(v), &ctx(1)).unwrap();
    assert!(r.rows_detail[0].max_rel_loss <= 1e-6);
}

#[test]
fn spec_errors_are_reported() {
    let bad = [
        with(base(), "methods", json!([])),
        with(base(), "sigma", json!([1.0])),
        with(base(), "B", json!([5000])),
        with(base(), "reps", json!(0)),
        with(base(), "steps", json!(0)),
        with(base(), "epsilon", json!([-1.0])),
        with(base(), "C", json!([0.0])),
        with(base(), "eta", json!([])),
        with(base(), "unexpected", json!(1)),
        with(base(), "experiment", json!("nonsense")),
    ];
    for v in bad {
        assert!(SweepSpec::from_json(&v.to_string()).is_err(), "{v}");
    }
    let missing = std::path::Path::new("/nonexistent/dir/sweep.json");
    let err = SweepSpec::load(missing).unwrap_err().to_string();
    assert!(err.contains("/nonexistent/dir/sweep.json"), "{err}");
}

#[test]
fn per_method_eta_grid() {
    let v = with(base(), "eta", json!({"dpsgd": [0.01, 0.02], "dpsignsgd": [0.005]}));
    let cells = expand_cells(&spec(v)).unwrap();
    assert_eq!(cells.len(), 9);
    let v = with(base(), "eta", json!({"dpsgd": [0.01]}));
    assert!(SweepSpec::from_json(&v.to_string()).is_err());
}

#[test]
fn results_csv_round_trip() {
    let rows = vec![
        ResultRow {
            experiment: "scaling".into(),
            method: "dpsgd".into(),
            epsilon: f64::INFINITY,
            eta: 0.01,
            clip: 1.0,
            batch: 4,
            rep_count: 10,
            metric: "final_loss".into(),
            value: 0.125,
            stderr: f64::NAN,
            diverged: true,
        },
        ResultRow {
            experiment: "scaling".into(),
            method: "dpsignsgd".into(),
            epsilon: 0.5,
            eta: 0.02,
            clip: 2.0,
            batch: 1,
            rep_count: 3,
            metric: "loss:step=10".into(),
            value: -1e-300,
            stderr: 0.0,
            diverged: false,
        },
    ];
    let dir = tmpdir("csv");
    let path = dir.join("results.csv");
    write_results_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER.join(","));
    assert!(text.contains(",inf,"));
    let back = read_results_csv(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert!(back[0].epsilon.is_infinite() && back[0].stderr.is_nan() && back[0].diverged);
    assert_eq!(back[1], rows[1]);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_writes_results_and_manifest() {
    let dir = tmpdir("sweep");
    let out = dir.join("out");
    let v = with(base(), "output", json!(out));
    let report = run_sweep(&spec(v), &ctx(2)).unwrap();
    assert!(matches!(report, Report::Scaling(_)));
    let rows = read_results_csv(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), report.rows().len());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["git_describe"].is_string());
    assert_eq!(manifest["config"]["experiment"], "scaling");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn trajectories_are_saved_on_request() {
    let dir = tmpdir("traj");
    let c = RunContext {
        workers: Some(1),
        progress: false,
        trajectories: Some(dir.clone()),
    };
    let v = with(with(base(), "methods", json!(["dpsgd"])), "reps", json!(2));
    run_experiment(&spec(v), &c).unwrap();
    let names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 6);
    assert_eq!(names.iter().filter(|n| n.ends_with(".json")).count(), 6);
    std::fs::remove_dir_all(&dir).ok();
}
