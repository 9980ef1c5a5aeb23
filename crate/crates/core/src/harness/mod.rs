//! Monte-Carlo experiment harness.
//!
//! A sweep expands into an ordered list of cells, each run for `reps`
//! repetitions. Repetition `r` of cell `c` always draws from
//! `rng::stream(seed, c, r)`, so outputs do not depend on the worker count.

mod output;
mod spec;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Serialize, Serializer};

pub use output::{fmt_f64, git_describe, read_results_csv, write_manifest, write_results, write_results_csv, ResultRow, RESULTS_HEADER};
pub use spec::{Budget, DiagSpec, EtaGrid, Experiment, ObjectiveSpec, SdeSettings, SweepSpec, X0Spec};

use crate::error::{invalid, io_err, Error, Result};
use crate::objectives::Objective;
use crate::optimizers::{run_optimizer_rng, Method, OptimizerConfig, RecordOptions};
use crate::privacy::{epsilon_star, PrivacyParams};
use crate::record::RunRecord;
use crate::rng::stream;
use crate::sde::{euler_maruyama, Phase1Options, SdeLabel, SdeModel};
use crate::stats::{estimate_moments, fit_power_law, linear_regression, moments, LinearFit, Moments, PowerLawFit};
use crate::theory::{self, BoundInputs, Phase};

const SDE_STREAM_OFFSET: u64 = 1 << 31;

fn ser_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&fmt_f64(*v))
    }
}

fn ser_inf_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => ser_inf(x, s),
        None => s.serialize_none(),
    }
}

/// Execution settings that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    /// Print `cell i/N done` to stderr.
    pub progress: bool,
    /// Directory for per-trajectory CSVs and sidecars.
    pub trajectories: Option<PathBuf>,
}

fn build_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(invalid("workers must be >= 1"));
        }
        b = b.num_threads(w);
    }
    b.build().map_err(|e| invalid(format!("cannot build worker pool: {e}")))
}

/// One point of the expanded grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    /// Stream key; equals `index` unless random numbers are shared across
    /// privacy levels.
    pub stream: u64,
    pub method: Method,
    pub privacy_index: usize,
    #[serde(serialize_with = "ser_inf")]
    pub epsilon: f64,
    pub sigma_dp: f64,
    pub eta: f64,
    #[serde(rename = "C")]
    pub clip: f64,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "T")]
    pub steps: u64,
    /// Cell comes from the Protocol-B downward extension of the DP-SGD grid.
    pub extension: bool,
}

fn steps_for(spec: &SweepSpec, eta: f64) -> u64 {
    match (spec.experiment, spec.tau) {
        (Experiment::WeakError, Some(tau)) => ((tau / eta).round() as u64).max(1),
        _ => spec.steps,
    }
}

/// Expands the grids in the order method, η, C, B, privacy level.
pub fn expand_cells(spec: &SweepSpec) -> Result<Vec<Cell>> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut group = 0u64;
    for &method in &spec.methods {
        let mut etas: Vec<(f64, bool)> = spec.eta.for_method(method)?.iter().map(|e| (*e, false)).collect();
        if spec.experiment == Experiment::ProtocolB && method == Method::DpSgd {
            for &e in &spec.eta_extension {
                if !etas.iter().any(|(x, _)| *x == e) {
                    etas.push((e, true));
                }
            }
        }
        for &(eta, extension) in &etas {
            let steps = steps_for(spec, eta);
            for &clip in &spec.clip {
                for &batch in &spec.batch {
                    for p in 0..spec.privacy_len() {
                        let privacy = spec.privacy(p, batch, clip, steps)?;
                        let index = cells.len();
                        cells.push(Cell {
                            index,
                            stream: if spec.common_random_numbers { group } else { index as u64 },
                            method,
                            privacy_index: p,
                            epsilon: privacy.epsilon,
                            sigma_dp: privacy.sigma_dp,
                            eta,
                            clip,
                            batch,
                            steps,
                            extension,
                        });
                    }
                    group += 1;
                }
            }
        }
    }
    Ok(cells)
}

struct Setup {
    obj: Objective,
    x0: Vec<f64>,
    cells: Vec<Cell>,
}

fn setup(spec: &SweepSpec) -> Result<Setup> {
    let obj = spec.objective.build()?;
    let x0 = spec.x0.build(obj.dim())?;
    let cells = expand_cells(spec)?;
    Ok(Setup { obj, x0, cells })
}

fn cell_privacy(spec: &SweepSpec, cell: &Cell) -> Result<PrivacyParams> {
    spec.privacy(cell.privacy_index, cell.batch, cell.clip, cell.steps)
}

fn cell_config(spec: &SweepSpec, cell: &Cell) -> Result<OptimizerConfig> {
    spec.optimizer_config(cell.method, cell.eta, cell_privacy(spec, cell)?)
}

fn bound_inputs(spec: &SweepSpec, obj: &Objective, x0: &[f64], cell: &Cell) -> Result<BoundInputs> {
    Ok(BoundInputs {
        f0: obj.value(x0)?,
        mu: obj.pl_constant(),
        l: obj.smoothness(),
        d: obj.dim(),
        eta: cell.eta,
        steps: cell.steps,
        batch_size: cell.batch,
        n: spec.n,
        clip: cell.clip,
        sigma_gamma: spec.sigma_gamma,
        nu: spec.nu,
        epsilon: cell.epsilon,
        delta: spec.delta,
        sigma_dp: cell.sigma_dp,
    })
}

fn save_records(ctx: &RunContext, prefix: &str, records: &[RunRecord]) -> Result<()> {
    if let Some(dir) = &ctx.trajectories {
        for (r, rec) in records.iter().enumerate() {
            rec.save(dir, &format!("{prefix}_rep{r:05}"))?;
        }
    }
    Ok(())
}

fn progress(ctx: &RunContext, i: usize, n: usize) {
    if ctx.progress {
        eprintln!("cell {}/{} done", i + 1, n);
    }
}

fn run_discrete(
    spec: &SweepSpec,
    obj: &Objective,
    x0: &[f64],
    cell: &Cell,
    opts: RecordOptions,
) -> Result<Vec<RunRecord>> {
    let cfg = cell_config(spec, cell)?;
    (0..spec.reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(spec.seed, cell.stream, r as u64);
            let mut rec = run_optimizer_rng(obj, &cfg, x0, cell.steps, opts, &mut rng)?;
            rec.seed = spec.seed;
            rec.config = serde_json::json!({ "optimizer": rec.config, "cell": cell.index, "rep": r });
            Ok(rec)
        })
        .collect()
}

/// Ensemble statistics of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub reps: usize,
    pub diverged_reps: usize,
    pub diverged: bool,
    /// Over non-diverged repetitions; the per-run value is the mean of the
    /// last `tail` records.
    pub final_loss: Moments,
    pub steps: Vec<u64>,
    pub mean_loss: Vec<f64>,
    pub mean_grad_norm_sq: Vec<f64>,
    pub clip_fraction: f64,
}

fn mean_curves(records: &[&RunRecord]) -> (Vec<u64>, Vec<f64>, Vec<f64>) {
    let Some(first) = records.first() else {
        return (Vec::new(), Vec::new(), Vec::new());
    };
    let len = records.iter().map(|r| r.len()).min().unwrap_or(0);
    let steps = first.steps[..len].to_vec();
    let mut loss = vec![0.0; len];
    let mut grad = vec![0.0; len];
    for r in records {
        for j in 0..len {
            loss[j] += r.loss[j];
            grad[j] += r.grad_norm_sq[j];
        }
    }
    let k = records.len() as f64;
    loss.iter_mut().for_each(|v| *v /= k);
    grad.iter_mut().for_each(|v| *v /= k);
    (steps, loss, grad)
}

pub fn summarize(cell: &Cell, records: &[RunRecord], tail: usize) -> CellSummary {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.diverged).collect();
    let finals: Vec<f64> = ok.iter().filter_map(|r| r.tail_mean_loss(tail)).collect();
    let (steps, mean_loss, mean_grad_norm_sq) = mean_curves(&ok);
    let diverged_reps = records.len() - ok.len();
    CellSummary {
        cell: *cell,
        reps: records.len(),
        diverged_reps,
        diverged: diverged_reps > 0,
        final_loss: moments(&finals),
        steps,
        mean_loss,
        mean_grad_norm_sq,
        clip_fraction: records.iter().map(|r| r.clip_fraction).sum::<f64>() / records.len().max(1) as f64,
    }
}

fn row(exp: Experiment, method: &str, cell: &Cell, reps: usize, metric: impl Into<String>, value: f64, se: f64, diverged: bool) -> ResultRow {
    ResultRow {
        experiment: exp.name().to_string(),
        method: method.to_string(),
        epsilon: cell.epsilon,
        eta: cell.eta,
        clip: cell.clip,
        batch: cell.batch,
        rep_count: reps,
        metric: metric.into(),
        value,
        stderr: se,
        diverged,
    }
}

fn summary_rows(exp: Experiment, s: &CellSummary, curves: bool) -> Vec<ResultRow> {
    let m = s.cell.method.name();
    let mut rows = vec![
        row(exp, m, &s.cell, s.reps, "final_loss", s.final_loss.mean, s.final_loss.se, s.diverged),
        row(exp, m, &s.cell, s.reps, "diverged_reps", s.diverged_reps as f64, 0.0, s.diverged),
        row(exp, m, &s.cell, s.reps, "clip_fraction", s.clip_fraction, 0.0, s.diverged),
    ];
    if curves {
        for (st, l) in s.steps.iter().zip(&s.mean_loss) {
            rows.push(row(exp, m, &s.cell, s.reps, format!("loss:step={st}"), *l, f64::NAN, s.diverged));
        }
    }
    rows
}

/// Runs every cell with the given recording options and summarizes it.
fn run_cells(spec: &SweepSpec, su: &Setup, ctx: &RunContext, opts: RecordOptions) -> Result<Vec<CellSummary>> {
    let n = su.cells.len();
    let mut out = Vec::with_capacity(n);
    for (i, cell) in su.cells.iter().enumerate() {
        let recs = run_discrete(spec, &su.obj, &su.x0, cell, opts)?;
        save_records(ctx, &format!("{}_cell{:04}", spec.experiment.name(), cell.index), &recs)?;
        out.push(summarize(cell, &recs, spec.tail));
        progress(ctx, i, n);
    }
    Ok(out)
}

/// Cells sharing method, η, C and B, in grid order.
fn groups(summaries: &[CellSummary], per_group: usize) -> impl Iterator<Item = &[CellSummary]> {
    summaries.chunks(per_group.max(1))
}

// ---------------------------------------------------------------- scaling

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub method: Method,
    pub eta: f64,
    #[serde(rename = "C")]
    pub clip: f64,
    #[serde(rename = "B")]
    pub batch: usize,
    pub baseline: f64,
    pub fit: Option<PowerLawFit>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub cells: Vec<CellSummary>,
    pub fits: Vec<ScalingFit>,
    pub rows: Vec<ResultRow>,
}

fn theory_bound(spec: &SweepSpec, su: &Setup, cell: &Cell) -> Option<f64> {
    let inp = bound_inputs(spec, &su.obj, &su.x0, cell).ok()?;
    let t = inp.tau();
    match cell.method {
        Method::DpSgd => theory::lossbound_sgd(&inp, t, Phase::Two).ok(),
        Method::DpSignSgd => theory::lossbound_sign(&inp, t, Phase::Two).ok(),
        Method::DpAdam => None,
    }
}

/// Final loss per privacy level at fixed hyperparameters, with a power-law
/// fit of the excess over the non-private baseline.
pub fn run_scaling(spec: &SweepSpec, ctx: &RunContext) -> Result<ScalingReport> {
    let su = setup(spec)?;
    let pool = build_pool(ctx.workers)?;
    let cells = pool.install(|| run_cells(spec, &su, ctx, RecordOptions::every(spec.record_every)))?;
    let exp = Experiment::Scaling;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for g in groups(&cells, spec.privacy_len()) {
        for s in g {
            rows.extend(summary_rows(exp, s, false));
            if let Some(b) = theory_bound(spec, &su, &s.cell) {
                rows.push(row(exp, s.cell.method.name(), &s.cell, s.reps, "theory_loss_bound", b, 0.0, false));
            }
        }
        let head = g[0].cell;
        let base = g.iter().find(|s| s.cell.sigma_dp == 0.0);
        let (baseline, fit, error) = match base {
            None => (f64::NAN, None, Some("no non-private grid entry".to_string())),
            Some(b) if b.diverged => (f64::NAN, None, Some("baseline diverged".to_string())),
            Some(b) => {
                let pts: Vec<(f64, f64)> = g
                    .iter()
                    .filter(|s| !s.diverged && s.cell.epsilon.is_finite())
                    .map(|s| (s.cell.epsilon, s.final_loss.mean))
                    .collect();
                match fit_power_law(&pts, Some(b.final_loss.mean)) {
                    Ok(f) => (b.final_loss.mean, Some(f), None),
                    Err(e) => (b.final_loss.mean, None, Some(e.to_string())),
                }
            }
        };
        let mut gcell = head;
        gcell.epsilon = f64::NAN;
        if let Some(f) = &fit {
            let m = head.method.name();
            rows.push(row(exp, m, &gcell, spec.reps, "fit_slope", f.slope, 0.0, false));
            rows.push(row(exp, m, &gcell, spec.reps, "fit_intercept", f.intercept, 0.0, false));
            rows.push(row(exp, m, &gcell, spec.reps, "fit_r2", f.r2, 0.0, false));
            rows.push(row(exp, m, &gcell, spec.reps, "baseline_loss", baseline, 0.0, false));
        }
        fits.push(ScalingFit {
            method: head.method,
            eta: head.eta,
            clip: head.clip,
            batch: head.batch,
            baseline,
            fit,
            error,
        });
    }
    Ok(ScalingReport { cells, fits, rows })
}

// ---------------------------------------------------------------- speed

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedGroup {
    pub method: Method,
    pub eta: f64,
    #[serde(rename = "C")]
    pub clip: f64,
    #[serde(rename = "B")]
    pub batch: usize,
    /// Ascending.
    pub epsilon: Vec<f64>,
    /// Steps until the mean loss first halves; `None` if never.
    pub time_to_half: Vec<Option<u64>>,
    pub diverged: Vec<bool>,
    /// `(max − min)/min` over converging cells that reach half.
    pub spread: Option<f64>,
    /// Strictly decreasing in ε over non-diverged cells, counting "never" as ∞.
    pub monotone_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedReport {
    pub cells: Vec<CellSummary>,
    pub groups: Vec<SpeedGroup>,
    pub rows: Vec<ResultRow>,
}

/// First recorded step at which the mean loss is at most half its initial value.
pub fn time_to_half(s: &CellSummary) -> Option<u64> {
    let f0 = *s.mean_loss.first()?;
    s.steps.iter().zip(&s.mean_loss).find(|(_, l)| **l <= 0.5 * f0).map(|(st, _)| *st)
}

pub fn run_speed(spec: &SweepSpec, ctx: &RunContext) -> Result<SpeedReport> {
    let su = setup(spec)?;
    let pool = build_pool(ctx.workers)?;
    let cells = pool.install(|| run_cells(spec, &su, ctx, RecordOptions::every(spec.record_every)))?;
    let exp = Experiment::Speed;
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for g in groups(&cells, spec.privacy_len()) {
        let mut items: Vec<(f64, Option<u64>, bool)> = Vec::new();
        for s in g {
            rows.extend(summary_rows(exp, s, true));
            let t = if s.diverged { None } else { time_to_half(s) };
            let v = t.map_or(f64::INFINITY, |x| x as f64);
            rows.push(row(exp, s.cell.method.name(), &s.cell, s.reps, "time_to_half", v, 0.0, s.diverged));
            items.push((s.cell.epsilon, t, s.diverged));
        }
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        let reached: Vec<f64> = items.iter().filter(|i| !i.2).filter_map(|i| i.1.map(|x| x as f64)).collect();
        let spread = if reached.len() >= 2 {
            let mx = reached.iter().cloned().fold(f64::MIN, f64::max);
            let mn = reached.iter().cloned().fold(f64::MAX, f64::min);
            Some((mx - mn) / mn)
        } else {
            None
        };
        let seq: Vec<f64> = items
            .iter()
            .filter(|i| !i.2)
            .map(|i| i.1.map_or(f64::INFINITY, |x| x as f64))
            .collect();
        let monotone = seq.windows(2).all(|w| w[1] < w[0]);
        let head = g[0].cell;
        out.push(SpeedGroup {
            method: head.method,
            eta: head.eta,
            clip: head.clip,
            batch: head.batch,
            epsilon: items.iter().map(|i| i.0).collect(),
            time_to_half: items.iter().map(|i| i.1).collect(),
            diverged: items.iter().map(|i| i.2).collect(),
            spread,
            monotone_decreasing: monotone,
        });
    }
    Ok(SpeedReport { cells, groups: out, rows })
}

// ---------------------------------------------------------------- crossings

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Crossing {
    pub epsilon: f64,
    /// Both bracketing differences exceed two combined standard errors.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingResult {
    pub crossings: Vec<Crossing>,
    pub non_monotone: bool,
}

impl CrossingResult {
    pub fn first(&self) -> Option<f64> {
        self.crossings.first().map(|c| c.epsilon)
    }
}

/// Sign changes of `a − b` over a shared ε grid, linearly interpolated.
pub fn detect_crossing(a: &[CurvePoint], b: &[CurvePoint]) -> Result<CrossingResult> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("crossing detection needs two points".into()));
    }
    if a.iter().zip(b).any(|(p, q)| p.epsilon != q.epsilon) {
        return Err(invalid("curves must share the epsilon grid"));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(p, q)| p.value - q.value).collect();
    let se: Vec<f64> = a.iter().zip(b).map(|(p, q)| (p.se * p.se + q.se * q.se).sqrt()).collect();
    let mut crossings = Vec::new();
    for i in 0..diff.len() {
        if diff[i] == 0.0 {
            crossings.push(Crossing {
                epsilon: a[i].epsilon,
                significant: false,
            });
            continue;
        }
        if i + 1 < diff.len() && diff[i] * diff[i + 1] < 0.0 {
            let (e0, e1) = (a[i].epsilon, a[i + 1].epsilon);
            let eps = e0 + (e1 - e0) * diff[i] / (diff[i] - diff[i + 1]);
            crossings.push(Crossing {
                epsilon: eps,
                significant: diff[i].abs() > 2.0 * se[i] && diff[i + 1].abs() > 2.0 * se[i + 1],
            });
        }
    }
    let non_monotone = crossings.len() > 1;
    if non_monotone {
        log::warn!("curves cross {} times", crossings.len());
    }
    Ok(CrossingResult { crossings, non_monotone })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsStarRow {
    #[serde(rename = "C")]
    pub clip: f64,
    #[serde(rename = "B")]
    pub batch: usize,
    pub epsilon_star: f64,
    pub crossing: CrossingResult,
    #[serde(serialize_with = "ser_inf_opt")]
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsStarReport {
    pub cells: Vec<CellSummary>,
    pub per_batch: Vec<EpsStarRow>,
    /// First crossing strictly decreases with B for every C.
    pub monotone_in_batch: bool,
    pub rows: Vec<ResultRow>,
}

fn curve(cells: &[&CellSummary]) -> Vec<CurvePoint> {
    let mut pts: Vec<CurvePoint> = cells
        .iter()
        .filter(|s| s.cell.epsilon.is_finite())
        .map(|s| CurvePoint {
            epsilon: s.cell.epsilon,
            value: if s.diverged { f64::INFINITY } else { s.final_loss.mean },
            se: if s.diverged { 0.0 } else { s.final_loss.se },
        })
        .collect();
    pts.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    pts
}

/// DP-SGD vs DP-SignSGD final-loss crossing per batch size.
pub fn run_epsstar(spec: &SweepSpec, ctx: &RunContext) -> Result<EpsStarReport> {
    for m in [Method::DpSgd, Method::DpSignSgd] {
        if !spec.methods.contains(&m) {
            return Err(invalid("eps_star needs both dpsgd and dpsignsgd"));
        }
        if spec.eta.for_method(m)?.len() != 1 {
            return Err(invalid("eps_star needs a single eta per method"));
        }
    }
    let su = setup(spec)?;
    let pool = build_pool(ctx.workers)?;
    let cells = pool.install(|| run_cells(spec, &su, ctx, RecordOptions::every(spec.record_every)))?;
    let exp = Experiment::EpsStar;
    let mut rows: Vec<ResultRow> = cells.iter().flat_map(|s| summary_rows(exp, s, false)).collect();
    let mut per_batch = Vec::new();
    for &clip in &spec.clip {
        for &batch in &spec.batch {
            let pick = |m: Method| -> Vec<&CellSummary> {
                cells
                    .iter()
                    .filter(|s| s.cell.method == m && s.cell.clip == clip && s.cell.batch == batch)
                    .collect()
            };
            let a = curve(&pick(Method::DpSgd));
            let b = curve(&pick(Method::DpSignSgd));
            let crossing = detect_crossing(&a, &b)?;
            let es = epsilon_star(clip, spec.steps, batch, spec.n, spec.sigma_gamma, spec.delta)?;
            let ratio = crossing.first().map(|c| es / c);
            let probe = Cell {
                index: 0,
                stream: 0,
                method: Method::DpSgd,
                privacy_index: 0,
                epsilon: f64::NAN,
                sigma_dp: f64::NAN,
                eta: f64::NAN,
                clip,
                batch,
                steps: spec.steps,
                extension: false,
            };
            rows.push(row(exp, "dpsgd-dpsignsgd", &probe, spec.reps, "crossing", crossing.first().unwrap_or(f64::NAN), 0.0, false));
            rows.push(row(exp, "dpsgd-dpsignsgd", &probe, spec.reps, "epsilon_star", es, 0.0, false));
            per_batch.push(EpsStarRow {
                clip,
                batch,
                epsilon_star: es,
                crossing,
                ratio,
            });
        }
    }
    let mut monotone = true;
    for &clip in &spec.clip {
        let mut v: Vec<(usize, Option<f64>)> = per_batch
            .iter()
            .filter(|r| r.clip == clip)
            .map(|r| (r.batch, r.crossing.first()))
            .collect();
        v.sort_by_key(|x| x.0);
        monotone &= v.windows(2).all(|w| match (w[0].1, w[1].1) {
            (Some(a), Some(b)) => b < a,
            _ => false,
        });
    }
    Ok(EpsStarReport {
        cells,
        per_batch,
        monotone_in_batch: monotone,
        rows,
    })
}

// ---------------------------------------------------------------- protocol B

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestRow {
    pub variant: String,
    pub method: Method,
    #[serde(serialize_with = "ser_inf")]
    pub epsilon: f64,
    pub best_eta: f64,
    #[serde(rename = "best_C")]
    pub best_clip: f64,
    pub best_loss: f64,
    pub best_se: f64,
    pub all_diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolBReport {
    pub cells: Vec<CellSummary>,
    pub best: Vec<BestRow>,
    /// Slope of `ln best_η` against `ln ε` per variant.
    pub slopes: Vec<(String, Option<LinearFit>)>,
    pub rows: Vec<ResultRow>,
}

/// Argmin of mean final loss; ties go to the smaller η, then the smaller C.
pub fn select_best<'a>(candidates: impl Iterator<Item = &'a CellSummary>) -> Option<&'a CellSummary> {
    candidates
        .filter(|s| !s.diverged && s.final_loss.mean.is_finite())
        .min_by(|a, b| {
            a.final_loss
                .mean
                .total_cmp(&b.final_loss.mean)
                .then(a.cell.eta.total_cmp(&b.cell.eta))
                .then(a.cell.clip.total_cmp(&b.cell.clip))
        })
}

/// Best (η, C) per method and privacy level. With an `eta_extension`, DP-SGD
/// is reported twice: on its base grid and as `dpsgd_tuned` on the union.
pub fn run_protocol_b(spec: &SweepSpec, ctx: &RunContext) -> Result<ProtocolBReport> {
    let su = setup(spec)?;
    let pool = build_pool(ctx.workers)?;
    let cells = pool.install(|| run_cells(spec, &su, ctx, RecordOptions::every(spec.record_every)))?;
    let exp = Experiment::ProtocolB;
    let mut rows: Vec<ResultRow> = cells.iter().flat_map(|s| summary_rows(exp, s, false)).collect();
    let mut variants: Vec<(String, Method, bool)> = spec.methods.iter().map(|m| (m.name().to_string(), *m, false)).collect();
    if spec.methods.contains(&Method::DpSgd) && cells.iter().any(|s| s.cell.extension) {
        variants.push(("dpsgd_tuned".to_string(), Method::DpSgd, true));
    }
    let mut best = Vec::new();
    let mut slopes = Vec::new();
    for (name, method, with_ext) in &variants {
        let mut pts = Vec::new();
        for p in 0..spec.privacy_len() {
            let pool_cells = cells
                .iter()
                .filter(|s| s.cell.method == *method && s.cell.privacy_index == p && (*with_ext || !s.cell.extension));
            let any = cells.iter().find(|s| s.cell.method == *method && s.cell.privacy_index == p);
            let Some(any) = any else { continue };
            let chosen = select_best(pool_cells);
            let br = match chosen {
                Some(c) => BestRow {
                    variant: name.clone(),
                    method: *method,
                    epsilon: c.cell.epsilon,
                    best_eta: c.cell.eta,
                    best_clip: c.cell.clip,
                    best_loss: c.final_loss.mean,
                    best_se: c.final_loss.se,
                    all_diverged: false,
                },
                None => BestRow {
                    variant: name.clone(),
                    method: *method,
                    epsilon: any.cell.epsilon,
                    best_eta: f64::NAN,
                    best_clip: f64::NAN,
                    best_loss: f64::NAN,
                    best_se: f64::NAN,
                    all_diverged: true,
                },
            };
            let mut c = any.cell;
            c.eta = br.best_eta;
            c.clip = br.best_clip;
            rows.push(row(exp, name, &c, spec.reps, "best_loss", br.best_loss, br.best_se, br.all_diverged));
            rows.push(row(exp, name, &c, spec.reps, "best_eta", br.best_eta, 0.0, br.all_diverged));
            rows.push(row(exp, name, &c, spec.reps, "best_C", br.best_clip, 0.0, br.all_diverged));
            if !br.all_diverged && br.epsilon.is_finite() {
                pts.push((br.epsilon.ln(), br.best_eta.ln()));
            }
            best.push(br);
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let fit = linear_regression(&x, &y).ok();
        if let Some(f) = &fit {
            let mut c = cells[0].cell;
            c.epsilon = f64::NAN;
            c.eta = f64::NAN;
            c.clip = f64::NAN;
            rows.push(row(exp, name, &c, spec.reps, "best_eta_slope", f.slope, 0.0, false));
        }
        slopes.push((name.clone(), fit));
    }
    Ok(ProtocolBReport { cells, best, slopes, rows })
}

// ---------------------------------------------------------------- stationary

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryRow {
    pub method: Method,
    pub mode: usize,
    pub step: u64,
    pub t: f64,
    pub mean: f64,
    pub theory_mean: f64,
    pub mean_se: f64,
    pub z_mean: f64,
    pub var: f64,
    pub theory_var: f64,
    pub var_se: f64,
    pub z_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryReport {
    pub detail: Vec<StationaryRow>,
    /// Fraction of (mode, checkpoint, statistic) z-scores with `|z| ≤ 3`, per method.
    pub fraction_within: Vec<(Method, f64)>,
    pub rows: Vec<ResultRow>,
}

pub fn z_score(emp: f64, theory: f64, se: f64) -> f64 {
    let diff = emp - theory;
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 * theory.abs().max(1e-300) || diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Ensemble moments of the iterates against the closed-form stationary laws.
pub fn run_stationary(spec: &SweepSpec, ctx: &RunContext) -> Result<StationaryReport> {
    let su = setup(spec)?;
    let h = su
        .obj
        .hessian_diag()
        .ok_or_else(|| invalid("stationary validation needs a quadratic objective"))?
        .to_vec();
    let pool = build_pool(ctx.workers)?;
    let exp = Experiment::Stationary;
    let mut detail = Vec::new();
    let mut rows = Vec::new();
    let mut tallies: Vec<(Method, usize, usize)> = Vec::new();
    let n = su.cells.len();
    for (ci, cell) in su.cells.iter().enumerate() {
        let opts = RecordOptions {
            record_every: spec.record_every,
            snapshots: true,
        };
        let recs = pool.install(|| run_discrete(spec, &su.obj, &su.x0, cell, opts))?;
        save_records(ctx, &format!("stationary_cell{:04}", cell.index), &recs)?;
        let inp = bound_inputs(spec, &su.obj, &su.x0, cell)?;
        let steps = recs[0].steps.clone();
        let checkpoints: Vec<usize> = (0..steps.len()).collect();
        let mut within = 0;
        let mut total = 0;
        for mode in 0..h.len() {
            let traj: Vec<Vec<f64>> = recs.iter().map(|r| r.snapshots.iter().map(|x| x[mode]).collect()).collect();
            let em = estimate_moments(&traj, &checkpoints)?;
            for (j, &st) in steps.iter().enumerate() {
                let t = st as f64 * cell.eta;
                let th = match cell.method {
                    Method::DpSgd => theory::stationary_sgd(&h, &su.x0, &inp, t)?,
                    Method::DpSignSgd => theory::stationary_sign(&h, &su.x0, &inp, t)?,
                    Method::DpAdam => return Err(invalid("no stationary law for DP-Adam")),
                };
                let zm = z_score(em.mean[j], th.mean[mode], em.mean_se[j]);
                let zv = z_score(em.var[j], th.var[mode], em.var_se[j]);
                within += usize::from(zm.abs() <= 3.0) + usize::from(zv.abs() <= 3.0);
                total += 2;
                let m = cell.method.name();
                let tag = format!("mode={mode}:step={st}");
                rows.push(row(exp, m, cell, spec.reps, format!("mean:{tag}"), em.mean[j], em.mean_se[j], false));
                rows.push(row(exp, m, cell, spec.reps, format!("theory_mean:{tag}"), th.mean[mode], 0.0, false));
                rows.push(row(exp, m, cell, spec.reps, format!("var:{tag}"), em.var[j], em.var_se[j], false));
                rows.push(row(exp, m, cell, spec.reps, format!("theory_var:{tag}"), th.var[mode], 0.0, false));
                detail.push(StationaryRow {
                    method: cell.method,
                    mode,
                    step: st,
                    t,
                    mean: em.mean[j],
                    theory_mean: th.mean[mode],
                    mean_se: em.mean_se[j],
                    z_mean: zm,
                    var: em.var[j],
                    theory_var: th.var[mode],
                    var_se: em.var_se[j],
                    z_var: zv,
                });
            }
        }
        match tallies.iter_mut().find(|t| t.0 == cell.method) {
            Some(t) => {
                t.1 += within;
                t.2 += total;
            }
            None => tallies.push((cell.method, within, total)),
        }
        progress(ctx, ci, n);
    }
    let fraction_within: Vec<(Method, f64)> = tallies.iter().map(|(m, w, t)| (*m, *w as f64 / *t as f64)).collect();
    for (m, f) in &fraction_within {
        let c = su.cells.iter().find(|c| c.method == *m).expect("method has cells");
        rows.push(row(exp, m.name(), c, spec.reps, "fraction_within_3se", *f, 0.0, false));
    }
    Ok(StationaryReport {
        detail,
        fraction_within,
        rows,
    })
}

// ---------------------------------------------------------------- SDE validation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdeValidationRow {
    pub cell: Cell,
    pub model: SdeLabel,
    pub p: Option<f64>,
    pub steps: Vec<u64>,
    pub discrete_loss: Vec<f64>,
    pub sde_loss: Vec<f64>,
    pub discrete_grad: Vec<f64>,
    pub sde_grad: Vec<f64>,
    pub mean_rel_loss: f64,
    pub max_rel_loss: f64,
    pub mean_rel_grad: f64,
    pub max_rel_grad: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdeValidationReport {
    pub rows_detail: Vec<SdeValidationRow>,
    pub rows: Vec<ResultRow>,
}

pub fn build_model(
    label: SdeLabel,
    obj: &Objective,
    cfg: &OptimizerConfig,
    p: Option<f64>,
    phase1_samples: usize,
) -> Result<SdeModel> {
    let (noise, privacy, eta) = (&cfg.noise, &cfg.privacy, cfg.eta);
    let sgd = cfg.method == Method::DpSgd;
    let sign = cfg.method == Method::DpSignSgd;
    let opts = Phase1Options {
        samples: phase1_samples,
        diag_only: false,
    };
    match label {
        SdeLabel::SgdP2 if sgd => SdeModel::sgd_phase2(obj, noise, privacy, eta),
        SdeLabel::SgdP1 if sgd => SdeModel::sgd_phase1_with(obj, noise, privacy, eta, opts),
        SdeLabel::SignP1 if sign => SdeModel::sign_phase1(obj, noise, privacy, eta),
        SdeLabel::SignP2Exact if sign => SdeModel::sign_phase2(obj, noise, privacy, eta, true),
        SdeLabel::SignP2Linear if sign => SdeModel::sign_phase2(obj, noise, privacy, eta, false),
        SdeLabel::SgdMixed | SdeLabel::SignMixed if sgd || sign => {
            let p = p.ok_or_else(|| invalid("mixed model needs a clip fraction"))?;
            SdeModel::mixed(obj, noise, privacy, eta, p, cfg.method)
        }
        other => Err(invalid(format!("model {} does not describe {}", other.name(), cfg.method))),
    }
}

fn rel_discrepancy(steps: &[u64], a: &[f64], b: &[f64], from: f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max = 0.0_f64;
    let mut k = 0usize;
    for ((s, x), y) in steps.iter().zip(a).zip(b) {
        if (*s as f64) < from || *s == 0 {
            continue;
        }
        let r = if *x == 0.0 && *y == 0.0 { 0.0 } else { (y - x).abs() / x.abs() };
        sum += r;
        max = max.max(r);
        k += 1;
    }
    if k == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (sum / k as f64, max)
    }
}

/// Paired discrete and Euler–Maruyama ensembles from the same `x₀`.
pub fn run_sde_validation(spec: &SweepSpec, ctx: &RunContext) -> Result<SdeValidationReport> {
    let su = setup(spec)?;
    let pool = build_pool(ctx.workers)?;
    let exp = Experiment::SdeValidate;
    let m = spec.sde.substeps;
    let mut detail = Vec::new();
    let mut rows = Vec::new();
    let n = su.cells.len();
    for (ci, cell) in su.cells.iter().enumerate() {
        let cfg = cell_config(spec, cell)?;
        let label = spec.sde.model_for(cell.method)?;
        let disc = pool.install(|| run_discrete(spec, &su.obj, &su.x0, cell, RecordOptions::every(spec.record_every)))?;
        let measured = disc.iter().map(|r| r.clip_fraction).sum::<f64>() / disc.len() as f64;
        let p = match label {
            SdeLabel::SgdMixed | SdeLabel::SignMixed => Some(spec.sde.mixed_p.unwrap_or(measured)),
            _ => None,
        };
        let model = build_model(label, &su.obj, &cfg, p, spec.sde.phase1_samples)?;
        let dt = cell.eta / m as f64;
        let sde_opts = RecordOptions::every(spec.record_every * m);
        let sde: Vec<RunRecord> = pool.install(|| {
            (0..spec.reps)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream(spec.seed, cell.stream + SDE_STREAM_OFFSET, r as u64);
                    let mut rec = euler_maruyama(&model, &su.x0, dt, cell.steps * m, sde_opts, &mut rng)?;
                    rec.steps.iter_mut().for_each(|s| *s /= m);
                    rec.seed = spec.seed;
                    Ok(rec)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        save_records(ctx, &format!("sde_validate_cell{:04}", cell.index), &disc)?;
        save_records(ctx, &format!("sde_validate_cell{:04}_sde", cell.index), &sde)?;
        let ds = summarize(cell, &disc, spec.tail);
        let ss = summarize(cell, &sde, spec.tail);
        let len = ds.steps.len().min(ss.steps.len());
        let steps = ds.steps[..len].to_vec();
        let from = spec.sde.burn_in * cell.steps as f64;
        let (mean_l, max_l) = rel_discrepancy(&steps, &ds.mean_loss[..len], &ss.mean_loss[..len], from);
        let (mean_g, max_g) = rel_discrepancy(&steps, &ds.mean_grad_norm_sq[..len], &ss.mean_grad_norm_sq[..len], from);
        let diverged = ds.diverged || ss.diverged;
        let mname = cell.method.name();
        rows.extend(summary_rows(exp, &ds, true));
        for (st, l) in ss.steps.iter().zip(&ss.mean_loss) {
            rows.push(row(exp, mname, cell, spec.reps, format!("sde_loss:step={st}"), *l, f64::NAN, ss.diverged));
        }
        rows.push(row(exp, mname, cell, spec.reps, "mean_rel_discrepancy_loss", mean_l, 0.0, diverged));
        rows.push(row(exp, mname, cell, spec.reps, "max_rel_discrepancy_loss", max_l, 0.0, diverged));
        rows.push(row(exp, mname, cell, spec.reps, "mean_rel_discrepancy_grad", mean_g, 0.0, diverged));
        rows.push(row(exp, mname, cell, spec.reps, "max_rel_discrepancy_grad", max_g, 0.0, diverged));
        detail.push(SdeValidationRow {
            cell: *cell,
            model: label,
            p,
            steps,
            discrete_loss: ds.mean_loss[..len].to_vec(),
            sde_loss: ss.mean_loss[..len].to_vec(),
            discrete_grad: ds.mean_grad_norm_sq[..len].to_vec(),
            sde_grad: ss.mean_grad_norm_sq[..len].to_vec(),
            mean_rel_loss: mean_l,
            max_rel_loss: max_l,
            mean_rel_grad: mean_g,
            max_rel_grad: max_g,
            diverged,
        });
        progress(ctx, ci, n);
    }
    Ok(SdeValidationReport {
        rows_detail: detail,
        rows,
    })
}

// ---------------------------------------------------------------- weak error

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakErrorRow {
    pub cell: Cell,
    pub discrete_mean: f64,
    pub discrete_se: f64,
    pub sde_exact: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakErrorReport {
    pub detail: Vec<WeakErrorRow>,
    /// Slope of `ln |error|` against `ln η`.
    pub slope: Option<LinearFit>,
    pub rows: Vec<ResultRow>,
}

/// `|E f(x_T) − E f(X_τ)|` for DP-SGD on a quadratic, with `E f(X_τ)` from
/// the exact Ornstein–Uhlenbeck moments of the phase-2 SDE.
pub fn run_weak_error(spec: &SweepSpec, ctx: &RunContext) -> Result<WeakErrorReport> {
    if spec.methods != [Method::DpSgd] {
        return Err(invalid("weak_error supports dpsgd only"));
    }
    let su = setup(spec)?;
    let h = su
        .obj
        .hessian_diag()
        .ok_or_else(|| invalid("weak_error needs a quadratic objective"))?
        .to_vec();
    let pool = build_pool(ctx.workers)?;
    let exp = Experiment::WeakError;
    let mut detail = Vec::new();
    let mut rows = Vec::new();
    let n = su.cells.len();
    for (ci, cell) in su.cells.iter().enumerate() {
        let recs = pool.install(|| run_discrete(spec, &su.obj, &su.x0, cell, RecordOptions::every(cell.steps)))?;
        save_records(ctx, &format!("weak_error_cell{:04}", cell.index), &recs)?;
        let finals: Vec<f64> = recs.iter().filter(|r| !r.diverged).filter_map(|r| r.final_loss()).collect();
        let mo = moments(&finals);
        let inp = bound_inputs(spec, &su.obj, &su.x0, cell)?;
        let st = theory::stationary_sgd(&h, &su.x0, &inp, cell.steps as f64 * cell.eta)?;
        let exact: f64 = h
            .iter()
            .zip(st.mean.iter().zip(&st.var))
            .map(|(l, (m, v))| 0.5 * l * (m * m + v))
            .sum();
        let err = (mo.mean - exact).abs();
        let diverged = finals.len() < recs.len();
        rows.push(row(exp, "dpsgd", cell, spec.reps, "discrete_loss", mo.mean, mo.se, diverged));
        rows.push(row(exp, "dpsgd", cell, spec.reps, "sde_exact_loss", exact, 0.0, false));
        rows.push(row(exp, "dpsgd", cell, spec.reps, "abs_error", err, mo.se, diverged));
        detail.push(WeakErrorRow {
            cell: *cell,
            discrete_mean: mo.mean,
            discrete_se: mo.se,
            sde_exact: exact,
            abs_error: err,
        });
        progress(ctx, ci, n);
    }
    let (x, y): (Vec<f64>, Vec<f64>) = detail
        .iter()
        .filter(|r| r.abs_error > 0.0)
        .map(|r| (r.cell.eta.ln(), r.abs_error.ln()))
        .unzip();
    let slope = linear_regression(&x, &y).ok();
    if let (Some(f), Some(first)) = (&slope, su.cells.first()) {
        let mut c = *first;
        c.eta = f64::NAN;
        rows.push(row(exp, "dpsgd", &c, spec.reps, "weak_error_slope", f.slope, 0.0, false));
    }
    Ok(WeakErrorReport { detail, slope, rows })
}

// ---------------------------------------------------------------- dispatch

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum Report {
    SdeValidate(SdeValidationReport),
    Scaling(ScalingReport),
    Speed(SpeedReport),
    EpsStar(EpsStarReport),
    ProtocolB(ProtocolBReport),
    Stationary(StationaryReport),
    WeakError(WeakErrorReport),
}

impl Report {
    pub fn rows(&self) -> &[ResultRow] {
        match self {
            Report::SdeValidate(r) => &r.rows,
            Report::Scaling(r) => &r.rows,
            Report::Speed(r) => &r.rows,
            Report::EpsStar(r) => &r.rows,
            Report::ProtocolB(r) => &r.rows,
            Report::Stationary(r) => &r.rows,
            Report::WeakError(r) => &r.rows,
        }
    }
}

pub fn run_experiment(spec: &SweepSpec, ctx: &RunContext) -> Result<Report> {
    Ok(match spec.experiment {
        Experiment::SdeValidate => Report::SdeValidate(run_sde_validation(spec, ctx)?),
        Experiment::Scaling => Report::Scaling(run_scaling(spec, ctx)?),
        Experiment::Speed => Report::Speed(run_speed(spec, ctx)?),
        Experiment::EpsStar => Report::EpsStar(run_epsstar(spec, ctx)?),
        Experiment::ProtocolB => Report::ProtocolB(run_protocol_b(spec, ctx)?),
        Experiment::Stationary => Report::Stationary(run_stationary(spec, ctx)?),
        Experiment::WeakError => Report::WeakError(run_weak_error(spec, ctx)?),
    })
}

/// Writes `results.csv` and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, spec: &SweepSpec, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_results_csv(&dir.join("results.csv"), report.rows())?;
    write_manifest(&dir.join("manifest.json"), &serde_json::to_value(spec)?, spec.seed)
}

/// Runs the sweep and, when `spec.output` is set, writes its outputs.
pub fn run_sweep(spec: &SweepSpec, ctx: &RunContext) -> Result<Report> {
    let report = run_experiment(spec, ctx)?;
    if let Some(dir) = &spec.output {
        write_outputs(dir, spec, &report)?;
    }
    Ok(report)
}
