//! Experiment configuration, seeded Monte Carlo runs, NMSE/rate accounting and CSV output.
//!
//! Every trial draws from its own substreams, so results depend only on the
//! configuration and seed, never on the number of worker threads.

use std::collections::BTreeMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::analysis::{mrt_capacity, poa_estimate, thm1_bound, PoaReport};
use crate::coordinated::{bp_kf_step, ci_kf_step, jc_kf_step, PerDeviceBeliefs};
use crate::error::{Error, Result};
use crate::heuristics::{ca_step, discard_decision, ls_step, CaObjective, DiscardDecision, EstimateMode};
use crate::joint::{Dynamics, JointBelief, MixtureCovariance};
use crate::model::{AccessPattern, ScenarioConfig, Simulator, TrialStreams};
use crate::uncoordinated::{
    gnn_step, mht_step, optimal_step, pdaf_step, HypothesisSet, PatternSet, HYPOTHESIS_BUDGET,
};

/// Header of the per-row metrics file.
pub const METRICS_HEADER: [&str; 7] = [
    "trial",
    "slot",
    "tracker",
    "device",
    "sq_error",
    "jc_cov_trace_dev1",
    "rate_bits",
];

/// Header of the aggregated file.
pub const AGGREGATE_HEADER: [&str; 8] = [
    "slot",
    "tracker",
    "device",
    "nmse_mean",
    "nmse_std",
    "rate_mean",
    "rate_std",
    "n_trials",
];

/// Prefix of the tracker label on rows that report a failed trial.
pub const FAILURE_PREFIX: &str = "failed:";

/// The tracker registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackerKind {
    Jc,
    Ci,
    Bp,
    Optimal,
    Gnn,
    Mht,
    Pdaf,
    SoftLs,
    HardLs,
    CaMl,
    CaMap,
}

impl TrackerKind {
    pub const ALL: [TrackerKind; 11] = [
        TrackerKind::Jc,
        TrackerKind::Ci,
        TrackerKind::Bp,
        TrackerKind::Optimal,
        TrackerKind::Gnn,
        TrackerKind::Mht,
        TrackerKind::Pdaf,
        TrackerKind::SoftLs,
        TrackerKind::HardLs,
        TrackerKind::CaMl,
        TrackerKind::CaMap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrackerKind::Jc => "jc",
            TrackerKind::Ci => "ci",
            TrackerKind::Bp => "bp",
            TrackerKind::Optimal => "optimal",
            TrackerKind::Gnn => "gnn",
            TrackerKind::Mht => "mht",
            TrackerKind::Pdaf => "pdaf",
            TrackerKind::SoftLs => "soft_ls",
            TrackerKind::HardLs => "hard_ls",
            TrackerKind::CaMl => "ca_ml",
            TrackerKind::CaMap => "ca_map",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Trackers that can run behind the collision-discarding front end.
    pub fn supports_discard(self) -> bool {
        matches!(self, TrackerKind::Gnn | TrackerKind::Mht | TrackerKind::Pdaf)
    }

    /// True when the tracker is told the access pattern.
    pub fn is_coordinated(self) -> bool {
        matches!(self, TrackerKind::Jc | TrackerKind::Ci | TrackerKind::Bp)
    }

    fn needs_all_patterns(self) -> bool {
        matches!(
            self,
            TrackerKind::Optimal | TrackerKind::Gnn | TrackerKind::Mht | TrackerKind::Pdaf
        )
    }
}

/// A tracker with its options.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerSpec {
    pub kind: TrackerKind,
    /// Hypotheses kept by MHT.
    pub n_h: Option<usize>,
    /// Run behind the collision-discarding front end.
    pub discard: bool,
    /// Mixture collapse for the optimal tracker and PDAF.
    pub mixture_cov: MixtureCovariance,
}

impl TrackerSpec {
    pub fn new(kind: TrackerKind) -> Self {
        Self {
            kind,
            n_h: None,
            discard: false,
            mixture_cov: MixtureCovariance::Auto,
        }
    }

    pub fn mht(n_h: usize) -> Self {
        Self {
            n_h: Some(n_h),
            ..Self::new(TrackerKind::Mht)
        }
    }

    pub fn with_discard(mut self) -> Self {
        self.discard = true;
        self
    }

    /// Name used in the output files.
    pub fn label(&self) -> String {
        if self.discard {
            format!("{}_discard", self.kind.name())
        } else {
            self.kind.name().to_string()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == TrackerKind::Mht && !matches!(self.n_h, Some(n) if n >= 1) {
            return Err(Error::InvalidParameter("mht requires N_h >= 1".into()));
        }
        if self.discard && !self.kind.supports_discard() {
            return Err(Error::InvalidParameter(format!(
                "{} cannot run with collision discarding",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

/// Quantities an experiment reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Nmse,
    Rate,
    Poa,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Nmse => "nmse",
            Metric::Rate => "rate",
            Metric::Poa => "poa",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Metric::Nmse, Metric::Rate, Metric::Poa]
            .into_iter()
            .find(|m| m.name() == name)
    }
}

/// A scenario, the trackers to compare and where to write results.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub scenario: ScenarioConfig,
    pub trackers: Vec<TrackerSpec>,
    pub outputs: PathBuf,
    pub metrics: Vec<Metric>,
    /// Report every device instead of device 1 only.
    pub all_devices: bool,
}

impl ExperimentSpec {
    pub fn new(scenario: ScenarioConfig, trackers: Vec<TrackerSpec>) -> Self {
        Self {
            scenario,
            trackers,
            outputs: PathBuf::from("out"),
            metrics: vec![Metric::Nmse],
            all_devices: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trackers.is_empty() {
            return Err(Error::InvalidParameter("at least one tracker is required".into()));
        }
        self.scenario.validate()?;
        for (i, t) in self.trackers.iter().enumerate() {
            t.validate()?;
            if self.trackers[..i].iter().any(|o| o.label() == t.label()) {
                return Err(Error::InvalidParameter(format!("tracker {} listed twice", t.label())));
            }
        }
        if self.trackers.iter().any(|t| t.discard) {
            self.scenario.validate_active_count()?;
        }
        Ok(())
    }

    pub fn wants(&self, metric: Metric) -> bool {
        self.metrics.contains(&metric)
    }
}

/// One tracker's error for one device in one slot of one trial.
///
/// Devices are numbered from 1. `jc_cov_trace_dev1` is the trace of device
/// 1's block of the joint Kalman covariance in the same trial and slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub trial: usize,
    pub slot: usize,
    pub tracker: String,
    pub device: usize,
    pub sq_error: f64,
    pub jc_cov_trace_dev1: f64,
    pub rate_bits: Option<f64>,
}

impl MetricsRow {
    pub fn is_failure(&self) -> bool {
        self.tracker.starts_with(FAILURE_PREFIX)
    }
}

/// Across-trial statistics of one slot, tracker and device.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub slot: usize,
    pub tracker: String,
    pub device: usize,
    /// `mean(sq_error) / mean(jc_cov_trace_dev1)`.
    pub nmse_mean: f64,
    /// Sample standard deviation of `sq_error`, scaled by the same denominator.
    pub nmse_std: f64,
    pub rate_mean: Option<f64>,
    pub rate_std: Option<f64>,
    pub n_trials: usize,
}

// ---------------------------------------------------------------------------
// running

enum State {
    Joint(JointBelief),
    PerDevice(PerDeviceBeliefs),
    Hypotheses(HypothesisSet),
}

struct Runner<'a> {
    spec: &'a TrackerSpec,
    label: String,
    state: State,
    estimate: DVector<f64>,
}

struct Slot<'a> {
    y: &'a DVector<f64>,
    q: &'a AccessPattern,
    decision: Option<&'a DiscardDecision>,
}

impl<'a> Runner<'a> {
    fn new(spec: &'a TrackerSpec, initial: &JointBelief) -> Self {
        let state = match spec.kind {
            TrackerKind::Ci | TrackerKind::Bp => State::PerDevice(PerDeviceBeliefs::from_joint(initial)),
            TrackerKind::Optimal => State::Hypotheses(HypothesisSet::new(initial.clone(), HYPOTHESIS_BUDGET)),
            TrackerKind::Mht => State::Hypotheses(HypothesisSet::new(initial.clone(), spec.n_h.unwrap_or(1))),
            _ => State::Joint(initial.clone()),
        };
        Self {
            spec,
            label: spec.label(),
            state,
            estimate: initial.mean.clone(),
        }
    }

    fn step(&mut self, ctx: &Context, slot: &Slot) -> Result<()> {
        let d = &ctx.dynamics;
        let y = slot.y;
        let restricted = match (self.spec.discard, slot.decision) {
            (true, Some(DiscardDecision::Discard)) => return self.predict_only(d),
            (true, Some(DiscardDecision::Restrict(set))) => Some(set),
            _ => None,
        };
        let patterns = || {
            restricted
                .or(ctx.all_patterns.as_ref())
                .ok_or_else(|| Error::InvalidParameter("pattern set was not prepared".into()))
        };
        let policy = self.spec.mixture_cov;
        let lambdas = &ctx.lambdas;
        match (&mut self.state, self.spec.kind) {
            (State::Joint(b), TrackerKind::Jc) => *b = jc_kf_step(b, y, slot.q, d)?,
            (State::PerDevice(s), TrackerKind::Ci) => *s = ci_kf_step(s, y, slot.q, d)?,
            (State::PerDevice(s), TrackerKind::Bp) => *s = bp_kf_step(s, y, slot.q, d)?,
            (State::Hypotheses(h), TrackerKind::Optimal) => {
                let (set, summary) = optimal_step(h, y, d, patterns()?, policy)?;
                *h = set;
                self.estimate = summary.mean;
                return Ok(());
            }
            (State::Hypotheses(h), TrackerKind::Mht) => {
                let (set, best) = mht_step(h, y, d, patterns()?)?;
                *h = set;
                self.estimate = best.mean;
                return Ok(());
            }
            (State::Joint(b), TrackerKind::Gnn) => *b = gnn_step(b, y, d, patterns()?)?.0,
            (State::Joint(b), TrackerKind::Pdaf) => *b = pdaf_step(b, y, d, patterns()?, policy)?,
            (State::Joint(b), TrackerKind::SoftLs) => *b = ls_step(b, y, d, EstimateMode::Soft)?.0,
            (State::Joint(b), TrackerKind::HardLs) => *b = ls_step(b, y, d, EstimateMode::Hard)?.0,
            (State::Joint(b), TrackerKind::CaMl) => *b = ca_step(b, y, d, lambdas, CaObjective::Ml)?.0,
            (State::Joint(b), TrackerKind::CaMap) => *b = ca_step(b, y, d, lambdas, CaObjective::Map)?.0,
            _ => unreachable!("state is chosen from the tracker kind"),
        }
        self.refresh_estimate();
        Ok(())
    }

    fn predict_only(&mut self, d: &Dynamics) -> Result<()> {
        match &mut self.state {
            State::Joint(b) => *b = b.predict(d),
            State::PerDevice(s) => *s = s.predict(d),
            State::Hypotheses(h) => {
                *h = h.predict(d);
                self.estimate = h.best().ok_or(Error::AllWeightsDegenerate)?.belief.mean.clone();
                return Ok(());
            }
        }
        self.refresh_estimate();
        Ok(())
    }

    fn refresh_estimate(&mut self) {
        match &self.state {
            State::Joint(b) => self.estimate.copy_from(&b.mean),
            State::PerDevice(s) => {
                let mut off = 0;
                for b in &s.devices {
                    self.estimate.rows_mut(off, b.dim()).copy_from(&b.mean);
                    off += b.dim();
                }
            }
            State::Hypotheses(_) => {}
        }
    }
}

/// Everything a trial needs that does not depend on the trial index.
struct Context<'a> {
    spec: &'a ExperimentSpec,
    sim: Simulator,
    dynamics: Dynamics,
    lambdas: Vec<f64>,
    all_patterns: Option<PatternSet>,
    any_discard: bool,
    rate: bool,
}

impl<'a> Context<'a> {
    fn new(spec: &'a ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let sim = Simulator::new(&spec.scenario)?;
        let needs_all = spec
            .trackers
            .iter()
            .any(|t| t.kind.needs_all_patterns() && !t.discard);
        let all_patterns = if needs_all {
            Some(PatternSet::all(&spec.scenario.lambdas)?)
        } else {
            None
        };
        Ok(Self {
            dynamics: sim.dynamics.clone(),
            lambdas: spec.scenario.lambdas.clone(),
            sim,
            all_patterns,
            any_discard: spec.trackers.iter().any(|t| t.discard),
            rate: spec.wants(Metric::Rate),
            spec,
        })
    }

    fn run(&self, trial: usize) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        if let Err(label) = self.run_into(trial, &mut rows) {
            rows.push(MetricsRow {
                trial,
                slot: label.0,
                tracker: format!("{FAILURE_PREFIX}{}", label.1),
                device: 1,
                sq_error: f64::NAN,
                jc_cov_trace_dev1: f64::NAN,
                rate_bits: None,
            });
        }
        rows
    }

    /// Appends the trial's rows; on a tracker error returns the slot and label.
    fn run_into(&self, trial: usize, rows: &mut Vec<MetricsRow>) -> std::result::Result<(), (usize, String)> {
        let cfg = &self.spec.scenario;
        let k = cfg.devices;
        let m = cfg.antennas;
        let mut streams = TrialStreams::new(cfg.seed, trial as u64);
        let (mut h, initial) = self.sim.initial(&mut streams.init);
        let mut reference = initial.clone();
        let mut runners: Vec<Runner> = self.spec.trackers.iter().map(|t| Runner::new(t, &initial)).collect();
        let devices: Vec<usize> = if self.spec.all_devices { (0..k).collect() } else { vec![0] };
        for slot in 1..=cfg.slots {
            h = self.sim.step_state(&h, &mut streams.state);
            let q = self.sim.sample_access(&mut streams.access);
            let meas = self.sim.emit_measurement(&h, &q, &mut streams.noise);
            let decision = if self.any_discard {
                Some(discard_decision(&meas.raw, &self.sim.pilots, &self.lambdas).map_err(|_| (slot, "discard".to_string()))?)
            } else {
                None
            };
            reference = jc_kf_step(&reference, &meas.y, &q, &self.dynamics).map_err(|_| (slot, "jc".to_string()))?;
            let denominator = reference.device_trace(0);
            let input = Slot {
                y: &meas.y,
                q: &q,
                decision: decision.as_ref(),
            };
            for r in runners.iter_mut() {
                r.step(self, &input).map_err(|_| (slot, r.label.clone()))?;
            }
            for r in &runners {
                let rates = if self.rate {
                    mrt_capacity(&h, &r.estimate, k, cfg.sigma_v2, slot).ok()
                } else {
                    None
                };
                for &dev in &devices {
                    let err = h.rows(dev * m, m) - r.estimate.rows(dev * m, m);
                    rows.push(MetricsRow {
                        trial,
                        slot,
                        tracker: r.label.clone(),
                        device: dev + 1,
                        sq_error: err.norm_squared(),
                        jc_cov_trace_dev1: denominator,
                        rate_bits: rates.as_ref().map(|s| s[dev].capacity_bits),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Simulates one trial. Tracker errors end the trial with a failure row.
pub fn run_trial(spec: &ExperimentSpec, trial: usize) -> Result<Vec<MetricsRow>> {
    Ok(Context::new(spec)?.run(trial))
}

/// Runs every trial on `workers` threads (the global pool when `None`);
/// rows come back in trial order.
pub fn simulate(spec: &ExperimentSpec, workers: Option<usize>) -> Result<Vec<MetricsRow>> {
    let ctx = Context::new(spec)?;
    let go = || -> Vec<MetricsRow> {
        (0..spec.scenario.trials)
            .into_par_iter()
            .map(|t| ctx.run(t))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
            Ok(pool.install(go))
        }
        None => Ok(go()),
    }
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub metrics_path: PathBuf,
    pub aggregate_path: PathBuf,
    pub poa_path: Option<PathBuf>,
    pub rows: Vec<MetricsRow>,
    pub aggregate: Vec<AggregateRow>,
}

/// Runs the experiment and writes `metrics.csv` and `aggregate.csv` (and
/// `poa.csv` when requested) into `spec.outputs`.
pub fn run_experiment(spec: &ExperimentSpec, workers: Option<usize>) -> Result<ExperimentOutput> {
    let rows = simulate(spec, workers)?;
    let aggregate = aggregate(&rows);
    let dir = &spec.outputs;
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let metrics_path = dir.join("metrics.csv");
    let aggregate_path = dir.join("aggregate.csv");
    write_metrics(&metrics_path, &rows)?;
    write_aggregate(&aggregate_path, &aggregate)?;
    let poa_path = if spec.wants(Metric::Poa) {
        let report = poa_report(&spec.scenario, 1, spec.scenario.trials)?;
        let path = dir.join("poa.csv");
        write_poa(&path, 1, &report)?;
        Some(path)
    } else {
        None
    };
    Ok(ExperimentOutput {
        metrics_path,
        aggregate_path,
        poa_path,
        rows,
        aggregate,
    })
}

/// Unit-power belief `N(0, I)` shared by both trackers in the PoA analysis.
pub fn analysis_prior(cfg: &ScenarioConfig) -> Result<JointBelief> {
    JointBelief::isotropic(
        DVector::zeros(cfg.devices * cfg.antennas),
        cfg.devices,
        cfg.antennas,
        1.0,
    )
}

/// Price of anarchy at slot `t` from the `N(0, I)` prior.
pub fn poa_report(cfg: &ScenarioConfig, t: usize, trials: usize) -> Result<PoaReport> {
    cfg.validate()?;
    poa_estimate(&cfg.dynamics()?, &cfg.lambdas, &analysis_prior(cfg)?, t, trials, cfg.seed)
}

/// Single-step bound from the `N(0, I)` prior.
pub fn bound_report(cfg: &ScenarioConfig) -> Result<f64> {
    cfg.validate()?;
    thm1_bound(&cfg.dynamics()?, &cfg.lambdas, &analysis_prior(cfg)?)
}

// ---------------------------------------------------------------------------
// aggregation

/// Per-slot statistics across trials, ordered by slot, then tracker (first
/// appearance), then device. Failure rows are skipped.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, usize, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_failure()) {
        let idx = match order.iter().position(|t| *t == r.tracker) {
            Some(i) => i,
            None => {
                order.push(&r.tracker);
                order.len() - 1
            }
        };
        groups.entry((r.slot, idx, r.device)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((slot, idx, device), g)| {
            let n = g.len() as f64;
            let sq: Vec<f64> = g.iter().map(|r| r.sq_error).collect();
            let den = g.iter().map(|r| r.jc_cov_trace_dev1).sum::<f64>() / n;
            let (sq_mean, sq_std) = mean_std(&sq);
            let rates: Option<Vec<f64>> = g.iter().map(|r| r.rate_bits).collect();
            let rate = rates.map(|v| mean_std(&v));
            AggregateRow {
                slot,
                tracker: order[idx].to_string(),
                device,
                nmse_mean: sq_mean / den,
                nmse_std: sq_std / den,
                rate_mean: rate.map(|r| r.0),
                rate_std: rate.map(|r| r.1),
                n_trials: g.len(),
            }
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Time-averaged NMSE of one tracker with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeAverage {
    pub mean: f64,
    pub std_error: f64,
    pub n_trials: usize,
}

/// Average of the per-slot NMSE over `slots`.
///
/// Each trial contributes the slot average of `sq_error / D_t`, with `D_t`
/// the across-trial mean denominator of slot `t`; the mean of these
/// contributions equals the time average of the aggregated NMSE, and their
/// spread gives the standard error. Trials with a failure row are excluded.
pub fn time_average(
    rows: &[MetricsRow],
    tracker: &str,
    device: usize,
    slots: RangeInclusive<usize>,
) -> Option<TimeAverage> {
    let failed: Vec<usize> = rows.iter().filter(|r| r.is_failure()).map(|r| r.trial).collect();
    let picked: Vec<&MetricsRow> = rows
        .iter()
        .filter(|r| r.tracker == tracker && r.device == device && slots.contains(&r.slot) && !failed.contains(&r.trial))
        .collect();
    let mut den: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &picked {
        let e = den.entry(r.slot).or_insert((0.0, 0));
        e.0 += r.jc_cov_trace_dev1;
        e.1 += 1;
    }
    let mut per_trial: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &picked {
        let (s, n) = den[&r.slot];
        let e = per_trial.entry(r.trial).or_insert((0.0, 0));
        e.0 += r.sq_error / (s / n as f64);
        e.1 += 1;
    }
    if per_trial.is_empty() {
        return None;
    }
    let values: Vec<f64> = per_trial.values().map(|(s, n)| s / *n as f64).collect();
    let (mean, std) = mean_std(&values);
    Some(TimeAverage {
        mean,
        std_error: std / (values.len() as f64).sqrt(),
        n_trials: values.len(),
    })
}

// ---------------------------------------------------------------------------
// CSV

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes rows with the metrics header; floats carry 17 significant digits.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(METRICS_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.trial.to_string(),
            r.slot.to_string(),
            r.tracker.clone(),
            r.device.to_string(),
            fmt_f64(r.sq_error),
            fmt_f64(r.jc_cov_trace_dev1),
            fmt_opt(r.rate_bits),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(AGGREGATE_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.slot.to_string(),
            r.tracker.clone(),
            r.device.to_string(),
            fmt_f64(r.nmse_mean),
            fmt_f64(r.nmse_std),
            fmt_opt(r.rate_mean),
            fmt_opt(r.rate_std),
            r.n_trials.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_poa(path: &Path, t: usize, r: &PoaReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["t", "coordinated_mmse", "uncoordinated_mse", "poa", "std_error", "thm1_bound", "trials"])
        .map_err(csv_err(path))?;
    w.write_record([
        t.to_string(),
        fmt_f64(r.coordinated_mmse),
        fmt_f64(r.uncoordinated_mse),
        fmt_f64(r.poa),
        fmt_f64(r.std_error),
        fmt_opt(r.thm1_bound),
        r.trials.to_string(),
    ])
    .map_err(csv_err(path))?;
    w.flush().map_err(io_err(path))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        key: name.to_string(),
        line: line as usize,
        message: format!("cannot parse `{raw}` in {}", path.display()),
    })
}

fn parse_opt(path: &Path, line: u64, name: &str, raw: &str) -> Result<Option<f64>> {
    if raw.is_empty() {
        Ok(None)
    } else {
        parse_field(path, line, name, raw).map(Some)
    }
}

/// Reads a file written by [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = rd.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Config {
            key: "header".into(),
            line: 1,
            message: format!("unexpected metrics header in {}", path.display()),
        });
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(MetricsRow {
            trial: parse_field(path, line, "trial", &rec[0])?,
            slot: parse_field(path, line, "slot", &rec[1])?,
            tracker: rec[2].to_string(),
            device: parse_field(path, line, "device", &rec[3])?,
            sq_error: parse_field(path, line, "sq_error", &rec[4])?,
            jc_cov_trace_dev1: parse_field(path, line, "jc_cov_trace_dev1", &rec[5])?,
            rate_bits: parse_opt(path, line, "rate_bits", &rec[6])?,
        });
    }
    Ok(rows)
}

/// Reads a file written by [`write_aggregate`].
pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(AggregateRow {
            slot: parse_field(path, line, "slot", &rec[0])?,
            tracker: rec[1].to_string(),
            device: parse_field(path, line, "device", &rec[2])?,
            nmse_mean: parse_field(path, line, "nmse_mean", &rec[3])?,
            nmse_std: parse_field(path, line, "nmse_std", &rec[4])?,
            rate_mean: parse_opt(path, line, "rate_mean", &rec[5])?,
            rate_std: parse_opt(path, line, "rate_std", &rec[6])?,
            n_trials: parse_field(path, line, "n_trials", &rec[7])?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// configuration

const TOP_LEVEL_KEYS: [&str; 19] = [
    "K",
    "M",
    "tau",
    "T",
    "rho",
    "A_blocks",
    "Q_blocks",
    "R",
    "lambdas",
    "sigma_v2",
    "acquisition_cov",
    "seed",
    "trials",
    "trackers",
    "metrics",
    "outputs",
    "all_devices",
    "tracker",
    "mixture_cov",
];

const TRACKER_KEYS: [&str; 3] = ["N_h", "discard", "mixture_cov"];

/// Parser state: the source text is kept to report line numbers.
struct ConfigReader<'a> {
    text: &'a str,
}

impl<'a> ConfigReader<'a> {
    /// 1-based line of `key` (a dotted path); the enclosing table header or
    /// line 1 when the key itself does not appear.
    fn line_of(&self, key: &str) -> usize {
        let parts: Vec<&str> = key.split('.').collect();
        let (section, leaf) = match parts.as_slice() {
            ["tracker", name, rest @ ..] => (Some(format!("tracker.{name}")), rest.first().copied()),
            [leaf, ..] => (None, Some(*leaf)),
            [] => (None, None),
        };
        let mut current: Option<String> = None;
        let mut header_line = None;
        for (i, raw) in self.text.lines().enumerate() {
            let line = raw.trim();
            if let Some(h) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
                let h = h.trim().trim_start_matches('[').trim().to_string();
                if section.as_deref() == Some(h.as_str()) {
                    header_line = Some(i + 1);
                }
                current = Some(h);
                continue;
            }
            if current != section {
                continue;
            }
            if let Some(leaf) = leaf {
                if let Some(rest) = line.strip_prefix(leaf) {
                    if rest.trim_start().starts_with('=') {
                        return i + 1;
                    }
                }
            }
        }
        header_line.unwrap_or(1)
    }

    fn err(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            key: key.to_string(),
            line: self.line_of(key),
            message: message.into(),
        }
    }

    fn number(&self, key: &str, v: &toml::Value) -> Result<f64> {
        match v {
            toml::Value::Integer(i) => Ok(*i as f64),
            toml::Value::Float(f) => Ok(*f),
            _ => Err(self.err(key, "expected a number")),
        }
    }

    fn count(&self, key: &str, v: &toml::Value) -> Result<usize> {
        match v {
            toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            _ => Err(self.err(key, "expected a non-negative integer")),
        }
    }

    fn matrix(&self, key: &str, v: &toml::Value, m: usize) -> Result<DMatrix<f64>> {
        let rows = v
            .as_array()
            .ok_or_else(|| self.err(key, "expected a matrix (array of rows)"))?;
        if rows.len() != m {
            return Err(self.err(key, format!("expected {m} rows, found {}", rows.len())));
        }
        let mut out = DMatrix::zeros(m, m);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_array().ok_or_else(|| self.err(key, "expected a matrix (array of rows)"))?;
            if row.len() != m {
                return Err(self.err(key, format!("row {} has {} entries, expected {m}", i + 1, row.len())));
            }
            for (j, x) in row.iter().enumerate() {
                out[(i, j)] = self.number(key, x)?;
            }
        }
        Ok(out)
    }

    /// A scalar (`c I` for every device), a list of per-device scalars, one
    /// shared matrix, or a list of per-device matrices.
    fn blocks(&self, key: &str, v: &toml::Value, k: usize, m: usize) -> Result<Vec<DMatrix<f64>>> {
        let eye = DMatrix::<f64>::identity(m, m);
        if let Ok(c) = self.number(key, v) {
            return Ok(vec![&eye * c; k]);
        }
        let items = v
            .as_array()
            .ok_or_else(|| self.err(key, "expected a number, a list or a matrix"))?;
        match items.first() {
            Some(toml::Value::Integer(_) | toml::Value::Float(_)) => {
                if items.len() != k {
                    return Err(self.err(key, format!("expected {k} per-device values, found {}", items.len())));
                }
                items.iter().map(|x| Ok(&eye * self.number(key, x)?)).collect()
            }
            Some(toml::Value::Array(row)) if matches!(row.first(), Some(toml::Value::Array(_))) => {
                if items.len() != k {
                    return Err(self.err(key, format!("expected {k} per-device matrices, found {}", items.len())));
                }
                items.iter().map(|x| self.matrix(key, x, m)).collect()
            }
            Some(_) => Ok(vec![self.matrix(key, v, m)?; k]),
            None => Err(self.err(key, "empty list")),
        }
    }

    fn mixture(&self, key: &str, v: &toml::Value) -> Result<MixtureCovariance> {
        match v.as_str() {
            Some("exact") => Ok(MixtureCovariance::Exact),
            Some("isotropic") => Ok(MixtureCovariance::Isotropic),
            Some("auto") => Ok(MixtureCovariance::Auto),
            _ => Err(self.err(key, "expected one of \"exact\", \"isotropic\", \"auto\"")),
        }
    }

    fn parse(&self) -> Result<ExperimentSpec> {
        let table: toml::Table = self.text.parse().map_err(|e: toml::de::Error| {
            let line = e
                .span()
                .map_or(1, |s| self.text[..s.start.min(self.text.len())].lines().count().max(1));
            Error::Config {
                key: String::new(),
                line,
                message: e.message().to_string(),
            }
        })?;
        for key in table.keys() {
            if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
                return Err(self.err(key, "unknown key"));
            }
        }
        let k = match table.get("K") {
            Some(v) => self.count("K", v)?,
            None => return Err(self.err("K", "missing required key")),
        };
        let m = match table.get("M") {
            Some(v) => self.count("M", v)?,
            None => return Err(self.err("M", "missing required key")),
        };
        if k == 0 {
            return Err(self.err("K", "must be at least 1"));
        }
        if m == 0 {
            return Err(self.err("M", "must be at least 1"));
        }
        let mut cfg = ScenarioConfig::with_defaults(k, m);
        if let Some(v) = table.get("rho") {
            let rho = self.number("rho", v)?;
            if !(rho.abs() <= 1.0) {
                return Err(self.err("rho", "must lie in [-1, 1]"));
            }
            cfg = cfg.with_rho(rho);
        }
        if let Some(v) = table.get("tau") {
            cfg.tau = self.count("tau", v)?;
            if cfg.tau == 0 {
                return Err(self.err("tau", "must be at least 1"));
            }
        }
        if let Some(v) = table.get("T") {
            cfg.slots = self.count("T", v)?;
        }
        if let Some(v) = table.get("A_blocks") {
            cfg.a_blocks = self.blocks("A_blocks", v, k, m)?;
        }
        if let Some(v) = table.get("Q_blocks") {
            cfg.q_blocks = self.blocks("Q_blocks", v, k, m)?;
            if cfg.q_blocks.iter().any(|q| !crate::filter_core::covariance_is_valid(q)) {
                return Err(self.err("Q_blocks", "blocks must be symmetric positive semi-definite"));
            }
        }
        if let Some(v) = table.get("R") {
            cfg.r = match self.number("R", v) {
                Ok(c) => DMatrix::identity(m, m) * c,
                Err(_) => self.matrix("R", v, m)?,
            };
            if !crate::filter_core::covariance_is_valid(&cfg.r) || cfg.r.clone().cholesky().is_none() {
                return Err(self.err("R", "must be symmetric positive definite"));
            }
        }
        if let Some(v) = table.get("lambdas") {
            cfg.lambdas = match self.number("lambdas", v) {
                Ok(l) => vec![l; k],
                Err(_) => {
                    let items = v.as_array().ok_or_else(|| self.err("lambdas", "expected a number or a list"))?;
                    if items.len() != k {
                        return Err(self.err("lambdas", format!("expected {k} values, found {}", items.len())));
                    }
                    items.iter().map(|x| self.number("lambdas", x)).collect::<Result<_>>()?
                }
            };
            if cfg.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return Err(self.err("lambdas", "access probabilities must lie in [0, 1]"));
            }
        }
        if let Some(v) = table.get("sigma_v2") {
            cfg.sigma_v2 = self.number("sigma_v2", v)?;
            if !(cfg.sigma_v2 > 0.0) {
                return Err(self.err("sigma_v2", "must be positive"));
            }
        }
        if let Some(v) = table.get("acquisition_cov") {
            cfg.acquisition_cov = self.number("acquisition_cov", v)?;
            if !(0.0..=1.0).contains(&cfg.acquisition_cov) {
                return Err(self.err("acquisition_cov", "must lie in [0, 1]"));
            }
        }
        if let Some(v) = table.get("seed") {
            cfg.seed = match v {
                toml::Value::Integer(i) => *i as u64,
                _ => return Err(self.err("seed", "expected an integer")),
            };
        }
        if let Some(v) = table.get("trials") {
            cfg.trials = self.count("trials", v)?;
        }
        let default_mixture = match table.get("mixture_cov") {
            Some(v) => self.mixture("mixture_cov", v)?,
            None => MixtureCovariance::Auto,
        };

        let names = table
            .get("trackers")
            .ok_or_else(|| self.err("trackers", "missing required key"))?
            .as_array()
            .ok_or_else(|| self.err("trackers", "expected a list of tracker names"))?;
        if names.is_empty() {
            return Err(self.err("trackers", "at least one tracker is required"));
        }
        let options = match table.get("tracker") {
            Some(toml::Value::Table(t)) => Some(t),
            Some(_) => return Err(self.err("tracker", "expected tables [tracker.<name>]")),
            None => None,
        };
        let mut trackers = Vec::with_capacity(names.len());
        let mut listed = Vec::new();
        for n in names {
            let name = n.as_str().ok_or_else(|| self.err("trackers", "tracker names must be strings"))?;
            let kind = TrackerKind::from_name(name).ok_or_else(|| {
                let known: Vec<&str> = TrackerKind::ALL.iter().map(|k| k.name()).collect();
                self.err("trackers", format!("unknown tracker `{name}` (known: {})", known.join(", ")))
            })?;
            listed.push(name);
            let mut spec = TrackerSpec::new(kind);
            spec.mixture_cov = default_mixture;
            if let Some(opts) = options.and_then(|o| o.get(name)) {
                let opts = opts
                    .as_table()
                    .ok_or_else(|| self.err(&format!("tracker.{name}"), "expected a table"))?;
                for (key, v) in opts {
                    let path = format!("tracker.{name}.{key}");
                    match key.as_str() {
                        "N_h" => {
                            let n_h = self.count(&path, v)?;
                            if n_h == 0 {
                                return Err(self.err(&path, "must be at least 1"));
                            }
                            spec.n_h = Some(n_h);
                        }
                        "discard" => {
                            spec.discard = v.as_bool().ok_or_else(|| self.err(&path, "expected true or false"))?;
                            if spec.discard && !kind.supports_discard() {
                                return Err(self.err(&path, format!("{name} cannot run with collision discarding")));
                            }
                        }
                        "mixture_cov" => spec.mixture_cov = self.mixture(&path, v)?,
                        _ => {
                            return Err(self.err(
                                &path,
                                format!("unknown option (known: {})", TRACKER_KEYS.join(", ")),
                            ))
                        }
                    }
                }
            }
            if kind == TrackerKind::Mht && spec.n_h.is_none() {
                return Err(self.err("tracker.mht.N_h", "mht requires N_h"));
            }
            if trackers.iter().any(|t: &TrackerSpec| t.label() == spec.label()) {
                return Err(self.err("trackers", format!("tracker `{name}` listed twice")));
            }
            trackers.push(spec);
        }
        if let Some(opts) = options {
            if let Some(extra) = opts.keys().find(|n| !listed.contains(&n.as_str())) {
                return Err(self.err(&format!("tracker.{extra}"), "options for a tracker that is not listed in `trackers`"));
            }
        }

        let metrics = match table.get("metrics") {
            Some(v) => {
                let items = v.as_array().ok_or_else(|| self.err("metrics", "expected a list"))?;
                items
                    .iter()
                    .map(|x| {
                        x.as_str()
                            .and_then(Metric::from_name)
                            .ok_or_else(|| self.err("metrics", "metrics must be among \"nmse\", \"rate\", \"poa\""))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => vec![Metric::Nmse],
        };
        let outputs = match table.get("outputs") {
            Some(v) => PathBuf::from(v.as_str().ok_or_else(|| self.err("outputs", "expected a path"))?),
            None => PathBuf::from("out"),
        };
        let all_devices = match table.get("all_devices") {
            Some(v) => v.as_bool().ok_or_else(|| self.err("all_devices", "expected true or false"))?,
            None => false,
        };

        if trackers.iter().any(|t| t.discard) && cfg.tau < 2 {
            return Err(self.err("tau", "collision discarding needs tau >= 2 (one unused pilot)"));
        }
        if metrics.contains(&Metric::Poa) && cfg.devices > 12 {
            return Err(self.err("metrics", "poa needs K <= 12 to enumerate access patterns"));
        }
        cfg.validate().map_err(|e| self.err("K", e.to_string()))?;
        let spec = ExperimentSpec {
            scenario: cfg,
            trackers,
            outputs,
            metrics,
            all_devices,
        };
        spec.validate().map_err(|e| self.err("trackers", e.to_string()))?;
        Ok(spec)
    }
}

/// Parses a TOML experiment description and applies defaults
/// (`tau = 16`, `T = 200`, `rho = 0.95`, `R = I`, `lambda_k = (K - 1) / K`).
pub fn parse_config(text: &str) -> Result<ExperimentSpec> {
    ConfigReader { text }.parse()
}

pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}
