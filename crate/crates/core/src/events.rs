//! Event-stream data model.
//!
//! A subject is an [`ObservedPath`]: baseline covariates `l0`, baseline
//! treatment `a0`, the covariate value in force before the first covariate
//! monitoring (`l_init`), and a strictly increasing list of marked events on
//! `(0, tau]`. Histories are replayed with a left-limit convention: the
//! snapshot at `t` contains every event strictly before `t`.
//!
//! Estimation runs on a tick schedule. Simulator output lives on a day grid
//! where each process owns one sub-tick per day; arbitrary data falls back to
//! the pooled grid of observed event times, where every process may jump at
//! every tick.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment label. The shipped simulator and estimators use {0, 1}.
pub type Label = u8;

const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Process {
    Cov,
    Trt,
    Censor,
    Death,
}

impl Process {
    pub const ALL: [Process; 4] = [Process::Cov, Process::Trt, Process::Censor, Process::Death];

    pub fn bit(self) -> u8 {
        match self {
            Process::Cov => 1,
            Process::Trt => 2,
            Process::Censor => 4,
            Process::Death => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Process::Cov => "cov_monitor",
            Process::Trt => "trt_monitor",
            Process::Censor => "censor",
            Process::Death => "death",
        }
    }

    pub fn parse(s: &str) -> Option<Process> {
        match s {
            "cov_monitor" | "l" | "cov" => Some(Process::Cov),
            "trt_monitor" | "a" | "trt" => Some(Process::Trt),
            "censor" | "c" => Some(Process::Censor),
            "death" | "d" => Some(Process::Death),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mark {
    Trt(Label),
    Cov(Vec<f64>),
    Censor,
    Death,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub mark: Mark,
}

impl EventRecord {
    pub fn process(&self) -> Process {
        match self.mark {
            Mark::Trt(_) => Process::Trt,
            Mark::Cov(_) => Process::Cov,
            Mark::Censor => Process::Censor,
            Mark::Death => Process::Death,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.mark, Mark::Censor | Mark::Death)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservedPath {
    pub subject_id: u64,
    pub l0: Vec<f64>,
    pub a0: Label,
    pub l_init: Vec<f64>,
    pub tau: f64,
    pub events: Vec<EventRecord>,
}

impl ObservedPath {
    /// Builds a path and checks its invariants.
    pub fn new(
        subject_id: u64,
        l0: Vec<f64>,
        a0: Label,
        l_init: Vec<f64>,
        tau: f64,
        events: Vec<EventRecord>,
    ) -> Result<Self> {
        let p = ObservedPath { subject_id, l0, a0, l_init, tau, events };
        validate_path(&p)?;
        Ok(p)
    }

    pub fn terminal(&self) -> Option<&EventRecord> {
        self.events.last().filter(|e| e.is_terminal())
    }

    /// Last time the subject is under observation.
    pub fn end_time(&self) -> f64 {
        self.terminal().map_or(self.tau, |e| e.time)
    }

    /// Y = N^d(tau).
    pub fn outcome(&self) -> f64 {
        match self.terminal() {
            Some(EventRecord { mark: Mark::Death, .. }) => 1.0,
            _ => 0.0,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self.terminal(), Some(EventRecord { mark: Mark::Censor, .. }))
    }
}

/// Checks ordering, range and absorption of a path.
pub fn validate_path(path: &ObservedPath) -> Result<()> {
    let subject = path.subject_id;
    let mut prev: Option<f64> = None;
    let mut terminal_seen = false;
    for e in &path.events {
        let time = e.time;
        if !(time > 0.0 && time <= path.tau) || !time.is_finite() {
            return Err(Error::OutOfRange { subject, time, tau: path.tau });
        }
        if terminal_seen {
            return Err(Error::PostTerminalEvent { subject, time });
        }
        if let Some(p) = prev {
            if time == p {
                return Err(Error::Tie { subject, time });
            }
            if time < p {
                return Err(Error::Unordered { subject, time });
            }
        }
        prev = Some(time);
        terminal_seen = e.is_terminal();
    }
    Ok(())
}

/// Sorted union of event times with the subjects that jump at each time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PooledTimeGrid {
    pub times: Vec<f64>,
    pub subjects: Vec<Vec<usize>>,
}

pub fn merge_time_grid(paths: &[ObservedPath]) -> PooledTimeGrid {
    let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in paths.iter().enumerate() {
        for e in &p.events {
            map.entry(e.time.to_bits()).or_default().push(i);
        }
    }
    // Positive finite floats order like their bit patterns.
    let (times, subjects) = map.into_iter().map(|(b, s)| (f64::from_bits(b), s)).unzip();
    PooledTimeGrid { times, subjects }
}

/// Left-limit history F_{t-} of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct HistorySnapshot {
    pub t: f64,
    pub l0: Vec<f64>,
    pub a0: Label,
    pub a_current: Label,
    pub l_current: Vec<f64>,
    pub n_a: u32,
    pub n_l: u32,
    pub time_since_last_trt: f64,
    pub time_since_last_cov: f64,
    pub alive: bool,
    pub uncensored: bool,
}

/// Incremental replay of a path. `snapshot(t)` must be called with
/// nondecreasing `t` interleaved with `apply` of the events in order.
#[derive(Clone, Debug)]
pub struct Replay {
    pub(crate) a0: Label,
    pub(crate) a_current: Label,
    pub(crate) l_current: Vec<f64>,
    pub(crate) n_a: u32,
    pub(crate) n_l: u32,
    last_trt: f64,
    last_cov: f64,
    alive: bool,
    uncensored: bool,
}

impl Replay {
    pub fn new(path: &ObservedPath) -> Self {
        Replay::with_a0(path, path.a0)
    }

    pub fn with_a0(path: &ObservedPath, a0: Label) -> Self {
        Replay {
            a0,
            a_current: a0,
            l_current: path.l_init.clone(),
            n_a: 0,
            n_l: 0,
            last_trt: 0.0,
            last_cov: 0.0,
            alive: true,
            uncensored: true,
        }
    }

    /// Applies an event; `a_override` replaces the recorded treatment value.
    pub fn apply(&mut self, e: &EventRecord, a_override: Option<Label>) {
        match &e.mark {
            Mark::Trt(a) => {
                self.a_current = a_override.unwrap_or(*a);
                self.n_a += 1;
                self.last_trt = e.time;
            }
            Mark::Cov(l) => {
                self.l_current.clone_from(l);
                self.n_l += 1;
                self.last_cov = e.time;
            }
            Mark::Censor => self.uncensored = false,
            Mark::Death => self.alive = false,
        }
    }

    pub fn snapshot(&self, path: &ObservedPath, t: f64) -> HistorySnapshot {
        HistorySnapshot {
            t,
            l0: path.l0.clone(),
            a0: self.a0,
            a_current: self.a_current,
            l_current: self.l_current.clone(),
            n_a: self.n_a,
            n_l: self.n_l,
            time_since_last_trt: t - self.last_trt,
            time_since_last_cov: t - self.last_cov,
            alive: self.alive,
            uncensored: self.uncensored,
        }
    }
}

/// Snapshot at time zero, before the baseline treatment is assigned.
pub fn baseline_snapshot(path: &ObservedPath) -> HistorySnapshot {
    let mut s = Replay::new(path).snapshot(path, 0.0);
    s.a_current = 0;
    s
}

/// Left-limit state: all events strictly before `t`.
pub fn state_at(path: &ObservedPath, t: f64) -> HistorySnapshot {
    let mut r = Replay::new(path);
    for e in path.events.iter().take_while(|e| e.time < t) {
        r.apply(e, None);
    }
    r.snapshot(path, t)
}

/// Treatment rule of an intervention. Censoring is always prevented.
#[derive(Clone)]
pub enum Rule {
    Static(Label),
    Dynamic(Arc<dyn Fn(&HistorySnapshot) -> Label + Send + Sync>),
}

#[derive(Clone)]
pub struct Intervention {
    pub name: String,
    pub rule: Rule,
}

impl std::fmt::Debug for Intervention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Intervention({})", self.name)
    }
}

impl Intervention {
    pub fn static_rule(a: Label) -> Self {
        Intervention { name: format!("static_{a}"), rule: Rule::Static(a) }
    }

    pub fn dynamic<F>(name: &str, f: F) -> Self
    where
        F: Fn(&HistorySnapshot) -> Label + Send + Sync + 'static,
    {
        Intervention { name: name.to_string(), rule: Rule::Dynamic(Arc::new(f)) }
    }

    pub fn apply(&self, snap: &HistorySnapshot) -> Label {
        match &self.rule {
            Rule::Static(a) => *a,
            Rule::Dynamic(f) => f(snap),
        }
    }

    /// Parses `static_0`, `static_1`, `a1`, `0`, or a named dynamic rule.
    ///
    /// `start_when_l`: start treatment at the first monitoring time with
    /// `l_current = 1` and never stop.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static_0" | "a0" | "0" => Ok(Intervention::static_rule(0)),
            "static_1" | "a1" | "1" => Ok(Intervention::static_rule(1)),
            "start_when_l" => Ok(Intervention::dynamic("start_when_l", |s| {
                let l = s.l_current.first().copied().unwrap_or(0.0);
                if s.a_current == 1 || l >= 0.5 {
                    1
                } else {
                    0
                }
            })),
            _ => Err(Error::Input(format!("unknown intervention `{s}`"))),
        }
    }
}

/// Which increment is being evaluated when a regression carries jump
/// indicators (`d_l`, `d_a`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    None,
    Cov,
    Trt,
}

#[derive(Clone, Debug, PartialEq)]
enum Factor {
    One,
    L0(usize),
    L0Eq(usize, f64),
    A0,
    ACurrent,
    LCurrent(usize),
    NA,
    NL,
    T,
    TScaled,
    TScaledSq,
    TslTrt,
    TslCov,
    DeltaL,
    DeltaA,
}

fn parse_index(s: &str, base: &str) -> Option<usize> {
    if s == base {
        return Some(0);
    }
    let rest = s.strip_prefix(base)?.strip_prefix('[')?.strip_suffix(']')?;
    rest.parse().ok()
}

impl Factor {
    fn parse(s: &str) -> Option<Factor> {
        Some(match s {
            "1" => Factor::One,
            "a0" => Factor::A0,
            "a_current" => Factor::ACurrent,
            "n_a" => Factor::NA,
            "n_l" => Factor::NL,
            "t" => Factor::T,
            "t/tau" => Factor::TScaled,
            "(t/tau)^2" => Factor::TScaledSq,
            "tsl_trt/tau" => Factor::TslTrt,
            "tsl_cov/tau" => Factor::TslCov,
            "d_l" => Factor::DeltaL,
            "d_a" => Factor::DeltaA,
            _ => {
                if let Some((lhs, v)) = s.split_once('=') {
                    let j = parse_index(lhs, "l0")?;
                    return v.parse().ok().map(|v| Factor::L0Eq(j, v));
                }
                if let Some(j) = parse_index(s, "l0") {
                    return Some(Factor::L0(j));
                }
                return parse_index(s, "l_current").map(Factor::LCurrent);
            }
        })
    }

    fn eval(&self, s: &HistorySnapshot, tau: f64, b: Branch) -> f64 {
        let get = |v: &[f64], j: usize| v.get(j).copied().unwrap_or(0.0);
        match self {
            Factor::One => 1.0,
            Factor::L0(j) => get(&s.l0, *j),
            Factor::L0Eq(j, v) => f64::from(get(&s.l0, *j) == *v),
            Factor::A0 => f64::from(s.a0),
            Factor::ACurrent => f64::from(s.a_current),
            Factor::LCurrent(j) => get(&s.l_current, *j),
            Factor::NA => f64::from(s.n_a),
            Factor::NL => f64::from(s.n_l),
            Factor::T => s.t,
            Factor::TScaled => s.t / tau,
            Factor::TScaledSq => (s.t / tau).powi(2),
            Factor::TslTrt => s.time_since_last_trt / tau,
            Factor::TslCov => s.time_since_last_cov / tau,
            Factor::DeltaL => f64::from(b == Branch::Cov),
            Factor::DeltaA => f64::from(b == Branch::Trt),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Feature {
    name: String,
    factors: Vec<Factor>,
}

/// Named list of design columns. Column names are products of factors
/// joined by `*`, e.g. `a0*l_current`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    features: Vec<Feature>,
}

impl FeatureSpec {
    pub fn new(name: &str, columns: &[&str]) -> Result<Self> {
        let owned: Vec<String> = columns.iter().map(|s| s.to_string()).collect();
        FeatureSpec::from_names(name, &owned)
    }

    pub fn from_names(name: &str, columns: &[String]) -> Result<Self> {
        let mut features = Vec::with_capacity(columns.len());
        for c in columns {
            let factors = c
                .split('*')
                .map(|f| Factor::parse(f.trim()).ok_or_else(|| Error::UnknownFeature(c.clone())))
                .collect::<Result<Vec<_>>>()?;
            features.push(Feature { name: c.clone(), factors });
        }
        Ok(FeatureSpec { name: name.to_string(), features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn columns(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    /// True when some column depends on the jump indicators.
    pub fn uses_branch(&self) -> bool {
        self.features
            .iter()
            .any(|f| f.factors.iter().any(|x| matches!(x, Factor::DeltaL | Factor::DeltaA)))
    }

    pub fn eval_into(&self, s: &HistorySnapshot, tau: f64, b: Branch, out: &mut Vec<f64>) {
        for f in &self.features {
            out.push(f.factors.iter().map(|x| x.eval(s, tau, b)).product());
        }
    }

    /// Same columns with every factor listed in `drop` removed.
    pub fn without(&self, name: &str, drop: &[&str]) -> Result<Self> {
        let keep: Vec<String> = self
            .columns()
            .into_iter()
            .filter(|c| !c.split('*').any(|f| drop.contains(&f.trim())))
            .collect();
        FeatureSpec::from_names(name, &keep)
    }

    /// `[1, l0 one-hot (first level dropped), a0, a_current, l_current, n_a,
    /// n_l, t/tau, tsl_trt/tau]`; 13 columns for six baseline levels.
    pub fn default_spec(l0_levels: &[f64]) -> Self {
        let mut cols = vec!["1".to_string()];
        for v in l0_levels.iter().skip(1) {
            cols.push(format!("l0={v}"));
        }
        for c in ["a0", "a_current", "l_current", "n_a", "n_l", "t/tau", "tsl_trt/tau"] {
            cols.push(c.to_string());
        }
        FeatureSpec::from_names("default", &cols).expect("static names")
    }

    pub fn intercept() -> Self {
        FeatureSpec::new("intercept", &["1"]).expect("static names")
    }

    /// Saturated over the reachable (a0, a_current, l_current) cells of an
    /// absorbing binary treatment.
    pub fn hazard_correct() -> Self {
        FeatureSpec::new(
            "hazard_correct",
            &["1", "a0", "a_current", "l_current", "a0*l_current", "a_current*l_current"],
        )
        .expect("static names")
    }

    pub fn pi_correct() -> Self {
        FeatureSpec::new("pi_correct", &["1", "a_current", "l_current"]).expect("static names")
    }

    pub fn pi0_correct() -> Self {
        FeatureSpec::new("pi0_correct", &["1", "l0"]).expect("static names")
    }

    pub fn z_correct() -> Self {
        FeatureSpec::new(
            "z_correct",
            &[
                "1",
                "a0",
                "a_current",
                "l_current",
                "a0*l_current",
                "t/tau",
                "(t/tau)^2",
                "l_current*t/tau",
                "d_l",
                "d_l*l_current",
                "d_l*t/tau",
                "d_a",
                "d_a*l_current",
                "d_a*a_current",
            ],
        )
        .expect("static names")
    }

    /// Iterated-regression spec with every time-varying subject variable
    /// removed.
    pub fn z_misspecified() -> Self {
        FeatureSpec::new("z_misspecified", &["1", "l0", "a0", "t/tau", "d_l", "d_a"])
            .expect("static names")
    }

    pub fn preset(name: &str, l0_levels: &[f64]) -> Result<Self> {
        Ok(match name {
            "default" => FeatureSpec::default_spec(l0_levels),
            "intercept" => FeatureSpec::intercept(),
            "hazard_correct" => FeatureSpec::hazard_correct(),
            "pi_correct" => FeatureSpec::pi_correct(),
            "pi0_correct" => FeatureSpec::pi0_correct(),
            "z_correct" => FeatureSpec::z_correct(),
            "z_misspecified" => FeatureSpec::z_misspecified(),
            _ => return Err(Error::UnknownFeature(name.to_string())),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureSpecRepr {
    name: String,
    columns: Vec<String>,
}

impl Serialize for FeatureSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FeatureSpecRepr { name: self.name.clone(), columns: self.columns() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = FeatureSpecRepr::deserialize(d)?;
        FeatureSpec::from_names(&r.name, &r.columns).map_err(serde::de::Error::custom)
    }
}

/// Feature row of a snapshot.
pub fn features(snapshot: &HistorySnapshot, spec: &FeatureSpec, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.len());
    spec.eval_into(snapshot, tau, Branch::None, &mut out);
    out
}

/// Sub-tick offsets of the day grid, in within-day order.
pub const SUBTICKS: [(f64, Process); 4] = [
    (0.2, Process::Cov),
    (0.4, Process::Trt),
    (0.6, Process::Censor),
    (0.8, Process::Death),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tick {
    pub time: f64,
    /// Bit set of processes that may jump at this tick.
    pub mask: u8,
}

impl Tick {
    pub fn allows(&self, p: Process) -> bool {
        self.mask & p.bit() != 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TickSchedule {
    /// Day `k` carries ticks `k + 0.2, k + 0.4, k + 0.6, k + 0.8` for
    /// covariate monitoring, treatment monitoring, censoring and death.
    DaySubticks { days: u32 },
    /// Observed event times; every process may jump at every tick.
    Pooled { times: Vec<f64> },
    /// Arbitrary ticks with their own process masks.
    Explicit { ticks: Vec<Tick> },
}

impl TickSchedule {
    /// Day grid when every event sits on its process's sub-tick, else the
    /// pooled grid.
    pub fn infer(paths: &[ObservedPath]) -> TickSchedule {
        let tau = paths.first().map_or(0.0, |p| p.tau);
        let integral = tau > 0.0 && tau.fract() == 0.0 && paths.iter().all(|p| p.tau == tau);
        let on_grid = paths.iter().all(|p| {
            p.events.iter().all(|e| {
                let off = SUBTICKS.iter().find(|(_, q)| *q == e.process()).map(|(o, _)| *o);
                let day = e.time.floor();
                off.is_some_and(|o| ((day + o) - e.time).abs() < TIME_EPS)
            })
        });
        if integral && on_grid {
            TickSchedule::DaySubticks { days: tau as u32 }
        } else {
            TickSchedule::Pooled { times: merge_time_grid(paths).times }
        }
    }

    /// Ticks at or before `end`.
    pub fn ticks_until(&self, end: f64) -> Vec<Tick> {
        match self {
            TickSchedule::DaySubticks { days } => {
                let mut out = Vec::with_capacity(*days as usize * 4);
                'outer: for k in 0..*days {
                    for (off, p) in SUBTICKS {
                        let time = f64::from(k) + off;
                        if time > end + TIME_EPS {
                            break 'outer;
                        }
                        out.push(Tick { time, mask: p.bit() });
                    }
                }
                out
            }
            TickSchedule::Pooled { times } => times
                .iter()
                .take_while(|t| **t <= end + TIME_EPS)
                .map(|&time| Tick { time, mask: 0b1111 })
                .collect(),
            TickSchedule::Explicit { ticks } => {
                ticks.iter().take_while(|t| t.time <= end + TIME_EPS).copied().collect()
            }
        }
    }

    pub fn matches(a: f64, b: f64) -> bool {
        (a - b).abs() < TIME_EPS
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Writes the long-format CSV.
///
/// Each subject contributes a `baseline` row (time 0, `a_value` = A_0,
/// `l_value_*` = l0), an `initial` row (time 0, `l_value_*` = covariate value
/// before the first monitoring; omitted when empty), then one row per event.
pub fn write_csv<W: Write>(paths: &[ObservedPath], w: W) -> Result<()> {
    let width = paths
        .iter()
        .flat_map(|p| {
            let ev = p.events.iter().map(|e| match &e.mark {
                Mark::Cov(l) => l.len(),
                _ => 0,
            });
            ev.chain([p.l0.len(), p.l_init.len()])
        })
        .max()
        .unwrap_or(1)
        .max(1);
    let mut wtr = csv::WriterBuilder::new().flexible(false).from_writer(w);
    let mut header = vec!["subject_id".to_string(), "time".into(), "kind".into(), "a_value".into()];
    header.extend((1..=width).map(|j| format!("l_value_{j}")));
    wtr.write_record(&header)?;
    let row = |id: u64, time: String, kind: &str, a: String, l: &[f64]| {
        let mut r = vec![id.to_string(), time, kind.to_string(), a];
        r.extend(l.iter().map(|x| fmt_f64(*x)));
        r.resize(4 + width, String::new());
        r
    };
    for p in paths {
        wtr.write_record(row(p.subject_id, "0".into(), "baseline", p.a0.to_string(), &p.l0))?;
        if !p.l_init.is_empty() {
            wtr.write_record(row(p.subject_id, "0".into(), "initial", String::new(), &p.l_init))?;
        }
        for e in &p.events {
            let t = fmt_f64(e.time);
            let r = match &e.mark {
                Mark::Trt(a) => row(p.subject_id, t, "trt_monitor", a.to_string(), &[]),
                Mark::Cov(l) => row(p.subject_id, t, "cov_monitor", String::new(), l),
                Mark::Censor => row(p.subject_id, t, "censor", String::new(), &[]),
                Mark::Death => row(p.subject_id, t, "death", String::new(), &[]),
            };
            wtr.write_record(r)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the long-format CSV written by [`write_csv`]. Subjects keep file
/// order; rows of one subject must be contiguous.
pub fn read_csv<R: Read>(r: R, tau: f64) -> Result<Vec<ObservedPath>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.len() < 5 || &headers[0] != "subject_id" || &headers[2] != "kind" {
        return Err(Error::Input("unexpected CSV header".into()));
    }
    let mut out: Vec<ObservedPath> = Vec::new();
    let mut current: Option<ObservedPath> = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Input(format!("row {}: {what}", line + 2));
        let id: u64 = rec[0].parse().map_err(|_| bad("subject_id"))?;
        let time: f64 = rec[1].parse().map_err(|_| bad("time"))?;
        let kind = &rec[2];
        let ls: Vec<f64> = rec
            .iter()
            .skip(4)
            .take_while(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| bad("l_value")))
            .collect::<Result<_>>()?;
        let a = || rec[3].parse::<Label>().map_err(|_| bad("a_value"));
        if kind == "baseline" {
            if let Some(p) = current.take() {
                validate_path(&p)?;
                out.push(p);
            }
            if out.iter().any(|p| p.subject_id == id) {
                return Err(bad("subject rows not contiguous"));
            }
            current = Some(ObservedPath {
                subject_id: id,
                l0: ls,
                a0: a()?,
                l_init: Vec::new(),
                tau,
                events: Vec::new(),
            });
            continue;
        }
        let p = current.as_mut().filter(|p| p.subject_id == id).ok_or_else(|| bad("missing baseline row"))?;
        let mark = match kind {
            "initial" => {
                p.l_init = ls;
                continue;
            }
            "trt_monitor" => Mark::Trt(a()?),
            "cov_monitor" => Mark::Cov(ls),
            "censor" => Mark::Censor,
            "death" => Mark::Death,
            other => return Err(bad(&format!("unknown kind `{other}`"))),
        };
        p.events.push(EventRecord { time, mark });
    }
    if let Some(p) = current.take() {
        validate_path(&p)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(time: f64, mark: Mark) -> EventRecord {
        EventRecord { time, mark }
    }

    fn path(events: Vec<EventRecord>) -> ObservedPath {
        ObservedPath { subject_id: 7, l0: vec![3.0], a0: 0, l_init: vec![0.0], tau: 10.0, events }
    }

    #[test]
    fn validation_errors() {
        assert!(validate_path(&path(vec![])).is_ok());
        let p = path(vec![ev(3.0, Mark::Censor), ev(1.0, Mark::Death)]);
        assert!(matches!(validate_path(&p), Err(Error::Unordered { .. }) | Err(Error::PostTerminalEvent { .. })));
        let p = path(vec![ev(1.0, Mark::Trt(1)), ev(1.0, Mark::Cov(vec![1.0]))]);
        assert!(matches!(validate_path(&p), Err(Error::Tie { .. })));
        let p = path(vec![ev(5.0, Mark::Death), ev(6.0, Mark::Cov(vec![1.0]))]);
        assert!(matches!(validate_path(&p), Err(Error::PostTerminalEvent { .. })));
        let p = path(vec![ev(0.0, Mark::Trt(1))]);
        assert!(matches!(validate_path(&p), Err(Error::OutOfRange { .. })));
        let p = path(vec![ev(10.5, Mark::Trt(1))]);
        assert!(matches!(validate_path(&p), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn grid_union() {
        assert!(merge_time_grid(&[]).times.is_empty());
        let a = path(vec![ev(1.0, Mark::Trt(1)), ev(3.0, Mark::Death)]);
        let b = path(vec![ev(2.0, Mark::Trt(1)), ev(3.0, Mark::Censor)]);
        let g = merge_time_grid(&[a, b]);
        assert_eq!(g.times, vec![1.0, 2.0, 3.0]);
        assert_eq!(g.subjects[2], vec![0, 1]);
        let c = path(vec![ev(0.5, Mark::Trt(0)), ev(2.25, Mark::Death)]);
        assert_eq!(merge_time_grid(&[c]).times, vec![0.5, 2.25]);
    }

    #[test]
    fn left_limit_replay() {
        let p = path(vec![ev(2.0, Mark::Trt(1)), ev(4.0, Mark::Cov(vec![1.0]))]);
        let s = state_at(&p, 1.0);
        assert_eq!((s.n_a, s.n_l, s.a_current), (0, 0, 0));
        assert_eq!(s.l_current, vec![0.0]);
        let s = state_at(&p, 2.0);
        assert_eq!(s.n_a, 0);
        let s = state_at(&p, 3.0);
        assert_eq!((s.a_current, s.n_a), (1, 1));
        assert_eq!(s.time_since_last_trt, 1.0);
        let s = state_at(&p, 4.0 + 1e-9);
        assert_eq!(s.l_current, vec![1.0]);
    }

    #[test]
    fn feature_rows() {
        let p = path(vec![ev(2.0, Mark::Cov(vec![1.0]))]);
        let s = state_at(&p, 0.5);
        assert_eq!(features(&s, &FeatureSpec::new("x", &["n_a"]).unwrap(), 10.0), vec![0.0]);
        let s = state_at(&p, 4.0);
        let spec = FeatureSpec::new("x", &["t", "l_current"]).unwrap();
        assert_eq!(features(&s, &spec, 10.0), vec![4.0, 1.0]);
        let levels: Vec<f64> = (1..=6).map(f64::from).collect();
        let d = FeatureSpec::default_spec(&levels);
        assert_eq!(features(&s, &d, 10.0).len(), 13);
        let row = features(&s, &d, 10.0);
        assert_eq!(row[2], 1.0); // l0 = 3
        assert!(matches!(FeatureSpec::new("x", &["bogus"]), Err(Error::UnknownFeature(_))));
        let prod = FeatureSpec::new("x", &["l0*l_current", "l0[0]=3"]).unwrap();
        assert_eq!(features(&s, &prod, 10.0), vec![3.0, 1.0]);
    }

    #[test]
    fn csv_round_trip() {
        let a = ObservedPath::new(
            1,
            vec![4.0],
            1,
            vec![1.0],
            30.0,
            vec![
                ev(0.2, Mark::Cov(vec![0.0])),
                ev(1.4000000000000001, Mark::Trt(1)),
                ev(29.8, Mark::Death),
            ],
        )
        .unwrap();
        let b = ObservedPath::new(2, vec![1.0], 0, vec![], 30.0, vec![ev(3.6, Mark::Censor)]).unwrap();
        let mut buf = Vec::new();
        write_csv(&[a.clone(), b.clone()], &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), 30.0).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn schedule_inference() {
        let a = ObservedPath::new(1, vec![1.0], 0, vec![0.0], 3.0, vec![ev(1.2, Mark::Cov(vec![1.0]))]).unwrap();
        let s = TickSchedule::infer(&[a.clone()]);
        assert_eq!(s, TickSchedule::DaySubticks { days: 3 });
        assert_eq!(s.ticks_until(3.0).len(), 12);
        assert_eq!(s.ticks_until(1.6).len(), 7);
        let b = ObservedPath::new(1, vec![1.0], 0, vec![0.0], 3.0, vec![ev(1.3, Mark::Cov(vec![1.0]))]).unwrap();
        assert!(matches!(TickSchedule::infer(&[a, b]), TickSchedule::Pooled { .. }));
    }
}
