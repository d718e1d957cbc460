//! Replay of recorded data through the controller: classify every sample,
//! solve a counterfactual for the flagged ones, fall back to shutdown when
//! none exists, and account energy and revenue.
//!
//! Each timestamp is an independent snapshot; suggestions are never fed
//! back into later sensor values.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{solve_mode, CounterfactualConfig, CounterfactualResult, Mode, Models};
use crate::dataset::{slice_range, slot_count};
use crate::error::{Error, Result};
use crate::schema::{timestamp_serde, AssetConfig, FeatureId, FeatureVector, CADENCE_SECS};
use crate::solver::SolveStatus;

pub const TIMELINE_FILE: &str = "timeline.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Length of one sample in hours.
pub const SLOT_HOURS: f64 = CADENCE_SECS as f64 / 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AlreadyGood,
    Optimal,
    /// Limit reached with an incumbent; counted as optimized.
    AtLimit,
    Infeasible,
    /// Limit reached without any feasible point; shutdown applies.
    TimeLimited,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub mode: Mode,
    pub counterfactual: CounterfactualConfig,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { mode: Mode::Operator, counterfactual: CounterfactualConfig::default(), jobs: 0 }
    }
}

/// One line of `timeline.csv`. `cf_p` is the suggested power of the
/// selected mode (the operator stage in revenue mode); `rev_p` is only
/// filled in revenue mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    #[serde(with = "timestamp_serde")]
    pub timestamp: NaiveDateTime,
    pub hist_p: f64,
    pub cf_p: f64,
    pub rev_p: Option<f64>,
    pub p_max: f64,
    pub status: Outcome,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRecord {
    pub row: TimelineRow,
    /// Solver output for flagged samples.
    pub result: Option<CounterfactualResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMeta {
    #[serde(with = "timestamp_serde")]
    pub from: NaiveDateTime,
    #[serde(with = "timestamp_serde")]
    pub to: NaiveDateTime,
    pub mode: Mode,
    /// EUR/MWh.
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub meta: ReplayMeta,
    pub records: Vec<ReplayRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub already_good: usize,
    pub optimized: usize,
    pub infeasible: usize,
    pub time_limited: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.already_good + self.optimized + self.infeasible + self.time_limited
    }
}

/// Per-strategy totals. `shutdown` is the recorded power with every
/// flagged sample turned off, the default strategy without the controller.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub historical: f64,
    pub shutdown: f64,
    pub counterfactual: f64,
    pub revenue_driven: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(flatten)]
    pub meta: ReplayMeta,
    /// Cadence slots in `[from, to)`.
    pub slots: u64,
    pub replayed: usize,
    /// Slots without a recorded sample.
    pub missing: u64,
    pub counts: Counts,
    pub at_limit: usize,
    pub max_gap: f64,
    pub energy_mwh: Totals,
    /// Rounded to the cent.
    pub revenue_eur: Totals,
    /// Counterfactual revenue over the shutdown strategy.
    pub gain_eur: f64,
}

fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl Summary {
    pub fn from_rows(meta: &ReplayMeta, rows: &[TimelineRow]) -> Summary {
        let mut counts = Counts::default();
        let mut at_limit = 0;
        let mut max_gap: f64 = 0.0;
        // Sums of kW over slots, in timestamp order.
        let (mut hist, mut shut, mut cf, mut rev) = (0.0, 0.0, 0.0, 0.0);
        let mut has_rev = false;
        for r in rows {
            match r.status {
                Outcome::AlreadyGood => counts.already_good += 1,
                Outcome::Optimal => counts.optimized += 1,
                Outcome::AtLimit => {
                    counts.optimized += 1;
                    at_limit += 1;
                }
                Outcome::Infeasible => counts.infeasible += 1,
                Outcome::TimeLimited => counts.time_limited += 1,
            }
            if let Some(g) = r.gap {
                max_gap = max_gap.max(g);
            }
            hist += r.hist_p;
            if r.status == Outcome::AlreadyGood {
                shut += r.hist_p;
            }
            cf += r.cf_p;
            if let Some(p) = r.rev_p {
                rev += p;
                has_rev = true;
            }
        }
        let mwh = |kw: f64| kw * SLOT_HOURS / 1000.0;
        let energy = Totals {
            historical: mwh(hist),
            shutdown: mwh(shut),
            counterfactual: mwh(cf),
            revenue_driven: has_rev.then(|| mwh(rev)),
        };
        let eur = |e: f64| cents(e * meta.price);
        let revenue = Totals {
            historical: eur(energy.historical),
            shutdown: eur(energy.shutdown),
            counterfactual: eur(energy.counterfactual),
            revenue_driven: energy.revenue_driven.map(eur),
        };
        let slots = slot_count(meta.from, meta.to);
        Summary {
            meta: meta.clone(),
            slots,
            replayed: rows.len(),
            missing: slots.saturating_sub(rows.len() as u64),
            counts,
            at_limit,
            max_gap,
            energy_mwh: energy,
            gain_eur: cents(revenue.counterfactual - revenue.shutdown),
            revenue_eur: revenue,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

impl ReplayReport {
    pub fn rows(&self) -> Vec<TimelineRow> {
        self.records.iter().map(|r| r.row.clone()).collect()
    }

    pub fn summary(&self) -> Summary {
        Summary::from_rows(&self.meta, &self.rows())
    }

    /// Mean `|x_f - x*_f|` over samples with a counterfactual.
    pub fn mean_abs_delta(&self, f: FeatureId) -> Option<f64> {
        let d: Vec<f64> =
            self.records.iter().filter_map(|r| r.result.as_ref()?.deltas.get(&f).map(|v| v.abs())).collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Writes `timeline.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Summary> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join(TIMELINE_FILE))?;
        write_timeline(std::io::BufWriter::new(f), &self.rows())?;
        let summary = self.summary();
        std::fs::write(dir.join(SUMMARY_FILE), summary.to_json()?)?;
        Ok(summary)
    }
}

const TIMELINE_HEADER: [&str; 7] = ["timestamp", "hist_p", "cf_p", "rev_p", "p_max", "status", "gap"];

pub fn write_timeline<W: Write>(out: W, rows: &[TimelineRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TIMELINE_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timeline<R: Read>(input: R) -> Result<Vec<TimelineRow>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(TIMELINE_HEADER) {
        return Err(Error::InvalidData(format!("unexpected timeline header {:?}", r.headers()?)));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn load_timeline(path: impl AsRef<Path>) -> Result<Vec<TimelineRow>> {
    read_timeline(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Replays every recorded sample with `from <= timestamp < to`.
pub fn replay(
    data: &[FeatureVector],
    from: NaiveDateTime,
    to: NaiveDateTime,
    models: &Models,
    assets: &AssetConfig,
    cfg: &ReplayConfig,
) -> Result<ReplayReport> {
    if from >= to {
        return Err(Error::InvalidConfig(format!("empty replay range {from} .. {to}")));
    }
    models.validate()?;
    assets.validate()?;
    cfg.counterfactual.validate()?;
    let samples = slice_range(data, from, to);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    // Indexed collect keeps timestamp order whatever the completion order.
    let records =
        pool.install(|| samples.par_iter().map(|x| replay_one(x, models, assets, cfg)).collect::<Result<Vec<_>>>())?;
    let meta = ReplayMeta { from, to, mode: cfg.mode, price: cfg.counterfactual.revenue.price };
    Ok(ReplayReport { meta, records })
}

fn replay_one(x: &FeatureVector, models: &Models, assets: &AssetConfig, cfg: &ReplayConfig) -> Result<ReplayRecord> {
    let curve = &assets.power_curve;
    let p_max = curve.p_max(x.ws)?;
    let revenue_mode = cfg.mode == Mode::Revenue;
    if models.classifier.classify_sample(x, curve)? == 0 {
        let row = TimelineRow {
            timestamp: x.timestamp,
            hist_p: x.p,
            cf_p: x.p,
            rev_p: revenue_mode.then_some(x.p),
            p_max,
            status: Outcome::AlreadyGood,
            gap: None,
        };
        return Ok(ReplayRecord { row, result: None });
    }
    let r = solve_mode(cfg.mode, x, models, assets, &cfg.counterfactual)?;
    let status = match r.status {
        SolveStatus::Optimal => Outcome::Optimal,
        SolveStatus::FeasibleAtLimit => Outcome::AtLimit,
        SolveStatus::Infeasible => Outcome::Infeasible,
        SolveStatus::LimitNoIncumbent => Outcome::TimeLimited,
        SolveStatus::Unbounded => {
            return Err(Error::Solver(format!("{}: unbounded counterfactual problem", x.timestamp)));
        }
    };
    log::debug!("{}: {:?} in {:.3}s", x.timestamp, r.status, r.solve_time);
    // No counterfactual means the turbine is shut down.
    let (cf_p, rev_p) = if revenue_mode {
        let stage1 = r.stage1.as_ref().and_then(|s| s.power());
        (stage1.unwrap_or(0.0), Some(r.power().or(stage1).unwrap_or(0.0)))
    } else {
        (r.power().unwrap_or(0.0), None)
    };
    let row = TimelineRow {
        timestamp: x.timestamp,
        hist_p: x.p,
        cf_p,
        rev_p,
        p_max,
        status,
        gap: r.status.has_solution().then_some(r.gap),
    };
    Ok(ReplayRecord { row, result: Some(r) })
}
