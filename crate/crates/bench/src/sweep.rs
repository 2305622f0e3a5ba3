use metalab_core::bounds::BoundResult;
use metalab_core::{Error, Result};
use serde::Serialize;

use crate::aggregate::{aggregate, AggregateRecord};
use crate::config::ExperimentConfig;
use crate::run::{csv_bytes, run_experiment, RunRecord, SeedRun};

pub const BOUNDS_HEADER: &str =
    "bound_kind,n,m,delta,C,stability_term,concentration_term,inner_term,value";

#[derive(Serialize)]
struct BoundRow<'a> {
    bound_kind: &'a str,
    n: usize,
    m: Option<usize>,
    delta: f64,
    #[serde(rename = "C")]
    c: Option<f64>,
    stability_term: f64,
    concentration_term: f64,
    inner_term: f64,
    value: f64,
}

/// Bounds table; `m` and `C` are blank where a bound has none.
pub fn bounds_csv(rows: &[BoundResult]) -> Result<Vec<u8>> {
    let rows: Vec<BoundRow> = rows
        .iter()
        .map(|r| BoundRow {
            bound_kind: r.kind.name(),
            n: r.n,
            m: r.m,
            delta: r.delta,
            c: r.c,
            stability_term: r.stability_term,
            concentration_term: r.concentration_term,
            inner_term: r.inner_term,
            value: r.value,
        })
        .collect();
    csv_bytes(&rows, BOUNDS_HEADER)
}

/// One grid point of a shot sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub shots: usize,
    pub validation: AggregateRecord,
    pub test: AggregateRecord,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub points: Vec<SweepPoint>,
    /// Shot count with the highest validation mean; ties go to fewer shots.
    pub best_shots: Option<usize>,
}

impl SweepOutcome {
    pub fn best(&self) -> Option<&SweepPoint> {
        self.points.iter().find(|p| Some(p.shots) == self.best_shots)
    }
}

/// Runs the experiment once per support-shot count at the configured
/// budget and selects the allocation by validation accuracy.
pub fn sweep_shots(base: &ExperimentConfig, shots: &[usize]) -> Result<SweepOutcome> {
    if shots.is_empty() {
        return Err(Error::Validation("the shot grid is empty".into()));
    }
    let eval_shots = base.eval_shots.unwrap_or(base.shots);
    let configs: Vec<ExperimentConfig> = shots
        .iter()
        .map(|&k| ExperimentConfig {
            shots: k,
            eval_shots: Some(eval_shots),
            out: None,
            ..base.clone()
        })
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let mut records = Vec::new();
    let mut points = Vec::new();
    for (cfg, &k) in configs.iter().zip(shots) {
        let out = run_experiment(cfg)?;
        let agg = aggregate(&out.records)?;
        let pick = |split: &str| {
            agg.iter()
                .find(|a| a.split == split)
                .cloned()
                .ok_or_else(|| Error::Logic(format!("no {split} rows for {k} shots")))
        };
        points.push(SweepPoint {
            shots: k,
            validation: pick("validation")?,
            test: pick("test")?,
            runs: out.runs,
        });
        records.extend(out.records);
    }
    let mut best: Option<(usize, f64)> = None;
    for p in &points {
        if let Some(v) = p.validation.mean {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((p.shots, v));
            }
        }
    }
    if let Some(path) = &base.out {
        crate::run::write_atomically(path, &crate::run::results_csv(&records)?)?;
    }
    Ok(SweepOutcome {
        records,
        points,
        best_shots: best.map(|b| b.0),
    })
}
