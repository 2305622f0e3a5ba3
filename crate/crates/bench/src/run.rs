use std::fs;
use std::io::Write;
use std::path::Path;

use metalab_core::active::active_meta_train;
use metalab_core::meta::{meta_eval, meta_train, Regime};
use metalab_core::tasks::{BudgetLedger, Split, TaskSource};
use metalab_core::tensor::{NetworkSpec, ParamVector};
use metalab_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Labeler};

pub const RESULTS_HEADER: &str =
    "benchmark_id,method,labeler,seed,split,accuracy,tasks_evaluated,labels_spent,outer_steps";

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub benchmark_id: String,
    pub method: String,
    pub labeler: String,
    pub seed: u64,
    pub split: String,
    /// NaN when the seed failed.
    pub accuracy: f64,
    pub tasks_evaluated: usize,
    pub labels_spent: usize,
    pub outer_steps: usize,
}

/// Per-seed metadata that does not go into the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    /// Present exactly when the run was budget-limited.
    pub ledger: Option<BudgetLedger>,
    pub tasks_acquired: Option<usize>,
    pub params: Option<ParamVector>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub runs: Vec<SeedRun>,
}

struct Trained {
    params: ParamVector,
    ledger: Option<BudgetLedger>,
    tasks: Option<usize>,
    labels_spent: usize,
    outer_steps: usize,
}

fn train_one(cfg: &ExperimentConfig, spec: &NetworkSpec, source: &TaskSource, seed: u64) -> Result<Trained> {
    let meta = cfg.meta_config();
    match (cfg.budget, cfg.labeler) {
        (Some(budget), Labeler::Active) => {
            let out = active_meta_train(
                spec,
                source,
                budget,
                &meta,
                &cfg.active_config(),
                cfg.budget_counts_query,
                seed,
            )?;
            Ok(Trained {
                params: out.params,
                labels_spent: out.ledger.spent(),
                tasks: Some(out.tasks.len()),
                ledger: Some(out.ledger),
                outer_steps: meta.outer_steps,
            })
        }
        (Some(budget), _) => {
            let ledger = BudgetLedger::new(budget, cfg.task_cost())?
                .counting_query(cfg.budget_counts_query);
            let regime = Regime::Limited {
                ledger,
                task_limit: cfg.task_limit,
            };
            let out = meta_train(spec, &meta, source, regime, seed)?;
            Ok(Trained {
                params: out.params,
                labels_spent: out.labels_spent,
                tasks: out.ledger.as_ref().map(|l| l.spent() / l.per_task().max(1)),
                ledger: out.ledger,
                outer_steps: out.outer_steps,
            })
        }
        (None, _) => {
            let out = meta_train(spec, &meta, source, Regime::Classical, seed)?;
            Ok(Trained {
                params: out.params,
                labels_spent: out.labels_spent,
                tasks: None,
                ledger: out.ledger,
                outer_steps: out.outer_steps,
            })
        }
    }
}

/// Mean accuracy of `params` on a split, with the number of tasks scored.
pub fn evaluate_split(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    source: &TaskSource,
    params: &ParamVector,
    split: Split,
    seed: u64,
) -> Result<(f64, usize)> {
    let ev = meta_eval(
        spec,
        params,
        &source.with_split(split),
        &cfg.eval_meta_config(),
        cfg.eval_tasks,
        seed,
    )?;
    Ok((ev.mean_accuracy, ev.per_task.len()))
}

fn record(cfg: &ExperimentConfig, seed: u64, split: Split) -> RunRecord {
    RunRecord {
        benchmark_id: cfg.benchmark_id(),
        method: cfg.method.name().into(),
        labeler: cfg.labeler.name().into(),
        seed,
        split: split.name().into(),
        accuracy: f64::NAN,
        tasks_evaluated: 0,
        labels_spent: 0,
        outer_steps: 0,
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    source: &TaskSource,
    seed: u64,
) -> (Vec<RunRecord>, SeedRun) {
    let result = train_one(cfg, spec, source, seed).and_then(|t| {
        let mut rows = Vec::with_capacity(2);
        for split in [Split::Validation, Split::Test] {
            let (acc, n) = evaluate_split(cfg, spec, source, &t.params, split, seed)?;
            rows.push(RunRecord {
                accuracy: acc,
                tasks_evaluated: n,
                labels_spent: t.labels_spent,
                outer_steps: t.outer_steps,
                ..record(cfg, seed, split)
            });
        }
        Ok((rows, t))
    });
    match result {
        Ok((rows, t)) => (
            rows,
            SeedRun {
                seed,
                ledger: t.ledger,
                tasks_acquired: t.tasks,
                params: Some(t.params),
                error: None,
            },
        ),
        Err(e) => (
            vec![record(cfg, seed, Split::Validation), record(cfg, seed, Split::Test)],
            SeedRun {
                seed,
                ledger: None,
                tasks_acquired: None,
                params: None,
                error: Some(e.to_string()),
            },
        ),
    }
}

/// Worker pool sized by `METALAB_THREADS`, defaulting to all cores.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("METALAB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Validation(format!("METALAB_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Io(e.to_string()))
}

/// Trains and evaluates every seed. A seed that fails yields NaN rows and
/// does not stop the others. Writes the results table when `out` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (source, spec) = cfg.validate()?;
    let per_seed: Vec<(Vec<RunRecord>, SeedRun)> = thread_pool()?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, &spec, &source, seed))
            .collect()
    });
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for (rows, run) in per_seed {
        records.extend(rows);
        runs.push(run);
    }
    if let Some(path) = &cfg.out {
        write_atomically(path, &results_csv(&records)?)?;
    }
    Ok(ExperimentOutcome { records, runs })
}

pub(crate) fn csv_bytes<T: Serialize>(rows: &[T], header: &str) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    let mut out = Vec::with_capacity(header.len() + 1 + body.len());
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    out.extend(body);
    Ok(out)
}

pub fn results_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    csv_bytes(records, RESULTS_HEADER)
}

pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(tmp, path).map_err(io)
}
