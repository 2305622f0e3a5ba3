use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use metalab_core::adaptation::AdaptationConfig;
use metalab_core::bounds::{
    bound_sweep, maurer_bound, q_bound, theorem2_bound_emp, theorem2_bound_q, BoundResult,
    SgmConstants, StabilityConstants,
};
use metalab_core::meta::{reptile_alignment_diagnostic, Method};
use metalab_core::rng::derive_seed;
use metalab_core::tasks::{sample_episode, SamplingStrategy, Split};
use metalab_core::tensor::{Head, LossSpec, NetworkSpec, ParamVector};
use metalab_core::{Error, Result};

use crate::aggregate::{aggregate, aggregate_csv};
use crate::config::{parse_budget, ExperimentConfig, Labeler};
use crate::run::{evaluate_split, results_csv, run_experiment, write_atomically, RunRecord};
use crate::sweep::{bounds_csv, sweep_shots};

#[derive(Parser, Debug)]
#[command(name = "metalab", version, about = "Meta-learning under a labeling budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train and evaluate every seed; writes the results table.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Directory receiving one parameter file per seed.
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
    /// Score saved parameters on validation and test tasks.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Parameter file written by `train --save-params`.
        #[arg(long)]
        params: PathBuf,
    },
    /// Evaluate a stability bound, or tabulate the meta-level bounds over grids.
    Bounds(BoundsArgs),
    /// Run a grid of support-shot allocations and pick one by validation
    /// accuracy.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        shots_grid: Vec<usize>,
    },
    /// Cosine between the Reptile direction and the empirical meta-gradient
    /// for a range of inner step sizes.
    DiagnoseReptile(DiagnoseArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON experiment file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// `synth<N>`, `rings<N>`, `fedsynth` or a dataset CSV path.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    query_shots: Option<usize>,
    #[arg(long)]
    eval_shots: Option<usize>,
    #[arg(long)]
    eval_query_shots: Option<usize>,
    /// Label count or `unlimited`.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long, action = clap::ArgAction::Set)]
    budget_counts_query: Option<bool>,
    #[arg(long)]
    task_limit: Option<usize>,
    #[arg(long, value_parser = parse_labeler)]
    labeler: Option<Labeler>,
    #[arg(long)]
    labels_per_task: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    acquisition_period: Option<usize>,
    #[arg(long)]
    outer_steps: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    eval_inner_steps: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    outer_lr: Option<f64>,
    #[arg(long)]
    meta_batch: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    eval_tasks: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_labeler(s: &str) -> std::result::Result<Labeler, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        macro_rules! set_opt {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = Some(v.clone());
                }
            )*};
        }
        set!(method, dataset, ways, shots, budget_counts_query, labeler, acquisition_period);
        set!(hidden, seeds, eval_tasks, data_seed);
        set_opt!(query_shots, eval_shots, eval_query_shots, task_limit, labels_per_task, clusters);
        set_opt!(outer_steps, inner_steps, eval_inner_steps, inner_lr, outer_lr, meta_batch, out);
        if let Some(b) = &self.budget {
            c.budget = parse_budget(b)?;
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Maurer,
    Q,
    #[value(name = "theorem2-q")]
    Theorem2Q,
    #[value(name = "theorem2-emp")]
    Theorem2Emp,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long, value_enum, default_value = "theorem2-q")]
    kind: KindArg,
    /// Number of meta-training tasks.
    #[arg(long)]
    n: Option<usize>,
    /// Examples per task.
    #[arg(long)]
    m: Option<usize>,
    /// Bound on the loss.
    #[arg(long = "M", default_value_t = 1.0)]
    loss_bound: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long)]
    beta_q: Option<f64>,
    #[arg(long)]
    beta_outer: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    beta_inner: f64,
    /// Inner Lipschitz constant.
    #[arg(long = "L", default_value_t = 1.0)]
    lipschitz: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long = "T", default_value_t = 1.0)]
    steps: f64,
    #[arg(long = "L-outer", default_value_t = 1.0)]
    lipschitz_outer: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma_outer: f64,
    #[arg(long, default_value_t = 1.0)]
    c_outer: f64,
    #[arg(long = "T-outer", default_value_t = 1.0)]
    steps_outer: f64,
    /// Task counts for a meta-level bound table.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    m_grid: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long, default_value = "synth5")]
    dataset: String,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    inner_steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
    inner_lrs: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Fixed-point rendering with at most nine decimals.
pub fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let s = format!("{v:.9}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_)
        | Error::Config { .. }
        | Error::Parse { .. }
        | Error::Domain(_)
        | Error::Budget { .. } => 1,
        _ => 2,
    }
}

fn emit(out: &mut dyn Write, bytes: &[u8]) -> Result<()> {
    out.write_all(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn report_failures(err: &mut dyn Write, records: &[RunRecord], failures: &[(u64, String)]) -> Result<()> {
    for (seed, msg) in failures {
        writeln!(err, "seed {seed} failed: {msg}").map_err(|e| Error::Io(e.to_string()))?;
    }
    if !records.is_empty() && failures.len() * 2 == records.len() {
        return Err(Error::Numerical {
            step: 0,
            detail: "every seed failed".into(),
        });
    }
    Ok(())
}

fn finish_run(out: &mut dyn Write, cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<()> {
    if cfg.out.is_some() {
        emit(out, &aggregate_csv(&aggregate(records)?)?)
    } else {
        emit(out, &results_csv(records)?)
    }
}

fn train(run: &RunArgs, save: Option<&PathBuf>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = run.resolve()?;
    let outcome = run_experiment(&cfg)?;
    if let Some(dir) = save {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        for r in &outcome.runs {
            if let Some(p) = &r.params {
                let json = serde_json::to_vec(p).map_err(|e| Error::Io(e.to_string()))?;
                write_atomically(&dir.join(format!("params-seed{}.json", r.seed)), &json)?;
            }
        }
    }
    let failures: Vec<(u64, String)> = outcome
        .runs
        .iter()
        .filter_map(|r| r.error.clone().map(|e| (r.seed, e)))
        .collect();
    finish_run(out, &cfg, &outcome.records)?;
    report_failures(err, &outcome.records, &failures)
}

fn eval(run: &RunArgs, params: &PathBuf, out: &mut dyn Write) -> Result<()> {
    let cfg = run.resolve()?;
    let (source, spec) = cfg.validate()?;
    let text = std::fs::read_to_string(params)
        .map_err(|e| Error::Io(format!("{}: {e}", params.display())))?;
    let theta: ParamVector = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", params.display())))?;
    spec.check_params(&theta)?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        for split in [Split::Validation, Split::Test] {
            let (acc, n) = evaluate_split(&cfg, &spec, &source, &theta, split, seed)?;
            records.push(RunRecord {
                benchmark_id: cfg.benchmark_id(),
                method: cfg.method.name().into(),
                labeler: cfg.labeler.name().into(),
                seed,
                split: split.name().into(),
                accuracy: acc,
                tasks_evaluated: n,
                labels_spent: 0,
                outer_steps: 0,
            });
        }
    }
    if let Some(path) = &cfg.out {
        write_atomically(path, &results_csv(&records)?)?;
    }
    finish_run(out, &cfg, &records)
}

fn sweep(run: &RunArgs, grid: &[usize], out: &mut dyn Write) -> Result<()> {
    let cfg = run.resolve()?;
    let s = sweep_shots(&cfg, grid)?;
    let mut text = String::from("shots,validation_mean,validation_ci95,test_mean,test_ci95\n");
    let cell = |v: Option<f64>| v.map(format_value).unwrap_or_default();
    for p in &s.points {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            p.shots,
            cell(p.validation.mean),
            cell(p.validation.ci95),
            cell(p.test.mean),
            cell(p.test.ci95)
        ));
    }
    match s.best_shots {
        Some(k) => text.push_str(&format!("# best shots by validation accuracy: {k}\n")),
        None => text.push_str("# no shot setting produced a result\n"),
    }
    emit(out, text.as_bytes())
}

fn bounds(a: &BoundsArgs, out: &mut dyn Write) -> Result<()> {
    let need = |v: Option<usize>, flag: &str| {
        v.ok_or_else(|| Error::Validation(format!("--{flag} is required for this bound")))
    };
    let consts = StabilityConstants {
        inner: SgmConstants::new(a.lipschitz, a.gamma, a.c, a.steps),
        outer: SgmConstants::new(a.lipschitz_outer, a.gamma_outer, a.c_outer, a.steps_outer),
        loss_bound: a.loss_bound,
        delta: a.delta,
    };
    if a.n_grid.is_some() || a.m_grid.is_some() {
        let ns = a.n_grid.clone().ok_or_else(|| Error::Validation("--n-grid is required".into()))?;
        let ms = a.m_grid.clone().ok_or_else(|| Error::Validation("--m-grid is required".into()))?;
        let bytes = bounds_csv(&bound_sweep(&consts, &ns, &ms, a.delta)?)?;
        return match &a.out {
            Some(p) => write_atomically(p, &bytes),
            None => emit(out, &bytes),
        };
    }
    let n = need(a.n, "n")?;
    let r: BoundResult = match a.kind {
        KindArg::Q => {
            let beta = a
                .beta_q
                .ok_or_else(|| Error::Validation("--beta-q is required for the q bound".into()))?;
            q_bound(beta, n, a.loss_bound, a.delta)?
        }
        KindArg::Maurer => {
            let beta = a.beta_outer.ok_or_else(|| {
                Error::Validation("--beta-outer is required for the maurer bound".into())
            })?;
            maurer_bound(beta, a.beta_inner, n, a.loss_bound, a.delta)?
        }
        KindArg::Theorem2Q => theorem2_bound_q(&consts, n, a.delta)?,
        KindArg::Theorem2Emp => theorem2_bound_emp(&consts, n, need(a.m, "m")?, a.delta)?,
    };
    if let Some(p) = &a.out {
        write_atomically(p, &bounds_csv(std::slice::from_ref(&r))?)?;
    }
    emit(out, format!("{}\n", format_value(r.value)).as_bytes())
}

fn diagnose(a: &DiagnoseArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig {
        dataset: a.dataset.clone(),
        ways: a.ways,
        ..Default::default()
    };
    let source = cfg.source()?;
    let spec = NetworkSpec::mlp(source.feature_dim(), &a.hidden, a.ways, Head::LinearLogits)?;
    let episode = sample_episode(
        &source,
        a.ways,
        a.shots,
        0,
        SamplingStrategy::Stratified,
        derive_seed(a.seed, "diagnose", 0),
        None,
    )?;
    let theta = ParamVector::init(&spec, a.seed);
    let mut text = String::from("inner_lr,cosine\n");
    for &lr in &a.inner_lrs {
        let inner = AdaptationConfig::constant(a.inner_steps, lr, LossSpec::cross_entropy());
        let cos = reptile_alignment_diagnostic(&spec, &theta, &episode.support, &inner)?;
        text.push_str(&format!("{lr},{}\n", format_value(cos)));
    }
    emit(out, text.as_bytes())
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for invalid input, 2 for failures during a run.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Train { run, save_params } => train(run, save_params.as_ref(), out, err),
        Command::Eval { run, params } => eval(run, params, out),
        Command::Bounds(a) => bounds(a, out),
        Command::Sweep { run, shots_grid } => sweep(run, shots_grid, out),
        Command::DiagnoseReptile(a) => diagnose(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(0.500000000125), "0.5");
        assert_eq!(format_value(1.0), "1");
        assert_eq!(format_value(0.123456789), "0.123456789");
        assert_eq!(format_value(-0.0000000001), "0");
    }

    #[test]
    fn flags_override_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"method": "reptile", "ways": 3, "budget": 100}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            ways: Some(4),
            budget: Some("unlimited".into()),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!((c.method, c.ways, c.budget), (Method::Reptile, 4, None));
    }
}
