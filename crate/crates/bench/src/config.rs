use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use metalab_core::active::ActiveConfig;
use metalab_core::adaptation::StepSchedule;
use metalab_core::meta::{MetaConfig, Method};
use metalab_core::tasks::{
    load_dataset, SamplingStrategy, SourceKind, SplitFractions, SyntheticParams, TaskSource,
};
use metalab_core::tensor::{Head, NetworkSpec};
use metalab_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// How support labels are chosen for training tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Labeler {
    #[default]
    Random,
    Stratified,
    Active,
}

impl Labeler {
    pub fn name(self) -> &'static str {
        match self {
            Labeler::Random => "random",
            Labeler::Stratified => "stratified",
            Labeler::Active => "active",
        }
    }
}

impl fmt::Display for Labeler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Labeler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Labeler::Random),
            "stratified" => Ok(Labeler::Stratified),
            "active" => Ok(Labeler::Active),
            other => Err(Error::Validation(format!(
                "unknown labeler {other:?} (expected random, stratified or active)"
            ))),
        }
    }
}

/// Parses `unlimited` or a non-negative label count.
pub fn parse_budget(s: &str) -> Result<Option<usize>> {
    if s.eq_ignore_ascii_case("unlimited") {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Validation(format!("budget must be an integer or unlimited, got {s:?}")))
}

/// One benchmark run description. Every field has a default, so a JSON
/// file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `synth<N>`, `rings<N>`, `fedsynth` or a path to a dataset CSV.
    pub dataset: String,
    pub method: Method,
    pub ways: usize,
    pub shots: usize,
    pub query_shots: Option<usize>,
    /// Support shots of evaluation tasks; defaults to `shots`.
    pub eval_shots: Option<usize>,
    pub eval_query_shots: Option<usize>,
    /// Total label budget; `null` selects the classical regime.
    pub budget: Option<usize>,
    pub budget_counts_query: bool,
    /// Cap on the number of unique training tasks.
    pub task_limit: Option<usize>,
    pub labeler: Labeler,
    pub labels_per_task: Option<usize>,
    pub clusters: Option<usize>,
    pub acquisition_period: usize,
    pub outer_steps: Option<usize>,
    pub inner_steps: Option<usize>,
    pub eval_inner_steps: Option<usize>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub meta_batch: Option<usize>,
    pub hidden: Vec<usize>,
    /// Embedding width of the metric head.
    pub embedding_dim: usize,
    pub seeds: Vec<u64>,
    pub eval_tasks: usize,
    /// Seed of the synthetic generator and the split partition.
    pub data_seed: u64,
    /// Generator overrides for synthetic datasets.
    pub synthetic: Option<SyntheticParams>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "synth5".into(),
            method: Method::Maml,
            ways: 5,
            shots: 1,
            query_shots: None,
            eval_shots: None,
            eval_query_shots: None,
            budget: None,
            budget_counts_query: true,
            task_limit: None,
            labeler: Labeler::Random,
            labels_per_task: None,
            clusters: None,
            acquisition_period: 1,
            outer_steps: None,
            inner_steps: None,
            eval_inner_steps: None,
            inner_lr: None,
            outer_lr: None,
            meta_batch: None,
            hidden: vec![32],
            embedding_dim: 16,
            seeds: vec![1, 2, 3],
            eval_tasks: 100,
            data_seed: 0,
            synthetic: None,
            out: None,
        }
    }
}

/// Benchmark name `<dataset> (<X>w-<Y>s @ <Z>)`, or without the budget in
/// the classical regime.
pub fn format_benchmark_id(dataset: &str, ways: usize, shots: usize, budget: Option<usize>) -> String {
    match budget {
        Some(z) => format!("{dataset} ({ways}w-{shots}s @ {z})"),
        None => format!("{dataset} ({ways}w-{shots}s)"),
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn benchmark_id(&self) -> String {
        let name = Path::new(&self.dataset)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&self.dataset);
        format_benchmark_id(name, self.ways, self.shots, self.budget)
    }

    fn synthetic_params(&self, federated: bool) -> SyntheticParams {
        self.synthetic.clone().unwrap_or_else(|| {
            if federated {
                SyntheticParams::federated(self.ways, 100)
            } else {
                SyntheticParams::default()
            }
        })
    }

    /// Resolves the dataset id to a training-split source.
    pub fn source(&self) -> Result<TaskSource> {
        let ds = self.dataset.as_str();
        let fractions = SplitFractions::default();
        if ds == "fedsynth" {
            let mut p = self.synthetic_params(true);
            if p.users == 0 {
                return Err(Error::Validation("fedsynth needs a positive user count".into()));
            }
            p.classes = self.ways;
            return TaskSource::synthetic(SourceKind::SyntheticGaussian, &p, fractions, self.data_seed);
        }
        for (prefix, kind) in [
            ("synth", SourceKind::SyntheticGaussian),
            ("rings", SourceKind::SyntheticRings),
        ] {
            if let Some(rest) = ds.strip_prefix(prefix) {
                if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                    let p = self.synthetic_params(false);
                    return TaskSource::synthetic(kind, &p, fractions, self.data_seed);
                }
            }
        }
        let path = Path::new(ds);
        if !path.exists() {
            return Err(Error::Validation(format!(
                "dataset {ds:?} is neither a known synthetic id nor an existing file"
            )));
        }
        load_dataset(path)?.with_seed(self.data_seed)
    }

    pub fn network(&self, feature_dim: usize) -> Result<NetworkSpec> {
        if self.method.is_metric() {
            NetworkSpec::mlp(feature_dim, &self.hidden, self.embedding_dim, Head::EmbeddingOnly)
        } else {
            NetworkSpec::mlp(feature_dim, &self.hidden, self.ways, Head::LinearLogits)
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        let mut cfg = MetaConfig::synthetic_preset(self.method, self.ways, self.shots);
        if let Some(q) = self.query_shots {
            cfg.query_shots = q;
        }
        if let Some(q) = self.eval_query_shots {
            cfg.eval_query_shots = q;
        }
        if let Some(t) = self.outer_steps {
            cfg.outer_steps = t;
        }
        if let Some(t) = self.inner_steps {
            cfg.inner.steps = t;
        }
        if let Some(t) = self.eval_inner_steps {
            cfg.eval_inner_steps = t;
        }
        if let Some(lr) = self.inner_lr {
            cfg.inner.schedule = StepSchedule::Constant { lr };
        }
        if let Some(lr) = self.outer_lr {
            cfg.outer_schedule = StepSchedule::Constant { lr };
        }
        if let Some(b) = self.meta_batch {
            cfg.meta_batch = b;
        }
        cfg.sampling = match self.labeler {
            Labeler::Stratified => SamplingStrategy::Stratified,
            Labeler::Random | Labeler::Active => SamplingStrategy::Random,
        };
        cfg
    }

    /// Configuration used on validation and test tasks.
    pub fn eval_meta_config(&self) -> MetaConfig {
        let mut cfg = self.meta_config();
        cfg.shots = self.eval_shots.unwrap_or(self.shots);
        cfg
    }

    pub fn active_config(&self) -> ActiveConfig {
        let labels = self.labels_per_task.unwrap_or(self.ways * self.shots);
        ActiveConfig {
            clusters: self.clusters.unwrap_or(self.ways.min(labels)),
            acquisition_period: self.acquisition_period,
            ..ActiveConfig::new(labels, self.ways)
        }
    }

    /// Labels one training task costs under this configuration.
    pub fn task_cost(&self) -> usize {
        let cfg = self.meta_config();
        match self.labeler {
            Labeler::Active => {
                self.active_config().labels_per_task
                    + if self.budget_counts_query {
                        cfg.ways * cfg.query_shots
                    } else {
                        0
                    }
            }
            _ => cfg.episode_cost(self.budget_counts_query),
        }
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<(TaskSource, NetworkSpec)> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("at least one seed is required".into()));
        }
        if self.eval_tasks == 0 {
            return Err(Error::Validation("eval-tasks must be positive".into()));
        }
        if self.ways == 0 || self.shots == 0 || self.eval_shots == Some(0) {
            return Err(Error::Validation("ways and shots must be positive".into()));
        }
        let source = self.source()?;
        let spec = self.network(source.feature_dim())?;
        self.meta_config().validate(&spec)?;
        self.eval_meta_config().validate(&spec)?;
        if self.labeler == Labeler::Active {
            if self.budget.is_none() {
                return Err(Error::Validation("active labeling needs a finite budget".into()));
            }
            self.active_config().validate()?;
        }
        if let Some(b) = self.budget {
            let cost = self.task_cost();
            if b < cost {
                return Err(Error::Validation(format!(
                    "budget {b} is smaller than one task's cost of {cost} labels"
                )));
            }
        } else if self.task_limit.is_some() {
            return Err(Error::Validation("a task limit needs a finite budget".into()));
        }
        Ok((source, spec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_ids() {
        assert_eq!(format_benchmark_id("synth5", 5, 1, Some(30_000)), "synth5 (5w-1s @ 30000)");
        assert_eq!(format_benchmark_id("synth5", 5, 1, None), "synth5 (5w-1s)");
        assert_eq!(
            format_benchmark_id("synth20", 20, 5, Some(600_000)),
            "synth20 (20w-5s @ 600000)"
        );
    }

    #[test]
    fn budget_parsing() {
        assert_eq!(parse_budget("unlimited").unwrap(), None);
        assert_eq!(parse_budget("300").unwrap(), Some(300));
        assert!(parse_budget("-1").is_err());
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let cfg = ExperimentConfig {
            budget: Some(5000),
            labeler: Labeler::Active,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"method": "reptile"}"#).unwrap();
        assert_eq!(partial.method, Method::Reptile);
        assert_eq!(partial.ways, 5);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"wayz": 3}"#).is_err());
    }

    #[test]
    fn budget_below_one_task_is_rejected() {
        let cfg = ExperimentConfig {
            method: Method::Reptile,
            budget: Some(4),
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("smaller than one task"));
    }
}
