use metalab_core::{Error, Result};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::run::{csv_bytes, RunRecord};

pub const AGGREGATE_HEADER: &str = "benchmark_id,method,labeler,split,seeds,mean,ci95,warning";

/// Seed-level summary of one (benchmark, method, labeler, split) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRecord {
    pub benchmark_id: String,
    pub method: String,
    pub labeler: String,
    pub split: String,
    /// Seeds with a finite accuracy.
    pub seeds: usize,
    pub mean: Option<f64>,
    /// Student-t 95% half-width; needs two or more seeds.
    pub ci95: Option<f64>,
    pub warning: Option<String>,
}

/// Two-sided 95% Student-t quantile for `df` degrees of freedom.
pub fn t_quantile_975(df: usize) -> Result<f64> {
    let t = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Validation(format!("student-t with {df} degrees of freedom: {e}")))?;
    Ok(t.inverse_cdf(0.975))
}

/// Mean and 95% half-width of a sample; the half-width is absent below two
/// values.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::Validation("mean of an empty sample".into()));
    }
    let k = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], (values.len() > 1).then_some(0.0)));
    }
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return Ok((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let stderr = (var / k).sqrt();
    Ok((mean, Some(t_quantile_975(values.len() - 1)? * stderr)))
}

/// Groups records in first-appearance order. Failed seeds (NaN accuracy)
/// are left out of the statistics; a group with no usable seed becomes a
/// warning row.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<AggregateRecord>> {
    let mut keys: Vec<(&str, &str, &str, &str)> = Vec::new();
    for r in records {
        let key = (
            r.benchmark_id.as_str(),
            r.method.as_str(),
            r.labeler.as_str(),
            r.split.as_str(),
        );
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(b, m, l, s)| {
            let accs: Vec<f64> = records
                .iter()
                .filter(|r| (r.benchmark_id.as_str(), r.method.as_str(), r.labeler.as_str(), r.split.as_str()) == (b, m, l, s))
                .map(|r| r.accuracy)
                .filter(|a| a.is_finite())
                .collect();
            let base = AggregateRecord {
                benchmark_id: b.into(),
                method: m.into(),
                labeler: l.into(),
                split: s.into(),
                seeds: accs.len(),
                mean: None,
                ci95: None,
                warning: None,
            };
            if accs.is_empty() {
                return Ok(AggregateRecord {
                    warning: Some("no seed produced a result".into()),
                    ..base
                });
            }
            let (mean, ci95) = mean_ci95(&accs)?;
            Ok(AggregateRecord {
                mean: Some(mean),
                ci95,
                ..base
            })
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRecord]) -> Result<Vec<u8>> {
    csv_bytes(rows, AGGREGATE_HEADER)
}
