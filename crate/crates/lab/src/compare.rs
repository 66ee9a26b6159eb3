//! Mean and sd over seeds for metric tables, with per-metric rankings of
//! the constraints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::table::{read_table, MetricRecord, METRIC_COLUMNS};
use crate::{LabError, Result};

pub const SUMMARY_COLUMNS: [&str; 9] = ["constraint", "lambda", "metric", "param1", "param2", "n", "mean", "sd", "rank"];

pub const GROUP_KEYS: [&str; 5] = ["constraint", "lambda", "metric", "param1", "param2"];

/// Placeholder for a column that is not part of the grouping.
pub const POOLED: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub constraint: String,
    pub lambda: String,
    pub metric: String,
    pub param1: String,
    pub param2: String,
    /// Non-missing values in the group.
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample sd; missing for fewer than two values.
    pub sd: Option<f64>,
    /// 1 for the constraint with the largest mean among groups sharing
    /// metric, params and λ (control competes at every λ).
    pub rank: Option<usize>,
}

pub fn parse_grouping(s: &str) -> Result<Vec<String>> {
    let keys: Vec<String> = s.split(',').map(|k| k.trim().to_string()).filter(|k| !k.is_empty()).collect();
    for k in &keys {
        if !GROUP_KEYS.contains(&k.as_str()) {
            return Err(LabError::user(format!("unknown grouping key {k:?}; expected a subset of {GROUP_KEYS:?}")));
        }
    }
    if keys.is_empty() {
        return Err(LabError::user("grouping needs at least one key"));
    }
    Ok(keys)
}

pub fn read_tables(paths: &[PathBuf]) -> Result<Vec<MetricRecord>> {
    if paths.is_empty() {
        return Err(LabError::user("no tables given"));
    }
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_table::<MetricRecord>(p, &METRIC_COLUMNS)?);
    }
    Ok(rows)
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (Some(m), None);
    }
    let ss = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    (Some(m), Some((ss / (v.len() - 1) as f64).sqrt()))
}

/// Groups `rows` by the keys in `by`, pooling the others.
pub fn summarize(rows: &[MetricRecord], by: &[String]) -> Vec<SummaryRecord> {
    let keep = |k: &str| by.iter().any(|b| b == k);
    let key = |r: &MetricRecord| -> [String; 5] {
        let f = |k: &str, v: String| if keep(k) { v } else { POOLED.to_string() };
        [
            f("constraint", r.constraint.clone()),
            f("lambda", format!("{}", r.lambda)),
            f("metric", r.metric.clone()),
            f("param1", r.param1.clone()),
            f("param2", r.param2.clone()),
        ]
    };
    let mut groups: BTreeMap<[String; 5], (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry(key(r)).or_insert((r.lambda, Vec::new()));
        g.1.extend(r.value);
    }
    let mut out: Vec<(f64, SummaryRecord)> = groups
        .into_iter()
        .map(|([constraint, lambda, metric, param1, param2], (l, values))| {
            let (mean, sd) = mean_sd(&values);
            (
                l,
                SummaryRecord {
                    constraint,
                    lambda,
                    metric,
                    param1,
                    param2,
                    n: values.len(),
                    mean,
                    sd,
                    rank: None,
                },
            )
        })
        .collect();
    if keep("constraint") && keep("lambda") {
        rank(&mut out);
    }
    out.sort_by(|a, b| {
        (&a.1.metric, &a.1.param1, &a.1.param2, &a.1.constraint)
            .cmp(&(&b.1.metric, &b.1.param1, &b.1.param2, &b.1.constraint))
            .then(a.0.total_cmp(&b.0))
    });
    out.into_iter().map(|(_, r)| r).collect()
}

fn rank(groups: &mut [(f64, SummaryRecord)]) {
    for i in 0..groups.len() {
        let me = &groups[i].1;
        if me.constraint == "control" {
            continue;
        }
        let Some(m) = me.mean else { continue };
        let same = |o: &SummaryRecord| o.metric == me.metric && o.param1 == me.param1 && o.param2 == me.param2;
        let rivals: Vec<f64> = groups
            .iter()
            .map(|(_, o)| o)
            .filter(|o| same(o) && (o.constraint == "control" || (o.lambda == me.lambda && o.constraint != me.constraint)))
            .filter_map(|o| o.mean)
            .collect();
        let r = 1 + rivals.iter().filter(|&&v| v > m).count();
        groups[i].1.rank = Some(r);
    }
}
