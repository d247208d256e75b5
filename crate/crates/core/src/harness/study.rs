// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{with_overrides, ExperimentConfig};
use super::pipeline::{run_pipeline, Aggregate, RunRecord};
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::numerics::{ols_fit, OlsFit};

pub const MIN_REGRESSION_RECORDS: usize = 10;

/// OLS of held-out IIA on the trained partition's causal-coordinate EMD.
pub fn regression_study(records: &[RunRecord]) -> Result<OlsFit> {
    if records.len() < MIN_REGRESSION_RECORDS {
        return Err(Error::Config(format!(
            "the regression needs at least {MIN_REGRESSION_RECORDS} records, got {}",
            records.len()
        )));
    }
    let x: Vec<f64> = records.iter().map(|r| r.row_emd).collect();
    let y: Vec<f64> = records.iter().map(|r| r.heldout_iia).collect();
    ols_fit(&x, &y)
}

/// Two-column table `term,value` describing a fit.
pub fn regression_table(fit: &OlsFit) -> String {
    let rows = [
        ("intercept", fit.intercept),
        ("training_emd", fit.coefficient),
        ("training_emd_std_err", fit.coefficient_std_err),
        ("r_squared", fit.r_squared),
        ("f_statistic", fit.f_statistic),
        ("p_value", fit.p_value),
    ];
    let mut out = String::from("term,value\n");
    for (k, v) in rows {
        writeln!(out, "{k},{}", sig9(v)).expect("write to string");
    }
    writeln!(out, "n_observations,{}", fit.n_observations).expect("write to string");
    out
}

/// One swept axis: a dotted config key and the values it takes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl SweepAxis {
    /// Parse `key=[v1, v2, ...]` or `key=v`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, rest) = spec.split_once('=').ok_or_else(|| Error::Config(format!("sweep axis `{spec}` lacks `=`")))?;
        let values = match super::config::parse_toml_value(rest.trim()) {
            toml::Value::Array(items) => items,
            single => vec![single],
        };
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis `{key}` has no values")));
        }
        Ok(Self { key: key.trim().to_string(), values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub settings: Vec<(String, String)>,
    pub aggregate: Aggregate,
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Every combination of the axis values, in row-major order.
fn grid(axes: &[SweepAxis]) -> Vec<Vec<usize>> {
    let mut combos = vec![vec![]];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| (0..axis.values.len()).map(move |i| [c.clone(), vec![i]].concat()))
            .collect();
    }
    combos
}

/// Run the pipeline at every grid point. Point `i` writes under
/// `out/point_<i>/` and the table of means goes to `out/sweep.csv`.
pub fn sweep(base: &ExperimentConfig, axes: &[SweepAxis], out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    if axes.is_empty() {
        return Err(Error::Config("a sweep needs at least one axis".into()));
    }
    let mut points = Vec::new();
    for (i, combo) in grid(axes).into_iter().enumerate() {
        let overrides: Vec<(String, toml::Value)> =
            axes.iter().zip(&combo).map(|(a, &k)| (a.key.clone(), a.values[k].clone())).collect();
        let config = with_overrides(base, &overrides)?;
        let dir = out.map(|o| o.join(format!("point_{i}")));
        let records = run_pipeline(&config, dir.as_deref())?;
        points.push(SweepPoint {
            settings: overrides.iter().map(|(k, v)| (k.clone(), value_label(v))).collect(),
            aggregate: Aggregate::of(&records),
        });
    }
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        std::fs::write(o.join("sweep.csv"), sweep_csv(axes, &points))?;
    }
    Ok(points)
}

pub fn sweep_csv(axes: &[SweepAxis], points: &[SweepPoint]) -> String {
    let mut out = String::from("point,");
    for a in axes {
        out.push_str(&a.key);
        out.push(',');
    }
    out.push_str("runs,trained_iia,heldout_iia,emd,row_emd,heldout_row_emd\n");
    for (i, p) in points.iter().enumerate() {
        let a = &p.aggregate;
        let settings: Vec<&str> = p.settings.iter().map(|(_, v)| v.as_str()).collect();
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            settings.join(","),
            a.runs,
            sig9(a.trained_iia),
            sig9(a.heldout_iia),
            sig9(a.emd),
            sig9(a.row_emd),
            sig9(a.heldout_row_emd)
        )
        .expect("write to string");
    }
    out
}
