//! Merges the metrics of several run directories into one table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fairpref::io::{write_atomic, write_json_atomic};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Category, CliError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub method: String,
    pub beta: f64,
    pub gamma: f64,
    pub last_acc: Vec<f64>,
    pub mft: f64,
    pub mfn: f64,
    pub maa: f64,
    pub bwt: f64,
    pub minority_final_acc: Option<f64>,
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(Category::Data, format!("{}: {e}", path.display())))
}

fn num(v: &Value, key: &str, path: &Path) -> Result<f64, CliError> {
    v[key].as_f64().ok_or_else(|| {
        CliError::new(
            Category::Data,
            format!("{}: missing number {key:?}", path.display()),
        )
    })
}

pub fn summarize(dir: &Path) -> Result<RunSummary, CliError> {
    let metrics_path = dir.join("metrics.json");
    let config_path = dir.join("config.json");
    let m = read_json(&metrics_path)?;
    let c = read_json(&config_path)?;
    let train = &c["train"];
    Ok(RunSummary {
        run: dir.display().to_string(),
        method: train["method"].as_str().unwrap_or("").to_string(),
        beta: num(&train["objective"], "beta", &config_path)?,
        gamma: num(&train["objective"], "gamma", &config_path)?,
        last_acc: m["last_acc"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default(),
        mft: num(&m, "mft", &metrics_path)?,
        mfn: num(&m, "mfn", &metrics_path)?,
        maa: num(&m, "maa", &metrics_path)?,
        bwt: num(&m, "bwt", &metrics_path)?,
        minority_final_acc: m["minority_final_acc"].as_f64(),
    })
}

pub fn to_csv(rows: &[RunSummary]) -> String {
    let tasks = rows.iter().map(|r| r.last_acc.len()).max().unwrap_or(0);
    let mut out = String::from("run,method,beta,gamma");
    for j in 1..=tasks {
        write!(out, ",task_{j}").unwrap();
    }
    out.push_str(",MFT,MFN,MAA,BWT,minority_final\n");
    for r in rows {
        write!(out, "{},{},{},{}", r.run, r.method, r.beta, r.gamma).unwrap();
        for j in 0..tasks {
            match r.last_acc.get(j) {
                Some(a) => write!(out, ",{a}").unwrap(),
                None => out.push(','),
            }
        }
        write!(out, ",{},{},{},{},", r.mft, r.mfn, r.maa, r.bwt).unwrap();
        if let Some(x) = r.minority_final_acc {
            write!(out, "{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes CSV when `out` ends in `.csv`, JSON otherwise.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<Vec<RunSummary>, CliError> {
    if runs.is_empty() {
        return Err(CliError::new(Category::Usage, "no run directories given"));
    }
    let rows = runs.iter().map(|d| summarize(d)).collect::<Result<Vec<_>, _>>()?;
    if out.extension().is_some_and(|e| e == "csv") {
        write_atomic(out, to_csv(&rows).as_bytes())?;
    } else {
        write_json_atomic(out, &rows)?;
    }
    Ok(rows)
}
