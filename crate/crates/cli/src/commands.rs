use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fairpref::bounds::{verify_sweep, InstanceFamily};
use fairpref::data::llm::{llm_generate_rejections, HttpTransport, ThreadSleeper};
use fairpref::data::synthetic::{generate_synthetic, generate_synthetic_with, RejectionMode};
use fairpref::data::{load_dataset, LoadedDataset, Manifest};
use fairpref::io::{write_atomic, write_json_atomic};
use fairpref::trainer::{run_sequence, write_run_artifacts, SequenceResult};

use crate::config::RunConfig;
use crate::error::{Category, CliError};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::new(Category::Io, format!("{}: {e}", dir.display())))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    create_dir(out)?;
    let spec = &cfg.data.synthetic;
    let manifest = if spec.rejection_mode == RejectionMode::ExternalLlm {
        let llm = &cfg.data.llm;
        let transport = if llm.offline {
            None
        } else {
            Some(HttpTransport::from_config(llm)?)
        };
        let vocab = spec.vocab()?;
        generate_synthetic_with(spec, out, cfg.exec(), |records| {
            let (filled, _) = llm_generate_rejections(
                records,
                &vocab,
                llm,
                transport.as_ref().map(|t| t as _),
                &ThreadSleeper,
                spec.seed,
            )?;
            Ok(filled)
        })?
    } else {
        generate_synthetic(spec, out, cfg.exec())?
    };
    Ok(manifest)
}

/// The configured dataset, or the synthetic spec generated under `out/data`.
pub fn dataset(cfg: &RunConfig, out: &Path) -> Result<LoadedDataset, CliError> {
    let dir = match &cfg.data.dataset {
        Some(d) => d.clone(),
        None => {
            let d = out.join("data");
            gen_data(cfg, &d)?;
            d
        }
    };
    Ok(load_dataset(&dir)?)
}

fn train_on(
    cfg: &RunConfig,
    data: &LoadedDataset,
    out: &Path,
) -> Result<SequenceResult, CliError> {
    create_dir(out)?;
    write_json_atomic(&out.join("config.json"), cfg)?;
    let result = run_sequence(
        cfg.exec(),
        &data.tasks,
        &data.vocab,
        data.manifest.dim,
        &cfg.train,
    )?;
    write_run_artifacts(out, &result)?;
    Ok(result)
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<SequenceResult, CliError> {
    let data = dataset(cfg, out)?;
    train_on(cfg, &data, out)
}

/// The (beta, gamma) grid: both flags give the cross product, one flag
/// sweeps that axis at the configured value of the other, neither uses the
/// configured lists.
pub fn sweep_grid(
    cfg: &RunConfig,
    betas: Option<Vec<f64>>,
    gammas: Option<Vec<f64>>,
) -> Vec<(f64, f64)> {
    let beta0 = cfg.train.objective.beta;
    let gamma0 = cfg.train.objective.gamma;
    let (bs, gs) = match (betas, gammas) {
        (Some(b), Some(g)) => (b, g),
        (Some(b), None) => (b, vec![gamma0]),
        (None, Some(g)) => (vec![beta0], g),
        (None, None) => (cfg.sweep.betas.clone(), cfg.sweep.gammas.clone()),
    };
    bs.iter()
        .flat_map(|&b| gs.iter().map(move |&g| (b, g)))
        .collect()
}

fn point_dir(out: &Path, beta: f64, gamma: f64) -> PathBuf {
    out.join(format!("beta_{beta}_gamma_{gamma}"))
}

pub fn sweep(
    cfg: &RunConfig,
    grid: &[(f64, f64)],
    out: &Path,
    parallel: bool,
) -> Result<String, CliError> {
    if grid.is_empty() {
        return Err(CliError::new(Category::Config, "empty sweep grid"));
    }
    for &(b, g) in grid {
        if !(b > 0.0 && b.is_finite()) || !(g >= 0.0 && g.is_finite()) {
            return Err(CliError::new(
                Category::Config,
                format!("invalid grid point beta = {b}, gamma = {g}"),
            ));
        }
    }
    create_dir(out)?;
    write_json_atomic(&out.join("config.json"), cfg)?;
    let data = dataset(cfg, out)?;
    let data_dir = data.dir.canonicalize().unwrap_or_else(|_| data.dir.clone());
    let run_point = |&(beta, gamma): &(f64, f64)| -> Result<SequenceResult, CliError> {
        let mut point = cfg.clone();
        point.train.objective.beta = beta;
        point.train.objective.gamma = gamma;
        if cfg.data.dataset.is_none() {
            point.data.dataset = Some(data_dir.clone());
        }
        train_on(&point, &data, &point_dir(out, beta, gamma))
    };
    let results: Vec<Result<SequenceResult, CliError>> = run_points(grid, parallel, run_point);
    let tasks = data.tasks.len();
    let mut csv = String::from("beta,gamma");
    for j in 1..=tasks {
        write!(csv, ",task_{j}").unwrap();
    }
    csv.push_str(",MFT,MFN,MAA,BWT\n");
    for (&(beta, gamma), r) in grid.iter().zip(results) {
        let m = r?.metrics;
        write!(csv, "{beta},{gamma}").unwrap();
        for a in &m.last_acc {
            write!(csv, ",{a}").unwrap();
        }
        writeln!(csv, ",{},{},{},{}", m.mft, m.mfn, m.maa, m.bwt).unwrap();
    }
    write_atomic(&out.join("sweep.csv"), csv.as_bytes())?;
    Ok(csv)
}

#[cfg(feature = "parallel")]
fn run_points<F>(grid: &[(f64, f64)], parallel: bool, f: F) -> Vec<Result<SequenceResult, CliError>>
where
    F: Fn(&(f64, f64)) -> Result<SequenceResult, CliError> + Sync + Send,
{
    use rayon::prelude::*;
    if parallel {
        grid.par_iter().map(f).collect()
    } else {
        grid.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn run_points<F>(grid: &[(f64, f64)], _parallel: bool, f: F) -> Vec<Result<SequenceResult, CliError>>
where
    F: Fn(&(f64, f64)) -> Result<SequenceResult, CliError> + Sync + Send,
{
    grid.iter().map(f).collect()
}

pub struct VerifySummary {
    pub instances: usize,
    pub preconditions_met: usize,
    pub violations: usize,
}

pub fn verify_bounds(
    cfg: &RunConfig,
    instances: usize,
    n: usize,
    seed: u64,
    family: InstanceFamily,
    out: &Path,
) -> Result<VerifySummary, CliError> {
    if !(2..=fairpref::transport::MAX_LP_SUPPORT).contains(&n) {
        return Err(CliError::new(
            Category::Config,
            format!("--n must lie in [2, {}]", fairpref::transport::MAX_LP_SUPPORT),
        ));
    }
    let report = verify_sweep(instances, n, seed, family, cfg.exec())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json_atomic(out, &report)?;
    Ok(VerifySummary {
        instances: report.aggregate.instances,
        preconditions_met: report.aggregate.preconditions_met,
        violations: report.aggregate.violations,
    })
}
