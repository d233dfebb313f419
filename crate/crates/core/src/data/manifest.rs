use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::records::{parse_jsonl, PreferenceRecord};
use crate::error::{Error, Result};
use crate::fairness::GroupPartition;
use crate::io::write_json_atomic;
use crate::policy::Vocabulary;
use crate::trainer::TaskDataset;

pub const GENERATOR_VERSION: &str = concat!("fairpref-synthetic/", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskHeader {
    pub task_id: usize,
    pub observed_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
}

/// The parts of a manifest that are not recomputed from file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub name: String,
    pub generator_version: String,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub dim: usize,
    pub tasks: Vec<TaskHeader>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Relative to the dataset directory, `/`-separated.
    pub path: String,
    pub records: usize,
    pub group_counts: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub task_id: usize,
    pub observed_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
    pub train: FileEntry,
    pub eval: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub generator_version: String,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub dim: usize,
    pub tasks: Vec<TaskEntry>,
    pub total_records: usize,
    /// SHA-256 over every file's path and digest, in task order.
    pub content_hash: String,
}

impl Manifest {
    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            name: self.name.clone(),
            generator_version: self.generator_version.clone(),
            seed: self.seed,
            vocab: self.vocab.clone(),
            dim: self.dim,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskHeader {
                    task_id: t.task_id,
                    observed_weights: t.observed_weights.clone(),
                    target_weights: t.target_weights.clone(),
                })
                .collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_entry(
    dir: &Path,
    rel: &str,
    vocab: &Vocabulary,
    groups: usize,
) -> Result<(FileEntry, Vec<PreferenceRecord>)> {
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Record {
        path: path.clone(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let records = parse_jsonl(&text, &path, vocab, false)?;
    let mut counts = vec![0usize; groups];
    for r in &records {
        *counts.get_mut(r.group_id).ok_or(Error::UnknownGroup {
            group: r.group_id,
            groups,
        })? += 1;
    }
    Ok((
        FileEntry {
            path: rel.to_string(),
            records: records.len(),
            group_counts: counts,
            sha256: hex(&Sha256::digest(&bytes)),
        },
        records,
    ))
}

fn task_files(t: usize) -> (String, String) {
    (format!("task_{t}/train.jsonl"), format!("task_{t}/eval.jsonl"))
}

fn compute(dir: &Path, header: &ManifestHeader) -> Result<(Manifest, Vec<[Vec<PreferenceRecord>; 2]>)> {
    let vocab = Vocabulary::new(header.vocab.clone())?;
    let mut tasks = Vec::new();
    let mut records = Vec::new();
    let mut hasher = Sha256::new();
    let mut total = 0;
    for th in &header.tasks {
        let k = th.observed_weights.len();
        let (train_rel, eval_rel) = task_files(th.task_id);
        let (train, train_recs) = file_entry(dir, &train_rel, &vocab, k)?;
        let (eval, eval_recs) = file_entry(dir, &eval_rel, &vocab, k)?;
        for r in train_recs.iter().chain(&eval_recs) {
            if r.task_id != th.task_id || r.features.len() != header.dim {
                return Err(Error::Manifest(format!(
                    "record {} does not belong to task {} with d = {}",
                    r.record_id, th.task_id, header.dim
                )));
            }
        }
        for f in [&train, &eval] {
            hasher.update(f.path.as_bytes());
            hasher.update(b"\n");
            hasher.update(f.sha256.as_bytes());
            hasher.update(b"\n");
        }
        total += train.records + eval.records;
        tasks.push(TaskEntry {
            task_id: th.task_id,
            observed_weights: th.observed_weights.clone(),
            target_weights: th.target_weights.clone(),
            train,
            eval,
        });
        records.push([train_recs, eval_recs]);
    }
    Ok((
        Manifest {
            name: header.name.clone(),
            generator_version: header.generator_version.clone(),
            seed: header.seed,
            vocab: header.vocab.clone(),
            dim: header.dim,
            tasks,
            total_records: total,
            content_hash: hex(&hasher.finalize()),
        },
        records,
    ))
}

/// Recomputes counts and hashes from the files under `dir` and writes
/// `manifest.json`.
pub fn write_manifest(dir: &Path, header: &ManifestHeader) -> Result<Manifest> {
    let (manifest, _) = compute(dir, header)?;
    write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Differences between the stored manifest and the files on disk; empty
/// when they agree.
pub fn check_manifest(dir: &Path) -> Result<Vec<String>> {
    let stored = Manifest::load(dir)?;
    let (fresh, _) = compute(dir, &stored.header())?;
    Ok(diff(&stored, &fresh))
}

fn diff(stored: &Manifest, fresh: &Manifest) -> Vec<String> {
    let mut out = Vec::new();
    for (a, b) in stored.tasks.iter().zip(&fresh.tasks) {
        for (x, y) in [(&a.train, &b.train), (&a.eval, &b.eval)] {
            if x.sha256 != y.sha256 {
                out.push(format!("{}: hash mismatch", x.path));
            }
            if x.records != y.records || x.group_counts != y.group_counts {
                out.push(format!(
                    "{}: counts {:?} on disk, {:?} in manifest",
                    x.path, y.group_counts, x.group_counts
                ));
            }
        }
    }
    if stored.total_records != fresh.total_records {
        out.push(format!(
            "total records {} on disk, {} in manifest",
            fresh.total_records, stored.total_records
        ));
    }
    if stored.content_hash != fresh.content_hash {
        out.push("content hash mismatch".into());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub tasks: Vec<TaskDataset>,
}

/// Loads a generated dataset, refusing it if the files disagree with the manifest.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let stored = Manifest::load(dir)?;
    let (fresh, records) = compute(dir, &stored.header())?;
    let problems = diff(&stored, &fresh);
    if !problems.is_empty() {
        return Err(Error::Manifest(problems.join("; ")));
    }
    let vocab = Vocabulary::new(stored.vocab.clone())?;
    let mut tasks = Vec::new();
    for (entry, [train, eval]) in stored.tasks.iter().zip(records) {
        let partition =
            GroupPartition::new(entry.observed_weights.clone(), entry.target_weights.clone())?;
        tasks.push(TaskDataset::new(
            entry.task_id,
            train.iter().map(|r| r.to_triple(&vocab)).collect::<Result<_>>()?,
            partition,
            eval.iter().map(|r| r.to_eval(&vocab)).collect::<Result<_>>()?,
        )?);
    }
    Ok(LoadedDataset {
        dir: dir.to_path_buf(),
        manifest: stored,
        vocab,
        tasks,
    })
}
