//! Seeded synthetic benchmark: Gaussian context clusters per group, a
//! linear gold rule per cluster, and rejected answers drawn by mode. The
//! train/eval split is a seeded shuffle within each group.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Manifest, ManifestHeader, TaskHeader};
use super::records::{write_jsonl, PreferenceRecord, RejectionSource};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::policy::Vocabulary;

/// Probability that a confusable rejection is the label's fixed neighbor.
pub const CONFUSION_PROB: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionMode {
    UniformWrong,
    #[default]
    Confusable,
    /// Rows are written with an empty `rejected` for the chat client to fill.
    ExternalLlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub samples: usize,
    pub observed_weights: Vec<f64>,
    /// Defaults to uniform.
    #[serde(default)]
    pub target_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub tasks: Vec<TaskSpec>,
    pub vocab_size: usize,
    pub dim: usize,
    pub rejection_mode: RejectionMode,
    pub seed: u64,
    /// Distance of each cluster mean from the origin.
    pub cluster_scale: f64,
    /// How far a task's cluster means move away from the shared group means.
    pub task_drift: f64,
    pub eval_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl SyntheticSpec {
    /// Two tasks of 4000 samples, three groups weighted 0.7 / 0.2 / 0.1.
    pub fn reference() -> Self {
        let task = TaskSpec {
            samples: 4000,
            observed_weights: vec![0.7, 0.2, 0.1],
            target_weights: None,
        };
        Self {
            name: "imbalanced-2x3".into(),
            tasks: vec![task.clone(), task],
            vocab_size: 6,
            dim: 8,
            rejection_mode: RejectionMode::Confusable,
            seed: 7,
            cluster_scale: 3.0,
            task_drift: 1.0,
            eval_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("at least one task is required"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.dim < 2 {
            return Err(Error::invalid("dim must be >= 2"));
        }
        if !(self.cluster_scale >= 0.0 && self.cluster_scale.is_finite())
            || !(self.task_drift >= 0.0 && self.task_drift.is_finite())
        {
            return Err(Error::invalid("cluster_scale and task_drift must be >= 0"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::invalid("eval_fraction must lie in (0, 1)"));
        }
        for (t, task) in self.tasks.iter().enumerate() {
            let k = task.observed_weights.len();
            if k == 0 {
                return Err(Error::invalid(format!("task {t}: no groups")));
            }
            let sum: f64 = task.observed_weights.iter().sum();
            if task.observed_weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "task {t}: observed weights must be non-negative and sum to 1"
                )));
            }
            if let Some(target) = &task.target_weights {
                if target.len() != k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        actual: target.len(),
                    });
                }
            }
            if task.samples < k {
                return Err(Error::invalid(format!(
                    "task {t}: {} samples for {k} groups",
                    task.samples
                )));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::numbered(self.vocab_size)
    }

    fn target(&self, t: usize) -> Vec<f64> {
        let k = self.tasks[t].observed_weights.len();
        self.tasks[t]
            .target_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / k as f64; k])
    }
}

/// Cluster mean, split direction and the two answers of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRule {
    pub mean: Vec<f64>,
    pub split: Vec<f64>,
    pub answers: [usize; 2],
}

impl GroupRule {
    pub fn gold(&self, x: &[f64]) -> usize {
        let side: f64 = self.split.iter().zip(x).map(|(u, v)| u * v).sum();
        self.answers[(side >= 0.0) as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTask {
    pub task_id: usize,
    pub rules: Vec<GroupRule>,
    pub train: Vec<PreferenceRecord>,
    pub eval: Vec<PreferenceRecord>,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Fixed confusion neighbor of a label.
pub fn confusion_neighbor(label: usize, vocab_size: usize) -> usize {
    (label + 1) % vocab_size
}

pub fn uniform_wrong<R: Rng + ?Sized>(rng: &mut R, gold: usize, vocab_size: usize) -> usize {
    let r = rng.random_range(0..vocab_size - 1);
    if r >= gold {
        r + 1
    } else {
        r
    }
}

pub fn confusable<R: Rng + ?Sized>(rng: &mut R, gold: usize, vocab_size: usize) -> usize {
    if vocab_size == 2 || rng.random::<f64>() < CONFUSION_PROB {
        confusion_neighbor(gold, vocab_size)
    } else {
        uniform_wrong(rng, gold, vocab_size)
    }
}

fn rules_for(spec: &SyntheticSpec, shared: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<GroupRule> {
    let d = spec.dim;
    shared
        .iter()
        .map(|base| {
            let drift = normal_vec(rng, d);
            let mut mean: Vec<f64> = base
                .iter()
                .zip(&drift)
                .map(|(b, c)| b + spec.task_drift * c / (d as f64).sqrt())
                .collect();
            normalize(&mut mean);
            // split direction orthogonal to the mean so no bias term is needed
            let mut split = normal_vec(rng, d);
            let proj: f64 = split.iter().zip(&mean).map(|(a, b)| a * b).sum();
            split.iter_mut().zip(&mean).for_each(|(s, m)| *s -= proj * m);
            normalize(&mut split);
            mean.iter_mut().for_each(|m| *m *= spec.cluster_scale);
            let a = rng.random_range(0..spec.vocab_size);
            let b = uniform_wrong(rng, a, spec.vocab_size);
            GroupRule {
                mean,
                split,
                answers: [a, b],
            }
        })
        .collect()
}

fn generate_task(spec: &SyntheticSpec, t: usize, vocab: &Vocabulary) -> Result<GeneratedTask> {
    let task = &spec.tasks[t];
    let k = task.observed_weights.len();
    let mut base_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    base_rng.set_stream(u64::MAX);
    let shared: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut v = normal_vec(&mut base_rng, spec.dim);
            normalize(&mut v);
            v
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(t as u64));
    let rules = rules_for(spec, &shared, &mut rng);
    let groups = WeightedIndex::new(&task.observed_weights)
        .map_err(|e| Error::invalid(format!("task {t}: {e}")))?;
    let mut records = Vec::with_capacity(task.samples);
    for i in 0..task.samples {
        let g = groups.sample(&mut rng);
        let rule = &rules[g];
        let features: Vec<f64> = rule
            .mean
            .iter()
            .map(|m| m + Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let gold = rule.gold(&features);
        let (rejected, prompt_text) = match spec.rejection_mode {
            RejectionMode::UniformWrong => (
                vocab.label(uniform_wrong(&mut rng, gold, spec.vocab_size)).unwrap().to_string(),
                None,
            ),
            RejectionMode::Confusable => (
                vocab.label(confusable(&mut rng, gold, spec.vocab_size)).unwrap().to_string(),
                None,
            ),
            RejectionMode::ExternalLlm => (
                String::new(),
                Some(format!("Task {} question from topic group {g}.", t + 1)),
            ),
        };
        records.push(PreferenceRecord {
            record_id: format!("t{t}-{i:06}"),
            task_id: t,
            group_id: g,
            features,
            prompt_text,
            chosen: vocab.label(gold).unwrap().to_string(),
            rejected,
            rejection_source: RejectionSource::Synthetic,
        });
    }
    // shuffle-split within each group so every group reaches the eval split
    let mut is_eval = vec![false; task.samples];
    for g in 0..k {
        let mut members: Vec<usize> = (0..task.samples).filter(|&i| records[i].group_id == g).collect();
        members.shuffle(&mut rng);
        let take = ((members.len() as f64) * spec.eval_fraction).round() as usize;
        let take = if members.len() >= 2 { take.clamp(1, members.len() - 1) } else { 0 };
        for &i in &members[..take] {
            is_eval[i] = true;
        }
    }
    let (eval, train): (Vec<_>, Vec<_>) = records
        .into_iter()
        .zip(is_eval)
        .partition(|(_, e)| *e);
    Ok(GeneratedTask {
        task_id: t,
        rules,
        train: train.into_iter().map(|(r, _)| r).collect(),
        eval: eval.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Generates every task in memory; tasks run in parallel and come back in order.
pub fn generate_records(spec: &SyntheticSpec, exec: Exec) -> Result<Vec<GeneratedTask>> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    par::map_range(exec, spec.tasks.len(), |t| generate_task(spec, t, &vocab))
        .into_iter()
        .collect()
}

pub fn header(spec: &SyntheticSpec) -> Result<ManifestHeader> {
    Ok(ManifestHeader {
        name: spec.name.clone(),
        generator_version: super::manifest::GENERATOR_VERSION.to_string(),
        seed: spec.seed,
        vocab: spec.vocab()?.labels().to_vec(),
        dim: spec.dim,
        tasks: (0..spec.tasks.len())
            .map(|t| TaskHeader {
                task_id: t,
                observed_weights: spec.tasks[t].observed_weights.clone(),
                target_weights: spec.target(t),
            })
            .collect(),
    })
}

/// Writes `task_<t>/{train,eval}.jsonl` and `manifest.json` under `out`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path, exec: Exec) -> Result<Manifest> {
    generate_synthetic_with(spec, out, exec, Ok)
}

/// As [`generate_synthetic`], passing each task's records (train then eval)
/// through `fill` before writing. Used to complete pending rejections.
pub fn generate_synthetic_with<F>(
    spec: &SyntheticSpec,
    out: &Path,
    exec: Exec,
    mut fill: F,
) -> Result<Manifest>
where
    F: FnMut(Vec<PreferenceRecord>) -> Result<Vec<PreferenceRecord>>,
{
    let tasks = generate_records(spec, exec)?;
    for task in tasks {
        let n_train = task.train.len();
        let n_total = n_train + task.eval.len();
        let mut all = task.train;
        all.extend(task.eval);
        let filled = fill(all)?;
        if filled.len() != n_total {
            return Err(Error::invalid("fill changed the record count"));
        }
        let (train, eval) = filled.split_at(n_train);
        let dir = out.join(format!("task_{}", task.task_id));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_jsonl(&dir.join("train.jsonl"), train)?;
        write_jsonl(&dir.join("eval.jsonl"), eval)?;
    }
    write_manifest(out, &header(spec)?)
}
