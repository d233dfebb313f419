//! Sequential task training, evaluation, and continual-learning metrics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::GroupPartition;
use crate::io::{write_atomic, write_json_atomic};
use crate::objectives::{ObjectiveConfig, PreferenceTriple, StepObjective};
use crate::par::{self, Exec};
use crate::policy::{ContextFeatures, PolicySnapshot, Vocabulary};

/// A held-out example with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub context: ContextFeatures,
    pub gold: usize,
    pub group_id: usize,
    pub record_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub train: Vec<PreferenceTriple>,
    pub partition: GroupPartition,
    pub eval: Vec<EvalExample>,
}

impl TaskDataset {
    pub fn new(
        task_id: usize,
        train: Vec<PreferenceTriple>,
        partition: GroupPartition,
        eval: Vec<EvalExample>,
    ) -> Result<Self> {
        let ds = Self {
            task_id,
            train,
            partition,
            eval,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        let k = self.partition.num_groups();
        let train_ids: HashSet<&str> = self.train.iter().map(|z| z.record_id.as_str()).collect();
        for e in &self.eval {
            if train_ids.contains(e.record_id.as_str()) {
                return Err(Error::invalid(format!(
                    "record {} appears in both train and eval",
                    e.record_id
                )));
            }
        }
        for g in self
            .train
            .iter()
            .map(|z| z.group_id)
            .chain(self.eval.iter().map(|e| e.group_id))
        {
            if g >= k {
                return Err(Error::UnknownGroup { group: g, groups: k });
            }
        }
        if !self.eval.is_empty() {
            let mut seen = vec![false; k];
            for e in &self.eval {
                seen[e.group_id] = true;
            }
            if let Some(group) = seen.iter().position(|s| !s) {
                return Err(Error::EmptyGroup { group });
            }
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.partition.num_groups()
    }

    /// Group with the smallest observed weight; ties go to the higher index.
    pub fn minority_group(&self) -> usize {
        let w = &self.partition.observed_weights;
        let mut best = 0;
        for (i, &x) in w.iter().enumerate() {
            if x <= w[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    Kd,
    Dpo,
    #[default]
    FairDpo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Kd => "kd",
            Method::Dpo => "dpo",
            Method::FairDpo => "fair_dpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub objective: ObjectiveConfig,
    pub steps: usize,
    pub learning_rate: f64,
    /// Batches at least as large as the task use the whole task every step.
    pub batch_size: usize,
    pub seed: u64,
    pub kd_weight: f64,
    /// Heavy-ball coefficient; 0 is plain gradient descent.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::FairDpo,
            objective: ObjectiveConfig::default(),
            steps: 300,
            learning_rate: 0.1,
            batch_size: 64,
            seed: 0,
            kd_weight: 1.0,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "kd_weight must be >= 0, got {}",
                self.kd_weight
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn step_objective(&self) -> StepObjective {
        let o = &self.objective;
        match self.method {
            Method::Sft => StepObjective::Sft,
            Method::Kd => StepObjective::Kd {
                weight: self.kd_weight,
            },
            Method::Dpo => StepObjective::Dpo {
                beta: o.beta,
                lambda: o.lambda_dpo,
            },
            Method::FairDpo => StepObjective::FairDpo {
                beta: o.beta,
                gamma: o.gamma,
                lambda: o.lambda_dpo,
            },
        }
    }
}

/// Trains on one task against a frozen reference. `policy` is not modified.
pub fn train_task(
    exec: Exec,
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<PolicySnapshot> {
    train_task_traced(exec, policy, ref_policy, dataset, cfg, |_, _| {})
}

/// As [`train_task`], calling `trace(step, &policy)` before each update and
/// once more after the last.
pub fn train_task_traced<F>(
    exec: Exec,
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    mut trace: F,
) -> Result<PolicySnapshot>
where
    F: FnMut(usize, &PolicySnapshot),
{
    cfg.validate()?;
    if policy.is_frozen() {
        return Err(Error::Frozen);
    }
    if !ref_policy.is_frozen() {
        return Err(Error::invalid("reference policy must be frozen"));
    }
    if !policy.same_shape(ref_policy) {
        return Err(Error::PolicyMismatch);
    }
    let mut current = policy.clone();
    if cfg.steps == 0 {
        return Ok(current);
    }
    let n = dataset.train.len();
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    let objective = cfg.step_objective();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(dataset.task_id as u64);
    let mut velocity = vec![0.0; current.num_params()];
    let full = cfg.batch_size >= n;
    let mut batch: Vec<PreferenceTriple> = Vec::with_capacity(cfg.batch_size.min(n));
    for step in 0..cfg.steps {
        trace(step, &current);
        let grad = if full {
            objective.gradient(exec, &current, ref_policy, &dataset.train)?
        } else {
            let mut idx = index::sample(&mut rng, n, cfg.batch_size).into_vec();
            idx.sort_unstable();
            batch.clear();
            batch.extend(idx.iter().map(|&i| dataset.train[i].clone()));
            objective.gradient(exec, &current, ref_policy, &batch)?
        };
        let w = current.weights_mut()?;
        if cfg.momentum > 0.0 {
            for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *vi = cfg.momentum * *vi + gi;
                *wi -= cfg.learning_rate * *vi;
            }
        } else {
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= cfg.learning_rate * gi;
            }
        }
    }
    trace(cfg.steps, &current);
    Ok(current)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_group_accuracy: Vec<f64>,
    pub group_counts: Vec<usize>,
}

/// Exact-match accuracy of argmax predictions, overall and per group.
pub fn evaluate(
    exec: Exec,
    policy: &PolicySnapshot,
    eval: &[EvalExample],
    num_groups: usize,
) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(Error::Empty("eval split"));
    }
    let hits = par::try_map_slice(exec, eval, |e| -> Result<bool> {
        if e.group_id >= num_groups {
            return Err(Error::UnknownGroup {
                group: e.group_id,
                groups: num_groups,
            });
        }
        Ok(policy.predict(&e.context)? == e.gold)
    })?;
    let mut correct = vec![0usize; num_groups];
    let mut counts = vec![0usize; num_groups];
    for (e, &hit) in eval.iter().zip(&hits) {
        counts[e.group_id] += 1;
        correct[e.group_id] += hit as usize;
    }
    if let Some(group) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup { group });
    }
    let total: usize = correct.iter().sum();
    Ok(EvalReport {
        accuracy: total as f64 / eval.len() as f64,
        per_group_accuracy: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &n)| c as f64 / n as f64)
            .collect(),
        group_counts: counts,
    })
}

/// Lower-triangular `a[i][j]`: accuracy on task `j` after training through task `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    /// `groups[i][j][k]`: accuracy of group `k` of task `j` after step `i`.
    groups: Vec<Vec<Vec<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let groups = rows.iter().map(|r| vec![Vec::new(); r.len()]).collect();
        Self::with_groups(rows, groups)
    }

    pub fn with_groups(rows: Vec<Vec<f64>>, groups: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("accuracy matrix"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::invalid(format!(
                    "row {} has {} entries, expected {}",
                    i + 1,
                    r.len(),
                    i + 1
                )));
            }
            if let Some(x) = r.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::invalid(format!("accuracy {x} outside [0, 1]")));
            }
        }
        if groups.len() != rows.len() || groups.iter().zip(&rows).any(|(g, r)| g.len() != r.len()) {
            return Err(Error::invalid("group tensor does not match matrix shape"));
        }
        Ok(Self { rows, groups })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn group_accuracy(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.groups.get(i).and_then(|r| r.get(j)).map(|v| v.as_slice())
    }

    /// Rows are steps, columns are tasks; entries above the diagonal are empty.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut out = String::from("step");
        for j in 1..=t {
            write!(out, ",task_{j}").unwrap();
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            write!(out, "{}", i + 1).unwrap();
            for j in 0..t {
                match r.get(j) {
                    Some(x) => write!(out, ",{x}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// One line per (step, task, group).
    pub fn groups_csv(&self) -> String {
        let mut out = String::from("step,task,group,accuracy\n");
        for (i, row) in self.groups.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                for (k, x) in g.iter().enumerate() {
                    writeln!(out, "{},{},{},{x}", i + 1, j + 1, k).unwrap();
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub last_acc: Vec<f64>,
    pub mft: f64,
    pub mfn: f64,
    pub maa: f64,
    pub bwt: f64,
    /// Set when there is a single task and BWT is reported as 0.
    pub bwt_degenerate: bool,
    /// Final-row `max_k - min_k` group accuracy per task, when groups are known.
    pub group_gap: Vec<Option<f64>>,
    /// Mean over tasks of the final accuracy of each task's minority group.
    pub minority_final_acc: Option<f64>,
}

pub fn compute_metrics(matrix: &AccuracyMatrix) -> Result<MetricsReport> {
    let t = matrix.tasks();
    let rows = matrix.rows();
    let tf = t as f64;
    let last = rows[t - 1].clone();
    let mft = (0..t).map(|j| rows[j][j]).sum::<f64>() / tf;
    let mfn = last.iter().sum::<f64>() / tf;
    let maa = rows
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .sum::<f64>()
        / tf;
    let (bwt, bwt_degenerate) = if t < 2 {
        (0.0, true)
    } else {
        (
            (0..t - 1).map(|j| last[j] - rows[j][j]).sum::<f64>() / (tf - 1.0),
            false,
        )
    };
    let group_gap = (0..t)
        .map(|j| {
            let g = matrix.group_accuracy(t - 1, j)?;
            if g.is_empty() {
                return None;
            }
            let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
            Some(hi - lo)
        })
        .collect();
    Ok(MetricsReport {
        last_acc: last,
        mft,
        mfn,
        maa,
        bwt,
        bwt_degenerate,
        group_gap,
        minority_final_acc: None,
    })
}

/// Reference and trained policy of one continual step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCheckpoint {
    pub reference: PolicySnapshot,
    pub trained: PolicySnapshot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub matrix: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub checkpoints: Vec<StepCheckpoint>,
}

/// Trains on each task in turn, starting from the zero-weight policy and
/// freezing the current policy as the reference before every task.
pub fn run_sequence(
    exec: Exec,
    tasks: &[TaskDataset],
    vocab: &Vocabulary,
    dim: usize,
    cfg: &TrainConfig,
) -> Result<SequenceResult> {
    if tasks.is_empty() {
        return Err(Error::Empty("task sequence"));
    }
    cfg.validate()?;
    for t in tasks {
        t.validate()?;
        if t.eval.is_empty() {
            return Err(Error::Empty("eval split"));
        }
    }
    let mut current = PolicySnapshot::zeros(vocab.clone(), dim)?;
    let mut rows = Vec::with_capacity(tasks.len());
    let mut groups = Vec::with_capacity(tasks.len());
    let mut checkpoints = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let reference = current.freeze();
        let trained = train_task(exec, &current, &reference, task, cfg)?;
        let reports = tasks[..=t]
            .iter()
            .map(|seen| evaluate(exec, &trained, &seen.eval, seen.num_groups()))
            .collect::<Result<Vec<_>>>()?;
        rows.push(reports.iter().map(|r| r.accuracy).collect());
        groups.push(reports.into_iter().map(|r| r.per_group_accuracy).collect());
        checkpoints.push(StepCheckpoint {
            reference,
            trained: trained.clone(),
        });
        current = trained;
    }
    let matrix = AccuracyMatrix::with_groups(rows, groups)?;
    let mut metrics = compute_metrics(&matrix)?;
    let last = tasks.len() - 1;
    metrics.minority_final_acc = Some(
        tasks
            .iter()
            .enumerate()
            .map(|(j, task)| matrix.group_accuracy(last, j).expect("row exists")[task.minority_group()])
            .sum::<f64>()
            / tasks.len() as f64,
    );
    Ok(SequenceResult {
        matrix,
        metrics,
        checkpoints,
    })
}

/// Writes `step_<t>/policy.json`, `step_<t>/reference.json`, `matrix.csv`,
/// `metrics.json` and `groups.csv` under `dir`.
pub fn write_run_artifacts(dir: &Path, result: &SequenceResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, ck) in result.checkpoints.iter().enumerate() {
        let step = dir.join(format!("step_{}", t + 1));
        std::fs::create_dir_all(&step).map_err(|e| Error::io(&step, e))?;
        ck.trained.save(&step.join("policy.json"))?;
        ck.reference.save(&step.join("reference.json"))?;
    }
    write_atomic(&dir.join("matrix.csv"), result.matrix.to_csv().as_bytes())?;
    write_atomic(&dir.join("groups.csv"), result.matrix.groups_csv().as_bytes())?;
    write_json_atomic(&dir.join("metrics.json"), &result.metrics)
}
