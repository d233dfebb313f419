//! Preference objectives over batches of `(x, y+, y-)` triples and their
//! exact gradients.
//!
//! With `s = beta * [(log pi(y+) - log pi_ref(y+)) - (log pi(y-) - log pi_ref(y-))]`
//! and `p = sigmoid(s)`:
//!
//! ```text
//! dpo       = mean(-log p)
//! fair_dpo  = mean(-(1 - p)^gamma log p)
//! kd        = mean KL(pi_ref(.|x) || pi(.|x))
//! sft       = mean(-log pi(y+|x))
//! step      = sft + lambda * fair_dpo
//! ```
//!
//! All batch reductions are left-to-right sums in record order divided by the
//! batch size.

use serde::{Deserialize, Serialize};

use crate::dist::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::fairness::ModulatorForm;
use crate::par::{self, Exec};
use crate::policy::{implicit_reward_diff, ContextFeatures, PolicySnapshot};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// One preference pair with its group and task labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub context: ContextFeatures,
    pub chosen: usize,
    pub rejected: usize,
    pub group_id: usize,
    pub task_id: usize,
    pub record_id: String,
}

impl PreferenceTriple {
    pub fn new(
        context: ContextFeatures,
        chosen: usize,
        rejected: usize,
        group_id: usize,
        task_id: usize,
        record_id: impl Into<String>,
    ) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::invalid("chosen and rejected answers must differ"));
        }
        Ok(Self {
            context,
            chosen,
            rejected,
            group_id,
            task_id,
            record_id: record_id.into(),
        })
    }

    fn check(&self, policy: &PolicySnapshot) -> Result<()> {
        let v = policy.vocab_size();
        for idx in [self.chosen, self.rejected] {
            if idx >= v {
                return Err(Error::IndexOutOfRange { index: idx, size: v });
            }
        }
        if self.chosen == self.rejected {
            return Err(Error::invalid(format!(
                "record {}: chosen == rejected",
                self.record_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda_dpo: f64,
    pub modulator_form: ModulatorForm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            lambda_dpo: DEFAULT_LAMBDA,
            modulator_form: ModulatorForm::ExactDerivative,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda_dpo >= 0.0 && self.lambda_dpo.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda_dpo must be >= 0, got {}",
                self.lambda_dpo
            )));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("beta must be > 0, got {beta}")))
    }
}

fn non_empty<T>(batch: &[T], what: &'static str) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Empty(what))
    } else {
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// The implicit-reward margin `s(z)`.
pub fn margin(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    z: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    z.check(policy)?;
    implicit_reward_diff(policy, ref_policy, &z.context, z.chosen, z.rejected, beta)
}

/// Bradley-Terry preference probability `sigmoid(s)`.
pub fn bt_probability(s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(Error::invalid(format!("margin must be finite, got {s}")));
    }
    Ok(sigmoid(s))
}

/// Per-sample focal DPO loss `-(1 - sigmoid(s))^gamma log sigmoid(s)`.
pub fn focal_term(s: f64, gamma: f64) -> f64 {
    sigmoid(-s).powf(gamma) * softplus(-s)
}

/// `d/ds` of [`focal_term`]:
/// `-(1 - p)^gamma [(1 - p) - gamma p log p]`. At `gamma = 0` this is `p - 1`.
pub fn focal_derivative(s: f64, gamma: f64) -> f64 {
    let p = sigmoid(s);
    let q = sigmoid(-s);
    let log_p = -softplus(-s);
    -(q.powf(gamma) * (q - gamma * p * log_p))
}

/// `d/ds` of the vanilla per-sample DPO loss `-log sigmoid(s)`.
pub fn dpo_derivative(s: f64) -> f64 {
    -sigmoid(-s)
}

fn margins(
    exec: Exec,
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    beta: f64,
) -> Result<Vec<f64>> {
    check_beta(beta)?;
    if !policy.same_shape(ref_policy) {
        return Err(Error::PolicyMismatch);
    }
    par::try_map_slice(exec, batch, |z| margin(policy, ref_policy, z, beta))
}

pub fn dpo_loss(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    beta: f64,
) -> Result<f64> {
    non_empty(batch, "batch")?;
    let s = margins(Exec::Parallel, policy, ref_policy, batch, beta)?;
    Ok(mean(&s.iter().map(|&s| softplus(-s)).collect::<Vec<_>>()))
}

pub fn fair_dpo_loss(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    non_empty(batch, "batch")?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    let s = margins(Exec::Parallel, policy, ref_policy, batch, beta)?;
    Ok(mean(
        &s.iter().map(|&s| focal_term(s, gamma)).collect::<Vec<_>>(),
    ))
}

fn kl_terms(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    x: &ContextFeatures,
) -> Result<f64> {
    let cur = policy.log_probs(x)?;
    let reference = ref_policy.log_probs(x)?;
    let kl: f64 = reference
        .iter()
        .zip(&cur)
        .map(|(lr, lc)| lr.exp() * (lr - lc))
        .sum();
    Ok(kl.max(0.0))
}

/// Mean of `KL(pi_ref(.|x) || pi(.|x))` over the contexts.
pub fn kd_loss(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    contexts: &[ContextFeatures],
) -> Result<f64> {
    non_empty(contexts, "context set")?;
    if !policy.same_shape(ref_policy) {
        return Err(Error::PolicyMismatch);
    }
    let terms = par::try_map_slice(Exec::Parallel, contexts, |x| kl_terms(policy, ref_policy, x))?;
    Ok(mean(&terms))
}

/// Mean negative log-likelihood of the chosen answers.
pub fn sft_nll(policy: &PolicySnapshot, batch: &[PreferenceTriple]) -> Result<f64> {
    non_empty(batch, "batch")?;
    let terms = par::try_map_slice(Exec::Parallel, batch, |z| {
        z.check(policy)?;
        Ok::<_, Error>(-policy.log_prob(&z.context, z.chosen)?)
    })?;
    Ok(mean(&terms))
}

/// `sft_nll + lambda * fair_dpo_loss`.
pub fn combined_step_objective(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    cfg.validate()?;
    let sft = sft_nll(policy, batch)?;
    let pref = fair_dpo_loss(policy, ref_policy, batch, cfg.beta, cfg.gamma)?;
    Ok(sft + cfg.lambda_dpo * pref)
}

/// Exact gradient of [`combined_step_objective`].
pub fn objective_gradient(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    StepObjective::FairDpo {
        beta: cfg.beta,
        gamma: cfg.gamma,
        lambda: cfg.lambda_dpo,
    }
    .gradient(Exec::Parallel, policy, ref_policy, batch)
}

/// `(log(1 + e^{-beta u}), log 2 - beta u / 2)`; the first never falls below
/// the second because the right side is the tangent of a convex function at 0.
pub fn logistic_margin_floor(u: f64, beta: f64) -> Result<(f64, f64)> {
    if !u.is_finite() {
        return Err(Error::invalid("margin must be finite"));
    }
    check_beta(beta)?;
    Ok((softplus(-beta * u), std::f64::consts::LN_2 - beta * u / 2.0))
}

/// The per-step training objectives of the continual trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepObjective {
    Sft,
    /// `sft + weight * kd`.
    Kd { weight: f64 },
    /// `sft + lambda * dpo`.
    Dpo { beta: f64, lambda: f64 },
    /// `sft + lambda * fair_dpo`.
    FairDpo { beta: f64, gamma: f64, lambda: f64 },
}

struct SampleTerms {
    logp: Vec<f64>,
    probs: Vec<f64>,
    ref_logp: Option<Vec<f64>>,
    margin: f64,
    log_chosen: f64,
}

impl StepObjective {
    fn needs_reference(&self) -> bool {
        !matches!(self, StepObjective::Sft)
    }

    fn beta(&self) -> f64 {
        match *self {
            StepObjective::Dpo { beta, .. } | StepObjective::FairDpo { beta, .. } => beta,
            _ => 1.0,
        }
    }

    fn sample_terms(
        &self,
        policy: &PolicySnapshot,
        ref_policy: &PolicySnapshot,
        z: &PreferenceTriple,
    ) -> Result<SampleTerms> {
        z.check(policy)?;
        let logp = policy.log_probs(&z.context)?;
        let ref_logp = if self.needs_reference() {
            Some(ref_policy.log_probs(&z.context)?)
        } else {
            None
        };
        let margin = match (&ref_logp, self) {
            (Some(r), StepObjective::Dpo { .. } | StepObjective::FairDpo { .. }) => {
                self.beta() * ((logp[z.chosen] - r[z.chosen]) - (logp[z.rejected] - r[z.rejected]))
            }
            _ => 0.0,
        };
        Ok(SampleTerms {
            log_chosen: logp[z.chosen],
            probs: logp.iter().map(|l| l.exp()).collect(),
            logp,
            ref_logp,
            margin,
        })
    }

    fn check(&self, policy: &PolicySnapshot, ref_policy: &PolicySnapshot) -> Result<()> {
        match *self {
            StepObjective::Sft => {}
            StepObjective::Kd { weight } => {
                if !(weight >= 0.0 && weight.is_finite()) {
                    return Err(Error::invalid("kd weight must be >= 0"));
                }
            }
            StepObjective::Dpo { beta, lambda } | StepObjective::FairDpo { beta, lambda, .. } => {
                check_beta(beta)?;
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::invalid("lambda must be >= 0"));
                }
            }
        }
        if let StepObjective::FairDpo { gamma, .. } = *self {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::invalid("gamma must be >= 0"));
            }
        }
        if self.needs_reference() && !policy.same_shape(ref_policy) {
            return Err(Error::PolicyMismatch);
        }
        Ok(())
    }

    /// Objective value on a batch.
    pub fn value(
        &self,
        exec: Exec,
        policy: &PolicySnapshot,
        ref_policy: &PolicySnapshot,
        batch: &[PreferenceTriple],
    ) -> Result<f64> {
        non_empty(batch, "batch")?;
        self.check(policy, ref_policy)?;
        let terms = par::try_map_slice(exec, batch, |z| self.sample_terms(policy, ref_policy, z))?;
        let n = batch.len() as f64;
        let sft = terms.iter().map(|t| -t.log_chosen).sum::<f64>() / n;
        let extra = match *self {
            StepObjective::Sft => return Ok(sft),
            StepObjective::Kd { weight } => {
                let kd = terms
                    .iter()
                    .map(|t| {
                        let r = t.ref_logp.as_ref().expect("reference log-probs");
                        let kl: f64 = r
                            .iter()
                            .zip(&t.logp)
                            .map(|(lr, lc)| lr.exp() * (lr - lc))
                            .sum();
                        kl.max(0.0)
                    })
                    .sum::<f64>()
                    / n;
                weight * kd
            }
            StepObjective::Dpo { lambda, .. } => {
                lambda * terms.iter().map(|t| softplus(-t.margin)).sum::<f64>() / n
            }
            StepObjective::FairDpo { gamma, lambda, .. } => {
                lambda * terms.iter().map(|t| focal_term(t.margin, gamma)).sum::<f64>() / n
            }
        };
        Ok(sft + extra)
    }

    /// Exact gradient of [`StepObjective::value`] with respect to the
    /// flattened policy weights.
    pub fn gradient(
        &self,
        exec: Exec,
        policy: &PolicySnapshot,
        ref_policy: &PolicySnapshot,
        batch: &[PreferenceTriple],
    ) -> Result<Vec<f64>> {
        non_empty(batch, "batch")?;
        self.check(policy, ref_policy)?;
        let terms = par::try_map_slice(exec, batch, |z| self.sample_terms(policy, ref_policy, z))?;
        let d = policy.dim();
        let np = policy.num_params();
        let mut sft = vec![0.0; np];
        let mut extra = vec![0.0; np];

        for (z, t) in batch.iter().zip(&terms) {
            let x = z.context.as_slice();
            // -grad log pi(y+|x): row v gets (p_v - 1{v=y+}) x
            for (v, row) in sft.chunks_exact_mut(d).enumerate() {
                let c = if v == z.chosen { t.probs[v] - 1.0 } else { t.probs[v] };
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += c * xi;
                }
            }
            match *self {
                StepObjective::Sft => {}
                StepObjective::Kd { .. } => {
                    // grad KL(ref || cur): row v gets (p_v - ref_v) x
                    let r = t.ref_logp.as_ref().expect("reference log-probs");
                    for (v, row) in extra.chunks_exact_mut(d).enumerate() {
                        let c = t.probs[v] - r[v].exp();
                        for (g, xi) in row.iter_mut().zip(x) {
                            *g += c * xi;
                        }
                    }
                }
                StepObjective::Dpo { beta, .. } | StepObjective::FairDpo { beta, .. } => {
                    let coef = match *self {
                        StepObjective::FairDpo { gamma, .. } => focal_derivative(t.margin, gamma),
                        _ => dpo_derivative(t.margin),
                    };
                    // grad s = beta (e_{y+} - e_{y-}) x
                    let c = coef * beta;
                    for (g, xi) in extra[z.chosen * d..(z.chosen + 1) * d].iter_mut().zip(x) {
                        *g += c * xi;
                    }
                    for (g, xi) in extra[z.rejected * d..(z.rejected + 1) * d]
                        .iter_mut()
                        .zip(x)
                    {
                        *g -= c * xi;
                    }
                }
            }
        }

        let n = batch.len() as f64;
        let weight = match *self {
            StepObjective::Sft => 0.0,
            StepObjective::Kd { weight } => weight,
            StepObjective::Dpo { lambda, .. } | StepObjective::FairDpo { lambda, .. } => lambda,
        };
        Ok(sft
            .iter()
            .zip(&extra)
            .map(|(s, e)| s / n + weight * (e / n))
            .collect())
    }
}

/// Gradient of the margin `s(z)` with respect to the flattened weights.
pub fn margin_gradient(policy: &PolicySnapshot, z: &PreferenceTriple, beta: f64) -> Result<Vec<f64>> {
    z.check(policy)?;
    if z.context.dim() != policy.dim() {
        return Err(Error::DimensionMismatch {
            expected: policy.dim(),
            actual: z.context.dim(),
        });
    }
    let d = policy.dim();
    let mut g = vec![0.0; policy.num_params()];
    for (i, xi) in z.context.as_slice().iter().enumerate() {
        g[z.chosen * d + i] += beta * xi;
        g[z.rejected * d + i] -= beta * xi;
    }
    Ok(g)
}
