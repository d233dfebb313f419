//! Linear-softmax conditional policies `pi(y | x) = softmax(W x)[y]` over a
//! finite answer vocabulary.
//!
//! Weights are a `V x d` row-major matrix. Gradients with respect to the
//! flattened weights are exact: row `v` of `d/dW log pi(y|x)` is
//! `(1{v = y} - pi(v|x)) * x`.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{log_softmax, FiniteDistribution};
use crate::error::{Error, Result};

/// Checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered answer labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    labels: Vec<String>,
}

impl Vocabulary {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::invalid("vocabulary needs at least two labels"));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::invalid(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// Labels `ans_0 .. ans_{size-1}`.
    pub fn numbered(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| format!("ans_{i}")).collect())
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.labels
    }
}

/// Feature embedding of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextFeatures(Vec<f64>);

impl ContextFeatures {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("context features must be finite"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Parameters of a linear-softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    vocab: Vocabulary,
    dim: usize,
    weights: Vec<f64>,
    frozen: bool,
}

impl PolicySnapshot {
    /// The all-zero (uniform) policy.
    pub fn zeros(vocab: Vocabulary, dim: usize) -> Result<Self> {
        let n = vocab.size() * dim;
        Self::from_weights(vocab, dim, vec![0.0; n])
    }

    pub fn from_weights(vocab: Vocabulary, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if weights.len() != vocab.size() * dim {
            return Err(Error::DimensionMismatch {
                expected: vocab.size() * dim,
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("policy weights must be finite"));
        }
        Ok(Self {
            vocab,
            dim,
            weights,
            frozen: false,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Deep copy marked immutable, for use as a reference policy.
    pub fn freeze(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    /// Deep copy that may be trained.
    pub fn thaw(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    pub fn weights_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.weights)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dim == other.dim && self.vocab == other.vocab
    }

    fn check_context(&self, x: &ContextFeatures) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.dim(),
            });
        }
        Ok(())
    }

    fn check_index(&self, y: usize) -> Result<()> {
        if y >= self.vocab_size() {
            return Err(Error::IndexOutOfRange {
                index: y,
                size: self.vocab_size(),
            });
        }
        Ok(())
    }

    /// `W x`.
    pub fn logits(&self, x: &ContextFeatures) -> Result<Vec<f64>> {
        self.check_context(x)?;
        let x = x.as_slice();
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(x).map(|(w, xi)| w * xi).sum())
            .collect())
    }

    /// `log pi(. | x)` for every answer.
    pub fn log_probs(&self, x: &ContextFeatures) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(x)?))
    }

    pub fn log_prob(&self, x: &ContextFeatures, y: usize) -> Result<f64> {
        self.check_index(y)?;
        Ok(self.log_probs(x)?[y])
    }

    pub fn conditional_dist(&self, x: &ContextFeatures) -> Result<FiniteDistribution> {
        let probs = self.log_probs(x)?.into_iter().map(f64::exp).collect();
        FiniteDistribution::new(probs)
    }

    /// Gradient of `log pi(y | x)` with respect to the flattened weights.
    pub fn grad_log_prob(&self, x: &ContextFeatures, y: usize) -> Result<Vec<f64>> {
        self.check_index(y)?;
        let probs: Vec<f64> = self.log_probs(x)?.into_iter().map(f64::exp).collect();
        let mut grad = vec![0.0; self.weights.len()];
        for (v, row) in grad.chunks_exact_mut(self.dim).enumerate() {
            let coef = if v == y { 1.0 - probs[v] } else { -probs[v] };
            for (g, xi) in row.iter_mut().zip(x.as_slice()) {
                *g = coef * xi;
            }
        }
        Ok(grad)
    }

    /// Inverse-CDF draw from `pi(. | x)`.
    pub fn sample<R: Rng + ?Sized>(&self, x: &ContextFeatures, rng: &mut R) -> Result<usize> {
        let dist = self.conditional_dist(x)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in dist.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
        // u landed in the rounding gap above the accumulated mass
        Ok(dist
            .probs()
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(dist.len() - 1))
    }

    /// Index of the most probable answer, ties broken by lowest index.
    pub fn predict(&self, x: &ContextFeatures) -> Result<usize> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate().skip(1) {
            if l > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Serializes to the checkpoint JSON format. Weights are written with 17
    /// significant digits so that reading them back is exact.
    pub fn to_checkpoint_json(&self) -> String {
        let labels = serde_json::to_string(self.vocab.labels()).expect("labels serialize");
        let weights: Vec<String> = self.weights.iter().map(|w| format!("{w:.16e}")).collect();
        format!(
            "{{\"version\":{CHECKPOINT_VERSION},\"V\":{},\"d\":{},\"labels\":{labels},\"weights\":[{}]}}\n",
            self.vocab_size(),
            self.dim,
            weights.join(",")
        )
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            version: u32,
            #[serde(rename = "V")]
            v: usize,
            d: usize,
            labels: Vec<String>,
            weights: Vec<f64>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        if raw.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                raw.version
            )));
        }
        if raw.labels.len() != raw.v {
            return Err(Error::Checkpoint(format!(
                "V = {} but {} labels",
                raw.v,
                raw.labels.len()
            )));
        }
        Self::from_weights(Vocabulary::new(raw.labels)?, raw.d, raw.weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_checkpoint_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

/// `beta * [log pi(y+|x)/pi_ref(y+|x) - log pi(y-|x)/pi_ref(y-|x)]`.
///
/// The log-partition terms of both policies cancel, so the value is
/// unchanged by any per-context shift of either policy's logits.
pub fn implicit_reward_diff(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    x: &ContextFeatures,
    y_plus: usize,
    y_minus: usize,
    beta: f64,
) -> Result<f64> {
    if !policy.same_shape(ref_policy) {
        return Err(Error::PolicyMismatch);
    }
    policy.check_index(y_plus)?;
    policy.check_index(y_minus)?;
    let cur = policy.logits(x)?;
    let reference = ref_policy.logits(x)?;
    Ok(beta * ((cur[y_plus] - cur[y_minus]) - (reference[y_plus] - reference[y_minus])))
}

/// Closed-form maximizer of `E_pi[r] - beta * KL(pi || ref)`:
/// `pi*(y) = ref(y) exp(r(y) / beta) / Z`.
pub fn optimal_boltzmann_policy(
    reference: &FiniteDistribution,
    rewards: &[f64],
    beta: f64,
) -> Result<FiniteDistribution> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if rewards.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            actual: rewards.len(),
        });
    }
    if let Some(i) = reference.probs().iter().position(|&p| p <= 0.0) {
        return Err(Error::UnboundedRatio { index: i });
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("rewards must be finite"));
    }
    let scores: Vec<f64> = reference
        .probs()
        .iter()
        .zip(rewards)
        .map(|(p, r)| p.ln() + r / beta)
        .collect();
    FiniteDistribution::softmax(&scores)
}
