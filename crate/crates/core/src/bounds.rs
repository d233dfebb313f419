//! Exact divergences on finite distributions and numerical checks of the
//! two bound chains relating `KL(pi_{t-1} || pi_t)` to the DPO loss.
//!
//! Every quantity is computed by exhaustive enumeration, never sampled. A
//! chain is reported link by link; a link whose assumptions do not hold on
//! the instance is reported with `preconditions_met = false` and never
//! counted as a violation.
//!
//! Conventions used throughout:
//!
//! - `h(y) = log pi_t(y) - log pi_{t-1}(y)` is the implicit reward, so a pair
//!   margin is `Delta(y+, y-) = h(y+) - h(y-)` and the DPO loss over pairs is
//!   `E[log(1 + exp(-beta Delta))]`.
//! - Candidates are two distinct draws from `Q = a pi_{t-1} + (1 - a) pi_t`;
//!   the labeling kernel prefers `y_a` with probability
//!   `sigmoid(beta (r(y_a) - r(y_b)))`.
//! - The outcome-level model preference is
//!   `q(y) = E_{y' ~ M}[sigmoid(beta (h(y) - h(y')))]` with
//!   `M = (P+ + P-) / 2`, the analogue of `eta = P+ / (P+ + P-)`.
//! - Metrics are the 0/1 metric, so `W1 = TV` and the exact Lipschitz
//!   constant of a function is its range.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{floored_ln, sigmoid, softplus, FiniteDistribution};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::transport::{wasserstein1, CostMatrix};

/// Transport-entropy constant under the 0/1 metric (`W1 = TV <= sqrt(KL / 2)`).
pub const C0_ZERO_ONE: f64 = 0.25;

/// Absolute tolerance on link slack.
pub const SLACK_TOL: f64 = 1e-10;

/// Clamp applied to Bernoulli parameters in calibration quantities.
pub const ETA_CLAMP: f64 = 1e-12;

/// KL divergence; `+inf` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &FiniteDistribution, q: &FiniteDistribution) -> Result<f64> {
    same_support(p, q)?;
    let mut total = 0.0;
    for (&a, &b) in p.probs().iter().zip(q.probs()) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            total += a * (floored_ln(a) - floored_ln(b));
        }
    }
    Ok(total.max(0.0))
}

pub fn total_variation(p: &FiniteDistribution, q: &FiniteDistribution) -> Result<f64> {
    same_support(p, q)?;
    Ok(0.5
        * p.probs()
            .iter()
            .zip(q.probs())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

fn same_support(p: &FiniteDistribution, q: &FiniteDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergenceSuite {
    pub kl_pq: f64,
    pub kl_qp: f64,
    pub kl_pq_infinite: bool,
    pub kl_qp_infinite: bool,
    pub tv: f64,
    pub w1: f64,
}

/// KL in both directions, TV, and W1. Without a metric W1 is taken under the
/// 0/1 metric, where it equals TV; with a metric it is the exact LP value.
pub fn divergence_suite(
    p: &FiniteDistribution,
    q: &FiniteDistribution,
    metric: Option<&CostMatrix>,
) -> Result<DivergenceSuite> {
    let kl_pq = kl_divergence(p, q)?;
    let kl_qp = kl_divergence(q, p)?;
    let tv = total_variation(p, q)?;
    let w1 = match metric {
        None => tv,
        Some(m) => wasserstein1(p, q, m)?,
    };
    Ok(DivergenceSuite {
        kl_pq,
        kl_qp,
        kl_pq_infinite: kl_pq.is_infinite(),
        kl_qp_infinite: kl_qp.is_infinite(),
        tv,
        w1,
    })
}

/// `M = max(max_i p_i / q_i, max_i q_i / p_i)`.
pub fn density_ratio_bound(p: &FiniteDistribution, q: &FiniteDistribution) -> Result<f64> {
    same_support(p, q)?;
    let mut m: f64 = 1.0;
    for (i, (&a, &b)) in p.probs().iter().zip(q.probs()).enumerate() {
        if a <= 0.0 || b <= 0.0 {
            return Err(Error::UnboundedRatio { index: i });
        }
        m = m.max(a / b).max(b / a);
    }
    Ok(m)
}

pub fn bernoulli_kl(a: f64, b: f64) -> f64 {
    let t = |x: f64, y: f64| if x > 0.0 { x * (x.ln() - y.ln()) } else { 0.0 };
    t(a, b) + t(1.0 - a, 1.0 - b)
}

pub fn binary_entropy(a: f64) -> f64 {
    let t = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    t(a) + t(1.0 - a)
}

pub fn binary_cross_entropy(target: f64, pred: f64) -> f64 {
    let t = |x: f64, y: f64| if x > 0.0 { -x * y.ln() } else { 0.0 };
    t(target, pred) + t(1.0 - target, 1.0 - pred)
}

/// `ln 2 - beta u / 2 <= log(1 + e^{-beta u})`, pointwise.
fn logistic(beta: f64, u: f64) -> f64 {
    softplus(-beta * u)
}

/// Previous and current policy at one context, with a labeling reward.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundInstance {
    pub ref_dist: FiniteDistribution,
    pub cur_dist: FiniteDistribution,
    pub rewards: Vec<f64>,
    pub beta: f64,
    pub mixture_alpha: f64,
}

impl BoundInstance {
    pub fn new(
        ref_dist: FiniteDistribution,
        cur_dist: FiniteDistribution,
        rewards: Vec<f64>,
        beta: f64,
        mixture_alpha: f64,
    ) -> Result<Self> {
        let inst = Self {
            ref_dist,
            cur_dist,
            rewards,
            beta,
            mixture_alpha,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Instance whose labeling reward is the implicit reward `h`, i.e. pairs
    /// are labeled by the Bradley-Terry model on the policies' own log-ratios.
    pub fn implicit(
        ref_dist: FiniteDistribution,
        cur_dist: FiniteDistribution,
        beta: f64,
        mixture_alpha: f64,
    ) -> Result<Self> {
        same_support(&ref_dist, &cur_dist)?;
        let rewards = cur_dist
            .probs()
            .iter()
            .zip(ref_dist.probs())
            .map(|(c, r)| floored_ln(*c) - floored_ln(*r))
            .collect();
        Self::new(ref_dist, cur_dist, rewards, beta, mixture_alpha)
    }

    pub fn validate(&self) -> Result<()> {
        same_support(&self.ref_dist, &self.cur_dist)?;
        if self.ref_dist.len() < 2 {
            return Err(Error::invalid("instances need at least two outcomes"));
        }
        if self.rewards.len() != self.ref_dist.len() {
            return Err(Error::DimensionMismatch {
                expected: self.ref_dist.len(),
                actual: self.rewards.len(),
            });
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid("rewards must be finite"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.mixture_alpha > 0.0 && self.mixture_alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "mixture alpha must lie in (0, 1], got {}",
                self.mixture_alpha
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ref_dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_dist.is_empty()
    }

    /// `h(y) = log pi_t(y) - log pi_{t-1}(y)`.
    pub fn implicit_reward(&self) -> Vec<f64> {
        self.cur_dist
            .probs()
            .iter()
            .zip(self.ref_dist.probs())
            .map(|(c, r)| floored_ln(*c) - floored_ln(*r))
            .collect()
    }
}

/// One inequality `lhs <= rhs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Link {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`.
    pub slack: f64,
    pub holds: bool,
    pub preconditions_met: bool,
}

impl Link {
    fn new(name: &'static str, lhs: f64, rhs: f64, preconditions_met: bool) -> Self {
        let slack = rhs - lhs;
        let holds = if lhs.is_nan() || rhs.is_nan() {
            false
        } else {
            lhs <= rhs || slack >= -SLACK_TOL
        };
        Self {
            name,
            lhs,
            rhs,
            slack,
            holds,
            preconditions_met,
        }
    }

    /// Counted as a violation only when its assumptions hold.
    pub fn violated(&self) -> bool {
        self.preconditions_met && !self.holds
    }
}

/// Exact pair marginals induced by mixture sampling and monotone labeling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMarginals {
    /// Candidate distribution `Q`.
    pub candidates: FiniteDistribution,
    /// Row-major `n x n` joint law of ordered `(y+, y-)`.
    pub joint: Vec<f64>,
    pub plus: FiniteDistribution,
    pub minus: FiniteDistribution,
    /// `M = (P+ + P-) / 2`.
    pub mixture: FiniteDistribution,
    pub eta: Vec<f64>,
    /// `TV(pi_{t-1}, pi_t) <= TV(P+, P-) / alpha`.
    pub mixture_tv: Link,
}

pub fn pair_construction(inst: &BoundInstance) -> Result<PairMarginals> {
    inst.validate()?;
    let n = inst.len();
    let a = inst.mixture_alpha;
    let candidates = inst.ref_dist.mix(&inst.cur_dist, a)?;
    let q = candidates.probs();
    let distinct: f64 = 1.0 - q.iter().map(|x| x * x).sum::<f64>();
    if distinct <= 0.0 {
        return Err(Error::invalid("candidate distribution is a point mass"));
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                // (a, b) = (i, j) picking a, or (j, i) picking b
                let win = sigmoid(inst.beta * (inst.rewards[i] - inst.rewards[j]));
                joint[i * n + j] = 2.0 * q[i] * q[j] * win / distinct;
            }
        }
    }
    let plus_raw: Vec<f64> = (0..n).map(|i| (0..n).map(|j| joint[i * n + j]).sum()).collect();
    let minus_raw: Vec<f64> = (0..n).map(|j| (0..n).map(|i| joint[i * n + j]).sum()).collect();
    let plus = FiniteDistribution::from_weights(&plus_raw)?;
    let minus = FiniteDistribution::from_weights(&minus_raw)?;
    let mixture = plus.mix(&minus, 0.5)?;
    let eta = plus
        .probs()
        .iter()
        .zip(minus.probs())
        .map(|(p, m)| if p + m > 0.0 { p / (p + m) } else { 0.5 })
        .collect();
    let tv_policies = total_variation(&inst.ref_dist, &inst.cur_dist)?;
    let tv_pairs = total_variation(&plus, &minus)?;
    let mixture_tv = Link::new("mixture_tv", tv_policies, tv_pairs / a, true);
    Ok(PairMarginals {
        candidates,
        joint,
        plus,
        minus,
        mixture,
        eta,
        mixture_tv,
    })
}

/// Outcome-level model preference `q(y) = E_{y'~M}[sigmoid(beta (h(y) - h(y')))]`.
pub fn model_preference(inst: &BoundInstance, pairs: &PairMarginals) -> Vec<f64> {
    let h = inst.implicit_reward();
    let m = pairs.mixture.probs();
    h.iter()
        .map(|hy| {
            h.iter()
                .zip(m)
                .map(|(hj, mj)| mj * sigmoid(inst.beta * (hy - hj)))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesRisk {
    pub loss: f64,
    pub bayes_loss: f64,
    pub excess: f64,
    /// `E_M[KL(Bern(eta) || Bern(q))]`, equal to `excess`.
    pub excess_kl_form: f64,
    /// Set when any `eta` or `q` had to be clamped into `[1e-12, 1 - 1e-12]`.
    pub clamped: bool,
}

/// Cross-entropy risk of predicting `q` for Bernoulli targets `eta` under `M`.
pub fn bayes_excess_risk(
    q_theta: &[f64],
    eta: &[f64],
    mixture: &FiniteDistribution,
) -> Result<BayesRisk> {
    let n = mixture.len();
    if q_theta.len() != n || eta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: if q_theta.len() != n { q_theta.len() } else { eta.len() },
        });
    }
    let mut clamped = false;
    let mut clamp = |x: f64| -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::invalid(format!("probability {x} outside [0, 1]")));
        }
        let c = x.clamp(ETA_CLAMP, 1.0 - ETA_CLAMP);
        clamped |= c != x;
        Ok(c)
    };
    let mut loss = 0.0;
    let mut bayes = 0.0;
    let mut kl = 0.0;
    for i in 0..n {
        let w = mixture.get(i);
        if w <= 0.0 {
            continue;
        }
        let e = clamp(eta[i])?;
        let q = clamp(q_theta[i])?;
        loss += w * binary_cross_entropy(e, q);
        bayes += w * binary_entropy(e);
        kl += w * bernoulli_kl(e, q);
    }
    Ok(BayesRisk {
        loss,
        bayes_loss: bayes,
        excess: loss - bayes,
        excess_kl_form: kl,
        clamped,
    })
}

/// `C_lower = M^3 beta^2 9 L^2 C0`.
pub fn lower_constant(beta: f64, lipschitz: f64, c0: f64, ratio_bound: f64) -> f64 {
    ratio_bound.powi(3) * beta * beta * 9.0 * lipschitz * lipschitz * c0
}

/// `C_upper = 16 / alpha^2`.
pub fn upper_constant(alpha: f64) -> f64 {
    16.0 / (alpha * alpha)
}

/// Per-instance constants and the exact quantities the chains are built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainQuantities {
    pub kl_forward: f64,
    pub kl_reverse: f64,
    pub tv_policies: f64,
    pub tv_pairs: f64,
    pub w1_policies_lp: f64,
    pub dpo_loss: f64,
    pub mean_margin: f64,
    pub lipschitz: f64,
    pub ratio_bound: f64,
    pub c0: f64,
    pub c_lower: f64,
    pub c_upper: f64,
    pub calibration: BayesRisk,
    pub sign_consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReport {
    pub bound: &'static str,
    pub links: Vec<Link>,
    pub composed: Link,
}

impl ChainReport {
    /// `Some(holds)` for the composed bound when its assumptions hold.
    pub fn verdict(&self) -> Option<bool> {
        self.composed
            .preconditions_met
            .then_some(self.composed.holds)
    }

    pub fn link(&self, name: &str) -> Option<&Link> {
        self.links.iter().find(|l| l.name == name)
    }
}

fn pair_loss_and_margin(inst: &BoundInstance, pairs: &PairMarginals, h: &[f64]) -> (f64, f64, f64) {
    let n = inst.len();
    let mut loss = 0.0;
    let mut margin = 0.0;
    let mut worst_floor_gap = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            let w = pairs.joint[i * n + j];
            if w <= 0.0 {
                continue;
            }
            let d = h[i] - h[j];
            let l = logistic(inst.beta, d);
            loss += w * l;
            margin += w * d;
            worst_floor_gap = worst_floor_gap.max((LN_2 - inst.beta * d / 2.0) - l);
        }
    }
    (loss, margin, worst_floor_gap)
}

pub fn chain_quantities(inst: &BoundInstance, pairs: &PairMarginals) -> Result<ChainQuantities> {
    let ratio_bound = density_ratio_bound(&inst.ref_dist, &inst.cur_dist)?;
    let h = inst.implicit_reward();
    let (dpo_loss, mean_margin, _) = pair_loss_and_margin(inst, pairs, &h);
    let lipschitz = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - h.iter().cloned().fold(f64::INFINITY, f64::min);
    let q = model_preference(inst, pairs);
    let calibration = bayes_excess_risk(&q, &pairs.eta, &pairs.mixture)?;
    let sign = |x: f64| {
        if x > 0.5 {
            1
        } else if x < 0.5 {
            -1
        } else {
            0
        }
    };
    let sign_consistent = q
        .iter()
        .zip(&pairs.eta)
        .zip(pairs.mixture.probs())
        .all(|((qi, ei), mi)| *mi <= 0.0 || sign(*qi) == sign(*ei));
    Ok(ChainQuantities {
        kl_forward: kl_divergence(&inst.ref_dist, &inst.cur_dist)?,
        kl_reverse: kl_divergence(&inst.cur_dist, &inst.ref_dist)?,
        tv_policies: total_variation(&inst.ref_dist, &inst.cur_dist)?,
        tv_pairs: total_variation(&pairs.plus, &pairs.minus)?,
        w1_policies_lp: wasserstein1(
            &inst.cur_dist,
            &inst.ref_dist,
            &CostMatrix::zero_one(inst.len()),
        )?,
        dpo_loss,
        mean_margin,
        lipschitz,
        ratio_bound,
        c0: C0_ZERO_ONE,
        c_lower: lower_constant(inst.beta, lipschitz, C0_ZERO_ONE, ratio_bound),
        c_upper: upper_constant(inst.mixture_alpha),
        calibration,
        sign_consistent,
    })
}

/// Lower chain: `KL(pi_{t-1} || pi_t) >= (ln 2 - L_DPO)^2 / C_lower`.
pub fn lower_bound_check(inst: &BoundInstance) -> Result<ChainReport> {
    let pairs = pair_construction(inst)?;
    lower_chain(inst, &pairs, &chain_quantities(inst, &pairs)?)
}

fn lower_chain(
    inst: &BoundInstance,
    pairs: &PairMarginals,
    c: &ChainQuantities,
) -> Result<ChainReport> {
    let h = inst.implicit_reward();
    let (_, _, floor_gap) = pair_loss_and_margin(inst, pairs, &h);
    let w1_pairs = c.tv_pairs;
    let w1_policies = c.tv_policies;
    let w1_plus_cur = total_variation(&pairs.plus, &inst.cur_dist)?;
    let w1_minus_ref = total_variation(&pairs.minus, &inst.ref_dist)?;

    let anchoring = Link::new("anchoring", w1_pairs, 3.0 * w1_policies, true);
    let links = vec![
        Link::new("margin_floor_pointwise", floor_gap, 0.0, true),
        Link::new(
            "margin_floor",
            LN_2 - inst.beta / 2.0 * c.mean_margin,
            c.dpo_loss,
            true,
        ),
        Link::new("ipm", c.mean_margin, c.lipschitz * w1_pairs, true),
        Link::new("w1_zero_one_identity", (c.w1_policies_lp - c.tv_policies).abs(), 1e-9, true),
        anchoring.clone(),
        Link::new("anchor_plus", w1_plus_cur, w1_policies, true),
        Link::new("anchor_minus", w1_minus_ref, w1_policies, true),
        Link::new(
            "transport_entropy",
            w1_policies,
            (2.0 * c.c0 * c.kl_reverse).sqrt(),
            true,
        ),
        Link::new("ratio", c.kl_reverse / c.ratio_bound.powi(3), c.kl_forward, true),
    ];
    let gap = LN_2 - c.dpo_loss;
    let lhs = if gap == 0.0 || (c.c_lower == 0.0 && gap.abs() < 1e-15) {
        0.0
    } else {
        gap * gap / c.c_lower
    };
    // squaring ln 2 - L <= ... needs ln 2 - L >= 0
    let pre = anchoring.holds && gap >= 0.0;
    Ok(ChainReport {
        bound: "lower",
        links,
        composed: Link::new("composed_lower", lhs, c.kl_forward, pre),
    })
}

/// Upper chain: `KL(pi_{t-1} || pi_t) <= (16 / alpha^2) L_DPO`.
pub fn upper_bound_check(inst: &BoundInstance) -> Result<ChainReport> {
    let pairs = pair_construction(inst)?;
    upper_chain(inst, &pairs, &chain_quantities(inst, &pairs)?)
}

fn upper_chain(
    inst: &BoundInstance,
    pairs: &PairMarginals,
    c: &ChainQuantities,
) -> Result<ChainReport> {
    let q = model_preference(inst, pairs);
    let margin_control = q
        .iter()
        .zip(&pairs.eta)
        .map(|(qi, ei)| (qi - 0.5).abs() - (ei - qi).abs())
        .fold(f64::NEG_INFINITY, f64::max);
    let excess = c.calibration.excess.max(0.0);
    let links = vec![
        Link::new("pinsker", c.tv_policies, (c.kl_forward / 2.0).sqrt(), true),
        // the direction the published chain uses; Pinsker gives the reverse
        Link::new(
            "pinsker_as_used",
            c.kl_forward,
            2.0 * c.tv_policies * c.tv_policies,
            true,
        ),
        pairs.mixture_tv.clone(),
        Link::new("margin_control", margin_control, 0.0, c.sign_consistent),
        Link::new(
            "calibration",
            c.tv_pairs,
            2.0 * 2f64.sqrt() * excess.sqrt(),
            c.sign_consistent,
        ),
        Link::new(
            "excess_identity",
            (c.calibration.excess - c.calibration.excess_kl_form).abs(),
            1e-10,
            true,
        ),
    ];
    let pre = c.sign_consistent && pairs.mixture_tv.holds;
    Ok(ChainReport {
        bound: "upper",
        links,
        composed: Link::new("composed_upper", c.kl_forward, c.c_upper * c.dpo_loss, pre),
    })
}

/// Both chains on one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceReport {
    pub index: usize,
    pub n: usize,
    pub beta: f64,
    pub mixture_alpha: f64,
    pub quantities: ChainQuantities,
    pub lower: ChainReport,
    pub upper: ChainReport,
}

impl InstanceReport {
    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.lower
            .links
            .iter()
            .chain(std::iter::once(&self.lower.composed))
            .chain(self.upper.links.iter())
            .chain(std::iter::once(&self.upper.composed))
    }
}

pub fn check_instance(index: usize, inst: &BoundInstance) -> Result<InstanceReport> {
    let pairs = pair_construction(inst)?;
    let quantities = chain_quantities(inst, &pairs)?;
    Ok(InstanceReport {
        index,
        n: inst.len(),
        beta: inst.beta,
        mixture_alpha: inst.mixture_alpha,
        lower: lower_chain(inst, &pairs, &quantities)?,
        upper: upper_chain(inst, &pairs, &quantities)?,
        quantities,
    })
}

/// How random instances are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceFamily {
    /// Pairs labeled by the Bradley-Terry model on the implicit reward.
    #[default]
    Implicit,
    /// Labeling reward drawn independently of the policies.
    IndependentReward,
}

/// Betas the random instances draw from.
pub const SWEEP_BETAS: [f64; 6] = [0.01, 0.05, 0.1, 0.5, 1.0, 2.0];

/// Random strictly positive instance. `pi_{t-1}` is a softmax of standard
/// normal logits; `pi_t` perturbs those logits with noise of scale in
/// `[0.1, 1.5)`; alpha is uniform on `(0, 1]` floored at 0.05.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    family: InstanceFamily,
) -> Result<BoundInstance> {
    let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    let base: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let shift = rng.random_range(0.1..1.5);
    let cur: Vec<f64> = base.iter().map(|b| b + shift * normal(rng)).collect();
    let ref_dist = FiniteDistribution::softmax(&base)?;
    let cur_dist = FiniteDistribution::softmax(&cur)?;
    let beta = SWEEP_BETAS[rng.random_range(0..SWEEP_BETAS.len())];
    let alpha = (1.0 - rng.random::<f64>()).max(0.05);
    match family {
        InstanceFamily::Implicit => BoundInstance::implicit(ref_dist, cur_dist, beta, alpha),
        InstanceFamily::IndependentReward => {
            let rewards = (0..n).map(|_| normal(rng)).collect();
            BoundInstance::new(ref_dist, cur_dist, rewards, beta, alpha)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LinkTally {
    pub checked: usize,
    pub preconditions_met: usize,
    pub holds: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub instances: usize,
    /// Instances where at least one composed bound had its assumptions met.
    pub preconditions_met: usize,
    /// Composed-bound violations among precondition-met instances.
    pub violations: usize,
    pub lower_preconditions_met: usize,
    pub lower_violations: usize,
    pub upper_preconditions_met: usize,
    pub upper_violations: usize,
    pub links: Vec<(String, LinkTally)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub seed: u64,
    pub n: usize,
    pub family: InstanceFamily,
    pub transport_entropy_constant: &'static str,
    pub aggregate: Aggregate,
    pub instances: Vec<InstanceReport>,
}

impl SweepReport {
    pub fn tally(&self, name: &str) -> Option<LinkTally> {
        self.aggregate
            .links
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
    }
}

/// Checks `count` seeded instances; instance `i` uses ChaCha8 stream `i`.
pub fn verify_sweep(
    count: usize,
    n: usize,
    seed: u64,
    family: InstanceFamily,
    exec: Exec,
) -> Result<SweepReport> {
    if n < 2 {
        return Err(Error::invalid("instances need n >= 2"));
    }
    let reports: Vec<Result<InstanceReport>> = par::map_range(exec, count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let inst = random_instance(&mut rng, n, family)?;
        check_instance(i, &inst)
    });
    let instances = reports.into_iter().collect::<Result<Vec<_>>>()?;

    let mut names: Vec<&'static str> = Vec::new();
    let mut tallies: Vec<LinkTally> = Vec::new();
    let mut agg = Aggregate {
        instances: instances.len(),
        preconditions_met: 0,
        violations: 0,
        lower_preconditions_met: 0,
        lower_violations: 0,
        upper_preconditions_met: 0,
        upper_violations: 0,
        links: Vec::new(),
    };
    for r in &instances {
        for link in r.links() {
            let idx = match names.iter().position(|n| *n == link.name) {
                Some(i) => i,
                None => {
                    names.push(link.name);
                    tallies.push(LinkTally::default());
                    names.len() - 1
                }
            };
            let t = &mut tallies[idx];
            t.checked += 1;
            t.preconditions_met += link.preconditions_met as usize;
            t.holds += link.holds as usize;
            t.violations += link.violated() as usize;
        }
        let lo = r.lower.verdict();
        let up = r.upper.verdict();
        agg.lower_preconditions_met += lo.is_some() as usize;
        agg.upper_preconditions_met += up.is_some() as usize;
        agg.lower_violations += (lo == Some(false)) as usize;
        agg.upper_violations += (up == Some(false)) as usize;
        if lo.is_some() || up.is_some() {
            agg.preconditions_met += 1;
        }
        if lo == Some(false) || up == Some(false) {
            agg.violations += 1;
        }
    }
    agg.links = names.into_iter().map(String::from).zip(tallies).collect();
    Ok(SweepReport {
        seed,
        n,
        family,
        transport_entropy_constant: "C0 = 1/4 (Pinsker under the 0/1 metric)",
        aggregate: agg,
        instances,
    })
}
