//! Group-wise decomposition of the DPO gradient and the bias induced by an
//! imbalanced group mixture.
//!
//! For groups `G_1..G_K` with observed weights `q` and balanced target
//! weights `q'`:
//!
//! ```text
//! m_k       = E[(p(z) - 1) grad s(z) | z in G_k]
//! w_k^gamma = E[alpha_gamma(p(z)) | z in G_k]
//! B_gamma   = sum_k (q_k - q'_k) w_k^gamma m_k
//! ```
//!
//! Two modulators are available. [`ModulatorForm::Published`] is the published
//! expression `(1-p)^(gamma-1) [(1-p) + gamma p log p]`;
//! [`ModulatorForm::ExactDerivative`] flips the sign of the `gamma p log p`
//! term and is the one for which `(p - 1) alpha` is the derivative of the
//! focal loss. Training always uses the exact derivative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{sigmoid, MASS_TOL};
use crate::error::{Error, Result};
use crate::objectives::{margin, margin_gradient, PreferenceTriple, DEFAULT_BETA};
use crate::par::{self, Exec};
use crate::policy::{ContextFeatures, PolicySnapshot, Vocabulary};

/// Normalizer floor for [`GammaSweepRow::bias_norm_normalized`].
pub const NORMALIZER_FLOOR: f64 = 1e-300;

/// The focusing grid of the published gamma ablation.
pub const DEFAULT_GAMMAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulatorForm {
    Published,
    #[default]
    ExactDerivative,
}

/// K disjoint groups with observed and target mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPartition {
    pub observed_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid(format!("{what} must be non-negative")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > MASS_TOL {
        return Err(Error::invalid(format!("{what} sum to {s}, expected 1")));
    }
    Ok(())
}

impl GroupPartition {
    pub fn new(observed_weights: Vec<f64>, target_weights: Vec<f64>) -> Result<Self> {
        let p = Self {
            observed_weights,
            target_weights,
        };
        p.validate()?;
        Ok(p)
    }

    /// Observed weights with a uniform target.
    pub fn balanced_target(observed_weights: Vec<f64>) -> Result<Self> {
        let k = observed_weights.len();
        Self::new(observed_weights, vec![1.0 / k as f64; k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed_weights.is_empty() {
            return Err(Error::invalid("partition needs at least one group"));
        }
        if self.observed_weights.len() != self.target_weights.len() {
            return Err(Error::invalid(format!(
                "observed weights have {} groups, target weights {}",
                self.observed_weights.len(),
                self.target_weights.len()
            )));
        }
        check_simplex(&self.observed_weights, "observed weights")?;
        check_simplex(&self.target_weights, "target weights")
    }

    pub fn num_groups(&self) -> usize {
        self.observed_weights.len()
    }
}

/// `alpha_gamma(p)` in the requested form.
///
/// Evaluated as `(1-p)^gamma * (1 +- gamma p log p / (1-p))`, which equals
/// the textbook expression and is exactly 1 at `gamma = 0`.
pub fn modulator(p: f64, gamma: f64, form: ModulatorForm) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("p must lie in (0, 1), got {p}")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    let q = 1.0 - p;
    let t = gamma * p * p.ln() / q;
    let bracket = match form {
        ModulatorForm::Published => 1.0 + t,
        ModulatorForm::ExactDerivative => 1.0 - t,
    };
    Ok(q.powf(gamma) * bracket)
}

/// Triangle-inequality envelope `(1-p)^(gamma-1) [(1-p) + gamma p |log p|]`
/// bounding both modulator forms.
pub fn modulator_envelope(p: f64, gamma: f64) -> f64 {
    let q = 1.0 - p;
    q.powf(gamma) * (1.0 + gamma * p * p.ln().abs() / q)
}

/// Per-sample `p(z)` and group membership, with the group mean gradients.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub probs: Vec<f64>,
    pub groups: Vec<usize>,
    pub counts: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

impl GroupStats {
    pub fn compute(
        policy: &PolicySnapshot,
        ref_policy: &PolicySnapshot,
        batch: &[PreferenceTriple],
        partition: &GroupPartition,
        beta: f64,
    ) -> Result<Self> {
        partition.validate()?;
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let k = partition.num_groups();
        if let Some(z) = batch.iter().find(|z| z.group_id >= k) {
            return Err(Error::UnknownGroup {
                group: z.group_id,
                groups: k,
            });
        }
        let terms = par::try_map_slice(Exec::Parallel, batch, |z| {
            let s = margin(policy, ref_policy, z, beta)?;
            Ok::<_, Error>((sigmoid(s), margin_gradient(policy, z, beta)?))
        })?;
        let np = policy.num_params();
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; np]; k];
        for (z, (p, gs)) in batch.iter().zip(&terms) {
            counts[z.group_id] += 1;
            for (acc, g) in sums[z.group_id].iter_mut().zip(gs) {
                *acc += (p - 1.0) * g;
            }
        }
        if let Some(group) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyGroup { group });
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        Ok(Self {
            probs: terms.iter().map(|(p, _)| *p).collect(),
            groups: batch.iter().map(|z| z.group_id).collect(),
            counts,
            means,
        })
    }

    pub fn weights(&self, gamma: f64, form: ModulatorForm) -> Result<Vec<f64>> {
        let mut sums = vec![0.0; self.counts.len()];
        for (&p, &g) in self.probs.iter().zip(&self.groups) {
            sums[g] += modulator(p, gamma, form)?;
        }
        Ok(sums
            .into_iter()
            .zip(&self.counts)
            .map(|(s, &c)| s / c as f64)
            .collect())
    }

    /// Group means of [`modulator_envelope`].
    pub fn envelope_weights(&self, gamma: f64) -> Vec<f64> {
        let mut sums = vec![0.0; self.counts.len()];
        for (&p, &g) in self.probs.iter().zip(&self.groups) {
            sums[g] += modulator_envelope(p, gamma);
        }
        sums.into_iter()
            .zip(&self.counts)
            .map(|(s, &c)| s / c as f64)
            .collect()
    }

    /// Empirical group frequencies `mu_k` in the batch.
    pub fn empirical_weights(&self) -> Vec<f64> {
        let n = self.groups.len() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `m_k` for every group.
pub fn group_mean_gradients(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    partition: &GroupPartition,
    beta: f64,
) -> Result<Vec<Vec<f64>>> {
    Ok(GroupStats::compute(policy, ref_policy, batch, partition, beta)?.means)
}

/// `w_k^gamma` for every group.
pub fn group_weights(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    partition: &GroupPartition,
    beta: f64,
    gamma: f64,
    form: ModulatorForm,
) -> Result<Vec<f64>> {
    GroupStats::compute(policy, ref_policy, batch, partition, beta)?.weights(gamma, form)
}

/// `sum_k (q_k - q'_k) w_k m_k` from explicit components.
pub fn assemble_bias(
    partition: &GroupPartition,
    weights: &[f64],
    means: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let k = partition.num_groups();
    if weights.len() != k || means.len() != k {
        return Err(Error::invalid("weights/means do not match the partition"));
    }
    let np = means[0].len();
    if means.iter().any(|m| m.len() != np) {
        return Err(Error::invalid("group means have different lengths"));
    }
    let mut bias = vec![0.0; np];
    for g in 0..k {
        let c = (partition.observed_weights[g] - partition.target_weights[g]) * weights[g];
        for (b, m) in bias.iter_mut().zip(&means[g]) {
            *b += c * m;
        }
    }
    Ok(bias)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupGradientReport {
    pub gamma: f64,
    pub form: ModulatorForm,
    pub group_means: Vec<Vec<f64>>,
    pub group_mean_norms: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub bias_norm: f64,
}

impl GroupGradientReport {
    pub fn from_stats(
        stats: &GroupStats,
        partition: &GroupPartition,
        gamma: f64,
        form: ModulatorForm,
    ) -> Result<Self> {
        let weights = stats.weights(gamma, form)?;
        let bias = assemble_bias(partition, &weights, &stats.means)?;
        Ok(Self {
            gamma,
            form,
            group_mean_norms: stats.means.iter().map(|m| norm(m)).collect(),
            group_means: stats.means.clone(),
            weights,
            bias_norm: norm(&bias),
            bias,
        })
    }
}

/// `B_gamma` with its components.
#[allow(clippy::too_many_arguments)]
pub fn bias_vector(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    partition: &GroupPartition,
    beta: f64,
    gamma: f64,
    form: ModulatorForm,
) -> Result<GroupGradientReport> {
    let stats = GroupStats::compute(policy, ref_policy, batch, partition, beta)?;
    GroupGradientReport::from_stats(&stats, partition, gamma, form)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaSweepRow {
    pub gamma: f64,
    pub bias_norm: f64,
    /// `||B_gamma|| / max(eps, sum_k q_k |w_k| ||m_k||)`.
    pub bias_norm_normalized: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaSweep {
    pub form: ModulatorForm,
    pub rows: Vec<GammaSweepRow>,
}

impl GammaSweep {
    pub fn to_csv(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.weights.len());
        let mut out = String::from("gamma,bias_norm,bias_norm_normalized");
        for g in 1..=k {
            out.push_str(&format!(",w_{g}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{:e}",
                r.gamma, r.bias_norm, r.bias_norm_normalized
            ));
            for w in &r.weights {
                out.push_str(&format!(",{w:e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn row(&self, gamma: f64) -> Option<&GammaSweepRow> {
        self.rows.iter().find(|r| r.gamma == gamma)
    }
}

pub fn gamma_sweep(
    policy: &PolicySnapshot,
    ref_policy: &PolicySnapshot,
    batch: &[PreferenceTriple],
    partition: &GroupPartition,
    beta: f64,
    gammas: &[f64],
    form: ModulatorForm,
) -> Result<GammaSweep> {
    if gammas.is_empty() {
        return Err(Error::Empty("gamma grid"));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {g}")));
    }
    let stats = GroupStats::compute(policy, ref_policy, batch, partition, beta)?;
    let rows = gammas
        .iter()
        .map(|&gamma| {
            let rep = GroupGradientReport::from_stats(&stats, partition, gamma, form)?;
            let scale: f64 = partition
                .observed_weights
                .iter()
                .zip(&rep.weights)
                .zip(&rep.group_mean_norms)
                .map(|((q, w), m)| q * w.abs() * m)
                .sum();
            Ok(GammaSweepRow {
                gamma,
                bias_norm: rep.bias_norm,
                bias_norm_normalized: rep.bias_norm / scale.max(NORMALIZER_FLOOR),
                weights: rep.weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GammaSweep { form, rows })
}

/// The fixed imbalanced instance used to exhibit the vanishing bias.
#[derive(Debug, Clone)]
pub struct ReferenceInstance {
    pub policy: PolicySnapshot,
    pub ref_policy: PolicySnapshot,
    pub batch: Vec<PreferenceTriple>,
    pub partition: GroupPartition,
    pub beta: f64,
}

pub const REFERENCE_SEED: u64 = 42;
pub const REFERENCE_VOCAB: usize = 6;
pub const REFERENCE_DIM: usize = 4;
const REFERENCE_COUNTS: [usize; 3] = [70, 20, 10];

/// K = 3 groups with q = (0.7, 0.2, 0.1) and a uniform target; V = 6, d = 4,
/// seed 42. Group sizes in the batch equal q exactly.
pub fn reference_instance() -> ReferenceInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
    let vocab = Vocabulary::numbered(REFERENCE_VOCAB).expect("vocab");
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let w: Vec<f64> = (0..REFERENCE_VOCAB * REFERENCE_DIM)
        .map(|_| normal(&mut rng))
        .collect();
    let w_ref: Vec<f64> = (0..REFERENCE_VOCAB * REFERENCE_DIM)
        .map(|_| normal(&mut rng))
        .collect();
    let policy = PolicySnapshot::from_weights(vocab.clone(), REFERENCE_DIM, w).expect("policy");
    let ref_policy = PolicySnapshot::from_weights(vocab, REFERENCE_DIM, w_ref)
        .expect("reference")
        .freeze();
    let mut batch = Vec::new();
    for (g, &count) in REFERENCE_COUNTS.iter().enumerate() {
        let center: Vec<f64> = (0..REFERENCE_DIM).map(|_| normal(&mut rng)).collect();
        for i in 0..count {
            let x: Vec<f64> = center.iter().map(|c| c + normal(&mut rng)).collect();
            let chosen = rng.random_range(0..REFERENCE_VOCAB);
            let mut rejected = rng.random_range(0..REFERENCE_VOCAB - 1);
            if rejected >= chosen {
                rejected += 1;
            }
            batch.push(
                PreferenceTriple::new(
                    ContextFeatures::new(x).expect("finite"),
                    chosen,
                    rejected,
                    g,
                    0,
                    format!("ref-{g}-{i}"),
                )
                .expect("distinct answers"),
            );
        }
    }
    ReferenceInstance {
        policy,
        ref_policy,
        batch,
        partition: GroupPartition::balanced_target(vec![0.7, 0.2, 0.1]).expect("partition"),
        beta: DEFAULT_BETA,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ctx(v: &[f64]) -> ContextFeatures {
        ContextFeatures::new(v.to_vec()).unwrap()
    }

    #[test]
    fn modulator_forms_at_half() {
        let published = modulator(0.5, 2.0, ModulatorForm::Published).unwrap();
        let exact = modulator(0.5, 2.0, ModulatorForm::ExactDerivative).unwrap();
        assert_abs_diff_eq!(published, -0.0965735902799727, epsilon = 1e-12);
        assert_abs_diff_eq!(exact, 0.5965735902799727, epsilon = 1e-12);
        for p in [0.01, 0.3, 0.5, 0.99] {
            assert_eq!(modulator(p, 0.0, ModulatorForm::Published).unwrap(), 1.0);
            assert_eq!(modulator(p, 0.0, ModulatorForm::ExactDerivative).unwrap(), 1.0);
        }
        assert!(modulator(0.0, 1.0, ModulatorForm::Published).is_err());
        assert!(modulator(1.0, 1.0, ModulatorForm::Published).is_err());
    }

    #[test]
    fn exact_form_is_focal_derivative() {
        use crate::objectives::{focal_derivative, focal_term};
        for &s in &[-2.0, -0.3, 0.0, 0.8, 3.0] {
            for &g in &[0.0, 0.5, 1.0, 2.0, 5.0] {
                let p = sigmoid(s);
                let lhs = (p - 1.0) * modulator(p, g, ModulatorForm::ExactDerivative).unwrap();
                assert_abs_diff_eq!(lhs, focal_derivative(s, g), epsilon = 1e-12);
                let h = 1e-5;
                let fd = (focal_term(s + h, g) - focal_term(s - h, g)) / (2.0 * h);
                assert_abs_diff_eq!(lhs, fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn envelope_bounds_both_forms() {
        for i in 1..100 {
            let p = i as f64 / 100.0;
            for &g in &[0.0, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0] {
                let env = modulator_envelope(p, g);
                for form in [ModulatorForm::Published, ModulatorForm::ExactDerivative] {
                    assert!(modulator(p, g, form).unwrap().abs() <= env * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn modulator_vanishes_for_large_gamma() {
        for i in 2..=9 {
            let p = i as f64 / 10.0;
            for form in [ModulatorForm::Published, ModulatorForm::ExactDerivative] {
                assert!(modulator(p, 100.0, form).unwrap().abs() < 1e-8);
            }
        }
        // at p = 0.1 the decay needs a larger gamma: (0.9)^99 * 23.9 ~ 7e-4 at gamma = 100
        let slow = modulator(0.1, 100.0, ModulatorForm::Published).unwrap().abs();
        assert!(slow > 1e-4 && slow < 1e-3, "{slow}");
        for form in [ModulatorForm::Published, ModulatorForm::ExactDerivative] {
            assert!(modulator(0.1, 300.0, form).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn hand_assembled_bias() {
        let part = GroupPartition::new(vec![0.9, 0.1], vec![0.5, 0.5]).unwrap();
        let b = assemble_bias(&part, &[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(b[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1], -0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(norm(&b), 0.565685424949238, epsilon = 1e-12);
    }

    #[test]
    fn balanced_mixture_has_zero_bias() {
        let inst = reference_instance();
        let part = GroupPartition::new(vec![0.7, 0.2, 0.1], vec![0.7, 0.2, 0.1]).unwrap();
        let rep = bias_vector(
            &inst.policy,
            &inst.ref_policy,
            &inst.batch,
            &part,
            inst.beta,
            2.0,
            ModulatorForm::Published,
        )
        .unwrap();
        assert!(rep.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_margins_give_half_coefficient() {
        let inst = reference_instance();
        let same = inst.ref_policy.thaw();
        let means =
            group_mean_gradients(&same, &inst.ref_policy, &inst.batch, &inst.partition, 0.1)
                .unwrap();
        for g in 0..3 {
            let members: Vec<_> = inst.batch.iter().filter(|z| z.group_id == g).collect();
            let mut expect = vec![0.0; same.num_params()];
            for z in &members {
                for (e, v) in expect.iter_mut().zip(margin_gradient(&same, z, 0.1).unwrap()) {
                    *e += v;
                }
            }
            for (m, e) in means[g].iter().zip(&expect) {
                assert_abs_diff_eq!(*m, -0.5 * e / members.len() as f64, epsilon = 1e-14);
            }
        }
        let w = group_weights(
            &same,
            &inst.ref_policy,
            &inst.batch,
            &inst.partition,
            0.1,
            2.0,
            ModulatorForm::Published,
        )
        .unwrap();
        for wk in w {
            assert_abs_diff_eq!(wk, -0.0965735902799727, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_group_is_batch_dpo_gradient() {
        use crate::objectives::StepObjective;
        let inst = reference_instance();
        let mut batch = inst.batch.clone();
        for z in &mut batch {
            z.group_id = 0;
        }
        let part = GroupPartition::new(vec![1.0], vec![1.0]).unwrap();
        let m = group_mean_gradients(&inst.policy, &inst.ref_policy, &batch, &part, 0.1).unwrap();
        let with = StepObjective::Dpo { beta: 0.1, lambda: 1.0 }
            .gradient(Exec::Sequential, &inst.policy, &inst.ref_policy, &batch)
            .unwrap();
        let sft = StepObjective::Sft
            .gradient(Exec::Sequential, &inst.policy, &inst.ref_policy, &batch)
            .unwrap();
        for ((a, w), s) in m[0].iter().zip(&with).zip(&sft) {
            assert_abs_diff_eq!(*a, w - s, epsilon = 1e-12);
        }
        let sweep = gamma_sweep(
            &inst.policy,
            &inst.ref_policy,
            &batch,
            &part,
            0.1,
            &DEFAULT_GAMMAS,
            ModulatorForm::Published,
        )
        .unwrap();
        assert!(sweep.rows.iter().all(|r| r.bias_norm == 0.0));
    }

    #[test]
    fn weights_are_one_at_gamma_zero() {
        let inst = reference_instance();
        for form in [ModulatorForm::Published, ModulatorForm::ExactDerivative] {
            let w = group_weights(
                &inst.policy,
                &inst.ref_policy,
                &inst.batch,
                &inst.partition,
                inst.beta,
                0.0,
                form,
            )
            .unwrap();
            assert!(w.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn weights_decay_on_reference_instance() {
        let inst = reference_instance();
        let stats = GroupStats::compute(
            &inst.policy,
            &inst.ref_policy,
            &inst.batch,
            &inst.partition,
            inst.beta,
        )
        .unwrap();
        assert!(stats.probs.iter().all(|&p| p > 0.1 && p < 0.9));
        let worst_p = stats.probs.iter().cloned().fold(1.0, f64::min);
        for form in [ModulatorForm::Published, ModulatorForm::ExactDerivative] {
            for &g in &[5.0, 50.0, 100.0] {
                let w = stats.weights(g, form).unwrap();
                let env = stats.envelope_weights(g);
                for (wk, ek) in w.iter().zip(&env) {
                    assert!(wk.abs() <= ek * (1.0 + 1e-12));
                    assert!(*ek <= modulator_envelope(worst_p, g) * (1.0 + 1e-12));
                }
            }
            // p bounded in (0.1, 0.9) is not enough for |w| < 1e-6 at gamma = 50:
            // the smallest p here is ~0.118 and its group weight is ~2.5e-3
            let w50 = stats.weights(50.0, form).unwrap();
            assert!(w50[2].abs() > 1e-3 && w50[2].abs() < 5e-3, "{w50:?}");
            assert!(stats.weights(100.0, form).unwrap().iter().all(|w| w.abs() < 1e-3));
            assert!(stats.weights(300.0, form).unwrap().iter().all(|w| w.abs() < 1e-6));
        }
    }

    #[test]
    fn gamma_zero_published_form_is_plain_bias() {
        let inst = reference_instance();
        let stats = GroupStats::compute(
            &inst.policy,
            &inst.ref_policy,
            &inst.batch,
            &inst.partition,
            inst.beta,
        )
        .unwrap();
        let rep = GroupGradientReport::from_stats(&stats, &inst.partition, 0.0, ModulatorForm::Published)
            .unwrap();
        let plain = assemble_bias(&inst.partition, &[1.0; 3], &stats.means).unwrap();
        assert_eq!(rep.bias, plain);
        assert!(rep.bias_norm > 0.0);
        let rep30 =
            GroupGradientReport::from_stats(&stats, &inst.partition, 30.0, ModulatorForm::Published)
                .unwrap();
        assert!(rep30.bias_norm < 1e-3);
    }

    #[test]
    fn envelope_decreases_on_reference_instance() {
        let inst = reference_instance();
        let stats = GroupStats::compute(
            &inst.policy,
            &inst.ref_policy,
            &inst.batch,
            &inst.partition,
            inst.beta,
        )
        .unwrap();
        let envelope = |g: f64| -> f64 {
            let w = stats.envelope_weights(g);
            (0..3)
                .map(|k| {
                    (inst.partition.observed_weights[k] - inst.partition.target_weights[k]).abs()
                        * w[k]
                        * norm(&stats.means[k])
                })
                .sum()
        };
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.5).collect();
        for w in grid.windows(2) {
            assert!(envelope(w[1]) <= envelope(w[0]), "at gamma {}", w[1]);
        }
        let rep = GroupGradientReport::from_stats(&stats, &inst.partition, 100.0, ModulatorForm::Published)
            .unwrap();
        assert!(rep.bias_norm <= envelope(100.0) * (1.0 + 1e-12));
    }

    #[test]
    fn decomposition_with_constant_group_probabilities() {
        use crate::objectives::StepObjective;
        // policy == reference gives p = 1/2 on every pair, so alpha is constant per group
        let inst = reference_instance();
        let same = inst.ref_policy.thaw();
        let stats =
            GroupStats::compute(&same, &inst.ref_policy, &inst.batch, &inst.partition, 0.1).unwrap();
        let mu = stats.empirical_weights();
        for &g in &DEFAULT_GAMMAS {
            let w = stats.weights(g, ModulatorForm::ExactDerivative).unwrap();
            let mut recomposed = vec![0.0; same.num_params()];
            for k in 0..3 {
                for (r, m) in recomposed.iter_mut().zip(&stats.means[k]) {
                    *r += mu[k] * w[k] * m;
                }
            }
            let full = StepObjective::FairDpo { beta: 0.1, gamma: g, lambda: 1.0 }
                .gradient(Exec::Sequential, &same, &inst.ref_policy, &inst.batch)
                .unwrap();
            let sft = StepObjective::Sft
                .gradient(Exec::Sequential, &same, &inst.ref_policy, &inst.batch)
                .unwrap();
            for ((r, f), s) in recomposed.iter().zip(&full).zip(&sft) {
                assert_abs_diff_eq!(*r, f - s, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn decomposition_is_approximate_when_probabilities_vary() {
        use crate::objectives::StepObjective;
        // w_k m_k is a product of group means, not the mean of the product
        let inst = reference_instance();
        let stats = GroupStats::compute(
            &inst.policy,
            &inst.ref_policy,
            &inst.batch,
            &inst.partition,
            inst.beta,
        )
        .unwrap();
        let mu = stats.empirical_weights();
        let w = stats.weights(2.0, ModulatorForm::ExactDerivative).unwrap();
        let mut recomposed = vec![0.0; inst.policy.num_params()];
        for k in 0..3 {
            for (r, m) in recomposed.iter_mut().zip(&stats.means[k]) {
                *r += mu[k] * w[k] * m;
            }
        }
        let full = StepObjective::FairDpo { beta: 0.1, gamma: 2.0, lambda: 1.0 }
            .gradient(Exec::Sequential, &inst.policy, &inst.ref_policy, &inst.batch)
            .unwrap();
        let sft = StepObjective::Sft
            .gradient(Exec::Sequential, &inst.policy, &inst.ref_policy, &inst.batch)
            .unwrap();
        let gap: f64 = recomposed
            .iter()
            .zip(&full)
            .zip(&sft)
            .map(|((r, f), s)| (r - (f - s)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(gap > 1e-6, "gap {gap}");
    }

    #[test]
    fn partition_errors() {
        let inst = reference_instance();
        assert!(GroupPartition::new(vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
        assert!(GroupPartition::new(vec![1.0], vec![0.5, 0.5]).is_err());
        let part4 = GroupPartition::balanced_target(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        assert!(matches!(
            group_mean_gradients(&inst.policy, &inst.ref_policy, &inst.batch, &part4, 0.1),
            Err(Error::EmptyGroup { group: 3 })
        ));
        let part2 = GroupPartition::balanced_target(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            group_mean_gradients(&inst.policy, &inst.ref_policy, &inst.batch, &part2, 0.1),
            Err(Error::UnknownGroup { .. })
        ));
        assert!(gamma_sweep(
            &inst.policy,
            &inst.ref_policy,
            &inst.batch,
            &inst.partition,
            0.1,
            &[],
            ModulatorForm::Published
        )
        .is_err());
        let _ = ctx(&[0.0]);
    }

    #[test]
    fn sweep_csv_layout() {
        let inst = reference_instance();
        let sweep = gamma_sweep(
            &inst.policy,
            &inst.ref_policy,
            &inst.batch,
            &inst.partition,
            inst.beta,
            &DEFAULT_GAMMAS,
            ModulatorForm::Published,
        )
        .unwrap();
        let csv = sweep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "gamma,bias_norm,bias_norm_normalized,w_1,w_2,w_3"
        );
        assert_eq!(lines.count(), 5);
    }
}
