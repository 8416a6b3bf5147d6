//! Advantages, the clipped surrogate, the KL estimator and their gradients.
//!
//! All candidates of a set share one context, so the gradient of a set's
//! objective is a single row over that context's effective logits. With
//! `pi` the current policy at the context,
//!
//! ```text
//! dJ/dpi_i    = (1/N) * ( [unclipped branch active] * A_i / p_old_i
//!                         + beta * (rho_i - 1) / pi_i ),   rho_i = p_ref_i / pi_i
//! dJ/dlogit_j = u_j * [j is a candidate] - pi_j * sum_i u_i,  u_i = pi_i * dJ/dpi_i
//! ```
//!
//! The derivative of `min(r A, clip(r) A)` follows the active branch; on a
//! tie the unclipped branch is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploration::CandidateSet;
use crate::policy::{PolicyTable, SparseGradient, TokenId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageVariant {
    /// Probability-weighted centering, normalized to unit absolute sum.
    #[default]
    TlpoWeighted,
    /// Reward minus the plain mean.
    Unweighted,
    /// Reward minus the plain mean, over the population standard deviation.
    GrpoStyle,
}

impl AdvantageVariant {
    pub const ALL: [AdvantageVariant; 3] = [
        AdvantageVariant::TlpoWeighted,
        AdvantageVariant::Unweighted,
        AdvantageVariant::GrpoStyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdvantageVariant::TlpoWeighted => "tlpo_weighted",
            AdvantageVariant::Unweighted => "unweighted",
            AdvantageVariant::GrpoStyle => "grpo_style",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    /// Baseline: weighted mean for `TlpoWeighted`, plain mean otherwise.
    pub mu: f64,
    /// Normalizer: sum of absolute unnormalized advantages for
    /// `TlpoWeighted`, the standard deviation for `GrpoStyle`, 1 otherwise.
    pub z: f64,
    pub variant: AdvantageVariant,
    /// All rewards equal; the values are all zero.
    pub degenerate: bool,
}

/// Advantages from candidate probabilities and rewards.
pub fn advantages_from(
    probs: &[f64],
    rewards: &[f64],
    variant: AdvantageVariant,
) -> Result<AdvantageVector> {
    let n = probs.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least 2 candidates, got {n}"
        )));
    }
    if rewards.len() != n {
        return Err(Error::Config(format!(
            "{} rewards for {n} candidates",
            rewards.len()
        )));
    }
    if let Some(p) = probs.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Domain(format!(
            "candidate probability {p} outside (0, 1]"
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    let zeros = |mu: f64, z: f64| AdvantageVector {
        values: vec![0.0; n],
        mu,
        z,
        variant,
        degenerate: true,
    };
    let all_equal = rewards.iter().all(|&r| r == rewards[0]);
    let plain_mean = rewards.iter().sum::<f64>() / n as f64;
    match variant {
        AdvantageVariant::TlpoWeighted => {
            let mass: f64 = probs.iter().sum();
            let mu = probs.iter().zip(rewards).map(|(p, r)| p * r).sum::<f64>() / mass;
            let a: Vec<f64> = probs
                .iter()
                .zip(rewards)
                .map(|(p, r)| p * (r - mu))
                .collect();
            let z: f64 = a.iter().map(|x| x.abs()).sum();
            if all_equal || z == 0.0 {
                return Ok(zeros(mu, 0.0));
            }
            Ok(AdvantageVector {
                values: a.iter().map(|x| x / z).collect(),
                mu,
                z,
                variant,
                degenerate: false,
            })
        }
        AdvantageVariant::Unweighted => {
            if all_equal {
                return Ok(zeros(plain_mean, 1.0));
            }
            Ok(AdvantageVector {
                values: rewards.iter().map(|r| r - plain_mean).collect(),
                mu: plain_mean,
                z: 1.0,
                variant,
                degenerate: false,
            })
        }
        AdvantageVariant::GrpoStyle => {
            let var = rewards
                .iter()
                .map(|r| (r - plain_mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let sigma = var.sqrt();
            if all_equal || sigma == 0.0 {
                return Ok(zeros(plain_mean, 0.0));
            }
            Ok(AdvantageVector {
                values: rewards.iter().map(|r| (r - plain_mean) / sigma).collect(),
                mu: plain_mean,
                z: sigma,
                variant,
                degenerate: false,
            })
        }
    }
}

pub fn compute_advantages(
    set: &CandidateSet,
    variant: AdvantageVariant,
) -> Result<AdvantageVector> {
    advantages_from(&set.probs(), &set.rewards(), variant)
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {p} outside (0, 1]")))
    }
}

/// Per-token KL estimate `r - ln r - 1` with `r = p_ref / p_theta`.
pub fn kl_estimate(p_theta: f64, p_ref: f64) -> Result<f64> {
    check_prob("p_theta", p_theta)?;
    check_prob("p_ref", p_ref)?;
    Ok(k3(p_theta, p_ref))
}

fn k3(p_theta: f64, p_ref: f64) -> f64 {
    // Near r = 1 use d = r - 1 to avoid cancellation; far from it, 1 + d
    // would lose the low digits of a tiny r.
    let d = (p_ref - p_theta) / p_theta;
    if d.abs() < 0.5 {
        (d - d.ln_1p()).max(0.0)
    } else {
        let r = p_ref / p_theta;
        (r - r.ln() - 1.0).max(0.0)
    }
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` with `r = p_theta / p_old`.
pub fn clipped_term(p_theta: f64, p_old: f64, a: f64, eps: f64) -> f64 {
    let r = p_theta / p_old;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps);
    (r * a).min(clipped * a)
}

/// Whether the unclipped branch of [`clipped_term`] is the active one.
fn unclipped_active(r: f64, a: f64, eps: f64) -> bool {
    r * a <= r.clamp(1.0 - eps, 1.0 + eps) * a
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub eps: f64,
    pub beta: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            eps: 0.2,
            beta: 0.04,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!(
                "clip epsilon {} outside (0, 1)",
                self.eps
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "KL weight {} must be >= 0",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Debug record for one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateTerm {
    pub token: TokenId,
    pub p_old: f64,
    pub p_theta: f64,
    pub p_ref: f64,
    pub reward: f64,
    pub advantage: f64,
    pub ratio: f64,
    pub clipped: bool,
    pub surrogate: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// Mean clipped term over candidates.
    pub surrogate: f64,
    /// Mean KL estimate over candidates.
    pub kl: f64,
    /// `surrogate - beta * kl`.
    pub total: f64,
    pub degenerate: bool,
    pub terms: Vec<CandidateTerm>,
}

/// Objective of one candidate set and its gradient with respect to the
/// effective logits of `theta` at the set's context. The old-policy
/// probabilities are the ones recorded in the set. A degenerate set yields
/// zero value and an empty gradient.
pub fn tlpo_objective(
    set: &CandidateSet,
    adv: &AdvantageVector,
    theta: &PolicyTable,
    reference: &PolicyTable,
    cfg: &ObjectiveConfig,
) -> Result<(ObjectiveValue, SparseGradient)> {
    cfg.validate()?;
    let n = set.len();
    if adv.values.len() != n {
        return Err(Error::Config(format!(
            "{} advantages for {n} candidates",
            adv.values.len()
        )));
    }
    let pi_dist = theta.next_token_dist(&set.context);
    let ref_dist = reference.next_token_dist(&set.context);
    let pi = pi_dist.probs();
    let inv_n = 1.0 / n as f64;

    let mut terms = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    for (c, &a) in set.candidates.iter().zip(&adv.values) {
        check_prob("p_old", c.p_old)?;
        let p_theta = pi[c.token as usize];
        let p_ref = ref_dist.prob(c.token);
        check_prob("p_theta", p_theta)?;
        check_prob("p_ref", p_ref)?;
        let ratio = p_theta / c.p_old;
        let active = unclipped_active(ratio, a, cfg.eps);
        let kl = k3(p_theta, p_ref);
        let rho = p_ref / p_theta;
        let mut d_pi = if active { a / c.p_old } else { 0.0 };
        d_pi += cfg.beta * (rho - 1.0) / p_theta;
        u.push(inv_n * d_pi * p_theta);
        terms.push(CandidateTerm {
            token: c.token,
            p_old: c.p_old,
            p_theta,
            p_ref,
            reward: c.reward,
            advantage: a,
            ratio,
            clipped: !active,
            surrogate: clipped_term(p_theta, c.p_old, a, cfg.eps),
            kl,
        });
    }

    if adv.degenerate {
        let value = ObjectiveValue {
            surrogate: 0.0,
            kl: 0.0,
            total: 0.0,
            degenerate: true,
            terms,
        };
        return Ok((value, SparseGradient::new()));
    }

    let surrogate = inv_n * terms.iter().map(|t| t.surrogate).sum::<f64>();
    let kl = inv_n * terms.iter().map(|t| t.kl).sum::<f64>();
    let total = surrogate - cfg.beta * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("objective value {total}")));
    }

    let u_sum: f64 = u.iter().sum();
    let mut row: Vec<f64> = pi.iter().map(|p| -p * u_sum).collect();
    for (c, ui) in set.candidates.iter().zip(&u) {
        row[c.token as usize] += ui;
    }
    let grad = SparseGradient::single(set.context.window.clone(), row);
    if !grad.is_finite() {
        return Err(Error::NonFinite("objective gradient".into()));
    }
    Ok((
        ObjectiveValue {
            surrogate,
            kl,
            total,
            degenerate: false,
            terms,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exploration::{Candidate, Selection};
    use crate::policy::tests::vocab4;
    use crate::policy::{Context, Coupling};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn weighted_example() {
        let a = advantages_from(
            &[0.4, 0.3, 0.2, 0.1],
            &[1.0, -1.0, 1.0, -1.0],
            AdvantageVariant::TlpoWeighted,
        )
        .unwrap();
        assert!((a.mu - 0.2).abs() < 1e-15);
        assert!((a.z - 0.96).abs() < 1e-15);
        assert!(close(
            &a.values,
            &[1.0 / 3.0, -0.375, 1.0 / 6.0, -0.125],
            1e-15
        ));
    }

    #[test]
    fn equal_rewards_are_degenerate() {
        for v in AdvantageVariant::ALL {
            let a = advantages_from(&[0.5, 0.2, 0.1], &[1.0; 3], v).unwrap();
            assert!(a.degenerate);
            assert_eq!(a.values, vec![0.0; 3]);
        }
    }

    #[test]
    fn input_errors() {
        let v = AdvantageVariant::TlpoWeighted;
        assert!(matches!(
            advantages_from(&[0.5], &[1.0], v),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            advantages_from(&[0.5, 0.0], &[1.0, -1.0], v),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn other_variants() {
        let u = advantages_from(
            &[0.4, 0.3, 0.2, 0.1],
            &[1.0, -1.0, 1.0, 1.0],
            AdvantageVariant::Unweighted,
        )
        .unwrap();
        assert!(close(&u.values, &[0.5, -1.5, 0.5, 0.5], 1e-15));
        let g = advantages_from(
            &[0.4, 0.3, 0.2, 0.1],
            &[1.0, -1.0, 1.0, 1.0],
            AdvantageVariant::GrpoStyle,
        )
        .unwrap();
        let s = 0.75f64.sqrt();
        assert!(close(
            &g.values,
            &[0.5 / s, -1.5 / s, 0.5 / s, 0.5 / s],
            1e-15
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(0.3, 0.3).unwrap(), 0.0);
        let v = kl_estimate(0.1, 0.2).unwrap();
        assert!((v - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!(matches!(kl_estimate(0.0, 0.2), Err(Error::Domain(_))));
        assert!(matches!(kl_estimate(0.2, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_term(0.3, 0.3, 0.7, 0.2), 0.7);
        assert!((clipped_term(0.6, 0.3, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(clipped_term(0.6, 0.3, -1.0, 0.2), -2.0);
    }

    fn set_on(policy: &PolicyTable, tokens: &[u32], rewards: &[f64]) -> CandidateSet {
        let ctx = Context {
            prompt_id: 0,
            window: vec![0],
        };
        let d = policy.next_token_dist(&ctx);
        CandidateSet {
            context: ctx,
            position: 0,
            confusion_token: tokens[0],
            strategy: Selection::Ranked,
            candidates: tokens
                .iter()
                .zip(rewards)
                .map(|(&t, &r)| Candidate {
                    token: t,
                    p_old: d.prob(t),
                    reward: r,
                })
                .collect(),
        }
    }

    #[test]
    fn identity_snapshot_gradient() {
        let v = vocab4();
        let mut p = PolicyTable::new(&v, 1, Coupling::default()).unwrap();
        p.set_row(
            vec![0],
            vec![0.4f64.ln(), 0.3f64.ln(), 0.2f64.ln(), 0.1f64.ln()],
        )
        .unwrap();
        let set = set_on(&p, &[0, 1, 2], &[1.0, -1.0, 1.0]);
        let adv = compute_advantages(&set, AdvantageVariant::TlpoWeighted).unwrap();
        let cfg = ObjectiveConfig {
            eps: 0.2,
            beta: 0.04,
        };
        let (val, g) = tlpo_objective(&set, &adv, &p, &p, &cfg).unwrap();
        assert_eq!(val.kl, 0.0);
        assert!((val.surrogate - adv.values.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        // ratio 1: dJ/dl_j = (1/N)(A_j [cand] - pi_j sum A)
        let pi = [0.4, 0.3, 0.2, 0.1];
        let sa: f64 = adv.values.iter().sum();
        let want: Vec<f64> = (0..4)
            .map(|j| (adv.values.get(j).copied().unwrap_or(0.0) - pi[j] * sa) / 3.0)
            .collect();
        assert!(close(g.row(&[0]).unwrap(), &want, 1e-15));
    }

    #[test]
    fn degenerate_set_gives_empty_gradient() {
        let v = vocab4();
        let p = PolicyTable::new(&v, 1, Coupling::default()).unwrap();
        let set = set_on(&p, &[0, 1], &[-1.0, -1.0]);
        let adv = compute_advantages(&set, AdvantageVariant::TlpoWeighted).unwrap();
        let (val, g) = tlpo_objective(&set, &adv, &p, &p, &ObjectiveConfig::default()).unwrap();
        assert!(val.degenerate && g.is_empty() && val.total == 0.0);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> {
        (2usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(-2.0f64..2.0, 8),
                prop::collection::vec(-2.0f64..2.0, 8),
                prop::collection::vec(-2.0f64..2.0, 8),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    fn vocab8() -> crate::policy::Vocab {
        use crate::policy::{LangTag, Vocab, VocabEntry};
        Vocab::new(
            (0..8)
                .map(|i| VocabEntry {
                    id: i,
                    surface: format!("t{i}"),
                    tag: if i % 2 == 0 {
                        LangTag::Target
                    } else {
                        LangTag::Confused
                    },
                })
                .collect(),
            None,
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn scale_invariance(
            probs in prop::collection::vec(0.01f64..1.0, 2..16),
            seed in any::<u64>(),
            c in 0.05f64..1.0,
        ) {
            let rewards: Vec<f64> = (0..probs.len())
                .map(|i| if (seed >> (i % 64)) & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            let a = advantages_from(&probs, &rewards, AdvantageVariant::TlpoWeighted).unwrap();
            let scaled: Vec<f64> = probs.iter().map(|p| p * c).collect();
            let b = advantages_from(&scaled, &rewards, AdvantageVariant::TlpoWeighted).unwrap();
            prop_assert!(close(&a.values, &b.values, 1e-12));
            if !a.degenerate {
                let s: f64 = a.values.iter().map(|x| x.abs()).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for i in 0..probs.len() {
                    for j in 0..probs.len() {
                        if rewards[i] == rewards[j] {
                            prop_assert_eq!(a.values[i].abs() >= a.values[j].abs(), probs[i] >= probs[j]);
                        }
                    }
                }
            }
            for v in AdvantageVariant::ALL {
                let x = advantages_from(&probs, &rewards, v).unwrap();
                if !x.degenerate {
                    for (ai, ri) in x.values.iter().zip(&rewards) {
                        prop_assert_eq!(ai.signum(), (ri - x.mu).signum());
                    }
                }
            }
        }

        #[test]
        fn kl_nonnegative(a in 1e-9f64..=1.0, b in 1e-9f64..=1.0) {
            prop_assert!(kl_estimate(a, b).unwrap() >= 0.0);
        }

        #[test]
        fn ascent_moves_extreme_tokens(
            (theta, _, _, rewards) in arb_instance(),
            variant in prop::sample::select(AdvantageVariant::ALL.to_vec()),
        ) {
            let v = vocab8();
            let mut p = PolicyTable::new(&v, 1, Coupling::default()).unwrap();
            p.set_row(vec![0], theta).unwrap();
            let n = rewards.len();
            let tokens: Vec<u32> = (0..n as u32).collect();
            let r: Vec<f64> = rewards.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let set = set_on(&p, &tokens, &r);
            let adv = compute_advantages(&set, variant).unwrap();
            prop_assume!(!adv.degenerate);
            let cfg = ObjectiveConfig { eps: 0.2, beta: 0.0 };
            let (_, g) = tlpo_objective(&set, &adv, &p, &p, &cfg).unwrap();
            let before = p.dist_for_key(&[0]);
            let mut q = p.clone();
            q.apply_update(&g, 1e-3).unwrap();
            let after = q.dist_for_key(&[0]);
            let imax = (0..n).max_by(|&a, &b| adv.values[a].total_cmp(&adv.values[b])).unwrap();
            let imin = (0..n).min_by(|&a, &b| adv.values[a].total_cmp(&adv.values[b])).unwrap();
            prop_assert!(after.prob(imax as u32) > before.prob(imax as u32));
            prop_assert!(after.prob(imin as u32) < before.prob(imin as u32));
        }
    }
}
