//! Candidate tokens at a confusion point and their lookahead rewards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::policy::{Context, Decoding, Distribution, PolicyTable, TokenId, Vocab};
use crate::rng;

pub const REWARD_PASS: f64 = 1.0;
pub const REWARD_FAIL: f64 = -1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// The N most probable tokens, descending, ties to the lower id.
    #[default]
    Ranked,
    /// N distinct tokens drawn without replacement from the distribution.
    Multinomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: TokenId,
    /// Probability under the policy that selected the set.
    pub p_old: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Context just before the confusion point.
    pub context: Context,
    /// Confusion point within the response.
    pub position: usize,
    /// Token that was generated at the confusion point.
    pub confusion_token: TokenId,
    pub strategy: Selection,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.candidates.iter().map(|c| c.token).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.p_old).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.reward).collect()
    }

    /// All rewards equal: no learning signal.
    pub fn is_degenerate(&self) -> bool {
        self.candidates
            .windows(2)
            .all(|w| w[0].reward == w[1].reward)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub n: usize,
    pub k: usize,
    pub strategy: Selection,
    pub lookahead: Decoding,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            n: 16,
            k: 3,
            strategy: Selection::Ranked,
            lookahead: Decoding::Greedy,
        }
    }
}

fn check_n(n: usize, vocab_size: usize) -> Result<()> {
    if n < 2 || n > vocab_size {
        return Err(Error::Config(format!(
            "candidate count must be in 2..={vocab_size}, got {n}"
        )));
    }
    Ok(())
}

/// Token ids of `dist` sorted by probability, descending, ties by id.
pub fn ranked_order(dist: &Distribution) -> Vec<TokenId> {
    let p = dist.probs();
    let mut ids: Vec<TokenId> = (0..p.len() as TokenId).collect();
    ids.sort_by(|&a, &b| p[b as usize].total_cmp(&p[a as usize]).then(a.cmp(&b)));
    ids
}

/// Picks `n` candidates from `dist`, returning `(token, probability)`.
pub fn select_from_dist(
    dist: &Distribution,
    n: usize,
    strategy: Selection,
    seed: u64,
) -> Result<Vec<(TokenId, f64)>> {
    check_n(n, dist.len())?;
    let p = dist.probs();
    let positive = p.iter().filter(|&&x| x > 0.0).count();
    if positive < n {
        return Err(Error::Domain(format!(
            "only {positive} tokens have non-zero probability, need {n}"
        )));
    }
    let picked: Vec<TokenId> = match strategy {
        Selection::Ranked => ranked_order(dist).into_iter().take(n).collect(),
        Selection::Multinomial => {
            let mut rng = rng::rng_for(seed, &[rng::TAG_SELECT]);
            let mut taken = vec![false; p.len()];
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let remaining: f64 = p
                    .iter()
                    .zip(&taken)
                    .filter(|(_, &t)| !t)
                    .map(|(x, _)| x)
                    .sum();
                let u = rng.gen::<f64>() * remaining;
                let mut acc = 0.0;
                let mut choice = None;
                for (i, &x) in p.iter().enumerate() {
                    if taken[i] || x <= 0.0 {
                        continue;
                    }
                    choice = Some(i);
                    acc += x;
                    if u < acc {
                        break;
                    }
                }
                let i = choice.expect("positive mass remains");
                taken[i] = true;
                out.push(i as TokenId);
            }
            out
        }
    };
    Ok(picked.into_iter().map(|t| (t, p[t as usize])).collect())
}

pub fn select_candidates(
    policy: &PolicyTable,
    ctx: &Context,
    n: usize,
    strategy: Selection,
    seed: u64,
) -> Result<Vec<(TokenId, f64)>> {
    select_from_dist(&policy.next_token_dist(ctx), n, strategy, seed)
}

/// Rolls `k` tokens forward after `token` and judges the decoded fragment:
/// `-1` when it holds a confused word, `+1` otherwise.
#[allow(clippy::too_many_arguments)]
pub fn lookahead_reward(
    policy: &PolicyTable,
    vocab: &Vocab,
    ctx: &Context,
    token: TokenId,
    k: usize,
    detector: &Detector,
    decoding: Decoding,
    seed: u64,
) -> f64 {
    let mut rng = rng::rng_for(seed, &[rng::TAG_LOOKAHEAD]);
    let mut fragment = vec![token];
    let mut c = ctx.extended(token, policy.window());
    if Some(token) != vocab.eos() {
        for _ in 0..k {
            let dist = policy.next_token_dist(&c);
            let t = match decoding {
                Decoding::Greedy => dist.argmax(),
                Decoding::Multinomial => dist.sample(&mut rng),
            };
            fragment.push(t);
            if Some(t) == vocab.eos() {
                break;
            }
            c = c.extended(t, policy.window());
        }
    }
    if detector.fragment_confused(&fragment, vocab) {
        REWARD_FAIL
    } else {
        REWARD_PASS
    }
}

/// Selection plus rewards for one confusion point.
#[allow(clippy::too_many_arguments)]
pub fn build_candidate_set(
    policy: &PolicyTable,
    vocab: &Vocab,
    detector: &Detector,
    ctx: Context,
    position: usize,
    confusion_token: TokenId,
    cfg: &ExplorationConfig,
    seed: u64,
) -> Result<CandidateSet> {
    let picked = select_candidates(policy, &ctx, cfg.n, cfg.strategy, seed)?;
    let candidates = picked
        .into_iter()
        .enumerate()
        .map(|(i, (token, p_old))| Candidate {
            token,
            p_old,
            reward: lookahead_reward(
                policy,
                vocab,
                &ctx,
                token,
                cfg.k,
                detector,
                cfg.lookahead,
                rng::derive_seed(seed, &[i as u64]),
            ),
        })
        .collect();
    Ok(CandidateSet {
        context: ctx,
        position,
        confusion_token,
        strategy: cfg.strategy,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{EnglishMode, ScriptRules, TargetLanguage};
    use crate::policy::{Coupling, LangTag, VocabEntry};
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::from_logits(&p.iter().map(|x| x.ln()).collect::<Vec<_>>())
    }

    #[test]
    fn ranked_top2() {
        let got = select_from_dist(&dist(&[0.4, 0.3, 0.2, 0.1]), 2, Selection::Ranked, 0).unwrap();
        let ids: Vec<_> = got.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1]);
        assert!((got[0].1 - 0.4).abs() < 1e-15 && (got[1].1 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ranked_uniform_ties_by_id() {
        let got = select_from_dist(&dist(&[0.25; 4]), 4, Selection::Ranked, 0).unwrap();
        assert_eq!(
            got.iter().map(|x| x.0).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn near_tie_and_bad_n() {
        let probs = [0.5, 0.5 - 1e-15, 0.5e-15, 0.5e-15];
        let d = Distribution::from_logits(&probs.iter().map(|x: &f64| x.ln()).collect::<Vec<_>>());
        assert!(matches!(
            select_from_dist(&d, 1, Selection::Ranked, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            select_from_dist(&d, 5, Selection::Ranked, 0),
            Err(Error::Config(_))
        ));
        let got = select_from_dist(&d, 2, Selection::Ranked, 0).unwrap();
        assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn multinomial_distinct_and_seeded() {
        let d = dist(&[0.1; 10]);
        let a = select_from_dist(&d, 6, Selection::Multinomial, 3).unwrap();
        let b = select_from_dist(&d, 6, Selection::Multinomial, 3).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<_> = a.iter().map(|x| x.0).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        let c = select_from_dist(&d, 6, Selection::Multinomial, 4).unwrap();
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn ranked_equals_full_sort(
            logits in prop::collection::vec(-5.0f64..5.0, 2..64),
            frac in 0.0f64..1.0,
        ) {
            let d = Distribution::from_logits(&logits);
            let n = 2 + ((d.len() - 2) as f64 * frac) as usize;
            let got = select_from_dist(&d, n, Selection::Ranked, 0).unwrap();
            // oracle: stable sort of (−p, id) pairs over the whole table
            let mut pairs: Vec<(f64, u32)> =
                d.probs().iter().enumerate().map(|(i, &p)| (p, i as u32)).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<u32> = pairs.iter().take(n).map(|x| x.1).collect();
            prop_assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), want);
            prop_assert!(got.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    // Vocabulary with a digit prefix whose completions are either a Hangul
    // or a Cyrillic suffix.
    fn lookahead_world() -> (Vocab, PolicyTable, Detector) {
        let e = |id, s: &str, tag| VocabEntry {
            id,
            surface: s.into(),
            tag,
        };
        let v = Vocab::new(
            vec![
                e(0, " 안녕", LangTag::Target),
                e(1, " 3", LangTag::Neutral),
                e(2, "го", LangTag::Confused),
                e(3, "번", LangTag::Target),
                e(4, " да", LangTag::Confused),
                e(5, "</s>", LangTag::Neutral),
            ],
            Some(5),
        )
        .unwrap();
        let mut p = PolicyTable::new(&v, 1, Coupling::default()).unwrap();
        let lp = |x: &[f64]| x.iter().map(|q: &f64| q.ln()).collect::<Vec<_>>();
        p.set_row(vec![0], lp(&[0.6, 0.2, 0.01, 0.01, 0.17, 0.01]))
            .unwrap();
        // after the digit prefix the Cyrillic suffix dominates
        p.set_row(vec![1], lp(&[0.05, 0.01, 0.8, 0.12, 0.01, 0.01]))
            .unwrap();
        p.set_row(vec![2], lp(&[0.7, 0.1, 0.05, 0.05, 0.05, 0.05]))
            .unwrap();
        p.set_row(vec![3], lp(&[0.7, 0.1, 0.05, 0.05, 0.05, 0.05]))
            .unwrap();
        p.set_row(vec![4], lp(&[0.1, 0.1, 0.05, 0.05, 0.6, 0.1]))
            .unwrap();
        let d = Detector::new(
            ScriptRules::new(TargetLanguage::Korean),
            EnglishMode::Neutral,
        );
        (v, p, d)
    }

    #[test]
    fn lookahead_rewards() {
        let (v, p, d) = lookahead_world();
        let ctx = Context {
            prompt_id: 0,
            window: vec![0],
        };
        let r = |t, k| lookahead_reward(&p, &v, &ctx, t, k, &d, Decoding::Greedy, 1);
        assert_eq!(r(0, 3), REWARD_PASS);
        for k in 0..4 {
            assert_eq!(r(4, k), REWARD_FAIL);
        }
        // the bare prefix is harmless, its likely completion is not
        assert_eq!(r(1, 0), REWARD_PASS);
        assert_eq!(r(1, 3), REWARD_FAIL);
    }

    #[test]
    fn sampled_lookahead_path_oracle() {
        // Enumerate all 3-token continuations after the prefix, weight them
        // by the policy, and check the sampled path's verdict against the
        // path itself.
        let (v, p, d) = lookahead_world();
        let ctx = Context {
            prompt_id: 0,
            window: vec![0],
        };
        let mut confused_mass = 0.0;
        for a in 0..6u32 {
            for b in 0..6u32 {
                for c in 0..6u32 {
                    let mut seq = vec![1, a, b, c];
                    if let Some(e) = seq.iter().position(|&t| t == 5) {
                        seq.truncate(e + 1);
                    }
                    let mut w = 1.0;
                    let mut cx = ctx.extended(1, 1);
                    for &t in &seq[1..] {
                        w *= p.next_token_dist(&cx).prob(t);
                        cx = cx.extended(t, 1);
                    }
                    if d.fragment_confused(&seq, &v) {
                        confused_mass += w;
                    }
                }
            }
        }
        // each enumerated path above is counted once per trailing tail
        // after EOS, so normalise by the total weight instead
        let mut total = 0.0;
        for a in 0..6u32 {
            for b in 0..6u32 {
                for c in 0..6u32 {
                    let mut w = 1.0;
                    let mut cx = ctx.extended(1, 1);
                    for t in [a, b, c] {
                        w *= p.next_token_dist(&cx).prob(t);
                        cx = cx.extended(t, 1);
                    }
                    total += w;
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
        let mut fails = 0;
        for seed in 0..2000 {
            if lookahead_reward(&p, &v, &ctx, 1, 3, &d, Decoding::Multinomial, seed) == REWARD_FAIL
            {
                fails += 1;
            }
        }
        let freq = fails as f64 / 2000.0;
        // the first step alone has 0.8 mass on the Cyrillic suffix
        assert!(freq > 0.75, "{freq}");
        assert!(confused_mass > 0.75);
    }

    #[test]
    fn build_set_marks_confusion_token() {
        let (v, p, d) = lookahead_world();
        let ctx = Context {
            prompt_id: 0,
            window: vec![0],
        };
        let cfg = ExplorationConfig {
            n: 4,
            k: 3,
            ..Default::default()
        };
        let set = build_candidate_set(&p, &v, &d, ctx, 2, 4, &cfg, 9).unwrap();
        assert_eq!(set.tokens(), vec![0, 1, 4, 2]);
        assert_eq!(set.rewards(), vec![1.0, -1.0, -1.0, -1.0]);
        assert!(!set.is_degenerate());
    }
}
