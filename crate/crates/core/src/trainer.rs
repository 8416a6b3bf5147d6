//! The outer training loop.
//!
//! Each step samples one response per prompt in the batch from the current
//! policy, finds the first confusion point of each response, builds a
//! candidate set there, snapshots the policy as the old policy and runs `p`
//! gradient-ascent iterations on the mean objective over the candidate sets.
//! Responses without confusion contribute nothing. The reference policy is
//! the policy the run started from and never changes.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, EncodedPrompt};
use crate::detector::{Detector, EnglishMode};
use crate::error::{Error, Result};
use crate::exploration::{build_candidate_set, CandidateSet, ExplorationConfig, Selection};
use crate::metrics::{compute_metrics_with, Counts, MetricResult};
use crate::objective::{
    compute_advantages, tlpo_objective, AdvantageVariant, ObjectiveConfig, ObjectiveValue,
};
use crate::par::{self, ExecMode};
use crate::policy::{
    kl_divergence, Context, Decoding, PolicyRecord, PolicyTable, SparseGradient, TokenId, Vocab,
};
use crate::rng;

/// How a batch is assembled when some responses come back clean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BatchFill {
    /// Exactly `batch_size` prompts per step; clean responses are dropped.
    #[default]
    Fixed,
    /// Keep drawing prompts until `batch_size` candidate sets are found or
    /// `max_draws` prompts were drawn in the step.
    Refill { max_draws: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Candidates per confusion point.
    pub n: usize,
    /// Lookahead length.
    pub k: usize,
    /// Inner optimization iterations per step.
    pub p: usize,
    /// Outer steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Peak step size.
    pub lr: f64,
    /// Share of steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Step size at the end of the cosine decay, relative to `lr`.
    pub final_lr_frac: f64,
    pub eps: f64,
    pub beta: f64,
    pub mode: EnglishMode,
    pub variant: AdvantageVariant,
    pub selection: Selection,
    /// Decoding for the batch rollout.
    pub rollout: Decoding,
    pub lookahead: Decoding,
    /// Longest sampled response.
    pub max_len: usize,
    pub seed: u64,
    pub batch_fill: BatchFill,
    /// Numeric incidents tolerated before the run aborts.
    pub incident_limit: usize,
    /// Checkpoint interval in steps; 0 disables.
    pub checkpoint_every: usize,
    /// Held-out evaluation interval in steps; 0 disables.
    pub eval_every: usize,
    /// Sampled responses per held-out prompt.
    pub eval_samples: usize,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 16,
            k: 3,
            p: 2,
            steps: 1000,
            batch_size: 8,
            lr: 3.0,
            warmup_frac: 0.1,
            final_lr_frac: 0.1,
            eps: 0.2,
            beta: 0.04,
            mode: EnglishMode::Neutral,
            variant: AdvantageVariant::TlpoWeighted,
            selection: Selection::Ranked,
            rollout: Decoding::Multinomial,
            lookahead: Decoding::Greedy,
            max_len: 8,
            seed: 0,
            batch_fill: BatchFill::Fixed,
            incident_limit: 10,
            checkpoint_every: 0,
            eval_every: 0,
            eval_samples: 4,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n < 2 {
            return bad("candidate count must be at least 2");
        }
        if self.p == 0 {
            return bad("need at least one inner iteration");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("step size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.final_lr_frac) {
            return bad("schedule fractions must be in [0, 1]");
        }
        if self.max_len == 0 {
            return bad("maximum response length must be positive");
        }
        if self.eval_samples == 0 {
            return bad("need at least one evaluation sample per prompt");
        }
        if let BatchFill::Refill { max_draws } = self.batch_fill {
            if max_draws < self.batch_size {
                return bad("refill draw budget below the batch size");
            }
        }
        self.objective().validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            eps: self.eps,
            beta: self.beta,
        }
    }

    pub fn exploration(&self) -> ExplorationConfig {
        ExplorationConfig {
            n: self.n,
            k: self.k,
            strategy: self.selection,
            lookahead: self.lookahead,
        }
    }
}

/// Linear warmup over the first `warmup_frac` of the steps (rounded up),
/// then cosine decay from `lr` to `final_lr_frac * lr`.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let total = cfg.steps.max(1);
    let warmup = (cfg.warmup_frac * total as f64).ceil() as usize;
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let floor = cfg.final_lr_frac;
    cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunningStats {
    pub responses: usize,
    pub confusion_hits: usize,
    pub clean_skipped: usize,
    pub candidate_sets: usize,
    pub degenerate_sets: usize,
    pub updates: usize,
    pub incidents: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: PolicyTable,
    /// Snapshot taken at the start of the latest optimization step.
    pub old: PolicyTable,
    pub reference: PolicyTable,
    pub step: usize,
    /// Number of prompts drawn so far.
    pub cursor: u64,
    pub stats: RunningStats,
}

impl TrainState {
    pub fn new(policy: PolicyTable) -> Self {
        TrainState {
            theta: policy.clone(),
            old: policy.clone(),
            reference: policy,
            step: 0,
            cursor: 0,
            stats: RunningStats::default(),
        }
    }
}

/// Prompt for the `draw`-th draw: prompts are visited in a fresh seeded
/// permutation every epoch.
pub fn prompt_index(seed: u64, draw: u64, n: usize) -> usize {
    use rand::seq::SliceRandom;
    let epoch = draw / n as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng_for(seed, &[rng::TAG_BATCH, epoch]));
    perm[(draw % n as u64) as usize]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub sets: Vec<CandidateSet>,
    pub processed: usize,
    pub clean: usize,
    /// Responses whose candidate set could not be built for numeric reasons
    /// (for example a collapsed distribution with fewer than `n` tokens of
    /// positive probability).
    pub failures: Vec<String>,
}

/// Samples one response per `(draw, prompt)` pair and returns a candidate
/// set for every response with a confusion point.
pub fn rollout_step(
    theta: &PolicyTable,
    batch: &[(u64, &EncodedPrompt)],
    cfg: &TrainConfig,
    vocab: &Vocab,
    detector: &Detector,
) -> Result<Rollout> {
    let explore = cfg.exploration();
    let results = par::map(
        cfg.exec,
        batch,
        |_, &(draw, prompt)| -> Result<Option<CandidateSet>> {
            let seed = rng::derive_seed(cfg.seed, &[rng::TAG_ROLLOUT, draw]);
            let y =
                theta.sample_sequence(prompt.id, &prompt.tokens, cfg.max_len, seed, cfg.rollout);
            let Some(c) = detector.detect_confusion_point(&y, vocab) else {
                return Ok(None);
            };
            let mut history = prompt.tokens.clone();
            history.extend_from_slice(&y[..c]);
            let ctx = Context::from_history(prompt.id, &history, theta.window());
            let set_seed = rng::derive_seed(cfg.seed, &[rng::TAG_SELECT, draw]);
            build_candidate_set(theta, vocab, detector, ctx, c, y[c], &explore, set_seed).map(Some)
        },
    );
    let mut sets = Vec::new();
    let mut clean = 0;
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(Some(s)) => sets.push(s),
            Ok(None) => clean += 1,
            Err(e @ (Error::NonFinite(_) | Error::Domain(_))) => failures.push(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok(Rollout {
        sets,
        processed: batch.len(),
        clean,
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub processed: usize,
    pub candidate_sets: usize,
    pub degenerate: usize,
    /// Mean objective over non-degenerate sets at the first inner iteration.
    pub objective: Option<f64>,
    /// Mean `KL(theta || ref)` over confusion-free contexts after the step.
    pub clean_kl: f64,
    /// Mean confusion-token mass over contexts that had confusion mass in
    /// the reference, after the step.
    pub confusion_mass: f64,
    /// What went wrong if the step was rolled back.
    pub incident: Option<String>,
}

/// Result of one optimization step, including every inner iteration's
/// per-set objective records.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub lr: f64,
    pub degenerate: usize,
    pub iterations: Vec<Vec<ObjectiveValue>>,
    pub incident: Option<String>,
}

/// Snapshots the old policy and runs `p` ascent iterations on the mean
/// objective of the non-degenerate sets. A numeric failure restores the
/// pre-step parameters and counts as an incident.
pub fn optimize_step(
    state: &mut TrainState,
    sets: &[CandidateSet],
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let lr = learning_rate(cfg, state.step);
    state.old = state.theta.clone();
    let ocfg = cfg.objective();

    let mut incident = None;
    let mut advs = Vec::with_capacity(sets.len());
    for s in sets {
        match compute_advantages(s, cfg.variant) {
            Ok(a) => advs.push(a),
            Err(e @ (Error::NonFinite(_) | Error::Domain(_))) => {
                incident = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let active: Vec<usize> = if incident.is_some() {
        Vec::new()
    } else {
        (0..sets.len()).filter(|&i| !advs[i].degenerate).collect()
    };
    let degenerate = advs.iter().filter(|a| a.degenerate).count();
    state.stats.candidate_sets += sets.len();
    state.stats.degenerate_sets += degenerate;

    let mut iterations = Vec::new();
    if !active.is_empty() {
        let scale = 1.0 / active.len() as f64;
        for _ in 0..cfg.p {
            let theta = &state.theta;
            let reference = &state.reference;
            let results = par::map(cfg.exec, &active, |_, &i| {
                tlpo_objective(&sets[i], &advs[i], theta, reference, &ocfg)
            });
            let mut grad = SparseGradient::new();
            let mut values = Vec::with_capacity(active.len());
            for r in results {
                match r {
                    Ok((v, g)) => {
                        grad.add_scaled(&g, scale);
                        values.push(v);
                    }
                    Err(e @ (Error::NonFinite(_) | Error::Domain(_))) => {
                        incident.get_or_insert(e.to_string());
                    }
                    Err(e) => return Err(e),
                }
            }
            if incident.is_some() {
                break;
            }
            match state.theta.apply_update(&grad, lr) {
                Ok(()) => state.stats.updates += 1,
                Err(e @ Error::NonFinite(_)) => {
                    incident = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
            iterations.push(values);
        }
    }
    if incident.is_some() {
        state.theta = state.old.clone();
        state.stats.incidents += 1;
    }
    state.step += 1;
    if state.stats.incidents > cfg.incident_limit {
        return Err(Error::IncidentLimit {
            incidents: state.stats.incidents,
            limit: cfg.incident_limit,
        });
    }
    Ok(StepOutcome {
        lr,
        degenerate,
        iterations,
        incident,
    })
}

/// Context sets measured during a run, fixed by the reference policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Watch {
    /// Contexts whose reference confusion mass is below [`CLEAN_MASS`].
    pub clean: Vec<Vec<TokenId>>,
    /// The remaining stored contexts.
    pub confusable: Vec<Vec<TokenId>>,
    /// Per token: does it decode to a confused word on its own?
    pub confusing: Vec<bool>,
}

/// Confusion mass below which a context counts as confusion-free.
pub const CLEAN_MASS: f64 = 1e-3;

pub fn confusion_mass(policy: &PolicyTable, key: &[TokenId], confusing: &[bool]) -> f64 {
    policy
        .dist_for_key(key)
        .probs()
        .iter()
        .zip(confusing)
        .filter(|(_, &c)| c)
        .map(|(p, _)| p)
        .sum()
}

impl Watch {
    pub fn new(reference: &PolicyTable, vocab: &Vocab, detector: &Detector) -> Self {
        let confusing = detector.confusing_tokens(vocab);
        let (clean, confusable) = reference
            .contexts()
            .cloned()
            .partition(|k| confusion_mass(reference, k, &confusing) < CLEAN_MASS);
        Watch {
            clean,
            confusable,
            confusing,
        }
    }

    pub fn clean_kl(&self, theta: &PolicyTable, reference: &PolicyTable) -> f64 {
        mean_kl(theta, reference, &self.clean)
    }

    pub fn confusion_mass(&self, policy: &PolicyTable) -> f64 {
        if self.confusable.is_empty() {
            return 0.0;
        }
        self.confusable
            .iter()
            .map(|k| confusion_mass(policy, k, &self.confusing))
            .sum::<f64>()
            / self.confusable.len() as f64
    }
}

/// Mean exact `KL(theta || ref)` over `keys`; 0 for an empty list.
pub fn mean_kl(theta: &PolicyTable, reference: &PolicyTable, keys: &[Vec<TokenId>]) -> f64 {
    if keys.is_empty() {
        return 0.0;
    }
    keys.iter()
        .map(|k| {
            kl_divergence(
                theta.dist_for_key(k).probs(),
                reference.dist_for_key(k).probs(),
            )
        })
        .sum::<f64>()
        / keys.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub wpr: f64,
    pub rpr: f64,
    pub counts: Counts,
    pub clean_kl: f64,
    pub confusion_mass: f64,
}

/// Samples `samples` responses per prompt and scores them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &PolicyTable,
    vocab: &Vocab,
    prompts: &[EncodedPrompt],
    detector: &Detector,
    samples: usize,
    max_len: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<MetricResult> {
    let reports = par::map_range(exec, prompts.len() * samples, |i| {
        let p = &prompts[i / samples];
        let s = rng::derive_seed(seed, &[rng::TAG_EVAL, p.id, (i % samples) as u64]);
        let y = policy.sample_sequence(p.id, &p.tokens, max_len, s, Decoding::Multinomial);
        detector.report(&y, vocab)
    });
    compute_metrics_with(exec, &reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub wpr: f64,
    pub rpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub train_prompts: usize,
    pub heldout_prompts: usize,
    pub baseline: EvalSummary,
    #[serde(rename = "final")]
    pub final_eval: EvalSummary,
    pub stats: RunningStats,
    pub evals: Vec<EvalPoint>,
    pub steps: Vec<StepRecord>,
    /// Context keys of every candidate set built during the run.
    pub confusion_contexts: Vec<Vec<TokenId>>,
}

pub struct TrainData<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [EncodedPrompt],
    pub heldout: &'a [EncodedPrompt],
    /// Rules used for rewards and metrics; the mode comes from the config.
    pub detector: &'a Detector,
}

pub const TRAIN_FORMAT: &str = "tlpo-train";
pub const TRAIN_VERSION: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub step: usize,
    pub cursor: u64,
    pub stats: RunningStats,
    pub theta: PolicyRecord,
    pub reference: PolicyRecord,
    pub baseline: EvalSummary,
    pub evals: Vec<EvalPoint>,
    pub steps: Vec<StepRecord>,
    pub confusion_contexts: Vec<Vec<TokenId>>,
}

impl TrainCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: TrainCheckpoint = read_json(path)?;
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        if self.format != TRAIN_FORMAT {
            return Err(Error::Config(format!(
                "not a training checkpoint (format {:?})",
                self.format
            )));
        }
        if self.version != TRAIN_VERSION {
            return Err(Error::Version {
                kind: "training checkpoint".into(),
                found: self.version,
                expected: TRAIN_VERSION,
            });
        }
        Ok(())
    }
}

struct Progress {
    baseline: EvalSummary,
    evals: Vec<EvalPoint>,
    steps: Vec<StepRecord>,
    contexts: BTreeSet<Vec<TokenId>>,
}

fn checkpoint(cfg: &TrainConfig, state: &TrainState, p: &Progress) -> TrainCheckpoint {
    TrainCheckpoint {
        format: TRAIN_FORMAT.into(),
        version: TRAIN_VERSION,
        config: cfg.clone(),
        step: state.step,
        cursor: state.cursor,
        stats: state.stats,
        theta: state.theta.to_record(),
        reference: state.reference.to_record(),
        baseline: p.baseline.clone(),
        evals: p.evals.clone(),
        steps: p.steps.clone(),
        confusion_contexts: p.contexts.iter().cloned().collect(),
    }
}

fn summarize(
    policy: &PolicyTable,
    reference: &PolicyTable,
    watch: &Watch,
    data: &TrainData,
    detector: &Detector,
    cfg: &TrainConfig,
) -> Result<EvalSummary> {
    let m = evaluate(
        policy,
        data.vocab,
        data.heldout,
        detector,
        cfg.eval_samples,
        cfg.max_len,
        cfg.seed,
        cfg.exec,
    )?;
    Ok(EvalSummary {
        wpr: m.wpr,
        rpr: m.rpr,
        counts: m.counts,
        clean_kl: watch.clean_kl(policy, reference),
        confusion_mass: watch.confusion_mass(policy),
    })
}

/// Runs `cfg.steps` outer steps from `policy`, or continues from `resume`.
/// `on_checkpoint` receives a checkpoint every `checkpoint_every` steps.
pub fn run_training(
    cfg: &TrainConfig,
    data: &TrainData,
    policy: &PolicyTable,
    resume: Option<TrainCheckpoint>,
    on_checkpoint: &mut dyn FnMut(&TrainCheckpoint) -> Result<()>,
) -> Result<(TrainState, TrainingReport)> {
    cfg.validate()?;
    if data.train.is_empty() || data.heldout.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and held-out prompt sets".into(),
        ));
    }
    if cfg.n > data.vocab.len() {
        return Err(Error::Config(format!(
            "candidate count {} exceeds vocabulary size {}",
            cfg.n,
            data.vocab.len()
        )));
    }
    let detector = data.detector.with_mode(cfg.mode);

    let (mut state, mut progress) = match resume {
        Some(ck) => {
            ck.check()?;
            if ck.config != *cfg {
                return Err(Error::Config(
                    "checkpoint was written with a different configuration".into(),
                ));
            }
            let theta = PolicyTable::from_record(ck.theta, data.vocab)?;
            let reference = PolicyTable::from_record(ck.reference, data.vocab)?;
            if reference != *policy {
                return Err(Error::Config(
                    "checkpoint reference differs from the supplied policy".into(),
                ));
            }
            let state = TrainState {
                old: theta.clone(),
                theta,
                reference,
                step: ck.step,
                cursor: ck.cursor,
                stats: ck.stats,
            };
            let progress = Progress {
                baseline: ck.baseline,
                evals: ck.evals,
                steps: ck.steps,
                contexts: ck.confusion_contexts.into_iter().collect(),
            };
            (state, progress)
        }
        None => {
            let state = TrainState::new(policy.clone());
            let watch = Watch::new(&state.reference, data.vocab, &detector);
            let baseline = summarize(policy, policy, &watch, data, &detector, cfg)?;
            let progress = Progress {
                baseline,
                evals: Vec::new(),
                steps: Vec::new(),
                contexts: BTreeSet::new(),
            };
            (state, progress)
        }
    };
    let watch = Watch::new(&state.reference, data.vocab, &detector);
    let n_train = data.train.len();

    while state.step < cfg.steps {
        let mut rollout_incident = None;
        let mut rollout = Rollout {
            sets: Vec::new(),
            processed: 0,
            clean: 0,
            failures: Vec::new(),
        };
        loop {
            let draws: Vec<u64> = (state.cursor..state.cursor + cfg.batch_size as u64).collect();
            let batch: Vec<(u64, &EncodedPrompt)> = draws
                .iter()
                .map(|&d| (d, &data.train[prompt_index(cfg.seed, d, n_train)]))
                .collect();
            let r = rollout_step(&state.theta, &batch, cfg, data.vocab, &detector)?;
            state.cursor += batch.len() as u64;
            rollout.processed += r.processed;
            rollout.clean += r.clean;
            rollout.sets.extend(r.sets);
            rollout.failures.extend(r.failures);
            match cfg.batch_fill {
                BatchFill::Fixed => break,
                BatchFill::Refill { max_draws } => {
                    if rollout.sets.len() >= cfg.batch_size || rollout.processed >= max_draws {
                        rollout.sets.truncate(cfg.batch_size);
                        break;
                    }
                }
            }
        }
        state.stats.responses += rollout.processed;
        state.stats.clean_skipped += rollout.clean;
        state.stats.confusion_hits += rollout.processed - rollout.clean;
        if let Some(first) = rollout.failures.first() {
            // one incident per step; the step still trains on the sets it has
            state.stats.incidents += 1;
            if state.stats.incidents > cfg.incident_limit {
                return Err(Error::IncidentLimit {
                    incidents: state.stats.incidents,
                    limit: cfg.incident_limit,
                });
            }
            rollout_incident = Some(format!("rollout: {first}"));
        }
        progress
            .contexts
            .extend(rollout.sets.iter().map(|s| s.context.window.clone()));

        let step = state.step;
        let out = optimize_step(&mut state, &rollout.sets, cfg)?;
        progress.steps.push(StepRecord {
            step,
            lr: out.lr,
            processed: rollout.processed,
            candidate_sets: rollout.sets.len(),
            degenerate: out.degenerate,
            objective: out
                .iterations
                .first()
                .map(|vals| vals.iter().map(|v| v.total).sum::<f64>() / vals.len() as f64),
            clean_kl: watch.clean_kl(&state.theta, &state.reference),
            confusion_mass: watch.confusion_mass(&state.theta),
            incident: out.incident.or(rollout_incident),
        });
        if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
            let m = evaluate(
                &state.theta,
                data.vocab,
                data.heldout,
                &detector,
                cfg.eval_samples,
                cfg.max_len,
                cfg.seed,
                cfg.exec,
            )?;
            progress.evals.push(EvalPoint {
                step: state.step,
                wpr: m.wpr,
                rpr: m.rpr,
            });
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            on_checkpoint(&checkpoint(cfg, &state, &progress))?;
        }
    }

    let final_eval = summarize(&state.theta, &state.reference, &watch, data, &detector, cfg)?;
    let report = TrainingReport {
        config: cfg.clone(),
        train_prompts: data.train.len(),
        heldout_prompts: data.heldout.len(),
        baseline: progress.baseline.clone(),
        final_eval,
        stats: state.stats,
        evals: progress.evals.clone(),
        steps: progress.steps.clone(),
        confusion_contexts: progress.contexts.iter().cloned().collect(),
    };
    Ok((state, report))
}

/// Final checkpoint of a finished run.
pub fn final_checkpoint(
    cfg: &TrainConfig,
    state: &TrainState,
    report: &TrainingReport,
) -> TrainCheckpoint {
    let p = Progress {
        baseline: report.baseline.clone(),
        evals: report.evals.clone(),
        steps: report.steps.clone(),
        contexts: report.confusion_contexts.iter().cloned().collect(),
    };
    checkpoint(cfg, state, &p)
}
