//! The `gen`, `train`, `eval`, `ablate` and `shift` commands.
//!
//! Every command reads its inputs from files, writes its outputs under one
//! directory and finishes with a `manifest.json` naming the resolved
//! configuration, seeds, input digests and output digests. Reports contain no
//! paths or timestamps, so two runs with the same inputs and seeds produce
//! byte-identical files.
//!
//! Corpus directory layout (written by `gen`):
//!
//! | file | contents |
//! |------|----------|
//! | `vocab.json` | vocabulary |
//! | `corpus.jsonl` | filtered prompts, one record per line |
//! | `policy.json` | base policy checkpoint |
//! | `world.json` | generation spec, digests, designated contexts |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, encode_prompts, filter_target_language, gen_synthetic_corpus, split_heldout, CorpusSpec,
    EncodedPrompt, PromptRecord, WorldManifest,
};
use crate::detector::{Detector, EnglishMode, ScriptRules, TargetLanguage};
use crate::error::{Error, Result};
use crate::exploration::{ranked_order, Selection};
use crate::metrics::Counts;
use crate::objective::AdvantageVariant;
use crate::par::{self, ExecMode};
use crate::policy::{PolicyTable, TokenId, Vocab};
use crate::trainer::{
    evaluate, final_checkpoint, run_training, TrainCheckpoint, TrainConfig, TrainData,
    TrainingReport,
};

pub const VOCAB_FILE: &str = "vocab.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const POLICY_FILE: &str = "policy.json";
pub const WORLD_FILE: &str = "world.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Configuration file: a `[corpus]` table and a `[train]` table, both
/// optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    /// Additional exclusion patterns for the detector.
    pub exclusions: Vec<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_owned(),
            line: e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_owned(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

/// What a command did, enough to re-derive its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run_id: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn digest_of(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: data::file_digest(path)?,
    })
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<RunManifest> {
    let inputs = inputs
        .iter()
        .map(|p| digest_of(p))
        .collect::<Result<Vec<_>>>()?;
    let outputs = outputs
        .iter()
        .map(|p| digest_of(p))
        .collect::<Result<Vec<_>>>()?;
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(serde_json::to_vec(&config)?);
    h.update(serde_json::to_vec(&seeds)?);
    h.update(serde_json::to_vec(&inputs)?);
    let run_id = hex::encode(h.finalize())[..12].to_owned();
    let m = RunManifest {
        command: command.into(),
        run_id,
        config,
        seeds,
        inputs,
        outputs,
    };
    data::write_json(&out.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    data::write_bytes(path, text.as_bytes())
}

/// A corpus directory loaded and checked against its world manifest.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub vocab: Vocab,
    pub prompts: Vec<PromptRecord>,
    pub policy: PolicyTable,
    pub world: WorldManifest,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = data::load_vocab(&dir.join(VOCAB_FILE))?;
        let prompts = data::load_prompts(&dir.join(CORPUS_FILE))?;
        let policy = data::load_policy(&dir.join(POLICY_FILE), &vocab)?;
        let world: WorldManifest = data::read_json(&dir.join(WORLD_FILE))?;
        let digest = data::prompts_digest(&prompts);
        if digest != world.corpus_digest {
            return Err(Error::Config(format!(
                "{}: digest {digest} does not match the recorded {}",
                dir.join(CORPUS_FILE).display(),
                world.corpus_digest
            )));
        }
        Ok(Corpus {
            dir: dir.to_owned(),
            vocab,
            prompts,
            policy,
            world,
        })
    }

    pub fn target(&self) -> TargetLanguage {
        self.prompts
            .first()
            .map(|p| p.lang)
            .unwrap_or(TargetLanguage::Korean)
    }

    pub fn detector(&self, exclusions: &[String], mode: EnglishMode) -> Result<Detector> {
        let rules = ScriptRules::new(self.target()).with_extra_exclusions(exclusions)?;
        Ok(Detector::new(rules, mode))
    }

    /// `(train, held-out)` encoded prompts.
    pub fn split(&self) -> Result<(Vec<EncodedPrompt>, Vec<EncodedPrompt>)> {
        let encoded = encode_prompts(&self.prompts, &self.vocab)?;
        Ok(split_heldout(&encoded, self.world.spec.heldout_fraction))
    }

    fn input_files(&self) -> Vec<PathBuf> {
        [VOCAB_FILE, CORPUS_FILE, POLICY_FILE, WORLD_FILE]
            .iter()
            .map(|f| self.dir.join(f))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub generated: usize,
    pub dropped: Vec<u64>,
    pub kept: usize,
    pub vocab_size: usize,
    pub designated_contexts: usize,
    pub corpus_digest: String,
}

pub fn cmd_gen(spec: &CorpusSpec, out: &Path) -> Result<GenReport> {
    let world = gen_synthetic_corpus(spec)?;
    let rules = ScriptRules::new(TargetLanguage::Korean);
    let filtered = filter_target_language(&world.prompts, &rules);

    let corpus_path = out.join(CORPUS_FILE);
    let digest = data::save_prompts(&corpus_path, &filtered.kept)?;
    data::save_vocab(&out.join(VOCAB_FILE), &world.vocab)?;
    data::save_policy(&out.join(POLICY_FILE), &world.policy)?;
    let mut manifest = world.manifest();
    manifest.corpus_digest = digest.clone();
    manifest.num_prompts = filtered.kept.len();
    data::write_json(&out.join(WORLD_FILE), &manifest)?;

    let report = GenReport {
        generated: world.prompts.len(),
        kept: filtered.kept.len(),
        dropped: filtered.dropped,
        vocab_size: world.vocab.len(),
        designated_contexts: world.designated.len(),
        corpus_digest: digest,
    };
    data::write_json(&out.join(REPORT_FILE), &report)?;
    let outputs: Vec<PathBuf> = [
        CORPUS_FILE,
        VOCAB_FILE,
        POLICY_FILE,
        WORLD_FILE,
        REPORT_FILE,
    ]
    .iter()
    .map(|f| out.join(f))
    .collect();
    write_manifest(
        out,
        "gen",
        serde_json::to_value(spec)?,
        vec![spec.seed],
        &[],
        &outputs,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn train_summary(r: &TrainingReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>8} {:>8} {:>10} {:>10}",
        "", "RPR", "WPR", "clean KL", "conf mass"
    );
    for (name, e) in [("baseline", &r.baseline), ("final", &r.final_eval)] {
        let _ = writeln!(
            s,
            "{:<10} {:>8.4} {:>8.4} {:>10.6} {:>10.6}",
            name, e.rpr, e.wpr, e.clean_kl, e.confusion_mass
        );
    }
    let st = &r.stats;
    let _ = writeln!(
        s,
        "steps {}  responses {}  confused {}  sets {}  degenerate {}  incidents {}",
        r.steps.len(),
        st.responses,
        st.confusion_hits,
        st.candidate_sets,
        st.degenerate_sets,
        st.incidents
    );
    s
}

/// Trains on a corpus directory. With `resume`, continues from a training
/// checkpoint written by an earlier run with the same configuration.
pub fn cmd_train(
    corpus_dir: &Path,
    cfg: &TrainConfig,
    exclusions: &[String],
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainingReport> {
    let corpus = Corpus::load(corpus_dir)?;
    let detector = corpus.detector(exclusions, cfg.mode)?;
    let (train, heldout) = corpus.split()?;
    let data = TrainData {
        vocab: &corpus.vocab,
        train: &train,
        heldout: &heldout,
        detector: &detector,
    };
    let resume_ck = resume.map(TrainCheckpoint::load).transpose()?;
    let ck_dir = out.join(CHECKPOINT_DIR);
    let mut save =
        |ck: &TrainCheckpoint| ck.save(&ck_dir.join(format!("step-{:06}.json", ck.step)));
    let (state, report) = run_training(cfg, &data, &corpus.policy, resume_ck, &mut save)?;

    data::save_policy(&out.join(POLICY_FILE), &state.theta)?;
    final_checkpoint(cfg, &state, &report).save(&out.join(CHECKPOINT_FILE))?;
    data::write_json(&out.join(REPORT_FILE), &report)?;
    write_text(&out.join(SUMMARY_FILE), &train_summary(&report))?;

    let mut inputs = corpus.input_files();
    inputs.extend(resume.map(Path::to_owned));
    let outputs: Vec<PathBuf> = [POLICY_FILE, CHECKPOINT_FILE, REPORT_FILE, SUMMARY_FILE]
        .iter()
        .map(|f| out.join(f))
        .collect();
    write_manifest(
        out,
        "train",
        serde_json::json!({ "train": cfg, "exclusions": exclusions }),
        vec![cfg.seed],
        &inputs,
        &outputs,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EnglishMode,
    pub samples: usize,
    pub max_len: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        EvalOptions {
            mode: t.mode,
            samples: t.eval_samples,
            max_len: t.max_len,
            seed: t.seed,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EnglishMode,
    pub prompts: usize,
    pub samples: usize,
    pub wpr: f64,
    pub rpr: f64,
    pub counts: Counts,
    pub empty_responses: usize,
    pub policy_sha256: String,
}

/// Scores a policy checkpoint on the held-out prompts of a corpus.
pub fn cmd_eval(
    corpus_dir: &Path,
    policy_path: &Path,
    opts: &EvalOptions,
    exclusions: &[String],
    out: &Path,
) -> Result<EvalReport> {
    let corpus = Corpus::load(corpus_dir)?;
    let policy = data::load_policy(policy_path, &corpus.vocab)?;
    let detector = corpus.detector(exclusions, opts.mode)?;
    let (_, heldout) = corpus.split()?;
    let m = evaluate(
        &policy,
        &corpus.vocab,
        &heldout,
        &detector,
        opts.samples,
        opts.max_len,
        opts.seed,
        opts.exec,
    )?;
    let report = EvalReport {
        mode: opts.mode,
        prompts: heldout.len(),
        samples: opts.samples,
        wpr: m.wpr,
        rpr: m.rpr,
        counts: m.counts,
        empty_responses: m.empty_responses.len(),
        policy_sha256: data::file_digest(policy_path)?,
    };
    data::write_json(&out.join(REPORT_FILE), &report)?;
    write_text(
        &out.join(SUMMARY_FILE),
        &format!(
            "mode {}  prompts {}  samples {}\nRPR {:.4}  WPR {:.4}\n",
            report.mode, report.prompts, report.samples, report.rpr, report.wpr
        ),
    )?;
    let mut inputs = corpus.input_files();
    inputs.push(policy_path.to_owned());
    write_manifest(
        out,
        "eval",
        serde_json::to_value(opts)?,
        vec![opts.seed],
        &inputs,
        &[out.join(REPORT_FILE), out.join(SUMMARY_FILE)],
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AdvantageVariant,
    pub selection: Selection,
    pub baseline_rpr: f64,
    pub rpr: f64,
    pub wpr: f64,
    /// Mean KL to the reference on confusion-free contexts.
    pub clean_kl: f64,
    pub confusion_mass: f64,
    pub candidate_sets: usize,
    /// 1 for the smallest `clean_kl`.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Sorted by `clean_kl`, ascending.
    pub rows: Vec<AblationRow>,
}

/// The six advantage-variant and selection-strategy combinations.
pub fn ablation_variants() -> Vec<(AdvantageVariant, Selection)> {
    AdvantageVariant::ALL
        .iter()
        .flat_map(|&v| [Selection::Ranked, Selection::Multinomial].map(|s| (v, s)))
        .collect()
}

/// Trains every variant from the same corpus and seed and ranks them by
/// how far they moved away from the reference on clean contexts.
pub fn run_ablation(
    corpus: &Corpus,
    cfg: &TrainConfig,
    exclusions: &[String],
) -> Result<AblationReport> {
    let detector = corpus.detector(exclusions, cfg.mode)?;
    let (train, heldout) = corpus.split()?;
    let data = TrainData {
        vocab: &corpus.vocab,
        train: &train,
        heldout: &heldout,
        detector: &detector,
    };
    let variants = ablation_variants();
    let results = par::map(cfg.exec, &variants, |_, &(variant, selection)| {
        let c = TrainConfig {
            variant,
            selection,
            checkpoint_every: 0,
            ..cfg.clone()
        };
        run_training(&c, &data, &corpus.policy, None, &mut |_| Ok(())).map(|(_, r)| AblationRow {
            variant,
            selection,
            baseline_rpr: r.baseline.rpr,
            rpr: r.final_eval.rpr,
            wpr: r.final_eval.wpr,
            clean_kl: r.final_eval.clean_kl,
            confusion_mass: r.final_eval.confusion_mass,
            candidate_sets: r.stats.candidate_sets,
            rank: 0,
        })
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.clean_kl.total_cmp(&b.clean_kl));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(AblationReport { rows })
}

fn ablation_summary(r: &AblationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<4} {:<14} {:<12} {:>8} {:>8} {:>12}",
        "rank", "advantage", "selection", "RPR", "WPR", "clean KL"
    );
    for row in &r.rows {
        let sel = match row.selection {
            Selection::Ranked => "ranked",
            Selection::Multinomial => "multinomial",
        };
        let _ = writeln!(
            s,
            "{:<4} {:<14} {:<12} {:>8.4} {:>8.4} {:>12.6}",
            row.rank,
            row.variant.name(),
            sel,
            row.rpr,
            row.wpr,
            row.clean_kl
        );
    }
    s
}

pub fn cmd_ablate(
    corpus_dir: &Path,
    cfg: &TrainConfig,
    exclusions: &[String],
    out: &Path,
) -> Result<AblationReport> {
    cfg.validate()?;
    let corpus = Corpus::load(corpus_dir)?;
    let report = run_ablation(&corpus, cfg, exclusions)?;
    data::write_json(&out.join(REPORT_FILE), &report)?;
    write_text(&out.join(SUMMARY_FILE), &ablation_summary(&report))?;
    write_manifest(
        out,
        "ablate",
        serde_json::json!({ "train": cfg, "exclusions": exclusions }),
        vec![cfg.seed],
        &corpus.input_files(),
        &[out.join(REPORT_FILE), out.join(SUMMARY_FILE)],
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// shift
// ---------------------------------------------------------------------------

/// Cumulative probabilities of the three token groups at one context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMass {
    /// Confusion tokens inside the top-N.
    pub confusion_in_top: f64,
    /// Confusion tokens outside the top-N.
    pub confusion_outside: f64,
    /// Other tokens outside the top-N.
    pub other_outside: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub context: Vec<TokenId>,
    pub top_n: Vec<TokenId>,
    pub before: GroupMass,
    pub after: GroupMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub n: usize,
    pub rows: Vec<ShiftRow>,
    /// Share of contexts where confusion mass outside the top-N went down.
    pub confusion_outside_decreased: f64,
    pub mean_before: GroupMass,
    pub mean_after: GroupMass,
}

fn group_mass(probs: &[f64], top: &[TokenId], confusing: &[bool]) -> GroupMass {
    let mut in_top = vec![false; probs.len()];
    for &t in top {
        in_top[t as usize] = true;
    }
    let mut g = GroupMass::default();
    for (i, &p) in probs.iter().enumerate() {
        match (confusing[i], in_top[i]) {
            (true, true) => g.confusion_in_top += p,
            (true, false) => g.confusion_outside += p,
            (false, false) => g.other_outside += p,
            (false, true) => {}
        }
    }
    g
}

fn mean_mass(rows: &[ShiftRow], pick: impl Fn(&ShiftRow) -> GroupMass) -> GroupMass {
    let n = rows.len().max(1) as f64;
    let mut m = GroupMass::default();
    for r in rows {
        let g = pick(r);
        m.confusion_in_top += g.confusion_in_top / n;
        m.confusion_outside += g.confusion_outside / n;
        m.other_outside += g.other_outside / n;
    }
    m
}

/// Compares the group masses of two policies at `contexts`; the top-N set
/// comes from `baseline`.
pub fn shift_analysis(
    baseline: &PolicyTable,
    trained: &PolicyTable,
    contexts: &[Vec<TokenId>],
    confusing: &[bool],
    n: usize,
) -> ShiftReport {
    let rows: Vec<ShiftRow> = contexts
        .iter()
        .map(|key| {
            let before = baseline.dist_for_key(key);
            let after = trained.dist_for_key(key);
            let top: Vec<TokenId> = ranked_order(&before).into_iter().take(n).collect();
            ShiftRow {
                context: key.clone(),
                before: group_mass(before.probs(), &top, confusing),
                after: group_mass(after.probs(), &top, confusing),
                top_n: top,
            }
        })
        .collect();
    let decreased = rows
        .iter()
        .filter(|r| r.after.confusion_outside < r.before.confusion_outside)
        .count();
    ShiftReport {
        n,
        confusion_outside_decreased: if rows.is_empty() {
            0.0
        } else {
            decreased as f64 / rows.len() as f64
        },
        mean_before: mean_mass(&rows, |r| r.before),
        mean_after: mean_mass(&rows, |r| r.after),
        rows,
    }
}

fn shift_summary(r: &ShiftReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "contexts {}  top-N {}", r.rows.len(), r.n);
    let _ = writeln!(
        s,
        "{:<28} {:>12} {:>12}",
        "group (mean mass)", "before", "after"
    );
    for (name, b, a) in [
        (
            "confusion in top-N",
            r.mean_before.confusion_in_top,
            r.mean_after.confusion_in_top,
        ),
        (
            "confusion outside top-N",
            r.mean_before.confusion_outside,
            r.mean_after.confusion_outside,
        ),
        (
            "other outside top-N",
            r.mean_before.other_outside,
            r.mean_after.other_outside,
        ),
    ] {
        let _ = writeln!(s, "{name:<28} {b:>12.6e} {a:>12.6e}");
    }
    let _ = writeln!(
        s,
        "confusion outside top-N decreased at {:.1}% of contexts",
        100.0 * r.confusion_outside_decreased
    );
    s
}

/// Shift analysis between a base policy and the result of a training run.
/// `baseline` and `trained` default to the corpus policy and the run's
/// policy; contexts and N come from the run's report.
pub fn cmd_shift(
    corpus_dir: &Path,
    run_dir: &Path,
    baseline: Option<&Path>,
    trained: Option<&Path>,
    out: &Path,
) -> Result<ShiftReport> {
    let corpus = Corpus::load(corpus_dir)?;
    let base_path = baseline.map_or_else(|| corpus_dir.join(POLICY_FILE), Path::to_owned);
    let trained_path = trained.map_or_else(|| run_dir.join(POLICY_FILE), Path::to_owned);
    let report_path = run_dir.join(REPORT_FILE);
    let base = data::load_policy(&base_path, &corpus.vocab)?;
    let after = data::load_policy(&trained_path, &corpus.vocab)?;
    let run: TrainingReport = data::read_json(&report_path)?;
    let detector = corpus.detector(&[], run.config.mode)?;
    let confusing = detector.confusing_tokens(&corpus.vocab);
    let report = shift_analysis(
        &base,
        &after,
        &run.confusion_contexts,
        &confusing,
        run.config.n,
    );
    data::write_json(&out.join(REPORT_FILE), &report)?;
    write_text(&out.join(SUMMARY_FILE), &shift_summary(&report))?;
    write_manifest(
        out,
        "shift",
        serde_json::json!({ "n": run.config.n, "mode": run.config.mode }),
        vec![run.config.seed],
        &[base_path, trained_path, report_path],
        &[out.join(REPORT_FILE), out.join(SUMMARY_FILE)],
    )?;
    Ok(report)
}
