//! Prompt corpora, synthetic worlds and file formats.
//!
//! A synthetic world is a vocabulary whose "languages" are disjoint Unicode
//! script slices (Hangul words as the target, lowercase Cyrillic as the
//! confusing language, lowercase ASCII as English, digits and punctuation as
//! neutral) plus a base policy over it. A designated fraction of contexts put
//! exactly `confusion_rate` of their mass on Cyrillic tokens; the other
//! contexts put a negligible floor there. Because the script slices are real,
//! the ordinary detector runs on the decoded text unchanged.
//!
//! Files:
//!
//! - prompt corpus: one JSON object per line with `id`, `text`, `lang`
//! - vocabulary: JSON, `{"eos": id, "entries": [{"id", "surface", "tag"}]}`
//! - policy checkpoint: JSON, see [`crate::policy::PolicyRecord`]
//! - world manifest: JSON, see [`WorldManifest`]

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, EnglishMode, ScriptRules, TargetLanguage, WordClass};
use crate::error::{Error, Result};
use crate::policy::{Coupling, LangTag, PolicyTable, TokenId, TokenSequence, Vocab, VocabEntry};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: u64,
    pub text: String,
    pub lang: TargetLanguage,
}

/// A prompt after tokenization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPrompt {
    pub id: u64,
    pub tokens: TokenSequence,
}

pub fn encode_prompts(prompts: &[PromptRecord], vocab: &Vocab) -> Result<Vec<EncodedPrompt>> {
    prompts
        .iter()
        .map(|p| {
            Ok(EncodedPrompt {
                id: p.id,
                tokens: vocab.encode(&p.text)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub target_vocab: usize,
    pub confused_vocab: usize,
    pub english_vocab: usize,
    pub neutral_vocab: usize,
    pub num_prompts: usize,
    /// Share of prompts held out for evaluation (taken from the end).
    pub heldout_fraction: f64,
    /// Tokens per prompt; at least the context window.
    pub prompt_len: usize,
    /// Confusion-token mass at designated contexts.
    pub confusion_rate: f64,
    /// Share of non-confused contexts that are designated.
    pub designated_fraction: f64,
    /// Number of prompts that get one Cyrillic word injected (for filtering).
    pub off_script_prompts: usize,
    /// End-of-sequence mass at every non-confused context.
    pub eos_prob: f64,
    /// Context window `m` of the generated policy (1 or 2).
    pub window: usize,
    pub coupling: Coupling,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            target_vocab: 24,
            confused_vocab: 8,
            english_vocab: 6,
            neutral_vocab: 4,
            num_prompts: 1000,
            heldout_fraction: 0.2,
            prompt_len: 3,
            confusion_rate: 0.25,
            designated_fraction: 0.3,
            off_script_prompts: 0,
            eos_prob: 0.04,
            window: 1,
            coupling: Coupling {
                row_tag: 3.0,
                global_tag: 0.3,
            },
            seed: 0,
        }
    }
}

/// Number of target tokens carrying the bulk of a designated row.
const HEAD_TARGETS: usize = 8;
/// Number of confusion tokens carrying the bulk of the confusion mass.
const HEAD_CONFUSED: usize = 3;
/// Mass of each remaining token in a designated row.
const TAIL: f64 = 1e-4;
/// Mass that stands in for "never".
const FLOOR: f64 = 1e-12;
/// Mass of each English or neutral token in a clean row.
const CLEAN_OTHER: f64 = 0.01;
/// Largest generated context window; the table grows as |V|^m.
const MAX_GEN_WINDOW: usize = 2;

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.target_vocab < 2 {
            return bad("need at least 2 target tokens".into());
        }
        if self.english_vocab == 0 || self.neutral_vocab == 0 {
            return bad("English and neutral vocabularies must be non-empty".into());
        }
        if self.num_prompts == 0 {
            return bad("corpus must have at least one prompt".into());
        }
        for (name, x) in [
            ("confusion rate", self.confusion_rate),
            ("designated fraction", self.designated_fraction),
            ("held-out fraction", self.heldout_fraction),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return bad(format!("{name} {x} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.eos_prob) {
            return bad(format!("eos probability {} outside [0, 1)", self.eos_prob));
        }
        if self.confusion_rate > 0.0 && self.confused_vocab == 0 {
            return bad("positive confusion rate with no confusion tokens".into());
        }
        if self.window == 0 || self.window > MAX_GEN_WINDOW {
            return bad(format!(
                "generated worlds support windows 1..={MAX_GEN_WINDOW}, got {}",
                self.window
            ));
        }
        if self.prompt_len < self.window {
            return bad(format!(
                "prompt length {} shorter than the context window {}",
                self.prompt_len, self.window
            ));
        }
        if self.off_script_prompts > self.num_prompts {
            return bad("more off-script prompts than prompts".into());
        }
        if self.off_script_prompts > 0 && self.confused_vocab == 0 {
            return bad("off-script prompts need confusion tokens".into());
        }
        let others = (self.english_vocab + self.neutral_vocab) as f64;
        let left_designated = 1.0 - self.confusion_rate - self.eos_prob - others * TAIL;
        let left_clean = 1.0 - self.eos_prob - others * CLEAN_OTHER;
        if left_designated < 0.05 || left_clean < 0.05 {
            return bad(format!(
                "infeasible masses: confusion rate {} and eos probability {} leave no room for the target language",
                self.confusion_rate, self.eos_prob
            ));
        }
        Ok(())
    }
}

/// Everything `gen_synthetic_corpus` produces.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: CorpusSpec,
    pub vocab: Vocab,
    pub prompts: Vec<PromptRecord>,
    pub policy: PolicyTable,
    /// Context keys whose confusion mass equals the seeded rate.
    pub designated: Vec<Vec<TokenId>>,
    /// Ids of prompts with an injected Cyrillic word.
    pub off_script: Vec<u64>,
}

/// Metadata written next to a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub spec: CorpusSpec,
    pub vocab_hash: String,
    pub corpus_digest: String,
    pub num_prompts: usize,
    pub designated: Vec<Vec<TokenId>>,
    pub off_script: Vec<u64>,
}

const ENGLISH_WORDS: &[&str] = &[
    "the", "river", "garden", "yellow", "window", "music", "story", "bread", "quiet", "open",
    "friend", "winter", "paper", "stone", "light", "table", "cloud", "horse", "apple", "green",
];
const NEUTRAL_SURFACES: &[&str] = &[" ,", " .", " 1", " 2", " 3", " !", " ?", " 7", " 9", " ;"];

fn unique_words<R: Rng>(
    rng: &mut R,
    n: usize,
    taken: &mut BTreeSet<String>,
    mut make: impl FnMut(&mut R) -> String,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = make(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn build_vocab(spec: &CorpusSpec) -> Result<Vocab> {
    if spec.english_vocab > ENGLISH_WORDS.len() || spec.neutral_vocab > NEUTRAL_SURFACES.len() {
        return Err(Error::Config(format!(
            "at most {} English and {} neutral tokens are available",
            ENGLISH_WORDS.len(),
            NEUTRAL_SURFACES.len()
        )));
    }
    let mut rng = rng::rng_for(spec.seed, &[rng::TAG_CORPUS, 0]);
    let mut taken = BTreeSet::new();
    let hangul = |r: &mut rand_chacha::ChaCha8Rng| {
        let len = r.gen_range(1..=2);
        let s: String = (0..len)
            .map(|_| char::from_u32(r.gen_range(0xAC00..=0xD7A3)).expect("hangul syllable"))
            .collect();
        format!(" {s}")
    };
    let cyrillic = |r: &mut rand_chacha::ChaCha8Rng| {
        let len = r.gen_range(2..=4);
        let s: String = (0..len)
            .map(|_| char::from_u32(r.gen_range(0x0430..=0x044F)).expect("cyrillic letter"))
            .collect();
        format!(" {s}")
    };
    let target = unique_words(&mut rng, spec.target_vocab, &mut taken, hangul);
    let confused = unique_words(&mut rng, spec.confused_vocab, &mut taken, cyrillic);

    let mut entries = Vec::new();
    let mut push = |surface: String, tag| {
        let id = entries.len() as TokenId;
        entries.push(VocabEntry { id, surface, tag });
    };
    for s in target {
        push(s, LangTag::Target);
    }
    for s in confused {
        push(s, LangTag::Confused);
    }
    for w in &ENGLISH_WORDS[..spec.english_vocab] {
        push(format!(" {w}"), LangTag::English);
    }
    for s in &NEUTRAL_SURFACES[..spec.neutral_vocab] {
        push((*s).to_owned(), LangTag::Neutral);
    }
    push("</s>".into(), LangTag::Neutral);
    let eos = entries.len() as TokenId - 1;
    Vocab::new(entries, Some(eos))
}

/// Geometric weights `0.95^rank` over `ids` in a shuffled order, scaled to
/// `mass`.
fn spread<R: Rng>(rng: &mut R, probs: &mut [f64], ids: &[usize], mass: f64) {
    let mut order = ids.to_vec();
    order.shuffle(rng);
    let w: Vec<f64> = (0..order.len()).map(|i| 0.95f64.powi(i as i32)).collect();
    let total: f64 = w.iter().sum();
    for (&id, wi) in order.iter().zip(w) {
        probs[id] = mass * wi / total;
    }
}

struct Groups {
    target: Vec<usize>,
    confused: Vec<usize>,
    english: Vec<usize>,
    neutral: Vec<usize>,
    other: Vec<usize>,
    eos: usize,
}

fn groups(vocab: &Vocab) -> Groups {
    let eos = vocab.eos().expect("generated vocab has eos") as usize;
    let mut g = Groups {
        target: vec![],
        confused: vec![],
        english: vec![],
        neutral: vec![],
        other: vec![],
        eos,
    };
    for e in vocab.entries() {
        let i = e.id as usize;
        if i == eos {
            continue;
        }
        match e.tag {
            LangTag::Target => g.target.push(i),
            LangTag::Confused => g.confused.push(i),
            LangTag::English => {
                g.english.push(i);
                g.other.push(i);
            }
            LangTag::Neutral => {
                g.neutral.push(i);
                g.other.push(i);
            }
        }
    }
    g
}

fn designated_row<R: Rng>(rng: &mut R, g: &Groups, n: usize, spec: &CorpusSpec) -> Vec<f64> {
    let mut p = vec![TAIL; n];
    p[g.eos] = spec.eos_prob.max(FLOOR);
    let rate = spec.confusion_rate;
    if rate == 0.0 {
        for &c in &g.confused {
            p[c] = FLOOR;
        }
    } else {
        let mut conf = g.confused.clone();
        conf.shuffle(rng);
        let head = conf.len().min(HEAD_CONFUSED);
        let tail_mass = TAIL * (conf.len() - head) as f64;
        if rate <= 2.0 * tail_mass {
            for &c in &conf {
                p[c] = rate / conf.len() as f64;
            }
        } else {
            let w = [1.0, 0.7, 0.5];
            let wsum: f64 = w[..head].iter().sum();
            for (i, &c) in conf[..head].iter().enumerate() {
                p[c] = (rate - tail_mass) * w[i] / wsum;
            }
        }
    }
    // the head holds target tokens plus one English and one neutral token
    let mut head: Vec<usize> = g.target.clone();
    head.shuffle(rng);
    head.truncate(HEAD_TARGETS);
    for group in [&g.english, &g.neutral] {
        if let Some(&t) = group.choose(rng) {
            head.push(t);
        }
    }
    let fixed: f64 = (0..n).filter(|i| !head.contains(i)).map(|i| p[i]).sum();
    spread(rng, &mut p, &head, 1.0 - fixed);
    p
}

fn clean_row<R: Rng>(rng: &mut R, g: &Groups, n: usize, spec: &CorpusSpec) -> Vec<f64> {
    let mut p = vec![0.0; n];
    p[g.eos] = spec.eos_prob.max(FLOOR);
    for &c in &g.confused {
        p[c] = FLOOR;
    }
    for &o in &g.other {
        p[o] = CLEAN_OTHER;
    }
    let fixed: f64 = p.iter().sum();
    spread(rng, &mut p, &g.target, 1.0 - fixed);
    p
}

/// After a Cyrillic word the text mostly stays Cyrillic.
fn confused_row<R: Rng>(rng: &mut R, g: &Groups, n: usize, spec: &CorpusSpec) -> Vec<f64> {
    let mut p = vec![TAIL; n];
    p[g.eos] = spec.eos_prob.max(FLOOR);
    let fixed = p[g.eos] + TAIL * g.other.len() as f64;
    let rest = 1.0 - fixed;
    spread(rng, &mut p, &g.confused, 0.7 * rest);
    spread(rng, &mut p, &g.target, 0.3 * rest);
    p
}

fn log_row(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

/// Builds the vocabulary, prompts and base policy of a synthetic world.
pub fn gen_synthetic_corpus(spec: &CorpusSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let vocab = build_vocab(spec)?;
    let g = groups(&vocab);
    let n = vocab.len();
    let mut policy = PolicyTable::new(&vocab, spec.window, spec.coupling)?;

    // context keys: every window of non-eos tokens
    let base: Vec<usize> = (0..n).filter(|&i| i != g.eos).collect();
    let mut keys: Vec<Vec<TokenId>> = base.iter().map(|&i| vec![i as TokenId]).collect();
    for _ in 1..spec.window {
        keys = keys
            .iter()
            .flat_map(|k| {
                base.iter().map(move |&i| {
                    let mut k = k.clone();
                    k.push(i as TokenId);
                    k
                })
            })
            .collect();
    }
    let is_confused = |k: &Vec<TokenId>| g.confused.contains(&(*k.last().unwrap() as usize));
    let mut open: Vec<Vec<TokenId>> = keys.iter().filter(|k| !is_confused(k)).cloned().collect();
    let mut rng = rng::rng_for(spec.seed, &[rng::TAG_CORPUS, 1]);
    open.shuffle(&mut rng);
    let n_designated = (spec.designated_fraction * open.len() as f64).round() as usize;
    let mut designated: Vec<Vec<TokenId>> = open[..n_designated].to_vec();
    designated.sort();

    let mut rng = rng::rng_for(spec.seed, &[rng::TAG_CORPUS, 2]);
    for key in &keys {
        let p = if is_confused(key) {
            confused_row(&mut rng, &g, n, spec)
        } else if designated.binary_search(key).is_ok() {
            designated_row(&mut rng, &g, n, spec)
        } else {
            clean_row(&mut rng, &g, n, spec)
        };
        policy.set_row(key.clone(), log_row(&p))?;
    }

    let mut rng = rng::rng_for(spec.seed, &[rng::TAG_CORPUS, 3]);
    let mut off_ids: Vec<u64> = (0..spec.num_prompts as u64).collect();
    off_ids.shuffle(&mut rng);
    let mut off_script: Vec<u64> = off_ids[..spec.off_script_prompts].to_vec();
    off_script.sort();
    let mut prompts = Vec::with_capacity(spec.num_prompts);
    for id in 0..spec.num_prompts as u64 {
        let mut toks: Vec<usize> = (0..spec.prompt_len)
            .map(|_| g.target[rng.gen_range(0..g.target.len())])
            .collect();
        if off_script.binary_search(&id).is_ok() {
            let pos = rng.gen_range(0..toks.len());
            toks[pos] = g.confused[rng.gen_range(0..g.confused.len())];
        }
        let text: String = toks.iter().map(|&t| vocab.surface(t as TokenId)).collect();
        prompts.push(PromptRecord {
            id,
            text,
            lang: TargetLanguage::Korean,
        });
    }

    Ok(SyntheticWorld {
        spec: spec.clone(),
        vocab,
        prompts,
        policy,
        designated,
        off_script,
    })
}

impl SyntheticWorld {
    pub fn manifest(&self) -> WorldManifest {
        WorldManifest {
            spec: self.spec.clone(),
            vocab_hash: self.vocab.hash(),
            corpus_digest: prompts_digest(&self.prompts),
            num_prompts: self.prompts.len(),
            designated: self.designated.clone(),
            off_script: self.off_script.clone(),
        }
    }
}

/// Outcome of [`filter_target_language`].
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<PromptRecord>,
    pub dropped: Vec<u64>,
}

/// Drops prompts containing a word outside the target scripts. Exclusion
/// rules apply first; English letters count as foreign here.
pub fn filter_target_language(prompts: &[PromptRecord], rules: &ScriptRules) -> FilterOutcome {
    let det = Detector::new(rules.clone(), EnglishMode::Strict);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for p in prompts {
        let r = det.report_text(&p.text);
        if r.words.iter().any(|w| w.class == WordClass::Confused) {
            dropped.push(p.id);
        } else {
            kept.push(p.clone());
        }
    }
    FilterOutcome { kept, dropped }
}

/// Splits off the last `fraction` of the prompts (rounded) for evaluation.
pub fn split_heldout<T: Clone>(prompts: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_held = ((prompts.len() as f64) * fraction).round() as usize;
    let cut = prompts.len() - n_held.min(prompts.len());
    (prompts[..cut].to_vec(), prompts[cut..].to_vec())
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

fn jsonl_bytes(prompts: &[PromptRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in prompts {
        out.extend(serde_json::to_vec(p).expect("prompt serializes"));
        out.push(b'\n');
    }
    out
}

/// SHA-256 of the corpus file contents.
pub fn prompts_digest(prompts: &[PromptRecord]) -> String {
    hex::encode(Sha256::digest(jsonl_bytes(prompts)))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes the corpus and returns its digest.
pub fn save_prompts(path: &Path, prompts: &[PromptRecord]) -> Result<String> {
    let bytes = jsonl_bytes(prompts);
    write_bytes(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompts(&text, &path.display().to_string())
}

/// Parses a corpus; `origin` names the source in errors.
pub fn parse_prompts(text: &str, origin: &str) -> Result<Vec<PromptRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: origin.to_owned(),
            line: i + 1,
            message,
        };
        let rec: PromptRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.text.is_empty() {
            return Err(err("empty prompt text".into()));
        }
        if !seen.insert(rec.id) {
            return Err(err(format!("duplicate prompt id {}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_json(path, vocab)
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    read_json(path)
}

pub fn save_policy(path: &Path, policy: &PolicyTable) -> Result<()> {
    write_json(path, &policy.to_record())
}

pub fn load_policy(path: &Path, vocab: &Vocab) -> Result<PolicyTable> {
    PolicyTable::from_record(read_json(path)?, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::TargetLanguage;
    use crate::policy::Decoding;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_prompts: 100,
            ..Default::default()
        }
    }

    #[test]
    fn vocab_tags_match_detector() {
        let w = gen_synthetic_corpus(&small_spec()).unwrap();
        let det = Detector::new(
            ScriptRules::new(TargetLanguage::Korean),
            EnglishMode::Neutral,
        );
        let strict = det.with_mode(EnglishMode::Strict);
        for e in w.vocab.entries() {
            if Some(e.id) == w.vocab.eos() {
                continue;
            }
            let neutral = det.classify(e.surface.trim());
            let st = strict.classify(e.surface.trim());
            match e.tag {
                LangTag::Target => assert_eq!((neutral, st), (WordClass::Pass, WordClass::Pass)),
                LangTag::Confused => assert_eq!(neutral, WordClass::Confused),
                LangTag::English => {
                    assert_eq!(
                        (neutral, st),
                        (WordClass::Pass, WordClass::Confused),
                        "{}",
                        e.surface
                    )
                }
                LangTag::Neutral => assert_eq!(neutral, WordClass::Excluded),
            }
        }
    }

    #[test]
    fn designated_mass_matches_rate() {
        let spec = small_spec();
        let w = gen_synthetic_corpus(&spec).unwrap();
        let conf: Vec<bool> = w
            .vocab
            .tags()
            .iter()
            .map(|&t| t == LangTag::Confused)
            .collect();
        let rate = spec.confusion_rate;
        assert!(!w.designated.is_empty());
        for key in w.policy.contexts() {
            let d = w.policy.dist_for_key(key);
            let mass: f64 = d
                .probs()
                .iter()
                .zip(&conf)
                .filter(|(_, &c)| c)
                .map(|(p, _)| p)
                .sum();
            if w.designated.contains(key) {
                assert!((mass - rate).abs() <= 0.01 * rate, "{mass}");
            } else if !conf[*key.last().unwrap() as usize] {
                assert!(mass < 1e-9);
            }
        }
    }

    #[test]
    fn rate_zero_never_confuses() {
        let spec = CorpusSpec {
            confusion_rate: 0.0,
            ..small_spec()
        };
        let w = gen_synthetic_corpus(&spec).unwrap();
        let det = Detector::new(
            ScriptRules::new(TargetLanguage::Korean),
            EnglishMode::Neutral,
        );
        let prompts = encode_prompts(&w.prompts, &w.vocab).unwrap();
        for (i, p) in prompts.iter().enumerate() {
            let y = w
                .policy
                .sample_sequence(p.id, &p.tokens, 8, i as u64, Decoding::Multinomial);
            assert!(!det.report(&y, &w.vocab).is_confused());
        }
    }

    #[test]
    fn per_response_frequency_matches_closed_form() {
        let spec = CorpusSpec {
            confusion_rate: 0.4,
            designated_fraction: 1.0,
            eos_prob: 0.0,
            ..small_spec()
        };
        let w = gen_synthetic_corpus(&spec).unwrap();
        let det = Detector::new(
            ScriptRules::new(TargetLanguage::Korean),
            EnglishMode::Neutral,
        );
        let prompts = encode_prompts(&w.prompts, &w.vocab).unwrap();
        let len = 3;
        let mut hits = 0;
        for i in 0..1000 {
            let p = &prompts[i % prompts.len()];
            let y = w.policy.sample_sequence(
                p.id,
                &p.tokens,
                len,
                1000 + i as u64,
                Decoding::Multinomial,
            );
            assert_eq!(y.len(), len);
            hits += det.report(&y, &w.vocab).is_confused() as usize;
        }
        let expected = 1.0 - (1.0f64 - 0.4).powi(len as i32);
        let freq = hits as f64 / 1000.0;
        assert!((freq - expected).abs() <= 0.05, "{freq} vs {expected}");
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic_corpus(&small_spec()).unwrap();
        let b = gen_synthetic_corpus(&small_spec()).unwrap();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(a.policy, b.policy);
        let c = gen_synthetic_corpus(&CorpusSpec {
            seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.prompts, c.prompts);
    }

    #[test]
    fn window_two() {
        let spec = CorpusSpec {
            window: 2,
            target_vocab: 6,
            confused_vocab: 2,
            english_vocab: 1,
            neutral_vocab: 1,
            ..small_spec()
        };
        let w = gen_synthetic_corpus(&spec).unwrap();
        assert_eq!(w.policy.contexts().count(), 10 * 10);
        assert!(w.policy.contexts().all(|k| k.len() == 2));
    }

    #[test]
    fn infeasible_specs() {
        for spec in [
            CorpusSpec {
                confusion_rate: 0.99,
                ..small_spec()
            },
            CorpusSpec {
                confused_vocab: 0,
                ..small_spec()
            },
            CorpusSpec {
                window: 3,
                prompt_len: 3,
                ..small_spec()
            },
            CorpusSpec {
                window: 2,
                prompt_len: 1,
                ..small_spec()
            },
        ] {
            assert!(matches!(gen_synthetic_corpus(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn filter_drops_labeled_prompts() {
        let spec = CorpusSpec {
            off_script_prompts: 7,
            ..small_spec()
        };
        let w = gen_synthetic_corpus(&spec).unwrap();
        let rules = ScriptRules::new(TargetLanguage::Korean);
        let out = filter_target_language(&w.prompts, &rules);
        assert_eq!(out.kept.len(), 93);
        assert_eq!(out.dropped, w.off_script);
        let again = filter_target_language(&out.kept, &rules);
        assert_eq!(again.kept, out.kept);
        assert!(again.dropped.is_empty());
    }

    #[test]
    fn corpus_round_trip_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let w = gen_synthetic_corpus(&small_spec()).unwrap();
        let path = dir.path().join("c.jsonl");
        let digest = save_prompts(&path, &w.prompts).unwrap();
        assert_eq!(digest, file_digest(&path).unwrap());
        assert_eq!(load_prompts(&path).unwrap(), w.prompts);

        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 10];
        let e = parse_prompts(cut, "c.jsonl").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 100, .. }), "{e}");
        let e = parse_prompts("{\"id\":1,\"text\":\"x\",\"lang\":\"ko\"}\n{}\n", "f").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_prompts("{\"id\":1,\"text\":\"\",\"lang\":\"ko\"}\n", "f").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn vocab_and_policy_files() {
        let dir = tempfile::tempdir().unwrap();
        let w = gen_synthetic_corpus(&small_spec()).unwrap();
        save_vocab(&dir.path().join("v.json"), &w.vocab).unwrap();
        save_policy(&dir.path().join("p.json"), &w.policy).unwrap();
        let v = load_vocab(&dir.path().join("v.json")).unwrap();
        assert_eq!(v, w.vocab);
        assert_eq!(
            load_policy(&dir.path().join("p.json"), &v).unwrap(),
            w.policy
        );
    }
}
