//! Rule-based language-confusion detector.
//!
//! A word passes when every letter it contains belongs to the target
//! language's scripts. Before that check, a fixed sequence of exclusion rules
//! runs; a word that trips one is left out of both the pass and the total
//! counts. Rule order:
//!
//! 1. URL or email address
//! 2. user-supplied exclusion patterns
//! 3. code identifier (function call, `snake_case`, `camelCase`, paths)
//! 4. unit of measurement written in letters (`5kg`, `km`)
//! 5. leading Latin capital (proper nouns)
//! 6. romanization tone marks or phonetic symbols
//! 7. math, currency, arrow and emoji characters are stripped one by one; a
//!    word left with no letters is excluded
//!
//! In [`EnglishMode::Neutral`] Basic-Latin letters are allowed alongside the
//! target scripts; in [`EnglishMode::Strict`] they count as confusion.

mod rules;
pub mod script;
mod segment;

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{TokenId, Vocab};

pub use rules::ExclusionRule;
pub use script::{Script, SymbolClass, UNICODE_VERSION};
pub use segment::{segment, segment_spans};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetLanguage {
    #[serde(rename = "ko")]
    Korean,
    #[serde(rename = "zh")]
    Chinese,
    #[serde(rename = "ja")]
    Japanese,
    #[serde(rename = "ar")]
    Arabic,
    #[serde(rename = "ru")]
    Russian,
}

impl TargetLanguage {
    pub fn scripts(self) -> &'static [Script] {
        match self {
            TargetLanguage::Korean => &[Script::Hangul],
            TargetLanguage::Chinese => &[Script::Han],
            TargetLanguage::Japanese => &[Script::Han, Script::Hiragana, Script::Katakana],
            TargetLanguage::Arabic => &[Script::Arabic],
            TargetLanguage::Russian => &[Script::Cyrillic],
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            TargetLanguage::Korean => "ko",
            TargetLanguage::Chinese => "zh",
            TargetLanguage::Japanese => "ja",
            TargetLanguage::Arabic => "ar",
            TargetLanguage::Russian => "ru",
        }
    }
}

impl std::str::FromStr for TargetLanguage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ko" => Ok(TargetLanguage::Korean),
            "zh" => Ok(TargetLanguage::Chinese),
            "ja" => Ok(TargetLanguage::Japanese),
            "ar" => Ok(TargetLanguage::Arabic),
            "ru" => Ok(TargetLanguage::Russian),
            other => Err(Error::Config(format!("unknown target language {other:?}"))),
        }
    }
}

/// Treatment of English (Basic-Latin) words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnglishMode {
    /// English is neither target nor confusion.
    #[default]
    Neutral,
    /// English counts as confusion.
    Strict,
}

impl fmt::Display for EnglishMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnglishMode::Neutral => "neutral",
            EnglishMode::Strict => "strict",
        })
    }
}

impl std::str::FromStr for EnglishMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neutral" => Ok(EnglishMode::Neutral),
            "strict" => Ok(EnglishMode::Strict),
            other => Err(Error::Config(format!("unknown English mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordClass {
    Pass,
    Confused,
    Excluded,
}

/// Target scripts plus the exclusion rule list.
#[derive(Clone, Debug)]
pub struct ScriptRules {
    target: TargetLanguage,
    allowed: BTreeSet<Script>,
    extra: Vec<Regex>,
}

impl ScriptRules {
    pub fn new(target: TargetLanguage) -> Self {
        ScriptRules {
            target,
            allowed: target.scripts().iter().copied().collect(),
            extra: Vec::new(),
        }
    }

    /// Adds word-level exclusion regexes, checked right after URL/email.
    pub fn with_extra_exclusions<S: AsRef<str>>(mut self, patterns: &[S]) -> Result<Self> {
        for p in patterns {
            let re = Regex::new(p.as_ref()).map_err(|e| {
                Error::Config(format!("bad exclusion pattern {:?}: {e}", p.as_ref()))
            })?;
            self.extra.push(re);
        }
        Ok(self)
    }

    pub fn target(&self) -> TargetLanguage {
        self.target
    }

    pub fn allowed(&self) -> &BTreeSet<Script> {
        &self.allowed
    }

    pub fn extra_patterns(&self) -> Vec<String> {
        self.extra.iter().map(|r| r.as_str().to_owned()).collect()
    }

    fn letter_allowed(&self, c: char, mode: EnglishMode) -> bool {
        let s = script::script_of(c);
        matches!(s, Script::Common | Script::Inherited)
            || self.allowed.contains(&s)
            || (mode == EnglishMode::Neutral && script::is_basic_latin_letter(c))
    }
}

/// Classification with the rule that decided it, for audit output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub class: WordClass,
    pub rule: Option<ExclusionRule>,
}

pub fn classify_word(word: &str, rules: &ScriptRules, mode: EnglishMode) -> WordClass {
    explain_word(word, rules, mode).class
}

pub fn explain_word(word: &str, rules: &ScriptRules, mode: EnglishMode) -> Verdict {
    if let Some(rule) = rules::word_exclusion(word, rules) {
        return Verdict {
            class: WordClass::Excluded,
            rule: Some(rule),
        };
    }
    let mut letters = 0usize;
    let mut confused = false;
    for c in word.chars() {
        if script::symbol_class(c).is_some() || !c.is_alphabetic() {
            continue;
        }
        if matches!(script::script_of(c), Script::Inherited) {
            continue;
        }
        letters += 1;
        if !rules.letter_allowed(c, mode) {
            confused = true;
        }
    }
    match (letters, confused) {
        (0, _) => Verdict {
            class: WordClass::Excluded,
            rule: Some(ExclusionRule::NoLetters),
        },
        (_, true) => Verdict {
            class: WordClass::Confused,
            rule: None,
        },
        (_, false) => Verdict {
            class: WordClass::Pass,
            rule: None,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordRecord {
    pub surface: String,
    pub class: WordClass,
}

/// Per-word classification of one response.
///
/// `confusion_point` is the index of the first token of the first confused
/// word. For reports built from raw text each word counts as one token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub words: Vec<WordRecord>,
    pub confusion_point: Option<usize>,
    pub mode: EnglishMode,
    pub unicode_version: String,
}

impl ConfusionReport {
    /// Report from already-classified words; `c` is the first confused word.
    pub fn from_words(words: Vec<WordRecord>, mode: EnglishMode) -> Self {
        let confusion_point = words.iter().position(|w| w.class == WordClass::Confused);
        ConfusionReport {
            words,
            confusion_point,
            mode,
            unicode_version: UNICODE_VERSION.into(),
        }
    }

    pub fn count(&self, class: WordClass) -> usize {
        self.words.iter().filter(|w| w.class == class).count()
    }

    pub fn is_confused(&self) -> bool {
        self.confusion_point.is_some()
    }

    /// Words that enter the totals (everything but excluded).
    pub fn counted_words(&self) -> usize {
        self.words.len() - self.count(WordClass::Excluded)
    }
}

/// Rules plus English mode: everything needed to judge a response.
#[derive(Clone, Debug)]
pub struct Detector {
    pub rules: ScriptRules,
    pub mode: EnglishMode,
}

impl Detector {
    pub fn new(rules: ScriptRules, mode: EnglishMode) -> Self {
        Detector { rules, mode }
    }

    pub fn with_mode(&self, mode: EnglishMode) -> Self {
        Detector {
            rules: self.rules.clone(),
            mode,
        }
    }

    pub fn classify(&self, word: &str) -> WordClass {
        classify_word(word, &self.rules, self.mode)
    }

    pub fn report_text(&self, text: &str) -> ConfusionReport {
        let words = segment(text)
            .into_iter()
            .map(|w| WordRecord {
                surface: w.to_owned(),
                class: self.classify(w),
            })
            .collect();
        ConfusionReport::from_words(words, self.mode)
    }

    /// Decodes `tokens`, classifies the words and locates the confusion
    /// point as a token index.
    pub fn report(&self, tokens: &[TokenId], vocab: &Vocab) -> ConfusionReport {
        let (text, token_spans) = vocab.decode_with_spans(tokens);
        let mut confusion_point = None;
        let mut words = Vec::new();
        for span in segment_spans(&text) {
            let surface = &text[span.clone()];
            let class = self.classify(surface);
            if class == WordClass::Confused && confusion_point.is_none() {
                confusion_point = first_overlapping(&token_spans, &span);
            }
            words.push(WordRecord {
                surface: surface.to_owned(),
                class,
            });
        }
        ConfusionReport {
            words,
            confusion_point,
            mode: self.mode,
            unicode_version: UNICODE_VERSION.into(),
        }
    }

    pub fn detect_confusion_point(&self, tokens: &[TokenId], vocab: &Vocab) -> Option<usize> {
        self.report(tokens, vocab).confusion_point
    }

    /// Whether the decoded fragment contains a confused word.
    pub fn fragment_confused(&self, tokens: &[TokenId], vocab: &Vocab) -> bool {
        let text = vocab.decode(tokens);
        segment(&text)
            .into_iter()
            .any(|w| self.classify(w) == WordClass::Confused)
    }

    /// Per token: does its surface alone decode to a confused word?
    pub fn confusing_tokens(&self, vocab: &Vocab) -> Vec<bool> {
        (0..vocab.len() as TokenId)
            .map(|t| Some(t) != vocab.eos() && self.fragment_confused(&[t], vocab))
            .collect()
    }
}

fn first_overlapping(token_spans: &[Range<usize>], word: &Range<usize>) -> Option<usize> {
    token_spans
        .iter()
        .position(|s| s.start < s.end && s.start < word.end && word.start < s.end)
}

/// On-disk detector configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesConfig {
    pub target: TargetLanguage,
    #[serde(default)]
    pub mode: EnglishMode,
    #[serde(default)]
    pub extra_exclusions: Vec<String>,
}

impl RulesConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn detector(&self) -> Result<Detector> {
        Ok(Detector::new(
            ScriptRules::new(self.target).with_extra_exclusions(&self.extra_exclusions)?,
            self.mode,
        ))
    }
}
