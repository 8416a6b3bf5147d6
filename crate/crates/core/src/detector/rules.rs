//! Word-level exclusion rules.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::script::{self, Script};
use super::ScriptRules;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionRule {
    Url,
    Email,
    Extra,
    CodeIdentifier,
    Unit,
    LeadingCapital,
    ToneMark,
    Phonetic,
    /// Nothing script-bearing left after symbol stripping.
    NoLetters,
}

static URL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)(?:^|[^a-z0-9])(?:[a-z][a-z0-9+.\-]*://\S+|www\.[a-z0-9\-]+\.\S+)|^[a-z0-9\-]+(?:\.[a-z0-9\-]+)*\.(?:com|org|net|edu|gov|io|ai|dev|co|kr|cn|jp|ru|uk|de|fr)(?:/\S*)?$",
    )
    .unwrap()
});

static EMAIL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)+").unwrap()
});

static CODE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?x)
        [A-Za-z_][A-Za-z0-9_]*\(                          # call: name(
        | ^_*[A-Za-z][A-Za-z0-9]*(?:_[A-Za-z0-9]+)+_*$    # snake_case
        | ^__[A-Za-z0-9]+__$                              # dunder
        | ^[a-z]+[0-9]*(?:[A-Z][a-z0-9]*)+$               # camelCase
        | ^[A-Za-z_][A-Za-z0-9_]*(?:(?:::|->)[A-Za-z_][A-Za-z0-9_]*)+$  # paths
        | ^[a-z_][a-z0-9_]*(?:\.[a-z_][a-z0-9_]*)+\(?\)?$  # member access
        ",
    )
    .unwrap()
});

// Letter-written units. Single-letter units only count after a number.
const UNITS: &str = "mm|cm|km|m|mg|kg|g|ml|mL|l|L|kb|KB|kB|mb|MB|gb|GB|tb|TB|Hz|kHz|MHz|GHz|kW|kWh|W|mA|A|V|ms|s|min|h|hr|hrs|km/h|m/s|mph|ft|in|lb|lbs|oz|mi|yd|px|pt|dpi|fps|bps|Mbps|Gbps|mol|cal|kcal|Pa|kPa|rpm|°C|°F|°";
const BARE_UNITS: &str = "mm|cm|km|mg|kg|ml|mL|kb|KB|kB|MB|GB|TB|Hz|kHz|MHz|GHz|kW|kWh|mA|ms|min|hr|hrs|km/h|m/s|mph|ft|lbs|oz|px|dpi|fps|bps|Mbps|Gbps|kcal|kPa|rpm";

static UNIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"^(?:[+\-]?[0-9]+(?:[.,][0-9]+)*(?:{UNITS})|(?:{BARE_UNITS}))$"
    ))
    .unwrap()
});

fn is_edge_punct(c: char) -> bool {
    !c.is_alphanumeric() && script::symbol_class(c).is_none() && c != '_'
}

fn trim_punct(word: &str) -> &str {
    word.trim_matches(is_edge_punct)
}

/// First word-level rule that fires, if any.
pub(super) fn word_exclusion(word: &str, rules: &ScriptRules) -> Option<ExclusionRule> {
    if EMAIL.is_match(word) {
        return Some(ExclusionRule::Email);
    }
    if URL.is_match(word) {
        return Some(ExclusionRule::Url);
    }
    if rules.extra.iter().any(|re| re.is_match(word)) {
        return Some(ExclusionRule::Extra);
    }
    let core = trim_punct(word);
    // keeps call parentheses, unlike `core`
    let light =
        word.trim_matches(|c| matches!(c, ',' | '.' | ';' | ':' | '!' | '?' | '"' | '\'' | '`'));
    if (core.is_ascii() && CODE.is_match(core)) || (light.is_ascii() && CODE.is_match(light)) {
        return Some(ExclusionRule::CodeIdentifier);
    }
    // allow a trailing degree sign to survive the punctuation trim
    let unit_core = word.trim_matches(|c: char| is_edge_punct(c) && c != '°' && c != '/');
    if UNIT.is_match(unit_core) || UNIT.is_match(core) {
        return Some(ExclusionRule::Unit);
    }
    if let Some(first) = core.chars().find(|c| c.is_alphabetic()) {
        if first.is_uppercase() && script::script_of(first) == Script::Latin {
            return Some(ExclusionRule::LeadingCapital);
        }
    }
    if word.chars().any(script::is_tone_mark) {
        return Some(ExclusionRule::ToneMark);
    }
    if word.chars().any(script::is_phonetic) {
        return Some(ExclusionRule::Phonetic);
    }
    None
}

/// URL and email chunks are never split into script runs.
pub(super) fn is_atomic(chunk: &str) -> bool {
    EMAIL.is_match(chunk) || URL.is_match(chunk)
}
