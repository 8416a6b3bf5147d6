//! Character classification by code point range.
//!
//! Tables are pinned to [`UNICODE_VERSION`] and cover the scripts the detector
//! distinguishes. Letters from any script not listed map to [`Script::Other`],
//! which no target language allows, so an unlisted script can only ever be
//! reported as confusion, never silently passed.

use serde::{Deserialize, Serialize};

pub const UNICODE_VERSION: &str = "15.1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Latin,
    Greek,
    Cyrillic,
    Armenian,
    Hebrew,
    Arabic,
    Devanagari,
    Thai,
    Hangul,
    Han,
    Hiragana,
    Katakana,
    Bopomofo,
    /// Digits, punctuation, whitespace and other shared characters.
    Common,
    /// Combining marks that take the script of their base.
    Inherited,
    Other,
}

type Ranges = &'static [(u32, u32)];

const LATIN: Ranges = &[
    (0x0041, 0x005A),
    (0x0061, 0x007A),
    (0x00AA, 0x00AA),
    (0x00BA, 0x00BA),
    (0x00C0, 0x00D6),
    (0x00D8, 0x00F6),
    (0x00F8, 0x024F),
    (0x1E00, 0x1EFF),
    (0x2C60, 0x2C7F),
    (0xA720, 0xA7FF),
    (0xAB30, 0xAB6F),
    (0xFB00, 0xFB06),
    (0xFF21, 0xFF3A),
    (0xFF41, 0xFF5A),
];
const GREEK: Ranges = &[(0x0370, 0x03FF), (0x1F00, 0x1FFF)];
const CYRILLIC: Ranges = &[
    (0x0400, 0x052F),
    (0x1C80, 0x1C8F),
    (0x2DE0, 0x2DFF),
    (0xA640, 0xA69F),
];
const ARMENIAN: Ranges = &[(0x0530, 0x058F)];
const HEBREW: Ranges = &[(0x0590, 0x05FF), (0xFB1D, 0xFB4F)];
const ARABIC: Ranges = &[
    (0x0600, 0x06FF),
    (0x0750, 0x077F),
    (0x0870, 0x08FF),
    (0xFB50, 0xFDFF),
    (0xFE70, 0xFEFF),
];
const DEVANAGARI: Ranges = &[(0x0900, 0x097F), (0xA8E0, 0xA8FF)];
const THAI: Ranges = &[(0x0E00, 0x0E7F)];
const HANGUL: Ranges = &[
    (0x1100, 0x11FF),
    (0x3131, 0x318E),
    (0xA960, 0xA97F),
    (0xAC00, 0xD7A3),
    (0xD7B0, 0xD7FF),
    (0xFFA0, 0xFFDC),
];
const HAN: Ranges = &[
    (0x2E80, 0x2FDF),
    (0x3005, 0x3005),
    (0x3007, 0x3007),
    (0x3021, 0x3029),
    (0x3038, 0x303B),
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0x20000, 0x2FA1F),
    (0x30000, 0x323AF),
];
const HIRAGANA: Ranges = &[(0x3041, 0x309F), (0x1B001, 0x1B11F)];
// U+30FC (prolonged sound mark) is shared by kana in the standard; kept with
// Katakana here, which every Japanese rule set allows.
const KATAKANA: Ranges = &[
    (0x30A0, 0x30FF),
    (0x31F0, 0x31FF),
    (0x32D0, 0x32FE),
    (0xFF66, 0xFF9F),
];
const BOPOMOFO: Ranges = &[(0x3100, 0x312F), (0x31A0, 0x31BF)];
const INHERITED: Ranges = &[
    (0x0300, 0x036F),
    (0x1AB0, 0x1AFF),
    (0x1DC0, 0x1DFF),
    (0x200C, 0x200D),
    (0x20D0, 0x20FF),
    (0xFE00, 0xFE0F),
    (0xFE20, 0xFE2F),
];

fn in_ranges(c: char, ranges: Ranges) -> bool {
    let c = c as u32;
    ranges.iter().any(|&(lo, hi)| lo <= c && c <= hi)
}

pub fn script_of(c: char) -> Script {
    const TABLE: &[(Script, Ranges)] = &[
        (Script::Latin, LATIN),
        (Script::Hangul, HANGUL),
        (Script::Han, HAN),
        (Script::Hiragana, HIRAGANA),
        (Script::Katakana, KATAKANA),
        (Script::Cyrillic, CYRILLIC),
        (Script::Arabic, ARABIC),
        (Script::Greek, GREEK),
        (Script::Hebrew, HEBREW),
        (Script::Armenian, ARMENIAN),
        (Script::Devanagari, DEVANAGARI),
        (Script::Thai, THAI),
        (Script::Bopomofo, BOPOMOFO),
        (Script::Inherited, INHERITED),
    ];
    for (script, ranges) in TABLE {
        if in_ranges(c, ranges) {
            return *script;
        }
    }
    if c.is_alphabetic() {
        Script::Other
    } else {
        Script::Common
    }
}

/// Scripts written without spaces between words.
pub fn is_scriptio_continua(s: Script) -> bool {
    matches!(
        s,
        Script::Han | Script::Hiragana | Script::Katakana | Script::Thai | Script::Bopomofo
    )
}

pub fn is_basic_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
}

/// Symbol classes stripped character by character before the script check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolClass {
    Math,
    Currency,
    Arrow,
    Emoji,
}

const MATH: Ranges = &[
    (0x002B, 0x002B),
    (0x003C, 0x003E),
    (0x005E, 0x005E),
    (0x007C, 0x007C),
    (0x007E, 0x007E),
    (0x00AC, 0x00AC),
    (0x00B1, 0x00B1),
    (0x00B2, 0x00B3),
    (0x00B9, 0x00B9),
    (0x00BC, 0x00BE),
    (0x00D7, 0x00D7),
    (0x00F7, 0x00F7),
    (0x2030, 0x2031),
    (0x2070, 0x209F),
    (0x2100, 0x214F),
    (0x2150, 0x218F),
    (0x2200, 0x22FF),
    (0x2308, 0x230B),
    (0x27C0, 0x27EF),
    (0x2980, 0x29FF),
    (0x2A00, 0x2AFF),
    (0x1D400, 0x1D7FF),
];
const CURRENCY: Ranges = &[
    (0x0024, 0x0024),
    (0x00A2, 0x00A5),
    (0x058F, 0x058F),
    (0x060B, 0x060B),
    (0x20A0, 0x20CF),
    (0xFDFC, 0xFDFC),
    (0xFE69, 0xFE69),
    (0xFF04, 0xFF04),
    (0xFFE0, 0xFFE1),
    (0xFFE5, 0xFFE6),
];
const ARROWS: Ranges = &[
    (0x2190, 0x21FF),
    (0x27F0, 0x27FF),
    (0x2900, 0x297F),
    (0x2B00, 0x2BFF),
    (0xFFE9, 0xFFEC),
];
const EMOJI: Ranges = &[
    (0x00A9, 0x00A9),
    (0x00AE, 0x00AE),
    (0x203C, 0x203C),
    (0x2049, 0x2049),
    (0x2122, 0x2122),
    (0x2139, 0x2139),
    (0x231A, 0x231B),
    (0x2328, 0x2328),
    (0x23CF, 0x23FF),
    (0x24C2, 0x24C2),
    (0x25A0, 0x25FF),
    (0x2600, 0x27BF),
    (0x2934, 0x2935),
    (0x3030, 0x3030),
    (0x303D, 0x303D),
    (0x3297, 0x3297),
    (0x3299, 0x3299),
    (0xFE0E, 0xFE0F),
    (0x200D, 0x200D),
    (0x20E3, 0x20E3),
    (0x1F000, 0x1FAFF),
    (0xE0020, 0xE007F),
];

/// Symbol class of `c`, if any. Emoji wins over the other classes so that
/// pictographs inside the arrow or letterlike blocks count as emoji.
pub fn symbol_class(c: char) -> Option<SymbolClass> {
    if in_ranges(c, EMOJI) {
        Some(SymbolClass::Emoji)
    } else if in_ranges(c, CURRENCY) {
        Some(SymbolClass::Currency)
    } else if in_ranges(c, ARROWS) {
        Some(SymbolClass::Arrow)
    } else if in_ranges(c, MATH) {
        Some(SymbolClass::Math)
    } else {
        None
    }
}

/// Pinyin tone-marked vowels, combining tone marks and bopomofo tone letters.
pub fn is_tone_mark(c: char) -> bool {
    const TONED: &str = "āáǎàēéěèīíǐìōóǒòūúǔùǖǘǚǜĀÁǍÀĒÉĚÈĪÍǏÌŌÓǑÒŪÚǓÙǕǗǙǛńňǹḿ";
    TONED.contains(c)
        || matches!(
            c as u32,
            0x0300 | 0x0301 | 0x0304 | 0x030C | 0x02C7 | 0x02C9 | 0x02CA | 0x02CB | 0x02D9
        )
}

/// IPA and phonetic-extension letters, plus stress and length marks.
pub fn is_phonetic(c: char) -> bool {
    let u = c as u32;
    (0x0250..=0x02AF).contains(&u)
        || (0x1D00..=0x1DBF).contains(&u)
        || matches!(u, 0x02C8 | 0x02CC | 0x02D0 | 0x02D1)
}
