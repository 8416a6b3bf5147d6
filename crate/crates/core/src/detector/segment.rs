//! Word segmentation.
//!
//! Whitespace first. Inside a whitespace chunk, text is further cut wherever
//! the script changes into or out of a script written without spaces (Han,
//! kana, Thai, Bopomofo), so each maximal run of such a script is a word.
//! Shared characters (digits, punctuation, combining marks) stay with the run
//! they appear in. URL and email chunks are kept whole.

use std::ops::Range;

use super::rules;
use super::script::{is_scriptio_continua, script_of, Script};

/// Byte ranges of the words of `text`.
pub fn segment_spans(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut chunk_start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), chunk_start) {
            (true, Some(s)) => {
                split_chunk(text, s..i, &mut out);
                chunk_start = None;
            }
            (false, None) => chunk_start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = chunk_start {
        split_chunk(text, s..text.len(), &mut out);
    }
    out
}

fn split_chunk(text: &str, chunk: Range<usize>, out: &mut Vec<Range<usize>>) {
    let s = &text[chunk.clone()];
    if rules::is_atomic(s) {
        out.push(chunk);
        return;
    }
    let mut run_start = chunk.start;
    let mut run_script: Option<Script> = None;
    for (off, c) in s.char_indices() {
        let sc = script_of(c);
        if matches!(sc, Script::Common | Script::Inherited) {
            continue;
        }
        match run_script {
            None => run_script = Some(sc),
            Some(cur) if cur != sc && (is_scriptio_continua(cur) || is_scriptio_continua(sc)) => {
                let at = chunk.start + off;
                out.push(run_start..at);
                run_start = at;
                run_script = Some(sc);
            }
            _ => {}
        }
    }
    out.push(run_start..chunk.end);
}

pub fn segment(text: &str) -> Vec<&str> {
    segment_spans(text).into_iter().map(|r| &text[r]).collect()
}
