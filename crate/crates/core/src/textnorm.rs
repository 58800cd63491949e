//! Text primitives shared by every filter and metric: answer normalization,
//! exact match, token-boundary containment, word counting and a rule-based
//! sentence splitter.
//!
//! Normalization follows the usual open-domain QA convention:
//! lowercase, strip punctuation (Unicode `P*` categories), drop the articles
//! `a`/`an`/`the`, collapse whitespace.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static PUNCTUATION: Lazy<Regex> = Lazy::new(|| Regex::new(r"\p{P}").expect("valid regex"));
static PUNCTUATION_ONLY: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\p{P}*$").expect("valid regex"));

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Abbreviations whose trailing period never ends a sentence. Compared
/// case-insensitively against the word immediately before the period.
pub const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "vs", "etc", "inc", "ltd",
    "co", "corp", "no", "gen", "col", "lt", "sgt", "capt", "gov", "sen", "rep", "rev", "fig",
    "approx", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov",
    "dec", "e.g", "i.e", "u.s", "u.k", "u.n", "a.m", "p.m",
];

/// A string together with its normalized form and normalized tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedText {
    pub raw: String,
    pub normalized: String,
    pub tokens: Vec<String>,
}

impl NormalizedText {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let tokens = normalized_tokens(&raw);
        let normalized = tokens.join(" ");
        Self {
            raw,
            normalized,
            tokens,
        }
    }
}

/// A sentence located in a source string. `start` and `end` are byte offsets
/// on `char` boundaries, so `&source[start..end] == text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

pub fn strip_punctuation(text: &str) -> std::borrow::Cow<'_, str> {
    PUNCTUATION.replace_all(text, "")
}

/// True when the token has no character outside the Unicode punctuation
/// categories (the empty string included).
pub fn is_punctuation_only(token: &str) -> bool {
    PUNCTUATION_ONLY.is_match(token)
}

fn normalized_tokens(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    strip_punctuation(&lowered)
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_owned)
        .collect()
}

/// Lowercase, strip punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(raw: &str) -> String {
    normalized_tokens(raw).join(" ")
}

/// Token sequence of [`normalize_answer`]; also the indexing tokenizer for BM25.
pub fn tokens(raw: &str) -> Vec<String> {
    normalized_tokens(raw)
}

pub fn exact_match(a: &str, b: &str) -> bool {
    normalize_answer(a) == normalize_answer(b)
}

pub fn matches_any<S: AsRef<str>>(candidate: &str, golds: &[S]) -> bool {
    if golds.is_empty() {
        return false;
    }
    let candidate = normalize_answer(candidate);
    golds
        .iter()
        .any(|g| normalize_answer(g.as_ref()) == candidate)
}

/// Token-boundary containment of the normalized answer inside the normalized
/// context. An answer that normalizes to nothing is rejected.
pub fn contains_answer(context_text: &str, answer: &str) -> Result<bool> {
    let needle = normalized_tokens(answer);
    if needle.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    let haystack = normalized_tokens(context_text);
    Ok(contains_tokens(&haystack, &needle))
}

pub(crate) fn contains_tokens(haystack: &[String], needle: &[String]) -> bool {
    if needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Number of whitespace-separated words after punctuation removal.
pub fn word_count(text: &str) -> usize {
    strip_punctuation(text).split_whitespace().count()
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '”' | '’' | '»')
}

fn is_abbreviation(word: &str) -> bool {
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    let mut chars = word.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        // Single-letter initials: "J. R. R. Tolkien".
        if c.is_uppercase() {
            return true;
        }
    }
    let lowered = word.to_lowercase();
    ABBREVIATIONS.contains(&lowered.as_str())
}

/// Rule-based sentence splitting.
///
/// A sentence ends at a run of `.`, `!` or `?` (plus any closing quotes or
/// brackets) that is followed by whitespace and an uppercase letter, or by
/// end of input. A lone `.` after a word in [`ABBREVIATIONS`] or after a
/// single capital letter is not a boundary.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;

    while i < n {
        let (byte, c) = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(byte);
        }
        if !is_terminator(c) {
            i += 1;
            continue;
        }

        let mut j = i + 1;
        while j < n && (is_terminator(chars[j].1) || is_closer(chars[j].1)) {
            j += 1;
        }
        let end_byte = chars.get(j).map_or(text.len(), |&(b, _)| b);
        let mut k = j;
        while k < n && chars[k].1.is_whitespace() {
            k += 1;
        }

        let boundary = if k == n {
            true
        } else if k > j && chars[k].1.is_uppercase() {
            let lone_period = c == '.' && !chars[i + 1..j].iter().any(|&(_, t)| is_terminator(t));
            let word_start = text[..byte]
                .rfind(char::is_whitespace)
                .map_or(0, |p| p + text[p..].chars().next().map_or(1, char::len_utf8));
            !(lone_period && is_abbreviation(&text[word_start..byte]))
        } else {
            false
        };

        if boundary {
            let s = start.take().expect("span start set");
            spans.push(SentenceSpan {
                start: s,
                end: end_byte,
                text: text[s..end_byte].to_owned(),
            });
            i = j;
        } else {
            i += 1;
        }
    }

    if let Some(s) = start {
        let end = text.trim_end().len();
        spans.push(SentenceSpan {
            start: s,
            end,
            text: text[s..end].to_owned(),
        });
    }
    spans
}
