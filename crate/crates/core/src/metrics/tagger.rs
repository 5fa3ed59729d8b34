use std::collections::HashSet;

use serde::{Deserialize, Serialize};

const NOUN_LEXICON: &str = include_str!("../../assets/lexicon/nouns.txt");
const FUNCTION_WORDS: &str = include_str!("../../assets/lexicon/function_words.txt");

/// Suffixes that mark out-of-lexicon words as nouns. Only applied to
/// normalized forms of at least six characters.
const NOUN_SUFFIXES: &[&str] = &[
    "tion", "sion", "ment", "ness", "ity", "ance", "ence", "ship", "hood", "ery", "ism",
];

/// Plural forms the suffix rules get wrong, mapped to their singular.
const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("buses", "bus"),
    ("children", "child"),
    ("feet", "foot"),
    ("geese", "goose"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("lives", "life"),
    ("men", "man"),
    ("mice", "mouse"),
    ("series", "series"),
    ("shelves", "shelf"),
    ("species", "species"),
    ("teeth", "tooth"),
    ("wolves", "wolf"),
    ("women", "woman"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartOfSpeech {
    Noun,
    Numeral,
    Function,
    Other,
}

/// Part-of-speech tagging plugin. Implementations must be deterministic.
pub trait Tagger: Send + Sync {
    fn name(&self) -> &str;
    fn tag(&self, text: &str) -> Vec<(String, PartOfSpeech)>;
}

/// Maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
}

fn irregular(word: &str) -> Option<&'static str> {
    IRREGULAR_PLURALS
        .iter()
        .find(|(plural, _)| *plural == word)
        .map(|(_, singular)| *singular)
}

fn strip_plural(w: &str) -> &str {
    if let Some(stem) = w.strip_suffix("es") {
        if ["ch", "sh", "ss", "x", "z"].iter().any(|s| stem.ends_with(s)) {
            return stem;
        }
    }
    if w.len() > 3 && w.ends_with('s') && !["ss", "us", "is"].iter().any(|s| w.ends_with(s)) {
        return &w[..w.len() - 1];
    }
    w
}

/// Reduces a lowercase word to its singular form:
///
/// 1. irregular plurals come from a fixed table;
/// 2. `-ies` becomes `-y` for words longer than four letters;
/// 3. `-es` is dropped when the stem ends in `ch`, `sh`, `ss`, `x` or `z`;
/// 4. a final `-s` is dropped from words longer than three letters unless
///    the word ends in `ss`, `us` or `is`.
///
/// The result is a fixed point: `singularize(singularize(w)) == singularize(w)`.
pub fn singularize(word: &str) -> String {
    if let Some(s) = irregular(word) {
        return s.to_owned();
    }
    let out = if word.len() > 4 && word.ends_with("ies") {
        format!("{}y", &word[..word.len() - 3])
    } else {
        strip_plural(word).to_owned()
    };
    irregular(&out).map_or(out, str::to_owned)
}

/// Lowercase then singularize.
pub fn normalize_word(token: &str) -> String {
    singularize(&token.to_lowercase())
}

fn word_list(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Deterministic dictionary tagger: a domain noun lexicon, a closed-class
/// word list and suffix heuristics for words in neither list. Each token is
/// tagged from its own form only, without context.
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    nouns: HashSet<String>,
    function_words: HashSet<String>,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        Self {
            nouns: word_list(NOUN_LEXICON).map(normalize_word).collect(),
            function_words: word_list(FUNCTION_WORDS).map(str::to_lowercase).collect(),
        }
    }
}

impl LexiconTagger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds nouns from a one-word-per-line list (`#` comments allowed).
    pub fn with_extra_nouns(mut self, list: &str) -> Self {
        self.nouns.extend(word_list(list).map(normalize_word));
        self
    }

    pub fn classify(&self, token: &str) -> PartOfSpeech {
        let lower = token.to_lowercase();
        let norm = singularize(&lower);
        if lower.chars().any(|c| c.is_numeric()) {
            PartOfSpeech::Numeral
        } else if self.function_words.contains(&lower) || self.function_words.contains(&norm) {
            PartOfSpeech::Function
        } else if self.nouns.contains(&norm)
            || (norm.len() >= 6 && NOUN_SUFFIXES.iter().any(|s| norm.ends_with(s)))
        {
            PartOfSpeech::Noun
        } else {
            PartOfSpeech::Other
        }
    }
}

impl Tagger for LexiconTagger {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn tag(&self, text: &str) -> Vec<(String, PartOfSpeech)> {
        tokenize(text)
            .map(|t| (t.to_owned(), self.classify(t)))
            .collect()
    }
}
