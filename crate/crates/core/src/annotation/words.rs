use std::collections::{HashMap, HashSet};

use super::ClipRecord;

/// Words removed on top of the English stop list when analysing descriptions.
pub const EXTRA_STOP_WORDS: &[&str] = &["person", "man", "woman", "boy", "girl", "moving"];

const ENGLISH_STOP_WORDS: &[&str] = &[
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "your", "yours",
    "yourself", "yourselves", "he", "him", "his", "himself", "she", "her", "hers", "herself",
    "it", "its", "itself", "they", "them", "their", "theirs", "themselves", "what", "which",
    "who", "whom", "this", "that", "these", "those", "am", "is", "are", "was", "were", "be",
    "been", "being", "have", "has", "had", "having", "do", "does", "did", "doing", "a", "an",
    "the", "and", "but", "if", "or", "because", "as", "until", "while", "of", "at", "by",
    "for", "with", "about", "against", "between", "into", "through", "during", "before",
    "after", "above", "below", "to", "from", "up", "down", "in", "out", "on", "off", "over",
    "under", "again", "further", "then", "once", "here", "there", "when", "where", "why",
    "how", "all", "any", "both", "each", "few", "more", "most", "other", "some", "such", "no",
    "nor", "not", "only", "own", "same", "so", "than", "too", "very", "s", "t", "can", "will",
    "just", "don", "should", "now",
];

/// English stop words plus [`EXTRA_STOP_WORDS`].
pub fn default_stop_words() -> HashSet<String> {
    ENGLISH_STOP_WORDS
        .iter()
        .chain(EXTRA_STOP_WORDS)
        .map(|w| w.to_string())
        .collect()
}

/// Case-folds and splits on any run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Ranked `(word, occurrences)` over the descriptions of every annotation in
/// `records`. Ties are broken alphabetically.
pub fn word_frequencies(records: &[ClipRecord], stop_words: &HashSet<String>) -> Vec<(String, usize)> {
    let texts = records
        .iter()
        .flat_map(|r| r.annotations.iter().map(|a| a.description.as_str()));
    rank_words(texts, stop_words)
}

pub(crate) fn rank_words<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    stop_words: &HashSet<String>,
) -> Vec<(String, usize)> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in tokenize(text) {
            if !stop_words.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}
