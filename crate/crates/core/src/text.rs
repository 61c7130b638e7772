//! Word-level narrative matching shared by the rule backend and the codebook.
//!
//! Keywords are matched as whole-word sequences, never raw substrings, so
//! "stem" does not fire inside "system".

/// Lowercased alphanumeric word tokens in narrative order.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Sentences split on terminal punctuation; used for co-occurrence scopes.
pub fn split_sentences(text: &str) -> Vec<&str> {
    text.split(['.', '!', '?', ';'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// A keyword phrase compiled to its token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    pub text: String,
    tokens: Vec<String>,
}

impl Phrase {
    pub fn new(text: &str) -> Self {
        Self {
            text: text.to_string(),
            tokens: tokenize(text),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whether the phrase starts exactly at `pos`.
    pub fn matches_at(&self, tokens: &[String], pos: usize) -> bool {
        !self.tokens.is_empty()
            && pos + self.tokens.len() <= tokens.len()
            && tokens[pos..pos + self.tokens.len()]
                .iter()
                .zip(&self.tokens)
                .all(|(a, b)| a == b)
    }

    /// Token index of the first occurrence in `tokens`.
    pub fn find(&self, tokens: &[String]) -> Option<usize> {
        if self.tokens.is_empty() || self.tokens.len() > tokens.len() {
            return None;
        }
        tokens
            .windows(self.tokens.len())
            .position(|w| w.iter().zip(&self.tokens).all(|(a, b)| a == b))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

/// A match of one phrase from a phrase list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhraseHit {
    /// Token position of the match in the narrative.
    pub pos: usize,
    /// Index of the phrase within the list.
    pub phrase: usize,
    /// Token length of the matched phrase.
    pub len: usize,
}

/// Earliest match of any phrase; ties prefer the longest phrase, then list
/// order.
pub fn find_first(phrases: &[Phrase], tokens: &[String]) -> Option<PhraseHit> {
    let mut best: Option<PhraseHit> = None;
    for (i, phrase) in phrases.iter().enumerate() {
        if let Some(pos) = phrase.find(tokens) {
            let hit = PhraseHit {
                pos,
                phrase: i,
                len: phrase.len(),
            };
            best = Some(match best {
                None => hit,
                Some(b) => {
                    if hit.pos < b.pos || (hit.pos == b.pos && hit.len > b.len) {
                        hit
                    } else {
                        b
                    }
                }
            });
        }
    }
    best
}

pub fn any_match(phrases: &[Phrase], tokens: &[String]) -> bool {
    phrases.iter().any(|p| p.find(tokens).is_some())
}
