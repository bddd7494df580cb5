use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMAGE: &str = "<image>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

pub const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

/// Every color word, palette colors first.
pub const COLOR_WORDS: [&str; 13] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white", "purple", "brown",
    "pink", "gray", "black",
];

pub const SHAPE_WORDS: [&str; 4] = ["square", "circle", "triangle", "digit"];

const WORDS: &[&str] = &[
    "yes",
    "no",
    "?",
    ".",
    ",",
    "how",
    "many",
    "objects",
    "are",
    "in",
    "image",
    "there",
    "is",
    "a",
    "what",
    "color",
    "shape",
    "row",
    "column",
    "left",
    "of",
    "number",
    "comes",
    "after",
    "does",
    "have",
    "sides",
    "do",
    "and",
    "make",
    "largest",
    "describe",
    "at",
    "it",
    "might",
    "be",
    "or",
    "i",
    "am",
    "not",
    "sure",
    "let",
    "me",
    "look",
    "each",
    "cell",
    "check",
    "grid",
    "carefully",
    "first",
    "then",
    "compare",
    "with",
    "question",
    "answer",
    "so",
    "see",
    "object",
    "every",
    "its",
    "count",
    "the",
    "empty",
];

/// The closed word-level vocabulary shared by every template.
#[derive(Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Vocab {
    fn build() -> Self {
        let words: Vec<&'static str> = [PAD, BOS, EOS, IMAGE, THINK_OPEN, THINK_CLOSE]
            .into_iter()
            .chain(DIGITS)
            .chain(COLOR_WORDS)
            .chain(SHAPE_WORDS)
            .chain(WORDS.iter().copied())
            .collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, &w)| (w, i))
            .collect::<HashMap<_, _>>();
        assert_eq!(index.len(), words.len(), "duplicate vocabulary word");
        Self { words, index }
    }

    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&'static str> {
        self.words.get(id).copied().ok_or(Error::TokenOutOfRange {
            id,
            vocab: self.words.len(),
        })
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }
}

/// Splits on single spaces; every piece must be a vocabulary word.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let vocab = Vocab::standard();
    text.split(' ').map(|w| vocab.id(w)).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let vocab = Vocab::standard();
    let words = ids
        .iter()
        .map(|&i| vocab.word(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

pub fn token(word: &str) -> usize {
    Vocab::standard()
        .id(word)
        .expect("reserved word is in the vocabulary")
}

/// Removes `<think> … </think>` spans. An unclosed span runs to the end.
pub fn strip_think(words: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    for &w in words {
        match w {
            THINK_OPEN => depth += 1,
            THINK_CLOSE if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(w.to_string()),
            _ => {}
        }
    }
    out
}
