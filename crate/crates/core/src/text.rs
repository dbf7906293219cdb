//! Tokenization, vocabulary and BIO tagging.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("sentence has {len} tokens, maximum is {max}")]
    TooLong { len: usize, max: usize },
    #[error("overlapping entity spans {0} and {1}")]
    Overlap(EntitySpan, EntitySpan),
    #[error("entity span {span} out of bounds for sentence of {len} tokens")]
    OutOfBounds { span: EntitySpan, len: usize },
    #[error("vocabulary file: {0}")]
    Vocab(String),
}

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Byte offsets into the source string, half-open.
    pub start: usize,
    pub end: usize,
}

/// Splits `text` into maximal alphanumeric runs and single punctuation
/// characters. Whitespace only separates.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            run.get_or_insert(i);
            continue;
        }
        if let Some(s) = run.take() {
            tokens.push(Token {
                text: text[s..i].to_string(),
                start: s,
                end: i,
            });
        }
        if !ch.is_whitespace() {
            let e = i + ch.len_utf8();
            tokens.push(Token {
                text: text[i..e].to_string(),
                start: i,
                end: e,
            });
        }
    }
    if let Some(s) = run {
        tokens.push(Token {
            text: text[s..].to_string(),
            start: s,
            end: text.len(),
        });
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Problem,
    Test,
    Treatment,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::Problem, EntityType::Test, EntityType::Treatment];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Problem => "problem",
            EntityType::Test => "test",
            EntityType::Treatment => "treatment",
        }
    }

    pub fn parse(s: &str) -> Option<EntityType> {
        match s {
            "problem" => Some(EntityType::Problem),
            "test" => Some(EntityType::Test),
            "treatment" => Some(EntityType::Treatment),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            EntityType::Problem => 0,
            EntityType::Test => 1,
            EntityType::Treatment => 2,
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive token range with a type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity_type: EntityType,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity_type: EntityType) -> Self {
        EntitySpan {
            start,
            end,
            entity_type,
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Half-open token range.
    pub fn range(&self) -> Range<usize> {
        self.start..self.end + 1
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.start, self.end, self.entity_type)
    }
}

/// Checks bounds and pairwise disjointness; returns the spans sorted.
pub fn validate_spans(spans: &[EntitySpan], len: usize) -> Result<Vec<EntitySpan>, TextError> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    for s in &sorted {
        if s.start > s.end || s.end >= len {
            return Err(TextError::OutOfBounds { span: *s, len });
        }
    }
    for w in sorted.windows(2) {
        if w[0].overlaps(&w[1]) {
            return Err(TextError::Overlap(w[0], w[1]));
        }
    }
    Ok(sorted)
}

/// BIO tag. Index layout: `O = 0`, then `B-t`, `I-t` per entity type in
/// [`EntityType::ALL`] order, seven tags in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(EntityType),
    I(EntityType),
}

pub const NUM_TAGS: usize = 1 + 2 * EntityType::ALL.len();

impl Tag {
    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(t) => 1 + 2 * t.index(),
            Tag::I(t) => 2 + 2 * t.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        match i {
            0 => Some(Tag::O),
            i if i < NUM_TAGS => {
                let t = EntityType::ALL[(i - 1) / 2];
                Some(if i % 2 == 1 { Tag::B(t) } else { Tag::I(t) })
            }
            _ => None,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(t) => write!(f, "B-{t}"),
            Tag::I(t) => write!(f, "I-{t}"),
        }
    }
}

pub fn encode_bio(len: usize, spans: &[EntitySpan]) -> Result<Vec<Tag>, TextError> {
    let spans = validate_spans(spans, len)?;
    let mut tags = vec![Tag::O; len];
    for s in spans {
        tags[s.start] = Tag::B(s.entity_type);
        for t in &mut tags[s.start + 1..=s.end] {
            *t = Tag::I(s.entity_type);
        }
    }
    Ok(tags)
}

/// Turns a tag sequence into spans. Never fails: an `I-t` with no open span
/// of type `t` starts a new span.
pub fn decode_spans(tags: &[Tag]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => spans.extend(open.take()),
            Tag::B(t) => {
                spans.extend(open.take());
                open = Some(EntitySpan::new(i, i, t));
            }
            Tag::I(t) => match &mut open {
                Some(s) if s.entity_type == t => s.end = i,
                _ => {
                    spans.extend(open.take());
                    open = Some(EntitySpan::new(i, i, t));
                }
            },
        }
    }
    spans.extend(open);
    spans
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    lowercase: bool,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times. Ids follow first-seen
    /// order so the result is independent of hash iteration order.
    pub fn build<'a, I, S>(sentences: I, min_freq: usize, lowercase: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        for s in sentences {
            for tok in s {
                let key = normalize(tok, lowercase);
                let c = counts.entry(key.clone()).or_insert(0);
                if *c == 0 {
                    order.push(key);
                }
                *c += 1;
            }
        }
        let kept = order.into_iter().filter(|t| counts[t] >= min_freq);
        Self::from_tokens(kept, lowercase)
    }

    fn from_tokens(words: impl IntoIterator<Item = String>, lowercase: bool) -> Self {
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(words);
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            ids,
            lowercase,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids
            .get(&normalize(token, self.lowercase))
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order (id = index + 2).
    pub fn words(&self) -> &[String] {
        &self.tokens[2..]
    }

    /// One token per line; the first line is id 2.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in self.words() {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, lowercase: bool) -> Result<Self, TextError> {
        let mut words = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| TextError::Vocab(e.to_string()))?;
            if line.is_empty() || line == PAD || line == UNK || line.contains(char::is_whitespace) {
                return Err(TextError::Vocab(format!("invalid token on line {}", n + 1)));
            }
            words.push(line);
        }
        let v = Self::from_tokens(words, lowercase);
        if v.ids.len() != v.tokens.len() {
            return Err(TextError::Vocab("duplicate token".into()));
        }
        Ok(v)
    }
}

fn normalize(tok: &str, lowercase: bool) -> String {
    if lowercase {
        tok.to_lowercase()
    } else {
        tok.to_string()
    }
}

/// One model input: a tokenized line with ids and optional gold annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub raw_text: String,
    pub tokens: Vec<Token>,
    pub token_ids: Vec<usize>,
    pub gold_entities: Option<Vec<EntitySpan>>,
}

impl Sentence {
    pub fn new(raw_text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Self, TextError> {
        let tokens = tokenize(raw_text);
        if tokens.len() > max_len {
            return Err(TextError::TooLong {
                len: tokens.len(),
                max: max_len,
            });
        }
        let token_ids = tokens.iter().map(|t| vocab.id(&t.text)).collect();
        Ok(Sentence {
            raw_text: raw_text.to_string(),
            tokens,
            token_ids,
            gold_entities: None,
        })
    }

    pub fn with_entities(mut self, spans: &[EntitySpan]) -> Result<Self, TextError> {
        self.gold_entities = Some(validate_spans(spans, self.len())?);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token indices overlapping the byte range `chars`.
    pub fn tokens_covering(&self, chars: Range<usize>) -> Option<(usize, usize)> {
        let mut hit = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < chars.end && chars.start < t.end)
            .map(|(i, _)| i);
        let first = hit.next()?;
        let last = hit.next_back().unwrap_or(first);
        Some((first, last))
    }
}
