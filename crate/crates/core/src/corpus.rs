//! Bridges standoff documents and model inputs: one [`Example`] per
//! non-empty text line, and predictions back to standoff annotations.
//!
//! Concepts are located by byte offsets. A concept covering whitespace
//! tokens `s..=e` becomes the model tokens overlapping that byte range;
//! a predicted span maps back to every whitespace token it touches.

use std::collections::HashMap;

use thiserror::Error;

use crate::codec::{Concept, PairFamily, Relation, RelationSchema, StandoffDocument};
use crate::model::{generate_candidate_pairs, PredictedRelation, RelationCandidate};
use crate::text::{encode_bio, EntitySpan, Sentence, Tag, TextError, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("{doc_id} line {line}: {source}")]
    Text {
        doc_id: String,
        line: usize,
        #[source]
        source: TextError,
    },
    #[error("{doc_id} line {line}: concept {text:?} covers no model token")]
    EmptyConcept {
        doc_id: String,
        line: usize,
        text: String,
    },
}

/// A training or evaluation unit: one sentence with its gold annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub doc_id: String,
    /// 1-based line in the source document.
    pub line: usize,
    pub sentence: Sentence,
    pub tags: Vec<Tag>,
    pub entities: Vec<EntitySpan>,
    /// Every candidate pair over the gold entities, labelled with its gold
    /// relation or the family's none label.
    pub candidates: Vec<RelationCandidate>,
}

impl Example {
    /// `doc_id:line`, used in diagnostics.
    pub fn id(&self) -> String {
        format!("{}:{}", self.doc_id, self.line)
    }

    pub fn tag_indices(&self) -> Vec<usize> {
        self.tags.iter().map(|t| t.index()).collect()
    }

    /// Gold positive relations, text-ordered.
    pub fn gold_relations(&self, schema: &RelationSchema) -> Vec<PredictedRelation> {
        let mut out: Vec<PredictedRelation> = self
            .candidates
            .iter()
            .filter_map(|c| {
                let label = c.label.as_ref()?;
                (!schema.is_none(label)).then(|| PredictedRelation {
                    first: c.first,
                    second: c.second,
                    label: label.clone(),
                })
            })
            .collect();
        out.sort();
        out
    }
}

/// Byte ranges of the whitespace-separated words of `line`.
fn word_offsets(line: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, line.len()));
    }
    out
}

/// Every text line of every document in the vocabulary's tokenization.
pub fn build_vocabulary(docs: &[StandoffDocument], min_freq: usize, lowercase: bool) -> Vocabulary {
    let tokenized: Vec<Vec<String>> = docs
        .iter()
        .flat_map(|d| d.lines.iter())
        .map(|l| {
            crate::text::tokenize(l)
                .into_iter()
                .map(|t| t.text)
                .collect()
        })
        .collect();
    Vocabulary::build(
        tokenized.iter().map(|s| s.iter().map(String::as_str)),
        min_freq,
        lowercase,
    )
}

fn concept_span(
    doc: &StandoffDocument,
    sentence: &Sentence,
    words: &[(usize, usize)],
    c: &Concept,
) -> Result<EntitySpan, CorpusError> {
    let bytes = words[c.start].0..words[c.end].1;
    let (s, e) = sentence
        .tokens_covering(bytes)
        .ok_or_else(|| CorpusError::EmptyConcept {
            doc_id: doc.doc_id.clone(),
            line: c.line,
            text: c.text.clone(),
        })?;
    Ok(EntitySpan::new(s, e, c.concept_type))
}

/// Converts a validated document into examples, skipping blank lines.
pub fn examples_from_document(
    doc: &StandoffDocument,
    vocab: &Vocabulary,
    schema: &RelationSchema,
    max_len: usize,
) -> Result<Vec<Example>, CorpusError> {
    let mut by_line: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, c) in doc.concepts.iter().enumerate() {
        by_line.entry(c.line).or_default().push(i);
    }
    let mut spans_of = vec![None; doc.concepts.len()];
    let mut out = Vec::new();
    for (idx, text) in doc.lines.iter().enumerate() {
        let line = idx + 1;
        let text_err = |source| CorpusError::Text {
            doc_id: doc.doc_id.clone(),
            line,
            source,
        };
        let sentence = Sentence::new(text, vocab, max_len).map_err(text_err)?;
        if sentence.is_empty() {
            continue;
        }
        let words = word_offsets(text);
        let mut spans = Vec::new();
        for &ci in by_line.get(&line).map(Vec::as_slice).unwrap_or(&[]) {
            let span = concept_span(doc, &sentence, &words, &doc.concepts[ci])?;
            spans_of[ci] = Some(span);
            spans.push(span);
        }
        let sentence = sentence.with_entities(&spans).map_err(text_err)?;
        let entities = sentence.gold_entities.clone().unwrap_or_default();
        let tags = encode_bio(sentence.len(), &entities).map_err(text_err)?;
        out.push(Example {
            doc_id: doc.doc_id.clone(),
            line,
            sentence,
            tags,
            entities,
            candidates: Vec::new(),
        });
    }

    let mut gold: HashMap<(usize, EntitySpan, EntitySpan), &Relation> = HashMap::new();
    for r in &doc.relations {
        let (Some(a), Some(b)) = (spans_of[r.first], spans_of[r.second]) else {
            continue;
        };
        let key = (doc.concepts[r.first].line, a.min(b), a.max(b));
        if gold.insert(key, r).is_some() {
            log::warn!(
                "{}: two relations over one pair; keeping the last",
                doc.doc_id
            );
        }
    }
    for ex in &mut out {
        let mut cands = generate_candidate_pairs(&ex.entities);
        for c in &mut cands {
            let label = match gold.get(&(ex.line, c.first, c.second)) {
                Some(r) => r.label.clone(),
                None => schema.none_label(c.family).clone(),
            };
            c.label = Some(label);
        }
        ex.candidates = cands;
    }
    Ok(out)
}

pub fn examples_from_corpus(
    docs: &[StandoffDocument],
    vocab: &Vocabulary,
    schema: &RelationSchema,
    max_len: usize,
) -> Result<Vec<Example>, CorpusError> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(examples_from_document(d, vocab, schema, max_len)?);
    }
    Ok(out)
}

/// Predictions for one text line, in model-token coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinePrediction {
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<PredictedRelation>,
}

/// Builds a standoff document from per-line predictions. Spans are widened
/// to whole whitespace words; a span whose words overlap an earlier one is
/// dropped together with its relations. None-labelled relations are not
/// written. Relation arguments follow the family's argument order.
pub fn document_from_predictions(
    doc_id: &str,
    lines: &[String],
    predictions: &[LinePrediction],
    schema: &RelationSchema,
) -> StandoffDocument {
    let mut concepts = Vec::new();
    let mut relations = Vec::new();
    for (idx, (text, pred)) in lines.iter().zip(predictions).enumerate() {
        let tokens = crate::text::tokenize(text);
        let words = word_offsets(text);
        let mut index_of: HashMap<EntitySpan, usize> = HashMap::new();
        let mut last_word_end: Option<usize> = None;
        let mut entities = pred.entities.clone();
        entities.sort();
        for span in entities {
            if span.end >= tokens.len() {
                continue;
            }
            let (bs, be) = (tokens[span.start].start, tokens[span.end].end);
            let touched: Vec<usize> = words
                .iter()
                .enumerate()
                .filter(|(_, &(ws, we))| ws < be && bs < we)
                .map(|(i, _)| i)
                .collect();
            let (Some(&ws), Some(&we)) = (touched.first(), touched.last()) else {
                continue;
            };
            if last_word_end.is_some_and(|e| ws <= e) {
                continue;
            }
            last_word_end = Some(we);
            index_of.insert(span, concepts.len());
            concepts.push(Concept {
                text: text[words[ws].0..words[we].1].to_string(),
                line: idx + 1,
                start: ws,
                end: we,
                concept_type: span.entity_type,
            });
        }
        for r in &pred.relations {
            if schema.is_none(&r.label) {
                continue;
            }
            let (Some(&a), Some(&b)) = (index_of.get(&r.first), index_of.get(&r.second)) else {
                continue;
            };
            let Some(family) = schema.family_of(&r.label) else {
                continue;
            };
            let (ta, _) = family.argument_types();
            let (first, second) = if family == PairFamily::PP || concepts[a].concept_type == ta {
                (a, b)
            } else {
                (b, a)
            };
            if family.argument_types()
                != (concepts[first].concept_type, concepts[second].concept_type)
            {
                continue;
            }
            relations.push(Relation {
                first,
                label: r.label.clone(),
                second,
            });
        }
    }
    StandoffDocument {
        doc_id: doc_id.to_string(),
        lines: lines.to_vec(),
        concepts,
        relations,
    }
    .canonicalize()
}
