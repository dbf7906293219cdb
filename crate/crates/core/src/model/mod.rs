//! The joint network: a shared self-attention encoder feeding a BiRNN
//! tagger and a segment-pooling relation classifier.

mod encoder;
mod ner;
mod re;

pub use encoder::{Encoder, EncoderConfig, PositionEncoding};
pub use ner::{NerConfig, NerHead, RnnCell};
pub use re::{
    average_pool, downsample_negatives, generate_candidate_pairs, relation_representation,
    segment_sentence, DownsampleRatios, ReConfig, ReHead, RelationCandidate, SegmentSpans,
    ZERO_POSITIVE_FLOOR,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{PairFamily, RelationLabel, RelationSchema};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use crate::text::{decode_spans, EntitySpan, Sentence, Tag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    Empty,
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownId { id: usize, vocab: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid candidate {first} / {second}: {reason}")]
    Candidate {
        first: EntitySpan,
        second: EntitySpan,
        reason: &'static str,
    },
}

pub(crate) type Rand<'a> = Option<&'a mut ChaCha8Rng>;

/// Uniform in ±`limit`.
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
    t
}

/// Normal with standard deviation `1/√fan_in`.
pub(crate) fn init_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
    t
}

/// Inverted dropout on `x`; identity when `rng` is `None` or `p == 0`.
pub(crate) fn dropout(g: &mut Graph, x: Var, p: f64, rng: Rand<'_>) -> Result<Var, TensorError> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(g.value(x).shape());
    for v in mask.data_mut() {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
    let m = g.constant(mask);
    g.mul(x, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ner: NerConfig,
    pub re: ReConfig,
}

/// A relation predicted over two text-ordered spans.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PredictedRelation {
    pub first: EntitySpan,
    pub second: EntitySpan,
    pub label: RelationLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prediction {
    pub entities: Vec<EntitySpan>,
    /// Every candidate pair with its argmax label, none labels included.
    pub relations: Vec<PredictedRelation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub config: ModelConfig,
    pub schema: RelationSchema,
    pub encoder: Encoder,
    pub ner: NerHead,
    pub re: ReHead,
}

/// Per-sentence intermediate results of one forward pass.
pub struct SentenceForward {
    pub encoded: Var,
    pub ner_logits: Var,
}

impl JointModel {
    /// Registers all parameters in `store`, drawing initial values from `seed`.
    pub fn new(
        config: ModelConfig,
        vocab_size: usize,
        schema: RelationSchema,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.encoder.clone(), vocab_size, store, &mut rng)?;
        let ner = NerHead::new(
            config.ner.clone(),
            config.encoder.model_dim,
            store,
            &mut rng,
        )?;
        let re = ReHead::new(
            &config.re,
            config.encoder.model_dim,
            &schema,
            store,
            &mut rng,
        )?;
        Ok(JointModel {
            config,
            schema,
            encoder,
            ner,
            re,
        })
    }

    /// Encoder, BiRNN and token classifier for one sentence.
    pub fn forward_sentence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token_ids: &[usize],
        rng: Rand<'_>,
    ) -> Result<SentenceForward, ModelError> {
        let encoded = self.encoder.encode(g, store, token_ids, rng)?;
        let hidden = self.ner.birnn_forward(g, store, encoded)?;
        let ner_logits = self.ner.classify_tokens(g, store, hidden)?;
        Ok(SentenceForward {
            encoded,
            ner_logits,
        })
    }

    /// Logits for candidates of one family, all taken from the same encoded
    /// sentence or from several (each entry names its encoded matrix).
    pub fn relation_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        family: PairFamily,
        items: &[(Var, &RelationCandidate)],
    ) -> Result<Var, ModelError> {
        let mut reprs = Vec::with_capacity(items.len());
        for (encoded, cand) in items {
            let n = g.value(*encoded).rows();
            let segs = segment_sentence(n, &cand.first, &cand.second)?;
            reprs.push(relation_representation(g, *encoded, &segs)?);
        }
        let stacked = g.concat_rows(&reprs)?;
        self.re.classify_relation(g, store, stacked, family)
    }

    fn tags_from_logits(logits: &Tensor) -> Vec<Tag> {
        (0..logits.rows())
            .map(|r| Tag::from_index(logits.argmax_row(r)).expect("logit width is the tagset"))
            .collect()
    }

    pub fn predict_entities(
        &self,
        store: &ParamStore,
        sentence: &Sentence,
    ) -> Result<Vec<EntitySpan>, ModelError> {
        if sentence.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let fwd = self.forward_sentence(&mut g, store, &sentence.token_ids, None)?;
        Ok(decode_spans(&Self::tags_from_logits(
            g.value(fwd.ner_logits),
        )))
    }

    /// Labels every candidate pair over `entities` with its argmax class.
    pub fn classify_pairs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded: Var,
        entities: &[EntitySpan],
    ) -> Result<Vec<PredictedRelation>, ModelError> {
        let cands = generate_candidate_pairs(entities);
        let mut out = Vec::with_capacity(cands.len());
        for family in PairFamily::ALL {
            let items: Vec<(Var, &RelationCandidate)> = cands
                .iter()
                .filter(|c| c.family == family)
                .map(|c| (encoded, c))
                .collect();
            if items.is_empty() {
                continue;
            }
            let logits = self.relation_logits(g, store, family, &items)?;
            let lt = g.value(logits);
            for (r, (_, c)) in items.iter().enumerate() {
                let label = self
                    .schema
                    .class_label(family, lt.argmax_row(r))
                    .expect("logit width is the family label count")
                    .clone();
                out.push(PredictedRelation {
                    first: c.first,
                    second: c.second,
                    label,
                });
            }
        }
        out.sort();
        Ok(out)
    }

    /// End-to-end inference: predicted entities, then relations over them.
    pub fn predict(
        &self,
        store: &ParamStore,
        sentence: &Sentence,
    ) -> Result<Prediction, ModelError> {
        if sentence.is_empty() {
            return Ok(Prediction::default());
        }
        let mut g = Graph::new();
        let fwd = self.forward_sentence(&mut g, store, &sentence.token_ids, None)?;
        let entities = decode_spans(&Self::tags_from_logits(g.value(fwd.ner_logits)));
        let relations = self.classify_pairs(&mut g, store, fwd.encoded, &entities)?;
        Ok(Prediction {
            entities,
            relations,
        })
    }

    /// Relation labels over the given (gold) entities, plus predicted entities
    /// from the same forward pass.
    pub fn predict_with_entities(
        &self,
        store: &ParamStore,
        sentence: &Sentence,
        gold_entities: &[EntitySpan],
    ) -> Result<(Prediction, Vec<PredictedRelation>), ModelError> {
        if sentence.is_empty() {
            return Ok((Prediction::default(), Vec::new()));
        }
        let mut g = Graph::new();
        let fwd = self.forward_sentence(&mut g, store, &sentence.token_ids, None)?;
        let entities = decode_spans(&Self::tags_from_logits(g.value(fwd.ner_logits)));
        let relations = self.classify_pairs(&mut g, store, fwd.encoded, &entities)?;
        let gold_rel = self.classify_pairs(&mut g, store, fwd.encoded, gold_entities)?;
        Ok((
            Prediction {
                entities,
                relations,
            },
            gold_rel,
        ))
    }
}
