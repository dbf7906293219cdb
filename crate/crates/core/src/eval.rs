//! Micro-averaged precision, recall and F1 with exact matching.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::RelationSchema;
use crate::corpus::Example;
use crate::model::{JointModel, ModelError, PredictedRelation};
use crate::tensor::ParamStore;
use crate::text::EntitySpan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{predicted} predicted documents but {gold} gold documents")]
    Length { predicted: usize, gold: usize },
    #[error("gold-entity condition: predicted relation over non-gold span {0}")]
    NotGoldSpan(EntitySpan),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `x / y` with `0 / 0 = 0`.
fn ratio(x: f64, y: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        x / y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        Prf {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f1: ratio(2.0 * tp as f64, (2 * tp + fp + fn_) as f64),
        }
    }

    fn add(&mut self, tp: usize, fp: usize, fn_: usize) {
        *self = Prf::from_counts(
            self.true_positives + tp,
            self.false_positives + fp,
            self.false_negatives + fn_,
        );
    }
}

impl fmt::Display for Prf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P={:.4} R={:.4} F1={:.4} (tp={} fp={} fn={})",
            self.precision,
            self.recall,
            self.f1,
            self.true_positives,
            self.false_positives,
            self.false_negatives
        )
    }
}

/// One-to-one exact-key matching as multiset intersection: `(tp, fp, fn)`.
fn match_counts<K: Eq + Hash>(
    pred: impl IntoIterator<Item = K>,
    gold: impl IntoIterator<Item = K>,
) -> (usize, usize, usize) {
    let mut remaining: HashMap<K, usize> = HashMap::new();
    let mut n_gold = 0;
    for k in gold {
        *remaining.entry(k).or_default() += 1;
        n_gold += 1;
    }
    let (mut tp, mut fp) = (0, 0);
    for k in pred {
        match remaining.get_mut(&k) {
            Some(c) if *c > 0 => {
                *c -= 1;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    (tp, fp, n_gold - tp)
}

fn check_len<A, B>(pred: &[A], gold: &[B]) -> Result<(), EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Length {
            predicted: pred.len(),
            gold: gold.len(),
        });
    }
    Ok(())
}

/// Exact `(start, end, type)` span matching, pooled over documents.
pub fn ner_f1(predicted: &[Vec<EntitySpan>], gold: &[Vec<EntitySpan>]) -> Result<Prf, EvalError> {
    check_len(predicted, gold)?;
    let mut prf = Prf::default();
    for (p, g) in predicted.iter().zip(gold) {
        let (tp, fp, fn_) = match_counts(p.iter(), g.iter());
        prf.add(tp, fp, fn_);
    }
    Ok(prf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReCondition {
    GoldEntities,
    EndToEnd,
}

impl ReCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            ReCondition::GoldEntities => "gold",
            ReCondition::EndToEnd => "end2end",
        }
    }
}

/// Gold side of relation scoring for one document or sentence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GoldRelations {
    pub entities: Vec<EntitySpan>,
    /// Positive relations only, text-ordered.
    pub relations: Vec<PredictedRelation>,
}

/// Pooled relation scoring over all positive labels. None predictions are
/// ignored. Under [`ReCondition::GoldEntities`] every predicted argument must
/// be a gold span.
pub fn re_f1(
    predicted: &[Vec<PredictedRelation>],
    gold: &[GoldRelations],
    condition: ReCondition,
    schema: &RelationSchema,
) -> Result<Prf, EvalError> {
    Ok(re_scores(predicted, gold, condition, schema)?.0)
}

/// Pooled score plus one score per positive label.
pub fn re_scores(
    predicted: &[Vec<PredictedRelation>],
    gold: &[GoldRelations],
    condition: ReCondition,
    schema: &RelationSchema,
) -> Result<(Prf, BTreeMap<String, Prf>), EvalError> {
    check_len(predicted, gold)?;
    let mut pooled = Prf::default();
    let mut per_label: BTreeMap<String, Prf> = schema
        .all_positive()
        .map(|l| (l.as_str().to_string(), Prf::default()))
        .collect();
    for (p, g) in predicted.iter().zip(gold) {
        if condition == ReCondition::GoldEntities {
            for r in p {
                for s in [r.first, r.second] {
                    if !g.entities.contains(&s) {
                        return Err(EvalError::NotGoldSpan(s));
                    }
                }
            }
        }
        let positives: Vec<&PredictedRelation> =
            p.iter().filter(|r| !schema.is_none(&r.label)).collect();
        let gold_pos: Vec<&PredictedRelation> = g
            .relations
            .iter()
            .filter(|r| !schema.is_none(&r.label))
            .collect();
        let (tp, fp, fn_) = match_counts(positives.iter().copied(), gold_pos.iter().copied());
        pooled.add(tp, fp, fn_);
        for (label, prf) in per_label.iter_mut() {
            let of = |v: &[&PredictedRelation]| -> Vec<PredictedRelation> {
                v.iter()
                    .filter(|r| r.label.as_str() == label)
                    .map(|r| (*r).clone())
                    .collect()
            };
            let (tp, fp, fn_) = match_counts(of(&positives), of(&gold_pos));
            prf.add(tp, fp, fn_);
        }
    }
    Ok((pooled, per_label))
}

/// The three headline scores plus per-label relation counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sentences: usize,
    pub ner: Prf,
    pub ner_per_type: BTreeMap<String, Prf>,
    pub re_gold: Prf,
    pub re_end2end: Prf,
    pub re_gold_per_label: BTreeMap<String, Prf>,
    pub re_end2end_per_label: BTreeMap<String, Prf>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sentences\t{}", self.sentences);
        let _ = writeln!(s, "ner\t{}", self.ner);
        let _ = writeln!(s, "re_gold\t{}", self.re_gold);
        let _ = writeln!(s, "re_end2end\t{}", self.re_end2end);
        s.push('\n');
        for (t, p) in &self.ner_per_type {
            let _ = writeln!(s, "ner/{t}\t{p}");
        }
        for (l, p) in &self.re_gold_per_label {
            let _ = writeln!(s, "re_gold/{l}\t{p}");
        }
        for (l, p) in &self.re_end2end_per_label {
            let _ = writeln!(s, "re_end2end/{l}\t{p}");
        }
        s
    }
}

/// Runs the model over `examples` and scores NER, RE with gold entities and
/// RE end to end.
pub fn evaluate(
    model: &JointModel,
    store: &ParamStore,
    examples: &[Example],
) -> Result<EvalReport, EvalError> {
    let schema = &model.schema;
    let mut pred_ents = Vec::with_capacity(examples.len());
    let mut gold_ents = Vec::with_capacity(examples.len());
    let mut pred_e2e = Vec::with_capacity(examples.len());
    let mut pred_gold = Vec::with_capacity(examples.len());
    let mut gold_rels = Vec::with_capacity(examples.len());
    for ex in examples {
        let (pred, over_gold) = model.predict_with_entities(store, &ex.sentence, &ex.entities)?;
        pred_ents.push(pred.entities);
        pred_e2e.push(pred.relations);
        pred_gold.push(over_gold);
        gold_ents.push(ex.entities.clone());
        gold_rels.push(GoldRelations {
            entities: ex.entities.clone(),
            relations: ex.gold_relations(schema),
        });
    }
    let ner = ner_f1(&pred_ents, &gold_ents)?;
    let mut ner_per_type = BTreeMap::new();
    for t in crate::text::EntityType::ALL {
        let only = |v: &[Vec<EntitySpan>]| -> Vec<Vec<EntitySpan>> {
            v.iter()
                .map(|s| s.iter().filter(|e| e.entity_type == t).copied().collect())
                .collect()
        };
        ner_per_type.insert(
            t.as_str().to_string(),
            ner_f1(&only(&pred_ents), &only(&gold_ents))?,
        );
    }
    let (re_gold, re_gold_per_label) =
        re_scores(&pred_gold, &gold_rels, ReCondition::GoldEntities, schema)?;
    let (re_end2end, re_end2end_per_label) =
        re_scores(&pred_e2e, &gold_rels, ReCondition::EndToEnd, schema)?;
    Ok(EvalReport {
        sentences: examples.len(),
        ner,
        ner_per_type,
        re_gold,
        re_end2end,
        re_gold_per_label,
        re_end2end_per_label,
    })
}
