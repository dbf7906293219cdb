use std::ops::Range;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_fan_in, ModelError};
use crate::codec::{PairFamily, RelationLabel, RelationSchema};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::EntitySpan;

/// Negatives kept per family when the family has no positives at all.
pub const ZERO_POSITIVE_FLOOR: usize = 5;

/// Five half-open token ranges tiling `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSpans {
    pub before: Range<usize>,
    pub entity1: Range<usize>,
    pub between: Range<usize>,
    pub entity2: Range<usize>,
    pub after: Range<usize>,
}

impl SegmentSpans {
    /// In representation order.
    pub fn as_array(&self) -> [Range<usize>; 5] {
        [
            self.before.clone(),
            self.entity1.clone(),
            self.between.clone(),
            self.entity2.clone(),
            self.after.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelationCandidate {
    pub first: EntitySpan,
    pub second: EntitySpan,
    pub family: PairFamily,
    pub label: Option<RelationLabel>,
}

pub fn segment_sentence(
    n: usize,
    e1: &EntitySpan,
    e2: &EntitySpan,
) -> Result<SegmentSpans, ModelError> {
    let err = |reason| {
        Err(ModelError::Candidate {
            first: *e1,
            second: *e2,
            reason,
        })
    };
    if e1.start > e1.end || e2.start > e2.end {
        return err("inverted span");
    }
    if e1.end >= e2.start {
        return err("entities overlap or are out of text order");
    }
    if e2.end >= n {
        return err("entity beyond sentence end");
    }
    Ok(SegmentSpans {
        before: 0..e1.start,
        entity1: e1.start..e1.end + 1,
        between: e1.end + 1..e2.start,
        entity2: e2.start..e2.end + 1,
        after: e2.end + 1..n,
    })
}

/// Mean of the rows in `range` as a `1×d` row; zeros when the range is empty.
pub fn average_pool(
    g: &mut Graph,
    embeddings: Var,
    range: Range<usize>,
) -> Result<Var, ModelError> {
    Ok(g.mean_rows(embeddings, range)?)
}

/// Pooled segments concatenated as before, e1, between, e2, after: `1×5d`.
pub fn relation_representation(
    g: &mut Graph,
    embeddings: Var,
    segments: &SegmentSpans,
) -> Result<Var, ModelError> {
    let parts = segments
        .as_array()
        .into_iter()
        .map(|r| average_pool(g, embeddings, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(g.concat_cols(&parts)?)
}

/// Negatives kept per positive, per family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownsampleRatios {
    pub pp: f64,
    pub tep: f64,
    pub trp: f64,
}

impl Default for DownsampleRatios {
    fn default() -> Self {
        DownsampleRatios {
            pp: 4.0,
            tep: 2.0,
            trp: 1.0,
        }
    }
}

impl DownsampleRatios {
    pub fn get(&self, family: PairFamily) -> f64 {
        match family {
            PairFamily::PP => self.pp,
            PairFamily::TeP => self.tep,
            PairFamily::TrP => self.trp,
        }
    }

    /// Most negatives kept for a family with `positives` positives and
    /// `available` negatives.
    pub fn cap(&self, family: PairFamily, positives: usize, available: usize) -> usize {
        if positives == 0 {
            return ZERO_POSITIVE_FLOOR.min(available);
        }
        let cap = (self.get(family) * positives as f64).floor() as usize;
        cap.min(available)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReConfig {
    pub hidden_dim: usize,
    pub ratios: DownsampleRatios,
}

impl Default for ReConfig {
    fn default() -> Self {
        ReConfig {
            hidden_dim: 128,
            ratios: DownsampleRatios::default(),
        }
    }
}

/// Shared ReLU hidden layer followed by one output layer per pair family.
#[derive(Debug, Clone, PartialEq)]
pub struct ReHead {
    pub config: ReConfig,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out: [(ParamId, ParamId); 3],
}

impl ReHead {
    pub fn new(
        config: &ReConfig,
        model_dim: usize,
        schema: &RelationSchema,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        if config.hidden_dim == 0 {
            return Err(ModelError::Config("re hidden_dim must be positive".into()));
        }
        for f in PairFamily::ALL {
            let r = config.ratios.get(f);
            if !(r.is_finite() && r >= 0.0) {
                return Err(ModelError::Config(format!(
                    "downsample ratio for {} must be ≥ 0",
                    f.as_str()
                )));
            }
        }
        let h = config.hidden_dim;
        let hidden_w = store.add("re/hidden/w", init_fan_in(rng, 5 * model_dim, h));
        let hidden_b = store.add("re/hidden/b", Tensor::zeros(&[1, h]));
        let out = PairFamily::ALL.map(|f| {
            let k = schema.num_classes(f);
            (
                store.add(format!("re/out/{}/w", f.as_str()), init_fan_in(rng, h, k)),
                store.add(format!("re/out/{}/b", f.as_str()), Tensor::zeros(&[1, k])),
            )
        });
        Ok(ReHead {
            config: config.clone(),
            hidden_w,
            hidden_b,
            out,
        })
    }

    /// Logits `m×|labels(family)|` for `m` stacked representations.
    pub fn classify_relation(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        reprs: Var,
        family: PairFamily,
    ) -> Result<Var, ModelError> {
        let w1 = g.param(store, self.hidden_w);
        let b1 = g.param(store, self.hidden_b);
        let (ow, ob) = self.out[family.index()];
        let w2 = g.param(store, ow);
        let b2 = g.param(store, ob);
        let a = g.matmul(reprs, w1)?;
        let a = g.add_row(a, b1)?;
        let a = g.relu(a);
        let o = g.matmul(a, w2)?;
        Ok(g.add_row(o, b2)?)
    }
}

/// Every text-ordered pair whose types form a family, sorted by first then
/// second start. Overlapping pairs are skipped.
pub fn generate_candidate_pairs(entities: &[EntitySpan]) -> Vec<RelationCandidate> {
    let mut sorted = entities.to_vec();
    sorted.sort();
    let mut out = Vec::new();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if a.end >= b.start {
                continue;
            }
            if let Some(family) = PairFamily::of(a.entity_type, b.entity_type) {
                out.push(RelationCandidate {
                    first: *a,
                    second: *b,
                    family,
                    label: None,
                });
            }
        }
    }
    out.sort_by_key(|c| (c.first.start, c.second.start, c.first.end, c.second.end));
    out
}

fn is_positive(c: &RelationCandidate, schema: &RelationSchema) -> bool {
    c.label.as_ref().is_some_and(|l| !schema.is_none(l))
}

/// Keeps every positive and, per family, a uniform sample of negatives no
/// larger than [`DownsampleRatios::cap`]. Returns sorted indices into
/// `candidates`.
pub fn downsample_negatives(
    candidates: &[RelationCandidate],
    schema: &RelationSchema,
    ratios: &DownsampleRatios,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut keep = Vec::with_capacity(candidates.len());
    for family in PairFamily::ALL {
        let mut negatives = Vec::new();
        let mut positives = 0;
        for (i, c) in candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.family == family)
        {
            if is_positive(c, schema) {
                positives += 1;
                keep.push(i);
            } else {
                negatives.push(i);
            }
        }
        let cap = ratios.cap(family, positives, negatives.len());
        keep.extend(
            sample(rng, negatives.len(), cap)
                .into_iter()
                .map(|j| negatives[j]),
        );
    }
    keep.sort_unstable();
    keep
}
