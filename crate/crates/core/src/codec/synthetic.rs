//! Template-grammar corpus generator.
//!
//! Each sentence comes from one template. Slots (`[problem]`, `[test]`,
//! `[treatment]`) are filled from fixed lexicons and the template lists the
//! relations that hold between its slots, so every annotation is correct by
//! construction and each relation label is a function of the template's
//! connecting words. The full template table is reproduced in
//! `docs/synthetic_grammar.md`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Concept, Relation, RelationLabel, StandoffDocument};
use crate::text::EntityType;

/// `pattern` uses `[type]` for slots; slots are numbered left to right.
/// `relations` are `(first slot, label, second slot)` in relation-file
/// argument order.
#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub pattern: &'static str,
    pub relations: &'static [(usize, &'static str, usize)],
}

const fn t(pattern: &'static str, relations: &'static [(usize, &'static str, usize)]) -> Template {
    Template { pattern, relations }
}

pub const TEMPLATES: &[Template] = &[
    // test reveals problem
    t("[test] revealed [problem] .", &[(0, "TeRP", 1)]),
    t("[test] showed evidence of [problem] .", &[(0, "TeRP", 1)]),
    // test conducted to investigate problem
    t(
        "[test] was ordered to evaluate [problem] .",
        &[(0, "TeCP", 1)],
    ),
    t(
        "[test] was obtained to rule out [problem] .",
        &[(0, "TeCP", 1)],
    ),
    // treatment improves problem
    t("[problem] improved after [treatment] .", &[(1, "TrIP", 0)]),
    t("[treatment] resolved the [problem] .", &[(0, "TrIP", 1)]),
    // treatment worsens problem
    t(
        "[problem] worsened despite [treatment] .",
        &[(1, "TrWP", 0)],
    ),
    t(
        "[treatment] failed to control the [problem] .",
        &[(0, "TrWP", 1)],
    ),
    // treatment causes problem
    t("[treatment] caused [problem] .", &[(0, "TrCP", 1)]),
    t(
        "the patient developed [problem] as a side effect of [treatment] .",
        &[(1, "TrCP", 0)],
    ),
    // treatment administered for problem
    t("[treatment] was given for [problem] .", &[(0, "TrAP", 1)]),
    t(
        "the patient was started on [treatment] for [problem] .",
        &[(0, "TrAP", 1)],
    ),
    // treatment not administered because of problem
    t(
        "[treatment] was held because of [problem] .",
        &[(0, "TrNAP", 1)],
    ),
    t(
        "[treatment] was avoided given [problem] .",
        &[(0, "TrNAP", 1)],
    ),
    // problem indicates problem
    t("[problem] was attributed to [problem] .", &[(0, "PIP", 1)]),
    t("[problem] complicated by [problem] .", &[(0, "PIP", 1)]),
    // mixed sentences with unrelated pairs
    t("[problem] and [problem] were noted on admission .", &[]),
    t("[test] was unremarkable and [problem] was denied .", &[]),
    t("[treatment] was continued and [problem] is stable .", &[]),
    t(
        "past history includes [problem] , [problem] and [problem] .",
        &[],
    ),
    t(
        "[test] revealed [problem] ; [treatment] was continued .",
        &[(0, "TeRP", 1)],
    ),
    t(
        "[treatment] was given for [problem] and [test] was normal .",
        &[(0, "TrAP", 1)],
    ),
    t(
        "the patient was started on [treatment] for [problem] , and [problem] was noted .",
        &[(0, "TrAP", 1)],
    ),
    t(
        "[problem] complicated by [problem] ; [test] is pending .",
        &[(0, "PIP", 1)],
    ),
    // zero or one concept
    t("the patient denies [problem] .", &[]),
    t("[test] is pending .", &[]),
    t("continue [treatment] .", &[]),
    t("the patient was seen in clinic today .", &[]),
    t("follow up in two weeks .", &[]),
];

const PROBLEMS: &[&str] = &[
    "chest pain",
    "shortness of breath",
    "pneumonia",
    "hypertension",
    "acute renal failure",
    "atrial fibrillation",
    "diabetes",
    "a pleural effusion",
    "fever",
    "anemia",
    "cellulitis",
    "congestive heart failure",
    "nausea",
    "hypokalemia",
    "a urinary tract infection",
    "deep vein thrombosis",
    "headache",
    "sepsis",
    "abdominal pain",
    "a rash",
];

const TESTS: &[&str] = &[
    "a chest x-ray",
    "an ekg",
    "a ct scan of the abdomen",
    "blood cultures",
    "a urinalysis",
    "an echocardiogram",
    "a cbc",
    "a troponin level",
    "an mri of the brain",
    "serum potassium",
    "a biopsy",
    "liver function tests",
];

const TREATMENTS: &[&str] = &[
    "aspirin",
    "iv antibiotics",
    "lasix",
    "metoprolol",
    "insulin",
    "heparin",
    "a blood transfusion",
    "surgery",
    "vancomycin",
    "supplemental oxygen",
    "prednisone",
    "potassium chloride",
    "coumadin",
    "morphine",
    "physical therapy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub min_sentences: usize,
    pub max_sentences: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            min_sentences: 4,
            max_sentences: 8,
        }
    }
}

fn lexicon(ty: EntityType) -> &'static [&'static str] {
    match ty {
        EntityType::Problem => PROBLEMS,
        EntityType::Test => TESTS,
        EntityType::Treatment => TREATMENTS,
    }
}

enum Piece {
    Word(&'static str),
    Slot(EntityType),
}

fn pieces(pattern: &'static str) -> Vec<Piece> {
    pattern
        .split_whitespace()
        .map(|w| {
            match w
                .strip_prefix('[')
                .and_then(|w| w.strip_suffix(']'))
                .and_then(EntityType::parse)
            {
                Some(ty) => Piece::Slot(ty),
                None => Piece::Word(w),
            }
        })
        .collect()
}

/// Renders one template on line `line`, appending its concepts and relations.
fn render(
    template: &Template,
    line: usize,
    rng: &mut ChaCha8Rng,
    concepts: &mut Vec<Concept>,
    relations: &mut Vec<Relation>,
) -> String {
    let mut words: Vec<&str> = Vec::new();
    let mut slots = Vec::new();
    for piece in pieces(template.pattern) {
        match piece {
            Piece::Word(w) => words.push(w),
            Piece::Slot(ty) => {
                let filler = *lexicon(ty).choose(rng).expect("non-empty lexicon");
                let start = words.len();
                words.extend(filler.split_whitespace());
                slots.push(concepts.len());
                concepts.push(Concept {
                    text: filler.to_string(),
                    line,
                    start,
                    end: words.len() - 1,
                    concept_type: ty,
                });
            }
        }
    }
    for &(a, label, b) in template.relations {
        relations.push(Relation {
            first: slots[a],
            label: RelationLabel::from(label),
            second: slots[b],
        });
    }
    words.join(" ")
}

/// Deterministic in `(seed, config)`. Templates are dealt from a shuffled
/// deck that is refilled when empty, so template frequencies stay balanced
/// across the corpus.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_documents: usize,
    config: &GrammarConfig,
) -> Vec<StandoffDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deck: Vec<usize> = Vec::new();
    let (lo, hi) = (
        config.min_sentences.max(1),
        config.max_sentences.max(config.min_sentences.max(1)),
    );
    (0..n_documents)
        .map(|d| {
            let n_sent = rng.random_range(lo..=hi);
            let mut lines = Vec::with_capacity(n_sent);
            let mut concepts = Vec::new();
            let mut relations = Vec::new();
            for i in 0..n_sent {
                if deck.is_empty() {
                    deck = (0..TEMPLATES.len()).collect();
                    deck.shuffle(&mut rng);
                }
                let ti = deck.pop().expect("refilled");
                lines.push(render(
                    &TEMPLATES[ti],
                    i + 1,
                    &mut rng,
                    &mut concepts,
                    &mut relations,
                ));
            }
            StandoffDocument {
                doc_id: format!("synth-{d:05}"),
                lines,
                concepts,
                relations,
            }
            .canonicalize()
        })
        .collect()
}
