use std::fmt;

use serde::{Deserialize, Serialize};

use crate::text::EntityType;

/// Entity-type combination a relation may hold between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairFamily {
    /// problem – problem
    PP,
    /// test – problem
    TeP,
    /// treatment – problem
    TrP,
}

impl PairFamily {
    pub const ALL: [PairFamily; 3] = [PairFamily::PP, PairFamily::TeP, PairFamily::TrP];

    /// Family of an unordered pair of entity types.
    pub fn of(a: EntityType, b: EntityType) -> Option<PairFamily> {
        use EntityType::*;
        match (a, b) {
            (Problem, Problem) => Some(PairFamily::PP),
            (Test, Problem) | (Problem, Test) => Some(PairFamily::TeP),
            (Treatment, Problem) | (Problem, Treatment) => Some(PairFamily::TrP),
            _ => None,
        }
    }

    /// Argument types in relation-file order.
    pub fn argument_types(self) -> (EntityType, EntityType) {
        match self {
            PairFamily::PP => (EntityType::Problem, EntityType::Problem),
            PairFamily::TeP => (EntityType::Test, EntityType::Problem),
            PairFamily::TrP => (EntityType::Treatment, EntityType::Problem),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairFamily::PP => "PP",
            PairFamily::TeP => "TeP",
            PairFamily::TrP => "TrP",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PairFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationLabel(String);

impl RelationLabel {
    pub fn new(s: impl Into<String>) -> Self {
        RelationLabel(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RelationLabel {
    fn from(s: &str) -> Self {
        RelationLabel(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyLabels {
    pub family: PairFamily,
    pub positive: Vec<RelationLabel>,
    pub none: RelationLabel,
}

/// Relation labels per pair family. Classifier outputs for a family are the
/// positive labels in order followed by its none label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    families: Vec<FamilyLabels>,
}

impl Default for RelationSchema {
    /// The 2010 i2b2/VA relation inventory.
    fn default() -> Self {
        let fam = |family, pos: &[&str], none: &str| FamilyLabels {
            family,
            positive: pos.iter().map(|&s| RelationLabel::from(s)).collect(),
            none: none.into(),
        };
        RelationSchema {
            families: vec![
                fam(PairFamily::PP, &["PIP"], "None-PP"),
                fam(PairFamily::TeP, &["TeRP", "TeCP"], "None-TeP"),
                fam(
                    PairFamily::TrP,
                    &["TrIP", "TrWP", "TrCP", "TrAP", "TrNAP"],
                    "None-TrP",
                ),
            ],
        }
    }
}

impl RelationSchema {
    /// Builds a schema; every family must appear exactly once and labels
    /// must be unique across the schema.
    pub fn new(mut families: Vec<FamilyLabels>) -> Result<Self, String> {
        families.sort_by_key(|f| f.family);
        for fam in PairFamily::ALL {
            if families.iter().filter(|f| f.family == fam).count() != 1 {
                return Err(format!("family {fam} must be declared exactly once"));
            }
        }
        let mut all: Vec<&RelationLabel> = families
            .iter()
            .flat_map(|f| f.positive.iter().chain(std::iter::once(&f.none)))
            .collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            return Err("relation labels must be unique".into());
        }
        Ok(RelationSchema { families })
    }

    fn family_labels(&self, family: PairFamily) -> &FamilyLabels {
        self.families
            .iter()
            .find(|f| f.family == family)
            .expect("schema covers every family")
    }

    pub fn positives(&self, family: PairFamily) -> &[RelationLabel] {
        &self.family_labels(family).positive
    }

    pub fn none_label(&self, family: PairFamily) -> &RelationLabel {
        &self.family_labels(family).none
    }

    /// Number of classifier outputs for `family`.
    pub fn num_classes(&self, family: PairFamily) -> usize {
        self.positives(family).len() + 1
    }

    pub fn class_index(&self, family: PairFamily, label: &RelationLabel) -> Option<usize> {
        let fl = self.family_labels(family);
        if &fl.none == label {
            return Some(fl.positive.len());
        }
        fl.positive.iter().position(|l| l == label)
    }

    pub fn class_label(&self, family: PairFamily, index: usize) -> Option<&RelationLabel> {
        let fl = self.family_labels(family);
        fl.positive
            .get(index)
            .or((index == fl.positive.len()).then_some(&fl.none))
    }

    pub fn is_none(&self, label: &RelationLabel) -> bool {
        self.families.iter().any(|f| &f.none == label)
    }

    /// Family of a positive label.
    pub fn family_of(&self, label: &RelationLabel) -> Option<PairFamily> {
        self.families
            .iter()
            .find(|f| f.positive.contains(label) || &f.none == label)
            .map(|f| f.family)
    }

    pub fn all_positive(&self) -> impl Iterator<Item = &RelationLabel> {
        self.families.iter().flat_map(|f| f.positive.iter())
    }
}
