use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use super::{CodecError, PairFamily, RelationLabel, RelationSchema};
use crate::text::EntityType;

/// One concept annotation. `start`/`end` are inclusive whitespace-token
/// indices within `line`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Concept {
    pub text: String,
    pub line: usize,
    pub start: usize,
    pub end: usize,
    pub concept_type: EntityType,
}

impl Concept {
    fn key(&self) -> (usize, usize, usize, EntityType) {
        (self.line, self.start, self.end, self.concept_type)
    }
}

/// A relation between two concepts, by index into the document's concept
/// list, in relation-file argument order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Relation {
    pub first: usize,
    pub label: RelationLabel,
    pub second: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StandoffDocument {
    pub doc_id: String,
    pub lines: Vec<String>,
    pub concepts: Vec<Concept>,
    pub relations: Vec<Relation>,
}

/// Contents of the `.txt`, `.con` and `.rel` files of one document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DocumentFiles {
    pub txt: String,
    pub con: String,
    pub rel: String,
}

fn con_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"^c="(.*)" (\d+):(\d+) (\d+):(\d+)\|\|t="([^"]*)"$"#).expect("valid regex")
    })
}

fn rel_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"^c="(.*)" (\d+):(\d+) (\d+):(\d+)\|\|r="([^"]*)"\|\|c="(.*)" (\d+):(\d+) (\d+):(\d+)$"#,
        )
        .expect("valid regex")
    })
}

struct ConceptRef {
    text: String,
    start: (usize, usize),
    end: (usize, usize),
}

fn num(caps: &regex::Captures<'_>, i: usize) -> Option<usize> {
    caps[i].parse().ok()
}

fn concept_ref(caps: &regex::Captures<'_>, base: usize) -> Option<ConceptRef> {
    Some(ConceptRef {
        text: caps[base].to_string(),
        start: (num(caps, base + 1)?, num(caps, base + 2)?),
        end: (num(caps, base + 3)?, num(caps, base + 4)?),
    })
}

fn words(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

fn check_concept(
    c: &Concept,
    lines: &[String],
    file: &'static str,
    lineno: usize,
) -> Result<(), CodecError> {
    let invalid = |message: String| CodecError::Validation {
        file,
        line: lineno,
        message,
    };
    if c.line == 0 || c.line > lines.len() {
        return Err(invalid(format!(
            "line {} outside document of {} lines",
            c.line,
            lines.len()
        )));
    }
    let toks = words(&lines[c.line - 1]);
    if c.start > c.end || c.end >= toks.len() {
        return Err(invalid(format!(
            "tokens {}..{} outside line {} of {} tokens",
            c.start,
            c.end,
            c.line,
            toks.len()
        )));
    }
    let covered = toks[c.start..=c.end].join(" ");
    if covered.to_lowercase() != words(&c.text).join(" ").to_lowercase() {
        return Err(invalid(format!(
            "concept text {:?} does not match {:?}",
            c.text, covered
        )));
    }
    Ok(())
}

/// Parses `.con` lines and validates their coordinates against `lines`.
pub fn parse_concepts(con: &str, lines: &[String]) -> Result<Vec<Concept>, CodecError> {
    let mut out = Vec::new();
    for (i, raw) in con.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let malformed = || CodecError::Parse {
            file: "con",
            line: lineno,
            text: line.to_string(),
        };
        let caps = con_re().captures(line).ok_or_else(malformed)?;
        let r = concept_ref(&caps, 1).ok_or_else(malformed)?;
        let concept_type = EntityType::parse(&caps[6]).ok_or_else(|| CodecError::Validation {
            file: "con",
            line: lineno,
            message: format!("unknown concept type {:?}", &caps[6]),
        })?;
        if r.start.0 != r.end.0 {
            return Err(CodecError::Validation {
                file: "con",
                line: lineno,
                message: "concept spans more than one line".into(),
            });
        }
        let c = Concept {
            text: r.text,
            line: r.start.0,
            start: r.start.1,
            end: r.end.1,
            concept_type,
        };
        check_concept(&c, lines, "con", lineno)?;
        out.push(c);
    }
    Ok(out)
}

/// Parses `.rel` lines against already parsed `concepts`. Duplicate lines
/// are dropped with a warning.
pub fn parse_relations(
    rel: &str,
    concepts: &[Concept],
    schema: &RelationSchema,
) -> Result<Vec<Relation>, CodecError> {
    let mut out: Vec<Relation> = Vec::new();
    for (i, raw) in rel.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let malformed = || CodecError::Parse {
            file: "rel",
            line: lineno,
            text: line.to_string(),
        };
        let invalid = |message: String| CodecError::Validation {
            file: "rel",
            line: lineno,
            message,
        };
        let caps = rel_re().captures(line).ok_or_else(malformed)?;
        let a = concept_ref(&caps, 1).ok_or_else(malformed)?;
        let b = concept_ref(&caps, 7).ok_or_else(malformed)?;
        let label = RelationLabel::new(&caps[6]);
        if a.start.0 != a.end.0 || b.start.0 != b.end.0 || a.start.0 != b.start.0 {
            return Err(CodecError::CrossSentence {
                file: "rel",
                line: lineno,
                first_line: a.start.0,
                second_line: b.start.0,
            });
        }
        let family = match schema.family_of(&label) {
            Some(f) if !schema.is_none(&label) => f,
            _ => return Err(invalid(format!("unknown relation label {label}"))),
        };
        let resolve = |r: &ConceptRef, want: EntityType| -> Result<usize, CodecError> {
            let at = |c: &&Concept| c.line == r.start.0 && c.start == r.start.1 && c.end == r.end.1;
            let mut hits = concepts.iter().enumerate().filter(|(_, c)| at(c));
            let (idx, c) = hits
                .clone()
                .find(|(_, c)| c.concept_type == want)
                .or_else(|| hits.next())
                .ok_or_else(|| {
                    invalid(format!(
                        "no concept {:?} at {}:{} {}:{}",
                        r.text, r.start.0, r.start.1, r.end.0, r.end.1
                    ))
                })?;
            if c.concept_type != want {
                return Err(invalid(format!(
                    "{label} requires a {want} argument, {:?} is a {}",
                    c.text, c.concept_type
                )));
            }
            Ok(idx)
        };
        let (t1, t2) = family.argument_types();
        let (first, second) = (resolve(&a, t1)?, resolve(&b, t2)?);
        let rel = Relation {
            first,
            label,
            second,
        };
        if rel.first == rel.second {
            return Err(invalid("relation between a concept and itself".into()));
        }
        if let Some(prev) = out
            .iter()
            .find(|r| r.first == rel.first && r.second == rel.second)
        {
            if prev.label == rel.label {
                log::warn!("rel line {lineno}: duplicate relation dropped");
                continue;
            }
            return Err(invalid(format!(
                "pair already labelled {}, cannot also be {}",
                prev.label, rel.label
            )));
        }
        out.push(rel);
    }
    Ok(out)
}

impl StandoffDocument {
    /// Sorts concepts by position and relations by their arguments, and
    /// drops exact duplicates.
    pub fn canonicalize(mut self) -> Self {
        let mut order: Vec<usize> = (0..self.concepts.len()).collect();
        order.sort_by_key(|&i| self.concepts[i].key());
        let mut remap = vec![0; self.concepts.len()];
        let mut concepts: Vec<Concept> = Vec::with_capacity(order.len());
        for &old in &order {
            let c = &self.concepts[old];
            if concepts.last().is_some_and(|p| p.key() == c.key()) {
                remap[old] = concepts.len() - 1;
            } else {
                remap[old] = concepts.len();
                concepts.push(c.clone());
            }
        }
        let mut relations: Vec<Relation> = self
            .relations
            .drain(..)
            .map(|r| Relation {
                first: remap[r.first],
                label: r.label,
                second: remap[r.second],
            })
            .collect();
        relations.sort_by(|a, b| (a.first, a.second, &a.label).cmp(&(b.first, b.second, &b.label)));
        relations.dedup();
        self.concepts = concepts;
        self.relations = relations;
        self
    }

    pub fn validate(&self, schema: &RelationSchema) -> Result<(), CodecError> {
        let fail = |message: String| CodecError::Invariant {
            doc_id: self.doc_id.clone(),
            message,
        };
        for (i, c) in self.concepts.iter().enumerate() {
            check_concept(c, &self.lines, "con", i + 1).map_err(|e| fail(e.to_string()))?;
            if c.text.contains('\n') || c.text.contains('"') && c.text.contains("||") {
                return Err(fail(format!(
                    "concept text {:?} cannot be serialized",
                    c.text
                )));
            }
        }
        for line in &self.lines {
            if line.contains('\n') {
                return Err(fail("text line contains a newline".into()));
            }
        }
        let mut seen = HashSet::new();
        for r in &self.relations {
            let (Some(a), Some(b)) = (self.concepts.get(r.first), self.concepts.get(r.second))
            else {
                return Err(fail("relation refers to a missing concept".into()));
            };
            if a.line != b.line {
                return Err(fail(format!(
                    "relation crosses lines {} and {}",
                    a.line, b.line
                )));
            }
            let family = schema
                .family_of(&r.label)
                .filter(|_| !schema.is_none(&r.label))
                .ok_or_else(|| fail(format!("unknown relation label {}", r.label)))?;
            if family.argument_types() != (a.concept_type, b.concept_type) {
                return Err(fail(format!(
                    "{} between {} and {}",
                    r.label, a.concept_type, b.concept_type
                )));
            }
            if !seen.insert((r.first, r.second)) {
                return Err(fail("more than one label for a concept pair".into()));
            }
        }
        Ok(())
    }

    /// Family of relation `r`, assuming the document validates.
    pub fn family(&self, r: &Relation) -> Option<PairFamily> {
        PairFamily::of(
            self.concepts[r.first].concept_type,
            self.concepts[r.second].concept_type,
        )
    }
}

pub fn parse_document(
    doc_id: &str,
    files: &DocumentFiles,
    schema: &RelationSchema,
) -> Result<StandoffDocument, CodecError> {
    let wrap = |e: CodecError| CodecError::InDocument {
        doc_id: doc_id.to_string(),
        source: Box::new(e),
    };
    let lines: Vec<String> = files.txt.lines().map(str::to_string).collect();
    let concepts = parse_concepts(&files.con, &lines).map_err(wrap)?;
    let relations = parse_relations(&files.rel, &concepts, schema).map_err(wrap)?;
    Ok(StandoffDocument {
        doc_id: doc_id.to_string(),
        lines,
        concepts,
        relations,
    }
    .canonicalize())
}

fn coord(c: &Concept) -> String {
    format!("{}:{} {}:{}", c.line, c.start, c.line, c.end)
}

/// Renders the three files in canonical order. Refuses documents that fail
/// validation.
pub fn serialize(
    doc: &StandoffDocument,
    schema: &RelationSchema,
) -> Result<DocumentFiles, CodecError> {
    doc.validate(schema)?;
    let doc = doc.clone().canonicalize();
    let mut files = DocumentFiles::default();
    for line in &doc.lines {
        files.txt.push_str(line);
        files.txt.push('\n');
    }
    for c in &doc.concepts {
        files.con.push_str(&format!(
            "c=\"{}\" {}||t=\"{}\"\n",
            c.text,
            coord(c),
            c.concept_type
        ));
    }
    for r in &doc.relations {
        let (a, b) = (&doc.concepts[r.first], &doc.concepts[r.second]);
        files.rel.push_str(&format!(
            "c=\"{}\" {}||r=\"{}\"||c=\"{}\" {}\n",
            a.text,
            coord(a),
            r.label,
            b.text,
            coord(b)
        ));
    }
    Ok(files)
}

pub fn write_document(
    dir: &Path,
    doc: &StandoffDocument,
    schema: &RelationSchema,
) -> Result<(), CodecError> {
    let files = serialize(doc, schema)?;
    fs::create_dir_all(dir).map_err(|e| CodecError::io(dir, e))?;
    for (ext, body) in [
        ("txt", &files.txt),
        ("con", &files.con),
        ("rel", &files.rel),
    ] {
        let path = dir.join(format!("{}.{ext}", doc.doc_id));
        fs::write(&path, body).map_err(|e| CodecError::io(&path, e))?;
    }
    Ok(())
}

/// Reads every `<id>.txt` in `dir` with its `.con`/`.rel` siblings (missing
/// annotation files count as empty). Documents are returned sorted by id.
pub fn read_corpus_dir(
    dir: &Path,
    schema: &RelationSchema,
) -> Result<Vec<StandoffDocument>, CodecError> {
    let entries = fs::read_dir(dir).map_err(|e| CodecError::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CodecError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let read = |path: &Path, required: bool| -> Result<String, CodecError> {
        match fs::read_to_string(path) {
            Ok(s) => Ok(s),
            Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
            Err(e) => Err(CodecError::io(path, e)),
        }
    };
    ids.iter()
        .map(|id| {
            let files = DocumentFiles {
                txt: read(&dir.join(format!("{id}.txt")), true)?,
                con: read(&dir.join(format!("{id}.con")), false)?,
                rel: read(&dir.join(format!("{id}.rel")), false)?,
            };
            parse_document(id, &files, schema)
        })
        .collect()
}
