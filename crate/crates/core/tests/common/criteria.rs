//! End-to-end checks shared by the acceptance runner and the test suite.
//! Each returns a one-line summary, `Err` on failure.

use std::time::{Duration, Instant};

use clinical_mtl::codec::{
    generate_synthetic_corpus, parse_document, read_corpus_dir, serialize, write_document,
    GrammarConfig, PairFamily, RelationLabel, RelationSchema,
};
use clinical_mtl::corpus::{build_vocabulary, examples_from_corpus, Example};
use clinical_mtl::eval::{evaluate, ner_f1, re_f1, GoldRelations, ReCondition};
use clinical_mtl::model::{
    downsample_negatives, relation_representation, segment_sentence, DownsampleRatios,
    PredictedRelation, RelationCandidate, ZERO_POSITIVE_FLOOR,
};

use clinical_mtl::presets::desk_scale;
use clinical_mtl::tensor::{Graph, ParamStore, Tensor};
use clinical_mtl::text::{EntitySpan, EntityType};
use clinical_mtl::train::{
    batch_losses, epoch_candidates, fit, fit_with, joint_loss, split_train_val, train_step,
    BatchItem, LossWeights, ModelBundle, TrainConfig, ValidationScores,
};
use rand::seq::IndexedRandom;
use rand::Rng;

use super::{
    brute_f1, brute_match, brute_representation, gradient_suite, rng, segment_of,
    synthetic_examples, tiny_model_config, GRAD_TOLERANCE, INSTANCES,
};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradients() -> Outcome {
    let t = Instant::now();
    let rows = gradient_suite();
    let elapsed = t.elapsed();
    let worst = rows
        .iter()
        .max_by(|a, b| a.worst.total_cmp(&b.worst))
        .expect("non-empty suite");
    for r in &rows {
        ensure(r.instances >= INSTANCES && r.worst < GRAD_TOLERANCE, || {
            format!(
                "{}: relative error {:.3e} over {} instances",
                r.name, r.worst, r.instances
            )
        })?;
    }
    ensure(elapsed < Duration::from_secs(60), || {
        format!("suite took {elapsed:?}")
    })?;
    Ok(format!(
        "{} checks × {} instances, worst {:.2e} ({}), {:.2?}",
        rows.len(),
        INSTANCES,
        worst.worst,
        worst.name,
        elapsed
    ))
}

pub fn segment_partition() -> Outcome {
    let mut legal = 0usize;
    let mut illegal = 0usize;
    let mut violations = Vec::new();
    let sp = |s, e, t| EntitySpan::new(s, e, t);
    for n in 0..=10usize {
        // endpoints up to n so out-of-range placements are exercised too
        for s1 in 0..=n {
            for e1 in s1..=n {
                for s2 in 0..=n {
                    for e2 in s2..=n {
                        let a = sp(s1, e1, EntityType::Problem);
                        let b = sp(s2, e2, EntityType::Problem);
                        let is_legal = e1 < s2 && e2 < n;
                        match (segment_sentence(n, &a, &b), is_legal) {
                            (Ok(segs), true) => {
                                legal += 1;
                                let parts = segs.as_array();
                                let tiles = parts[0].start == 0
                                    && parts.windows(2).all(|w| w[0].end == w[1].start)
                                    && parts[4].end == n;
                                let entities =
                                    segs.entity1 == (s1..e1 + 1) && segs.entity2 == (s2..e2 + 1);
                                let membership = (0..n).all(|i| {
                                    parts[segment_of(i, &(s1..e1 + 1), &(s2..e2 + 1))].contains(&i)
                                });
                                if !(tiles && entities && membership) {
                                    violations.push(format!(
                                        "n={n} e1={s1}..={e1} e2={s2}..={e2}: {segs:?}"
                                    ));
                                }
                            }
                            (Err(_), false) => illegal += 1,
                            (r, _) => violations
                                .push(format!("n={n} e1={s1}..={e1} e2={s2}..={e2}: {r:?}")),
                        }
                    }
                }
            }
        }
    }
    ensure(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    Ok(format!(
        "{legal} legal placements tile [0, n), {illegal} illegal rejected, n ≤ 10"
    ))
}

pub fn representation_vs_brute_force() -> Outcome {
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(2..=24);
        let d = r.random_range(1..=8);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.random_range(-5.0..5.0)).collect())
            .collect();
        let (a, b) = super::random_placement(&mut r, n);
        let e1 = EntitySpan::new(a.start, a.end - 1, EntityType::Test);
        let e2 = EntitySpan::new(b.start, b.end - 1, EntityType::Problem);
        let segs = segment_sentence(n, &e1, &e2).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows));
        let rep = relation_representation(&mut g, x, &segs).map_err(|e| e.to_string())?;
        let got = g.value(rep);
        let want = brute_representation(&rows, &a, &b);
        ensure(got.shape() == [1, 5 * d], || {
            format!("shape {:?} for d={d}", got.shape())
        })?;
        for (x, y) in got.data().iter().zip(&want) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max abs diff {worst:.3e}"))?;
    Ok(format!("1000 instances, max abs diff {worst:.1e}"))
}

const NONE_LABELS: [&str; 3] = ["None-PP", "None-TeP", "None-TrP"];
const POSITIVE_LABELS: [&str; 8] = [
    "PIP", "TeRP", "TeCP", "TrIP", "TrWP", "TrCP", "TrAP", "TrNAP",
];

fn random_span<R: Rng + ?Sized>(r: &mut R) -> EntitySpan {
    let s = r.random_range(0..6);
    EntitySpan::new(
        s,
        s + r.random_range(0..2),
        *EntityType::ALL.choose(r).unwrap(),
    )
}

fn random_relation<R: Rng + ?Sized>(r: &mut R, pool: &[EntitySpan]) -> PredictedRelation {
    let label = if r.random_bool(0.2) {
        NONE_LABELS.choose(r).unwrap()
    } else {
        POSITIVE_LABELS.choose(r).unwrap()
    };
    PredictedRelation {
        first: *pool.choose(r).unwrap(),
        second: *pool.choose(r).unwrap(),
        label: RelationLabel::from(*label),
    }
}

/// Perturbed copy: some items dropped, some duplicated, some replaced.
fn perturb<T: Clone>(
    r: &mut impl Rng,
    gold: &[T],
    fresh: &mut dyn FnMut(&mut dyn rand::RngCore) -> T,
) -> Vec<T> {
    let mut out = Vec::new();
    for x in gold {
        match r.random_range(0..10) {
            0 | 1 => {}
            2 => {
                out.push(x.clone());
                out.push(x.clone());
            }
            3 | 4 => out.push(fresh(r)),
            _ => out.push(x.clone()),
        }
    }
    for _ in 0..r.random_range(0..3) {
        out.push(fresh(r));
    }
    out
}

pub fn metrics_vs_brute_force() -> Outcome {
    let schema = RelationSchema::default();
    let mut r = rng(41);
    let trials = 2000;
    for trial in 0..trials {
        let docs = r.random_range(1..=4);
        let mut budget = 20usize;
        let mut gold_ents = Vec::new();
        let mut gold_rels = Vec::new();
        for _ in 0..docs {
            let ents: Vec<EntitySpan> = (0..r.random_range(0..=6))
                .map(|_| random_span(&mut r))
                .collect();
            let k = if ents.is_empty() {
                0
            } else {
                r.random_range(0..=budget.min(8))
            };
            budget -= k;
            let rels: Vec<PredictedRelation> =
                (0..k).map(|_| random_relation(&mut r, &ents)).collect();
            gold_ents.push(ents);
            gold_rels.push(rels);
        }
        let pred_ents: Vec<Vec<EntitySpan>> = gold_ents
            .iter()
            .map(|g| perturb(&mut r, g, &mut |r| random_span(r)))
            .collect();
        let ner = ner_f1(&pred_ents, &gold_ents).map_err(|e| e.to_string())?;
        let (tp, fp, fn_) = brute_match(&pred_ents, &gold_ents);
        ensure(
            (ner.true_positives, ner.false_positives, ner.false_negatives) == (tp, fp, fn_)
                && ner.f1 == brute_f1(tp, fp, fn_),
            || format!("trial {trial}: ner {ner} vs brute ({tp}, {fp}, {fn_})"),
        )?;

        for condition in [ReCondition::GoldEntities, ReCondition::EndToEnd] {
            let pools: Vec<&Vec<EntitySpan>> = match condition {
                ReCondition::GoldEntities => gold_ents.iter().collect(),
                ReCondition::EndToEnd => pred_ents.iter().collect(),
            };
            let pred_rels: Vec<Vec<PredictedRelation>> = gold_rels
                .iter()
                .zip(&pools)
                .map(|(g, pool)| {
                    if pool.is_empty() {
                        return Vec::new();
                    }
                    let (gold_ok, pool) = (g.clone(), pool.to_vec());
                    let mut v = perturb(&mut r, &gold_ok, &mut |r| random_relation(r, &pool));
                    if condition == ReCondition::GoldEntities {
                        v.retain(|x| pool.contains(&x.first) && pool.contains(&x.second));
                    }
                    v
                })
                .collect();
            let gold: Vec<GoldRelations> = gold_ents
                .iter()
                .zip(&gold_rels)
                .map(|(e, rels)| GoldRelations {
                    entities: e.clone(),
                    relations: rels.clone(),
                })
                .collect();
            let got = re_f1(&pred_rels, &gold, condition, &schema).map_err(|e| e.to_string())?;
            let positive = |v: &[Vec<PredictedRelation>]| -> Vec<Vec<PredictedRelation>> {
                v.iter()
                    .map(|d| {
                        d.iter()
                            .filter(|x| !NONE_LABELS.contains(&x.label.as_str()))
                            .cloned()
                            .collect()
                    })
                    .collect()
            };
            let (tp, fp, fn_) = brute_match(&positive(&pred_rels), &positive(&gold_rels));
            ensure(
                (got.true_positives, got.false_positives, got.false_negatives) == (tp, fp, fn_)
                    && got.f1 == brute_f1(tp, fp, fn_),
                || {
                    format!(
                        "trial {trial} {}: {got} vs brute ({tp}, {fp}, {fn_})",
                        condition.as_str()
                    )
                },
            )?;
        }
    }
    Ok(format!(
        "{trials} random corpora (≤ 20 gold relations), NER and RE under both conditions"
    ))
}

pub fn codec_round_trip() -> Outcome {
    let schema = RelationSchema::default();
    let docs = generate_synthetic_corpus(2024, 100, &GrammarConfig::default());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut diffs = 0;
    for d in &docs {
        let files = serialize(d, &schema).map_err(|e| e.to_string())?;
        let back = parse_document(&d.doc_id, &files, &schema).map_err(|e| e.to_string())?;
        let again = serialize(&back, &schema).map_err(|e| e.to_string())?;
        diffs += usize::from(&back != d) + usize::from(again != files);
        write_document(dir.path(), d, &schema).map_err(|e| e.to_string())?;
    }
    let read = read_corpus_dir(dir.path(), &schema).map_err(|e| e.to_string())?;
    diffs += usize::from(read != docs);
    let relations: usize = docs.iter().map(|d| d.relations.len()).sum();
    ensure(diffs == 0, || format!("{diffs} diffs"))?;
    Ok(format!(
        "100 documents ({relations} relations) through memory and disk, 0 diffs"
    ))
}

fn family_counts(
    cands: &[RelationCandidate],
    schema: &RelationSchema,
    f: PairFamily,
) -> (usize, usize) {
    let fam: Vec<&RelationCandidate> = cands.iter().filter(|c| c.family == f).collect();
    let pos = fam
        .iter()
        .filter(|c| c.label.as_ref().is_some_and(|l| !schema.is_none(l)))
        .count();
    (pos, fam.len() - pos)
}

pub fn downsampling() -> Outcome {
    let schema = RelationSchema::default();
    let ratios = DownsampleRatios {
        pp: 4.0,
        tep: 2.0,
        trp: 1.0,
    };
    let (_, examples) = synthetic_examples(77, 60);
    let all: Vec<RelationCandidate> = examples.iter().flat_map(|e| e.candidates.clone()).collect();
    let mut zero_positive_families = 0;
    for i in 0..1000u64 {
        let mut r = rng(i);
        // alternate between the training path and a random subset, which
        // also produces families without positives
        let kept: Vec<RelationCandidate> = if i % 2 == 0 {
            epoch_candidates(&examples, &schema, &ratios, &mut r).concat()
        } else {
            let pool: Vec<RelationCandidate> = all
                .iter()
                .filter(|_| r.random_bool(0.05))
                .cloned()
                .collect();
            let idx = downsample_negatives(&pool, &schema, &ratios, &mut r);
            ensure(idx.windows(2).all(|w| w[0] < w[1]), || {
                format!("resample {i}: unsorted indices")
            })?;
            let kept: Vec<RelationCandidate> = idx.iter().map(|&k| pool[k].clone()).collect();
            for f in PairFamily::ALL {
                let (pos, neg) = family_counts(&pool, &schema, f);
                let (kpos, kneg) = family_counts(&kept, &schema, f);
                ensure(kpos == pos, || {
                    format!("resample {i}: {f} positive dropped")
                })?;
                let cap = if pos == 0 {
                    zero_positive_families += 1;
                    ZERO_POSITIVE_FLOOR
                } else {
                    (ratios.get(f) * pos as f64).floor() as usize
                };
                ensure(kneg == cap.min(neg), || {
                    format!("resample {i}: {f} kept {kneg} of {neg} negatives, cap {cap}")
                })?;
            }
            continue;
        };
        for f in PairFamily::ALL {
            let (pos, _) = family_counts(&all, &schema, f);
            let (kpos, kneg) = family_counts(&kept, &schema, f);
            ensure(kpos == pos, || {
                format!("resample {i}: {f} kept {kpos} of {pos} positives")
            })?;
            ensure(kneg as f64 <= ratios.get(f) * pos as f64, || {
                format!("resample {i}: {f} kept {kneg} negatives for {pos} positives")
            })?;
        }
    }
    Ok(format!(
        "1000 resamples, all positives kept, negatives within ratio × positives; \
         {zero_positive_families} positive-free families held to the floor of {ZERO_POSITIVE_FLOOR}"
    ))
}

fn overfit_run() -> Result<Vec<f64>, String> {
    let (vocab, examples) = synthetic_examples(5, 4);
    let (model, train) = desk_scale();
    let mut bundle = ModelBundle::new(model, train, vocab, RelationSchema::default())
        .map_err(|e| e.to_string())?;
    let batch: Vec<BatchItem<'_>> = examples
        .iter()
        .take(8)
        .map(|e| BatchItem {
            example: e,
            candidates: &e.candidates,
        })
        .collect();
    let mut losses = Vec::new();
    for _ in 0..300 {
        let m = train_step(&mut bundle, &batch, None).map_err(|e| e.to_string())?;
        losses.push(m.joint_loss);
        if m.joint_loss < 0.05 {
            break;
        }
    }
    Ok(losses)
}

pub fn overfit() -> Outcome {
    let a = overfit_run()?;
    let b = overfit_run()?;
    ensure(a == b, || "two runs diverged".into())?;
    let last = *a.last().expect("at least one step");
    ensure(last < 0.05, || {
        format!("joint loss {last:.4} after 300 steps")
    })?;
    Ok(format!(
        "joint loss {:.3} → {last:.3e} in {} steps, bit-identical rerun",
        a[0],
        a.len()
    ))
}

pub fn synthetic_run() -> Outcome {
    let t = Instant::now();
    let schema = RelationSchema::default();
    let grammar = GrammarConfig::default();
    let docs = generate_synthetic_corpus(1, 500, &grammar);
    let test_docs = generate_synthetic_corpus(2, 100, &grammar);
    let (model, train) = desk_scale();
    let max_len = model.encoder.max_sequence_length;
    let (train_docs, val_docs) =
        split_train_val(&docs, train.train_fraction, train.seed).map_err(|e| e.to_string())?;
    let vocab = build_vocabulary(&train_docs, 2, true);
    let to_examples =
        |d| examples_from_corpus(d, &vocab, &schema, max_len).map_err(|e| e.to_string());
    let (train_ex, val_ex, test_ex) = (
        to_examples(&train_docs)?,
        to_examples(&val_docs)?,
        to_examples(&test_docs)?,
    );
    let bundle =
        ModelBundle::new(model, train, vocab.clone(), schema).map_err(|e| e.to_string())?;
    let outcome = fit(bundle, &train_ex, &val_ex).map_err(|e| e.to_string())?;
    let report =
        evaluate(&outcome.best.model, &outcome.best.store, &test_ex).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let summary = format!(
        "test NER {:.4}, RE gold {:.4}, end-to-end {:.4}; best epoch {} of {}, {:.1?}",
        report.ner.f1,
        report.re_gold.f1,
        report.re_end2end.f1,
        outcome.best.epoch,
        outcome.history.len(),
        elapsed
    );
    ensure(
        report.ner.f1 >= 0.95
            && report.re_gold.f1 >= 0.90
            && report.re_end2end.f1 >= 0.85
            && report.re_end2end.f1 <= report.re_gold.f1
            && elapsed <= Duration::from_secs(15 * 60),
        || summary.clone(),
    )?;
    Ok(summary)
}

/// A small bundle and batch for wiring checks.
fn tiny_bundle(seed: u64) -> (ModelBundle, Vec<Example>) {
    let (vocab, examples) = synthetic_examples(seed, 3);
    let train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let bundle =
        ModelBundle::new(tiny_model_config(), train, vocab, RelationSchema::default()).unwrap();
    (bundle, examples)
}

pub fn mtl_wiring() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..10 {
        let (bundle, examples) = tiny_bundle(seed);
        let batch: Vec<BatchItem<'_>> = examples
            .iter()
            .take(4)
            .map(|e| BatchItem {
                example: e,
                candidates: &e.candidates,
            })
            .collect();
        let mut g = Graph::new();
        let l = batch_losses(&bundle.model, &bundle.store, &mut g, &batch, None)
            .map_err(|e| e.to_string())?;
        let joint =
            joint_loss(&mut g, l.ner, l.re, LossWeights::default()).map_err(|e| e.to_string())?;
        let mut summed: ParamStore = bundle.store.clone();
        let mut separate: ParamStore = bundle.store.clone();
        let mut re_only: ParamStore = bundle.store.clone();
        g.backward_into(joint, &mut summed)
            .map_err(|e| e.to_string())?;
        g.backward_into(l.ner, &mut separate)
            .map_err(|e| e.to_string())?;
        g.backward_into(l.re, &mut separate)
            .map_err(|e| e.to_string())?;
        g.backward_into(l.re, &mut re_only)
            .map_err(|e| e.to_string())?;
        for ((_, a), ((_, b), (_, r))) in summed.iter().zip(separate.iter().zip(re_only.iter())) {
            if !a.name.starts_with("encoder/") {
                continue;
            }
            let (ga, gb) = (a.grad.as_ref().unwrap(), b.grad.as_ref().unwrap());
            worst = worst.max(ga.max_abs_diff(gb));
            ensure(r.grad.as_ref().is_some_and(|t| t.norm() > 0.0), || {
                format!("{}: no gradient from the relation loss", a.name)
            })?;
            checked += 1;
        }
    }
    ensure(worst <= 1e-10, || format!("max abs diff {worst:.3e}"))?;
    Ok(format!(
        "{checked} encoder tensors over 10 batches, max abs diff {worst:.1e}"
    ))
}

pub fn early_stopping() -> Outcome {
    let (mut bundle, examples) = tiny_bundle(9);
    bundle.train.early_stop_patience = 10;
    bundle.train.max_epochs = 100;
    let mut calls = 0;
    let outcome = fit_with(bundle, &examples, |_| {
        calls += 1;
        let s = if calls == 1 {
            0.5
        } else {
            0.5 - 0.01 * calls as f64
        };
        Ok(ValidationScores {
            ner_f1: s,
            re_f1_gold: s,
            re_f1_end2end: s,
        })
    })
    .map_err(|e| e.to_string())?;
    let epochs = outcome.history.len();
    ensure(
        epochs == 11 && outcome.stopped_early && outcome.best.epoch == 1,
        || format!("ran {epochs} epochs, best epoch {}", outcome.best.epoch),
    )?;
    Ok(format!(
        "stopped after {epochs} epochs, best epoch {}",
        outcome.best.epoch
    ))
}
