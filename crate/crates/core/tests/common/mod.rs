//! Independent oracles shared by the integration tests and the acceptance
//! runner: central differences, brute-force segmentation, pooling and
//! matching, and small synthetic fixtures.

#![allow(dead_code)]

pub mod criteria;

use std::collections::HashMap;
use std::ops::Range;

use clinical_mtl::codec::{generate_synthetic_corpus, GrammarConfig, RelationSchema};
use clinical_mtl::corpus::{build_vocabulary, examples_from_corpus, Example};
use clinical_mtl::model::{
    Encoder, EncoderConfig, JointModel, ModelConfig, NerConfig, NerHead, PositionEncoding,
    ReConfig, ReHead, RnnCell,
};
use clinical_mtl::tensor::{Activation, Graph, ParamStore, Tensor, Var};
use clinical_mtl::text::{EntitySpan, Vocabulary};
use clinical_mtl::train::{batch_losses, joint_loss, BatchItem, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in ±[0.1, 1], away from the ReLU kink.
pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both are
/// essentially zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Graph builder for an op under test: takes the input vars, returns the
/// op's output.
pub type OpBuilder<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Scalar probe `Σ out ⊙ w` with a fixed random `w`, so every output entry
/// contributes with a distinct weight.
fn probe_loss(
    inputs: &[Tensor],
    build: &OpBuilder<'_>,
    weights: &mut Option<Tensor>,
    seed: u64,
) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let w = weights
        .get_or_insert_with(|| random_tensor(&mut rng(seed), shape[0], shape[1]))
        .clone();
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    (g, vars, loss)
}

/// Worst relative error between backprop and central differences over all
/// inputs of one op instance.
pub fn check_op(inputs: &[Tensor], build: &OpBuilder<'_>, seed: u64) -> f64 {
    let mut weights = None;
    let (g, vars, loss) = probe_loss(inputs, build, &mut weights, seed);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut eval = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                perturbed[i].data_mut()[k] += delta;
                let (g, _, loss) = probe_loss(&perturbed, build, &mut weights, seed);
                g.value(loss).item()
            };
            *slot = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Worst relative error for a loss over model parameters, on `coords`
/// randomly sampled parameter entries.
pub fn check_params(
    store: &mut ParamStore,
    loss: &dyn Fn(&ParamStore) -> (Graph, Var),
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    store.clear_grads();
    let (g, l) = loss(store);
    g.backward_into(l, store).unwrap();
    let entries: Vec<(clinical_mtl::tensor::ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |k| (id, k)))
        .collect();
    let mut analytic = Vec::with_capacity(coords);
    let mut numeric = Vec::with_capacity(coords);
    for _ in 0..coords {
        let (id, k) = entries[rng.random_range(0..entries.len())];
        analytic.push(store.get(id).grad.as_ref().map_or(0.0, |t| t.data()[k]));
        let base = store.get(id).value.data()[k];
        let mut eval = |x: f64| {
            store.get_mut(id).value.data_mut()[k] = x;
            let (g, l) = loss(store);
            g.value(l).item()
        };
        let plus = eval(base + FD_STEP);
        let minus = eval(base - FD_STEP);
        store.get_mut(id).value.data_mut()[k] = base;
        numeric.push((plus - minus) / (2.0 * FD_STEP));
    }
    relative_error(&analytic, &numeric)
}

#[derive(Debug, Clone)]
pub struct GradRow {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=5))
}

type Case = (&'static str, fn(&mut ChaCha8Rng, u64) -> f64);

fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", |r, s| {
            let (m, k) = dims(r);
            let n = r.random_range(1..=4);
            check_op(
                &[random_tensor(r, m, k), random_tensor(r, k, n)],
                &|g, v| g.matmul(v[0], v[1]).unwrap(),
                s,
            )
        }),
        ("add", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n), random_tensor(r, m, n)],
                &|g, v| g.add(v[0], v[1]).unwrap(),
                s,
            )
        }),
        ("sub", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n), random_tensor(r, m, n)],
                &|g, v| g.sub(v[0], v[1]).unwrap(),
                s,
            )
        }),
        ("mul", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n), random_tensor(r, m, n)],
                &|g, v| g.mul(v[0], v[1]).unwrap(),
                s,
            )
        }),
        ("add_row", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n), random_tensor(r, 1, n)],
                &|g, v| g.add_row(v[0], v[1]).unwrap(),
                s,
            )
        }),
        ("mul_row", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n), random_tensor(r, 1, n)],
                &|g, v| g.mul_row(v[0], v[1]).unwrap(),
                s,
            )
        }),
        ("scale", |r, s| {
            let (m, n) = dims(r);
            let k = r.random_range(-2.0..2.0);
            check_op(&[random_tensor(r, m, n)], &|g, v| g.scale(v[0], k), s)
        }),
        ("tanh", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n)],
                &|g, v| g.activation(Activation::Tanh, v[0]).unwrap(),
                s,
            )
        }),
        ("relu", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n)],
                &|g, v| g.activation(Activation::Relu, v[0]).unwrap(),
                s,
            )
        }),
        ("sigmoid", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n)],
                &|g, v| g.activation(Activation::Sigmoid, v[0]).unwrap(),
                s,
            )
        }),
        ("softmax_rows", |r, s| {
            let (m, n) = dims(r);
            let x = random_tensor(r, m, n).scale(3.0);
            check_op(
                &[x],
                &|g, v| g.activation(Activation::SoftmaxRows, v[0]).unwrap(),
                s,
            )
        }),
        ("layer_norm_rows", |r, s| {
            let m = r.random_range(1..=4);
            let n = r.random_range(2..=6);
            check_op(
                &[random_tensor(r, m, n)],
                &|g, v| g.layer_norm_rows(v[0], 1e-5).unwrap(),
                s,
            )
        }),
        ("gather_rows", |r, s| {
            let (m, n) = dims(r);
            let ids: Vec<usize> = (0..r.random_range(1..=6))
                .map(|_| r.random_range(0..m))
                .collect();
            check_op(
                &[random_tensor(r, m, n)],
                &move |g, v| g.gather_rows(v[0], &ids).unwrap(),
                s,
            )
        }),
        ("transpose", |r, s| {
            let (m, n) = dims(r);
            check_op(
                &[random_tensor(r, m, n)],
                &|g, v| g.transpose(v[0]).unwrap(),
                s,
            )
        }),
        ("slice_cols", |r, s| {
            let (m, n) = dims(r);
            let a = r.random_range(0..n);
            let b = r.random_range(a + 1..=n);
            check_op(
                &[random_tensor(r, m, n)],
                &move |g, v| g.slice_cols(v[0], a..b).unwrap(),
                s,
            )
        }),
        ("slice_rows", |r, s| {
            let (m, n) = dims(r);
            let a = r.random_range(0..m);
            let b = r.random_range(a + 1..=m);
            check_op(
                &[random_tensor(r, m, n)],
                &move |g, v| g.slice_rows(v[0], a..b).unwrap(),
                s,
            )
        }),
        ("concat_cols", |r, s| {
            let m = r.random_range(1..=4);
            let parts: Vec<Tensor> = (0..r.random_range(1..=4))
                .map(|_| {
                    let c = r.random_range(1..=3);
                    random_tensor(r, m, c)
                })
                .collect();
            check_op(&parts, &|g, v| g.concat_cols(v).unwrap(), s)
        }),
        ("concat_rows", |r, s| {
            let n = r.random_range(1..=4);
            let parts: Vec<Tensor> = (0..r.random_range(1..=4))
                .map(|_| {
                    let m = r.random_range(1..=3);
                    random_tensor(r, m, n)
                })
                .collect();
            check_op(&parts, &|g, v| g.concat_rows(v).unwrap(), s)
        }),
        ("mean_rows", |r, s| {
            let (m, n) = dims(r);
            let a = r.random_range(0..=m);
            let b = r.random_range(a..=m);
            check_op(
                &[random_tensor(r, m, n)],
                &move |g, v| g.mean_rows(v[0], a..b).unwrap(),
                s,
            )
        }),
        ("cross_entropy", |r, s| {
            let m = r.random_range(1..=4);
            let n = r.random_range(2..=5);
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            let x = random_tensor(r, m, n).scale(2.0);
            check_op(
                &[x],
                &move |g, v| g.cross_entropy(v[0], &targets).unwrap(),
                s,
            )
        }),
        ("sum", |r, s| {
            let (m, n) = dims(r);
            check_op(&[random_tensor(r, m, n)], &|g, v| g.sum(v[0]), s)
        }),
    ]
}

fn tiny_encoder(position_encoding: PositionEncoding) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        model_dim: 6,
        feedforward_dim: 8,
        max_sequence_length: 8,
        dropout_rate: 0.0,
        position_encoding,
    }
}

fn encoder_case(position_encoding: PositionEncoding, r: &mut ChaCha8Rng, s: u64) -> f64 {
    let cfg = tiny_encoder(position_encoding);
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, 10, &mut store, &mut rng(s)).unwrap();
    let ids: Vec<usize> = (0..r.random_range(1..=6))
        .map(|_| r.random_range(0..10))
        .collect();
    let n = ids.len();
    let w = random_tensor(r, n, 6);
    check_params(
        &mut store,
        &|st| {
            let mut g = Graph::new();
            let out = enc.encode(&mut g, st, &ids, None).unwrap();
            let w = g.constant(w.clone());
            let p = g.mul(out, w).unwrap();
            let l = g.sum(p);
            (g, l)
        },
        30,
        r,
    )
}

fn birnn_case(cell: RnnCell, r: &mut ChaCha8Rng, s: u64) -> f64 {
    let cfg = NerConfig {
        rnn_layers: 2,
        rnn_hidden_dim: 3,
        ffnn_hidden_dim: 4,
        cell,
    };
    let mut store = ParamStore::new();
    let head = NerHead::new(cfg, 4, &mut store, &mut rng(s)).unwrap();
    let n = r.random_range(1..=5);
    let x = random_tensor(r, n, 4);
    let w = random_tensor(r, n, 6);
    let param_err = check_params(
        &mut store,
        &|st| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let h = head.birnn_forward(&mut g, st, xv).unwrap();
            let w = g.constant(w.clone());
            let p = g.mul(h, w).unwrap();
            let l = g.sum(p);
            (g, l)
        },
        30,
        r,
    );
    let input_err = check_op(
        std::slice::from_ref(&x),
        &|g, v| head.birnn_forward(g, &store, v[0]).unwrap(),
        s,
    );
    param_err.max(input_err)
}

fn ner_head_case(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let cfg = NerConfig {
        rnn_layers: 1,
        rnn_hidden_dim: 3,
        ffnn_hidden_dim: 5,
        cell: RnnCell::Elman,
    };
    let mut store = ParamStore::new();
    let head = NerHead::new(cfg, 4, &mut store, &mut rng(s)).unwrap();
    let n = r.random_range(1..=5);
    let x = random_tensor(r, n, 4);
    let tags: Vec<usize> = (0..n).map(|_| r.random_range(0..7)).collect();
    check_params(
        &mut store,
        &|st| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let h = head.birnn_forward(&mut g, st, xv).unwrap();
            let logits = head.classify_tokens(&mut g, st, h).unwrap();
            let l = g.cross_entropy(logits, &tags).unwrap();
            (g, l)
        },
        30,
        r,
    )
}

/// Random legal `(e1, e2)` placement in a sentence of `n ≥ 2` tokens.
pub fn random_placement(r: &mut ChaCha8Rng, n: usize) -> (Range<usize>, Range<usize>) {
    loop {
        let s1 = r.random_range(0..n);
        let e1 = r.random_range(s1..n);
        if e1 + 1 >= n {
            continue;
        }
        let s2 = r.random_range(e1 + 1..n);
        let e2 = r.random_range(s2..n);
        return (s1..e1 + 1, s2..e2 + 1);
    }
}

fn re_head_case(r: &mut ChaCha8Rng, s: u64) -> f64 {
    use clinical_mtl::codec::PairFamily;
    use clinical_mtl::model::{relation_representation, segment_sentence};
    use clinical_mtl::text::EntityType;
    let schema = RelationSchema::default();
    let d = 3;
    let mut store = ParamStore::new();
    let cfg = ReConfig {
        hidden_dim: 4,
        ..ReConfig::default()
    };
    let head = ReHead::new(&cfg, d, &schema, &mut store, &mut rng(s)).unwrap();
    let n = r.random_range(2..=7);
    let emb = random_tensor(r, n, d);
    let (a, b) = random_placement(r, n);
    let e1 = EntitySpan::new(a.start, a.end - 1, EntityType::Treatment);
    let e2 = EntitySpan::new(b.start, b.end - 1, EntityType::Problem);
    let segs = segment_sentence(n, &e1, &e2).unwrap();
    let target = r.random_range(0..schema.num_classes(PairFamily::TrP));
    let build = |g: &mut Graph, st: &ParamStore, x: Var| {
        let rep = relation_representation(g, x, &segs).unwrap();
        let logits = head.classify_relation(g, st, rep, PairFamily::TrP).unwrap();
        g.cross_entropy(logits, &[target]).unwrap()
    };
    let param_err = check_params(
        &mut store,
        &|st| {
            let mut g = Graph::new();
            let x = g.constant(emb.clone());
            let l = build(&mut g, st, x);
            (g, l)
        },
        30,
        r,
    );
    let rep_err = check_op(
        std::slice::from_ref(&emb),
        &|g, v| relation_representation(g, v[0], &segs).unwrap(),
        s,
    );
    let input_err = check_op(
        std::slice::from_ref(&emb),
        &|g, v| build(g, &store, v[0]),
        s,
    );
    param_err.max(rep_err).max(input_err)
}

fn joint_case(r: &mut ChaCha8Rng, s: u64) -> f64 {
    let (vocab, examples) = synthetic_examples(s, 2);
    let cfg = tiny_model_config();
    let mut store = ParamStore::new();
    let model =
        JointModel::new(cfg, vocab.len(), RelationSchema::default(), &mut store, s).unwrap();
    let picked: Vec<&Example> = (0..2)
        .map(|_| &examples[r.random_range(0..examples.len())])
        .collect();
    check_params(
        &mut store,
        &|st| {
            let mut g = Graph::new();
            let batch: Vec<BatchItem<'_>> = picked
                .iter()
                .map(|e| BatchItem {
                    example: e,
                    candidates: &e.candidates,
                })
                .collect();
            let l = batch_losses(&model, st, &mut g, &batch, None).unwrap();
            let j = joint_loss(&mut g, l.ner, l.re, LossWeights::default()).unwrap();
            (g, j)
        },
        40,
        r,
    )
}

fn composite_cases() -> Vec<Case> {
    vec![
        ("encoder (learned positions)", |r, s| {
            encoder_case(PositionEncoding::Learned, r, s)
        }),
        ("encoder (sinusoidal positions)", |r, s| {
            encoder_case(PositionEncoding::Sinusoidal, r, s)
        }),
        ("birnn (elman)", |r, s| birnn_case(RnnCell::Elman, r, s)),
        ("birnn (gru)", |r, s| birnn_case(RnnCell::Gru, r, s)),
        ("ner head + cross entropy", ner_head_case),
        ("relation representation + re head", re_head_case),
        ("joint loss", joint_case),
    ]
}

/// Every differentiable op and every model component, `INSTANCES` random
/// instances each.
pub fn gradient_suite() -> Vec<GradRow> {
    op_cases()
        .into_iter()
        .chain(composite_cases())
        .enumerate()
        .map(|(ci, (name, case))| {
            let mut worst: f64 = 0.0;
            for i in 0..INSTANCES {
                let seed = (ci * 1000 + i) as u64;
                worst = worst.max(case(&mut rng(seed), seed));
            }
            GradRow {
                name,
                instances: INSTANCES,
                worst,
            }
        })
        .collect()
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 4,
            feedforward_dim: 6,
            max_sequence_length: 32,
            dropout_rate: 0.0,
            position_encoding: PositionEncoding::Learned,
        },
        ner: NerConfig {
            rnn_layers: 1,
            rnn_hidden_dim: 3,
            ffnn_hidden_dim: 4,
            cell: RnnCell::Elman,
        },
        re: ReConfig {
            hidden_dim: 4,
            ..ReConfig::default()
        },
    }
}

/// Synthetic documents turned into examples with a vocabulary built from
/// them.
pub fn synthetic_examples(seed: u64, documents: usize) -> (Vocabulary, Vec<Example>) {
    let docs = generate_synthetic_corpus(seed, documents, &GrammarConfig::default());
    let vocab = build_vocabulary(&docs, 1, true);
    let examples = examples_from_corpus(&docs, &vocab, &RelationSchema::default(), 128).unwrap();
    (vocab, examples)
}

/// Segment of token `i` for entities at `e1` and `e2`:
/// 0 before, 1 first entity, 2 between, 3 second entity, 4 after.
pub fn segment_of(i: usize, e1: &Range<usize>, e2: &Range<usize>) -> usize {
    if i < e1.start {
        0
    } else if i < e1.end {
        1
    } else if i < e2.start {
        2
    } else if i < e2.end {
        3
    } else {
        4
    }
}

/// Five pooled segments concatenated, by per-token classification.
pub fn brute_representation(rows: &[Vec<f64>], e1: &Range<usize>, e2: &Range<usize>) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; 5];
    let mut counts = [0usize; 5];
    for (i, row) in rows.iter().enumerate() {
        let s = segment_of(i, e1, e2);
        counts[s] += 1;
        for (a, b) in sums[s].iter_mut().zip(row) {
            *a += b;
        }
    }
    sums.into_iter()
        .zip(counts)
        .flat_map(|(v, c)| {
            v.into_iter()
                .map(move |x| if c == 0 { 0.0 } else { x / c as f64 })
        })
        .collect()
}

/// Greedy one-to-one matching by linear scan with used flags.
pub fn brute_match<K: PartialEq>(pred: &[Vec<K>], gold: &[Vec<K>]) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let mut used = vec![false; g.len()];
        for x in p {
            match (0..g.len()).find(|&j| !used[j] && g[j] == *x) {
                Some(j) => {
                    used[j] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
        fn_ += used.iter().filter(|u| !**u).count();
    }
    (tp, fp, fn_)
}

pub fn brute_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Count of items per key, for comparing multisets.
pub fn histogram<K: std::hash::Hash + Eq + Clone>(items: &[K]) -> HashMap<K, usize> {
    let mut h = HashMap::new();
    for k in items {
        *h.entry(k.clone()).or_default() += 1;
    }
    h
}
