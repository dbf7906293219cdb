//! Joint training: batching, summed loss, Adam, early stopping and
//! checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{PairFamily, RelationSchema};
use crate::corpus::Example;
use crate::eval::{evaluate, EvalError};
use crate::model::{downsample_negatives, JointModel, ModelConfig, ModelError, RelationCandidate};
use crate::tensor::{
    adam_step, read_container, write_container, AdamConfig, AdamState, Container, Graph,
    ParamStore, Tensor, TensorError, Var,
};
use crate::text::Vocabulary;

const BUNDLE_FORMAT: &str = "clinical-mtl-bundle";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss (ner {ner}, re {re})")]
    NonFiniteLoss { ner: f64, re: f64 },
    #[error("non-finite loss in batch containing sentence {sentence} (ner {ner}, re {re})")]
    NonFinite { sentence: String, ner: f64, re: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ner: f64,
    pub re: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ner: 1.0, re: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    /// When false the encoder is frozen and only the heads learn.
    pub train_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-5,
            early_stop_patience: 10,
            max_epochs: 200,
            train_fraction: 0.8,
            seed: 0,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            train_encoder: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.loss_weights.ner.is_finite() && self.loss_weights.re.is_finite()) {
            return bad("loss weights must be finite");
        }
        Ok(())
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: JointModel,
    pub store: ParamStore,
    pub adam: AdamState,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    /// Epochs completed.
    pub epoch: usize,
    pub best_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    format: String,
    version: u32,
    model: ModelConfig,
    schema: RelationSchema,
    train: TrainConfig,
    lowercase: bool,
    vocabulary: Vec<String>,
    epoch: usize,
    best_score: Option<f64>,
    adam_steps: u64,
}

impl ModelBundle {
    /// Fresh parameters drawn from `train.seed`.
    pub fn new(
        model: ModelConfig,
        train: TrainConfig,
        vocab: Vocabulary,
        schema: RelationSchema,
    ) -> Result<Self, TrainError> {
        train.validate()?;
        let mut store = ParamStore::new();
        let model = JointModel::new(model, vocab.len(), schema, &mut store, train.seed)?;
        store.set_trainable_prefix("encoder/", train.train_encoder);
        let adam = AdamState::new(&store, train.adam);
        Ok(ModelBundle {
            model,
            store,
            adam,
            train,
            vocab,
            epoch: 0,
            best_score: None,
        })
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.model.schema
    }

    fn to_container(&self) -> Result<Container, TrainError> {
        let meta = BundleMeta {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            model: self.model.config.clone(),
            schema: self.model.schema.clone(),
            train: self.train.clone(),
            lowercase: self.vocab.lowercase(),
            vocabulary: self.vocab.words().to_vec(),
            epoch: self.epoch,
            best_score: self.best_score,
            adam_steps: self.adam.step_count,
        };
        let meta =
            serde_json::to_string(&meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::with_capacity(3 * self.store.len());
        for (id, p) in self.store.iter() {
            tensors.push((format!("param/{}", p.name), p.value.clone()));
            tensors.push((
                format!("adam/m/{}", p.name),
                self.adam.first_moment[id.index()].clone(),
            ));
            tensors.push((
                format!("adam/v/{}", p.name),
                self.adam.second_moment[id.index()].clone(),
            ));
        }
        Ok(Container { meta, tensors })
    }

    fn from_container(c: &Container) -> Result<Self, TrainError> {
        let meta: BundleMeta = serde_json::from_str(&c.meta)
            .map_err(|e| TrainError::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.format != BUNDLE_FORMAT || meta.version != BUNDLE_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported bundle {} v{} (expected {BUNDLE_FORMAT} v{BUNDLE_VERSION})",
                meta.format, meta.version
            )));
        }
        let vocab = Vocabulary::read(meta.vocabulary.join("\n").as_bytes(), meta.lowercase)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut bundle = ModelBundle::new(meta.model, meta.train, vocab, meta.schema)?;
        let params = c
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("param/").map(|n| (n, t)));
        bundle.store.load_values(params)?;
        for (id, p) in bundle.store.iter() {
            let get = |kind: &str| {
                c.get(&format!("adam/{kind}/{}", p.name))
                    .filter(|t| t.shape() == p.value.shape())
                    .cloned()
                    .ok_or_else(|| {
                        TrainError::Checkpoint(format!("optimizer state for `{}` missing", p.name))
                    })
            };
            bundle.adam.first_moment[id.index()] = get("m")?;
            bundle.adam.second_moment[id.index()] = get("v")?;
        }
        bundle.adam.step_count = meta.adam_steps;
        bundle.epoch = meta.epoch;
        bundle.best_score = meta.best_score;
        Ok(bundle)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), TrainError> {
        write_container(w, &self.to_container()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, TrainError> {
        Self::from_container(&read_container(r)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = File::create(path).map_err(io)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let f = File::open(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(BufReader::new(f))
    }
}

/// Deterministic shuffled split at item granularity.
pub fn split_train_val<T: Clone>(
    items: &[T],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), TrainError> {
    if items.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 documents to split, got {}",
            items.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Config(
            "train_fraction must lie strictly between 0 and 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fraction * items.len() as f64).round() as usize).clamp(1, items.len() - 1);
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// `w_ner·ner + w_re·re`, refusing non-finite inputs.
pub fn joint_loss(
    g: &mut Graph,
    ner: Var,
    re: Var,
    weights: LossWeights,
) -> Result<Var, TrainError> {
    let (nv, rv) = (g.value(ner).item(), g.value(re).item());
    if !(nv.is_finite() && rv.is_finite()) {
        return Err(TrainError::NonFiniteLoss { ner: nv, re: rv });
    }
    let a = g.scale(ner, weights.ner);
    let b = g.scale(re, weights.re);
    Ok(g.add(a, b)?)
}

/// One sentence plus the relation candidates it trains on this epoch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub example: &'a Example,
    pub candidates: &'a [RelationCandidate],
}

/// Per-task loss nodes for a batch.
pub struct BatchLosses {
    pub ner: Var,
    pub re: Var,
    pub relation_count: usize,
}

/// Builds the forward graph for a batch. NER loss is the mean token cross
/// entropy over the batch; RE loss is `Σ_f (n_f/N)·CE_f` over pair
/// families, i.e. the mean over all candidates, and 0 without candidates.
pub fn batch_losses(
    model: &JointModel,
    store: &ParamStore,
    g: &mut Graph,
    batch: &[BatchItem<'_>],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLosses, TrainError> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut encoded = Vec::with_capacity(batch.len());
    for item in batch {
        let fwd = model.forward_sentence(
            g,
            store,
            &item.example.sentence.token_ids,
            rng.as_deref_mut(),
        )?;
        logits.push(fwd.ner_logits);
        targets.extend(item.example.tag_indices());
        encoded.push(fwd.encoded);
    }
    if logits.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let all = g.concat_rows(&logits)?;
    let ner = g.cross_entropy(all, &targets)?;

    let total: usize = batch.iter().map(|b| b.candidates.len()).sum();
    let mut re = g.constant(Tensor::scalar(0.0));
    for family in PairFamily::ALL {
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for (item, &enc) in batch.iter().zip(&encoded) {
            for c in item.candidates.iter().filter(|c| c.family == family) {
                let label = c
                    .label
                    .as_ref()
                    .and_then(|l| model.schema.class_index(family, l))
                    .ok_or_else(|| {
                        TrainError::Config(format!(
                            "candidate in {} lacks a valid label",
                            item.example.id()
                        ))
                    })?;
                items.push((enc, c));
                labels.push(label);
            }
        }
        if items.is_empty() {
            continue;
        }
        let lg = model.relation_logits(g, store, family, &items)?;
        let ce = g.cross_entropy(lg, &labels)?;
        let weighted = g.scale(ce, items.len() as f64 / total as f64);
        re = g.add(re, weighted)?;
    }
    Ok(BatchLosses {
        ner,
        re,
        relation_count: total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub ner_loss: f64,
    pub re_loss: f64,
    pub joint_loss: f64,
    pub grad_norm: f64,
}

/// One forward, one backward on the joint loss, one Adam update. Dropout is
/// active when `rng` is given.
pub fn train_step(
    bundle: &mut ModelBundle,
    batch: &[BatchItem<'_>],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StepMetrics, TrainError> {
    let mut g = Graph::new();
    let losses = batch_losses(&bundle.model, &bundle.store, &mut g, batch, rng)?;
    let joint = joint_loss(&mut g, losses.ner, losses.re, bundle.train.loss_weights).map_err(
        |e| match e {
            TrainError::NonFiniteLoss { ner, re } => TrainError::NonFinite {
                sentence: batch.first().map(|b| b.example.id()).unwrap_or_default(),
                ner,
                re,
            },
            other => other,
        },
    )?;
    g.backward_into(joint, &mut bundle.store)?;
    let stats = adam_step(
        &mut bundle.store,
        &mut bundle.adam,
        bundle.train.learning_rate,
    )?;
    Ok(StepMetrics {
        ner_loss: g.value(losses.ner).item(),
        re_loss: g.value(losses.re).item(),
        joint_loss: g.value(joint).item(),
        grad_norm: stats.grad_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationScores {
    pub ner_f1: f64,
    pub re_f1_gold: f64,
    pub re_f1_end2end: f64,
}

impl ValidationScores {
    /// The early-stopping metric.
    pub fn primary(&self) -> f64 {
        self.re_f1_end2end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ner_loss: f64,
    pub re_loss: f64,
    pub val_ner_f1: f64,
    pub val_re_f1_gold: f64,
    pub val_re_f1_end2end: f64,
}

pub const HISTORY_HEADER: &str =
    "epoch,ner_loss,re_loss,val_ner_f1,val_re_f1_gold,val_re_f1_end2end";

pub fn write_history<W: Write>(mut w: W, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.ner_loss, r.re_loss, r.val_ner_f1, r.val_re_f1_gold, r.val_re_f1_end2end
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Snapshot from the epoch with the best validation score.
    pub best: ModelBundle,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Per-epoch rng: one ChaCha stream per epoch under the run seed, so a
/// resumed run draws what an uninterrupted one would.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// The epoch's training candidates: negatives downsampled over the whole
/// training set, positives kept.
pub fn epoch_candidates(
    examples: &[Example],
    schema: &RelationSchema,
    ratios: &crate::model::DownsampleRatios,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<RelationCandidate>> {
    let flat: Vec<RelationCandidate> = examples
        .iter()
        .flat_map(|e| e.candidates.iter().cloned())
        .collect();
    let owner: Vec<usize> = examples
        .iter()
        .enumerate()
        .flat_map(|(i, e)| std::iter::repeat_n(i, e.candidates.len()))
        .collect();
    let mut out = vec![Vec::new(); examples.len()];
    for k in downsample_negatives(&flat, schema, ratios, rng) {
        out[owner[k]].push(flat[k].clone());
    }
    out
}

/// Trains one epoch and returns mean NER and RE losses over its steps.
pub fn train_epoch(
    bundle: &mut ModelBundle,
    train: &[Example],
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    let mut rng = epoch_rng(bundle.train.seed, epoch);
    let ratios = bundle.model.config.re.ratios;
    let cands = epoch_candidates(train, &bundle.model.schema, &ratios, &mut rng);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let (mut ner, mut re, mut steps) = (0.0, 0.0, 0usize);
    for chunk in order.chunks(bundle.train.batch_size) {
        let batch: Vec<BatchItem<'_>> = chunk
            .iter()
            .map(|&i| BatchItem {
                example: &train[i],
                candidates: &cands[i],
            })
            .collect();
        let m = train_step(bundle, &batch, Some(&mut rng))?;
        ner += m.ner_loss;
        re += m.re_loss;
        steps += 1;
    }
    let n = steps.max(1) as f64;
    Ok((ner / n, re / n))
}

/// Trains with validation by [`evaluate`] on `val`.
pub fn fit(
    bundle: ModelBundle,
    train: &[Example],
    val: &[Example],
) -> Result<FitOutcome, TrainError> {
    fit_with(bundle, train, |b| {
        let r = evaluate(&b.model, &b.store, val)?;
        Ok(ValidationScores {
            ner_f1: r.ner.f1,
            re_f1_gold: r.re_gold.f1,
            re_f1_end2end: r.re_end2end.f1,
        })
    })
}

/// Epoch loop with a caller-supplied validator. Stops after
/// `early_stop_patience` consecutive epochs without a strict improvement of
/// the primary score, or at `max_epochs`. Starts from `bundle.epoch`, so a
/// loaded checkpoint resumes where it left off.
pub fn fit_with<F>(
    mut bundle: ModelBundle,
    train: &[Example],
    mut validate: F,
) -> Result<FitOutcome, TrainError>
where
    F: FnMut(&ModelBundle) -> Result<ValidationScores, TrainError>,
{
    bundle.train.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("no training sentences".into()));
    }
    let mut best = bundle.clone();
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    while bundle.epoch < bundle.train.max_epochs {
        let epoch = bundle.epoch + 1;
        let (ner_loss, re_loss) = train_epoch(&mut bundle, train, epoch)?;
        bundle.epoch = epoch;
        let scores = validate(&bundle)?;
        history.push(EpochRecord {
            epoch,
            ner_loss,
            re_loss,
            val_ner_f1: scores.ner_f1,
            val_re_f1_gold: scores.re_f1_gold,
            val_re_f1_end2end: scores.re_f1_end2end,
        });
        log::info!(
            "epoch {epoch}: ner_loss {ner_loss:.4} re_loss {re_loss:.4} val ner {:.4} re_gold {:.4} re_e2e {:.4}",
            scores.ner_f1,
            scores.re_f1_gold,
            scores.re_f1_end2end
        );
        if bundle.best_score.is_none_or(|b| scores.primary() > b) {
            bundle.best_score = Some(scores.primary());
            best = bundle.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= bundle.train.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    // The snapshot keeps its own epoch count but shares the final best score.
    best.best_score = bundle.best_score;
    Ok(FitOutcome {
        best,
        history,
        stopped_early,
    })
}
