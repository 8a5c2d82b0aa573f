//! Training loops for the prototypical and baseline heads.
//!
//! One epoch is `steps_per_epoch` optimizer steps. The prototypical head
//! trains on freshly sampled episodes, the baseline head on uniform token
//! batches. After every epoch the whole training set is scored to extend
//! the event ledger, and the evaluation set is scored for checkpoint
//! selection.

mod baseline;
mod config;
mod episode;
mod optim;

use std::io::Write;
use std::slice;
use std::thread;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baseline::{baseline_forward, baseline_loss, BaselineGradients, BaselineHead};
pub use config::{HeadKind, InferenceMode, TrainConfig};
pub use episode::{ClassPools, Episode, EpisodeSampler};
pub use optim::{AdamW, AdamWConfig};

use crate::checkpoint::{Checkpoint, HeadState};
use crate::corpus::{bio_from_types, Dataset, Tag, TokenRef};
use crate::dynamics::{noisy_token_accuracy, DynamicsError, EpochRecord, EventLedger};
use crate::encoder::{Encoder, EncoderError, EncoderMode, PrecomputedEmbeddings, WindowEncoder, WindowEncoderConfig};
use crate::metrics::{entity_prf1, MetricsError};
use crate::proto::{compute_centroids, neg_log_prob, proto_loss, LabelledTokens, PrototypeState, ProtoError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("episode has no query tokens")]
    EmptyQuery,
    #[error("vector dimension {found} does not match {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("label {0} out of range")]
    Label(usize),
    #[error("non-finite loss at step {step}; support {support:?}; query {query:?}")]
    NonFiniteLoss {
        step: u64,
        support: Vec<TokenRef>,
        query: Vec<TokenRef>,
    },
    #[error("training corpus has no tokens")]
    EmptyTrainingSet,
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Encoders for the training and evaluation corpora.
#[derive(Clone, Debug)]
pub enum EncoderSetup {
    /// The built-in encoder, shared by both corpora.
    Window(WindowEncoder),
    /// Precomputed vectors, one table per corpus. When they carry a linear
    /// layer, the evaluation table mirrors the training table's parameters.
    Precomputed {
        train: PrecomputedEmbeddings,
        eval: PrecomputedEmbeddings,
    },
}

impl EncoderSetup {
    /// Built-in encoder sized and seeded from `config`.
    pub fn window(config: &TrainConfig) -> Self {
        let cfg = WindowEncoderConfig {
            dim: config.dim,
            lookup_dim: config.lookup_dim,
            buckets: config.buckets,
        };
        EncoderSetup::Window(WindowEncoder::new(cfg, config.seed))
    }

    /// Precomputed tables, with a linear layer to `config.dim` dimensions
    /// seeded from `config` when `config.project_embeddings` is set.
    pub fn precomputed(
        config: &TrainConfig,
        train: PrecomputedEmbeddings,
        eval: PrecomputedEmbeddings,
    ) -> Result<Self, TrainError> {
        if train.input_dim() != eval.input_dim() {
            return Err(TrainError::Dimension {
                expected: train.input_dim(),
                found: eval.input_dim(),
            });
        }
        if !config.project_embeddings {
            return Ok(EncoderSetup::Precomputed { train, eval });
        }
        let train = train.with_projection(config.dim, config.seed);
        let eval = eval
            .with_projection_params(config.dim, train.params().to_vec())
            .expect("input dimensions checked above");
        Ok(EncoderSetup::Precomputed { train, eval })
    }

    fn sync_eval(&mut self) {
        if let EncoderSetup::Precomputed { train, eval } = self {
            if eval.params().len() == train.params().len() {
                eval.params_mut().copy_from_slice(train.params());
            }
        }
    }

    pub fn train_encoder(&self) -> &dyn Encoder {
        match self {
            EncoderSetup::Window(e) => e,
            EncoderSetup::Precomputed { train, .. } => train,
        }
    }

    pub fn eval_encoder(&self) -> &dyn Encoder {
        match self {
            EncoderSetup::Window(e) => e,
            EncoderSetup::Precomputed { eval, .. } => eval,
        }
    }

    fn train_encoder_mut(&mut self) -> &mut dyn Encoder {
        match self {
            EncoderSetup::Window(e) => e,
            EncoderSetup::Precomputed { train, .. } => train,
        }
    }
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Entity F1 on the training set against observed tags.
    pub train_f1: f64,
    /// Entity F1 on the evaluation set against gold tags.
    pub val_f1: f64,
    /// Mean optimizer-step loss over the epoch.
    pub train_loss: f64,
    /// Agreement with the corrupted labels on noisy training tokens.
    pub noisy_token_accuracy: Option<f64>,
}

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_f1", "val_f1", "train_loss", "noisy_token_accuracy"])?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.train_f1.to_string(),
            r.val_f1.to_string(),
            r.train_loss.to_string(),
            r.noisy_token_accuracy.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// The history in long form, one `(epoch, series, value)` per row.
pub fn write_curves_csv<W: Write>(rows: &[HistoryRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "series", "value"])?;
    for r in rows {
        let mut series = vec![
            ("train_f1", r.train_f1),
            ("val_f1", r.val_f1),
            ("train_loss", r.train_loss),
        ];
        if let Some(v) = r.noisy_token_accuracy {
            series.push(("noisy_token_accuracy", v));
        }
        for (name, v) in series {
            out.write_record([r.epoch.to_string(), name.to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Encodes every token of `dataset` in corpus order, splitting the work
/// across threads.
pub fn encode_all(encoder: &dyn Encoder, dataset: &Dataset) -> Result<Vec<Vec<f64>>, EncoderError> {
    let refs: Vec<TokenRef> = dataset.token_refs().collect();
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    if workers <= 1 || refs.len() < 2048 {
        return refs.iter().map(|r| encoder.encode(dataset, *r)).collect();
    }
    let chunk = refs.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = refs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|r| encoder.encode(dataset, *r)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(refs.len());
        for h in handles {
            for v in h.join().expect("encoder thread panicked") {
                out.push(v?);
            }
        }
        Ok(out)
    })
}

/// Label space of the prototypical head: every entity class of the
/// training set plus any declared minority class, sorted.
pub fn proto_classes(dataset: &Dataset, minority: &[String]) -> Vec<String> {
    let mut classes: Vec<String> = dataset.entity_classes().to_vec();
    classes.extend(minority.iter().cloned());
    classes.sort();
    classes.dedup();
    classes
}

/// Head-specific label of a tag; `None` when outside the label space.
pub fn label_of(head: &HeadState, tag: &Tag) -> Option<usize> {
    match head {
        HeadState::Proto(s) => s.label_of(tag.entity_type()),
        HeadState::Baseline(b) => b.label_of(tag),
    }
}

/// Predicted labels and per-token losses, in corpus order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub labels: Vec<usize>,
    /// Cross-entropy against `targets`, when targets were given.
    pub losses: Vec<f64>,
    /// Predicted BIO tags per sentence.
    pub tags: Vec<Vec<Tag>>,
}

/// Scores pre-encoded tokens. The prototypical head uses its running
/// centroids when `use_running` is set and its exact centroids otherwise.
pub fn score(
    head: &HeadState,
    dataset: &Dataset,
    vectors: &[Vec<f64>],
    targets: Option<&[usize]>,
    use_running: bool,
) -> Result<Scored, TrainError> {
    let mut labels = Vec::with_capacity(vectors.len());
    let mut losses = Vec::new();
    for (i, x) in vectors.iter().enumerate() {
        match head {
            HeadState::Proto(state) => {
                let v = state.distances(x, use_running)?;
                labels.push(v.argmin());
                if let Some(t) = targets {
                    losses.push(neg_log_prob(&v.values, t[i]));
                }
            }
            HeadState::Baseline(b) => {
                labels.push(b.predict(x)?);
                if let Some(t) = targets {
                    losses.push(baseline_loss(x, t[i], b)?.loss);
                }
            }
        }
    }
    let mut tags = Vec::with_capacity(dataset.sentences().len());
    let mut offset = 0;
    for s in dataset.sentences() {
        let part = &labels[offset..offset + s.len()];
        offset += s.len();
        tags.push(match head {
            HeadState::Proto(state) => {
                let types: Vec<Option<&str>> = part.iter().map(|&l| state.label_name(l)).collect();
                bio_from_types(&types)
            }
            HeadState::Baseline(b) => part.iter().map(|&l| b.labels[l].clone()).collect(),
        });
    }
    Ok(Scored { labels, losses, tags })
}

/// Predicted BIO tags for every sentence of `dataset`.
pub fn predict_tags(
    head: &HeadState,
    encoder: &dyn Encoder,
    dataset: &Dataset,
    use_running: bool,
) -> Result<Vec<Vec<Tag>>, TrainError> {
    let vectors = encode_all(encoder, dataset)?;
    Ok(score(head, dataset, &vectors, None, use_running)?.tags)
}

/// Exact centroids over labelled vectors (O excluded).
pub fn fit_centroids(state: &mut PrototypeState, vectors: &[Vec<f64>], labels: &[usize]) -> Result<(), TrainError> {
    let support: Vec<(&[f64], usize)> = vectors
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l > 0)
        .map(|(v, l)| (v.as_slice(), l - 1))
        .collect();
    state.centroids = compute_centroids(&support, state.num_classes(), state.dim())?;
    Ok(())
}

/// One prototypical step: loss on the episode, an optimizer update of d_O
/// and any trainable encoder parameters, then a running-centroid update.
///
/// Optimizer layout: `[d_O, encoder params…]`; d_O is not weight-decayed.
pub fn proto_train_step(
    state: &mut PrototypeState,
    dataset: &Dataset,
    episode: &LabelledTokens,
    encoder: &mut dyn Encoder,
    opt: &mut AdamW,
) -> Result<f64, TrainError> {
    let g = proto_loss(dataset, episode, state, &*encoder)?;
    if !g.loss_value.is_finite() || !g.d_o_gradient.is_finite() || g.parameter_gradients.iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFiniteLoss {
            step: opt.step_count() + 1,
            support: episode.support.iter().map(|(r, _)| *r).collect(),
            query: episode.query.iter().map(|(r, _)| *r).collect(),
        });
    }
    opt.begin_step();
    opt.update(0, slice::from_mut(&mut state.d_o), &[g.d_o_gradient], false);
    if encoder.mode() == EncoderMode::Trainable {
        opt.update(1, encoder.params_mut(), &g.parameter_gradients, true);
    }
    state.running.update(&g.batch_centroids)?;
    Ok(g.loss_value)
}

/// One baseline step on a token batch with mean cross-entropy.
///
/// Optimizer layout: `[W, b, encoder params…]`; b is not weight-decayed.
pub fn baseline_train_step(
    head: &mut BaselineHead,
    dataset: &Dataset,
    batch: &[(TokenRef, usize)],
    encoder: &mut dyn Encoder,
    opt: &mut AdamW,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyQuery);
    }
    let scale = 1.0 / batch.len() as f64;
    let trainable = encoder.mode() == EncoderMode::Trainable;
    let mut gw = vec![0.0; head.weights.len()];
    let mut gb = vec![0.0; head.bias.len()];
    let mut gp = vec![0.0; if trainable { encoder.params().len() } else { 0 }];
    let mut loss = 0.0;
    for &(at, label) in batch {
        let x = encoder.encode(dataset, at)?;
        let g = baseline_loss(&x, label, head)?;
        loss += g.loss * scale;
        for (a, b) in gw.iter_mut().zip(&g.weights) {
            *a += b * scale;
        }
        for (a, b) in gb.iter_mut().zip(&g.bias) {
            *a += b * scale;
        }
        if trainable {
            let up: Vec<f64> = g.input.iter().map(|v| v * scale).collect();
            encoder.accumulate_grad(dataset, at, &up, &mut gp)?;
        }
    }
    if !loss.is_finite() || gp.iter().chain(&gw).any(|x| !x.is_finite()) {
        return Err(TrainError::NonFiniteLoss {
            step: opt.step_count() + 1,
            support: Vec::new(),
            query: batch.iter().map(|(r, _)| *r).collect(),
        });
    }
    opt.begin_step();
    let nw = head.weights.len();
    let nb = head.bias.len();
    opt.update(0, &mut head.weights, &gw, true);
    opt.update(nw, &mut head.bias, &gb, false);
    if trainable {
        opt.update(nw + nb, encoder.params_mut(), &gp, true);
    }
    Ok(loss)
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the highest validation F1 (earliest on ties); the
    /// initial state when no epoch ran.
    pub checkpoint: Checkpoint,
    pub ledger: EventLedger,
    pub history: Vec<HistoryRow>,
    pub steps_per_epoch: usize,
    /// Head state after the last epoch.
    pub final_head: HeadState,
}

fn initial_head(config: &TrainConfig, dataset: &Dataset, dim: usize) -> Result<HeadState, TrainError> {
    Ok(match config.head {
        HeadKind::Proto => HeadState::Proto(PrototypeState::new(
            proto_classes(dataset, &config.minority_classes),
            dim,
            config.d_o_init,
            config.missing_distance,
            config.metric,
            config.alpha,
        )?),
        HeadKind::Baseline => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1);
            HeadState::Baseline(BaselineHead::init(dataset.tag_inventory().to_vec(), dim, &mut rng))
        }
    })
}

/// Trains per `config`, recording the event ledger and metric history and
/// keeping the checkpoint with the best validation entity F1.
pub fn run_training(
    config: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
    mut encoders: EncoderSetup,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let n_tokens = train.num_tokens();
    if n_tokens == 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    let dim = encoders.train_encoder().dim();
    if encoders.eval_encoder().dim() != dim {
        return Err(TrainError::Dimension {
            expected: dim,
            found: encoders.eval_encoder().dim(),
        });
    }
    let mut head = initial_head(config, train, dim)?;

    let sampler = match &head {
        HeadState::Proto(state) => Some(EpisodeSampler::new(
            ClassPools::from_dataset(train, &state.classes),
            &state.classes,
            &config.minority_classes,
            config.s1,
            config.s2,
            config.n,
            config.query_size,
        )),
        HeadState::Baseline(_) => None,
    };
    let steps_per_epoch = config.steps_per_epoch.unwrap_or_else(|| {
        let per_step = match &sampler {
            Some(s) => s.support_size() + config.query_size,
            None => config.batch_size,
        };
        n_tokens.div_ceil(per_step.max(1)).max(1)
    });
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    let head_params = match &head {
        HeadState::Proto(_) => 1,
        HeadState::Baseline(b) => b.weights.len() + b.bias.len(),
    };
    let mut opt = AdamW::new(
        AdamWConfig::new(config.learning_rate, config.weight_decay).with_warmup(config.warmup_fraction, total_steps),
        head_params + encoders.train_encoder().params().len(),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);

    let all_refs: Vec<TokenRef> = train.token_refs().collect();
    let observed: Vec<usize> = all_refs
        .iter()
        .map(|r| label_of(&head, &train.token(*r).expect("valid ref").observed_tag).expect("label space covers training tags"))
        .collect();
    let gold: Vec<Option<usize>> = all_refs
        .iter()
        .map(|r| label_of(&head, &train.token(*r).expect("valid ref").gold_tag))
        .collect();
    let noise_mask = train.noise_mask();
    let has_noise = noise_mask.iter().any(|m| *m);
    let observed_tags: Vec<Vec<Tag>> = train.sentences().iter().map(|s| s.observed_tags()).collect();
    let eval_gold: Vec<Vec<Tag>> = eval.sentences().iter().map(|s| s.gold_tags()).collect();
    let use_running = config.inference == InferenceMode::Running;

    let mut best = Checkpoint::capture(0, None, &head, encoders.train_encoder());
    let mut best_f1: Option<f64> = None;
    let mut ledger = EventLedger::new(n_tokens);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let encoder = encoders.train_encoder_mut();
            loss_sum += match (&mut head, &sampler) {
                (HeadState::Proto(state), Some(s)) => {
                    let episode = s.sample(&mut rng)?;
                    proto_train_step(state, train, &episode, encoder, &mut opt)?
                }
                (HeadState::Baseline(b), _) => {
                    let picks = index::sample(&mut rng, n_tokens, config.batch_size.min(n_tokens));
                    let batch: Vec<(TokenRef, usize)> = picks.iter().map(|i| (all_refs[i], observed[i])).collect();
                    baseline_train_step(b, train, &batch, encoder, &mut opt)?
                }
                (HeadState::Proto(_), None) => unreachable!("proto head always has a sampler"),
            };
        }

        encoders.sync_eval();
        let train_vecs = encode_all(encoders.train_encoder(), train)?;
        if let HeadState::Proto(state) = &mut head {
            if !use_running {
                fit_centroids(state, &train_vecs, &observed)?;
            }
        }
        let scored = score(&head, train, &train_vecs, Some(&observed), use_running)?;
        let eval_vecs = encode_all(encoders.eval_encoder(), eval)?;
        let eval_scored = score(&head, eval, &eval_vecs, None, use_running)?;

        let train_f1 = entity_prf1(&scored.tags, &observed_tags)?.f1;
        let val_f1 = entity_prf1(&eval_scored.tags, &eval_gold)?.f1;
        let noisy = if has_noise {
            let pred: Vec<Option<usize>> = scored.labels.iter().map(|l| Some(*l)).collect();
            let obs: Vec<Option<usize>> = observed.iter().map(|l| Some(*l)).collect();
            Some(noisy_token_accuracy(&pred, &obs, &gold, &noise_mask)?.observed)
        } else {
            None
        };
        ledger.push(EpochRecord {
            epoch,
            correct_observed: scored.labels.iter().zip(&observed).map(|(p, o)| p == o).collect(),
            correct_gold: scored.labels.iter().zip(&gold).map(|(p, g)| Some(*p) == *g).collect(),
            loss: scored.losses,
        })?;
        history.push(HistoryRow {
            epoch,
            train_f1,
            val_f1,
            train_loss: loss_sum / steps_per_epoch as f64,
            noisy_token_accuracy: noisy,
        });
        if best_f1.is_none_or(|b| val_f1 > b) {
            best_f1 = Some(val_f1);
            best = Checkpoint::capture(epoch, Some(val_f1), &head, encoders.train_encoder());
        }
    }

    Ok(TrainOutcome {
        checkpoint: best,
        ledger,
        history,
        steps_per_epoch,
        final_head: head,
    })
}
