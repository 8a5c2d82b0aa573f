//! Synthetic corpora for tests, demos and benchmarks.
//!
//! - [`GaussianMixture`] places each label at a random mean in embedding
//!   space and emits tokens with precomputed vectors drawn around it.
//! - [`word_corpus`] builds a text corpus whose words each belong to one
//!   class, suitable for the built-in trainable encoder.
//!
//! Entity tokens are never adjacent, so every entity is a single-token
//! span.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Dataset, Sentence, Tag, Token};
use crate::encoder::{EncoderError, PrecomputedEmbeddings};

/// One isotropic Gaussian per label (O first, then entity classes).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    classes: Vec<String>,
    means: Vec<Vec<f64>>,
    sigma: f64,
}

/// Sentence counts for [`GaussianMixture::sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLayout {
    /// Sentences per entity class; each holds exactly one token of it.
    pub per_class: Vec<(String, usize)>,
    /// Sentences with only O tokens.
    pub outside_sentences: usize,
    pub sentence_len: usize,
}

/// A generated dataset plus the vector of every token, keyed by its unique
/// surface form.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl GaussianMixture {
    /// Means are N(0, separation²/dim · I), so their norms concentrate
    /// around `separation`.
    pub fn new(classes: &[&str], dim: usize, separation: f64, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = separation / (dim as f64).sqrt();
        let means = (0..=classes.len())
            .map(|_| {
                (0..dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self {
            classes: classes.iter().map(|c| c.to_string()).collect(),
            means,
            sigma,
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self, class: Option<&str>) -> Option<&[f64]> {
        let idx = match class {
            None => 0,
            Some(c) => self.classes.iter().position(|x| x == c)? + 1,
        };
        Some(&self.means[idx])
    }

    fn draw(&self, rng: &mut ChaCha8Rng, label: usize) -> Vec<f64> {
        self.means[label]
            .iter()
            .map(|m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Generates sentences in random order; surfaces are unique per call
    /// and prefixed with `prefix`.
    pub fn sample(&self, layout: &GaussianLayout, prefix: &str, seed: u64) -> SyntheticCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = layout.sentence_len.max(1);
        let mut plans: Vec<Option<usize>> = vec![None; layout.outside_sentences];
        for (class, count) in &layout.per_class {
            let label = self
                .classes
                .iter()
                .position(|c| c == class)
                .expect("class of the mixture")
                + 1;
            plans.extend(std::iter::repeat_n(Some(label), *count));
        }
        plans.shuffle(&mut rng);

        let mut vectors = HashMap::new();
        let mut sentences = Vec::with_capacity(plans.len());
        let mut next_id = 0usize;
        for plan in plans {
            let slot = plan.map(|_| rng.random_range(0..len));
            let mut tokens = Vec::with_capacity(len);
            for pos in 0..len {
                let label = if slot == Some(pos) { plan.expect("slot implies label") } else { 0 };
                let surface = format!("{prefix}{next_id}");
                next_id += 1;
                vectors.insert(surface.clone(), self.draw(&mut rng, label));
                let tag = match label {
                    0 => Tag::Outside,
                    l => Tag::Begin(self.classes[l - 1].clone()),
                };
                tokens.push(Token::clean(surface, tag));
            }
            sentences.push(Sentence::new(tokens));
        }
        SyntheticCorpus {
            dataset: Dataset::from_sentences(sentences).expect("non-empty sentences"),
            dim: self.dim(),
            vectors,
        }
    }
}

impl SyntheticCorpus {
    /// Vectors for `dataset`, which may be any subset or relabelling of the
    /// generated corpus.
    pub fn embeddings_for(&self, dataset: &Dataset) -> Result<PrecomputedEmbeddings, EncoderError> {
        let vectors = dataset
            .token_refs()
            .map(|at| {
                let tok = dataset.token(at).expect("valid ref");
                self.vectors
                    .get(&tok.surface)
                    .cloned()
                    .ok_or(EncoderError::OutOfRange(at))
            })
            .collect::<Result<Vec<_>, _>>()?;
        PrecomputedEmbeddings::from_vectors(dataset, self.dim, vectors)
    }

    pub fn embeddings(&self) -> PrecomputedEmbeddings {
        self.embeddings_for(&self.dataset).expect("own tokens")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordCorpusSpec {
    pub classes: Vec<String>,
    pub words_per_class: usize,
    pub outside_words: usize,
    pub sentences: usize,
    pub sentence_len: usize,
    /// Probability that a token following an O token is an entity.
    pub entity_rate: f64,
}

impl Default for WordCorpusSpec {
    fn default() -> Self {
        Self {
            classes: ["LOC", "MISC", "ORG", "PER"].map(String::from).to_vec(),
            words_per_class: 20,
            outside_words: 60,
            sentences: 200,
            sentence_len: 8,
            entity_rate: 0.3,
        }
    }
}

/// Text corpus where the word `<class>_<i>` is always an entity of that
/// class and `w_<i>` is always O.
pub fn word_corpus(spec: &WordCorpusSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(spec.sentences);
    for _ in 0..spec.sentences {
        let mut tokens = Vec::with_capacity(spec.sentence_len);
        let mut prev_entity = false;
        for _ in 0..spec.sentence_len.max(1) {
            let entity = !prev_entity && !spec.classes.is_empty() && rng.random_bool(spec.entity_rate);
            if entity {
                let class = &spec.classes[rng.random_range(0..spec.classes.len())];
                let word = format!("{}_{}", class.to_lowercase(), rng.random_range(0..spec.words_per_class));
                tokens.push(Token::clean(word, Tag::Begin(class.clone())));
            } else {
                let word = format!("w_{}", rng.random_range(0..spec.outside_words));
                tokens.push(Token::clean(word, Tag::Outside));
            }
            prev_entity = entity;
        }
        sentences.push(Sentence::new(tokens));
    }
    Dataset::from_sentences(sentences).expect("non-empty sentences")
}
