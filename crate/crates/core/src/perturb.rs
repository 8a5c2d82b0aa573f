//! Controlled corruption of a clean corpus: token-level label noise and
//! few-shot reduction of one entity class.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Dataset, NoiseRecord, ReductionRecord, Sentence, Tag};

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("noise rate {0} outside [0, 1]")]
    InvalidRate(f64),
    #[error("tag inventory has a single tag; no replacement label exists")]
    SingleTagInventory,
    #[error("unknown entity class `{0}`")]
    UnknownClass(String),
    #[error("keep count {requested} exceeds the {max} sentences containing `{class}`")]
    KeepTooLarge {
        class: String,
        requested: usize,
        max: usize,
    },
}

/// Number of corrupted tokens for `rate` over `n` tokens, i.e. ⌊rate·n⌋.
///
/// A small epsilon absorbs binary representation error so that e.g.
/// 0.29 × 100 yields 29.
pub fn noise_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) + 1e-9).floor() as usize
}

/// Corrupts exactly ⌊rate·N⌋ tokens chosen uniformly without replacement.
/// Each chosen token's observed tag is drawn uniformly from the inventory
/// minus its gold tag. Gold tags are kept; any previous corruption is reset.
pub fn inject_noise(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset, PerturbError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(PerturbError::InvalidRate(rate));
    }
    let n = dataset.num_tokens();
    let count = noise_count(rate, n);
    let inventory: Vec<Tag> = dataset.tag_inventory().to_vec();
    if count > 0 && inventory.len() < 2 {
        return Err(PerturbError::SingleTagInventory);
    }

    let mut out = dataset.clone();
    for tok in out.sentences_mut().iter_mut().flat_map(|s| &mut s.tokens) {
        tok.observed_tag = tok.gold_tag.clone();
        tok.is_noisy = false;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<_> = out.token_refs().collect();
    let chosen = index::sample(&mut rng, n, count);
    for i in chosen.iter() {
        let at = refs[i];
        let tok = &mut out.sentences_mut()[at.sentence].tokens[at.token];
        let alternatives: Vec<&Tag> = inventory.iter().filter(|t| **t != tok.gold_tag).collect();
        let pick = alternatives[rng.random_range(0..alternatives.len())].clone();
        tok.observed_tag = pick;
        tok.is_noisy = true;
    }
    out.set_noise_mask_flag(true);
    out.provenance_mut().noise = Some(NoiseRecord {
        rate,
        seed,
        corrupted: count,
    });
    Ok(out)
}

fn contains_class(sentence: &Sentence, class: &str) -> bool {
    sentence
        .tokens
        .iter()
        .any(|t| t.observed_tag.entity_type() == Some(class))
}

/// Reservoir sample (Algorithm R) of `k` positions out of `n`, returned in
/// ascending order.
pub(crate) fn reservoir_sample(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut reservoir: Vec<usize> = (0..k.min(n)).collect();
    for i in k..n {
        let j = rng.random_range(0..=i);
        if j < k {
            reservoir[j] = i;
        }
    }
    reservoir.sort_unstable();
    reservoir
}

/// Keeps `keep` uniformly chosen sentences among those containing
/// `class`, plus every sentence that does not contain it.
pub fn reduce_few_shot(
    dataset: &Dataset,
    class: &str,
    keep: usize,
    seed: u64,
) -> Result<Dataset, PerturbError> {
    if !dataset.entity_classes().iter().any(|c| c == class) {
        return Err(PerturbError::UnknownClass(class.to_string()));
    }
    let containing: Vec<usize> = dataset
        .sentences()
        .iter()
        .enumerate()
        .filter(|(_, s)| contains_class(s, class))
        .map(|(i, _)| i)
        .collect();
    if keep > containing.len() {
        return Err(PerturbError::KeepTooLarge {
            class: class.to_string(),
            requested: keep,
            max: containing.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = reservoir_sample(&mut rng, containing.len(), keep);
    let mut drop = vec![false; dataset.sentences().len()];
    for &i in &containing {
        drop[i] = true;
    }
    for &k in &kept {
        drop[containing[k]] = false;
    }

    let mut out = dataset.clone();
    let sentences = std::mem::take(out.sentences_mut());
    *out.sentences_mut() = sentences
        .into_iter()
        .zip(drop)
        .filter_map(|(s, d)| (!d).then_some(s))
        .collect();
    out.rebuild_inventory();
    out.provenance_mut().reductions.push(ReductionRecord {
        class: class.to_string(),
        keep,
        seed,
    });
    Ok(out)
}
