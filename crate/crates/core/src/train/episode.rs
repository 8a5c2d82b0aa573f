//! Episodic sampling of support and query tokens.
//!
//! Every step draws a fresh episode: `s1` support tokens per minority class,
//! `s2` per other entity class, and a query set with `n` minority tokens per
//! non-minority token. O tokens never enter the support set (O has no
//! centroid) but do appear as non-minority queries.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;

use super::TrainError;
use crate::corpus::{Dataset, TokenRef};
use crate::proto::LabelledTokens;

/// An episode: labelled support and query tokens (label 0 = O, k + 1 =
/// entity class k).
pub type Episode = LabelledTokens;

/// Token pools indexed by label, built from observed tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPools {
    pools: Vec<Vec<TokenRef>>,
}

impl ClassPools {
    /// Pools for label space O + `classes`. Tokens of other types are
    /// left out.
    pub fn from_dataset(dataset: &Dataset, classes: &[String]) -> Self {
        let mut pools = vec![Vec::new(); classes.len() + 1];
        for at in dataset.token_refs() {
            let tok = dataset.token(at).expect("valid ref");
            let label = match tok.observed_tag.entity_type() {
                None => Some(0),
                Some(t) => classes.iter().position(|c| c == t).map(|k| k + 1),
            };
            if let Some(l) = label {
                pools[l].push(at);
            }
        }
        Self { pools }
    }

    pub fn num_labels(&self) -> usize {
        self.pools.len()
    }

    pub fn pool(&self, label: usize) -> &[TokenRef] {
        &self.pools[label]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSampler {
    pools: ClassPools,
    /// Indexed by label; label 0 (O) is never minority.
    minority: Vec<bool>,
    s1: usize,
    s2: usize,
    n: f64,
    query_size: usize,
}

impl EpisodeSampler {
    pub fn new(
        pools: ClassPools,
        classes: &[String],
        minority_classes: &[String],
        s1: usize,
        s2: usize,
        n: f64,
        query_size: usize,
    ) -> Self {
        let mut minority = vec![false; pools.num_labels()];
        for (k, c) in classes.iter().enumerate() {
            minority[k + 1] = minority_classes.contains(c);
        }
        Self {
            pools,
            minority,
            s1,
            s2,
            n,
            query_size,
        }
    }

    pub fn pools(&self) -> &ClassPools {
        &self.pools
    }

    pub fn is_minority(&self, label: usize) -> bool {
        self.minority[label]
    }

    /// Support elements per episode, for sizing epochs.
    pub fn support_size(&self) -> usize {
        (1..self.pools.num_labels())
            .map(|l| self.pools.pool(l).len().min(self.support_quota(l)))
            .sum()
    }

    fn support_quota(&self, label: usize) -> usize {
        if self.minority[label] {
            self.s1
        } else {
            self.s2
        }
    }

    /// Query counts (non-minority, minority) before capping by availability.
    pub fn query_split(&self) -> (usize, usize) {
        let has_minority = (1..self.pools.num_labels()).any(|l| self.minority[l] && !self.pools.pool(l).is_empty());
        if !has_minority {
            return (self.query_size, 0);
        }
        let non = (self.query_size as f64 / (1.0 + self.n)).floor() as usize;
        let min = (self.n * non as f64).floor() as usize;
        (non, min)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Episode, TrainError> {
        let mut support = Vec::new();
        for label in 1..self.pools.num_labels() {
            let pool = self.pools.pool(label);
            let k = pool.len().min(self.support_quota(label));
            let mut picked = index::sample(rng, pool.len(), k).into_vec();
            picked.sort_unstable();
            support.extend(picked.into_iter().map(|i| (pool[i], label)));
        }
        let excluded: HashSet<TokenRef> = support.iter().map(|(r, _)| *r).collect();

        let (q_non, q_min) = self.query_split();
        let non: Vec<usize> = (0..self.pools.num_labels()).filter(|&l| !self.minority[l]).collect();
        let min: Vec<usize> = (0..self.pools.num_labels()).filter(|&l| self.minority[l]).collect();
        let mut query = self.sample_group(rng, &non, &excluded, q_non);
        query.extend(self.sample_group(rng, &min, &excluded, q_min));
        if query.is_empty() {
            return Err(TrainError::EmptyQuery);
        }
        Ok(Episode { support, query })
    }

    /// Uniform draw of `want` tokens, without replacement, from the union of
    /// the `labels` pools minus `excluded`.
    fn sample_group(
        &self,
        rng: &mut impl Rng,
        labels: &[usize],
        excluded: &HashSet<TokenRef>,
        want: usize,
    ) -> Vec<(TokenRef, usize)> {
        let total: usize = labels.iter().map(|&l| self.pools.pool(l).len()).sum();
        let blocked = labels
            .iter()
            .flat_map(|&l| self.pools.pool(l))
            .filter(|r| excluded.contains(r))
            .count();
        let q = want.min(total - blocked);
        if q == 0 {
            return Vec::new();
        }
        let lookup = |mut i: usize| {
            for &l in labels {
                let pool = self.pools.pool(l);
                if i < pool.len() {
                    return (pool[i], l);
                }
                i -= pool.len();
            }
            unreachable!("index within group total")
        };
        let mut drawn = index::sample(rng, total, (q + blocked).min(total)).into_vec();
        drawn.sort_unstable();
        let candidates: Vec<(TokenRef, usize)> = drawn
            .into_iter()
            .map(lookup)
            .filter(|(r, _)| !excluded.contains(r))
            .collect();
        if candidates.len() == q {
            return candidates;
        }
        let mut keep = index::sample(rng, candidates.len(), q).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| candidates[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sentence, Tag, Token};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One-token sentences: `counts[i]` tokens of label i (0 = O).
    fn dataset(counts: &[(Option<&str>, usize)]) -> Dataset {
        let mut sentences = Vec::new();
        for (ty, c) in counts {
            for i in 0..*c {
                let tag = ty.map_or(Tag::Outside, |t| Tag::Begin(t.into()));
                sentences.push(Sentence::new(vec![Token::clean(format!("w{i}"), tag)]));
            }
        }
        Dataset::from_sentences(sentences).unwrap()
    }

    fn classes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exhausted_minority_goes_entirely_to_support() {
        let ds = dataset(&[(None, 100), (Some("LOC"), 8), (Some("PER"), 50)]);
        let cl = classes(&["LOC", "PER"]);
        let s = EpisodeSampler::new(ClassPools::from_dataset(&ds, &cl), &cl, &classes(&["LOC"]), 8, 4, 1.0, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = s.sample(&mut rng).unwrap();
        assert_eq!(ep.support.iter().filter(|(_, l)| *l == 1).count(), 8);
        assert!(ep.query.iter().all(|(_, l)| *l != 1));
    }

    #[test]
    fn absent_minority_class_has_empty_support() {
        let ds = dataset(&[(None, 30), (Some("PER"), 30)]);
        let cl = classes(&["LOC", "PER"]);
        let s = EpisodeSampler::new(ClassPools::from_dataset(&ds, &cl), &cl, &classes(&["LOC"]), 5, 5, 1.0, 10);
        let ep = s.sample(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(ep.support.iter().all(|(_, l)| *l == 2));
        assert_eq!(ep.query.len(), 10);
    }

    #[test]
    fn counts_hold_over_many_episodes() {
        let ds = dataset(&[(None, 300), (Some("LOC"), 40), (Some("MISC"), 3), (Some("PER"), 60)]);
        let cl = classes(&["LOC", "MISC", "PER"]);
        let minority = classes(&["LOC", "MISC"]);
        let s = EpisodeSampler::new(ClassPools::from_dataset(&ds, &cl), &cl, &minority, 6, 9, 0.5, 30);
        assert_eq!(s.query_split(), (20, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let ep = s.sample(&mut rng).unwrap();
            let count = |l: usize| ep.support.iter().filter(|(_, x)| *x == l).count();
            assert_eq!((count(0), count(1), count(2), count(3)), (0, 6, 3, 9));
            let q_min = ep.query.iter().filter(|(_, l)| *l == 1 || *l == 2).count();
            assert_eq!((ep.query.len() - q_min, q_min), (20, 10));
            let sup: HashSet<TokenRef> = ep.support.iter().map(|(r, _)| *r).collect();
            assert!(ep.query.iter().all(|(r, _)| !sup.contains(r)));
            let distinct: HashSet<TokenRef> = ep.query.iter().map(|(r, _)| *r).collect();
            assert_eq!(distinct.len(), ep.query.len());
            for (r, l) in ep.support.iter().chain(&ep.query) {
                let t = ds.token(*r).unwrap();
                assert_eq!(t.observed_tag.entity_type().map(str::to_string), (*l > 0).then(|| cl[l - 1].clone()));
            }
        }
    }

    #[test]
    fn query_is_uniform_over_remaining_pool() {
        // 6 O tokens, PER support takes all 2 PER tokens; queries of size 3
        // drawn from the 6 O tokens must hit each about half the time
        let ds = dataset(&[(None, 6), (Some("PER"), 2)]);
        let cl = classes(&["PER"]);
        let s = EpisodeSampler::new(ClassPools::from_dataset(&ds, &cl), &cl, &[], 2, 2, 1.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut hits = [0usize; 6];
        let trials = 6000;
        for _ in 0..trials {
            for (r, _) in s.sample(&mut rng).unwrap().query {
                hits[r.sentence] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / trials as f64 - 0.5).abs() < 0.03, "{hits:?}");
        }
    }

    #[test]
    fn support_sets_are_resampled() {
        let ds = dataset(&[(None, 100), (Some("LOC"), 100)]);
        let cl = classes(&["LOC"]);
        let s = EpisodeSampler::new(ClassPools::from_dataset(&ds, &cl), &cl, &[], 8, 8, 1.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sets: HashSet<Vec<TokenRef>> = (0..10)
            .map(|_| s.sample(&mut rng).unwrap().support.iter().map(|(r, _)| *r).collect())
            .collect();
        assert_eq!(sets.len(), 10);
    }

    #[test]
    fn empty_query_is_an_error() {
        let ds = dataset(&[(Some("LOC"), 3)]);
        let cl = classes(&["LOC"]);
        let s = EpisodeSampler::new(ClassPools::from_dataset(&ds, &cl), &cl, &[], 3, 3, 1.0, 4);
        assert!(matches!(s.sample(&mut ChaCha8Rng::seed_from_u64(0)), Err(TrainError::EmptyQuery)));
    }
}
