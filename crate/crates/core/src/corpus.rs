//! CoNLL-style column corpora: parsing, serialization, noise-mask sidecars
//! and BIO span extraction.
//!
//! Tags are normalized to BIO at parse time. Entity decoding follows the
//! conlleval convention: an `I-X` that does not continue an `X` span opens a
//! new span.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("line {line}: expected {expected} columns, found {found}")]
    Malformed {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: unknown tag `{tag}`")]
    UnknownTagAt { line: usize, tag: String },
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("noise mask line {line}: {reason}")]
    Mask { line: usize, reason: String },
    #[error("noise mask has {found} entries, corpus has {expected} tokens")]
    MaskLength { expected: usize, found: usize },
    #[error("sentence {0} has no tokens")]
    EmptySentence(usize),
}

/// A BIO tag.
///
/// The derived ordering puts `O` first, then all `B-` tags, then all `I-`
/// tags, each sorted by entity type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn entity_type(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, Tag::Outside)
    }
}

impl FromStr for Tag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        let (prefix, ty) = s
            .split_once('-')
            .ok_or_else(|| CorpusError::UnknownTag(s.to_string()))?;
        if ty.is_empty() {
            return Err(CorpusError::UnknownTag(s.to_string()));
        }
        match prefix {
            "B" => Ok(Tag::Begin(ty.to_string())),
            "I" => Ok(Tag::Inside(ty.to_string())),
            _ => Err(CorpusError::UnknownTag(s.to_string())),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(t) => write!(f, "B-{t}"),
            Tag::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

impl Serialize for Tag {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub surface: String,
    pub gold_tag: Tag,
    pub observed_tag: Tag,
    pub is_noisy: bool,
}

impl Token {
    pub fn clean(surface: impl Into<String>, tag: Tag) -> Self {
        Self {
            surface: surface.into(),
            gold_tag: tag.clone(),
            observed_tag: tag,
            is_noisy: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    /// Set for `-DOCSTART-` markers, which carry no tokens.
    pub doc_boundary: bool,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self {
            tokens,
            doc_boundary: false,
        }
    }

    pub fn doc_boundary() -> Self {
        Self {
            tokens: Vec::new(),
            doc_boundary: true,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn observed_tags(&self) -> Vec<Tag> {
        self.tokens.iter().map(|t| t.observed_tag.clone()).collect()
    }

    pub fn gold_tags(&self) -> Vec<Tag> {
        self.tokens.iter().map(|t| t.gold_tag.clone()).collect()
    }
}

/// Stable identity of a token: (sentence ordinal, token ordinal).
///
/// Sentence ordinals count document-boundary entries too, so they index
/// [`Dataset::sentences`] directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenRef {
    pub sentence: usize,
    pub token: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub rate: f64,
    pub seed: u64,
    pub corrupted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionRecord {
    pub class: String,
    pub keep: usize,
    pub seed: u64,
}

/// Perturbations applied to a dataset since it was parsed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub noise: Option<NoiseRecord>,
    pub reductions: Vec<ReductionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sentences: Vec<Sentence>,
    tag_inventory: Vec<Tag>,
    entity_classes: Vec<String>,
    provenance: Provenance,
    has_noise_mask: bool,
}

impl Dataset {
    /// Builds a dataset and derives its tag inventory and entity classes
    /// from every gold and observed tag.
    pub fn from_sentences(sentences: Vec<Sentence>) -> Result<Self, CorpusError> {
        if let Some(i) = sentences
            .iter()
            .position(|s| !s.doc_boundary && s.tokens.is_empty())
        {
            return Err(CorpusError::EmptySentence(i));
        }
        let has_noise_mask = sentences
            .iter()
            .flat_map(|s| &s.tokens)
            .any(|t| t.is_noisy || t.gold_tag != t.observed_tag);
        let mut ds = Self {
            sentences,
            tag_inventory: Vec::new(),
            entity_classes: Vec::new(),
            provenance: Provenance::default(),
            has_noise_mask,
        };
        ds.rebuild_inventory();
        Ok(ds)
    }

    pub(crate) fn rebuild_inventory(&mut self) {
        let mut tags = BTreeSet::new();
        tags.insert(Tag::Outside);
        for tok in self.sentences.iter().flat_map(|s| &s.tokens) {
            tags.insert(tok.gold_tag.clone());
            tags.insert(tok.observed_tag.clone());
        }
        let classes: BTreeSet<String> = tags
            .iter()
            .filter_map(|t| t.entity_type().map(str::to_string))
            .collect();
        self.tag_inventory = tags.into_iter().collect();
        self.entity_classes = classes.into_iter().collect();
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn tag_inventory(&self) -> &[Tag] {
        &self.tag_inventory
    }

    pub fn entity_classes(&self) -> &[String] {
        &self.entity_classes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub(crate) fn provenance_mut(&mut self) -> &mut Provenance {
        &mut self.provenance
    }

    pub(crate) fn sentences_mut(&mut self) -> &mut Vec<Sentence> {
        &mut self.sentences
    }

    pub(crate) fn set_noise_mask_flag(&mut self, flag: bool) {
        self.has_noise_mask = flag;
    }

    /// True when tokens carry a meaningful noise mask.
    pub fn has_noise_mask(&self) -> bool {
        self.has_noise_mask
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Token references in corpus iteration order.
    pub fn token_refs(&self) -> impl Iterator<Item = TokenRef> + '_ {
        self.sentences.iter().enumerate().flat_map(|(si, s)| {
            (0..s.tokens.len()).map(move |ti| TokenRef {
                sentence: si,
                token: ti,
            })
        })
    }

    pub fn token(&self, at: TokenRef) -> Option<&Token> {
        self.sentences.get(at.sentence)?.tokens.get(at.token)
    }

    /// Noise mask flattened in corpus order.
    pub fn noise_mask(&self) -> Vec<bool> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| t.is_noisy))
            .collect()
    }
}

/// Which whitespace-separated columns hold the token and its tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnSpec {
    pub token_column: usize,
    /// `None` selects the last column.
    pub tag_column: Option<usize>,
    /// Rewrite IOB1-style entity openings (`I-X` not continuing `X`) as `B-X`.
    pub normalize_iob: bool,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            token_column: 0,
            tag_column: None,
            normalize_iob: true,
        }
    }
}

const DOCSTART: &str = "-DOCSTART-";

pub fn parse_conll<R: BufRead>(reader: R, spec: &ColumnSpec) -> Result<Dataset, CorpusError> {
    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut columns: Option<usize> = None;
    let min_columns = spec.token_column.max(spec.tag_column.unwrap_or(0)) + 1;

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !current.is_empty() {
                sentences.push(Sentence::new(std::mem::take(&mut current)));
            }
            continue;
        }
        if trimmed.starts_with(DOCSTART) {
            if !current.is_empty() {
                sentences.push(Sentence::new(std::mem::take(&mut current)));
            }
            sentences.push(Sentence::doc_boundary());
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let expected = *columns.get_or_insert(fields.len());
        if fields.len() != expected || fields.len() < min_columns.max(2) {
            return Err(CorpusError::Malformed {
                line: line_no,
                expected: expected.max(min_columns.max(2)),
                found: fields.len(),
            });
        }
        let tag_col = spec.tag_column.unwrap_or(fields.len() - 1);
        let tag: Tag = fields[tag_col]
            .parse()
            .map_err(|_| CorpusError::UnknownTagAt {
                line: line_no,
                tag: fields[tag_col].to_string(),
            })?;
        current.push(Token::clean(fields[spec.token_column], tag));
    }
    if !current.is_empty() {
        sentences.push(Sentence::new(current));
    }
    if sentences.iter().all(|s| s.tokens.is_empty()) {
        return Err(CorpusError::EmptyCorpus);
    }
    if spec.normalize_iob {
        for s in &mut sentences {
            let tags = normalize_to_bio(&s.observed_tags());
            for (tok, tag) in s.tokens.iter_mut().zip(tags) {
                tok.gold_tag = tag.clone();
                tok.observed_tag = tag;
            }
        }
    }
    Dataset::from_sentences(sentences)
}

/// Rewrites every `I-X` that opens a span into `B-X`.
pub fn normalize_to_bio(tags: &[Tag]) -> Vec<Tag> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev: Option<&str> = None;
    for tag in tags {
        let fixed = match tag {
            Tag::Inside(t) if prev != Some(t.as_str()) => Tag::Begin(t.clone()),
            other => other.clone(),
        };
        prev = tag.entity_type();
        out.push(fixed);
    }
    out
}

/// Writes the dataset's observed tags in two-column CoNLL format.
pub fn write_conll<W: Write>(dataset: &Dataset, mut w: W) -> Result<(), CorpusError> {
    for s in dataset.sentences() {
        if s.doc_boundary {
            writeln!(w, "{DOCSTART} O")?;
        } else {
            for t in &s.tokens {
                writeln!(w, "{} {}", t.surface, t.observed_tag)?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the noise-mask sidecar: one line per token, `0` for a clean token
/// and `1 <gold tag>` for a corrupted one.
pub fn write_noise_mask<W: Write>(dataset: &Dataset, mut w: W) -> Result<(), CorpusError> {
    for t in dataset.sentences().iter().flat_map(|s| &s.tokens) {
        if t.is_noisy {
            writeln!(w, "1 {}", t.gold_tag)?;
        } else {
            writeln!(w, "0")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a noise-mask sidecar as written by [`write_noise_mask`]. Returns
/// one entry per token: `None` for clean, `Some(gold)` for corrupted.
pub fn read_noise_mask<R: BufRead>(reader: R) -> Result<Vec<Option<Tag>>, CorpusError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let mut fields = line.split_whitespace();
        match (fields.next(), fields.next(), fields.next()) {
            (None, _, _) => continue,
            (Some("0"), None, _) => out.push(None),
            (Some("1"), Some(gold), None) => {
                let tag = gold.parse().map_err(|_| CorpusError::Mask {
                    line: line_no,
                    reason: format!("unknown gold tag `{gold}`"),
                })?;
                out.push(Some(tag));
            }
            (Some("1"), None, _) => {
                return Err(CorpusError::Mask {
                    line: line_no,
                    reason: "noisy entry without gold tag".into(),
                })
            }
            _ => {
                return Err(CorpusError::Mask {
                    line: line_no,
                    reason: format!("malformed entry `{}`", line.trim()),
                })
            }
        }
    }
    Ok(out)
}

/// Restores gold tags and the noise mask on a corpus parsed from observed
/// tags. The corpus must have been parsed with `normalize_iob = false` so the
/// observed tags are kept verbatim.
pub fn apply_noise_mask(dataset: &mut Dataset, mask: &[Option<Tag>]) -> Result<(), CorpusError> {
    let n = dataset.num_tokens();
    if mask.len() != n {
        return Err(CorpusError::MaskLength {
            expected: n,
            found: mask.len(),
        });
    }
    let mut entries = mask.iter();
    for tok in dataset.sentences_mut().iter_mut().flat_map(|s| &mut s.tokens) {
        match entries.next().expect("length checked") {
            Some(gold) => {
                tok.gold_tag = gold.clone();
                tok.is_noisy = true;
            }
            None => {
                tok.gold_tag = tok.observed_tag.clone();
                tok.is_noisy = false;
            }
        }
    }
    dataset.set_noise_mask_flag(true);
    dataset.rebuild_inventory();
    Ok(())
}

/// Reads a perturbed corpus together with its noise-mask sidecar.
pub fn read_with_noise_mask<R: BufRead, M: BufRead>(
    corpus: R,
    mask: M,
    spec: &ColumnSpec,
) -> Result<Dataset, CorpusError> {
    let spec = ColumnSpec {
        normalize_iob: false,
        ..spec.clone()
    };
    let mut ds = parse_conll(corpus, &spec)?;
    let mask = read_noise_mask(mask)?;
    apply_noise_mask(&mut ds, &mask)?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity_type: String,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub sentence_id: usize,
}

/// Decodes BIO spans in one sentence.
pub fn extract_entities(tags: &[Tag]) -> Vec<EntitySpan> {
    extract_entities_in(0, tags)
}

pub fn extract_entities_in(sentence_id: usize, tags: &[Tag]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let continues = match (tag, open) {
            (Tag::Inside(t), Some((ty, _))) => t == ty,
            _ => false,
        };
        if continues {
            continue;
        }
        if let Some((ty, start)) = open.take() {
            spans.push(EntitySpan {
                entity_type: ty.to_string(),
                start,
                end: i,
                sentence_id,
            });
        }
        if let Some(ty) = tag.entity_type() {
            open = Some((ty, i));
        }
    }
    if let Some((ty, start)) = open {
        spans.push(EntitySpan {
            entity_type: ty.to_string(),
            start,
            end: tags.len(),
            sentence_id,
        });
    }
    spans
}

/// String-level entry point; rejects anything that is not `O`, `B-X` or `I-X`.
pub fn extract_entities_str<S: AsRef<str>>(tags: &[S]) -> Result<Vec<EntitySpan>, CorpusError> {
    let parsed = tags
        .iter()
        .map(|s| s.as_ref().parse())
        .collect::<Result<Vec<Tag>, _>>()?;
    Ok(extract_entities(&parsed))
}

/// Turns a per-token entity-type sequence into BIO tags. Consecutive tokens
/// of the same type are merged into one span.
pub fn bio_from_types<S: AsRef<str>>(types: &[Option<S>]) -> Vec<Tag> {
    let mut out = Vec::with_capacity(types.len());
    let mut prev: Option<&str> = None;
    for ty in types {
        let ty = ty.as_ref().map(AsRef::as_ref);
        out.push(match ty {
            None => Tag::Outside,
            Some(t) if prev == Some(t) => Tag::Inside(t.to_string()),
            Some(t) => Tag::Begin(t.to_string()),
        });
        prev = ty;
    }
    out
}

/// Re-emits spans as BIO tags over a sentence of `len` tokens.
pub fn tags_from_spans(spans: &[EntitySpan], len: usize) -> Vec<Tag> {
    let mut tags = vec![Tag::Outside; len];
    for span in spans {
        tags[span.start] = Tag::Begin(span.entity_type.clone());
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = Tag::Inside(span.entity_type.clone());
        }
    }
    tags
}
