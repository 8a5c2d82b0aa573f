//! Token encoders: the function that maps a token in context to an
//! M-dimensional vector.
//!
//! Two implementations ship with the crate:
//!
//! - [`WindowEncoder`], a small trainable encoder. Each token is hashed into
//!   a bucketed lookup table, its vector is averaged with the mean of its
//!   radius-1 neighbours, and the result goes through an affine map and
//!   `tanh`.
//! - [`PrecomputedEmbeddings`], a table read from a `protoseq-emb v1` file,
//!   for vectors produced by an external contextual encoder. The vectors
//!   are fixed; an optional trainable linear layer maps them to M
//!   dimensions.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, TokenRef};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token {0:?} out of range")]
    OutOfRange(TokenRef),
    #[error("gradient length {found} does not match dimension {expected}")]
    GradientShape { expected: usize, found: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("embeddings header: {0}")]
    Header(String),
    #[error("embeddings line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("embeddings file has {found} vectors, corpus has {expected} tokens")]
    CountMismatch { expected: usize, found: usize },
    #[error("embeddings line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("embeddings line {line}: non-finite value")]
    NonFinite { line: usize },
    #[error("embeddings line {line}: expected token ({exp_sentence}, {exp_token}), found ({sentence}, {token})")]
    Misaligned {
        line: usize,
        exp_sentence: usize,
        exp_token: usize,
        sentence: usize,
        token: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Trainable,
    Frozen,
}

/// A pluggable embedding function.
///
/// `encode` must be deterministic for fixed parameters. Trainable encoders
/// expose a flat parameter vector and accumulate gradients into a buffer of
/// the same length.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn mode(&self) -> EncoderMode;

    fn encode(&self, dataset: &Dataset, at: TokenRef) -> Result<Vec<f64>, EncoderError>;

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    /// Adds `upstream · ∂encode(at)/∂params` into `grad`.
    fn accumulate_grad(
        &self,
        _dataset: &Dataset,
        _at: TokenRef,
        _upstream: &[f64],
        _grad: &mut [f64],
    ) -> Result<(), EncoderError> {
        Ok(())
    }

    /// Serializable description used by checkpoints.
    fn descriptor(&self) -> EncoderDescriptor;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderDescriptor {
    Window {
        config: WindowEncoderConfig,
        frozen: bool,
    },
    Precomputed {
        /// Dimension of the stored vectors.
        dim: usize,
        count: usize,
        /// Output dimension of the linear layer, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        projection: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEncoderConfig {
    /// Output dimension M.
    pub dim: usize,
    pub lookup_dim: usize,
    pub buckets: usize,
}

impl Default for WindowEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            lookup_dim: 16,
            buckets: 1 << 16,
        }
    }
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parameter layout: `[lookup (buckets × lookup_dim) | weight (dim × lookup_dim) | bias (dim)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowEncoder {
    config: WindowEncoderConfig,
    params: Vec<f64>,
    frozen: bool,
}

struct Window {
    center: usize,
    neighbours: Vec<usize>,
}

impl WindowEncoder {
    /// Parameters drawn uniformly from [-0.1, 0.1].
    pub fn new(config: WindowEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::param_count(&config);
        let params = (0..n).map(|_| rng.random_range(-0.1..=0.1)).collect();
        Self {
            config,
            params,
            frozen: false,
        }
    }

    pub fn from_params(config: WindowEncoderConfig, params: Vec<f64>) -> Option<Self> {
        (params.len() == Self::param_count(&config)).then_some(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn param_count(config: &WindowEncoderConfig) -> usize {
        config.buckets * config.lookup_dim + config.dim * config.lookup_dim + config.dim
    }

    pub fn config(&self) -> &WindowEncoderConfig {
        &self.config
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn lookup_range(&self) -> Range<usize> {
        0..self.config.buckets * self.config.lookup_dim
    }

    pub fn weight_range(&self) -> Range<usize> {
        let start = self.lookup_range().end;
        start..start + self.config.dim * self.config.lookup_dim
    }

    pub fn bias_range(&self) -> Range<usize> {
        let start = self.weight_range().end;
        start..start + self.config.dim
    }

    pub fn bucket(&self, surface: &str) -> usize {
        (fnv1a(surface.as_bytes()) % self.config.buckets as u64) as usize
    }

    fn window(&self, dataset: &Dataset, at: TokenRef) -> Result<Window, EncoderError> {
        let sentence = dataset
            .sentences()
            .get(at.sentence)
            .filter(|s| at.token < s.len())
            .ok_or(EncoderError::OutOfRange(at))?;
        let bucket = |i: usize| self.bucket(&sentence.tokens[i].surface);
        let mut neighbours = Vec::with_capacity(2);
        if at.token > 0 {
            neighbours.push(bucket(at.token - 1));
        }
        if at.token + 1 < sentence.len() {
            neighbours.push(bucket(at.token + 1));
        }
        Ok(Window {
            center: bucket(at.token),
            neighbours,
        })
    }

    /// Pooling weights of the center row and of each neighbour row.
    fn pooling(window: &Window) -> (f64, f64) {
        if window.neighbours.is_empty() {
            (1.0, 0.0)
        } else {
            (0.5, 0.5 / window.neighbours.len() as f64)
        }
    }

    fn pooled(&self, window: &Window) -> Vec<f64> {
        let e = self.config.lookup_dim;
        let (wc, wn) = Self::pooling(window);
        let row = |b: usize| &self.params[b * e..(b + 1) * e];
        let mut h: Vec<f64> = row(window.center).iter().map(|v| wc * v).collect();
        for &b in &window.neighbours {
            for (hi, v) in h.iter_mut().zip(row(b)) {
                *hi += wn * v;
            }
        }
        h
    }

    fn affine_tanh(&self, h: &[f64]) -> Vec<f64> {
        let e = self.config.lookup_dim;
        let w = &self.params[self.weight_range()];
        let b = &self.params[self.bias_range()];
        (0..self.config.dim)
            .map(|i| {
                let z: f64 = w[i * e..(i + 1) * e].iter().zip(h).map(|(a, x)| a * x).sum();
                (z + b[i]).tanh()
            })
            .collect()
    }
}

impl Encoder for WindowEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn mode(&self) -> EncoderMode {
        if self.frozen {
            EncoderMode::Frozen
        } else {
            EncoderMode::Trainable
        }
    }

    fn encode(&self, dataset: &Dataset, at: TokenRef) -> Result<Vec<f64>, EncoderError> {
        let window = self.window(dataset, at)?;
        Ok(self.affine_tanh(&self.pooled(&window)))
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_grad(
        &self,
        dataset: &Dataset,
        at: TokenRef,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<(), EncoderError> {
        let m = self.config.dim;
        let e = self.config.lookup_dim;
        if upstream.len() != m {
            return Err(EncoderError::GradientShape {
                expected: m,
                found: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(EncoderError::GradientShape {
                expected: self.params.len(),
                found: grad.len(),
            });
        }
        let window = self.window(dataset, at)?;
        let h = self.pooled(&window);
        let y = self.affine_tanh(&h);
        let dz: Vec<f64> = upstream.iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)).collect();

        let w_start = self.weight_range().start;
        let b_start = self.bias_range().start;
        let mut dh = vec![0.0; e];
        for i in 0..m {
            grad[b_start + i] += dz[i];
            let row = w_start + i * e;
            for j in 0..e {
                grad[row + j] += dz[i] * h[j];
                dh[j] += self.params[row + j] * dz[i];
            }
        }
        let (wc, wn) = Self::pooling(&window);
        let rows = std::iter::once((window.center, wc)).chain(window.neighbours.iter().map(|&b| (b, wn)));
        for (bucket, weight) in rows {
            for j in 0..e {
                grad[bucket * e + j] += weight * dh[j];
            }
        }
        Ok(())
    }

    fn descriptor(&self) -> EncoderDescriptor {
        EncoderDescriptor::Window {
            config: self.config,
            frozen: self.frozen,
        }
    }
}

pub const EMBEDDINGS_MAGIC: &str = "protoseq-emb";
pub const EMBEDDINGS_VERSION: &str = "v1";

/// Fixed per-token vectors aligned with a corpus, optionally followed by a
/// trainable linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    /// Offset of each sentence's first token in `values` / `dim`.
    offsets: Vec<usize>,
    lengths: Vec<usize>,
    values: Vec<f64>,
    projection: Option<Projection>,
}

/// Parameter layout: `[weight (out_dim × dim) | bias (out_dim)]`.
#[derive(Clone, Debug, PartialEq)]
struct Projection {
    out_dim: usize,
    params: Vec<f64>,
}

impl PrecomputedEmbeddings {
    /// Builds a table from vectors listed in corpus order.
    pub fn from_vectors(dataset: &Dataset, dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self, EncoderError> {
        let expected = dataset.num_tokens();
        if vectors.len() != expected {
            return Err(EncoderError::CountMismatch {
                expected,
                found: vectors.len(),
            });
        }
        let mut values = Vec::with_capacity(expected * dim);
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(EncoderError::DimensionMismatch {
                    line: i + 2,
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EncoderError::NonFinite { line: i + 2 });
            }
            values.extend_from_slice(v);
        }
        Ok(Self::with_layout(dataset, dim, values))
    }

    fn with_layout(dataset: &Dataset, dim: usize, values: Vec<f64>) -> Self {
        let mut offsets = Vec::with_capacity(dataset.sentences().len());
        let mut lengths = Vec::with_capacity(dataset.sentences().len());
        let mut acc = 0;
        for s in dataset.sentences() {
            offsets.push(acc);
            lengths.push(s.len());
            acc += s.len();
        }
        Self {
            dim,
            offsets,
            lengths,
            values,
            projection: None,
        }
    }

    /// Adds a linear layer to `out_dim` dimensions with parameters drawn
    /// uniformly from [-0.1, 0.1].
    pub fn with_projection(self, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::projection_param_count(self.dim, out_dim);
        let params = (0..n).map(|_| rng.random_range(-0.1..=0.1)).collect();
        Self {
            projection: Some(Projection { out_dim, params }),
            ..self
        }
    }

    /// Adds a linear layer with the given parameters; `None` if their count
    /// does not fit `out_dim`.
    pub fn with_projection_params(self, out_dim: usize, params: Vec<f64>) -> Option<Self> {
        if params.len() != Self::projection_param_count(self.dim, out_dim) {
            return None;
        }
        Some(Self {
            projection: Some(Projection { out_dim, params }),
            ..self
        })
    }

    pub fn projection_param_count(dim: usize, out_dim: usize) -> usize {
        out_dim * dim + out_dim
    }

    /// Dimension of the stored vectors.
    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.dim.max(1)
    }

    pub fn vector(&self, at: TokenRef) -> Option<&[f64]> {
        let len = *self.lengths.get(at.sentence)?;
        if at.token >= len {
            return None;
        }
        let row = self.offsets[at.sentence] + at.token;
        Some(&self.values[row * self.dim..(row + 1) * self.dim])
    }
}

impl Encoder for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.projection.as_ref().map_or(self.dim, |p| p.out_dim)
    }

    fn mode(&self) -> EncoderMode {
        if self.projection.is_some() {
            EncoderMode::Trainable
        } else {
            EncoderMode::Frozen
        }
    }

    fn encode(&self, _dataset: &Dataset, at: TokenRef) -> Result<Vec<f64>, EncoderError> {
        let x = self.vector(at).ok_or(EncoderError::OutOfRange(at))?;
        let Some(p) = &self.projection else {
            return Ok(x.to_vec());
        };
        let (w, b) = p.params.split_at(p.out_dim * self.dim);
        Ok(w.chunks_exact(self.dim)
            .zip(b)
            .map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect())
    }

    fn params(&self) -> &[f64] {
        self.projection.as_ref().map_or(&[], |p| &p.params)
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.projection.as_mut().map_or(&mut [], |p| &mut p.params)
    }

    fn accumulate_grad(
        &self,
        _dataset: &Dataset,
        at: TokenRef,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<(), EncoderError> {
        let Some(p) = &self.projection else {
            return Ok(());
        };
        if upstream.len() != p.out_dim {
            return Err(EncoderError::GradientShape {
                expected: p.out_dim,
                found: upstream.len(),
            });
        }
        if grad.len() != p.params.len() {
            return Err(EncoderError::GradientShape {
                expected: p.params.len(),
                found: grad.len(),
            });
        }
        let x = self.vector(at).ok_or(EncoderError::OutOfRange(at))?;
        let (gw, gb) = grad.split_at_mut(p.out_dim * self.dim);
        for ((row, gbi), u) in gw.chunks_exact_mut(self.dim).zip(gb).zip(upstream) {
            *gbi += u;
            for (g, xj) in row.iter_mut().zip(x) {
                *g += u * xj;
            }
        }
        Ok(())
    }

    fn descriptor(&self) -> EncoderDescriptor {
        EncoderDescriptor::Precomputed {
            dim: self.dim,
            count: self.count(),
            projection: self.projection.as_ref().map(|p| p.out_dim),
        }
    }
}

/// Reads a `protoseq-emb v1` file and validates it against `dataset`.
///
/// Each record is `<sentence_id> <token_id> <dim floats>`; records must
/// follow corpus iteration order, sentence ids counting document-boundary
/// entries.
pub fn load_embeddings<R: BufRead>(reader: R, dataset: &Dataset) -> Result<PrecomputedEmbeddings, EncoderError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| EncoderError::Header("missing header".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match fields.as_slice() {
        [magic, version, count, dim] if *magic == EMBEDDINGS_MAGIC && *version == EMBEDDINGS_VERSION => {
            let count: usize = count
                .parse()
                .map_err(|_| EncoderError::Header(format!("bad count `{count}`")))?;
            let dim: usize = dim
                .parse()
                .map_err(|_| EncoderError::Header(format!("bad dimension `{dim}`")))?;
            (count, dim)
        }
        _ => return Err(EncoderError::Header(format!("unrecognized header `{header}`"))),
    };
    if dim == 0 {
        return Err(EncoderError::Header("dimension must be positive".into()));
    }
    let expected = dataset.num_tokens();
    if count != expected {
        return Err(EncoderError::CountMismatch { expected, found: count });
    }

    let mut values = Vec::with_capacity(count * dim);
    let mut refs = dataset.token_refs();
    let mut seen = 0;
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line_no = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut id = |what: &str| -> Result<usize, EncoderError> {
            fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| EncoderError::Parse {
                    line: line_no,
                    reason: format!("bad {what} id"),
                })
        };
        let sentence = id("sentence")?;
        let token = id("token")?;
        let nums = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| EncoderError::Parse {
                    line: line_no,
                    reason: format!("bad number `{f}`"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if nums.len() != dim {
            return Err(EncoderError::DimensionMismatch {
                line: line_no,
                expected: dim,
                found: nums.len(),
            });
        }
        if nums.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::NonFinite { line: line_no });
        }
        let Some(want) = refs.next() else {
            return Err(EncoderError::CountMismatch {
                expected,
                found: seen + 1,
            });
        };
        if want.sentence != sentence || want.token != token {
            return Err(EncoderError::Misaligned {
                line: line_no,
                exp_sentence: want.sentence,
                exp_token: want.token,
                sentence,
                token,
            });
        }
        values.extend(nums);
        seen += 1;
    }
    if seen != expected {
        return Err(EncoderError::CountMismatch { expected, found: seen });
    }
    Ok(PrecomputedEmbeddings::with_layout(dataset, dim, values))
}

/// Writes vectors for every token of `dataset` in the `protoseq-emb v1`
/// format. Values use the shortest representation that parses back to the
/// same `f64`.
pub fn write_embeddings<W: Write, E: Encoder + ?Sized>(
    mut w: W,
    dataset: &Dataset,
    encoder: &E,
) -> Result<(), EncoderError> {
    writeln!(
        w,
        "{EMBEDDINGS_MAGIC} {EMBEDDINGS_VERSION} {} {}",
        dataset.num_tokens(),
        encoder.dim()
    )?;
    for at in dataset.token_refs() {
        let v = encoder.encode(dataset, at)?;
        write!(w, "{} {}", at.sentence, at.token)?;
        for x in v {
            write!(w, " {x:e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
