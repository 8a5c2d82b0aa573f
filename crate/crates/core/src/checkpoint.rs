//! Model checkpoints as versioned JSON documents.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderDescriptor, PrecomputedEmbeddings, WindowEncoder};
use crate::proto::PrototypeState;
use crate::train::BaselineHead;

pub const CHECKPOINT_FORMAT: &str = "protoseq-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format `{format}` version {version}")]
    Format { format: String, version: u32 },
    #[error("encoder parameters do not match the stored configuration")]
    Params,
    #[error("checkpoint was trained on {expected}-dimensional embeddings, found {found}")]
    EmbeddingDim { expected: usize, found: usize },
    #[error("checkpoint does not use precomputed embeddings")]
    NotPrecomputed,
}

/// Trainable state of either head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadState {
    Proto(PrototypeState),
    Baseline(BaselineHead),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Epoch after which the snapshot was taken; 0 for the initial state.
    pub epoch: usize,
    pub val_f1: Option<f64>,
    pub head: HeadState,
    pub encoder: EncoderDescriptor,
    /// Empty for frozen precomputed encoders.
    pub encoder_params: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(epoch: usize, val_f1: Option<f64>, head: &HeadState, encoder: &dyn Encoder) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            epoch,
            val_f1,
            head: head.clone(),
            encoder: encoder.descriptor(),
            encoder_params: encoder.params().to_vec(),
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), CheckpointError> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, CheckpointError> {
        let ckpt: Self = serde_json::from_reader(r)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format {
                format: ckpt.format,
                version: ckpt.version,
            });
        }
        Ok(ckpt)
    }

    /// Rebuilds the built-in encoder; `None` for precomputed encoders,
    /// whose vectors live in a separate file.
    pub fn window_encoder(&self) -> Result<Option<WindowEncoder>, CheckpointError> {
        match &self.encoder {
            EncoderDescriptor::Window { config, frozen } => {
                let mut enc =
                    WindowEncoder::from_params(*config, self.encoder_params.clone()).ok_or(CheckpointError::Params)?;
                if *frozen {
                    enc.freeze();
                }
                Ok(Some(enc))
            }
            EncoderDescriptor::Precomputed { .. } => Ok(None),
        }
    }

    /// Applies the stored linear layer, if any, to vectors loaded for a new
    /// corpus.
    pub fn restore_precomputed(&self, emb: PrecomputedEmbeddings) -> Result<PrecomputedEmbeddings, CheckpointError> {
        let EncoderDescriptor::Precomputed { dim, projection, .. } = self.encoder else {
            return Err(CheckpointError::NotPrecomputed);
        };
        if emb.input_dim() != dim {
            return Err(CheckpointError::EmbeddingDim {
                expected: dim,
                found: emb.input_dim(),
            });
        }
        match projection {
            None => Ok(emb),
            Some(out) => emb
                .with_projection_params(out, self.encoder_params.clone())
                .ok_or(CheckpointError::Params),
        }
    }
}
