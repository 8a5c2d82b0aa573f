//! Few-shot sequence labeling with a prototypical classification head,
//! plus the instrumentation for label-noise and training-dynamics studies.

pub mod corpus;
pub mod perturb;
pub mod encoder;
pub mod proto;
pub mod metrics;
pub mod dynamics;
pub mod train;
pub mod checkpoint;
pub mod synth;
pub mod cli;
