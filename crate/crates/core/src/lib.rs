//! Core library for an event-camera eye tracker built around an adaptive
//! inference state space model.
//!
//! The model fuses two estimates of a latent eye state every frame: a
//! posterior computed from the current event frame and a prior rolled forward
//! from the recurrent state. A small confidence network predicts, per frame,
//! how trustworthy the observation is, and that confidence sets the blend
//! weight — frames with barely any events lean on the dynamics, dense frames
//! lean on the encoder. Everything here is deterministic given a seed: same
//! inputs, same bits, on any machine.
//!
//! Module map:
//! - [`tensor`], [`tape`]: dense f64 tensors and reverse-mode autodiff.
//! - [`nn`], [`optim`], [`gradcheck`]: layers, Adam, finite-difference checks.
//! - [`event`], [`synth`]: event streams, framing, disk formats, simulation.
//! - [`confidence`]: observation-trust labels from frame statistics.
//! - [`model`]: the adaptive tracker and its capacity-matched baselines.
//! - [`metrics`]: pixel-threshold accuracy and the evaluation protocol.
//! - [`train`]: windowed truncated-backprop training with a state store.
//! - [`ckpt`]: f32-quantized checkpoints that resume bit-exactly.
//! - [`config`], [`seed`]: key=value configs and deterministic stream splits.

pub mod ckpt;
pub mod confidence;
pub mod config;
pub mod event;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use event::{Dataset, Event, EventFrame, EventSequence, FramedSequence, Label};
pub use model::{Model, ModelConfig, ModelKind};
pub use tape::{GradientMap, SampleMode, Tape, Val};
pub use tensor::{ParameterSet, Tensor};
