//! Object-centric learning on vector-quantized reconstruction targets.
//!
//! The pipeline: a frozen toy encoder produces dense features, a pretrained
//! vector quantizer turns them into discrete reconstruction targets, a
//! Slot Attention aggregator groups features into slots, and one of three
//! decoder families reconstructs the quantized targets from the slots.
//! Everything runs on the CPU in plain Rust with a small reverse-mode tape.

pub mod aggregator;
pub mod analysis;
pub mod decoders;
pub mod encoder;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod scenegen;
pub mod tape;
pub mod tensor;
pub mod vq;
pub mod tensorio;
