//! Multi-modal molecular property prediction.
//!
//! A molecule is encoded three ways and the encodings are fused:
//!
//! * a Chebyshev spectral graph convolution over the heavy-atom graph,
//!   pooled with Set2Set into a graph embedding ([`gnn`]);
//! * LLM-written descriptions encoded and attention-pooled into a text
//!   embedding ([`textenc`]), fused with the graph embedding by two-slot
//!   cross-modal multi-head attention ([`fusion`]);
//! * a few-shot LLM prediction lifted linearly into the embedding space
//!   ([`llm`]), blended with the fused embedding by an element-wise sigmoid
//!   gate before the output head ([`moe`]).
//!
//! [`pipeline`] trains all of it jointly under a mean squared error objective.

pub mod numerics;
pub mod molgraph;
pub mod chem;
pub mod gnn;
pub mod textenc;
pub mod fusion;
pub mod llm;
pub mod moe;
pub mod model;
pub mod synth;
pub mod gradcheck;
pub mod pipeline;
pub mod config;
pub mod archive;
pub mod cli;
