//! Desk-scale library for layout-aware multilingual document modeling.
//!
//! Everything runs on plain `f64` buffers on a single thread, small enough to
//! step through in a debugger yet faithful to the real mechanisms: a
//! spatial-aware transformer encoder over text, layout and page-image patches,
//! the three pre-training objectives that couple them, sequence-labeling and
//! relation heads, the multilingual corpus pipeline, and the training and
//! evaluation harness around it all.

pub mod numerics;

pub mod docmodel;
pub mod evalkit;
pub mod heads;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod synth;
pub mod tokenizer;
pub mod train;
