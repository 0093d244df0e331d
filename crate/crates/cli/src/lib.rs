// SPDX-License-Identifier: MIT OR Apache-2.0

//! Library side of the `ocrhead` command: configuration, workspace layout
//! and the pipeline stages, usable without going through the binary.

pub mod config;
pub mod error;
pub mod intervene;
pub mod plot;
pub mod stages;
pub mod validate;
pub mod workspace;
