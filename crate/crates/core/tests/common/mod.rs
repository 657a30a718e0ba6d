//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

pub mod fixtures;
pub mod gradients;
pub mod oracle;
