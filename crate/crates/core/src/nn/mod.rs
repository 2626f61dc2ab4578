//! Minimal CPU layer zoo with explicit forward/backward passes.
//!
//! Everything is f32, deterministic, and free of hidden global state. Batch
//! parallelism uses fixed-size image chunks with a sequential reduction over
//! chunk results, so outputs are bit-identical regardless of thread count.

pub mod adam;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod ops;

pub use adam::{cosine_lr, Adam, AdamConfig};
pub use conv::{Conv2d, ConvCache, PadMode};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache, InstanceNorm2d};

/// Images per parallel work unit. Fixed (not derived from the core count) so
/// floating-point reduction order never depends on the machine.
pub const PAR_CHUNK: usize = 4;
