//! Universal time-series encoder toolkit.
//!
//! A convolutional encoder with time-wise attention pooling maps
//! variable-length series to fixed-length representations. The crate bundles
//! everything needed to train and evaluate it at desk scale: a small
//! double-precision autodiff engine, the encoder itself, a multi-task trainer
//! with per-dataset classification heads, frozen-representation classifiers
//! (1NN, logistic regression, RBF-SVM), the leave-one-type-out evaluation
//! protocol, and dataset ingestion plus a seeded synthetic corpus generator.

pub mod adapters;
pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod numerics;
pub mod trainer;

/// Derives an independent sub-seed from a base seed and a stream tag.
///
/// Two rounds of the splitmix64 finalizer; stable across platforms.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
