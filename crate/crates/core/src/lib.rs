//! Numerics for a desk-scale few-shot robustness lab.
//!
//! The crate covers the full loop: episodic few-shot classifiers built on a
//! small convolutional encoder ([`models`]), support-set poisoning attacks
//! ([`attacks`]), input filters including a feature-preserving autoencoder
//! ([`filters`]), and self-similarity detection statistics with AUROC
//! evaluation ([`detection`]). Everything is pure computation over `f64`
//! buffers: given the same seeds, every function produces bit-identical
//! results on any platform (transcendental math goes through `libm`).
//!
//! IO, file formats, and the command-line front end live in the companion
//! `fewshot-lab` crate; this crate is `no_std` (with `alloc`).

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod attacks;
pub mod detection;
pub mod episodes;
pub mod error;
pub mod filters;
pub mod models;
pub mod nn;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::{ImageShape, Tensor};

/// FNV-1a over raw bytes; used for cheap content fingerprints (model params,
/// configs) that must be stable across platforms. Not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Extends an FNV-1a fingerprint with a slice of `f64` values (their IEEE bit
/// patterns, little-endian).
pub fn fnv1a64_f64(seed: u64, values: &[f64]) -> u64 {
    let mut hash = seed;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_stable() {
        // Reference value for "hello" from the published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn fnv_f64_distinguishes_sign_and_order() {
        let a = fnv1a64_f64(0, &[1.0, 2.0]);
        let b = fnv1a64_f64(0, &[2.0, 1.0]);
        let c = fnv1a64_f64(0, &[-1.0, 2.0]);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
