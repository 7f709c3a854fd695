// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small shared helpers: seeded RNGs, checksums, stable hashing, number formatting.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic RNG for a (seed, stream) pair. Distinct streams keep stages
/// independent when they share a global seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` rows of `d` independent `N(0, scale^2)` draws.
pub fn gaussian_rows(seed: u64, stream: u64, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed, stream);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let x: f64 = rng.sample(StandardNormal);
                    scale * x
                })
                .collect()
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// 64-bit FNV-1a. Used for feature hashing, so it must never change.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Format with six significant digits in plain decimal notation, falling back
/// to scientific notation for very large or very small magnitudes.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..=14).contains(&exp) {
        return format!("{x:.5e}");
    }
    if exp > 5 {
        let unit = 10f64.powi(exp - 5);
        return format!("{:.0}", (x / unit).round() * unit);
    }
    let decimals = (5 - exp) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
