// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the criterion benches. Sizes match the defaults the
//! pipeline runs with, so timings track what `facetsteer pipeline` does.

use facetsteer_core::steering::ToyConfig;
use facetsteer_core::util::gaussian_rows;
use facetsteer_core::{SaeConfig, SaeModel, ToyModel};

pub const D_MODEL: usize = 32;
pub const D_LATENT: usize = 64;

/// Freshly initialized SAE and `n` standard normal input rows.
pub fn sae_fixture(n: usize, seed: u64) -> (SaeModel, Vec<Vec<f64>>) {
    let cfg = SaeConfig {
        d_latent: D_LATENT,
        seed,
        ..SaeConfig::for_width(D_MODEL)
    };
    let sae = SaeModel::init(&cfg, &vec![0.0; D_MODEL]).expect("valid bench config");
    (sae, gaussian_rows(seed, 1, n, D_MODEL, 1.0))
}

/// Default toy residual model and `n` inputs.
pub fn toy_fixture(n: usize, seed: u64) -> (ToyModel, Vec<Vec<f64>>) {
    let cfg = ToyConfig::default();
    let model = ToyModel::new(cfg).expect("default toy config");
    (model, gaussian_rows(seed, 2, n, cfg.d_model, 1.0))
}
