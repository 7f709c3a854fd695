// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-layer ReLU sparse autoencoder.
//!
//! ```text
//! z     = ReLU(W_enc (h - b_dec) + b_enc)
//! h_hat = W_dec z + b_dec
//! loss  = mean_rows |h - h_hat|^2 + l1 * mean_rows |z|_1
//! ```
//!
//! Decoder columns are renormalized to unit length after every step. The
//! decoder is stored transposed (`w_dec.row(j)` is decoder column `j`), which
//! keeps both directions of the autoencoder contiguous in memory.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::ActivationSet;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Mat};
use crate::util::{read_file, seeded_rng, sha256_hex, write_file};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub d_model: usize,
    pub d_latent: usize,
    pub l1_coeff: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SaeConfig {
    pub fn for_width(d_model: usize) -> Self {
        Self {
            d_model,
            d_latent: 4 * d_model,
            l1_coeff: 0.05,
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_latent < self.d_model {
            return Err(Error::Config(format!(
                "need 0 < d_model <= d_latent, got d_model={} d_latent={}",
                self.d_model, self.d_latent
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.l1_coeff >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("l1_coeff must be >= 0 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeModel {
    /// `d_latent x d_model`
    pub w_enc: Mat,
    pub b_enc: Vec<f64>,
    /// Transposed decoder, `d_latent x d_model`.
    pub w_dec: Mat,
    pub b_dec: Vec<f64>,
    pub config: SaeConfig,
    /// Full-data objective after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Gradient of the SAE objective, same layout as [`SaeModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrad {
    pub w_enc: Mat,
    pub b_enc: Vec<f64>,
    pub w_dec: Mat,
    pub b_dec: Vec<f64>,
}

impl SaeModel {
    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn d_latent(&self) -> usize {
        self.config.d_latent
    }

    /// Tied initialization: random unit atoms, `W_enc = W_dec^T`, zero encoder
    /// bias and `b_dec` at the data mean.
    pub fn init(cfg: &SaeConfig, data_mean: &[f64]) -> Result<Self> {
        cfg.validate()?;
        if data_mean.len() != cfg.d_model {
            return Err(Error::DimensionMismatch {
                what: "data mean",
                expected: cfg.d_model,
                actual: data_mean.len(),
            });
        }
        let mut rng = seeded_rng(cfg.seed, 0x5AE);
        let mut w_dec = Mat::zeros(cfg.d_latent, cfg.d_model);
        for j in 0..cfg.d_latent {
            let row = w_dec.row_mut(j);
            for x in row.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            let n = norm(row);
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            w_enc: w_dec.clone(),
            b_enc: vec![0.0; cfg.d_latent],
            w_dec,
            b_dec: data_mean.to_vec(),
            config: cfg.clone(),
            loss_trace: Vec::new(),
        })
    }

    fn check_len(&self, what: &'static str, got: usize, want: usize) -> Result<()> {
        if got == want {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what,
                expected: want,
                actual: got,
            })
        }
    }

    /// Encoder pre-activations `W_enc (h - b_dec) + b_enc`.
    pub fn pre_activations(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_len("encode input", h.len(), self.d_model())?;
        let centered: Vec<f64> = h.iter().zip(&self.b_dec).map(|(a, b)| a - b).collect();
        Ok((0..self.d_latent())
            .map(|j| dot(self.w_enc.row(j), &centered) + self.b_enc[j])
            .collect())
    }

    pub fn encode(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .pre_activations(h)?
            .into_iter()
            .map(|p| if p > 0.0 { p } else { 0.0 })
            .collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.decode_direction(z)?;
        axpy(1.0, &self.b_dec, &mut h);
        Ok(h)
    }

    /// `W_dec z` without the bias: the residual-space image of a latent direction.
    pub fn decode_direction(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len("decode input", z.len(), self.d_latent())?;
        let mut h = vec![0.0; self.d_model()];
        for (j, &zj) in z.iter().enumerate() {
            if zj != 0.0 {
                axpy(zj, self.w_dec.row(j), &mut h);
            }
        }
        Ok(h)
    }

    /// Decoder column `j`.
    pub fn atom(&self, j: usize) -> &[f64] {
        self.w_dec.row(j)
    }

    pub fn is_finite(&self) -> bool {
        self.w_enc.is_finite() && self.w_dec.is_finite() && self.b_enc.iter().chain(&self.b_dec).all(|x| x.is_finite())
    }

    fn normalize_atoms(&mut self) {
        for j in 0..self.d_latent() {
            let row = self.w_dec.row_mut(j);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    fn round_to_f32(&mut self) {
        let r = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        r(&mut self.w_enc.data);
        r(&mut self.w_dec.data);
        r(&mut self.b_enc);
        r(&mut self.b_dec);
    }

    /// Whether the epoch objective never rose by more than `tol`.
    pub fn loss_non_increasing(&self, tol: f64) -> bool {
        self.loss_trace.windows(2).all(|w| w[1] <= w[0] + tol)
    }

    // -- checkpoint -----------------------------------------------------------

    /// Serialized checkpoint:
    ///
    /// ```text
    /// "FSAE" | u32 version=1 | u64 header_len | header JSON | f32 LE payload
    /// ```
    ///
    /// The header holds the config, loss trace and a tensor table of
    /// `{name, rows, cols, offset}` where `offset` counts f32 elements from
    /// the start of the payload. Tensors: `w_enc`, `b_enc`, `w_dec_t`, `b_dec`.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        if !self.is_finite() {
            return Err(Error::NonFinite("SAE weights".into()));
        }
        let tensors: [(&str, usize, usize, &[f64]); 4] = [
            ("w_enc", self.w_enc.rows, self.w_enc.cols, &self.w_enc.data),
            ("b_enc", 1, self.b_enc.len(), &self.b_enc),
            ("w_dec_t", self.w_dec.rows, self.w_dec.cols, &self.w_dec.data),
            ("b_dec", 1, self.b_dec.len(), &self.b_dec),
        ];
        let mut table = Vec::new();
        let mut offset = 0usize;
        for (name, rows, cols, _) in &tensors {
            table.push(TensorEntry {
                name: name.to_string(),
                rows: *rows,
                cols: *cols,
                offset,
            });
            offset += rows * cols;
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            loss_trace: self.loss_trace.clone(),
            tensors: table,
        })
        .expect("header serializes");

        let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, _, data) in &tensors {
            for &x in data.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: *CHECKPOINT_MAGIC,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != 1 {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated {
                expected: 16 + hlen as u64,
                actual: bytes.len() as u64,
            })?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::schema(format!("SAE checkpoint header: {e}")))?;
        let payload: Vec<f64> = bytes[header_end..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let expected = (header_end + total * 4) as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len() as u64,
            });
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::TrailingBytes(bytes.len() as u64 - expected));
        }
        let get = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
            let t = header
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::schema(format!("SAE checkpoint lacks tensor {name:?}")))?;
            if (t.rows, t.cols) != (rows, cols) {
                return Err(Error::schema(format!(
                    "tensor {name:?} has shape {}x{}, expected {rows}x{cols}",
                    t.rows, t.cols
                )));
            }
            Ok(payload[t.offset..t.offset + rows * cols].to_vec())
        };
        let (dl, dm) = (header.config.d_latent, header.config.d_model);
        let model = SaeModel {
            w_enc: Mat {
                rows: dl,
                cols: dm,
                data: get("w_enc", dl, dm)?,
            },
            b_enc: get("b_enc", 1, dl)?,
            w_dec: Mat {
                rows: dl,
                cols: dm,
                data: get("w_dec_t", dl, dm)?,
            },
            b_dec: get("b_dec", 1, dm)?,
            config: header.config,
            loss_trace: header.loss_trace,
        };
        if !model.is_finite() {
            return Err(Error::NonFinite("SAE checkpoint weights".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_checkpoint_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&read_file(path)?)
    }

    /// SHA-256 of the checkpoint encoding; identifies the SAE a control vector belongs to.
    pub fn checksum(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_checkpoint_bytes()?))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSAE";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: SaeConfig,
    loss_trace: Vec<f64>,
    tensors: Vec<TensorEntry>,
}

// ---------------------------------------------------------------------------
// Objective and gradient

/// Mean reconstruction error plus L1 penalty over `rows`.
pub fn sae_objective(m: &SaeModel, rows: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for h in rows {
        let z = m.encode(h).expect("row width checked by caller");
        let h_hat = m.decode(&z).expect("latent width matches");
        let err: f64 = h_hat.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
        total += err + m.config.l1_coeff * z.iter().sum::<f64>();
    }
    total / rows.len() as f64
}

/// Analytic gradient of [`sae_objective`]. At `pre = 0` the ReLU derivative is taken as 0.
pub fn sae_gradient(m: &SaeModel, rows: &[Vec<f64>]) -> (f64, SaeGrad) {
    let (dl, dm) = (m.d_latent(), m.d_model());
    let mut g = SaeGrad {
        w_enc: Mat::zeros(dl, dm),
        b_enc: vec![0.0; dl],
        w_dec: Mat::zeros(dl, dm),
        b_dec: vec![0.0; dm],
    };
    let inv_b = 1.0 / rows.len() as f64;
    let l1 = m.config.l1_coeff;
    let mut loss = 0.0;
    let mut centered = vec![0.0; dm];
    for h in rows {
        for ((c, x), b) in centered.iter_mut().zip(h).zip(&m.b_dec) {
            *c = x - b;
        }
        let pre: Vec<f64> = (0..dl).map(|j| dot(m.w_enc.row(j), &centered) + m.b_enc[j]).collect();
        let mut resid = m.b_dec.clone();
        let mut l1_sum = 0.0;
        for (j, &p) in pre.iter().enumerate() {
            if p > 0.0 {
                axpy(p, m.w_dec.row(j), &mut resid);
                l1_sum += p;
            }
        }
        for (r, x) in resid.iter_mut().zip(h) {
            *r -= x;
        }
        loss += dot(&resid, &resid) + l1 * l1_sum;

        let g_r: Vec<f64> = resid.iter().map(|r| 2.0 * r * inv_b).collect();
        axpy(1.0, &g_r, &mut g.b_dec);
        for (j, &p) in pre.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            axpy(p, &g_r, g.w_dec.row_mut(j));
            let dpre = dot(m.w_dec.row(j), &g_r) + l1 * inv_b;
            axpy(dpre, &centered, g.w_enc.row_mut(j));
            g.b_enc[j] += dpre;
            axpy(-dpre, m.w_enc.row(j), &mut g.b_dec);
        }
    }
    (loss * inv_b, g)
}

fn apply(m: &mut SaeModel, g: &SaeGrad, lr: f64) {
    axpy(-lr, &g.w_enc.data, &mut m.w_enc.data);
    axpy(-lr, &g.w_dec.data, &mut m.w_dec.data);
    axpy(-lr, &g.b_enc, &mut m.b_enc);
    axpy(-lr, &g.b_dec, &mut m.b_dec);
}

/// Mini-batch gradient descent. Batches are drawn from a per-epoch seeded
/// shuffle; a trailing partial batch is used as-is. Final weights are
/// rounded to f32 so checkpoints reload bit-exactly.
pub fn train_sae(data: &ActivationSet, cfg: &SaeConfig) -> Result<SaeModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("SAE training data".into()));
    }
    if data.d_model != cfg.d_model {
        return Err(Error::DimensionMismatch {
            what: "SAE training data",
            expected: cfg.d_model,
            actual: data.d_model,
        });
    }
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} rows is fewer than batch_size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let rows = data.rows_f64();
    let (mean, _) = crate::linalg::mean_rows(rows.iter().map(Vec::as_slice), cfg.d_model);
    let mut model = SaeModel::init(cfg, &mean)?;
    let mut rng = seeded_rng(cfg.seed, 0xBA7C4);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut batch: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i].clone()));
            let (loss, grad) = sae_gradient(&model, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("SAE loss at epoch {epoch}, batch {b}")));
            }
            apply(&mut model, &grad, cfg.learning_rate);
            model.normalize_atoms();
        }
        let loss = sae_objective(&model, &rows);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("SAE loss at end of epoch {epoch}")));
        }
        model.loss_trace.push(loss);
    }
    model.round_to_f32();
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeMetrics {
    /// Mean of `|h - h_hat| / |h|` over rows with nonzero `h`.
    pub recon_rel_err: f64,
    /// Mean count of strictly positive latent entries.
    pub mean_l0: f64,
    /// Latents that never fire on the data.
    pub dead_features: usize,
}

pub fn sae_metrics(m: &SaeModel, data: &ActivationSet) -> Result<SaeMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("SAE metric data".into()));
    }
    let mut rel = 0.0;
    let mut rel_n = 0usize;
    let mut l0 = 0usize;
    let mut fired = vec![false; m.d_latent()];
    for r in &data.records {
        let h = r.hidden_f64();
        let z = m.encode(&h)?;
        let h_hat = m.decode(&z)?;
        for (j, &zj) in z.iter().enumerate() {
            if zj > 0.0 {
                l0 += 1;
                fired[j] = true;
            }
        }
        let hn = norm(&h);
        if hn > 0.0 {
            rel += norm(&crate::linalg::sub(&h, &h_hat)) / hn;
            rel_n += 1;
        }
    }
    Ok(SaeMetrics {
        recon_rel_err: if rel_n > 0 { rel / rel_n as f64 } else { 0.0 },
        mean_l0: l0 as f64 / data.len() as f64,
        dead_features: fired.iter().filter(|f| !**f).count(),
    })
}
