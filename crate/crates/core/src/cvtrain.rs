// SPDX-License-Identifier: MIT OR Apache-2.0

//! Control-vector learning in SAE latent space.
//!
//! For a negative-sample code `z` and control vector `v` (zero off the mask):
//!
//! ```text
//! z+     = (z + v) / |z + v|
//! c+     = clamp(<z+, mu+/|mu+|>, -1+eps, 1-eps)      c- = <z+, mu-/|mu-|>
//! c~+    = cos(acos(c+) + m_pos)                     c~- = c- + m_neg
//! L_ce   = mean softplus(s c~- - s c~+)               (two-way CE, positive target)
//! L_dist = mean |P z+ - u+| - |P z+ - u-|             (P keeps mask coordinates)
//! L      = L_ce + beta L_dist + lambda |v * m|^2
//! ```
//!
//! with `u+-` the masked centroids normalized to unit length. Optimization is
//! projected gradient descent starting from `(mu+ - mu-) * m`; centroids stay
//! fixed for the whole run.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationSet;
use crate::corpus::{FacetId, Polarity};
use crate::error::{Error, Result};
use crate::featsel::FeatureMask;
use crate::linalg::{axpy, dot, mean_rows, norm};
use crate::sae::SaeModel;
use crate::util::{read_to_string, seeded_rng, write_file};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub mu_pos: Vec<f64>,
    pub mu_neg: Vec<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn compute_centroids(codes: &[Vec<f64>], labels: &[Polarity]) -> Result<Centroids> {
    if codes.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: codes.len(),
            actual: labels.len(),
        });
    }
    let d = codes.first().map_or(0, Vec::len);
    let rows = |p: Polarity| {
        codes
            .iter()
            .zip(labels)
            .filter(move |(_, &l)| l == p)
            .map(|(r, _)| r.as_slice())
    };
    let (mu_pos, n_pos) = mean_rows(rows(Polarity::Positive), d);
    let (mu_neg, n_neg) = mean_rows(rows(Polarity::Negative), d);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Empty(format!("centroid class (pos={n_pos}, neg={n_neg})")));
    }
    Ok(Centroids {
        mu_pos,
        mu_neg,
        n_pos,
        n_neg,
    })
}

/// Masked centroid difference `(mu+ - mu-) * m`.
pub fn init_cv(c: &Centroids, m: &FeatureMask) -> Result<Vec<f64>> {
    if c.mu_pos.len() != m.d_latent() {
        return Err(Error::DimensionMismatch {
            what: "mask",
            expected: c.mu_pos.len(),
            actual: m.d_latent(),
        });
    }
    Ok(c.mu_pos
        .iter()
        .zip(&c.mu_neg)
        .zip(&m.mask)
        .map(|((p, n), &on)| if on { p - n } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the distance term.
    pub beta: f64,
    /// Weight of the L2 penalty on the masked vector.
    pub lambda: f64,
    /// Additive angular margin on the positive prototype.
    pub m_pos: f64,
    /// Additive cosine margin on the negative prototype.
    pub m_neg: f64,
    /// Logit scale (inverse temperature).
    pub scale: f64,
    pub clamp_eps: f64,
    /// When false the cross-entropy term is dropped (ablation).
    pub contrastive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 1e-3,
            m_pos: 0.2,
            m_neg: 0.1,
            scale: 16.0,
            clamp_eps: 1e-6,
            contrastive: true,
        }
    }
}

impl LossConfig {
    /// Weights used by the contrastive ablation. A strong pull term and a
    /// firmer L2 penalty keep `v` short enough that held-out negatives gain
    /// similarity to the positive centroid instead of collapsing onto the
    /// centroid difference.
    pub fn ablation() -> Self {
        Self {
            beta: 50.0,
            lambda: 0.3,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.beta >= 0.0
            && self.lambda >= 0.0
            && self.m_pos > 0.0
            && self.m_neg > 0.0
            && self.scale >= 0.0
            && self.clamp_eps > 0.0
            && self.clamp_eps < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_dist: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Normalized prototypes derived once from centroids and mask.
struct Prototypes {
    mu_pos: Vec<f64>,
    mu_neg: Vec<f64>,
    u_pos: Vec<f64>,
    u_neg: Vec<f64>,
    active: Vec<usize>,
}

impl Prototypes {
    fn new(c: &Centroids, m: &FeatureMask) -> Result<Self> {
        let d = m.d_latent();
        if c.mu_pos.len() != d || c.mu_neg.len() != d {
            return Err(Error::DimensionMismatch {
                what: "centroids",
                expected: d,
                actual: c.mu_pos.len(),
            });
        }
        let unit = |v: &[f64], what: &str| -> Result<Vec<f64>> {
            let n = norm(v);
            if n > 0.0 && n.is_finite() {
                Ok(v.iter().map(|x| x / n).collect())
            } else {
                Err(Error::ZeroNorm(what.to_string()))
            }
        };
        let masked = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(&m.mask)
                .map(|(x, &on)| if on { *x } else { 0.0 })
                .collect()
        };
        Ok(Self {
            mu_pos: unit(&c.mu_pos, "positive centroid")?,
            mu_neg: unit(&c.mu_neg, "negative centroid")?,
            u_pos: unit(&masked(&c.mu_pos), "masked positive centroid")?,
            u_neg: unit(&masked(&c.mu_neg), "masked negative centroid")?,
            active: m.indices(),
        })
    }
}

fn check_inputs(v: &[f64], batch: &[Vec<f64>], m: &FeatureMask) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let d = m.d_latent();
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            what: "control vector",
            expected: d,
            actual: v.len(),
        });
    }
    if let Some(z) = batch.iter().find(|z| z.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "batch code",
            expected: d,
            actual: z.len(),
        });
    }
    Ok(())
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Margined cosines `(cos(acos(c+) + m_pos), c- + m_neg)`, with `c+` clamped
/// to `[-1 + eps, 1 - eps]`.
pub fn margined_cosines(c_pos: f64, c_neg: f64, cfg: &LossConfig) -> (f64, f64) {
    let c = c_pos.clamp(-1.0 + cfg.clamp_eps, 1.0 - cfg.clamp_eps);
    ((c.acos() + cfg.m_pos).cos(), c_neg + cfg.m_neg)
}

fn evaluate(
    v: &[f64],
    batch: &[Vec<f64>],
    p: &Prototypes,
    m: &FeatureMask,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let d = v.len();
    let inv_b = 1.0 / batch.len() as f64;
    let (lo, hi) = (-1.0 + cfg.clamp_eps, 1.0 - cfg.clamp_eps);
    let s = cfg.scale;

    let mut l_ce = 0.0;
    let mut l_dist = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; d]);
    let mut w = vec![0.0; d];
    let mut g = vec![0.0; d];

    for (i, z) in batch.iter().enumerate() {
        for ((wj, zj), vj) in w.iter_mut().zip(z).zip(v) {
            *wj = zj + vj;
        }
        let n = norm(&w);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm(format!("injected code z+v for batch row {i}")));
        }
        let zp: Vec<f64> = w.iter().map(|x| x / n).collect();

        let c_pos_raw = dot(&zp, &p.mu_pos);
        let (ct_pos, ct_neg) = margined_cosines(c_pos_raw, dot(&zp, &p.mu_neg), cfg);
        let theta = c_pos_raw.clamp(lo, hi).acos();
        let gap = s * ct_neg - s * ct_pos;
        if cfg.contrastive {
            l_ce += softplus(gap);
        }

        let (mut dp2, mut dn2) = (0.0, 0.0);
        for &j in &p.active {
            dp2 += (zp[j] - p.u_pos[j]).powi(2);
            dn2 += (zp[j] - p.u_neg[j]).powi(2);
        }
        let (dp, dn) = (dp2.sqrt(), dn2.sqrt());
        l_dist += dp - dn;

        if let Some(grad) = grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
            if cfg.contrastive && s != 0.0 {
                let delta = logistic(gap);
                // d c~+ / d c+; zero where the clamp is active
                let dct = if c_pos_raw > lo && c_pos_raw < hi {
                    (theta + cfg.m_pos).sin() / theta.sin()
                } else {
                    0.0
                };
                axpy(-delta * s * dct, &p.mu_pos, &mut g);
                axpy(delta * s, &p.mu_neg, &mut g);
            }
            if cfg.beta != 0.0 {
                for &j in &p.active {
                    let mut gj = 0.0;
                    if dp > 0.0 {
                        gj += (zp[j] - p.u_pos[j]) / dp;
                    }
                    if dn > 0.0 {
                        gj -= (zp[j] - p.u_neg[j]) / dn;
                    }
                    g[j] += cfg.beta * gj;
                }
            }
            // back through z+ = w / |w|
            let radial = dot(&g, &zp);
            for ((gr, gj), zj) in grad.iter_mut().zip(&g).zip(&zp) {
                *gr += inv_b * (gj - radial * zj) / n;
            }
        }
    }

    let l_ce = l_ce * inv_b;
    let l_dist = l_dist * inv_b;
    let l_reg: f64 = v.iter().zip(&m.mask).map(|(x, &on)| if on { x * x } else { 0.0 }).sum();
    let total = l_ce + cfg.beta * l_dist + cfg.lambda * l_reg;
    if !total.is_finite() {
        return Err(Error::NonFinite("control-vector loss".into()));
    }

    if let Some(grad) = grad.as_mut() {
        for ((gr, x), &on) in grad.iter_mut().zip(v).zip(&m.mask) {
            if on {
                *gr += 2.0 * cfg.lambda * x;
            } else {
                *gr = 0.0;
            }
        }
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("control-vector gradient".into()));
        }
    }
    Ok((
        LossBreakdown {
            l_ce,
            l_dist,
            l_reg,
            total,
        },
        grad,
    ))
}

/// Full objective on a batch of negative-sample codes.
pub fn loss_total(
    v: &[f64],
    batch: &[Vec<f64>],
    c: &Centroids,
    m: &FeatureMask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_inputs(v, batch, m)?;
    let p = Prototypes::new(c, m)?;
    Ok(evaluate(v, batch, &p, m, cfg, false)?.0)
}

/// Analytic gradient of [`loss_total`] with respect to `v`, zero off the mask.
pub fn grad_loss(v: &[f64], batch: &[Vec<f64>], c: &Centroids, m: &FeatureMask, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_inputs(v, batch, m)?;
    let p = Prototypes::new(c, m)?;
    Ok(evaluate(v, batch, &p, m, cfg, true)?.1.expect("gradient requested"))
}

/// Central finite differences of [`loss_total`] on each active coordinate.
pub fn fd_grad_oracle(
    v: &[f64],
    batch: &[Vec<f64>],
    c: &Centroids,
    m: &FeatureMask,
    cfg: &LossConfig,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut out = vec![0.0; v.len()];
    let mut probe = v.to_vec();
    for j in m.indices() {
        probe[j] = v[j] + step;
        let up = loss_total(&probe, batch, c, m, cfg)?.total;
        probe[j] = v[j] - step;
        let down = loss_total(&probe, batch, c, m, cfg)?.total;
        probe[j] = v[j];
        let d = (up - down) / (2.0 * step);
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {j}")));
        }
        out[j] = d;
    }
    Ok(out)
}

/// Largest coordinate-wise relative error, `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Seeded random loss instance for gradient checks: half-rectified Gaussian
/// codes, folded-Gaussian centroids, and a random `v` on a random mask.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub v: Vec<f64>,
    pub batch: Vec<Vec<f64>>,
    pub centroids: Centroids,
    pub mask: FeatureMask,
}

impl GradInstance {
    pub fn random(seed: u64, d_latent: usize, d_steer: usize, batch: usize) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        if d_steer == 0 || d_steer > d_latent || batch == 0 {
            return Err(Error::Config(format!(
                "need 0 < d_steer <= d_latent and batch > 0, got {d_steer}, {d_latent}, {batch}"
            )));
        }
        let mut rng = seeded_rng(seed, 0x6_2AD);
        let relu = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d_latent)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(rng);
                    x.max(0.0)
                })
                .collect()
        };
        let rows: Vec<Vec<f64>> = (0..batch).map(|_| relu(&mut rng)).collect();
        let mut centroid = || -> Vec<f64> {
            (0..d_latent)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x.abs()
                })
                .collect()
        };
        let mu_pos = centroid();
        let mu_neg = centroid();
        let mut idx: Vec<usize> = (0..d_latent).collect();
        idx.shuffle(&mut rng);
        let mask = FeatureMask::from_indices(d_latent, &idx[..d_steer])?;
        let v = mask
            .mask
            .iter()
            .map(|&on| {
                let x: f64 = StandardNormal.sample(&mut rng);
                if on {
                    0.3 * x
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            v,
            batch: rows,
            centroids: Centroids {
                mu_pos,
                mu_neg,
                n_pos: 1,
                n_neg: 1,
            },
            mask,
        })
    }

    pub fn analytic(&self, cfg: &LossConfig) -> Result<Vec<f64>> {
        grad_loss(&self.v, &self.batch, &self.centroids, &self.mask, cfg)
    }

    pub fn finite_difference(&self, cfg: &LossConfig, step: f64) -> Result<Vec<f64>> {
        fd_grad_oracle(&self.v, &self.batch, &self.centroids, &self.mask, cfg, step)
    }
}

// ---------------------------------------------------------------------------
// Optimization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            iterations: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Projected gradient descent over batches of negative codes. `on_step` sees
/// `v` after every update and projection.
pub fn optimize_cv(
    v0: &[f64],
    negatives: &[Vec<f64>],
    c: &Centroids,
    m: &FeatureMask,
    cfg: &LossConfig,
    opt: &OptConfig,
    mut on_step: impl FnMut(usize, &[f64]),
) -> Result<(Vec<f64>, LossBreakdown)> {
    cfg.validate()?;
    if negatives.is_empty() {
        return Err(Error::Empty("negative codes".into()));
    }
    if opt.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    check_inputs(v0, negatives, m)?;
    let p = Prototypes::new(c, m)?;
    let mut rng = seeded_rng(opt.seed, 0xC7_7A1);
    let mut order: Vec<usize> = (0..negatives.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut batch: Vec<Vec<f64>> = Vec::with_capacity(opt.batch_size);

    let mut v = v0.to_vec();
    for it in 0..opt.iterations {
        batch.clear();
        while batch.len() < opt.batch_size.min(negatives.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(negatives[order[cursor]].clone());
            cursor += 1;
        }
        let (_, grad) =
            evaluate(&v, &batch, &p, m, cfg, true).map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
        let grad = grad.expect("gradient requested");
        axpy(-opt.learning_rate, &grad, &mut v);
        for (x, &on) in v.iter_mut().zip(&m.mask) {
            if !on {
                *x = 0.0;
            }
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("control vector diverged at iteration {it}")));
        }
        on_step(it, &v);
    }
    let (final_loss, _) = evaluate(&v, negatives, &p, m, cfg, false)?;
    Ok((v, final_loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub iterations: usize,
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub loss_config: LossConfig,
    pub opt_config: OptConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    pub facet: FacetId,
    /// Dense latent vector, zero off the mask.
    pub v: Vec<f64>,
    pub mask_indices: Vec<usize>,
    /// `W_dec v`, the residual-space image.
    pub decoded: Vec<f64>,
    pub layer: u32,
    pub model_tag: String,
    pub sae_checksum: String,
    pub training_meta: TrainingMeta,
}

impl ControlVector {
    pub fn d_latent(&self) -> usize {
        self.v.len()
    }

    pub fn d_model(&self) -> usize {
        self.decoded.len()
    }

    /// Check checksum and the decoded image against an SAE.
    pub fn verify_against(&self, sae: &SaeModel) -> Result<()> {
        if sae.checksum()? != self.sae_checksum {
            return Err(Error::Invariant("control vector was trained on a different SAE".into()));
        }
        let expect = sae.decode_direction(&self.v)?;
        if expect != self.decoded {
            return Err(Error::Invariant("decoded vector does not match W_dec v".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = CvFile {
            facet: self.facet,
            d_latent: self.d_latent(),
            mask_indices: self.mask_indices.clone(),
            values: self.mask_indices.iter().map(|&i| self.v[i]).collect(),
            decoded: self.decoded.clone(),
            layer: self.layer,
            model_tag: self.model_tag.clone(),
            sae_checksum: self.sae_checksum.clone(),
            training_meta: self.training_meta.clone(),
        };
        serde_json::to_string_pretty(&file).expect("control vector serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CvFile = serde_json::from_str(s).map_err(|e| Error::schema(format!("control vector: {e}")))?;
        if f.values.len() != f.mask_indices.len() {
            return Err(Error::Invariant(format!(
                "{} value(s) for {} mask index(es): values off the mask are not allowed",
                f.values.len(),
                f.mask_indices.len()
            )));
        }
        let mut v = vec![0.0; f.d_latent];
        let mut seen = vec![false; f.d_latent];
        for (&i, &x) in f.mask_indices.iter().zip(&f.values) {
            if i >= f.d_latent || seen[i] {
                return Err(Error::Invariant(format!("bad or repeated mask index {i}")));
            }
            seen[i] = true;
            v[i] = x;
        }
        if v.iter().chain(&f.decoded).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("control vector file".into()));
        }
        Ok(Self {
            facet: f.facet,
            v,
            mask_indices: f.mask_indices,
            decoded: f.decoded,
            layer: f.layer,
            model_tag: f.model_tag,
            sae_checksum: f.sae_checksum,
            training_meta: f.training_meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CvFile {
    facet: FacetId,
    d_latent: usize,
    mask_indices: Vec<usize>,
    values: Vec<f64>,
    decoded: Vec<f64>,
    layer: u32,
    model_tag: String,
    sae_checksum: String,
    training_meta: TrainingMeta,
}

pub fn export_cv(cv: &ControlVector, path: &Path) -> Result<()> {
    write_file(path, cv.to_json().as_bytes())
}

pub fn import_cv(path: &Path) -> Result<ControlVector> {
    ControlVector::from_json(&read_to_string(path)?)
}

/// SAE codes of one facet's records, with labels, in file order.
pub fn facet_codes(sae: &SaeModel, acts: &ActivationSet, facet: FacetId) -> Result<(Vec<Vec<f64>>, Vec<Polarity>)> {
    let mut codes = Vec::new();
    let mut labels = Vec::new();
    for r in &acts.records {
        if let Some((f, p)) = r.label() {
            if f == facet {
                codes.push(sae.encode(&r.hidden_f64())?);
                labels.push(p);
            }
        }
    }
    Ok((codes, labels))
}

fn split_negatives(codes: Vec<Vec<f64>>, labels: &[Polarity]) -> Vec<Vec<f64>> {
    codes
        .into_iter()
        .zip(labels)
        .filter(|(_, &l)| l == Polarity::Negative)
        .map(|(c, _)| c)
        .collect()
}

pub fn train_cv(
    sae: &SaeModel,
    acts: &ActivationSet,
    facet: FacetId,
    m: &FeatureMask,
    cfg: &LossConfig,
    opt: &OptConfig,
) -> Result<ControlVector> {
    train_cv_observed(sae, acts, facet, m, cfg, opt, |_, _| {})
}

/// [`train_cv`] with a per-step observer on `v`.
pub fn train_cv_observed(
    sae: &SaeModel,
    acts: &ActivationSet,
    facet: FacetId,
    m: &FeatureMask,
    cfg: &LossConfig,
    opt: &OptConfig,
    on_step: impl FnMut(usize, &[f64]),
) -> Result<ControlVector> {
    if acts.d_model != sae.d_model() {
        return Err(Error::DimensionMismatch {
            what: "activations vs SAE",
            expected: sae.d_model(),
            actual: acts.d_model,
        });
    }
    let (codes, labels) = facet_codes(sae, acts, facet)?;
    let centroids = compute_centroids(&codes, &labels).map_err(|e| Error::Empty(format!("facet {facet}: {e}")))?;
    let v0 = init_cv(&centroids, m)?;
    let negatives = split_negatives(codes, &labels);
    let initial_loss = loss_total(&v0, &negatives, &centroids, m, cfg)?;
    let (v, final_loss) = optimize_cv(&v0, &negatives, &centroids, m, cfg, opt, on_step)?;
    Ok(ControlVector {
        facet,
        decoded: sae.decode_direction(&v)?,
        v,
        mask_indices: m.indices(),
        layer: acts.layer,
        model_tag: acts.model_tag.clone(),
        sae_checksum: sae.checksum()?,
        training_meta: TrainingMeta {
            seed: opt.seed,
            iterations: opt.iterations,
            initial_loss,
            final_loss,
            loss_config: cfg.clone(),
            opt_config: opt.clone(),
        },
    })
}

/// Train one vector per facet in `masks`. Facets run in parallel; output order
/// follows the map order.
pub fn train_cvs(
    sae: &SaeModel,
    acts: &ActivationSet,
    masks: &BTreeMap<FacetId, FeatureMask>,
    cfg: &LossConfig,
    opt: &OptConfig,
) -> Result<Vec<ControlVector>> {
    let jobs: Vec<(&FacetId, &FeatureMask)> = masks.iter().collect();
    jobs.par_iter()
        .map(|(facet, m)| train_cv(sae, acts, **facet, m, cfg, opt))
        .collect()
}

/// Contrastive activation addition: `mean(h | pos) - mean(h | neg)` in residual space.
pub fn caa_vector(acts: &ActivationSet, facet: FacetId) -> Result<Vec<f64>> {
    let mean = |p: Polarity| {
        let rows: Vec<Vec<f64>> = acts.select(facet, p).map(|r| r.hidden_f64()).collect();
        mean_rows(rows.iter().map(Vec::as_slice), acts.d_model)
    };
    let (mp, np) = mean(Polarity::Positive);
    let (mn, nn) = mean(Polarity::Negative);
    if np == 0 || nn == 0 {
        return Err(Error::Empty(format!("facet {facet} class (pos={np}, neg={nn})")));
    }
    Ok(mp.iter().zip(&mn).map(|(a, b)| a - b).collect())
}

// ---------------------------------------------------------------------------
// Contrastive ablation harness

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidSimilarity {
    /// Mean `<z+, mu+/|mu+|>` over held-out negatives.
    pub to_positive: f64,
    /// Mean `<z+, mu-/|mu-|>` over held-out negatives.
    pub to_negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub facet: FacetId,
    pub n_train_negatives: usize,
    pub n_held_out_negatives: usize,
    pub before_training: CentroidSimilarity,
    pub without_contrastive: CentroidSimilarity,
    pub with_contrastive: CentroidSimilarity,
}

impl AblationReport {
    /// With the contrastive term, similarity to the positive centroid rises
    /// and similarity to the negative centroid falls.
    pub fn contrastive_pattern_holds(&self) -> bool {
        self.with_contrastive.to_positive > self.before_training.to_positive
            && self.with_contrastive.to_negative < self.before_training.to_negative
    }
}

pub fn centroid_similarity(v: &[f64], codes: &[Vec<f64>], c: &Centroids) -> Result<CentroidSimilarity> {
    if codes.is_empty() {
        return Err(Error::Empty("similarity codes".into()));
    }
    let unit = |x: &[f64]| -> Result<Vec<f64>> {
        let n = norm(x);
        if n > 0.0 {
            Ok(x.iter().map(|a| a / n).collect())
        } else {
            Err(Error::ZeroNorm("centroid".into()))
        }
    };
    let (up, un) = (unit(&c.mu_pos)?, unit(&c.mu_neg)?);
    let (mut sp, mut sn) = (0.0, 0.0);
    for z in codes {
        let w: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + b).collect();
        let zp = unit(&w).map_err(|_| Error::ZeroNorm("injected code".into()))?;
        sp += dot(&zp, &up);
        sn += dot(&zp, &un);
    }
    let n = codes.len() as f64;
    Ok(CentroidSimilarity {
        to_positive: sp / n,
        to_negative: sn / n,
    })
}

/// Compare the initialization with training with and without the
/// cross-entropy term. A seeded `held_out_fraction` of the facet's negatives
/// is excluded from centroids and training and used only for the similarity
/// readout.
pub fn cl_ablation(
    sae: &SaeModel,
    acts: &ActivationSet,
    facet: FacetId,
    m: &FeatureMask,
    cfg: &LossConfig,
    opt: &OptConfig,
    held_out_fraction: f64,
) -> Result<AblationReport> {
    let (codes, labels) = facet_codes(sae, acts, facet)?;
    let mut neg_idx: Vec<usize> = (0..codes.len()).filter(|&i| labels[i] == Polarity::Negative).collect();
    let mut rng = seeded_rng(opt.seed, 0xAB1A);
    neg_idx.shuffle(&mut rng);
    let k = ((held_out_fraction * neg_idx.len() as f64).round() as usize).clamp(1, neg_idx.len().saturating_sub(1));
    if neg_idx.len() < 2 {
        return Err(Error::Empty(format!("facet {facet} needs >= 2 negatives")));
    }
    let held: std::collections::HashSet<usize> = neg_idx[..k].iter().copied().collect();
    let (mut train_codes, mut train_labels, mut held_codes) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (z, l)) in codes.into_iter().zip(labels).enumerate() {
        if held.contains(&i) {
            held_codes.push(z);
        } else {
            train_codes.push(z);
            train_labels.push(l);
        }
    }
    let centroids = compute_centroids(&train_codes, &train_labels)?;
    let v0 = init_cv(&centroids, m)?;
    let negatives = split_negatives(train_codes, &train_labels);

    let run = |contrastive: bool| -> Result<Vec<f64>> {
        let cfg = LossConfig {
            contrastive,
            ..cfg.clone()
        };
        Ok(optimize_cv(&v0, &negatives, &centroids, m, &cfg, opt, |_, _| {})?.0)
    };
    Ok(AblationReport {
        facet,
        n_train_negatives: negatives.len(),
        n_held_out_negatives: held_codes.len(),
        before_training: centroid_similarity(&v0, &held_codes, &centroids)?,
        without_contrastive: centroid_similarity(&run(false)?, &held_codes, &centroids)?,
        with_contrastive: centroid_similarity(&run(true)?, &held_codes, &centroids)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(d: usize, idx: &[usize]) -> FeatureMask {
        FeatureMask::from_indices(d, idx).unwrap()
    }

    #[test]
    fn centroids_are_class_means() {
        use Polarity::*;
        let codes = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 5.0]];
        let c = compute_centroids(&codes, &[Positive, Positive, Negative]).unwrap();
        assert_eq!(c.mu_pos, vec![2.0, 3.0]);
        assert_eq!(c.mu_neg, vec![5.0, 5.0]);
        assert_eq!((c.n_pos, c.n_neg), (2, 1));
        assert!(compute_centroids(&codes, &[Positive; 3]).is_err());
    }

    #[test]
    fn init_is_masked_difference() {
        let c = Centroids {
            mu_pos: vec![1.0, 2.0, 3.0],
            mu_neg: vec![0.0, 2.0, 1.0],
            n_pos: 1,
            n_neg: 1,
        };
        assert_eq!(init_cv(&c, &mask(3, &[0, 2])).unwrap(), vec![1.0, 0.0, 2.0]);
        assert_eq!(init_cv(&c, &mask(3, &[])).unwrap(), vec![0.0; 3]);
        let same = Centroids {
            mu_neg: c.mu_pos.clone(),
            ..c
        };
        assert_eq!(init_cv(&same, &mask(3, &[0, 1, 2])).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn equal_margined_logits_give_ln2() {
        // z+ has c+ = cos(acos(0.1) - 0.2) and is orthogonal to mu-, so
        // c~+ = 0.1 = 0 + m_neg = c~-.
        let cfg = LossConfig {
            m_pos: 0.2,
            m_neg: 0.1,
            beta: 0.0,
            lambda: 0.0,
            ..LossConfig::default()
        };
        let c_target: f64 = (0.1f64.acos() - 0.2).cos();
        let z = vec![c_target, (1.0 - c_target * c_target).sqrt(), 0.0];
        let cents = Centroids {
            mu_pos: vec![1.0, 0.0, 0.0],
            mu_neg: vec![0.0, 0.0, 1.0],
            n_pos: 1,
            n_neg: 1,
        };
        let l = loss_total(&[0.0; 3], &[z.clone(), z], &cents, &mask(3, &[0, 2]), &cfg).unwrap();
        assert!((l.l_ce - std::f64::consts::LN_2).abs() < 1e-12, "{}", l.l_ce);
    }

    #[test]
    fn dist_at_positive_prototype() {
        let cents = Centroids {
            mu_pos: vec![3.0, 0.0, 4.0],
            mu_neg: vec![0.0, 1.0, 1.0],
            n_pos: 1,
            n_neg: 1,
        };
        let m = mask(3, &[0, 1, 2]);
        let u_pos = [0.6, 0.0, 0.8];
        let u_neg = [0.0, 1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()];
        let l = loss_total(&[0.0; 3], &[u_pos.to_vec()], &cents, &m, &LossConfig::default()).unwrap();
        let gap = norm(&crate::linalg::sub(&u_pos, &u_neg));
        assert!((l.l_dist + gap).abs() < 1e-12);
    }

    #[test]
    fn angular_margin_near_clamp() {
        // 40-digit reference: cos(acos(1 - 1e-6) + 0.2)
        #[allow(clippy::excessive_precision)]
        const REFERENCE: f64 = 0.979_784_636_982_866_051_8;
        let cfg = LossConfig::default();
        let (at_clamp, _) = margined_cosines(1.0 - 1e-6, 0.0, &cfg);
        assert!((at_clamp - REFERENCE).abs() < 1e-12, "{at_clamp}");
        // values beyond the clamp collapse onto it
        assert_eq!(margined_cosines(1.0, 0.0, &cfg).0, at_clamp);
        // and sit within the clamp distortion of cos(m_pos)
        assert!((at_clamp - 0.2f64.cos()).abs() < 3e-4);
        assert_eq!(margined_cosines(0.3, 0.25, &cfg).1, 0.35);
    }

    #[test]
    fn total_is_weighted_sum() {
        let cents = Centroids {
            mu_pos: vec![1.0, 0.5, 0.2, 0.0],
            mu_neg: vec![0.2, 0.6, 1.0, 0.1],
            n_pos: 1,
            n_neg: 1,
        };
        let m = mask(4, &[0, 2]);
        let cfg = LossConfig {
            beta: 0.7,
            lambda: 0.3,
            ..LossConfig::default()
        };
        let v = [0.3, 0.0, -0.1, 0.0];
        let batch = vec![vec![0.1, 0.9, 0.4, 0.2], vec![0.5, 0.1, 0.8, 0.0]];
        let l = loss_total(&v, &batch, &cents, &m, &cfg).unwrap();
        let expect = l.l_ce + 0.7 * l.l_dist + 0.3 * l.l_reg;
        assert!((l.total - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        assert!((l.l_reg - 0.1).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_zero_off_mask_and_vanishes_with_scale() {
        let cents = Centroids {
            mu_pos: vec![1.0, 0.5, 0.2, 0.3],
            mu_neg: vec![0.2, 0.6, 1.0, 0.1],
            n_pos: 1,
            n_neg: 1,
        };
        let m = mask(4, &[1, 3]);
        let batch = vec![vec![0.1, 0.9, 0.4, 0.2]];
        let v = [0.0, 0.2, 0.0, -0.1];
        let g = grad_loss(&v, &batch, &cents, &m, &LossConfig::default()).unwrap();
        assert_eq!((g[0], g[2]), (0.0, 0.0));
        let flat = LossConfig {
            scale: 0.0,
            beta: 0.0,
            lambda: 0.0,
            ..LossConfig::default()
        };
        let g = grad_loss(&v, &batch, &cents, &m, &flat).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn regularizer_only_gradient_is_closed_form() {
        let cents = Centroids {
            mu_pos: vec![1.0, 0.5, 0.2],
            mu_neg: vec![0.2, 0.6, 1.0],
            n_pos: 1,
            n_neg: 1,
        };
        let m = mask(3, &[0, 2]);
        let cfg = LossConfig {
            scale: 0.0,
            beta: 0.0,
            lambda: 0.25,
            ..LossConfig::default()
        };
        let v = [0.4, 0.0, -0.8];
        let batch = vec![vec![0.3, 0.3, 0.3]];
        let fd = fd_grad_oracle(&v, &batch, &cents, &m, &cfg, 1e-5).unwrap();
        let exact = [2.0 * 0.25 * 0.4, 0.0, 2.0 * 0.25 * -0.8];
        for (a, b) in fd.iter().zip(exact) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_norm_injection_is_an_error() {
        let cents = Centroids {
            mu_pos: vec![1.0, 0.0],
            mu_neg: vec![0.0, 1.0],
            n_pos: 1,
            n_neg: 1,
        };
        let m = mask(2, &[0, 1]);
        let err = loss_total(&[-1.0, 0.0], &[vec![1.0, 0.0]], &cents, &m, &LossConfig::default());
        assert!(matches!(err, Err(Error::ZeroNorm(_))));
        let zero = Centroids {
            mu_pos: vec![0.0, 0.0],
            ..cents
        };
        assert!(matches!(
            loss_total(&[0.0, 0.0], &[vec![1.0, 1.0]], &zero, &m, &LossConfig::default()),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn import_rejects_off_mask_values_and_missing_keys() {
        let cv = ControlVector {
            facet: FacetId::from_name("Warmth").unwrap(),
            v: vec![0.0, 1.5, 0.0, -0.25],
            mask_indices: vec![1, 3],
            decoded: vec![0.1, 0.2],
            layer: 2,
            model_tag: "toy".into(),
            sae_checksum: "abc".into(),
            training_meta: TrainingMeta {
                seed: 1,
                iterations: 0,
                initial_loss: LossBreakdown {
                    l_ce: 0.1,
                    l_dist: -0.2,
                    l_reg: 0.3,
                    total: 0.4,
                },
                final_loss: LossBreakdown {
                    l_ce: 0.1,
                    l_dist: -0.2,
                    l_reg: 0.3,
                    total: 0.4,
                },
                loss_config: LossConfig::default(),
                opt_config: OptConfig::default(),
            },
        };
        let json = cv.to_json();
        assert_eq!(ControlVector::from_json(&json).unwrap(), cv);

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["values"].as_array_mut().unwrap().push(serde_json::json!(0.5));
        let err = ControlVector::from_json(&value.to_string()).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)), "{err}");

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value.as_object_mut().unwrap().remove("facet");
        let err = ControlVector::from_json(&value.to_string()).unwrap_err();
        assert!(err.to_string().contains("facet"), "{err}");
    }
}
