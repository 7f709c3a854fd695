// SPDX-License-Identifier: MIT OR Apache-2.0

//! Latent feature selection for the steering mask.
//!
//! Coordinates are ranked by their two-class one-way ANOVA F statistic; ties
//! fall back to the magnitude of a logistic probe weight, then to the lower
//! index. The top `d_steer` coordinates form the binary mask.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Polarity;
use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// F value reported for a coordinate whose classes differ but have no
/// within-class spread.
pub const F_SENTINEL: f64 = 1e12;

pub const SELECTION_RULE: &str = "rank by F desc; tie-break |probe weight| desc, then index asc";

fn check_rows(codes: &[Vec<f64>], labels: &[Polarity]) -> Result<usize> {
    if codes.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: codes.len(),
            actual: labels.len(),
        });
    }
    let d = codes.first().map_or(0, Vec::len);
    if let Some(r) = codes.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "code row",
            expected: d,
            actual: r.len(),
        });
    }
    Ok(d)
}

/// Per-coordinate one-way F with k = 2 groups:
/// `F = (SS_between / 1) / (SS_within / (n - 2))`.
///
/// Coordinates with zero between-class SS get 0; otherwise zero within-class
/// SS gives [`F_SENTINEL`].
pub fn f_statistics(codes: &[Vec<f64>], labels: &[Polarity]) -> Result<Vec<f64>> {
    let d = check_rows(codes, labels)?;
    let n = codes.len();
    let n_pos = labels.iter().filter(|&&l| l == Polarity::Positive).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Empty(format!(
            "class for F statistics (pos={n_pos}, neg={n_neg})"
        )));
    }
    if n < 3 {
        return Err(Error::Config(format!("F statistics need n >= 3, got {n}")));
    }

    let mut sum_pos = vec![0.0; d];
    let mut sum_neg = vec![0.0; d];
    for (row, &l) in codes.iter().zip(labels) {
        let acc = if l == Polarity::Positive {
            &mut sum_pos
        } else {
            &mut sum_neg
        };
        crate::linalg::axpy(1.0, row, acc);
    }
    let mean_pos: Vec<f64> = sum_pos.iter().map(|s| s / n_pos as f64).collect();
    let mean_neg: Vec<f64> = sum_neg.iter().map(|s| s / n_neg as f64).collect();
    let mut ss_within = vec![0.0; d];
    for (row, &l) in codes.iter().zip(labels) {
        let mean = if l == Polarity::Positive { &mean_pos } else { &mean_neg };
        for ((w, x), m) in ss_within.iter_mut().zip(row).zip(mean) {
            *w += (x - m) * (x - m);
        }
    }
    let df_within = (n - 2) as f64;
    Ok((0..d)
        .map(|j| {
            let grand = (sum_pos[j] + sum_neg[j]) / n as f64;
            let ss_between =
                n_pos as f64 * (mean_pos[j] - grand).powi(2) + n_neg as f64 * (mean_neg[j] - grand).powi(2);
            if ss_between == 0.0 {
                0.0
            } else if ss_within[j] == 0.0 {
                F_SENTINEL
            } else {
                ss_between / (ss_within[j] / df_within)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 300,
            seed: 0,
            train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Weights on standardized codes (train-split mean and std per coordinate).
    pub weights: Vec<f64>,
    pub bias: f64,
    pub held_out_acc: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic probe (positive = 1) trained by full-batch gradient descent on a
/// stratified seeded split.
pub fn linear_probe(codes: &[Vec<f64>], labels: &[Polarity], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let d = check_rows(codes, labels)?;
    let mut pos: Vec<usize> = (0..codes.len()).filter(|&i| labels[i] == Polarity::Positive).collect();
    let mut neg: Vec<usize> = (0..codes.len()).filter(|&i| labels[i] == Polarity::Negative).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::Config(format!(
            "probe needs >= 2 items per class (pos={}, neg={})",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = seeded_rng(cfg.seed, 0x9_20BE);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in [&mut pos, &mut neg] {
        idx.shuffle(&mut rng);
        let k = ((cfg.train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    let nt = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        crate::linalg::axpy(1.0 / nt, &codes[i], &mut mean);
    }
    let mut std = vec![0.0; d];
    for &i in &train {
        for ((s, x), m) in std.iter_mut().zip(&codes[i]).zip(&mean) {
            *s += (x - m) * (x - m) / nt;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt());
    let standardize = |row: &[f64]| -> Vec<f64> {
        row.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((x, m), s)| if *s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| standardize(&codes[i])).collect();
    let ys: Vec<f64> = train
        .iter()
        .map(|&i| if labels[i] == Polarity::Positive { 1.0 } else { 0.0 })
        .collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for epoch in 0..cfg.epochs {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let logit = crate::linalg::dot(&w, x) + b;
            let p = sigmoid(logit);
            // log(1 + e^l) - y l, stable form
            loss += logit.max(0.0) + (-logit.abs()).exp().ln_1p() - y * logit;
            crate::linalg::axpy(p - y, x, &mut gw);
            gb += p - y;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("probe loss at epoch {epoch}")));
        }
        crate::linalg::axpy(-cfg.learning_rate / nt, &gw, &mut w);
        b -= cfg.learning_rate * gb / nt;
    }

    let correct = test
        .iter()
        .filter(|&&i| {
            let p = crate::linalg::dot(&w, &standardize(&codes[i])) + b >= 0.0;
            p == (labels[i] == Polarity::Positive)
        })
        .count();
    Ok(ProbeResult {
        weights: w,
        bias: b,
        held_out_acc: correct as f64 / test.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub mask: Vec<bool>,
    pub d_steer: usize,
    pub f_values: Vec<f64>,
    pub probe_weights: Vec<f64>,
    pub probe_acc: Option<f64>,
    pub selection_rule: String,
}

impl FeatureMask {
    pub fn d_latent(&self) -> usize {
        self.mask.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// 0/1 vector form of the mask.
    pub fn as_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Mask with the given active indices and no selection statistics.
    pub fn from_indices(d_latent: usize, indices: &[usize]) -> Result<Self> {
        let mut mask = vec![false; d_latent];
        for &i in indices {
            if i >= d_latent {
                return Err(Error::Invariant(format!("mask index {i} >= d_latent {d_latent}")));
            }
            if mask[i] {
                return Err(Error::Invariant(format!("mask index {i} repeated")));
            }
            mask[i] = true;
        }
        Ok(Self {
            mask,
            d_steer: indices.len(),
            f_values: vec![0.0; d_latent],
            probe_weights: vec![0.0; d_latent],
            probe_acc: None,
            selection_rule: "explicit indices".into(),
        })
    }

    pub fn to_artifact(&self) -> MaskArtifact {
        let indices = self.indices();
        MaskArtifact {
            f_values: indices.iter().map(|&i| self.f_values[i]).collect(),
            indices,
            d_latent: self.d_latent(),
            probe_acc: self.probe_acc,
            rule: self.selection_rule.clone(),
        }
    }

    pub fn from_artifact(a: &MaskArtifact) -> Result<Self> {
        if a.f_values.len() != a.indices.len() {
            return Err(Error::schema("mask f_values must align with indices"));
        }
        let mut m = Self::from_indices(a.d_latent, &a.indices)?;
        for (&i, &f) in a.indices.iter().zip(&a.f_values) {
            m.f_values[i] = f;
        }
        m.probe_acc = a.probe_acc;
        m.selection_rule = a.rule.clone();
        Ok(m)
    }
}

/// On-disk mask: `{indices, d_latent, f_values (selected only), probe_acc, rule}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskArtifact {
    pub indices: Vec<usize>,
    pub d_latent: usize,
    pub f_values: Vec<f64>,
    pub probe_acc: Option<f64>,
    pub rule: String,
}

pub fn build_mask(f_values: &[f64], probe_weights: &[f64], d_steer: usize) -> Result<FeatureMask> {
    let d = f_values.len();
    if probe_weights.len() != d {
        return Err(Error::DimensionMismatch {
            what: "probe weights",
            expected: d,
            actual: probe_weights.len(),
        });
    }
    if d_steer == 0 || d_steer > d {
        return Err(Error::Config(format!("d_steer must be in 1..={d}, got {d_steer}")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        f_values[b]
            .total_cmp(&f_values[a])
            .then_with(|| probe_weights[b].abs().total_cmp(&probe_weights[a].abs()))
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; d];
    for &i in &order[..d_steer] {
        mask[i] = true;
    }
    Ok(FeatureMask {
        mask,
        d_steer,
        f_values: f_values.to_vec(),
        probe_weights: probe_weights.to_vec(),
        probe_acc: None,
        selection_rule: SELECTION_RULE.into(),
    })
}

/// F statistics, probe and mask in one pass.
pub fn select_features(
    codes: &[Vec<f64>],
    labels: &[Polarity],
    d_steer: usize,
    probe: &ProbeConfig,
) -> Result<FeatureMask> {
    let f = f_statistics(codes, labels)?;
    let p = linear_probe(codes, labels, probe)?;
    let mut m = build_mask(&f, &p.weights, d_steer)?;
    m.probe_acc = Some(p.held_out_acc);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Polarity::{Negative as N, Positive as P};

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn f_hand_computed() {
        // between SS 16 on 1 df, within SS 4 on 2 df
        let f = f_statistics(&col(&[1.0, 3.0, -1.0, -3.0]), &[P, P, N, N]).unwrap();
        assert_eq!(f, vec![8.0]);
    }

    #[test]
    fn f_equal_means_is_zero() {
        let f = f_statistics(&col(&[1.0, 3.0, 3.0, 1.0]), &[P, P, N, N]).unwrap();
        assert_eq!(f, vec![0.0]);
    }

    #[test]
    fn f_zero_within_is_sentinel() {
        let f = f_statistics(&col(&[2.0, 2.0, 0.0, 0.0]), &[P, P, N, N]).unwrap();
        assert_eq!(f, vec![F_SENTINEL]);
    }

    #[test]
    fn f_errors() {
        assert!(matches!(
            f_statistics(&col(&[1.0, 2.0, 3.0]), &[P, P, P]),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            f_statistics(&col(&[1.0, 2.0]), &[P, N]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_sorts_by_f() {
        let m = build_mask(&[5.0, 1.0, 9.0], &[0.0; 3], 2).unwrap();
        assert_eq!(m.indices(), vec![0, 2]);
    }

    #[test]
    fn mask_tie_breaks_on_probe_magnitude_then_index() {
        let m = build_mask(&[1.0; 3], &[0.1, -0.9, 0.5], 1).unwrap();
        assert_eq!(m.indices(), vec![1]);
        let m = build_mask(&[1.0; 3], &[0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(m.indices(), vec![0, 1]);
    }

    #[test]
    fn mask_full_and_out_of_range() {
        let m = build_mask(&[3.0, 1.0, 2.0], &[0.0; 3], 3).unwrap();
        assert!(m.mask.iter().all(|&b| b));
        assert!(build_mask(&[1.0], &[0.0], 0).is_err());
        assert!(build_mask(&[1.0], &[0.0], 2).is_err());
    }

    #[test]
    fn mask_artifact_round_trip() {
        let mut m = build_mask(&[5.0, 1.0, 9.0, 0.5], &[0.2, 0.1, 0.3, 0.0], 2).unwrap();
        m.probe_acc = Some(0.875);
        let a = m.to_artifact();
        assert_eq!(a.indices, vec![0, 2]);
        assert_eq!(a.f_values, vec![5.0, 9.0]);
        let back = FeatureMask::from_artifact(&a).unwrap();
        assert_eq!(back.indices(), m.indices());
        assert_eq!(back.probe_acc, Some(0.875));
    }

    fn planted(n: usize, seed: u64, shuffle_labels: bool) -> (Vec<Vec<f64>>, Vec<Polarity>) {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = seeded_rng(seed, 1);
        let mut codes = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = if i % 2 == 0 { P } else { N };
            let mut row: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            row[3] += 3.0 * l.sign();
            codes.push(row);
            labels.push(l);
        }
        if shuffle_labels {
            labels.shuffle(&mut rng);
        }
        (codes, labels)
    }

    #[test]
    fn probe_separable_and_deterministic() {
        let (codes, labels) = planted(200, 3, false);
        let a = linear_probe(&codes, &labels, &ProbeConfig::default()).unwrap();
        let b = linear_probe(&codes, &labels, &ProbeConfig::default()).unwrap();
        assert!(a.held_out_acc >= 0.95, "{}", a.held_out_acc);
        assert_eq!(a, b);
        let f = f_statistics(&codes, &labels).unwrap();
        assert_eq!(build_mask(&f, &a.weights, 1).unwrap().indices(), vec![3]);
    }

    #[test]
    fn probe_on_shuffled_labels_is_chance() {
        let (codes, labels) = planted(400, 8, true);
        let r = linear_probe(&codes, &labels, &ProbeConfig::default()).unwrap();
        assert!((r.held_out_acc - 0.5).abs() <= 0.15, "{}", r.held_out_acc);
    }
}
