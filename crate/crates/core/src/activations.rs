// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled residual-stream activations and the FSTA interchange format.
//!
//! # File layout (little-endian)
//!
//! ```text
//! offset  size            field
//! 0       4               magic "FSTA"
//! 4       4   u32         version (= 1)
//! 8       4   u32         d_model
//! 12      8   u64         count
//! 20      8   u64         metadata_len
//! 28      metadata_len    UTF-8 JSON array of {"id","facet","polarity","layer","model"}
//! ..      count*d_model*4 f32 payload, row-major
//! ```
//!
//! Unlabeled rows carry the facet sentinel `"<unlabeled>"` and polarity `"none"`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{FacetCorpus, FacetId, Polarity};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::util::{read_file, seeded_rng, write_file};

pub const MAGIC: [u8; 4] = *b"FSTA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const UNLABELED_FACET: &str = "<unlabeled>";
const UNLABELED_POLARITY: &str = "none";

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub item_id: String,
    pub facet: Option<FacetId>,
    pub polarity: Option<Polarity>,
    pub hidden: Vec<f32>,
    pub layer: u32,
    pub model_tag: String,
}

impl ActivationRecord {
    pub fn hidden_f64(&self) -> Vec<f64> {
        self.hidden.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn label(&self) -> Option<(FacetId, Polarity)> {
        self.facet.zip(self.polarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub records: Vec<ActivationRecord>,
    pub d_model: usize,
    pub layer: u32,
    pub model_tag: String,
}

impl ActivationSet {
    pub fn new(records: Vec<ActivationRecord>) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Empty("activation set".into()))?;
        let (d_model, layer, model_tag) = (first.hidden.len(), first.layer, first.model_tag.clone());
        if d_model == 0 {
            return Err(Error::Invariant("d_model must be positive".into()));
        }
        for r in &records {
            if r.hidden.len() != d_model {
                return Err(Error::DimensionMismatch {
                    what: "activation record",
                    expected: d_model,
                    actual: r.hidden.len(),
                });
            }
            if r.layer != layer || r.model_tag != model_tag {
                return Err(Error::Invariant(format!(
                    "record {:?} has layer/model {}/{} but set is {}/{}",
                    r.item_id, r.layer, r.model_tag, layer, model_tag
                )));
            }
            if r.hidden.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("hidden state of {:?}", r.item_id)));
            }
        }
        Ok(Self {
            records,
            d_model,
            layer,
            model_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one facet and polarity, in file order.
    pub fn select(&self, facet: FacetId, polarity: Polarity) -> impl Iterator<Item = &ActivationRecord> {
        self.records
            .iter()
            .filter(move |r| r.label() == Some((facet, polarity)))
    }

    /// All hidden states as `f64` rows.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(ActivationRecord::hidden_f64).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Meta<'a> {
            id: &'a str,
            facet: &'a str,
            polarity: &'a str,
            layer: u32,
            model: &'a str,
        }
        let mut meta = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if r.hidden.len() != self.d_model {
                return Err(Error::DimensionMismatch {
                    what: "activation record",
                    expected: self.d_model,
                    actual: r.hidden.len(),
                });
            }
            if r.hidden.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "hidden state of {:?}; refusing to serialize",
                    r.item_id
                )));
            }
            meta.push(Meta {
                id: &r.item_id,
                facet: r.facet.map_or(UNLABELED_FACET, FacetId::name),
                polarity: r.polarity.map_or(UNLABELED_POLARITY, Polarity::tag),
                layer: r.layer,
                model: &r.model_tag,
            });
        }
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let d_model = u32::try_from(self.d_model).map_err(|_| Error::Invariant("d_model exceeds u32".into()))?;

        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + self.records.len() * self.d_model * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&d_model.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for r in &self.records {
            for x in &r.hidden {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let have = bytes.len() as u64;
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                actual: have,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: MAGIC,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let d_model = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let meta_len = u64::from_le_bytes(bytes[20..28].try_into().unwrap());

        let expected = count
            .checked_mul(d_model)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN as u64 + meta_len))
            .ok_or_else(|| Error::Invariant("header sizes overflow".into()))?;
        if have < expected {
            return Err(Error::Truncated { expected, actual: have });
        }
        if have > expected {
            return Err(Error::TrailingBytes(have - expected));
        }

        #[derive(Deserialize)]
        struct Meta {
            id: String,
            facet: String,
            polarity: String,
            layer: u32,
            model: String,
        }
        let meta_end = HEADER_LEN + meta_len as usize;
        let meta: Vec<Meta> = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| Error::schema(format!("activation metadata: {e}")))?;
        if meta.len() as u64 != count {
            return Err(Error::schema(format!(
                "metadata has {} rows but header count is {count}",
                meta.len()
            )));
        }

        let d = d_model as usize;
        let mut payload = bytes[meta_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut records = Vec::with_capacity(meta.len());
        for m in meta {
            let (facet, polarity) = if m.facet == UNLABELED_FACET {
                (None, None)
            } else {
                let facet = FacetId::from_name(&m.facet).ok_or(Error::UnknownFacet { name: m.facet.clone() })?;
                let polarity = match m.polarity.as_str() {
                    "pos" => Polarity::Positive,
                    "neg" => Polarity::Negative,
                    other => {
                        return Err(Error::schema(format!(
                            "row {:?}: polarity {other:?} is not pos/neg",
                            m.id
                        )))
                    }
                };
                (Some(facet), Some(polarity))
            };
            records.push(ActivationRecord {
                item_id: m.id,
                facet,
                polarity,
                hidden: payload.by_ref().take(d).collect(),
                layer: m.layer,
                model_tag: m.model,
            });
        }
        ActivationSet::new(records)
    }
}

pub fn persist_activations(a: &ActivationSet, path: &Path) -> Result<()> {
    write_file(path, &a.to_bytes()?)
}

pub fn load_activations(path: &Path) -> Result<ActivationSet> {
    ActivationSet::from_bytes(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Planted synthesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub d_model: usize,
    pub sigma_noise: f64,
    pub signal_scale: f64,
    /// Upper bound on pairwise cosine between planted directions.
    pub max_pairwise_cosine: f64,
    pub layer: u32,
    pub model_tag: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            sigma_noise: 0.5,
            signal_scale: 1.0,
            max_pairwise_cosine: 0.3,
            layer: 2,
            model_tag: "synthetic".into(),
        }
    }
}

/// Ground truth behind a synthetic activation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedGroundTruth {
    /// Unit direction per facet. Components are f32-representable so the
    /// noiseless case survives f32 storage exactly.
    pub directions: BTreeMap<FacetId, Vec<f64>>,
    pub sigma_noise: f64,
    pub signal_scale: f64,
}

impl PlantedGroundTruth {
    pub fn direction(&self, facet: FacetId) -> &[f64] {
        &self.directions[&facet]
    }
}

fn unit_f32(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| f64::from((x / n) as f32)).collect()
}

/// Draw one unit direction per facet. When `d_model >= 30` the directions
/// are Gram-Schmidt orthonormalized; otherwise rejection sampling enforces the
/// cosine bound.
pub fn plant_directions(seed: u64, d_model: usize, max_cos: f64) -> Result<BTreeMap<FacetId, Vec<f64>>> {
    let mut rng = seeded_rng(seed, 0xD1_2EC7);
    let gauss =
        |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..d_model).map(|_| StandardNormal.sample(rng)).collect() };
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(crate::corpus::N_FACETS);
    if d_model >= crate::corpus::N_FACETS {
        while out.len() < crate::corpus::N_FACETS {
            let mut v = gauss(&mut rng);
            for u in &out {
                let p = dot(&v, u);
                crate::linalg::axpy(-p, u, &mut v);
            }
            if norm(&v) > 1e-6 {
                let n = norm(&v);
                out.push(v.iter().map(|x| x / n).collect());
            }
        }
    } else {
        const MAX_ATTEMPTS: usize = 200_000;
        let mut attempts = 0;
        while out.len() < crate::corpus::N_FACETS {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Config(format!(
                    "could not place 30 directions with pairwise cosine <= {max_cos} in d_model={d_model}"
                )));
            }
            let v = unit_f32(&gauss(&mut rng));
            if out.iter().all(|u| dot(u, &v) <= max_cos) {
                out.push(v);
            }
        }
    }
    let dirs: Vec<Vec<f64>> = out.iter().map(|v| unit_f32(v)).collect();
    for (i, a) in dirs.iter().enumerate() {
        for b in &dirs[..i] {
            if dot(a, b) > max_cos + 1e-6 {
                return Err(Error::Invariant("planted directions exceed cosine bound".into()));
            }
        }
    }
    Ok(FacetId::all().zip(dirs).collect())
}

/// `hidden = noise + sign(polarity) * signal_scale * g_facet`, with
/// `noise ~ N(0, sigma_noise^2 I)` drawn in corpus order.
pub fn synthesize_activations(
    c: &FacetCorpus,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(ActivationSet, PlantedGroundTruth)> {
    if cfg.d_model < 8 {
        return Err(Error::Config(format!("d_model must be >= 8, got {}", cfg.d_model)));
    }
    let directions = plant_directions(seed, cfg.d_model, cfg.max_pairwise_cosine)?;
    let gt = PlantedGroundTruth {
        directions,
        sigma_noise: cfg.sigma_noise,
        signal_scale: cfg.signal_scale,
    };
    let mut rng = seeded_rng(seed, 0xAC7_5EED);
    let mut records = Vec::with_capacity(c.len());
    for it in &c.items {
        let g = gt.direction(it.facet);
        let shift = it.polarity.sign() * cfg.signal_scale;
        let hidden = g
            .iter()
            .map(|&gi| {
                let noise: f64 = if cfg.sigma_noise > 0.0 {
                    cfg.sigma_noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (noise + shift * gi) as f32
            })
            .collect();
        records.push(ActivationRecord {
            item_id: it.id.clone(),
            facet: Some(it.facet),
            polarity: Some(it.polarity),
            hidden,
            layer: cfg.layer,
            model_tag: cfg.model_tag.clone(),
        });
    }
    Ok((ActivationSet::new(records)?, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic_corpus;
    use crate::linalg::{cosine, mean_rows, sub};

    fn one_record(d: usize) -> ActivationSet {
        ActivationSet::new(vec![ActivationRecord {
            item_id: "r0".into(),
            facet: FacetId::from_name("Trust"),
            polarity: Some(Polarity::Negative),
            hidden: (0..d).map(|i| i as f32 * 0.5 - 1.0).collect(),
            layer: 3,
            model_tag: "toy".into(),
        }])
        .unwrap()
    }

    #[test]
    fn single_record_file_size() {
        let a = one_record(4);
        let bytes = a.to_bytes().unwrap();
        let meta_len = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), HEADER_LEN + meta_len + 16);
        assert_eq!(&bytes[..4], b"FSTA");
        assert_eq!(ActivationSet::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn nan_refuses_to_serialize() {
        let mut a = one_record(4);
        a.records[0].hidden[2] = f32::NAN;
        let err = a.to_bytes().unwrap_err();
        assert!(err.to_string().contains("r0"), "{err}");
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = one_record(4).to_bytes().unwrap();
        let short = &bytes[..bytes.len() - 1];
        match ActivationSet::from_bytes(short) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 1);
            }
            other => panic!("{other:?}"),
        }
        let mut v99 = bytes.clone();
        v99[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            ActivationSet::from_bytes(&v99),
            Err(Error::UnsupportedVersion(99))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ActivationSet::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(ActivationSet::from_bytes(&long), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn unlabeled_rows_round_trip() {
        let mut a = one_record(8);
        a.records[0].facet = None;
        a.records[0].polarity = None;
        let back = ActivationSet::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn planted_directions_are_unit_and_bounded() {
        assert!(matches!(plant_directions(11, 4, 0.3), Err(Error::Config(_))));
        for d in [16, 24, 64] {
            let dirs = plant_directions(11, d, 0.3).unwrap();
            let v: Vec<_> = dirs.values().collect();
            for (i, a) in v.iter().enumerate() {
                assert!((norm(a) - 1.0).abs() < 1e-6);
                for b in &v[..i] {
                    assert!(dot(a, b) <= 0.3 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn noiseless_centroid_difference_is_exact() {
        let c = generate_synthetic_corpus(1, 5).unwrap();
        let cfg = SynthConfig {
            d_model: 32,
            sigma_noise: 0.0,
            ..SynthConfig::default()
        };
        let (acts, gt) = synthesize_activations(&c, &cfg, 3).unwrap();
        for facet in FacetId::all() {
            let pos: Vec<_> = acts.select(facet, Polarity::Positive).map(|r| r.hidden_f64()).collect();
            let neg: Vec<_> = acts.select(facet, Polarity::Negative).map(|r| r.hidden_f64()).collect();
            let (mp, _) = mean_rows(pos.iter().map(Vec::as_slice), 32);
            let (mn, _) = mean_rows(neg.iter().map(Vec::as_slice), 32);
            let expect: Vec<f64> = gt.direction(facet).iter().map(|g| 2.0 * g).collect();
            assert_eq!(sub(&mp, &mn), expect);
        }
    }

    #[test]
    fn zero_signal_centroids_shrink_with_samples() {
        let cfg = SynthConfig {
            d_model: 16,
            signal_scale: 0.0,
            ..SynthConfig::default()
        };
        let facet = FacetId::from_name("Order").unwrap();
        let gap = |n: usize| {
            let c = generate_synthetic_corpus(2, n).unwrap();
            let (acts, _) = synthesize_activations(&c, &cfg, 9).unwrap();
            let pos: Vec<_> = acts.select(facet, Polarity::Positive).map(|r| r.hidden_f64()).collect();
            let neg: Vec<_> = acts.select(facet, Polarity::Negative).map(|r| r.hidden_f64()).collect();
            norm(&sub(
                &mean_rows(pos.iter().map(Vec::as_slice), 16).0,
                &mean_rows(neg.iter().map(Vec::as_slice), 16).0,
            ))
        };
        let (small, large) = (gap(10), gap(1000));
        assert!(large < small, "{large} !< {small}");
        // sqrt(2/1000 * 16) * 0.5 ~ 0.09
        assert!(large < 0.2, "{large}");
    }

    #[test]
    fn noisy_centroid_difference_recovers_direction() {
        let c = generate_synthetic_corpus(3, 500).unwrap();
        let facet = FacetId::from_name("Assertiveness").unwrap();
        let c = c.subset(|it| it.facet == facet);
        let cfg = SynthConfig {
            d_model: 32,
            ..SynthConfig::default()
        };
        let (acts, gt) = synthesize_activations(&c, &cfg, 3).unwrap();
        let pos: Vec<_> = acts.select(facet, Polarity::Positive).map(|r| r.hidden_f64()).collect();
        let neg: Vec<_> = acts.select(facet, Polarity::Negative).map(|r| r.hidden_f64()).collect();
        let diff = sub(
            &mean_rows(pos.iter().map(Vec::as_slice), 32).0,
            &mean_rows(neg.iter().map(Vec::as_slice), 32).0,
        );
        assert!(cosine(&diff, gt.direction(facet)) >= 0.95);
    }

    #[test]
    fn small_d_model_rejected() {
        let c = generate_synthetic_corpus(1, 1).unwrap();
        let cfg = SynthConfig {
            d_model: 4,
            ..SynthConfig::default()
        };
        assert!(matches!(synthesize_activations(&c, &cfg, 1), Err(Error::Config(_))));
    }
}
