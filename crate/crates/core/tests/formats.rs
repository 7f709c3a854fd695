// SPDX-License-Identifier: MIT OR Apache-2.0

use facetsteer_core::activations::{load_activations, persist_activations, synthesize_activations};
use facetsteer_core::corpus::{generate_synthetic_corpus, parse_corpus};
use facetsteer_core::cvtrain::{export_cv, facet_codes, import_cv, train_cv};
use facetsteer_core::featsel::{select_features, FeatureMask, ProbeConfig};
use facetsteer_core::sae::{train_sae, SaeConfig};
use facetsteer_core::{
    ActivationRecord, ActivationSet, ControlVector, FacetId, LossConfig, OptConfig, Polarity, SynthConfig,
};
use proptest::prelude::*;

fn record_strategy(d: usize) -> impl Strategy<Value = ActivationRecord> {
    (
        "[a-z0-9-]{1,12}",
        prop::option::of((0usize..30, any::<bool>())),
        prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), d),
    )
        .prop_map(|(id, label, hidden)| ActivationRecord {
            item_id: id,
            facet: label.map(|(f, _)| FacetId::from_ordinal(f).unwrap()),
            polarity: label.map(|(_, p)| if p { Polarity::Positive } else { Polarity::Negative }),
            hidden,
            layer: 5,
            model_tag: "toy".into(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fsta_round_trip_is_bit_exact(records in (1usize..6).prop_flat_map(|d| prop::collection::vec(record_strategy(d), 1..8))) {
        let set = ActivationSet::new(records).unwrap();
        let bytes = set.to_bytes().unwrap();
        let back = ActivationSet::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.records.len(), set.records.len());
        for (a, b) in set.records.iter().zip(&back.records) {
            prop_assert_eq!(&a.item_id, &b.item_id);
            prop_assert_eq!(a.label(), b.label());
            let (x, y): (Vec<u32>, Vec<u32>) = (a.hidden.iter().map(|v| v.to_bits()).collect(), b.hidden.iter().map(|v| v.to_bits()).collect());
            prop_assert_eq!(x, y);
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn fsta_rejects_any_truncation(cut in 1usize..40) {
        let set = ActivationSet::new(vec![ActivationRecord {
            item_id: "a".into(),
            facet: None,
            polarity: None,
            hidden: vec![1.0, 2.0, 3.0],
            layer: 0,
            model_tag: "m".into(),
        }]).unwrap();
        let bytes = set.to_bytes().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(ActivationSet::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn mask_artifact_round_trip(idx in prop::collection::btree_set(0usize..40, 1..10)) {
        let idx: Vec<usize> = idx.into_iter().collect();
        let m = FeatureMask::from_indices(40, &idx).unwrap();
        let back = FeatureMask::from_artifact(&m.to_artifact()).unwrap();
        prop_assert_eq!(back.indices(), idx);
    }
}

#[test]
fn fsta_header_layout() {
    let set = ActivationSet::new(vec![ActivationRecord {
        item_id: "x".into(),
        facet: None,
        polarity: None,
        hidden: vec![0.5; 4],
        layer: 1,
        model_tag: "m".into(),
    }])
    .unwrap();
    let b = set.to_bytes().unwrap();
    assert_eq!(&b[..4], b"FSTA");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
    assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 1);
    let meta_len = u64::from_le_bytes(b[20..28].try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(&b[28..28 + meta_len]).unwrap();
    assert_eq!(meta[0]["id"], "x");
    assert_eq!(b.len(), 28 + meta_len + 16);
    assert_eq!(&b[28 + meta_len..28 + meta_len + 4], &0.5f32.to_le_bytes());
}

#[test]
fn corpus_and_activation_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_corpus(4, 3).unwrap();
    let back = parse_corpus(&corpus.to_jsonl()).unwrap();
    assert_eq!(back.items, corpus.items);

    let (acts, _) = synthesize_activations(&corpus, &SynthConfig::default(), 4).unwrap();
    let p = dir.path().join("acts.fsta");
    persist_activations(&acts, &p).unwrap();
    let loaded = load_activations(&p).unwrap();
    assert_eq!(loaded, acts);
}

#[test]
fn control_vector_export_import() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_corpus(5, 20).unwrap();
    let (acts, _) = synthesize_activations(&corpus, &SynthConfig::default(), 5).unwrap();
    let sae = train_sae(
        &acts,
        &SaeConfig {
            epochs: 5,
            ..SaeConfig::for_width(32)
        },
    )
    .unwrap();
    let facet = FacetId::from_name("Dutifulness").unwrap();
    let (codes, labels) = facet_codes(&sae, &acts, facet).unwrap();
    let m = select_features(&codes, &labels, 8, &ProbeConfig::default()).unwrap();
    let opt = OptConfig {
        iterations: 20,
        ..OptConfig::default()
    };
    let cv = train_cv(&sae, &acts, facet, &m, &LossConfig::default(), &opt).unwrap();
    let p = dir.path().join("cv.json");
    export_cv(&cv, &p).unwrap();
    let back: ControlVector = import_cv(&p).unwrap();
    assert_eq!(back, cv);
    back.verify_against(&sae).unwrap();

    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    doc.as_object_mut().unwrap().remove("facet");
    let err = ControlVector::from_json(&doc.to_string()).unwrap_err();
    assert!(err.to_string().contains("facet"), "{err}");
}
