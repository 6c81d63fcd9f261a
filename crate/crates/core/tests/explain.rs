mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use mulcpred::explain::*;
use mulcpred::model::{ConceptId, Model};
use mulcpred::Error;
use rand::Rng;

fn brute_scores(model: &Model<f32>, samples: &[mulcpred::data::Sample], flat: usize) -> BTreeMap<u64, f64> {
    samples
        .iter()
        .map(|s| {
            let trace = model.forward(&model.gather_inputs(&s.modalities).unwrap()).unwrap();
            (s.id, trace.activation[flat] as f64)
        })
        .collect()
}

#[test]
fn top_k_scores_match_full_recomputation() {
    let t = toy();
    let ids = t.model.config().concept_ids();
    let mut g = rng(41);
    let full: Vec<BTreeMap<u64, f64>> = (0..ids.len())
        .map(|f| brute_scores(&t.model, &t.train.samples, f))
        .collect();
    for _ in 0..100 {
        let flat = g.gen_range(0..ids.len());
        let sample = &t.train.samples[g.gen_range(0..t.train.len())];
        let ranked = top_k_representative_samples(&t.model, &t.train.samples, &ids[flat], t.train.len()).unwrap();
        let got = ranked.iter().find(|r| r.sample_id == sample.id).unwrap().score;
        assert_eq!(got, full[flat][&sample.id]);
    }
    for (flat, id) in ids.iter().enumerate() {
        for k in [1, 3, 10] {
            let got: Vec<u64> = top_k_representative_samples(&t.model, &t.train.samples, id, k)
                .unwrap()
                .iter()
                .map(|s| s.sample_id)
                .collect();
            assert_eq!(got, brute_top_k(&full[flat], k), "{id} k={k}");
        }
    }
}

#[test]
fn top_k_edge_cases() {
    let t = toy();
    let id = ConceptId::new("trajectory", 1);
    let scores = brute_scores(&t.model, &t.train.samples, t.model.config().concept_index(&id).unwrap());
    let best = top_k_representative_samples(&t.model, &t.train.samples, &id, 1).unwrap();
    let max = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best[0].score, max);
    let all = top_k_representative_samples(&t.model, &t.train.samples, &id, 1000).unwrap();
    assert_eq!(all.len(), t.train.len());
    assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(matches!(
        top_k_representative_samples(&t.model, &t.train.samples, &id, 0),
        Err(Error::InvalidInput(_))
    ));
    assert!(matches!(
        top_k_representative_samples(&t.model, &t.train.samples, &ConceptId::new("ego", 5), 1),
        Err(Error::Lookup(_))
    ));
}

fn predictions(model: &Model<f32>, samples: &[mulcpred::data::Sample]) -> Vec<Vec<f32>> {
    samples
        .iter()
        .map(|s| {
            model
                .predict(&model.gather_inputs(&s.modalities).unwrap())
                .unwrap()
                .probabilities
        })
        .collect()
}

#[test]
fn keep_all_and_keep_none() {
    let t = toy();
    let cfg = t.model.config();
    let all = t.model.pruned(&PruneMask::keep_all(cfg)).unwrap();
    assert_eq!(all.relevance, t.model.relevance);
    assert_eq!(
        predictions(&all, &t.test.samples),
        predictions(&t.model, &t.test.samples)
    );
    let none = t.model.pruned(&PruneMask::keep_none()).unwrap();
    for p in predictions(&none, &t.test.samples) {
        assert_eq!(p, vec![0.5, 0.5]);
    }
}

#[test]
fn pruned_concepts_no_longer_influence_predictions() {
    let t = toy();
    let cfg = t.model.config();
    let ids = cfg.concept_ids();
    for (keep_flat, keep_id) in ids.iter().enumerate() {
        let mask = PruneMask::new(cfg, [keep_id.clone()]).unwrap();
        let pruned = t.model.pruned(&mask).unwrap().cast::<f64>();
        for row in 0..ids.len() {
            let zero = pruned.relevance.row(row).iter().all(|&v| v == 0.0);
            assert_eq!(zero, row != keep_flat);
        }
        for s in &t.test.samples[..10] {
            let base = pruned
                .forward(&pruned.gather_inputs(&s.modalities).unwrap())
                .unwrap()
                .activation;
            let y0 = pruned.predict_from_activation(&base).unwrap().probabilities;
            for k in 0..ids.len() {
                for delta in [-3.0, 0.5, 7.0] {
                    let mut moved = base.clone();
                    moved[k] += delta;
                    let y = pruned.predict_from_activation(&moved).unwrap().probabilities;
                    if k != keep_flat {
                        assert_eq!(y, y0, "pruned concept {k} moved the output");
                    }
                }
            }
            if base[keep_flat] > 0.0 && pruned.relevance.row(keep_flat)[0] != pruned.relevance.row(keep_flat)[1] {
                let mut moved = base.clone();
                moved[keep_flat] += 0.5;
                assert_ne!(pruned.predict_from_activation(&moved).unwrap().probabilities, y0);
            }
        }
    }
}

#[test]
fn unknown_ids_are_rejected() {
    let cfg = toy().model.config();
    assert!(matches!(
        PruneMask::new(cfg, [ConceptId::new("ego", 2)]),
        Err(Error::Lookup(_))
    ));
    let err = PruneMask::parse(cfg, &["appearance:0".into(), "sound:1".into()]).unwrap_err();
    assert!(err.to_string().contains("sound"));
    let mut keep = BTreeSet::new();
    keep.insert(ConceptId::new("appearance", 9));
    assert!(prune_concepts(&toy().model.relevance, cfg, &keep).is_err());
}

#[test]
fn bundle_round_trip_and_model_free_rendering() {
    let t = toy();
    let dir = tempfile::tempdir().unwrap();
    let bundle = export_concept_bundle(
        &t.model,
        &t.train,
        3,
        &PruneMask::keep_all(t.model.config()),
        dir.path(),
    )
    .unwrap();
    let back = ConceptBundle::load(dir.path()).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.relevance, t.model.relevance.cast::<f64>());
    assert_eq!(back.reports.len(), t.model.config().total_concepts());
    for (flat, report) in back.reports.iter().enumerate() {
        let scores = brute_scores(&t.model, &t.train.samples, flat);
        let ids: Vec<u64> = report.top_samples.iter().map(|s| s.sample_id).collect();
        assert_eq!(ids, brute_top_k(&scores, 3));
        for (rank, top) in report.top_samples.iter().enumerate() {
            assert!((top.activation - scores[&top.sample_id]).abs() < 1e-6);
            assert!((top.heatmap.mean() - top.activation).abs() < 1e-6);
            let frames = heatmap_frames(&top.heatmap.dims, &top.heatmap.values);
            assert_eq!(top.heatmap.frames.len(), frames.len());
            for (i, name) in top.heatmap.frames.iter().enumerate() {
                assert_eq!(name, &frame_file_name(&report.modality, report.index, rank, i));
                let png = image::open(frame_path(dir.path(), report, rank, i).unwrap()).unwrap();
                assert!(png.width().max(png.height()) >= 64);
            }
        }
    }
}

#[test]
fn bundle_counts_are_capped_by_dataset_size() {
    let t = toy();
    let tiny = mulcpred::data::Dataset {
        manifest: t.train.manifest.clone(),
        samples: t.train.samples[..2].to_vec(),
    };
    let dir = tempfile::tempdir().unwrap();
    for k in [1, 2, 5] {
        let b = export_concept_bundle(&t.model, &tiny, k, &PruneMask::keep_all(t.model.config()), dir.path()).unwrap();
        assert!(b.reports.iter().all(|r| r.top_samples.len() == k.min(2)));
    }
    assert!(export_concept_bundle(&t.model, &tiny, 0, &PruneMask::keep_none(), dir.path()).is_err());
}

#[test]
fn bundle_with_mask_flags_pruned_concepts() {
    let t = toy();
    let cfg = t.model.config();
    let mask = PruneMask::new(cfg, [ConceptId::new("ego", 0), ConceptId::new("appearance", 1)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bundle = export_concept_bundle(&t.model, &t.test, 2, &mask, dir.path()).unwrap();
    for r in &bundle.reports {
        let kept = mask.contains(&r.concept_id);
        assert_eq!(r.pruned, !kept);
        let row = cfg.concept_index(&r.concept_id).unwrap();
        if kept {
            assert_eq!(
                r.relevance,
                t.model.relevance.row(row).iter().map(|&v| v as f64).collect::<Vec<_>>()
            );
            let diff = t.model.relevance.row(row)[1] as f64 - t.model.relevance.row(row)[0] as f64;
            assert!((r.display_relevance - diff).abs() < 1e-12);
        } else {
            assert_eq!(r.display_relevance, 0.0);
            assert!(r.relevance.iter().all(|&v| v == 0.0));
        }
    }
    let reopened = ConceptBundle::load(dir.path())
        .unwrap()
        .with_mask(PruneMask::keep_all(cfg))
        .unwrap();
    assert!(reopened.reports.iter().all(|r| !r.pruned));
}
