mod common;

use common::*;
use mulcpred::model::*;
use proptest::prelude::*;
use rand::Rng;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|d| (finite_vec(d), finite_vec(d)))
}

proptest! {
    #[test]
    fn activation_stays_within_representation_range((r, p) in pair()) {
        let s = concept_activation(&r, &p).unwrap();
        let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
    }

    #[test]
    fn activation_is_shift_equivariant((r, p) in pair(), c in -10.0f64..10.0) {
        let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
        let a = concept_activation(&shifted, &p).unwrap();
        let b = concept_activation(&r, &p).unwrap() + c;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn activation_ignores_logit_shift((r, p) in pair(), c in -10.0f64..10.0) {
        let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
        let a = concept_activation(&r, &shifted).unwrap();
        let b = concept_activation(&r, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn prediction_is_on_the_simplex(
        (s, w) in (1usize..8, 2usize..5).prop_flat_map(|(k, c)| (finite_vec(k), finite_vec(k * c)))
    ) {
        let c = w.len() / s.len();
        let wa = RelevanceMatrix::new(s.len(), c, w).unwrap();
        let y = aggregate_predict(&ActivationVector(s.clone()), &wa).unwrap();
        prop_assert!(y.probabilities.iter().all(|&p| p >= 0.0));
        prop_assert!((y.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let clamped: Vec<f64> = s.iter().map(|v| v.max(0.0)).collect();
        let z = aggregate_predict(&ActivationVector(clamped), &wa).unwrap();
        prop_assert_eq!(y.probabilities, z.probabilities);
    }
}

#[test]
fn heatmap_mean_equals_activation_f32() {
    for seed in 0..100 {
        let (f, p) = random_map::<f32>(seed);
        let h = concept_heatmap(&f, &p, 0).unwrap();
        let s = concept_activation(&global_average_pool(&f).unwrap(), &p).unwrap();
        assert!((h.mean() - s).abs() < 1e-5, "seed {seed}: {} vs {s}", h.mean());
    }
}

#[test]
fn heatmap_mean_equals_activation_f64() {
    for seed in 0..100 {
        let (f, p) = random_map::<f64>(seed);
        let h = concept_heatmap(&f, &p, 0).unwrap();
        let s = concept_activation(&global_average_pool(&f).unwrap(), &p).unwrap();
        assert!((h.mean() - s).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn heatmap_of_uniform_logits_is_channel_mean() {
    let (f, p) = random_map::<f64>(3);
    let uniform_p = vec![0.7; p.len()];
    let h = concept_heatmap(&f, &uniform_p, 0).unwrap();
    for (pos, v) in h.values.iter().enumerate() {
        let cell = f.at(pos);
        let mean = cell.iter().sum::<f64>() / cell.len() as f64;
        assert!((v - mean).abs() < 1e-12);
    }
}

#[test]
fn saturated_logits_select_one_channel() {
    let mut g = rng(9);
    let values = uniform(&mut g, 2 * 3 * 4 * 2, -1.0, 1.0);
    let f = FeatureMap::new("m", vec![2, 3, 4], 2, values).unwrap();
    let h = concept_heatmap(&f, &[100.0, 0.0], 0).unwrap();
    let scale = f.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (pos, v) in h.values.iter().enumerate() {
        assert!((v - f.at(pos)[0]).abs() / scale < 1e-10);
    }
}

#[test]
fn recalibration_is_affine_then_relu() {
    let mut g = rng(11);
    for _ in 0..20 {
        let (d, n) = (g.gen_range(1..5), g.gen_range(1..4));
        let w = uniform(&mut g, d * d * n, -1.0, 1.0);
        let b = uniform(&mut g, d * n, -1.0, 1.0);
        let r = uniform(&mut g, d, -1.0, 1.0);
        let bank = ConceptBank::new(d, n, w.clone(), b.clone()).unwrap();
        let p = compute_recalibration_vectors(&GlobalRepresentation(r.clone()), &bank).unwrap();
        assert_eq!(p.len(), n);
        for (i, chunk) in p.iter().enumerate() {
            for (c, &v) in chunk.iter().enumerate() {
                let col = i * d + c;
                let pre: f64 = b[col] + (0..d).map(|k| r[k] * w[k * d * n + col]).sum::<f64>();
                assert!((v - pre.max(0.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn activation_length_mismatch_is_invalid_input() {
    let err = concept_activation(&[1.0, 2.0], &[0.0]).unwrap_err();
    assert!(matches!(err, mulcpred::Error::InvalidInput(_)));
}

#[test]
fn forward_scores_match_composed_ops() {
    let mut g = rng(21);
    let model = Model::<f64>::init(tiny_config(3, 2), &mut g).unwrap();
    let inputs = tiny_inputs(&mut g);
    let trace = model.forward(&inputs).unwrap();
    let mut flat = 0;
    for (m, branch) in trace.branches.iter().enumerate() {
        let r = global_average_pool(&branch.features).unwrap();
        let p = compute_recalibration_vectors(&r, &model.branches[m].bank).unwrap();
        for (i, pi) in p.iter().enumerate() {
            let s = concept_activation(&r, pi).unwrap();
            assert!((trace.activation[flat] - s).abs() < 1e-12);
            let h = concept_heatmap(&branch.features, pi, i).unwrap();
            assert!((h.mean() - s).abs() < 1e-10);
            flat += 1;
        }
    }
    let y = aggregate_predict(&ActivationVector(trace.activation.clone()), &model.relevance).unwrap();
    assert_eq!(y.probabilities, trace.probabilities);
}
