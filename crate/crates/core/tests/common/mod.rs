#![allow(dead_code)]

use std::collections::BTreeMap;

use mulcpred::backbones::{BackboneConfig, ConvLayerConfig, SequenceEncoder, SpatioTemporalEncoder};
use mulcpred::data::{generate_dataset, Dataset, Sample, SyntheticSpec};
use mulcpred::losses::{column_gram_penalty, row_gram_penalty, LossConfig};
use mulcpred::model::{
    aggregate_backward, aggregate_predict, concept_activation, concept_activation_grad, softmax_backward,
    ActivationVector, BranchConfig, ModalityConfig, ModalityKind, Model, ModelConfig, RelevanceMatrix,
};
use mulcpred::tensor::Tensor;
use mulcpred::train::batch_objective;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_EPS;
            let up = f(&probe);
            probe[i] = orig - FD_EPS;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Worst relative error of one gradient family over `instances` random draws.
pub struct GradReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst < GRAD_TOL
    }
}

fn report(name: &'static str, instances: usize, mut check: impl FnMut(u64) -> f64) -> GradReport {
    let worst = (0..instances as u64).map(&mut check).fold(0.0, f64::max);
    GradReport { name, instances, worst }
}

pub fn activation_gradients(instances: usize) -> GradReport {
    report("activation", instances, |seed| {
        let mut g = rng(1000 + seed);
        let d = g.gen_range(2..8);
        let r = uniform(&mut g, d, -2.0, 2.0);
        let p = uniform(&mut g, d, -3.0, 3.0);
        let (dr, dp) = concept_activation_grad(&r, &p);
        let nr = central_difference(|x| concept_activation(x, &p).unwrap(), &r);
        let np = central_difference(|x| concept_activation(&r, x).unwrap(), &p);
        max_relative_error(&dr, &nr).max(max_relative_error(&dp, &np))
    })
}

/// Scalar `u . softmax(ReLU(S) W_a)` for a random probe direction `u`.
pub fn prediction_gradients(instances: usize) -> GradReport {
    report("prediction", instances, |seed| {
        let mut g = rng(2000 + seed);
        let (k, c) = (g.gen_range(1..7), g.gen_range(2..5));
        let s = away_from_zero(&mut g, k, 0.1, 2.0);
        let w = uniform(&mut g, k * c, -1.5, 1.5);
        let u = uniform(&mut g, c, -1.0, 1.0);
        let probe = |s: &[f64], w: &[f64]| {
            let wa = RelevanceMatrix::new(k, c, w.to_vec()).unwrap();
            let y = aggregate_predict(&ActivationVector(s.to_vec()), &wa).unwrap();
            y.probabilities.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        };
        let wa = RelevanceMatrix::new(k, c, w.clone()).unwrap();
        let y = aggregate_predict(&ActivationVector(s.clone()), &wa).unwrap();
        let dlogits = softmax_backward(&y.probabilities, &u);
        let mut dw = RelevanceMatrix::zeros(k, c);
        let ds = aggregate_backward(&s, &wa, &dlogits, &mut dw);
        let ns = central_difference(|x| probe(x, &w), &s);
        let nw = central_difference(|x| probe(&s, x), &w);
        max_relative_error(&ds, &ns).max(max_relative_error(dw.values(), &nw))
    })
}

pub fn diversity_gradients(instances: usize) -> GradReport {
    report("diversity", instances, |seed| {
        let mut g = rng(3000 + seed);
        let (n, d) = (g.gen_range(1..6), g.gen_range(1..6));
        let p = uniform(&mut g, n * d, 0.0, 1.5);
        let (_, grad) = row_gram_penalty(&p, n, d);
        let num = central_difference(|x| row_gram_penalty(x, n, d).0, &p);
        max_relative_error(&grad, &num)
    })
}

pub fn contrastive_gradients(instances: usize) -> GradReport {
    report("contrastive", instances, |seed| {
        let mut g = rng(4000 + seed);
        let (b, d) = (g.gen_range(1..9), g.gen_range(1..6));
        let r = uniform(&mut g, b * d, -1.0, 1.0);
        let (_, grad) = column_gram_penalty(&r, b, d);
        let num = central_difference(|x| column_gram_penalty(x, b, d).0, &r);
        max_relative_error(&grad, &num)
    })
}

fn conv_layers() -> Vec<ConvLayerConfig> {
    vec![
        ConvLayerConfig {
            out_channels: 3,
            kernel: [1, 2, 2],
            stride: [1, 2, 2],
        },
        ConvLayerConfig {
            out_channels: 3,
            kernel: [2, 1, 1],
            stride: [1, 1, 1],
        },
    ]
}

fn probe_dot(values: &[f64], u: &[f64]) -> f64 {
    values.iter().zip(u).map(|(a, b)| a * b).sum()
}

/// Conv stack (51 parameters) and Elman cell (15 parameters) against a
/// random linear probe of their outputs.
pub fn backbone_gradients(instances: usize) -> GradReport {
    report("backbones", instances, |seed| {
        let mut g = rng(5000 + seed);
        let enc = SpatioTemporalEncoder::<f64>::random(2, &conv_layers(), &mut g);
        let x = Tensor::new(vec![3, 4, 4, 2], uniform(&mut g, 96, -1.0, 1.0)).unwrap();
        let (f, trace) = enc.forward(&x, "clip").unwrap();
        let u = uniform(&mut g, f.values().len(), -1.0, 1.0);
        let mut grad = SpatioTemporalEncoder::zeros(2, &conv_layers());
        enc.backward(&trace, &u, &mut grad);
        let analytic: Vec<f64> = grad
            .layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect();
        let theta: Vec<f64> = enc
            .layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect();
        let conv_num = central_difference(
            |t| {
                let mut e = enc.clone();
                let mut it = t.iter();
                for l in &mut e.layers {
                    l.weight
                        .iter_mut()
                        .chain(l.bias.iter_mut())
                        .for_each(|v| *v = *it.next().unwrap());
                }
                probe_dot(e.forward(&x, "clip").unwrap().0.values(), &u)
            },
            &theta,
        );
        let conv_err = max_relative_error(&analytic, &conv_num);

        let rnn = SequenceEncoder::<f64>::random(2, 3, &mut g);
        let xs = Tensor::new(vec![4, 2], uniform(&mut g, 8, -1.0, 1.0)).unwrap();
        let (states, _, trace) = rnn.forward(&xs, "seq").unwrap();
        let v = uniform(&mut g, states.values().len(), -1.0, 1.0);
        let mut rgrad = SequenceEncoder::zeros(2, 3);
        rnn.backward(&trace, &v, &mut rgrad);
        let analytic: Vec<f64> = rgrad
            .w_in
            .iter()
            .chain(&rgrad.w_rec)
            .chain(&rgrad.bias)
            .copied()
            .collect();
        let theta: Vec<f64> = rnn.w_in.iter().chain(&rnn.w_rec).chain(&rnn.bias).copied().collect();
        let rnn_num = central_difference(
            |t| {
                let mut e = rnn.clone();
                e.w_in.copy_from_slice(&t[..6]);
                e.w_rec.copy_from_slice(&t[6..15]);
                e.bias.copy_from_slice(&t[15..]);
                probe_dot(e.forward(&xs, "seq").unwrap().0.values(), &v)
            },
            &theta,
        );
        conv_err.max(max_relative_error(&analytic, &rnn_num))
    })
}

/// Two-branch model small enough for exhaustive finite differences.
pub fn tiny_config(num_concepts: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        branches: vec![
            BranchConfig {
                modality: ModalityConfig::new("clip", ModalityKind::Spatiotemporal, 3, num_concepts),
                backbone: BackboneConfig::Spatiotemporal {
                    in_channels: 2,
                    layers: conv_layers(),
                },
            },
            BranchConfig {
                modality: ModalityConfig::new("track", ModalityKind::Sequential, 3, num_concepts),
                backbone: BackboneConfig::Sequential { input_dim: 2 },
            },
        ],
        num_classes,
    }
}

pub fn tiny_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![
        Tensor::new(vec![3, 4, 4, 2], uniform(rng, 96, -1.0, 1.0)).unwrap(),
        Tensor::new(vec![4, 2], uniform(rng, 8, -1.0, 1.0)).unwrap(),
    ]
}

pub fn flatten(model: &Model<f64>) -> Vec<f64> {
    model.params().iter().flat_map(|p| p.data.iter().copied()).collect()
}

pub fn unflatten(model: &mut Model<f64>, theta: &[f64]) {
    let mut it = theta.iter();
    for p in model.params_mut() {
        p.data.iter_mut().for_each(|v| *v = *it.next().unwrap());
    }
    assert!(it.next().is_none());
}

/// The full objective (classification, contrastive and diversity terms)
/// with respect to every parameter.
pub fn model_gradients(instances: usize) -> GradReport {
    let loss = LossConfig {
        lambda1: 0.1,
        lambda2: 0.5,
    };
    report("full model", instances, |seed| {
        let mut g = rng(6000 + seed);
        let model = Model::<f64>::init(tiny_config(2, 3), &mut g).unwrap();
        let batch: Vec<Vec<Tensor<f64>>> = (0..3).map(|_| tiny_inputs(&mut g)).collect();
        let labels: Vec<usize> = (0..3).map(|_| g.gen_range(0..3)).collect();
        let (_, grad, _) = batch_objective(&model, &batch, &labels, &loss).unwrap();
        let theta = flatten(&model);
        let num = central_difference(
            |t| {
                let mut m = model.clone();
                unflatten(&mut m, t);
                batch_objective(&m, &batch, &labels, &loss).unwrap().0.total
            },
            &theta,
        );
        max_relative_error(&flatten(&grad), &num)
    })
}

pub fn all_gradient_reports(instances: usize) -> Vec<GradReport> {
    vec![
        activation_gradients(instances),
        prediction_gradients(instances),
        diversity_gradients(instances),
        contrastive_gradients(instances),
        backbone_gradients(instances),
        model_gradients(instances),
    ]
}

pub fn small_dataset(samples: usize, seed: u64) -> Dataset {
    generate_dataset(&SyntheticSpec::desk_default().with_samples(samples).with_seed(seed)).unwrap()
}

/// Brute-force top-k: full sort by score descending, then id ascending.
pub fn brute_top_k(scores: &BTreeMap<u64, f64>, k: usize) -> Vec<u64> {
    let mut all: Vec<(u64, f64)> = scores.iter().map(|(&i, &s)| (i, s)).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|(i, _)| i).collect()
}

pub fn sample_by_id(samples: &[Sample], id: u64) -> &Sample {
    samples.iter().find(|s| s.id == id).unwrap()
}

fn matrix(rows: &[&[f64]]) -> mulcpred::losses::Matrix<f64> {
    mulcpred::losses::Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// `(name, computed, expected)` for every fixed-value loss example.
pub fn loss_fixtures() -> Vec<(&'static str, f64, f64)> {
    use mulcpred::losses::*;
    let sqrt2 = std::f64::consts::SQRT_2;
    let ln2 = std::f64::consts::LN_2;
    let cfg = |lambda1, lambda2| LossConfig { lambda1, lambda2 };
    vec![
        ("ce certain", classification_loss(&[0.0, 1.0], 1).unwrap(), 0.0),
        ("ce uniform", classification_loss(&[0.5, 0.5], 0).unwrap(), ln2),
        (
            "ce one-hot",
            classification_loss_one_hot(&[0.5, 0.5], &[0.0, 1.0]).unwrap(),
            ln2,
        ),
        (
            "ce 0.75",
            classification_loss(&[0.25, 0.75], 1).unwrap(),
            -(0.75f64.ln()),
        ),
        (
            "div identity",
            diversity_loss(&[matrix(&[&[1.0, 0.0], &[0.0, 1.0]])]).unwrap(),
            0.0,
        ),
        (
            "div duplicate rows",
            diversity_loss(&[matrix(&[&[1.0, 0.0], &[1.0, 0.0]])]).unwrap(),
            sqrt2,
        ),
        ("div single", diversity_loss(&[matrix(&[&[1.0]])]).unwrap(), 0.0),
        (
            "cont identity",
            contrastive_loss(&[matrix(&[&[1.0, 0.0], &[0.0, 1.0]])]).unwrap(),
            0.0,
        ),
        (
            "cont single row",
            contrastive_loss(&[matrix(&[&[1.0, 1.0]])]).unwrap(),
            sqrt2,
        ),
        (
            "cont zeros",
            contrastive_loss(&[matrix(&[&[0.0, 0.0], &[0.0, 0.0]])]).unwrap(),
            sqrt2,
        ),
        ("total lambda1=0", total_loss(0.8, 3.0, 5.0, &cfg(0.0, 0.5)), 0.8),
        ("total lambda2=1", total_loss(0.0, 2.0, 7.0, &cfg(1.0, 1.0)), 2.0),
        ("total defaults", total_loss(1.0, 2.0, 4.0, &cfg(0.1, 0.5)), 1.3),
    ]
}

pub struct Toy {
    pub model: Model<f32>,
    pub train: Dataset,
    pub test: Dataset,
}

/// A briefly trained model with two concepts per modality.
pub fn toy() -> &'static Toy {
    static TOY: std::sync::OnceLock<Toy> = std::sync::OnceLock::new();
    TOY.get_or_init(|| {
        use mulcpred::train::{train, TrainConfig};
        let train_set = small_dataset(64, 21);
        let test = generate_dataset(
            &SyntheticSpec::desk_default()
                .with_samples(40)
                .with_seed(22)
                .with_first_id(1000),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 3,
            ..TrainConfig::default()
        };
        let model = train(ModelConfig::desk_default(2), &train_set.samples, &cfg)
            .unwrap()
            .checkpoint
            .model;
        Toy {
            model,
            train: train_set,
            test,
        }
    })
}

/// Random featuremap with rank 1 or 3 and matching concept logits.
pub fn random_map<T: mulcpred::scalar::Scalar>(seed: u64) -> (mulcpred::model::FeatureMap<T>, Vec<T>) {
    let mut g = rng(seed);
    let rank3 = g.gen_bool(0.5);
    let dims = if rank3 {
        vec![g.gen_range(1..5), g.gen_range(1..6), g.gen_range(1..6)]
    } else {
        vec![g.gen_range(1..10)]
    };
    let d = g.gen_range(1..9);
    let n = dims.iter().product::<usize>() * d;
    let values = uniform(&mut g, n, -3.0, 3.0).into_iter().map(T::of).collect();
    let p = uniform(&mut g, d, -4.0, 4.0).into_iter().map(T::of).collect();
    (mulcpred::model::FeatureMap::new("m", dims, d, values).unwrap(), p)
}
