//! Most-Relevant-First perturbation curves over concept activations.
//!
//! Concepts are ranked by their signed contribution `ReLU(S)_k * W_a[k, c]`
//! to the logit of class `c`. The extended curve starts from `S` with every
//! negatively contributing concept zeroed, then walks the ranking: a
//! positive concept is removed (set to zero), a negative one is restored to
//! its original value. Lower area means the ranking is more faithful.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, RelevanceMatrix};
use crate::scalar::{relu, Scalar};

/// Concepts in descending order of signed importance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub class: usize,
    /// Flat concept indices, most important first.
    pub order: Vec<usize>,
    /// Importance of `order[k]`.
    pub scores: Vec<f64>,
}

impl ImportanceRanking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Concepts with negative importance.
    pub fn negative(&self) -> Vec<usize> {
        self.order
            .iter()
            .zip(&self.scores)
            .filter(|(_, &r)| r < 0.0)
            .map(|(&k, _)| k)
            .collect()
    }
}

pub fn rank_concept_importance<T: Scalar>(s: &[T], w: &RelevanceMatrix<T>, class: usize) -> Result<ImportanceRanking> {
    if class >= w.classes() {
        return Err(Error::Lookup(format!(
            "class {class} out of range for {} classes",
            w.classes()
        )));
    }
    if s.len() != w.rows() {
        return Err(Error::Shape(format!(
            "activation vector has {} concepts, relevance matrix has {} rows",
            s.len(),
            w.rows()
        )));
    }
    let contrib: Vec<f64> = s
        .iter()
        .enumerate()
        .map(|(k, &sk)| (relu(sk) * w.get(k, class)).as_f64() + 0.0) // -0.0 becomes 0.0
        .collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    // sort_by is stable, so equal contributions keep index order
    order.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]));
    let scores = order.iter().map(|&k| contrib[k]).collect();
    Ok(ImportanceRanking { class, order, scores })
}

/// Confidence curve and its area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoRFCurve {
    pub class: usize,
    pub values: Vec<f64>,
    pub auc: f64,
}

impl MoRFCurve {
    pub fn from_values(class: usize, values: Vec<f64>) -> Result<Self> {
        let auc = auc_morf(&values)?;
        Ok(Self { class, values, auc })
    }

    /// `k,f_c` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,f_c\n");
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

/// Area under the curve: `1/(L+1) * sum_k (f_k + f_{k-1}) / 2`.
pub fn auc_morf(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "a MoRF curve needs at least 2 values, got {}",
            values.len()
        )));
    }
    let area: f64 = values.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    Ok(area / values.len() as f64)
}

fn check_ranking(s: &[f64], ranking: &ImportanceRanking) -> Result<()> {
    let mut seen = vec![false; s.len()];
    if ranking.order.len() != s.len() || ranking.scores.len() != s.len() {
        return Err(Error::Shape(format!(
            "ranking covers {} concepts, activation vector has {}",
            ranking.order.len(),
            s.len()
        )));
    }
    for &k in &ranking.order {
        if k >= s.len() || std::mem::replace(&mut seen[k], true) {
            return Err(Error::Shape(format!("ranking is not a permutation (index {k})")));
        }
    }
    Ok(())
}

/// The `L + 1` perturbed activation vectors visited by the extended curve.
pub fn extended_morf_states(s: &[f64], ranking: &ImportanceRanking) -> Result<Vec<Vec<f64>>> {
    check_ranking(s, ranking)?;
    let mut x = s.to_vec();
    for k in ranking.negative() {
        x[k] = 0.0;
    }
    let mut states = Vec::with_capacity(s.len() + 1);
    states.push(x.clone());
    for (&k, &r) in ranking.order.iter().zip(&ranking.scores) {
        x[k] = if r >= 0.0 { 0.0 } else { s[k] };
        states.push(x.clone());
    }
    Ok(states)
}

pub fn extended_morf_curve<F>(mut eval: F, s: &[f64], ranking: &ImportanceRanking) -> Result<MoRFCurve>
where
    F: FnMut(&[f64]) -> f64,
{
    let values = extended_morf_states(s, ranking)?.iter().map(|x| eval(x)).collect();
    MoRFCurve::from_values(ranking.class, values)
}

/// Plain removal in `order`, starting from the unperturbed `s`.
pub fn vanilla_morf_curve<F>(mut eval: F, s: &[f64], order: &[usize], class: usize) -> Result<MoRFCurve>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = s.to_vec();
    let mut values = vec![eval(&x)];
    for &k in order {
        let slot = x
            .get_mut(k)
            .ok_or_else(|| Error::Shape(format!("order index {k} out of range")))?;
        *slot = 0.0;
        values.push(eval(&x));
    }
    MoRFCurve::from_values(class, values)
}

/// Mean area over `trials` random orderings that keep each concept's sign.
pub fn random_order_baseline<F>(
    mut eval: F,
    s: &[f64],
    ranking: &ImportanceRanking,
    trials: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    check_ranking(s, ranking)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, f64)> = ranking
        .order
        .iter()
        .copied()
        .zip(ranking.scores.iter().copied())
        .collect();
    let mut total = 0.0;
    for _ in 0..trials {
        pairs.shuffle(&mut rng);
        let shuffled = ImportanceRanking {
            class: ranking.class,
            order: pairs.iter().map(|p| p.0).collect(),
            scores: pairs.iter().map(|p| p.1).collect(),
        };
        total += extended_morf_curve(&mut eval, s, &shuffled)?.auc;
    }
    Ok(total / trials as f64)
}

/// Class-`c` confidence of `model` as a function of its activation vector.
pub fn model_confidence(model: &Model<f64>, class: usize) -> impl Fn(&[f64]) -> f64 + '_ {
    move |s| {
        model
            .predict_from_activation(s)
            .map(|p| p.probabilities[class])
            .expect("activation length checked by the ranking")
    }
}

/// Curve of one sample and class under the model's own ranking.
pub fn sample_morf(model: &Model<f64>, activation: &[f64], class: usize) -> Result<(ImportanceRanking, MoRFCurve)> {
    let ranking = rank_concept_importance(activation, &model.relevance, class)?;
    let curve = extended_morf_curve(model_confidence(model, class), activation, &ranking)?;
    Ok((ranking, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAuc {
    pub sample_id: u64,
    pub class: usize,
    pub auc: f64,
    pub random_auc: f64,
}

/// Per-sample areas plus unweighted means over all samples and classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessSummary {
    pub trials: usize,
    pub seed: u64,
    pub mean_auc: f64,
    pub mean_random_auc: f64,
    pub samples: Vec<SampleAuc>,
}

/// Scores every `(sample, class)` pair. `activations` holds `(sample_id, S)`.
pub fn faithfulness_summary(
    model: &Model<f64>,
    activations: &[(u64, Vec<f64>)],
    trials: usize,
    seed: u64,
) -> Result<FaithfulnessSummary> {
    if activations.is_empty() {
        return Err(Error::InvalidInput("no samples to score".into()));
    }
    let mut samples = Vec::new();
    for (i, (id, s)) in activations.iter().enumerate() {
        for class in 0..model.num_classes() {
            let (ranking, curve) = sample_morf(model, s, class)?;
            let trial_seed = seed.wrapping_add((i * model.num_classes() + class) as u64);
            let random_auc = random_order_baseline(model_confidence(model, class), s, &ranking, trials, trial_seed)?;
            samples.push(SampleAuc {
                sample_id: *id,
                class,
                auc: curve.auc,
                random_auc,
            });
        }
    }
    let n = samples.len() as f64;
    Ok(FaithfulnessSummary {
        trials,
        seed,
        mean_auc: samples.iter().map(|s| s.auc).sum::<f64>() / n,
        mean_random_auc: samples.iter().map(|s| s.random_auc).sum::<f64>() / n,
        samples,
    })
}
