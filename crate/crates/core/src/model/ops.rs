use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast_vec, dot, relu, softmax, softmax_into, Scalar};

pub const DEFAULT_CONCEPTS: usize = 10;

fn default_concepts() -> usize {
    DEFAULT_CONCEPTS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Spatiotemporal,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub kind: ModalityKind,
    pub feature_dim: usize,
    #[serde(default = "default_concepts")]
    pub num_concepts: usize,
}

impl ModalityConfig {
    pub fn new(name: &str, kind: ModalityKind, feature_dim: usize, num_concepts: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            feature_dim,
            num_concepts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(':') || self.name.contains('/') {
            return Err(Error::Config(format!(
                "modality name {:?} must be non-empty and free of ':' and '/'",
                self.name
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config(format!("{}: feature_dim must be >= 1", self.name)));
        }
        if self.num_concepts == 0 {
            return Err(Error::Config(format!("{}: num_concepts must be >= 1", self.name)));
        }
        Ok(())
    }
}

/// Checks each modality and that names are unique.
pub fn validate_modalities(modalities: &[ModalityConfig]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for m in modalities {
        m.validate()?;
        if !seen.insert(m.name.as_str()) {
            return Err(Error::Config(format!("duplicate modality name {:?}", m.name)));
        }
    }
    Ok(())
}

/// Backbone output with channels last. `dims` holds the non-channel extents:
/// `[T, H, W]` for spatiotemporal maps and `[T]` for sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    modality: String,
    dims: Vec<usize>,
    channels: usize,
    values: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(modality: &str, dims: Vec<usize>, channels: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput("feature map needs at least one channel".into()));
        }
        let expected = dims.iter().product::<usize>() * channels;
        if values.len() != expected {
            return Err(Error::InvalidInput(format!(
                "feature map dims {dims:?} x {channels} channels needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            modality: modality.to_string(),
            dims,
            channels,
            values,
        })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Channel vector at a flat position.
    pub fn at(&self, position: usize) -> &[T] {
        &self.values[position * self.channels..(position + 1) * self.channels]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            modality: self.modality.clone(),
            dims: self.dims.clone(),
            channels: self.channels,
            values: cast_vec(&self.values),
        }
    }
}

/// Pooled per-channel representation of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalRepresentation<T>(pub Vec<T>);

impl<T> Deref for GlobalRepresentation<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Mean over all non-channel positions.
pub fn global_average_pool<T: Scalar>(f: &FeatureMap<T>) -> Result<GlobalRepresentation<T>> {
    let n = f.positions();
    if n == 0 {
        return Err(Error::InvalidInput(format!(
            "{}: cannot pool a feature map with empty extent {:?}",
            f.modality, f.dims
        )));
    }
    let mut r = vec![T::zero(); f.channels];
    for cell in f.values.chunks_exact(f.channels) {
        for (acc, &v) in r.iter_mut().zip(cell) {
            *acc = *acc + v;
        }
    }
    let scale = T::one() / T::of(n as f64);
    r.iter_mut().for_each(|v| *v = *v * scale);
    Ok(GlobalRepresentation(r))
}

/// Affine map from a pooled feature to `num_concepts` recalibration vectors
/// of length `dim`, stored concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank<T> {
    pub dim: usize,
    pub num_concepts: usize,
    /// `dim x (num_concepts * dim)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConceptBank<T> {
    pub fn new(dim: usize, num_concepts: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        let width = dim * num_concepts;
        if dim == 0 || num_concepts == 0 {
            return Err(Error::Config(
                "concept bank needs dim >= 1 and num_concepts >= 1".into(),
            ));
        }
        if weight.len() != dim * width || bias.len() != width {
            return Err(Error::Config(format!(
                "concept bank with dim {dim} and {num_concepts} concepts needs weight {}x{} and bias {}, got {} and {}",
                dim,
                width,
                width,
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Config("concept bank has non-finite parameters".into()));
        }
        Ok(Self {
            dim,
            num_concepts,
            weight,
            bias,
        })
    }

    pub fn zeros(dim: usize, num_concepts: usize) -> Self {
        Self {
            dim,
            num_concepts,
            weight: vec![T::zero(); dim * dim * num_concepts],
            bias: vec![T::zero(); dim * num_concepts],
        }
    }

    pub fn random<R: Rng>(dim: usize, num_concepts: usize, rng: &mut R) -> Self {
        let mut bank = Self::zeros(dim, num_concepts);
        let bound = (3.0 / dim as f64).sqrt();
        for w in bank.weight.iter_mut() {
            *w = T::of(rng.gen_range(-bound..bound));
        }
        for b in bank.bias.iter_mut() {
            *b = T::of(rng.gen_range(0.0..1.0));
        }
        bank
    }

    pub fn width(&self) -> usize {
        self.dim * self.num_concepts
    }

    /// `ReLU(r W + b)`, concatenated over concepts.
    pub fn recalibrate(&self, r: &[T]) -> Result<Vec<T>> {
        if r.len() != self.dim {
            return Err(Error::Config(format!(
                "representation has {} channels, concept bank expects {}",
                r.len(),
                self.dim
            )));
        }
        let width = self.width();
        let mut out = self.bias.clone();
        for (i, &ri) in r.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&self.weight[i * width..(i + 1) * width]) {
                *o = *o + ri * w;
            }
        }
        out.iter_mut().for_each(|v| *v = relu(*v));
        Ok(out)
    }

    /// Backward through `ReLU(r W + b)` given the post-activation output and
    /// its gradient. Accumulates into `grad` and `dr`.
    pub fn backward(&self, r: &[T], recal: &[T], drecal: &[T], grad: &mut ConceptBank<T>, dr: &mut [T]) {
        let width = self.width();
        let dpre: Vec<T> = recal
            .iter()
            .zip(drecal)
            .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
            .collect();
        for (b, &g) in grad.bias.iter_mut().zip(&dpre) {
            *b = *b + g;
        }
        for (i, &ri) in r.iter().enumerate() {
            let wrow = &self.weight[i * width..(i + 1) * width];
            let grow = &mut grad.weight[i * width..(i + 1) * width];
            let mut acc = T::zero();
            for k in 0..width {
                grow[k] = grow[k] + ri * dpre[k];
                acc = acc + wrow[k] * dpre[k];
            }
            dr[i] = dr[i] + acc;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConceptBank<U> {
        ConceptBank {
            dim: self.dim,
            num_concepts: self.num_concepts,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Splits `ReLU(r W + b)` into one length-`dim` vector per concept, in index order.
pub fn compute_recalibration_vectors<T: Scalar>(
    r: &GlobalRepresentation<T>,
    bank: &ConceptBank<T>,
) -> Result<Vec<Vec<T>>> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite representation".into()));
    }
    let flat = bank.recalibrate(r)?;
    Ok(flat.chunks_exact(bank.dim).map(<[T]>::to_vec).collect())
}

/// Activation score `softmax(p) . r`.
pub fn concept_activation<T: Scalar>(r: &[T], p: &[T]) -> Result<T> {
    if r.len() != p.len() {
        return Err(Error::InvalidInput(format!(
            "representation length {} differs from recalibration vector length {}",
            r.len(),
            p.len()
        )));
    }
    Ok(dot(&softmax(p), r))
}

/// Gradients of [`concept_activation`] with respect to `r` and `p`.
pub fn concept_activation_grad<T: Scalar>(r: &[T], p: &[T]) -> (Vec<T>, Vec<T>) {
    let a = softmax(p);
    let s = dot(&a, r);
    let dp = a.iter().zip(r).map(|(&ai, &ri)| ai * (ri - s)).collect();
    (a, dp)
}

/// Concatenated activation scores of all modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationVector<T>(pub Vec<T>);

impl<T> Deref for ActivationVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Aggregator weights, one row per concept and one column per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMatrix<T> {
    rows: usize,
    classes: usize,
    values: Vec<T>,
}

impl<T: Scalar> RelevanceMatrix<T> {
    pub fn new(rows: usize, classes: usize, values: Vec<T>) -> Result<Self> {
        if rows == 0 || classes == 0 || values.len() != rows * classes {
            return Err(Error::Config(format!(
                "relevance matrix {rows}x{classes} needs {} values, got {}",
                rows * classes,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("relevance matrix has non-finite entries".into()));
        }
        Ok(Self { rows, classes, values })
    }

    pub fn zeros(rows: usize, classes: usize) -> Self {
        Self {
            rows,
            classes,
            values: vec![T::zero(); rows * classes],
        }
    }

    pub fn random<R: Rng>(rows: usize, classes: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, classes);
        for v in m.values.iter_mut() {
            *v = T::of(rng.gen_range(-0.1..0.1));
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, row: usize, class: usize) -> T {
        self.values[row * self.classes + class]
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.values[row * self.classes..(row + 1) * self.classes]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        &mut self.values[row * self.classes..(row + 1) * self.classes]
    }

    pub fn column(&self, class: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, class)).collect()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Binary display value `W[i, positive] - W[i, negative]`; for more than
    /// two classes, the raw entry for `positive`.
    pub fn display_relevance(&self, row: usize, positive: usize) -> T {
        if self.classes == 2 {
            self.get(row, positive) - self.get(row, 1 - positive)
        } else {
            self.get(row, positive)
        }
    }

    pub fn cast<U: Scalar>(&self) -> RelevanceMatrix<U> {
        RelevanceMatrix {
            rows: self.rows,
            classes: self.classes,
            values: cast_vec(&self.values),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput<T> {
    pub probabilities: Vec<T>,
    pub logits: Vec<T>,
    pub activation: ActivationVector<T>,
}

/// `softmax(ReLU(S) W_a)`.
pub fn aggregate_predict<T: Scalar>(s: &ActivationVector<T>, w: &RelevanceMatrix<T>) -> Result<PredictionOutput<T>> {
    if s.len() != w.rows {
        return Err(Error::Config(format!(
            "activation vector has {} concepts, relevance matrix has {} rows",
            s.len(),
            w.rows
        )));
    }
    let mut logits = vec![T::zero(); w.classes];
    for (k, &sk) in s.iter().enumerate() {
        let a = relu(sk);
        if a == T::zero() {
            continue;
        }
        for (z, &wk) in logits.iter_mut().zip(w.row(k)) {
            *z = *z + a * wk;
        }
    }
    let mut probabilities = vec![T::zero(); w.classes];
    softmax_into(&logits, &mut probabilities);
    Ok(PredictionOutput {
        probabilities,
        logits,
        activation: s.clone(),
    })
}

/// Backward through `ReLU(S) W_a` given `dL/dlogits`; returns `dL/dS` and
/// accumulates `dL/dW_a` into `dw`.
pub fn aggregate_backward<T: Scalar>(
    s: &[T],
    w: &RelevanceMatrix<T>,
    dlogits: &[T],
    dw: &mut RelevanceMatrix<T>,
) -> Vec<T> {
    let mut ds = vec![T::zero(); s.len()];
    for (k, &sk) in s.iter().enumerate() {
        let a = relu(sk);
        for (g, &dz) in dw.row_mut(k).iter_mut().zip(dlogits) {
            *g = *g + a * dz;
        }
        if sk > T::zero() {
            ds[k] = dot(w.row(k), dlogits);
        }
    }
    ds
}

/// Vector-Jacobian product of softmax.
pub fn softmax_backward<T: Scalar>(probs: &[T], dprobs: &[T]) -> Vec<T> {
    let inner = dot(probs, dprobs);
    probs.iter().zip(dprobs).map(|(&p, &g)| p * (g - inner)).collect()
}

/// Per-position response of one concept: channels weighted by `softmax(p)`
/// and summed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptHeatmap<T> {
    pub modality: String,
    pub concept: usize,
    pub dims: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> ConceptHeatmap<T> {
    pub fn mean(&self) -> T {
        let n = T::of(self.values.len() as f64);
        self.values.iter().copied().sum::<T>() / n
    }

    /// Per-map min-max scaling to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.values
            .iter()
            .map(|v| if span > 0.0 { (v.as_f64() - lo) / span } else { 0.0 })
            .collect()
    }
}

pub fn concept_heatmap<T: Scalar>(f: &FeatureMap<T>, p: &[T], concept: usize) -> Result<ConceptHeatmap<T>> {
    if p.len() != f.channels {
        return Err(Error::InvalidInput(format!(
            "{}: recalibration vector length {} differs from {} channels",
            f.modality,
            p.len(),
            f.channels
        )));
    }
    let a = softmax(p);
    let values = f.values.chunks_exact(f.channels).map(|cell| dot(&a, cell)).collect();
    Ok(ConceptHeatmap {
        modality: f.modality.clone(),
        concept,
        dims: f.dims.clone(),
        values,
    })
}
