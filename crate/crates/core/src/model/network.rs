use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::*;
use crate::backbones::{Backbone, BackboneConfig, BackboneTrace};
use crate::error::{Error, Result};
use crate::scalar::{softmax_into, Scalar};
use crate::tensor::Tensor;

/// One modality branch: its identity plus the backbone that encodes it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub modality: ModalityConfig,
    pub backbone: BackboneConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub branches: Vec<BranchConfig>,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Appearance clip, trajectory and ego-motion branches with `d_m = 16`.
    pub fn desk_default(num_concepts: usize) -> Self {
        let d = 16;
        ModelConfig {
            branches: vec![
                BranchConfig {
                    modality: ModalityConfig::new("appearance", ModalityKind::Spatiotemporal, d, num_concepts),
                    backbone: BackboneConfig::default_spatiotemporal(d),
                },
                BranchConfig {
                    modality: ModalityConfig::new("trajectory", ModalityKind::Sequential, d, num_concepts),
                    backbone: BackboneConfig::Sequential { input_dim: 4 },
                },
                BranchConfig {
                    modality: ModalityConfig::new("ego", ModalityKind::Sequential, d, num_concepts),
                    backbone: BackboneConfig::Sequential { input_dim: 1 },
                },
            ],
            num_classes: 2,
        }
    }

    /// Sets `d_m` of every branch, resizing the last conv layer to match.
    pub fn with_feature_dim(mut self, d: usize) -> Self {
        for b in &mut self.branches {
            b.modality.feature_dim = d;
            if let BackboneConfig::Spatiotemporal { layers, .. } = &mut b.backbone {
                if let Some(last) = layers.last_mut() {
                    last.out_channels = d;
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least two classes".into()));
        }
        let modalities: Vec<_> = self.branches.iter().map(|b| b.modality.clone()).collect();
        validate_modalities(&modalities)?;
        for b in &self.branches {
            let m = &b.modality;
            match (&b.backbone, m.kind) {
                (BackboneConfig::Spatiotemporal { in_channels, layers }, ModalityKind::Spatiotemporal) => {
                    if *in_channels == 0 || layers.is_empty() {
                        return Err(Error::Config(format!("{}: empty conv stack", m.name)));
                    }
                    for l in layers {
                        if l.out_channels == 0 || l.kernel.contains(&0) || l.stride.contains(&0) {
                            return Err(Error::Config(format!("{}: zero-sized conv layer", m.name)));
                        }
                    }
                    let out = b.backbone.output_channels(m.feature_dim);
                    if out != m.feature_dim {
                        return Err(Error::Config(format!(
                            "{}: conv stack produces {out} channels but feature_dim is {}",
                            m.name, m.feature_dim
                        )));
                    }
                }
                (BackboneConfig::Sequential { input_dim }, ModalityKind::Sequential) => {
                    if *input_dim == 0 {
                        return Err(Error::Config(format!("{}: input_dim must be >= 1", m.name)));
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{}: backbone type does not match modality kind",
                        m.name
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<&ModalityConfig> {
        self.branches.iter().map(|b| &b.modality).collect()
    }

    pub fn total_concepts(&self) -> usize {
        self.branches.iter().map(|b| b.modality.num_concepts).sum()
    }

    /// Position of the first concept of branch `m` in the activation vector.
    pub fn concept_offset(&self, m: usize) -> usize {
        self.branches[..m].iter().map(|b| b.modality.num_concepts).sum()
    }

    pub fn concept_ids(&self) -> Vec<ConceptId> {
        self.branches
            .iter()
            .flat_map(|b| (0..b.modality.num_concepts).map(move |i| ConceptId::new(&b.modality.name, i)))
            .collect()
    }

    /// Flat activation index of a concept.
    pub fn concept_index(&self, id: &ConceptId) -> Result<usize> {
        let (m, b) = self
            .branches
            .iter()
            .enumerate()
            .find(|(_, b)| b.modality.name == id.modality)
            .ok_or_else(|| Error::Lookup(format!("unknown concept {id}: no modality {:?}", id.modality)))?;
        if id.index >= b.modality.num_concepts {
            return Err(Error::Lookup(format!(
                "unknown concept {id}: modality has {} concepts",
                b.modality.num_concepts
            )));
        }
        Ok(self.concept_offset(m) + id.index)
    }

    pub fn concept_at(&self, flat: usize) -> Option<ConceptId> {
        self.concept_ids().into_iter().nth(flat)
    }
}

/// Concept identifier `modality:index`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ConceptId {
    pub modality: String,
    pub index: usize,
}

impl ConceptId {
    pub fn new(modality: &str, index: usize) -> Self {
        Self {
            modality: modality.to_string(),
            index,
        }
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.modality, self.index)
    }
}

impl FromStr for ConceptId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (m, i) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Lookup(format!("malformed concept id {s:?}, expected modality:index")))?;
        let index = i
            .parse()
            .map_err(|_| Error::Lookup(format!("malformed concept index in {s:?}")))?;
        if m.is_empty() {
            return Err(Error::Lookup(format!("malformed concept id {s:?}")));
        }
        Ok(ConceptId::new(m, index))
    }
}

impl From<ConceptId> for String {
    fn from(id: ConceptId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for ConceptId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    pub backbone: Backbone<T>,
    pub bank: ConceptBank<T>,
}

/// Optimizer group a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

pub struct ParamView<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a [T],
}

pub struct ParamViewMut<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut [T],
}

/// Full classifier: per-modality backbones and concept banks feeding a
/// linear aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub branches: Vec<Branch<T>>,
    pub relevance: RelevanceMatrix<T>,
}

/// Intermediate values of one branch kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BranchTrace<T> {
    pub backbone: BackboneTrace<T>,
    pub features: FeatureMap<T>,
    pub representation: Vec<T>,
    /// Post-ReLU recalibration vectors, concatenated.
    pub recalibration: Vec<T>,
    /// `softmax` of each recalibration vector, concatenated.
    pub attention: Vec<T>,
    pub scores: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub branches: Vec<BranchTrace<T>>,
    pub activation: Vec<T>,
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn prediction(&self) -> PredictionOutput<T> {
        PredictionOutput {
            probabilities: self.probabilities.clone(),
            logits: self.logits.clone(),
            activation: ActivationVector(self.activation.clone()),
        }
    }

    /// Recalibration vector `p_{m,i}`.
    pub fn recalibration_vector(&self, branch: usize, concept: usize) -> &[T] {
        let b = &self.branches[branch];
        let d = b.representation.len();
        &b.recalibration[concept * d..(concept + 1) * d]
    }
}

/// Extra gradient terms entering the backward pass beyond the logits.
pub struct Upstream<T> {
    pub dlogits: Vec<T>,
    /// `dL/dr_m` per branch, e.g. from the batch contrastive term.
    pub drepresentation: Option<Vec<Vec<T>>>,
    /// `dL/dP_m` per branch, e.g. from the diversity term.
    pub drecalibration: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut branches = Vec::with_capacity(config.branches.len());
        for b in &config.branches {
            let d = b.modality.feature_dim;
            let backbone = Backbone::from_config(&b.backbone, d, Some(&mut *rng));
            let bank = ConceptBank::random(d, b.modality.num_concepts, rng);
            branches.push(Branch { backbone, bank });
        }
        let relevance = RelevanceMatrix::random(config.total_concepts(), config.num_classes, rng);
        Ok(Self {
            config,
            branches,
            relevance,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let branches = config
            .branches
            .iter()
            .map(|b| {
                let d = b.modality.feature_dim;
                Branch {
                    backbone: Backbone::from_config::<rand_chacha::ChaCha8Rng>(&b.backbone, d, None),
                    bank: ConceptBank::zeros(d, b.modality.num_concepts),
                }
            })
            .collect();
        let relevance = RelevanceMatrix::zeros(config.total_concepts(), config.num_classes);
        Ok(Self {
            config,
            branches,
            relevance,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    backbone: b.backbone.cast(),
                    bank: b.bank.cast(),
                })
                .collect(),
            relevance: self.relevance.cast(),
        }
    }

    /// Copy with a replaced aggregator matrix of the same shape.
    pub fn with_relevance(&self, relevance: RelevanceMatrix<T>) -> Result<Self> {
        if relevance.rows() != self.relevance.rows() || relevance.classes() != self.relevance.classes() {
            return Err(Error::Config(format!(
                "relevance matrix must be {}x{}",
                self.relevance.rows(),
                self.relevance.classes()
            )));
        }
        let mut m = self.clone();
        m.relevance = relevance;
        Ok(m)
    }

    /// All parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        for (b, cfg) in self.branches.iter().zip(&self.config.branches) {
            let name = &cfg.modality.name;
            match &b.backbone {
                Backbone::Spatiotemporal(enc) => {
                    for (l, conv) in enc.layers.iter().enumerate() {
                        out.push(view(
                            format!("{name}.conv{l}.weight"),
                            ParamGroup::Backbone,
                            &conv.weight,
                        ));
                        out.push(view(format!("{name}.conv{l}.bias"), ParamGroup::Backbone, &conv.bias));
                    }
                }
                Backbone::Sequential(enc) => {
                    out.push(view(format!("{name}.rnn.w_in"), ParamGroup::Backbone, &enc.w_in));
                    out.push(view(format!("{name}.rnn.w_rec"), ParamGroup::Backbone, &enc.w_rec));
                    out.push(view(format!("{name}.rnn.bias"), ParamGroup::Backbone, &enc.bias));
                }
            }
            out.push(view(
                format!("{name}.concepts.weight"),
                ParamGroup::Head,
                &b.bank.weight,
            ));
            out.push(view(format!("{name}.concepts.bias"), ParamGroup::Head, &b.bank.bias));
        }
        out.push(view(
            "aggregator.relevance".into(),
            ParamGroup::Head,
            self.relevance.values(),
        ));
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamViewMut<'_, T>> {
        let mut out = Vec::new();
        for (b, cfg) in self.branches.iter_mut().zip(&self.config.branches) {
            let name = &cfg.modality.name;
            match &mut b.backbone {
                Backbone::Spatiotemporal(enc) => {
                    for (l, conv) in enc.layers.iter_mut().enumerate() {
                        out.push(view_mut(
                            format!("{name}.conv{l}.weight"),
                            ParamGroup::Backbone,
                            &mut conv.weight,
                        ));
                        out.push(view_mut(
                            format!("{name}.conv{l}.bias"),
                            ParamGroup::Backbone,
                            &mut conv.bias,
                        ));
                    }
                }
                Backbone::Sequential(enc) => {
                    out.push(view_mut(
                        format!("{name}.rnn.w_in"),
                        ParamGroup::Backbone,
                        &mut enc.w_in,
                    ));
                    out.push(view_mut(
                        format!("{name}.rnn.w_rec"),
                        ParamGroup::Backbone,
                        &mut enc.w_rec,
                    ));
                    out.push(view_mut(
                        format!("{name}.rnn.bias"),
                        ParamGroup::Backbone,
                        &mut enc.bias,
                    ));
                }
            }
            out.push(view_mut(
                format!("{name}.concepts.weight"),
                ParamGroup::Head,
                &mut b.bank.weight,
            ));
            out.push(view_mut(
                format!("{name}.concepts.bias"),
                ParamGroup::Head,
                &mut b.bank.bias,
            ));
        }
        out.push(view_mut(
            "aggregator.relevance".into(),
            ParamGroup::Head,
            self.relevance.values_mut(),
        ));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Orders and converts a sample's named tensors to branch order.
    pub fn gather_inputs(&self, inputs: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<Tensor<T>>> {
        self.config
            .branches
            .iter()
            .map(|b| {
                inputs
                    .get(&b.modality.name)
                    .map(Tensor::cast)
                    .ok_or_else(|| Error::Config(format!("input is missing modality {:?}", b.modality.name)))
            })
            .collect()
    }

    /// Encodes one modality and computes its representation and concept scores.
    pub fn forward_branch(&self, m: usize, x: &Tensor<T>) -> Result<BranchTrace<T>> {
        let cfg = &self.config.branches[m].modality;
        let branch = &self.branches[m];
        let (features, backbone) = branch.backbone.encode(x, &cfg.name)?;
        let representation = global_average_pool(&features)?.0;
        let recalibration = branch.bank.recalibrate(&representation)?;
        let d = cfg.feature_dim;
        let mut attention = vec![T::zero(); recalibration.len()];
        let mut scores = Vec::with_capacity(cfg.num_concepts);
        for (p, a) in recalibration.chunks_exact(d).zip(attention.chunks_exact_mut(d)) {
            softmax_into(p, a);
            scores.push(crate::scalar::dot(a, &representation));
        }
        Ok(BranchTrace {
            backbone,
            features,
            representation,
            recalibration,
            attention,
            scores,
        })
    }

    pub fn forward(&self, inputs: &[Tensor<T>]) -> Result<ForwardTrace<T>> {
        if inputs.len() != self.branches.len() {
            return Err(Error::Config(format!(
                "model has {} modalities, got {} inputs",
                self.branches.len(),
                inputs.len()
            )));
        }
        let branches = inputs
            .iter()
            .enumerate()
            .map(|(m, x)| self.forward_branch(m, x))
            .collect::<Result<Vec<_>>>()?;
        let activation: Vec<T> = branches.iter().flat_map(|b| b.scores.iter().copied()).collect();
        let out = aggregate_predict(&ActivationVector(activation.clone()), &self.relevance)?;
        Ok(ForwardTrace {
            branches,
            activation,
            logits: out.logits,
            probabilities: out.probabilities,
        })
    }

    pub fn predict(&self, inputs: &[Tensor<T>]) -> Result<PredictionOutput<T>> {
        self.forward(inputs).map(|t| t.prediction())
    }

    /// Prediction from a (possibly edited) activation vector, bypassing the encoders.
    pub fn predict_from_activation(&self, activation: &[T]) -> Result<PredictionOutput<T>> {
        aggregate_predict(&ActivationVector(activation.to_vec()), &self.relevance)
    }

    /// Accumulates parameter gradients for one sample into `grad`.
    pub fn backward(&self, trace: &ForwardTrace<T>, upstream: &Upstream<T>, grad: &mut Model<T>) {
        let ds = aggregate_backward(
            &trace.activation,
            &self.relevance,
            &upstream.dlogits,
            &mut grad.relevance,
        );
        for (m, (bt, branch)) in trace.branches.iter().zip(&self.branches).enumerate() {
            let d = bt.representation.len();
            let off = self.config.concept_offset(m);
            let mut dr = match &upstream.drepresentation {
                Some(v) => v[m].clone(),
                None => vec![T::zero(); d],
            };
            let mut drecal = match &upstream.drecalibration {
                Some(v) => v[m].clone(),
                None => vec![T::zero(); bt.recalibration.len()],
            };
            for (i, &score) in bt.scores.iter().enumerate() {
                let g = ds[off + i];
                if g == T::zero() {
                    continue;
                }
                let a = &bt.attention[i * d..(i + 1) * d];
                let dp = &mut drecal[i * d..(i + 1) * d];
                for c in 0..d {
                    dr[c] = dr[c] + g * a[c];
                    dp[c] = dp[c] + g * a[c] * (bt.representation[c] - score);
                }
            }
            let gbranch = &mut grad.branches[m];
            branch.bank.backward(
                &bt.representation,
                &bt.recalibration,
                &drecal,
                &mut gbranch.bank,
                &mut dr,
            );
            let positions = bt.features.positions();
            let scale = T::one() / T::of(positions as f64);
            let cell: Vec<T> = dr.iter().map(|&g| g * scale).collect();
            let mut dfeatures = Vec::with_capacity(positions * d);
            for _ in 0..positions {
                dfeatures.extend_from_slice(&cell);
            }
            branch
                .backbone
                .backward(&bt.backbone, &dfeatures, &mut gbranch.backbone);
        }
    }

    /// Adds `scale * other` to every parameter.
    pub fn add_scaled(&mut self, other: &Model<T>, scale: T) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a = *a + scale * b;
            }
        }
    }
}

fn view<T>(name: String, group: ParamGroup, data: &[T]) -> ParamView<'_, T> {
    ParamView { name, group, data }
}

fn view_mut<T>(name: String, group: ParamGroup, data: &mut [T]) -> ParamViewMut<'_, T> {
    ParamViewMut { name, group, data }
}
