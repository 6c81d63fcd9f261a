//! Mini-batch Adam training of the full model under the combined
//! classification + regularization objective.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{column_gram_penalty, row_gram_penalty, LossConfig};
use crate::model::{ForwardTrace, Model, ModelConfig, ParamGroup, Upstream};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Optional cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_step: 20,
            lr_decay: 0.1,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Full-length recipe: 100 epochs, backbone rate 1e-5, head rate 1e-4.
    pub fn full_preset() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_head: 1e-4,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let rates_ok = self.lr_backbone >= 0.0 && self.lr_head >= 0.0;
        if !rates_ok || !self.lr_backbone.is_finite() || !self.lr_head.is_finite() {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr_step == 0 {
            return Err(Error::Config("lr_step must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, group: ParamGroup, epoch: usize) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Head => self.lr_head,
        };
        base * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub cont: f64,
    pub div: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
}

/// Batch objective and its parameter gradient.
///
/// The classification and diversity terms are averaged over the batch; the
/// contrastive term is computed once on the stacked batch representations.
pub fn batch_objective<T: Scalar>(
    model: &Model<T>,
    inputs: &[Vec<Tensor<T>>],
    labels: &[usize],
    loss: &LossConfig,
) -> Result<(LossBreakdown, Model<T>, Vec<ForwardTrace<T>>)> {
    let b = inputs.len();
    if b == 0 || labels.len() != b {
        return Err(Error::InvalidInput(
            "batch must be non-empty with one label per sample".into(),
        ));
    }
    let traces = inputs.iter().map(|x| model.forward(x)).collect::<Result<Vec<_>>>()?;
    let inv_b = T::one() / T::of(b as f64);
    let w_div = T::of(loss.diversity_weight());
    let w_cont = T::of(loss.contrastive_weight());
    let classes = model.num_classes();

    let mut cls = 0.0;
    let mut div = 0.0;
    let mut upstream: Vec<Upstream<T>> = Vec::with_capacity(b);
    for (trace, &y) in traces.iter().zip(labels) {
        if y >= classes {
            return Err(Error::InvalidInput(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        cls += crate::losses::floored_nll(trace.probabilities[y].as_f64());
        let dlogits = trace
            .probabilities
            .iter()
            .enumerate()
            .map(|(c, &pc)| (pc - if c == y { T::one() } else { T::zero() }) * inv_b)
            .collect();
        let mut drecal = Vec::with_capacity(trace.branches.len());
        for (bt, bank) in trace.branches.iter().zip(&model.branches) {
            let (v, g) = row_gram_penalty(&bt.recalibration, bank.bank.num_concepts, bank.bank.dim);
            div += v.as_f64();
            drecal.push(g.into_iter().map(|x| x * w_div * inv_b).collect());
        }
        upstream.push(Upstream {
            dlogits,
            drepresentation: None,
            drecalibration: (loss.diversity_weight() != 0.0).then_some(drecal),
        });
    }
    cls /= b as f64;
    div /= b as f64;

    let mut cont = 0.0;
    let mut drep: Vec<Vec<Vec<T>>> = (0..b).map(|_| Vec::new()).collect();
    for m in 0..model.branches.len() {
        let d = traces[0].branches[m].representation.len();
        let stacked: Vec<T> = traces
            .iter()
            .flat_map(|t| t.branches[m].representation.iter().copied())
            .collect();
        let (v, g) = column_gram_penalty(&stacked, b, d);
        cont += v.as_f64();
        for (i, row) in g.chunks_exact(d).enumerate() {
            drep[i].push(row.iter().map(|&x| x * w_cont).collect());
        }
    }
    if loss.contrastive_weight() != 0.0 {
        for (u, d) in upstream.iter_mut().zip(drep) {
            u.drepresentation = Some(d);
        }
    }

    let total = cls + loss.lambda1 * (loss.lambda2 * cont + (1.0 - loss.lambda2) * div);
    let breakdown = LossBreakdown { total, cls, cont, div };
    let mut grad = model.zeros_like();
    if breakdown.total.is_finite() {
        for (trace, up) in traces.iter().zip(&upstream) {
            model.backward(trace, up, &mut grad);
        }
    }
    Ok((breakdown, grad, traces))
}

/// Adam with one learning rate per parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &Model<f32>) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
        Self {
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, model: &mut Model<f32>, grad: &Model<f32>, cfg: &TrainConfig, epoch: usize) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let eps = cfg.adam_eps as f32;
        for (((param, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grad.params())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let lr = cfg.learning_rate(param.group, epoch);
            if lr == 0.0 {
                continue;
            }
            let step_size = (lr * c2.sqrt() / c1) as f32;
            for i in 0..param.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                param.data[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Stateful training loop over an in-memory dataset.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    steps: usize,
    history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(model_config, &mut rng)?;
        Ok(Self::from_model(model, config, rng))
    }

    pub fn from_model(model: Model<f32>, config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let optimizer = Adam::new(&model);
        Self {
            model,
            config,
            optimizer,
            rng,
            epoch: 0,
            steps: 0,
            history: Vec::new(),
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.map_or(true, |cap| self.steps < cap)
    }

    /// One optimizer step on the given samples.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<(LossBreakdown, usize)> {
        let inputs = batch
            .iter()
            .map(|s| self.model.gather_inputs(&s.modalities))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let (loss, grad, traces) = batch_objective(&self.model, &inputs, &labels, &self.config.loss)?;
        for (term, v) in [("L_cls", loss.cls), ("L_cont", loss.cont), ("L_div", loss.div)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term,
                    epoch: self.epoch,
                    step: self.steps,
                    cls: loss.cls,
                    cont: loss.cont,
                    div: loss.div,
                });
            }
        }
        self.optimizer.update(&mut self.model, &grad, &self.config, self.epoch);
        self.steps += 1;
        let correct = traces
            .iter()
            .zip(&labels)
            .filter(|(t, &y)| argmax(&t.probabilities) == y)
            .count();
        Ok((loss, correct))
    }

    /// Runs one shuffled pass over `data`; returns `None` once the step budget is spent.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<Option<EpochMetrics>> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        if !self.budget_left() {
            return Ok(None);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        let mut correct = 0;
        let mut seen = 0;
        for chunk in order.chunks(self.config.batch_size) {
            if !self.budget_left() {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, ok) = self.step(&batch)?;
            sum.total += loss.total;
            sum.cls += loss.cls;
            sum.cont += loss.cont;
            sum.div += loss.div;
            batches += 1;
            correct += ok;
            seen += batch.len();
        }
        let n = batches.max(1) as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            steps: batches,
            loss: LossBreakdown {
                total: sum.total / n,
                cls: sum.cls / n,
                cont: sum.cont / n,
                div: sum.div / n,
            },
            train_accuracy: correct as f64 / seen.max(1) as f64,
            lr_backbone: self.config.learning_rate(ParamGroup::Backbone, self.epoch),
            lr_head: self.config.learning_rate(ParamGroup::Head, self.epoch),
        };
        log::info!(
            "epoch {} loss {:.4} (cls {:.4} cont {:.4} div {:.4}) acc {:.3}",
            metrics.epoch,
            metrics.loss.total,
            metrics.loss.cls,
            metrics.loss.cont,
            metrics.loss.div,
            metrics.train_accuracy
        );
        self.epoch += 1;
        self.history.push(metrics.clone());
        Ok(Some(metrics))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train_config: self.config.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            loss_history: self.history.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
}

/// Trains a freshly initialized model for `config.epochs` epochs.
pub fn train(model_config: ModelConfig, data: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model_config, config.clone())?;
    for _ in 0..config.epochs {
        if trainer.run_epoch(data)?.is_none() {
            break;
        }
    }
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome {
        log: checkpoint.loss_history.clone(),
        checkpoint,
    })
}
