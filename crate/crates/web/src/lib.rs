//! WebAssembly bindings for the browser demo in `www/`.
//!
//! [`Session`] holds the demo state and is usable from native code;
//! [`Demo`] is its JavaScript-facing wrapper. All results cross the boundary
//! as JSON strings.

use mulcpred::data::{generate_dataset, Sample, SyntheticSpec};
use mulcpred::explain::heatmap_frames;
use mulcpred::faithfulness::{model_confidence, random_order_baseline, sample_morf};
use mulcpred::metrics::evaluate;
use mulcpred::model::{concept_heatmap, ConceptId, ModelConfig};
use mulcpred::train::{TrainConfig, Trainer};
use mulcpred::{Error, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub struct Session {
    train: Vec<Sample>,
    test: Vec<Sample>,
    trainer: Trainer,
}

impl Session {
    /// Generates `samples` training and `samples / 2` test samples and
    /// initializes a model with `concepts` concepts per modality.
    pub fn new(seed: u64, samples: usize, concepts: usize) -> Result<Self> {
        let spec = SyntheticSpec::desk_default().with_seed(seed).with_samples(samples);
        let train = generate_dataset(&spec)?.samples;
        let test_spec = spec
            .with_seed(seed.wrapping_add(1))
            .with_samples((samples / 2).max(1))
            .with_first_id(samples as u64);
        let test = generate_dataset(&test_spec)?.samples;
        let config = TrainConfig {
            seed,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(ModelConfig::desk_default(concepts), config)?;
        Ok(Self { train, test, trainer })
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }

    pub fn train(&mut self, epochs: usize) -> Result<Value> {
        let mut log = Vec::new();
        for _ in 0..epochs {
            if let Some(m) = self.trainer.run_epoch(&self.train)? {
                log.push(m);
            }
        }
        let report = evaluate(&self.trainer.model, &self.test)?;
        Ok(json!({ "epochs": log, "epoch": self.trainer.epoch(), "test": report }))
    }

    pub fn concepts(&self) -> Value {
        let model = &self.trainer.model;
        let ids: Vec<Value> = model
            .config()
            .concept_ids()
            .iter()
            .enumerate()
            .map(|(row, id)| {
                json!({
                    "id": id.to_string(),
                    "relevance": model.relevance.row(row),
                    "display_relevance": model.relevance.display_relevance(row, 1),
                })
            })
            .collect();
        json!({ "concepts": ids })
    }

    fn sample(&self, index: usize) -> Result<&Sample> {
        self.test
            .get(index)
            .ok_or_else(|| Error::Lookup(format!("test sample {index} of {}", self.test.len())))
    }

    pub fn heatmap(&self, index: usize, concept: &str) -> Result<Value> {
        let sample = self.sample(index)?;
        let model = &self.trainer.model;
        let id: ConceptId = concept.parse()?;
        let flat = model.config().concept_index(&id)?;
        let m = model
            .config()
            .branches
            .iter()
            .position(|b| b.modality.name == id.modality)
            .expect("concept index validated the modality");
        let trace = model.forward(&model.gather_inputs(&sample.modalities)?)?;
        let features = &trace.branches[m].features;
        let map = concept_heatmap(features, trace.recalibration_vector(m, id.index), id.index)?;
        let frames: Vec<Value> = heatmap_frames(&map.dims, &map.normalized())
            .into_iter()
            .map(|(w, h, v)| json!({ "width": w, "height": h, "values": v }))
            .collect();
        Ok(json!({
            "sample_id": sample.id,
            "label": sample.label,
            "patterns": sample.patterns,
            "concept": id.to_string(),
            "activation": trace.activation[flat],
            "heatmap_mean": map.mean(),
            "dims": map.dims,
            "frames": frames,
        }))
    }

    pub fn morf(&self, index: usize, class: usize, trials: usize, seed: u64) -> Result<Value> {
        let sample = self.sample(index)?;
        let model = self.trainer.model.cast::<f64>();
        let activation = model.forward(&model.gather_inputs(&sample.modalities)?)?.activation;
        let (ranking, curve) = sample_morf(&model, &activation, class)?;
        let baseline = random_order_baseline(model_confidence(&model, class), &activation, &ranking, trials, seed)?;
        let order: Vec<String> = ranking
            .order
            .iter()
            .map(|&k| model.config().concept_at(k).expect("ranked index").to_string())
            .collect();
        Ok(json!({
            "sample_id": sample.id,
            "label": sample.label,
            "class": class,
            "order": order,
            "values": curve.values,
            "auc": curve.auc,
            "random_auc": baseline,
            "trials": trials,
        }))
    }
}

fn to_js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, samples: usize, concepts: usize) -> std::result::Result<Demo, JsError> {
        to_js(Session::new(seed, samples, concepts)).map(Demo)
    }

    #[wasm_bindgen(js_name = testLen)]
    pub fn test_len(&self) -> usize {
        self.0.test_len()
    }

    /// Runs `epochs` more epochs; returns the epoch log and test metrics.
    pub fn train(&mut self, epochs: usize) -> std::result::Result<String, JsError> {
        to_js(self.0.train(epochs)).map(|v| v.to_string())
    }

    pub fn concepts(&self) -> String {
        self.0.concepts().to_string()
    }

    /// Heatmap frames of one concept on one test sample, scaled to `[0, 1]`.
    pub fn heatmap(&self, sample: usize, concept: &str) -> std::result::Result<String, JsError> {
        to_js(self.0.heatmap(sample, concept)).map(|v| v.to_string())
    }

    /// Extended MoRF curve of one test sample with a random-order baseline.
    pub fn morf(&self, sample: usize, class: usize, trials: usize, seed: u64) -> std::result::Result<String, JsError> {
        to_js(self.0.morf(sample, class, trials, seed)).map(|v| v.to_string())
    }
}
