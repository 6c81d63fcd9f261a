//! Request handling for the local explanation service.
//!
//! The service state is an immutable snapshot behind an `RwLock<Arc<_>>`.
//! Readers clone the `Arc` and work without holding the lock; writers build
//! a complete replacement and swap it in, so a reader never sees a
//! half-applied mask. Cached metric reports live inside the snapshot and are
//! dropped with it.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use mulcpred::data::{Dataset, Sample};
use mulcpred::explain::{frame_path, ConceptBundle, PruneMask};
use mulcpred::faithfulness::{model_confidence, random_order_baseline, sample_morf};
use mulcpred::metrics::{cross_dataset_eval, MetricReport};
use mulcpred::model::{ConceptId, Model, ModelConfig};
use serde::Serialize;
use serde_json::{json, Value};

pub const API_VERSION: u32 = 1;
pub const MORF_BASELINE_TRIALS: usize = 20;
pub const MORF_BASELINE_SEED: u64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            content_type: "application/json; charset=utf-8",
            body: serde_json::to_vec(value).expect("serializable response"),
        }
    }

    pub fn png(body: Vec<u8>) -> Self {
        Self {
            status: 200,
            content_type: "image/png",
            body,
        }
    }

    pub fn error(status: u16, message: impl Into<String>) -> Self {
        Self::json(status, &json!({ "error": message.into() }))
    }

    /// 400 with per-field messages.
    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        Self::json(
            400,
            &json!({ "error": format!("invalid {field}: {message}"), "fields": { field: message } }),
        )
    }

    pub fn body_json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

#[derive(Clone, Debug)]
pub struct LoadedBundle {
    pub dir: PathBuf,
    pub bundle: ConceptBundle,
}

/// One immutable view of everything the routes read.
#[derive(Debug)]
pub struct SessionState {
    pub model: Option<Arc<Model<f32>>>,
    /// `model` with `mask` applied.
    pub pruned: Option<Arc<Model<f32>>>,
    pub bundle: Option<Arc<LoadedBundle>>,
    /// Bundle reports re-derived under `mask`.
    pub view: Option<Arc<ConceptBundle>>,
    pub mask: Option<PruneMask>,
    pub datasets: BTreeMap<String, Arc<Dataset>>,
    metrics: Mutex<BTreeMap<(String, String), MetricReport>>,
}

impl SessionState {
    fn config(&self) -> Option<&ModelConfig> {
        self.model
            .as_deref()
            .map(|m| m.config())
            .or_else(|| self.bundle.as_deref().map(|b| &b.bundle.model_config))
    }

    fn build(
        model: Option<Arc<Model<f32>>>,
        bundle: Option<Arc<LoadedBundle>>,
        mask: Option<PruneMask>,
        datasets: BTreeMap<String, Arc<Dataset>>,
    ) -> mulcpred::Result<Self> {
        let config = model
            .as_deref()
            .map(|m| m.config().clone())
            .or_else(|| bundle.as_deref().map(|b| b.bundle.model_config.clone()));
        let mask = match (mask, &config) {
            (Some(m), _) => Some(m),
            (None, Some(c)) => Some(
                bundle
                    .as_deref()
                    .map(|b| b.bundle.mask.clone())
                    .unwrap_or_else(|| PruneMask::keep_all(c)),
            ),
            (None, None) => None,
        };
        let pruned = match (&model, &mask) {
            (Some(m), Some(mask)) => Some(Arc::new(m.pruned(mask)?)),
            _ => None,
        };
        let view = match (&bundle, &mask) {
            (Some(b), Some(mask)) => Some(Arc::new(b.bundle.with_mask(mask.clone())?)),
            _ => None,
        };
        Ok(Self {
            model,
            pruned,
            bundle,
            view,
            mask,
            datasets,
            metrics: Mutex::new(BTreeMap::new()),
        })
    }

    fn find_sample(&self, id: u64) -> Option<&Sample> {
        self.datasets
            .values()
            .find_map(|d| d.samples.iter().find(|s| s.id == id))
    }
}

/// Shared handle to the current state; many readers, one writer.
#[derive(Debug)]
pub struct Session {
    state: RwLock<Arc<SessionState>>,
    writer: Mutex<()>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        let empty = SessionState::build(None, None, None, BTreeMap::new()).expect("empty state");
        Self {
            state: RwLock::new(Arc::new(empty)),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<SessionState> {
        self.state.read().expect("state lock").clone()
    }

    fn replace<F>(&self, f: F) -> mulcpred::Result<()>
    where
        F: FnOnce(&SessionState) -> mulcpred::Result<SessionState>,
    {
        let _guard = self.writer.lock().expect("writer lock");
        let next = Arc::new(f(&self.snapshot())?);
        *self.state.write().expect("state lock") = next;
        Ok(())
    }

    /// Loads a model; the mask resets to keep-all unless a bundle supplies one.
    pub fn load_model(&self, model: Model<f32>) -> mulcpred::Result<()> {
        self.replace(|s| {
            if let Some(b) = &s.bundle {
                ensure_same_config(model.config(), &b.bundle.model_config)?;
            }
            SessionState::build(Some(Arc::new(model)), s.bundle.clone(), None, s.datasets.clone())
        })
    }

    pub fn load_bundle(&self, dir: PathBuf) -> mulcpred::Result<()> {
        let bundle = ConceptBundle::load(&dir)?;
        self.replace(|s| {
            if let Some(m) = &s.model {
                ensure_same_config(m.config(), &bundle.model_config)?;
            }
            let loaded = Arc::new(LoadedBundle { dir, bundle });
            SessionState::build(s.model.clone(), Some(loaded), None, s.datasets.clone())
        })
    }

    pub fn add_dataset(&self, name: &str, dataset: Dataset) -> mulcpred::Result<()> {
        self.replace(|s| {
            let mut datasets = s.datasets.clone();
            datasets.insert(name.to_string(), Arc::new(dataset));
            SessionState::build(s.model.clone(), s.bundle.clone(), s.mask.clone(), datasets)
        })
    }

    pub fn set_mask(&self, mask: PruneMask) -> mulcpred::Result<()> {
        self.replace(|s| SessionState::build(s.model.clone(), s.bundle.clone(), Some(mask), s.datasets.clone()))
    }

    pub fn handle(&self, method: &str, target: &str, body: &[u8]) -> Response {
        let url = match url::Url::parse("http://localhost").and_then(|b| b.join(target)) {
            Ok(u) => u,
            Err(e) => return Response::error(400, format!("malformed request target: {e}")),
        };
        let segments: Vec<String> = url
            .path_segments()
            .map(|s| s.filter(|p| !p.is_empty()).map(|p| percent_decode(p)).collect())
            .unwrap_or_default();
        let query: BTreeMap<String, String> = url.query_pairs().into_owned().collect();
        let segs: Vec<&str> = segments.iter().map(String::as_str).collect();
        match (method, segs.as_slice()) {
            ("GET", ["health"]) => self.health(),
            ("GET", ["concepts"]) => self.concepts(),
            ("GET", ["concepts", id, "samples"]) => self.concept_samples(id, query.get("k")),
            ("GET", ["concepts", id, "heatmap", rank, frame]) => self.heatmap(id, rank, frame),
            ("GET", ["relevance"]) => self.relevance(),
            ("POST", ["prune"]) => self.prune(body),
            ("GET", ["metrics"]) => self.metrics(query.get("dataset")),
            ("GET", ["morf"]) => self.morf(query.get("sample"), query.get("class")),
            (_, ["health" | "concepts" | "relevance" | "prune" | "metrics" | "morf", ..]) if known(&segs) => {
                Response::error(405, format!("method {method} not allowed on {}", url.path()))
            }
            _ => Response::error(404, format!("no route for {method} {}", url.path())),
        }
    }

    fn health(&self) -> Response {
        let s = self.snapshot();
        Response::json(
            200,
            &json!({
                "status": "ok",
                "api_version": API_VERSION,
                "model_loaded": s.model.is_some(),
                "bundle_loaded": s.bundle.is_some(),
                "datasets": s.datasets.keys().collect::<Vec<_>>(),
                "mask_hash": s.mask.as_ref().map(PruneMask::hash),
            }),
        )
    }

    fn concepts(&self) -> Response {
        let s = self.snapshot();
        let Some(view) = &s.view else {
            return Response::error(409, "no concept bundle loaded");
        };
        Response::json(
            200,
            &json!({
                "api_version": API_VERSION,
                "k": view.k,
                "num_classes": view.num_classes,
                "keep": view.mask.keep,
                "concepts": view.reports,
            }),
        )
    }

    fn concept_samples(&self, id: &str, k: Option<&String>) -> Response {
        let s = self.snapshot();
        let Some(view) = &s.view else {
            return Response::error(409, "no concept bundle loaded");
        };
        let k = match k.map(|v| v.parse::<usize>()) {
            None => view.k,
            Some(Ok(k)) if k >= 1 => k,
            Some(_) => return Response::invalid("k", "must be a positive integer"),
        };
        let Some(report) = parse_concept(id).and_then(|c| view.report(&c)) else {
            return Response::error(404, format!("unknown concept {id:?}"));
        };
        let samples: Vec<_> = report.top_samples.iter().take(k).collect();
        Response::json(200, &json!({ "concept": report.concept_id, "samples": samples }))
    }

    fn heatmap(&self, id: &str, rank: &str, frame: &str) -> Response {
        let s = self.snapshot();
        let (Some(view), Some(bundle)) = (&s.view, &s.bundle) else {
            return Response::error(409, "no concept bundle loaded");
        };
        let Some(report) = parse_concept(id).and_then(|c| view.report(&c)) else {
            return Response::error(404, format!("unknown concept {id:?}"));
        };
        let (Ok(rank), Ok(frame)) = (rank.parse::<usize>(), frame.parse::<usize>()) else {
            return Response::invalid("rank/frame", "must be non-negative integers");
        };
        let Some(path) = frame_path(&bundle.dir, report, rank, frame) else {
            return Response::error(404, format!("no heatmap frame {rank}/{frame} for {id}"));
        };
        match fs::read(&path) {
            Ok(bytes) => Response::png(bytes),
            Err(e) => Response::error(500, format!("reading {}: {e}", path.display())),
        }
    }

    fn relevance(&self) -> Response {
        let s = self.snapshot();
        let (Some(config), Some(mask)) = (s.config(), &s.mask) else {
            return Response::error(409, "no model or bundle loaded");
        };
        let w = match (&s.pruned, &s.view) {
            (Some(m), _) => m.relevance.cast::<f64>(),
            (None, Some(v)) => match mulcpred::explain::prune_concepts(&v.relevance, config, &mask.keep) {
                Ok(w) => w,
                Err(e) => return Response::error(500, e.to_string()),
            },
            (None, None) => return Response::error(409, "no model or bundle loaded"),
        };
        let positive = 1.min(w.classes() - 1);
        let concepts: Vec<Value> = config
            .concept_ids()
            .into_iter()
            .enumerate()
            .map(|(row, id)| {
                json!({
                    "id": id,
                    "relevance": w.row(row),
                    "display_relevance": w.display_relevance(row, positive),
                    "kept": mask.contains(&id),
                })
            })
            .collect();
        Response::json(
            200,
            &json!({ "classes": w.classes(), "mask_hash": mask.hash(), "concepts": concepts }),
        )
    }

    fn prune(&self, body: &[u8]) -> Response {
        let value: Value = match serde_json::from_slice(body) {
            Ok(v) => v,
            Err(e) => return Response::invalid("body", format!("not valid JSON: {e}")),
        };
        let Some(keep) = value.get("keep") else {
            return Response::invalid("keep", "missing");
        };
        let Some(items) = keep.as_array() else {
            return Response::invalid("keep", "must be an array of concept ids");
        };
        let mut ids = Vec::with_capacity(items.len());
        for item in items {
            match item.as_str() {
                Some(s) => ids.push(s.to_string()),
                None => return Response::invalid("keep", format!("{item} is not a string concept id")),
            }
        }
        let s = self.snapshot();
        let Some(config) = s.config() else {
            return Response::error(409, "no model or bundle loaded");
        };
        let mask = match PruneMask::parse(config, &ids) {
            Ok(m) => m,
            Err(e) => return Response::invalid("keep", e.to_string()),
        };
        if let Err(e) = self.set_mask(mask.clone()) {
            return Response::error(500, e.to_string());
        }
        let dropped: Vec<ConceptId> = config.concept_ids().into_iter().filter(|c| !mask.contains(c)).collect();
        Response::json(
            200,
            &json!({ "keep": mask.keep, "dropped": dropped, "mask_hash": mask.hash() }),
        )
    }

    fn metrics(&self, dataset: Option<&String>) -> Response {
        let Some(name) = dataset else {
            return Response::invalid("dataset", "missing");
        };
        let s = self.snapshot();
        let (Some(model), Some(mask)) = (&s.model, &s.mask) else {
            return Response::error(409, "no model loaded");
        };
        let Some(data) = s.datasets.get(name) else {
            return Response::error(404, format!("unknown dataset {name:?}"));
        };
        let key = (name.clone(), mask.hash());
        let cached = s.metrics.lock().expect("cache lock").get(&key).cloned();
        let report = match cached {
            Some(r) => r,
            None => match cross_dataset_eval(model, data, Some(mask)) {
                Ok(r) => {
                    s.metrics.lock().expect("cache lock").insert(key.clone(), r.clone());
                    r
                }
                Err(e) if e.is_validation() => return Response::error(409, e.to_string()),
                Err(e) => return Response::error(500, e.to_string()),
            },
        };
        Response::json(200, &json!({ "dataset": name, "mask_hash": key.1, "report": report }))
    }

    fn morf(&self, sample: Option<&String>, class: Option<&String>) -> Response {
        let Some(Ok(sample_id)) = sample.map(|v| v.parse::<u64>()) else {
            return Response::invalid("sample", "must be a sample id");
        };
        let Some(Ok(class)) = class.map(|v| v.parse::<usize>()) else {
            return Response::invalid("class", "must be a class index");
        };
        let s = self.snapshot();
        let Some(model) = &s.pruned else {
            return Response::error(409, "no model loaded");
        };
        if class >= model.num_classes() {
            return Response::invalid("class", format!("out of range for {} classes", model.num_classes()));
        }
        let Some(sample) = s.find_sample(sample_id) else {
            return Response::error(404, format!("unknown sample {sample_id}"));
        };
        let model64 = model.cast::<f64>();
        let result = model64
            .gather_inputs(&sample.modalities)
            .and_then(|x| model64.forward(&x))
            .and_then(|trace| {
                let (ranking, curve) = sample_morf(&model64, &trace.activation, class)?;
                let baseline = random_order_baseline(
                    model_confidence(&model64, class),
                    &trace.activation,
                    &ranking,
                    MORF_BASELINE_TRIALS,
                    MORF_BASELINE_SEED,
                )?;
                Ok((ranking, curve, baseline))
            });
        let (ranking, curve, baseline) = match result {
            Ok(r) => r,
            Err(e) => return Response::error(500, e.to_string()),
        };
        let ids = model.config().concept_ids();
        let order: Vec<Value> = ranking
            .order
            .iter()
            .zip(&ranking.scores)
            .map(|(&k, &r)| json!({ "concept": ids[k], "importance": r }))
            .collect();
        Response::json(
            200,
            &json!({
                "sample_id": sample_id,
                "class": class,
                "values": curve.values,
                "auc": curve.auc,
                "ranking": order,
                "baseline": { "trials": MORF_BASELINE_TRIALS, "seed": MORF_BASELINE_SEED, "mean_auc": baseline },
            }),
        )
    }
}

fn known(segs: &[&str]) -> bool {
    matches!(
        segs,
        ["health"]
            | ["concepts"]
            | ["concepts", _, "samples"]
            | ["concepts", _, "heatmap", _, _]
            | ["relevance"]
            | ["prune"]
            | ["metrics"]
            | ["morf"]
    )
}

fn parse_concept(id: &str) -> Option<ConceptId> {
    id.parse().ok()
}

fn percent_decode(s: &str) -> String {
    url::form_urlencoded::parse(format!("x={}", s.replace('+', "%2B")).as_bytes())
        .next()
        .map(|(_, v)| v.into_owned())
        .unwrap_or_else(|| s.to_string())
}

fn ensure_same_config(a: &ModelConfig, b: &ModelConfig) -> mulcpred::Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(mulcpred::Error::Config(
            "bundle was exported from a model with a different configuration".into(),
        ))
    }
}
