use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mulcpred::data::{generate_dataset, shift_distribution, Dataset, DistributionShift, SyntheticSpec};
use mulcpred::explain::{activation_table, export_concept_bundle, PruneMask};
use mulcpred::faithfulness::{faithfulness_summary, sample_morf};
use mulcpred::metrics::{cross_dataset_eval, metrics_table_csv, TableRow};
use mulcpred::model::{ConceptId, Model, ModelConfig};
use mulcpred::train::{train, Checkpoint, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::service::Session;
use crate::{server, CliError, CliResult};

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Validation(format!("missing required setting {key:?}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    }
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

/// Keep set from an explicit list, a mask file, or keep-all.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSource {
    pub keep: Option<Vec<String>>,
    pub mask_file: Option<PathBuf>,
}

impl MaskSource {
    pub fn resolve(&self, config: &ModelConfig) -> CliResult<Option<PruneMask>> {
        if let Some(keep) = &self.keep {
            return Ok(Some(PruneMask::parse(config, keep)?));
        }
        if let Some(path) = &self.mask_file {
            let text =
                fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
            let raw: MaskFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: invalid mask file: {e}", path.display())))?;
            return Ok(Some(PruneMask::parse(config, &raw.keep)?));
        }
        Ok(None)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskFile {
    keep: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub spec: SyntheticSpec,
    pub shift: Option<DistributionShift>,
    pub out: Option<PathBuf>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::desk_default(),
            shift: None,
            out: None,
        }
    }
}

pub fn generate_data(cfg: &GenerateConfig) -> CliResult<serde_json::Value> {
    let out = required(&cfg.out, "out")?;
    let spec = match &cfg.shift {
        Some(shift) => shift_distribution(&cfg.spec, shift)?,
        None => cfg.spec.clone(),
    };
    let data = generate_dataset(&spec)?;
    data.save(out)?;
    Ok(json!({
        "out": out,
        "samples": data.len(),
        "class_histogram": data.manifest.class_histogram,
        "spec_hash": data.manifest.spec_hash,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCommand {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub num_concepts: usize,
    pub feature_dim: usize,
    /// Full model description; overrides `num_concepts` and `feature_dim`.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
}

impl Default for TrainCommand {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            num_concepts: 10,
            feature_dim: 16,
            model: None,
            train: TrainConfig::default(),
        }
    }
}

pub fn train_model(cfg: &TrainCommand) -> CliResult<serde_json::Value> {
    let data_dir = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let data = Dataset::load(data_dir)?;
    let model_config = cfg
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::desk_default(cfg.num_concepts).with_feature_dim(cfg.feature_dim));
    let outcome = train(model_config, &data.samples, &cfg.train)?;
    outcome.checkpoint.save(out)?;
    let last = outcome.log.last();
    Ok(json!({
        "checkpoint": out,
        "epochs": outcome.checkpoint.epoch,
        "parameters": outcome.checkpoint.model.num_parameters(),
        "final_loss": last.map(|m| m.loss),
    }))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub checkpoint: Option<PathBuf>,
    /// Named datasets; `data` is a shorthand for a single dataset named `test`.
    pub datasets: BTreeMap<String, PathBuf>,
    pub data: Option<PathBuf>,
    #[serde(flatten)]
    pub mask: MaskSource,
    pub out: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

pub fn evaluate(cfg: &EvaluateConfig) -> CliResult<serde_json::Value> {
    let ckpt = Checkpoint::load(required(&cfg.checkpoint, "checkpoint")?)?;
    let model = ckpt.model;
    let mask = cfg.mask.resolve(model.config())?;
    let mut datasets = cfg.datasets.clone();
    if let Some(d) = &cfg.data {
        datasets.insert("test".into(), d.clone());
    }
    if datasets.is_empty() {
        return Err(CliError::Validation(
            "missing required setting \"data\" or \"datasets\"".into(),
        ));
    }
    let label = if mask.is_some() { "pruned" } else { "full" };
    let mut rows = Vec::new();
    for (name, path) in &datasets {
        let data = Dataset::load(path)?;
        let report = cross_dataset_eval(&model, &data, mask.as_ref())?;
        rows.push(TableRow {
            model: label.into(),
            dataset: name.clone(),
            report,
        });
    }
    if let Some(p) = &cfg.table {
        fs::write(p, metrics_table_csv(&rows))
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", p.display())))?;
    }
    let value = serde_json::to_value(&rows).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(p) = &cfg.out {
        write_json(p, &value)?;
    }
    Ok(value)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub k: usize,
    #[serde(flatten)]
    pub mask: MaskSource,
    pub out: Option<PathBuf>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            k: 3,
            mask: MaskSource::default(),
            out: None,
        }
    }
}

pub fn explain(cfg: &ExplainConfig) -> CliResult<serde_json::Value> {
    let ckpt = Checkpoint::load(required(&cfg.checkpoint, "checkpoint")?)?;
    let data = Dataset::load(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?;
    let mask = cfg
        .mask
        .resolve(ckpt.model.config())?
        .unwrap_or_else(|| PruneMask::keep_all(ckpt.model.config()));
    let bundle = export_concept_bundle(&ckpt.model, &data, cfg.k, &mask, out)?;
    Ok(json!({
        "bundle": out,
        "concepts": bundle.reports.len(),
        "k": bundle.k,
        "pruned": bundle.reports.iter().filter(|r| r.pruned).count(),
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MorfConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Score only the first `limit` samples.
    pub limit: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub mask: MaskSource,
    pub out: Option<PathBuf>,
}

impl Default for MorfConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            limit: None,
            trials: 20,
            seed: 0,
            mask: MaskSource::default(),
            out: None,
        }
    }
}

/// Writes `summary.json` and one `curves/{sample}_{class}.csv` per pair.
pub fn morf(cfg: &MorfConfig) -> CliResult<serde_json::Value> {
    let ckpt = Checkpoint::load(required(&cfg.checkpoint, "checkpoint")?)?;
    let data = Dataset::load(required(&cfg.data, "data")?)?;
    let mut model = ckpt.model;
    if let Some(mask) = cfg.mask.resolve(model.config())? {
        model = model.pruned(&mask)?;
    }
    let samples = &data.samples[..cfg.limit.unwrap_or(data.len()).min(data.len())];
    let table = activation_table(&model, samples)?;
    let activations: Vec<(u64, Vec<f64>)> = samples
        .iter()
        .zip(table)
        .map(|(s, a)| (s.id, a.into_iter().map(f64::from).collect()))
        .collect();
    let model64: Model<f64> = model.cast();
    let summary = faithfulness_summary(&model64, &activations, cfg.trials, cfg.seed)?;
    if let Some(out) = &cfg.out {
        let curves = out.join("curves");
        fs::create_dir_all(&curves).map_err(|e| CliError::Runtime(format!("creating {}: {e}", curves.display())))?;
        for (id, s) in &activations {
            for class in 0..model64.num_classes() {
                let (_, curve) = sample_morf(&model64, s, class)?;
                let p = curves.join(format!("{id}_{class}.csv"));
                fs::write(&p, curve.to_csv())
                    .map_err(|e| CliError::Runtime(format!("writing {}: {e}", p.display())))?;
            }
        }
        write_json(&out.join("summary.json"), &summary)?;
    }
    Ok(json!({
        "samples": activations.len(),
        "mean_auc": summary.mean_auc,
        "mean_random_auc": summary.mean_random_auc,
        "trials": summary.trials,
    }))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub checkpoint: Option<PathBuf>,
    pub keep: Option<Vec<String>>,
    pub drop: Vec<String>,
    /// Pruned checkpoint; the input checkpoint is never modified.
    pub out: Option<PathBuf>,
    pub mask_out: Option<PathBuf>,
}

pub fn prune(cfg: &PruneConfig) -> CliResult<serde_json::Value> {
    let src = required(&cfg.checkpoint, "checkpoint")?;
    let out = required(&cfg.out, "out")?;
    if out == src {
        return Err(CliError::Validation(
            "out must differ from the source checkpoint".into(),
        ));
    }
    let mut ckpt = Checkpoint::load(src)?;
    let config = ckpt.model.config().clone();
    let mut mask = match &cfg.keep {
        Some(keep) => PruneMask::parse(&config, keep)?,
        None => PruneMask::keep_all(&config),
    };
    for d in &cfg.drop {
        let id: ConceptId = d.parse()?;
        config.concept_index(&id)?;
        mask.keep.remove(&id);
    }
    ckpt.model = ckpt.model.pruned(&mask)?;
    ckpt.save(out)?;
    if let Some(p) = &cfg.mask_out {
        write_json(p, &mask)?;
    }
    Ok(json!({ "checkpoint": out, "keep": mask.keep, "mask_hash": mask.hash() }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub datasets: BTreeMap<String, PathBuf>,
    pub host: String,
    pub port: u16,
    pub workers: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            bundle: None,
            datasets: BTreeMap::new(),
            host: "127.0.0.1".into(),
            port: 8787,
            workers: 4,
        }
    }
}

pub fn build_session(cfg: &ServeConfig) -> CliResult<Session> {
    let session = Session::new();
    if let Some(p) = &cfg.checkpoint {
        session.load_model(Checkpoint::load(p)?.model)?;
    }
    if let Some(p) = &cfg.bundle {
        session.load_bundle(p.clone())?;
    }
    for (name, path) in &cfg.datasets {
        session.add_dataset(name, Dataset::load(path)?)?;
    }
    Ok(session)
}

pub fn serve(cfg: &ServeConfig) -> CliResult<()> {
    let session = Arc::new(build_session(cfg)?);
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let server = Arc::new(server::bind(&addr)?);
    log::info!("listening on http://{addr}");
    eprintln!("listening on http://{addr}");
    server::run(server, session, cfg.workers);
    Ok(())
}
