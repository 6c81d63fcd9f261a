//! Concept explanations: representative samples, heatmaps, pruning and
//! portable concept bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{concept_heatmap, ConceptHeatmap, ConceptId, Model, ModelConfig, RelevanceMatrix};
use crate::scalar::Scalar;

pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_FILE: &str = "bundle.json";
const MIN_FRAME_SIDE: u32 = 64;

/// Activation of every concept for every sample, sample-major.
pub fn activation_table(model: &Model<f32>, samples: &[Sample]) -> Result<Vec<Vec<f32>>> {
    samples
        .iter()
        .map(|s| {
            let x = model.gather_inputs(&s.modalities)?;
            Ok(model.forward(&x)?.activation)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: u64,
    pub score: f64,
}

/// Highest `k` scores, ties broken by ascending sample id.
pub fn top_k_by_score(scores: &[(u64, f64)], k: usize) -> Vec<ScoredSample> {
    let mut v: Vec<ScoredSample> = scores
        .iter()
        .map(|&(sample_id, score)| ScoredSample { sample_id, score })
        .collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
    v.truncate(k);
    v
}

pub fn top_k_representative_samples(
    model: &Model<f32>,
    samples: &[Sample],
    concept: &ConceptId,
    k: usize,
) -> Result<Vec<ScoredSample>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let flat = model.config().concept_index(concept)?;
    let m = model
        .config()
        .branches
        .iter()
        .position(|b| b.modality.name == concept.modality)
        .expect("concept_index validated the modality");
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let x = model.gather_inputs(&s.modalities)?;
        let trace = model.forward_branch(m, &x[m])?;
        let local = flat - model.config().concept_offset(m);
        scores.push((s.id, trace.scores[local] as f64));
    }
    Ok(top_k_by_score(&scores, k))
}

/// Set of concepts whose relevance rows survive pruning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: BTreeSet<ConceptId>,
}

impl PruneMask {
    pub fn keep_all(config: &ModelConfig) -> Self {
        Self {
            keep: config.concept_ids().into_iter().collect(),
        }
    }

    pub fn keep_none() -> Self {
        Self { keep: BTreeSet::new() }
    }

    /// Validates every id against `config`.
    pub fn new<I: IntoIterator<Item = ConceptId>>(config: &ModelConfig, keep: I) -> Result<Self> {
        let keep: BTreeSet<ConceptId> = keep.into_iter().collect();
        for id in &keep {
            config.concept_index(id)?;
        }
        Ok(Self { keep })
    }

    /// Parses `modality:index` strings, naming the first bad id.
    pub fn parse(config: &ModelConfig, keep: &[String]) -> Result<Self> {
        let ids = keep
            .iter()
            .map(|s| {
                let id: ConceptId = s.parse()?;
                config.concept_index(&id).map(|_| id)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            keep: ids.into_iter().collect(),
        })
    }

    pub fn contains(&self, id: &ConceptId) -> bool {
        self.keep.contains(id)
    }

    pub fn is_keep_all(&self, config: &ModelConfig) -> bool {
        self.keep.len() == config.total_concepts()
    }

    /// Stable digest of the keep set.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.keep {
            h.update(id.to_string().as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Copy of `w` with every row outside `keep` set to zero.
pub fn prune_concepts<T: Scalar>(
    w: &RelevanceMatrix<T>,
    config: &ModelConfig,
    keep: &BTreeSet<ConceptId>,
) -> Result<RelevanceMatrix<T>> {
    if w.rows() != config.total_concepts() {
        return Err(Error::Config(format!(
            "relevance matrix has {} rows, model has {} concepts",
            w.rows(),
            config.total_concepts()
        )));
    }
    let mut kept = vec![false; w.rows()];
    for id in keep {
        kept[config.concept_index(id)?] = true;
    }
    let mut out = w.clone();
    for (row, keep) in kept.into_iter().enumerate() {
        if !keep {
            out.row_mut(row).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(out)
}

impl<T: Scalar> Model<T> {
    /// A copy of the model with `mask` applied to the aggregator.
    pub fn pruned(&self, mask: &PruneMask) -> Result<Self> {
        let w = prune_concepts(&self.relevance, self.config(), &mask.keep)?;
        self.with_relevance(w)
    }
}

/// Heatmap of one representative sample, stored with its rendered frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    /// Frame image paths relative to the bundle directory.
    pub frames: Vec<String>,
}

impl HeatmapRecord {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopSample {
    pub sample_id: u64,
    pub activation: f64,
    pub label: usize,
    pub patterns: BTreeSet<String>,
    pub heatmap: HeatmapRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub concept_id: ConceptId,
    pub modality: String,
    pub index: usize,
    pub top_samples: Vec<TopSample>,
    /// Row of the (masked) aggregator, one entry per class.
    pub relevance: Vec<f64>,
    /// Binary difference `W[i,1] - W[i,0]`, or the class-1 entry otherwise.
    pub display_relevance: f64,
    pub pruned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub spec_hash: String,
    pub sample_count: usize,
}

/// Self-contained explanation artifact for a model and dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptBundle {
    pub version: u32,
    pub model_config: ModelConfig,
    pub num_classes: usize,
    pub dataset: DatasetRef,
    pub k: usize,
    pub mask: PruneMask,
    /// Unmasked aggregator weights.
    pub relevance: RelevanceMatrix<f64>,
    pub reports: Vec<ConceptReport>,
}

impl ConceptBundle {
    pub fn report(&self, id: &ConceptId) -> Option<&ConceptReport> {
        self.reports.iter().find(|r| &r.concept_id == id)
    }

    /// Re-derives each report's relevance view under a new mask.
    pub fn with_mask(&self, mask: PruneMask) -> Result<Self> {
        let masked = prune_concepts(&self.relevance, &self.model_config, &mask.keep)?;
        let mut out = self.clone();
        for r in &mut out.reports {
            let row = self.model_config.concept_index(&r.concept_id)?;
            r.relevance = masked.row(row).to_vec();
            r.display_relevance = masked.display_relevance(row, 1.min(masked.classes() - 1));
            r.pruned = !mask.contains(&r.concept_id);
        }
        out.mask = mask;
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let bundle: ConceptBundle = serde_json::from_slice(&bytes)?;
        if bundle.version != BUNDLE_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported bundle version {}", bundle.version),
            });
        }
        Ok(bundle)
    }
}

pub fn frame_file_name(modality: &str, concept: usize, rank: usize, frame: usize) -> String {
    format!("{modality}_{concept}_{rank}_{frame}.png")
}

/// Splits a heatmap into 2-D frames: `[T, H, W]` yields `T` frames of
/// `H x W`, a sequence `[T]` yields one `1 x T` frame.
pub fn heatmap_frames(dims: &[usize], values: &[f64]) -> Vec<(u32, u32, Vec<f64>)> {
    match dims {
        [t, h, w] => values
            .chunks_exact(h * w)
            .take(*t)
            .map(|c| (*w as u32, *h as u32, c.to_vec()))
            .collect(),
        [t] => vec![(*t as u32, 1, values.to_vec())],
        _ => {
            let n = values.len() as u32;
            vec![(n, 1, values.to_vec())]
        }
    }
}

/// Grayscale frame, scaled with nearest-neighbour so the long side is at
/// least 64 pixels. `values` are expected in `[0, 1]`.
pub fn render_frame(width: u32, height: u32, values: &[f64]) -> GrayImage {
    let scale = MIN_FRAME_SIDE.div_ceil(width.max(height).max(1));
    GrayImage::from_fn(width * scale, height * scale, |x, y| {
        let v = values[((y / scale) * width + x / scale) as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn write_frames(dir: &Path, heatmap: &ConceptHeatmap<f64>, rank: usize) -> Result<Vec<String>> {
    let normalized = heatmap.normalized();
    let mut names = Vec::new();
    for (f, (w, h, vals)) in heatmap_frames(&heatmap.dims, &normalized).into_iter().enumerate() {
        let name = frame_file_name(&heatmap.modality, heatmap.concept, rank, f);
        let path = dir.join(&name);
        render_frame(w, h, &vals).save(&path)?;
        names.push(name);
    }
    Ok(names)
}

/// Writes `bundle.json` and heatmap frames for every concept into `dir`.
pub fn export_concept_bundle(
    model: &Model<f32>,
    dataset: &Dataset,
    k: usize,
    mask: &PruneMask,
    dir: &Path,
) -> Result<ConceptBundle> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let config = model.config();
    for id in &mask.keep {
        config.concept_index(id)?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let by_id: BTreeMap<u64, &Sample> = dataset.samples.iter().map(|s| (s.id, s)).collect();
    let table = activation_table(model, &dataset.samples)?;
    let model64 = model.cast::<f64>();

    let mut reports = Vec::new();
    for (flat, id) in config.concept_ids().into_iter().enumerate() {
        let m = config
            .branches
            .iter()
            .position(|b| b.modality.name == id.modality)
            .expect("ids come from the config");
        let scores: Vec<(u64, f64)> = dataset
            .samples
            .iter()
            .zip(&table)
            .map(|(s, row)| (s.id, row[flat] as f64))
            .collect();
        let mut top = Vec::new();
        for (rank, scored) in top_k_by_score(&scores, k).into_iter().enumerate() {
            let sample = by_id[&scored.sample_id];
            let x = model64.gather_inputs(&sample.modalities)?;
            let trace = model64.forward_branch(m, &x[m])?;
            let d = trace.representation.len();
            let p = &trace.recalibration[id.index * d..(id.index + 1) * d];
            let heatmap = concept_heatmap(&trace.features, p, id.index)?;
            let frames = write_frames(dir, &heatmap, rank)?;
            top.push(TopSample {
                sample_id: sample.id,
                activation: trace.scores[id.index],
                label: sample.label,
                patterns: sample.patterns.clone(),
                heatmap: HeatmapRecord {
                    dims: heatmap.dims,
                    values: heatmap.values,
                    frames,
                },
            });
        }
        reports.push(ConceptReport {
            modality: id.modality.clone(),
            index: id.index,
            concept_id: id,
            top_samples: top,
            relevance: Vec::new(),
            display_relevance: 0.0,
            pruned: false,
        });
    }

    let bundle = ConceptBundle {
        version: BUNDLE_VERSION,
        model_config: config.clone(),
        num_classes: model.num_classes(),
        dataset: DatasetRef {
            spec_hash: dataset.manifest.spec_hash.clone(),
            sample_count: dataset.len(),
        },
        k,
        mask: mask.clone(),
        relevance: model.relevance.cast(),
        reports,
    }
    .with_mask(mask.clone())?;
    let path = dir.join(BUNDLE_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&bundle)?).map_err(|e| Error::io(&path, e))?;
    Ok(bundle)
}

pub fn frame_path(dir: &Path, report: &ConceptReport, rank: usize, frame: usize) -> Option<PathBuf> {
    let name = report.top_samples.get(rank)?.heatmap.frames.get(frame)?;
    Some(dir.join(name))
}

/// Fraction of `top` samples carrying `pattern`.
pub fn concept_purity(top: &[&Sample], pattern: &str) -> f64 {
    if top.is_empty() {
        return 0.0;
    }
    top.iter().filter(|s| s.has_pattern(pattern)).count() as f64 / top.len() as f64
}

/// Pattern of the concept's own modality with the highest top-sample purity;
/// ties go to the lexicographically first pattern id.
pub fn dominant_pattern<'a>(top: &[&Sample], patterns: impl IntoIterator<Item = &'a str>) -> Option<(&'a str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    let mut ids: Vec<&str> = patterns.into_iter().collect();
    ids.sort_unstable();
    for p in ids {
        let purity = concept_purity(top, p);
        if best.map_or(true, |(_, b)| purity > b) {
            best = Some((p, purity));
        }
    }
    best
}

/// Mean pairwise cosine similarity between `softmax(p_i)` of concepts in the
/// same modality, averaged over samples and modalities.
pub fn collapse_similarity(model: &Model<f32>, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let x = model.gather_inputs(&s.modalities)?;
        let trace = model.forward(&x)?;
        for b in &trace.branches {
            let d = b.representation.len();
            let a: Vec<&[f32]> = b.attention.chunks_exact(d).collect();
            for i in 0..a.len() {
                for j in i + 1..a.len() {
                    total += cosine(a[i], a[j]);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no concept pairs to compare".into()));
    }
    Ok(total / count as f64)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean Jaccard overlap of top-k sample sets between concepts of the same
/// modality. Values near 1 mean concepts share their representative samples.
pub fn top_k_overlap(model: &Model<f32>, samples: &[Sample], k: usize) -> Result<f64> {
    let table = activation_table(model, samples)?;
    let config = model.config();
    let mut total = 0.0;
    let mut count = 0usize;
    for (m, b) in config.branches.iter().enumerate() {
        let off = config.concept_offset(m);
        let sets: Vec<BTreeSet<u64>> = (0..b.modality.num_concepts)
            .map(|i| {
                let scores: Vec<(u64, f64)> = samples
                    .iter()
                    .zip(&table)
                    .map(|(s, row)| (s.id, row[off + i] as f64))
                    .collect();
                top_k_by_score(&scores, k).into_iter().map(|t| t.sample_id).collect()
            })
            .collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                let inter = sets[i].intersection(&sets[j]).count() as f64;
                let union = sets[i].union(&sets[j]).count() as f64;
                total += inter / union;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no concept pairs to compare".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_sample_id() {
        let top = top_k_by_score(&[(5, 1.0), (2, 1.0), (9, 3.0), (1, 0.5)], 3);
        let ids: Vec<u64> = top.iter().map(|t| t.sample_id).collect();
        assert_eq!(ids, vec![9, 2, 5]);
    }

    #[test]
    fn k_beyond_len_returns_all_sorted() {
        let top = top_k_by_score(&[(1, 0.1), (2, 0.3), (3, 0.2)], 10);
        let ids: Vec<u64> = top.iter().map(|t| t.sample_id).collect();
        assert_eq!(ids, vec![2, 3, 1]);
    }

    #[test]
    fn sequence_heatmap_is_one_frame() {
        let frames = heatmap_frames(&[5], &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(frames.len(), 1);
        assert_eq!((frames[0].0, frames[0].1), (5, 1));
        let img = render_frame(5, 1, &frames[0].2);
        assert_eq!(img.width(), 65);
        assert_eq!(img.get_pixel(64, 12)[0], 255);
    }

    #[test]
    fn video_heatmap_splits_by_time() {
        let vals: Vec<f64> = (0..12).map(|v| v as f64 / 11.0).collect();
        let frames = heatmap_frames(&[3, 2, 2], &vals);
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[2].2, vals[8..].to_vec());
    }

    #[test]
    fn mask_hash_depends_on_keep_set() {
        let cfg = ModelConfig::desk_default(2);
        let all = PruneMask::keep_all(&cfg);
        let none = PruneMask::keep_none();
        assert_ne!(all.hash(), none.hash());
        assert_eq!(all.hash(), PruneMask::keep_all(&cfg).hash());
        assert!(all.is_keep_all(&cfg));
    }

    #[test]
    fn parse_names_unknown_id() {
        let cfg = ModelConfig::desk_default(2);
        let err = PruneMask::parse(&cfg, &["appearance:0".into(), "nonexistent".into()]).unwrap_err();
        assert!(err.to_string().contains("nonexistent"), "{err}");
        let err = PruneMask::parse(&cfg, &["appearance:7".into()]).unwrap_err();
        assert!(err.to_string().contains("appearance:7"), "{err}");
    }
}
