//! Planted-pattern multi-modal datasets with ground-truth pattern tags.
//!
//! Each sample draws a class, then a set of class-defining "signal" patterns
//! whose maximum-likelihood class is exactly that class, then independent
//! "nuisance" patterns whose frequencies may correlate with the class. The
//! label is therefore a deterministic function of the signal patterns, while
//! nuisance patterns model dataset-specific shortcuts.

mod storage;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use storage::{decode_tensor, encode_tensor, persist_roundtrip, read_sample, write_sample};

use crate::error::{Error, Result};
use crate::model::ModalityKind;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const MAX_SIGNAL_PATTERNS: usize = 16;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub patterns: BTreeSet<String>,
    pub modalities: BTreeMap<String, Tensor<f32>>,
}

impl Sample {
    pub fn has_pattern(&self, id: &str) -> bool {
        self.patterns.contains(id)
    }
}

/// Raw input layout of one modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityInput {
    pub name: String,
    pub kind: ModalityKind,
    /// `[T, H, W, C]` for spatiotemporal inputs, `[T, F]` for sequences.
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternRole {
    /// Determines the label.
    Signal,
    /// Independent of the label rule; its frequency may still depend on the class.
    Nuisance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PatternGenerator {
    /// Alternating bright/dark horizontal stripes across the lower part of the frame.
    CrosswalkStripe { amplitude: f64 },
    /// Dark block in the top-left corner, like letterbox padding.
    CornerBlock { amplitude: f64 },
    /// Bright square drifting left to right across the frame.
    MovingBlob { amplitude: f64 },
    /// Horizontal box drift toward +x over the sequence (channel 0).
    LateralMotion { drift: f64 },
    /// Box width and height growth over the sequence (channels 2 and 3).
    BoxGrowth { rate: f64 },
    /// Linear speed drop over the sequence.
    Deceleration { drop: f64 },
    /// Periodic speed oscillation.
    Oscillation { amplitude: f64 },
}

impl PatternGenerator {
    fn kind(&self) -> ModalityKind {
        match self {
            PatternGenerator::CrosswalkStripe { .. }
            | PatternGenerator::CornerBlock { .. }
            | PatternGenerator::MovingBlob { .. } => ModalityKind::Spatiotemporal,
            _ => ModalityKind::Sequential,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub id: String,
    pub modality: String,
    pub role: PatternRole,
    pub generator: PatternGenerator,
    /// Presence probability given each class.
    pub class_frequency: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub modalities: Vec<ModalityInput>,
    pub patterns: Vec<PatternSpec>,
    pub num_samples: usize,
    pub seed: u64,
    /// Standard deviation of the per-element background noise.
    pub noise: f64,
    /// Identifier of the first sample.
    #[serde(default)]
    pub first_id: u64,
}

impl SyntheticSpec {
    /// Two classes; appearance `8x32x32x3`, trajectory `8x4`, ego `8x1`.
    pub fn desk_default() -> Self {
        let t = 8;
        SyntheticSpec {
            num_classes: 2,
            modalities: vec![
                ModalityInput {
                    name: "appearance".into(),
                    kind: ModalityKind::Spatiotemporal,
                    shape: vec![t, 32, 32, 3],
                },
                ModalityInput {
                    name: "trajectory".into(),
                    kind: ModalityKind::Sequential,
                    shape: vec![t, 4],
                },
                ModalityInput {
                    name: "ego".into(),
                    kind: ModalityKind::Sequential,
                    shape: vec![t, 1],
                },
            ],
            patterns: vec![
                PatternSpec {
                    id: "crosswalk_stripe".into(),
                    modality: "appearance".into(),
                    role: PatternRole::Signal,
                    generator: PatternGenerator::CrosswalkStripe { amplitude: 0.3 },
                    class_frequency: vec![0.0, 0.6],
                },
                PatternSpec {
                    id: "lateral_motion".into(),
                    modality: "trajectory".into(),
                    role: PatternRole::Signal,
                    generator: PatternGenerator::LateralMotion { drift: 0.5 },
                    class_frequency: vec![0.0, 0.6],
                },
                PatternSpec {
                    id: "deceleration".into(),
                    modality: "ego".into(),
                    role: PatternRole::Signal,
                    generator: PatternGenerator::Deceleration { drop: 0.5 },
                    class_frequency: vec![0.0, 0.6],
                },
                PatternSpec {
                    id: "corner_block".into(),
                    modality: "appearance".into(),
                    role: PatternRole::Nuisance,
                    generator: PatternGenerator::CornerBlock { amplitude: 0.4 },
                    class_frequency: vec![0.5, 0.5],
                },
                PatternSpec {
                    id: "box_growth".into(),
                    modality: "trajectory".into(),
                    role: PatternRole::Nuisance,
                    generator: PatternGenerator::BoxGrowth { rate: 0.5 },
                    class_frequency: vec![0.5, 0.5],
                },
            ],
            num_samples: 2000,
            seed: 7,
            noise: 0.1,
            first_id: 0,
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.num_samples = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_first_id(mut self, id: u64) -> Self {
        self.first_id = id;
        self
    }

    pub fn pattern(&self, id: &str) -> Option<&PatternSpec> {
        self.patterns.iter().find(|p| p.id == id)
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityInput> {
        self.modalities.iter().find(|m| m.name == name)
    }

    fn signals(&self) -> Vec<&PatternSpec> {
        self.patterns.iter().filter(|p| p.role == PatternRole::Signal).collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec("need at least two classes".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Spec(format!(
                "noise must be finite and >= 0, got {}",
                self.noise
            )));
        }
        let mut names = BTreeSet::new();
        for m in &self.modalities {
            if !names.insert(m.name.as_str()) {
                return Err(Error::Spec(format!("duplicate modality {:?}", m.name)));
            }
            let rank = match m.kind {
                ModalityKind::Spatiotemporal => 4,
                ModalityKind::Sequential => 2,
            };
            if m.shape.len() != rank || m.shape.contains(&0) {
                return Err(Error::Spec(format!("{}: invalid input shape {:?}", m.name, m.shape)));
            }
        }
        let mut ids = BTreeSet::new();
        for p in &self.patterns {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::Spec(format!("duplicate pattern {:?}", p.id)));
            }
            let m = self
                .modality(&p.modality)
                .ok_or_else(|| Error::Spec(format!("pattern {} targets unknown modality {:?}", p.id, p.modality)))?;
            if m.kind != p.generator.kind() {
                return Err(Error::Spec(format!(
                    "pattern {} does not fit modality {}",
                    p.id, m.name
                )));
            }
            if let ModalityKind::Sequential = m.kind {
                let need = match p.generator {
                    PatternGenerator::BoxGrowth { .. } => 4,
                    _ => 1,
                };
                if m.shape[1] < need {
                    return Err(Error::Spec(format!(
                        "pattern {} needs at least {need} features in {}",
                        p.id, m.name
                    )));
                }
            }
            if p.class_frequency.len() != self.num_classes || p.class_frequency.iter().any(|f| !(0.0..=1.0).contains(f))
            {
                return Err(Error::Spec(format!(
                    "pattern {} needs {} class frequencies in [0, 1]",
                    p.id, self.num_classes
                )));
            }
        }
        if self.signals().len() > MAX_SIGNAL_PATTERNS {
            return Err(Error::Spec(format!("at most {MAX_SIGNAL_PATTERNS} signal patterns")));
        }
        for c in 0..self.num_classes {
            if !self.class_reachable(c) {
                return Err(Error::Spec(format!(
                    "class {c} is unreachable: no signal-pattern combination identifies it"
                )));
            }
        }
        Ok(())
    }

    fn set_likelihood(&self, present: &[bool], class: usize) -> f64 {
        self.signals()
            .iter()
            .zip(present)
            .map(|(p, &on)| {
                let f = p.class_frequency[class];
                if on {
                    f
                } else {
                    1.0 - f
                }
            })
            .product()
    }

    /// Maximum-likelihood class of a signal-pattern combination, or `None`
    /// if it is impossible or ambiguous.
    fn class_of_signals(&self, present: &[bool]) -> Option<usize> {
        let likes: Vec<f64> = (0..self.num_classes).map(|c| self.set_likelihood(present, c)).collect();
        let best = crate::scalar::argmax(&likes);
        let unique = likes.iter().enumerate().all(|(c, &l)| c == best || l < likes[best]);
        (likes[best] > 0.0 && unique).then_some(best)
    }

    fn class_reachable(&self, class: usize) -> bool {
        let k = self.signals().len();
        (0u32..(1 << k)).any(|mask| {
            let present: Vec<bool> = (0..k).map(|i| mask & (1 << i) != 0).collect();
            self.set_likelihood(&present, class) > 0.0 && self.class_of_signals(&present) == Some(class)
        })
    }

    /// Ground-truth label rule applied to a set of pattern tags.
    pub fn label_for_patterns(&self, tags: &BTreeSet<String>) -> Option<usize> {
        let present: Vec<bool> = self.signals().iter().map(|p| tags.contains(&p.id)).collect();
        self.class_of_signals(&present)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistributionShift {
    /// Added to the background noise standard deviation.
    #[serde(default)]
    pub noise_delta: f64,
    /// Pairs of patterns whose class frequencies are exchanged.
    #[serde(default)]
    pub swaps: Vec<(String, String)>,
    /// Replacement class frequencies per pattern, applied after swaps.
    #[serde(default)]
    pub frequency_overrides: BTreeMap<String, Vec<f64>>,
    /// Seed of the shifted spec; defaults to the source seed plus one.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Derives a spec with the same pattern semantics but different nuisance
/// statistics.
pub fn shift_distribution(spec: &SyntheticSpec, shift: &DistributionShift) -> Result<SyntheticSpec> {
    let mut out = spec.clone();
    out.noise = spec.noise + shift.noise_delta;
    for (a, b) in &shift.swaps {
        let ia = out.patterns.iter().position(|p| &p.id == a);
        let ib = out.patterns.iter().position(|p| &p.id == b);
        let (ia, ib) = match (ia, ib) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::Spec(format!("cannot swap unknown patterns {a:?} and {b:?}"))),
        };
        let fa = out.patterns[ia].class_frequency.clone();
        out.patterns[ia].class_frequency = std::mem::replace(&mut out.patterns[ib].class_frequency, fa);
    }
    for (id, freq) in &shift.frequency_overrides {
        let p = out
            .patterns
            .iter_mut()
            .find(|p| &p.id == id)
            .ok_or_else(|| Error::Spec(format!("cannot override unknown pattern {id:?}")))?;
        p.class_frequency = freq.clone();
    }
    out.seed = shift.seed.unwrap_or(spec.seed.wrapping_add(1));
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec_hash: String,
    pub sample_count: usize,
    pub class_histogram: Vec<usize>,
    /// Sample directories relative to the dataset root.
    pub files: Vec<String>,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn sample_dir_name(id: u64) -> String {
    format!("sample_{id:06}")
}

impl Dataset {
    pub fn spec(&self) -> &SyntheticSpec {
        &self.manifest.spec
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for (s, rel) in self.samples.iter().zip(&self.manifest.files) {
            write_sample(s, &root.join(rel))?;
        }
        let path = root.join("dataset.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported manifest version {}", manifest.version),
            });
        }
        if manifest.files.len() != manifest.sample_count {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "manifest lists {} files but declares {} samples",
                    manifest.files.len(),
                    manifest.sample_count
                ),
            });
        }
        let samples = manifest
            .files
            .iter()
            .map(|rel| read_sample(&root.join(rel)))
            .collect::<Result<Vec<_>>>()?;
        let mut hist = vec![0; manifest.spec.num_classes];
        for s in &samples {
            if s.label >= hist.len() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("sample {} has label {} out of range", s.id, s.label),
                });
            }
            hist[s.label] += 1;
        }
        if hist != manifest.class_histogram {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "class histogram on disk {hist:?} differs from manifest {:?}",
                    manifest.class_histogram
                ),
            });
        }
        Ok(Self { manifest, samples })
    }
}

/// Draws `spec.num_samples` samples deterministically from `spec.seed`.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signals: Vec<&PatternSpec> = spec.signals();
    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut hist = vec![0; spec.num_classes];
    for n in 0..spec.num_samples {
        let label = rng.gen_range(0..spec.num_classes);
        let mut present = vec![false; signals.len()];
        let mut accepted = false;
        for _ in 0..MAX_REJECTIONS {
            for (slot, p) in present.iter_mut().zip(&signals) {
                *slot = rng.gen_bool(p.class_frequency[label]);
            }
            if spec.class_of_signals(&present) == Some(label) {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Spec(format!(
                "could not draw an identifying pattern set for class {label}"
            )));
        }
        let mut tags: BTreeSet<String> = signals
            .iter()
            .zip(&present)
            .filter(|(_, &on)| on)
            .map(|(p, _)| p.id.clone())
            .collect();
        for p in spec.patterns.iter().filter(|p| p.role == PatternRole::Nuisance) {
            if rng.gen_bool(p.class_frequency[label]) {
                tags.insert(p.id.clone());
            }
        }
        let modalities = spec
            .modalities
            .iter()
            .map(|m| (m.name.clone(), render_modality(spec, m, &tags, &mut rng)))
            .collect();
        hist[label] += 1;
        samples.push(Sample {
            id: spec.first_id + n as u64,
            label,
            patterns: tags,
            modalities,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec_hash: spec.hash(),
        sample_count: samples.len(),
        class_histogram: hist,
        files: samples.iter().map(|s| sample_dir_name(s.id)).collect(),
        spec: spec.clone(),
    };
    Ok(Dataset { manifest, samples })
}

fn render_modality(
    spec: &SyntheticSpec,
    m: &ModalityInput,
    tags: &BTreeSet<String>,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let active: Vec<&PatternSpec> = spec
        .patterns
        .iter()
        .filter(|p| p.modality == m.name && tags.contains(&p.id))
        .collect();
    match m.kind {
        ModalityKind::Spatiotemporal => render_clip(&m.shape, &active, &noise, rng),
        ModalityKind::Sequential => render_sequence(&m.shape, &active, &noise, rng),
    }
}

fn render_clip(shape: &[usize], active: &[&PatternSpec], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut clip = vec![0.5f64; t * h * w * c];
    let idx = |f: usize, y: usize, x: usize, ch: usize| ((f * h + y) * w + x) * c + ch;
    for p in active {
        match p.generator {
            PatternGenerator::CrosswalkStripe { amplitude } => {
                let x0 = rng.gen_range(0..=w / 2);
                for f in 0..t {
                    for y in (h * 5 / 8)..(h * 7 / 8) {
                        let sign = if (y / 2) % 2 == 0 { 1.0 } else { -1.0 };
                        for x in x0..(x0 + w / 2).min(w) {
                            for ch in 0..c {
                                clip[idx(f, y, x, ch)] += sign * amplitude;
                            }
                        }
                    }
                }
            }
            PatternGenerator::CornerBlock { amplitude } => {
                for f in 0..t {
                    for y in 0..(h / 4).max(1) {
                        for x in 0..(w / 4).max(1) {
                            for ch in 0..c {
                                clip[idx(f, y, x, ch)] -= amplitude;
                            }
                        }
                    }
                }
            }
            PatternGenerator::MovingBlob { amplitude } => {
                let size = (h / 6).max(1);
                let y0 = rng.gen_range(0..=h - size);
                for f in 0..t {
                    let x0 = f * (w - size) / (t - 1).max(1);
                    for y in y0..y0 + size {
                        for x in x0..(x0 + size).min(w) {
                            for ch in 0..c {
                                clip[idx(f, y, x, ch)] += amplitude;
                            }
                        }
                    }
                }
            }
            _ => unreachable!("validated pattern kind"),
        }
    }
    let data = clip.into_iter().map(|v| (v + noise.sample(rng)) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn render_sequence(shape: &[usize], active: &[&PatternSpec], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (t, f) = (shape[0], shape[1]);
    let progress = |step: usize| if t > 1 { step as f64 / (t - 1) as f64 } else { 0.0 };
    // bounding-box style [x, y, w, h] for 4 features, speed otherwise
    let base: Vec<f64> = if f >= 4 {
        let mut b = vec![rng.gen_range(0.4..0.6), 0.6, 0.1, 0.3];
        b.resize(f, 0.0);
        b
    } else {
        vec![rng.gen_range(0.5..0.7); f]
    };
    let mut seq: Vec<f64> = (0..t).flat_map(|_| base.iter().copied()).collect();
    for p in active {
        match p.generator {
            PatternGenerator::LateralMotion { drift } => {
                for step in 0..t {
                    seq[step * f] += drift * progress(step);
                }
            }
            PatternGenerator::BoxGrowth { rate } => {
                for step in 0..t {
                    let g = 1.0 + rate * progress(step);
                    seq[step * f + 2] *= g;
                    seq[step * f + 3] *= g;
                }
            }
            PatternGenerator::Deceleration { drop } => {
                for step in 0..t {
                    seq[step * f] -= drop * progress(step);
                }
            }
            PatternGenerator::Oscillation { amplitude } => {
                for step in 0..t {
                    seq[step * f] += amplitude * (std::f64::consts::PI * step as f64 / 2.0).sin();
                }
            }
            _ => unreachable!("validated pattern kind"),
        }
    }
    let data = seq.into_iter().map(|v| (v + noise.sample(rng)) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
