//! Ingest of paired keypoint/audio assets, windowing into training samples
//! and seeded batching.
//!
//! Manifest schema (JSON):
//!
//! ```text
//! { "records": [ { "id": "...", "keypoint_path": "...", "audio_path": "...",
//!                  "fps": 25.0, "n_frames": 128, "split": "train" } ],
//!   "stats_path": "stats.json" }
//! ```
//!
//! Relative paths resolve against the manifest's directory. In an input
//! manifest `fps`, `n_frames`, `split` and `stats_path` are optional.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    load_audio, log_mel_spectrogram, read_spectrogram, write_spectrogram, MelSpectrogram, SpectrogramConfig,
};
use crate::error::{Error, Result};
use crate::keypoints::{
    compute_norm_stats, normalize_base_point, read_keypoints, standardize, write_keypoints, KeypointSequence,
    NormStats, Space, DEFAULT_FPS, DEFAULT_STATS_LIMIT, FLAT_DIM,
};
use crate::nn::Tensor;

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_STRIDE: usize = 32;
pub const DEFAULT_BATCH_SIZE: usize = 32;
/// Every tenth record in id order is held out unless the input says otherwise.
pub const VAL_EVERY: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub keypoint_path: PathBuf,
    pub audio_path: PathBuf,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Precomputed log-mel spectrogram, written by [`ingest`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram: Option<SpectrogramConfig>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut seen = HashSet::new();
        for r in &manifest.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::format(path, format!("duplicate record id {:?}", r.id)));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

struct Ingested {
    record: SampleRecord,
    keypoints: KeypointSequence,
}

fn ingest_record(record: &SampleRecord, base: &Path, shards: &Path, cfg: &SpectrogramConfig) -> Result<Ingested> {
    if !valid_id(&record.id) {
        return Err(Error::Invalid(format!(
            "record id {:?} must be non-empty ASCII letters, digits, '-', '_' or '.'",
            record.id
        )));
    }
    if record.fps != cfg.fps {
        return Err(Error::Invalid(format!(
            "fps {} differs from the expected {}",
            record.fps, cfg.fps
        )));
    }
    let kp_path = resolve(base, &record.keypoint_path);
    let raw = read_keypoints(&kp_path, Space::RawPixel)?;
    if let Some(n) = record.n_frames {
        if n != raw.len() {
            return Err(Error::Invalid(format!(
                "manifest says {n} frames but {} holds {}",
                kp_path.display(),
                raw.len()
            )));
        }
    }
    let clip = load_audio(&resolve(base, &record.audio_path), cfg.sample_rate)?;
    let needed = raw.len() * cfg.samples_per_frame();
    if clip.samples.len() < needed {
        return Err(Error::Invalid(format!(
            "audio has {} samples, {} frames need {needed}",
            clip.samples.len(),
            raw.len()
        )));
    }
    let normalized = normalize_base_point(&raw)?;
    let spec = log_mel_spectrogram(&clip, cfg)?;
    let kp_name = format!("{}.kp", record.id);
    let spec_name = format!("{}.spec", record.id);
    write_keypoints(&shards.join(&kp_name), &normalized)?;
    write_spectrogram(&shards.join(&spec_name), &spec)?;
    Ok(Ingested {
        record: SampleRecord {
            id: record.id.clone(),
            keypoint_path: Path::new("shards").join(kp_name),
            audio_path: resolve(base, &record.audio_path),
            fps: record.fps,
            n_frames: Some(raw.len()),
            split: record.split,
            spectrogram_path: Some(Path::new("shards").join(spec_name)),
        },
        keypoints: normalized,
    })
}

/// Reads `manifest_in`, writes base-normalized keypoint shards and
/// spectrogram shards under `out_dir/shards`, `stats.json` and
/// `manifest.json`. Failing records are logged and skipped.
pub fn ingest(manifest_in: &Path, out_dir: &Path, cfg: &SpectrogramConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let input = DatasetManifest::load(manifest_in)?;
    let base = manifest_in.parent().unwrap_or(Path::new("."));
    let shards = out_dir.join("shards");
    std::fs::create_dir_all(&shards).map_err(|e| Error::io(&shards, e))?;

    let mut records = input.records;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut kept = Vec::new();
    for record in &records {
        match ingest_record(record, base, &shards, cfg) {
            Ok(done) => kept.push(done),
            Err(e) => log::warn!("skipping record {:?}: {e}", record.id),
        }
    }
    if kept.is_empty() {
        return Err(Error::Empty("no records survived ingest"));
    }
    let stats = compute_norm_stats(kept.iter().map(|k| &k.keypoints), DEFAULT_STATS_LIMIT)?;
    stats.save(&out_dir.join("stats.json"))?;
    let records = kept
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let mut r = k.record;
            r.split.get_or_insert(if i % VAL_EVERY == VAL_EVERY - 1 {
                Split::Val
            } else {
                Split::Train
            });
            r
        })
        .collect();
    let manifest = DatasetManifest {
        records,
        stats_path: Some(PathBuf::from("stats.json")),
        spectrogram: Some(cfg.clone()),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A record with its shards in memory.
#[derive(Clone, Debug)]
pub struct LoadedRecord {
    pub record: SampleRecord,
    /// Base-normalized.
    pub keypoints: KeypointSequence,
    pub spectrogram: MelSpectrogram,
}

impl LoadedRecord {
    pub fn split(&self) -> Split {
        self.record.split.unwrap_or(Split::Train)
    }
}

/// An ingested dataset loaded from its `manifest.json`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stats: NormStats,
    pub records: Vec<LoadedRecord>,
}

impl Dataset {
    /// `path` may be the manifest file or the directory holding `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest = DatasetManifest::load(&manifest_path)?;
        let stats_rel = manifest
            .stats_path
            .clone()
            .ok_or_else(|| Error::format(&manifest_path, "manifest has no stats_path; run ingest first"))?;
        let stats = NormStats::load(&resolve(base, &stats_rel))?;
        let cfg = manifest.spectrogram.clone().unwrap_or_default();
        let mut records = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let spec_rel = r
                .spectrogram_path
                .as_ref()
                .ok_or_else(|| Error::format(&manifest_path, format!("record {:?} has no spectrogram shard", r.id)))?;
            let keypoints = read_keypoints(&resolve(base, &r.keypoint_path), Space::BaseNormalized)?;
            let spectrogram = read_spectrogram(&resolve(base, spec_rel), &cfg)?;
            records.push(LoadedRecord {
                record: r.clone(),
                keypoints,
                spectrogram,
            });
        }
        Ok(Self {
            manifest,
            stats,
            records,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LoadedRecord> {
        self.records.iter().filter(move |r| r.split() == split)
    }
}

/// One window: spectrogram steps aligned with `T` video frames, the
/// standardized target and its first frame as the reference.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// `"<record id>@<first frame>"`.
    pub id: String,
    pub spectrogram: MelSpectrogram,
    pub reference: [f64; FLAT_DIM],
    pub target: KeypointSequence,
}

/// Windows at offsets `0, stride, 2 * stride, ...` while they fit. Records
/// shorter than `window` yield nothing.
pub fn window_training_samples(
    record: &LoadedRecord,
    stats: &NormStats,
    window: usize,
    stride: usize,
) -> Result<Vec<TrainingSample>> {
    if window == 0 || stride == 0 {
        return Err(Error::Invalid(format!(
            "window ({window}) and stride ({stride}) must be positive"
        )));
    }
    let n = record.keypoints.len().min(record.spectrogram.n_frames());
    let standardized = standardize(&record.keypoints, stats)?;
    let mut out = Vec::new();
    let mut offset = 0;
    while offset + window <= n {
        let target = standardized.window(offset, window)?;
        out.push(TrainingSample {
            id: format!("{}@{offset}", record.record.id),
            spectrogram: record.spectrogram.segment_for_frames(offset, window)?,
            reference: target.frames()[0].flatten(),
            target,
        });
        offset += stride;
    }
    Ok(out)
}

/// Windows of every record in `records`, in record order.
pub fn window_all<'a>(
    records: impl IntoIterator<Item = &'a LoadedRecord>,
    stats: &NormStats,
    window: usize,
    stride: usize,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(window_training_samples(r, stats, window, stride)?);
    }
    Ok(out)
}

/// Stacked tensors of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[N, 1, n_mels, 4T]`
    pub spectrogram: Tensor,
    /// `[N, 136]`
    pub reference: Tensor,
    /// `[N, T, 136]`
    pub target: Tensor,
}

impl Batch {
    pub fn collate(samples: &[&TrainingSample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("empty batch"))?;
        let t = first.target.len();
        let specs: Vec<&MelSpectrogram> = samples.iter().map(|s| &s.spectrogram).collect();
        let spectrogram = crate::nn::spectrogram_batch(&specs)?;
        let mut reference = Vec::with_capacity(samples.len() * FLAT_DIM);
        let mut target = Vec::with_capacity(samples.len() * t * FLAT_DIM);
        for s in samples {
            if s.target.len() != t {
                return Err(Error::Shape {
                    axis: "window frames",
                    expected: t,
                    actual: s.target.len(),
                });
            }
            reference.extend_from_slice(&s.reference);
            target.extend(s.target.to_flat());
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            spectrogram,
            reference: Tensor::from_vec(&[samples.len(), FLAT_DIM], reference),
            target: Tensor::from_vec(&[samples.len(), t, FLAT_DIM], target),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Seeded permutation of `0..n` cut into batches; the last may be short.
pub fn batch_order(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Empty("dataset has no training windows"));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of collated batches in seeded order.
pub fn batch_iterator(
    samples: &[TrainingSample],
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
    let order = batch_order(samples.len(), batch_size, seed)?;
    Ok(order.into_iter().map(move |idx| {
        let picked: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
        Batch::collate(&picked)
    }))
}
