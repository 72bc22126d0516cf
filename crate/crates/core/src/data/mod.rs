//! Procedural deepfake-proxy dataset: smooth per-identity textures for the
//! real class, four low-amplitude manipulation families for the fake class,
//! grouped into videos of consecutive clips.
//!
//! Everything is deterministic per seed; each video derives its own RNG
//! stream so generation could be parallelised per video without changing
//! output. Artifact amplitudes are part of [`DatasetConfig`] and therefore
//! travel in the on-disk manifest rather than being baked into code.

pub mod distortion;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::PairedBatch;
use crate::tensor::Tensor;

pub use distortion::{apply_distortion, severity_parameter, DistortionKind, DistortionSpec, ALL_DISTORTION_KINDS};

/// Manipulation family; `None` marks the real class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    None,
    BlendBoundary,
    Smoothing,
    UpsampleChecker,
    ColorShift,
}

/// The four fake families, in canonical order.
pub const FAKE_FAMILIES: [Family; 4] =
    [Family::BlendBoundary, Family::Smoothing, Family::UpsampleChecker, Family::ColorShift];

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::None => "none",
            Family::BlendBoundary => "blend_boundary",
            Family::Smoothing => "smoothing",
            Family::UpsampleChecker => "upsample_checker",
            Family::ColorShift => "color_shift",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Family::None),
            "blend_boundary" => Ok(Family::BlendBoundary),
            "smoothing" => Ok(Family::Smoothing),
            "upsample_checker" => Ok(Family::UpsampleChecker),
            "color_shift" => Ok(Family::ColorShift),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

/// Per-family artifact strengths. Blend/checker/shift are additive
/// intensities; smoothing is a blend factor toward a low-passed patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactAmplitudes {
    pub blend_boundary: f64,
    pub smoothing: f64,
    pub upsample_checker: f64,
    pub color_shift: f64,
    /// High-frequency per-identity grain added to every clip; the smoothing
    /// family erases it locally, which is what makes that family learnable.
    pub grain: f64,
    /// Per-frame motion of the texture blobs, in normalised coordinates.
    pub jitter: f64,
}

impl Default for ArtifactAmplitudes {
    fn default() -> Self {
        ArtifactAmplitudes {
            blend_boundary: 0.35,
            smoothing: 0.95,
            upsample_checker: 0.10,
            color_shift: 0.25,
            grain: 0.14,
            jitter: 0.02,
        }
    }
}

impl ArtifactAmplitudes {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("blend_boundary", self.blend_boundary),
            ("smoothing", self.smoothing),
            ("upsample_checker", self.upsample_checker),
            ("color_shift", self.color_shift),
            ("grain", self.grain),
            ("jitter", self.jitter),
        ] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidConfig(format!("amplitude {name} must be in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Total number of videos; `real_fraction` of them are real.
    pub num_videos: usize,
    pub clips_per_video: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default = "default_real_fraction")]
    pub real_fraction: f64,
    #[serde(default = "default_families")]
    pub families: Vec<Family>,
    #[serde(default)]
    pub amplitudes: ArtifactAmplitudes,
    pub seed: u64,
}

fn default_real_fraction() -> f64 {
    0.2
}

fn default_families() -> Vec<Family> {
    FAKE_FAMILIES.to_vec()
}

impl DatasetConfig {
    /// Default geometry: 4 frames of 32x32 single-channel clips.
    pub fn small(num_videos: usize, clips_per_video: usize, seed: u64) -> Self {
        DatasetConfig {
            num_videos,
            clips_per_video,
            frames: 4,
            height: 32,
            width: 32,
            channels: 1,
            real_fraction: default_real_fraction(),
            families: default_families(),
            amplitudes: ArtifactAmplitudes::default(),
            seed,
        }
    }

    pub fn num_real_videos(&self) -> usize {
        (self.real_fraction * self.num_videos as f64).round() as usize
    }

    /// Model-facing input shape: frames stacked as channels.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.frames * self.channels, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_videos < 2 {
            return Err(Error::InvalidConfig("num_videos must be >= 2".into()));
        }
        if self.clips_per_video == 0 {
            return Err(Error::InvalidConfig("clips_per_video must be >= 1".into()));
        }
        for (name, v) in [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.real_fraction.is_finite() && self.real_fraction > 0.0 && self.real_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "real_fraction must lie strictly in (0,1), got {}",
                self.real_fraction
            )));
        }
        if self.families.is_empty() {
            return Err(Error::InvalidConfig("at least one manipulation family is required".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.families {
            if *f == Family::None {
                return Err(Error::InvalidConfig("'none' is the real class, not a manipulation family".into()));
            }
            if !seen.insert(*f) {
                return Err(Error::InvalidConfig(format!("duplicate family {f}")));
            }
        }
        let real = self.num_real_videos();
        if real == 0 || real >= self.num_videos {
            return Err(Error::InvalidConfig(format!(
                "real_fraction {} of {} videos leaves an empty class",
                self.real_fraction, self.num_videos
            )));
        }
        self.amplitudes.validate()
    }
}

/// One clip with its provenance.
#[derive(Debug, Clone)]
pub struct Sample {
    clip: Tensor,
    label: u8,
    video_id: usize,
    source_video: usize,
    family: Family,
}

impl Sample {
    /// `source_video` is the real video this clip descends from: fakes are
    /// manipulated renditions of a specific real video (same identity,
    /// different artifacts), and real clips are their own source.
    pub fn new(clip: Tensor, video_id: usize, source_video: usize, family: Family) -> Result<Self> {
        if clip.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "sample".into(),
                detail: format!("clips are [frames, height, width, channels], got {:?}", clip.shape()),
            });
        }
        if clip.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig("clip values must lie in [0,1]".into()));
        }
        let label = u8::from(family == Family::None);
        if label == 1 && source_video != video_id {
            return Err(Error::InvalidConfig(format!(
                "real video {video_id} must be its own source, got {source_video}"
            )));
        }
        Ok(Sample { clip, label, video_id, source_video, family })
    }

    pub fn clip(&self) -> &Tensor {
        &self.clip
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn video_id(&self) -> usize {
        self.video_id
    }

    /// The real video whose identity this clip shows.
    pub fn source_video(&self) -> usize {
        self.source_video
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// Model-facing view of the clip: `[frames*channels, height, width]`.
    pub fn as_input(&self) -> Result<Tensor> {
        clip_to_input(&self.clip)
    }
}

/// Permutes a `[T,H,W,C]` clip into the `[T*C, H, W]` layout the models
/// consume (channel index `t*C + c`).
pub fn clip_to_input(clip: &Tensor) -> Result<Tensor> {
    let shape = clip.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "clip_to_input".into(),
            detail: format!("expected rank-4 clip, got {:?}", shape),
        });
    }
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; clip.numel()];
    let src = clip.data();
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    let from = ((ti * h + hi) * w + wi) * c + ci;
                    let to = ((ti * c + ci) * h + hi) * w + wi;
                    out[to] = src[from];
                }
            }
        }
    }
    Tensor::new(vec![t * c, h, w], out)
}

/// Stacks per-sample inputs into a `[N, T*C, H, W]` batch tensor.
pub fn stack_inputs(samples: &[&Sample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("cannot stack an empty batch".into()));
    }
    let first = samples[0].as_input()?;
    let block = first.numel();
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(samples.len() * block);
    data.extend_from_slice(first.data());
    for s in &samples[1..] {
        let input = s.as_input()?;
        if input.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack_inputs".into(),
                detail: format!("{:?} vs {:?}", input.shape(), first.shape()),
            });
        }
        data.extend_from_slice(input.data());
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    config: DatasetConfig,
    samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    file: String,
    label: u8,
    video_id: usize,
    source_video: usize,
    family: Family,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: DatasetConfig,
    samples: Vec<ManifestRecord>,
}

const MANIFEST_VERSION: u32 = 2;

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finaliser over (seed, stream): independent per-video
    // streams from one dataset seed.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
}

/// Per-video identity: blob set plus a fixed grain layer.
struct Identity {
    base: f64,
    blobs: Vec<Blob>,
    grain: Vec<f64>,
}

fn make_identity(rng: &mut ChaCha8Rng, h: usize, w: usize, grain_amp: f64) -> Identity {
    // Identity lives in the blob *positions* and the grain pattern; the
    // scale ranges are kept narrow and the blobs smooth so that class-
    // relevant statistics (seams, high-frequency energy, global intensity)
    // are dominated by the manipulation artifacts rather than by who the
    // video depicts.
    let base = rng.random_range(0.28..0.38);
    let blobs = (0..4)
        .map(|_| {
            let sigma = rng.random_range(0.20..0.28);
            // Tie the peak to the width so every blob deposits roughly the
            // same total mass; otherwise mean intensity varies so much from
            // identity to identity that it drowns the additive artifacts.
            let mass = rng.random_range(0.055..0.075);
            Blob {
                cx: rng.random_range(0.15..0.85),
                cy: rng.random_range(0.15..0.85),
                sigma,
                amp: mass / (2.0 * std::f64::consts::PI * sigma * sigma),
            }
        })
        .collect();
    let grain = (0..h * w).map(|_| rng.random_range(-grain_amp..=grain_amp)).collect();
    Identity { base, blobs, grain }
}

/// Renders one clip of the identity with per-frame jitter; values clamped
/// to [0,1].
#[allow(clippy::too_many_arguments)]
fn render_clip(identity: &Identity, rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, c: usize, jitter: f64) -> Vec<f64> {
    let mut data = vec![0.0; t * h * w * c];
    let (mut dx, mut dy) = (0.0, 0.0);
    for ti in 0..t {
        dx += rng.random_range(-jitter..=jitter);
        dy += rng.random_range(-jitter..=jitter);
        let wobble = rng.random_range(-0.02..=0.02);
        for hi in 0..h {
            let v = (hi as f64 + 0.5) / h as f64;
            for wi in 0..w {
                let u = (wi as f64 + 0.5) / w as f64;
                let mut value = identity.base + wobble + identity.grain[hi * w + wi];
                for b in &identity.blobs {
                    let du = u - b.cx - dx;
                    let dv = v - b.cy - dy;
                    value += b.amp * (-(du * du + dv * dv) / (2.0 * b.sigma * b.sigma)).exp();
                }
                for ci in 0..c {
                    // Slight per-channel tint keeps channels distinct.
                    let tint = 1.0 - 0.05 * ci as f64;
                    let idx = ((ti * h + hi) * w + wi) * c + ci;
                    data[idx] = (value * tint).clamp(0.0, 1.0);
                }
            }
        }
    }
    data
}

fn apply_family_artifact(
    data: &mut [f64],
    family: Family,
    rng: &mut ChaCha8Rng,
    amps: &ArtifactAmplitudes,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
) {
    let at = |ti: usize, hi: usize, wi: usize, ci: usize| ((ti * h + hi) * w + wi) * c + ci;
    match family {
        Family::None => {}
        Family::BlendBoundary => {
            // Dark elliptical seam where a swapped region was composited
            // back. Real pixels never drop much below the base intensity, so
            // a under-shooting ring is a signature no other family produces.
            let cu = rng.random_range(0.4..0.6);
            let cv = rng.random_range(0.4..0.6);
            let ru = rng.random_range(0.25..0.38);
            let rv = rng.random_range(0.25..0.38);
            let band = 0.08;
            for ti in 0..t {
                for hi in 0..h {
                    let v = (hi as f64 + 0.5) / h as f64;
                    for wi in 0..w {
                        let u = (wi as f64 + 0.5) / w as f64;
                        let r = (((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2)).sqrt();
                        let ring = (-((r - 1.0) * (r - 1.0)) / (2.0 * band * band)).exp();
                        for ci in 0..c {
                            let idx = at(ti, hi, wi, ci);
                            data[idx] = (data[idx] - amps.blend_boundary * ring).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        Family::Smoothing => {
            // Box-blur a large patch, erasing the grain there, and lift it by
            // a faint glow. The glow keeps the family detectable by simple
            // pooled statistics with the same sign as the other families;
            // pure detail removal tends to be read as "extra real".
            let glow = 0.12;
            let half_h = ((h as f64) * rng.random_range(0.32..0.42)).ceil() as usize;
            let half_w = ((w as f64) * rng.random_range(0.32..0.42)).ceil() as usize;
            let ch = rng.random_range(half_h..h.saturating_sub(half_h).max(half_h + 1));
            let cw = rng.random_range(half_w..w.saturating_sub(half_w).max(half_w + 1));
            let alpha = amps.smoothing;
            for ti in 0..t {
                for ci in 0..c {
                    let frame: Vec<f64> =
                        (0..h * w).map(|p| data[at(ti, p / w, p % w, ci)]).collect();
                    for hi in ch.saturating_sub(half_h)..(ch + half_h).min(h) {
                        for wi in cw.saturating_sub(half_w)..(cw + half_w).min(w) {
                            let mut sum = 0.0;
                            let mut n = 0.0;
                            for dh in -1i64..=1 {
                                for dw in -1i64..=1 {
                                    let hh = hi as i64 + dh;
                                    let ww = wi as i64 + dw;
                                    if hh >= 0 && hh < h as i64 && ww >= 0 && ww < w as i64 {
                                        sum += frame[hh as usize * w + ww as usize];
                                        n += 1.0;
                                    }
                                }
                            }
                            let idx = at(ti, hi, wi, ci);
                            data[idx] = ((1.0 - alpha) * data[idx]
                                + alpha * (sum / n + glow))
                                .clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        Family::UpsampleChecker => {
            // Global low-amplitude checkerboard, the classic upsampling
            // fingerprint.
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let parity = if (hi + wi) % 2 == 0 { 1.0 } else { -1.0 };
                        for ci in 0..c {
                            let idx = at(ti, hi, wi, ci);
                            data[idx] =
                                (data[idx] + amps.upsample_checker * parity).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        Family::ColorShift => {
            // Uniform offset on one channel.
            let ci = rng.random_range(0..c);
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let idx = at(ti, hi, wi, ci);
                        data[idx] = (data[idx] + amps.color_shift).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

/// Generates the full dataset. Real videos come first (ids `0..num_real`);
/// each fake video is a manipulated rendition of one real video — it reuses
/// that video's identity (blobs and grain) and differs from it only by the
/// family artifact and fresh camera noise. Fakes walk the source videos in
/// order and rotate the family offset on each pass, so a source shown under
/// several manipulations gets a different family each time.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let num_real = cfg.num_real_videos();
    let (t, h, w, c) = (cfg.frames, cfg.height, cfg.width, cfg.channels);
    let mut samples = Vec::with_capacity(cfg.num_videos * cfg.clips_per_video);
    for video_id in 0..cfg.num_videos {
        let (family, source) = if video_id < num_real {
            (Family::None, video_id)
        } else {
            let j = video_id - num_real;
            let source = j % num_real;
            let family = cfg.families[(source + j / num_real) % cfg.families.len()];
            (family, source)
        };
        // The identity comes from the source video's stream, so a fake and
        // its source render the same underlying scene; everything clip-level
        // (jitter, artifact placement) comes from the video's own stream.
        let mut id_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, source as u64));
        let identity = make_identity(&mut id_rng, h, w, cfg.amplitudes.grain);
        let mut rng = if video_id == source {
            id_rng
        } else {
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, video_id as u64))
        };
        for _ in 0..cfg.clips_per_video {
            let mut data = render_clip(&identity, &mut rng, t, h, w, c, cfg.amplitudes.jitter);
            apply_family_artifact(&mut data, family, &mut rng, &cfg.amplitudes, t, h, w, c);
            let clip = Tensor::new(vec![t, h, w, c], data)?;
            samples.push(Sample::new(clip, video_id, source, family)?);
        }
    }
    Ok(Dataset { config: cfg.clone(), samples })
}

impl Dataset {
    pub fn from_samples(config: DatasetConfig, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("dataset must contain at least one sample".into()));
        }
        Ok(Dataset { config, samples })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn video_ids(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.video_id).collect()
    }

    fn indices_of(&self, label: u8) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].label == label).collect()
    }

    /// All clips stacked into a model batch plus labels and video ids, in
    /// sample order.
    pub fn stacked(&self) -> Result<(Tensor, Vec<u8>, Vec<usize>)> {
        let refs: Vec<&Sample> = self.samples.iter().collect();
        let x = stack_inputs(&refs)?;
        let labels = self.samples.iter().map(|s| s.label).collect();
        let videos = self.samples.iter().map(|s| s.video_id).collect();
        Ok((x, labels, videos))
    }

    /// Canonical manifest hash: covers config, sample metadata, and tensor
    /// bytes (via per-file digests).
    pub fn manifest_hash(&self) -> Result<String> {
        let manifest = self.manifest()?;
        let bytes = serde_json::to_vec(&manifest)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    fn manifest(&self) -> Result<Manifest> {
        let records = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut bytes = Vec::new();
                s.clip.write_to(&mut bytes)?;
                Ok(ManifestRecord {
                    file: format!("clip_{i:06}.tensor"),
                    label: s.label,
                    video_id: s.video_id,
                    source_video: s.source_video,
                    family: s.family,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { format_version: MANIFEST_VERSION, config: self.config.clone(), samples: records })
    }

    /// Writes `manifest.json` plus one tensor file per clip.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest()?;
        for (record, sample) in manifest.samples.iter().zip(&self.samples) {
            sample.clip.save(&dir.join(&record.file))?;
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let json = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Artifact(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&json)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported manifest format_version {}",
                manifest.format_version
            )));
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for record in &manifest.samples {
            let clip = Tensor::load(&dir.join(&record.file))?;
            let mut bytes = Vec::new();
            clip.write_to(&mut bytes)?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if digest != record.sha256 {
                return Err(Error::Artifact(format!("checksum mismatch for {}", record.file)));
            }
            let sample = Sample::new(clip, record.video_id, record.source_video, record.family)?;
            if sample.label != record.label {
                return Err(Error::Artifact(format!(
                    "label {} inconsistent with family {} in {}",
                    record.label, record.family, record.file
                )));
            }
            samples.push(sample);
        }
        Dataset::from_samples(manifest.config, samples)
    }

    /// Splits by held-out family: train keeps the other families plus most
    /// real videos; test gets every held-out fake plus a disjoint slice of
    /// the real videos.
    pub fn split_leave_one_family_out(&self, held_out: Family) -> Result<(Dataset, Dataset)> {
        if held_out == Family::None {
            return Err(Error::InvalidConfig("cannot hold out the real class".into()));
        }
        if !self.samples.iter().any(|s| s.family == held_out) {
            return Err(Error::InvalidConfig(format!("family {held_out} not present in dataset")));
        }
        let family_index =
            self.config.families.iter().position(|f| *f == held_out).unwrap_or(0);
        let num_families = self.config.families.len().max(1);
        let real_videos: Vec<usize> = {
            let mut v: Vec<usize> = self
                .samples
                .iter()
                .filter(|s| s.label == 1)
                .map(|s| s.video_id)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            v.sort_unstable();
            v
        };
        let test_reals: BTreeSet<usize> = real_videos
            .iter()
            .enumerate()
            .filter(|(i, _)| i % num_families == family_index)
            .map(|(_, &id)| id)
            .collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &self.samples {
            let to_test = if s.label == 1 { test_reals.contains(&s.video_id) } else { s.family == held_out };
            if to_test {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        Ok((
            Dataset::from_samples(self.config.clone(), train)?,
            Dataset::from_samples(self.config.clone(), test)?,
        ))
    }
}

/// Uniformly samples (with replacement) `batch_size/2` fake clips and pairs
/// each with a clip of its source real video, so row `i` of the real half
/// shows the same identity as row `i` of the fake half. When a fake's source
/// is absent (e.g. after a split), an arbitrary real clip stands in.
pub fn make_paired_batch(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<PairedBatch> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::InvalidConfig(format!("batch_size must be even and positive, got {batch_size}")));
    }
    let reals = dataset.indices_of(1);
    let fakes = dataset.indices_of(0);
    if reals.is_empty() {
        return Err(Error::ClassExhausted("no real samples in dataset".into()));
    }
    if fakes.is_empty() {
        return Err(Error::ClassExhausted("no fake samples in dataset".into()));
    }
    let mut real_by_video: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in &reals {
        real_by_video.entry(dataset.samples[i].video_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = batch_size / 2;
    let mut real_refs = Vec::with_capacity(half);
    let mut fake_refs = Vec::with_capacity(half);
    for _ in 0..half {
        let fake = &dataset.samples[fakes[rng.random_range(0..fakes.len())]];
        let partner_pool = real_by_video.get(&fake.source_video).map_or(&reals, |v| v);
        let real = &dataset.samples[partner_pool[rng.random_range(0..partner_pool.len())]];
        real_refs.push(real);
        fake_refs.push(fake);
    }
    PairedBatch::new(stack_inputs(&real_refs)?, stack_inputs(&fake_refs)?)
}
