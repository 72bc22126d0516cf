//! The 7-kind x 5-severity distortion suite used for robustness sweeps.
//!
//! Every kind has a strictly increasing parameter table over severities
//! 1..=5, outputs stay in [0,1], and the stochastic kinds (noise, block
//! placement) are deterministic per seed. `jpeg_quant` is a block-DCT
//! quantisation proxy, not a bit-exact codec.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Saturation,
    Contrast,
    BlockOcclusion,
    GaussianNoise,
    GaussianBlur,
    Pixelation,
    JpegQuant,
}

pub const ALL_DISTORTION_KINDS: [DistortionKind; 7] = [
    DistortionKind::Saturation,
    DistortionKind::Contrast,
    DistortionKind::BlockOcclusion,
    DistortionKind::GaussianNoise,
    DistortionKind::GaussianBlur,
    DistortionKind::Pixelation,
    DistortionKind::JpegQuant,
];

impl DistortionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistortionKind::Saturation => "saturation",
            DistortionKind::Contrast => "contrast",
            DistortionKind::BlockOcclusion => "block_occlusion",
            DistortionKind::GaussianNoise => "gaussian_noise",
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::Pixelation => "pixelation",
            DistortionKind::JpegQuant => "jpeg_quant",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_DISTORTION_KINDS
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown distortion kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub severity: u8,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidConfig(format!(
                "distortion severity must be 1..=5, got {severity}"
            )));
        }
        Ok(DistortionSpec { kind, severity })
    }

    pub fn name(&self) -> String {
        format!("{}_s{}", self.kind, self.severity)
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Operational parameter per (kind, severity); strictly increasing in
/// severity for every kind.
pub fn severity_parameter(kind: DistortionKind, severity: u8) -> Result<f64> {
    if !(1..=5).contains(&severity) {
        return Err(Error::InvalidConfig(format!("distortion severity must be 1..=5, got {severity}")));
    }
    let table: [f64; 5] = match kind {
        // Fraction of dynamic range removed about mid-gray.
        DistortionKind::Saturation => [0.10, 0.25, 0.40, 0.55, 0.70],
        // Fraction of contrast removed about the clip mean.
        DistortionKind::Contrast => [0.15, 0.30, 0.45, 0.60, 0.75],
        // Occluded square side as a fraction of min(H, W).
        DistortionKind::BlockOcclusion => [0.125, 0.1875, 0.25, 0.3125, 0.375],
        // Additive noise sigma.
        DistortionKind::GaussianNoise => [0.02, 0.04, 0.08, 0.12, 0.18],
        // Blur kernel sigma in pixels.
        DistortionKind::GaussianBlur => [0.5, 0.8, 1.2, 1.8, 2.5],
        // Downsampling factor.
        DistortionKind::Pixelation => [2.0, 3.0, 4.0, 6.0, 8.0],
        // DCT coefficient quantisation step.
        DistortionKind::JpegQuant => [0.02, 0.05, 0.10, 0.18, 0.30],
    };
    Ok(table[(severity - 1) as usize])
}

struct ClipView<'a> {
    data: &'a mut [f64],
    t: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl<'a> ClipView<'a> {
    fn idx(&self, ti: usize, hi: usize, wi: usize, ci: usize) -> usize {
        ((ti * self.h + hi) * self.w + wi) * self.c + ci
    }

    fn plane(&self, ti: usize, ci: usize) -> Vec<f64> {
        (0..self.h * self.w).map(|p| self.data[self.idx(ti, p / self.w, p % self.w, ci)]).collect()
    }

    fn write_plane(&mut self, ti: usize, ci: usize, plane: &[f64]) {
        for p in 0..self.h * self.w {
            let i = self.idx(ti, p / self.w, p % self.w, ci);
            self.data[i] = plane[p];
        }
    }

    fn for_each_plane(&mut self, mut f: impl FnMut(&mut Vec<f64>, usize, usize)) {
        for ti in 0..self.t {
            for ci in 0..self.c {
                let mut plane = self.plane(ti, ci);
                f(&mut plane, self.h, self.w);
                self.write_plane(ti, ci, &plane);
            }
        }
    }
}

/// Applies one distortion to a `[T,H,W,C]` clip. Output values are clamped
/// back into [0,1].
pub fn apply_distortion(clip: &Tensor, spec: &DistortionSpec, seed: u64) -> Result<Tensor> {
    DistortionSpec::new(spec.kind, spec.severity)?;
    let shape = clip.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "apply_distortion".into(),
            detail: format!("expected a [T,H,W,C] clip, got {:?}", shape),
        });
    }
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let param = severity_parameter(spec.kind, spec.severity)?;
    let mut data = clip.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut view = ClipView { data: &mut data, t, h, w, c };

    match spec.kind {
        DistortionKind::Saturation => {
            let keep = 1.0 - param;
            for v in view.data.iter_mut() {
                *v = 0.5 + keep * (*v - 0.5);
            }
        }
        DistortionKind::Contrast => {
            let mean = view.data.iter().sum::<f64>() / view.data.len() as f64;
            let keep = 1.0 - param;
            for v in view.data.iter_mut() {
                *v = mean + keep * (*v - mean);
            }
        }
        DistortionKind::BlockOcclusion => {
            let side = ((h.min(w) as f64) * param).round().max(1.0) as usize;
            let side = side.min(h).min(w);
            let top = rng.random_range(0..=h - side);
            let left = rng.random_range(0..=w - side);
            for ti in 0..t {
                for hi in top..top + side {
                    for wi in left..left + side {
                        for ci in 0..c {
                            let i = view.idx(ti, hi, wi, ci);
                            view.data[i] = 0.0;
                        }
                    }
                }
            }
        }
        DistortionKind::GaussianNoise => {
            for v in view.data.iter_mut() {
                // Box-Muller keeps us on the crates we already have.
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v += param * z;
            }
        }
        DistortionKind::GaussianBlur => {
            let sigma = param;
            let radius = ((3.0 * sigma).ceil() as usize).clamp(1, 8);
            let mut kernel: Vec<f64> =
                (0..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
            let norm: f64 = kernel[0] + 2.0 * kernel[1..].iter().sum::<f64>();
            for k in kernel.iter_mut() {
                *k /= norm;
            }
            view.for_each_plane(|plane, h, w| {
                let blur_axis = |src: &[f64], len: usize, stride: usize, lanes: usize, lane_stride: usize| {
                    let mut out = src.to_vec();
                    for lane in 0..lanes {
                        for i in 0..len {
                            let mut acc = kernel[0] * src[lane * lane_stride + i * stride];
                            for (r, &k) in kernel.iter().enumerate().skip(1) {
                                let lo = i.saturating_sub(r);
                                let hi = (i + r).min(len - 1);
                                acc += k * (src[lane * lane_stride + lo * stride]
                                    + src[lane * lane_stride + hi * stride]);
                            }
                            out[lane * lane_stride + i * stride] = acc;
                        }
                    }
                    out
                };
                // Horizontal pass (along w), then vertical (along h), with
                // replicate padding at the borders.
                let tmp = blur_axis(plane, w, 1, h, w);
                *plane = blur_axis(&tmp, h, w, w, 1);
            });
        }
        DistortionKind::Pixelation => {
            let factor = param as usize;
            view.for_each_plane(|plane, h, w| {
                for bh in (0..h).step_by(factor) {
                    for bw in (0..w).step_by(factor) {
                        let h_end = (bh + factor).min(h);
                        let w_end = (bw + factor).min(w);
                        let mut sum = 0.0;
                        let mut n = 0.0;
                        for hi in bh..h_end {
                            for wi in bw..w_end {
                                sum += plane[hi * w + wi];
                                n += 1.0;
                            }
                        }
                        let mean = sum / n;
                        for hi in bh..h_end {
                            for wi in bw..w_end {
                                plane[hi * w + wi] = mean;
                            }
                        }
                    }
                }
            });
        }
        DistortionKind::JpegQuant => {
            let step = param;
            view.for_each_plane(|plane, h, w| {
                for bh in (0..h).step_by(8) {
                    for bw in (0..w).step_by(8) {
                        let bh_len = (h - bh).min(8);
                        let bw_len = (w - bw).min(8);
                        let mut tile = vec![0.0; bh_len * bw_len];
                        for hi in 0..bh_len {
                            for wi in 0..bw_len {
                                tile[hi * bw_len + wi] = plane[(bh + hi) * w + bw + wi];
                            }
                        }
                        let coeffs = dct2(&tile, bh_len, bw_len);
                        let quantised: Vec<f64> =
                            coeffs.iter().map(|&v| step * (v / step).round()).collect();
                        let tile = idct2(&quantised, bh_len, bw_len);
                        for hi in 0..bh_len {
                            for wi in 0..bw_len {
                                plane[(bh + hi) * w + bw + wi] = tile[hi * bw_len + wi];
                            }
                        }
                    }
                }
            });
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(shape.to_vec(), data)
}

/// Orthonormal DCT-II basis matrix for size `n` (row k, column i).
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] =
                scale * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n as f64)).cos();
        }
    }
    m
}

fn dct2(tile: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let dr = dct_matrix(rows);
    let dc = dct_matrix(cols);
    // C = Dr * X * Dc^T
    let mut tmp = vec![0.0; rows * cols];
    for k in 0..rows {
        for j in 0..cols {
            tmp[k * cols + j] = (0..rows).map(|i| dr[k * rows + i] * tile[i * cols + j]).sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for k in 0..rows {
        for l in 0..cols {
            out[k * cols + l] = (0..cols).map(|j| tmp[k * cols + j] * dc[l * cols + j]).sum();
        }
    }
    out
}

fn idct2(coeffs: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let dr = dct_matrix(rows);
    let dc = dct_matrix(cols);
    // X = Dr^T * C * Dc
    let mut tmp = vec![0.0; rows * cols];
    for i in 0..rows {
        for l in 0..cols {
            tmp[i * cols + l] = (0..rows).map(|k| dr[k * rows + i] * coeffs[k * cols + l]).sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..cols).map(|l| tmp[i * cols + l] * dc[l * cols + j]).sum();
        }
    }
    out
}
