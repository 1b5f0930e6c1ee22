//! Reconstruction and temporal-consistency metrics, and report writers.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::attention::TokenGrid;
use crate::diffusion::patchify;
use crate::error::{Error, Result};
use crate::evalkit::synth::SyntheticVideo;
use crate::tensors::Tensor;

/// Peak value for latents normalized to `[0, 1]`.
pub const PSNR_PEAK: f64 = 1.0;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.is_empty() {
        return Err(Error::arg("mse of empty tensors"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `10 · log10(peak² / mse)` in dB with peak 1.0. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PSNR_PEAK * PSNR_PEAK / m).log10())
}

/// PSNR over whole videos: the MSE is pooled over all frames.
pub fn video_psnr(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("videos differ in length or are empty"));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += mse(x, y)?;
    }
    let m = total / a.len() as f64;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PSNR_PEAK * PSNR_PEAK / m).log10())
}

/// Mean over ground-truth trajectories of the per-trajectory token variance.
///
/// A trajectory is the sequence of tokens showing one canvas cell. Its
/// variance is the population variance over its tokens, averaged over
/// feature dimensions.
pub fn token_trajectory_variance(grids: &[TokenGrid], video: &SyntheticVideo) -> Result<f64> {
    if grids.len() != video.n() {
        return Err(Error::shape(format!(
            "{} token grids for a {}-frame video",
            grids.len(),
            video.n()
        )));
    }
    if grids.iter().any(|g| g.h != video.gh || g.w != video.gw) {
        return Err(Error::shape("token grids do not match the video's grid"));
    }
    let d = grids[0].dim();
    let trajectories = video.trajectories();
    if trajectories.is_empty() {
        return Err(Error::arg("video has no trajectories"));
    }
    let mut sum = 0.0;
    let mut mean = vec![0.0f64; d];
    for traj in &trajectories {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for &(f, p) in traj {
            for (m, &v) in mean.iter_mut().zip(grids[f].token(p)) {
                *m += v as f64;
            }
        }
        let len = traj.len() as f64;
        mean.iter_mut().for_each(|m| *m /= len);
        let mut var = 0.0;
        for &(f, p) in traj {
            for (m, &v) in mean.iter().zip(grids[f].token(p)) {
                var += (v as f64 - m).powi(2);
            }
        }
        sum += var / (len * d as f64);
    }
    Ok(sum / trajectories.len() as f64)
}

/// Per-frame difference `edited − original`: the part of each frame the edit
/// introduced, free of the input video's own per-frame noise.
pub fn edit_residual(edited: &[Tensor], original: &[Tensor]) -> Result<Vec<Tensor>> {
    if edited.len() != original.len() {
        return Err(Error::shape(format!(
            "{} edited frames for {} originals",
            edited.len(),
            original.len()
        )));
    }
    edited.iter().zip(original).map(|(e, o)| e.sub(o)).collect()
}

/// Latents cut into patch tokens, one grid per frame.
pub fn latent_tokens(latents: &[Tensor], patch: usize) -> Result<Vec<TokenGrid>> {
    latents
        .iter()
        .enumerate()
        .map(|(f, x)| {
            let &[_, h, w] = x.dims() else {
                return Err(Error::shape("latents must be C×H×W"));
            };
            TokenGrid::new(f, 0, 0, h / patch, w / patch, patchify(x, patch)?)
        })
        .collect()
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// `None` for whole-video values, written as `all`.
    pub frame: Option<usize>,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(frame: Option<usize>, metric: impl Into<String>, value: f64) -> Self {
        Self {
            frame,
            metric: metric.into(),
            value,
        }
    }
}

/// CSV with header `frame,metric,value`. Infinite PSNR is written as `inf`.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("frame,metric,value\n");
    for r in rows {
        let frame = r.frame.map_or_else(|| "all".to_string(), |f| f.to_string());
        out.push_str(&format!("{frame},{},{}\n", r.metric, r.value));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6) of an `h × w × k` image with values in `[0, 1]`.
/// Channels beyond three are dropped and missing ones are black.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, k] = img.dims() else {
        return Err(Error::shape(format!(
            "image must be h×w×k, got {:?}",
            img.dims()
        )));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in img.data().chunks(k.max(1)) {
        for c in 0..3 {
            let v = px
                .get(c)
                .copied()
                .filter(|v| c < k && v.is_finite())
                .unwrap_or(0.0);
            let v = v.clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_ppm(img)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
