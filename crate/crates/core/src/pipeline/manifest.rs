//! On-disk description of a pre-processed video.
//!
//! The manifest is JSON. Every tensor it references is a TFT1 file whose
//! path is relative to the manifest's directory:
//!
//! ```text
//! latents/f{frame}/t{level}.tft        latent of `frame` at `level` (0..=steps)
//! tokens/t{level}/l{layer}/f{frame}.tft  h × w × d tokens at `level` (1..=steps)
//! ```
//!
//! Levels index the inference grid, level 0 being the clean latent. The
//! training timestep and cumulative signal fraction of each level are stored
//! alongside.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{TokenGrid, TokenSite};
use crate::diffusion::{Schedule, ScheduleConfig, ToyConfig, ToyDenoiser};
use crate::error::{Error, Result};
use crate::tensors::{load_tensor, Tensor};

pub const MANIFEST_FORMAT: &str = "tokenflow-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

/// The network the tokens were extracted from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    /// The built-in toy denoiser; editing is possible.
    Toy { config: ToyConfig },
    /// Features exported from an external model; analysis only.
    External { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub format: String,
    pub n_frames: usize,
    /// `[C, H, W]` of every latent.
    pub latent_dims: Vec<usize>,
    pub token_grid: GridSpec,
    pub layers: usize,
    pub steps: usize,
    /// Training timestep of each level, `steps + 1` entries.
    pub timesteps: Vec<usize>,
    /// Cumulative signal fraction of each level, `steps + 1` entries.
    pub alphas_bar: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    pub model: ModelSpec,
    pub token_site: TokenSite,
    pub seed: u64,
    pub keyframe_interval: usize,
    pub guidance_invert: f64,
    pub guidance_sample: f64,
    pub source_prompt: String,
    pub target_prompt: String,
    /// `latents[frame][level]`.
    pub latents: Vec<Vec<String>>,
    /// `tokens[level − 1][layer][frame]`.
    pub tokens: Vec<Vec<Vec<String>>>,
    #[serde(skip)]
    root: PathBuf,
}

pub fn latent_rel_path(frame: usize, level: usize) -> String {
    format!("latents/f{frame}/t{level}.tft")
}

pub fn token_rel_path(level: usize, layer: usize, frame: usize) -> String {
    format!("tokens/t{level}/l{layer}/f{frame}.tft")
}

fn manifest_err(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

impl VideoManifest {
    /// Manifest with the standard file layout under `root`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_layout(
        root: impl Into<PathBuf>,
        n_frames: usize,
        latent_dims: Vec<usize>,
        token_grid: GridSpec,
        layers: usize,
        schedule: &Schedule,
        schedule_config: Option<ScheduleConfig>,
        model: ModelSpec,
    ) -> Self {
        let steps = schedule.steps();
        Self {
            format: MANIFEST_FORMAT.to_string(),
            n_frames,
            latent_dims,
            token_grid,
            layers,
            steps,
            timesteps: schedule.timesteps().to_vec(),
            alphas_bar: schedule.alphas_bar().to_vec(),
            schedule: schedule_config,
            model,
            token_site: TokenSite::Output,
            seed: 0,
            keyframe_interval: 8,
            guidance_invert: 1.0,
            guidance_sample: 7.5,
            source_prompt: String::new(),
            target_prompt: String::new(),
            latents: (0..n_frames)
                .map(|f| (0..=steps).map(|t| latent_rel_path(f, t)).collect())
                .collect(),
            tokens: (1..=steps)
                .map(|t| {
                    (0..layers)
                        .map(|l| (0..n_frames).map(|f| token_rel_path(t, l, f)).collect())
                        .collect()
                })
                .collect(),
            root: root.into(),
        }
    }

    /// Directory that relative paths resolve against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    /// Reads `path` (a manifest file, or a directory holding
    /// `manifest.json`) and checks its internal consistency. Referenced
    /// files are not opened; see [`VideoManifest::verify_files`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: VideoManifest = serde_json::from_str(&text).map_err(|e| Error::File {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        m.validate()?;
        Ok(m)
    }

    /// Writes `manifest.json` into [`VideoManifest::root`].
    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(manifest_err(format!(
                "unsupported format {:?}, expected {MANIFEST_FORMAT:?}",
                self.format
            )));
        }
        if self.n_frames == 0 {
            return Err(manifest_err("no frames"));
        }
        if self.latent_dims.len() != 3 || self.latent_dims.contains(&0) {
            return Err(manifest_err(format!(
                "latent_dims must be three positive sizes, got {:?}",
                self.latent_dims
            )));
        }
        let g = self.token_grid;
        if g.h == 0 || g.w == 0 || g.dim == 0 {
            return Err(manifest_err("token grid sizes must be positive"));
        }
        if self.timesteps.len() != self.steps + 1 || self.alphas_bar.len() != self.steps + 1 {
            return Err(manifest_err(format!(
                "{} steps need {} timesteps and alphas_bar entries",
                self.steps,
                self.steps + 1
            )));
        }
        Schedule::from_parts(self.timesteps.clone(), self.alphas_bar.clone())
            .map_err(|e| manifest_err(e.to_string()))?;
        if self.keyframe_interval == 0 {
            return Err(manifest_err("keyframe_interval must be positive"));
        }
        for (name, g) in [
            ("guidance_invert", self.guidance_invert),
            ("guidance_sample", self.guidance_sample),
        ] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(manifest_err(format!("{name} must be finite and >= 0")));
            }
        }
        if self.latents.len() != self.n_frames
            || self.latents.iter().any(|f| f.len() != self.steps + 1)
        {
            return Err(manifest_err(format!(
                "latents must list {} levels for each of {} frames",
                self.steps + 1,
                self.n_frames
            )));
        }
        if self.tokens.len() != self.steps
            || self
                .tokens
                .iter()
                .any(|t| t.len() != self.layers || t.iter().any(|l| l.len() != self.n_frames))
        {
            return Err(manifest_err(format!(
                "tokens must list {} levels x {} layers x {} frames",
                self.steps, self.layers, self.n_frames
            )));
        }
        if let ModelSpec::Toy { config } = &self.model {
            let (c, h, w) = (
                self.latent_dims[0],
                self.latent_dims[1],
                self.latent_dims[2],
            );
            if config.channels != c
                || config.dim != g.dim
                || config.layers != self.layers
                || h != g.h * config.patch
                || w != g.w * config.patch
            {
                return Err(manifest_err(
                    "toy model config disagrees with latent and token sizes",
                ));
            }
        }
        Ok(())
    }

    /// Opens every referenced tensor and checks its shape.
    pub fn verify_files(&self) -> Result<()> {
        for f in 0..self.n_frames {
            for t in 0..=self.steps {
                self.load_latent(f, t)?;
            }
        }
        for t in 1..=self.steps {
            for l in 0..self.layers {
                for f in 0..self.n_frames {
                    self.load_tokens(t, l, f)?;
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::from_parts(self.timesteps.clone(), self.alphas_bar.clone())
            .expect("validated manifest")
    }

    pub fn latent_path(&self, frame: usize, level: usize) -> PathBuf {
        self.root.join(&self.latents[frame][level])
    }

    pub fn token_path(&self, level: usize, layer: usize, frame: usize) -> PathBuf {
        self.root.join(&self.tokens[level - 1][layer][frame])
    }

    pub fn load_latent(&self, frame: usize, level: usize) -> Result<Tensor> {
        self.check_frame(frame)?;
        if level > self.steps {
            return Err(Error::arg(format!(
                "level {level} beyond {} steps",
                self.steps
            )));
        }
        let path = self.latent_path(frame, level);
        let t = load_tensor(&path)?;
        if t.dims() != self.latent_dims {
            return Err(Error::File {
                path,
                msg: format!(
                    "latent {:?}, manifest says {:?}",
                    t.dims(),
                    self.latent_dims
                ),
            });
        }
        Ok(t)
    }

    /// Original-video tokens of `frame` at `level` (1..=steps) and `layer`.
    pub fn load_tokens(&self, level: usize, layer: usize, frame: usize) -> Result<TokenGrid> {
        self.check_frame(frame)?;
        if level == 0 || level > self.steps {
            return Err(Error::arg(format!(
                "token level {level} outside 1..={}",
                self.steps
            )));
        }
        if layer >= self.layers {
            return Err(Error::arg(format!(
                "layer {layer} outside 0..{}",
                self.layers
            )));
        }
        let path = self.token_path(level, layer, frame);
        let t = load_tensor(&path)?;
        let g = self.token_grid;
        if t.dims() != [g.h, g.w, g.dim] {
            return Err(Error::File {
                path,
                msg: format!(
                    "tokens {:?}, manifest says [{}, {}, {}]",
                    t.dims(),
                    g.h,
                    g.w,
                    g.dim
                ),
            });
        }
        TokenGrid::from_hwd(frame, layer, self.timesteps[level], t)
    }

    /// Tokens of every frame at (`level`, `layer`).
    pub fn load_layer(&self, level: usize, layer: usize) -> Result<Vec<TokenGrid>> {
        (0..self.n_frames)
            .map(|f| self.load_tokens(level, layer, f))
            .collect()
    }

    /// The toy denoiser this manifest was produced with.
    pub fn toy_model(&self) -> Result<ToyDenoiser> {
        match &self.model {
            ModelSpec::Toy { config } => ToyDenoiser::new(config.clone()),
            ModelSpec::External { name } => Err(manifest_err(format!(
                "features come from external model {name:?}; editing needs the toy model"
            ))),
        }
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.n_frames {
            return Err(Error::arg(format!(
                "frame {frame} outside 0..{}",
                self.n_frames
            )));
        }
        Ok(())
    }
}
