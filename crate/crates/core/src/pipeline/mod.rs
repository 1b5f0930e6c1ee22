//! End-to-end editing: inversion and token extraction, per-step keyframe
//! editing with extended attention, and propagation of the edited tokens to
//! every frame through correspondences of the original video.

mod manifest;

pub use manifest::{
    latent_rel_path, token_rel_path, GridSpec, ModelSpec, VideoManifest, MANIFEST_FILE,
    MANIFEST_FORMAT,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attention::{
    Branch, HookSite, Hooks, TokenGrid, TokenRecorder, TokenReplacer, TokenSite,
};
use crate::correspondence::{nn_field_blocked_with, NNField, Tiles};
use crate::diffusion::{
    combine_guidance, ddim_step, invert_guided, AttentionMode, Conditioning, Direction, Schedule,
    ScheduleConfig, ToyDenoiser,
};
use crate::error::{Error, Result};
use crate::propagation::{tokenflow_propagate, BlendWeights, FrameFields, TBase};
use crate::tensors::{load_tensor, save_tensor, Rng, Tensor};

/// Settings recorded in the manifest at pre-processing time.
#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub schedule: ScheduleConfig,
    pub source_prompt: String,
    pub target_prompt: String,
    pub seed: u64,
    pub keyframe_interval: usize,
    pub guidance_invert: f64,
    pub guidance_sample: f64,
    pub token_site: TokenSite,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            source_prompt: String::new(),
            target_prompt: String::new(),
            seed: 0,
            keyframe_interval: 8,
            guidance_invert: 1.0,
            guidance_sample: 7.5,
            token_site: TokenSite::Output,
        }
    }
}

/// Tokens of every layer from one conditional forward pass at `level`.
pub fn extract_tokens(
    model: &ToyDenoiser,
    latent: &Tensor,
    frame: usize,
    timestep: usize,
    cond: &Conditioning,
    site: TokenSite,
) -> Result<Vec<TokenGrid>> {
    let (gh, gw) = model.grid_size(latent.dims())?;
    let rec = TokenRecorder::new();
    model.forward_frames(
        &[latent],
        &[frame],
        timestep,
        cond,
        Branch::Cond,
        AttentionMode::PerFrame,
        &Hooks::observe(&rec, site),
    )?;
    (0..model.layers())
        .map(|layer| {
            let t = rec
                .get(HookSite {
                    frame,
                    layer,
                    branch: Branch::Cond,
                })
                .expect("every layer fires its hook");
            TokenGrid::new(frame, layer, timestep, gh, gw, t)
        })
        .collect()
}

/// Inverts every frame, stores the trajectories and the original-video
/// tokens of every layer at levels `1..=steps` under `out_dir`, and writes
/// the manifest there.
pub fn preprocess(
    frames: &[Tensor],
    model: &ToyDenoiser,
    opts: &PreprocessOptions,
    out_dir: &Path,
) -> Result<VideoManifest> {
    if frames.len() < 2 {
        return Err(Error::arg(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    let dims = frames[0].dims().to_vec();
    if let Some(f) = frames.iter().position(|f| f.dims() != dims) {
        return Err(Error::shape(format!(
            "frame {f} has dims {:?}, frame 0 has {dims:?}",
            frames[f].dims()
        )));
    }
    let (gh, gw) = model.grid_size(&dims)?;
    if opts.keyframe_interval == 0 {
        return Err(Error::arg("keyframe interval must be positive"));
    }
    let schedule = Schedule::new(&opts.schedule)?;
    let mut manifest = VideoManifest::with_layout(
        out_dir,
        frames.len(),
        dims,
        GridSpec {
            h: gh,
            w: gw,
            dim: model.dim(),
        },
        model.layers(),
        &schedule,
        Some(opts.schedule.clone()),
        ModelSpec::Toy {
            config: model.config().clone(),
        },
    );
    manifest.token_site = opts.token_site;
    manifest.seed = opts.seed;
    manifest.keyframe_interval = opts.keyframe_interval;
    manifest.guidance_invert = opts.guidance_invert;
    manifest.guidance_sample = opts.guidance_sample;
    manifest.source_prompt = opts.source_prompt.clone();
    manifest.target_prompt = opts.target_prompt.clone();
    manifest.validate()?;

    let cond = model.embed_prompt(&opts.source_prompt);
    let null = model.null_cond();
    frames
        .par_iter()
        .enumerate()
        .try_for_each(|(f, x0)| -> Result<()> {
            let tr = invert_guided(f, x0, model, &schedule, &cond, &null, opts.guidance_invert)?;
            for (level, latent) in tr.latents.iter().enumerate() {
                save_tensor(latent, manifest.latent_path(f, level))?;
            }
            for level in 1..=schedule.steps() {
                let grids = extract_tokens(
                    model,
                    &tr.latents[level],
                    f,
                    schedule.timestep(level),
                    &cond,
                    opts.token_site,
                )
                .map_err(|e| e.at_step(level, f, None))?;
                for g in grids {
                    save_tensor(&g.to_hwd(), manifest.token_path(level, g.layer, f))?;
                }
            }
            Ok(())
        })?;
    manifest.save()?;
    Ok(manifest)
}

/// Keyframes `{r, r + interval, …} ∩ [0, n)` for an offset `r` drawn
/// uniformly from `[0, interval)`. An interval longer than the clip is
/// clamped to `n`.
pub fn sample_keyframes(rng: &mut Rng, n: usize, interval: usize) -> Result<Vec<usize>> {
    if n == 0 || interval == 0 {
        return Err(Error::arg(format!(
            "keyframes need n >= 1 and interval >= 1, got n={n} interval={interval}"
        )));
    }
    let interval = interval.min(n);
    let r = rng.below(interval as u64) as usize;
    Ok((r..n).step_by(interval).collect())
}

/// One denoiser evaluation requested by the editing loop.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseRequest<'a> {
    pub latents: &'a [&'a Tensor],
    pub frames: &'a [usize],
    pub level: usize,
    pub timestep: usize,
    pub mode: AttentionMode,
}

/// Image-editing technique applied inside the video loop: turns the current
/// latents into the noise prediction used for the DDIM step. Implementations
/// must be deterministic and must forward `hooks` to every forward pass.
pub trait EditingTechnique: Sync {
    fn name(&self) -> String;

    fn eps(
        &self,
        model: &ToyDenoiser,
        req: &DenoiseRequest,
        source: &Conditioning,
        target: &Conditioning,
        hooks: &Hooks,
    ) -> Result<Vec<Tensor>>;
}

/// Plain classifier-free guided denoising on the target condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptSwap {
    pub guidance: f64,
}

impl EditingTechnique for PromptSwap {
    fn name(&self) -> String {
        "prompt-swap".to_string()
    }

    fn eps(
        &self,
        model: &ToyDenoiser,
        req: &DenoiseRequest,
        _source: &Conditioning,
        target: &Conditioning,
        hooks: &Hooks,
    ) -> Result<Vec<Tensor>> {
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::arg(format!(
                "guidance {} must be finite and >= 0",
                self.guidance
            )));
        }
        let run = |cond: &Conditioning, branch| {
            model.forward_frames(
                req.latents,
                req.frames,
                req.timestep,
                cond,
                branch,
                req.mode,
                hooks,
            )
        };
        if self.guidance == 1.0 {
            return run(target, Branch::Cond);
        }
        let uncond = run(&model.null_cond(), Branch::Uncond)?;
        let cond = run(target, Branch::Cond)?;
        uncond
            .iter()
            .zip(&cond)
            .map(|(u, c)| combine_guidance(u, c, self.guidance))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct EditOptions {
    pub tiles: Tiles,
    /// Directory where nearest-neighbour fields are stored and reused.
    pub nn_cache: Option<PathBuf>,
    /// Directory where the edited keyframe tokens of every step are written.
    pub tbase_dir: Option<PathBuf>,
}

pub struct EditSession {
    pub manifest: VideoManifest,
    pub model: ToyDenoiser,
    pub technique: Box<dyn EditingTechnique>,
    pub source: Conditioning,
    pub target: Conditioning,
    pub rng: Rng,
    pub options: EditOptions,
}

impl EditSession {
    /// Prompt-swap editing with the prompts, guidance and seed of `manifest`.
    ///
    /// A target prompt equal to the source prompt is the identity edit: it
    /// samples at the inversion guidance and so retraces the inverted
    /// trajectory instead of sharpening toward the prompt.
    pub fn new(manifest: VideoManifest) -> Result<Self> {
        let model = manifest.toy_model()?;
        let source = model.embed_prompt(&manifest.source_prompt);
        let target = model.embed_prompt(&manifest.target_prompt);
        let guidance = if target == source {
            manifest.guidance_invert
        } else {
            manifest.guidance_sample
        };
        Ok(Self {
            technique: Box::new(PromptSwap { guidance }),
            rng: Rng::new(manifest.seed),
            source,
            target,
            model,
            manifest,
            options: EditOptions::default(),
        })
    }

    /// The identity edit toward the source prompt, which reconstructs the
    /// video.
    pub fn reconstruction(mut manifest: VideoManifest) -> Result<Self> {
        manifest.target_prompt = manifest.source_prompt.clone();
        Self::new(manifest)
    }

    pub fn with_technique(mut self, technique: Box<dyn EditingTechnique>) -> Self {
        self.technique = technique;
        self
    }

    pub fn with_options(mut self, options: EditOptions) -> Self {
        self.options = options;
        self
    }
}

/// Edited keyframe tokens of one step, by (branch, layer).
#[derive(Clone, Debug)]
pub struct BaseTokens {
    pub level: usize,
    pub keyframes: Vec<usize>,
    pub bases: BTreeMap<(Branch, usize), TBase>,
}

fn branch_dir(b: Branch) -> &'static str {
    match b {
        Branch::Cond => "cond",
        Branch::Uncond => "uncond",
    }
}

impl BaseTokens {
    pub fn get(&self, branch: Branch, layer: usize) -> Option<&TBase> {
        self.bases.get(&(branch, layer))
    }

    /// Writes `t{level}/l{layer}/{cond,uncond}/f{keyframe}.tft` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (&(branch, layer), base) in &self.bases {
            for g in base.grids() {
                let path = dir
                    .join(format!("t{}", self.level))
                    .join(format!("l{layer}"))
                    .join(branch_dir(branch))
                    .join(format!("f{}.tft", g.frame));
                save_tensor(&g.to_hwd(), path)?;
            }
        }
        Ok(())
    }

    /// Reads what [`BaseTokens::save`] wrote for `level`.
    pub fn load(
        dir: &Path,
        level: usize,
        keyframes: &[usize],
        layers: usize,
        timestep: usize,
    ) -> Result<Self> {
        let mut bases = BTreeMap::new();
        for branch in [Branch::Cond, Branch::Uncond] {
            for layer in 0..layers {
                let sub = dir
                    .join(format!("t{level}"))
                    .join(format!("l{layer}"))
                    .join(branch_dir(branch));
                if !sub.is_dir() {
                    continue;
                }
                let grids = keyframes
                    .iter()
                    .map(|&k| {
                        TokenGrid::from_hwd(
                            k,
                            layer,
                            timestep,
                            load_tensor(sub.join(format!("f{k}.tft")))?,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                bases.insert((branch, layer), TBase::new(keyframes.to_vec(), grids)?);
            }
        }
        Ok(Self {
            level,
            keyframes: keyframes.to_vec(),
            bases,
        })
    }
}

/// Step (I): denoises the keyframes jointly with extended attention under
/// the editing technique and records the attention outputs of every layer.
pub fn keyframe_pass(
    session: &EditSession,
    latents: &[Tensor],
    keyframes: &[usize],
    level: usize,
) -> Result<BaseTokens> {
    let m = &session.manifest;
    let timestep = m.timesteps[level];
    let xs: Vec<&Tensor> = keyframes.iter().map(|&k| &latents[k]).collect();
    let rec = TokenRecorder::new();
    let req = DenoiseRequest {
        latents: &xs,
        frames: keyframes,
        level,
        timestep,
        mode: AttentionMode::Extended,
    };
    session
        .technique
        .eps(
            &session.model,
            &req,
            &session.source,
            &session.target,
            &Hooks::observe(&rec, TokenSite::Output),
        )
        .map_err(|e| e.at_step(level, keyframes[0], None))?;
    let (h, w) = (m.token_grid.h, m.token_grid.w);
    let seen = rec.into_map();
    let mut bases = BTreeMap::new();
    for branch in [Branch::Cond, Branch::Uncond] {
        for layer in 0..m.layers {
            let grids: Option<Vec<TokenGrid>> = keyframes
                .iter()
                .map(|&k| {
                    seen.get(&HookSite {
                        frame: k,
                        layer,
                        branch,
                    })
                    .map(|t| TokenGrid::new(k, layer, timestep, h, w, t.clone()))
                })
                .map(|g| g.transpose())
                .collect::<Result<Option<Vec<_>>>>()?;
            if let Some(grids) = grids {
                bases.insert((branch, layer), TBase::new(keyframes.to_vec(), grids)?);
            }
        }
    }
    Ok(BaseTokens {
        level,
        keyframes: keyframes.to_vec(),
        bases,
    })
}

fn field_paths(
    dir: &Path,
    level: usize,
    layer: usize,
    frame: usize,
    key: usize,
) -> (PathBuf, PathBuf) {
    let base = dir.join(format!("t{level}")).join(format!("l{layer}"));
    (
        base.join(format!("f{frame}-k{key}.idx.tft")),
        base.join(format!("f{frame}-k{key}.dist.tft")),
    )
}

fn field_to_keyframe(
    originals: &[Vec<TokenGrid>],
    level: usize,
    layer: usize,
    frame: usize,
    key: usize,
    opts: &EditOptions,
) -> Result<NNField> {
    let src = &originals[layer][frame];
    if key == frame {
        let mut f = NNField::identity(frame, src.h, src.w);
        f.target_keyframe = key;
        return Ok(f);
    }
    if let Some(dir) = &opts.nn_cache {
        let (ip, dp) = field_paths(dir, level, layer, frame, key);
        if ip.is_file() && dp.is_file() {
            return NNField::from_tensors(frame, key, &load_tensor(&ip)?, &load_tensor(&dp)?);
        }
        let f = nn_field_blocked_with(src, &originals[layer][key], opts.tiles)?;
        let (idx, dist) = f.to_tensors();
        save_tensor(&idx, ip)?;
        save_tensor(&dist, dp)?;
        return Ok(f);
    }
    nn_field_blocked_with(src, &originals[layer][key], opts.tiles)
}

/// Fields from `frame` into its adjacent keyframes at every layer, computed
/// on the original video's tokens. A frame that is itself a keyframe maps
/// onto itself through the identity field.
pub fn frame_fields(
    originals: &[Vec<TokenGrid>],
    level: usize,
    weights: &BlendWeights,
    opts: &EditOptions,
) -> Result<Vec<FrameFields>> {
    let frame = weights.frame;
    (0..originals.len())
        .map(|layer| {
            let side = |k: Option<usize>| {
                k.map(|k| field_to_keyframe(originals, level, layer, frame, k, opts))
                    .transpose()
                    .map_err(|e| e.at_step(level, frame, Some(layer)))
            };
            Ok(FrameFields {
                minus: side(weights.neighbors.minus)?,
                plus: side(weights.neighbors.plus)?,
            })
        })
        .collect()
}

struct Propagated {
    level: usize,
    tokens: BTreeMap<(Branch, usize), Tensor>,
}

impl TokenReplacer for Propagated {
    fn replace(&self, site: HookSite, _generated: &Tensor) -> Result<Option<Tensor>> {
        match self.tokens.get(&(site.branch, site.layer)) {
            Some(t) => Ok(Some(t.clone())),
            None => Err(Error::arg(format!(
                "no keyframe tokens for the {:?} branch",
                site.branch
            ))
            .at_step(self.level, site.frame, Some(site.layer))),
        }
    }
}

/// Original-video tokens at `level`, indexed `[layer][frame]`.
pub fn load_originals(manifest: &VideoManifest, level: usize) -> Result<Vec<Vec<TokenGrid>>> {
    (0..manifest.layers)
        .into_par_iter()
        .map(|layer| manifest.load_layer(level, layer))
        .collect()
}

/// Step (II): denoises every frame with each layer's attention output
/// replaced by tokens propagated from `base`, then takes the DDIM step from
/// `level` to `level − 1`.
pub fn propagation_pass(
    session: &EditSession,
    originals: &[Vec<TokenGrid>],
    latents: &[Tensor],
    base: &BaseTokens,
) -> Result<Vec<Tensor>> {
    let m = &session.manifest;
    let level = base.level;
    let timestep = m.timesteps[level];
    let schedule = m.schedule();
    (0..m.n_frames)
        .into_par_iter()
        .map(|i| -> Result<Tensor> {
            let weights = BlendWeights::for_frame(i, &base.keyframes)
                .map_err(|e| e.at_step(level, i, None))?;
            let fields = frame_fields(originals, level, &weights, &session.options)?;
            let mut tokens = BTreeMap::new();
            for (&(branch, layer), tb) in &base.bases {
                let g = tokenflow_propagate(tb, &fields[layer], &weights, i)
                    .map_err(|e| e.at_step(level, i, Some(layer)))?;
                tokens.insert((branch, layer), g.into_tokens());
            }
            let replacer = Propagated { level, tokens };
            let req = DenoiseRequest {
                latents: &[&latents[i]],
                frames: &[i],
                level,
                timestep,
                mode: AttentionMode::PerFrame,
            };
            let eps = session
                .technique
                .eps(
                    &session.model,
                    &req,
                    &session.source,
                    &session.target,
                    &Hooks::replace(&replacer),
                )
                .map_err(|e| e.at_step(level, i, None))?
                .pop()
                .expect("one prediction per frame");
            let next = ddim_step(&latents[i], &eps, level, &schedule, Direction::Backward)?;
            if !next.is_finite() {
                return Err(Error::NonFinite("edited latent".into()).at_step(level, i, None));
            }
            Ok(next)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EditOutput {
    pub latents: Vec<Tensor>,
    /// Keyframes sampled at each level, from the noisiest level down.
    pub keyframes: Vec<(usize, Vec<usize>)>,
}

/// Runs the editing loop from the inverted noise down to clean latents.
pub fn edit_video(session: &mut EditSession) -> Result<EditOutput> {
    let steps = session.manifest.steps;
    let mut latents = (0..session.manifest.n_frames)
        .map(|f| session.manifest.load_latent(f, steps))
        .collect::<Result<Vec<_>>>()?;
    let mut record = Vec::with_capacity(steps);
    for level in (1..=steps).rev() {
        let n = session.manifest.n_frames;
        let keyframes = sample_keyframes(&mut session.rng, n, session.manifest.keyframe_interval)?;
        log::debug!("level {level}: keyframes {keyframes:?}");
        let base = keyframe_pass(session, &latents, &keyframes, level)?;
        if let Some(dir) = &session.options.tbase_dir {
            base.save(dir)?;
        }
        let originals = load_originals(&session.manifest, level)?;
        latents = propagation_pass(session, &originals, &latents, &base)?;
        record.push((level, keyframes));
    }
    Ok(EditOutput {
        latents,
        keyframes: record,
    })
}

/// Baseline: every frame sampled on its own with the session's technique,
/// without extended attention or token replacement.
pub fn per_frame_edit(session: &EditSession) -> Result<Vec<Tensor>> {
    let m = &session.manifest;
    let schedule = m.schedule();
    (0..m.n_frames)
        .into_par_iter()
        .map(|i| {
            let mut x = m.load_latent(i, m.steps)?;
            for level in (1..=m.steps).rev() {
                let req = DenoiseRequest {
                    latents: &[&x],
                    frames: &[i],
                    level,
                    timestep: m.timesteps[level],
                    mode: AttentionMode::PerFrame,
                };
                let eps = session
                    .technique
                    .eps(
                        &session.model,
                        &req,
                        &session.source,
                        &session.target,
                        &Hooks::none(),
                    )
                    .map_err(|e| e.at_step(level, i, None))?
                    .pop()
                    .expect("one prediction per frame");
                x = ddim_step(&x, &eps, level, &schedule, Direction::Backward)?;
            }
            Ok(x)
        })
        .collect()
}

/// Baseline: per-frame DDIM reconstruction from the inverted noise.
pub fn ddim_reconstruct(manifest: &VideoManifest) -> Result<Vec<Tensor>> {
    per_frame_edit(&EditSession::reconstruction(manifest.clone())?)
}

/// Writes `f{i}.tft` for every frame into `dir`.
pub fn save_frames(dir: &Path, frames: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_tensor(f, dir.join(format!("f{i}.tft")))?;
    }
    Ok(())
}

/// Reads `f0.tft, f1.tft, …` from `dir` up to the first missing index.
pub fn load_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(format!("f{}.tft", frames.len()));
        if !path.is_file() {
            break;
        }
        frames.push(load_tensor(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::File {
            path: dir.to_path_buf(),
            msg: "no frames (expected f0.tft, f1.tft, ...)".into(),
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyframe_arithmetic() {
        // Offset 3 with interval 8 over 20 frames.
        let r = 3;
        let ks: Vec<usize> = (r..20).step_by(8).collect();
        assert_eq!(ks, vec![3, 11, 19]);
        let mut rng = Rng::new(0);
        assert_eq!(sample_keyframes(&mut rng, 5, 5).unwrap().len(), 1);
        assert_eq!(sample_keyframes(&mut rng, 4, 9).unwrap().len(), 1);
        assert_eq!(
            sample_keyframes(&mut rng, 6, 1).unwrap(),
            (0..6).collect::<Vec<_>>()
        );
        assert!(sample_keyframes(&mut rng, 6, 0).is_err());
    }

    #[test]
    fn keyframe_sets_have_fixed_gaps() {
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let ks = sample_keyframes(&mut rng, 30, 8).unwrap();
            assert!(ks[0] < 8);
            assert!(ks.windows(2).all(|w| w[1] - w[0] == 8));
            assert!(*ks.last().unwrap() + 8 >= 30);
        }
    }

    #[test]
    fn keyframe_offsets_are_uniform() {
        let mut rng = Rng::new(42);
        let mut counts = [0usize; 8];
        for _ in 0..1000 {
            counts[sample_keyframes(&mut rng, 16, 8).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((85..=165).contains(&c), "{counts:?}");
        }
    }
}
