//! `tokenflow` command-line driver.
//!
//! Every command stages its outputs in a temporary directory next to `--out`
//! and moves it into place only on success, then prints one line of
//! `key=value` pairs starting with `cmd=`. Failures print one diagnostic line
//! to stderr and exit with status 1.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tokenflow::attention::TokenSite;
use tokenflow::correspondence::nn_field_blocked;
use tokenflow::diffusion::{ScheduleConfig, ToyConfig, ToyDenoiser};
use tokenflow::evalkit::{
    edit_residual, latent_tokens, make_synthetic, pca_tokens, psnr, token_trajectory_variance,
    video_psnr, write_metrics_csv, write_ppm, xt_slice, MetricRow, SyntheticKind, SyntheticSpec,
    SyntheticVideo,
};
use tokenflow::pipeline::{
    ddim_reconstruct, edit_video, load_frames, preprocess, save_frames, EditOptions, EditSession,
    PreprocessOptions, VideoManifest,
};
use tokenflow::tensors::save_tensor;
use tokenflow::Tensor;

const VIDEO_FILE: &str = "video.json";
const KEYFRAMES_FILE: &str = "keyframes.json";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(
    name = "tokenflow",
    version,
    about = "Consistent video editing through diffusion-feature propagation"
)]
struct Cli {
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Replace `--out` if it already exists and is not empty.
    #[arg(long, global = true)]
    overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic latent video with ground-truth motion.
    Synth {
        #[arg(long, value_parser = parse_kind)]
        kind: SyntheticKind,
        #[arg(long, default_value_t = 8, value_parser = positive)]
        n: usize,
        #[arg(long, default_value_t = 4, value_parser = positive)]
        channels: usize,
        #[arg(long, default_value_t = 16, value_parser = positive)]
        height: usize,
        #[arg(long, default_value_t = 16, value_parser = positive)]
        width: usize,
        #[arg(long, default_value_t = 2, value_parser = positive)]
        patch: usize,
        /// Horizontal motion per frame, in cells.
        #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
        dx: isize,
        /// Vertical motion per frame, in cells.
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        dy: isize,
        /// Move a window over a larger canvas instead of wrapping around.
        #[arg(long)]
        no_wrap: bool,
        /// Standard deviation of per-frame Gaussian noise.
        #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert every frame and store latents, tokens and the manifest.
    Invert {
        /// Directory of `f0.tft, f1.tft, …` latent frames.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 50, value_parser = positive)]
        steps: usize,
        #[arg(long, default_value_t = 8, value_parser = positive)]
        interval: usize,
        #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
        guidance_invert: f64,
        #[arg(long, default_value_t = 7.5, value_parser = non_negative)]
        guidance_sample: f64,
        #[arg(long, default_value = "")]
        source_prompt: String,
        #[arg(long, default_value = "")]
        target_prompt: String,
        /// Seed of the keyframe sampler.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Site::Output)]
        token_site: Site,
        /// Seed of the toy denoiser's weights.
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        #[arg(long, default_value_t = 2, value_parser = positive)]
        layers: usize,
        #[arg(long, default_value_t = 32, value_parser = positive)]
        dim: usize,
        #[arg(long, default_value_t = 2, value_parser = positive)]
        patch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit an inverted video toward the target prompt.
    Edit {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Must match the prompt the video was inverted with.
        #[arg(long)]
        source_prompt: Option<String>,
        #[arg(long)]
        target_prompt: Option<String>,
        #[arg(long, value_parser = non_negative)]
        guidance_sample: Option<f64>,
        /// Also write the edited keyframe tokens of every step.
        #[arg(long)]
        save_tbase: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an inverted video through the editing pipeline without an edit.
    Reconstruct {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Also run plain per-frame DDIM reconstruction for comparison.
        #[arg(long)]
        ddim: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-neighbour field between the stored tokens of two frames.
    Nnfield {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        key: usize,
        /// Noise level, 1 ..= steps.
        #[arg(long, default_value_t = 1, value_parser = positive)]
        level: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Principal components of stored tokens, written as PPM images.
    Pca {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = positive)]
        level: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 3, value_parser = positive)]
        components: usize,
        /// Token row stacked over time into the x-t slice image.
        #[arg(long)]
        row: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR against a reference and, given ground truth, temporal consistency.
    Eval {
        /// Directory of frames to evaluate.
        #[arg(long)]
        frames: PathBuf,
        /// Directory of reference frames.
        #[arg(
            long,
            conflicts_with = "manifest",
            required_unless_present = "manifest"
        )]
        reference: Option<PathBuf>,
        /// Use the clean latents of this manifest as the reference.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Ground truth written by `synth`, for trajectory variance.
        #[arg(long)]
        video: Option<PathBuf>,
        #[arg(long, default_value_t = 2, value_parser = positive)]
        patch: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Overrides of the sampling settings stored in a manifest.
#[derive(clap::Args)]
struct RunFlags {
    /// Seed of the keyframe sampler.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = positive)]
    interval: Option<usize>,
    /// Directory where nearest-neighbour fields are cached across runs.
    #[arg(long)]
    nn_cache: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Site {
    Input,
    Output,
}

impl From<Site> for TokenSite {
    fn from(s: Site) -> Self {
        match s {
            Site::Input => TokenSite::Input,
            Site::Output => TokenSite::Output,
        }
    }
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    s.parse().map_err(|e: tokenflow::Error| e.to_string())
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .parse()
        .map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err("must be finite and >= 0".into())
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Invert { .. } => "invert",
            Command::Edit { .. } => "edit",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Nnfield { .. } => "nnfield",
            Command::Pca { .. } => "pca",
            Command::Eval { .. } => "eval",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::Synth { out, .. }
            | Command::Invert { out, .. }
            | Command::Edit { out, .. }
            | Command::Reconstruct { out, .. }
            | Command::Nnfield { out, .. }
            | Command::Pca { out, .. }
            | Command::Eval { out, .. } => out,
        }
    }
}

/// Ordered `key=value` pairs of the summary line.
#[derive(Default)]
struct Summary(Vec<(String, String)>);

impl Summary {
    fn add(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    fn line(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            if !s.is_empty() {
                s.push(' ');
            }
            let _ = write!(s, "{k}={v}");
        }
        s
    }
}

fn dir_is_empty(dir: &Path) -> Result<bool> {
    Ok(fs::read_dir(dir)
        .with_context(|| dir.display().to_string())?
        .next()
        .is_none())
}

/// Runs `work` on a fresh directory beside `out` and moves it to `out` on
/// success. The staging directory is removed on failure.
fn staged(
    out: &Path,
    overwrite: bool,
    work: impl FnOnce(&Path, &mut Summary) -> Result<()>,
) -> Result<Summary> {
    if out.exists() && !overwrite && !(out.is_dir() && dir_is_empty(out)?) {
        bail!(
            "{}: exists and is not empty (pass --overwrite to replace it)",
            out.display()
        );
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| parent.display().to_string())?;
    let stage = tempfile::Builder::new()
        .prefix(".tokenflow-")
        .tempdir_in(&parent)
        .with_context(|| parent.display().to_string())?;
    let mut summary = Summary::default();
    work(stage.path(), &mut summary)?;
    if out.is_dir() {
        fs::remove_dir_all(out).with_context(|| out.display().to_string())?;
    } else if out.exists() {
        fs::remove_file(out).with_context(|| out.display().to_string())?;
    }
    let kept = stage.keep();
    if let Err(e) = fs::rename(&kept, out) {
        let _ = fs::remove_dir_all(&kept);
        return Err(e).with_context(|| out.display().to_string());
    }
    summary.add("out", out.display());
    Ok(summary)
}

fn load_manifest(path: &Path) -> Result<VideoManifest> {
    Ok(VideoManifest::load(path)?)
}

fn configure(manifest: &mut VideoManifest, run: &RunFlags) {
    if let Some(seed) = run.seed {
        manifest.seed = seed;
    }
    if let Some(interval) = run.interval {
        manifest.keyframe_interval = interval;
    }
}

fn edit_options(run: &RunFlags, tbase_dir: Option<PathBuf>) -> EditOptions {
    EditOptions {
        nn_cache: run.nn_cache.clone(),
        tbase_dir,
        ..Default::default()
    }
}

fn write_keyframes(dir: &Path, keyframes: &[(usize, Vec<usize>)]) -> Result<()> {
    let path = dir.join(KEYFRAMES_FILE);
    let json = serde_json::to_string_pretty(keyframes)?;
    fs::write(&path, json + "\n").with_context(|| path.display().to_string())
}

fn originals(manifest: &VideoManifest) -> Result<Vec<Tensor>> {
    (0..manifest.n_frames)
        .map(|f| manifest.load_latent(f, 0).map_err(Into::into))
        .collect()
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".to_string()
    }
}

fn run(cmd: &Command, overwrite: bool) -> Result<Summary> {
    let out = cmd.out();
    let mut summary = match cmd {
        Command::Synth {
            kind,
            n,
            channels,
            height,
            width,
            patch,
            dx,
            dy,
            no_wrap,
            noise,
            seed,
            ..
        } => {
            let spec = SyntheticSpec {
                kind: *kind,
                n: *n,
                channels: *channels,
                h: *height,
                w: *width,
                patch: *patch,
                shift: (*dx, *dy),
                wrap: !no_wrap,
                noise: *noise,
                seed: *seed,
            };
            let video = make_synthetic(&spec)?;
            staged(out, overwrite, |dir, s| {
                save_frames(dir, &video.frames)?;
                let path = dir.join(VIDEO_FILE);
                fs::write(&path, serde_json::to_string_pretty(&video)? + "\n")
                    .with_context(|| path.display().to_string())?;
                s.add("frames", video.n())
                    .add("kind", kind.as_str())
                    .add("grid", format!("{}x{}", video.gh, video.gw));
                Ok(())
            })?
        }
        Command::Invert {
            frames,
            steps,
            interval,
            guidance_invert,
            guidance_sample,
            source_prompt,
            target_prompt,
            seed,
            token_site,
            model_seed,
            layers,
            dim,
            patch,
            ..
        } => {
            let video = load_frames(frames)?;
            let model = ToyDenoiser::new(ToyConfig {
                channels: video[0].dims().first().copied().unwrap_or(0),
                patch: *patch,
                dim: *dim,
                layers: *layers,
                seed: *model_seed,
                ..Default::default()
            })?;
            let opts = PreprocessOptions {
                schedule: ScheduleConfig {
                    steps: *steps,
                    ..Default::default()
                },
                source_prompt: source_prompt.clone(),
                target_prompt: target_prompt.clone(),
                seed: *seed,
                keyframe_interval: *interval,
                guidance_invert: *guidance_invert,
                guidance_sample: *guidance_sample,
                token_site: (*token_site).into(),
            };
            staged(out, overwrite, |dir, s| {
                let m = preprocess(&video, &model, &opts, dir)?;
                s.add("frames", m.n_frames)
                    .add("steps", m.steps)
                    .add("layers", m.layers)
                    .add(
                        "grid",
                        format!("{}x{}x{}", m.token_grid.h, m.token_grid.w, m.token_grid.dim),
                    );
                Ok(())
            })?
        }
        Command::Edit {
            manifest,
            run,
            source_prompt,
            target_prompt,
            guidance_sample,
            save_tbase,
            ..
        } => {
            let mut m = load_manifest(manifest)?;
            if let Some(p) = source_prompt {
                if *p != m.source_prompt {
                    bail!(
                        "{}: source prompt {p:?} differs from {:?} used for inversion",
                        manifest.display(),
                        m.source_prompt
                    );
                }
            }
            if let Some(p) = target_prompt {
                m.target_prompt = p.clone();
            }
            if let Some(g) = guidance_sample {
                m.guidance_sample = *g;
            }
            configure(&mut m, run);
            staged(out, overwrite, |dir, s| {
                let tbase = save_tbase.then(|| dir.join("tbase"));
                let mut session = EditSession::new(m)?.with_options(edit_options(run, tbase));
                let result = edit_video(&mut session)?;
                save_frames(dir, &result.latents)?;
                write_keyframes(dir, &result.keyframes)?;
                let delta = video_psnr(&result.latents, &originals(&session.manifest)?)?;
                s.add("frames", result.latents.len())
                    .add("steps", session.manifest.steps)
                    .add("technique", session.technique.name())
                    .add("psnr_vs_input", fmt_db(delta));
                Ok(())
            })?
        }
        Command::Reconstruct {
            manifest,
            run,
            ddim,
            ..
        } => {
            let mut m = load_manifest(manifest)?;
            configure(&mut m, run);
            staged(out, overwrite, |dir, s| {
                let input = originals(&m)?;
                let mut session =
                    EditSession::reconstruction(m.clone())?.with_options(edit_options(run, None));
                let result = edit_video(&mut session)?;
                save_frames(dir, &result.latents)?;
                write_keyframes(dir, &result.keyframes)?;
                let mut rows = Vec::new();
                for (f, (x, y)) in result.latents.iter().zip(&input).enumerate() {
                    rows.push(MetricRow::new(Some(f), "psnr", psnr(x, y)?));
                }
                let p = video_psnr(&result.latents, &input)?;
                rows.push(MetricRow::new(None, "psnr", p));
                s.add("frames", result.latents.len()).add("psnr", fmt_db(p));
                if *ddim {
                    let base = ddim_reconstruct(&m)?;
                    save_frames(&dir.join("ddim"), &base)?;
                    let pd = video_psnr(&base, &input)?;
                    rows.push(MetricRow::new(None, "ddim_psnr", pd));
                    s.add("ddim_psnr", fmt_db(pd));
                }
                write_metrics_csv(&dir.join(METRICS_FILE), &rows)?;
                Ok(())
            })?
        }
        Command::Nnfield {
            manifest,
            frame,
            key,
            level,
            layer,
            ..
        } => {
            let m = load_manifest(manifest)?;
            let src = m.load_tokens(*level, *layer, *frame)?;
            let dst = m.load_tokens(*level, *layer, *key)?;
            let field = nn_field_blocked(&src, &dst)?;
            staged(out, overwrite, |dir, s| {
                let (idx, dist) = field.to_tensors();
                save_tensor(&idx, dir.join("indices.tft"))?;
                save_tensor(&dist, dir.join("distances.tft"))?;
                let mean =
                    field.distances.iter().map(|&d| d as f64).sum::<f64>() / field.len() as f64;
                let fixed = field
                    .indices
                    .iter()
                    .enumerate()
                    .filter(|&(p, &q)| p == q)
                    .count();
                s.add("frame", frame)
                    .add("key", key)
                    .add("level", level)
                    .add("layer", layer)
                    .add("mean_distance", format!("{mean:.6}"))
                    .add("identity_matches", fixed);
                Ok(())
            })?
        }
        Command::Pca {
            manifest,
            level,
            layer,
            components,
            row,
            ..
        } => {
            let m = load_manifest(manifest)?;
            let grids = m.load_layer(*level, *layer)?;
            let result = pca_tokens(&grids, *components)?;
            let row = row.unwrap_or(m.token_grid.h / 2);
            let slice = xt_slice(&result.images, row)?;
            staged(out, overwrite, |dir, s| {
                for (f, img) in result.images.iter().enumerate() {
                    write_ppm(&dir.join(format!("f{f}.ppm")), img)?;
                }
                write_ppm(&dir.join("xt.ppm"), &slice)?;
                let explained: Vec<String> = result
                    .explained
                    .iter()
                    .map(|v| format!("{v:.4e}"))
                    .collect();
                s.add("frames", result.images.len())
                    .add("rank", result.rank)
                    .add("row", row)
                    .add("explained", explained.join(","));
                Ok(())
            })?
        }
        Command::Eval {
            frames,
            reference,
            manifest,
            video,
            patch,
            ..
        } => {
            let got = load_frames(frames)?;
            let want = match (reference, manifest) {
                (Some(dir), _) => load_frames(dir)?,
                (None, Some(path)) => originals(&load_manifest(path)?)?,
                (None, None) => bail!("one of --reference or --manifest is required"),
            };
            if got.len() != want.len() {
                bail!(
                    "{} frames to evaluate but {} reference frames",
                    got.len(),
                    want.len()
                );
            }
            let truth: Option<SyntheticVideo> = match video {
                Some(path) => {
                    let text =
                        fs::read_to_string(path).with_context(|| path.display().to_string())?;
                    Some(serde_json::from_str(&text).with_context(|| path.display().to_string())?)
                }
                None => None,
            };
            staged(out, overwrite, |dir, s| {
                let mut rows = Vec::new();
                for (f, (x, y)) in got.iter().zip(&want).enumerate() {
                    rows.push(MetricRow::new(Some(f), "psnr", psnr(x, y)?));
                }
                let p = video_psnr(&got, &want)?;
                rows.push(MetricRow::new(None, "psnr", p));
                s.add("frames", got.len()).add("psnr", fmt_db(p));
                if let Some(v) = &truth {
                    let var = token_trajectory_variance(&latent_tokens(&got, *patch)?, v)?;
                    let residual = edit_residual(&got, &want)?;
                    let rvar = token_trajectory_variance(&latent_tokens(&residual, *patch)?, v)?;
                    rows.push(MetricRow::new(None, "trajectory_variance", var));
                    rows.push(MetricRow::new(None, "residual_trajectory_variance", rvar));
                    s.add("trajectory_variance", format!("{var:.6e}"))
                        .add("residual_trajectory_variance", format!("{rvar:.6e}"));
                }
                write_metrics_csv(&dir.join(METRICS_FILE), &rows)?;
                Ok(())
            })?
        }
    };
    let mut line = Summary::default();
    line.add("cmd", cmd.name());
    line.0.append(&mut summary.0);
    Ok(line)
}

/// The error chain on one line, skipping messages that repeat the tail of
/// the previous one.
fn one_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string().replace('\n', " ");
        if parts.last().is_some_and(|prev| prev.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("tokenflow: cannot start {} threads: {e}", cli.threads);
        return ExitCode::FAILURE;
    }
    match run(&cli.command, cli.overwrite) {
        Ok(summary) => {
            println!("{}", summary.line());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tokenflow {}: {}", cli.command.name(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}
