//! A seeded, untrained transformer noise predictor.
//!
//! Latents are `C × H × W`. The denoiser cuts them into `p × p` patches,
//! embeds each patch to width `d`, adds a timestep embedding and the
//! conditioning vector, runs `L` residual self-attention blocks and projects
//! back to patches. It has no positional encoding, so it commutes with any
//! permutation of whole patches.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_block, extended_attention_block, AttentionWeights, Branch, Hooks, TokenGrid,
};
use crate::error::{Error, Result};
use crate::tensors::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub seed: u64,
    /// Rows in the prompt embedding table; row 0 is the null prompt.
    pub cond_vocab: usize,
    pub attn_gain: f64,
    /// Gain of the output projection. Internal tokens stay O(1) while the
    /// noise prediction stays small, which keeps DDIM inversion and
    /// sampling mutually inverse to about 3e-4 at 50 steps.
    pub out_scale: f64,
    pub temb_scale: f64,
    pub cond_scale: f64,
    /// Training timesteps, used to normalize the timestep embedding.
    pub train_steps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            patch: 2,
            dim: 32,
            layers: 2,
            seed: 0,
            cond_vocab: 256,
            attn_gain: 1.0,
            out_scale: 0.001,
            temb_scale: 0.1,
            cond_scale: 0.5,
            train_steps: 1000,
        }
    }
}

/// Conditioning vector added to every token.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning(pub Vec<f32>);

impl Conditioning {
    pub fn null(dim: usize) -> Self {
        Conditioning(vec![0.0; dim])
    }

    pub fn is_null(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// How a batch of frames attends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Each frame attends over its own tokens.
    PerFrame,
    /// Every frame attends over the tokens of all frames in the batch.
    Extended,
}

/// Anything that predicts noise for a single latent.
pub trait EpsModel: Sync {
    fn eps(
        &self,
        x: &Tensor,
        frame: usize,
        timestep: usize,
        cond: &Conditioning,
        branch: Branch,
        hooks: &Hooks,
    ) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    config: ToyConfig,
    in_proj: Tensor,
    out_proj: Tensor,
    layers: Vec<AttentionWeights>,
    cond_table: Tensor,
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig) -> Result<Self> {
        if config.channels == 0 || config.patch == 0 || config.dim == 0 {
            return Err(Error::arg("channels, patch and dim must be positive"));
        }
        if config.cond_vocab < 2 {
            return Err(Error::arg("cond_vocab must be at least 2"));
        }
        let pd = config.channels * config.patch * config.patch;
        let d = config.dim;
        let mut rng = Rng::new(config.seed);
        let in_proj = rng.normal_tensor(&[pd, d], 1.0 / (pd as f64).sqrt());
        let layers = (0..config.layers)
            .map(|_| AttentionWeights::random(d, config.attn_gain, &mut rng))
            .collect();
        let out_proj = rng.normal_tensor(&[d, pd], config.out_scale / (d as f64).sqrt());
        let mut cond_table = rng.normal_tensor(&[config.cond_vocab, d], config.cond_scale);
        let mut rows = cond_table.clone().into_data();
        rows[..d].iter_mut().for_each(|v| *v = 0.0);
        cond_table = Tensor::new(vec![config.cond_vocab, d], rows)?;
        Ok(Self {
            config,
            in_proj,
            out_proj,
            layers,
            cond_table,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn layer_weights(&self, layer: usize) -> &AttentionWeights {
        &self.layers[layer]
    }

    /// Row of the embedding table for `prompt`: the empty prompt maps to the
    /// zero row, anything else to `1 + (fnv1a(prompt) ^ seed) mod (vocab − 1)`.
    pub fn prompt_index(&self, prompt: &str) -> usize {
        if prompt.is_empty() {
            return 0;
        }
        let h = fnv1a(prompt.as_bytes()) ^ self.config.seed;
        1 + (h % (self.config.cond_vocab as u64 - 1)) as usize
    }

    pub fn embed_prompt(&self, prompt: &str) -> Conditioning {
        Conditioning(self.cond_table.row(self.prompt_index(prompt)).to_vec())
    }

    pub fn null_cond(&self) -> Conditioning {
        Conditioning::null(self.config.dim)
    }

    /// Token grid size `(h, w)` for a latent of the given dims.
    pub fn grid_size(&self, latent_dims: &[usize]) -> Result<(usize, usize)> {
        let p = self.config.patch;
        match latent_dims {
            &[c, h, w]
                if c == self.config.channels && h % p == 0 && w % p == 0 && h > 0 && w > 0 =>
            {
                Ok((h / p, w / p))
            }
            _ => Err(Error::shape(format!(
                "latent dims {latent_dims:?} incompatible with {} channels and patch {}",
                self.config.channels, p
            ))),
        }
    }

    /// Sinusoidal embedding of the normalized timestep `s = t / train_steps`,
    /// with angular frequencies spread over `[π/2, 2π]`.
    pub fn timestep_embedding(&self, timestep: usize) -> Vec<f32> {
        let d = self.config.dim;
        let half = d / 2;
        let s = timestep as f64 / self.config.train_steps as f64;
        let mut out = vec![0.0f32; d];
        for j in 0..half {
            let f = if half > 1 {
                std::f64::consts::FRAC_PI_2 * (1.0 + 3.0 * j as f64 / (half - 1) as f64)
            } else {
                std::f64::consts::FRAC_PI_2
            };
            out[j] = (self.config.temb_scale * (f * s).sin()) as f32;
            out[half + j] = (self.config.temb_scale * (f * s).cos()) as f32;
        }
        out
    }

    fn embed(
        &self,
        x: &Tensor,
        frame: usize,
        timestep: usize,
        cond: &Conditioning,
    ) -> Result<TokenGrid> {
        let (gh, gw) = self.grid_size(x.dims())?;
        if cond.0.len() != self.config.dim {
            return Err(Error::shape(format!(
                "conditioning of width {} for a model of width {}",
                cond.0.len(),
                self.config.dim
            )));
        }
        let patches = patchify(x, self.config.patch)?;
        let bias: Vec<f32> = self
            .timestep_embedding(timestep)
            .iter()
            .zip(&cond.0)
            .map(|(a, b)| a + b)
            .collect();
        let tokens = rms_normalize(patches.matmul(&self.in_proj)?).add_row_vector(&bias)?;
        TokenGrid::new(frame, 0, timestep, gh, gw, tokens)
    }

    fn unembed(&self, grid: &TokenGrid, dims: &[usize]) -> Result<Tensor> {
        let patches = grid.tokens().matmul(&self.out_proj)?;
        unpatchify(&patches, dims, self.config.patch)
    }

    /// Noise predictions for a batch of frames at one timestep.
    ///
    /// In [`AttentionMode::Extended`] mode `frames` must be strictly
    /// increasing; the batch is processed jointly layer by layer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_frames(
        &self,
        xs: &[&Tensor],
        frames: &[usize],
        timestep: usize,
        cond: &Conditioning,
        branch: Branch,
        mode: AttentionMode,
        hooks: &Hooks,
    ) -> Result<Vec<Tensor>> {
        if xs.len() != frames.len() {
            return Err(Error::arg("one frame index per latent required"));
        }
        let mut grids = xs
            .iter()
            .zip(frames)
            .map(|(x, &f)| self.embed(x, f, timestep, cond))
            .collect::<Result<Vec<_>>>()?;
        for (l, weights) in self.layers.iter().enumerate() {
            for g in grids.iter_mut() {
                g.layer = l;
            }
            grids = match mode {
                AttentionMode::PerFrame => grids
                    .iter()
                    .map(|g| attention_block(g, weights, branch, hooks))
                    .collect::<Result<Vec<_>>>()?,
                AttentionMode::Extended => {
                    extended_attention_block(&grids, weights, branch, hooks)?
                }
            };
        }
        grids
            .iter()
            .zip(xs)
            .map(|(g, x)| self.unembed(g, x.dims()))
            .collect()
    }
}

impl EpsModel for ToyDenoiser {
    fn eps(
        &self,
        x: &Tensor,
        frame: usize,
        timestep: usize,
        cond: &Conditioning,
        branch: Branch,
        hooks: &Hooks,
    ) -> Result<Tensor> {
        let mut out = self.forward_frames(
            &[x],
            &[frame],
            timestep,
            cond,
            branch,
            AttentionMode::PerFrame,
            hooks,
        )?;
        Ok(out.pop().expect("one output per input"))
    }
}

/// Scales every row to unit root-mean-square. Rows with RMS below `1e-6`
/// are scaled as if their RMS were `1e-6`.
fn rms_normalize(t: Tensor) -> Tensor {
    let (rows, d) = t.shape2().expect("token matrix");
    let dims = t.dims().to_vec();
    let mut data = t.into_data();
    for r in 0..rows {
        let row = &mut data[r * d..(r + 1) * d];
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / d as f64;
        let inv = 1.0 / ms.sqrt().max(1e-6);
        row.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
    }
    Tensor::new(dims, data).expect("same shape")
}

/// `C × H × W` latent to `(H/p · W/p) × (C·p·p)` patch rows. Patches are
/// ordered row-major over the grid; features are ordered `(c, dy, dx)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let &[c, h, w] = x.dims() else {
        return Err(Error::shape(format!(
            "latent must be C×H×W, got {:?}",
            x.dims()
        )));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}x{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let src = x.data();
    let mut out = vec![0.0f32; gh * gw * pd];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * pd..(gy * gw + gx + 1) * pd];
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        row[k] = src[ch * h * w + (gy * p + dy) * w + gx * p + dx];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, dims: &[usize], p: usize) -> Result<Tensor> {
    let &[c, h, w] = dims else {
        return Err(Error::shape(format!("latent must be C×H×W, got {dims:?}")));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}x{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    if patches.dims() != [gh * gw, pd] {
        return Err(Error::shape(format!(
            "patches {:?} do not tile {dims:?}",
            patches.dims()
        )));
    }
    let mut out = vec![0.0f32; c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row(gy * gw + gx);
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[ch * h * w + (gy * p + dy) * w + gx * p + dx] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::new(dims.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyDenoiser {
        ToyDenoiser::new(ToyConfig {
            dim: 16,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn patchify_round_trip() {
        let x = Rng::new(1).normal_tensor(&[3, 4, 6], 1.0);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.dims(), &[6, 12]);
        assert_eq!(unpatchify(&p, &[3, 4, 6], 2).unwrap(), x);
        assert!(patchify(&x, 4).is_err());
    }

    #[test]
    fn deterministic_outputs() {
        let m = small();
        let x = Rng::new(2).normal_tensor(&[4, 8, 8], 1.0);
        let c = m.embed_prompt("a cat");
        let a = m.eps(&x, 0, 500, &c, Branch::Cond, &Hooks::none()).unwrap();
        let b = small()
            .eps(&x, 0, 500, &c, Branch::Cond, &Hooks::none())
            .unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.dims(), x.dims());
    }

    #[test]
    fn output_shape_matches_input() {
        let m = small();
        for (h, w) in [(2, 2), (4, 8), (10, 6)] {
            let x = Rng::new(3).normal_tensor(&[4, h, w], 1.0);
            let e = m
                .eps(&x, 0, 1, &m.null_cond(), Branch::Uncond, &Hooks::none())
                .unwrap();
            assert_eq!(e.dims(), &[4, h, w]);
        }
    }

    #[test]
    fn finite_for_bounded_inputs() {
        let m = small();
        for seed in 0..100 {
            let x = Rng::new(seed).uniform_tensor(&[4, 4, 4], -10.0, 10.0);
            let e = m
                .eps(
                    &x,
                    0,
                    (seed as usize * 37) % 1000,
                    &m.embed_prompt("x"),
                    Branch::Cond,
                    &Hooks::none(),
                )
                .unwrap();
            assert!(e.is_finite(), "seed {seed}");
        }
    }

    #[test]
    fn prompts_map_to_table_rows() {
        let m = small();
        assert!(m.embed_prompt("").is_null());
        assert_eq!(m.prompt_index(""), 0);
        let i = m.prompt_index("a red car");
        assert!((1..256).contains(&i));
        assert_eq!(i, m.prompt_index("a red car"));
        assert_ne!(m.embed_prompt("a red car"), m.embed_prompt("a blue car"));
    }

    #[test]
    fn rejects_bad_latent_dims() {
        let m = small();
        let x = Tensor::zeros(&[3, 4, 4]);
        assert!(m
            .eps(&x, 0, 0, &m.null_cond(), Branch::Cond, &Hooks::none())
            .is_err());
    }

    #[test]
    fn lipschitz_smoke() {
        // Measured ratio is about 2.6e-3 for the default configuration.
        let m = ToyDenoiser::new(ToyConfig::default()).unwrap();
        let c = m.embed_prompt("q");
        let mut worst: f64 = 0.0;
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let x = rng.uniform_tensor(&[4, 8, 8], 0.0, 1.0);
            let delta = rng.normal_tensor(&[4, 8, 8], 1.0);
            let delta = delta.scale((1e-4 / delta.norm()) as f32);
            let a = m.eps(&x, 0, 500, &c, Branch::Cond, &Hooks::none()).unwrap();
            let b = m
                .eps(
                    &x.add(&delta).unwrap(),
                    0,
                    500,
                    &c,
                    Branch::Cond,
                    &Hooks::none(),
                )
                .unwrap();
            worst = worst.max(b.sub(&a).unwrap().norm() / delta.norm());
        }
        assert!(worst <= 0.05, "ratio {worst}");
    }

    #[test]
    fn patch_permutation_commutes() {
        // Swapping two whole patches of the input swaps them in the output.
        let m = small();
        let x = Rng::new(5).normal_tensor(&[4, 4, 4], 1.0);
        let px = patchify(&x, 2).unwrap();
        let perm = [3, 1, 2, 0];
        let y = unpatchify(&px.gather_rows(&perm).unwrap(), &[4, 4, 4], 2).unwrap();
        let c = m.embed_prompt("p");
        let ex = m.eps(&x, 0, 100, &c, Branch::Cond, &Hooks::none()).unwrap();
        let ey = m.eps(&y, 0, 100, &c, Branch::Cond, &Hooks::none()).unwrap();
        let pex = patchify(&ex, 2).unwrap().gather_rows(&perm).unwrap();
        let pey = patchify(&ey, 2).unwrap();
        assert!(pex.max_abs_diff(&pey).unwrap() < 1e-5);
    }
}
