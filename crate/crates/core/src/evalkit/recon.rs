//! Reconstructing one frame from another through token correspondences.

use std::collections::BTreeMap;

use crate::attention::{HookSite, Hooks, TokenGrid, TokenRecorder, TokenReplacer, TokenSite};
use crate::correspondence::{nn_field_blocked_with, NNField, Tiles};
use crate::diffusion::{ddim_step, AttentionMode, Direction};
use crate::error::{Error, Result};
use crate::pipeline::{DenoiseRequest, EditSession, VideoManifest};
use crate::tensors::Tensor;

/// Warps `source` (`C × H × W`) through `field`: output pixel `(y, x)` lies
/// in token cell `p` and is copied from the same offset inside source cell
/// `field.indices[p]`.
pub fn rgb_warp(source: &Tensor, field: &NNField) -> Result<Tensor> {
    let &[c, h, w] = source.dims() else {
        return Err(Error::shape(format!(
            "image must be C×H×W, got {:?}",
            source.dims()
        )));
    };
    if field.h == 0 || field.w == 0 || h % field.h != 0 || w % field.w != 0 {
        return Err(Error::shape(format!(
            "{}x{} field does not divide a {h}x{w} image",
            field.h, field.w
        )));
    }
    if field.indices.len() != field.h * field.w
        || field.indices.iter().any(|&q| q >= field.h * field.w)
    {
        return Err(Error::arg("field indices outside its grid"));
    }
    let (ph, pw) = (h / field.h, w / field.w);
    let src = source.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = (y / ph) * field.w + x / pw;
            let q = field.indices[p];
            let sy = (q / field.w) * ph + y % ph;
            let sx = (q % field.w) * pw + x % pw;
            for ch in 0..c {
                out[ch * h * w + y * w + x] = src[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Replaces every generated token by its nearest neighbour among the
/// source frame's tokens at the same layer and branch.
struct NearestSwap {
    source: BTreeMap<HookSite, Tensor>,
    source_frame: usize,
    h: usize,
    w: usize,
    tiles: Tiles,
}

impl TokenReplacer for NearestSwap {
    fn replace(&self, site: HookSite, generated: &Tensor) -> Result<Option<Tensor>> {
        let key = HookSite {
            frame: self.source_frame,
            ..site
        };
        let src = self
            .source
            .get(&key)
            .ok_or_else(|| Error::arg(format!("no source tokens at layer {}", site.layer)))?;
        let gen_grid =
            TokenGrid::new(site.frame, site.layer, 0, self.h, self.w, generated.clone())?;
        let src_grid = TokenGrid::new(
            self.source_frame,
            site.layer,
            0,
            self.h,
            self.w,
            src.clone(),
        )?;
        let field = nn_field_blocked_with(&gen_grid, &src_grid, self.tiles)?;
        Ok(Some(src.gather_rows(&field.indices)?))
    }
}

/// Samples `target` from its inverted noise while every attention output
/// is swapped for its nearest neighbour in `source`, which is sampled
/// alongside without modification. Both follow the identity edit toward the
/// manifest's source prompt.
pub fn feature_swap_reconstruct(
    manifest: &VideoManifest,
    source: usize,
    target: usize,
) -> Result<Tensor> {
    let session = EditSession::reconstruction(manifest.clone())?;
    let schedule = manifest.schedule();
    let steps = manifest.steps;
    let mut xs = manifest.load_latent(source, steps)?;
    let mut xt = manifest.load_latent(target, steps)?;
    for level in (1..=steps).rev() {
        let timestep = manifest.timesteps[level];
        let rec = TokenRecorder::new();
        let req = DenoiseRequest {
            latents: &[&xs],
            frames: &[source],
            level,
            timestep,
            mode: AttentionMode::PerFrame,
        };
        let eps_s = session
            .technique
            .eps(
                &session.model,
                &req,
                &session.source,
                &session.target,
                &Hooks::observe(&rec, TokenSite::Output),
            )
            .map_err(|e| e.at_step(level, source, None))?
            .pop()
            .expect("one prediction");
        let swap = NearestSwap {
            source: rec.into_map(),
            source_frame: source,
            h: manifest.token_grid.h,
            w: manifest.token_grid.w,
            tiles: Tiles::default(),
        };
        let req = DenoiseRequest {
            latents: &[&xt],
            frames: &[target],
            ..req
        };
        let eps_t = session
            .technique
            .eps(
                &session.model,
                &req,
                &session.source,
                &session.target,
                &Hooks::replace(&swap),
            )
            .map_err(|e| e.at_step(level, target, None))?
            .pop()
            .expect("one prediction");
        xs = ddim_step(&xs, &eps_s, level, &schedule, Direction::Backward)?;
        xt = ddim_step(&xt, &eps_t, level, &schedule, Direction::Backward)?;
    }
    Ok(xt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::Rng;

    #[test]
    fn identity_field_is_a_no_op() {
        let img = Rng::new(1).normal_tensor(&[3, 6, 8], 1.0);
        assert_eq!(rgb_warp(&img, &NNField::identity(0, 3, 4)).unwrap(), img);
    }

    #[test]
    fn one_cell_shift_moves_by_patch() {
        let img = Rng::new(2).normal_tensor(&[2, 4, 8], 1.0);
        // Output cell (y, x) reads source cell (y, x − 1), wrapping.
        let (h, w) = (2, 4);
        let mut f = NNField::identity(0, h, w);
        f.indices = (0..h * w)
            .map(|p| (p / w) * w + (p % w + w - 1) % w)
            .collect();
        let out = rgb_warp(&img, &f).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 2..8 {
                    assert_eq!(
                        out.data()[c * 32 + y * 8 + x],
                        img.data()[c * 32 + y * 8 + x - 2]
                    );
                }
            }
        }
    }

    #[test]
    fn mismatched_field_is_a_shape_error() {
        let img = Tensor::zeros(&[1, 5, 4]);
        assert!(matches!(
            rgb_warp(&img, &NNField::identity(0, 2, 2)),
            Err(Error::Shape(_))
        ));
    }
}
