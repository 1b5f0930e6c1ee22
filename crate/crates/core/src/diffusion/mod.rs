//! DDIM sampling and inversion, classifier-free guidance, and the toy
//! noise predictor.

mod denoiser;
mod schedule;

pub use denoiser::{
    patchify, unpatchify, AttentionMode, Conditioning, EpsModel, ToyConfig, ToyDenoiser,
};
pub use schedule::{ddim_step, ddim_update, BetaKind, Direction, Schedule, ScheduleConfig};

use crate::attention::{Branch, Hooks};
use crate::error::{Error, Result};
use crate::tensors::Tensor;

/// Noisy latents of one frame from DDIM inversion; `latents[k]` is the
/// latent at level `k`, starting with the clean latent at level 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrajectory {
    pub frame: usize,
    pub latents: Vec<Tensor>,
}

impl DiffusionTrajectory {
    pub fn last(&self) -> &Tensor {
        self.latents.last().expect("trajectory holds x_0")
    }
}

/// Single-frame noise prediction with hooks.
pub fn denoise_eps(
    model: &dyn EpsModel,
    x_t: &Tensor,
    frame: usize,
    timestep: usize,
    cond: &Conditioning,
    hooks: &Hooks,
) -> Result<Tensor> {
    model.eps(x_t, frame, timestep, cond, Branch::Cond, hooks)
}

/// `ε_uncond + scale · (ε_cond − ε_uncond)`.
pub fn combine_guidance(uncond: &Tensor, cond: &Tensor, scale: f64) -> Result<Tensor> {
    if uncond.dims() != cond.dims() {
        return Err(Error::shape("guidance branches differ in shape"));
    }
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &c)| (u as f64 + scale * (c as f64 - u as f64)) as f32)
        .collect();
    Tensor::new(uncond.dims().to_vec(), data)
}

/// Classifier-free guided noise prediction. With `scale == 1` only the
/// conditional branch is evaluated and returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn cfg_eps(
    model: &dyn EpsModel,
    x_t: &Tensor,
    frame: usize,
    timestep: usize,
    cond: &Conditioning,
    null: &Conditioning,
    scale: f64,
    hooks: &Hooks,
) -> Result<Tensor> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::arg(format!(
            "guidance scale {scale} must be finite and >= 0"
        )));
    }
    if scale == 1.0 {
        return model.eps(x_t, frame, timestep, cond, Branch::Cond, hooks);
    }
    let uncond = model.eps(x_t, frame, timestep, null, Branch::Uncond, hooks)?;
    let conditioned = model.eps(x_t, frame, timestep, cond, Branch::Cond, hooks)?;
    combine_guidance(&uncond, &conditioned, scale)
}

/// DDIM inversion at guidance 1, recording every level.
pub fn invert(
    frame: usize,
    x0: &Tensor,
    model: &dyn EpsModel,
    schedule: &Schedule,
    cond: &Conditioning,
) -> Result<DiffusionTrajectory> {
    invert_guided(frame, x0, model, schedule, cond, cond, 1.0)
}

/// DDIM inversion with classifier-free guidance at `scale`.
pub fn invert_guided(
    frame: usize,
    x0: &Tensor,
    model: &dyn EpsModel,
    schedule: &Schedule,
    cond: &Conditioning,
    null: &Conditioning,
    scale: f64,
) -> Result<DiffusionTrajectory> {
    let mut latents = Vec::with_capacity(schedule.steps() + 1);
    latents.push(x0.clone());
    for level in 0..schedule.steps() {
        let x = &latents[level];
        let eps = cfg_eps(
            model,
            x,
            frame,
            schedule.timestep(level),
            cond,
            null,
            scale,
            &Hooks::none(),
        )
        .map_err(|e| e.at_step(level, frame, None))?;
        let next = ddim_step(x, &eps, level, schedule, Direction::Forward)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!(
                "inverted latent of frame {frame} at level {}",
                level + 1
            )));
        }
        latents.push(next);
    }
    Ok(DiffusionTrajectory { frame, latents })
}

/// Deterministic DDIM sampling from the last level down to level 0.
pub fn sample(
    frame: usize,
    x_t: &Tensor,
    model: &dyn EpsModel,
    schedule: &Schedule,
    cond: &Conditioning,
    null: &Conditioning,
    scale: f64,
) -> Result<Tensor> {
    let mut x = x_t.clone();
    for level in (1..=schedule.steps()).rev() {
        let eps = cfg_eps(
            model,
            &x,
            frame,
            schedule.timestep(level),
            cond,
            null,
            scale,
            &Hooks::none(),
        )?;
        x = ddim_step(&x, &eps, level, schedule, Direction::Backward)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::Rng;

    struct ZeroModel;
    impl EpsModel for ZeroModel {
        fn eps(
            &self,
            x: &Tensor,
            _: usize,
            _: usize,
            _: &Conditioning,
            _: Branch,
            _: &Hooks,
        ) -> Result<Tensor> {
            Ok(Tensor::zeros(x.dims()))
        }
    }

    fn schedule(steps: usize) -> Schedule {
        Schedule::new(&ScheduleConfig {
            steps,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_step_inversion_is_trivial() {
        let x = Rng::new(1).normal_tensor(&[4, 4, 4], 1.0);
        let tr = invert(0, &x, &ZeroModel, &schedule(0), &Conditioning::null(4)).unwrap();
        assert_eq!(tr.latents, vec![x]);
    }

    #[test]
    fn zero_model_inversion_has_closed_form() {
        let s = schedule(10);
        let x = Rng::new(2).normal_tensor(&[4, 2, 2], 1.0);
        let tr = invert(0, &x, &ZeroModel, &s, &Conditioning::null(4)).unwrap();
        assert_eq!(tr.latents.len(), 11);
        for (k, lat) in tr.latents.iter().enumerate() {
            let r = (s.alpha_bar(k) / s.alpha_bar(0)).sqrt();
            for (a, b) in lat.data().iter().zip(x.data()) {
                assert!((*a as f64 - r * *b as f64).abs() <= 1e-6 * (1.0 + b.abs() as f64));
            }
        }
    }

    fn toy() -> ToyDenoiser {
        ToyDenoiser::new(ToyConfig::default()).unwrap()
    }

    #[test]
    fn guidance_one_is_the_conditional_branch() {
        let m = toy();
        let x = Rng::new(3).normal_tensor(&[4, 8, 8], 1.0);
        let c = m.embed_prompt("dog");
        let g = cfg_eps(&m, &x, 0, 300, &c, &m.null_cond(), 1.0, &Hooks::none()).unwrap();
        let e = m.eps(&x, 0, 300, &c, Branch::Cond, &Hooks::none()).unwrap();
        assert!(g.bit_eq(&e));
    }

    #[test]
    fn guidance_zero_is_the_unconditional_branch() {
        let m = toy();
        let x = Rng::new(3).normal_tensor(&[4, 8, 8], 1.0);
        let c = m.embed_prompt("dog");
        let g = cfg_eps(&m, &x, 0, 300, &c, &m.null_cond(), 0.0, &Hooks::none()).unwrap();
        let u = m
            .eps(&x, 0, 300, &m.null_cond(), Branch::Uncond, &Hooks::none())
            .unwrap();
        assert!(g.bit_eq(&u));
    }

    #[test]
    fn null_condition_ignores_scale() {
        let m = toy();
        let x = Rng::new(4).normal_tensor(&[4, 8, 8], 1.0);
        let u = m
            .eps(&x, 0, 700, &m.null_cond(), Branch::Uncond, &Hooks::none())
            .unwrap();
        for s in [0.0, 2.5, 7.5] {
            let g = cfg_eps(
                &m,
                &x,
                0,
                700,
                &m.null_cond(),
                &m.null_cond(),
                s,
                &Hooks::none(),
            )
            .unwrap();
            assert!(g.max_abs_diff(&u).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn guidance_is_affine_in_scale() {
        let m = toy();
        let x = Rng::new(5).normal_tensor(&[4, 8, 8], 1.0);
        let c = m.embed_prompt("bird");
        let f = |s| cfg_eps(&m, &x, 0, 400, &c, &m.null_cond(), s, &Hooks::none()).unwrap();
        let lhs = f(2.0).add(&f(7.0)).unwrap();
        let rhs = f(4.5).scale(2.0);
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-6);
    }

    #[test]
    fn negative_scale_is_rejected() {
        let m = toy();
        let x = Tensor::zeros(&[4, 2, 2]);
        assert!(cfg_eps(
            &m,
            &x,
            0,
            0,
            &m.null_cond(),
            &m.null_cond(),
            -1.0,
            &Hooks::none()
        )
        .is_err());
    }

    #[test]
    fn invert_then_sample_round_trips() {
        let m = toy();
        let s = schedule(50);
        let x0 = Rng::new(6).uniform_tensor(&[4, 8, 8], 0.0, 1.0);
        let c = m.null_cond();
        let tr = invert(0, &x0, &m, &s, &c).unwrap();
        let back = sample(0, tr.last(), &m, &s, &c, &c, 1.0).unwrap();
        let rel = back.sub(&x0).unwrap().norm() / x0.norm();
        assert!(rel <= 1e-3, "relative error {rel}");
    }
}
