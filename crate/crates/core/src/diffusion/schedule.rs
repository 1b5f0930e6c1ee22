use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
    /// Linear in `sqrt(β)`, as used by latent diffusion models.
    ScaledLinear,
}

/// How the noise schedule and the inference grid are derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_kind: BetaKind,
    /// Number of inference steps; the grid has `steps + 1` levels.
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            beta_kind: BetaKind::ScaledLinear,
            steps: 50,
        }
    }
}

/// Inference grid of noise levels.
///
/// Level 0 is the clean latent; level `k ≥ 1` sits at training timestep
/// `k · (train_steps / steps) − 1`. `alphas_bar[k]` is the cumulative signal
/// fraction at level `k`, strictly decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    timesteps: Vec<usize>,
    alphas_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.train_steps == 0 {
            return Err(Error::arg("train_steps must be positive"));
        }
        if cfg.steps > cfg.train_steps {
            return Err(Error::arg(format!(
                "{} inference steps exceed {} training steps",
                cfg.steps, cfg.train_steps
            )));
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::arg("need 0 < beta_start <= beta_end < 1"));
        }
        let n = cfg.train_steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                let f = if n == 1 {
                    0.0
                } else {
                    i as f64 / (n - 1) as f64
                };
                match cfg.beta_kind {
                    BetaKind::Linear => cfg.beta_start + f * (cfg.beta_end - cfg.beta_start),
                    BetaKind::ScaledLinear => {
                        let (a, b) = (cfg.beta_start.sqrt(), cfg.beta_end.sqrt());
                        (a + f * (b - a)).powi(2)
                    }
                }
            })
            .collect();
        let mut cumulative = Vec::with_capacity(n);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            cumulative.push(prod);
        }
        let timesteps: Vec<usize> = match n.checked_div(cfg.steps) {
            None => vec![0],
            Some(ratio) => std::iter::once(0)
                .chain((1..=cfg.steps).map(|k| k * ratio - 1))
                .collect(),
        };
        let alphas_bar = timesteps.iter().map(|&t| cumulative[t]).collect();
        Self::from_parts(timesteps, alphas_bar)
    }

    /// Any strictly decreasing `alphas_bar` in `(0, 1]` is accepted.
    pub fn from_parts(timesteps: Vec<usize>, alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.is_empty() || timesteps.len() != alphas_bar.len() {
            return Err(Error::arg("one timestep per level required"));
        }
        if alphas_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::arg("alphas_bar must lie in (0, 1]"));
        }
        if alphas_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::arg("alphas_bar must be strictly decreasing"));
        }
        Ok(Self {
            timesteps,
            alphas_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alphas_bar[level]
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Training timestep fed to the denoiser at `level`.
    pub fn timestep(&self, level: usize) -> usize {
        self.timesteps[level]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Toward noise (`t → t + 1`), used by inversion.
    Forward,
    /// Toward data (`t → t − 1`), used by sampling.
    Backward,
}

/// Deterministic DDIM update between two signal levels:
///
/// ```text
/// x0   = (x − √(1 − ᾱ_from) · ε) / √ᾱ_from
/// next = √ᾱ_to · x0 + √(1 − ᾱ_to) · ε
/// ```
pub fn ddim_update(x: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Result<Tensor> {
    if x.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "latent {:?} vs eps {:?}",
            x.dims(),
            eps.dims()
        )));
    }
    if ab_from == ab_to {
        return Ok(x.clone());
    }
    let (sa, sb) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (ta, tb) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&xv, &ev)| {
            let x0 = (xv as f64 - sb * ev as f64) / sa;
            (ta * x0 + tb * ev as f64) as f32
        })
        .collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// One DDIM step from `level` to the adjacent level in `direction`.
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    level: usize,
    schedule: &Schedule,
    direction: Direction,
) -> Result<Tensor> {
    let next = match direction {
        Direction::Forward if level < schedule.steps() => level + 1,
        Direction::Backward if level >= 1 && level <= schedule.steps() => level - 1,
        _ => {
            return Err(Error::arg(format!(
                "level {level} has no {direction:?} neighbour in a {}-step schedule",
                schedule.steps()
            )))
        }
    };
    ddim_update(
        x_t,
        eps,
        schedule.alpha_bar(level),
        schedule.alpha_bar(next),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::Rng;

    #[test]
    fn default_grid() {
        let s = Schedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.timesteps()[..3], [0, 19, 39]);
        assert_eq!(*s.timesteps().last().unwrap(), 999);
        assert!(s.alphas_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alphas_bar().iter().all(|&a| a > 0.0 && a < 1.0));
        // First level: 1 − β₀.
        assert!((s.alpha_bar(0) - (1.0 - 0.00085)).abs() < 1e-15);
    }

    #[test]
    fn zero_step_grid_is_clean_only() {
        let s = Schedule::new(&ScheduleConfig {
            steps: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn rejects_non_monotone_alphas() {
        assert!(Schedule::from_parts(vec![0, 1], vec![0.5, 0.6]).is_err());
        assert!(Schedule::from_parts(vec![0, 1], vec![0.5, 0.5]).is_err());
        assert!(Schedule::from_parts(vec![0], vec![1.5]).is_err());
    }

    #[test]
    fn zero_eps_rescales() {
        let x = Rng::new(1).normal_tensor(&[2, 3], 1.0);
        let eps = Tensor::zeros(&[2, 3]);
        let y = ddim_update(&x, &eps, 0.9, 0.4).unwrap();
        let r = (0.4f64 / 0.9).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((*a as f64 - r * *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_levels_are_a_no_op() {
        let x = Rng::new(1).normal_tensor(&[4], 1.0);
        let eps = Rng::new(2).normal_tensor(&[4], 1.0);
        assert_eq!(ddim_update(&x, &eps, 0.3, 0.3).unwrap(), x);
    }

    #[test]
    fn backward_then_forward_with_same_eps_is_identity() {
        let s = Schedule::new(&ScheduleConfig::default()).unwrap();
        let x = Rng::new(3).normal_tensor(&[16], 1.0);
        let eps = Rng::new(4).normal_tensor(&[16], 1.0);
        for level in [1, 10, 25, 50] {
            let down = ddim_step(&x, &eps, level, &s, Direction::Backward).unwrap();
            let back = ddim_step(&down, &eps, level - 1, &s, Direction::Forward).unwrap();
            let rel = back.sub(&x).unwrap().norm() / x.norm();
            assert!(rel <= 1e-5, "level {level}: {rel}");
        }
    }

    #[test]
    fn out_of_range_levels() {
        let s = Schedule::new(&ScheduleConfig {
            steps: 4,
            ..Default::default()
        })
        .unwrap();
        let x = Tensor::zeros(&[2]);
        assert!(ddim_step(&x, &x, 4, &s, Direction::Forward).is_err());
        assert!(ddim_step(&x, &x, 0, &s, Direction::Backward).is_err());
        assert!(ddim_step(&x, &x, 5, &s, Direction::Backward).is_err());
    }
}
