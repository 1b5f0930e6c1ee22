//! Propagation of edited keyframe tokens to every frame.
//!
//! Each output token is a convex combination of the two adjacent keyframes'
//! edited tokens, gathered through the nearest-neighbour fields of the
//! original video:
//!
//! ```text
//! out[p] = w · base[i+][γ⁺[p]] + (1 − w) · base[i−][γ⁻[p]]
//! w      = σ(d₋ / (d₊ + d₋)),  d± = |i − i±|
//! ```

use crate::attention::TokenGrid;
use crate::correspondence::{adjacent_keyframes, NNField, Neighbors};
use crate::error::{Error, Result};
use crate::tensors::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weight given to the future keyframe `i+`; the past keyframe gets `1 − w`.
///
/// With only one neighbour present, that neighbour gets full weight. A frame
/// that is itself the keyframe on both sides also gets full weight.
pub fn blend_weight(i: usize, minus: Option<usize>, plus: Option<usize>) -> Result<f64> {
    match (minus, plus) {
        (None, None) => Err(Error::arg(format!(
            "frame {i} has no neighbouring keyframe"
        ))),
        (Some(m), _) if m > i => Err(Error::arg(format!("past keyframe {m} after frame {i}"))),
        (_, Some(p)) if p < i => Err(Error::arg(format!("future keyframe {p} before frame {i}"))),
        (None, Some(_)) => Ok(1.0),
        (Some(_), None) => Ok(0.0),
        (Some(m), Some(p)) if m == i && p == i => Ok(1.0),
        (Some(m), Some(p)) => {
            let d_minus = (i - m) as f64;
            let d_plus = (p - i) as f64;
            Ok(sigmoid(d_minus / (d_plus + d_minus)))
        }
    }
}

/// Blend weight of one frame together with the neighbours it refers to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendWeights {
    pub frame: usize,
    pub w: f64,
    pub neighbors: Neighbors,
}

impl BlendWeights {
    pub fn for_frame(frame: usize, keyframes: &[usize]) -> Result<Self> {
        let neighbors = adjacent_keyframes(frame, keyframes)?;
        let w = blend_weight(frame, neighbors.minus, neighbors.plus)?;
        Ok(Self {
            frame,
            w,
            neighbors,
        })
    }
}

/// Edited keyframe tokens of one layer at one timestep.
#[derive(Clone, Debug)]
pub struct TBase {
    keyframes: Vec<usize>,
    grids: Vec<TokenGrid>,
}

impl TBase {
    /// `grids[j]` holds the tokens of `keyframes[j]`.
    pub fn new(keyframes: Vec<usize>, grids: Vec<TokenGrid>) -> Result<Self> {
        if keyframes.is_empty() || keyframes.len() != grids.len() {
            return Err(Error::arg("one grid per keyframe required"));
        }
        if keyframes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg(format!(
                "keyframes must be sorted and unique, got {keyframes:?}"
            )));
        }
        let g0 = &grids[0];
        if grids
            .iter()
            .any(|g| g.h != g0.h || g.w != g0.w || g.dim() != g0.dim())
        {
            return Err(Error::shape("keyframe grids differ in shape"));
        }
        Ok(Self { keyframes, grids })
    }

    pub fn keyframes(&self) -> &[usize] {
        &self.keyframes
    }

    pub fn grid(&self, keyframe: usize) -> Option<&TokenGrid> {
        self.keyframes
            .iter()
            .position(|&k| k == keyframe)
            .map(|j| &self.grids[j])
    }

    pub fn grids(&self) -> &[TokenGrid] {
        &self.grids
    }

    /// Every grid scaled by `alpha`.
    pub fn scaled(&self, alpha: f32) -> TBase {
        let grids = self
            .grids
            .iter()
            .map(|g| g.with_tokens(g.tokens().scale(alpha)).expect("same shape"))
            .collect();
        TBase {
            keyframes: self.keyframes.clone(),
            grids,
        }
    }
}

/// Fields from one frame into its adjacent keyframes.
#[derive(Clone, Debug, Default)]
pub struct FrameFields {
    pub minus: Option<NNField>,
    pub plus: Option<NNField>,
}

fn side<'a>(
    tbase: &'a TBase,
    keyframe: Option<usize>,
    field: Option<&'a NNField>,
    label: &str,
    frame: usize,
) -> Result<Option<(&'a TokenGrid, &'a NNField)>> {
    let Some(k) = keyframe else {
        return Ok(None);
    };
    let field = field.ok_or_else(|| {
        Error::arg(format!(
            "frame {frame}: missing {label} field toward keyframe {k}"
        ))
    })?;
    if field.target_keyframe != k {
        return Err(Error::arg(format!(
            "frame {frame}: {label} field targets {} instead of {k}",
            field.target_keyframe
        )));
    }
    let grid = tbase
        .grid(k)
        .ok_or_else(|| Error::arg(format!("keyframe {k} missing from base tokens")))?;
    if let Some(&bad) = field.indices.iter().find(|&&q| q >= grid.len()) {
        return Err(Error::arg(format!(
            "field index {bad} outside keyframe grid of {} tokens",
            grid.len()
        )));
    }
    Ok(Some((grid, field)))
}

/// Replacement tokens for `frame`.
pub fn tokenflow_propagate(
    tbase: &TBase,
    fields: &FrameFields,
    weights: &BlendWeights,
    frame: usize,
) -> Result<TokenGrid> {
    let nb = weights.neighbors;
    let plus = side(tbase, nb.plus, fields.plus.as_ref(), "future", frame)?;
    let minus = side(tbase, nb.minus, fields.minus.as_ref(), "past", frame)?;
    let w = weights.w;
    // Terms with zero weight are skipped so a one-sided gather is exact.
    let plus = plus.filter(|_| w != 0.0);
    let minus = minus.filter(|_| w != 1.0);
    let reference = plus
        .or(minus)
        .ok_or_else(|| Error::arg(format!("frame {frame}: no keyframe contributes")))?;
    let (ref_grid, ref_field) = reference;
    if let (Some((_, fp)), Some((_, fm))) = (plus, minus) {
        if fp.len() != fm.len() {
            return Err(Error::shape("past and future fields cover different grids"));
        }
    }

    let d = ref_grid.dim();
    let n = ref_field.len();
    let mut out = vec![0.0f32; n * d];
    for p in 0..n {
        let dst = &mut out[p * d..(p + 1) * d];
        match (plus, minus) {
            (Some((gp, fp)), Some((gm, fm))) => {
                let a = gp.token(fp.indices[p]);
                let b = gm.token(fm.indices[p]);
                for c in 0..d {
                    dst[c] = (w * a[c] as f64 + (1.0 - w) * b[c] as f64) as f32;
                }
            }
            (Some((g, f)), None) | (None, Some((g, f))) => {
                dst.copy_from_slice(g.token(f.indices[p]));
            }
            (None, None) => unreachable!(),
        }
    }
    TokenGrid::new(
        frame,
        ref_grid.layer,
        ref_grid.timestep,
        ref_field.h,
        ref_field.w,
        Tensor::new(vec![n, d], out)?,
    )
}
