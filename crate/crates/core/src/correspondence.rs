//! Nearest-neighbour fields between token grids under cosine distance.
//!
//! [`nn_field_bruteforce`] evaluates the distance for every pair directly and
//! serves as the reference. [`nn_field_blocked`] normalizes every row once
//! and turns the search into tiled dot products with a running per-row
//! argmax. Both break ties toward the lowest key index.

use rayon::prelude::*;

use crate::attention::TokenGrid;
use crate::error::{Error, Result};
use crate::tensors::Tensor;

/// Norms below this are treated as zero; such tokens are at distance 1 from
/// everything.
pub const NORM_EPS: f64 = 1e-12;

/// Per-position nearest neighbours of one frame's tokens in a keyframe's
/// tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct NNField {
    pub frame: usize,
    pub target_keyframe: usize,
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f32>,
}

impl NNField {
    /// Identity correspondence on an `h × w` grid.
    pub fn identity(frame: usize, h: usize, w: usize) -> Self {
        Self {
            frame,
            target_keyframe: frame,
            h,
            w,
            indices: (0..h * w).collect(),
            distances: vec![0.0; h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `(indices, distances)` as `h × w` tensors; indices are stored as
    /// exactly representable `f32` integers.
    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let idx = self.indices.iter().map(|&i| i as f32).collect();
        (
            Tensor::new(vec![self.h, self.w], idx).expect("field invariant"),
            Tensor::new(vec![self.h, self.w], self.distances.clone()).expect("field invariant"),
        )
    }

    pub fn from_tensors(
        frame: usize,
        target_keyframe: usize,
        indices: &Tensor,
        distances: &Tensor,
    ) -> Result<Self> {
        let (h, w) = indices.shape2()?;
        if distances.dims() != indices.dims() {
            return Err(Error::shape("index and distance tensors differ in shape"));
        }
        let idx = indices
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::arg(format!("{v} is not a valid token index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frame,
            target_keyframe,
            h,
            w,
            indices: idx,
            distances: distances.data().to_vec(),
        })
    }
}

fn dot_norms(u: &[f32], v: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut uu = 0.0f64;
    let mut vv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    (dot, uu.sqrt(), vv.sqrt())
}

fn raw_cosine_distance(u: &[f32], v: &[f32]) -> f64 {
    let (dot, nu, nv) = dot_norms(u, v);
    if nu < NORM_EPS || nv < NORM_EPS {
        return 1.0;
    }
    1.0 - dot / (nu * nv)
}

/// `1 − u·v / (‖u‖‖v‖)`, or 1 when either norm is (near) zero.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine_distance of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(raw_cosine_distance(u, v).clamp(0.0, 2.0))
}

fn check_pair(src: &TokenGrid, key: &TokenGrid) -> Result<()> {
    if src.dim() != key.dim() {
        return Err(Error::shape(format!(
            "token widths differ: {} vs {}",
            src.dim(),
            key.dim()
        )));
    }
    if key.is_empty() && !src.is_empty() {
        return Err(Error::arg("keyframe grid has no tokens"));
    }
    Ok(())
}

/// Exact argmin over every key position, evaluated pair by pair.
pub fn nn_field_bruteforce(src: &TokenGrid, key: &TokenGrid) -> Result<NNField> {
    check_pair(src, key)?;
    let mut indices = Vec::with_capacity(src.len());
    let mut distances = Vec::with_capacity(src.len());
    for p in 0..src.len() {
        let u = src.token(p);
        let mut best = (0usize, f64::INFINITY);
        for q in 0..key.len() {
            let d = raw_cosine_distance(u, key.token(q));
            if d < best.1 {
                best = (q, d);
            }
        }
        indices.push(best.0);
        distances.push(best.1.clamp(0.0, 2.0) as f32);
    }
    Ok(NNField {
        frame: src.frame,
        target_keyframe: key.frame,
        h: src.h,
        w: src.w,
        indices,
        distances,
    })
}

/// Tile shape for [`nn_field_blocked_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiles {
    pub rows: usize,
    pub cols: usize,
}

impl Default for Tiles {
    fn default() -> Self {
        Self { rows: 64, cols: 64 }
    }
}

/// Unit-normalized rows in `f64`; near-zero rows become all zeros.
fn normalized_rows(t: &Tensor) -> (Vec<f64>, usize) {
    let d = t.dims()[1];
    let rows = t.dims()[0];
    let mut out = vec![0.0f64; rows * d];
    for r in 0..rows {
        let row = t.row(r);
        let norm = row
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm >= NORM_EPS {
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v as f64 / norm;
            }
        }
    }
    (out, d)
}

pub fn nn_field_blocked(src: &TokenGrid, key: &TokenGrid) -> Result<NNField> {
    nn_field_blocked_with(src, key, Tiles::default())
}

/// Blocked evaluation. Row tiles run in parallel; within a row the column
/// tiles are scanned in ascending order and a candidate only wins on a
/// strictly larger similarity, so the result never depends on scheduling.
pub fn nn_field_blocked_with(src: &TokenGrid, key: &TokenGrid, tiles: Tiles) -> Result<NNField> {
    check_pair(src, key)?;
    if tiles.rows == 0 || tiles.cols == 0 {
        return Err(Error::arg("tile sizes must be positive"));
    }
    let (a, d) = normalized_rows(src.tokens());
    let (b, _) = normalized_rows(key.tokens());
    let n_src = src.len();
    let n_key = key.len();

    let mut best_idx = vec![0usize; n_src];
    let mut best_sim = vec![f64::NEG_INFINITY; n_src];
    let tile = vec![0.0f64; tiles.rows * tiles.cols];

    best_idx
        .par_chunks_mut(tiles.rows)
        .zip(best_sim.par_chunks_mut(tiles.rows))
        .enumerate()
        .for_each_with(tile, |tile, (rb, (idx, sim))| {
            let r0 = rb * tiles.rows;
            let nr = idx.len();
            for c0 in (0..n_key).step_by(tiles.cols) {
                let nc = tiles.cols.min(n_key - c0);
                for i in 0..nr {
                    let u = &a[(r0 + i) * d..(r0 + i + 1) * d];
                    for j in 0..nc {
                        let v = &b[(c0 + j) * d..(c0 + j + 1) * d];
                        tile[i * tiles.cols + j] = u.iter().zip(v).map(|(x, y)| x * y).sum();
                    }
                }
                for i in 0..nr {
                    for j in 0..nc {
                        let s = tile[i * tiles.cols + j];
                        if s > sim[i] {
                            sim[i] = s;
                            idx[i] = c0 + j;
                        }
                    }
                }
            }
        });

    let distances = best_sim
        .iter()
        .map(|&s| (1.0 - s).clamp(0.0, 2.0) as f32)
        .collect();
    Ok(NNField {
        frame: src.frame,
        target_keyframe: key.frame,
        h: src.h,
        w: src.w,
        indices: best_idx,
        distances,
    })
}

/// Closest keyframes at or before (`minus`) and at or after (`plus`) a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbors {
    pub minus: Option<usize>,
    pub plus: Option<usize>,
}

pub fn adjacent_keyframes(i: usize, keyframes: &[usize]) -> Result<Neighbors> {
    if keyframes.is_empty() {
        return Err(Error::arg("empty keyframe list"));
    }
    if keyframes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg(format!(
            "keyframes must be sorted and unique, got {keyframes:?}"
        )));
    }
    let split = keyframes.partition_point(|&k| k <= i);
    let minus = split.checked_sub(1).map(|j| keyframes[j]);
    let plus = if minus == Some(i) {
        Some(i)
    } else {
        keyframes.get(split).copied()
    };
    Ok(Neighbors { minus, plus })
}
