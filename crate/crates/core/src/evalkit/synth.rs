//! Synthetic videos with exact ground-truth correspondences.
//!
//! Frames are built from patch-sized cells of a random canvas. Every cell
//! of a frame carries the id of the canvas cell it shows, so
//! correspondences between any two frames are known exactly.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Every frame shows the same cells.
    Static,
    /// The whole pattern moves by a fixed number of cells per frame.
    Translate,
    /// The upper band moves horizontally with wrap-around; the rest is still.
    TwoRegion,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [Self::Static, Self::Translate, Self::TwoRegion];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Translate => "translate",
            Self::TwoRegion => "two-region",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "translate" => Ok(Self::Translate),
            "two-region" => Ok(Self::TwoRegion),
            _ => Err(Error::arg(format!(
                "unknown video kind {s:?} (static, translate, two-region)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub channels: usize,
    /// Latent height and width in pixels; multiples of `patch`.
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    /// Motion per frame in cells, `(dx, dy)`.
    pub shift: (isize, isize),
    /// Translation wraps around the frame. Without wrap the frame is a
    /// moving window over a larger canvas and new cells enter at the border.
    pub wrap: bool,
    /// Standard deviation of independent per-frame Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Translate,
            n: 8,
            channels: 4,
            h: 16,
            w: 16,
            patch: 2,
            shift: (1, 0),
            wrap: true,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub spec: SyntheticSpec,
    /// Token grid size.
    pub gh: usize,
    pub gw: usize,
    #[serde(skip)]
    pub frames: Vec<Tensor>,
    /// `cells[i][p]`: canvas cell shown at token position `p` of frame `i`.
    pub cells: Vec<Vec<usize>>,
    pub canvas_cells: usize,
}

fn wrap_idx(v: isize, n: usize) -> usize {
    v.rem_euclid(n as isize) as usize
}

/// Builds the frames and ground truth described by `spec`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticVideo> {
    let p = spec.patch;
    if spec.n == 0 || spec.channels == 0 || p == 0 {
        return Err(Error::arg("n, channels and patch must be positive"));
    }
    if spec.h == 0 || spec.w == 0 || !spec.h.is_multiple_of(p) || !spec.w.is_multiple_of(p) {
        return Err(Error::shape(format!(
            "{}x{} frame is not a positive multiple of patch {p}",
            spec.h, spec.w
        )));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::arg("noise must be finite and >= 0"));
    }
    let (gh, gw) = (spec.h / p, spec.w / p);
    let (dx, dy) = spec.shift;
    let n = spec.n;

    let (canvas_h, canvas_w) = match spec.kind {
        SyntheticKind::Translate if !spec.wrap => (
            gh + (n - 1) * dy.unsigned_abs(),
            gw + (n - 1) * dx.unsigned_abs(),
        ),
        _ => (gh, gw),
    };
    let cells: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let ii = i as isize;
            (0..gh * gw)
                .map(|pos| {
                    let (y, x) = ((pos / gw) as isize, (pos % gw) as isize);
                    let (cy, cx) = match spec.kind {
                        SyntheticKind::Static => (y as usize, x as usize),
                        SyntheticKind::Translate if spec.wrap => {
                            (wrap_idx(y - ii * dy, gh), wrap_idx(x - ii * dx, gw))
                        }
                        SyntheticKind::Translate => {
                            // Window origin moves against the content.
                            let oy = if dy >= 0 {
                                (n - 1 - i) as isize * dy
                            } else {
                                -ii * dy
                            };
                            let ox = if dx >= 0 {
                                (n - 1 - i) as isize * dx
                            } else {
                                -ii * dx
                            };
                            ((y + oy) as usize, (x + ox) as usize)
                        }
                        SyntheticKind::TwoRegion => {
                            if (y as usize) < gh.div_ceil(2) {
                                (y as usize, wrap_idx(x - ii * dx, gw))
                            } else {
                                (y as usize, x as usize)
                            }
                        }
                    };
                    cy * canvas_w + cx
                })
                .collect()
        })
        .collect();

    let mut rng = Rng::new(spec.seed);
    let cell_len = spec.channels * p * p;
    let canvas = rng.uniform_tensor(&[canvas_h * canvas_w, cell_len], 0.0, 1.0);
    let frames = cells
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            let mut noise_rng = Rng::new(spec.seed).fork(1 + i as u64);
            let mut data = vec![0.0f32; spec.channels * spec.h * spec.w];
            for (pos, &id) in ids.iter().enumerate() {
                let (gy, gx) = (pos / gw, pos % gw);
                let src = canvas.row(id);
                let mut k = 0;
                for c in 0..spec.channels {
                    for oy in 0..p {
                        for ox in 0..p {
                            data[c * spec.h * spec.w + (gy * p + oy) * spec.w + gx * p + ox] =
                                src[k];
                            k += 1;
                        }
                    }
                }
            }
            if spec.noise > 0.0 {
                for v in &mut data {
                    *v = (*v as f64 + spec.noise * noise_rng.normal()) as f32;
                }
            }
            Tensor::new(vec![spec.channels, spec.h, spec.w], data).expect("frame dims")
        })
        .collect();
    Ok(SyntheticVideo {
        spec: spec.clone(),
        gh,
        gw,
        frames,
        cells,
        canvas_cells: canvas_h * canvas_w,
    })
}

impl SyntheticVideo {
    /// Frame count; also valid for a video read back from JSON without its
    /// frames.
    pub fn n(&self) -> usize {
        self.cells.len()
    }

    /// For each token position of frame `from`, the position in frame `to`
    /// showing the same canvas cell, if that cell is visible there.
    pub fn gt_map(&self, from: usize, to: usize) -> Vec<Option<usize>> {
        let mut where_in_to = vec![None; self.canvas_cells];
        for (pos, &id) in self.cells[to].iter().enumerate() {
            where_in_to[id] = Some(pos);
        }
        self.cells[from].iter().map(|&id| where_in_to[id]).collect()
    }

    /// Every canvas cell visible in at least two frames, as its list of
    /// `(frame, position)` occurrences.
    pub fn trajectories(&self) -> Vec<Vec<(usize, usize)>> {
        let mut by_cell: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.canvas_cells];
        for (f, ids) in self.cells.iter().enumerate() {
            for (pos, &id) in ids.iter().enumerate() {
                by_cell[id].push((f, pos));
            }
        }
        by_cell.into_iter().filter(|t| t.len() >= 2).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SyntheticKind) -> SyntheticSpec {
        SyntheticSpec {
            kind,
            n: 4,
            h: 8,
            w: 12,
            ..Default::default()
        }
    }

    #[test]
    fn static_maps_are_identity() {
        let v = make_synthetic(&spec(SyntheticKind::Static)).unwrap();
        for i in 0..4 {
            let m = v.gt_map(0, i);
            assert!(m.iter().enumerate().all(|(p, q)| *q == Some(p)));
            assert_eq!(v.frames[i], v.frames[0]);
        }
    }

    #[test]
    fn unit_shift_moves_one_column() {
        let v = make_synthetic(&spec(SyntheticKind::Translate)).unwrap();
        let m = v.gt_map(0, 1);
        for (p, q) in m.iter().enumerate() {
            let (y, x) = (p / v.gw, p % v.gw);
            assert_eq!(*q, Some(y * v.gw + (x + 1) % v.gw));
        }
        // Pixel check: frame 1 at x + patch equals frame 0 at x.
        let (f0, f1) = (&v.frames[0], &v.frames[1]);
        for c in 0..4 {
            for y in 0..8 {
                for x in 0..10 {
                    assert_eq!(
                        f0.data()[c * 96 + y * 12 + x],
                        f1.data()[c * 96 + y * 12 + x + 2]
                    );
                }
            }
        }
    }

    #[test]
    fn window_translation_disoccludes_border() {
        let v = make_synthetic(&SyntheticSpec {
            wrap: false,
            ..spec(SyntheticKind::Translate)
        })
        .unwrap();
        let m = v.gt_map(1, 0);
        for (p, q) in m.iter().enumerate() {
            let (y, x) = (p / v.gw, p % v.gw);
            if x == 0 {
                assert_eq!(*q, None);
            } else {
                assert_eq!(*q, Some(y * v.gw + x - 1));
            }
        }
    }

    #[test]
    fn two_region_moves_only_the_top() {
        let v = make_synthetic(&spec(SyntheticKind::TwoRegion)).unwrap();
        let m = v.gt_map(0, 2);
        for (p, q) in m.iter().enumerate() {
            let (y, x) = (p / v.gw, p % v.gw);
            let want = if y < 2 { y * v.gw + (x + 2) % v.gw } else { p };
            assert_eq!(*q, Some(want));
        }
    }

    #[test]
    fn cells_are_injective_within_a_frame() {
        for kind in SyntheticKind::ALL {
            let v = make_synthetic(&spec(kind)).unwrap();
            for ids in &v.cells {
                let mut s = ids.clone();
                s.sort_unstable();
                s.dedup();
                assert_eq!(s.len(), ids.len());
            }
        }
    }

    #[test]
    fn same_seed_same_video() {
        let s = SyntheticSpec {
            noise: 0.05,
            ..spec(SyntheticKind::TwoRegion)
        };
        let a = make_synthetic(&s).unwrap();
        let b = make_synthetic(&s).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_ne!(a.frames[0], a.frames[1]);
    }

    #[test]
    fn rejects_unaligned_sizes() {
        let s = SyntheticSpec {
            h: 7,
            ..Default::default()
        };
        assert!(make_synthetic(&s).is_err());
        assert!("spiral".parse::<SyntheticKind>().is_err());
        assert_eq!(
            "two-region".parse::<SyntheticKind>().unwrap(),
            SyntheticKind::TwoRegion
        );
    }
}
