//! Principal components of token features pooled over all frames.

use crate::attention::TokenGrid;
use crate::error::{Error, Result};
use crate::tensors::Tensor;

/// Components whose eigenvalue falls below this fraction of the largest are
/// treated as absent.
pub const RANK_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != n * n {
        return Err(Error::shape(format!(
            "{} entries for a {n}x{n} matrix",
            a.len()
        )));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    Ok((values, vectors))
}

#[derive(Clone, Debug)]
pub struct PcaResult {
    /// Unit principal directions, one row per component.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, non-increasing.
    pub explained: Vec<f64>,
    /// Number of components with non-negligible variance.
    pub rank: usize,
    pub mean: Vec<f64>,
    /// Per-frame `h × w × k` images, jointly min-max normalized to `[0, 1]`.
    pub images: Vec<Tensor>,
}

/// Projects the tokens of every frame onto the top `k` principal directions
/// of all tokens pooled together.
///
/// Each direction is signed so its largest-magnitude coefficient is
/// positive. Directions beyond the rank of the data are returned as zero
/// vectors and their image channels are zero.
pub fn pca_tokens(grids: &[TokenGrid], k: usize) -> Result<PcaResult> {
    let first = grids.first().ok_or_else(|| Error::arg("no token grids"))?;
    let d = first.dim();
    if grids.iter().any(|g| g.dim() != d) {
        return Err(Error::shape("token grids differ in width"));
    }
    let total: usize = grids.iter().map(|g| g.len()).sum();
    if k == 0 || k > d || total < k + 1 {
        return Err(Error::arg(format!(
            "{k} components need 1 <= k <= {d} and at least {} tokens, got {total}",
            k + 1
        )));
    }
    let mut mean = vec![0.0f64; d];
    for g in grids {
        for row in g.tokens().data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for g in grids {
        for row in g.tokens().data().chunks(d) {
            for (c, (&v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
                *c = v as f64 - m;
            }
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += centered[i] * centered[j];
                }
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (total - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, d)?;
    let top = values[0].max(0.0);
    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    let mut rank = 0;
    for c in 0..k {
        let lambda = values[c];
        if top == 0.0 || lambda <= RANK_TOL * top {
            components.push(vec![0.0; d]);
            explained.push(0.0);
            continue;
        }
        rank += 1;
        let mut v = vectors[c].clone();
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("d > 0");
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(lambda);
    }
    if rank < k {
        log::warn!("token features have rank {rank} < {k}; missing components are zero");
    }

    let mean_ref = &mean;
    let components_ref = &components;
    let projections: Vec<Vec<f64>> = grids
        .iter()
        .map(|g| {
            g.tokens()
                .data()
                .chunks(d)
                .flat_map(|row| {
                    components_ref.iter().map(move |comp| {
                        row.iter()
                            .zip(comp)
                            .zip(mean_ref)
                            .map(|((&v, c), m)| (v as f64 - m) * c)
                            .sum::<f64>()
                    })
                })
                .collect()
        })
        .collect();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for proj in &projections {
        for (j, &v) in proj.iter().enumerate() {
            lo[j % k] = lo[j % k].min(v);
            hi[j % k] = hi[j % k].max(v);
        }
    }
    let images = grids
        .iter()
        .zip(&projections)
        .map(|(g, proj)| {
            let data = proj
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let c = j % k;
                    let span = hi[c] - lo[c];
                    if explained[c] == 0.0 || span <= f64::EPSILON * hi[c].abs().max(lo[c].abs()) {
                        0.0
                    } else {
                        ((v - lo[c]) / span) as f32
                    }
                })
                .collect();
            Tensor::new(vec![g.h, g.w, k], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PcaResult {
        components,
        explained,
        rank,
        mean,
        images,
    })
}

/// Stacks row `row` of every frame image into an `n × w × k` image.
pub fn xt_slice(images: &[Tensor], row: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::arg("no images"))?;
    let &[h, w, k] = first.dims() else {
        return Err(Error::shape("images must be h×w×k"));
    };
    if row >= h {
        return Err(Error::arg(format!("row {row} outside 0..{h}")));
    }
    let mut data = Vec::with_capacity(images.len() * w * k);
    for img in images {
        if img.dims() != [h, w, k] {
            return Err(Error::shape("images differ in shape"));
        }
        data.extend_from_slice(&img.data()[row * w * k..(row + 1) * w * k]);
    }
    Tensor::new(vec![images.len(), w, k], data)
}
