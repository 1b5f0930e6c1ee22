//! Single-head self-attention, extended multi-frame attention, and the
//! attention block with its token hook points.
//!
//! The hook point sits after the output projection and before the residual
//! add. An observer sees either the block input or the hook-point tokens
//! (see [`TokenSite`]); a replacer may substitute the hook-point tokens.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{softmax_rows, Rng, Tensor};

/// Tokens of one self-attention layer for one frame at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub frame: usize,
    pub layer: usize,
    pub timestep: usize,
    pub h: usize,
    pub w: usize,
    tokens: Tensor,
}

impl TokenGrid {
    /// `tokens` must be `(h·w) × d`.
    pub fn new(
        frame: usize,
        layer: usize,
        timestep: usize,
        h: usize,
        w: usize,
        tokens: Tensor,
    ) -> Result<Self> {
        let (rows, _) = tokens.shape2()?;
        if rows != h * w {
            return Err(Error::shape(format!(
                "token grid {h}x{w} needs {} rows, got {rows}",
                h * w
            )));
        }
        Ok(Self {
            frame,
            layer,
            timestep,
            h,
            w,
            tokens,
        })
    }

    /// Builds a grid from an `h × w × d` tensor (the on-disk layout).
    pub fn from_hwd(frame: usize, layer: usize, timestep: usize, t: Tensor) -> Result<Self> {
        let [h, w, d] = t.dims()[..] else {
            return Err(Error::shape(format!(
                "token tensor must be h×w×d, got {:?}",
                t.dims()
            )));
        };
        Self::new(frame, layer, timestep, h, w, t.into_reshaped(&[h * w, d])?)
    }

    /// `h × w × d` view for serialization.
    pub fn to_hwd(&self) -> Tensor {
        self.tokens
            .reshape(&[self.h, self.w, self.dim()])
            .expect("grid invariant")
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn token(&self, p: usize) -> &[f32] {
        self.tokens.row(p)
    }

    /// Same metadata, new tokens.
    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(
            self.frame,
            self.layer,
            self.timestep,
            self.h,
            self.w,
            tokens,
        )
    }
}

/// Per-frame queries, keys and values for one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    frame_ids: Vec<usize>,
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    head_dim: usize,
}

impl AttentionInputs {
    /// `frame_ids` must be nonempty and strictly increasing; `q[j]`, `k[j]`,
    /// `v[j]` belong to `frame_ids[j]`.
    pub fn new(
        frame_ids: Vec<usize>,
        q: Vec<Tensor>,
        k: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        if frame_ids.is_empty() {
            return Err(Error::arg("attention needs at least one frame"));
        }
        if frame_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg(format!(
                "frame ids must be strictly increasing, got {frame_ids:?}"
            )));
        }
        let n = frame_ids.len();
        if q.len() != n || k.len() != n || v.len() != n {
            return Err(Error::shape("q/k/v count differs from frame count"));
        }
        let (_, head_dim) = q[0].shape2()?;
        for j in 0..n {
            let (qr, qd) = q[j].shape2()?;
            let (kr, kd) = k[j].shape2()?;
            let (vr, vd) = v[j].shape2()?;
            if qd != head_dim || kd != head_dim || vd != head_dim {
                return Err(Error::shape(format!(
                    "frame {}: q/k/v widths {qd}/{kd}/{vd}, expected {head_dim}",
                    frame_ids[j]
                )));
            }
            if kr != vr {
                return Err(Error::shape(format!(
                    "frame {}: {kr} keys but {vr} values",
                    frame_ids[j]
                )));
            }
            let _ = qr;
        }
        Ok(Self {
            frame_ids,
            q,
            k,
            v,
            head_dim,
        })
    }

    pub fn single(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        Self::new(vec![0], vec![q], vec![k], vec![v])
    }

    pub fn frame_ids(&self) -> &[usize] {
        &self.frame_ids
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn position(&self, frame: usize) -> Result<usize> {
        self.frame_ids
            .iter()
            .position(|&f| f == frame)
            .ok_or_else(|| {
                Error::arg(format!(
                    "query frame {frame} not among {:?}",
                    self.frame_ids
                ))
            })
    }
}

/// `softmax(q · kᵀ / √d)`.
pub fn attention_matrix(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, d) = q.shape2()?;
    let logits = q.matmul(&k.transpose()?)?;
    let scale = 1.0 / (d as f32).sqrt();
    softmax_rows(&logits.scale(scale))
}

/// Plain self-attention on a single frame: `softmax(QKᵀ/√d) · V`.
pub fn self_attention(inp: &AttentionInputs) -> Result<Tensor> {
    if inp.frame_ids.len() != 1 {
        return Err(Error::arg(format!(
            "self_attention takes one frame, got {}",
            inp.frame_ids.len()
        )));
    }
    attention_matrix(&inp.q[0], &inp.k[0])?.matmul(&inp.v[0])
}

/// The query frame's queries attend over the keys and values of every frame
/// in `inp`, concatenated in ascending frame order.
pub fn extended_attention(inp: &AttentionInputs, query_frame: usize) -> Result<Tensor> {
    let qi = inp.position(query_frame)?;
    let ks: Vec<&Tensor> = inp.k.iter().collect();
    let vs: Vec<&Tensor> = inp.v.iter().collect();
    let k = Tensor::concat_rows(&ks)?;
    let v = Tensor::concat_rows(&vs)?;
    attention_matrix(&inp.q[qi], &k)?.matmul(&v)
}

/// Projection weights of one self-attention layer, all `d × d`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

impl AttentionWeights {
    pub fn zeros(d: usize) -> Self {
        Self {
            query: Tensor::zeros(&[d, d]),
            key: Tensor::zeros(&[d, d]),
            value: Tensor::zeros(&[d, d]),
            output: Tensor::zeros(&[d, d]),
        }
    }

    /// Gaussian init with standard deviation `gain / √d`.
    pub fn random(d: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (d as f64).sqrt();
        Self {
            query: rng.normal_tensor(&[d, d], std),
            key: rng.normal_tensor(&[d, d], std),
            value: rng.normal_tensor(&[d, d], std),
            output: rng.normal_tensor(&[d, d], std),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.dims()[0]
    }
}

/// Which tokens an observer records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSite {
    /// Block input, before the query/key/value projections.
    Input,
    /// Attention output after the output projection, before the residual.
    #[default]
    Output,
}

/// Classifier-free guidance branch a forward pass belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Cond,
    Uncond,
}

/// Where a hook fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookSite {
    pub frame: usize,
    pub layer: usize,
    pub branch: Branch,
}

/// Observes tokens at a hook point. Must be reentrant.
pub trait TokenObserver: Sync {
    fn observe(&self, site: HookSite, tokens: &Tensor);
}

/// Substitutes the hook-point tokens. `Ok(None)` keeps the generated tokens.
pub trait TokenReplacer: Sync {
    fn replace(&self, site: HookSite, generated: &Tensor) -> Result<Option<Tensor>>;
}

#[derive(Clone, Copy, Default)]
pub struct Hooks<'a> {
    pub observer: Option<&'a dyn TokenObserver>,
    pub observe_site: TokenSite,
    pub replacer: Option<&'a dyn TokenReplacer>,
}

impl<'a> Hooks<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn observe(observer: &'a dyn TokenObserver, site: TokenSite) -> Self {
        Self {
            observer: Some(observer),
            observe_site: site,
            replacer: None,
        }
    }

    pub fn replace(replacer: &'a dyn TokenReplacer) -> Self {
        Self {
            observer: None,
            observe_site: TokenSite::Output,
            replacer: Some(replacer),
        }
    }
}

/// Observer that keeps every tensor it sees, keyed by hook site.
#[derive(Default)]
pub struct TokenRecorder {
    seen: Mutex<BTreeMap<HookSite, Tensor>>,
}

impl TokenRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, site: HookSite) -> Option<Tensor> {
        self.seen.lock().unwrap().get(&site).cloned()
    }

    pub fn into_map(self) -> BTreeMap<HookSite, Tensor> {
        self.seen.into_inner().unwrap()
    }
}

impl TokenObserver for TokenRecorder {
    fn observe(&self, site: HookSite, tokens: &Tensor) {
        self.seen.lock().unwrap().insert(site, tokens.clone());
    }
}

/// Replays previously recorded tokens at matching sites.
pub struct TokenReplay(pub BTreeMap<HookSite, Tensor>);

impl TokenReplacer for TokenReplay {
    fn replace(&self, site: HookSite, _generated: &Tensor) -> Result<Option<Tensor>> {
        Ok(self.0.get(&site).cloned())
    }
}

fn finish_block(
    x: &TokenGrid,
    attended: Tensor,
    weights: &AttentionWeights,
    branch: Branch,
    hooks: &Hooks,
) -> Result<TokenGrid> {
    let site = HookSite {
        frame: x.frame,
        layer: x.layer,
        branch,
    };
    let mut out = attended.matmul(&weights.output)?;
    if let (Some(obs), TokenSite::Output) = (hooks.observer, hooks.observe_site) {
        obs.observe(site, &out);
    }
    if let Some(rep) = hooks.replacer {
        if let Some(sub) = rep.replace(site, &out)? {
            if sub.dims() != out.dims() {
                return Err(Error::shape(format!(
                    "replacement hook at frame {} layer {} returned {:?}, expected {:?}",
                    x.frame,
                    x.layer,
                    sub.dims(),
                    out.dims()
                )));
            }
            out = sub;
        }
    }
    x.with_tokens(x.tokens().add(&out)?)
}

fn observe_input(x: &TokenGrid, branch: Branch, hooks: &Hooks) {
    if let (Some(obs), TokenSite::Input) = (hooks.observer, hooks.observe_site) {
        let site = HookSite {
            frame: x.frame,
            layer: x.layer,
            branch,
        };
        obs.observe(site, x.tokens());
    }
}

/// One residual self-attention block on a single frame.
pub fn attention_block(
    x: &TokenGrid,
    weights: &AttentionWeights,
    branch: Branch,
    hooks: &Hooks,
) -> Result<TokenGrid> {
    check_width(x, weights)?;
    observe_input(x, branch, hooks);
    let t = x.tokens();
    let inp = AttentionInputs::single(
        t.matmul(&weights.query)?,
        t.matmul(&weights.key)?,
        t.matmul(&weights.value)?,
    )?;
    let attended = self_attention(&inp)?;
    finish_block(x, attended, weights, branch, hooks)
}

/// Residual extended-attention block over a set of frames: every frame's
/// queries attend over the keys and values of all frames in `xs`.
///
/// `xs` must be ordered by strictly increasing frame index.
pub fn extended_attention_block(
    xs: &[TokenGrid],
    weights: &AttentionWeights,
    branch: Branch,
    hooks: &Hooks,
) -> Result<Vec<TokenGrid>> {
    let mut ids = Vec::with_capacity(xs.len());
    let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for x in xs {
        check_width(x, weights)?;
        observe_input(x, branch, hooks);
        ids.push(x.frame);
        qs.push(x.tokens().matmul(&weights.query)?);
        ks.push(x.tokens().matmul(&weights.key)?);
        vs.push(x.tokens().matmul(&weights.value)?);
    }
    let inp = AttentionInputs::new(ids, qs, ks, vs)?;
    xs.iter()
        .map(|x| {
            let attended = extended_attention(&inp, x.frame)?;
            finish_block(x, attended, weights, branch, hooks)
        })
        .collect()
}

fn check_width(x: &TokenGrid, weights: &AttentionWeights) -> Result<()> {
    if x.dim() != weights.dim() {
        return Err(Error::shape(format!(
            "tokens of width {} for a layer of width {}",
            x.dim(),
            weights.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct scalar evaluation of softmax(q kᵀ/√d) v, independent of the
    /// tensor kernels.
    fn scalar_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (nq, d) = q.shape2().unwrap();
        let (nk, _) = k.shape2().unwrap();
        let mut out = vec![0.0; nq * d];
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| {
                    (0..d)
                        .map(|c| q.row(i)[c] as f64 * k.row(j)[c] as f64)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for c in 0..d {
                    out[i * d + c] += ej / s * v.row(j)[c] as f64;
                }
            }
        }
        out
    }

    fn assert_close(got: &Tensor, want: &[f64], tol: f64) {
        for (g, w) in got.data().iter().zip(want) {
            assert!((*g as f64 - w).abs() <= tol, "{g} vs {w}");
        }
    }

    #[test]
    fn single_token_returns_value() {
        let q = Tensor::new(vec![1, 3], vec![5.0, -1.0, 2.0]).unwrap();
        let k = Tensor::new(vec![1, 3], vec![0.3, 9.0, 1.0]).unwrap();
        let v = Tensor::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let out = self_attention(&AttentionInputs::single(q, k, v.clone()).unwrap()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn orthogonal_query_averages_identical_values() {
        let q = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![-3.0, 0.0]]).unwrap();
        let row = vec![0.25, -4.0];
        let v = Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let out = self_attention(&AttentionInputs::single(q, k, v).unwrap()).unwrap();
        assert_close(&out, &[0.25, -4.0], 1e-6);
    }

    #[test]
    fn random_case_matches_scalar_loop() {
        let mut rng = Rng::new(8);
        let q = rng.normal_tensor(&[5, 4], 1.0);
        let k = rng.normal_tensor(&[5, 4], 1.0);
        let v = rng.normal_tensor(&[5, 4], 1.0);
        let want = scalar_attention(&q, &k, &v);
        let out = self_attention(&AttentionInputs::single(q, k, v).unwrap()).unwrap();
        assert_close(&out, &want, 1e-6);
    }

    #[test]
    fn extended_with_one_frame_is_self_attention() {
        let mut rng = Rng::new(2);
        let q = rng.normal_tensor(&[6, 4], 1.0);
        let k = rng.normal_tensor(&[6, 4], 1.0);
        let v = rng.normal_tensor(&[6, 4], 1.0);
        let inp = AttentionInputs::new(vec![3], vec![q], vec![k], vec![v]).unwrap();
        let a = extended_attention(&inp, 3).unwrap();
        let b = self_attention(&inp).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
    }

    #[test]
    fn extended_over_duplicated_frames_equals_single() {
        let mut rng = Rng::new(4);
        let q = rng.normal_tensor(&[6, 4], 1.0);
        let k = rng.normal_tensor(&[6, 4], 1.0);
        let v = rng.normal_tensor(&[6, 4], 1.0);
        let single =
            self_attention(&AttentionInputs::single(q.clone(), k.clone(), v.clone()).unwrap())
                .unwrap();
        let inp = AttentionInputs::new(
            vec![0, 1, 2],
            vec![q.clone(), q.clone(), q],
            vec![k.clone(), k.clone(), k],
            vec![v.clone(), v.clone(), v],
        )
        .unwrap();
        for f in 0..3 {
            let out = extended_attention(&inp, f).unwrap();
            assert!(out.max_abs_diff(&single).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn extended_matches_concatenation_oracle() {
        let mut rng = Rng::new(6);
        let q: Vec<Tensor> = (0..2).map(|_| rng.normal_tensor(&[4, 3], 1.0)).collect();
        let k: Vec<Tensor> = (0..2).map(|_| rng.normal_tensor(&[4, 3], 1.0)).collect();
        let v: Vec<Tensor> = (0..2).map(|_| rng.normal_tensor(&[4, 3], 1.0)).collect();
        let kc = Tensor::concat_rows(&[&k[0], &k[1]]).unwrap();
        let vc = Tensor::concat_rows(&[&v[0], &v[1]]).unwrap();
        let inp = AttentionInputs::new(vec![2, 9], q.clone(), k, v).unwrap();
        for (j, f) in [2, 9].into_iter().enumerate() {
            let want = scalar_attention(&q[j], &kc, &vc);
            assert_close(&extended_attention(&inp, f).unwrap(), &want, 1e-6);
        }
    }

    #[test]
    fn extended_rejects_absent_query_frame() {
        let t = Tensor::zeros(&[2, 2]);
        let inp = AttentionInputs::new(vec![1], vec![t.clone()], vec![t.clone()], vec![t]).unwrap();
        assert!(matches!(
            extended_attention(&inp, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn inputs_reject_unsorted_frames() {
        let t = Tensor::zeros(&[2, 2]);
        let r = AttentionInputs::new(
            vec![2, 1],
            vec![t.clone(), t.clone()],
            vec![t.clone(), t.clone()],
            vec![t.clone(), t],
        );
        assert!(r.is_err());
    }

    fn grid(rng: &mut Rng, frame: usize) -> TokenGrid {
        TokenGrid::new(frame, 0, 0, 2, 3, rng.normal_tensor(&[6, 4], 1.0)).unwrap()
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let mut rng = Rng::new(1);
        let x = grid(&mut rng, 0);
        let y = attention_block(
            &x,
            &AttentionWeights::zeros(4),
            Branch::Cond,
            &Hooks::none(),
        )
        .unwrap();
        assert_eq!(y, x);
    }

    struct Zeros;
    impl TokenReplacer for Zeros {
        fn replace(&self, _: HookSite, g: &Tensor) -> Result<Option<Tensor>> {
            Ok(Some(Tensor::zeros(g.dims())))
        }
    }

    struct WrongShape;
    impl TokenReplacer for WrongShape {
        fn replace(&self, _: HookSite, _: &Tensor) -> Result<Option<Tensor>> {
            Ok(Some(Tensor::zeros(&[1, 1])))
        }
    }

    #[test]
    fn zero_replacement_leaves_residual_only() {
        let mut rng = Rng::new(1);
        let x = grid(&mut rng, 0);
        let w = AttentionWeights::random(4, 1.0, &mut rng);
        let y = attention_block(&x, &w, Branch::Cond, &Hooks::replace(&Zeros)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn wrong_shape_replacement_is_rejected() {
        let mut rng = Rng::new(1);
        let x = grid(&mut rng, 0);
        let w = AttentionWeights::random(4, 1.0, &mut rng);
        let r = attention_block(&x, &w, Branch::Cond, &Hooks::replace(&WrongShape));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn record_then_replay_is_bit_exact() {
        let mut rng = Rng::new(12);
        let x = grid(&mut rng, 5);
        let w = AttentionWeights::random(4, 1.0, &mut rng);
        let rec = TokenRecorder::new();
        let a = attention_block(
            &x,
            &w,
            Branch::Cond,
            &Hooks::observe(&rec, TokenSite::Output),
        )
        .unwrap();
        let replay = TokenReplay(rec.into_map());
        let b = attention_block(&x, &w, Branch::Cond, &Hooks::replace(&replay)).unwrap();
        assert!(a.tokens().bit_eq(b.tokens()));
    }

    #[test]
    fn input_site_records_block_input() {
        let mut rng = Rng::new(12);
        let x = grid(&mut rng, 1);
        let w = AttentionWeights::random(4, 1.0, &mut rng);
        let rec = TokenRecorder::new();
        attention_block(
            &x,
            &w,
            Branch::Uncond,
            &Hooks::observe(&rec, TokenSite::Input),
        )
        .unwrap();
        let site = HookSite {
            frame: 1,
            layer: 0,
            branch: Branch::Uncond,
        };
        assert_eq!(rec.get(site).unwrap(), *x.tokens());
    }

    #[test]
    fn extended_block_with_one_frame_equals_plain_block() {
        let mut rng = Rng::new(30);
        let x = grid(&mut rng, 2);
        let w = AttentionWeights::random(4, 1.0, &mut rng);
        let a = attention_block(&x, &w, Branch::Cond, &Hooks::none()).unwrap();
        let b =
            extended_attention_block(std::slice::from_ref(&x), &w, Branch::Cond, &Hooks::none())
                .unwrap();
        assert!(a.tokens().bit_eq(b[0].tokens()));
    }
}
