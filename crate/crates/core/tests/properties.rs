use proptest::prelude::*;
use tokenflow::attention::TokenGrid;
use tokenflow::correspondence::{
    adjacent_keyframes, nn_field_blocked, nn_field_blocked_with, nn_field_bruteforce, Tiles,
};
use tokenflow::diffusion::{combine_guidance, ddim_update, patchify, unpatchify};
use tokenflow::evalkit::{
    latent_tokens, make_synthetic, pca_tokens, token_trajectory_variance, SyntheticKind,
    SyntheticSpec,
};
use tokenflow::pipeline::sample_keyframes;
use tokenflow::propagation::{blend_weight, tokenflow_propagate, BlendWeights, FrameFields, TBase};
use tokenflow::tensors::{decode_tensor, encode_tensor, Rng};
use tokenflow::Tensor;

fn grid(seed: u64, frame: usize, h: usize, w: usize, d: usize) -> TokenGrid {
    TokenGrid::new(
        frame,
        0,
        0,
        h,
        w,
        Rng::new(seed).normal_tensor(&[h * w, d], 1.0),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn blend_weight_range(i in 1usize..100, dm in 1usize..50, dp in 1usize..50) {
        let i = i + dm;
        let w = blend_weight(i, Some(i - dm), Some(i + dp)).unwrap();
        prop_assert!((0.5..=1.0 / (1.0 + (-1.0f64).exp())).contains(&w));
        prop_assert_eq!(blend_weight(i, None, Some(i + dp)).unwrap(), 1.0);
        prop_assert_eq!(blend_weight(i, Some(i - dm), None).unwrap(), 0.0);
    }

    #[test]
    fn propagated_tokens_stay_between_their_sources(
        seed in any::<u64>(),
        n in 2usize..12,
        h in 1usize..4,
        w in 1usize..4,
        d in 1usize..6,
    ) {
        let mut rng = Rng::new(seed);
        let mut keyframes: Vec<usize> = (0..n).filter(|_| rng.below(2) == 0).collect();
        if keyframes.is_empty() {
            keyframes.push(0);
        }
        let grids = keyframes.iter().map(|&k| grid(seed ^ k as u64, k, h, w, d)).collect();
        let tbase = TBase::new(keyframes.clone(), grids).unwrap();
        for frame in 0..n {
            let weights = BlendWeights::for_frame(frame, &keyframes).unwrap();
            let field = |k: usize| tokenflow::correspondence::NNField {
                frame,
                target_keyframe: k,
                h,
                w,
                indices: (0..h * w).rev().collect(),
                distances: vec![0.0; h * w],
            };
            let fields = FrameFields {
                minus: weights.neighbors.minus.map(field),
                plus: weights.neighbors.plus.map(field),
            };
            let out = tokenflow_propagate(&tbase, &fields, &weights, frame).unwrap();
            for p in 0..h * w {
                let q = h * w - 1 - p;
                let sources: Vec<&[f32]> = [weights.neighbors.minus, weights.neighbors.plus]
                    .into_iter()
                    .flatten()
                    .map(|k| tbase.grid(k).unwrap().token(q))
                    .collect();
                for c in 0..d {
                    let lo = sources.iter().map(|s| s[c]).fold(f32::INFINITY, f32::min);
                    let hi = sources.iter().map(|s| s[c]).fold(f32::NEG_INFINITY, f32::max);
                    let v = out.token(p)[c];
                    prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                }
            }
        }
    }

    #[test]
    fn frames_match_themselves(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, d in 2usize..16) {
        let g = grid(seed, 0, h, w, d);
        let f = nn_field_blocked(&g, &g).unwrap();
        prop_assert_eq!(f.indices, (0..h * w).collect::<Vec<_>>());
        prop_assert!(f.distances.iter().all(|&x| x.abs() <= 1e-6));
    }

    #[test]
    fn blocked_matches_bruteforce_for_any_tiles(
        seed in any::<u64>(),
        n in 1usize..40,
        m in 1usize..40,
        d in 1usize..12,
        rows in 1usize..20,
        cols in 1usize..20,
    ) {
        let src = grid(seed, 1, 1, n, d);
        let key = grid(seed.wrapping_add(1), 0, 1, m, d);
        let a = nn_field_blocked_with(&src, &key, Tiles { rows, cols }).unwrap();
        let b = nn_field_bruteforce(&src, &key).unwrap();
        prop_assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn keyframes_are_evenly_spaced(seed in any::<u64>(), n in 1usize..64, interval in 1usize..20) {
        let ks = sample_keyframes(&mut Rng::new(seed), n, interval).unwrap();
        let step = interval.min(n);
        prop_assert!(!ks.is_empty());
        prop_assert!(ks[0] < step);
        prop_assert!(ks.windows(2).all(|w| w[1] - w[0] == step));
        prop_assert!(*ks.last().unwrap() < n && ks.last().unwrap() + step >= n);
        for i in 0..n {
            let nb = adjacent_keyframes(i, &ks).unwrap();
            prop_assert!(nb.minus.is_some() || nb.plus.is_some());
        }
    }

    #[test]
    fn tft_round_trip(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 0..4)) {
        let t = Rng::new(seed).normal_tensor(&dims, 3.0);
        let bytes = encode_tensor(&t);
        prop_assert_eq!(bytes.len(), 12 + 8 * dims.len() + 4 * t.len());
        prop_assert!(decode_tensor(&bytes).unwrap().bit_eq(&t));
        prop_assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn patchify_round_trip(seed in any::<u64>(), c in 1usize..5, gh in 1usize..5, gw in 1usize..5, p in 1usize..4) {
        let x = Rng::new(seed).normal_tensor(&[c, gh * p, gw * p], 1.0);
        let patches = patchify(&x, p).unwrap();
        prop_assert_eq!(patches.dims(), &[gh * gw, c * p * p]);
        prop_assert!(unpatchify(&patches, x.dims(), p).unwrap().bit_eq(&x));
    }

    #[test]
    fn guidance_is_affine(seed in any::<u64>(), s in 0.0f64..10.0) {
        let mut rng = Rng::new(seed);
        let u = rng.normal_tensor(&[16], 1.0);
        let c = rng.normal_tensor(&[16], 1.0);
        let g = combine_guidance(&u, &c, s).unwrap();
        for i in 0..16 {
            let want = u.data()[i] as f64 + s * (c.data()[i] as f64 - u.data()[i] as f64);
            prop_assert!((g.data()[i] as f64 - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn ddim_update_is_invertible_for_fixed_eps(seed in any::<u64>(), a in 0.01f64..0.999, b in 0.01f64..0.999) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[32], 1.0);
        let eps = rng.normal_tensor(&[32], 1.0);
        let there = ddim_update(&x, &eps, a, b).unwrap();
        let back = ddim_update(&there, &eps, b, a).unwrap();
        let tol = 1e-4 * (a / b).sqrt().max((b / a).sqrt()) * 10.0;
        prop_assert!(back.max_abs_diff(&x).unwrap() <= tol);
    }

    #[test]
    fn pca_images_lie_in_unit_range(seed in any::<u64>(), frames in 1usize..4, k in 1usize..4) {
        let grids: Vec<TokenGrid> = (0..frames).map(|f| grid(seed ^ f as u64, f, 3, 3, 5)).collect();
        let r = pca_tokens(&grids, k).unwrap();
        for img in &r.images {
            prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn noise_free_videos_have_constant_trajectories(
        seed in any::<u64>(),
        kind in proptest::sample::select(SyntheticKind::ALL.to_vec()),
        dx in -2isize..3,
        dy in -2isize..3,
        wrap in any::<bool>(),
    ) {
        let v = make_synthetic(&SyntheticSpec { kind, n: 4, h: 8, w: 8, shift: (dx, dy), wrap, seed, ..Default::default() }).unwrap();
        let grids = latent_tokens(&v.frames, 2).unwrap();
        prop_assert_eq!(token_trajectory_variance(&grids, &v).unwrap(), 0.0);
        let noisy = make_synthetic(&SyntheticSpec { noise: 0.1, ..v.spec.clone() }).unwrap();
        let grids = latent_tokens(&noisy.frames, 2).unwrap();
        prop_assert!(token_trajectory_variance(&grids, &noisy).unwrap() > 0.0);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), r in 1usize..8, c in 1usize..16, scale in 0.1f64..50.0) {
        let t = Rng::new(seed).normal_tensor(&[r, c], scale);
        let s = t.softmax_rows().unwrap();
        for i in 0..r {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn empty_tensor_round_trips() {
    let t = Tensor::zeros(&[0, 3]);
    assert!(decode_tensor(&encode_tensor(&t)).unwrap().bit_eq(&t));
}
