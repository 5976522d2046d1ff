use msft_core::multiscale::{
    avg_downsample, build_multiscale_set, chained_len, direct_len, length_disagreements, token_avgpool, token_repeat,
    upsample_prediction, AlignmentMap, PadSide, ScaleIndexMap, ScaleSpec,
};
use msft_core::numerics::{Rng, Tensor};
use proptest::prelude::*;

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Alignment with exactly `s` fine tokens per coarse token.
fn uniform_pair(n_ctx: usize, n_hor: usize, s: usize) -> AlignmentMap {
    let map = ScaleIndexMap::new(&[(n_ctx * s, n_hor * s), (n_ctx, n_hor)]).unwrap();
    AlignmentMap::new(&map, s).unwrap()
}

#[test]
fn downsample_preserves_constants() {
    let mut rng = Rng::new(0);
    for _ in 0..100 {
        let c = rng.uniform_range(-1e3, 1e3);
        let len = 1 + rng.below(100);
        let s = 2 + rng.below(3);
        for side in [PadSide::Pre, PadSide::Post] {
            let y = avg_downsample(&vec![c; len], s, side).unwrap();
            assert_eq!(y.len(), len.div_ceil(s));
            for v in y {
                assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0), "{v} vs {c}");
            }
        }
    }
}

#[test]
fn avgpool_of_repeat_is_identity() {
    let mut rng = Rng::new(1);
    for s in 2..5 {
        let am = uniform_pair(3, 2, s);
        let pair = am.pair(0);
        assert!(pair.groups.iter().all(|g| g.len() == s));
        let x = rng.normal_tensor::<f64>(vec![5, 4], 1.0);
        let back = token_avgpool(&token_repeat(&x, pair).unwrap(), pair).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-14);
    }
}

#[test]
fn repeat_and_avgpool_are_adjoint_up_to_s() {
    let mut rng = Rng::new(2);
    for case in 0..100 {
        let s = 2 + case % 3;
        let (nc, nh) = (1 + rng.below(6), 1 + rng.below(6));
        let am = uniform_pair(nc, nh, s);
        let pair = am.pair(0);
        let d = 1 + rng.below(5);
        let x = rng.normal_tensor::<f64>(vec![nc + nh, d], 1.0);
        let y = rng.normal_tensor::<f64>(vec![(nc + nh) * s, d], 1.0);
        let lhs = dot(&token_repeat(&x, pair).unwrap(), &y);
        let rhs = s as f64 * dot(&x, &token_avgpool(&y, pair).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn chained_and_direct_lengths_agree() {
    let bad = length_disagreements(1..513, &[2, 3, 4], 4);
    assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(10)]);
}

#[test]
fn scale_lengths_follow_recurrence() {
    let set = build_multiscale_set(&vec![0.0f64; 96], None, 96, ScaleSpec::new(2, 2).unwrap()).unwrap();
    assert_eq!(set.lengths(), vec![(96, 96), (48, 48), (24, 24)]);
    let set = build_multiscale_set(&vec![0.0f64; 97], None, 5, ScaleSpec::new(3, 3).unwrap()).unwrap();
    let want: Vec<(usize, usize)> = (0..4).map(|i| (chained_len(97, 3, i), chained_len(5, 3, i))).collect();
    assert_eq!(set.lengths(), want);
}

#[test]
fn coarse_context_is_mean_of_fine_blocks() {
    let ctx: Vec<f64> = (0..8).map(f64::from).collect();
    let set = build_multiscale_set(&ctx, None, 4, ScaleSpec::new(1, 2).unwrap()).unwrap();
    assert_eq!(set.scales[1].context, vec![0.5, 2.5, 4.5, 6.5]);
}

proptest! {
    #[test]
    fn lengths_match_closed_form(len in 1usize..513, s in 2usize..5, i in 0usize..5) {
        prop_assert_eq!(chained_len(len, s, i), direct_len(len, s, i));
    }

    #[test]
    fn upsample_then_truncate_has_horizon_length(h in 1usize..200, s in 2usize..5, i in 0usize..4) {
        let n = chained_len(h, s, i);
        let y: Vec<f64> = (0..n).map(|v| v as f64).collect();
        let up = upsample_prediction(&y, s, i, h).unwrap();
        prop_assert_eq!(up.len(), h);
        let f = s.pow(i as u32);
        for (t, v) in up.iter().enumerate() {
            prop_assert_eq!(*v, (t / f) as f64);
        }
    }

    #[test]
    fn every_fine_token_maps_inside_coarse_scale(nc in 1usize..12, nh in 1usize..12, s in 2usize..4) {
        let map = ScaleIndexMap::new(&[(nc, nh), (nc.div_ceil(s), nh.div_ceil(s))]).unwrap();
        let am = AlignmentMap::new(&map, s).unwrap();
        let pair = am.pair(0);
        for (j, &q) in pair.fine_to_coarse.iter().enumerate() {
            prop_assert!(q < pair.n_coarse);
            prop_assert_eq!(j < nc, q < nc.div_ceil(s));
        }
    }
}
