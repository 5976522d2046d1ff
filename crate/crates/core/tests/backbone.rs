use std::collections::BTreeSet;

use approx::assert_abs_diff_eq;
use msft_core::backbone::{
    apply_mask_token, attn_block, backbone_predict, in_project, init_backbone, out_project, BackboneConfig,
    BlockContext, LayerWeights, RopeCache,
};
use msft_core::numerics::{Graph, Rng, Tensor};
use msft_core::params::Binder;

fn tiny() -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        d: 8,
        heads: 2,
        patch: 4,
        ffn_mult: 2,
        eps: 1e-5,
        rope_base: 100.0,
    }
}

#[test]
fn in_project_row_sums() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]]));
    let w = g.constant(Tensor::ones(vec![4, 3]));
    let b = g.constant(Tensor::vector(vec![0.5, 0.0, -1.0]));
    let h = in_project(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(h).data(), &[10.5, 10.0, 9.0, 0.5, 0.0, -1.0]);
}

#[test]
fn mask_token_replaces_horizon_rows() {
    let mut g = Graph::<f64>::new();
    let h = g.constant(Tensor::new(vec![6, 2], (0..12).map(f64::from).collect()).unwrap());
    let m = g.constant(Tensor::vector(vec![-1.0, -2.0]));
    let out = apply_mask_token(&mut g, h, 3, 2..3, m).unwrap();
    assert_eq!(
        g.value(out).data(),
        &[0.0, 1.0, 2.0, 3.0, -1.0, -2.0, 6.0, 7.0, 8.0, 9.0, -1.0, -2.0]
    );
    assert!(apply_mask_token(&mut g, h, 3, 2..4, m).is_err());
}

fn block_output(params: &msft_core::params::ParamStore<f64>, x: Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let cfg = tiny();
    let n = x.shape()[0];
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let w = LayerWeights::bind(&mut g, &mut b, 0).unwrap();
    let rope = RopeCache::new(cfg.head_dim(), cfg.rope_base).unwrap();
    let (cos, sin) = rope.tables((0..n).collect::<Vec<_>>().as_slice());
    let ctx = BlockContext { heads: cfg.heads, batch: 1, eps: cfg.eps, cos, sin, mask: None };
    let h = g.constant(x);
    let mut cap = Vec::new();
    let y = attn_block(&mut g, &w, h, &ctx, Some(&mut cap)).unwrap();
    (g.value(y).clone(), cap)
}

#[test]
fn single_token_attends_to_itself() {
    let params = init_backbone::<f64>(&tiny(), &mut Rng::new(0)).unwrap();
    let x = Rng::new(1).normal_tensor(vec![1, 8], 1.0);
    let (_, cap) = block_output(&params, x);
    assert_eq!(cap[0].data(), &[1.0, 1.0]);
}

#[test]
fn zero_value_and_ffn_output_make_block_identity() {
    let mut params = init_backbone::<f64>(&tiny(), &mut Rng::new(0)).unwrap();
    params.set("layers.0.attn.wv", Tensor::zeros(vec![8, 8])).unwrap();
    params.set("layers.0.ffn.w2", Tensor::zeros(vec![16, 8])).unwrap();
    let x = Rng::new(2).normal_tensor(vec![5, 8], 1.0);
    let (y, _) = block_output(&params, x.clone());
    assert!(y.bit_eq(&x));
}

#[test]
fn rope_scores_depend_on_offset_only() {
    let rope = RopeCache::new(8, 10_000.0).unwrap();
    let mut rng = Rng::new(3);
    let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let k: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for m in [0usize, 3, 11] {
        let base = dot(&rope.rotate(&q, m), &rope.rotate(&k, 0));
        for p in [0usize, 5, 17] {
            let s = dot(&rope.rotate(&q, p + m), &rope.rotate(&k, p));
            assert_abs_diff_eq!(s, base, epsilon = 1e-9);
        }
    }
    assert_eq!(rope.rotate(&q, 0), q);
}

#[test]
fn out_project_truncates_to_horizon() {
    let mut g = Graph::<f64>::new();
    let h = g.constant(Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap());
    let w = g.constant(Tensor::new(vec![2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros(vec![4]));
    let y = out_project(&mut g, h, 4, 2..4, 5, w, b).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 5]);
    assert_eq!(g.value(y).data(), &[4.0, 5.0, 4.0, 5.0, 6.0]);
    assert!(out_project(&mut g, h, 4, 2..4, 9, w, b).is_err());
}

#[test]
fn forward_is_deterministic_and_batch_consistent() {
    let params = init_backbone::<f32>(&tiny(), &mut Rng::new(4)).unwrap();
    let mut rng = Rng::new(5);
    let a: Vec<f32> = (0..13).map(|_| rng.normal() as f32).collect();
    let b: Vec<f32> = (0..13).map(|_| rng.normal() as f32).collect();
    let both = backbone_predict(&params, &tiny(), &[&a, &b], 7).unwrap();
    assert!(both.bit_eq(&backbone_predict(&params, &tiny(), &[&a, &b], 7).unwrap()));
    let single = backbone_predict(&params, &tiny(), &[&b], 7).unwrap();
    assert_eq!(both.shape(), &[2, 7]);
    for (x, y) in both.row(1).iter().zip(single.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn parameter_names_are_unique_and_complete() {
    let params = init_backbone::<f32>(&tiny(), &mut Rng::new(0)).unwrap();
    let names: BTreeSet<&str> = params.names().collect();
    assert_eq!(names.len(), params.len());
    for n in ["in_proj.weight", "mask_token", "final_norm.gamma", "out_proj.bias", "layers.1.ffn.w2"] {
        assert!(names.contains(n), "{n}");
    }
    assert_eq!(params.get("mask_token").unwrap().shape(), &[8]);
}
