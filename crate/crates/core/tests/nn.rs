use ccsp_core::graph::Graph;
use ccsp_core::nn::{cot_forward, Backbone, BackboneConfig, CcspBlock, CotConfig, CotLayer, Neck, NeckConfig};
use ccsp_core::params::{ParamId, ParamStore};
use ccsp_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

use support::*;

#[test]
fn cot_matches_sliding_window_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let c = [1, 2, 4][case % 3];
        let heads = if c % 2 == 0 && case % 2 == 0 { 2 } else { 1 };
        let k = if case % 5 == 0 { 5 } else { 3 };
        let config = CotConfig { kernel_size: k, reduction: 1 + case % 4, heads };
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let mut store = ParamStore::new(0);
        let layer = CotLayer::new(&mut store, "cot", c, config, &mut rng).unwrap();
        randomize(&mut store, 0.8, &mut rng);
        let x = random_input(&[1, c, h, w], &mut rng);
        let got = cot_forward(&layer, &store, &x).unwrap();
        let want = reference_cot(&layer, &store, &x);
        assert!(got.max_abs_diff(&want) <= 1e-6, "case {case}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn attention_weights_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = CotConfig { kernel_size: 3, reduction: 2, heads: 2 };
    let mut store = ParamStore::new(0);
    let layer = CotLayer::new(&mut store, "cot", 4, config, &mut rng).unwrap();
    randomize(&mut store, 2.0, &mut rng);
    let x = random_input(&[2, 4, 5, 6], &mut rng);
    let a = layer.attention_weights(&store, &x).unwrap();
    assert_eq!(a.shape(), &[2, 18, 5, 6]);
    for b in 0..2 {
        for hd in 0..2 {
            for p in 0..30 {
                let s: f64 = (0..9).map(|j| a[(b * 18 + hd * 9 + j) * 30 + p]).sum();
                assert!((s - 1.0).abs() <= 1e-6);
                assert!((0..9).all(|j| a[(b * 18 + hd * 9 + j) * 30 + p] >= 0.0));
            }
        }
    }
}

#[test]
fn cot_shape_zero_weights_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new(0);
    let layer = CotLayer::new(&mut store, "cot", 8, CotConfig::default(), &mut rng).unwrap();
    let x = random_input(&[1, 8, 6, 6], &mut rng);
    assert_eq!(cot_forward(&layer, &store, &x).unwrap().shape(), &[1, 8, 6, 6]);

    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).fill(0.0);
    }
    let y = cot_forward(&layer, &store, &x).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let wrong = random_input(&[1, 4, 6, 6], &mut rng);
    assert!(matches!(cot_forward(&layer, &store, &wrong), Err(Error::Config(_))));
    let even = CotConfig { kernel_size: 4, ..Default::default() };
    assert!(matches!(CotLayer::new(&mut ParamStore::<f64>::new(0), "c", 8, even, &mut rng), Err(Error::Config(_))));
    let heads = CotConfig { heads: 3, ..Default::default() };
    assert!(matches!(CotLayer::new(&mut ParamStore::<f64>::new(0), "c", 8, heads, &mut rng), Err(Error::Config(_))));
}

fn ccsp_output(block: &CcspBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> ccsp_core::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = block.forward(&mut g, store, v)?;
    Ok(g.value(y).clone())
}

#[test]
fn ccsp_zero_branch_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new(0);
    let block = CcspBlock::new(&mut store, "b", 16, CotConfig::default(), &mut rng).unwrap();
    let x = random_input(&[2, 16, 8, 8], &mut rng);
    assert_eq!(ccsp_output(&block, &store, &x).unwrap().shape(), &[2, 16, 8, 8]);
    for id in block.param_ids() {
        store.get_mut(id).fill(0.0);
    }
    assert_eq!(ccsp_output(&block, &store, &x).unwrap(), x);
    assert!(matches!(ccsp_output(&block, &store, &random_input(&[1, 8, 4, 4], &mut rng)), Err(Error::Config(_))));
}

fn sum_grads(
    forward: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> ccsp_core::graph::Var,
) -> impl Fn(&ParamStore<f64>) -> std::collections::HashMap<ParamId, Tensor<f64>> {
    move |store| {
        let mut g = Graph::new();
        let y = forward(&mut g, store);
        let ones = Tensor::full(g.value(y).shape(), 1.0);
        let total = g.value(y).sum();
        let root = g.linearized(total, vec![(y, ones)]).unwrap();
        g.backward(root).unwrap().into_params()
    }
}

#[test]
fn ccsp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new(0);
    let block = CcspBlock::new(&mut store, "b", 4, CotConfig { kernel_size: 3, reduction: 2, heads: 2 }, &mut rng).unwrap();
    randomize(&mut store, 0.5, &mut rng);
    let x = random_input(&[1, 4, 4, 4], &mut rng);
    let fwd = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let v = g.input(x.clone());
        block.forward(g, s, v).unwrap()
    };
    check_param_gradients(
        &store,
        1e-4,
        1e-3,
        |s| ccsp_output(&block, s, &x).unwrap().sum(),
        sum_grads(fwd),
    );
}

#[test]
fn cot_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new(0);
    let layer = CotLayer::new(&mut store, "c", 8, CotConfig::default(), &mut rng).unwrap();
    randomize(&mut store, 0.5, &mut rng);
    let x = random_input(&[1, 8, 6, 6], &mut rng);
    let fwd = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let v = g.input(x.clone());
        layer.forward(g, s, v).unwrap()
    };
    // a nonlinear readout so the check is not just of linear sums
    let weights = random_input(&[1, 8, 6, 6], &mut rng);
    let loss = |s: &ParamStore<f64>| {
        let y = cot_forward(&layer, s, &x).unwrap();
        y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let grads = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let y = fwd(&mut g, s);
        let total = loss(s);
        let root = g.linearized(total, vec![(y, weights.clone())]).unwrap();
        g.backward(root).unwrap().into_params()
    };
    check_param_gradients(&store, 1e-4, 1e-3, loss, grads);
}

#[test]
fn backbone_strides_and_size_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new(0);
    let config = BackboneConfig { in_channels: 3, stem_width: 4, widths: [8, 16, 32], stage_depth: 1 };
    let bb = Backbone::new(&mut store, config, &mut rng).unwrap();
    for (h, w, want) in [(64, 64, [(8, 8), (4, 4), (2, 2)]), (96, 64, [(12, 8), (6, 4), (3, 2)])] {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 3, h, w], 0.5));
        let out = bb.forward(&mut g, &store, x).unwrap();
        for ((v, (gh, gw)), c) in out.scales.iter().zip(want).zip([8, 16, 32]) {
            assert_eq!(g.value(*v).shape(), &[1, c, gh, gw]);
        }
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 3, 60, 60], 0.5));
    assert!(matches!(bb.forward(&mut g, &store, x), Err(Error::Input(_))));
}

fn minimal_neck(rng: &mut ChaCha8Rng) -> (Neck, ParamStore<f64>) {
    let mut store = ParamStore::new(0);
    let config = NeckConfig {
        in_widths: [4, 8, 16],
        out_widths: [4, 8, 16],
        cot: CotConfig { kernel_size: 3, reduction: 4, heads: 1 },
    };
    let neck = Neck::new(&mut store, config, rng).unwrap();
    (neck, store)
}

#[test]
fn neck_preserves_spatial_sizes_and_rejects_wrong_scale_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new(0);
    let neck = Neck::new(&mut store, NeckConfig { out_widths: [8, 16, 24], ..Default::default() }, &mut rng).unwrap();
    let mut g = Graph::new();
    let scales: Vec<_> = [(16, 8), (32, 4), (64, 2)]
        .iter()
        .map(|&(c, s)| g.input(random_input(&[1, c, s, s], &mut rng)))
        .collect();
    let out = neck.forward_scales(&mut g, &store, &scales).unwrap();
    let shapes: Vec<_> = out.scales.iter().map(|v| g.value(*v).shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 8, 8, 8], vec![1, 16, 4, 4], vec![1, 24, 2, 2]]);
    assert!(matches!(neck.forward_scales(&mut g, &store, &scales[..2]), Err(Error::Config(_))));
}

#[test]
fn neck_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (neck, mut store) = minimal_neck(&mut rng);
    randomize(&mut store, 0.4, &mut rng);
    let inputs: Vec<Tensor<f64>> = [(4, 4), (8, 2), (16, 1)].iter().map(|&(c, s)| random_input(&[1, c, s, s], &mut rng)).collect();
    let readouts: Vec<Tensor<f64>> = inputs.iter().map(|t| random_input(t.shape(), &mut rng)).collect();
    let run = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        neck.forward_scales(g, s, &vars).unwrap().scales
    };
    let loss = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let outs = run(&mut g, s);
        outs.iter().zip(&readouts).map(|(v, r)| g.value(*v).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()).sum()
    };
    let grads = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let outs = run(&mut g, s);
        let total = outs.iter().zip(&readouts).map(|(v, r)| g.value(*v).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
        let root = g.linearized(total, outs.into_iter().zip(readouts.iter().cloned()).collect()).unwrap();
        g.backward(root).unwrap().into_params()
    };
    check_param_gradients(&store, 1e-4, 1e-3, loss, grads);
}

#[test]
fn batch_forward_equals_single_forwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new(0);
    let block = CcspBlock::new(&mut store, "b", 8, CotConfig::default(), &mut rng).unwrap();
    let a = random_input(&[1, 8, 6, 6], &mut rng);
    let b = random_input(&[1, 8, 6, 6], &mut rng);
    let both = ccsp_output(&block, &store, &Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap()).unwrap();
    let singles = Tensor::stack_batch(&[ccsp_output(&block, &store, &a).unwrap(), ccsp_output(&block, &store, &b).unwrap()]).unwrap();
    assert!(both.max_abs_diff(&singles) <= 1e-6);
}
