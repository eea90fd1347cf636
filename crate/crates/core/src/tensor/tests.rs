use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::new();
    let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_grad_is_ones_times_b_transpose() {
    let mut g = Graph::new();
    let a = g.leaf(t(&[2, 3], &[0.5, -1., 2., 1., 0., 3.]), true);
    let b = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
    let p = g.matmul(a, b).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    // row sums of B
    assert_eq!(g.grad(a).unwrap().data(), &[3., 7., 11., 3., 7., 11.]);
}

#[test]
fn softmax_uniform_and_stable() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0., 0., 0.]));
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[1000., 0.]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data()[0], 1.0);
    assert!(g.value(y).data()[1] < 1e-300);
    assert!(g.value(y).all_finite());
}

#[test]
fn softmax_axis_out_of_range() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([2, 2]));
    assert!(matches!(g.softmax(x, 2), Err(Error::Config(_))));
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 3], &[1., 2., 3., -1., 0., 5.]), true);
    let mask = key_mask(2, &[true, false, true]);
    let y = g.softmax_masked(x, &mask).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[4], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().all_finite());
}

#[test]
fn unfold2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    let u = g.unfold2d(x, 3).unwrap();
    assert_eq!(g.shape(u), &[4, 9]);
    assert_eq!(
        &g.value(u).data()[..9],
        &[0., 0., 0., 0., 1., 2., 0., 3., 4.]
    );

    let x = g.constant(Tensor::from_fn([2, 2, 3], |i| i as f64));
    let u = g.unfold2d(x, 1).unwrap();
    // row (h, w) == x[:, h, w]
    for p in 0..6 {
        assert_eq!(
            &g.value(u).data()[p * 2..p * 2 + 2],
            &[p as f64, 6.0 + p as f64]
        );
    }
    assert!(matches!(g.unfold2d(x, 2), Err(Error::Config(_))));
}

#[test]
fn unfold2d_gradient_counts_overlaps() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn([1, 5, 5], |i| i as f64 * 0.1), true);
    let u = g.unfold2d(x, 3).unwrap();
    let s = g.sum(u);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad.data()[2 * 5 + 2], 9.0);
    // corner pixel appears in 4 windows
    assert_eq!(grad.data()[0], 4.0);
}

#[test]
fn unfold1d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let u = g.unfold1d(x, 1).unwrap();
    assert_eq!(g.value(u).data(), &[1., 4., 2., 5., 3., 6.]);

    let x = g.constant(t(&[1, 3], &[5., 6., 7.]));
    let u = g.unfold1d(x, 2).unwrap();
    assert_eq!(g.value(u).data(), &[0., 5., 5., 6., 6., 7.]);

    let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let u = g.unfold1d(x, 3).unwrap();
    // token 0: [zeros(D), x0, x1]
    assert_eq!(&g.value(u).data()[..6], &[0., 0., 1., 3., 2., 4.]);
    assert!(matches!(g.unfold1d(x, 5), Err(Error::Config(_))));
}

#[test]
fn bilinear_examples() {
    let mut g = Graph::new();
    let src = Tensor::from_fn([2, 3, 4], |i| (i as f64).sin());
    let x = g.constant(src.clone());
    let y = g.bilinear_resize(x, 3, 4).unwrap();
    assert_eq!(g.value(y), &src);

    let x = g.constant(t(&[1, 1, 1], &[7.5]));
    let y = g.bilinear_resize(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[7.5; 4]);

    let x = g.constant(t(&[1, 2, 2], &[0., 2., 4., 6.]));
    let y = g.bilinear_resize(x, 4, 4).unwrap();
    let v = g.value(y).data();
    // sample points 0.25 / 0.75 of the input grid on the interior
    assert!((v[5] - 1.5).abs() < 1e-12);
    assert!((v[6] - 2.5).abs() < 1e-12);
    assert!((v[9] - 3.5).abs() < 1e-12);
    assert!((v[10] - 4.5).abs() < 1e-12);
    assert!(matches!(g.bilinear_resize(x, 0, 2), Err(Error::Config(_))));
}

#[test]
fn adaptive_pool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[1., 2., 3., 4.]));
    let p = g.adaptive_avg_pool1d(x, 4).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
    let p = g.adaptive_avg_pool1d(x, 2).unwrap();
    assert_eq!(g.value(p).data(), &[1.5, 3.5]);
    let p = g.adaptive_avg_pool1d(x, 1).unwrap();
    assert_eq!(g.value(p).data(), &[2.5]);
    assert!(g.adaptive_avg_pool1d(x, 5).is_err());
    assert!(g.adaptive_avg_pool1d(x, 0).is_err());
}

#[test]
fn attention_single_key_has_unit_weight() {
    let mut store = ParamStore::new();
    let mut rng = rand::rng();
    let attn = AttentionParams::new(&mut store, "a", 4, 3, 4, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let q = g.constant(Tensor::randn([4, 5], 1.0, &mut rng));
    let kv = g.constant(Tensor::randn([3, 1], 1.0, &mut rng));
    let out = attn.forward(&mut g, &store, q, kv, None).unwrap();
    for w in &out.weights {
        assert!(g.value(*w).data().iter().all(|&v| v == 1.0));
    }
    // every query column receives the same output
    let o = g.value(out.out);
    let (r, c) = o.rows_cols();
    for i in 0..r {
        for j in 1..c {
            assert!((o.data()[i * c + j] - o.data()[i * c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_head_count_must_divide() {
    let mut store = ParamStore::new();
    let err = AttentionParams::new(&mut store, "a", 6, 6, 6, 4, &mut rand::rng()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn attention_matches_hand_computation() {
    // identity projections, one head, d = 2, two keys
    let mut store = ParamStore::new();
    let mut rng = rand::rng();
    let attn = AttentionParams::new(&mut store, "a", 2, 2, 2, 1, &mut rng).unwrap();
    for lin in [&attn.q, &attn.k, &attn.v, &attn.o] {
        store.get_mut(lin.weight).value = t(&[2, 2], &[1., 0., 0., 1.]);
    }
    let mut g = Graph::new();
    let q = g.constant(t(&[2, 1], &[1., 0.]));
    let kv = g.constant(t(&[2, 2], &[1., 0., 0., 2.]));
    let out = attn.forward(&mut g, &store, q, kv, None).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let (e0, e1) = ((1.0 * s).exp(), 0f64.exp());
    let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    let expect = [w0 * 1.0 + w1 * 0.0, w0 * 0.0 + w1 * 2.0];
    let got = g.value(out.out).data();
    assert!((got[0] - expect[0]).abs() < 1e-12);
    assert!((got[1] - expect[1]).abs() < 1e-12);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros([2]), true);
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn sum_grad_is_ones_and_disconnected_gets_none() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1., 2., 3.]), true);
    let other = g.leaf(t(&[3], &[1., 2., 3.]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);
    assert!(g.grad(other).is_none());
    // repeated backward accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., 2., 2.]);
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1., 2.]), true);
    let y = g.mul_scalar(x, 3.0);
    let z = g.stop_gradient(y);
    assert_eq!(g.value(z), g.value(y));
    let w = g.mul(z, z).unwrap();
    let s = g.sum(w);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
}

#[test]
fn bce_and_mse_values() {
    let mut g = Graph::new();
    let z = g.constant(t(&[2], &[0., 0.]));
    let l = g.bce_with_logits(z, &[1., 0.]).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(Tensor::zeros([1, 2]));
    let l = g.mse(a, b).unwrap();
    assert_eq!(g.value(l).item(), 2.5);
}

#[test]
fn param_grads_flow_into_grads() {
    let mut store = ParamStore::new();
    let id = store
        .register("w", t(&[2], &[1., 2.]), ParamKind::Weight)
        .unwrap();
    assert!(store
        .register("w", Tensor::zeros([1]), ParamKind::Weight)
        .is_err());
    let mut grads = Grads::zeros_like(&store);
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let y = g.mul(w, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    g.accumulate_param_grads(&mut grads);
    assert_eq!(grads.get(id), &[2., 4.]);
}
