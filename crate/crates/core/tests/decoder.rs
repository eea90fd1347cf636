mod common;

use rand::Rng;
use refseg::decoder::{infer_mask, twinstream_loss, Decoder, MaskLogits};
use refseg::gradcheck::relative_error;
use refseg::image::Mask;
use refseg::model::Example;
use refseg::synthdata::{CLS_ID, PAD_ID};
use refseg::tensor::{Grads, Graph, ParamStore, Tensor, Var};
use refseg::train::AdamState;
use refseg::{Error, Model, ModelConfig};

use common::{max_abs, model_with_open_gates, rng, sample_for, total_loss_grads};

const TOKENS: [u32; 5] = [CLS_ID, 7, 12, 9, PAD_ID];

fn micro_decoder(seed: u64) -> (ModelConfig, ParamStore, Decoder) {
    let cfg = ModelConfig::micro();
    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut store, &cfg, &mut rng(seed)).unwrap();
    (cfg, store, decoder)
}

fn col(t: &Tensor, j: usize) -> Vec<f64> {
    let n = t.shape()[1];
    t.data().iter().skip(j).step_by(n).copied().collect()
}

#[test]
fn vcon_concatenates_the_reduced_stage_maps() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let dec = &model.decoder;
    let mut r = rng(1);
    let maps: Vec<Tensor> = cfg.stage_shapes()[1..]
        .iter()
        .map(|s| Tensor::randn(s.to_vec(), 1.0, &mut r))
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
    let vcon = dec.build_vcon(&mut g, &model.store, &vars).unwrap();
    assert_eq!(g.shape(vcon), [cfg.text_dim, 64 + 16 + 4]);
    assert_eq!(dec.segment_ranges(), [(0, 64), (64, 80), (80, 84)]);

    for ((m, proj), (start, end)) in maps.iter().zip(&dec.reduce).zip(dec.segment_ranges()) {
        let [c, h, w] = m.shape() else { unreachable!() };
        let flat = g.constant(m.clone().reshaped([*c, h * w]).unwrap());
        let direct = proj.forward(&mut g, &model.store, flat).unwrap();
        let part = g.slice_cols(vcon, start, end).unwrap();
        assert_eq!(g.value(part), g.value(direct));
    }
    assert!(matches!(
        dec.build_vcon(&mut g, &model.store, &vars[..2]),
        Err(Error::Usage(_))
    ));
}

#[test]
fn iterations_compose_the_hand_wired_blocks() {
    let (cfg, store, dec) = micro_decoder(2);
    let s = dec.total_positions();
    let mut r = rng(3);
    let (v0, l0) = (
        Tensor::randn([cfg.text_dim, s], 1.0, &mut r),
        Tensor::randn([cfg.text_dim, 5], 1.0, &mut r),
    );

    let mut g = Graph::new();
    let (vv, lv) = (g.constant(v0.clone()), g.constant(l0.clone()));
    let out = dec.interact(&mut g, &store, vv, lv, &TOKENS, 2).unwrap();

    let pad_mask = refseg::tensor::key_mask(s, &refseg::encoders::non_pad(&TOKENS));
    let seg_mask = dec.segment_mask();
    let (mut l, mut v) = (lv, vv);
    for _ in 0..2 {
        let x = dec.text_cross.forward(&mut g, &store, l, v, None).unwrap();
        let x = dec.text_ffn.forward(&mut g, &store, x).unwrap();
        l = dec.text_proj.forward(&mut g, &store, x).unwrap();
        let y = dec
            .vision_cross
            .forward(&mut g, &store, v, l, Some(&pad_mask))
            .unwrap();
        let (y, _) = dec
            .vision_self
            .forward(&mut g, &store, y, &seg_mask)
            .unwrap();
        v = dec.vision_proj.forward(&mut g, &store, y).unwrap();
    }
    assert_eq!(g.value(out.l_star), g.value(l));
    assert_eq!(g.value(out.v_star), g.value(v));
    assert_eq!(g.shape(out.l_star), [cfg.text_dim, 5]);
    assert_eq!(g.shape(out.v_star), [cfg.text_dim, s]);

    assert!(matches!(
        dec.interact(&mut g, &store, vv, lv, &TOKENS, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn segment_attention_never_crosses_stages() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let dec = &model.decoder;
    let s = dec.total_positions();
    let mut r = rng(4);
    let mut g = Graph::new();
    let vv = g.constant(Tensor::randn([cfg.text_dim, s], 1.0, &mut r));
    let lv = g.constant(Tensor::randn([cfg.text_dim, cfg.max_tokens], 1.0, &mut r));
    let tokens = sample_for(&cfg, 4, 0).tokens;
    let out = dec
        .interact(&mut g, &model.store, vv, lv, &tokens, 1)
        .unwrap();
    let ranges = dec.segment_ranges();
    let seg = |p: usize| ranges.iter().position(|&(a, b)| p >= a && p < b).unwrap();
    assert_eq!(out.segment_attn.len(), cfg.heads);
    for w in &out.segment_attn {
        let w = g.value(*w).data();
        for q in 0..s {
            let row = &w[q * s..(q + 1) * s];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (k, &a) in row.iter().enumerate() {
                if seg(q) != seg(k) {
                    assert_eq!(a, 0.0, "query {q} attends key {k}");
                }
            }
        }
    }
}

#[test]
fn background_prompt_pools_the_non_pad_columns() {
    let (cfg, mut store, dec) = micro_decoder(5);
    assert_eq!(cfg.bg_pool_sizes, [1, 4]);
    let d = cfg.text_dim;
    let text = Tensor::randn([d, 5], 1.0, &mut rng(6));
    let prompt = |store: &ParamStore, tokens: &[u32]| {
        let mut g = Graph::new();
        let t = g.constant(text.clone());
        let p = dec.build_bg_prompt(&mut g, store, t, tokens).unwrap();
        g.value(p).clone()
    };
    let mean = |cols: &[usize]| -> Vec<f64> {
        (0..d)
            .map(|r| cols.iter().map(|&c| text.data()[r * 5 + c]).sum::<f64>() / cols.len() as f64)
            .collect()
    };

    // four kept columns pool onto themselves at r = 4
    let p = prompt(&store, &[CLS_ID, 7, 12, 9, PAD_ID]);
    assert_eq!(p.shape(), [d, 5]);
    for (a, b) in col(&p, 0).iter().zip(mean(&[0, 1, 2, 3])) {
        assert!((a - b).abs() < 1e-12);
    }
    for j in 0..4 {
        assert_eq!(col(&p, 1 + j), col(&text, j));
    }

    // three kept columns spread over four bins repeat the first one
    let p = prompt(&store, &[CLS_ID, 7, PAD_ID, 9, PAD_ID]);
    for (a, b) in col(&p, 0).iter().zip(mean(&[0, 1, 3])) {
        assert!((a - b).abs() < 1e-12);
    }
    for (j, src) in [0, 0, 1, 3].into_iter().enumerate() {
        assert_eq!(col(&p, 1 + j), col(&text, src));
    }

    // the learned offset is added column by column
    let delta = Tensor::randn([d, 5], 1.0, &mut rng(7));
    store.get_mut(dec.bg_delta).value = delta.clone();
    let q = prompt(&store, &[CLS_ID, 7, PAD_ID, 9, PAD_ID]);
    for ((a, b), c) in q.data().iter().zip(p.data()).zip(delta.data()) {
        assert_eq!(*a, b + c);
    }

    let mut g = Graph::new();
    let t = g.constant(text.clone());
    assert!(matches!(
        dec.build_bg_prompt(&mut g, &store, t, &[PAD_ID; 5]),
        Err(Error::Usage(_))
    ));
}

#[test]
fn prototype_scaling_and_symmetry() {
    let (cfg, store, dec) = micro_decoder(8);
    let (h1, w1) = dec.stage1_hw;
    let mut r = rng(9);
    let mut g = Graph::new();
    let pixels = g.constant(Tensor::randn([cfg.text_dim, h1 * w1], 1.0, &mut r));
    let proto = Tensor::randn([cfg.text_dim, 1], 1.0, &mut r);
    let p1 = g.constant(proto.clone());
    let p2 = g.constant(Tensor::from_fn([cfg.text_dim, 1], |i| {
        2.0 * proto.data()[i]
    }));
    let a = dec.logits_from_projected(&mut g, pixels, p1).unwrap();
    let b = dec.logits_from_projected(&mut g, pixels, p2).unwrap();
    assert_eq!(g.shape(a), [cfg.image_size, cfg.image_size]);
    for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert_eq!(2.0 * x, *y);
    }

    // the same prototype on both streams ties everywhere, so nothing is foreground
    let fg = dec.logits_for(&mut g, &store, pixels, p1).unwrap();
    let bg = dec.logits_for(&mut g, &store, pixels, p1).unwrap();
    assert_eq!(g.value(fg), g.value(bg));
    assert!(infer_mask(g.value(fg), g.value(bg)).unwrap().is_empty());
}

fn bce(z: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[test]
fn twin_loss_is_the_weighted_branch_sum() {
    let mut r = rng(10);
    for lambda in [0.0, 0.3, 0.6, 1.0] {
        let mut g = Graph::new();
        let fg = g.constant(Tensor::randn([4, 4], 2.0, &mut r));
        let bg = g.constant(Tensor::randn([4, 4], 2.0, &mut r));
        let gt = Mask::from_labels(4, 4, (0..16).map(|_| r.random_range(0..2)).collect()).unwrap();
        let loss = twinstream_loss(&mut g, MaskLogits { fg, bg }, &gt, lambda, true).unwrap();
        let (lf, lb, ce) = (
            g.value(loss.fg).item(),
            g.value(loss.bg.unwrap()).item(),
            g.value(loss.ce).item(),
        );
        assert!((ce - (lambda * lf + (1.0 - lambda) * lb)).abs() < 1e-12);

        let only_fg = twinstream_loss(&mut g, MaskLogits { fg, bg }, &gt, lambda, false).unwrap();
        assert!(only_fg.bg.is_none());
        assert_eq!(g.value(only_fg.ce).item(), lf);
    }
}

#[test]
fn twin_loss_matches_hand_computed_cross_entropy() {
    let fg = [0.5, -1.0, 2.0, 0.0];
    let bg = [-0.25, 1.5, -3.0, 0.75];
    let labels = [1u8, 0, 1, 0];
    let mut g = Graph::new();
    let fv = g.constant(Tensor::new([2, 2], fg.to_vec()).unwrap());
    let bv = g.constant(Tensor::new([2, 2], bg.to_vec()).unwrap());
    let gt = Mask::from_labels(2, 2, labels.to_vec()).unwrap();
    let loss = twinstream_loss(&mut g, MaskLogits { fg: fv, bg: bv }, &gt, 0.6, true).unwrap();
    let hand_fg: f64 = (0..4)
        .map(|i| bce(fg[i], f64::from(labels[i])))
        .sum::<f64>()
        / 4.0;
    let hand_bg: f64 = (0..4)
        .map(|i| bce(bg[i], 1.0 - f64::from(labels[i])))
        .sum::<f64>()
        / 4.0;
    assert!((g.value(loss.fg).item() - hand_fg).abs() < 1e-12);
    assert!((g.value(loss.bg.unwrap()).item() - hand_bg).abs() < 1e-12);
    assert!((g.value(loss.ce).item() - (0.6 * hand_fg + 0.4 * hand_bg)).abs() < 1e-12);

    // confident correct logits cost almost nothing
    let sure =
        |sign: f64| Tensor::from_fn([2, 2], |i| sign * if labels[i] == 1 { 20.0 } else { -20.0 });
    let (fv, bv) = (g.constant(sure(1.0)), g.constant(sure(-1.0)));
    let loss = twinstream_loss(&mut g, MaskLogits { fg: fv, bg: bv }, &gt, 0.6, true).unwrap();
    assert!(g.value(loss.ce).item() < 1e-3);

    let wrong = Mask::new(3, 2);
    assert!(matches!(
        twinstream_loss(&mut g, MaskLogits { fg: fv, bg: bv }, &wrong, 0.6, true),
        Err(Error::Shape { .. })
    ));
    let mut not_binary = gt.clone();
    not_binary.data[0] = 2;
    assert!(matches!(
        twinstream_loss(
            &mut g,
            MaskLogits { fg: fv, bg: bv },
            &not_binary,
            0.6,
            true
        ),
        Err(Error::Usage(_))
    ));
}

#[test]
fn inference_takes_the_strictly_larger_logit() {
    let zeros = Tensor::zeros([3, 5]);
    assert!(infer_mask(&zeros, &zeros).unwrap().is_empty());
    let ones = Tensor::full([3, 5], 1.0);
    let all = infer_mask(&ones, &zeros).unwrap();
    assert_eq!((all.width, all.height, all.count()), (5, 3, 15));

    let mut r = rng(11);
    for _ in 0..20 {
        // dyadic values keep the shifted comparison exact
        let fg = Tensor::from_fn([6, 7], |_| f64::from(r.random_range(-16i32..16)) / 8.0);
        let bg = Tensor::from_fn([6, 7], |_| f64::from(r.random_range(-16i32..16)) / 8.0);
        let m = infer_mask(&fg, &bg).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(m.get(x, y), fg.data()[y * 7 + x] > bg.data()[y * 7 + x]);
            }
        }
        let c = f64::from(r.random_range(-8i32..8)) / 4.0;
        let shift = |t: &Tensor| Tensor::from_fn([6, 7], |i| t.data()[i] + c);
        assert_eq!(infer_mask(&shift(&fg), &shift(&bg)).unwrap(), m);
    }
    assert!(matches!(
        infer_mask(&zeros, &Tensor::zeros([5, 3])),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn segmentation_loss_falls_when_fitting_one_sample() {
    let cfg = ModelConfig {
        lr_encoder: 1e-3,
        lr_other: 1e-3,
        ..ModelConfig::micro()
    };
    let mut model = Model::new(cfg.clone()).unwrap();
    let sample = sample_for(&cfg, 12, 0);
    let ex = Example::from_sample(&sample);
    let mut adam = AdamState::new(&model);
    let mut ce = Vec::new();
    for _ in 0..50 {
        let mut grads = Grads::zeros_like(&model.store);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &ex).unwrap();
        let l = model.losses(&mut g, &fwd, &sample.gt_mask).unwrap();
        ce.push(g.value(l.ce).item());
        g.backward(l.total).unwrap();
        g.accumulate_param_grads(&mut grads);
        drop(g);
        adam.update(&mut model, &grads, 1e-3, 1e-3);
    }
    let (first, last) = (ce[0], ce[ce.len() - 1]);
    assert!(last < 0.5 * first, "L_ce {first} -> {last}");
}

/// Decoder-only pipeline from encoder outputs to the twin loss, checked
/// against central differences with a fourth-order stencil.
#[test]
fn decoder_gradients_match_finite_differences() {
    const STEP: f64 = 5e-5;
    let (cfg, mut store, dec) = micro_decoder(13);
    let mut r = rng(14);
    let delta = Tensor::randn([cfg.text_dim, cfg.bg_tokens], 0.5, &mut r);
    store.get_mut(dec.bg_delta).value = delta;
    let shapes = cfg.stage_shapes();
    let maps: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::randn(s.to_vec(), 1.0, &mut r))
        .collect();
    let text = Tensor::randn([cfg.text_dim, 5], 1.0, &mut r);
    let masked = Tensor::randn([cfg.text_dim, 5], 1.0, &mut r);
    let masked_tokens = [CLS_ID, 7, PAD_ID, 9, PAD_ID];
    let gt = Mask::from_labels(16, 16, (0..256).map(|_| r.random_range(0..2)).collect()).unwrap();

    #[allow(clippy::too_many_arguments)]
    fn forward<'a>(
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        dec: &Decoder,
        maps: &[Tensor],
        text: &Tensor,
        masked: &Tensor,
        masked_tokens: &[u32],
        gt: &Mask,
    ) -> Var {
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let vcon = dec.build_vcon(g, store, &vars[1..]).unwrap();
        let t = g.constant(text.clone());
        let out = dec.interact(g, store, vcon, t, &TOKENS, 2).unwrap();
        let m = g.constant(masked.clone());
        let bg = dec.build_bg_prompt(g, store, m, masked_tokens).unwrap();
        let logits = dec
            .predict_masks(g, store, vars[0], out.v_star, out.l_star, Some(bg))
            .unwrap();
        twinstream_loss(g, logits, gt, 0.6, true).unwrap().ce
    }
    let loss = |store: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let l = forward(
            &mut g,
            store,
            &dec,
            &maps,
            &text,
            &masked,
            &masked_tokens,
            &gt,
        );
        g.value(l).item()
    };

    let mut grads = Grads::zeros_like(&store);
    {
        let mut g = Graph::new();
        let l = forward(
            &mut g,
            &store,
            &dec,
            &maps,
            &text,
            &masked,
            &masked_tokens,
            &gt,
        );
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut grads);
    }

    let mut worst: (f64, String) = (0.0, String::new());
    let ids: Vec<_> = store
        .iter()
        .map(|(id, p)| (id, p.value.numel(), p.name.clone()))
        .collect();
    for (id, n, name) in ids {
        // a handful of entries per tensor keeps the check fast
        for i in (0..n).step_by(n.div_ceil(6)) {
            let orig = store.get(id).value.data()[i];
            let mut at = |offset: f64| {
                store.get_mut(id).value.data_mut()[i] = orig + offset;
                loss(&store)
            };
            let d1 = at(STEP) - at(-STEP);
            let d2 = at(2.0 * STEP) - at(-2.0 * STEP);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (8.0 * d1 - d2) / (12.0 * STEP);
            let e = relative_error(grads.get(id)[i], numeric);
            if e > worst.0 {
                worst = (e, name.clone());
            }
        }
    }
    assert!(
        worst.0 <= 1e-6,
        "max relative error {:e} at {}",
        worst.0,
        worst.1
    );
}

#[test]
fn every_decoder_parameter_receives_gradient() {
    let cfg = ModelConfig::default();
    let model = model_with_open_gates(cfg.clone(), 15);
    let grads = total_loss_grads(&model, &sample_for(&cfg, 15, 0));
    assert!(max_abs(grads.get(model.decoder.bg_delta)) > 0.0);
    assert!(common::assert_gradient_census(&model.store, &grads, "decoder.") > 20);
}
