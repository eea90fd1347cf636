//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refseg::model::Example;
use refseg::synthdata::{generate_sample, GenConfig, Sample, Vocabulary};
use refseg::tensor::{Grads, Graph, ParamId, ParamStore};
use refseg::{Model, ModelConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sample `index` of a corpus sized for `cfg`.
pub fn sample_for(cfg: &ModelConfig, seed: u64, index: usize) -> Sample {
    let gen = GenConfig {
        image_size: cfg.image_size,
        max_tokens: cfg.max_tokens,
        count: index + 1,
        seed,
        ..GenConfig::default()
    };
    generate_sample(&gen, &Vocabulary::default(), index)
        .unwrap()
        .0
}

/// Model whose zero-initialized gate scales are replaced by values in
/// `[0.5, 1.5)`, so every fusion parameter affects the output.
pub fn model_with_open_gates(cfg: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(cfg).unwrap();
    let mut r = rng(seed);
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with("gate.scale"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        model.store.get_mut(id).value.data_mut()[0] = r.random_range(0.5..1.5);
    }
    model
}

/// Parameter gradients of the total loss on one sample.
pub fn total_loss_grads(model: &Model, sample: &Sample) -> Grads {
    let mut grads = Grads::zeros_like(&model.store);
    let mut g = Graph::new();
    let fwd = model
        .forward(&mut g, &Example::from_sample(sample))
        .unwrap();
    let l = model.losses(&mut g, &fwd, &sample.gt_mask).unwrap();
    g.backward(l.total).unwrap();
    g.accumulate_param_grads(&mut grads);
    grads
}

pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Parameters whose gradient is exactly zero by construction: a key bias
/// shifts every score of a query equally and cancels in the softmax; a gate
/// projection bias cancels in the instance norm; a pixel projection bias adds
/// a per-token constant that cancels in the softmax over pixels and then in
/// the text gate's instance norm.
pub fn gradient_vanishes_by_symmetry(name: &str) -> bool {
    name.ends_with(".k.bias")
        || name.ends_with("gate.proj.bias")
        || name.ends_with("pixel_proj.bias")
}

/// Check a gradient census: symmetric-zero biases carry only round-off
/// relative to their layer's weight gradient, every other parameter has a
/// nonzero gradient. Returns the number of nonzero parameters seen.
pub fn assert_gradient_census(store: &ParamStore, grads: &Grads, prefix: &str) -> usize {
    let mut nonzero = 0;
    for (id, p) in store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        let m = max_abs(grads.get(id));
        assert!(m.is_finite(), "{}", p.name);
        if gradient_vanishes_by_symmetry(&p.name) {
            let weight = p.name.trim_end_matches("bias").to_string() + "weight";
            let w = max_abs(grads.get(store.id(&weight).unwrap()));
            assert!(
                m <= 1e-6 * w,
                "{} should have zero gradient: {m:e} vs weight {w:e}",
                p.name
            );
        } else {
            assert!(m > 0.0, "{} receives no gradient", p.name);
            nonzero += 1;
        }
    }
    nonzero
}
