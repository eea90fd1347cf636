//! End-to-end finite-difference check of the analytic parameter gradients of
//! the total loss.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{Example, Model};
use crate::synthdata::{generate_sample, GenConfig, Sample, Vocabulary};
use crate::tensor::{Grads, Graph, ParamId, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub config: ModelConfig,
    pub seed: u64,
    /// Number of scalar parameters to check; every parameter tensor
    /// contributes at least one.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Give the zero-initialized gate scales random values so every fusion
    /// parameter carries gradient.
    pub randomize_gates: bool,
    /// Test hook: add this offset to the analytic gradient of the named
    /// parameter.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            config: ModelConfig::micro(),
            seed: 0,
            samples: 256,
            step: 5e-5,
            tolerance: DEFAULT_TOLERANCE,
            randomize_gates: true,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleWorst {
    pub checked: usize,
    pub max_rel_err: f64,
    pub param: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub pass: bool,
    pub tolerance: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Check,
    pub per_module: BTreeMap<String, ModuleWorst>,
    pub failures: Vec<Check>,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} checked={} max_rel_err={:.3e} tol={:.0e} worst={}[{}]\n",
            if self.pass { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_err,
            self.tolerance,
            self.worst.param,
            self.worst.index
        );
        for (m, w) in &self.per_module {
            s += &format!(
                "  {m:<14} checked={:<4} max_rel_err={:.3e} ({})\n",
                w.checked, w.max_rel_err, w.param
            );
        }
        for f in &self.failures {
            s += &format!(
                "  failed {}[{}]: analytic {:.6e} numeric {:.6e}\n",
                f.param, f.index, f.analytic, f.numeric
            );
        }
        s
    }
}

/// Coarse module a parameter belongs to, for reporting.
pub fn module_of(name: &str) -> &'static str {
    let in_predictor = [
        "decoder.bg_delta",
        "decoder.stage1_proj",
        "decoder.pixel_head",
        "decoder.proto_proj",
    ];
    if name.starts_with("vision.") || name.starts_with("text.") {
        "encoders"
    } else if name.starts_with("fusion.") {
        "fusion"
    } else if in_predictor.iter().any(|p| name.starts_with(p)) {
        "predictor"
    } else if name.starts_with("decoder.") {
        "context"
    } else if name.starts_with("recon.") {
        "reconstruction"
    } else {
        "other"
    }
}

/// Denominator floor of [`relative_error`]. Gradients below it are judged on
/// absolute error (`tolerance * GRAD_FLOOR`). Parameters whose gradient is
/// zero by symmetry, such as biases cancelled by a softmax or a normalization,
/// show up to a few `1e-8` of finite-difference round-off on samples with a
/// large loss.
pub const GRAD_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn total_loss(model: &Model, ex: &Example, sample: &Sample, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let fwd = model.forward_with_target(&mut g, ex, Some(target))?;
    let l = model.losses(&mut g, &fwd, &sample.gt_mask)?;
    Ok(g.value(l.total).item())
}

pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = opts.config.clone();
    let mut model = Model::new(ModelConfig {
        seed: opts.seed,
        ..cfg.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    if opts.randomize_gates {
        let ids: Vec<ParamId> = model
            .store
            .iter()
            .filter(|(_, p)| p.name.ends_with("gate.scale"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            model.store.get_mut(id).value.data_mut()[0] = rng.random_range(0.5..1.5);
        }
    }
    let gen = GenConfig {
        image_size: cfg.image_size,
        max_tokens: cfg.max_tokens,
        count: 1,
        seed: opts.seed,
        ..GenConfig::default()
    };
    let (sample, _) = generate_sample(&gen, &Vocabulary::default(), 0)?;
    let ex = Example::from_sample(&sample);

    // The reconstruction target is a stop-gradient of the text encoder, so the
    // finite differences must see it as the constant the analytic pass does.
    let mut grads = Grads::zeros_like(&model.store);
    let target = {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &ex)?;
        let l = model.losses(&mut g, &fwd, &sample.gt_mask)?;
        g.backward(l.total)?;
        g.accumulate_param_grads(&mut grads);
        g.value(fwd.target).clone()
    };
    if let Some((name, offset)) = &opts.corrupt {
        if let Some(id) = model.store.id(name) {
            grads.get_mut(id).iter_mut().for_each(|g| *g += offset);
        }
    }

    // every tensor once, then uniform draws over all scalars
    let mut picks: Vec<(ParamId, usize)> = model
        .store
        .iter()
        .map(|(id, p)| (id, rng.random_range(0..p.value.numel())))
        .collect();
    let all: Vec<(ParamId, usize)> = model
        .store
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
        .collect();
    while picks.len() < opts.samples {
        picks.push(*all.choose(&mut rng).expect("model has parameters"));
    }

    let mut checks = Vec::with_capacity(picks.len());
    for (id, i) in picks {
        let orig = model.store.get(id).value.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            model.store.get_mut(id).value.data_mut()[i] = orig + offset;
            total_loss(&model, &ex, &sample, &target)
        };
        // fourth-order central stencil; the gate scales sit where the loss is
        // too curved for the plain two-point difference
        let h = opts.step;
        let d1 = at(h)? - at(-h)?;
        let d2 = at(2.0 * h)? - at(-2.0 * h)?;
        model.store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (8.0 * d1 - d2) / (12.0 * h);
        let analytic = grads.get(id)[i];
        checks.push(Check {
            param: model.store.get(id).name.clone(),
            index: i,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }

    let mut per_module: BTreeMap<String, ModuleWorst> = BTreeMap::new();
    for c in &checks {
        let w = per_module
            .entry(module_of(&c.param).to_string())
            .or_insert(ModuleWorst {
                checked: 0,
                max_rel_err: 0.0,
                param: c.param.clone(),
            });
        w.checked += 1;
        if c.rel_err > w.max_rel_err {
            w.max_rel_err = c.rel_err;
            w.param = c.param.clone();
        }
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .cloned()
        .expect("at least one check");
    // written negated so that a NaN error counts as a failure
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let failures: Vec<Check> = checks
        .iter()
        .filter(|c| !(c.rel_err <= opts.tolerance))
        .cloned()
        .collect();
    Ok(GradcheckReport {
        pass: failures.is_empty(),
        tolerance: opts.tolerance,
        checked: checks.len(),
        max_rel_err: worst.rel_err,
        worst,
        per_module,
        failures,
    })
}
