//! Central finite differences and the comparison used to validate analytic
//! gradients.

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::encoder::{EncoderConfig, KarcConfig};
use crate::error::Result;
use crate::kb::{EntityRecord, EntityStore, MentionPriorTable, PriorEntry};
use crate::model::{Fusion, Model, ModelConfig, ModelInput, Resources, TextBranch};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{TextInstance, Vocab, UNK_TOKEN};
use crate::vision::{ImageTensor, VisionConfig, VisualInput};
use crate::vkac::LossForm;

/// Central-difference estimate `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Denominator floor for [`relative_error`]; below it the comparison is absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Largest per-coordinate `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Per-parameter comparison of analytic gradients against finite differences.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Checks every parameter of `store`.
///
/// `loss_and_grads` must compute the scalar loss for the given parameter
/// values and, when asked, leave `d(loss)/d(param)` in each parameter's
/// `grad` accumulator (zeroed beforehand by this function).
pub fn check_params(
    store: &mut ParamStore,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    mut loss_with_grads: impl FnMut(&mut ParamStore) -> Result<f64>,
) -> Result<Vec<ParamCheck>> {
    store.zero_grad();
    loss_with_grads(store)?;
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad.clone();
        let mut numeric = Tensor::zeros(analytic.shape());
        for i in 0..analytic.numel() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = loss(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = loss(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

/// Module groups reported by [`model_suite`], in print order.
pub const GROUPS: [&str; 7] = ["encoder", "karc", "vision", "vkac", "classifier", "static", "aux"];

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: &'static str,
    pub max_rel_err: f64,
    /// Scalars compared.
    pub checked: usize,
}

fn group_of(name: &str) -> &'static str {
    let table = [
        ("text.encoder.karc.", "karc"),
        ("text.encoder.", "encoder"),
        ("text.static", "static"),
        ("vision.", "vision"),
        ("vkac.", "vkac"),
        ("classifier.", "classifier"),
        ("aux.", "aux"),
    ];
    table
        .iter()
        .find(|(p, _)| name.starts_with(p))
        .map(|(_, g)| *g)
        .unwrap_or("other")
}

fn toy_resources(rng: &mut rng::Rng) -> Result<Resources> {
    let tokens = [UNK_TOKEN, "ap", "##ple", "go", "##ld", "red"];
    let vocab = Vocab::new(tokens.iter().map(|t| t.to_string()).collect())?;
    let mut entities = EntityStore::new();
    let mut priors = MentionPriorTable::new();
    for (mention, list) in [
        ("apple", vec![("fruit", 0.75), ("company", 0.25)]),
        ("gold", vec![("metal", 0.5), ("colour", 0.45), ("medal", 0.05)]),
    ] {
        let mut entries = Vec::new();
        for (id, prior) in list {
            let emb = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            entities.insert(EntityRecord::new(id, id, emb))?;
            entries.push(PriorEntry { entity_id: id.to_string(), prior });
        }
        priors.insert(mention, entries)?;
    }
    Ok(Resources { vocab, entities, priors })
}

fn toy_configs(vocab_size: usize) -> Vec<ModelConfig> {
    let encoder = EncoderConfig { num_layers: 2, insertion_layer: 1, heads: 2, vocab_size, max_seq_len: 16 };
    let karc = KarcConfig { tau: 0.1, beta: 0.0, candidates: 3, entity_dim: 3 };
    let vision = VisionConfig { input_size: 8, patch_size: 4, layers: 1, heads: 2, use_precomputed: false };
    let a = ModelConfig {
        dim: 4,
        num_classes: 3,
        text_branch: TextBranch::Knowledge,
        fusion: Fusion::Vkac,
        encoder,
        karc,
        vision,
        loss: LossForm::Scaled,
        aux_heads: false,
    };
    let mut b = a.clone();
    b.karc.beta = 0.5;
    b.encoder.insertion_layer = 2;
    b.vision.use_precomputed = true;
    b.loss = LossForm::Standard;
    let mut c = a.clone();
    c.text_branch = TextBranch::Static;
    c.fusion = Fusion::Mean;
    c.aux_heads = true;
    vec![a, b, c]
}

fn total_loss(model: &Model, inputs: &[(ModelInput, usize)], grads: Option<&mut ParamStore>) -> Result<f64> {
    let mut tape = model.tape();
    let mut total = None;
    for (input, y) in inputs {
        let mut l = model.loss(&mut tape, input, *y)?;
        if model.aux.is_some() {
            let aux = model.aux_loss(&mut tape, input, *y)?;
            l = tape.add(l, aux)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    // mean rather than sum keeps round-off in the differences small
    let total = tape.scale(total.expect("at least one input"), 1.0 / inputs.len() as f64);
    if let Some(store) = grads {
        tape.backward(total)?.accumulate_into(store, 1.0);
    }
    Ok(tape.value(total).data()[0])
}

/// Compares analytic and central-difference gradients for every parameter of
/// three tiny models that between them cover each module group.
pub fn model_suite(seed: u64, h: f64) -> Result<Vec<GroupError>> {
    let mut r = rng::derive(seed, &[0x67c]);
    let res = toy_resources(&mut r)?;
    let mut worst: Vec<GroupError> =
        GROUPS.iter().map(|&group| GroupError { group, max_rel_err: 0.0, checked: 0 }).collect();
    for (k, cfg) in toy_configs(res.vocab.len()).into_iter().enumerate() {
        let mut model = Model::new(cfg, rng::derive_seed(seed, &[k as u64]))?;
        let texts = |items: &[&str]| -> Result<Vec<TextInstance>> {
            items.iter().enumerate().map(|(i, t)| TextInstance::new(*t, i as u32)).collect()
        };
        let mut inputs = Vec::new();
        for (items, label) in [(vec!["apple", "red", "gold"], 0), (vec!["gold"], 2), (vec![], 1)] {
            let visual = if model.config.vision.use_precomputed {
                VisualInput::Feature(Tensor::row((0..model.config.dim).map(|_| r.random_range(-1.0..1.0)).collect()))
            } else {
                let px: Vec<f64> = (0..8 * 8 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
                VisualInput::Image(ImageTensor::from_fn(8, 8, |y, x, c| px[(y * 8 + x) * 3 + c]))
            };
            inputs.push((model.prepare(&res, &texts(&items)?, visual, false, 0)?, label));
        }
        let mut grads = model.store.clone();
        grads.zero_grad();
        total_loss(&model, &inputs, Some(&mut grads))?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let analytic = grads.get(id).grad.clone();
            let mut numeric = Tensor::zeros(analytic.shape());
            for i in 0..analytic.numel() {
                let orig = model.store.get(id).value.data()[i];
                model.store.get_mut(id).value.data_mut()[i] = orig + h;
                let plus = total_loss(&model, &inputs, None)?;
                model.store.get_mut(id).value.data_mut()[i] = orig - h;
                let minus = total_loss(&model, &inputs, None)?;
                model.store.get_mut(id).value.data_mut()[i] = orig;
                numeric.data_mut()[i] = (plus - minus) / (2.0 * h);
            }
            let group = group_of(&model.store.get(id).name);
            if let Some(g) = worst.iter_mut().find(|g| g.group == group) {
                g.max_rel_err = g.max_rel_err.max(relative_error(&analytic, &numeric));
                g.checked += analytic.numel();
            }
        }
    }
    Ok(worst)
}

type OpFn = fn(&mut Tape<'_>, Var) -> Result<Var>;

/// Tape operations checked by [`op_suite`]; each maps a `3 × 4` input to a tensor.
const OPS: [(&str, OpFn); 16] = [
    ("matmul", |t, v| {
        let vt = t.transpose(v)?;
        t.matmul(v, vt)
    }),
    ("matmul_bt", |t, v| t.matmul_bt(v, v)),
    ("add_sub", |t, v| {
        let s = t.scale(v, 0.3);
        let a = t.add(v, s)?;
        let g = t.tanh(v);
        t.sub(a, g)
    }),
    ("mul", |t, v| {
        let g = t.gelu(v);
        t.mul(v, g)
    }),
    ("add_row_mul_row", |t, v| {
        let r = t.slice_rows(v, 0, 1)?;
        let a = t.add_row(v, r)?;
        t.mul_row(a, r)
    }),
    ("transpose", |t, v| t.transpose(v)),
    ("softmax_rows", |t, v| t.softmax_rows(v)),
    ("layer_norm", |t, v| t.layer_norm(v)),
    ("gelu", |t, v| Ok(t.gelu(v))),
    ("tanh", |t, v| Ok(t.tanh(v))),
    ("log_clamped", |t, v| {
        let p = t.softmax_rows(v)?;
        Ok(t.log_clamped(p, 1e-12))
    }),
    ("concat", |t, v| {
        let a = t.slice_cols(v, 0, 2)?;
        let b = t.slice_cols(v, 2, 4)?;
        let c = t.concat_rows(&[a, b])?;
        t.concat_cols(&[c, c])
    }),
    ("gather_rows", |t, v| t.gather_rows(v, &[2, 0, 2])),
    ("mean_rows", |t, v| t.mean_rows(v)),
    ("sum", |t, v| Ok(t.sum(v))),
    ("pick", |t, v| t.pick(v, 1, 2)),
];

/// Gradient check of each tape operation on a random `3 × 4` input, reduced
/// to a scalar through a fixed random weighting. Returns `(op, error)` pairs.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng::derive(seed, &[0x0b5]);
    let mut random = |rows: usize, cols: usize| -> Result<Tensor> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
    };
    let mut out = Vec::with_capacity(OPS.len());
    for (name, op) in OPS {
        let x = random(3, 4)?;
        let weights = random(1, 64)?;
        let weigh = |tape: &mut Tape<'_>, y: Var| -> Result<Var> {
            let n = tape.value(y).numel();
            let w = Tensor::new(tape.shape(y).to_vec(), weights.data()[..n].to_vec())?;
            let w = tape.constant(w);
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        };
        let mut tape = Tape::detached();
        let xv = tape.variable(x.clone());
        let y = op(&mut tape, xv)?;
        let s = weigh(&mut tape, y)?;
        let analytic = tape.backward(s)?.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut failed = None;
        let numeric = finite_diff_grad(
            |xt| {
                let mut tape = Tape::detached();
                let xv = tape.constant(xt.clone());
                match op(&mut tape, xv).and_then(|y| weigh(&mut tape, y)) {
                    Ok(s) => tape.value(s).data()[0],
                    Err(e) => {
                        failed = Some(e);
                        f64::NAN
                    }
                }
            },
            &x,
            h,
        );
        if let Some(e) = failed {
            return Err(e);
        }
        out.push((name, relative_error(&analytic, &numeric)));
    }
    Ok(out)
}
