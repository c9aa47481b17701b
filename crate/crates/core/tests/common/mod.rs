#![allow(dead_code)]

use c3rec::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Relative error with a floor on the denominator so gradients that are
/// numerically zero compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Central-difference check of every input element of a scalar-valued tape
/// program. Returns the worst relative error.
pub fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap().to_vec();
        for j in 0..values[ti].numel() {
            let orig = values[ti].data()[j];
            values[ti].data_mut()[j] = orig + FD_STEP;
            let up = eval(&values);
            values[ti].data_mut()[j] = orig - FD_STEP;
            let down = eval(&values);
            values[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// `sum(x ⊙ w)` for a fixed pseudo-random weighting `w`, so every output
/// element receives a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(random_tensor(&shape, -1.0, 1.0, &mut r));
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

use c3rec::calibration::{weighted_loss_on_tape, AttributeTable};
use c3rec::data::{assemble_batch, build_training_windows, DatasetBundle};
use c3rec::model::{C3Model, Mode, ModelConfig, SequenceBatch, Variant};

pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        dim: 4,
        kernel_size: 2,
        head_kernel: 2,
        num_blocks: 1,
        max_len: 4,
        lambda: 0.5,
        dropout: 0.0,
        variant,
        ..ModelConfig::default()
    }
}

/// Five items over three attributes, two users whose longest windows span
/// four positions.
pub fn toy_bundle() -> DatasetBundle {
    let table = AttributeTable::from_attribute_sets(
        vec!["a".into(), "b".into(), "c".into()],
        &[vec![0], vec![1], vec![0, 2], vec![2], vec![1, 2]],
    )
    .unwrap();
    DatasetBundle::from_sequences(vec![vec![1, 3, 2, 5, 4, 1], vec![4, 4, 2, 1, 3, 5]], table)
        .unwrap()
}

pub fn toy_batch(bundle: &DatasetBundle) -> (SequenceBatch, Tensor) {
    let windows = build_training_windows(bundle);
    let picked: Vec<_> = windows
        .into_iter()
        .filter(|w| w.prefix_len == 4 || w.prefix_len == 2)
        .collect();
    assemble_batch(bundle, &picked, 4).unwrap()
}

/// Weighted objective on a fixed batch; with `grads`, also the analytic
/// gradient of every parameter in store order.
pub fn objective(
    model: &C3Model,
    bundle: &DatasetBundle,
    batch: &SequenceBatch,
    prefs: &Tensor,
    grads: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let out = model
        .forward_on_tape(&mut tape, batch, grads, &mut Mode::Eval)
        .unwrap();
    let hist = tape.constant(prefs.clone());
    let attrs = tape.constant(bundle.attribute_table.matrix());
    let terms = weighted_loss_on_tape(
        &mut tape,
        out.logits,
        out.probs,
        &batch.targets,
        hist,
        attrs,
        model.config().lambda,
    )
    .unwrap();
    let loss = tape.value(terms.total).item().unwrap();
    if !grads {
        return (loss, Vec::new());
    }
    tape.backward(terms.total).unwrap();
    let g = out
        .params
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    (loss, g)
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter element, with the offending parameter's name.
pub fn model_grad_check(variant: Variant, seed: u64) -> (f64, String) {
    let bundle = toy_bundle();
    let (batch, prefs) = toy_batch(&bundle);
    let mut model = C3Model::new(toy_config(variant), 5, seed).unwrap();
    let (_, analytic) = objective(&model, &bundle, &batch, &prefs, true);
    let ids: Vec<_> = model.store().ids().collect();
    let mut worst = (0.0, String::new());
    for (pi, id) in ids.into_iter().enumerate() {
        let n = model.store().get(id).numel();
        for j in 0..n {
            let orig = model.store().get(id).data()[j];
            model.store_mut().get_mut(id).data_mut()[j] = orig + FD_STEP;
            let (up, _) = objective(&model, &bundle, &batch, &prefs, false);
            model.store_mut().get_mut(id).data_mut()[j] = orig - FD_STEP;
            let (down, _) = objective(&model, &bundle, &batch, &prefs, false);
            model.store_mut().get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi].get(j).copied().unwrap_or(0.0);
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{j}]", model.store().name(id)));
            }
        }
    }
    worst
}
