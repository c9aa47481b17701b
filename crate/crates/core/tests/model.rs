mod common;

use c3rec::model::{
    attention_block, predict_scores, sequence_head, C3Model, Mode, ModelConfig, SequenceBatch,
    Variant,
};
use c3rec::tensor::{Tape, Tensor};
use c3rec::Error;
use common::{model_grad_check, random_tensor, rng, toy_config};
use proptest::prelude::*;

const GRAD_TOL: f64 = 1e-3;

fn set(model: &mut C3Model, name: &str, data: Vec<f64>) {
    let id = model
        .store()
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    model
        .store_mut()
        .get_mut(id)
        .data_mut()
        .copy_from_slice(&data);
}

#[test]
fn single_position_attends_to_itself() {
    let model = C3Model::new(toy_config(Variant::C3Sasr), 5, 3).unwrap();
    let mut tape = Tape::new();
    let vars = model.store().bind(&mut tape, false);
    let h = tape.constant(random_tensor(&[1, 4], -1.0, 1.0, &mut rng(2)));
    let out = attention_block(
        &mut tape,
        &vars,
        &model.params().blocks[0],
        h,
        model.config(),
        &mut Mode::Eval,
    )
    .unwrap();
    assert_eq!(tape.value(out.weights).data(), &[1.0]);
}

#[test]
fn two_step_block_matches_hand_computation() {
    let cfg = ModelConfig {
        dim: 2,
        num_blocks: 1,
        max_len: 2,
        dropout: 0.0,
        block_ffn: false,
        variant: Variant::NoCc,
        ..ModelConfig::default()
    };
    let mut model = C3Model::new(cfg, 3, 0).unwrap();
    set(&mut model, "block0.w_q", vec![1.0, 0.0, 0.0, 1.0]);
    set(&mut model, "block0.w_k", vec![0.5, 0.0, 0.0, 2.0]);
    set(&mut model, "block0.w_v", vec![0.0, 1.0, 1.0, 0.0]);
    let h = [[1.0, 2.0], [3.0, -1.0]];

    // Q = h, K = h·diag(0.5, 2), V = h with columns swapped.
    let q = h;
    let k = [[0.5, 4.0], [1.5, -2.0]];
    let v = [[2.0, 1.0], [-1.0, 3.0]];
    let s = |i: usize, j: usize| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt();
    let (a, b) = (s(1, 0).exp(), s(1, 1).exp());
    let w1 = [a / (a + b), b / (a + b)];
    let attended = [
        v[0],
        [
            w1[0] * v[0][0] + w1[1] * v[1][0],
            w1[0] * v[0][1] + w1[1] * v[1][1],
        ],
    ];
    let norm = |r: [f64; 2]| {
        let mean = (r[0] + r[1]) / 2.0;
        let var = ((r[0] - mean).powi(2) + (r[1] - mean).powi(2)) / 2.0;
        [
            (r[0] - mean) / (var + 1e-8).sqrt(),
            (r[1] - mean) / (var + 1e-8).sqrt(),
        ]
    };
    let expected: Vec<f64> = (0..2)
        .flat_map(|t| norm([h[t][0] + attended[t][0], h[t][1] + attended[t][1]]))
        .collect();

    let mut tape = Tape::new();
    let vars = model.store().bind(&mut tape, false);
    let hv = tape.constant(Tensor::matrix(&[h[0].to_vec(), h[1].to_vec()]).unwrap());
    let out = attention_block(
        &mut tape,
        &vars,
        &model.params().blocks[0],
        hv,
        model.config(),
        &mut Mode::Eval,
    )
    .unwrap();
    let weights = tape.value(out.weights).data().to_vec();
    assert_eq!(&weights[..2], &[1.0, 0.0]);
    assert!((weights[2] - w1[0]).abs() < 1e-12 && (weights[3] - w1[1]).abs() < 1e-12);
    for (got, want) in tape.value(out.output).data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

fn head_output(model: &C3Model, cfg: &ModelConfig, h: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = model.store().bind(&mut tape, false);
    let hv = tape.constant(h.clone());
    let o = sequence_head(&mut tape, &vars, &model.params().head, hv, cfg).unwrap();
    tape.value(o).data().to_vec()
}

fn context_only(model: &C3Model, cfg: &ModelConfig, h: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = model.store().bind(&mut tape, false);
    let t = h.shape()[0];
    let start = t.saturating_sub(cfg.head_kernel);
    let window = Tensor::new(
        vec![t - start, cfg.dim],
        h.data()[start * cfg.dim..].to_vec(),
    )
    .unwrap();
    let w = tape.constant(window);
    let o = model
        .params()
        .head
        .context_path
        .unwrap()
        .apply(&mut tape, &vars, w)
        .unwrap();
    let rows = tape.shape(o)[0];
    tape.value(o).row(rows - 1).to_vec()
}

#[test]
fn head_interpolates_between_paths() {
    let base = ModelConfig {
        variant: Variant::C3Csasr,
        head_kernel: 3,
        ..toy_config(Variant::C3Csasr)
    };
    let model = C3Model::new(base.clone(), 5, 9).unwrap();
    let h = random_tensor(&[4, 4], -1.0, 1.0, &mut rng(10));
    let with_alpha = |alpha: f64| {
        head_output(
            &model,
            &ModelConfig {
                alpha,
                ..base.clone()
            },
            &h,
        )
    };
    let self_only = head_output(
        &model,
        &ModelConfig {
            variant: Variant::C3Sasr,
            ..base.clone()
        },
        &h,
    );
    let ctx = context_only(&model, &base, &h);

    assert_eq!(with_alpha(1.0), self_only);
    assert_eq!(with_alpha(0.0), ctx);
    for ((m, s), c) in with_alpha(0.5).iter().zip(&self_only).zip(&ctx) {
        assert!((m - 0.5 * (s + c)).abs() < 1e-15);
    }
}

#[test]
fn context_window_pads_a_single_position() {
    let cfg = ModelConfig {
        head_kernel: 3,
        alpha: 0.0,
        ..toy_config(Variant::C3Csasr)
    };
    let model = C3Model::new(cfg.clone(), 5, 4).unwrap();
    let h = random_tensor(&[1, 4], -1.0, 1.0, &mut rng(5));
    let padded = Tensor::new(vec![3, 4], [vec![0.0; 8], h.data().to_vec()].concat()).unwrap();
    assert_eq!(
        head_output(&model, &cfg, &h),
        context_only(&model, &cfg, &padded)
    );
}

#[test]
fn predict_scores_examples() {
    let e = Tensor::matrix(&[
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 2.0],
        vec![-1.0, 1.0],
    ])
    .unwrap();
    let zero = predict_scores(&Tensor::vector(vec![0.0, 0.0]), &e).unwrap();
    assert!(zero.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    let o = Tensor::vector(vec![0.5, -0.3]);
    let dots = [0.5, -0.6, -0.8];
    let z: f64 = dots.iter().map(|d: &f64| d.exp()).sum();
    let got = predict_scores(&o, &e).unwrap();
    for (g, d) in got.data().iter().zip(dots) {
        assert!((g - d.exp() / z).abs() < 1e-12);
    }
    let argmax = got
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(argmax, 0);
}

#[test]
fn out_of_vocabulary_id_names_the_id() {
    let model = C3Model::new(toy_config(Variant::C3Sasr), 5, 1).unwrap();
    let batch = SequenceBatch::from_histories(&[vec![1u32, 9]], vec![2], 4);
    match model.forward(&batch) {
        Err(Error::Data(msg)) => assert!(msg.contains('9')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn parameter_accounting_across_variants() {
    let cfg = |variant| ModelConfig {
        dim: 8,
        variant,
        ..ModelConfig::default()
    };
    let count = |v| C3Model::new(cfg(v), 20, 0).unwrap().param_count();
    assert!(count(Variant::C3Sasr) < count(Variant::RawConv));
    assert!(count(Variant::NoCc) < count(Variant::C3Sasr));
    assert!(count(Variant::C3Sasr) < count(Variant::C3Csasr));

    let no_cc = C3Model::new(cfg(Variant::NoCc), 20, 0).unwrap();
    assert!(no_cc.params().blocks.iter().all(|b| b.qkv_convs.is_none()));
    assert!(no_cc.store().by_name("block0.q_conv.kernels").is_none());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        let (worst, at) = model_grad_check(variant, 11);
        assert!(worst < GRAD_TOL, "{variant}: rel err {worst:e} at {at}");
    }
}

/// Scores for the prefix `items[..t]` read off the encoding of the full
/// sequence: the head sees only rows `0..t`.
fn scores_from_full_encoding(model: &C3Model, items: &[u32], t: usize) -> (Vec<f64>, Vec<f64>) {
    let d = model.config().dim;
    let mut tape = Tape::new();
    let vars = model.store().bind(&mut tape, false);
    let h = model
        .encode(&mut tape, &vars, items, &mut Mode::Eval)
        .unwrap();
    let rows = tape.value(h).data()[..t * d].to_vec();
    let prefix = tape.slice(h, 0, 0, t).unwrap();
    let o = sequence_head(
        &mut tape,
        &vars,
        &model.params().head,
        prefix,
        model.config(),
    )
    .unwrap();
    let e = model.store().get(model.item_embedding_id());
    let scores = predict_scores(tape.value(o), e).unwrap().into_data();
    (rows, scores)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_and_scores_are_causal(seed in 0u64..1000, items in prop::collection::vec(1u32..=6, 5), t in 1usize..5, replacement in 1u32..=6) {
        for variant in Variant::ALL {
            let cfg = ModelConfig { max_len: 5, kernel_size: 3, head_kernel: 3, ..toy_config(variant) };
            let model = C3Model::new(cfg, 6, seed).unwrap();
            let mut other = items.clone();
            other[t] = replacement;
            let (rows_a, scores_a) = scores_from_full_encoding(&model, &items, t);
            let (rows_b, scores_b) = scores_from_full_encoding(&model, &other, t);
            prop_assert_eq!(&rows_a, &rows_b);
            prop_assert_eq!(&scores_a, &scores_b);
            prop_assert_eq!(&scores_a, &model.score_history(&items[..t]).unwrap());
        }
    }

    #[test]
    fn every_row_is_a_distribution(seed in 0u64..1000, len in 1usize..6) {
        let model = C3Model::new(toy_config(Variant::C3Csasr), 6, seed).unwrap();
        let hist: Vec<u32> = (0..len as u32).map(|i| i % 6 + 1).collect();
        let batch = SequenceBatch::from_histories(&[hist.clone(), hist[..1].to_vec()], vec![], 4);
        let probs = model.forward(&batch).unwrap();
        for b in 0..2 {
            let s: f64 = probs.row(b).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
