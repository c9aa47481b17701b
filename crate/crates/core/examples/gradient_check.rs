//! Central-difference check of tape gradients through a cheap convolution,
//! a layer norm and a softmax cross-entropy.
//!
//! `cargo run --example gradient_check`

use c3rec::cheapconv::{cheap_causal_conv, CheapConvLayer};
use c3rec::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn objective(tape: &mut Tape, v: &[Var], k: usize) -> c3rec::Result<Var> {
    let h = cheap_causal_conv(tape, v[0], v[1], v[2], k)?;
    let h = tape.layer_norm(h, v[3], v[4], 1e-8)?;
    let logp = tape.log_softmax(h, 1)?;
    let picked = tape.pick_rows(logp, &[0, 2, 1, 3])?;
    let nll = tape.mean(picked);
    Ok(tape.scale(nll, -1.0))
}

fn main() -> c3rec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, d, t) = (2, 4, 4);
    let layer = CheapConvLayer::init(k, d, &mut rng)?;
    let seq = Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let inputs = vec![
        seq,
        layer.kernels().clone(),
        layer.enhance().clone(),
        Tensor::vector(vec![1.0; d]),
        Tensor::vector(vec![0.0; d]),
    ];
    let names = ["seq", "kernels", "enhance", "gain", "bias"];

    let value = |vals: &[Tensor]| -> c3rec::Result<f64> {
        let mut tape = Tape::new();
        let v: Vec<Var> = vals.iter().map(|x| tape.constant(x.clone())).collect();
        let out = objective(&mut tape, &v, k)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let loss = objective(&mut tape, &vars, k)?;
    tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item()?);

    let mut vals = inputs.clone();
    for (i, name) in names.iter().enumerate() {
        let analytic = tape.grad(vars[i]).expect("variable has a gradient").to_vec();
        let mut worst: f64 = 0.0;
        for j in 0..vals[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + STEP;
            let up = value(&vals)?;
            vals[i].data_mut()[j] = orig - STEP;
            let down = value(&vals)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
        println!("{name:>8}: {:>3} entries, worst rel err {worst:.2e}", vals[i].numel());
    }
    Ok(())
}
