//! Cheap causal convolution versus a full convolution of the same window.
//!
//! `cargo run --example cheap_conv`

use c3rec::cheapconv::{cheap_param_count, raw_param_count, CheapConvLayer, LocalWindow, RawConvLayer};
use c3rec::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> c3rec::Result<()> {
    println!("{:>3} {:>4} {:>8} {:>8} {:>6}", "k", "d", "cheap", "raw", "ratio");
    for (k, d) in [(1, 2), (2, 16), (3, 64), (5, 128)] {
        let (c, r) = (cheap_param_count(k, d), raw_param_count(k, d));
        println!("{k:>3} {d:>4} {c:>8} {r:>8} {:>6.3}", c as f64 / r as f64);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, d, t) = (3, 8, 5);
    let cheap = CheapConvLayer::init(k, d, &mut rng)?;
    let raw = RawConvLayer::init(k, d, &mut rng)?;
    let seq = Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let out = cheap.apply_sequence(&seq)?;
    println!("\ncheap output {:?}, raw output {:?}", out.shape(), raw.apply_sequence(&seq)?.shape());

    // Position 0 sees only itself; the window is zero-padded on the left.
    let first = cheap.apply_window(&LocalWindow::ending_at(&seq, 0, k)?)?;
    println!("row 0 from a padded window matches: {}", first.data() == out.row(0));
    println!("row 0 = {:?}", &out.row(0)[..4]);
    Ok(())
}
