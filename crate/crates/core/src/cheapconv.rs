//! Cheap causal convolution (C3).
//!
//! A cheap layer maps a `k × d` causal window to a `d`-vector using only
//! `d/2` full-window kernels. The `d/2` responses are scaled elementwise by a
//! learned vector, the two halves are concatenated and squashed with `tanh`:
//!
//! ```text
//! e_c[l]  = Σ_{i,j} c_l[i,j] · e_t[i,j]      l = 1..d/2
//! e_c2    = e_c ⊙ w_c
//! out     = tanh([e_c, e_c2])
//! ```
//!
//! Windows that reach before the first position are zero-padded on the left,
//! so output row `t` never sees rows after `t`. A raw causal convolution with
//! `d` full kernels is kept alongside for comparison.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Learnable parameters of a cheap layer: `k·d·d/2 + d/2`.
pub fn cheap_param_count(kernel_size: usize, dim: usize) -> usize {
    kernel_size * dim * dim / 2 + dim / 2
}

/// Learnable parameters of a raw causal convolution with `d` output channels.
pub fn raw_param_count(kernel_size: usize, dim: usize) -> usize {
    kernel_size * dim * dim
}

fn check_dims(kernel_size: usize, dim: usize) -> Result<()> {
    if kernel_size == 0 {
        return Err(Error::Config("kernel size must be at least 1".into()));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "cheap convolution needs an even positive dimension, got {dim}"
        )));
    }
    Ok(())
}

/// Fan-based uniform bound used for kernel initialisation.
pub fn init_bound(kernel_size: usize, dim: usize) -> f64 {
    (6.0 / (kernel_size * dim + dim / 2) as f64).sqrt()
}

/// `k` consecutive item rows ending at some position `t`; rows that would
/// precede the sequence start are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalWindow {
    rows: Tensor,
}

impl LocalWindow {
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::dim("local_window", rows.shape(), &[0, 0]));
        }
        Ok(LocalWindow { rows })
    }

    /// The window of length `k` ending at row `t` of `seq[T×d]`.
    pub fn ending_at(seq: &Tensor, t: usize, k: usize) -> Result<Self> {
        let [t_len, d] = seq.shape() else {
            return Err(Error::dim("local_window", seq.shape(), &[0, 0]));
        };
        if t >= *t_len || k == 0 {
            return Err(Error::Domain(format!(
                "window of length {k} ending at {t} in sequence of length {t_len}"
            )));
        }
        let mut rows = Tensor::zeros(&[k, *d]);
        for i in 0..k {
            let offset = k - 1 - i;
            if offset <= t {
                rows.row_mut(i).copy_from_slice(seq.row(t - offset));
            }
        }
        Ok(LocalWindow { rows })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheapConvLayer {
    kernel_size: usize,
    dim: usize,
    /// `[d/2, k, d]`
    kernels: Tensor,
    /// `[d/2]`
    enhance: Tensor,
}

impl CheapConvLayer {
    pub fn new(kernel_size: usize, dim: usize, kernels: Tensor, enhance: Tensor) -> Result<Self> {
        check_dims(kernel_size, dim)?;
        if kernels.shape() != [dim / 2, kernel_size, dim] {
            return Err(Error::dim(
                "cheap_conv kernels",
                kernels.shape(),
                &[dim / 2, kernel_size, dim],
            ));
        }
        if enhance.shape() != [dim / 2] {
            return Err(Error::dim(
                "cheap_conv enhance",
                enhance.shape(),
                &[dim / 2],
            ));
        }
        Ok(CheapConvLayer {
            kernel_size,
            dim,
            kernels,
            enhance,
        })
    }

    /// Uniform fan-based kernels; enhancement weights start at one.
    pub fn init<R: Rng>(kernel_size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        check_dims(kernel_size, dim)?;
        let bound = init_bound(kernel_size, dim);
        let data = (0..dim / 2 * kernel_size * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let kernels = Tensor::new(vec![dim / 2, kernel_size, dim], data)?;
        Self::new(kernel_size, dim, kernels, Tensor::filled(&[dim / 2], 1.0))
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    pub fn enhance(&self) -> &Tensor {
        &self.enhance
    }

    pub fn param_count(&self) -> usize {
        self.kernels.numel() + self.enhance.numel()
    }

    /// Applies the layer to one `k × d` window, giving a `d`-vector in `(-1, 1)`.
    pub fn apply_window(&self, window: &LocalWindow) -> Result<Tensor> {
        if window.rows.shape() != [self.kernel_size, self.dim] {
            return Err(Error::dim(
                "cheap_conv_window",
                window.rows.shape(),
                &[self.kernel_size, self.dim],
            ));
        }
        let mut tape = Tape::new();
        let flat = tape.constant(
            window
                .rows
                .clone()
                .reshape(vec![1, self.kernel_size * self.dim])?,
        );
        let (kernels, enhance) = self.constants(&mut tape);
        let out = cheap_from_unfolded(&mut tape, flat, kernels, enhance)?;
        Ok(tape.value(out).clone().reshape(vec![self.dim])?)
    }

    /// Causal application over every position of `seq[T×d]`.
    pub fn apply_sequence(&self, seq: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(seq.clone());
        let (kernels, enhance) = self.constants(&mut tape);
        let out = cheap_causal_conv(&mut tape, x, kernels, enhance, self.kernel_size)?;
        Ok(tape.value(out).clone())
    }

    /// Records the parameters as differentiable leaves.
    pub fn variables(&self, tape: &mut Tape) -> (Var, Var) {
        (
            tape.variable(self.kernels.clone()),
            tape.variable(self.enhance.clone()),
        )
    }

    fn constants(&self, tape: &mut Tape) -> (Var, Var) {
        (
            tape.constant(self.kernels.clone()),
            tape.constant(self.enhance.clone()),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawConvLayer {
    kernel_size: usize,
    dim: usize,
    /// `[d, k, d]`
    kernel: Tensor,
}

impl RawConvLayer {
    pub fn new(kernel_size: usize, dim: usize, kernel: Tensor) -> Result<Self> {
        if kernel_size == 0 || dim == 0 {
            return Err(Error::Config(
                "raw convolution needs positive k and d".into(),
            ));
        }
        if kernel.shape() != [dim, kernel_size, dim] {
            return Err(Error::dim(
                "raw_conv kernel",
                kernel.shape(),
                &[dim, kernel_size, dim],
            ));
        }
        Ok(RawConvLayer {
            kernel_size,
            dim,
            kernel,
        })
    }

    pub fn init<R: Rng>(kernel_size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let bound = (6.0 / (kernel_size * dim + dim) as f64).sqrt();
        let data = (0..dim * kernel_size * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::new(
            kernel_size,
            dim,
            Tensor::new(vec![dim, kernel_size, dim], data)?,
        )
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel()
    }

    pub fn apply_sequence(&self, seq: &Tensor) -> Result<Tensor> {
        raw_conv_sequence(&self.kernel, seq)
    }
}

/// Standard causal 1-D convolution of `seq[T×d]` with a `[d_out, k, d]` kernel.
pub fn raw_conv_sequence(kernel: &Tensor, seq: &Tensor) -> Result<Tensor> {
    let [_, k, _] = kernel.shape() else {
        return Err(Error::dim("raw_conv_sequence", kernel.shape(), &[0, 0, 0]));
    };
    let k = *k;
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let w = tape.constant(kernel.clone());
    let out = raw_causal_conv(&mut tape, x, w, k)?;
    Ok(tape.value(out).clone())
}

/// Cheap convolution from already unfolded windows `[T × k·d]`.
fn cheap_from_unfolded(tape: &mut Tape, unfolded: Var, kernels: Var, enhance: Var) -> Result<Var> {
    let kshape = tape.shape(kernels).to_vec();
    let [half, k, d] = kshape[..] else {
        return Err(Error::dim("cheap_conv kernels", &kshape, &[0, 0, 0]));
    };
    if tape.shape(unfolded).get(1) != Some(&(k * d)) {
        return Err(Error::dim("cheap_conv", tape.shape(unfolded), &kshape));
    }
    let flat = tape.reshape(kernels, &[half, k * d])?;
    let flat_t = tape.transpose(flat)?;
    let compressed = tape.matmul(unfolded, flat_t)?;
    let enhanced = tape.mul_row(compressed, enhance)?;
    let joined = tape.concat(&[compressed, enhanced], 1)?;
    Ok(tape.tanh(joined))
}

/// Cheap causal convolution of `seq[T×d]` on a tape.
pub fn cheap_causal_conv(
    tape: &mut Tape,
    seq: Var,
    kernels: Var,
    enhance: Var,
    kernel_size: usize,
) -> Result<Var> {
    if tape.shape(seq).first() == Some(&0) {
        return Err(Error::Domain(
            "cheap convolution of an empty sequence".into(),
        ));
    }
    let unfolded = tape.causal_unfold(seq, kernel_size)?;
    cheap_from_unfolded(tape, unfolded, kernels, enhance)
}

/// Raw causal convolution of `seq[T×d]` with a `[d_out, k, d]` kernel on a tape.
pub fn raw_causal_conv(tape: &mut Tape, seq: Var, kernel: Var, kernel_size: usize) -> Result<Var> {
    let kshape = tape.shape(kernel).to_vec();
    let [out_dim, k, d] = kshape[..] else {
        return Err(Error::dim("raw_conv kernel", &kshape, &[0, 0, 0]));
    };
    if k != kernel_size || tape.shape(seq).get(1) != Some(&d) {
        return Err(Error::dim("raw_conv", tape.shape(seq), &kshape));
    }
    if tape.shape(seq)[0] == 0 {
        return Err(Error::Domain("raw convolution of an empty sequence".into()));
    }
    let unfolded = tape.causal_unfold(seq, k)?;
    let flat = tape.reshape(kernel, &[out_dim, k * d])?;
    let flat_t = tape.transpose(flat)?;
    tape.matmul(unfolded, flat_t)
}
