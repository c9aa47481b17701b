//! The convolution-augmented self-attention encoder.
//!
//! Pipeline per sequence: item + position embeddings, `num_blocks` causal
//! attention blocks whose Q/K inputs are fused over a `k`-window by cheap
//! convolutions (V uses a `k = 1` cheap layer), a sequence head that turns the
//! last position into the sequence representation, and a full softmax over
//! the item vocabulary.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant};
pub use params::{ParamId, ParamStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cheapconv::{cheap_causal_conv, init_bound, raw_causal_conv};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-8;

/// Forward-pass mode; dropout is only active while training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = (0..tape.value(x).numel())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            tape.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConvParams {
    Cheap {
        kernels: ParamId,
        enhance: ParamId,
        kernel_size: usize,
    },
    Raw {
        kernel: ParamId,
        kernel_size: usize,
    },
}

impl ConvParams {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        k: usize,
        d: usize,
        raw: bool,
    ) -> Self {
        if raw {
            let bound = (6.0 / (k * d + d) as f64).sqrt();
            let kernel = store.add(format!("{name}.kernel"), uniform(&[d, k, d], bound, rng));
            ConvParams::Raw {
                kernel,
                kernel_size: k,
            }
        } else {
            let kernels = store.add(
                format!("{name}.kernels"),
                uniform(&[d / 2, k, d], init_bound(k, d), rng),
            );
            let enhance = store.add(format!("{name}.enhance"), Tensor::filled(&[d / 2], 1.0));
            ConvParams::Cheap {
                kernels,
                enhance,
                kernel_size: k,
            }
        }
    }

    pub fn kernel_size(&self) -> usize {
        match self {
            ConvParams::Cheap { kernel_size, .. } | ConvParams::Raw { kernel_size, .. } => {
                *kernel_size
            }
        }
    }

    /// Causal application over every row of `x[T×d]`.
    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        match *self {
            ConvParams::Cheap {
                kernels,
                enhance,
                kernel_size,
            } => cheap_causal_conv(
                tape,
                x,
                vars[kernels.index()],
                vars[enhance.index()],
                kernel_size,
            ),
            ConvParams::Raw {
                kernel,
                kernel_size,
            } => raw_causal_conv(tape, x, vars[kernel.index()], kernel_size),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let bound = (6.0 / (2 * d) as f64).sqrt();
        LinearParams {
            weight: store.add(format!("{name}.weight"), uniform(&[d, d], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.weight.index()])?;
        tape.add_row(y, vars[self.bias.index()])
    }
}

/// Two transforms with a ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeedForward {
    Conv {
        inner: ConvParams,
        outer: ConvParams,
    },
    Linear {
        inner: LinearParams,
        outer: LinearParams,
    },
}

impl FeedForward {
    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        match self {
            FeedForward::Conv { inner, outer } => {
                let h = inner.apply(tape, vars, x)?;
                let h = tape.relu(h);
                outer.apply(tape, vars, h)
            }
            FeedForward::Linear { inner, outer } => {
                let h = inner.apply(tape, vars, x)?;
                let h = tape.relu(h);
                outer.apply(tape, vars, h)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        NormParams {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(
            x,
            vars[self.gain.index()],
            vars[self.bias.index()],
            LAYER_NORM_EPS,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// Q, K (window `k`) and V (window 1) convolutions; absent without them.
    pub qkv_convs: Option<[ConvParams; 3]>,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub attn_norm: NormParams,
    pub ffn: Option<(FeedForward, NormParams)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// Transform producing `o_self` from the last position; absent for plain SASRec.
    pub self_path: Option<FeedForward>,
    /// Window-`k2` transform producing `o_cxt`.
    pub context_path: Option<FeedForward>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParameters {
    pub store: ParamStore,
    /// `[|I|+1, d]`; row 0 is the frozen padding row.
    pub item_embedding: ParamId,
    /// `[max_len, d]`, indexed from the first item of the input.
    pub position_embedding: ParamId,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl EncoderParameters {
    pub fn init(cfg: &ModelConfig, num_items: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if num_items == 0 {
            return Err(Error::Config("item vocabulary is empty".into()));
        }
        let d = cfg.dim;
        let variant = cfg.variant;
        let raw = variant.uses_raw_conv();
        let mut store = ParamStore::new();

        let emb_bound = (3.0 / d as f64).sqrt();
        let mut items = uniform(&[num_items + 1, d], emb_bound, rng);
        items.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let item_embedding = store.add("item_embedding", items);
        let position_embedding = store.add(
            "position_embedding",
            uniform(&[cfg.max_len, d], emb_bound, rng),
        );

        let feed_forward = |store: &mut ParamStore,
                            rng: &mut ChaCha8Rng,
                            name: &str,
                            first_k: usize| {
            if variant.convolutional_feed_forward() {
                FeedForward::Conv {
                    inner: ConvParams::init(store, rng, &format!("{name}.inner"), first_k, d, raw),
                    outer: ConvParams::init(store, rng, &format!("{name}.outer"), 1, d, raw),
                }
            } else {
                FeedForward::Linear {
                    inner: LinearParams::init(store, rng, &format!("{name}.inner"), d),
                    outer: LinearParams::init(store, rng, &format!("{name}.outer"), d),
                }
            }
        };

        let proj_bound = (6.0 / (2 * d) as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let p = format!("block{b}");
            let qkv_convs = variant.convolves_attention().then(|| {
                [
                    ConvParams::init(
                        &mut store,
                        rng,
                        &format!("{p}.q_conv"),
                        cfg.kernel_size,
                        d,
                        raw,
                    ),
                    ConvParams::init(
                        &mut store,
                        rng,
                        &format!("{p}.k_conv"),
                        cfg.kernel_size,
                        d,
                        raw,
                    ),
                    ConvParams::init(&mut store, rng, &format!("{p}.v_conv"), 1, d, raw),
                ]
            });
            let w_q = store.add(format!("{p}.w_q"), uniform(&[d, d], proj_bound, rng));
            let w_k = store.add(format!("{p}.w_k"), uniform(&[d, d], proj_bound, rng));
            let w_v = store.add(format!("{p}.w_v"), uniform(&[d, d], proj_bound, rng));
            let attn_norm = NormParams::init(&mut store, &format!("{p}.attn_norm"), d);
            let ffn = if cfg.block_ffn {
                let ff = feed_forward(&mut store, rng, &format!("{p}.ffn"), 1);
                Some((
                    ff,
                    NormParams::init(&mut store, &format!("{p}.ffn_norm"), d),
                ))
            } else {
                None
            };
            blocks.push(BlockParams {
                qkv_convs,
                w_q,
                w_k,
                w_v,
                attn_norm,
                ffn,
            });
        }

        let head = match variant {
            Variant::Sasrec => HeadParams {
                self_path: None,
                context_path: None,
            },
            _ => HeadParams {
                self_path: Some(feed_forward(&mut store, rng, "head.self", 1)),
                context_path: variant
                    .has_context_head()
                    .then(|| feed_forward(&mut store, rng, "head.context", cfg.head_kernel)),
            },
        };

        Ok(EncoderParameters {
            store,
            item_embedding,
            position_embedding,
            blocks,
            head,
        })
    }
}

/// Outputs of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[T×d]` block output (after residual, normalisation and feed-forward).
    pub output: Var,
    /// `[T×T]` row-stochastic attention weights, zero above the diagonal.
    pub weights: Var,
}

fn causal_mask(t_len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t_len, t_len]);
    for i in 0..t_len {
        for j in i + 1..t_len {
            m.data_mut()[i * t_len + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// One causal self-attention block over `h[T×d]`.
///
/// `Q = conv_q(h)·W_Q`, `K = conv_k(h)·W_K`, `V = conv_v(h)·W_V`, then
/// `softmax(QKᵀ/√d + mask)·V` with a residual connection and layer norm,
/// followed by the optional feed-forward sub-layer.
pub fn attention_block(
    tape: &mut Tape,
    vars: &[Var],
    block: &BlockParams,
    h: Var,
    cfg: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<AttentionOutput> {
    let t_len = tape.shape(h)[0];
    let (q_in, k_in, v_in) = match &block.qkv_convs {
        Some([cq, ck, cv]) => (
            cq.apply(tape, vars, h)?,
            ck.apply(tape, vars, h)?,
            cv.apply(tape, vars, h)?,
        ),
        None => (h, h, h),
    };
    let q = tape.matmul(q_in, vars[block.w_q.index()])?;
    let k = tape.matmul(k_in, vars[block.w_k.index()])?;
    let v = tape.matmul(v_in, vars[block.w_v.index()])?;

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (cfg.dim as f64).sqrt());
    let mask = tape.constant(causal_mask(t_len));
    let scores = tape.add(scores, mask)?;
    let weights = tape.softmax(scores, 1)?;
    let attended = tape.matmul(weights, v)?;
    let attended = dropout(tape, attended, cfg.dropout, mode)?;
    let residual = tape.add(h, attended)?;
    let mut output = block.attn_norm.apply(tape, vars, residual)?;

    if let Some((ffn, norm)) = &block.ffn {
        let f = ffn.apply(tape, vars, output)?;
        let f = dropout(tape, f, cfg.dropout, mode)?;
        let residual = tape.add(output, f)?;
        output = norm.apply(tape, vars, residual)?;
    }
    Ok(AttentionOutput { output, weights })
}

/// Sequence representation `[1×d]` from the encoded positions `h_sa[T×d]`.
///
/// `o_self` transforms the last position alone. With the context head,
/// `o_cxt` transforms the `k2`-window ending at the last position and the
/// result is `α·o_self + (1−α)·o_cxt`.
pub fn sequence_head(
    tape: &mut Tape,
    vars: &[Var],
    head: &HeadParams,
    h_sa: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let t_len = tape.shape(h_sa)[0];
    if t_len == 0 {
        return Err(Error::Domain("sequence head on an empty sequence".into()));
    }
    let last = tape.slice(h_sa, 0, t_len - 1, t_len)?;
    let o_self = match &head.self_path {
        Some(ff) => ff.apply(tape, vars, last)?,
        None => last,
    };
    let context = match (&head.context_path, cfg.variant.has_context_head()) {
        (Some(ctx), true) => ctx,
        _ => return Ok(o_self),
    };
    let start = t_len.saturating_sub(cfg.head_kernel);
    let window = tape.slice(h_sa, 0, start, t_len)?;
    let o_cxt = context.apply(tape, vars, window)?;
    let rows = tape.shape(o_cxt)[0];
    let o_cxt = tape.slice(o_cxt, 0, rows - 1, rows)?;
    let a = tape.scale(o_self, cfg.alpha);
    let b = tape.scale(o_cxt, 1.0 - cfg.alpha);
    tape.add(a, b)
}

/// Logits `[B×|I|]` and softmax scores over real items (padding row excluded).
pub fn predict_scores_on_tape(
    tape: &mut Tape,
    seq_repr: Var,
    item_embedding: Var,
) -> Result<(Var, Var)> {
    let rows = tape.shape(item_embedding)[0];
    let real = tape.slice(item_embedding, 0, 1, rows)?;
    let real_t = tape.transpose(real)?;
    let logits = tape.matmul(seq_repr, real_t)?;
    let probs = tape.softmax(logits, 1)?;
    Ok((logits, probs))
}

/// `softmax_j(E_j · o)` over items `1..=|I|` of `embeddings[|I|+1 × d]`.
pub fn predict_scores(seq_repr: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let d = seq_repr.numel();
    let o = tape.constant(seq_repr.clone().reshape(vec![1, d])?);
    let e = tape.constant(embeddings.clone());
    let (_, probs) = predict_scores_on_tape(&mut tape, o, e)?;
    let n = tape.shape(probs)[1];
    tape.value(probs).clone().reshape(vec![n])
}

/// Left-padded item-id windows with their next-item targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceBatch {
    /// `[B × max_len]`, padded on the left with 0.
    pub item_ids: Vec<Vec<u32>>,
    /// `[B]`; may be empty for pure inference.
    pub targets: Vec<u32>,
}

impl SequenceBatch {
    /// Keeps the most recent `max_len` items of each history and left-pads.
    pub fn from_histories<S: AsRef<[u32]>>(
        histories: &[S],
        targets: Vec<u32>,
        max_len: usize,
    ) -> Self {
        let item_ids = histories
            .iter()
            .map(|h| pad_left(h.as_ref(), max_len))
            .collect();
        SequenceBatch { item_ids, targets }
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// The non-padding items of row `b`.
    pub fn items(&self, b: usize) -> Result<&[u32]> {
        let row = &self.item_ids[b];
        let start = row
            .iter()
            .position(|&id| id != 0)
            .ok_or_else(|| Error::Data(format!("batch row {b} contains only padding")))?;
        let items = &row[start..];
        if items.contains(&0) {
            return Err(Error::Data(format!(
                "batch row {b} has padding after the first item"
            )));
        }
        Ok(items)
    }
}

/// Most recent `max_len` items, left-padded with zeros to exactly `max_len`.
pub fn pad_left(items: &[u32], max_len: usize) -> Vec<u32> {
    let recent = &items[items.len().saturating_sub(max_len)..];
    let mut row = vec![0; max_len - recent.len()];
    row.extend_from_slice(recent);
    row
}

/// Tape handles produced by [`C3Model::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// One handle per parameter, in store order.
    pub params: Vec<Var>,
    /// `[B×d]` sequence representations.
    pub seq_repr: Var,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct C3Model {
    config: ModelConfig,
    num_items: usize,
    params: EncoderParameters,
}

impl C3Model {
    pub fn new(config: ModelConfig, num_items: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParameters::init(&config, num_items, &mut rng)?;
        Ok(C3Model {
            config,
            num_items,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn params(&self) -> &EncoderParameters {
        &self.params
    }

    pub fn store(&self) -> &ParamStore {
        &self.params.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params.store
    }

    pub fn param_count(&self) -> usize {
        self.params.store.total_params()
    }

    pub fn item_embedding_id(&self) -> ParamId {
        self.params.item_embedding
    }

    fn check_items(&self, items: &[u32]) -> Result<()> {
        if items.is_empty() {
            return Err(Error::Data("empty item sequence".into()));
        }
        if items.len() > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence of length {} exceeds max_len {}",
                items.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = items
            .iter()
            .find(|&&id| id == 0 || id as usize > self.num_items)
        {
            return Err(Error::Data(format!(
                "item id {bad} outside vocabulary 1..={}",
                self.num_items
            )));
        }
        Ok(())
    }

    /// Embeds `items` and runs every attention block, giving `[T×d]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        items: &[u32],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.check_items(items)?;
        let ids: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..items.len()).collect();
        let x = tape.gather(vars[self.params.item_embedding.index()], &ids)?;
        let p = tape.gather(vars[self.params.position_embedding.index()], &positions)?;
        let mut h = tape.add(x, p)?;
        h = dropout(tape, h, self.config.dropout, mode)?;
        for block in &self.params.blocks {
            h = attention_block(tape, vars, block, h, &self.config, mode)?.output;
        }
        Ok(h)
    }

    /// Sequence representation `[1×d]` of one item window.
    pub fn represent(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        items: &[u32],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.encode(tape, vars, items, mode)?;
        sequence_head(tape, vars, &self.params.head, h, &self.config)
    }

    /// Records the whole batch on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        trainable: bool,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardVars> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(&bad) = batch
            .targets
            .iter()
            .find(|&&t| t == 0 || t as usize > self.num_items)
        {
            return Err(Error::Data(format!(
                "target item id {bad} outside vocabulary 1..={}",
                self.num_items
            )));
        }
        let params = self.params.store.bind(tape, trainable);
        let mut reps = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            reps.push(self.represent(tape, &params, batch.items(b)?, mode)?);
        }
        let seq_repr = tape.concat(&reps, 0)?;
        let (logits, probs) =
            predict_scores_on_tape(tape, seq_repr, params[self.params.item_embedding.index()])?;
        Ok(ForwardVars {
            params,
            seq_repr,
            logits,
            probs,
        })
    }

    /// Next-item distributions `[B×|I|]`; column `j` is item id `j+1`.
    pub fn forward(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, batch, false, &mut Mode::Eval)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Next-item distribution for one raw history, truncated to `max_len`.
    pub fn score_history(&self, history: &[u32]) -> Result<Vec<f64>> {
        let batch = SequenceBatch::from_histories(&[history], Vec::new(), self.config.max_len);
        Ok(self.forward(&batch)?.into_data())
    }

    /// Keeps the padding embedding row at zero.
    pub fn clear_padding_row(&mut self) {
        let id = self.params.item_embedding;
        let t = self.params.store.get_mut(id);
        t.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        if let Some(g) = t.grad_mut() {
            let d = g.len() / (self.num_items + 1);
            g[..d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
