//! Transformer text encoder producing a pooled sentence embedding.
//!
//! Miniature BERT-family encoder: factorized token embeddings, learned
//! position and segment embeddings, pre-norm blocks with multi-head
//! self-attention and a GELU feed-forward, and a tanh-dense pooler over the
//! first position. With `share_layers` one block's parameters are stored and
//! reused for every layer, so the parameter count is independent of depth.
//!
//! Pre-norm ordering is a deliberate choice for stability when training from
//! random initialization (released BERT-family checkpoints are post-norm).

use crate::error::{Error, Result};
use crate::params::{ParamBinder, ParamGroup, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Additive attention bias on padding positions. exp(-1e9) underflows to
/// exactly zero, which is what makes padding invariance bitwise.
pub const MASK_BIAS: f32 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Embedding width E; only meaningful with `factorized_embedding`.
    pub embed_dim: usize,
    /// Hidden width H of the transformer blocks and the pooled output.
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub share_layers: bool,
    pub factorized_embedding: bool,
}

impl TextEncoderConfig {
    /// Small configuration that keeps the whole test suite fast.
    pub fn desk(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ff_dim: 256,
            max_seq_len: 64,
            share_layers: true,
            factorized_embedding: true,
        }
    }

    /// Full-size configuration: 24 shared layers, 16 heads, hidden 2048.
    pub fn full_scale() -> Self {
        TextEncoderConfig {
            vocab_size: 30_000,
            embed_dim: 128,
            hidden_dim: 2048,
            num_layers: 24,
            num_heads: 16,
            ff_dim: 8192,
            max_seq_len: 512,
            share_layers: true,
            factorized_embedding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "hidden_dim, num_heads and num_layers must be positive".into(),
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.factorized_embedding && self.embed_dim > self.hidden_dim {
            return Err(Error::Config(format!(
                "embed_dim {} exceeds hidden_dim {} with factorized embeddings",
                self.embed_dim, self.hidden_dim
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be at least 1".into()));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("ff_dim must be positive".into()));
        }
        Ok(())
    }

    /// Width of the embedding tables: E when factorized, H otherwise.
    pub fn embed_width(&self) -> usize {
        if self.factorized_embedding {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// Token-embedding parameters: the vocabulary table plus, when
    /// factorized, the E->H projection matrix.
    pub fn embedding_table_param_count(&self) -> usize {
        if self.factorized_embedding {
            self.vocab_size * self.embed_dim + self.embed_dim * self.hidden_dim
        } else {
            self.vocab_size * self.hidden_dim
        }
    }
}

/// Tokenized input: ids, 1/0 mask, and segment ids, all the same length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedText {
    pub input_ids: Vec<u32>,
    pub input_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
}

impl EncodedText {
    pub fn validate(&self, config: &TextEncoderConfig) -> Result<()> {
        let n = self.input_ids.len();
        if self.input_mask.len() != n || self.segment_ids.len() != n {
            return Err(Error::Input(format!(
                "ids/mask/segments lengths differ: {n}/{}/{}",
                self.input_mask.len(),
                self.segment_ids.len()
            )));
        }
        if n == 0 || n > config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {n} outside 1..={}",
                config.max_seq_len
            )));
        }
        if self.input_mask[0] != 1 {
            return Err(Error::Input("mask must cover at least the first position".into()));
        }
        let mut seen_zero = false;
        for (i, &m) in self.input_mask.iter().enumerate() {
            match m {
                0 => seen_zero = true,
                1 if seen_zero => {
                    return Err(Error::Input(format!(
                        "mask is not monotone non-increasing at position {i}"
                    )));
                }
                1 => {}
                other => {
                    return Err(Error::Input(format!("mask value {other} at position {i}")));
                }
            }
        }
        if let Some(&bad) = self.input_ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        if self.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::Input("segment ids must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Number of leading mask-1 positions.
    pub fn real_len(&self) -> usize {
        self.input_mask.iter().take_while(|&&m| m == 1).count()
    }
}

/// Pooled text embedding, H-dimensional.
#[derive(Debug, Clone)]
pub struct PooledText {
    pub vector: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct TextBlockLayout {
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub qw: ParamId,
    pub qb: ParamId,
    pub kw: ParamId,
    pub vw: ParamId,
    pub vb: ParamId,
    pub ow: ParamId,
    pub ob: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

/// Parameter ids for one built text encoder.
#[derive(Debug, Clone)]
pub struct TextEncoderLayout {
    pub config: TextEncoderConfig,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub seg_embed: ParamId,
    pub emb_norm_gain: ParamId,
    pub emb_norm_bias: ParamId,
    pub emb_proj: Option<(ParamId, ParamId)>,
    /// One entry when layers are shared, `num_layers` otherwise.
    pub blocks: Vec<TextBlockLayout>,
    pub pooler_w: ParamId,
    pub pooler_b: ParamId,
}

impl TextEncoderLayout {
    fn block_for_layer(&self, layer: usize) -> &TextBlockLayout {
        if self.blocks.len() == 1 {
            &self.blocks[0]
        } else {
            &self.blocks[layer]
        }
    }
}

fn add_block(params: &mut ParamSet, cfg: &TextEncoderConfig, prefix: &str, rng: &mut Rng) -> TextBlockLayout {
    let h = cfg.hidden_dim;
    let ff = cfg.ff_dim;
    let g = ParamGroup::TextEncoder;
    let dense = |rng: &mut Rng, fan_in: usize, fan_out: usize| {
        Tensor::glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng)
    };
    TextBlockLayout {
        norm1_gain: params.add(format!("{prefix}.norm1.gain"), Tensor::filled(&[h], 1.0), g, true),
        norm1_bias: params.add(format!("{prefix}.norm1.bias"), Tensor::zeros(&[h]), g, true),
        qw: params.add(format!("{prefix}.attn.qw"), dense(rng, h, h), g, false),
        qb: params.add(format!("{prefix}.attn.qb"), Tensor::zeros(&[h]), g, true),
        kw: params.add(format!("{prefix}.attn.kw"), dense(rng, h, h), g, false),
        vw: params.add(format!("{prefix}.attn.vw"), dense(rng, h, h), g, false),
        vb: params.add(format!("{prefix}.attn.vb"), Tensor::zeros(&[h]), g, true),
        ow: params.add(format!("{prefix}.attn.ow"), dense(rng, h, h), g, false),
        ob: params.add(format!("{prefix}.attn.ob"), Tensor::zeros(&[h]), g, true),
        norm2_gain: params.add(format!("{prefix}.norm2.gain"), Tensor::filled(&[h], 1.0), g, true),
        norm2_bias: params.add(format!("{prefix}.norm2.bias"), Tensor::zeros(&[h]), g, true),
        ff_w1: params.add(format!("{prefix}.ff.w1"), dense(rng, h, ff), g, false),
        ff_b1: params.add(format!("{prefix}.ff.b1"), Tensor::zeros(&[ff]), g, true),
        ff_w2: params.add(format!("{prefix}.ff.w2"), dense(rng, ff, h), g, false),
        ff_b2: params.add(format!("{prefix}.ff.b2"), Tensor::zeros(&[h]), g, true),
    }
}

/// Build the encoder's parameters into `params`. With `share_layers` exactly
/// one block is stored regardless of `num_layers`.
pub fn build_text_encoder(
    config: &TextEncoderConfig,
    params: &mut ParamSet,
    rng: &mut Rng,
) -> Result<TextEncoderLayout> {
    config.validate()?;
    let we = config.embed_width();
    let h = config.hidden_dim;
    let g = ParamGroup::TextEncoder;

    let tok_embed = params.add(
        "text.tok_embed",
        Tensor::normal(&[config.vocab_size, we], 0.02, rng),
        g,
        false,
    );
    let pos_embed = params.add(
        "text.pos_embed",
        Tensor::normal(&[config.max_seq_len, we], 0.02, rng),
        g,
        false,
    );
    let seg_embed = params.add("text.seg_embed", Tensor::normal(&[2, we], 0.02, rng), g, false);
    let emb_norm_gain = params.add("text.emb_norm.gain", Tensor::filled(&[we], 1.0), g, true);
    let emb_norm_bias = params.add("text.emb_norm.bias", Tensor::zeros(&[we]), g, true);
    let emb_proj = if config.factorized_embedding {
        let w = params.add(
            "text.emb_proj.w",
            Tensor::glorot_uniform(&[we, h], we, h, rng),
            g,
            false,
        );
        let b = params.add("text.emb_proj.b", Tensor::zeros(&[h]), g, true);
        Some((w, b))
    } else {
        None
    };

    let blocks = if config.share_layers {
        vec![add_block(params, config, "text.block", rng)]
    } else {
        (0..config.num_layers)
            .map(|i| add_block(params, config, &format!("text.block{i}"), rng))
            .collect()
    };

    let pooler_w = params.add(
        "text.pooler.w",
        Tensor::glorot_uniform(&[h, h], h, h, rng),
        g,
        false,
    );
    let pooler_b = params.add("text.pooler.b", Tensor::zeros(&[h]), g, true);

    Ok(TextEncoderLayout {
        config: config.clone(),
        tok_embed,
        pos_embed,
        seg_embed,
        emb_norm_gain,
        emb_norm_bias,
        emb_proj,
        blocks,
        pooler_w,
        pooler_b,
    })
}

/// Tape-level forward: returns the pooled H-vector var.
///
/// Positions past the mask are never computed: masked-out keys receive
/// exactly zero attention weight, so dropping them is bitwise identical and
/// considerably cheaper on short inputs.
pub fn text_forward_on_tape(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    params: &ParamSet,
    layout: &TextEncoderLayout,
    input: &EncodedText,
) -> Result<Var> {
    let cfg = &layout.config;
    input.validate(cfg)?;
    let s = input.real_len();
    let h = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let dh = h / heads;
    let scale = 1.0 / (dh as f32).sqrt();

    let tok_table = binder.bind(tape, params, layout.tok_embed);
    let pos_table = binder.bind(tape, params, layout.pos_embed);
    let seg_table = binder.bind(tape, params, layout.seg_embed);
    let tok = tape.embedding(tok_table, &input.input_ids[..s])?;
    let pos = tape.slice_rows(pos_table, 0, s)?;
    let seg_ids: Vec<u32> = input.segment_ids[..s].iter().map(|&x| x as u32).collect();
    let seg = tape.embedding(seg_table, &seg_ids)?;
    let summed = tape.add(tok, pos)?;
    let mut x = tape.add(summed, seg)?;

    let emb_gain = binder.bind(tape, params, layout.emb_norm_gain);
    let emb_bias = binder.bind(tape, params, layout.emb_norm_bias);
    x = tape.layer_norm_rows(x, emb_gain, emb_bias)?;

    if let Some((w, b)) = layout.emb_proj {
        let wv = binder.bind(tape, params, w);
        let bv = binder.bind(tape, params, b);
        let projected = tape.matmul(x, wv)?;
        x = tape.add_row_vec(projected, bv)?;
    }

    for layer in 0..cfg.num_layers {
        let block = layout.block_for_layer(layer);
        let n1g = binder.bind(tape, params, block.norm1_gain);
        let n1b = binder.bind(tape, params, block.norm1_bias);
        let normed = tape.layer_norm_rows(x, n1g, n1b)?;

        let qw = binder.bind(tape, params, block.qw);
        let qb = binder.bind(tape, params, block.qb);
        let kw = binder.bind(tape, params, block.kw);
        let vw = binder.bind(tape, params, block.vw);
        let vb = binder.bind(tape, params, block.vb);
        let q = tape.matmul(normed, qw)?;
        let q = tape.add_row_vec(q, qb)?;
        // no key bias: a per-key constant shift cancels in the row softmax,
        // so the parameter could never receive gradient or train
        let k = tape.matmul(normed, kw)?;
        let v = tape.matmul(normed, vw)?;
        let v = tape.add_row_vec(v, vb)?;

        let mut contexts = Vec::with_capacity(heads);
        for head in 0..heads {
            let qi = tape.slice_cols(q, head * dh, dh)?;
            let ki = tape.slice_cols(k, head * dh, dh)?;
            let vi = tape.slice_cols(v, head * dh, dh)?;
            let raw = tape.matmul_nt(qi, ki)?;
            let scores = tape.scale(raw, scale);
            let attn = tape.softmax_rows(scores)?;
            contexts.push(tape.matmul(attn, vi)?);
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            tape.concat_cols(&contexts)?
        };
        let ow = binder.bind(tape, params, block.ow);
        let ob = binder.bind(tape, params, block.ob);
        let attn_out = tape.matmul(ctx, ow)?;
        let attn_out = tape.add_row_vec(attn_out, ob)?;
        x = tape.add(x, attn_out)?;

        let n2g = binder.bind(tape, params, block.norm2_gain);
        let n2b = binder.bind(tape, params, block.norm2_bias);
        let normed2 = tape.layer_norm_rows(x, n2g, n2b)?;
        let w1 = binder.bind(tape, params, block.ff_w1);
        let b1 = binder.bind(tape, params, block.ff_b1);
        let w2 = binder.bind(tape, params, block.ff_w2);
        let b2 = binder.bind(tape, params, block.ff_b2);
        let ff = tape.matmul(normed2, w1)?;
        let ff = tape.add_row_vec(ff, b1)?;
        let ff = tape.gelu(ff);
        let ff = tape.matmul(ff, w2)?;
        let ff = tape.add_row_vec(ff, b2)?;
        x = tape.add(x, ff)?;
    }

    let first = tape.slice_rows(x, 0, 1)?;
    let pw = binder.bind(tape, params, layout.pooler_w);
    let pb = binder.bind(tape, params, layout.pooler_b);
    let pooled = tape.matmul(first, pw)?;
    let pooled = tape.add_row_vec(pooled, pb)?;
    let pooled = tape.tanh(pooled);
    tape.reshape(pooled, &[h])
}

/// Standalone forward producing the pooled embedding. The encoder has no
/// stochastic parts, so `train` does not change the result; the flag is kept
/// for interface symmetry with the heads.
pub fn text_forward(
    params: &ParamSet,
    layout: &TextEncoderLayout,
    input: &EncodedText,
    _train: bool,
) -> Result<PooledText> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(params);
    let out = text_forward_on_tape(&mut tape, &mut binder, params, layout, input)?;
    tape.assert_finite(out, "pooled text output")?;
    Ok(PooledText {
        vector: Tensor::new(&[layout.config.hidden_dim], tape.value(out).to_vec())?,
    })
}
