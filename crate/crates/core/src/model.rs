//! The shared-parameter encoder-decoder transformer.
//!
//! One stack of layers serves both directions. The decoder runs causal
//! self-attention and then cross-attention over the final encoder layer with
//! the *same* attention projections; a learned per-layer signal vector added
//! to the memory rows tells the layer that its keys and values come from the
//! encoder. With sharing off, the decoder gets its own stack (still reusing
//! its attention weights for both attention steps) and no signal.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::Parametrized;
use crate::params::{ParamStore, Parameter};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const SEGMENT_REGION: usize = 0;
pub const SEGMENT_TEXT: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub max_positions: usize,
    pub max_regions: usize,
    pub share: bool,
}

impl ModelConfig {
    /// Full-size profile: 768 hidden units, 8 heads, dropout 0.1.
    pub fn base(vocab_size: usize, feat_dim: usize) -> Self {
        ModelConfig {
            layers: 12,
            width: 768,
            heads: 8,
            ffn_width: 4 * 768,
            dropout: 0.1,
            vocab_size,
            feat_dim,
            max_positions: 128,
            max_regions: 100,
            share: true,
        }
    }

    /// Desk-scale profile.
    pub fn tiny(layers: usize, width: usize, heads: usize, vocab_size: usize, feat_dim: usize) -> Self {
        ModelConfig {
            layers,
            width,
            heads,
            ffn_width: 4 * width,
            dropout: 0.1,
            vocab_size,
            feat_dim,
            max_positions: 128,
            max_regions: 100,
            share: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("model needs at least one layer".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.ffn_width == 0 || self.feat_dim == 0 || self.max_positions == 0 || self.max_regions == 0 {
            return bad("zero-sized model dimension".into());
        }
        if self.vocab_size <= crate::vocab::NUM_RESERVED as usize {
            return bad(format!("vocabulary of {} has no ordinary tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// One transformer layer. `norm_cross` exists only where a decoder runs.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub norm_attn: NormParams,
    pub norm_cross: Option<NormParams>,
    pub norm_ffn: NormParams,
    pub ffn: FfnParams,
    pub signal: Option<usize>,
}

/// Projections of the image refining layer.
#[derive(Clone, Copy, Debug)]
pub struct AoAParams {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub w1: usize,
    pub w2: usize,
    pub w3: usize,
    pub w4: usize,
    pub b1: usize,
    pub b2: usize,
    pub norm: NormParams,
}

/// Weights of the token-region score `A_ij = W·[x_i ; x_j ; x_i ⊙ x_j]`,
/// split into its three `h`-blocks.
///
/// The text block adds a per-token constant to every score in a row, which
/// the row softmax removes, so it can never change any output; it is kept
/// frozen at zero to preserve the full `3h` map.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentParams {
    pub text: usize,
    pub region: usize,
    pub product: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub token_emb: usize,
    pub pos_emb: usize,
    pub seg_emb: usize,
    pub region_w: usize,
    pub region_b: usize,
    pub aoa: AoAParams,
    pub align: AlignmentParams,
    pub tifg_query: usize,
    pub tifg_w: usize,
    pub tifg_b: usize,
    pub encoder: Vec<BlockParams>,
    pub decoder: Vec<BlockParams>,
    pub encoder_norm: NormParams,
    pub decoder_norm: NormParams,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn parameter_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init, bool)> {
    let h = c.width;
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut specs: Vec<(String, Vec<usize>, Init, bool)> = vec![
        ("embed.token".into(), vec![c.vocab_size, h], Init::Normal(0.1), true),
        ("embed.position".into(), vec![c.max_positions, h], Init::Normal(0.1), true),
        ("embed.segment".into(), vec![2, h], Init::Normal(0.1), true),
        ("region.proj.weight".into(), vec![c.feat_dim + 5, h], fan(c.feat_dim + 5), true),
        ("region.proj.bias".into(), vec![h], Init::Zeros, true),
        ("align.text".into(), vec![h], Init::Zeros, false),
        ("align.region".into(), vec![h], fan(h), true),
        ("align.product".into(), vec![h], fan(h), true),
        ("tifg.query".into(), vec![c.max_regions, h], Init::Normal(0.1), true),
        ("tifg.head.weight".into(), vec![h, h], fan(h), true),
        ("tifg.head.bias".into(), vec![h], Init::Zeros, true),
        ("final_norm.encoder.gain".into(), vec![h], Init::Ones, true),
        ("final_norm.encoder.bias".into(), vec![h], Init::Zeros, true),
        ("final_norm.decoder.gain".into(), vec![h], Init::Ones, true),
        ("final_norm.decoder.bias".into(), vec![h], Init::Zeros, true),
    ];
    for w in ["wq", "wk", "wv", "w1", "w2", "w3", "w4"] {
        specs.push((format!("aoa.{w}"), vec![h, h], fan(h), true));
    }
    for b in ["b1", "b2", "norm.bias"] {
        specs.push((format!("aoa.{b}"), vec![h], Init::Zeros, true));
    }
    specs.push(("aoa.norm.gain".into(), vec![h], Init::Ones, true));

    let stacks: &[(&str, bool)] = if c.share {
        &[("shared", true)]
    } else {
        &[("encoder", false), ("decoder", true)]
    };
    for &(stack, decodes) in stacks {
        for l in 0..c.layers {
            let p = format!("{stack}.layer{l}");
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push((format!("{p}.attn.{w}"), vec![h, h], fan(h), true));
            }
            specs.push((format!("{p}.attn.bo"), vec![h], Init::Zeros, true));
            let mut norms = vec!["norm_attn", "norm_ffn"];
            if decodes {
                norms.push("norm_cross");
            }
            for n in norms {
                specs.push((format!("{p}.{n}.gain"), vec![h], Init::Ones, true));
                specs.push((format!("{p}.{n}.bias"), vec![h], Init::Zeros, true));
            }
            specs.push((format!("{p}.ffn.w1"), vec![h, c.ffn_width], fan(h), true));
            specs.push((format!("{p}.ffn.b1"), vec![c.ffn_width], Init::Zeros, true));
            specs.push((format!("{p}.ffn.w2"), vec![c.ffn_width, h], fan(c.ffn_width), true));
            specs.push((format!("{p}.ffn.b2"), vec![h], Init::Zeros, true));
            if c.share {
                specs.push((format!("{p}.signal"), vec![h], Init::Zeros, true));
            }
        }
    }
    specs
}

impl Layout {
    fn resolve(c: &ModelConfig, s: &ParamStore) -> Result<Self> {
        let id = |n: &str| s.id(n);
        let norm = |p: &str| -> Result<NormParams> {
            Ok(NormParams {
                gain: id(&format!("{p}.gain"))?,
                bias: id(&format!("{p}.bias"))?,
            })
        };
        let block = |stack: &str, l: usize, decodes: bool| -> Result<BlockParams> {
            let p = format!("{stack}.layer{l}");
            Ok(BlockParams {
                attn: AttentionParams {
                    wq: id(&format!("{p}.attn.wq"))?,
                    wk: id(&format!("{p}.attn.wk"))?,
                    wv: id(&format!("{p}.attn.wv"))?,
                    wo: id(&format!("{p}.attn.wo"))?,
                    bo: id(&format!("{p}.attn.bo"))?,
                },
                norm_attn: norm(&format!("{p}.norm_attn"))?,
                norm_cross: if decodes {
                    Some(norm(&format!("{p}.norm_cross"))?)
                } else {
                    None
                },
                norm_ffn: norm(&format!("{p}.norm_ffn"))?,
                ffn: FfnParams {
                    w1: id(&format!("{p}.ffn.w1"))?,
                    b1: id(&format!("{p}.ffn.b1"))?,
                    w2: id(&format!("{p}.ffn.w2"))?,
                    b2: id(&format!("{p}.ffn.b2"))?,
                },
                signal: if c.share {
                    Some(id(&format!("{p}.signal"))?)
                } else {
                    None
                },
            })
        };
        let (encoder, decoder) = if c.share {
            let shared: Vec<_> = (0..c.layers).map(|l| block("shared", l, true)).collect::<Result<_>>()?;
            (shared.clone(), shared)
        } else {
            (
                (0..c.layers).map(|l| block("encoder", l, false)).collect::<Result<_>>()?,
                (0..c.layers).map(|l| block("decoder", l, true)).collect::<Result<_>>()?,
            )
        };
        Ok(Layout {
            token_emb: id("embed.token")?,
            pos_emb: id("embed.position")?,
            seg_emb: id("embed.segment")?,
            region_w: id("region.proj.weight")?,
            region_b: id("region.proj.bias")?,
            aoa: AoAParams {
                wq: id("aoa.wq")?,
                wk: id("aoa.wk")?,
                wv: id("aoa.wv")?,
                w1: id("aoa.w1")?,
                w2: id("aoa.w2")?,
                w3: id("aoa.w3")?,
                w4: id("aoa.w4")?,
                b1: id("aoa.b1")?,
                b2: id("aoa.b2")?,
                norm: norm("aoa.norm")?,
            },
            align: AlignmentParams {
                text: id("align.text")?,
                region: id("align.region")?,
                product: id("align.product")?,
            },
            tifg_query: id("tifg.query")?,
            tifg_w: id("tifg.head.weight")?,
            tifg_b: id("tifg.head.bias")?,
            encoder,
            decoder,
            encoder_norm: norm("final_norm.encoder")?,
            decoder_norm: norm("final_norm.decoder")?,
        })
    }
}

/// All trainable state: embeddings, the layer stack(s), the refining layer,
/// alignment weights and the feature-generation head. The language-model
/// head is the transpose of the token embedding table.
#[derive(Clone, Debug)]
pub struct SharedTransformer {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

impl Parametrized for SharedTransformer {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl SharedTransformer {
    /// Seeded random initialization, drawn in parameter-name order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut specs = parameter_specs(&config);
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, shape, init, trainable)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("positive std");
                        Tensor::from_fn(&shape, |_| d.sample(&mut rng))
                    }
                };
                Parameter::new(name, t, trainable)
            })
            .collect();
        let params = ParamStore::from_params(params)?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(SharedTransformer {
            config,
            layout,
            params,
        })
    }

    /// Wraps existing values (e.g. a loaded checkpoint) for `config`.
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.assign(tensors)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter sizes in canonical order; each stored tensor counted once.
    pub fn count_parameters(&self) -> Vec<(String, usize)> {
        self.params
            .iter()
            .map(|p| (p.name().to_string(), p.value().numel()))
            .collect()
    }

    pub fn total_parameters(&self) -> usize {
        self.params.numel()
    }
}

/// Boolean `(query × key)` matrix of permitted attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        AttentionMask {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    /// Lower-triangular: query `t` sees keys `0..=t`.
    pub fn causal(len: usize) -> Self {
        AttentionMask {
            queries: len,
            keys: len,
            allowed: (0..len * len).map(|i| i % len <= i / len).collect(),
        }
    }

    /// Disallows every key whose `padding` flag is set.
    pub fn with_key_padding(mut self, padding: &[bool]) -> Result<Self> {
        if padding.len() != self.keys {
            return Err(Error::Dimension(format!(
                "{} padding flags for {} keys",
                padding.len(),
                self.keys
            )));
        }
        for q in 0..self.queries {
            for (k, &pad) in padding.iter().enumerate() {
                if pad {
                    self.allowed[q * self.keys + k] = false;
                }
            }
        }
        Ok(self)
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.queries, self.keys)
    }
}

/// Where attention keys and values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAttention,
    FromEncoder,
}

/// One forward pass of a model on one tape.
pub struct Session<'t, 'm> {
    pub tape: &'t Tape,
    pub model: &'m SharedTransformer,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'t, 'm> Session<'t, 'm> {
    /// Dropout off.
    pub fn eval(tape: &'t Tape, model: &'m SharedTransformer) -> Self {
        Session {
            tape,
            model,
            dropout_rng: None,
        }
    }

    /// Dropout on, drawing masks from `rng`.
    pub fn train(tape: &'t Tape, model: &'m SharedTransformer, rng: ChaCha8Rng) -> Self {
        Session {
            tape,
            model,
            dropout_rng: Some(RefCell::new(rng)),
        }
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    pub fn layout(&self) -> &'m Layout {
        &self.model.layout
    }

    pub fn p(&self, id: usize) -> Var<'t> {
        self.tape.param(&self.model.params, id)
    }

    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        match &self.dropout_rng {
            Some(rng) => x.dropout(self.model.config.dropout, true, &mut *rng.borrow_mut()),
            None => Ok(x),
        }
    }

    pub fn norm(&self, x: Var<'t>, n: NormParams) -> Result<Var<'t>> {
        x.layer_norm(self.p(n.gain), self.p(n.bias), LN_EPS)
    }

    /// Adds the segment embedding for `segment` to every row.
    pub fn with_segment(&self, x: Var<'t>, segment: usize) -> Result<Var<'t>> {
        let seg = self.p(self.layout().seg_emb).embedding(&[segment])?;
        x.add(seg)
    }

    /// Attention with projections from `block`, used both for self-attention
    /// and for attention over encoder memory.
    pub fn shared_attention(
        &self,
        q_src: Var<'t>,
        kv_src: Var<'t>,
        mode: AttentionMode,
        block: &BlockParams,
        mask: &AttentionMask,
    ) -> Result<Var<'t>> {
        let kv = match (mode, block.signal) {
            (AttentionMode::FromEncoder, Some(signal)) => kv_src.add(self.p(signal))?,
            _ => kv_src,
        };
        let a = &block.attn;
        let q = q_src.linear(self.p(a.wq), None)?;
        let k = kv.linear(self.p(a.wk), None)?;
        let v = kv.linear(self.p(a.wv), None)?;
        let mixed = multi_head(q, k, v, self.config().heads, mask)?;
        mixed.linear(self.p(a.wo), Some(self.p(a.bo)))
    }

    fn feed_forward(&self, x: Var<'t>, f: &FfnParams) -> Result<Var<'t>> {
        let hidden = x.linear(self.p(f.w1), Some(self.p(f.b1)))?.gelu();
        let hidden = self.dropout(hidden)?;
        hidden.linear(self.p(f.w2), Some(self.p(f.b2)))
    }

    /// Bidirectional encoder over `[S×h]` inputs; returns the final layer.
    pub fn encode(&self, inputs: Var<'t>, key_padding: Option<&[bool]>) -> Result<Var<'t>> {
        let s = inputs.shape()[0];
        let mut mask = AttentionMask::full(s, s);
        if let Some(pad) = key_padding {
            mask = mask.with_key_padding(pad)?;
        }
        let mut x = self.dropout(inputs)?;
        for block in &self.layout().encoder {
            let h = self.norm(x, block.norm_attn)?;
            let a = self.shared_attention(h, h, AttentionMode::SelfAttention, block, &mask)?;
            x = x.add(self.dropout(a)?)?;
            let h = self.norm(x, block.norm_ffn)?;
            x = x.add(self.dropout(self.feed_forward(h, &block.ffn)?)?)?;
        }
        self.norm(x, self.layout().encoder_norm)
    }

    /// Decoder hidden states for `[T×h]` inputs attending to `memory`.
    pub fn decode_hidden(
        &self,
        targets: Var<'t>,
        memory: Var<'t>,
        self_mask: &AttentionMask,
        memory_padding: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        let t = targets.shape()[0];
        let s = memory.shape()[0];
        let mut cross_mask = AttentionMask::full(t, s);
        if let Some(pad) = memory_padding {
            cross_mask = cross_mask.with_key_padding(pad)?;
        }
        let mut x = self.dropout(targets)?;
        for block in &self.layout().decoder {
            let h = self.norm(x, block.norm_attn)?;
            let a = self.shared_attention(h, h, AttentionMode::SelfAttention, block, self_mask)?;
            x = x.add(self.dropout(a)?)?;
            let cross_norm = block
                .norm_cross
                .ok_or_else(|| Error::Config("decoder block without cross norm".into()))?;
            let h = self.norm(x, cross_norm)?;
            let c = self.shared_attention(h, memory, AttentionMode::FromEncoder, block, &cross_mask)?;
            x = x.add(self.dropout(c)?)?;
            let h = self.norm(x, block.norm_ffn)?;
            x = x.add(self.dropout(self.feed_forward(h, &block.ffn)?)?)?;
        }
        self.norm(x, self.layout().decoder_norm)
    }

    /// Vocabulary logits through the tied embedding table.
    pub fn lm_logits(&self, hidden: Var<'t>) -> Result<Var<'t>> {
        hidden.matmul(self.p(self.layout().token_emb).transpose()?)
    }

    /// Causal decoding to `[T×V]` logits.
    pub fn decode(&self, targets: Var<'t>, memory: Var<'t>, memory_padding: Option<&[bool]>) -> Result<Var<'t>> {
        let t = targets.shape()[0];
        let hidden = self.decode_hidden(targets, memory, &AttentionMask::causal(t), memory_padding)?;
        self.lm_logits(hidden)
    }
}

/// Scaled dot-product attention over `heads` column groups of `q`, `k`, `v`;
/// returns the heads concatenated back to full width.
pub fn multi_head<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, mask: &AttentionMask) -> Result<Var<'t>> {
    let (tq, width) = (q.shape()[0], q.shape()[1]);
    let tk = k.shape()[0];
    if mask.shape() != (tq, tk) {
        return Err(Error::Dimension(format!(
            "mask {:?} for {tq} queries and {tk} keys",
            mask.shape()
        )));
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = q.narrow(1, hd * dh, dh)?;
        let kh = k.narrow(1, hd * dh, dh)?;
        let vh = v.narrow(1, hd * dh, dh)?;
        let scores = qh.matmul(kh.transpose()?)?.scale(scale);
        let probs = scores.masked_softmax(&mask.allowed)?;
        outs.push(probs.matmul(vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        Var::concat(&outs, 1)
    }
}
