//! Toy transformer encoder with LoRA adapters on the key and value
//! projections and dropout hooks at every framework position.

mod checkpoint;
mod config;
mod lora;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{HeadKind, ModelConfig};
pub use lora::{Linear, LoraLinear};

use crate::dropout::{self, DropoutSpec, Mode, Position};
use crate::error::{Error, Result};
use crate::mask::{derive_seed, sample_mask, AxisSemantics, MaskPlan};
use crate::tensor::Tensor;
use lora::normal_vec;

const LN_EPS: f64 = 1e-5;

// Mask seed streams. DropKey and DropAttention share one.
const STREAM_INPUT: u64 = 1;
const STREAM_ATTN: u64 = 2;
const STREAM_ATTN_WEIGHTS_ONLY: u64 = 3;
const STREAM_FFN: u64 = 4;
const STREAM_OUTPUT: u64 = 5;

/// A batch of equal-length token sequences, row-major `[batch, seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq_len: usize) -> Result<TokenBatch> {
        if ids.len() != batch * seq_len || batch == 0 || seq_len == 0 {
            return Err(Error::Shape {
                op: "token_batch",
                lhs: vec![batch, seq_len],
                rhs: vec![ids.len()],
            });
        }
        Ok(TokenBatch { ids, batch, seq_len })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<TokenBatch> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::Contract("ragged token batch".into()));
        }
        TokenBatch::new(rows.concat(), rows.len(), seq_len)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Capture per-layer tensors and masks.
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Scaled logits `QKᵀ/√d_head` before any dropout, `[B, H, L, L]`.
    pub logits: Tensor,
    /// Attention weights after softmax and dropout.
    pub weights: Tensor,
    /// Block output `[B, L, D]`.
    pub hidden: Tensor,
    /// Attention masks per `(batch, head)` grid, if any were applied.
    pub attention_masks: Option<Vec<MaskPlan>>,
    /// FFN hidden masks per batch element, if HiddenCut fired.
    pub ffn_masks: Option<Vec<MaskPlan>>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Classifier probabilities `[B, C]` or regression predictions `[B]`.
    pub output: Tensor,
    /// Pre-softmax head scores `[B, C]` (classifier) or `[B, 1]`.
    pub head_logits: Tensor,
    /// First-token representation of the last layer, `[B, D]`, before
    /// output dropout.
    pub pooled: Tensor,
    /// Present only when tracing was requested.
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
struct Layer {
    q: Linear,
    k: LoraLinear,
    v: LoraLinear,
    o: Linear,
    ln1: (Tensor, Tensor),
    ff1: Linear,
    ff2: Linear,
    ln2: (Tensor, Tensor),
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    emb_ln: (Tensor, Tensor),
    layers: Vec<Layer>,
    head: Linear,
}

fn norm_pair(d: usize) -> (Tensor, Tensor) {
    (Tensor::full(&[d], 1.0), Tensor::zeros(&[d]))
}

impl Model {
    /// Builds the frozen backbone from `config.backbone_seed` and the
    /// trainable adapters and head from `init_seed`.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let mut bb = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let mut tr = ChaCha8Rng::seed_from_u64(init_seed);

        let tok_emb = Tensor::new(normal_vec(&mut bb, config.vocab_size * d, 1.0), &[config.vocab_size, d])?;
        let pos_emb = Tensor::new(normal_vec(&mut bb, config.max_len * d, 1.0), &[config.max_len, d])?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let q = Linear::frozen(&mut bb, d, d)?;
            let k = Linear::frozen(&mut bb, d, d)?;
            let v = Linear::frozen(&mut bb, d, d)?;
            let o = Linear::frozen(&mut bb, d, d)?;
            let ff1 = Linear::frozen(&mut bb, d, config.d_ff)?;
            let ff2 = Linear::frozen(&mut bb, config.d_ff, d)?;
            layers.push(Layer {
                q,
                k: LoraLinear::new(k, config.lora_rank, config.lora_alpha, &mut tr)?,
                v: LoraLinear::new(v, config.lora_rank, config.lora_alpha, &mut tr)?,
                o,
                ln1: norm_pair(d),
                ff1,
                ff2,
                ln2: norm_pair(d),
            });
        }
        let c = config.head.outputs();
        let head = Linear {
            weight: Tensor::param(normal_vec(&mut tr, c * d, 0.02), &[c, d])?,
            bias: Tensor::param(vec![0.0; c], &[c])?,
        };
        Ok(Model {
            tok_emb,
            pos_emb,
            emb_ln: norm_pair(d),
            layers,
            head,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the dropout specs (validated) without touching parameters.
    pub fn set_dropout_specs(&mut self, specs: Vec<DropoutSpec>) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dropout_specs = specs;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// LoRA A/B of every adapted projection plus the head.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (name, lora) in [("k", &l.k), ("v", &l.v)] {
                out.push((format!("layers.{i}.attn.{name}.lora_a"), lora.a.clone()));
                out.push((format!("layers.{i}.attn.{name}.lora_b"), lora.b.clone()));
            }
        }
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        out
    }

    pub fn frozen_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed.token".to_string(), self.tok_emb.clone()),
            ("embed.position".to_string(), self.pos_emb.clone()),
            ("embed.ln.gamma".to_string(), self.emb_ln.0.clone()),
            ("embed.ln.beta".to_string(), self.emb_ln.1.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            let linears = [
                ("attn.q", &l.q),
                ("attn.k", &l.k.base),
                ("attn.v", &l.v.base),
                ("attn.o", &l.o),
                ("ffn.in", &l.ff1),
                ("ffn.out", &l.ff2),
            ];
            for (name, lin) in linears {
                out.push((format!("{p}.{name}.weight"), lin.weight.clone()));
                out.push((format!("{p}.{name}.bias"), lin.bias.clone()));
            }
            out.push((format!("{p}.ln1.gamma"), l.ln1.0.clone()));
            out.push((format!("{p}.ln1.beta"), l.ln1.1.clone()));
            out.push((format!("{p}.ln2.gamma"), l.ln2.0.clone()));
            out.push((format!("{p}.ln2.beta"), l.ln2.1.clone()));
        }
        out
    }

    /// Every parameter, frozen first.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut all = self.frozen_parameters();
        all.extend(self.trainable_parameters());
        all
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.trainable_parameters() {
            t.zero_grad();
        }
    }

    fn active(&self, position: Position, mode: Mode) -> Option<&DropoutSpec> {
        self.config.spec_for(position).filter(|s| s.is_active(mode))
    }

    fn active_in_layer(&self, position: Position, mode: Mode, layer: usize) -> Option<&DropoutSpec> {
        self.active(position, mode)
            .filter(|s| s.applies_to_layer(layer, self.config.num_layers))
    }

    pub fn forward(
        &self,
        tokens: &TokenBatch,
        mode: Mode,
        step_seed: u64,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let (b, l, d) = (tokens.batch, tokens.seq_len, cfg.d_model);
        if l > cfg.max_len {
            return Err(Error::Contract(format!("sequence length {l} exceeds max_len {}", cfg.max_len)));
        }
        if tokens.ids.len() != b * l {
            return Err(Error::Contract("token batch shape does not match its ids".into()));
        }

        let positions: Vec<usize> = (0..l).collect();
        let emb = Tensor::embedding(&self.tok_emb, &tokens.ids)?.reshape(&[b, l, d])?;
        let emb = emb.add(&Tensor::embedding(&self.pos_emb, &positions)?)?;
        let mut x = emb.layer_norm(&self.emb_ln.0, &self.emb_ln.1, LN_EPS)?;
        if let Some(spec) = self.active(Position::InputEmbed, mode) {
            let masks = hidden_masks(spec, b, l, d, step_seed, STREAM_INPUT, 0)?;
            x = dropout::input_cutoff(&x, &masks, spec.rate)?;
        }

        let mut traces = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (attn_out, mut lt) = self.attention_block(layer, i, &x, mode, step_seed, opts.trace)?;
            x = attn_out;
            let (ffn_out, ffn_masks) = self.ffn_block(layer, i, &x, mode, step_seed)?;
            x = ffn_out;
            if let Some(t) = lt.as_mut() {
                t.hidden = x.clone();
                t.ffn_masks = ffn_masks;
            }
            traces.extend(lt);
        }

        let pooled = x.select(1, 0)?;
        let mut repr = pooled.clone();
        if let Some(spec) = self.active(Position::OutputRepr, mode) {
            let seed = derive_seed(&[step_seed, STREAM_OUTPUT]);
            repr = dropout::output_dropout(&repr, spec.rate, seed)?;
        }
        let head_logits = self.head.forward(&repr)?;
        let output = match cfg.head {
            HeadKind::Classifier { .. } => head_logits.softmax_last()?,
            HeadKind::Regressor => head_logits.reshape(&[b])?,
        };
        Ok(ForwardTrace {
            output,
            head_logits,
            pooled,
            layers: traces,
        })
    }

    fn attention_block(
        &self,
        layer: &Layer,
        index: usize,
        x: &Tensor,
        mode: Mode,
        step_seed: u64,
        trace: bool,
    ) -> Result<(Tensor, Option<LayerTrace>)> {
        let cfg = &self.config;
        let shape = x.shape().to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (cfg.num_heads, cfg.head_dim());
        let heads = |t: Tensor| -> Result<Tensor> { t.reshape(&[b, l, h, dh])?.permute(&[0, 2, 1, 3]) };
        let q = heads(layer.q.forward(x)?)?;
        let k = heads(layer.k.forward(x)?)?;
        let v = heads(layer.v.forward(x)?)?;
        let logits = q.matmul_nt(&k)?.scale(1.0 / (dh as f64).sqrt());

        let dk = self.active_in_layer(Position::AttnLogits, mode, index);
        let da = self.active_in_layer(Position::AttnWeights, mode, index);
        let mut used_masks = None;
        let mut scores = logits.clone();
        if let Some(spec) = dk {
            let masks = attention_masks(spec, b, h, l, step_seed, STREAM_ATTN, index)?;
            scores = dropout::drop_key(&scores, &masks)?;
            used_masks = Some(masks);
        }
        let mut weights = scores.softmax_last()?;
        if let Some(spec) = da {
            let stream = if dk.is_some() { STREAM_ATTN_WEIGHTS_ONLY } else { STREAM_ATTN };
            let mut masks = attention_masks(spec, b, h, l, step_seed, stream, index)?;
            if let Some(prior) = &used_masks {
                masks = masks.iter().zip(prior).map(|(m, p)| keep_some_survivor(m, p)).collect::<Result<_>>()?;
            }
            weights = dropout::drop_attention(&weights, &masks, spec.grad_stop_denominator)?;
            used_masks = Some(masks);
        }

        let ctx = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, d])?;
        let out = x
            .add(&layer.o.forward(&ctx)?)?
            .layer_norm(&layer.ln1.0, &layer.ln1.1, LN_EPS)?;
        let lt = trace.then(|| LayerTrace {
            logits,
            weights,
            hidden: out.clone(),
            attention_masks: used_masks,
            ffn_masks: None,
        });
        Ok((out, lt))
    }

    fn ffn_block(
        &self,
        layer: &Layer,
        index: usize,
        x: &Tensor,
        mode: Mode,
        step_seed: u64,
    ) -> Result<(Tensor, Option<Vec<MaskPlan>>)> {
        let (b, l) = (x.shape()[0], x.shape()[1]);
        let mut hidden = layer.ff1.forward(x)?.gelu();
        let mut used = None;
        if let Some(spec) = self.active_in_layer(Position::FfnHidden, mode, index) {
            let masks = hidden_masks(spec, b, l, self.config.d_ff, step_seed, STREAM_FFN, index)?;
            hidden = dropout::hidden_cut(&hidden, &masks, spec.rate)?;
            used = Some(masks);
        }
        let out = x
            .add(&layer.ff2.forward(&hidden)?)?
            .layer_norm(&layer.ln2.0, &layer.ln2.1, LN_EPS)?;
        Ok((out, used))
    }
}

fn attention_masks(
    spec: &DropoutSpec,
    batch: usize,
    heads: usize,
    len: usize,
    step_seed: u64,
    stream: u64,
    layer: usize,
) -> Result<Vec<MaskPlan>> {
    let mut out = Vec::with_capacity(batch * heads);
    for bi in 0..batch {
        for hi in 0..heads {
            let seed = derive_seed(&[step_seed, stream, layer as u64, bi as u64, hi as u64]);
            out.push(sample_mask(len, len, spec.pattern, spec.rate, seed, AxisSemantics::Attention)?);
        }
    }
    Ok(out)
}

/// Rows where `mask` would drop every key that `prior` kept fall back to
/// `prior`, so stacked attention dropout never empties a row.
fn keep_some_survivor(mask: &MaskPlan, prior: &MaskPlan) -> Result<MaskPlan> {
    let cols = mask.cols();
    let mut keep = mask.keep().to_vec();
    for (row, prow) in keep.chunks_mut(cols).zip(prior.keep().chunks(cols)) {
        if !row.iter().zip(prow).any(|(a, b)| *a && *b) {
            row.copy_from_slice(prow);
        }
    }
    let mut out = MaskPlan::from_grid(mask.rows(), cols, keep, mask.pattern, mask.axis)?;
    out.rate = mask.rate;
    out.seed = mask.seed;
    Ok(out)
}

fn hidden_masks(
    spec: &DropoutSpec,
    batch: usize,
    rows: usize,
    cols: usize,
    step_seed: u64,
    stream: u64,
    layer: usize,
) -> Result<Vec<MaskPlan>> {
    (0..batch)
        .map(|bi| {
            let seed = derive_seed(&[step_seed, stream, layer as u64, bi as u64]);
            sample_mask(rows, cols, spec.pattern, spec.rate, seed, AxisSemantics::Hidden)
        })
        .collect()
}
