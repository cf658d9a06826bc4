//! Encoder–decoder assembly: convolutional frontend, Transformer or
//! Conformer encoder with a CTC head, Transformer decoder, static head
//! pruning, greedy decoding and checkpoints.
//!
//! Token conventions: `0` is padding and the CTC blank, `1` is both the
//! start and end symbol, content symbols start at `2`.

mod checkpoint;
mod config;
mod frontend;
pub mod layers;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BlockKind, ModelConfig, NormPlacement};
pub use frontend::{conv_frontend, conv_out_len, frontend_out_len, sinusoidal_positions, FrontendParams, FRONTEND_MIN_FRAMES};

use std::collections::BTreeMap;

use rand::Rng;

use crate::analysis::PrunePlan;
use crate::attention::{sample_removal_mask, AttentionRecord, AttnMask, MhaParams, Mode, RemovalMask, Site};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::objectives::argmax;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use layers::{
    conformer_block_forward, decoder_layer_forward, encoder_layer_forward, Activation, ConformerBlockParams, Ctx,
    DecoderLayerParams, EncoderLayerParams, FfnParams, LnParams,
};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 1;
/// Smallest content token.
pub const FIRST_SYMBOL: usize = 2;

#[derive(Clone, Debug)]
pub enum EncoderBlock {
    Transformer(EncoderLayerParams),
    Conformer(ConformerBlockParams),
}

impl EncoderBlock {
    fn mha(&self) -> &MhaParams {
        match self {
            EncoderBlock::Transformer(p) => &p.mha,
            EncoderBlock::Conformer(p) => &p.mha,
        }
    }
}

/// One (possibly padded) example fed to [`Model::forward_example`].
#[derive(Clone, Copy, Debug)]
pub struct ExampleInput<'a, T> {
    /// `[T × input_dim]`; rows from `src_len` on are padding.
    pub src: &'a Tensor<T>,
    pub src_len: usize,
    /// Teacher-forced decoder input, start symbol first; entries from `dec_len` on are padding.
    pub dec_in: &'a [usize],
    pub dec_len: usize,
}

pub struct ExampleOutput<T> {
    /// `[dec_in.len() × vocab]` decoder logits, including padded rows.
    pub dec_logits: Var,
    /// `[enc_len × vocab]` CTC log-probabilities over the valid encoder frames.
    pub ctc_log_probs: Var,
    pub enc_len: usize,
    /// Captured attention, trimmed to valid positions, in MHA instance order.
    pub records: Vec<AttentionRecord<T>>,
}

/// Parameters and structure of the full model.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    frontend: FrontendParams,
    encoder: Vec<EncoderBlock>,
    enc_ln: Option<LnParams>,
    ctc_w: ParamId,
    ctc_b: ParamId,
    embed: ParamId,
    decoder: Vec<DecoderLayerParams>,
    dec_ln: Option<LnParams>,
    out_w: ParamId,
    out_b: ParamId,
    prune: BTreeMap<Site, PrunePlan>,
}

impl<T: Scalar> Model<T> {
    /// Allocates parameters in a fixed order from `rng`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let pre = c.norm == NormPlacement::Pre;
        let ln = |store: &mut ParamStore<T>, name: String| pre.then(|| LnParams::init(store, &name, d));

        let frontend = FrontendParams::init(&mut store, c.input_dim, d, rng);
        let mut encoder = Vec::with_capacity(c.enc_layers);
        for l in 0..c.enc_layers {
            let prefix = format!("enc.{l}");
            encoder.push(match c.block_kind {
                BlockKind::Transformer => {
                    let ln_attn = ln(&mut store, format!("{prefix}.ln_attn"));
                    let mha = MhaParams::init(&mut store, &format!("{prefix}.mha"), c.heads, d, c.d_k, c.d_v, rng)?;
                    let ln_ffn = ln(&mut store, format!("{prefix}.ln_ffn"));
                    let ffn = FfnParams::init(&mut store, &format!("{prefix}.ffn"), d, c.d_ff, Activation::Relu, rng);
                    EncoderBlock::Transformer(EncoderLayerParams {
                        ln_attn,
                        mha,
                        ln_ffn,
                        ffn,
                    })
                }
                BlockKind::Conformer => EncoderBlock::Conformer(ConformerBlockParams::init(&mut store, &prefix, c, rng)?),
            });
        }
        let enc_ln = match c.block_kind {
            BlockKind::Transformer => ln(&mut store, "enc.ln_out".into()),
            BlockKind::Conformer => None,
        };
        let ctc_w = store.insert_scaled_normal("ctc.w", &[d, c.vocab_size], d, rng);
        let ctc_b = store.insert("ctc.b", Tensor::zeros(&[c.vocab_size]));
        let embed = store.insert_scaled_normal("dec.embed", &[c.vocab_size, d], 1, rng);
        let mut decoder = Vec::with_capacity(c.dec_layers);
        for l in 0..c.dec_layers {
            let prefix = format!("dec.{l}");
            let ln_self = ln(&mut store, format!("{prefix}.ln_self"));
            let self_mha = MhaParams::init(&mut store, &format!("{prefix}.self"), c.heads, d, c.d_k, c.d_v, rng)?;
            let ln_inter = ln(&mut store, format!("{prefix}.ln_inter"));
            let inter_mha = MhaParams::init(&mut store, &format!("{prefix}.inter"), c.heads, d, c.d_k, c.d_v, rng)?;
            let ln_ffn = ln(&mut store, format!("{prefix}.ln_ffn"));
            let ffn = FfnParams::init(&mut store, &format!("{prefix}.ffn"), d, c.d_ff, Activation::Relu, rng);
            decoder.push(DecoderLayerParams {
                ln_self,
                self_mha,
                ln_inter,
                inter_mha,
                ln_ffn,
                ffn,
            });
        }
        let dec_ln = ln(&mut store, "dec.ln_out".into());
        let out_w = store.insert_scaled_normal("out.w", &[d, c.vocab_size], d, rng);
        let out_b = store.insert("out.b", Tensor::zeros(&[c.vocab_size]));
        Ok(Self {
            config,
            params: store,
            frontend,
            encoder,
            enc_ln,
            ctc_w,
            ctc_b,
            embed,
            decoder,
            dec_ln,
            out_w,
            out_b,
            prune: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces every parameter value; names and shapes must match exactly.
    pub fn load_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.params.load_from(other)
    }

    pub fn encoder_blocks(&self) -> &[EncoderBlock] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayerParams] {
        &self.decoder
    }

    /// Every MHA in the order masks are drawn: encoder layers, then for each
    /// decoder layer its self- and inter-attention.
    pub fn mha_instances(&self) -> Vec<(Site, usize, &MhaParams)> {
        let mut out: Vec<_> = self
            .encoder
            .iter()
            .enumerate()
            .map(|(l, b)| (Site::EncoderSelf, l, b.mha()))
            .collect();
        for (l, d) in self.decoder.iter().enumerate() {
            out.push((Site::DecoderSelf, l, &d.self_mha));
            out.push((Site::DecoderInter, l, &d.inter_mha));
        }
        out
    }

    fn site_layers(&self, site: Site) -> usize {
        match site {
            Site::EncoderSelf => self.config.enc_layers,
            Site::DecoderSelf | Site::DecoderInter => self.config.dec_layers,
        }
    }

    /// Installs a static keep map for one site, replacing any earlier plan
    /// for that site, and returns the number of heads left there.
    pub fn apply_prune_plan(&mut self, plan: &PrunePlan) -> Result<usize> {
        let layers = self.site_layers(plan.site);
        if plan.layers() != layers || plan.keep.iter().any(|row| row.len() != self.config.heads) {
            return Err(invalid(
                "apply-prune-plan",
                format!(
                    "plan for {} is {}×{}, model has {layers}×{}",
                    plan.site,
                    plan.layers(),
                    plan.heads(),
                    self.config.heads
                ),
            ));
        }
        self.prune.insert(plan.site, plan.clone());
        Ok(plan.remaining())
    }

    pub fn clear_prune_plans(&mut self) {
        self.prune.clear();
    }

    pub fn prune_plan(&self, site: Site) -> Option<&PrunePlan> {
        self.prune.get(&site)
    }

    /// Heads at `site` not removed by its prune plan.
    pub fn remaining_heads(&self, site: Site) -> usize {
        self.prune
            .get(&site)
            .map_or(self.site_layers(site) * self.config.heads, PrunePlan::remaining)
    }

    /// Parameter ids of every head silenced by a prune plan.
    pub fn pruned_head_params(&self) -> Vec<ParamId> {
        self.mha_instances()
            .into_iter()
            .flat_map(|(site, layer, mha)| {
                let keep = self.prune.get(&site).map(|p| p.keep[layer].clone());
                (0..mha.num_heads())
                    .filter(move |&h| keep.as_ref().is_some_and(|k| !k[h]))
                    .flat_map(|h| mha.head_param_ids(h))
            })
            .collect()
    }

    /// One removal mask per MHA instance, drawn in [`Model::mha_instances`] order.
    pub fn sample_masks<R: Rng + ?Sized>(&self, batch: usize, mode: Mode, rng: &mut R) -> Result<Vec<RemovalMask>> {
        self.mha_instances()
            .into_iter()
            .map(|(site, _, mha)| Ok(sample_removal_mask(&self.config.policy(site, mode)?, batch, mha.num_heads(), rng)))
            .collect()
    }

    /// Per-instance head multipliers for example `example` of `masks`.
    pub fn head_scales(&self, masks: &[RemovalMask], example: usize, mode: Mode) -> Result<Vec<Vec<T>>> {
        let instances = self.mha_instances();
        if masks.len() != instances.len() {
            return Err(invalid(
                "head-scales",
                format!("{} masks for {} attention instances", masks.len(), instances.len()),
            ));
        }
        instances
            .into_iter()
            .zip(masks)
            .map(|((site, layer, _), mask)| {
                let policy = self.config.policy(site, mode)?;
                let prune = self.prune.get(&site).map(|p| p.keep[layer].as_slice());
                Ok(policy.head_scales(mask.row(example), prune))
            })
            .collect()
    }

    /// Head multipliers at evaluation: every head present unless pruned.
    pub fn eval_scales(&self) -> Result<Vec<Vec<T>>> {
        let masks: Vec<RemovalMask> = self
            .mha_instances()
            .iter()
            .map(|(_, _, m)| RemovalMask::all_kept(1, m.num_heads()))
            .collect();
        self.head_scales(&masks, 0, Mode::Eval)
    }

    #[allow(clippy::too_many_arguments)]
    fn encode(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        src: Var,
        src_len: usize,
        scales: &[Vec<T>],
        ctx: &mut Ctx<'_>,
        records: &mut Vec<AttentionRecord<T>>,
    ) -> Result<(Var, usize)> {
        let rows = g.shape(src)[0];
        if src_len == 0 || src_len > rows {
            return Err(invalid("encode", format!("source length {src_len} with {rows} frames")));
        }
        let enc_len = frontend_out_len(src_len).ok_or(Error::TooShort {
            what: "source frames",
            len: src_len,
            min: FRONTEND_MIN_FRAMES,
        })?;
        let x = conv_frontend(g, b, &self.frontend, src)?;
        let n = g.shape(x)[0];
        let pe = g.constant(sinusoidal_positions(n, self.config.d_model)?);
        let mut x = g.add(x, pe)?;
        let mask = AttnMask {
            key_valid: (enc_len < n).then(|| (0..n).map(|j| j < enc_len).collect()),
            causal: false,
        };
        for (l, block) in self.encoder.iter().enumerate() {
            let (y, rec) = match block {
                EncoderBlock::Transformer(p) => encoder_layer_forward(g, b, p, x, &mask, &scales[l], ctx)?,
                EncoderBlock::Conformer(p) => conformer_block_forward(g, b, p, x, enc_len, &mask, &scales[l], ctx)?,
            };
            if let Some(m) = rec {
                records.push(
                    AttentionRecord {
                        site: Site::EncoderSelf,
                        layer: l,
                        matrices: m,
                    }
                    .trimmed(enc_len, enc_len),
                );
            }
            x = y;
        }
        if let Some(ln) = &self.enc_ln {
            x = ln.forward(g, b, x)?;
        }
        Ok((x, enc_len))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        enc: Var,
        enc_len: usize,
        dec_in: &[usize],
        dec_len: usize,
        scales: &[Vec<T>],
        ctx: &mut Ctx<'_>,
        records: &mut Vec<AttentionRecord<T>>,
    ) -> Result<Var> {
        let t = dec_in.len();
        if dec_len == 0 || dec_len > t {
            return Err(invalid("decode", format!("decoder length {dec_len} with {t} positions")));
        }
        let n = g.shape(enc)[0];
        let emb = g.embedding(b.var(self.embed), dec_in)?;
        let pe = g.constant(sinusoidal_positions(t, self.config.d_model)?);
        let mut y = g.add(emb, pe)?;
        let self_mask = AttnMask {
            key_valid: (dec_len < t).then(|| (0..t).map(|j| j < dec_len).collect()),
            causal: true,
        };
        let inter_mask = AttnMask {
            key_valid: (enc_len < n).then(|| (0..n).map(|j| j < enc_len).collect()),
            causal: false,
        };
        let base = self.encoder.len();
        for (l, p) in self.decoder.iter().enumerate() {
            let (s_self, s_inter) = (&scales[base + 2 * l], &scales[base + 2 * l + 1]);
            let (out, (r_self, r_inter)) = decoder_layer_forward(g, b, p, y, enc, &self_mask, &inter_mask, s_self, s_inter, ctx)?;
            if let Some(m) = r_self {
                records.push(
                    AttentionRecord {
                        site: Site::DecoderSelf,
                        layer: l,
                        matrices: m,
                    }
                    .trimmed(dec_len, dec_len),
                );
            }
            if let Some(m) = r_inter {
                records.push(
                    AttentionRecord {
                        site: Site::DecoderInter,
                        layer: l,
                        matrices: m,
                    }
                    .trimmed(dec_len, enc_len),
                );
            }
            y = out;
        }
        if let Some(ln) = &self.dec_ln {
            y = ln.forward(g, b, y)?;
        }
        let logits = g.matmul(y, b.var(self.out_w))?;
        g.add_row(logits, b.var(self.out_b))
    }

    /// Teacher-forced forward of one example with explicit head multipliers
    /// (see [`Model::head_scales`]).
    pub fn forward_example(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: ExampleInput<'_, T>,
        scales: &[Vec<T>],
        ctx: &mut Ctx<'_>,
    ) -> Result<ExampleOutput<T>> {
        if scales.len() != self.encoder.len() + 2 * self.decoder.len() {
            return Err(invalid("forward", "one scale vector per attention instance required"));
        }
        if input.src.shape().len() != 2 || input.src.last_dim() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: input.src.shape().to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        let mut records = Vec::new();
        let src = g.constant(input.src.clone());
        let (enc, enc_len) = self.encode(g, b, src, input.src_len, scales, ctx, &mut records)?;
        let valid = g.slice_rows(enc, 0, enc_len)?;
        let ctc = g.matmul(valid, b.var(self.ctc_w))?;
        let ctc = g.add_row(ctc, b.var(self.ctc_b))?;
        let ctc_log_probs = g.log_softmax_rows(ctc)?;
        let dec_logits = self.decode(g, b, enc, enc_len, input.dec_in, input.dec_len, scales, ctx, &mut records)?;
        Ok(ExampleOutput {
            dec_logits,
            ctc_log_probs,
            enc_len,
            records,
        })
    }

    /// Evaluation-mode greedy decoding of `src[..src_len]`, stopping at the
    /// end symbol or after `max_len` tokens.
    pub fn greedy_decode(&self, src: &Tensor<T>, src_len: usize, max_len: usize) -> Result<Vec<usize>> {
        let scales = self.eval_scales()?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut ctx = Ctx::eval(false);
        let mut records = Vec::new();
        let x = g.constant(src.clone());
        let (enc, enc_len) = self.encode(&mut g, &b, x, src_len, &scales, &mut ctx, &mut records)?;
        let mut hyp = Vec::new();
        while hyp.len() < max_len {
            let dec_in: Vec<usize> = std::iter::once(SOS).chain(hyp.iter().copied()).collect();
            let logits = self.decode(&mut g, &b, enc, enc_len, &dec_in, dec_in.len(), &scales, &mut ctx, &mut records)?;
            let next = argmax(g.value(logits).row(dec_in.len() - 1));
            if next == EOS {
                break;
            }
            hyp.push(next);
        }
        Ok(hyp)
    }
}
