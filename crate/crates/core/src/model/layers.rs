//! Encoder layers, decoder layers and Conformer blocks on one example.

use rand::{Rng, RngCore};

use crate::attention::{mha_forward, AttnMask, MhaParams};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Variance floor inside every layer normalization.
pub const LN_EPS: f64 = 1e-12;

/// Per-forward state shared by every layer: dropout rate and generator, and
/// whether attention weights are captured.
pub struct Ctx<'r> {
    pub dropout: f64,
    /// `None` disables dropout regardless of the rate.
    pub rng: Option<&'r mut dyn RngCore>,
    pub capture: bool,
}

impl<'r> Ctx<'r> {
    pub fn eval(capture: bool) -> Self {
        Self {
            dropout: 0.0,
            rng: None,
            capture,
        }
    }

    /// Inverted dropout: keeps each entry with probability `1 − rate` and scales survivors by `1/(1 − rate)`.
    pub fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let rate = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let survive = T::of(1.0 / keep);
        let shape = g.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { survive } else { T::zero() });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct LnParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LnParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{prefix}.gain"), Tensor::full(&[d], T::one())),
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b.var(self.gain), b.var(self.bias), T::of(LN_EPS))
    }
}

fn norm<T: Scalar>(ln: &Option<LnParams>, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
    match ln {
        Some(ln) => ln.forward(g, b, x),
        None => Ok(x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

/// `act(X S + b) Z + r`.
#[derive(Clone, Debug)]
pub struct FfnParams {
    /// `[d_model × d_ff]`
    pub s: ParamId,
    /// `[d_ff]`
    pub b: ParamId,
    /// `[d_ff × d_model]`
    pub z: ParamId,
    /// `[d_model]`
    pub r: ParamId,
    pub act: Activation,
}

impl FfnParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            s: store.insert_scaled_normal(format!("{prefix}.s"), &[d_model, d_ff], d_model, rng),
            b: store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_ff])),
            z: store.insert_scaled_normal(format!("{prefix}.z"), &[d_ff, d_model], d_ff, rng),
            r: store.insert(format!("{prefix}.r"), Tensor::zeros(&[d_model])),
            act,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, b.var(self.s))?;
        let h = g.add_row(h, b.var(self.b))?;
        let h = match self.act {
            Activation::Relu => g.relu(h),
            Activation::Swish => g.swish(h),
        };
        let y = g.matmul(h, b.var(self.z))?;
        g.add_row(y, b.var(self.r))
    }
}

/// Self-attention and feed-forward sublayers with residual connections.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub ln_attn: Option<LnParams>,
    pub mha: MhaParams,
    pub ln_ffn: Option<LnParams>,
    pub ffn: FfnParams,
}

/// `X' = X + MHA(N(X))`, `Y = X' + FFN(N(X'))`, where `N` is the layer's
/// normalization (identity without one) and dropout follows each sublayer.
pub fn encoder_layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &EncoderLayerParams,
    x: Var,
    mask: &AttnMask,
    scales: &[T],
    ctx: &mut Ctx<'_>,
) -> Result<(Var, Option<Vec<Tensor<T>>>)> {
    let xn = norm(&p.ln_attn, g, b, x)?;
    let (att, rec) = mha_forward(g, b, &p.mha, xn, xn, xn, mask, scales, ctx.capture)?;
    let att = ctx.dropout(g, att)?;
    let x1 = g.add(x, att)?;
    let xn = norm(&p.ln_ffn, g, b, x1)?;
    let f = p.ffn.forward(g, b, xn)?;
    let f = ctx.dropout(g, f)?;
    Ok((g.add(x1, f)?, rec))
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub ln_self: Option<LnParams>,
    pub self_mha: MhaParams,
    pub ln_inter: Option<LnParams>,
    pub inter_mha: MhaParams,
    pub ln_ffn: Option<LnParams>,
    pub ffn: FfnParams,
}

/// Attention weights captured by one decoder layer.
pub type DecoderCapture<T> = (Option<Vec<Tensor<T>>>, Option<Vec<Tensor<T>>>);

/// Causal self-attention over `y`, attention over `enc`, then feed-forward;
/// each sublayer residual as in [`encoder_layer_forward`].
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &DecoderLayerParams,
    y: Var,
    enc: Var,
    self_mask: &AttnMask,
    inter_mask: &AttnMask,
    self_scales: &[T],
    inter_scales: &[T],
    ctx: &mut Ctx<'_>,
) -> Result<(Var, DecoderCapture<T>)> {
    let yn = norm(&p.ln_self, g, b, y)?;
    let (att, rec_self) = mha_forward(g, b, &p.self_mha, yn, yn, yn, self_mask, self_scales, ctx.capture)?;
    let att = ctx.dropout(g, att)?;
    let y1 = g.add(y, att)?;
    let yn = norm(&p.ln_inter, g, b, y1)?;
    let (att, rec_inter) = mha_forward(g, b, &p.inter_mha, yn, enc, enc, inter_mask, inter_scales, ctx.capture)?;
    let att = ctx.dropout(g, att)?;
    let y2 = g.add(y1, att)?;
    let yn = norm(&p.ln_ffn, g, b, y2)?;
    let f = p.ffn.forward(g, b, yn)?;
    let f = ctx.dropout(g, f)?;
    Ok((g.add(y2, f)?, (rec_self, rec_inter)))
}

/// Pointwise → GLU → depthwise → layer norm → swish → pointwise.
#[derive(Clone, Debug)]
pub struct ConvModuleParams {
    /// `[d × 2d]`
    pub pw1_w: ParamId,
    pub pw1_b: ParamId,
    /// `[d × kernel]`
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ln: LnParams,
    /// `[d × d]`
    pub pw2_w: ParamId,
    pub pw2_b: ParamId,
}

impl ConvModuleParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            pw1_w: store.insert_scaled_normal(format!("{prefix}.pw1.w"), &[d, 2 * d], d, rng),
            pw1_b: store.insert(format!("{prefix}.pw1.b"), Tensor::zeros(&[2 * d])),
            dw_w: store.insert_scaled_normal(format!("{prefix}.dw.w"), &[d, kernel], kernel, rng),
            dw_b: store.insert(format!("{prefix}.dw.b"), Tensor::zeros(&[d])),
            ln: LnParams::init(store, &format!("{prefix}.ln"), d),
            pw2_w: store.insert_scaled_normal(format!("{prefix}.pw2.w"), &[d, d], d, rng),
            pw2_b: store.insert(format!("{prefix}.pw2.b"), Tensor::zeros(&[d])),
        }
    }

    /// `valid` is the number of leading non-padded rows; later rows are
    /// zeroed before the depthwise convolution so padding never reaches
    /// valid positions.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, valid: usize) -> Result<Var> {
        let h = g.pointwise_conv1d(x, b.var(self.pw1_w), b.var(self.pw1_b))?;
        let mut h = g.glu(h)?;
        let (n, d) = (g.shape(h)[0], g.shape(h)[1]);
        if valid < n {
            let mask: Vec<bool> = (0..n * d).map(|k| k / d >= valid).collect();
            h = g.masked_fill(h, &mask, T::zero())?;
        }
        let h = g.depthwise_conv1d(h, b.var(self.dw_w), Some(b.var(self.dw_b)))?;
        let h = self.ln.forward(g, b, h)?;
        let h = g.swish(h);
        g.pointwise_conv1d(h, b.var(self.pw2_w), b.var(self.pw2_b))
    }
}

/// Feed-forward module of a Conformer block: layer norm then a swish FFN.
#[derive(Clone, Debug)]
pub struct HalfFfnParams {
    pub ln: LnParams,
    pub ffn: FfnParams,
}

impl HalfFfnParams {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let h = self.ln.forward(g, b, x)?;
        let h = self.ffn.forward(g, b, h)?;
        let h = ctx.dropout(g, h)?;
        Ok(g.scale(h, T::of(0.5)))
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlockParams {
    pub ff1: HalfFfnParams,
    pub mha: MhaParams,
    pub conv: ConvModuleParams,
    pub ff2: HalfFfnParams,
    pub ln_out: LnParams,
}

impl ConformerBlockParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &super::ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let half = |store: &mut ParamStore<T>, name: &str, rng: &mut R| HalfFfnParams {
            ln: LnParams::init(store, &format!("{prefix}.{name}.ln"), d),
            ffn: FfnParams::init(store, &format!("{prefix}.{name}"), d, cfg.d_ff, Activation::Swish, rng),
        };
        let ff1 = half(store, "ff1", rng);
        let mha = MhaParams::init(store, &format!("{prefix}.mha"), cfg.heads, d, cfg.d_k, cfg.d_v, rng)?;
        let conv = ConvModuleParams::init(store, &format!("{prefix}.conv"), d, cfg.conv_kernel, rng);
        let ff2 = half(store, "ff2", rng);
        let ln_out = LnParams::init(store, &format!("{prefix}.ln_out"), d);
        Ok(Self {
            ff1,
            mha,
            conv,
            ff2,
            ln_out,
        })
    }
}

/// `X̃ = X + ½FF(X)`, `X' = X̃ + MHA(X̃, X̃, X̃)`, `X'' = X' + Conv(X')`,
/// `Y = LayerNorm(X'' + ½FF(X''))`.
#[allow(clippy::too_many_arguments)]
pub fn conformer_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &ConformerBlockParams,
    x: Var,
    valid: usize,
    mask: &AttnMask,
    scales: &[T],
    ctx: &mut Ctx<'_>,
) -> Result<(Var, Option<Vec<Tensor<T>>>)> {
    let f = p.ff1.forward(g, b, x, ctx)?;
    let xt = g.add(x, f)?;
    let (att, rec) = mha_forward(g, b, &p.mha, xt, xt, xt, mask, scales, ctx.capture)?;
    let att = ctx.dropout(g, att)?;
    let x1 = g.add(xt, att)?;
    let c = p.conv.forward(g, b, x1, valid)?;
    let c = ctx.dropout(g, c)?;
    let x2 = g.add(x1, c)?;
    let f = p.ff2.forward(g, b, x2, ctx)?;
    let y = g.add(x2, f)?;
    Ok((p.ln_out.forward(g, b, y)?, rec))
}
