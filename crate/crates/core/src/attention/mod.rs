//! Scaled dot-product attention heads, multi-head attention, and stochastic
//! attention head removal.
//!
//! During training each head of each example is kept with probability `1 − q`
//! and a kept head's output is multiplied by `1/(1 − q)`; at evaluation every
//! head is present and unscaled, so the expected training output equals the
//! evaluation output. A static prune plan can additionally silence heads in
//! both modes.

mod record;

pub use record::{read_dump, write_dump, AttentionRecord, AttnMatrix, DumpRecord, Site, DUMP_MAGIC, ROW_SUM_TOL};

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Logit written into masked attention positions before the softmax.
pub const MASKED_LOGIT: f64 = -1e30;

/// Projections of a single attention head.
#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `[d_model × d_k]`
    pub w_q: ParamId,
    /// `[d_model × d_k]`
    pub w_k: ParamId,
    /// `[d_model × d_v]`
    pub w_v: ParamId,
}

/// `h` heads and the output projection `U_h[(h·d_v) × d_model]`.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub heads: Vec<HeadParams>,
    pub u_h: ParamId,
    pub d_k: usize,
    pub d_v: usize,
}

impl MhaParams {
    /// Allocates Gaussian-initialized projections under `prefix`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        heads: usize,
        d_model: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(invalid("mha", "at least one head required"));
        }
        let heads = (0..heads)
            .map(|i| HeadParams {
                w_q: store.insert_scaled_normal(format!("{prefix}.head{i}.w_q"), &[d_model, d_k], d_model, rng),
                w_k: store.insert_scaled_normal(format!("{prefix}.head{i}.w_k"), &[d_model, d_k], d_model, rng),
                w_v: store.insert_scaled_normal(format!("{prefix}.head{i}.w_v"), &[d_model, d_v], d_model, rng),
            })
            .collect::<Vec<_>>();
        let d_h = heads.len() * d_v;
        let u_h = store.insert_scaled_normal(format!("{prefix}.u_h"), &[d_h, d_model], d_h, rng);
        Ok(Self { heads, u_h, d_k, d_v })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Every parameter owned by head `i`, excluding its rows of `U_h`.
    pub fn head_param_ids(&self, i: usize) -> [ParamId; 3] {
        let h = &self.heads[i];
        [h.w_q, h.w_k, h.w_v]
    }
}

/// Which positions a query may attend to.
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    /// `false` marks padded key positions; `None` means every key is valid.
    pub key_valid: Option<Vec<bool>>,
    /// Forbid attending to keys after the query position.
    pub causal: bool,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self {
            key_valid: None,
            causal: true,
        }
    }

    /// Row-major `n × m` mask with `true` at positions that must not be attended.
    pub fn blocked(&self, n: usize, m: usize) -> Result<Vec<bool>> {
        if let Some(k) = &self.key_valid {
            if k.len() != m {
                return Err(Error::ShapeMismatch {
                    op: "attention-mask",
                    lhs: vec![k.len()],
                    rhs: vec![n, m],
                });
            }
        }
        let mut out = vec![false; n * m];
        for i in 0..n {
            let mut open = 0;
            for j in 0..m {
                let blocked = (self.causal && j > i) || self.key_valid.as_ref().is_some_and(|k| !k[j]);
                out[i * m + j] = blocked;
                open += usize::from(!blocked);
            }
            if open == 0 {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        Ok(out)
    }
}

/// One head: `softmax(Q Kᵀ / √d_k) V` with `Q = Xq W_q`, `K = Xk W_k`, `V = Xv W_v`.
///
/// Returns the head output `[n × d_v]` and the attention weights `[n × m]`.
pub fn attention_head_forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    head: &HeadParams,
    xq: Var,
    xk: Var,
    xv: Var,
    mask: &AttnMask,
) -> Result<(Var, Var)> {
    let n = g.shape(xq)[0];
    let m = g.shape(xk)[0];
    if g.shape(xv)[0] != m {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: g.shape(xk).to_vec(),
            rhs: g.shape(xv).to_vec(),
        });
    }
    let blocked = mask.blocked(n, m)?;
    let q = g.matmul(xq, bound.var(head.w_q))?;
    let k = g.matmul(xk, bound.var(head.w_k))?;
    let v = g.matmul(xv, bound.var(head.w_v))?;
    let d_k = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let mut logits = g.matmul(q, kt)?;
    if blocked.iter().any(|&b| b) {
        logits = g.masked_fill(logits, &blocked, T::of(MASKED_LOGIT))?;
    }
    let attn = g.softmax_rows(logits, T::of(d_k as f64).sqrt())?;
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}

/// Train or evaluation behaviour of the removal mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Head removal probability together with the current mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemovalPolicy {
    q: f64,
    pub mode: Mode,
}

impl RemovalPolicy {
    pub fn new(q: f64, mode: Mode) -> Result<Self> {
        if !(0.0..1.0).contains(&q) {
            return Err(invalid("removal-policy", format!("q = {q} must lie in [0, 1)")));
        }
        Ok(Self { q, mode })
    }

    pub fn eval() -> Self {
        Self { q: 0.0, mode: Mode::Eval }
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Multiplier for each head's output given one example's keep flags and an
    /// optional static keep map.
    pub fn head_scales<T: Scalar>(&self, keep: &[bool], prune: Option<&[bool]>) -> Vec<T> {
        let survive = T::of(1.0 / (1.0 - self.q));
        keep.iter()
            .enumerate()
            .map(|(i, &k)| {
                if prune.is_some_and(|p| !p[i]) {
                    T::zero()
                } else {
                    match self.mode {
                        Mode::Eval => T::one(),
                        Mode::Train if k => survive,
                        Mode::Train => T::zero(),
                    }
                }
            })
            .collect()
    }
}

/// Keep flags for one MHA instance, `batch × heads`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemovalMask {
    pub batch: usize,
    pub heads: usize,
    pub keep: Vec<bool>,
}

impl RemovalMask {
    pub fn all_kept(batch: usize, heads: usize) -> Self {
        Self {
            batch,
            heads,
            keep: vec![true; batch * heads],
        }
    }

    pub fn row(&self, example: usize) -> &[bool] {
        &self.keep[example * self.heads..(example + 1) * self.heads]
    }
}

/// Samples per-example keep flags.
///
/// In training mode draws exactly `batch · heads` uniforms from `rng` (one per
/// flag, example-major) and keeps a head when its draw is below `1 − q`. In
/// evaluation mode nothing is drawn and every head is kept.
pub fn sample_removal_mask<R: Rng + ?Sized>(policy: &RemovalPolicy, batch: usize, heads: usize, rng: &mut R) -> RemovalMask {
    match policy.mode {
        Mode::Eval => RemovalMask::all_kept(batch, heads),
        Mode::Train => {
            let keep_prob = 1.0 - policy.q;
            let keep = (0..batch * heads).map(|_| rng.random::<f64>() < keep_prob).collect();
            RemovalMask { batch, heads, keep }
        }
    }
}

/// Multi-head attention `(s_1·A_1, …, s_h·A_h) U_h` where `s_i` is the head's
/// scale from [`RemovalPolicy::head_scales`].
///
/// With `capture`, also returns the post-softmax weights of every head.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    params: &MhaParams,
    xq: Var,
    xk: Var,
    xv: Var,
    mask: &AttnMask,
    scales: &[T],
    capture: bool,
) -> Result<(Var, Option<Vec<Tensor<T>>>)> {
    if scales.len() != params.num_heads() {
        return Err(Error::ShapeMismatch {
            op: "mha",
            lhs: vec![params.num_heads()],
            rhs: vec![scales.len()],
        });
    }
    let mut outs = Vec::with_capacity(params.num_heads());
    let mut captured = capture.then(Vec::new);
    for (head, &s) in params.heads.iter().zip(scales) {
        // Removed heads are still evaluated; the zero scale silences output and gradient.
        let (out, attn) = attention_head_forward(g, bound, head, xq, xk, xv, mask)?;
        outs.push(g.scale(out, s));
        if let Some(c) = captured.as_mut() {
            c.push(g.value(attn).clone());
        }
    }
    let concat = g.concat_cols(&outs)?;
    let y = g.matmul(concat, bound.var(params.u_h))?;
    Ok((y, captured))
}
