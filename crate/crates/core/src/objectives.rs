//! Training objectives: label-smoothed cross-entropy for the decoder, CTC for
//! the encoder, and their λ-weighted combination.
//!
//! Both losses are fused graph nodes: the forward pass computes the value and
//! the gradient with respect to the node input in one sweep.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// CTC blank symbol.
pub const BLANK: usize = 0;

/// Values of one joint-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub decoder_loss: f64,
    pub ctc_loss: f64,
    pub lambda: f64,
    pub token_accuracy: f64,
}

/// Mean label-smoothed cross-entropy over non-pad positions of `logits[t×V]`.
///
/// The target distribution puts `1 − smoothing` on the gold token and
/// `smoothing / (V − 1)` on every other token.
pub fn label_smoothed_ce<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
    pad_id: usize,
) -> Result<Var> {
    let (value, grad) = label_smoothed_ce_value(g.value(logits), targets, smoothing, pad_id)?;
    g.fused_scalar(logits, value, grad.into_data())
}

/// Loss value and `∂loss/∂logits` without touching a graph.
pub fn label_smoothed_ce_value<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    smoothing: f64,
    pad_id: usize,
) -> Result<(T, Tensor<T>)> {
    const OP: &str = "label-smoothed-ce";
    if !(0.0..1.0).contains(&smoothing) {
        return Err(invalid(OP, format!("smoothing {smoothing} outside [0, 1)")));
    }
    let v = logits.last_dim();
    if logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: OP,
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if smoothing > 0.0 && v < 2 {
        return Err(invalid(OP, "smoothing needs at least two classes"));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: OP });
    }
    let counted = targets.iter().filter(|&&t| t != pad_id).count();
    if counted == 0 {
        return Err(invalid(OP, "every target position is padding"));
    }
    let on = T::of(1.0 - smoothing);
    let off = if v > 1 { T::of(smoothing / (v - 1) as f64) } else { T::zero() };
    let inv_count = T::one() / T::of(counted as f64);
    let mut grad = vec![T::zero(); logits.numel()];
    let mut total = T::zero();
    for (i, &gold) in targets.iter().enumerate() {
        if gold == pad_id {
            continue;
        }
        if gold >= v {
            return Err(Error::TokenOutOfRange { token: gold, vocab: v });
        }
        let row = logits.row(i);
        let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
        let mut loss = T::zero();
        for (c, &x) in row.iter().enumerate() {
            let target = if c == gold { on } else { off };
            let logp = x - lse;
            loss -= target * logp;
            grad[i * v + c] = (logp.exp() - target) * inv_count;
        }
        total += loss;
    }
    Ok((total * inv_count, Tensor::new(logits.shape(), grad)?))
}

/// Minimum number of frames that can emit `labels`: one per label plus a
/// separating blank between each pair of equal neighbours.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_add<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Negative log-likelihood of `labels` under per-frame log-probabilities
/// `log_probs[T×(V+1)]` (column 0 is the blank), summed over every
/// blank-augmented alignment.
pub fn ctc_loss<T: Scalar>(g: &mut Graph<T>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (value, grad) = ctc_loss_value(g.value(log_probs), labels)?;
    g.fused_scalar(log_probs, value, grad.into_data())
}

/// CTC loss value and `∂loss/∂log_probs` via the forward–backward recursions in log space.
pub fn ctc_loss_value<T: Scalar>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    const OP: &str = "ctc";
    let frames = log_probs.rows();
    let classes = log_probs.last_dim();
    if !log_probs.is_finite() {
        return Err(Error::NonFinite { op: OP });
    }
    for &l in labels {
        if l == BLANK || l >= classes {
            return Err(invalid(OP, format!("label {l} must lie in 1..{classes}")));
        }
    }
    let min = ctc_min_frames(labels);
    if frames < min {
        return Err(Error::TooShort {
            what: "ctc input",
            len: frames,
            min,
        });
    }
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let lp = |t: usize, k: usize| log_probs.data()[t * classes + k];
    // Transition s-2 -> s is allowed into a non-blank that differs from the previous non-blank.
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Err(invalid(OP, "labels have zero probability"));
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }

    // ∂(−log p)/∂lp(t,k) = −Σ_{s: ext[s]=k} α_t(s)β_t(s) / (p · y_t(k)).
    let mut occupancy = vec![ninf; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            let slot = &mut occupancy[t * classes + ext[s]];
            *slot = log_add(*slot, ab);
        }
    }
    let grad = occupancy
        .iter()
        .enumerate()
        .map(|(i, &occ)| {
            if occ == ninf {
                T::zero()
            } else {
                -(occ - log_p - log_probs.data()[i]).exp()
            }
        })
        .collect();
    Ok((-log_p, Tensor::new(log_probs.shape(), grad)?))
}

/// Fraction of non-pad positions whose arg-max logit equals the target.
pub fn token_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], pad_id: usize) -> (usize, usize) {
    let mut correct = 0;
    let mut counted = 0;
    for (i, &gold) in targets.iter().enumerate() {
        if gold == pad_id {
            continue;
        }
        counted += 1;
        if argmax(logits.row(i)) == gold {
            correct += 1;
        }
    }
    (correct, counted)
}

/// Index of the first maximal element.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Arguments of [`joint_loss`] besides the graph handles.
#[derive(Clone, Copy, Debug)]
pub struct JointLossConfig {
    pub lambda: f64,
    pub smoothing: f64,
    pub pad_id: usize,
}

/// `(1 − λ)·L_dec + λ·L_ctc` as a graph node, with the values unpacked into a report.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    dec_logits: Var,
    ctc_log_probs: Var,
    targets: &[usize],
    ctc_labels: &[usize],
    cfg: JointLossConfig,
) -> Result<(Var, LossReport)> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(invalid("joint-loss", format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    let dec = label_smoothed_ce(g, dec_logits, targets, cfg.smoothing, cfg.pad_id)?;
    let ctc = ctc_loss(g, ctc_log_probs, ctc_labels)?;
    let total = if cfg.lambda == 0.0 {
        g.scale(dec, T::one())
    } else if cfg.lambda == 1.0 {
        g.scale(ctc, T::one())
    } else {
        let a = g.scale(dec, T::of(1.0 - cfg.lambda));
        let b = g.scale(ctc, T::of(cfg.lambda));
        g.add(a, b)?
    };
    let (correct, counted) = token_accuracy(g.value(dec_logits), targets, cfg.pad_id);
    let report = LossReport {
        total: g.value(total).item().as_f64(),
        decoder_loss: g.value(dec).item().as_f64(),
        ctc_loss: g.value(ctc).item().as_f64(),
        lambda: cfg.lambda,
        token_accuracy: correct as f64 / counted as f64,
    };
    Ok((total, report))
}
