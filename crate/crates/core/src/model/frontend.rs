use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const FRONTEND_KERNEL: usize = 3;
pub const FRONTEND_STRIDE: usize = 2;

/// `pe[pos][2i] = sin(pos / 10000^(2i/d))`, `pe[pos][2i+1] = cos(…)`.
pub fn sinusoidal_positions<T: Scalar>(n: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(invalid("sinusoidal-positions", format!("width {d} must be even and positive")));
    }
    if n == 0 {
        return Err(invalid("sinusoidal-positions", "zero positions"));
    }
    Ok(Tensor::from_fn(&[n, d], |k| {
        let (pos, col) = (k / d, k % d);
        let pair = (col / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d as f64);
        T::of(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Length after one valid kernel-3, stride-2 convolution.
pub fn conv_out_len(len: usize) -> Option<usize> {
    (len >= FRONTEND_KERNEL).then(|| (len - FRONTEND_KERNEL) / FRONTEND_STRIDE + 1)
}

/// Encoder length produced by the two-layer frontend, if `len` frames suffice.
pub fn frontend_out_len(len: usize) -> Option<usize> {
    conv_out_len(len).and_then(conv_out_len)
}

/// Fewest source frames the frontend accepts.
pub const FRONTEND_MIN_FRAMES: usize = 7;

/// Two stride-2 kernel-3 convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct FrontendParams {
    /// `[(3·input_dim) × d_model]`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[(3·d_model) × d_model]`
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FrontendParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, input_dim: usize, d: usize, rng: &mut R) -> Self {
        let k = FRONTEND_KERNEL;
        Self {
            w1: store.insert_scaled_normal("frontend.conv1.w", &[k * input_dim, d], k * input_dim, rng),
            b1: store.insert("frontend.conv1.b", Tensor::zeros(&[d])),
            w2: store.insert_scaled_normal("frontend.conv2.w", &[k * d, d], k * d, rng),
            b2: store.insert("frontend.conv2.b", Tensor::zeros(&[d])),
        }
    }
}

/// `[T × input_dim] → [T'' × d_model]` with `T'' = ⌊(⌊(T−3)/2⌋+1−3)/2⌋+1`.
pub fn conv_frontend<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &FrontendParams, x: Var) -> Result<Var> {
    let len = g.shape(x)[0];
    if frontend_out_len(len).is_none() {
        return Err(Error::TooShort {
            what: "source frames",
            len,
            min: FRONTEND_MIN_FRAMES,
        });
    }
    let h = g.strided_conv1d(x, b.var(p.w1), b.var(p.b1), FRONTEND_KERNEL, FRONTEND_STRIDE)?;
    let h = g.relu(h);
    let h = g.strided_conv1d(h, b.var(p.w2), b.var(p.b2), FRONTEND_KERNEL, FRONTEND_STRIDE)?;
    Ok(g.relu(h))
}
