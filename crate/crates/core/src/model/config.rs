use crate::attention::{Mode, RemovalPolicy, Site};
use crate::error::{invalid, Result};

/// Encoder block family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Transformer,
    Conformer,
}

/// Where layer normalization sits in Transformer layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    /// Normalize the input of each sublayer; the residual carries the raw input.
    Pre,
    /// No normalization: `X' = X + MHA(X)`, `Y = X' + FFN(X')`.
    None,
}

/// Architecture and regularization hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Heads per multi-head attention.
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    /// Depthwise kernel of the Conformer convolution module; odd.
    pub conv_kernel: usize,
    /// Output vocabulary, including the pad/blank and start/end symbols.
    pub vocab_size: usize,
    /// Width of the source frames fed to the convolutional frontend.
    pub input_dim: usize,
    pub block_kind: BlockKind,
    pub norm: NormPlacement,
    pub dropout_rate: f64,
    /// Head removal probability applied at every attention site unless overridden.
    pub sahr_q: f64,
    pub sahr_q_encoder_self: Option<f64>,
    pub sahr_q_decoder_self: Option<f64>,
    pub sahr_q_decoder_inter: Option<f64>,
    /// CTC weight in the joint loss.
    pub lambda_ctc: f64,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_model: 64,
            d_k: 16,
            d_v: 16,
            d_ff: 256,
            conv_kernel: 7,
            vocab_size: 12,
            input_dim: 16,
            block_kind: BlockKind::Transformer,
            norm: NormPlacement::Pre,
            dropout_rate: 0.1,
            sahr_q: 0.0,
            sahr_q_encoder_self: None,
            sahr_q_decoder_self: None,
            sahr_q_decoder_inter: None,
            lambda_ctc: 0.3,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "model-config";
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(OP, format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(invalid(OP, format!("d_model {} must be even for sinusoidal positions", self.d_model)));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(invalid(OP, format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if self.vocab_size < 3 {
            return Err(invalid(OP, "vocab_size must cover pad/blank, start/end and one symbol"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(OP, format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(invalid(OP, format!("lambda_ctc {} outside [0, 1]", self.lambda_ctc)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid(OP, format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        for site in Site::ALL {
            RemovalPolicy::new(self.q_for(site), Mode::Train)?;
        }
        Ok(())
    }

    /// Removal probability at `site`.
    pub fn q_for(&self, site: Site) -> f64 {
        let over = match site {
            Site::EncoderSelf => self.sahr_q_encoder_self,
            Site::DecoderSelf => self.sahr_q_decoder_self,
            Site::DecoderInter => self.sahr_q_decoder_inter,
        };
        over.unwrap_or(self.sahr_q)
    }

    pub fn policy(&self, site: Site, mode: Mode) -> Result<RemovalPolicy> {
        RemovalPolicy::new(self.q_for(site), mode)
    }

    /// Total attention heads across the encoder and decoder.
    pub fn total_heads(&self) -> usize {
        self.heads * (self.enc_layers + 2 * self.dec_layers)
    }
}
