//! Channel models: the transformer encoder (TEP), the temporal convolutional
//! network, and the LSTM / shallow-NN / logistic baselines.
//!
//! Every model maps a `[B, w, f]` panel batch to a per-step representation
//! and, when built with a head, to 6 horizon logits.

pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::HORIZONS;
pub use layers::{Activation, Ctx};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TepConfig {
    pub model_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub positional_encoding: bool,
    /// Feed-forward inner width; `None` means `4 * model_size`.
    pub ff_size: Option<usize>,
}

impl Default for TepConfig {
    fn default() -> Self {
        Self { model_size: 72, layers: 2, heads: 4, conv_kernel: 1, dropout: 0.1, positional_encoding: true, ff_size: None }
    }
}

impl TepConfig {
    /// The `heads = M / l` preset.
    pub fn heads_from_layers(model_size: usize, layers: usize) -> Self {
        Self { model_size, layers, heads: model_size / layers.max(1), ..Self::default() }
    }

    pub fn ff(&self) -> usize {
        self.ff_size.unwrap_or(4 * self.model_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_size == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::invalid("tep: model_size, layers and heads must be positive"));
        }
        if !self.model_size.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("tep: model_size {} not divisible by heads {}", self.model_size, self.heads)));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::invalid("tep: conv_kernel must be a positive odd integer"));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    pub filters: usize,
    pub kernel_size: usize,
    pub levels: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self { filters: 32, kernel_size: 3, levels: 4, dropout: 0.1, activation: Activation::Relu }
    }
}

impl TcnConfig {
    /// Steps of history visible to the last output: `1 + 2 (k - 1) (2^L - 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel_size - 1) * ((1usize << self.levels) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.kernel_size == 0 || self.levels == 0 {
            return Err(Error::invalid("tcn: filters, kernel_size and levels must be positive"));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self { hidden: 32, layers: 1, dropout: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NnConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout: f64,
}

impl Default for NnConfig {
    fn default() -> Self {
        Self { hidden1: 100, hidden2: 30, dropout: 0.1 }
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout {p} outside [0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetConfig {
    Tep(TepConfig),
    Tcn(TcnConfig),
    Lstm(LstmConfig),
    Nn(NnConfig),
    Logistic,
}

impl NetConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            NetConfig::Tep(_) => "tep",
            NetConfig::Tcn(_) => "tcn",
            NetConfig::Lstm(_) => "lstm",
            NetConfig::Nn(_) => "nn",
            NetConfig::Logistic => "logistic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NetConfig::Tep(c) => c.validate(),
            NetConfig::Tcn(c) => c.validate(),
            NetConfig::Lstm(c) => {
                if c.hidden == 0 || c.layers == 0 {
                    return Err(Error::invalid("lstm: hidden and layers must be positive"));
                }
                check_dropout(c.dropout)
            }
            NetConfig::Nn(c) => {
                if c.hidden1 == 0 || c.hidden2 == 0 {
                    return Err(Error::invalid("nn: hidden sizes must be positive"));
                }
                check_dropout(c.dropout)
            }
            NetConfig::Logistic => Ok(()),
        }
    }
}

/// A channel model bound to its input geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub config: NetConfig,
    pub window: usize,
    pub features: usize,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// `[B, T', R]` with `T' = w` for sequence models and `1` for nn/logistic.
    pub representation: Var,
    /// `[B, 6]` when the net was built with a head.
    pub logits: Option<Var>,
    /// TEP only: per-layer attention weights `[B*h, w, w]`.
    pub attention: Vec<Var>,
}

impl Net {
    pub fn new(config: NetConfig, window: usize, features: usize) -> Result<Self> {
        config.validate()?;
        if window == 0 || features == 0 {
            return Err(Error::invalid("net: window and feature count must be positive"));
        }
        Ok(Self { config, window, features })
    }

    /// Width of the per-step representation.
    pub fn repr_width(&self) -> usize {
        match &self.config {
            NetConfig::Tep(c) => c.model_size,
            NetConfig::Tcn(c) => c.filters,
            NetConfig::Lstm(c) => c.hidden,
            NetConfig::Nn(c) => c.hidden2,
            NetConfig::Logistic => self.window * self.features,
        }
    }

    /// Create every parameter under `prefix`; `with_head` adds the 6-logit head.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, with_head: bool, rng: &mut Rng) -> Result<()> {
        let f = self.features;
        match &self.config {
            NetConfig::Tep(c) => {
                layers::init_conv1d(store, &format!("{prefix}embed"), c.conv_kernel, f, c.model_size, rng)?;
                for l in 0..c.layers {
                    layers::init_encoder_layer(store, &format!("{prefix}enc{l}"), c.model_size, c.ff(), rng)?;
                }
            }
            NetConfig::Tcn(c) => {
                for l in 0..c.levels {
                    let cin = if l == 0 { f } else { c.filters };
                    layers::init_tcn_block(store, &format!("{prefix}block{l}"), c.kernel_size, cin, c.filters, rng)?;
                }
            }
            NetConfig::Lstm(c) => {
                for l in 0..c.layers {
                    let cin = if l == 0 { f } else { c.hidden };
                    layers::init_lstm_cell(store, &format!("{prefix}lstm{l}"), cin, c.hidden, rng)?;
                }
            }
            NetConfig::Nn(c) => {
                layers::init_dense(store, &format!("{prefix}hidden1"), self.window * f, c.hidden1, rng)?;
                layers::init_dense(store, &format!("{prefix}hidden2"), c.hidden1, c.hidden2, rng)?;
            }
            NetConfig::Logistic => {}
        }
        if with_head {
            layers::init_dense(store, &format!("{prefix}head"), self.repr_width(), HORIZONS, rng)?;
        }
        Ok(())
    }

    /// Forward pass on `x: [B, w, f]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, prefix: &str, x: Var) -> Result<NetOutput> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.window || s[2] != self.features {
            return Err(Error::shape(
                "net forward",
                format!("{} expects [B, {}, {}], got {s:?}", self.config.kind(), self.window, self.features),
            ));
        }
        let batch = s[0];
        let mut attention = Vec::new();
        let representation = match &self.config {
            NetConfig::Tep(c) => {
                let mut h = layers::conv1d(ctx, &format!("{prefix}embed"), x, 1, crate::tensor::Padding::Same)?;
                if c.positional_encoding {
                    let pe = ctx.tape.constant(layers::positional_encoding(self.window, c.model_size));
                    h = ctx.tape.add_trailing(h, pe)?;
                }
                h = ctx.dropout(h, c.dropout)?;
                for l in 0..c.layers {
                    let (y, w) = layers::encoder_layer(ctx, &format!("{prefix}enc{l}"), h, c.heads, c.dropout)?;
                    attention.push(w);
                    h = y;
                }
                h
            }
            NetConfig::Tcn(c) => {
                let mut h = x;
                for l in 0..c.levels {
                    h = layers::tcn_block(ctx, &format!("{prefix}block{l}"), h, 1 << l, c.activation, c.dropout)?;
                }
                h
            }
            NetConfig::Lstm(c) => {
                let mut seq = x;
                for l in 0..c.layers {
                    let name = format!("{prefix}lstm{l}");
                    let mut h = ctx.tape.constant(Tensor::zeros(&[batch, c.hidden]));
                    let mut cell = ctx.tape.constant(Tensor::zeros(&[batch, c.hidden]));
                    let mut outs = Vec::with_capacity(self.window);
                    for t in 0..self.window {
                        let xt = ctx.tape.select_step(seq, t)?;
                        let (nh, nc) = layers::lstm_cell(ctx, &name, xt, h, cell)?;
                        h = nh;
                        cell = nc;
                        outs.push(h);
                    }
                    seq = ctx.tape.stack_steps(&outs)?;
                    seq = ctx.dropout(seq, c.dropout)?;
                }
                seq
            }
            NetConfig::Nn(c) => {
                let flat = ctx.tape.reshape(x, &[batch, 1, self.window * self.features])?;
                let h = layers::dense(ctx, &format!("{prefix}hidden1"), flat)?;
                let h = ctx.tape.relu(h)?;
                let h = ctx.dropout(h, c.dropout)?;
                let h = layers::dense(ctx, &format!("{prefix}hidden2"), h)?;
                let h = ctx.tape.relu(h)?;
                ctx.dropout(h, c.dropout)?
            }
            NetConfig::Logistic => ctx.tape.reshape(x, &[batch, 1, self.window * self.features])?,
        };
        let head = format!("{prefix}head");
        let logits = if ctx.has(&format!("{head}.w")) {
            let pooled = ctx.tape.max_time(representation)?;
            Some(layers::dense(ctx, &head, pooled)?)
        } else {
            None
        };
        Ok(NetOutput { representation, logits, attention })
    }
}

/// A standalone single-channel model: net geometry plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub net: Net,
    pub params: ParamStore,
}

/// Evaluation or training (dropout on, drawn from the given stream).
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl ModelParams {
    /// Fresh parameters with the 6-logit head.
    pub fn init(net: Net, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        net.init(&mut params, "", true, rng)?;
        Ok(Self { net, params })
    }

    /// Run one `w x f` panel; returns `(representation, logits)`.
    pub fn forward(&self, panel: &Tensor, mode: Mode<'_>) -> Result<(Tensor, Tensor)> {
        let (w, f) = match *panel.shape() {
            [w, f] => (w, f),
            ref s => return Err(Error::shape("forward", format!("panel must be w x f, got {s:?}"))),
        };
        let mut tape = Tape::new();
        let x = tape.constant(panel.clone().reshape(&[1, w, f])?);
        let frozen = |_: &str| false;
        let out = match mode {
            Mode::Eval => {
                let mut ctx = Ctx::eval(&mut tape, &self.params, &frozen);
                self.net.forward(&mut ctx, "", x)?
            }
            Mode::Train(rng) => {
                let mut ctx = Ctx::train(&mut tape, &self.params, &frozen, rng);
                self.net.forward(&mut ctx, "", x)?
            }
        };
        let rep = tape.value(out.representation).clone();
        let rs = rep.shape().to_vec();
        let rep = rep.reshape(&rs[1..])?;
        let logits = out.logits.ok_or_else(|| Error::invalid("model has no head"))?;
        let logits = tape.value(logits).clone().reshape(&[HORIZONS])?;
        Ok((rep, logits))
    }
}

fn expect_kind(params: &ModelParams, kind: &str) -> Result<()> {
    if params.net.config.kind() != kind {
        return Err(Error::invalid(format!("expected a {kind} model, got {}", params.net.config.kind())));
    }
    Ok(())
}

/// TEP forward on a `w x f` panel -> (`w x M` representation, 6 logits).
pub fn tep_forward(panel: &Tensor, params: &ModelParams, mode: Mode<'_>) -> Result<(Tensor, Tensor)> {
    expect_kind(params, "tep")?;
    params.forward(panel, mode)
}

/// TCN forward on a `w x f` panel -> (`w x filters` representation, 6 logits).
pub fn tcn_forward(panel: &Tensor, params: &ModelParams, mode: Mode<'_>) -> Result<(Tensor, Tensor)> {
    expect_kind(params, "tcn")?;
    params.forward(panel, mode)
}

/// LSTM / NN / logistic forward on a `w x f` panel.
pub fn baseline_forward(panel: &Tensor, params: &ModelParams, mode: Mode<'_>) -> Result<(Tensor, Tensor)> {
    match params.net.config.kind() {
        "lstm" | "nn" | "logistic" => params.forward(panel, mode),
        other => Err(Error::invalid(format!("{other} is not a baseline model"))),
    }
}

#[cfg(test)]
mod tests;
