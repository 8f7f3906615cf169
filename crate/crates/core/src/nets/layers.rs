//! Parameterized building blocks shared by every model kind.
//!
//! Parameters are looked up by `prefix.name` in a [`ParamStore`]; the
//! matching `init_*` function creates them with the initializer the block
//! expects.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{glorot_limit, Padding, ParamStore, Tape, Tensor, Var};

/// Forward-pass context: the tape, the parameter values, which of them take
/// gradients, and (in training mode) the dropout stream.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    dropout_rng: Option<&'a mut Rng>,
    loaded: HashMap<String, Var>,
}

impl<'a> Ctx<'a> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(tape: &'a mut Tape, params: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { tape, params, trainable, dropout_rng: None, loaded: HashMap::new() }
    }

    /// Training mode: dropout draws from `rng`.
    pub fn train(tape: &'a mut Tape, params: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool, rng: &'a mut Rng) -> Self {
        Self { tape, params, trainable, dropout_rng: Some(rng), loaded: HashMap::new() }
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Load a parameter onto the tape once per forward pass.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.loaded.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?;
        let v = self.tape.param(name, t, (self.trainable)(name));
        self.loaded.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.dropout_rng.as_deref_mut() {
            Some(rng) if p > 0.0 => self.tape.dropout(x, p, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

pub fn init_dense(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    let lim = glorot_limit(fan_in, fan_out);
    store.insert(format!("{prefix}.w"), Tensor::uniform(&[fan_in, fan_out], lim, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

/// `x @ w + b` over the last axis.
pub fn dense(ctx: &mut Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let y = ctx.tape.matmul(x, w)?;
    ctx.tape.add_trailing(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[width]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(ctx: &mut Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
    let g = ctx.p(&format!("{prefix}.gamma"))?;
    let b = ctx.p(&format!("{prefix}.beta"))?;
    ctx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

pub fn init_conv1d(store: &mut ParamStore, prefix: &str, kernel: usize, cin: usize, cout: usize, rng: &mut Rng) -> Result<()> {
    let lim = glorot_limit(kernel * cin, kernel * cout);
    store.insert(format!("{prefix}.w"), Tensor::uniform(&[kernel, cin, cout], lim, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))
}

pub fn conv1d(ctx: &mut Ctx<'_>, prefix: &str, x: Var, dilation: usize, padding: Padding) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let y = ctx.tape.conv1d(x, w, dilation, padding)?;
    ctx.tape.add_trailing(y, b)
}

/// Weight-normalized convolution: direction `v`, per-output gain `g`.
pub fn init_wn_conv1d(store: &mut ParamStore, prefix: &str, kernel: usize, cin: usize, cout: usize, rng: &mut Rng) -> Result<()> {
    let lim = glorot_limit(kernel * cin, kernel * cout);
    let v = Tensor::uniform(&[kernel, cin, cout], lim, rng);
    let mut g = vec![0.0; cout];
    for (i, x) in v.data().iter().enumerate() {
        g[i % cout] += x * x;
    }
    store.insert(format!("{prefix}.v"), v)?;
    store.insert(format!("{prefix}.g"), Tensor::from_vec(g.into_iter().map(f64::sqrt).collect()))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))
}

pub fn wn_conv1d(ctx: &mut Ctx<'_>, prefix: &str, x: Var, dilation: usize, padding: Padding) -> Result<Var> {
    let v = ctx.p(&format!("{prefix}.v"))?;
    let g = ctx.p(&format!("{prefix}.g"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let w = ctx.tape.weight_norm(v, g)?;
    let y = ctx.tape.conv1d(x, w, dilation, padding)?;
    ctx.tape.add_trailing(y, b)
}

/// Scaled dot-product attention on per-head tensors `[N, T, d]`.
///
/// Returns `(weights [N, T, T], output [N, T, d])`; no causal mask.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap_or(&1);
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d.max(1) as f64).sqrt())?;
    let weights = tape.softmax_last(scores)?;
    let out = tape.bmm(weights, v, false)?;
    Ok((weights, out))
}

pub fn init_mha(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut Rng) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_dense(store, &format!("{prefix}.{p}"), width, width, rng)?;
    }
    Ok(())
}

/// Multi-head self-attention sublayer on `[B, T, M]`. Returns `(output, weights)`.
pub fn mha(ctx: &mut Ctx<'_>, prefix: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let q = dense(ctx, &format!("{prefix}.q"), x)?;
    let k = dense(ctx, &format!("{prefix}.k"), x)?;
    let v = dense(ctx, &format!("{prefix}.v"), x)?;
    let q = ctx.tape.split_heads(q, heads)?;
    let k = ctx.tape.split_heads(k, heads)?;
    let v = ctx.tape.split_heads(v, heads)?;
    let (w, o) = attention(ctx.tape, q, k, v)?;
    let o = ctx.tape.merge_heads(o, heads)?;
    let o = dense(ctx, &format!("{prefix}.o"), o)?;
    Ok((o, w))
}

pub fn init_encoder_layer(store: &mut ParamStore, prefix: &str, width: usize, ff: usize, rng: &mut Rng) -> Result<()> {
    init_mha(store, &format!("{prefix}.attn"), width, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln1"), width)?;
    init_dense(store, &format!("{prefix}.ff1"), width, ff, rng)?;
    init_dense(store, &format!("{prefix}.ff2"), ff, width, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), width)
}

/// Post-norm transformer encoder layer. Returns `(output, attention weights)`.
pub fn encoder_layer(ctx: &mut Ctx<'_>, prefix: &str, x: Var, heads: usize, dropout: f64) -> Result<(Var, Var)> {
    let (a, w) = mha(ctx, &format!("{prefix}.attn"), x, heads)?;
    let a = ctx.dropout(a, dropout)?;
    let x = ctx.tape.add(x, a)?;
    let x = layer_norm(ctx, &format!("{prefix}.ln1"), x)?;
    let h = dense(ctx, &format!("{prefix}.ff1"), x)?;
    let h = ctx.tape.relu(h)?;
    let h = dense(ctx, &format!("{prefix}.ff2"), h)?;
    let h = ctx.dropout(h, dropout)?;
    let y = ctx.tape.add(x, h)?;
    let y = layer_norm(ctx, &format!("{prefix}.ln2"), y)?;
    Ok((y, w))
}

pub fn init_tcn_block(store: &mut ParamStore, prefix: &str, kernel: usize, cin: usize, cout: usize, rng: &mut Rng) -> Result<()> {
    init_wn_conv1d(store, &format!("{prefix}.conv1"), kernel, cin, cout, rng)?;
    init_wn_conv1d(store, &format!("{prefix}.conv2"), kernel, cout, cout, rng)?;
    if cin != cout {
        init_dense(store, &format!("{prefix}.down"), cin, cout, rng)?;
    }
    Ok(())
}

/// Residual block of two causal dilated weight-normalized convolutions.
pub fn tcn_block(ctx: &mut Ctx<'_>, prefix: &str, x: Var, dilation: usize, act: Activation, dropout: f64) -> Result<Var> {
    let h = wn_conv1d(ctx, &format!("{prefix}.conv1"), x, dilation, Padding::Causal)?;
    let h = act.apply(ctx.tape, h)?;
    let h = ctx.dropout(h, dropout)?;
    let h = wn_conv1d(ctx, &format!("{prefix}.conv2"), h, dilation, Padding::Causal)?;
    let h = act.apply(ctx.tape, h)?;
    let h = ctx.dropout(h, dropout)?;
    let down = format!("{prefix}.down");
    let res = if ctx.params.contains(&format!("{down}.w")) { dense(ctx, &down, x)? } else { x };
    let y = ctx.tape.add(h, res)?;
    act.apply(ctx.tape, y)
}

pub fn init_lstm_cell(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Result<()> {
    store.insert(format!("{prefix}.wx"), Tensor::uniform(&[input, 4 * hidden], glorot_limit(input, 4 * hidden), rng))?;
    store.insert(format!("{prefix}.wh"), Tensor::uniform(&[hidden, 4 * hidden], glorot_limit(hidden, 4 * hidden), rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden]))
}

/// One LSTM step; gate order input, forget, cell, output. Returns `(h, c)`.
pub fn lstm_cell(ctx: &mut Ctx<'_>, prefix: &str, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let wx = ctx.p(&format!("{prefix}.wx"))?;
    let wh = ctx.p(&format!("{prefix}.wh"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let hidden = ctx.tape.shape(wh)[0];
    let zx = ctx.tape.matmul(x, wx)?;
    let zh = ctx.tape.matmul(h, wh)?;
    let z = ctx.tape.add(zx, zh)?;
    let z = ctx.tape.add_trailing(z, b)?;
    let i = ctx.tape.slice_last(z, 0, hidden)?;
    let f = ctx.tape.slice_last(z, hidden, hidden)?;
    let g = ctx.tape.slice_last(z, 2 * hidden, hidden)?;
    let o = ctx.tape.slice_last(z, 3 * hidden, hidden)?;
    let i = ctx.tape.sigmoid(i)?;
    let f = ctx.tape.sigmoid(f)?;
    let g = ctx.tape.tanh(g)?;
    let o = ctx.tape.sigmoid(o)?;
    let fc = ctx.tape.mul(f, c)?;
    let ig = ctx.tape.mul(i, g)?;
    let c = ctx.tape.add(fc, ig)?;
    let tc = ctx.tape.tanh(c)?;
    let h = ctx.tape.mul(o, tc)?;
    Ok((h, c))
}

/// Sinusoidal position table `[T, M]`.
pub fn positional_encoding(steps: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; steps * width];
    for t in 0..steps {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![steps, width], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::named_rng;

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 5, 3]));
        let k = tape.constant(Tensor::randn(&[1, 5, 3], &mut named_rng(0, "k")));
        let v = tape.constant(Tensor::randn(&[1, 5, 3], &mut named_rng(0, "v")));
        let (w, _) = attention(&mut tape, q, k, v).unwrap();
        for x in tape.value(w).data() {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = named_rng(3, "att");
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[2, 6, 4], &mut rng));
        let k = tape.constant(Tensor::randn(&[2, 6, 4], &mut rng));
        let v = tape.constant(Tensor::randn(&[2, 6, 4], &mut rng));
        let (w, o) = attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.shape(o), &[2, 6, 4]);
        for row in tape.value(w).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn singleton_sequence_returns_values() {
        let mut rng = named_rng(4, "att");
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[1, 1, 4], &mut rng));
        let k = tape.constant(Tensor::randn(&[1, 1, 4], &mut rng));
        let v = tape.constant(Tensor::randn(&[1, 1, 4], &mut rng));
        let (w, o) = attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(o), tape.value(v));
    }

    #[test]
    fn positional_table_starts_with_sin_cos() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.get(&[0, 0]), 0.0);
        assert_eq!(pe.get(&[0, 1]), 1.0);
        assert!((pe.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
    }
}
