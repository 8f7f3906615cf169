//! Finite-difference verification of the tape's gradients, one layer kind at a time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::layers::{self, Activation, Ctx};
use crate::rng::{named_rng, Rng};
use crate::tensor::{Padding, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Conv1d,
    Attention,
    LayerNorm,
    LstmCell,
    TcnBlock,
    MaxPool,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Dense,
        LayerKind::Conv1d,
        LayerKind::Attention,
        LayerKind::LayerNorm,
        LayerKind::LstmCell,
        LayerKind::TcnBlock,
        LayerKind::MaxPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv1d => "conv1d",
            LayerKind::Attention => "attention",
            LayerKind::LayerNorm => "layernorm",
            LayerKind::LstmCell => "lstm-cell",
            LayerKind::TcnBlock => "tcn-block",
            LayerKind::MaxPool => "max-pool",
        }
    }

    /// A small input shape that exercises the layer.
    pub fn default_input_shape(self) -> Vec<usize> {
        match self {
            LayerKind::Dense | LayerKind::LayerNorm => vec![2, 5],
            LayerKind::Conv1d => vec![6, 3],
            LayerKind::Attention => vec![4, 8],
            LayerKind::LstmCell => vec![2, 4],
            LayerKind::TcnBlock => vec![8, 3],
            LayerKind::MaxPool => vec![4, 3],
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown layer kind `{s}`")))
    }
}

/// Worst relative error seen for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    pub seed: u64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients from
/// turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

const HEADS: usize = 2;
const WIDTH: usize = 3;

fn setup(kind: LayerKind, shape: &[usize], rng: &mut Rng) -> Result<(ParamStore, Tensor)> {
    let bad = || Error::shape("grad_check", format!("{kind} needs a 2-D input shape, got {shape:?}"));
    let &[a, b] = shape else { return Err(bad()) };
    if a == 0 || b == 0 {
        return Err(bad());
    }
    let mut store = ParamStore::new();
    let x = match kind {
        LayerKind::Dense => {
            layers::init_dense(&mut store, "l", b, WIDTH, rng)?;
            Tensor::randn(&[a, b], rng)
        }
        LayerKind::Conv1d => {
            layers::init_conv1d(&mut store, "l", 3, b, WIDTH, rng)?;
            Tensor::randn(&[1, a, b], rng)
        }
        LayerKind::Attention => {
            if b % HEADS != 0 {
                return Err(Error::shape("grad_check", format!("attention width {b} not divisible by {HEADS} heads")));
            }
            layers::init_mha(&mut store, "l", b, rng)?;
            Tensor::randn(&[1, a, b], rng)
        }
        LayerKind::LayerNorm => {
            layers::init_layer_norm(&mut store, "l", b)?;
            for name in ["l.gamma", "l.beta"] {
                let t = store.get_mut(name)?;
                for v in t.data_mut() {
                    *v += 0.5 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng);
                }
            }
            Tensor::randn(&[a, b], rng)
        }
        LayerKind::LstmCell => {
            layers::init_lstm_cell(&mut store, "l", b, WIDTH, rng)?;
            store.insert("h0", Tensor::randn(&[a, WIDTH], rng))?;
            store.insert("c0", Tensor::randn(&[a, WIDTH], rng))?;
            Tensor::randn(&[a, b], rng)
        }
        LayerKind::TcnBlock => {
            layers::init_tcn_block(&mut store, "l", 2, b, WIDTH, rng)?;
            Tensor::randn(&[1, a, b], rng)
        }
        LayerKind::MaxPool => {
            let mut vals: Vec<f64> = (0..a * b).map(|i| i as f64 * 0.37).collect();
            rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
            Tensor::new(vec![1, a, b], vals)?
        }
    };
    Ok((store, x))
}

fn forward(kind: LayerKind, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    match kind {
        LayerKind::Dense => layers::dense(ctx, "l", x),
        LayerKind::Conv1d => layers::conv1d(ctx, "l", x, 1, Padding::Same),
        LayerKind::Attention => Ok(layers::mha(ctx, "l", x, HEADS)?.0),
        LayerKind::LayerNorm => layers::layer_norm(ctx, "l", x),
        LayerKind::LstmCell => {
            let h = ctx.p("h0")?;
            let c = ctx.p("c0")?;
            let (h, c) = layers::lstm_cell(ctx, "l", x, h, c)?;
            ctx.tape.concat_last(&[h, c])
        }
        LayerKind::TcnBlock => layers::tcn_block(ctx, "l", x, 2, Activation::Tanh, 0.0),
        LayerKind::MaxPool => ctx.tape.max_time(x),
    }
}

/// Scalar probe `sum(f(x) * r)` with a fixed random `r`, so every output
/// element contributes with a distinct weight.
fn probe(kind: LayerKind, store: &ParamStore, x: &Tensor, r: Option<&Tensor>, rng: &mut Rng) -> Result<(Tape, Var, Var, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let all = |_: &str| true;
    let out = {
        let mut ctx = Ctx::eval(&mut tape, store, &all);
        forward(kind, &mut ctx, xv)?
    };
    let r = match r {
        Some(r) => r.clone(),
        None => Tensor::randn(tape.shape(out), rng),
    };
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod)?;
    Ok((tape, xv, loss, r))
}

fn loss_at(kind: LayerKind, store: &ParamStore, x: &Tensor, r: &Tensor) -> Result<f64> {
    let mut dummy = named_rng(0, "unused");
    let (tape, _, loss, _) = probe(kind, store, x, Some(r), &mut dummy)?;
    Ok(tape.value(loss).data()[0])
}

fn central_difference(mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let up = eval(FD_STEP)?;
    let down = eval(-FD_STEP)?;
    Ok((up - down) / (2.0 * FD_STEP))
}

/// Compare autodiff against central differences for every parameter and the input.
pub fn grad_check(kind: LayerKind, input_shape: &[usize], tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = named_rng(seed, &format!("gradcheck/{kind}"));
    let (store, x) = setup(kind, input_shape, &mut rng)?;
    let (tape, xv, loss, r) = probe(kind, &store, &x, None, &mut rng)?;
    let grads = tape.backward(loss)?;

    let mut entries = Vec::new();
    let mut record = |name: &str, errs: Vec<f64>| {
        let max_rel_error = errs.into_iter().fold(0.0, f64::max);
        entries.push(GradCheckEntry { name: name.to_string(), max_rel_error, passed: max_rel_error < tolerance });
    };

    for (name, g) in grads.params() {
        let mut errs = Vec::with_capacity(g.numel());
        for i in 0..g.numel() {
            let numeric = central_difference(|d| {
                let mut s = store.clone();
                s.get_mut(name)?.data_mut()[i] += d;
                loss_at(kind, &s, &x, &r)
            })?;
            errs.push(relative_error(g.data()[i], numeric));
        }
        record(name, errs);
    }

    let gx = grads.wrt(xv).ok_or_else(|| Error::invalid("input gradient missing"))?;
    let mut errs = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let numeric = central_difference(|d| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            loss_at(kind, &store, &xp, &r)
        })?;
        errs.push(relative_error(gx.data()[i], numeric));
    }
    record("input", errs);

    Ok(GradCheckReport { kind, input_shape: input_shape.to_vec(), seed, tolerance, entries })
}
