use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Channel, Dataset, PreparedSet};
use crate::error::{Error, Result};
use crate::nets::layers::{self, Ctx};
use crate::nets::{Net, NetConfig};
use crate::rng::{named_rng, Rng};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::HORIZONS;

/// One channel's model, sized for the preprocessed panel (`2f` columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub channel: Channel,
    pub net: Net,
}

/// Architecture of the fused model: channel models in fixed channel order,
/// each projected to width `hidden`, max-pooled over time, concatenated and
/// mapped to six logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSpec {
    pub hidden: usize,
    pub channels: Vec<ChannelSpec>,
}

impl MultimodalSpec {
    /// Size each configured channel model for the dataset's windows and features.
    pub fn for_dataset(ds: &Dataset, hidden: usize, configs: &BTreeMap<Channel, NetConfig>) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("fusion hidden width must be positive"));
        }
        let mut channels = Vec::new();
        for &c in &Channel::ALL {
            if !ds.has_channel(c) {
                continue;
            }
            let cfg = configs.get(&c).ok_or_else(|| Error::invalid(format!("no model configured for the {c} channel")))?;
            let net = Net::new(cfg.clone(), ds.windows.of(c), 2 * ds.feature_count(c)?)?;
            channels.push(ChannelSpec { channel: c, net });
        }
        if channels.is_empty() {
            return Err(Error::invalid("dataset has no channels"));
        }
        Ok(Self { hidden, channels })
    }

    pub fn channel_list(&self) -> Vec<Channel> {
        self.channels.iter().map(|c| c.channel).collect()
    }

    pub fn get(&self, c: Channel) -> Result<&ChannelSpec> {
        self.channels.iter().find(|s| s.channel == c).ok_or_else(|| Error::invalid(format!("model has no {c} channel")))
    }

    pub fn fusion_inputs(&self) -> usize {
        self.hidden * self.channels.len()
    }
}

pub fn channel_prefix(c: Channel) -> String {
    format!("{c}/")
}

pub const FUSION: &str = "fusion";

/// Which parameter groups a stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Channel(Channel),
    Fusion,
}

impl Component {
    pub fn owns(self, name: &str) -> bool {
        match self {
            Component::Channel(c) => name.starts_with(&channel_prefix(c)),
            Component::Fusion => name.starts_with("fusion."),
        }
    }
}

/// Forward results for a batch.
#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub logits: Var,
    /// Per active channel: per-layer attention weights (TEP channels only).
    pub attention: BTreeMap<Channel, Vec<Var>>,
    pub pooled: BTreeMap<Channel, Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalModel {
    pub spec: MultimodalSpec,
    pub params: ParamStore,
}

impl MultimodalModel {
    /// Parameters drawn from streams named per channel, so a channel's
    /// initial weights do not depend on which other channels exist.
    pub fn init(spec: MultimodalSpec, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        for cs in &spec.channels {
            let prefix = channel_prefix(cs.channel);
            let mut rng = named_rng(seed, &format!("init/{}", cs.channel));
            cs.net.init(&mut params, &prefix, false, &mut rng)?;
            let width = cs.net.repr_width();
            if width != spec.hidden {
                layers::init_dense(&mut params, &format!("{prefix}proj"), width, spec.hidden, &mut rng)?;
            }
        }
        let mut rng = named_rng(seed, "init/fusion");
        layers::init_dense(&mut params, FUSION, spec.fusion_inputs(), HORIZONS, &mut rng)?;
        Ok(Self { spec, params })
    }

    /// Channel representation projected to `hidden`, then max over time: `[B, H]`.
    pub fn channel_pooled(&self, ctx: &mut Ctx<'_>, cs: &ChannelSpec, x: Var) -> Result<(Var, Vec<Var>)> {
        let prefix = channel_prefix(cs.channel);
        let out = cs.net.forward(ctx, &prefix, x)?;
        let mut rep = out.representation;
        let proj = format!("{prefix}proj");
        if ctx.has(&format!("{proj}.w")) {
            rep = layers::dense(ctx, &proj, rep)?;
        }
        if *ctx.tape.shape(rep).last().unwrap_or(&0) != self.spec.hidden {
            return Err(Error::shape("fuse", format!("{} representation width {:?} != {}", cs.channel, ctx.tape.shape(rep), self.spec.hidden)));
        }
        Ok((ctx.tape.max_time(rep)?, out.attention))
    }

    /// Concatenate pooled channel vectors in channel order (zeros for inactive
    /// channels) and apply the fusion dense layer.
    pub fn fuse(&self, ctx: &mut Ctx<'_>, pooled: &BTreeMap<Channel, Var>, batch: usize) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.spec.channels.len());
        for cs in &self.spec.channels {
            let v = match pooled.get(&cs.channel) {
                Some(v) => *v,
                None => ctx.tape.constant(Tensor::zeros(&[batch, self.spec.hidden])),
            };
            parts.push(v);
        }
        let z = ctx.tape.concat_last(&parts)?;
        layers::dense(ctx, FUSION, z)
    }

    /// Max-pool each channel's `[B, w_c, H]` sequence over time, then fuse.
    pub fn fuse_sequences(&self, ctx: &mut Ctx<'_>, sequences: &BTreeMap<Channel, Var>, batch: usize) -> Result<Var> {
        let mut pooled = BTreeMap::new();
        for (&c, &seq) in sequences {
            if *ctx.tape.shape(seq).last().unwrap_or(&0) != self.spec.hidden {
                return Err(Error::shape("fuse", format!("{c} representation {:?} is not width {}", ctx.tape.shape(seq), self.spec.hidden)));
            }
            pooled.insert(c, ctx.tape.max_time(seq)?);
        }
        self.fuse(ctx, &pooled, batch)
    }

    /// Forward over rows of a prepared set with the given active channels.
    pub fn forward(&self, ctx: &mut Ctx<'_>, data: &PreparedSet, rows: &[usize], active: &[Channel]) -> Result<FusedOutput> {
        if active.is_empty() {
            return Err(Error::invalid("no active channels"));
        }
        let mut pooled = BTreeMap::new();
        let mut attention = BTreeMap::new();
        for cs in &self.spec.channels {
            if !active.contains(&cs.channel) {
                continue;
            }
            let m = data.channel(cs.channel)?;
            if m.w != cs.net.window || m.cols != cs.net.features {
                return Err(Error::shape(
                    "forward",
                    format!("{} data is {}x{}, model expects {}x{}", cs.channel, m.w, m.cols, cs.net.window, cs.net.features),
                ));
            }
            let x = ctx.tape.constant(m.batch(rows));
            let (p, att) = self.channel_pooled(ctx, cs, x)?;
            pooled.insert(cs.channel, p);
            attention.insert(cs.channel, att);
        }
        for c in active {
            if !pooled.contains_key(c) {
                return Err(Error::invalid(format!("active channel {c} is not part of the model")));
            }
        }
        let logits = self.fuse(ctx, &pooled, rows.len())?;
        Ok(FusedOutput { logits, attention, pooled })
    }

    /// Eval-mode logits `[n, 6]` for every row, computed in chunks.
    pub fn logits(&self, data: &PreparedSet, active: &[Channel], chunk: usize) -> Result<Vec<[f64; HORIZONS]>> {
        let mut out = Vec::with_capacity(data.len());
        let frozen = |_: &str| false;
        let rows: Vec<usize> = (0..data.len()).collect();
        for part in rows.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let mut ctx = Ctx::eval(&mut tape, &self.params, &frozen);
            let fo = self.forward(&mut ctx, data, part, active)?;
            let v = tape.value(fo.logits);
            for r in v.data().chunks(HORIZONS) {
                out.push(r.try_into().expect("six logits"));
            }
        }
        Ok(out)
    }

    /// Training-mode batch loss; returns the tape, loss node and dropout stream state.
    pub(crate) fn batch_loss(
        &self,
        data: &PreparedSet,
        rows: &[usize],
        active: &[Channel],
        trainable: &dyn Fn(&str) -> bool,
        dropout: Option<&mut Rng>,
    ) -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let loss = {
            let mut ctx = match dropout {
                Some(rng) => Ctx::train(&mut tape, &self.params, trainable, rng),
                None => Ctx::eval(&mut tape, &self.params, trainable),
            };
            let fo = self.forward(&mut ctx, data, rows, active)?;
            let targets = data.target_rows(rows);
            ctx.tape.bce_with_logits(fo.logits, &targets)?
        };
        Ok((tape, loss))
    }

    pub fn param_names_of(&self, comp: Component) -> Vec<String> {
        self.params.names().filter(|n| comp.owns(n)).cloned().collect()
    }
}
