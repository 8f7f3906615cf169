//! Attention-weight extraction and heat-map export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Channel, Dataset, PreparedSet};
use crate::error::{Error, Result};
use crate::fusion::Checkpoint;
use crate::nets::layers::Ctx;
use crate::nets::NetConfig;
use crate::tensor::Tape;
use crate::{HORIZONS, HORIZON_LABELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Defaulted,
    NonDefaulted,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Defaulted => "defaulted",
            Group::NonDefaulted => "non-defaulted",
        }
    }
}

/// Mean attention weights of one (layer, head) over a group of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub group: Group,
    pub observations: usize,
    /// Window length; `weights` is `size x size`, rows are output positions.
    pub size: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.size..(r + 1) * self.size]
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        (0..self.size).map(|r| (self.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Total weight each input position receives, summed over output positions.
    pub fn column_mass(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.size];
        for r in 0..self.size {
            for (c, v) in self.row(r).iter().enumerate() {
                m[c] += v;
            }
        }
        m
    }

    /// Lag (0 = the observation step) of the column with the most mass.
    pub fn peak_lag(&self) -> usize {
        let m = self.column_mass();
        let best = (0..self.size).max_by(|&a, &b| m[a].total_cmp(&m[b]).then(b.cmp(&a))).unwrap_or(0);
        self.size - 1 - best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMapSet {
    pub channel: Channel,
    /// Horizon index used to split observations into groups.
    pub horizon: usize,
    pub layers: usize,
    pub heads: usize,
    pub maps: Vec<AttentionMap>,
}

impl AttentionMapSet {
    pub fn group(&self, g: Group) -> impl Iterator<Item = &AttentionMap> {
        self.maps.iter().filter(move |m| m.group == g)
    }
}

/// Default grouping horizon: three years.
pub const DEFAULT_GROUP_HORIZON: usize = HORIZONS - 1;

/// Average post-softmax attention of a TEP channel model over the
/// defaulted and non-defaulted observations at `horizon`.
pub fn extract_attention(ck: &Checkpoint, ds: &Dataset, idx: &[usize], channel: Channel, horizon: usize) -> Result<AttentionMapSet> {
    if horizon >= HORIZONS {
        return Err(Error::invalid(format!("horizon index {horizon} out of range")));
    }
    let model = ck.model();
    let cs = model.spec.get(channel)?;
    let NetConfig::Tep(tep) = &cs.net.config else {
        return Err(Error::invalid(format!("{channel} model is {}, attention needs a tep model", cs.net.config.kind())));
    };
    let (layers, heads, w) = (tep.layers, tep.heads, cs.net.window);
    if ds.windows != ck.meta.windows {
        return Err(Error::invalid("dataset windows differ from the checkpoint's"));
    }
    let data = PreparedSet::build(ds, &ck.meta.stats, idx)?;
    let labels = data.labels(horizon);
    let mut sums = [vec![0.0; layers * heads * w * w], vec![0.0; layers * heads * w * w]];
    let mut counts = [0usize; 2];
    let frozen = |_: &str| false;
    let rows: Vec<usize> = (0..data.len()).collect();
    let matrix = data.channel(channel)?;
    for part in rows.chunks(ck.meta.train.eval_chunk.max(1)) {
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, &model.params, &frozen);
        let x = ctx.tape.constant(matrix.batch(part));
        let (_, att) = model.channel_pooled(&mut ctx, cs, x)?;
        for (l, v) in att.iter().enumerate() {
            let a = tape.value(*v).data();
            for (k, &r) in part.iter().enumerate() {
                let g = usize::from(!labels[r]);
                for h in 0..heads {
                    let src = &a[(k * heads + h) * w * w..(k * heads + h + 1) * w * w];
                    let dst = &mut sums[g][(l * heads + h) * w * w..(l * heads + h + 1) * w * w];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        for &r in part {
            counts[usize::from(!labels[r])] += 1;
        }
    }
    let mut maps = Vec::new();
    for (gi, group) in [Group::Defaulted, Group::NonDefaulted].into_iter().enumerate() {
        if counts[gi] == 0 {
            log::warn!("no {} observations at {}; maps omitted", group.name(), HORIZON_LABELS[horizon]);
            continue;
        }
        let n = counts[gi] as f64;
        for l in 0..layers {
            for h in 0..heads {
                let block = &sums[gi][(l * heads + h) * w * w..(l * heads + h + 1) * w * w];
                maps.push(AttentionMap {
                    layer: l,
                    head: h,
                    group,
                    observations: counts[gi],
                    size: w,
                    weights: block.iter().map(|v| v / n).collect(),
                });
            }
        }
    }
    Ok(AttentionMapSet { channel, horizon, layers, heads, maps })
}

fn input_label(lag: usize) -> String {
    if lag == 0 {
        "in_t".into()
    } else {
        format!("in_t-{lag}")
    }
}

pub fn heatmap_csv(map: &AttentionMap) -> String {
    let mut out = String::from("out_pos");
    for c in 0..map.size {
        let _ = write!(out, ",{}", input_label(map.size - 1 - c));
    }
    out.push('\n');
    for r in 0..map.size {
        let _ = write!(out, "{r}");
        for v in map.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parse a heat-map CSV back into a row-major matrix.
pub fn read_heatmap_csv(path: &Path) -> Result<(usize, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line: line as u64, msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let size = header.split(',').count() - 1;
    let mut data = Vec::with_capacity(size * size);
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != size + 1 {
            return Err(perr(i + 2, format!("expected {} cells", size + 1)));
        }
        for c in &cells[1..] {
            data.push(c.parse().map_err(|_| perr(i + 2, format!("bad number `{c}`")))?);
        }
    }
    Ok((size, data))
}

fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(217.0, 107.0))
}

/// One figure per group: layers as rows, heads as columns, one linear color
/// scale from the figure's minimum to its maximum.
pub fn heatmap_svg(set: &AttentionMapSet, group: Group) -> String {
    let maps: Vec<&AttentionMap> = set.group(group).collect();
    let size = maps.first().map_or(1, |m| m.size);
    let cell = (240.0 / size as f64).max(0.5);
    let panel = cell * size as f64;
    let (pad, top) = (30.0, 40.0);
    let lo = maps.iter().flat_map(|m| m.weights.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = maps.iter().flat_map(|m| m.weights.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let width = pad + set.heads as f64 * (panel + pad);
    let height = top + set.layers as f64 * (panel + pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="20" font-size="13">{} attention, {} firms at {} (scale {lo:.4} to {hi:.4})</text>"#,
        set.channel,
        group.name(),
        HORIZON_LABELS[set.horizon]
    );
    for m in maps {
        let x0 = pad + m.head as f64 * (panel + pad);
        let y0 = top + m.layer as f64 * (panel + pad);
        let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}">layer {} head {}</text>"#, y0 - 4.0, m.layer, m.head);
        for r in 0..m.size {
            for (c, v) in m.row(r).iter().enumerate() {
                let t = if span > 1e-12 { (v - lo) / span } else { 0.5 };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"/>"#,
                    x0 + c as f64 * cell,
                    y0 + r as f64 * cell,
                    color(t)
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Write one CSV per map and one SVG per group into `dir`; returns the paths.
pub fn export_heatmap(set: &AttentionMapSet, dir: &Path) -> Result<Vec<PathBuf>> {
    if set.maps.is_empty() {
        return Err(Error::invalid("no attention maps to export"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for m in &set.maps {
        write(format!("attention_{}_{}_l{}_h{}.csv", set.channel, m.group.name(), m.layer, m.head), heatmap_csv(m))?;
    }
    for g in [Group::Defaulted, Group::NonDefaulted] {
        if set.group(g).next().is_some() {
            write(format!("attention_{}_{}.svg", set.channel, g.name()), heatmap_svg(set, g))?;
        }
    }
    Ok(written)
}
