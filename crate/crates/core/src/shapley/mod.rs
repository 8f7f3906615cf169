//! Grouped Shapley attribution over channels and temporal groups.

mod game;
mod importance;

use std::fmt::Write as _;

pub use game::{coalition_weight, marginal, shapley_values, ShapleyGame, ShapleyResult, MAX_PLAYERS};
pub use importance::{
    channel_importance, profile_score, temporal_groups, temporal_importance, ChannelImportance, ImportanceConfig, ProfileOutcome,
    TemporalImportance, TemporalRow, TEMPORAL_GROUPS,
};

use crate::HORIZON_LABELS;

impl ChannelImportance {
    /// `group,shapley` rows plus the grand-coalition score.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,shapley\n");
        for (g, v) in self.result.groups.iter().zip(&self.result.values) {
            let _ = writeln!(out, "{g},{v:.6}");
        }
        let _ = writeln!(out, "grand_coalition,{:.6}", self.result.grand);
        out
    }

    /// One row per horizon, one column per group.
    pub fn per_horizon_csv(&self) -> String {
        let mut out = format!("horizon,{}\n", self.result.groups.join(","));
        for (label, r) in HORIZON_LABELS.iter().zip(&self.per_horizon) {
            let cells: Vec<String> = r.values.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{label},{}", cells.join(","));
        }
        out
    }

    /// Profile scores, one row per coalition.
    pub fn profiles_csv(&self) -> String {
        let mut out = String::from("profile,average_auc,score\n");
        for p in &self.profiles {
            let names: Vec<&str> = p.channels.iter().map(|c| c.name()).collect();
            let auc = p.report.average.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(out, "{},{auc},{:.6}", names.join("+"), p.score);
        }
        out
    }

    pub fn bar_chart_svg(&self) -> String {
        bar_chart_svg(&self.result.groups, &self.result.values, "Average contribution to Gini")
    }
}

/// Horizontal bar chart; negative values extend left of the axis.
pub fn bar_chart_svg(labels: &[String], values: &[f64], title: &str) -> String {
    let (left, bar_h, gap, width) = (120.0, 28.0, 12.0, 360.0);
    let height = 50.0 + labels.len() as f64 * (bar_h + gap);
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let x = |v: f64| left + (v - lo) / span * width;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        left + width + 80.0
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{title}</text>"#);
    for (i, (l, v)) in labels.iter().zip(values).enumerate() {
        let y = 35.0 + i as f64 * (bar_h + gap);
        let (x0, x1) = (x(0.0).min(x(*v)), x(0.0).max(x(*v)));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{l}</text>"#, left - 8.0, y + bar_h * 0.65);
        let _ = writeln!(s, r##"<rect x="{x0:.2}" y="{y}" width="{:.2}" height="{bar_h}" fill="#3b6ea5"/>"##, x1 - x0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}">{v:.4}</text>"#, x1 + 4.0, y + bar_h * 0.65);
    }
    let _ = writeln!(s, r#"<line x1="{0:.2}" y1="30" x2="{0:.2}" y2="{1}" stroke="black"/>"#, x(0.0), height - 5.0);
    s.push_str("</svg>\n");
    s
}
