//! Exact parameter accounting for shared + residual encoders.

use std::fmt::Write as _;

use crate::config::EncoderConfig;
use crate::projection::{GroupLayout, ProjectionSite};

/// Scalars in one group's shared weights and biases, summed over sites.
pub fn shared_set_size(config: &EncoderConfig) -> usize {
    ProjectionSite::ALL
        .iter()
        .map(|s| {
            let (out, inp) = s.dims(config.d_model, config.d_ff);
            out * inp + out
        })
        .sum()
}

/// Scalars in one layer's adapters, summed over sites. Zero when `rank == 0`.
pub fn residual_set_size(config: &EncoderConfig) -> usize {
    if !config.has_adapters() {
        return 0;
    }
    ProjectionSite::ALL
        .iter()
        .map(|s| {
            let (out, inp) = s.dims(config.d_model, config.d_ff);
            let diag = if config.diag { out.min(inp) } else { 0 };
            config.rank * (out + inp) + diag
        })
        .sum()
}

/// Diagonal entries per layer, summed over sites.
pub fn diag_set_size(config: &EncoderConfig) -> usize {
    ProjectionSite::ALL
        .iter()
        .map(|s| {
            let (out, inp) = s.dims(config.d_model, config.d_ff);
            out.min(inp)
        })
        .sum()
}

/// Two LayerNorms (gain + bias) per layer.
pub fn norm_set_size(config: &EncoderConfig) -> usize {
    4 * config.d_model
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub layer: usize,
    pub group: usize,
    /// Shared scalars this layer references (not owned).
    pub shared_referenced: usize,
    pub residual: usize,
    pub norm: usize,
}

/// Parameter totals of an encoder's Transformer layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub num_groups: usize,
    pub shared_total: usize,
    pub residual_total: usize,
    /// Per-layer LayerNorm parameters plus the final norm; never shared.
    pub norm_total: usize,
    pub per_layer: Vec<LayerCount>,
}

impl ParamCount {
    /// Shared plus residual weights: the figure reported as the size of
    /// the Transformer layers.
    pub fn transformer_total(&self) -> usize {
        self.shared_total + self.residual_total
    }

    pub fn total_with_norms(&self) -> usize {
        self.transformer_total() + self.norm_total
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "groups: {}\nshared_total: {}\nresidual_total: {}\ntransformer_total: {}\nnorm_total: {}\n",
            self.num_groups,
            self.shared_total,
            self.residual_total,
            self.transformer_total(),
            self.norm_total
        )
    }

    pub fn per_layer_csv(&self) -> String {
        let mut s = String::from("layer,group,shared_referenced,residual,norm\n");
        for l in &self.per_layer {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                l.layer, l.group, l.shared_referenced, l.residual, l.norm
            );
        }
        s
    }
}

pub fn count_params(config: &EncoderConfig) -> ParamCount {
    let layout = GroupLayout::new(config);
    let shared = shared_set_size(config);
    let residual = residual_set_size(config);
    let norm = norm_set_size(config);
    let per_layer = (0..config.layers)
        .map(|l| LayerCount {
            layer: l,
            group: layout.group_of(l),
            shared_referenced: shared,
            residual,
            norm,
        })
        .collect();
    ParamCount {
        num_groups: layout.num_groups(),
        shared_total: layout.num_groups() * shared,
        residual_total: config.layers * residual,
        norm_total: config.layers * norm + 2 * config.d_model,
        per_layer,
    }
}

/// Rounds to the nearest 0.1M, e.g. `56_706_048 -> "56.7M"`.
pub fn format_millions(n: usize) -> String {
    let tenths = (n as f64 / 1e5).round() as u64;
    format!("{}.{}M", tenths / 10, tenths % 10)
}

/// One row of the parameter tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub table: &'static str,
    pub label: String,
    pub share_every: usize,
    pub rank: usize,
    pub diag: bool,
    pub shared: usize,
    pub residual: usize,
    pub total: usize,
}

impl TableRow {
    fn from_config(table: &'static str, label: String, config: &EncoderConfig) -> Self {
        let c = count_params(config);
        Self {
            table,
            label,
            share_every: config.share_every,
            rank: config.rank,
            diag: config.diag,
            shared: c.shared_total,
            residual: c.residual_total,
            total: c.transformer_total(),
        }
    }

    pub fn total_rounded(&self) -> String {
        format_millions(self.total)
    }

    pub fn residual_rounded(&self) -> String {
        format_millions(self.residual)
    }
}

/// Sharing sweep (K in {1,3,6,9,18}, with and without R=16 residuals) and
/// the rank sweep (R in {16,8,4,2,1} at K in {3,9}) at 18 layers, 512/2048.
pub fn sweep_tables() -> Vec<TableRow> {
    let base = EncoderConfig::full_scale();
    let mut rows = Vec::new();
    for k in [1, 3, 6, 9, 18] {
        let cfg = base.clone().with_sharing(k);
        rows.push(TableRow::from_config("sharing", "weight sharing".into(), &cfg));
    }
    for k in [1, 3, 6, 9, 18] {
        let cfg = base.clone().with_sharing(k).with_rank(16);
        rows.push(TableRow::from_config("sharing", "+ residual weights".into(), &cfg));
    }
    for k in [3, 9] {
        for r in [16, 8, 4, 2, 1] {
            let cfg = base.clone().with_sharing(k).with_rank(r);
            rows.push(TableRow::from_config("rank", format!("K={k}"), &cfg));
        }
    }
    rows
}

pub fn render_tables_text(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<20} {:>3} {:>3} {:>5} {:>12} {:>12} {:>12} {:>8} {:>8}",
        "table", "row", "K", "R", "diag", "shared", "residual", "total", "total", "resid."
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:<20} {:>3} {:>3} {:>5} {:>12} {:>12} {:>12} {:>8} {:>8}",
            r.table,
            r.label,
            r.share_every,
            r.rank,
            if r.diag { "on" } else { "off" },
            r.shared,
            r.residual,
            r.total,
            r.total_rounded(),
            r.residual_rounded()
        );
    }
    s
}

pub fn render_tables_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("table,row,K,R,diag,shared,residual,total,total_rounded,residual_rounded\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.table,
            r.label,
            r.share_every,
            r.rank,
            r.diag,
            r.shared,
            r.residual,
            r.total,
            r.total_rounded(),
            r.residual_rounded()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(k: usize, r: usize) -> ParamCount {
        count_params(&EncoderConfig::full_scale().with_sharing(k).with_rank(r))
    }

    #[test]
    fn baseline_total() {
        assert_eq!(full(1, 0).transformer_total(), 56_706_048);
        assert_eq!(format_millions(56_706_048), "56.7M");
    }

    #[test]
    fn k3_with_rank16() {
        let c = full(3, 16);
        assert_eq!(c.shared_total, 18_902_016);
        assert_eq!(c.residual_total, 2_709_504);
        assert_eq!(format_millions(c.transformer_total()), "21.6M");
    }

    #[test]
    fn k3_rank2_fraction() {
        let c = full(3, 2);
        assert_eq!(c.transformer_total(), 19_289_088);
        let pct = 100.0 * c.transformer_total() as f64 / 56_706_048.0;
        assert!((pct - 34.0).abs() < 0.05, "{pct}");
    }

    #[test]
    fn table_spot_checks() {
        assert_eq!(full(6, 0).transformer_total(), 9_451_008);
        assert_eq!(full(9, 16).transformer_total(), 9_010_176);
        assert_eq!(full(3, 1).residual_total, 221_184);
    }

    #[test]
    fn norms_are_counted_separately() {
        let c = full(3, 0);
        assert_eq!(c.norm_total, 18 * 4 * 512 + 2 * 512);
        assert_eq!(c.per_layer.len(), 18);
        assert_eq!(c.per_layer[4].group, 1);
    }

    #[test]
    fn rounding_boundaries() {
        assert_eq!(format_millions(3_150_336), "3.2M");
        assert_eq!(format_millions(221_184), "0.2M");
        assert_eq!(format_millions(0), "0.0M");
    }
}
