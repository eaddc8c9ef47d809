//! Weight-loading cost of a layer-sequential inference pass.
//!
//! Each group's shared projections are loaded once, at the first layer
//! that uses them; each layer's adapters are loaded at that layer.
//! LayerNorm parameters and activations are not counted.

use std::fmt::Write as _;

use crate::accounting::{residual_set_size, shared_set_size};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::projection::{GroupLayout, ProjectionSite};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadEvent {
    pub layer: usize,
    pub tensor: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub bytes_loaded_total: u64,
    pub bytes_loaded_shared: u64,
    pub bytes_loaded_residual: u64,
    pub load_events: Vec<LoadEvent>,
    /// Total over the same dimensions with `K = 1` and no adapters.
    pub baseline_bytes: u64,
    pub ratio_vs_baseline: f64,
}

impl LoadReport {
    pub fn to_key_values(&self) -> String {
        format!(
            "bytes_loaded_total: {}\nbytes_loaded_shared: {}\nbytes_loaded_residual: {}\nbaseline_bytes: {}\nload_events: {}\nratio_vs_baseline: {}\n",
            self.bytes_loaded_total,
            self.bytes_loaded_shared,
            self.bytes_loaded_residual,
            self.baseline_bytes,
            self.load_events.len(),
            self.ratio_vs_baseline
        )
    }

    pub fn events_csv(&self) -> String {
        let mut s = String::from("layer,tensor,bytes\n");
        for e in &self.load_events {
            let _ = writeln!(s, "{},{},{}", e.layer, e.tensor, e.bytes);
        }
        s
    }
}

pub fn simulate_load(config: &EncoderConfig, bytes_per_param: u64) -> Result<LoadReport> {
    if bytes_per_param == 0 {
        return Err(Error::InvalidConfig("bytes_per_param must be > 0".into()));
    }
    config.validate()?;
    let layout = GroupLayout::new(config);
    let (d, f) = (config.d_model, config.d_ff);
    let mut events = Vec::new();
    let (mut shared, mut residual) = (0u64, 0u64);

    for layer in 0..config.layers {
        let group = layout.group_of(layer);
        if layout.is_first_of_group(layer) {
            for site in ProjectionSite::ALL {
                let (out, inp) = site.dims(d, f);
                for (suffix, n) in [("weight", out * inp), ("bias", out)] {
                    let bytes = n as u64 * bytes_per_param;
                    shared += bytes;
                    events.push(LoadEvent {
                        layer,
                        tensor: format!("group{group}.{}.{suffix}", site.name()),
                        bytes,
                    });
                }
            }
        }
        if config.has_adapters() {
            for site in ProjectionSite::ALL {
                let (out, inp) = site.dims(d, f);
                let mut parts = vec![("a", out * config.rank), ("b", config.rank * inp)];
                if config.diag {
                    parts.push(("diag", out.min(inp)));
                }
                for (suffix, n) in parts {
                    let bytes = n as u64 * bytes_per_param;
                    residual += bytes;
                    events.push(LoadEvent {
                        layer,
                        tensor: format!("layer{layer}.{}.{suffix}", site.name()),
                        bytes,
                    });
                }
            }
        }
    }

    let total = shared + residual;
    debug_assert_eq!(
        total,
        (layout.num_groups() * shared_set_size(config) + config.layers * residual_set_size(config)) as u64
            * bytes_per_param
    );
    let baseline = (config.layers * shared_set_size(config)) as u64 * bytes_per_param;
    Ok(LoadReport {
        bytes_loaded_total: total,
        bytes_loaded_shared: shared,
        bytes_loaded_residual: residual,
        load_events: events,
        baseline_bytes: baseline,
        ratio_vs_baseline: total as f64 / baseline as f64,
    })
}
