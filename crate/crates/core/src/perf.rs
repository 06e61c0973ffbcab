//! Cycle, latency and throughput bookkeeping over execution traces.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::array::{HwConfig, LayerKind, Tracepoint};
use crate::error::{Error, Result};

/// Unit costs of the cycle model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Per 16-wide register-file load.
    pub load_cycles: u64,
    /// Per non-padding stream entry (one MAC per unit per cycle).
    pub mac_cycles: u64,
    /// Per tile, draining the SPad through requantization.
    pub writeback_cycles: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            load_cycles: 1,
            mac_cycles: 1,
            writeback_cycles: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub layer: u32,
    pub kind: LayerKind,
    pub tiles: u64,
    pub dense_macs: u64,
    pub actual_macs: u64,
    pub reg_load_cycles: u64,
    pub mac_cycles: u64,
    pub writeback_cycles: u64,
    pub total_cycles: u64,
    pub active_units: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub layers: Vec<LayerCycles>,
    pub tiles: u64,
    pub dense_macs: u64,
    pub actual_macs: u64,
    pub reg_load_cycles: u64,
    pub mac_cycles: u64,
    pub writeback_cycles: u64,
    pub total_cycles: u64,
    /// Units engaged per conv tile (largest over layers).
    pub active_units: u64,
    pub freq_hz: u64,
    pub latency_s: f64,
    pub raw_gops: f64,
    pub effective_gops: f64,
}

pub fn summarize(trace: &[Tracepoint], hw: &HwConfig) -> Result<CycleReport> {
    summarize_with(trace, hw, &CostModel::default())
}

pub fn summarize_with(trace: &[Tracepoint], hw: &HwConfig, cost: &CostModel) -> Result<CycleReport> {
    hw.validate().map_err(|e| Error::TraceInvalid(e.to_string()))?;
    let total_units = hw.total_units();
    let mut layers: Vec<LayerCycles> = Vec::new();
    let mut next_tile = 0u32;
    for (i, tp) in trace.iter().enumerate() {
        if tp.active_units + tp.idle_units != total_units {
            return Err(Error::TraceInvalid(format!(
                "tracepoint {i}: {} active + {} idle units on a {total_units}-unit array",
                tp.active_units, tp.idle_units
            )));
        }
        if tp.actual_macs > tp.dense_macs {
            return Err(Error::TraceInvalid(format!("tracepoint {i}: actual MACs exceed dense MACs")));
        }
        let same_layer = layers.last().is_some_and(|l| l.layer == tp.layer);
        if !same_layer {
            if layers.last().is_some_and(|l| l.layer >= tp.layer) {
                return Err(Error::TraceInvalid(format!("tracepoint {i}: layers out of order")));
            }
            next_tile = 0;
            layers.push(LayerCycles {
                layer: tp.layer,
                kind: tp.kind,
                tiles: 0,
                dense_macs: 0,
                actual_macs: 0,
                reg_load_cycles: 0,
                mac_cycles: 0,
                writeback_cycles: 0,
                total_cycles: 0,
                active_units: 0,
            });
        }
        if tp.tile != next_tile {
            return Err(Error::TraceInvalid(format!("tracepoint {i}: tile index not sequential")));
        }
        next_tile += 1;
        let l = layers.last_mut().unwrap();
        if l.kind != tp.kind {
            return Err(Error::TraceInvalid(format!("tracepoint {i}: layer kind changed mid-layer")));
        }
        let load = tp.reg_loads * cost.load_cycles;
        let mac = tp.mac_cycles * cost.mac_cycles;
        let wb = cost.writeback_cycles;
        l.tiles += 1;
        l.dense_macs += tp.dense_macs;
        l.actual_macs += tp.actual_macs;
        l.reg_load_cycles += load;
        l.mac_cycles += mac;
        l.writeback_cycles += wb;
        l.total_cycles += load + mac + wb;
        l.active_units = l.active_units.max(tp.active_units);
    }

    let sum = |f: fn(&LayerCycles) -> u64| layers.iter().map(f).sum::<u64>();
    let total_cycles = sum(|l| l.total_cycles);
    let dense_macs = sum(|l| l.dense_macs);
    let actual_macs = sum(|l| l.actual_macs);
    let conv_units = layers.iter().filter(|l| l.kind.is_conv()).map(|l| l.active_units).max();
    let active_units = conv_units.unwrap_or_else(|| layers.iter().map(|l| l.active_units).max().unwrap_or(0));
    let latency_s = total_cycles as f64 / hw.freq_hz as f64;
    let gops = |macs: u64| {
        if latency_s > 0.0 {
            2.0 * macs as f64 / latency_s / 1e9
        } else {
            0.0
        }
    };
    Ok(CycleReport {
        tiles: sum(|l| l.tiles),
        dense_macs,
        actual_macs,
        reg_load_cycles: sum(|l| l.reg_load_cycles),
        mac_cycles: sum(|l| l.mac_cycles),
        writeback_cycles: sum(|l| l.writeback_cycles),
        total_cycles,
        active_units,
        freq_hz: hw.freq_hz,
        latency_s,
        raw_gops: gops(actual_macs),
        effective_gops: gops(dense_macs),
        layers,
    })
}

/// Dense over sparse total cycles.
pub fn speedup(dense: &CycleReport, sparse: &CycleReport) -> Result<f64> {
    if sparse.total_cycles == 0 {
        return Err(Error::TraceInvalid("sparse report has zero cycles".into()));
    }
    Ok(dense.total_cycles as f64 / sparse.total_cycles as f64)
}

/// Dense over sparse MAC cycles only.
pub fn mac_speedup(dense: &CycleReport, sparse: &CycleReport) -> Result<f64> {
    if sparse.mac_cycles == 0 {
        return Err(Error::TraceInvalid("sparse report has zero MAC cycles".into()));
    }
    Ok(dense.mac_cycles as f64 / sparse.mac_cycles as f64)
}

impl fmt::Display for CycleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>5} {:<10} {:>6} {:>10} {:>10} {:>8} {:>8} {:>6} {:>8} {:>6}",
            "layer", "kind", "tiles", "dense_mac", "actual_mac", "loads", "mac_cyc", "wb", "total", "units"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>5} {:<10} {:>6} {:>10} {:>10} {:>8} {:>8} {:>6} {:>8} {:>6}",
                l.layer,
                l.kind.name(),
                l.tiles,
                l.dense_macs,
                l.actual_macs,
                l.reg_load_cycles,
                l.mac_cycles,
                l.writeback_cycles,
                l.total_cycles,
                l.active_units
            )?;
        }
        writeln!(
            f,
            "{:>5} {:<10} {:>6} {:>10} {:>10} {:>8} {:>8} {:>6} {:>8} {:>6}",
            "total",
            "",
            self.tiles,
            self.dense_macs,
            self.actual_macs,
            self.reg_load_cycles,
            self.mac_cycles,
            self.writeback_cycles,
            self.total_cycles,
            self.active_units
        )?;
        writeln!(
            f,
            "latency {:.3} us @ {} MHz | raw {:.2} GOPS | effective {:.2} GOPS",
            self.latency_s * 1e6,
            self.freq_hz as f64 / 1e6,
            self.raw_gops,
            self.effective_gops
        )
    }
}
