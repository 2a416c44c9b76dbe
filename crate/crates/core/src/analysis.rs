//! Energy accounting (MAC/AC model) and firing-rate measurement.
//!
//! Spiking layers beyond the first rate-encoding layer perform
//! accumulate-only operations gated by incoming spikes; the first layer and
//! any other layer fed by real-valued features performs full
//! multiply-accumulates. Energy constants are the 45-nm figures: 4.6 pJ per
//! MAC and 0.9 pJ per AC.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{LayerSpec, Mode, Network, NetworkSpec};
use crate::tensor::SpikeTensor;
use crate::trainer;

/// Energy per operation in joules.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { e_mac: 4.6e-12, e_ac: 0.9e-12 }
    }
}

/// Per-layer operation counts for one network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerOps {
    pub layer: usize,
    pub kind: String,
    /// Multiply-accumulates per timestep for this layer.
    pub macs: u64,
    /// Firing rate of the spike tensor feeding this layer, when it is fed by
    /// spikes.
    pub input_rate: Option<f64>,
}

/// Energy report for a network processing a single sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyReport {
    pub timesteps: usize,
    pub per_layer: Vec<LayerOps>,
    /// Sum of per-timestep MACs over all layers (single-pass equivalent of a
    /// non-spiking network).
    pub total_macs: u64,
    /// MAC operations actually performed: rate-encoding layers run all
    /// timesteps at full precision.
    pub mac_energy_ops: f64,
    /// Estimated accumulate operations: spike-fed layer MACs scaled by input
    /// firing rate and timestep count.
    pub total_acs: f64,
    pub param_count: u64,
    pub energy_joules: f64,
    /// Non-spiking equivalent: all MACs at full energy.
    pub energy_ann_joules: f64,
    pub flops: f64,
    pub flops_convention: String,
}

/// Per-timestep MAC counts per layer: conv layers cost
/// `out_elements * k^2 * in_channels`, linear layers `in * out`; shift, LIF
/// and pooling layers are multiplication-free.
pub fn count_macs(spec: &NetworkSpec) -> Result<Vec<u64>> {
    let shapes = spec.infer_shapes()?;
    let mut cur = spec.input_shape;
    let mut macs = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let out = shapes[i];
        let count = match layer {
            LayerSpec::Conv { kernel, .. } => {
                (out.c * out.h * out.w) as u64 * (kernel * kernel) as u64 * cur.c as u64
            }
            LayerSpec::Linear { .. } => (cur.c * cur.h * cur.w) as u64 * out.c as u64,
            _ => 0,
        };
        macs.push(count);
        cur = out;
    }
    Ok(macs)
}

/// Total accumulate operations from per-layer MAC counts and input firing
/// rates: `sum(macs[l] * rates[l]) * timesteps`. Callers pass the spike-fed
/// layers only; the first rate-encoding layer performs MACs and stays out of
/// this sum.
pub fn count_acs(macs: &[u64], rates: &[f64], timesteps: usize) -> Result<f64> {
    if macs.len() != rates.len() {
        return Err(Error::Contract(format!(
            "got {} MAC counts but {} rates",
            macs.len(),
            rates.len()
        )));
    }
    for &r in rates {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Contract(format!("firing rate {} outside [0,1]", r)));
        }
    }
    let per_step: f64 = macs.iter().zip(rates).map(|(&m, &r)| m as f64 * r).sum();
    Ok(per_step * timesteps as f64)
}

/// Energy in joules for the given operation counts.
pub fn energy(mac_ops: f64, acs: f64, model: &EnergyModel) -> f64 {
    mac_ops * model.e_mac + acs * model.e_ac
}

/// Fraction of elements equal to one in a spike tensor.
pub fn firing_rate(spikes: &SpikeTensor) -> Result<f64> {
    if !spikes.is_binary() {
        return Err(Error::Contract(
            "firing_rate requires a 0/1-valued spike tensor".into(),
        ));
    }
    Ok(spikes.count_nonzero() as f64 / spikes.dims().numel() as f64)
}

/// Published single-sample workload: AC/MAC totals and the energy they imply.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceWorkload {
    pub name: &'static str,
    pub architecture: &'static str,
    pub timesteps: usize,
    pub acs: f64,
    pub macs: f64,
    pub energy_mj: f64,
    pub params: f64,
}

/// Reference single-sample workloads used by the energy self-check.
pub const REFERENCE_WORKLOADS: [ReferenceWorkload; 3] = [
    ReferenceWorkload {
        name: "cifar100",
        architecture: "ResNet20",
        timesteps: 4,
        acs: 141.2e6,
        macs: 53.99e6,
        energy_mj: 0.375,
        params: 11.3e6,
    },
    ReferenceWorkload {
        name: "cifar10-dvs",
        architecture: "ResNet20",
        timesteps: 10,
        acs: 1.23e9,
        macs: 514.81e6,
        energy_mj: 3.475,
        params: 11.2e6,
    },
    ReferenceWorkload {
        name: "imagenet",
        architecture: "SEW ResNet18",
        timesteps: 4,
        acs: 1.62e9,
        macs: 956.4e6,
        energy_mj: 5.857,
        params: 11.6e6,
    },
];

pub fn reference_workload(name: &str) -> Result<&'static ReferenceWorkload> {
    REFERENCE_WORKLOADS
        .iter()
        .find(|w| w.name == name)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown reference workload '{}' (available: {})",
                name,
                REFERENCE_WORKLOADS
                    .iter()
                    .map(|w| w.name)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })
}

/// Recompute a reference workload's energy from its AC/MAC columns. Returns
/// `(computed_mj, published_mj)`; they must agree within 0.5%.
pub fn reference_energy_mj(w: &ReferenceWorkload, model: &EnergyModel) -> (f64, f64) {
    let joules = energy(w.macs, w.acs, model);
    (joules * 1e3, w.energy_mj)
}

/// Firing rate of the spike tensor feeding each MAC-bearing layer: the most
/// recent preceding LIF layer's measured rate, or `None` when the layer
/// consumes real-valued features (rate-encoding layers).
fn input_rates(spec: &NetworkSpec, lif_rates: &[trainer::LayerRate]) -> Vec<Option<f64>> {
    let mut rates = Vec::with_capacity(spec.layers.len());
    let mut last_lif: Option<f64> = None;
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Lif { .. } => {
                last_lif = lif_rates.iter().find(|r| r.layer == i).map(|r| r.rate);
                rates.push(None);
            }
            LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => rates.push(last_lif),
            _ => rates.push(None),
        }
    }
    rates
}

/// Build the full report for a network: firing rates averaged over the sample
/// stream, MAC/AC composition and the energy totals, plus the non-spiking
/// equivalent for comparison.
pub fn network_energy_report(net: &Network, samples: &Dataset, seed: u64) -> Result<EnergyReport> {
    if samples.samples.is_empty() {
        return Err(Error::Contract("energy report needs a non-empty sample stream".into()));
    }
    let eval = trainer::evaluate(net, samples, Mode::Infer, seed)?;
    energy_report_from_rates(&net.spec, net.param_count(), &eval.firing_rates)
}

/// Assemble a report from a spec and measured per-LIF-layer firing rates.
pub fn energy_report_from_rates(
    spec: &NetworkSpec,
    param_count: u64,
    lif_rates: &[trainer::LayerRate],
) -> Result<EnergyReport> {
    let macs = count_macs(spec)?;
    let rates = input_rates(spec, lif_rates);
    let timesteps = spec.input_shape.t;
    let model = EnergyModel::default();

    let mut per_layer = Vec::new();
    let mut spike_macs = Vec::new();
    let mut spike_rates = Vec::new();
    let mut mac_energy_ops = 0.0f64;
    for (i, layer) in spec.layers.iter().enumerate() {
        if macs[i] == 0 {
            continue;
        }
        let kind = match layer {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Linear { .. } => "linear",
            _ => "other",
        };
        per_layer.push(LayerOps {
            layer: i,
            kind: kind.to_string(),
            macs: macs[i],
            input_rate: rates[i],
        });
        match rates[i] {
            Some(r) => {
                spike_macs.push(macs[i]);
                spike_rates.push(r);
            }
            None => mac_energy_ops += macs[i] as f64 * timesteps as f64,
        }
    }
    let total_acs = count_acs(&spike_macs, &spike_rates, timesteps)?;
    let total_macs: u64 = macs.iter().sum();
    let energy_joules = energy(mac_energy_ops, total_acs, &model);
    let energy_ann_joules = total_macs as f64 * model.e_mac;
    Ok(EnergyReport {
        timesteps,
        per_layer,
        total_macs,
        mac_energy_ops,
        total_acs,
        param_count,
        energy_joules,
        energy_ann_joules,
        flops: 2.0 * mac_energy_ops + total_acs,
        flops_convention: "2*MAC + AC".to_string(),
    })
}
