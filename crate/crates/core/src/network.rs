//! Declarative construction of small spiking CNNs (plain and residual) with
//! temporal shift placement, parameter initialization, and forward execution
//! on a gradient tape.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{self, LifParams};
use crate::tape::{BnBatchStats, GradTape, Var};
use crate::tensor::{Dims, SpikeTensor};
use crate::tshift::{self, ShiftConfig};

pub const BN_EPS: f32 = 1e-5;

/// Forward-pass mode; propagated to temporal shift and batch norm layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// One layer of a network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Linear { out_features: usize },
    AvgPool { kernel: usize, stride: usize },
    Lif {
        #[serde(default)]
        params: LifParams,
    },
    TShift {
        #[serde(default)]
        config: ShiftConfig,
    },
    BatchNorm,
    ResidualBegin,
    ResidualEnd,
}

/// Ordered layer list plus input shape and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: Dims,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Structural validation: matched residual pairs, shift layers fed by
    /// spikes, non-empty layer list.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be >= 1".into()));
        }
        let mut block_start: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::ResidualBegin => {
                    if block_start.is_some() {
                        return Err(Error::Config(format!(
                            "layer {}: nested residual_begin",
                            i
                        )));
                    }
                    block_start = Some(i);
                }
                LayerSpec::ResidualEnd => {
                    if block_start.take().is_none() {
                        return Err(Error::Config(format!(
                            "layer {}: residual_end without matching residual_begin",
                            i
                        )));
                    }
                }
                LayerSpec::TShift { .. } => {
                    let scope = block_start.map(|b| b + 1).unwrap_or(0);
                    let fed_by_spikes = self.layers[scope..i]
                        .iter()
                        .any(|l| matches!(l, LayerSpec::Lif { .. }));
                    if !fed_by_spikes {
                        return Err(Error::Config(format!(
                            "layer {}: tshift must be preceded by a lif layer in its block",
                            i
                        )));
                    }
                }
                _ => {}
            }
        }
        if block_start.is_some() {
            return Err(Error::Config("unclosed residual_begin".into()));
        }
        Ok(())
    }

    /// Output shape of every layer. Failures are configuration errors naming
    /// the offending layer index.
    pub fn infer_shapes(&self) -> Result<Vec<Dims>> {
        self.validate()?;
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape;
        let mut stack: Vec<Dims> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Error::Config(format!("layer {}: {}", i, msg));
            cur = match layer {
                LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(fail("conv parameters must be >= 1".into()));
                    }
                    if cur.h + 2 * padding < *kernel || cur.w + 2 * padding < *kernel {
                        return Err(fail(format!(
                            "kernel {} larger than padded input {}x{}",
                            kernel,
                            cur.h + 2 * padding,
                            cur.w + 2 * padding
                        )));
                    }
                    Dims::new(
                        cur.t,
                        *out_channels,
                        (cur.h + 2 * padding - kernel) / stride + 1,
                        (cur.w + 2 * padding - kernel) / stride + 1,
                    )
                }
                LayerSpec::Linear { out_features } => {
                    if *out_features == 0 {
                        return Err(fail("out_features must be >= 1".into()));
                    }
                    Dims::new(cur.t, *out_features, 1, 1)
                }
                LayerSpec::AvgPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 || *kernel > cur.h || *kernel > cur.w {
                        return Err(fail(format!(
                            "pool kernel {} stride {} invalid for {}x{}",
                            kernel, stride, cur.h, cur.w
                        )));
                    }
                    Dims::new(
                        cur.t,
                        cur.c,
                        (cur.h - kernel) / stride + 1,
                        (cur.w - kernel) / stride + 1,
                    )
                }
                LayerSpec::Lif { params } => {
                    params.validate().map_err(|e| fail(e.to_string()))?;
                    cur
                }
                LayerSpec::TShift { config } => {
                    let fold = tshift::fold_size(cur.c, config.c_k).map_err(|e| fail(e.to_string()))?;
                    if fold.effective_c_k < 3 {
                        return Err(fail(format!(
                            "temporal shift needs an effective folding factor >= 3, got {}",
                            fold.effective_c_k
                        )));
                    }
                    cur
                }
                LayerSpec::BatchNorm => cur,
                LayerSpec::ResidualBegin => {
                    stack.push(cur);
                    cur
                }
                LayerSpec::ResidualEnd => {
                    let entry = stack.pop().expect("validated pairing");
                    if entry != cur {
                        return Err(fail(format!(
                            "residual skip shape {} does not match block output {}",
                            entry, cur
                        )));
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        let expect = Dims::new(self.input_shape.t, self.class_count, 1, 1);
        if cur != expect {
            return Err(Error::Config(format!(
                "final layer output {} must be {}",
                cur, expect
            )));
        }
        Ok(shapes)
    }

    /// Replace the shift configuration of every tshift layer.
    pub fn override_shift(&mut self, cfg: &ShiftConfig) {
        for layer in &mut self.layers {
            if let LayerSpec::TShift { config } = layer {
                *config = cfg.clone();
            }
        }
    }
}

/// Named parameter array of a built network.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: SpikeTensor,
    pub trainable: bool,
}

/// A built network: a spec plus its parameter arrays. Immutable during
/// forwards; training mutates parameters between forwards only.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    params: Vec<ParamEntry>,
}

/// Spike statistics of one LIF layer recorded during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerSpikeStats {
    pub layer: usize,
    pub ones: u64,
    pub numel: u64,
}

/// Result of one forward pass. The tape stays live so callers can keep
/// recording (decode, loss) and run backward.
pub struct ForwardPass {
    pub tape: GradTape,
    pub logits: Var,
    /// Tape handle per parameter index; `None` when a parameter did not
    /// participate (e.g. batch norm statistics in training mode).
    pub param_vars: Vec<Option<Var>>,
    pub spike_stats: Vec<LayerSpikeStats>,
    /// Batch statistics captured per batch norm layer in training mode.
    pub bn_stats: Vec<(usize, BnBatchStats)>,
    /// LIF output tensors, captured on request.
    pub spikes: Vec<(usize, SpikeTensor)>,
}

/// Per-channel mean and biased variance over the time and spatial axes.
fn channel_stats(data: &[f32], dims: Dims) -> BnBatchStats {
    let plane = dims.h * dims.w;
    let n = (dims.t * plane) as f32;
    let mut mean = vec![0.0f32; dims.c];
    let mut var = vec![0.0f32; dims.c];
    for t in 0..dims.t {
        for c in 0..dims.c {
            let base = (t * dims.c + c) * plane;
            let mut s = 0.0f32;
            for &v in &data[base..base + plane] {
                s += v;
            }
            mean[c] += s;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for t in 0..dims.t {
        for c in 0..dims.c {
            let base = (t * dims.c + c) * plane;
            let m = mean[c];
            let mut s = 0.0f32;
            for &v in &data[base..base + plane] {
                let d = v - m;
                s += d * d;
            }
            var[c] += s;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    BnBatchStats { mean, var }
}

fn he_uniform<R: Rng>(dims: Dims, fan_in: usize, rng: &mut R) -> SpikeTensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let data = (0..dims.numel()).map(|_| rng.gen_range(-bound..=bound)).collect();
    SpikeTensor::from_vec(dims, data).expect("matching dims")
}

impl Network {
    /// Build a network from its spec: validates shapes and initializes
    /// parameters (He-uniform conv/linear weights, zero biases, unit batch
    /// norm scale, alpha from the shift configuration). Deterministic under
    /// the seed driving `rng`.
    pub fn build<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let mut params = Vec::new();
        let mut cur = spec.input_shape;
        for (i, layer) in spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { out_channels, kernel, .. } => {
                    let wd = Dims::new(*out_channels, cur.c, *kernel, *kernel);
                    let fan_in = cur.c * kernel * kernel;
                    params.push(ParamEntry {
                        name: format!("l{:02}.conv.weight", i),
                        value: he_uniform(wd, fan_in, rng),
                        trainable: true,
                    });
                    params.push(ParamEntry {
                        name: format!("l{:02}.conv.bias", i),
                        value: SpikeTensor::zeros(Dims::new(1, *out_channels, 1, 1))?,
                        trainable: true,
                    });
                }
                LayerSpec::Linear { out_features } => {
                    let in_features = cur.c * cur.h * cur.w;
                    let wd = Dims::new(*out_features, in_features, 1, 1);
                    params.push(ParamEntry {
                        name: format!("l{:02}.linear.weight", i),
                        value: he_uniform(wd, in_features, rng),
                        trainable: true,
                    });
                    params.push(ParamEntry {
                        name: format!("l{:02}.linear.bias", i),
                        value: SpikeTensor::zeros(Dims::new(1, *out_features, 1, 1))?,
                        trainable: true,
                    });
                }
                LayerSpec::BatchNorm => {
                    let pd = Dims::new(1, cur.c, 1, 1);
                    params.push(ParamEntry {
                        name: format!("l{:02}.bn.gamma", i),
                        value: SpikeTensor::filled(pd, 1.0)?,
                        trainable: true,
                    });
                    params.push(ParamEntry {
                        name: format!("l{:02}.bn.beta", i),
                        value: SpikeTensor::zeros(pd)?,
                        trainable: true,
                    });
                    params.push(ParamEntry {
                        name: format!("l{:02}.bn.running_mean", i),
                        value: SpikeTensor::zeros(pd)?,
                        trainable: false,
                    });
                    params.push(ParamEntry {
                        name: format!("l{:02}.bn.running_var", i),
                        value: SpikeTensor::filled(pd, 1.0)?,
                        trainable: false,
                    });
                }
                LayerSpec::TShift { config } => {
                    params.push(ParamEntry {
                        name: format!("l{:02}.ts.alpha", i),
                        value: SpikeTensor::filled(Dims::new(1, 1, 1, 1), config.alpha_init)?,
                        trainable: true,
                    });
                }
                LayerSpec::AvgPool { .. }
                | LayerSpec::Lif { .. }
                | LayerSpec::ResidualBegin
                | LayerSpec::ResidualEnd => {}
            }
            cur = shapes[i];
        }
        Ok(Network { spec, params })
    }

    /// Reassemble a network from named arrays (checkpoint load). Every
    /// expected parameter must be present with matching dims; unknown names
    /// are rejected.
    pub fn from_arrays(spec: NetworkSpec, arrays: Vec<(String, SpikeTensor)>) -> Result<Self> {
        // Build a skeleton to learn the expected names and shapes.
        let mut seed_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::build(spec, &mut seed_rng)?;
        let mut filled = vec![false; net.params.len()];
        for (name, value) in arrays {
            let idx = net
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::Format(format!("unknown array name '{}'", name)))?;
            if net.params[idx].value.dims() != value.dims() {
                return Err(Error::Format(format!(
                    "array '{}' has dims {}, expected {}",
                    name,
                    value.dims(),
                    net.params[idx].value.dims()
                )));
            }
            net.params[idx].value = value;
            filled[idx] = true;
        }
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(Error::Format(format!(
                "missing array '{}'",
                net.params[missing].name
            )));
        }
        Ok(net)
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn param_mut(&mut self, index: usize) -> &mut ParamEntry {
        &mut self.params[index]
    }

    pub fn find_param(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Indices of trainable parameters, in declaration order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total trainable parameter element count.
    pub fn param_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.dims().numel() as u64)
            .sum()
    }

    /// Indices of LIF layers in the spec, in order.
    pub fn lif_layers(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Lif { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Run the network over one input sample. Layers are applied in order,
    /// LIF state threads across timesteps inside each LIF layer, and spike
    /// counts are recorded per LIF layer. `mode` reaches the shift and batch
    /// norm layers; the split points of every shift layer are drawn from
    /// `rng`.
    pub fn forward<R: Rng>(
        &self,
        x: &SpikeTensor,
        mode: Mode,
        rng: &mut R,
        capture_spikes: bool,
    ) -> Result<ForwardPass> {
        if x.dims() != self.spec.input_shape {
            return Err(Error::Dimension(format!(
                "input {} does not match network input shape {}",
                x.dims(),
                self.spec.input_shape
            )));
        }
        let mut tape = match mode {
            Mode::Train => GradTape::new(),
            Mode::Infer => GradTape::no_grad(),
        };
        let mut param_vars: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut spike_stats = Vec::new();
        let mut bn_stats = Vec::new();
        let mut spikes = Vec::new();
        let mut residual: Vec<Var> = Vec::new();

        fn bind(
            tape: &mut GradTape,
            net: &Network,
            param_vars: &mut [Option<Var>],
            name: &str,
        ) -> Var {
            let idx = net.find_param(name).expect("parameter exists for layer");
            let var = tape.param(&net.params[idx].value);
            param_vars[idx] = Some(var);
            var
        }

        let mut cur = tape.leaf(x);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let w = bind(&mut tape, self, &mut param_vars, &format!("l{:02}.conv.weight", i));
                    let b = bind(&mut tape, self, &mut param_vars, &format!("l{:02}.conv.bias", i));
                    cur = tape.conv2d(cur, w, Some(b), *stride, *padding)?;
                }
                LayerSpec::Linear { .. } => {
                    let flat = tape.flatten(cur);
                    let w = bind(&mut tape, self, &mut param_vars, &format!("l{:02}.linear.weight", i));
                    let b = bind(&mut tape, self, &mut param_vars, &format!("l{:02}.linear.bias", i));
                    cur = tape.linear(flat, w, Some(b))?;
                }
                LayerSpec::AvgPool { kernel, stride } => {
                    cur = tape.avg_pool2d(cur, *kernel, *stride)?;
                }
                LayerSpec::Lif { params } => {
                    cur = lif::layer_forward_on_tape(&mut tape, cur, params)?;
                    let value = tape.value(cur);
                    let ones = value.iter().filter(|&&v| v == 1.0).count() as u64;
                    spike_stats.push(LayerSpikeStats {
                        layer: i,
                        ones,
                        numel: value.len() as u64,
                    });
                    if capture_spikes {
                        spikes.push((i, tape.value_tensor(cur)));
                    }
                }
                LayerSpec::TShift { config } => {
                    let a_idx = self.find_param(&format!("l{:02}.ts.alpha", i)).unwrap();
                    let alpha = tape.param(&self.params[a_idx].value);
                    param_vars[a_idx] = Some(alpha);
                    cur = tshift::ts_forward_on_tape(&mut tape, cur, config, alpha, mode, rng)?;
                }
                LayerSpec::BatchNorm => {
                    // Normalization is frozen to the running statistics in
                    // both modes, so training and inference see the same
                    // affine map. Training still measures the incoming batch
                    // statistics to keep the running estimates current, and
                    // gradients reach gamma/beta through the affine path.
                    let g_idx = self.find_param(&format!("l{:02}.bn.gamma", i)).unwrap();
                    let b_idx = self.find_param(&format!("l{:02}.bn.beta", i)).unwrap();
                    let m_idx = self.find_param(&format!("l{:02}.bn.running_mean", i)).unwrap();
                    let v_idx = self.find_param(&format!("l{:02}.bn.running_var", i)).unwrap();
                    let rm = self.params[m_idx].value.data();
                    let rv = self.params[v_idx].value.data();
                    match mode {
                        Mode::Train => {
                            let d = tape.dims(cur);
                            bn_stats.push((i, channel_stats(tape.value(cur), d)));
                            let gamma = tape.param(&self.params[g_idx].value);
                            let beta = tape.param(&self.params[b_idx].value);
                            param_vars[g_idx] = Some(gamma);
                            param_vars[b_idx] = Some(beta);
                            let pd = Dims::new(1, d.c, 1, 1);
                            let inv: Vec<f32> =
                                rv.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
                            let inv_leaf = tape.constant(&SpikeTensor::from_vec(pd, inv)?);
                            let rm_leaf = tape.constant(&SpikeTensor::from_vec(pd, rm.to_vec())?);
                            // scale = gamma / sqrt(rv + eps); shift = beta - scale * rm
                            let scale = tape.mul(gamma, inv_leaf)?;
                            let centered = tape.mul(scale, rm_leaf)?;
                            let neg = tape.scale(centered, -1.0);
                            let shift = tape.add(beta, neg)?;
                            cur = tape.channel_affine(cur, scale, shift)?;
                        }
                        Mode::Infer => {
                            let gamma = self.params[g_idx].value.data();
                            let beta = self.params[b_idx].value.data();
                            let c = gamma.len();
                            let mut scale = Vec::with_capacity(c);
                            let mut shift = Vec::with_capacity(c);
                            for k in 0..c {
                                let inv = 1.0 / (rv[k] + BN_EPS).sqrt();
                                scale.push(gamma[k] * inv);
                                shift.push(beta[k] - gamma[k] * rm[k] * inv);
                            }
                            let pd = Dims::new(1, c, 1, 1);
                            let sc = tape.constant(&SpikeTensor::from_vec(pd, scale)?);
                            let sh = tape.constant(&SpikeTensor::from_vec(pd, shift)?);
                            cur = tape.channel_affine(cur, sc, sh)?;
                        }
                    }
                }
                LayerSpec::ResidualBegin => residual.push(cur),
                LayerSpec::ResidualEnd => {
                    let skip = residual.pop().expect("validated pairing");
                    cur = tape.add(skip, cur)?;
                }
            }
        }
        Ok(ForwardPass {
            tape,
            logits: cur,
            param_vars,
            spike_stats,
            bn_stats,
            spikes,
        })
    }
}

/// Built-in network presets for desk-scale runs.
pub fn preset_spec(
    name: &str,
    input_shape: Dims,
    class_count: usize,
    shift: &ShiftConfig,
    lif: &LifParams,
) -> Result<NetworkSpec> {
    let conv = |out, stride| LayerSpec::Conv { out_channels: out, kernel: 3, stride, padding: 1 };
    let bn = || LayerSpec::BatchNorm;
    let act = || LayerSpec::Lif { params: *lif };
    let ts = || LayerSpec::TShift { config: shift.clone() };

    let mut layers = Vec::new();
    match name {
        "mini-plain" => {
            layers.extend([conv(16, 1), bn(), act(), ts()]);
            layers.extend([conv(32, 2), bn(), act(), ts()]);
            layers.extend([conv(64, 2), bn(), act()]);
        }
        "resnet20-mini" => {
            layers.extend([conv(16, 1), bn(), act()]);
            for &width in &[16usize, 32, 64] {
                if width > 16 {
                    layers.extend([conv(width, 2), bn(), act()]);
                }
                layers.push(LayerSpec::ResidualBegin);
                layers.extend([conv(width, 1), bn(), act(), ts(), conv(width, 1), bn()]);
                layers.push(LayerSpec::ResidualEnd);
                layers.push(act());
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown network preset '{}' (available: mini-plain, resnet20-mini)",
                other
            )))
        }
    }

    // Pool whatever spatial extent remains down to 1x1, then classify.
    let mut probe = NetworkSpec { input_shape, class_count, layers: layers.clone() };
    probe.layers.push(LayerSpec::Linear { out_features: class_count });
    // Temporarily infer shapes without the pool to find the remaining extent.
    let mut spatial = input_shape;
    for layer in &layers {
        if let LayerSpec::Conv { out_channels, kernel, stride, padding } = layer {
            spatial = Dims::new(
                spatial.t,
                *out_channels,
                (spatial.h + 2 * padding - kernel) / stride + 1,
                (spatial.w + 2 * padding - kernel) / stride + 1,
            );
        }
    }
    if spatial.h != spatial.w {
        return Err(Error::Config(format!(
            "preset '{}' needs a square input, got {}x{}",
            name, input_shape.h, input_shape.w
        )));
    }
    if spatial.h > 1 {
        layers.push(LayerSpec::AvgPool { kernel: spatial.h, stride: spatial.h });
    }
    layers.push(LayerSpec::Linear { out_features: class_count });

    let spec = NetworkSpec { input_shape, class_count, layers };
    spec.infer_shapes()?;
    Ok(spec)
}
