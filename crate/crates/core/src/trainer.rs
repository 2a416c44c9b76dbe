//! STBP training loop: rate-decoded cross-entropy loss, SGD with momentum,
//! cosine-annealed learning rate, deterministic under a single run seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::tape::cross_entropy_forward;
use crate::tensor::SpikeTensor;

/// Loss decoding scheme: logits averaged over timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDecode {
    MeanLogits,
}

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f32,
    pub momentum: f32,
    pub seed: u64,
    pub loss_decode: LossDecode,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr_initial: 0.1,
            momentum: 0.9,
            seed: 0,
            loss_decode: LossDecode::MeanLogits,
            schedule: Schedule::Cosine,
        }
    }
}

/// One epoch of recorded metrics. Wall time is tracked separately so metric
/// files stay byte-reproducible under a fixed seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub firing_rates: Vec<f64>,
}

/// Metrics history plus wall time for a completed training run.
pub struct TrainRun {
    pub metrics: Vec<EpochMetrics>,
    pub seconds: f64,
}

/// Per-layer firing rate measured during an evaluation pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerRate {
    pub layer: usize,
    pub rate: f64,
}

/// Accuracy and firing rates of one evaluation pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub mode: Mode,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub firing_rates: Vec<LayerRate>,
}

/// Class scores from per-timestep logits: mean over the time axis.
pub fn decode_logits(logits: &SpikeTensor) -> Result<Vec<f32>> {
    let d = logits.dims();
    if d.h != 1 || d.w != 1 {
        return Err(Error::Dimension(format!(
            "logits must be [T,K,1,1], got {}",
            d
        )));
    }
    let mut scores = vec![0.0f32; d.c];
    for t in 0..d.t {
        for k in 0..d.c {
            scores[k] += logits.get(t, k, 0, 0);
        }
    }
    let inv = 1.0 / d.t as f32;
    for s in scores.iter_mut() {
        *s *= inv;
    }
    Ok(scores)
}

/// Numerically stabilized `-log softmax(scores)[label]`.
pub fn cross_entropy(scores: &[f32], label: usize) -> Result<f32> {
    if label >= scores.len() {
        return Err(Error::Contract(format!(
            "label {} out of range for {} classes",
            label,
            scores.len()
        )));
    }
    Ok(cross_entropy_forward(scores, label).0)
}

/// SGD with momentum: `v <- momentum*v + g; p <- p - lr*v`.
pub fn sgd_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Cosine-annealed learning rate: `lr0 * (1 + cos(pi*epoch/total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_initial: f32) -> f32 {
    let phase = std::f32::consts::PI * epoch as f32 / total_epochs as f32;
    lr_initial * (1.0 + phase.cos()) / 2.0
}

fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Evaluate a network over a dataset in the given mode; per-sample shift
/// draws come from a sequence derived from `seed`, so two invocations agree
/// bit-exactly.
pub fn evaluate(net: &Network, ds: &Dataset, mode: Mode, seed: u64) -> Result<EvalOutcome> {
    // Every sample is its own forward call and draws its own split
    // sequence; the derived seeds keep two invocations bit-identical.
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let sample_seeds: Vec<u64> = (0..ds.samples.len()).map(|_| master.gen()).collect();

    let results: Vec<Result<(bool, Vec<(usize, u64, u64)>)>> = ds
        .samples
        .par_iter()
        .zip(sample_seeds.par_iter())
        .map(|((x, label), &s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let pass = net.forward(x, mode, &mut rng, false)?;
            let logits = pass.tape.value_tensor(pass.logits);
            let scores = decode_logits(&logits)?;
            let correct = argmax(&scores) == *label as usize;
            let stats = pass
                .spike_stats
                .iter()
                .map(|st| (st.layer, st.ones, st.numel))
                .collect();
            Ok((correct, stats))
        })
        .collect();

    let mut correct = 0usize;
    let mut ones: Vec<(usize, u64, u64)> = Vec::new();
    for r in results {
        let (ok, stats) = r?;
        if ok {
            correct += 1;
        }
        if ones.is_empty() {
            ones = stats;
        } else {
            for (acc, s) in ones.iter_mut().zip(&stats) {
                debug_assert_eq!(acc.0, s.0);
                acc.1 += s.1;
                acc.2 += s.2;
            }
        }
    }
    let total = ds.samples.len();
    let firing_rates = ones
        .iter()
        .map(|&(layer, o, n)| LayerRate { layer, rate: if n == 0 { 0.0 } else { o as f64 / n as f64 } })
        .collect();
    Ok(EvalOutcome {
        mode,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        firing_rates,
    })
}

struct SampleResult {
    loss: f32,
    correct: bool,
    grads: Vec<Option<Vec<f32>>>,
    bn_stats: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

fn train_sample(
    net: &Network,
    x: &SpikeTensor,
    label: u32,
    seed: u64,
    trainable: &[usize],
) -> Result<SampleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pass = net.forward(x, Mode::Train, &mut rng, false)?;
    let scores_var = pass.tape.mean_t(pass.logits);
    let loss_var = pass.tape.cross_entropy(scores_var, label as usize)?;
    let loss = pass.tape.value(loss_var)[0];
    let scores = pass.tape.value(scores_var).to_vec();
    let grads = pass.tape.backward(loss_var)?;
    let g = trainable
        .iter()
        .map(|&idx| {
            pass.param_vars[idx]
                .and_then(|v| grads.wrt(v).map(|s| s.to_vec()))
        })
        .collect();
    let bn_stats = pass
        .bn_stats
        .iter()
        .map(|(layer, s)| (*layer, s.mean.clone(), s.var.clone()))
        .collect();
    Ok(SampleResult {
        loss,
        correct: argmax(&scores) == label as usize,
        grads: g,
        bn_stats,
    })
}

const BN_MOMENTUM: f32 = 0.1;

/// Full training loop. Batch iteration order, parameter initialization noise,
/// and every shift draw derive from `cfg.seed`, so identical configurations
/// reproduce identical metrics and checkpoints byte for byte.
pub fn train(net: &mut Network, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if train_ds.samples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for (x, label) in train_ds.samples.iter().chain(&test_ds.samples) {
        if x.dims() != net.spec.input_shape {
            return Err(Error::Dimension(format!(
                "dataset sample {} does not match network input {}",
                x.dims(),
                net.spec.input_shape
            )));
        }
        if *label as usize >= net.spec.class_count {
            return Err(Error::Contract(format!(
                "label {} out of range for {} classes",
                label, net.spec.class_count
            )));
        }
    }

    let start = std::time::Instant::now();
    let trainable = net.trainable_indices();
    let mut velocity: Vec<Vec<f32>> = trainable
        .iter()
        .map(|&i| vec![0.0f32; net.params()[i].value.data().len()])
        .collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut forward_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    forward_rng.set_stream(2);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(3);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..train_ds.samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = match cfg.schedule {
            Schedule::Cosine => cosine_lr(epoch, cfg.epochs, cfg.lr_initial),
        };
        indices.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        for (batch_idx, batch) in indices.chunks(cfg.batch_size.max(1)).enumerate() {
            // Split points are redrawn per forward pass, shared across the
            // batch: every sample of the batch sees the same draw sequence.
            let batch_seed: u64 = forward_rng.gen();
            let results: Vec<Result<SampleResult>> = batch
                .par_iter()
                .map(|&i| {
                    let (x, label) = &train_ds.samples[i];
                    train_sample(net, x, *label, batch_seed, &trainable)
                })
                .collect();

            let inv_n = 1.0f32 / batch.len() as f32;
            let mut grad_sum: Vec<Vec<f32>> = trainable
                .iter()
                .map(|&i| vec![0.0f32; net.params()[i].value.data().len()])
                .collect();
            let mut batch_loss = 0.0f64;
            let mut bn_acc: Vec<(usize, Vec<f32>, Vec<f32>)> = Vec::new();
            for r in results {
                let r = r?;
                batch_loss += r.loss as f64;
                if r.correct {
                    epoch_correct += 1;
                }
                for (sum, g) in grad_sum.iter_mut().zip(&r.grads) {
                    if let Some(g) = g {
                        for (a, b) in sum.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
                if bn_acc.is_empty() {
                    bn_acc = r.bn_stats;
                } else {
                    for (acc, s) in bn_acc.iter_mut().zip(&r.bn_stats) {
                        debug_assert_eq!(acc.0, s.0);
                        for (a, b) in acc.1.iter_mut().zip(&s.1) {
                            *a += b;
                        }
                        for (a, b) in acc.2.iter_mut().zip(&s.2) {
                            *a += b;
                        }
                    }
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch, batch_idx
                )));
            }
            epoch_loss += batch_loss * batch.len() as f64;

            for ((slot, &idx), vel) in grad_sum.iter_mut().zip(&trainable).zip(velocity.iter_mut()) {
                for g in slot.iter_mut() {
                    *g *= inv_n;
                }
                let entry = net.param_mut(idx);
                sgd_step(entry.value.data_mut(), slot, vel, lr, cfg.momentum);
            }

            // Fold averaged batch statistics into the running estimates.
            for (layer, mean_sum, var_sum) in bn_acc {
                let m_idx = net.find_param(&format!("l{:02}.bn.running_mean", layer)).unwrap();
                let v_idx = net.find_param(&format!("l{:02}.bn.running_var", layer)).unwrap();
                let rm = net.param_mut(m_idx);
                for (r, s) in rm.value.data_mut().iter_mut().zip(&mean_sum) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s * inv_n;
                }
                let rv = net.param_mut(v_idx);
                for (r, s) in rv.value.data_mut().iter_mut().zip(&var_sum) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s * inv_n;
                }
            }
        }

        let eval = evaluate(net, test_ds, Mode::Infer, eval_rng.gen())?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            loss: epoch_loss / train_ds.samples.len() as f64,
            train_acc: epoch_correct as f64 / train_ds.samples.len() as f64,
            test_acc: eval.accuracy,
            firing_rates: eval.firing_rates.iter().map(|r| r.rate).collect(),
        });
    }

    Ok(TrainRun { metrics, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_pulse_position, SyntheticTask, SyntheticTaskSpec};
    use crate::lif::LifParams;
    use crate::network::{preset_spec, LayerSpec, NetworkSpec};
    use crate::tensor::Dims;
    use crate::tshift::ShiftConfig;

    #[test]
    fn decode_cases() {
        // T=1 is the identity.
        let one = SpikeTensor::from_vec(Dims::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        assert_eq!(decode_logits(&one).unwrap(), vec![3.0, 4.0]);
        // Symmetric rows average to their midpoint.
        let two = SpikeTensor::from_vec(Dims::new(2, 2, 1, 1), vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(decode_logits(&two).unwrap(), vec![1.0, 1.0]);
        // Constant rows stay put.
        let four =
            SpikeTensor::from_vec(Dims::new(4, 2, 1, 1), vec![0.5, -1.0].repeat(4)).unwrap();
        assert_eq!(decode_logits(&four).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.0; 4], 1).unwrap() - 4.0f32.ln()).abs() < 1e-6);
        let stable = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(stable.is_finite() && stable.abs() < 1e-6);
        assert!((cross_entropy(&[0.0, 0.0, 0.0], 2).unwrap() - 1.0986123).abs() < 1e-5);
        assert!(cross_entropy(&[0.0, 0.0], 5).is_err());
    }

    #[test]
    fn sgd_cases() {
        // momentum = 0 is plain descent.
        let mut p = vec![1.0f32];
        let mut v = vec![0.0f32];
        sgd_step(&mut p, &[2.0], &mut v, 0.1, 0.0);
        assert!((p[0] - 0.8).abs() < 1e-7);

        // zero gradients decay the velocity geometrically.
        let mut p = vec![0.0f32];
        let mut v = vec![1.0f32];
        sgd_step(&mut p, &[0.0], &mut v, 0.0, 0.9);
        sgd_step(&mut p, &[0.0], &mut v, 0.0, 0.9);
        assert!((v[0] - 0.81).abs() < 1e-6);

        // two steps of constant g=1, lr=0.1, momentum=0.9 move by 0.29.
        let mut p = vec![0.0f32];
        let mut v = vec![0.0f32];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
        assert!((p[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1), 0.1);
        assert!(cosine_lr(10, 10, 0.1).abs() < 1e-8);
        assert!((cosine_lr(5, 10, 0.1) - 0.05).abs() < 1e-7);
    }

    fn pulse_spec(samples: usize, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task: SyntheticTask::PulsePosition,
            t: 4,
            c: 1,
            h: 4,
            w: 4,
            class_count: 4,
            noise_std: 0.1,
            samples_per_class: samples,
            seed,
        }
    }

    fn tiny_net(seed: u64) -> Network {
        let spec = NetworkSpec {
            input_shape: Dims::new(4, 1, 4, 4),
            class_count: 4,
            layers: vec![
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::BatchNorm,
                LayerSpec::Lif { params: LifParams::default() },
                LayerSpec::TShift { config: ShiftConfig { c_k: 8, ..ShiftConfig::default() } },
                LayerSpec::AvgPool { kernel: 4, stride: 4 },
                LayerSpec::Linear { out_features: 4 },
            ],
        };
        Network::build(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let train_ds = gen_pulse_position(&pulse_spec(2, 1)).unwrap();
        let mut net = tiny_net(5);
        let before: Vec<Vec<u32>> = net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let cfg = TrainConfig { epochs: 3, batch_size: 4, lr_initial: 0.0, seed: 2, ..TrainConfig::default() };
        train(&mut net, &train_ds, &train_ds, &cfg).unwrap();
        let after: Vec<Vec<u32>> = net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_reproduces_metrics_exactly() {
        let run = || {
            let train_ds = gen_pulse_position(&pulse_spec(2, 3)).unwrap();
            let mut net = tiny_net(6);
            let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..TrainConfig::default() };
            let out = train(&mut net, &train_ds, &train_ds, &cfg).unwrap();
            serde_json::to_string(&out.metrics).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_sample_overfits() {
        // Overfitting sanity oracle: one sample, 200 epochs, loss -> ~0.
        let spec = SyntheticTaskSpec { samples_per_class: 1, class_count: 1, ..pulse_spec(1, 4) };
        let train_ds = gen_pulse_position(&spec).unwrap();
        let net_spec = preset_spec(
            "mini-plain",
            Dims::new(4, 1, 4, 4),
            2,
            &ShiftConfig { c_k: 4, ..ShiftConfig::default() },
            &LifParams::default(),
        )
        .unwrap();
        let mut net = Network::build(net_spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let cfg = TrainConfig { epochs: 200, batch_size: 1, seed: 10, ..TrainConfig::default() };
        let out = train(&mut net, &train_ds, &train_ds, &cfg).unwrap();
        let final_loss = out.metrics.last().unwrap().loss;
        assert!(final_loss < 0.05, "final loss {} did not fall below 0.05", final_loss);
    }
}
