// Scratch probe for the desk-scale learning target: trains resnet20-mini
// variants on pulse_position and prints per-epoch metrics and wall time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tssnn_core::data::{generate, Split, SyntheticTask, SyntheticTaskSpec};
use tssnn_core::lif::LifParams;
use tssnn_core::network::{preset_spec, LayerSpec, Network};
use tssnn_core::tensor::Dims;
use tssnn_core::trainer::{train, TrainConfig};
use tssnn_core::tshift::ShiftConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let t: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let classes: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(10);
    let hw: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(8);
    let variant = args.get(3).map(|s| s.as_str()).unwrap_or("base");
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let tau: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let seed: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(42);
    let alpha: f32 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let task = SyntheticTaskSpec {
        task: SyntheticTask::PulsePosition,
        t,
        c: 1,
        h: hw,
        w: hw,
        class_count: classes,
        noise_std: 0.3,
        samples_per_class: 20,
        seed,
    };
    let train_ds = generate(&task, Split::Train).unwrap();
    let test_ds = generate(&task, Split::Test).unwrap();

    let shift = ShiftConfig { alpha_init: alpha, ..ShiftConfig::default() };
    let lif = LifParams { tau, ..LifParams::default() };
    let mut spec = if variant.starts_with("shallow") {
        use tssnn_core::network::NetworkSpec;
        let conv = |out, stride| LayerSpec::Conv { out_channels: out, kernel: 3, stride, padding: 1 };
        let bn = || LayerSpec::BatchNorm;
        let act = || LayerSpec::Lif { params: lif };
        let ts = || LayerSpec::TShift { config: shift.clone() };
        let mut layers = vec![conv(16, 1), bn(), act(), ts()];
        layers.push(LayerSpec::ResidualBegin);
        layers.extend([conv(16, 1), bn(), act(), ts(), conv(16, 1), bn()]);
        layers.push(LayerSpec::ResidualEnd);
        layers.extend([act(), ts()]);
        layers.extend([conv(32, 2), bn(), act(), ts()]);
        layers.extend([conv(64, 2), bn(), act(), ts()]);
        let rem = hw / 4;
        if rem > 1 {
            layers.push(LayerSpec::AvgPool { kernel: rem, stride: rem });
        }
        layers.push(LayerSpec::Linear { out_features: classes });
        NetworkSpec { input_shape: Dims::new(t, 1, hw, hw), class_count: classes, layers }
    } else {
        preset_spec("resnet20-mini", Dims::new(t, 1, hw, hw), classes, &shift, &lif).unwrap()
    };

    if variant.starts_with("every") {
        // Insert a TS layer after every LIF that is not already followed by one.
        let mut layers = Vec::new();
        let n = spec.layers.len();
        for (i, l) in spec.layers.iter().enumerate() {
            layers.push(l.clone());
            if matches!(l, LayerSpec::Lif { .. })
                && (i + 1 >= n || !matches!(spec.layers[i + 1], LayerSpec::TShift { .. }))
                && i + 1 < n
            {
                layers.push(LayerSpec::TShift { config: shift.clone() });
            }
        }
        spec.layers = layers;
        if variant == "every-memhead" {
            // Drop the final post-residual LIF (and its TS): the head reads
            // continuous features.
            let last_lif = spec
                .layers
                .iter()
                .rposition(|l| matches!(l, LayerSpec::Lif { .. }))
                .unwrap();
            spec.layers.remove(last_lif + 1);
            spec.layers.remove(last_lif);
        }
        spec.infer_shapes().unwrap();
    }

    let mut net = Network::build(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let cfg = TrainConfig { epochs, batch_size: batch, seed, ..TrainConfig::default() };
    let start = std::time::Instant::now();
    let out = train(&mut net, &train_ds, &test_ds, &cfg).unwrap();
    for m in out.metrics.iter().step_by(10).chain(out.metrics.last()) {
        println!(
            "epoch {:3}  lr {:.4}  loss {:.4}  train_acc {:.3}  test_acc {:.3}",
            m.epoch, m.lr, m.loss, m.train_acc, m.test_acc
        );
    }
    let best = out.metrics.iter().map(|m| m.test_acc).fold(0.0, f64::max);
    println!(
        "variant={} batch={} tau={} best_test={:.3} total {:.1}s",
        variant,
        batch,
        tau,
        best,
        start.elapsed().as_secs_f64()
    );
}
