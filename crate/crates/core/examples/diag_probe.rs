// Scratch diagnostics: per-class confusion, learned alphas, and eval-draw
// sensitivity for a trained pulse_position run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tssnn_core::data::{generate, Split, SyntheticTask, SyntheticTaskSpec};
use tssnn_core::lif::LifParams;
use tssnn_core::network::{preset_spec, LayerSpec, Mode, Network};
use tssnn_core::tensor::Dims;
use tssnn_core::trainer::{decode_logits, train, TrainConfig};
use tssnn_core::tshift::ShiftConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let variant = args.get(2).map(|s| s.as_str()).unwrap_or("every");
    let t = 8;

    let task = SyntheticTaskSpec {
        task: SyntheticTask::PulsePosition,
        t,
        c: 1,
        h: 8,
        w: 8,
        class_count: 8,
        noise_std: 0.3,
        samples_per_class: 20,
        seed: 42,
    };
    let train_ds = generate(&task, Split::Train).unwrap();
    let test_ds = generate(&task, Split::Test).unwrap();

    let shift = ShiftConfig::default();
    let lif = LifParams::default();
    let mut spec = preset_spec("resnet20-mini", Dims::new(t, 1, 8, 8), 8, &shift, &lif).unwrap();
    if variant == "every" {
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
    }
    let mut net = Network::build(spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let cfg = TrainConfig { epochs, batch_size: 4, seed: 42, ..TrainConfig::default() };
    let out = train(&mut net, &train_ds, &test_ds, &cfg).unwrap();
    println!("final test_acc {:.3}", out.metrics.last().unwrap().test_acc);

    for p in net.params() {
        if p.name.contains("ts.alpha") {
            println!("{} = {:.4}", p.name, p.value.data()[0]);
        }
    }

    // Confusion matrix under per-sample random eval draws.
    let mut confusion = vec![vec![0usize; 8]; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for (x, label) in &test_ds.samples {
        let mut srng = ChaCha8Rng::seed_from_u64(rng.gen());
        let pass = net.forward(x, Mode::Infer, &mut srng, false).unwrap();
        let scores = decode_logits(&pass.tape.value_tensor(pass.logits)).unwrap();
        let pred = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        confusion[*label as usize][pred] += 1;
    }
    println!("confusion (rows=true, cols=pred):");
    for (k, row) in confusion.iter().enumerate() {
        let s: Vec<String> = row.iter().map(|c| format!("{:2}", c)).collect();
        println!("  {} | {}", k, s.join(" "));
    }

    // Same-draw eval: every sample sees the identical split sequence.
    let mut correct = 0;
    for (x, label) in &test_ds.samples {
        let mut srng = ChaCha8Rng::seed_from_u64(777);
        let pass = net.forward(x, Mode::Infer, &mut srng, false).unwrap();
        let scores = decode_logits(&pass.tape.value_tensor(pass.logits)).unwrap();
        let pred = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == *label as usize {
            correct += 1;
        }
    }
    println!("shared-draw eval acc {:.3}", correct as f64 / test_ds.samples.len() as f64);
    use tssnn_core::trainer::evaluate;
    let infer = evaluate(&net, &test_ds, Mode::Infer, 555).unwrap();
    let train_mode = evaluate(&net, &test_ds, Mode::Train, 555).unwrap();
    let on_train = evaluate(&net, &train_ds, Mode::Infer, 555).unwrap();
    println!("eval infer-mode (running stats) {:.3}", infer.accuracy);
    println!("eval train-mode (batch stats)  {:.3}", train_mode.accuracy);
    println!("train-set infer accuracy       {:.3}", on_train.accuracy);
}
