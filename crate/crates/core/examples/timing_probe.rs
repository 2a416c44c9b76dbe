// Scratch probe: time one forward and one backward of resnet20-mini.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tssnn_core::lif::LifParams;
use tssnn_core::network::{preset_spec, Mode, Network};
use tssnn_core::tensor::{Dims, SpikeTensor};
use tssnn_core::tshift::ShiftConfig;

fn main() {
    let t = 10;
    let spec = preset_spec(
        "resnet20-mini",
        Dims::new(t, 1, 8, 8),
        10,
        &ShiftConfig::default(),
        &LifParams::default(),
    )
    .unwrap();
    let net = Network::build(spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let x = SpikeTensor::filled(Dims::new(t, 1, 8, 8), 0.5).unwrap();

    let n = 50;
    let start = std::time::Instant::now();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let pass = net.forward(&x, Mode::Infer, &mut rng, false).unwrap();
        std::hint::black_box(pass.tape.value(pass.logits));
    }
    println!("infer forward: {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / n as f64);

    let start = std::time::Instant::now();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let pass = net.forward(&x, Mode::Train, &mut rng, false).unwrap();
        std::hint::black_box(pass.tape.value(pass.logits));
    }
    println!("train forward: {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / n as f64);

    let start = std::time::Instant::now();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let mut pass = net.forward(&x, Mode::Train, &mut rng, false).unwrap();
        let scores = pass.tape.mean_t(pass.logits);
        let loss = pass.tape.cross_entropy(scores, 3).unwrap();
        let grads = pass.tape.backward(loss).unwrap();
        std::hint::black_box(&grads);
    }
    println!("train fwd+bwd: {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / n as f64);
}
