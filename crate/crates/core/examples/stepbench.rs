//! Rough per-step timing at MNIST scale for the two presets.

use binlow_core::engine::{build_model, train_step, Dataset};
use binlow_core::layers::Scheme;
use binlow_core::model::{ModelConfig, Topology};
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let n = 1000;
    let ds = Dataset {
        features: 784,
        classes: 10,
        images: (0..n * 784).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        labels: (0..n).map(|i| (i % 10) as u8).collect(),
    };
    for (name, scheme) in [("standard", Scheme::standard()), ("proposed", Scheme::proposed())] {
        let cfg = ModelConfig {
            batch_size: 100,
            seed: 7,
            ..ModelConfig::new(Topology::mlp5_256(), scheme)
        };
        let (mut model, _) = build_model(cfg).unwrap();
        let idxs: Vec<usize> = (0..100).collect();
        let (inputs, labels) = ds.batch(&idxs);
        // warmup
        for _ in 0..3 {
            train_step(&mut model, &inputs, &labels, 0.001, false).unwrap();
        }
        let t0 = Instant::now();
        let steps = 30;
        for _ in 0..steps {
            train_step(&mut model, &inputs, &labels, 0.001, false).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / steps as f64;
        println!("{name}: {:.2} ms/step -> {:.1} min for 27000 steps", dt * 1e3, dt * 27000.0 / 60.0);
    }
}
