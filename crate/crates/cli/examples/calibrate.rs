//! Measures what each scheme reaches on the bundled-digits surrogate, to
//! pin expectations in the integration tests.

use binlow_cli::data::load_mnist;
use binlow_core::engine::{build_model, train, TrainOptions};
use binlow_core::layers::Scheme;
use binlow_core::model::{InputSpec, LayerSpec, ModelConfig, Topology};
use binlow_core::optim::LrSchedule;
use std::path::Path;

fn digits_mlp() -> Topology {
    Topology {
        input: InputSpec::Flat { features: 64 },
        layers: vec![
            LayerSpec::Dense { out: 128 },
            LayerSpec::Dense { out: 128 },
            LayerSpec::Dense { out: 128 },
            LayerSpec::Dense { out: 10 },
        ],
        name: "digits_mlp".into(),
    }
}

fn main() {
    let dir = std::env::args().nth(1).unwrap_or("/root/data/digits".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let (train_set, test_set) = load_mnist(Path::new(&dir)).unwrap();
    println!("digits: {} train / {} test", train_set.len(), test_set.len());
    for (name, scheme, binarize) in [
        ("standard-bnn", Scheme::standard(), true),
        ("proposed-bnn", Scheme::proposed(), true),
        ("standard-ref", Scheme::standard(), false),
        ("proposed-ref", Scheme::proposed(), false),
    ] {
        let cfg = ModelConfig {
            batch_size: 50,
            seed: 1,
            eta0: 0.001,
            binarize,
            ..ModelConfig::new(digits_mlp(), scheme)
        };
        let (mut model, mut rng) = build_model(cfg).unwrap();
        let t0 = std::time::Instant::now();
        let hist = train(
            &mut model,
            &mut rng,
            &train_set,
            &test_set,
            &TrainOptions {
                epochs,
                schedule: LrSchedule::dev_based(10, 0.5),
                dev_fraction: 0.1,
                density_layer: Some(1),
            },
        )
        .unwrap();
        let dens = &hist.density;
        println!(
            "{name:13} best test {:.4} (final {:.4}) in {:.1}s; |grad mean| min {:.2e}, sd [{:.2e}..{:.2e}]",
            hist.best_test,
            hist.records.last().unwrap().test_acc,
            t0.elapsed().as_secs_f64(),
            dens.iter().map(|d| d.0.abs()).fold(f32::INFINITY, f32::min),
            dens.iter().map(|d| d.1).fold(f32::INFINITY, f32::min),
            dens.iter().map(|d| d.1).fold(0.0f32, f32::max),
        );
    }
}
