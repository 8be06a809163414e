//! Calibrates the small conv-ablation surrogate: 16x16 procedural shapes,
//! a four-conv stack, po2_5 vs int5 activation gradients.

use binlow_core::engine::{build_model, train, Dataset, TrainOptions};
use binlow_core::layers::{BnVariant, DwFormat, DyFormat, Scheme};
use binlow_core::model::{InputSpec, LayerSpec, ModelConfig, Topology};
use binlow_core::optim::LrSchedule;
use binlow_core::tensor::StorageDtype;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shapes16(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16usize, 16usize);
    let mut images = Vec::with_capacity(n * h * w * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let shape = class % 5;
        let polarity: f32 = if class < 5 { 1.0 } else { -1.0 };
        let cx = rng.gen_range(5..11) as i32;
        let cy = rng.gen_range(5..11) as i32;
        let rad = rng.gen_range(3..5) as i32;
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let (dx, dy) = (x - cx, y - cy);
                let inside = match shape {
                    0 => dx * dx + dy * dy <= rad * rad,
                    1 => dx.abs() <= rad && dy.abs() <= rad,
                    2 => dx.abs() + dy.abs() <= rad,
                    3 => dy.abs() <= rad / 2 && dx.abs() <= rad,
                    _ => dx.abs() <= rad / 2 && dy.abs() <= rad,
                };
                let tex = (x as f32 * 0.9 + phase).sin() * 0.15;
                for c in 0..3 {
                    let base = if inside { polarity * 0.8 } else { -polarity * 0.2 + tex };
                    let tint = match c {
                        0 => 0.1,
                        1 => -0.05,
                        _ => 0.0,
                    };
                    let noise: f32 = rng.gen_range(-0.25..0.25);
                    images.push((base + tint + noise).clamp(-1.0, 1.0));
                }
            }
        }
        labels.push(class as u8);
    }
    Dataset { features: h * w * 3, classes: 10, images, labels }
}

fn small_conv() -> Topology {
    let conv = |out_c, input_pool| LayerSpec::Conv {
        out_c,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 0,
        pool_before_norm: None,
        input_pool,
    };
    Topology {
        input: InputSpec::Image { h: 16, w: 16, c: 3 },
        layers: vec![
            conv(16, None),              // 16 -> 14
            conv(16, None),              // 14 -> 12
            conv(32, Some((2, 2))),      // pool 6, conv -> 4
            conv(32, None),              // 4 -> 2
            LayerSpec::Dense { out: 64 },
            LayerSpec::Dense { out: 10 },
        ],
        name: "shapes_conv".into(),
    }
}

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let train_set = shapes16(3000, 11);
    let test_set = shapes16(600, 12);
    for (name, dy) in [("po2_5", DyFormat::Po2(5)), ("int5", DyFormat::BlockFp(5))] {
        let scheme = Scheme {
            dw: DwFormat::Bool,
            dy,
            bn: BnVariant::L2,
            base: StorageDtype::F16,
        };
        let cfg = ModelConfig {
            batch_size: 100,
            seed,
            eta0: 0.001,
            ..ModelConfig::new(small_conv(), scheme)
        };
        let (mut model, mut rng) = build_model(cfg).unwrap();
        let t0 = std::time::Instant::now();
        let hist = train(&mut model, &mut rng, &train_set, &test_set, &TrainOptions {
            epochs,
            schedule: LrSchedule::dev_based(10, 0.5),
            dev_fraction: 0.1,
            density_layer: None,
        })
        .unwrap();
        println!(
            "seed {seed} {name:6} best test {:.4} (final {:.4}) in {:.0}s",
            hist.best_test,
            hist.records.last().unwrap().test_acc,
            t0.elapsed().as_secs_f64()
        );
    }
}
