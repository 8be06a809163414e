//! Cross-module agreement: the engine's live-buffer accounting during a real
//! step must equal the static analyzer's predictions, class by class and
//! phase by phase.

use binlow_core::analysis::memory_footprint;
use binlow_core::engine::{build_model, train_step, Dataset};
use binlow_core::layers::{BnVariant, DwFormat, DyFormat, Scheme};
use binlow_core::model::{InputSpec, LayerSpec, ModelConfig, Topology};
use binlow_core::tensor::StorageDtype;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_topology() -> Topology {
    Topology {
        input: InputSpec::Image { h: 12, w: 12, c: 3 },
        layers: vec![
            LayerSpec::Conv {
                out_c: 8,
                kh: 3,
                kw: 3,
                stride: 1,
                pad: 1,
                pool_before_norm: Some((2, 2)),
                input_pool: None,
            },
            LayerSpec::Conv {
                out_c: 8,
                kh: 3,
                kw: 3,
                stride: 1,
                pad: 0,
                pool_before_norm: None,
                input_pool: Some((2, 2)),
            },
            LayerSpec::Dense { out: 16 },
            LayerSpec::Dense { out: 4 },
        ],
        name: "conv_toy".into(),
    }
}

fn dense_topology() -> Topology {
    Topology {
        input: InputSpec::Flat { features: 20 },
        layers: vec![
            LayerSpec::Dense { out: 12 },
            LayerSpec::Dense { out: 12 },
            LayerSpec::Dense { out: 5 },
        ],
        name: "dense_toy".into(),
    }
}

fn random_dataset(n: usize, features: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        features,
        classes,
        images: (0..n * features).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        labels: (0..n).map(|i| (i % classes) as u8).collect(),
    }
}

fn check(topology: Topology, scheme: Scheme, batch: usize) {
    let classes = topology.classes();
    let features = topology.input.features();
    let cfg = ModelConfig {
        batch_size: batch,
        seed: 42,
        ..ModelConfig::new(topology.clone(), scheme)
    };
    let predicted =
        memory_footprint(&topology, &scheme, &cfg.optimizer, batch).expect("analyzer");
    let (mut model, _) = build_model(cfg).unwrap();
    let ds = random_dataset(batch, features, classes, 7);
    let idxs: Vec<usize> = (0..batch).collect();
    let (inputs, labels) = ds.batch(&idxs);
    let trace = train_step(&mut model, &inputs, &labels, 0.001, true).unwrap();

    assert_eq!(
        trace.rows, predicted.rows,
        "{} / {:?}: class rows diverge",
        topology.name, scheme
    );
    assert_eq!(
        trace.total_bytes, predicted.total_bytes,
        "{} / {:?}: totals diverge",
        topology.name, scheme
    );
    assert_eq!(
        trace.phase_peaks, predicted.phase_peaks,
        "{} / {:?}: phase peaks diverge",
        topology.name, scheme
    );
    assert_eq!(
        trace.macs, predicted.macs,
        "{} / {:?}: matmul work diverges",
        topology.name, scheme
    );

}

#[test]
fn engine_matches_analyzer_for_dense_schemes() {
    let table4_rows = [
        Scheme::standard(),
        Scheme {
            dw: DwFormat::F16,
            dy: DyFormat::F16,
            bn: BnVariant::L2,
            base: StorageDtype::F16,
        },
        Scheme {
            dw: DwFormat::Bool,
            dy: DyFormat::F16,
            bn: BnVariant::L2,
            base: StorageDtype::F16,
        },
        Scheme {
            dw: DwFormat::Bool,
            dy: DyFormat::BlockFp(5),
            bn: BnVariant::L2,
            base: StorageDtype::F16,
        },
        Scheme {
            dw: DwFormat::Bool,
            dy: DyFormat::Po2(5),
            bn: BnVariant::L2,
            base: StorageDtype::F16,
        },
        Scheme {
            dw: DwFormat::Bool,
            dy: DyFormat::Po2(5),
            bn: BnVariant::L1Plain,
            base: StorageDtype::F16,
        },
        Scheme::proposed(),
    ];
    for scheme in table4_rows {
        check(dense_topology(), scheme, 6);
    }
}

#[test]
fn engine_matches_analyzer_for_conv_schemes() {
    for scheme in [Scheme::standard(), Scheme::proposed()] {
        check(conv_topology(), scheme, 4);
    }
}
