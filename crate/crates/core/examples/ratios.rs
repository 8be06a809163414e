//! Prints the footprint and energy ratios for the three reference models.

use binlow_core::analysis::*;
use binlow_core::layers::Scheme;
use binlow_core::model::Topology;
use binlow_core::optim::OptimizerKind;

fn main() {
    let cost = CostModel::default();
    for name in ["mlp5_256", "cnv", "binarynet"] {
        let topo = Topology::by_name(name).unwrap();
        let std = footprint_of(name, &Scheme::standard(), 100).unwrap();
        let prop = footprint_of(name, &Scheme::proposed(), 100).unwrap();
        let es = energy_estimate(&topo, &Scheme::standard(), &OptimizerKind::adam(), 100, true, &cost, true).unwrap();
        let ep = energy_estimate(&topo, &Scheme::proposed(), &OptimizerKind::adam(), 100, true, &cost, true).unwrap();
        println!(
            "{name:10} mem {:8.2} -> {:7.2} MiB ({:.2}x)   energy {:8.2} -> {:7.2} mJ ({:.2}x; ops {:.1}x mem {:.1}x)",
            std.total_mib(), prop.total_mib(), prop.saving_over(&std),
            es.total_mj(), ep.total_mj(), ep.saving_over(&es),
            es.ops_j / ep.ops_j, es.mem_j / ep.mem_j,
        );
    }
}
