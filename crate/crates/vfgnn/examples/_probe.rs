// Scratch probe: write full-node embeddings after a warmup of training.
use vfgnn::defense::DefenseConfig;
use vfgnn::diffcore::{SeedStream, Tape, Tensor};
use vfgnn::gnn::*;
use vfgnn::graphdata::*;
use vfgnn::vfl::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let warmup: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let graph = load_manifest(
        std::path::Path::new("data/cora.json"),
        std::path::Path::new("data"),
        0,
    )
    .unwrap();
    let seed = 20u64;
    let partition = partition_vertical(&graph, 2, SeedStream::derive(seed, "partition")).unwrap();
    let gnn_cfg = GnnConfig::for_arch(Arch::Gcn);
    let mut system = VflSystem::build(&graph, &partition, gnn_cfg, Combine::Concat, 1, 0.01, seed)
        .unwrap()
        .with_weight_decay(5e-4);
    for _ in 0..warmup {
        system.train_epoch(&DefenseConfig::None).unwrap();
    }
    let c = system.client(0);
    let tape = Tape::new();
    let nodes = register_params(&tape, &c.model.params());
    let h = local_forward(&tape, &nodes, &gnn_cfg, &c.features, &c.adj).unwrap();
    let hv: Tensor = h.value();
    let mut out = String::new();
    for r in 0..hv.rows() {
        let row: Vec<String> = hv.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write("/tmp/exp/full_emb.csv", out).unwrap();
    eprintln!("wrote {} rows", hv.rows());
}
