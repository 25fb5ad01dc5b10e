//! Trains on the blended graph, then shows how much weight the gate puts on
//! the low-pass experts across homophily quintiles of the test nodes.
//!
//!     cargo run --release --example gate_profile

use nodemoe::analysis::{bucket_by_homophily, expert_weight_profile, low_pass_weight};
use nodemoe::moe::GraphInputs;
use nodemoe::synthetic::{sample_blend, BlendParams};
use nodemoe::trainer::{run_single, TrainConfig};

fn main() -> nodemoe::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let blend = sample_blend(&BlendParams::default(), seed)?;
    let ds = &blend.dataset;
    let data = GraphInputs::new(ds.graph.clone(), &ds.features)?;
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let run = run_single(&cfg, &data, &ds.labels, ds.num_classes, 0, 0)?;
    println!("test accuracy {:.4}", run.record.test_acc);

    let fwd = run.model.forward(&data, &run.eval_contexts, None)?;
    let kinds = run.model.experts.kinds();
    let names: Vec<String> = kinds.iter().map(|k| k.to_string()).collect();
    let buckets = bucket_by_homophily(&ds.graph, &ds.labels, &run.splits.test, 5)?;
    let low = low_pass_weight(&fwd.weights, &kinds);
    for b in &buckets.buckets {
        let mean = b.nodes.iter().map(|&i| low[i]).sum::<f64>() / b.nodes.len() as f64;
        println!("homophily [{:.2}, {:.2}] n={:<3} low-pass weight {mean:.3}", b.lower, b.upper, b.nodes.len());
    }
    println!();
    for row in expert_weight_profile(&buckets, &fwd.weights, &names)? {
        println!("bucket {} {:<18} {:.3}", row.bucket, row.expert, row.mean_weight.unwrap_or(f64::NAN));
    }
    Ok(())
}
