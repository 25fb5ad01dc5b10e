//! Ablation arms on the blended graph: gate components, uniform weights,
//! residual experts, and few- vs full-sample pretraining.
//!
//!     cargo run --release --example ablation -- average_weights full_sample_pretrain

use nodemoe::analysis::{run_ablation, Ablation};
use nodemoe::synthetic::{sample_blend, BlendParams};
use nodemoe::trainer::TrainConfig;

fn main() -> nodemoe::Result<()> {
    let arms: Vec<Ablation> = match std::env::args().skip(1).map(|a| a.parse()).collect::<nodemoe::Result<Vec<_>>>()? {
        a if a.is_empty() => Ablation::ALL.to_vec(),
        a => a,
    };
    let ds = sample_blend(&BlendParams::default(), 0)?.dataset;
    let mut cfg = TrainConfig::default();
    cfg.experiment.splits = 3;
    cfg.experiment.seeds = 1;
    for arm in arms {
        let r = run_ablation(arm, &cfg, &ds)?;
        println!(
            "{arm:<22} full {:.2} ± {:.2}   ablated {:.2} ± {:.2}",
            100.0 * r.full.mean,
            100.0 * r.full.std,
            100.0 * r.ablated.mean,
            100.0 * r.ablated.std
        );
    }
    Ok(())
}
