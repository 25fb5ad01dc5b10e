//! Sensitivity of accuracy to the random-walk length used by the pattern
//! extractor.

use nodemoe::analysis::sweep_walk_length;
use nodemoe::synthetic::{sample_blend, BlendParams};
use nodemoe::trainer::TrainConfig;

fn main() -> nodemoe::Result<()> {
    let ds = sample_blend(&BlendParams::default(), 0)?.dataset;
    let mut cfg = TrainConfig::default();
    cfg.experiment.splits = 2;
    cfg.experiment.seeds = 1;
    for row in sweep_walk_length(&cfg, &ds, &[5, 10, 20, 40])? {
        println!("walk length {:>2}: {:.2} ± {:.2} over {} runs", row.walk_length, 100.0 * row.mean, 100.0 * row.std, row.runs);
    }
    Ok(())
}
