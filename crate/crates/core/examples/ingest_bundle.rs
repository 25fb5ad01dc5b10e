//! Round-trips a dataset through the on-disk bundle format, trains one
//! run, and reloads the saved model from its checkpoints.

use nodemoe::checkpoint::{load_moe, save_moe, Provenance};
use nodemoe::dataset::Dataset;
use nodemoe::moe::GraphInputs;
use nodemoe::synthetic::{sample_blend, BlendParams};
use nodemoe::trainer::{run_single, TrainConfig};

fn main() -> nodemoe::Result<()> {
    let dir = std::env::temp_dir().join("nodemoe-ingest-example");
    let original = sample_blend(&BlendParams { n: 300, ..Default::default() }, 2)?.dataset;
    let manifest = original.write_bundle(&dir, "synthetic blend, seed 2")?;
    println!("wrote {} ({:?}, {:?}, {:?})", dir.display(), manifest.edges, manifest.features, manifest.labels);

    let ds = Dataset::load_bundle(&dir)?;
    println!("{:?}", ds.summary());

    let mut cfg = TrainConfig::default();
    cfg.pretrain.epochs = 50;
    cfg.joint.epochs = 50;
    let data = GraphInputs::new(ds.graph.clone(), &ds.features)?;
    let run = run_single(&cfg, &data, &ds.labels, ds.num_classes, 0, 0)?;
    let ckpt = dir.join("model");
    let prov = Provenance {
        seed: run.record.run_seed,
        config_hash: cfg.hash(),
    };
    save_moe(&run.model, &cfg.gate_shape(ds.features.cols()), &ckpt, &prov)?;
    let reloaded = load_moe(&ckpt)?;
    let same = reloaded.predict(&data, &run.eval_contexts)? == run.model.predict(&data, &run.eval_contexts)?;
    println!("test accuracy {:.4}; reloaded model predicts identically: {same}", run.record.test_acc);
    Ok(())
}
