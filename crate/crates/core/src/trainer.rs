//! Splits, configuration, the two training stages, and the
//! splits × seeds experiment driver.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{save_moe, GateShape, Provenance};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::experts::{Expert, ExpertEnsemble, ExpertKind, ExpertSpec};
use crate::gate::{GateMode, GatingNetwork};
use crate::moe::{expert_dropout_rng, moe_loss, GraphInputs, MoeModel, MoeRngs};
use crate::nn::{softmax_cross_entropy_rows, AdamW, AdamWConfig, Gradients, Trainable};
use crate::pattern::{sample_contexts, EdgeDiscriminator, WalkConfig, WalkContext};
use crate::rng::{derive_seed, rng_for, stream, Rng};

// ---------------------------------------------------------------- splits

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub split_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 60/20/20 partition: `floor(0.6 n)` train, `floor(0.2 n)`
/// validation, the remainder test.
pub fn make_splits(num_nodes: usize, spec: SplitSpec) -> Result<Splits> {
    if num_nodes < 5 {
        return Err(Error::InvalidParameter(format!(
            "need at least 5 nodes to split, got {num_nodes}"
        )));
    }
    let mut perm: Vec<usize> = (0..num_nodes).collect();
    perm.shuffle(&mut rng_for(derive_seed(spec.seed, stream::SPLIT), spec.split_index as u64));
    let n_train = num_nodes * 6 / 10;
    let n_val = num_nodes * 2 / 10;
    let mut train = perm[..n_train].to_vec();
    let mut val = perm[n_train..n_train + n_val].to_vec();
    let mut test = perm[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

/// Fraction of `rows` whose prediction matches the label.
pub fn accuracy(predictions: &[usize], labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().filter(|&&r| predictions[r] == labels[r]).count() as f64 / rows.len() as f64
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Few-sample expert pretraining, then joint training from those weights.
    #[default]
    PretrainThenJoint,
    /// Everything from scratch in one stage.
    EndToEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Share of the training split each expert sees.
    pub fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 5e-5,
            epochs: 300,
            fraction: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub gating_lr: f64,
    pub gating_weight_decay: f64,
    pub expert_lr: f64,
    pub expert_weight_decay: f64,
    pub epochs: usize,
    pub freeze_experts: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            gating_lr: 0.001,
            gating_weight_decay: 5e-5,
            expert_lr: 0.001,
            expert_weight_decay: 5e-5,
            epochs: 300,
            freeze_experts: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub discriminator_hidden: usize,
    pub dropout: f64,
    pub mode: GateMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            embed_dim: 32,
            discriminator_hidden: 32,
            dropout: 0.2,
            mode: GateMode::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub splits: usize,
    pub seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { splits: 10, seeds: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: TrainingMode,
    /// Early-stopping patience in epochs, on validation accuracy.
    pub patience: usize,
    pub experts: Vec<ExpertSpec>,
    pub pretrain: PretrainConfig,
    pub joint: JointConfig,
    pub gate: GateConfig,
    pub walk: WalkConfig,
    pub experiment: ExperimentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: TrainingMode::default(),
            patience: 100,
            experts: ExpertKind::ALL.iter().map(|&k| ExpertSpec::new(k, 2, 64, 0.5)).collect(),
            pretrain: PretrainConfig::default(),
            joint: JointConfig::default(),
            gate: GateConfig::default(),
            walk: WalkConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

const HIDDEN: [usize; 4] = [32, 64, 128, 256];
const PRETRAIN_LR: [f64; 2] = [0.0005, 0.001];
const PRETRAIN_WD: [f64; 3] = [1e-5, 5e-5, 1e-4];
const GATING_LR: [f64; 2] = [0.0005, 0.001];
const GATING_WD: [f64; 3] = [1e-5, 5e-5, 1e-4];
const JOINT_EXPERT_LR: [f64; 4] = [0.001, 0.01, 0.1, 0.5];
const JOINT_EXPERT_WD: [f64; 4] = [0.0, 5e-5, 5e-3, 5e-2];
const WALK_LENGTHS: [usize; 4] = [5, 10, 20, 40];

fn one_of(name: &str, value: f64, allowed: &[f64]) -> Result<()> {
    if allowed.iter().any(|a| (a - value).abs() <= 1e-12 * a.abs().max(1e-12)) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {value} not in {allowed:?}")))
    }
}

fn one_of_usize(name: &str, value: usize, allowed: &[usize]) -> Result<()> {
    if allowed.contains(&value) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {value} not in {allowed:?}")))
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies `section.key=value` overrides; values parse as TOML, falling
    /// back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {item:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::InvalidConfig(format!("override {key:?}: {part:?} is not a section")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*part) {
                        return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
                    }
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .get_mut(*part)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown config section in {key:?}")))?;
            }
        }
        let cfg: Self = root.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every enumerated hyperparameter against the tuned search space.
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::InvalidConfig("at least one expert is required".into()));
        }
        for spec in &self.experts {
            spec.validate()?;
        }
        let p = &self.pretrain;
        one_of("pretrain.lr", p.lr, &PRETRAIN_LR)?;
        one_of("pretrain.weight_decay", p.weight_decay, &PRETRAIN_WD)?;
        if !(p.fraction > 0.0 && p.fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("pretrain.fraction = {} outside (0, 1]", p.fraction)));
        }
        let j = &self.joint;
        one_of("joint.gating_lr", j.gating_lr, &GATING_LR)?;
        one_of("joint.gating_weight_decay", j.gating_weight_decay, &GATING_WD)?;
        one_of("joint.expert_lr", j.expert_lr, &JOINT_EXPERT_LR)?;
        one_of("joint.expert_weight_decay", j.expert_weight_decay, &JOINT_EXPERT_WD)?;
        let g = &self.gate;
        if !(1..=4).contains(&g.layers) {
            return Err(Error::InvalidConfig(format!("gate.layers = {} not in {{1, 2, 3, 4}}", g.layers)));
        }
        one_of_usize("gate.hidden", g.hidden, &HIDDEN)?;
        one_of_usize("gate.embed_dim", g.embed_dim, &HIDDEN)?;
        one_of_usize("gate.discriminator_hidden", g.discriminator_hidden, &HIDDEN)?;
        if !(0.0..=0.9).contains(&g.dropout) {
            return Err(Error::InvalidConfig(format!("gate.dropout = {} outside [0, 0.9]", g.dropout)));
        }
        one_of_usize("walk.walk_length", self.walk.walk_length, &WALK_LENGTHS)?;
        if self.walk.num_walks == 0 {
            return Err(Error::InvalidConfig("walk.num_walks must be positive".into()));
        }
        if self.patience == 0 || p.epochs == 0 || j.epochs == 0 {
            return Err(Error::InvalidConfig("patience and epoch counts must be positive".into()));
        }
        if self.experiment.splits == 0 || self.experiment.seeds == 0 {
            return Err(Error::InvalidConfig("experiment needs at least one split and one seed".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn gate_shape(&self, feature_dim: usize) -> GateShape {
        GateShape {
            num_experts: self.experts.len(),
            embed_dim: self.gate.embed_dim,
            hidden: self.gate.hidden,
            layers: self.gate.layers,
            dropout: self.gate.dropout,
            mode: self.gate.mode,
            feature_dim,
            discriminator_hidden: self.gate.discriminator_hidden,
        }
    }
}

// ---------------------------------------------------------------- training

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` for the evaluation before the first update.
    pub train_loss: Option<f64>,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainHistory {
    pub fn max_recorded_val_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_acc).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Shared early-stopping bookkeeping: tracks the best validation accuracy
/// (strict improvement only) and a snapshot of the model that achieved it.
struct EarlyStopping<M> {
    history: TrainHistory,
    best: M,
    patience: usize,
}

impl<M: Clone> EarlyStopping<M> {
    fn new(model: &M, val_acc: f64, patience: usize) -> Self {
        Self {
            history: TrainHistory {
                epochs: vec![EpochRecord {
                    epoch: 0,
                    train_loss: None,
                    val_acc,
                }],
                best_epoch: 0,
                best_val_acc: val_acc,
            },
            best: model.clone(),
            patience,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    fn record(&mut self, epoch: usize, loss: f64, val_acc: f64, model: &M) -> bool {
        self.history.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(loss),
            val_acc,
        });
        if val_acc > self.history.best_val_acc {
            self.history.best_val_acc = val_acc;
            self.history.best_epoch = epoch;
            self.best = model.clone();
        }
        epoch - self.history.best_epoch >= self.patience
    }

    fn finish(self, model: &mut M) -> TrainHistory {
        *model = self.best;
        self.history
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
}

fn expert_val_acc(expert: &Expert, data: &GraphInputs, labels: &[usize], rows: &[usize]) -> Result<f64> {
    let logits = expert.forward_eval(data.ops(), data.features())?;
    Ok(accuracy(&logits.argmax_rows(), labels, rows))
}

/// Trains one expert with cross-entropy on `train_rows`, restoring the
/// best-validation weights at the end.
pub fn train_expert(
    expert: &mut Expert,
    data: &GraphInputs,
    labels: &[usize],
    train_rows: &[usize],
    val_rows: &[usize],
    settings: OptimSettings,
    dropout_rng: &mut Rng,
) -> Result<TrainHistory> {
    let mut opt = AdamW::new(AdamWConfig::new(settings.lr, settings.weight_decay));
    let names = expert.param_names();
    let mut stop = EarlyStopping::new(&*expert, expert_val_acc(expert, data, labels, val_rows)?, settings.patience);
    for epoch in 1..=settings.epochs {
        let (logits, cache) = expert.forward(data.ops(), data.features(), Some(dropout_rng))?;
        let (loss, grad) = softmax_cross_entropy_rows(&logits, labels, train_rows)?;
        let grads = expert.backward(data.ops(), data.features(), &cache, &grad)?;
        opt.step(expert.params_mut(), &grads, &names)?;
        if !expert.all_finite() {
            return Err(Error::NonFinite(format!("{} parameters after epoch {epoch}", expert.kind())));
        }
        let val = expert_val_acc(expert, data, labels, val_rows)?;
        if stop.record(epoch, loss, val, expert) {
            break;
        }
    }
    Ok(stop.finish(expert))
}

/// Seeded subsample of the training rows used for expert pretraining.
pub fn pretrain_subsample(train: &[usize], fraction: f64, num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    let k = ((train.len() as f64) * fraction).ceil() as usize;
    if k < num_classes {
        return Err(Error::InvalidParameter(format!(
            "pretraining subsample of {k} nodes is smaller than the class count {num_classes}"
        )));
    }
    let mut rows = train.to_vec();
    rows.shuffle(&mut rng_for(seed, stream::SUBSAMPLE));
    rows.truncate(k);
    rows.sort_unstable();
    Ok(rows)
}

pub fn init_experts(specs: &[ExpertSpec], input_dim: usize, num_classes: usize, seed: u64) -> Result<Vec<Expert>> {
    specs
        .iter()
        .enumerate()
        .map(|(j, &spec)| Expert::new(spec, input_dim, num_classes, &mut rng_for(seed, stream::INIT_EXPERT + j as u64)))
        .collect()
}

/// Few-sample pretraining of every configured expert, independently and
/// in parallel.
pub fn pretrain_experts(
    config: &TrainConfig,
    data: &GraphInputs,
    labels: &[usize],
    num_classes: usize,
    splits: &Splits,
    seed: u64,
) -> Result<(ExpertEnsemble, Vec<TrainHistory>)> {
    let rows = pretrain_subsample(&splits.train, config.pretrain.fraction, num_classes, seed)?;
    let settings = OptimSettings {
        lr: config.pretrain.lr,
        weight_decay: config.pretrain.weight_decay,
        epochs: config.pretrain.epochs,
        patience: config.patience,
    };
    let experts = init_experts(&config.experts, data.features().cols(), num_classes, seed)?;
    let trained: Vec<(Expert, TrainHistory)> = experts
        .into_par_iter()
        .enumerate()
        .map(|(j, mut e)| {
            let h = train_expert(&mut e, data, labels, &rows, &splits.val, settings, &mut expert_dropout_rng(seed, j))?;
            Ok((e, h))
        })
        .collect::<Result<_>>()?;
    let (experts, histories): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((ExpertEnsemble::new(experts)?, histories))
}

/// Wraps an ensemble with a freshly initialised discriminator and gate.
pub fn build_model(config: &TrainConfig, experts: ExpertEnsemble, seed: u64) -> Result<MoeModel> {
    if experts.len() != config.experts.len() {
        return Err(Error::DimensionMismatch {
            context: "pretrained experts vs configured experts",
            expected: config.experts.len(),
            actual: experts.len(),
        });
    }
    for (e, spec) in experts.experts().iter().zip(&config.experts) {
        if e.spec() != spec {
            return Err(Error::InvalidConfig(format!(
                "pretrained expert {} does not match configured spec {spec:?}",
                e.kind()
            )));
        }
    }
    let g = &config.gate;
    let disc = EdgeDiscriminator::new(
        experts.input_dim(),
        g.discriminator_hidden,
        &mut rng_for(seed, stream::INIT_DISCRIMINATOR),
    )?;
    let gate = GatingNetwork::new(
        experts.len(),
        g.embed_dim,
        g.hidden,
        g.layers,
        g.dropout,
        g.mode,
        &mut rng_for(seed, stream::INIT_GATE),
    )?;
    MoeModel::new(experts, disc, gate)
}

/// Contexts used for every evaluation within a run.
pub fn eval_contexts(data: &GraphInputs, walk: WalkConfig, seed: u64) -> Vec<WalkContext> {
    sample_contexts(data.graph(), walk, derive_seed(seed, stream::EVAL_WALKS))
}

/// Evaluation contexts appropriate for `model` (none needed by a uniform gate).
pub fn model_eval_contexts(model: &MoeModel, data: &GraphInputs, walk: WalkConfig, seed: u64) -> Vec<WalkContext> {
    if model.gate.mode() == GateMode::Uniform {
        empty_contexts(data.num_nodes())
    } else {
        eval_contexts(data, walk, seed)
    }
}

fn epoch_contexts(data: &GraphInputs, walk: WalkConfig, seed: u64, epoch: usize) -> Vec<WalkContext> {
    sample_contexts(data.graph(), walk, derive_seed(derive_seed(seed, stream::WALKS), epoch as u64))
}

/// Placeholder contexts for the uniform gate, which never reads them.
fn empty_contexts(n: usize) -> Vec<WalkContext> {
    (0..n).map(|i| WalkContext { target: i, context: Vec::new() }).collect()
}

/// End-to-end optimisation of gate, discriminator and (unless frozen)
/// experts. Walk contexts are resampled every epoch; validation uses a
/// fixed context set. Restores the best-validation model.
pub fn joint_train(
    config: &TrainConfig,
    model: &mut MoeModel,
    data: &GraphInputs,
    labels: &[usize],
    splits: &Splits,
    seed: u64,
) -> Result<TrainHistory> {
    let j = &config.joint;
    let uniform = model.gate.mode() == GateMode::Uniform;
    let eval_ctx = model_eval_contexts(model, data, config.walk, seed);
    let mut rngs = MoeRngs::new(seed, model.experts.len());
    let mut expert_opt = AdamW::new(AdamWConfig::new(j.expert_lr, j.expert_weight_decay));
    let mut gate_opt = AdamW::new(AdamWConfig::new(j.gating_lr, j.gating_weight_decay));
    let expert_names: Vec<String> = model.experts.experts().iter().flat_map(|e| e.param_names()).collect();
    let mut gate_names = model.discriminator.param_names();
    gate_names.extend(model.gate.param_names());

    let val0 = accuracy(&model.predict(data, &eval_ctx)?, labels, &splits.val);
    let mut stop = EarlyStopping::new(&*model, val0, config.patience);
    for epoch in 1..=j.epochs {
        let ctx = if uniform {
            empty_contexts(data.num_nodes())
        } else {
            epoch_contexts(data, config.walk, seed, epoch)
        };
        let fwd = model.forward(data, &ctx, Some(&mut rngs))?;
        let loss = moe_loss(&fwd.expert_logits, &fwd.weights, labels, &splits.train)?;
        let grads = model.backward(data, &fwd, &loss)?;
        if !j.freeze_experts {
            let mut flat = Gradients(Vec::new());
            for g in grads.experts {
                flat.extend(g);
            }
            let params: Vec<&mut [f64]> = model.experts.experts_mut().iter_mut().flat_map(|e| e.params_mut()).collect();
            expert_opt.step(params, &flat, &expert_names)?;
        }
        if !uniform {
            let mut flat = grads.discriminator;
            flat.extend(grads.gate);
            let mut params = model.discriminator.params_mut();
            params.extend(model.gate.params_mut());
            gate_opt.step(params, &flat, &gate_names)?;
        }
        if !model.all_finite() {
            return Err(Error::NonFinite(format!("model parameters after joint epoch {epoch}")));
        }
        let val = accuracy(&model.predict(data, &eval_ctx)?, labels, &splits.val);
        if stop.record(epoch, loss.loss, val, model) {
            break;
        }
    }
    Ok(stop.finish(model))
}

// ---------------------------------------------------------------- experiments

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub split: usize,
    pub seed_index: usize,
    pub run_seed: u64,
    pub test_acc: f64,
    pub val_acc: f64,
    pub best_epoch: usize,
    /// Per-expert accuracy of the final model's own expert logits.
    pub expert_test_acc: Vec<f64>,
    pub expert_val_acc: Vec<f64>,
    /// Per-expert validation accuracy right after pretraining.
    pub pretrained_val_acc: Option<Vec<f64>>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a finished run produced; analyses consume this.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: MoeModel,
    pub splits: Splits,
    pub eval_contexts: Vec<WalkContext>,
    pub record: RunRecord,
    pub pretrain_histories: Vec<TrainHistory>,
    pub joint_history: TrainHistory,
}

pub fn run_seed(master: u64, split: usize, seed_index: usize) -> u64 {
    derive_seed(derive_seed(master, stream::RUN + split as u64), seed_index as u64)
}

/// One (split, seed) run of the configured protocol.
pub fn run_single(config: &TrainConfig, data: &GraphInputs, labels: &[usize], num_classes: usize, split: usize, seed_index: usize) -> Result<TrainedRun> {
    config.validate()?;
    let splits = make_splits(
        data.num_nodes(),
        SplitSpec {
            seed: config.seed,
            split_index: split,
        },
    )?;
    let seed = run_seed(config.seed, split, seed_index);
    let (ensemble, pretrain_histories, pretrained_val_acc) = match config.mode {
        TrainingMode::PretrainThenJoint => {
            let (ens, hist) = pretrain_experts(config, data, labels, num_classes, &splits, seed)?;
            let accs = hist.iter().map(|h| h.best_val_acc).collect();
            (ens, hist, Some(accs))
        }
        TrainingMode::EndToEnd => (
            ExpertEnsemble::new(init_experts(&config.experts, data.features().cols(), num_classes, seed)?)?,
            Vec::new(),
            None,
        ),
    };
    let mut model = build_model(config, ensemble, seed)?;
    let joint_history = joint_train(config, &mut model, data, labels, &splits, seed)?;
    let eval_ctx = model_eval_contexts(&model, data, config.walk, seed);
    let fwd = model.forward(data, &eval_ctx, None)?;
    let preds = fwd.predictions();
    let per_expert = |rows: &[usize]| -> Vec<f64> {
        fwd.expert_logits
            .iter()
            .map(|l| accuracy(&l.argmax_rows(), labels, rows))
            .collect()
    };
    let record = RunRecord {
        split,
        seed_index,
        run_seed: seed,
        test_acc: accuracy(&preds, labels, &splits.test),
        val_acc: accuracy(&preds, labels, &splits.val),
        best_epoch: joint_history.best_epoch,
        expert_test_acc: per_expert(&splits.test),
        expert_val_acc: per_expert(&splits.val),
        pretrained_val_acc,
        checkpoint: None,
    };
    Ok(TrainedRun {
        model,
        splits,
        eval_contexts: eval_ctx,
        record,
        pretrain_histories,
        joint_history,
    })
}

/// Result of training one configured expert alone on a full training split.
#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub expert: Expert,
    pub history: TrainHistory,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Trains expert `j` of the configuration on its own, with the same split
/// and run seed as [`run_single`] and the pretraining optimiser settings.
pub fn run_baseline(
    config: &TrainConfig,
    data: &GraphInputs,
    labels: &[usize],
    num_classes: usize,
    split: usize,
    seed_index: usize,
    j: usize,
) -> Result<BaselineRun> {
    let splits = make_splits(
        data.num_nodes(),
        SplitSpec {
            seed: config.seed,
            split_index: split,
        },
    )?;
    let seed = run_seed(config.seed, split, seed_index);
    let spec = *config
        .experts
        .get(j)
        .ok_or_else(|| Error::InvalidParameter(format!("no expert {j} in config")))?;
    let mut expert = Expert::new(spec, data.features().cols(), num_classes, &mut rng_for(seed, stream::INIT_EXPERT + j as u64))?;
    let settings = OptimSettings {
        lr: config.pretrain.lr,
        weight_decay: config.pretrain.weight_decay,
        epochs: config.pretrain.epochs,
        patience: config.patience,
    };
    let history = train_expert(&mut expert, data, labels, &splits.train, &splits.val, settings, &mut expert_dropout_rng(seed, j))?;
    let preds = expert.forward_eval(data.ops(), data.features())?.argmax_rows();
    Ok(BaselineRun {
        val_acc: accuracy(&preds, labels, &splits.val),
        test_acc: accuracy(&preds, labels, &splits.test),
        expert,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub dataset: String,
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    /// Mean test accuracy over runs.
    pub mean: f64,
    /// Population standard deviation of test accuracy over runs.
    pub std: f64,
}

/// `(mean, population std)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RunResult {
    pub fn from_runs(dataset: impl Into<String>, config_hash: impl Into<String>, runs: Vec<RunRecord>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let (mean, std) = mean_std(&accs);
        Self {
            dataset: dataset.into(),
            config_hash: config_hash.into(),
            runs,
            mean,
            std,
        }
    }

    /// Mean and std recomputed from the stored runs.
    pub fn recompute(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.test_acc).collect::<Vec<_>>())
    }

    /// Mean test accuracy of expert `j` across runs.
    pub fn expert_mean(&self, j: usize) -> f64 {
        mean_std(&self.runs.iter().map(|r| r.expert_test_acc[j]).collect::<Vec<_>>()).0
    }
}

/// File written next to each saved run's checkpoints.
pub const RUN_RECORD: &str = "run.json";

/// Runs `experiment.splits × experiment.seeds` independent runs in
/// parallel. With `checkpoint_dir`, each run's model and [`RunRecord`]
/// are saved under `split{s}_seed{k}/`.
pub fn run_experiment(config: &TrainConfig, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<RunResult> {
    config.validate()?;
    let data = GraphInputs::new(dataset.graph.clone(), &dataset.features)?;
    let hash = config.hash();
    let jobs: Vec<(usize, usize)> = (0..config.experiment.splits)
        .flat_map(|s| (0..config.experiment.seeds).map(move |k| (s, k)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(split, k)| {
            let wrap = |e: Error| Error::RunFailed {
                split,
                seed: k as u64,
                source: Box::new(e),
            };
            let run = run_single(config, &data, &dataset.labels, dataset.num_classes, split, k).map_err(wrap)?;
            let mut record = run.record;
            if let Some(dir) = checkpoint_dir {
                let sub = dir.join(format!("split{split}_seed{k}"));
                let prov = Provenance {
                    seed: record.run_seed,
                    config_hash: hash.clone(),
                };
                save_moe(&run.model, &config.gate_shape(dataset.features.cols()), &sub, &prov).map_err(wrap)?;
                record.checkpoint = Some(sub.clone());
                let json = serde_json::to_vec_pretty(&record).map_err(|e| wrap(e.into()))?;
                std::fs::write(sub.join(RUN_RECORD), json).map_err(|e| wrap(e.into()))?;
            }
            log::info!("{} split {split} seed {k}: test {:.4}", dataset.name, record.test_acc);
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunResult::from_runs(dataset.name.clone(), hash, runs))
}

/// A run saved by [`run_experiment`], reloaded for evaluation.
#[derive(Clone, Debug)]
pub struct SavedRun {
    pub model: MoeModel,
    pub record: RunRecord,
    pub splits: Splits,
}

pub fn load_run(dir: &Path, config: &TrainConfig, num_nodes: usize) -> Result<SavedRun> {
    let record: RunRecord = serde_json::from_slice(&std::fs::read(dir.join(RUN_RECORD))?)?;
    let model = crate::checkpoint::load_moe(dir)?;
    let splits = make_splits(
        num_nodes,
        SplitSpec {
            seed: config.seed,
            split_index: record.split,
        },
    )?;
    Ok(SavedRun { model, record, splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_floor_rule() {
        let s = make_splits(10, SplitSpec { seed: 0, split_index: 0 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s = make_splits(7, SplitSpec { seed: 0, split_index: 3 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 1, 2));
        assert!(make_splits(4, SplitSpec { seed: 0, split_index: 0 }).is_err());
    }

    #[test]
    fn splits_partition_and_repeat() {
        let spec = SplitSpec { seed: 5, split_index: 2 };
        let a = make_splits(103, spec).unwrap();
        assert_eq!(a, make_splits(103, spec).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_ne!(a, make_splits(103, SplitSpec { seed: 5, split_index: 3 }).unwrap());
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn out_of_space_values_are_rejected() {
        for bad in [
            "[pretrain]\nlr = 0.01",
            "[joint]\nexpert_weight_decay = 0.1",
            "[gate]\nlayers = 5",
            "[gate]\nhidden = 48",
            "[walk]\nwalk_length = 7",
            "[pretrain]\nfraction = 0.0",
            "[pretrain]\nfraction = 1.5",
            "unknown = 1",
            "[[experts]]\nkind = \"gcn\"\nlayers = 6\nhidden = 64\ndropout = 0.5",
        ] {
            assert!(TrainConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = TrainConfig::default()
            .with_overrides(&["joint.expert_lr=0.1", "gate.mode=no_global", "walk.walk_length=20", "seed=4"])
            .unwrap();
        assert_eq!(cfg.joint.expert_lr, 0.1);
        assert_eq!(cfg.gate.mode, GateMode::NoGlobal);
        assert_eq!(cfg.walk.walk_length, 20);
        assert_eq!(cfg.seed, 4);
        assert!(TrainConfig::default().with_overrides(&["joint.expert_lr=0.2"]).is_err());
        assert!(TrainConfig::default().with_overrides(&["joint.nope=1"]).is_err());
        assert!(TrainConfig::default().with_overrides(&["nonsense"]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.patience = 50;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn subsample_is_seeded_and_checked() {
        let train: Vec<usize> = (0..20).collect();
        let a = pretrain_subsample(&train, 0.5, 3, 1).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, pretrain_subsample(&train, 0.5, 3, 1).unwrap());
        assert_eq!(pretrain_subsample(&train, 1.0, 3, 9).unwrap(), train);
        assert!(pretrain_subsample(&train, 0.1, 3, 1).is_err());
    }

    #[test]
    fn mean_std_bookkeeping() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - (0.08f64 / 3.0).sqrt()).abs() < 1e-15);
        let (m2, s2) = mean_std(&[0.9, 0.5, 0.7]);
        assert!((m - m2).abs() < 1e-15 && (s - s2).abs() < 1e-15);
    }

    fn tiny_problem() -> (GraphInputs, Vec<usize>, usize) {
        let params = crate::csbm::CsbmParams::new(60, 0.15, 0.03, vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0], 0.8);
        let s = crate::csbm::sample_csbm(&params, 3).unwrap();
        (GraphInputs::new(s.graph, &s.features).unwrap(), s.labels, 2)
    }

    fn quick_config(kinds: &[ExpertKind]) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.experts = kinds.iter().map(|&k| ExpertSpec::new(k, 2, 32, 0.3)).collect();
        cfg.pretrain.epochs = 15;
        cfg.joint.epochs = 15;
        cfg.patience = 100;
        cfg
    }

    #[test]
    fn single_expert_uniform_gate_matches_standalone_training() {
        let (data, labels, c) = tiny_problem();
        let mut cfg = quick_config(&[ExpertKind::Gcn]);
        cfg.gate.mode = GateMode::Uniform;
        cfg.joint.expert_lr = 0.001;
        cfg.joint.expert_weight_decay = 5e-5;
        let splits = make_splits(60, SplitSpec { seed: 1, split_index: 0 }).unwrap();
        let seed = 77;

        let mut alone = init_experts(&cfg.experts, 3, c, seed).unwrap().remove(0);
        let settings = OptimSettings {
            lr: 0.001,
            weight_decay: 5e-5,
            epochs: 15,
            patience: 100,
        };
        let h1 = train_expert(&mut alone, &data, &labels, &splits.train, &splits.val, settings, &mut expert_dropout_rng(seed, 0)).unwrap();

        let ens = ExpertEnsemble::new(init_experts(&cfg.experts, 3, c, seed).unwrap()).unwrap();
        let mut model = build_model(&cfg, ens, seed).unwrap();
        let h2 = joint_train(&cfg, &mut model, &data, &labels, &splits, seed).unwrap();

        assert_eq!(h1, h2);
        assert_eq!(alone.params(), model.experts.experts()[0].params());
    }

    #[test]
    fn early_stopping_restores_best_validation_model() {
        let (data, labels, c) = tiny_problem();
        let cfg = quick_config(&[ExpertKind::Mlp, ExpertKind::Gcn]);
        let splits = make_splits(60, SplitSpec { seed: 2, split_index: 0 }).unwrap();
        let ens = ExpertEnsemble::new(init_experts(&cfg.experts, 3, c, 5).unwrap()).unwrap();
        let mut model = build_model(&cfg, ens, 5).unwrap();
        let h = joint_train(&cfg, &mut model, &data, &labels, &splits, 5).unwrap();
        assert_eq!(h.best_val_acc, h.max_recorded_val_acc());
        let ctx = eval_contexts(&data, cfg.walk, 5);
        let val = accuracy(&model.predict(&data, &ctx).unwrap(), &labels, &splits.val);
        assert_eq!(val, h.best_val_acc);
    }

    #[test]
    fn run_single_is_deterministic() {
        let (data, labels, c) = tiny_problem();
        let cfg = quick_config(&[ExpertKind::Gcn, ExpertKind::HighpassResidual]);
        let a = run_single(&cfg, &data, &labels, c, 1, 0).unwrap();
        let b = run_single(&cfg, &data, &labels, c, 1, 0).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.pretrain_histories.len(), 2);
        let pre = a.record.pretrained_val_acc.as_ref().unwrap();
        assert_eq!(pre.len(), 2);
    }

    #[test]
    fn accuracy_counts_rows() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0], &[0, 1, 2]), 2.0 / 3.0);
        assert!(accuracy(&[0], &[0], &[]).is_nan());
    }
}
