use std::time::Instant;

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::sgd::{lr_at_epoch, Sgd, SgdConfig};
use crate::branch::{branch_loss, Branch, BranchConfig, LossWeights};
use crate::data::{top_k_accuracy, Dataset, MetricsReport, Modality};
use crate::error::{Error, Result};
use crate::fusion::{fusion_loss, BranchSignals, FusionConfig, FusionLayers, FusionModel, FusionOutput, Strategy};
use crate::nn::{zero_grad, Mode};
use crate::tensor::{Element, Rng, Scalar, Tensor};

/// Rows per forward pass when evaluating.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1_action: f64,
    pub val_top5_action: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_top1_action,val_top5_action,wall_seconds";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.6},{:.6},{:.3}",
            self.epoch, self.lr, self.train_loss, self.val_top1_action, self.val_top5_action, self.wall_seconds
        )
    }
}

pub fn log_csv(log: &[EpochRecord]) -> String {
    let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in log {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// FNV-1a over the bit patterns of a config record.
pub fn config_hash(record: &[f64]) -> u64 {
    record.iter().fold(0xcbf2_9ce4_8422_2325u64, |mut h, v| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    })
}

struct RunRngs {
    shuffle: Rng,
    dropout: Rng,
}

impl RunRngs {
    fn state(&self) -> Vec<u64> {
        self.shuffle.state().iter().chain(&self.dropout.state()).copied().collect()
    }
}

fn run_rngs(seed: u64) -> (Rng, RunRngs) {
    let mut master = Rng::new(seed);
    let init = master.fork();
    let shuffle = master.fork();
    let dropout = master.fork();
    (init, RunRngs { shuffle, dropout })
}

fn check_data(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    for m in Modality::ALL {
        if train.dim(m) != val.dim(m) {
            return Err(Error::Dataset(format!(
                "{m} feature width differs between train ({:?}) and val ({:?})",
                train.dim(m),
                val.dim(m)
            )));
        }
    }
    if train.snippets() != val.snippets() {
        return Err(Error::Dataset("train and val have different snippet counts".into()));
    }
    Ok(())
}

pub fn branch_checkpoint<T: Element>(branch: &Branch<T>, modality: Modality, epoch: usize, rng_state: &[u64]) -> Checkpoint {
    let mut ck = Checkpoint::from_module(branch);
    let record = branch.config().to_vec();
    ck.set_meta("kind", &[0.0]);
    ck.set_meta("modality", &[modality.code() as f64]);
    ck.set_meta("epoch", &[epoch as f64]);
    ck.set_meta_u64("config_hash", &[config_hash(&record)]);
    ck.set_meta_u64("rng_state", rng_state);
    ck.set_meta("branch_config", &record);
    ck
}

fn branch_at<T: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<Branch<T>> {
    let record = ck.meta(&format!("{prefix}branch_config"))?;
    let config = BranchConfig::from_slice(&record)?;
    let mut branch = Branch::new(config, &mut Rng::new(0))?;
    ck.load_module(&mut branch, prefix.trim_end_matches('.'))?;
    Ok(branch)
}

/// Rebuilds a branch from its stored configuration and tensors.
pub fn branch_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<Branch<T>> {
    if ck.meta("kind").ok().as_deref() != Some(&[0.0][..]) {
        return Err(Error::Checkpoint("not a branch checkpoint".into()));
    }
    branch_at(ck, "")
}

pub fn checkpoint_modality(ck: &Checkpoint) -> Result<Modality> {
    let code = ck.meta("modality")?;
    code.first()
        .and_then(|&c| Modality::from_code(c as u8))
        .ok_or_else(|| Error::Checkpoint("invalid modality record".into()))
}

/// Eval-mode logits of every sample, `[action, verb, noun]`.
pub fn predict_branch<T: Scalar>(branch: &Branch<T>, ds: &Dataset, m: Modality, snippets: usize) -> Result<[Tensor<T>; 3]> {
    let mut cols: [Vec<T>; 3] = Default::default();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let out = branch.infer(&ds.batch(m, chunk, snippets)?)?;
        for (col, t) in cols.iter_mut().zip([&out.action, &out.verb, &out.noun]) {
            col.extend_from_slice(t.data());
        }
    }
    let c = branch.config();
    let [a, v, n] = cols;
    Ok([
        Tensor::new(vec![ds.len(), c.num_actions], a)?,
        Tensor::new(vec![ds.len(), c.num_verbs], v)?,
        Tensor::new(vec![ds.len(), c.num_nouns], n)?,
    ])
}

pub fn evaluate_branch<T: Scalar>(branch: &Branch<T>, ds: &Dataset, m: Modality, snippets: usize) -> Result<MetricsReport> {
    let [a, v, n] = predict_branch(branch, ds, m, snippets)?;
    MetricsReport::compute([&a, &v, &n], &ds.all_labels())
}

#[derive(Debug, Clone)]
pub struct BranchRun<T: Scalar> {
    /// Parameters after the last epoch.
    pub model: Branch<T>,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Trains one uni-modal branch on the most recent `snippets` snippets.
pub fn train_branch<T: Element>(
    train: &Dataset,
    val: &Dataset,
    modality: Modality,
    config: BranchConfig,
    sgd: &SgdConfig,
    snippets: usize,
) -> Result<BranchRun<T>> {
    check_data(train, val)?;
    sgd.validate()?;
    config.validate()?;
    let d = train.dim(modality).expect("non-empty");
    if d != config.input_dim {
        return Err(Error::Dataset(format!(
            "{modality} features have width {d} but the branch expects {}",
            config.input_dim
        )));
    }
    let available = train.snippets().expect("non-empty");
    if snippets > available {
        return Err(Error::SequenceTooShort {
            got: available,
            required: snippets,
        });
    }
    config.block_lengths(snippets)?;

    let (mut init, mut rngs) = run_rngs(sgd.seed);
    let mut model = Branch::<T>::new(config, &mut init)?;
    let mut opt = Sgd::new(sgd.momentum, sgd.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_labels = val.all_labels();
    let mut log = Vec::with_capacity(sgd.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..sgd.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(sgd.lr0, epoch, sgd.epochs, sgd.power)?;
        order.shuffle(&mut rngs.shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(sgd.batch_size) {
            let x = train.batch::<T>(modality, chunk, snippets)?;
            zero_grad(&mut model);
            let out = model.forward(&x, Mode::Train, Some(&mut rngs.dropout))?;
            let (loss, grads) = branch_loss(&out.action, &out.verb, &out.noun, &train.labels(chunk), LossWeights::default())?;
            model.backward(&grads)?;
            opt.step(&mut model, lr)?;
            total += loss.to_f64() * chunk.len() as f64;
        }
        let [logits, ..] = predict_branch(&model, val, modality, snippets)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_top1_action: top_k_accuracy(&logits, &val_labels.action, 1)?,
            val_top5_action: top_k_accuracy(&logits, &val_labels.action, 5)?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{modality} epoch {epoch}: {}", record.csv_line());
        if best.as_ref().is_none_or(|(top1, ..)| record.val_top1_action > *top1) {
            best = Some((
                record.val_top1_action,
                epoch,
                branch_checkpoint(&model, modality, epoch, &rngs.state()),
            ));
        }
        log.push(record);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(BranchRun {
        last: branch_checkpoint(&model, modality, sgd.epochs - 1, &rngs.state()),
        model,
        best,
        best_epoch,
        log,
    })
}

/// Frozen-branch signals for every sample, computed once in eval mode.
pub fn compute_signals<T: Scalar>(branches: &[Branch<T>; 3], ds: &Dataset) -> Result<[BranchSignals<T>; 3]> {
    let n = ds.snippets().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(3);
    for (branch, m) in branches.iter().zip(Modality::ALL) {
        if ds.dim(m) != Some(branch.config().input_dim) {
            return Err(Error::Dataset(format!(
                "{m} features have width {:?} but the {m} branch expects {}",
                ds.dim(m),
                branch.config().input_dim
            )));
        }
        let mut parts = Vec::new();
        for chunk in idx.chunks(EVAL_BATCH) {
            parts.push(BranchSignals::from_branch(branch, &ds.batch(m, chunk, n)?)?);
        }
        out.push(concat_signals(&parts)?);
    }
    let [a, b, c]: [BranchSignals<T>; 3] = out.try_into().expect("three modalities");
    Ok([a, b, c])
}

fn concat_signals<T: Scalar>(parts: &[BranchSignals<T>]) -> Result<BranchSignals<T>> {
    let cat = |get: &dyn Fn(&BranchSignals<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        let w = get(&parts[0]).dim(1);
        let data: Vec<T> = parts.iter().flat_map(|p| get(p).data().iter().copied()).collect();
        Tensor::new(vec![data.len() / w, w], data)
    };
    Ok(BranchSignals {
        features: cat(&|p| &p.features)?,
        probs: [cat(&|p| &p.probs[0])?, cat(&|p| &p.probs[1])?, cat(&|p| &p.probs[2])?],
    })
}

fn select3<T: Scalar>(s: &[BranchSignals<T>; 3], idx: &[usize]) -> Result<[BranchSignals<T>; 3]> {
    Ok([s[0].select(idx)?, s[1].select(idx)?, s[2].select(idx)?])
}

/// Fused class probabilities for precomputed signals.
pub fn predict_signals<T: Scalar>(layers: &FusionLayers<T>, signals: &[BranchSignals<T>; 3]) -> Result<[Tensor<T>; 3]> {
    let b = signals[0].batch();
    let idx: Vec<usize> = (0..b).collect();
    let mut cols: [Vec<T>; 3] = Default::default();
    for chunk in idx.chunks(EVAL_BATCH) {
        let out: FusionOutput<T> = layers.infer(&select3(signals, chunk)?)?;
        for (col, t) in cols.iter_mut().zip(out.probabilities()?) {
            col.extend_from_slice(t.data());
        }
    }
    let c = layers.config();
    let [a, v, n] = cols;
    Ok([
        Tensor::new(vec![b, c.num_actions], a)?,
        Tensor::new(vec![b, c.num_verbs], v)?,
        Tensor::new(vec![b, c.num_nouns], n)?,
    ])
}

pub fn evaluate_fusion<T: Scalar>(model: &FusionModel<T>, ds: &Dataset) -> Result<MetricsReport> {
    let signals = compute_signals(model.branches(), ds)?;
    let [a, v, n] = predict_signals(&model.layers, &signals)?;
    MetricsReport::compute([&a, &v, &n], &ds.all_labels())
}

pub fn fusion_checkpoint<T: Element>(model: &FusionModel<T>, epoch: usize, rng_state: &[u64]) -> Checkpoint {
    let mut ck = Checkpoint::from_module(model);
    let record = model.layers.config().to_vec();
    ck.set_meta("kind", &[1.0]);
    ck.set_meta("epoch", &[epoch as f64]);
    ck.set_meta_u64("config_hash", &[config_hash(&record)]);
    ck.set_meta_u64("rng_state", rng_state);
    ck.set_meta_u64("branch_hash", &[model.branch_hash()]);
    ck.set_meta("fusion_config", &record);
    for (b, m) in model.branches().iter().zip(Modality::ALL) {
        ck.set_meta(&format!("{m}.branch_config"), &b.config().to_vec());
    }
    ck
}

pub fn fusion_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<FusionModel<T>> {
    if ck.meta("kind").ok().as_deref() != Some(&[1.0][..]) {
        return Err(Error::Checkpoint("not a fusion checkpoint".into()));
    }
    let branches = [
        branch_at(ck, "rgb.")?,
        branch_at(ck, "flow.")?,
        branch_at(ck, "obj.")?,
    ];
    let config = FusionConfig::from_slice(&ck.meta("fusion_config")?)?;
    let mut layers = FusionLayers::new(config, &mut Rng::new(0))?;
    ck.load_module(&mut layers, "fusion")?;
    Ok(FusionModel::from_parts(branches, layers))
}

#[derive(Debug, Clone)]
pub struct FusionRun<T: Scalar> {
    pub model: FusionModel<T>,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSettings {
    pub strategy: Strategy,
    pub embed_dim: usize,
    pub head_dropout: f64,
}

impl FusionSettings {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            embed_dim: 1024,
            head_dropout: 0.8,
        }
    }
}

/// Trains the fusion layers on top of three frozen branches.
///
/// Late fusion has no parameters; it is evaluated once and logged as a
/// single record.
pub fn train_fusion<T: Element>(
    branches: [Branch<T>; 3],
    train: &Dataset,
    val: &Dataset,
    settings: FusionSettings,
    sgd: &SgdConfig,
) -> Result<FusionRun<T>> {
    check_data(train, val)?;
    sgd.validate()?;
    let (mut init, mut rngs) = run_rngs(sgd.seed);
    let mut model = FusionModel::new(branches, settings.strategy, settings.embed_dim, settings.head_dropout, &mut init)?;
    let frozen = model.branch_hash();
    let train_sig = compute_signals(model.branches(), train)?;
    let val_sig = compute_signals(model.branches(), val)?;
    let val_labels = val.all_labels();
    let epochs = if settings.strategy.is_trainable() { sgd.epochs } else { 1 };
    let mut opt = Sgd::new(sgd.momentum, sgd.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..epochs {
        let start = Instant::now();
        let lr = if settings.strategy.is_trainable() {
            lr_at_epoch(sgd.lr0, epoch, sgd.epochs, sgd.power)?
        } else {
            0.0
        };
        order.shuffle(&mut rngs.shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(sgd.batch_size) {
            let sig = select3(&train_sig, chunk)?;
            let labels = train.labels(chunk);
            zero_grad(&mut model.layers);
            let out = model.layers.forward(&sig, Mode::Train, Some(&mut rngs.dropout))?;
            let (loss, grads) = fusion_loss(&out, &labels)?;
            if settings.strategy.is_trainable() {
                model.layers.backward(&grads)?;
                opt.step(&mut model.layers, lr)?;
            }
            total += loss.to_f64() * chunk.len() as f64;
        }
        let [probs, ..] = predict_signals(&model.layers, &val_sig)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_top1_action: top_k_accuracy(&probs, &val_labels.action, 1)?,
            val_top5_action: top_k_accuracy(&probs, &val_labels.action, 5)?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{} epoch {epoch}: {}", settings.strategy, record.csv_line());
        if best.as_ref().is_none_or(|(top1, ..)| record.val_top1_action > *top1) {
            best = Some((record.val_top1_action, epoch, fusion_checkpoint(&model, epoch, &rngs.state())));
        }
        log.push(record);
    }
    if model.branch_hash() != frozen {
        return Err(Error::InvalidArgument("fusion training modified a frozen branch".into()));
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(FusionRun {
        last: fusion_checkpoint(&model, epochs - 1, &rngs.state()),
        model,
        best,
        best_epoch,
        log,
    })
}
