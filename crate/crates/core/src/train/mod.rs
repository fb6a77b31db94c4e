//! Training runs over the two-digit dataset: configuration, the experiment
//! CNN, the mini-batch loop with per-step cosine instrumentation, epoch
//! evaluation, and metric export.
//!
//! Every random decision is drawn from a stream derived from the run seed
//! and a purpose tag, so runs are bit-reproducible and an interrupted run
//! resumed from an epoch checkpoint replays the exact uninterrupted
//! trajectory.

pub mod checkpoint;
pub mod optim;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{batch_tensor, Dataset, PackedSample, CANVAS_SIZE};
use crate::error::{Error, Result};
use crate::instrument::CosineRecorder;
use crate::multitask::{
    cosine, effective_alpha, joint_loss, normalized_penalty, task_gradients, AlphaSchedule,
    Batch, CosRegConfig, Labels, MultiTaskModel, TaskSpec,
};
use crate::nn::{build_stack, BufferStore, LayerConfig, ParamGroup, ParamStore};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint};
use crate::train::optim::{Optimizer, OptimizerKind};

/// Each digit task distinguishes the five digits of its parity.
pub const NUM_CLASSES: usize = 5;
const KERNEL: usize = 3;
const STRIDE: usize = 2;

const TAG_INIT: u64 = b'i' as u64;
const TAG_SHUFFLE: u64 = b'e' as u64;
const TAG_STEP: u64 = b'd' as u64;
const TAG_EVAL: u64 = b'v' as u64;

/// Which regularization recipe a run applies. Exactly one is active per
/// run; the cosine-penalty variants differ only in loss, the others only
/// in architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    None,
    Dropout,
    Batchnorm,
    CosReg,
    CosRegBatchnorm,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::None,
        Baseline::Dropout,
        Baseline::Batchnorm,
        Baseline::CosReg,
        Baseline::CosRegBatchnorm,
    ];

    pub fn uses_dropout(self) -> bool {
        self == Baseline::Dropout
    }

    pub fn uses_batchnorm(self) -> bool {
        matches!(self, Baseline::Batchnorm | Baseline::CosRegBatchnorm)
    }

    pub fn uses_cosreg(self) -> bool {
        matches!(self, Baseline::CosReg | Baseline::CosRegBatchnorm)
    }

    /// Preset penalty weight: 10 for the plain penalty run, 0.1 when
    /// combined with batchnorm, 0 otherwise.
    pub fn default_alpha(self) -> f64 {
        match self {
            Baseline::CosReg => 10.0,
            Baseline::CosRegBatchnorm => 0.1,
            _ => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::None => "none",
            Baseline::Dropout => "dropout",
            Baseline::Batchnorm => "batchnorm",
            Baseline::CosReg => "cosreg",
            Baseline::CosRegBatchnorm => "cosreg+batchnorm",
        }
    }

    pub fn parse(s: &str) -> Result<Baseline> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown baseline {s:?} (expected one of none, dropout, batchnorm, cosreg, cosreg+batchnorm)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Channels of every convolution, encoder and decoder alike.
    pub filters: usize,
    /// Width of the decoder's hidden fully connected layer.
    pub fc_hidden: usize,
    pub baseline: Baseline,
    /// Penalty weight; meaningful only when the baseline applies the
    /// cosine penalty. Zero disables the penalty path entirely.
    pub alpha: f64,
    pub alpha_schedule: AlphaSchedule,
    /// When false, gradient norms inside the penalty are treated as
    /// constants.
    pub backprop_through_norm: bool,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Record pairwise gradient cosines every step. Turning this off skips
    /// the instrumentation entirely without changing the trajectory.
    pub record_cosines: bool,
}

impl RunConfig {
    /// Full-protocol defaults with the given baseline's preset α.
    pub fn for_baseline(baseline: Baseline) -> Self {
        RunConfig {
            filters: 20,
            fc_hidden: 128,
            baseline,
            alpha: baseline.default_alpha(),
            alpha_schedule: AlphaSchedule::Constant,
            backprop_through_norm: true,
            dropout_rate: 0.5,
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 20,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            record_cosines: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.fc_hidden == 0 {
            return Err(Error::OutOfRange(
                "filters and fc_hidden must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::OutOfRange("batch_size must be positive".into()));
        }
        if self.baseline.uses_batchnorm() && self.batch_size < 2 {
            return Err(Error::OutOfRange(
                "batchnorm training needs batch_size >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::OutOfRange(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::OutOfRange(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::OutOfRange(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Penalty configuration for the run; α is zero whenever the baseline
    /// does not apply the penalty.
    pub fn reg_config(&self) -> CosRegConfig {
        CosRegConfig {
            alpha: if self.baseline.uses_cosreg() {
                self.alpha
            } else {
                0.0
            },
            schedule: self.alpha_schedule,
            backprop_through_norm: self.backprop_through_norm,
            ..Default::default()
        }
    }
}

/// `floor((n − kernel)/stride) + 1` for one valid-padding convolution.
fn conv_out(n: usize) -> usize {
    (n - KERNEL) / STRIDE + 1
}

pub fn task_specs() -> Vec<TaskSpec> {
    vec![
        TaskSpec::classification("left", NUM_CLASSES),
        TaskSpec::classification("right", NUM_CLASSES),
    ]
}

/// Two strided convolutions shared by both tasks, then per task one more
/// convolution and two fully connected layers. The penalty's gradient
/// target is the weight of the final shared convolution.
pub fn build_experiment_model(
    cfg: &RunConfig,
    rng: &mut impl rand::Rng,
) -> Result<MultiTaskModel> {
    cfg.validate()?;
    let f = cfg.filters;
    let bn = cfg.baseline.uses_batchnorm();
    let dropout = cfg.baseline.uses_dropout();

    let mut enc: Vec<LayerConfig> = Vec::new();
    let push_conv_block = |enc: &mut Vec<LayerConfig>, in_channels: usize| -> usize {
        let at = enc.len();
        enc.push(LayerConfig::Conv2d {
            in_channels,
            out_channels: f,
            kernel: KERNEL,
            stride: STRIDE,
            bias: false,
        });
        if bn {
            enc.push(LayerConfig::BatchNorm { features: f });
        }
        enc.push(LayerConfig::Relu);
        if dropout {
            enc.push(LayerConfig::Dropout {
                rate: cfg.dropout_rate,
            });
        }
        at
    };
    push_conv_block(&mut enc, 1);
    let last_conv_index = push_conv_block(&mut enc, f);

    let side = conv_out(conv_out(conv_out(CANVAS_SIZE)));
    let mut dec: Vec<LayerConfig> = vec![LayerConfig::Conv2d {
        in_channels: f,
        out_channels: f,
        kernel: KERNEL,
        stride: STRIDE,
        bias: false,
    }];
    if bn {
        dec.push(LayerConfig::BatchNorm { features: f });
    }
    dec.push(LayerConfig::Relu);
    dec.push(LayerConfig::Flatten);
    dec.push(LayerConfig::Linear {
        in_features: f * side * side,
        out_features: cfg.fc_hidden,
        bias: true,
    });
    dec.push(LayerConfig::Relu);
    if dropout {
        dec.push(LayerConfig::Dropout {
            rate: cfg.dropout_rate,
        });
    }
    dec.push(LayerConfig::Linear {
        in_features: cfg.fc_hidden,
        out_features: NUM_CLASSES,
        bias: true,
    });

    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let encoder = build_stack("encoder", &enc, ParamGroup::Shared, &mut params, &mut buffers, rng)?;
    let left = build_stack(
        "decoder.left",
        &dec,
        ParamGroup::Task(0),
        &mut params,
        &mut buffers,
        rng,
    )?;
    let right = build_stack(
        "decoder.right",
        &dec,
        ParamGroup::Task(1),
        &mut params,
        &mut buffers,
        rng,
    )?;
    MultiTaskModel::new(
        params,
        buffers,
        encoder,
        vec![("left".to_string(), left), ("right".to_string(), right)],
        vec![format!("encoder.conv{last_conv_index}.weight")],
    )
}

/// `n / Σ 1/a_i`; zero as soon as any accuracy is zero (or the list is
/// empty), so a fully failed task cannot hide behind the other.
pub fn harmonic_mean_accuracy(accs: &[f64]) -> f64 {
    if accs.is_empty() || accs.iter().any(|&a| a <= 0.0) {
        return 0.0;
    }
    accs.len() as f64 / accs.iter().map(|a| 1.0 / a).sum::<f64>()
}

/// One `epoch,task,split,loss,accuracy` record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Everything a finished run reports. Wall time is informational and
/// excluded from equality, so two runs of the same seed compare equal.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<MetricRow>,
    /// Harmonic mean of the final epoch's validation accuracies; zero for
    /// zero-epoch runs.
    pub final_harmonic_accuracy: f64,
    /// Sample standard deviation of each pair's cosine series over the
    /// first epoch; empty when cosines were not recorded for epoch 0.
    pub first_epoch_sigma: Vec<((String, String), f64)>,
    pub cosines: CosineRecorder,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor, Tensor)>,
    pub wall_time: Duration,
}

impl PartialEq for RunResult {
    fn eq(&self, other: &Self) -> bool {
        self.metrics == other.metrics
            && self.final_harmonic_accuracy == other.final_harmonic_accuracy
            && self.first_epoch_sigma == other.first_epoch_sigma
            && self.cosines == other.cosines
            && self.params == other.params
            && self.buffers == other.buffers
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Save a checkpoint after every completed epoch into this directory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Restore model and optimizer state before training and continue from
    /// the stored epoch.
    pub resume_from: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, completed_epochs: usize) -> PathBuf {
    dir.join(format!("epoch{completed_epochs:04}.ckpt"))
}

fn batch_for(samples: &[PackedSample], indices: &[usize]) -> Batch {
    let (images, left, right) = batch_tensor(samples, indices);
    Batch {
        input: images,
        labels: vec![
            ("left".to_string(), Labels::Classes(left)),
            ("right".to_string(), Labels::Classes(right)),
        ],
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy per task over a whole split, in evaluation mode.
/// Never mutates parameters or running statistics.
fn evaluate(
    model: &mut MultiTaskModel,
    samples: &[PackedSample],
    specs: &[TaskSpec],
    batch_size: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<(String, f64, f64)>> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InsufficientData("evaluation split is empty".into()));
    }
    let mut loss_sums = vec![0.0; specs.len()];
    let mut hits = vec![0usize; specs.len()];
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size).min(n);
        let indices: Vec<usize> = (at..hi).collect();
        let batch = batch_for(samples, &indices);
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &batch.input, false, rng)?;
        let (_, per_task) = joint_loss(&mut g, &pass, &batch, specs)?;
        for (t, spec) in specs.iter().enumerate() {
            let (_, loss_node) = &per_task[t];
            loss_sums[t] += g.value(*loss_node).item() * indices.len() as f64;
            let logits = g.value(pass.output_for(&spec.id)?);
            let labels = match batch.labels_for(&spec.id)? {
                Labels::Classes(c) => c,
                Labels::Regression(_) => {
                    return Err(Error::InvalidArgument(
                        "evaluation expects class labels".into(),
                    ))
                }
            };
            let classes = logits.shape()[1];
            for (row, &want) in labels.iter().enumerate() {
                let row = &logits.data()[row * classes..(row + 1) * classes];
                if argmax(row) == want {
                    hits[t] += 1;
                }
            }
        }
        at = hi;
    }
    Ok(specs
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            (
                spec.id.clone(),
                loss_sums[t] / n as f64,
                hits[t] as f64 / n as f64,
            )
        })
        .collect())
}

/// Run the full training protocol. Per step: forward, per-task losses,
/// penalty when active, pairwise cosine recording, one optimizer update
/// over all parameters from the combined loss. Per epoch: train and
/// validation metrics in evaluation mode, plus an optional checkpoint.
pub fn train(cfg: &RunConfig, data: &Dataset, opts: &TrainOptions) -> Result<RunResult> {
    cfg.validate()?;
    if data.train.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "training split has {} samples but one batch needs {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    let started = Instant::now();

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_INIT]));
    let mut model = build_experiment_model(cfg, &mut init_rng)?;
    let mut optimizer = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::sgd(cfg.learning_rate),
        OptimizerKind::Adam => Optimizer::adam(cfg.learning_rate),
    };

    let mut start_epoch = 0;
    if let Some(path) = &opts.resume_from {
        let ck = load_checkpoint(path)?;
        ck.apply(&mut model, &mut optimizer)?;
        start_epoch = ck.epoch;
        if start_epoch > cfg.epochs {
            return Err(Error::Train(format!(
                "checkpoint is at epoch {start_epoch} but the run only has {} epochs",
                cfg.epochs
            )));
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let specs = task_specs();
    let reg_cfg = cfg.reg_config();
    reg_cfg.validate()?;
    let penalty_active = reg_cfg.alpha != 0.0;
    let pair_ids: Vec<(String, String)> = pair_list(&specs);

    let steps_per_epoch = data.train.len() / cfg.batch_size;
    let mut recorder = CosineRecorder::new();
    let mut metrics: Vec<MetricRow> = Vec::new();
    let mut final_val: Vec<(String, f64, f64)> = Vec::new();
    let mut global_step = start_epoch * steps_per_epoch;

    for epoch in start_epoch..cfg.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut step_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_STEP, epoch as u64]));
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        for step_in_epoch in 0..steps_per_epoch {
            let lo = step_in_epoch * cfg.batch_size;
            let indices = &order[lo..lo + cfg.batch_size];
            let batch = batch_for(&data.train, indices);
            train_step(
                cfg,
                &mut model,
                &mut optimizer,
                &batch,
                &specs,
                &reg_cfg,
                penalty_active,
                &pair_ids,
                &mut recorder,
                global_step,
                epoch,
                &mut step_rng,
            )
            .map_err(|e| {
                Error::Train(format!("step {global_step} (epoch {epoch}): {e}"))
            })?;
            global_step += 1;
        }

        let mut eval_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_EVAL, epoch as u64]));
        for (split, samples) in [("train", &data.train), ("val", &data.val)] {
            let rows = evaluate(&mut model, samples, &specs, cfg.batch_size, &mut eval_rng)
                .map_err(|e| Error::Train(format!("{split} evaluation (epoch {epoch}): {e}")))?;
            for (task, loss, accuracy) in &rows {
                metrics.push(MetricRow {
                    epoch,
                    task: task.clone(),
                    split: split.to_string(),
                    loss: *loss,
                    accuracy: *accuracy,
                });
            }
            if split == "val" {
                final_val = rows;
            }
        }

        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(&checkpoint_path(dir, epoch + 1), &model, &optimizer, epoch + 1)?;
        }
    }

    let final_harmonic_accuracy = if final_val.is_empty() {
        0.0
    } else {
        let accs: Vec<f64> = final_val.iter().map(|&(_, _, a)| a).collect();
        harmonic_mean_accuracy(&accs)
    };
    let mut first_epoch_sigma = Vec::new();
    for pair in &pair_ids {
        if let Ok(sigma) = recorder.first_epoch_sigma(pair) {
            first_epoch_sigma.push((pair.clone(), sigma));
        }
    }

    Ok(RunResult {
        metrics,
        final_harmonic_accuracy,
        first_epoch_sigma,
        cosines: recorder,
        params: model
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect(),
        buffers: model
            .buffers
            .entries()
            .iter()
            .map(|(n, s)| (n.clone(), s.mean.clone(), s.var.clone()))
            .collect(),
        wall_time: started.elapsed(),
    })
}

fn pair_list(specs: &[TaskSpec]) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            pairs.push((specs[i].id.clone(), specs[j].id.clone()));
        }
    }
    pairs
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &RunConfig,
    model: &mut MultiTaskModel,
    optimizer: &mut Optimizer,
    batch: &Batch,
    specs: &[TaskSpec],
    reg_cfg: &CosRegConfig,
    penalty_active: bool,
    pair_ids: &[(String, String)],
    recorder: &mut CosineRecorder,
    global_step: usize,
    epoch: usize,
    step_rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &batch.input, true, step_rng)?;
    let (joint, per_task) = joint_loss(&mut g, &pass, batch, specs)?;

    let mut grad_values: Option<Vec<(String, Vec<f64>)>> = None;
    let total = if penalty_active {
        let tg = task_gradients(&mut g, model, &pass, &per_task, true)?;
        grad_values = Some(
            tg.iter()
                .map(|(id, n)| (id.clone(), g.value(*n).data().to_vec()))
                .collect(),
        );
        let nodes: Vec<_> = tg.iter().map(|&(_, n)| n).collect();
        let penalty = normalized_penalty(&mut g, &nodes, reg_cfg)?;
        let losses: Vec<f64> = per_task.iter().map(|&(_, l)| g.value(l).item()).collect();
        let alpha = effective_alpha(reg_cfg, &losses);
        let scaled = g.mul_scalar(penalty, alpha)?;
        let reported = g.value(scaled).item();
        debug_assert!(
            (-1e-12..=alpha + 1e-12).contains(&reported),
            "penalty {reported} outside [0, {alpha}]"
        );
        g.add(joint, scaled)?
    } else {
        if cfg.record_cosines {
            let tg = task_gradients(&mut g, model, &pass, &per_task, false)?;
            grad_values = Some(
                tg.iter()
                    .map(|(id, n)| (id.clone(), g.value(*n).data().to_vec()))
                    .collect(),
            );
        }
        joint
    };

    if cfg.record_cosines {
        if let Some(values) = &grad_values {
            let lookup = |id: &str| -> Result<&Vec<f64>> {
                values
                    .iter()
                    .find(|(n, _)| n == id)
                    .map(|(_, v)| v)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("no gradient recorded for task {id:?}"))
                    })
            };
            let mut cosines = Vec::with_capacity(pair_ids.len());
            for pair in pair_ids {
                let value = cosine(lookup(&pair.0)?, lookup(&pair.1)?, reg_cfg.epsilon_norm)?;
                cosines.push((pair.clone(), value));
            }
            recorder.record(global_step, epoch, &cosines)?;
        }
    }

    let total_value = g.value(total).item();
    if !total_value.is_finite() {
        return Err(Error::Train(format!("loss became {total_value}")));
    }

    let wrt = pass.staged.node_ids();
    let grad_nodes = g.backward(total, &wrt, false)?;
    let grads: Vec<(String, Tensor)> = pass
        .staged
        .iter()
        .zip(&grad_nodes)
        .map(|((name, _), &gnode)| (name.to_string(), g.value(gnode).clone()))
        .collect();
    optimizer.step(&mut model.params, &grads)?;
    Ok(())
}

/// Write metric rows as CSV with a `epoch,task,split,loss,accuracy`
/// header. Floats carry 17 significant digits so re-reading restores them
/// exactly.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("epoch,task,split,loss,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.16e},{:.16e}\n",
            r.epoch, r.task, r.split, r.loss, r.accuracy
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::synthetic_source;
    use crate::data::{build_dataset_from_source, plan_splits_with};

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            filters: 2,
            fc_hidden: 8,
            batch_size: 8,
            epochs: 1,
            seed: 11,
            ..RunConfig::for_baseline(Baseline::None)
        }
    }

    pub(crate) fn tiny_dataset(seed: u64) -> Dataset {
        let source = synthetic_source(6, seed).unwrap();
        let plan = plan_splits_with(seed, (2, 1, 1), 16).unwrap();
        build_dataset_from_source(&source, &plan, seed).unwrap()
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean_accuracy(&[0.9, 0.9]) - 0.9).abs() < 1e-15);
        assert!((harmonic_mean_accuracy(&[1.0, 0.5]) - 2.0 / 3.0).abs() < 1e-15);
        assert!((harmonic_mean_accuracy(&[0.937, 0.937]) - 0.937).abs() < 1e-15);
        assert_eq!(harmonic_mean_accuracy(&[0.8, 0.0]), 0.0);
        assert_eq!(harmonic_mean_accuracy(&[]), 0.0);
    }

    #[test]
    fn harmonic_mean_below_arithmetic() {
        let accs = [0.3, 0.9, 0.6];
        let h = harmonic_mean_accuracy(&accs);
        let a = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(h > 0.0 && h <= a);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = RunConfig::for_baseline(Baseline::None);
        c.filters = 0;
        assert!(c.validate().is_err());

        let mut c = RunConfig::for_baseline(Baseline::Batchnorm);
        c.batch_size = 1;
        assert!(c.validate().is_err());

        let mut c = RunConfig::for_baseline(Baseline::Dropout);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());

        let mut c = RunConfig::for_baseline(Baseline::CosReg);
        c.alpha = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn baseline_parsing_round_trips() {
        for b in Baseline::ALL {
            assert_eq!(Baseline::parse(b.as_str()).unwrap(), b);
        }
        assert!(Baseline::parse("batchnrm").is_err());
    }

    #[test]
    fn feature_map_sizes() {
        assert_eq!(conv_out(CANVAS_SIZE), 31);
        assert_eq!(conv_out(31), 15);
        assert_eq!(conv_out(15), 7);
    }

    #[test]
    fn experiment_model_shapes_and_target() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = build_experiment_model(&cfg, &mut rng).unwrap();
        assert_eq!(model.reg_target(), &["encoder.conv2.weight".to_string()]);
        let w = &model.params.get("encoder.conv2.weight").unwrap().value;
        assert_eq!(w.shape(), &[2, 2, 3, 3]);

        let input = Tensor::zeros(&[2, 1, CANVAS_SIZE, CANVAS_SIZE]);
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &input, false, &mut rng).unwrap();
        for task in ["left", "right"] {
            let out = g.value(pass.output_for(task).unwrap());
            assert_eq!(out.shape(), &[2, NUM_CLASSES]);
        }
    }

    #[test]
    fn batchnorm_baseline_shifts_target_name() {
        let mut cfg = tiny_config();
        cfg.baseline = Baseline::Batchnorm;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = build_experiment_model(&cfg, &mut rng).unwrap();
        assert_eq!(model.reg_target(), &["encoder.conv3.weight".to_string()]);
        assert!(!model.buffers.entries().is_empty());
    }

    #[test]
    fn dropout_baseline_has_no_buffers() {
        let mut cfg = tiny_config();
        cfg.baseline = Baseline::Dropout;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = build_experiment_model(&cfg, &mut rng).unwrap();
        assert!(model.buffers.entries().is_empty());
    }

    #[test]
    fn zero_epochs_returns_untouched_parameters() {
        let data = tiny_dataset(3);
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        let result = train(&cfg, &data, &TrainOptions::default()).unwrap();
        assert!(result.metrics.is_empty());
        assert!(result.cosines.is_empty());
        assert_eq!(result.final_harmonic_accuracy, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_INIT]));
        let fresh = build_experiment_model(&cfg, &mut rng).unwrap();
        for (got, want) in result.params.iter().zip(fresh.params.entries()) {
            assert_eq!(got.0, want.name);
            assert_eq!(got.1, want.value);
        }
    }

    #[test]
    fn one_epoch_smoke_run() {
        let data = tiny_dataset(3);
        let cfg = tiny_config();
        let result = train(&cfg, &data, &TrainOptions::default()).unwrap();
        let steps = data.train.len() / cfg.batch_size;
        assert_eq!(result.cosines.records().len(), steps);
        assert_eq!(result.metrics.len(), 4);
        assert_eq!(result.first_epoch_sigma.len(), 1);
        for row in &result.metrics {
            assert!((0.0..=1.0).contains(&row.accuracy), "{row:?}");
            assert!(row.loss.is_finite());
        }
    }

    #[test]
    fn same_seed_is_bit_reproducible() {
        let data = tiny_dataset(5);
        let cfg = tiny_config();
        let a = train(&cfg, &data, &TrainOptions::default()).unwrap();
        let b = train(&cfg, &data, &TrainOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_larger_than_split_is_an_error() {
        let data = tiny_dataset(3);
        let mut cfg = tiny_config();
        cfg.batch_size = data.train.len() + 1;
        assert!(train(&cfg, &data, &TrainOptions::default()).is_err());
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![MetricRow {
            epoch: 0,
            task: "left".into(),
            split: "val".into(),
            loss: 0.5,
            accuracy: 0.75,
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,task,split,loss,accuracy"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,left,val,"), "{row}");
    }
}
