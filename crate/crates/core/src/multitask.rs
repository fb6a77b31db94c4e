//! Shared-encoder multi-task composition: the joint loss, per-task
//! gradients with respect to a designated parameter subset, gradient
//! cosines, and the cosine regularization penalty in pairwise and
//! generalized (Gram matrix) form, with optional loss-scaled strength.
//!
//! The penalty is built on gradient nodes created with `create_graph`, so
//! its own backward pass differentiates through the task gradients.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, forward_stack, mse, BufferStore, Layer, ParamGroup, ParamStore, StagedParams,
};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// One task head: identity, loss, weight in the joint sum, output arity.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: String,
    pub loss: LossKind,
    pub weight: f64,
    pub label_arity: usize,
}

impl TaskSpec {
    pub fn classification(id: &str, classes: usize) -> Self {
        TaskSpec {
            id: id.to_string(),
            loss: LossKind::CrossEntropy,
            weight: 1.0,
            label_arity: classes,
        }
    }

    pub fn regression(id: &str, outputs: usize) -> Self {
        TaskSpec {
            id: id.to_string(),
            loss: LossKind::Mse,
            weight: 1.0,
            label_arity: outputs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaSchedule {
    Constant,
    /// α is multiplied by the mean of the current detached task losses, so
    /// the penalty weight decays as training converges. No gradient flows
    /// through the scale.
    ScaledByMeanLoss,
}

#[derive(Debug, Clone)]
pub struct CosRegConfig {
    pub alpha: f64,
    pub schedule: AlphaSchedule,
    pub epsilon_norm: f64,
    /// When false, gradient norms are treated as constants inside the
    /// penalty instead of being differentiated through.
    pub backprop_through_norm: bool,
}

impl Default for CosRegConfig {
    fn default() -> Self {
        CosRegConfig {
            alpha: 0.0,
            schedule: AlphaSchedule::Constant,
            epsilon_norm: 1e-12,
            backprop_through_norm: true,
        }
    }
}

impl CosRegConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        CosRegConfig {
            alpha,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_norm must be positive, got {}",
                self.epsilon_norm
            )));
        }
        Ok(())
    }
}

/// Per-task labels for one mini-batch, keyed by task id.
#[derive(Debug, Clone)]
pub enum Labels {
    Classes(Vec<usize>),
    Regression(Tensor),
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor,
    pub labels: Vec<(String, Labels)>,
}

impl Batch {
    pub fn labels_for(&self, task: &str) -> Result<&Labels> {
        self.labels
            .iter()
            .find(|(id, _)| id == task)
            .map(|(_, l)| l)
            .ok_or_else(|| Error::InvalidArgument(format!("batch has no labels for task {task:?}")))
    }
}

/// Shared encoder plus ordered task decoders. Parameter names carry the
/// grouping; `reg_target` names the shared parameters whose task gradients
/// feed the penalty (by default the final encoder layer's weight).
#[derive(Debug, Clone)]
pub struct MultiTaskModel {
    pub params: ParamStore,
    pub buffers: BufferStore,
    pub encoder: Vec<Layer>,
    pub decoders: Vec<(String, Vec<Layer>)>,
    reg_target: Vec<String>,
}

impl MultiTaskModel {
    pub fn new(
        params: ParamStore,
        buffers: BufferStore,
        encoder: Vec<Layer>,
        decoders: Vec<(String, Vec<Layer>)>,
        reg_target: Vec<String>,
    ) -> Result<Self> {
        if reg_target.is_empty() {
            return Err(Error::InvalidArgument(
                "regularization target must name at least one parameter".into(),
            ));
        }
        for name in &reg_target {
            let entry = params.get(name)?;
            if entry.group != ParamGroup::Shared {
                return Err(Error::InvalidArgument(format!(
                    "regularization target {name:?} is not a shared parameter"
                )));
            }
        }
        Ok(MultiTaskModel {
            params,
            buffers,
            encoder,
            decoders,
            reg_target,
        })
    }

    pub fn reg_target(&self) -> &[String] {
        &self.reg_target
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.decoders.iter().map(|(id, _)| id.clone()).collect()
    }

    /// Stage parameters into `g` and run encoder + all decoders.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        input: &Tensor,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<ModelPass> {
        let staged = self.params.stage(g);
        let x = g.constant(input.clone());
        let features = forward_stack(
            g,
            &self.encoder,
            &staged,
            &mut self.buffers,
            x,
            training,
            rng,
        )?;
        let mut task_outputs = Vec::with_capacity(self.decoders.len());
        for (id, stack) in &self.decoders {
            let out = forward_stack(g, stack, &staged, &mut self.buffers, features, training, rng)?;
            task_outputs.push((id.clone(), out));
        }
        Ok(ModelPass {
            staged,
            features,
            task_outputs,
        })
    }
}

/// One staged forward pass: parameter nodes, latent features, task outputs.
#[derive(Debug, Clone)]
pub struct ModelPass {
    pub staged: StagedParams,
    pub features: NodeId,
    pub task_outputs: Vec<(String, NodeId)>,
}

impl ModelPass {
    pub fn output_for(&self, task: &str) -> Result<NodeId> {
        self.task_outputs
            .iter()
            .find(|(id, _)| id == task)
            .map(|&(_, n)| n)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no task {task:?}")))
    }
}

/// Weighted sum of per-task mean losses: Σ_t w_t·L_t, plus each L_t.
pub fn joint_loss(
    g: &mut Graph,
    pass: &ModelPass,
    batch: &Batch,
    specs: &[TaskSpec],
) -> Result<(NodeId, Vec<(String, NodeId)>)> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no task specs given".into()));
    }
    let mut per_task = Vec::with_capacity(specs.len());
    let mut total: Option<NodeId> = None;
    for spec in specs {
        let out = pass.output_for(&spec.id)?;
        let labels = batch.labels_for(&spec.id)?;
        let loss = match (spec.loss, labels) {
            (LossKind::CrossEntropy, Labels::Classes(classes)) => {
                let width = g.value(out).shape().last().copied().unwrap_or(0);
                if width != spec.label_arity {
                    return Err(Error::shape(
                        "joint_loss",
                        format!(
                            "task {:?} produces {} classes but spec declares {}",
                            spec.id, width, spec.label_arity
                        ),
                    ));
                }
                cross_entropy(g, out, classes)?
            }
            (LossKind::Mse, Labels::Regression(target)) => {
                let t = g.constant(target.clone());
                mse(g, out, t)?
            }
            (kind, _) => {
                return Err(Error::InvalidArgument(format!(
                    "task {:?} declares {kind:?} loss but batch labels have the wrong kind",
                    spec.id
                )));
            }
        };
        let weighted = if spec.weight == 1.0 {
            loss
        } else {
            g.mul_scalar(loss, spec.weight)?
        };
        total = Some(match total {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
        per_task.push((spec.id.clone(), loss));
    }
    Ok((total.expect("specs non-empty"), per_task))
}

/// Per-task gradients of each L_t with respect to the model's
/// regularization target, flattened to one vector node per task.
/// Differentiable when `create_graph` is true.
pub fn task_gradients(
    g: &mut Graph,
    model: &MultiTaskModel,
    pass: &ModelPass,
    per_task_losses: &[(String, NodeId)],
    create_graph: bool,
) -> Result<Vec<(String, NodeId)>> {
    let mut targets = Vec::with_capacity(model.reg_target.len());
    for name in &model.reg_target {
        targets.push(pass.staged.get(name)?);
    }
    let mut out = Vec::with_capacity(per_task_losses.len());
    for (task, loss) in per_task_losses {
        for (name, &node) in model.reg_target.iter().zip(&targets) {
            if !g.reaches(*loss, node) {
                return Err(Error::Unreachable {
                    node: format!("parameter {name:?} does not affect the loss of task {task:?}"),
                });
            }
        }
        let grads = g.backward(*loss, &targets, create_graph)?;
        let mut flat = Vec::with_capacity(grads.len());
        for grad in grads {
            let n = g.value(grad).numel();
            flat.push(g.reshape(grad, vec![n])?);
        }
        let vector = if flat.len() == 1 {
            flat[0]
        } else {
            g.concat(&flat, 0)?
        };
        out.push((task.clone(), vector));
    }
    Ok(out)
}

// ── cosine and penalty ──────────────────────────────────────────────────

/// Cosine of two flat gradient vectors with safe normalization:
/// `dot / (max(‖g_i‖, ε) · max(‖g_j‖, ε))`, clamped to [−1, 1].
pub fn cosine(g_i: &[f64], g_j: &[f64], epsilon_norm: f64) -> Result<f64> {
    if g_i.len() != g_j.len() {
        return Err(Error::shape(
            "cosine",
            format!("lengths differ: {} vs {}", g_i.len(), g_j.len()),
        ));
    }
    if !(epsilon_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon_norm must be positive, got {epsilon_norm}"
        )));
    }
    let dot: f64 = g_i.iter().zip(g_j).map(|(a, b)| a * b).sum();
    let ni = g_i.iter().map(|a| a * a).sum::<f64>().sqrt().max(epsilon_norm);
    let nj = g_j.iter().map(|a| a * a).sum::<f64>().sqrt().max(epsilon_norm);
    Ok((dot / (ni * nj)).clamp(-1.0, 1.0))
}

/// `max(‖v‖, ε)` as a graph node, written as `sqrt(relu(Σv² − ε²) + ε²)`.
/// Value-identical to the clamped norm, and its derivative is exactly zero
/// in the clamped regime, so double backward stays finite near ‖v‖ = 0.
fn clamped_norm_node(g: &mut Graph, v: NodeId, eps: f64) -> Result<NodeId> {
    let sumsq = g.dot(v, v)?;
    let eps2 = eps * eps;
    let shifted = g.add_scalar(sumsq, -eps2)?;
    let gated = g.relu(shifted)?;
    let restored = g.add_scalar(gated, eps2)?;
    g.sqrt(restored)
}

/// Unit-normalize a flat gradient node by its clamped norm.
fn unit_normalize(g: &mut Graph, v: NodeId, cfg: &CosRegConfig) -> Result<NodeId> {
    if cfg.backprop_through_norm {
        let n = clamped_norm_node(g, v, cfg.epsilon_norm)?;
        g.divide(v, n)
    } else {
        let norm = g.value(v).norm().max(cfg.epsilon_norm);
        g.mul_scalar(v, 1.0 / norm)
    }
}

/// Clamp a scalar node from above at 1 via `x − relu(x − 1)`; keeps the
/// stated [0,1] range exact under floating-point round-off.
fn clamp_upper_one(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let over = g.add_scalar(x, -1.0)?;
    let over = g.relu(over)?;
    g.sub(x, over)
}

/// Differentiable cosine node between two flat gradient nodes.
fn cosine_node(g: &mut Graph, g_i: NodeId, g_j: NodeId, cfg: &CosRegConfig) -> Result<NodeId> {
    if g.value(g_i).numel() != g.value(g_j).numel() {
        return Err(Error::shape(
            "cosine",
            format!(
                "lengths differ: {} vs {}",
                g.value(g_i).numel(),
                g.value(g_j).numel()
            ),
        ));
    }
    let ui = unit_normalize(g, g_i, cfg)?;
    let uj = unit_normalize(g, g_j, cfg)?;
    g.dot(ui, uj)
}

/// Pairwise penalty α·cos²(g_i, g_j) as a differentiable node.
pub fn cosreg_pairwise(
    g: &mut Graph,
    g_i: NodeId,
    g_j: NodeId,
    alpha: f64,
    cfg: &CosRegConfig,
) -> Result<NodeId> {
    let c = cosine_node(g, g_i, g_j, cfg)?;
    let sq = g.square(c)?;
    let sq = clamp_upper_one(g, sq)?;
    g.mul_scalar(sq, alpha)
}

/// Normalized penalty before α: `‖GᵀG − I_T‖²_F / (T(T−1))` with G's
/// columns the unit-normalized gradients; lies in [0,1].
pub fn normalized_penalty(g: &mut Graph, grads: &[NodeId], cfg: &CosRegConfig) -> Result<NodeId> {
    let t = grads.len();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "penalty needs at least two task gradients, got {t}"
        )));
    }
    let d = g.value(grads[0]).numel();
    for &v in grads {
        if g.value(v).numel() != d {
            return Err(Error::shape(
                "normalized_penalty",
                format!("gradient lengths differ: {} vs {}", d, g.value(v).numel()),
            ));
        }
    }
    let mut columns = Vec::with_capacity(t);
    for &v in grads {
        let u = unit_normalize(g, v, cfg)?;
        columns.push(g.reshape(u, vec![d, 1])?);
    }
    let gm = g.concat(&columns, 1)?;
    let gt = g.transpose2(gm)?;
    let gram = g.matmul(gt, gm)?;
    let mut eye = Tensor::zeros(&[t, t]);
    for i in 0..t {
        eye.set(&[i, i], 1.0);
    }
    let eye = g.constant(eye);
    let diff = g.sub(gram, eye)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq, &[], false)?;
    let p = g.mul_scalar(total, 1.0 / (t * (t - 1)) as f64)?;
    clamp_upper_one(g, p)
}

/// Generalized penalty `α/(T(T−1))·‖GᵀG − I_T‖²_F`; coincides with
/// `cosreg_pairwise` at T=2.
pub fn cosreg_general(
    g: &mut Graph,
    grads: &[NodeId],
    alpha: f64,
    cfg: &CosRegConfig,
) -> Result<NodeId> {
    let p = normalized_penalty(g, grads, cfg)?;
    g.mul_scalar(p, alpha)
}

/// Resolve the penalty strength for one step. Loss values are detached
/// scalars, so the scaled schedule contributes no gradient of its own.
pub fn effective_alpha(cfg: &CosRegConfig, per_task_losses: &[f64]) -> f64 {
    match cfg.schedule {
        AlphaSchedule::Constant => cfg.alpha,
        AlphaSchedule::ScaledByMeanLoss => {
            if per_task_losses.is_empty() {
                return 0.0;
            }
            let mean = per_task_losses.iter().sum::<f64>() / per_task_losses.len() as f64;
            cfg.alpha * mean
        }
    }
}

/// Everything produced by one regularized training-step forward pass.
#[derive(Debug, Clone)]
pub struct RegularizedLoss {
    pub total: NodeId,
    pub joint: NodeId,
    pub per_task: Vec<(String, NodeId)>,
    /// Penalty before α (range [0,1]); `None` when α = 0.
    pub penalty: Option<NodeId>,
    /// Flattened per-task gradient nodes the penalty was built from;
    /// empty when α = 0.
    pub task_grads: Vec<(String, NodeId)>,
    pub effective_alpha: f64,
}

/// Joint loss plus the scheduled penalty. With α = 0 the returned total is
/// the joint-loss node itself, so unregularized behavior is bit-identical.
pub fn regularized_loss(
    g: &mut Graph,
    model: &mut MultiTaskModel,
    batch: &Batch,
    specs: &[TaskSpec],
    cfg: &CosRegConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<RegularizedLoss> {
    cfg.validate()?;
    let pass = model.forward(g, &batch.input, training, rng)?;
    let (joint, per_task) = joint_loss(g, &pass, batch, specs)?;
    if cfg.alpha == 0.0 {
        return Ok(RegularizedLoss {
            total: joint,
            joint,
            per_task,
            penalty: None,
            task_grads: Vec::new(),
            effective_alpha: 0.0,
        });
    }
    let task_grads = task_gradients(g, model, &pass, &per_task, true)?;
    let grad_nodes: Vec<NodeId> = task_grads.iter().map(|&(_, n)| n).collect();
    let penalty = normalized_penalty(g, &grad_nodes, cfg)?;
    let loss_values: Vec<f64> = per_task.iter().map(|&(_, l)| g.value(l).item()).collect();
    let a = effective_alpha(cfg, &loss_values);
    let scaled = g.mul_scalar(penalty, a)?;
    let total = g.add(joint, scaled)?;
    Ok(RegularizedLoss {
        total,
        joint,
        per_task,
        penalty: Some(penalty),
        task_grads,
        effective_alpha: a,
    })
}
