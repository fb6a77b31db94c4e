//! Neural-network building blocks: parameter storage, initialization, and
//! the layer set used by the experiments (linear, strided bias-free
//! convolution, relu, dropout, batchnorm, cross-entropy, mse).
//!
//! Layers are pure functions over graph nodes. Parameters live outside any
//! graph in a [`ParamStore`] and are staged into a fresh [`Graph`] each step,
//! which keeps step boundaries explicit and graphs single-owner.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{row_max, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Ownership group of a parameter: shared encoder vs one task's decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Shared,
    Task(usize),
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Ordered, uniquely named parameter set. Iteration order is insertion
/// order and defines the update order everywhere (optimizer, checkpoints).
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, group: ParamGroup) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            group,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn names_where(&self, mut pred: impl FnMut(&ParamGroup) -> bool) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| pred(&e.group))
            .map(|e| e.name.clone())
            .collect()
    }

    /// Create one requires-grad leaf per parameter in store order.
    pub fn stage(&self, g: &mut Graph) -> StagedParams {
        let nodes = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), g.leaf(e.value.clone(), true)))
            .collect();
        StagedParams { nodes }
    }
}

/// Name → node map produced by [`ParamStore::stage`] for one graph.
#[derive(Debug, Clone)]
pub struct StagedParams {
    nodes: Vec<(String, NodeId)>,
}

impl StagedParams {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|&(_, id)| id).collect()
    }
}

/// Per-channel running statistics for batchnorm evaluation mode.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Named running-stat buffers, insertion-ordered like [`ParamStore`].
#[derive(Debug, Default, Clone)]
pub struct BufferStore {
    entries: Vec<(String, RunningStats)>,
}

impl BufferStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, stats: RunningStats) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate buffer name {name:?}"
            )));
        }
        self.entries.push((name.to_string(), stats));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&RunningStats> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name:?}")))
    }

    pub fn entries(&self) -> &[(String, RunningStats)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.entries
    }
}

/// Normal(0, sqrt(2/fan_in)) samples, drawn in flat index order.
pub fn kaiming_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("kaiming fan_in must be positive".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::InvalidArgument(format!("kaiming distribution: {e}")))?;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

// ── functional ops ──────────────────────────────────────────────────────

/// `x (N,F_in) · wᵀ (F_in,F_out) [+ b]` with `b (F_out)` broadcast over rows.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    if g.value(x).rank() != 2 || g.value(w).rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!(
                "expects rank-2 input and weight, got {:?} and {:?}",
                g.value(x).shape(),
                g.value(w).shape()
            ),
        ));
    }
    let wt = g.transpose2(w)?;
    let y = g.matmul(x, wt)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Valid cross-correlation of `x (N,C,H,W)` with `weight (K,C,kh,kw)`,
/// lowered to `im2col` + matmul so that double backward reduces to linear
/// adjoints. Output `(N,K,H',W')` with `H' = (H−kh)/stride + 1`.
pub fn conv2d(g: &mut Graph, x: NodeId, weight: NodeId, stride: usize) -> Result<NodeId> {
    let xs = g.value(x).shape().to_vec();
    let ws = g.value(weight).shape().to_vec();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expects rank-4 input and weight, got {xs:?} and {ws:?}"),
        ));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(
            "conv2d",
            format!("channel mismatch: input {xs:?} vs weight {ws:?}"),
        ));
    }
    let (n, k, kh, kw) = (xs[0], ws[0], ws[2], ws[3]);
    let cols = g.im2col(x, kh, kw, stride)?;
    let wflat = g.reshape(weight, vec![k, ws[1] * kh * kw])?;
    let wt = g.transpose2(wflat)?;
    let y = g.matmul(cols, wt)?;
    let oh = (xs[2] - kh) / stride + 1;
    let ow = (xs[3] - kw) / stride + 1;
    let y = g.reshape(y, vec![n, oh, ow, k])?;
    g.transpose(y, vec![0, 3, 1, 2])
}

/// Inverted dropout: keeps each activation with probability `1−rate` and
/// scales kept ones by `1/(1−rate)`. Identity (the same node) when not
/// training or when `rate == 0`.
pub fn dropout(
    g: &mut Graph,
    x: NodeId,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0,1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}

fn channel_axes(rank: usize) -> Result<(usize, Vec<usize>)> {
    match rank {
        2 => Ok((1, vec![0])),
        4 => Ok((1, vec![0, 2, 3])),
        r => Err(Error::shape(
            "batchnorm",
            format!("expects rank-2 or rank-4 input, got rank {r}"),
        )),
    }
}

fn channel_shape(rank: usize, channels: usize) -> Vec<usize> {
    let mut s = vec![1; rank];
    s[1] = channels;
    s
}

/// Batch normalization over the channel axis (axis 1). Training mode
/// normalizes by batch statistics (differentiable through them) and updates
/// the running stats in value space; evaluation mode is the deterministic
/// affine map built from the running stats.
pub fn batchnorm(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    running: &mut RunningStats,
    training: bool,
) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let (ch_axis, reduce_axes) = channel_axes(shape.len())?;
    let channels = shape[ch_axis];
    if g.value(gamma).numel() != channels || g.value(beta).numel() != channels {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "affine parameters must have {} entries, got {} and {}",
                channels,
                g.value(gamma).numel(),
                g.value(beta).numel()
            ),
        ));
    }
    let cs = channel_shape(shape.len(), channels);
    let gamma_r = g.reshape(gamma, cs.clone())?;
    let beta_r = g.reshape(beta, cs.clone())?;
    let eps = running.eps;

    if training {
        if shape[0] < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm requires batch size >= 2 in training mode".into(),
            ));
        }
        let mu = g.mean(x, &reduce_axes, true)?;
        let diff = g.sub(x, mu)?;
        let sq = g.square(diff)?;
        let var = g.mean(sq, &reduce_axes, true)?;
        let var_eps = g.add_scalar(var, eps)?;
        let denom = g.sqrt(var_eps)?;
        let xhat = g.divide(diff, denom)?;
        let scaled = g.mul(xhat, gamma_r)?;
        let out = g.add(scaled, beta_r)?;

        // running-stat update is value-space bookkeeping, never part of the graph
        let count: usize = reduce_axes.iter().map(|&a| shape[a]).product();
        let unbias = count as f64 / (count as f64 - 1.0);
        let m = running.momentum;
        let batch_mean = g.value(mu).data().to_vec();
        let batch_var = g.value(var).data().to_vec();
        for c in 0..channels {
            let rm = running.mean.data()[c];
            running.mean.data_mut()[c] = (1.0 - m) * rm + m * batch_mean[c];
            let rv = running.var.data()[c];
            running.var.data_mut()[c] = (1.0 - m) * rv + m * batch_var[c] * unbias;
        }
        Ok(out)
    } else {
        let rm = g.constant(running.mean.reshaped(cs.clone())?);
        let rv = g.constant(running.var.reshaped(cs)?);
        let rv_eps = g.add_scalar(rv, eps)?;
        let denom = g.sqrt(rv_eps)?;
        let diff = g.sub(x, rm)?;
        let xhat = g.divide(diff, denom)?;
        let scaled = g.mul(xhat, gamma_r)?;
        g.add(scaled, beta_r)
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`, stabilized by
/// subtracting the detached row maximum (exact for any constant shift).
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("expects rank-2 logits, got {shape:?}"),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch of {}", labels.len(), n),
        ));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::OutOfRange(format!(
                "label {l} at row {i} out of range for {c} classes"
            )));
        }
    }
    let m_val = row_max(g.value(logits))?;
    let m = g.constant(m_val);
    let z = g.sub(logits, m)?;
    let ez = g.exp(z)?;
    let se = g.sum(ez, &[1], true)?;
    let lse = g.log(se)?;
    let logp = g.sub(z, lse)?;
    let mut onehot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let onehot = g.constant(Tensor::new(vec![n, c], onehot)?);
    let picked = g.mul(logp, onehot)?;
    let per_row = g.sum(picked, &[1], false)?;
    let mean = g.mean(per_row, &[], false)?;
    g.negate(mean)
}

/// Mean squared error over all entries (shapes must match exactly).
pub fn mse(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if g.value(pred).shape() != g.value(target).shape() {
        return Err(Error::shape(
            "mse",
            format!(
                "{:?} vs {:?}",
                g.value(pred).shape(),
                g.value(target).shape()
            ),
        ));
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    g.mean(sq, &[], false)
}

// ── layer stacks ────────────────────────────────────────────────────────

/// Construction-time description of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerConfig {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm {
        features: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Flatten,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerConfig::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                bias,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::InvalidArgument(
                        "conv dimensions, kernel and stride must be positive".into(),
                    ));
                }
                if bias {
                    return Err(Error::InvalidArgument(
                        "conv layers are bias-free in this model family".into(),
                    ));
                }
                Ok(())
            }
            LayerConfig::Linear {
                in_features,
                out_features,
                ..
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err(Error::InvalidArgument(
                        "linear feature counts must be positive".into(),
                    ));
                }
                Ok(())
            }
            LayerConfig::BatchNorm { features } => {
                if features == 0 {
                    return Err(Error::InvalidArgument(
                        "batchnorm feature count must be positive".into(),
                    ));
                }
                Ok(())
            }
            LayerConfig::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidArgument(format!(
                        "dropout rate must be in [0,1), got {rate}"
                    )));
                }
                Ok(())
            }
            LayerConfig::Relu | LayerConfig::Flatten => Ok(()),
        }
    }
}

/// Runtime layer, referring to parameters and buffers by name.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d { weight: String, stride: usize },
    Linear { weight: String, bias: Option<String> },
    BatchNorm { gamma: String, beta: String, stats: String },
    Relu,
    Dropout { rate: f64 },
    Flatten,
    /// Keep columns `start..end` of a rank-2 activation (test models use
    /// this to give tasks disjoint views of a shared feature vector).
    SliceCols { start: usize, end: usize },
}

/// Register parameters/buffers for `configs` under `prefix` and return the
/// runtime stack. Weights are Kaiming-normal; biases and β are zeros, γ ones.
pub fn build_stack(
    prefix: &str,
    configs: &[LayerConfig],
    group: ParamGroup,
    params: &mut ParamStore,
    buffers: &mut BufferStore,
    rng: &mut impl Rng,
) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        match *cfg {
            LayerConfig::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                let name = format!("{prefix}.conv{i}.weight");
                let fan_in = in_channels * kernel * kernel;
                let w = kaiming_init(&[out_channels, in_channels, kernel, kernel], fan_in, rng)?;
                params.add(&name, w, group)?;
                layers.push(Layer::Conv2d {
                    weight: name,
                    stride,
                });
            }
            LayerConfig::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let wname = format!("{prefix}.fc{i}.weight");
                let w = kaiming_init(&[out_features, in_features], in_features, rng)?;
                params.add(&wname, w, group)?;
                let bname = if bias {
                    let bname = format!("{prefix}.fc{i}.bias");
                    params.add(&bname, Tensor::zeros(&[out_features]), group)?;
                    Some(bname)
                } else {
                    None
                };
                layers.push(Layer::Linear {
                    weight: wname,
                    bias: bname,
                });
            }
            LayerConfig::BatchNorm { features } => {
                let gname = format!("{prefix}.bn{i}.gamma");
                let bname = format!("{prefix}.bn{i}.beta");
                let sname = format!("{prefix}.bn{i}.stats");
                params.add(&gname, Tensor::ones(&[features]), group)?;
                params.add(&bname, Tensor::zeros(&[features]), group)?;
                buffers.add(&sname, RunningStats::new(features))?;
                layers.push(Layer::BatchNorm {
                    gamma: gname,
                    beta: bname,
                    stats: sname,
                });
            }
            LayerConfig::Relu => layers.push(Layer::Relu),
            LayerConfig::Dropout { rate } => layers.push(Layer::Dropout { rate }),
            LayerConfig::Flatten => layers.push(Layer::Flatten),
        }
    }
    Ok(layers)
}

/// Run `x` through `layers` inside graph `g`.
pub fn forward_stack(
    g: &mut Graph,
    layers: &[Layer],
    staged: &StagedParams,
    buffers: &mut BufferStore,
    x: NodeId,
    training: bool,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let mut h = x;
    for layer in layers {
        h = match layer {
            Layer::Conv2d { weight, stride } => {
                let w = staged.get(weight)?;
                conv2d(g, h, w, *stride)?
            }
            Layer::Linear { weight, bias } => {
                let w = staged.get(weight)?;
                let b = match bias {
                    Some(b) => Some(staged.get(b)?),
                    None => None,
                };
                linear(g, h, w, b)?
            }
            Layer::BatchNorm { gamma, beta, stats } => {
                let ga = staged.get(gamma)?;
                let be = staged.get(beta)?;
                let st = buffers.get_mut(stats)?;
                batchnorm(g, h, ga, be, st, training)?
            }
            Layer::Relu => g.relu(h)?,
            Layer::Dropout { rate } => dropout(g, h, *rate, training, rng)?,
            Layer::Flatten => {
                let shape = g.value(h).shape().to_vec();
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                g.reshape(h, vec![n, rest])?
            }
            Layer::SliceCols { start, end } => {
                let shape = g.value(h).shape().to_vec();
                if shape.len() != 2 {
                    return Err(Error::shape(
                        "slice_cols",
                        format!("expects rank-2 activation, got {shape:?}"),
                    ));
                }
                g.slice(h, vec![0, *start], vec![shape[0], *end])?
            }
        };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_identity_weight() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = linear(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_row_sum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[2.0, 3.0]));
        let w = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let y = linear(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut r = rng(11);
        let (n, fi, fo) = (4, 5, 3);
        let xv: Vec<f64> = (0..n * fi).map(|_| r.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..fo * fi).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..fo).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[n, fi], &xv));
        let w = g.constant(t(&[fo, fi], &wv));
        let b = g.constant(t(&[fo], &bv));
        let y = linear(&mut g, x, w, Some(b)).unwrap();
        for i in 0..n {
            for o in 0..fo {
                let mut want = bv[o];
                for k in 0..fi {
                    want += xv[i * fi + k] * wv[o * fi + k];
                }
                let got = g.value(y).data()[i * fo + o];
                assert!((got - want).abs() < 1e-10, "({i},{o}): {got} vs {want}");
            }
        }
    }

    /// Direct nested-loop valid cross-correlation, the conv oracle.
    fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        for img in 0..n {
            for f in 0..k {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iv = x.at(&[img, ch, y * stride + ky, xx * stride + kx]);
                                    let wv = w.at(&[f, ch, ky, kx]);
                                    acc += iv * wv;
                                }
                            }
                        }
                        out.set(&[img, f, y, xx], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = conv2d(&mut g, x, w, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_all_ones_kernel_sums() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let y = conv2d(&mut g, x, w, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut r = rng(7);
        for &(n, c, k, h, w, kh, stride) in
            &[(2usize, 3usize, 4usize, 7usize, 6usize, 3usize, 2usize), (1, 1, 2, 5, 5, 2, 1)]
        {
            let xv: Vec<f64> = (0..n * c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..k * c * kh * kh).map(|_| r.gen_range(-1.0..1.0)).collect();
            let xt = t(&[n, c, h, w], &xv);
            let wt = t(&[k, c, kh, kh], &wv);
            let want = conv_oracle(&xt, &wt, stride);
            let mut g = Graph::new();
            let x = g.constant(xt);
            let wn = g.constant(wt);
            let y = conv2d(&mut g, x, wn, stride).unwrap();
            assert_eq!(g.value(y).shape(), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv2d_kernel_too_large_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(conv2d(&mut g, x, w, 1).is_err());
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut g = Graph::new();
        let mut r = rng(3);
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = dropout(&mut g, x, 0.0, true, &mut r).unwrap();
        assert_eq!(y, x);
        let z = dropout(&mut g, x, 0.5, false, &mut r).unwrap();
        assert_eq!(z, x);
        assert!(dropout(&mut g, x, 1.0, true, &mut r).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut g = Graph::new();
        let mut r = rng(5);
        let n = 10_000;
        let x = g.constant(Tensor::filled(&[n], 1.0));
        let y = dropout(&mut g, x, 0.5, true, &mut r).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn batchnorm_zero_variance_gives_zeros() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 1, 1], &[3.0, 3.0]));
        let ga = g.constant(Tensor::ones(&[1]));
        let be = g.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let y = batchnorm(&mut g, x, ga, be, &mut stats, true).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        assert!((stats.mean.data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_batch_of_one_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let ga = g.constant(Tensor::ones(&[2]));
        let be = g.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        assert!(batchnorm(&mut g, x, ga, be, &mut stats, true).is_err());
    }

    #[test]
    fn batchnorm_eval_is_affine_from_running_stats() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[2.0, 4.0]));
        let ga = g.constant(t(&[1], &[3.0]));
        let be = g.constant(t(&[1], &[0.5]));
        let mut stats = RunningStats::new(1);
        stats.mean = t(&[1], &[1.0]);
        stats.var = t(&[1], &[4.0]);
        let y = batchnorm(&mut g, x, ga, be, &mut stats, false).unwrap();
        let denom = (4.0f64 + 1e-5).sqrt();
        let want = [3.0 * (2.0 - 1.0) / denom + 0.5, 3.0 * (4.0 - 1.0) / denom + 0.5];
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 5]));
        let loss = cross_entropy(&mut g, logits, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_approaches_zero() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[1, 3], &[1000.0, 0.0, 0.0]));
        let loss = cross_entropy(&mut g, logits, &[0]).unwrap();
        assert!(g.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            cross_entropy(&mut g, logits, &[0, 3]),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_summation() {
        let mut r = rng(23);
        let (n, c) = (6, 4);
        let lv: Vec<f64> = (0..n * c).map(|_| r.gen_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let mut want = 0.0;
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let denom: f64 = row.iter().map(|&z| z.exp()).sum();
            want += -(row[labels[i]].exp() / denom).ln();
        }
        want /= n as f64;
        let mut g = Graph::new();
        let logits = g.constant(t(&[n, c], &lv));
        let loss = cross_entropy(&mut g, logits, &labels).unwrap();
        assert!((g.value(loss).item() - want).abs() < 1e-10);
    }

    #[test]
    fn mse_basics() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let b = g.constant(t(&[2], &[1.0, 1.0]));
        let same = mse(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let one = mse(&mut g, a, b).unwrap();
        assert_eq!(g.value(one).item(), 1.0);
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(mse(&mut g, a, c).is_err());
    }

    #[test]
    fn kaiming_statistics_and_determinism() {
        let mut r = rng(1);
        let fan_in = 8;
        let s = kaiming_init(&[100_000], fan_in, &mut r).unwrap();
        let mean: f64 = s.data().iter().sum::<f64>() / s.numel() as f64;
        let var: f64 =
            s.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / s.numel() as f64;
        let want = 2.0 / fan_in as f64;
        assert!((var - want).abs() / want < 0.05, "var {var} vs {want}");
        let again = kaiming_init(&[100_000], fan_in, &mut rng(1)).unwrap();
        assert_eq!(s.data(), again.data());
        assert!(kaiming_init(&[2], 0, &mut r).is_err());
    }

    #[test]
    fn stack_builds_and_runs() {
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut r = rng(9);
        let configs = [
            LayerConfig::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 2,
                bias: false,
            },
            LayerConfig::BatchNorm { features: 2 },
            LayerConfig::Relu,
            LayerConfig::Flatten,
            LayerConfig::Linear {
                in_features: 2 * 3 * 3,
                out_features: 4,
                bias: true,
            },
            LayerConfig::Dropout { rate: 0.5 },
        ];
        let layers = build_stack("enc", &configs, ParamGroup::Shared, &mut params, &mut buffers, &mut r)
            .unwrap();
        assert_eq!(params.len(), 5);
        let mut g = Graph::new();
        let staged = params.stage(&mut g);
        let x = g.constant(Tensor::filled(&[2, 1, 7, 7], 0.5));
        let y = forward_stack(&mut g, &layers, &staged, &mut buffers, x, true, &mut r).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4]);
    }

    #[test]
    fn param_store_rejects_duplicates() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::zeros(&[1]), ParamGroup::Shared).unwrap();
        assert!(p.add("w", Tensor::zeros(&[1]), ParamGroup::Shared).is_err());
    }
}
