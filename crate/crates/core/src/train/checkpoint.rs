//! Binary checkpoints for model parameters, batchnorm running statistics,
//! and optimizer state.
//!
//! File layout: magic `GORT`, format version u32 LE, a sequence of named
//! tensor records (name length u32 LE + UTF-8 name, dim count u32 LE +
//! dims u32 LE, payload f64 LE), and a trailing CRC32 (LE) over every
//! preceding byte. All floats round-trip bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::multitask::MultiTaskModel;
use crate::tensor::Tensor;
use crate::train::optim::{MomentSlot, Optimizer, OptimizerKind};

const MAGIC: &[u8; 4] = b"GORT";
const VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const BUFFER_PREFIX: &str = "buffer.";
const MOMENT_M_PREFIX: &str = "optim.m.";
const MOMENT_V_PREFIX: &str = "optim.v.";

/// Deserialized checkpoint contents, keyed by the names the model and
/// optimizer use.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed epochs at save time.
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    /// Running-stat tensors as `(buffer name, mean, var)`.
    pub buffers: Vec<(String, Tensor, Tensor)>,
    pub optimizer_kind: OptimizerKind,
    pub learning_rate: f64,
    pub optimizer_step: u64,
    pub moments: Vec<MomentSlot>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &MultiTaskModel,
    optimizer: &Optimizer,
    epoch: usize,
) -> Result<()> {
    let mut records: Vec<(String, &[usize], Vec<f64>)> = Vec::new();
    records.push(("meta.epoch".into(), &[], vec![epoch as f64]));
    records.push((
        "meta.optim_kind".into(),
        &[],
        vec![match optimizer.kind {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::Adam => 1.0,
        }],
    ));
    records.push(("meta.lr".into(), &[], vec![optimizer.learning_rate]));
    records.push(("meta.step".into(), &[], vec![optimizer.step_count() as f64]));
    for e in model.params.entries() {
        records.push((
            format!("{PARAM_PREFIX}{}", e.name),
            e.value.shape(),
            e.value.data().to_vec(),
        ));
    }
    for (name, stats) in model.buffers.entries() {
        records.push((
            format!("{BUFFER_PREFIX}{name}.mean"),
            stats.mean.shape(),
            stats.mean.data().to_vec(),
        ));
        records.push((
            format!("{BUFFER_PREFIX}{name}.var"),
            stats.var.shape(),
            stats.var.data().to_vec(),
        ));
    }
    for slot in optimizer.slots() {
        records.push((
            format!("{MOMENT_M_PREFIX}{}", slot.name),
            slot.m.shape(),
            slot.m.data().to_vec(),
        ));
        records.push((
            format!("{MOMENT_V_PREFIX}{}", slot.name),
            slot.v.shape(),
            slot.v.data().to_vec(),
        ));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, shape, data) in &records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in *shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&crc32fast::hash(&out).to_le_bytes());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:02x?}",
            path.display(),
            &bytes[0..4]
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version} (expected {VERSION})",
            path.display()
        )));
    }

    let mut cursor = 8usize;
    let mut named: Vec<(String, Tensor)> = Vec::new();
    while cursor < body.len() {
        let (name, shape, data, next) = read_record(path, body, cursor)?;
        named.push((name, Tensor::new(shape, data)?));
        cursor = next;
    }
    assemble(path, named)
}

fn read_u32(path: &Path, body: &[u8], at: usize) -> Result<(u32, usize)> {
    if at + 4 > body.len() {
        return Err(Error::Checkpoint(format!(
            "{}: truncated record at byte {at}",
            path.display()
        )));
    }
    Ok((u32::from_le_bytes(body[at..at + 4].try_into().unwrap()), at + 4))
}

fn read_record(
    path: &Path,
    body: &[u8],
    at: usize,
) -> Result<(String, Vec<usize>, Vec<f64>, usize)> {
    let (name_len, mut cursor) = read_u32(path, body, at)?;
    let name_len = name_len as usize;
    if cursor + name_len > body.len() {
        return Err(Error::Checkpoint(format!(
            "{}: truncated name at byte {cursor}",
            path.display()
        )));
    }
    let name = std::str::from_utf8(&body[cursor..cursor + name_len])
        .map_err(|_| {
            Error::Checkpoint(format!("{}: record name is not UTF-8", path.display()))
        })?
        .to_string();
    cursor += name_len;
    let (ndims, mut cursor) = read_u32(path, body, cursor)?;
    let mut shape = Vec::with_capacity(ndims as usize);
    for _ in 0..ndims {
        let (d, next) = read_u32(path, body, cursor)?;
        shape.push(d as usize);
        cursor = next;
    }
    let numel: usize = shape.iter().product();
    if cursor + numel * 8 > body.len() {
        return Err(Error::Checkpoint(format!(
            "{}: truncated payload for {name:?}",
            path.display()
        )));
    }
    let data: Vec<f64> = body[cursor..cursor + numel * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, shape, data, cursor + numel * 8))
}

fn assemble(path: &Path, named: Vec<(String, Tensor)>) -> Result<Checkpoint> {
    let scalar = |key: &str| -> Result<f64> {
        named
            .iter()
            .find(|(n, _)| n == key)
            .map(|(_, t)| t.item())
            .ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing record {key:?}", path.display()))
            })
    };
    let epoch = scalar("meta.epoch")? as usize;
    let optimizer_kind = match scalar("meta.optim_kind")? {
        x if x == 0.0 => OptimizerKind::Sgd,
        x if x == 1.0 => OptimizerKind::Adam,
        x => {
            return Err(Error::Checkpoint(format!(
                "{}: unknown optimizer kind tag {x}",
                path.display()
            )))
        }
    };
    let learning_rate = scalar("meta.lr")?;
    let optimizer_step = scalar("meta.step")? as u64;

    let mut params = Vec::new();
    let mut means: Vec<(String, Tensor)> = Vec::new();
    let mut vars: Vec<(String, Tensor)> = Vec::new();
    let mut ms: Vec<(String, Tensor)> = Vec::new();
    let mut vs: Vec<(String, Tensor)> = Vec::new();
    for (name, tensor) in named {
        if let Some(rest) = name.strip_prefix(PARAM_PREFIX) {
            params.push((rest.to_string(), tensor));
        } else if let Some(rest) = name.strip_prefix(MOMENT_M_PREFIX) {
            ms.push((rest.to_string(), tensor));
        } else if let Some(rest) = name.strip_prefix(MOMENT_V_PREFIX) {
            vs.push((rest.to_string(), tensor));
        } else if let Some(rest) = name.strip_prefix(BUFFER_PREFIX) {
            if let Some(base) = rest.strip_suffix(".mean") {
                means.push((base.to_string(), tensor));
            } else if let Some(base) = rest.strip_suffix(".var") {
                vars.push((base.to_string(), tensor));
            } else {
                return Err(Error::Checkpoint(format!(
                    "{}: unrecognized buffer record {name:?}",
                    path.display()
                )));
            }
        }
    }

    let mut buffers = Vec::new();
    for (base, mean) in means {
        let var = vars
            .iter()
            .find(|(b, _)| *b == base)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{}: buffer {base:?} has a mean but no var record",
                    path.display()
                ))
            })?;
        buffers.push((base, mean, var));
    }

    let mut moments = Vec::new();
    for (name, m) in ms {
        let v = vs
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{}: moment {name:?} has m but no v record",
                    path.display()
                ))
            })?;
        moments.push(MomentSlot { name, m, v });
    }

    Ok(Checkpoint {
        epoch,
        params,
        buffers,
        optimizer_kind,
        learning_rate,
        optimizer_step,
        moments,
    })
}

impl Checkpoint {
    /// Write the stored values back into `model` and `optimizer`. Every
    /// checkpoint entry must match an existing parameter or buffer of the
    /// same shape, and the optimizer must have the stored kind and
    /// learning rate, so resuming under a different configuration fails
    /// loudly instead of silently diverging.
    pub fn apply(&self, model: &mut MultiTaskModel, optimizer: &mut Optimizer) -> Result<()> {
        if optimizer.kind != self.optimizer_kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint was saved with {:?} but the run uses {:?}",
                self.optimizer_kind, optimizer.kind
            )));
        }
        if optimizer.learning_rate != self.learning_rate {
            return Err(Error::Checkpoint(format!(
                "checkpoint learning rate {} does not match the run's {}",
                self.learning_rate, optimizer.learning_rate
            )));
        }
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters but the model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let entry = model
                .params
                .get_mut(name)
                .map_err(|_| Error::Checkpoint(format!("checkpoint parameter {name:?} does not exist in the model")))?;
            if entry.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?} in the model but {:?} in the checkpoint",
                    entry.value.shape(),
                    value.shape()
                )));
            }
            entry.value = value.clone();
        }
        for (name, mean, var) in &self.buffers {
            let stats = model.buffers.get_mut(name).map_err(|_| {
                Error::Checkpoint(format!("checkpoint buffer {name:?} does not exist in the model"))
            })?;
            if stats.mean.shape() != mean.shape() {
                return Err(Error::Checkpoint(format!(
                    "buffer {name:?} has shape {:?} in the model but {:?} in the checkpoint",
                    stats.mean.shape(),
                    mean.shape()
                )));
            }
            stats.mean = mean.clone();
            stats.var = var.clone();
        }
        optimizer.restore(self.optimizer_step, self.moments.clone());
        Ok(())
    }
}
