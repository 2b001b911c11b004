//! Named parameter storage, the SGD-with-momentum update, and binary
//! checkpoint I/O.
//!
//! Parameters live in one flat registry so the optimizer, the gradient
//! checker, and the checkpoint format all see the same canonical order (the
//! order of registration, which model construction keeps fixed).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const CHECKPOINT_MAGIC: &[u8; 5] = b"ATRW1";

/// Index of a parameter within its `ParamSet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    grad: Vec<f64>,
    velocity: Vec<f64>,
    grad_seen: bool,
}

impl Parameter {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; `init` is called once per element in order.
    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        mut init: impl FnMut(usize) -> f64,
    ) -> Result<ParamId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid("params", format!("parameter {name} has empty shape")));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid("params", format!("duplicate parameter name {name}")));
        }
        let len: usize = shape.iter().product();
        let values: Vec<f64> = (0..len).map(&mut init).collect();
        self.params.push(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            grad: vec![0.0; len],
            velocity: vec![0.0; len],
            grad_seen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].values
    }

    /// Adds `delta` elementwise into the parameter's gradient accumulator and
    /// marks it as populated for the next optimizer step.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.len(), delta.len());
        for (g, d) in p.grad.iter_mut().zip(delta) {
            *g += d;
        }
        p.grad_seen = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.grad_seen = false;
        }
    }

    /// Maps a registered shape onto the rank-4 layout graphs operate on:
    /// [co,ci,kh,kw] stays as is, [f,g] becomes a row matrix, [g] a channel
    /// vector.
    pub fn as_feature_map(&self, id: ParamId) -> FeatureMap {
        let p = &self.params[id.0];
        let v = p.values.clone();
        match p.shape.len() {
            4 => FeatureMap::from_vec(p.shape[0], p.shape[1], p.shape[2], p.shape[3], v).unwrap(),
            2 => FeatureMap::matrix(p.shape[0], p.shape[1], v).unwrap(),
            1 => FeatureMap::from_vec(1, p.shape[0], 1, 1, v).unwrap(),
            r => unreachable!("rank-{r} parameter registered"),
        }
    }

    /// One SGD-with-momentum step over every parameter:
    /// v <- momentum*v - lr*grad; theta <- theta + v. Gradients are cleared
    /// afterwards. Errors if any parameter is missing a gradient or any
    /// gradient is non-finite, leaving values untouched.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        for p in &self.params {
            if !p.grad_seen {
                return Err(Error::invalid(
                    "sgd_step",
                    format!("parameter {} has no accumulated gradient", p.name),
                ));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: "sgd_step".into(),
                    detail: format!("gradient of {} is non-finite", p.name),
                });
            }
        }
        for p in &mut self.params {
            for i in 0..p.values.len() {
                p.velocity[i] = momentum * p.velocity[i] - lr * p.grad[i];
                p.values[i] += p.velocity[i];
            }
            p.grad.fill(0.0);
            p.grad_seen = false;
        }
        Ok(())
    }

    /// Writes all parameters: magic, count, then per parameter the name
    /// (length-prefixed UTF-8), the shape (rank then dims), and the values.
    /// All integers u64 little-endian, values f64 little-endian.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u64).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.shape.len() as u64).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &p.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint into this set. Every stored parameter must match an
    /// existing parameter's name and shape, and every parameter must be
    /// covered; momentum state resets to zero.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                magic, CHECKPOINT_MAGIC
            )));
        }
        let count = read_u64(&mut r)? as usize;
        if count != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} parameters, model defines {}",
                self.params.len()
            )));
        }
        let mut seen = vec![false; self.params.len()];
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            if name_len > 4096 {
                return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| Error::Checkpoint("truncated parameter name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u64(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("implausible rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if seen[idx] {
                return Err(Error::Checkpoint(format!("parameter {name} appears twice")));
            }
            if self.params[idx].shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    shape, self.params[idx].shape
                )));
            }
            let len: usize = shape.iter().product();
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated values for {name}")))?;
            let p = &mut self.params[idx];
            for (i, chunk) in buf.chunks_exact(8).enumerate() {
                p.values[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            p.velocity.fill(0.0);
            p.grad.fill(0.0);
            p.grad_seen = false;
            seen[idx] = true;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
        }
        Ok(())
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated integer field".into()))?;
    Ok(u64::from_le_bytes(buf))
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn fan_in_init(fan_in: usize, rng: &mut crate::rng::RngStream) -> impl FnMut(usize) -> f64 + '_ {
    let bound = 1.0 / (fan_in as f64).sqrt();
    move |_| rng.uniform_in(-bound, bound)
}
