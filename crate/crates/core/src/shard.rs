//! Partitioning of the flat parameter vector across parameter servers and
//! the versioned per-shard store each server owns.

use thiserror::Error;

use crate::optim::{OptimConfig, OptimError, Optimizer};
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ShardError {
    #[error("cannot split {params} parameters into {shards} shards")]
    BadPartition { params: usize, shards: usize },
    #[error("shard {shard}: expected {expected} values, got {actual}")]
    Length {
        shard: u16,
        expected: usize,
        actual: usize,
    },
    #[error("shard {shard}: version {offered} offered while at {current} (must be {current} + 1)")]
    Version {
        shard: u16,
        current: u64,
        offered: u64,
    },
    #[error("shard {shard}: base version {base} is ahead of current version {current}")]
    FutureBase { shard: u16, base: u64, current: u64 },
    #[error("shard {0}: no optimizer state (store was not created for async updates)")]
    NoOptimizer(u16),
    #[error("shard {shard}: non-finite value at index {index}")]
    NonFinite { shard: u16, index: usize },
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShardSpec {
    pub shard_id: u16,
    pub offset: usize,
    pub len: usize,
}

impl ShardSpec {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Balanced contiguous split: the first `params % shards` shards get one
/// extra element.
pub fn make_shards(params: usize, shards: usize) -> Result<Vec<ShardSpec>, ShardError> {
    if shards == 0 || shards > params || shards > u16::MAX as usize + 1 {
        return Err(ShardError::BadPartition { params, shards });
    }
    let base = params / shards;
    let extra = params % shards;
    let mut offset = 0;
    Ok((0..shards)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let spec = ShardSpec {
                shard_id: i as u16,
                offset,
                len,
            };
            offset += len;
            spec
        })
        .collect())
}

/// Outcome of an asynchronous gradient application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Applied {
    pub new_version: u64,
    /// Updates applied between the pusher's fetch and this application.
    pub staleness: u64,
}

#[derive(Debug, Clone)]
pub struct ShardStore<T> {
    spec: ShardSpec,
    values: Vec<T>,
    version: u64,
    optim: Option<(OptimConfig, Optimizer<T>)>,
}

fn check_finite<T: Real>(shard: u16, values: &[T]) -> Result<(), ShardError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ShardError::NonFinite { shard, index }),
        None => Ok(()),
    }
}

impl<T: Real> ShardStore<T> {
    /// Plain versioned store, as used in sync mode where the chief owns the
    /// optimizer.
    pub fn new(spec: ShardSpec, values: Vec<T>) -> Result<Self, ShardError> {
        if values.len() != spec.len {
            return Err(ShardError::Length {
                shard: spec.shard_id,
                expected: spec.len,
                actual: values.len(),
            });
        }
        check_finite(spec.shard_id, &values)?;
        Ok(Self {
            spec,
            values,
            version: 0,
            optim: None,
        })
    }

    /// Store holding its own optimizer slice, for async updates.
    pub fn with_optimizer(
        spec: ShardSpec,
        values: Vec<T>,
        cfg: OptimConfig,
    ) -> Result<Self, ShardError> {
        let mut store = Self::new(spec, values)?;
        store.optim = Some((cfg, Optimizer::new(&cfg, spec.len)));
        Ok(store)
    }

    pub fn spec(&self) -> &ShardSpec {
        &self.spec
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn optimizer(&self) -> Option<&Optimizer<T>> {
        self.optim.as_ref().map(|(_, o)| o)
    }

    /// Snapshot of `(version, values)`; the pair is always consistent since
    /// the store is only touched by its owning task.
    pub fn read(&self) -> (u64, Vec<T>) {
        (self.version, self.values.clone())
    }

    pub fn write_params(&mut self, values: Vec<T>, new_version: u64) -> Result<u64, ShardError> {
        if new_version != self.version + 1 {
            return Err(ShardError::Version {
                shard: self.spec.shard_id,
                current: self.version,
                offered: new_version,
            });
        }
        if values.len() != self.spec.len {
            return Err(ShardError::Length {
                shard: self.spec.shard_id,
                expected: self.spec.len,
                actual: values.len(),
            });
        }
        check_finite(self.spec.shard_id, &values)?;
        self.values = values;
        self.version = new_version;
        Ok(self.version)
    }

    /// Applies one optimizer step to this slice whatever `base_version` the
    /// gradient was computed against, and reports how stale it was.
    pub fn apply_gradient_async(
        &mut self,
        grad: &[T],
        base_version: u64,
    ) -> Result<Applied, ShardError> {
        let shard = self.spec.shard_id;
        if grad.len() != self.spec.len {
            return Err(ShardError::Length {
                shard,
                expected: self.spec.len,
                actual: grad.len(),
            });
        }
        if base_version > self.version {
            return Err(ShardError::FutureBase {
                shard,
                base: base_version,
                current: self.version,
            });
        }
        let (cfg, opt) = self.optim.as_mut().ok_or(ShardError::NoOptimizer(shard))?;
        let mut next = self.values.clone();
        opt.step(&mut next, grad, cfg)?;
        check_finite(shard, &next)?;
        self.values = next;
        let staleness = self.version - base_version;
        self.version += 1;
        Ok(Applied {
            new_version: self.version,
            staleness,
        })
    }
}
