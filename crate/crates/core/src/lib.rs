//! Distributed batch advantage actor-critic training on a single machine:
//! sharded parameter servers, synchronous chief aggregation or asynchronous
//! updates, and a small Catch environment to learn on.

pub mod algo;
pub mod cli;
pub mod env;
pub mod nncore;
pub mod optim;
pub mod real;
pub mod runtime;
pub mod shard;
pub mod telemetry;
pub mod transport;
