//! Desk-scale spiking neural network training with temporal shift feature
//! fusion.
//!
//! The crate provides:
//! - dense rank-4 `[T,C,H,W]` tensors with a recorded-operation reverse-mode
//!   differentiation engine ([`tape`]),
//! - leaky integrate-and-fire neuron layers with a rectangular surrogate
//!   gradient ([`lif`]),
//! - the temporal shift module: channel-segment shifts of one timestep with
//!   zero padding/truncation and a learnable residual penalty factor
//!   ([`tshift`]),
//! - declarative spiking CNNs with checkpoint persistence ([`network`],
//!   [`checkpoint`]),
//! - an SGD/cosine training loop ([`trainer`]), MAC/AC energy accounting
//!   ([`analysis`]), and synthetic temporal datasets ([`data`]).

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod lif;
pub mod network;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod tshift;

pub use error::{Error, Result};
pub use network::{Mode, Network, NetworkSpec};
pub use tensor::{Dims, SpikeTensor};
