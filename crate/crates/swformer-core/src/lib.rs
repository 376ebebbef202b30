//! Spiking wavelet transformer toolkit.
//!
//! From-scratch spiking neural networks built around a spiking Haar
//! transform: ternary neurons, a frequency-aware token mixer, desk-scale
//! surrogate-gradient training, and analysis tools for frequency spectra
//! and synaptic-operation energy accounting.

pub mod autograd;
pub mod error;
pub mod io;
pub mod neuron;
pub mod spike;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use neuron::{MembraneState, NeuronConfig, ResetRule};
pub use spike::{BlockDiagonalWeight, Polarity, SpikeTensor};
pub use tensor::DenseTensor;
pub use wavelet::{HaarMatrix, TransformMode, TransformResult};
